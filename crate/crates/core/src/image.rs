//! Byte formats for simulated deployable images.
//!
//! Every image is `magic[8] | u16 version_len | version | u32 body_len | body`
//! with big-endian integers. Model images carry `u32 meta_len | meta_json |
//! weights` as their body. A composed container is two length-prefixed parts:
//! `u32 len | container image | u32 len | model image`.

use thiserror::Error;

use crate::model::{ArtifactKind, ModelMetadata};
use crate::version::SemanticVersion;

pub const FIRMWARE_MAGIC: [u8; 8] = *b"SDVFIRM1";
pub const CONTAINER_MAGIC: [u8; 8] = *b"SDVCTNR1";
pub const MODEL_MAGIC: [u8; 8] = *b"SDVMODL1";

pub fn magic_for(kind: ArtifactKind) -> [u8; 8] {
    match kind {
        ArtifactKind::FirmwareBinary => FIRMWARE_MAGIC,
        ArtifactKind::ContainerImage => CONTAINER_MAGIC,
        ArtifactKind::AiModel => MODEL_MAGIC,
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ImageError {
    #[error("empty image")]
    Empty,
    #[error("truncated image")]
    Truncated,
    #[error("bad magic header")]
    BadMagic,
    #[error("bad version string")]
    BadVersion,
    #[error("declared length {declared} does not match {actual} available bytes")]
    LengthMismatch { declared: usize, actual: usize },
    #[error("bad model metadata: {0}")]
    BadMetadata(String),
}

/// A parsed image header plus body slice.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Image<'a> {
    pub kind: ArtifactKind,
    pub version: SemanticVersion,
    pub body: &'a [u8],
}

pub fn encode_image(kind: ArtifactKind, version: SemanticVersion, body: &[u8]) -> Vec<u8> {
    let version = version.to_string();
    let mut out = Vec::with_capacity(8 + 2 + version.len() + 4 + body.len());
    out.extend_from_slice(&magic_for(kind));
    out.extend_from_slice(&(version.len() as u16).to_be_bytes());
    out.extend_from_slice(version.as_bytes());
    out.extend_from_slice(&(body.len() as u32).to_be_bytes());
    out.extend_from_slice(body);
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], ImageError> {
        if self.bytes.len() < n {
            return Err(ImageError::Truncated);
        }
        let (head, tail) = self.bytes.split_at(n);
        self.bytes = tail;
        Ok(head)
    }

    fn u16(&mut self) -> Result<usize, ImageError> {
        let b = self.take(2)?;
        Ok(u16::from_be_bytes([b[0], b[1]]) as usize)
    }

    fn u32(&mut self) -> Result<usize, ImageError> {
        let b = self.take(4)?;
        Ok(u32::from_be_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }

    /// Reads a u32 length prefix and exactly that many bytes.
    fn prefixed(&mut self) -> Result<&'a [u8], ImageError> {
        let declared = self.u32()?;
        if declared > self.bytes.len() {
            return Err(ImageError::LengthMismatch {
                declared,
                actual: self.bytes.len(),
            });
        }
        self.take(declared)
    }
}

/// Structural validation: magic, version string and exact declared length.
pub fn decode_image(kind: ArtifactKind, bytes: &[u8]) -> Result<Image<'_>, ImageError> {
    if bytes.is_empty() {
        return Err(ImageError::Empty);
    }
    let mut r = Reader { bytes };
    if r.take(8)? != magic_for(kind) {
        return Err(ImageError::BadMagic);
    }
    let version_len = r.u16()?;
    let version = std::str::from_utf8(r.take(version_len)?)
        .ok()
        .and_then(|s| s.parse().ok())
        .ok_or(ImageError::BadVersion)?;
    let body = r.prefixed()?;
    if !r.bytes.is_empty() {
        return Err(ImageError::LengthMismatch {
            declared: body.len(),
            actual: body.len() + r.bytes.len(),
        });
    }
    Ok(Image {
        kind,
        version,
        body,
    })
}

pub fn encode_model_body(meta: &ModelMetadata, weights: &[u8]) -> Vec<u8> {
    let meta = serde_json::to_vec(meta).expect("model metadata serializes");
    let mut out = Vec::with_capacity(4 + meta.len() + weights.len());
    out.extend_from_slice(&(meta.len() as u32).to_be_bytes());
    out.extend_from_slice(&meta);
    out.extend_from_slice(weights);
    out
}

pub fn decode_model_body(body: &[u8]) -> Result<(ModelMetadata, &[u8]), ImageError> {
    let mut r = Reader { bytes: body };
    let meta = r.prefixed()?;
    let meta = serde_json::from_slice(meta).map_err(|e| ImageError::BadMetadata(e.to_string()))?;
    Ok((meta, r.bytes))
}

pub fn compose(container: &[u8], model: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + container.len() + model.len());
    out.extend_from_slice(&(container.len() as u32).to_be_bytes());
    out.extend_from_slice(container);
    out.extend_from_slice(&(model.len() as u32).to_be_bytes());
    out.extend_from_slice(model);
    out
}

/// Splits a composed payload back into `(container, model)`.
pub fn split_composed(bytes: &[u8]) -> Result<(&[u8], &[u8]), ImageError> {
    if bytes.is_empty() {
        return Err(ImageError::Empty);
    }
    let mut r = Reader { bytes };
    let container = r.prefixed()?;
    let model = r.prefixed()?;
    if !r.bytes.is_empty() {
        return Err(ImageError::LengthMismatch {
            declared: container.len() + model.len() + 8,
            actual: bytes.len(),
        });
    }
    Ok((container, model))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn meta(classes: &[&str]) -> ModelMetadata {
        ModelMetadata {
            accuracy: 0.91,
            evaluation_dataset: "lab-val".into(),
            detectable_classes: classes.iter().map(|c| c.to_string()).collect(),
        }
    }

    #[test]
    fn image_layout_is_fixed() {
        let img = encode_image(ArtifactKind::FirmwareBinary, SemanticVersion::new(2, 0, 0), b"xy");
        let mut expected = b"SDVFIRM1".to_vec();
        expected.extend_from_slice(&[0, 5]);
        expected.extend_from_slice(b"2.0.0");
        expected.extend_from_slice(&[0, 0, 0, 2]);
        expected.extend_from_slice(b"xy");
        assert_eq!(img, expected);
    }

    #[test]
    fn rejects_wrong_kind_and_lengths() {
        let img = encode_image(ArtifactKind::ContainerImage, SemanticVersion::new(1, 0, 0), b"abc");
        assert_eq!(decode_image(ArtifactKind::FirmwareBinary, &img), Err(ImageError::BadMagic));
        assert!(decode_image(ArtifactKind::ContainerImage, &img[..img.len() - 1]).is_err());
        let mut longer = img.clone();
        longer.push(0);
        assert!(decode_image(ArtifactKind::ContainerImage, &longer).is_err());
        assert_eq!(decode_image(ArtifactKind::ContainerImage, &[]), Err(ImageError::Empty));
    }

    #[test]
    fn model_body_roundtrip() {
        let body = encode_model_body(&meta(&["wooden-block", "robot"]), &[1, 2, 3]);
        let (m, weights) = decode_model_body(&body).unwrap();
        assert_eq!(m, meta(&["wooden-block", "robot"]));
        assert_eq!(weights, &[1, 2, 3]);
    }

    #[test]
    fn bad_length_prefix_is_rejected() {
        let mut composed = compose(b"container", b"model");
        composed[3] = 200;
        assert!(split_composed(&composed).is_err());
        assert!(split_composed(&[0, 0]).is_err());
    }

    proptest! {
        #[test]
        fn compose_split_inverse(a in proptest::collection::vec(any::<u8>(), 0..64),
                                 b in proptest::collection::vec(any::<u8>(), 0..64)) {
            let joined = compose(&a, &b);
            let (x, y) = split_composed(&joined).unwrap();
            prop_assert_eq!(x, &a[..]);
            prop_assert_eq!(y, &b[..]);
        }

        #[test]
        fn image_roundtrip(body in proptest::collection::vec(any::<u8>(), 0..256),
                           major in 0u64..100, kind in 0usize..3) {
            let kind = ArtifactKind::ALL[kind];
            let version = SemanticVersion::new(major, 1, 2);
            let bytes = encode_image(kind, version, &body);
            let img = decode_image(kind, &bytes).unwrap();
            prop_assert_eq!(img.version, version);
            prop_assert_eq!(img.body, &body[..]);
        }
    }
}
