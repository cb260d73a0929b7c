//! HTTP+JSON wire layer for the OTA service.
//!
//! [`server`] exposes a shared [`ota_core::cloud::CloudService`] over axum,
//! [`client`] is the blocking counterpart used by agents and the operator
//! CLI, and [`loopback`] runs simulations over a real socket.

pub mod api;
pub mod client;
pub mod loopback;
pub mod server;

pub use client::{Client, ClientError, HttpLink};
pub use loopback::LoopbackHttp;
pub use server::{router, serve, ServerHandle};
