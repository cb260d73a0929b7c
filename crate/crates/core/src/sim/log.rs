use std::fmt;

use serde::{Deserialize, Serialize};

use crate::agent::{Effect, Phase};
use crate::cloud::ServiceEvent;
use crate::Millis;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub seq: u64,
    pub t: Millis,
    pub source: String,
    #[serde(flatten)]
    pub entry: LogEntry,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum LogEntry {
    SimStart {
        scenario: String,
        seed: u64,
        vehicles: usize,
    },
    Scripted {
        action: String,
        ok: bool,
        detail: String,
    },
    Service {
        event: ServiceEvent,
    },
    AgentTick {
        vehicle_id: String,
        from: Phase,
        to: Phase,
        effects: Vec<Effect>,
        latency_ms: Option<Millis>,
    },
    Assertion {
        index: usize,
        description: String,
        passed: bool,
        detail: String,
    },
    SimStop {
        reason: String,
        vehicles: usize,
    },
}

/// Totally ordered record of a run.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct EventLog {
    pub records: Vec<LogRecord>,
}

impl EventLog {
    pub fn push(&mut self, t: Millis, source: impl Into<String>, entry: LogEntry) {
        let seq = self.records.len() as u64;
        self.records.push(LogRecord {
            seq,
            t,
            source: source.into(),
            entry,
        });
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn lines(&self) -> Vec<String> {
        self.records
            .iter()
            .map(|r| serde_json::to_string(r).expect("log record serializes"))
            .collect()
    }

    /// Line-delimited JSON, one record per line.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for line in self.lines() {
            out.push_str(&line);
            out.push('\n');
        }
        out
    }

    pub fn from_jsonl(text: &str) -> Result<Self, serde_json::Error> {
        let records = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(serde_json::from_str)
            .collect::<Result<_, _>>()?;
        Ok(Self { records })
    }

    /// Copy with every `latency_ms` field cleared.
    pub fn without_latency(&self) -> Self {
        let mut out = self.clone();
        for r in &mut out.records {
            if let LogEntry::AgentTick { latency_ms, .. } = &mut r.entry {
                *latency_ms = None;
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Divergence {
    /// 0-based line index.
    pub line: usize,
    pub left: Option<String>,
    pub right: Option<String>,
}

impl fmt::Display for Divergence {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let show = |s: &Option<String>| s.clone().unwrap_or_else(|| "<end of log>".into());
        write!(
            f,
            "logs diverge at line {}:\n  left:  {}\n  right: {}",
            self.line + 1,
            show(&self.left),
            show(&self.right)
        )
    }
}

/// Byte-level comparison of two serialized logs.
pub fn replay_check(a: &EventLog, b: &EventLog) -> Result<(), Divergence> {
    replay_check_jsonl(&a.to_jsonl(), &b.to_jsonl())
}

pub fn replay_check_jsonl(a: &str, b: &str) -> Result<(), Divergence> {
    if a == b {
        return Ok(());
    }
    let (la, lb): (Vec<&str>, Vec<&str>) = (a.lines().collect(), b.lines().collect());
    let line = (0..la.len().max(lb.len()))
        .find(|&i| la.get(i) != lb.get(i))
        // Same lines, different trailing bytes.
        .unwrap_or(la.len());
    Err(Divergence {
        line,
        left: la.get(line).map(|s| s.to_string()),
        right: lb.get(line).map(|s| s.to_string()),
    })
}
