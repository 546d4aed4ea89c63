use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::{Record, RecordKind};

/// Conjunction of clauses; the default filter matches every record.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct QueryFilter {
    /// Empty means every kind.
    #[serde(default)]
    pub kinds: BTreeSet<RecordKind>,
    /// Inclusive lower timestamp bound.
    #[serde(default)]
    pub from: Option<u64>,
    /// Exclusive upper timestamp bound.
    #[serde(default)]
    pub to: Option<u64>,
    #[serde(default)]
    pub run_id: Option<String>,
    #[serde(default)]
    pub node_id: Option<String>,
    #[serde(default)]
    pub predicates: Vec<PayloadPredicate>,
}

/// Test on a payload field addressed by a dotted path (`metrics.alive`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum PayloadPredicate {
    Equals { key: String, value: Value },
    /// Numeric field with `min <= v <= max`.
    InRange { key: String, min: f64, max: f64 },
}

impl PayloadPredicate {
    pub fn matches(&self, payload: &Value) -> bool {
        match self {
            PayloadPredicate::Equals { key, value } => lookup(payload, key) == Some(value),
            PayloadPredicate::InRange { key, min, max } => lookup(payload, key)
                .and_then(Value::as_f64)
                .is_some_and(|v| *min <= v && v <= *max),
        }
    }
}

pub(crate) fn lookup<'a>(payload: &'a Value, path: &str) -> Option<&'a Value> {
    path.split('.').try_fold(payload, |v, part| v.get(part))
}

impl QueryFilter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn kind(mut self, kind: RecordKind) -> Self {
        self.kinds.insert(kind);
        self
    }

    pub fn run(mut self, run_id: impl Into<String>) -> Self {
        self.run_id = Some(run_id.into());
        self
    }

    pub fn node(mut self, node_id: impl Into<String>) -> Self {
        self.node_id = Some(node_id.into());
        self
    }

    pub fn between(mut self, from: u64, to: u64) -> Self {
        self.from = Some(from);
        self.to = Some(to);
        self
    }

    pub fn eq(mut self, key: impl Into<String>, value: impl Into<Value>) -> Self {
        self.predicates.push(PayloadPredicate::Equals {
            key: key.into(),
            value: value.into(),
        });
        self
    }

    pub fn range(mut self, key: impl Into<String>, min: f64, max: f64) -> Self {
        self.predicates.push(PayloadPredicate::InRange {
            key: key.into(),
            min,
            max,
        });
        self
    }

    /// Header-only clauses: kind, time, run and node.
    pub(crate) fn matches_header(
        &self,
        kind: RecordKind,
        timestamp: u64,
        run_id: Option<&str>,
        node_id: Option<&str>,
    ) -> bool {
        (self.kinds.is_empty() || self.kinds.contains(&kind))
            && self.from.is_none_or(|f| timestamp >= f)
            && self.to.is_none_or(|t| timestamp < t)
            && self.run_id.as_deref().is_none_or(|r| run_id == Some(r))
            && self.node_id.as_deref().is_none_or(|n| node_id == Some(n))
    }

    pub fn matches(&self, record: &Record) -> bool {
        self.matches_header(
            record.kind,
            record.timestamp,
            record.run_id.as_deref(),
            record.node_id.as_deref(),
        ) && self.predicates.iter().all(|p| p.matches(&record.payload))
    }
}
