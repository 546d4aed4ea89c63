//! Periodic node polling into `monitoring_data` records, and availability
//! accounting over those records.
//!
//! Record payloads carry an `event` field: `poll` for a state sample,
//! `poll_gap` when a poll could not be answered, and `down` / `up` for churn
//! transitions observed by the fleet.

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::fleet::{ChurnEvent, ChurnKind, FleetControl, NodeReport, DEFAULT_PROBE_WINDOW};
use crate::store::{NewRecord, QueryFilter, RecordKind, Store, StoreError};

pub const DEFAULT_CADENCE_S: u64 = 60;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MonitorConfig {
    pub cadence_s: u64,
    pub probes: u32,
}

impl Default for MonitorConfig {
    fn default() -> Self {
        Self {
            cadence_s: DEFAULT_CADENCE_S,
            probes: DEFAULT_PROBE_WINDOW,
        }
    }
}

/// One stored poll sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MonitoringRecord {
    pub record_id: u64,
    pub timestamp: u64,
    pub report: NodeReport,
}

#[derive(Debug, thiserror::Error)]
pub enum MonitorError {
    #[error("no monitoring data for {node} in window")]
    NoData { node: String },
    #[error("empty window")]
    EmptyWindow,
    #[error(transparent)]
    Store(#[from] StoreError),
}

impl MonitorError {
    pub fn code(&self) -> &'static str {
        match self {
            MonitorError::NoData { .. } => "NO_DATA",
            MonitorError::EmptyWindow => "EMPTY_WINDOW",
            MonitorError::Store(_) => "STORE",
        }
    }
}

#[derive(Debug, Clone)]
pub struct Monitor {
    config: MonitorConfig,
    nodes: Vec<String>,
    next_poll: u64,
}

impl Monitor {
    /// `nodes` is the fleet inventory to poll; `first_poll` the time of the
    /// first cycle.
    pub fn new(config: MonitorConfig, nodes: Vec<String>, first_poll: u64) -> Self {
        assert!(config.cadence_s > 0, "cadence must be positive");
        Self {
            config,
            nodes,
            next_poll: first_poll,
        }
    }

    pub fn config(&self) -> MonitorConfig {
        self.config
    }

    pub fn next_poll(&self) -> u64 {
        self.next_poll
    }

    /// Polls every node once and schedules the next cycle.
    pub fn poll_all(
        &mut self,
        fleet: &mut dyn FleetControl,
        store: &Store,
    ) -> Result<Vec<MonitoringRecord>, StoreError> {
        self.next_poll += self.config.cadence_s;
        let mut out = Vec::with_capacity(self.nodes.len());
        for node in &self.nodes {
            match fleet.poll(node, self.config.probes) {
                Ok(report) => {
                    let mut payload = serde_json::to_value(&report).expect("reports serialize");
                    payload["event"] = json!("poll");
                    let id = store.append(NewRecord::new(RecordKind::MonitoringData, payload).node(node))?;
                    let rec = store.get(id).expect("just appended");
                    out.push(MonitoringRecord {
                        record_id: id,
                        timestamp: rec.timestamp,
                        report,
                    });
                }
                Err(e) => {
                    log::warn!("poll of {node} failed: {e}");
                    store.append(
                        NewRecord::new(
                            RecordKind::MonitoringData,
                            json!({"event": "poll_gap", "code": e.code(), "message": e.to_string()}),
                        )
                        .node(node),
                    )?;
                }
            }
        }
        Ok(out)
    }

    /// Stores churn transitions as they are reported by the fleet.
    pub fn record_churn(&self, store: &Store, events: &[ChurnEvent]) -> Result<(), StoreError> {
        for e in events {
            let event = match e.kind {
                ChurnKind::Down => "down",
                ChurnKind::Up => "up",
            };
            store.append(
                NewRecord::new(
                    RecordKind::MonitoringData,
                    json!({"event": event, "counters_reset": e.kind == ChurnKind::Up}),
                )
                .node(&e.node),
            )?;
        }
        Ok(())
    }
}

/// Up/down split of a window.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Availability {
    /// Start of integration: the first sample inside the window.
    pub from: u64,
    pub to: u64,
    pub up_s: u64,
    pub down_s: u64,
    pub samples: usize,
}

impl Availability {
    pub fn ratio(&self) -> f64 {
        self.up_s as f64 / (self.up_s + self.down_s).max(1) as f64
    }

    /// Always exactly `1 - ratio()`.
    pub fn downtime_fraction(&self) -> f64 {
        1.0 - self.ratio()
    }
}

/// Zero-order-hold integration of `(time, up)` samples over `[from, to)`.
/// Samples must be time-ordered; those outside the window are ignored.
pub fn integrate(samples: &[(u64, bool)], from: u64, to: u64) -> Option<Availability> {
    let inside: Vec<(u64, bool)> = samples
        .iter()
        .copied()
        .filter(|&(t, _)| t >= from && t < to)
        .collect();
    let first = inside.first()?.0;
    let mut up_s = 0;
    let mut down_s = 0;
    for (k, &(t, up)) in inside.iter().enumerate() {
        let end = inside.get(k + 1).map_or(to, |s| s.0);
        let span = end - t;
        if up {
            up_s += span;
        } else {
            down_s += span;
        }
    }
    if up_s + down_s == 0 {
        // Degenerate window [t, t+0): treat the lone sample as covering one second.
        let up = inside[0].1;
        return Some(Availability {
            from: first,
            to,
            up_s: up as u64,
            down_s: (!up) as u64,
            samples: inside.len(),
        });
    }
    Some(Availability {
        from: first,
        to,
        up_s,
        down_s,
        samples: inside.len(),
    })
}

/// Availability of `node` over `[from, to)` from stored poll samples.
pub fn availability(store: &Store, node: &str, from: u64, to: u64) -> Result<Availability, MonitorError> {
    if to <= from {
        return Err(MonitorError::EmptyWindow);
    }
    let filter = QueryFilter::new()
        .kind(RecordKind::MonitoringData)
        .node(node)
        .between(from, to)
        .eq("event", "poll");
    let mut samples = Vec::new();
    store.scan(&filter, |r| {
        let up = r.payload.get("up").and_then(|v| v.as_bool()).unwrap_or(false);
        samples.push((r.timestamp, up));
    });
    integrate(&samples, from, to).ok_or_else(|| MonitorError::NoData { node: node.to_string() })
}
