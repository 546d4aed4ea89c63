use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use chrono::{NaiveDate, TimeZone, Utc};
use serde::{Deserialize, Serialize};

use super::histogram::{histogram, Bin};
use super::EvalError;
use crate::monitor::integrate;
use crate::store::{Record, RecordKind};

/// Topic labels reported as their own rows; anything else is "other".
pub const TOPICS: [&str; 11] = [
    "Application Layer",
    "Channel Assignment",
    "Localization",
    "MAC",
    "Mobility",
    "Routing",
    "Security",
    "Service Placement",
    "Tracking",
    "Transport Layer",
    "WSN",
];

pub const OTHER_TOPIC: &str = "other";

/// Maps a free-form topic to its row label.
pub fn canonical_topic(topic: Option<&str>) -> &'static str {
    let squash = |s: &str| -> String {
        s.chars()
            .filter(|c| c.is_alphanumeric())
            .flat_map(char::to_lowercase)
            .collect()
    };
    let Some(t) = topic else { return OTHER_TOPIC };
    let t = squash(t);
    TOPICS.iter().find(|k| squash(k) == t).copied().unwrap_or(OTHER_TOPIC)
}

/// Half-open `[from, to)` window of store timestamps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Period {
    pub from: u64,
    pub to: u64,
}

impl Period {
    /// Calendar year in UTC.
    pub fn year(y: i32) -> Result<Self, EvalError> {
        let start = |y| {
            Utc.with_ymd_and_hms(y, 1, 1, 0, 0, 0)
                .single()
                .map(|t| t.timestamp())
                .filter(|&t| t >= 0)
                .ok_or_else(|| EvalError::BadPeriod(format!("year {y}")))
        };
        Ok(Self {
            from: start(y)? as u64,
            to: start(y + 1)? as u64,
        })
    }

    pub fn contains(&self, t: u64) -> bool {
        self.from <= t && t < self.to
    }
}

impl FromStr for Period {
    type Err = EvalError;

    /// `2011`, `from..to` in epoch seconds, or `YYYY-MM-DD..YYYY-MM-DD`.
    fn from_str(s: &str) -> Result<Self, EvalError> {
        let s = s.trim();
        let bad = || EvalError::BadPeriod(s.to_string());
        if let Some((a, b)) = s.split_once("..") {
            let point = |p: &str| -> Result<u64, EvalError> {
                if let Ok(n) = p.parse::<u64>() {
                    return Ok(n);
                }
                let d = NaiveDate::parse_from_str(p, "%Y-%m-%d").map_err(|_| bad())?;
                let t = d.and_hms_opt(0, 0, 0).ok_or_else(bad)?.and_utc().timestamp();
                u64::try_from(t).map_err(|_| bad())
            };
            let p = Period { from: point(a.trim())?, to: point(b.trim())? };
            if p.to <= p.from {
                return Err(bad());
            }
            return Ok(p);
        }
        if s.len() == 4 {
            if let Ok(y) = s.parse::<i32>() {
                return Period::year(y);
            }
        }
        Err(bad())
    }
}

impl fmt::Display for Period {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}..{}", self.from, self.to)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TopicRow {
    pub topic: String,
    pub count: u64,
    pub hours: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeAvailability {
    pub node: String,
    /// Percent of the sampled window the node was up.
    pub availability: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UsageReport {
    pub period: Period,
    pub experiments: u64,
    pub max_runtime_h: f64,
    pub mean_runtime_h: f64,
    pub max_nodes: u64,
    pub mean_nodes: f64,
    pub users: u64,
    pub mean_experiments_per_user: f64,
    pub topics: Vec<TopicRow>,
    pub mean_availability: Option<f64>,
    pub availability: Vec<NodeAvailability>,
    pub runtime_histogram: Vec<Bin>,
    pub node_histogram: Vec<Bin>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UsageOptions {
    pub runtime_bin_h: f64,
    pub node_bin: f64,
}

impl Default for UsageOptions {
    fn default() -> Self {
        Self {
            runtime_bin_h: 1.0,
            node_bin: 1.0,
        }
    }
}

/// One experiment as seen in an `entry_finished` event.
#[derive(Debug, Clone, PartialEq)]
pub struct FinishedEntry {
    pub owner: String,
    pub topic: Option<String>,
    pub node_count: u64,
    pub activated: u64,
    pub finished: u64,
}

impl FinishedEntry {
    /// `None` unless the record is an `entry_finished` event of an entry
    /// that actually started.
    pub fn from_record(r: &Record) -> Option<Self> {
        if r.kind != RecordKind::RunEvent || r.payload.get("event")?.as_str()? != "entry_finished" {
            return None;
        }
        let p = &r.payload;
        Some(Self {
            owner: p.get("owner")?.as_str()?.to_string(),
            topic: p.get("topic").and_then(|t| t.as_str()).map(str::to_string),
            node_count: p.get("node_count")?.as_u64()?,
            activated: p.get("activated")?.as_u64()?,
            finished: p.get("finished")?.as_u64()?,
        })
    }

    pub fn runtime_s(&self) -> u64 {
        self.finished.saturating_sub(self.activated)
    }
}

pub fn usage_report(records: &[Record], period: Period) -> Result<UsageReport, EvalError> {
    usage_report_with(records, period, UsageOptions::default())
}

/// Experiments are attributed to the period they were activated in.
pub fn usage_report_with(records: &[Record], period: Period, opts: UsageOptions) -> Result<UsageReport, EvalError> {
    let entries: Vec<FinishedEntry> = records
        .iter()
        .filter_map(FinishedEntry::from_record)
        .filter(|e| period.contains(e.activated))
        .collect();
    if entries.is_empty() {
        return Err(EvalError::EmptyPeriod(period.to_string()));
    }
    let n = entries.len() as u64;
    let runtime_h: Vec<f64> = entries.iter().map(|e| e.runtime_s() as f64 / 3600.0).collect();
    let total_s: u64 = entries.iter().map(FinishedEntry::runtime_s).sum();
    let nodes: Vec<f64> = entries.iter().map(|e| e.node_count as f64).collect();
    let users: BTreeSet<&str> = entries.iter().map(|e| e.owner.as_str()).collect();

    let mut by_topic: BTreeMap<&str, (u64, u64)> = BTreeMap::new();
    for e in &entries {
        let row = by_topic.entry(canonical_topic(e.topic.as_deref())).or_default();
        row.0 += 1;
        row.1 += e.runtime_s();
    }
    let topics: Vec<TopicRow> = TOPICS
        .iter()
        .chain(std::iter::once(&OTHER_TOPIC))
        .filter_map(|&t| {
            let (count, secs) = by_topic.get(t).copied().unwrap_or_default();
            (t != OTHER_TOPIC || count > 0).then(|| TopicRow {
                topic: t.to_string(),
                count,
                hours: secs as f64 / 3600.0,
            })
        })
        .collect();

    let availability = node_availability(records, period);
    let mean_availability = (!availability.is_empty())
        .then(|| availability.iter().map(|a| a.availability).sum::<f64>() / availability.len() as f64);

    Ok(UsageReport {
        period,
        experiments: n,
        max_runtime_h: entries.iter().map(FinishedEntry::runtime_s).max().unwrap_or(0) as f64 / 3600.0,
        mean_runtime_h: total_s as f64 / 3600.0 / n as f64,
        max_nodes: entries.iter().map(|e| e.node_count).max().unwrap_or(0),
        mean_nodes: nodes.iter().sum::<f64>() / n as f64,
        users: users.len() as u64,
        mean_experiments_per_user: n as f64 / users.len() as f64,
        topics,
        mean_availability,
        availability,
        runtime_histogram: histogram(&runtime_h, opts.runtime_bin_h)?,
        node_histogram: histogram(&nodes, opts.node_bin)?,
    })
}

/// Per-node availability from poll samples inside the period.
pub fn node_availability(records: &[Record], period: Period) -> Vec<NodeAvailability> {
    let mut samples: BTreeMap<&str, Vec<(u64, bool)>> = BTreeMap::new();
    for r in records {
        if r.kind != RecordKind::MonitoringData || !period.contains(r.timestamp) {
            continue;
        }
        if r.payload.get("event").and_then(|e| e.as_str()) != Some("poll") {
            continue;
        }
        let (Some(node), Some(up)) = (r.node_id.as_deref(), r.payload.get("up").and_then(|u| u.as_bool())) else {
            continue;
        };
        samples.entry(node).or_default().push((r.timestamp, up));
    }
    samples
        .into_iter()
        .filter_map(|(node, mut s)| {
            s.sort_by_key(|x| x.0);
            integrate(&s, period.from, period.to).map(|a| NodeAvailability {
                node: node.to_string(),
                availability: 100.0 * a.ratio(),
            })
        })
        .collect()
}
