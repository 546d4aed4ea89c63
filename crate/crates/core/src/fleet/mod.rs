//! Simulated node fleet: buildings, lossy links, churn and the node actions.
//!
//! Time inside a fleet is whole seconds since `spawn`. Everything a fleet
//! produces is a pure function of its config, its seed and the sequence of
//! calls made against it.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

mod control;
mod sim;
mod traffic;

pub use control::{handle_line, serve_connection, ControlError, FleetControl, ProtocolClient, Request, Response};
pub use sim::{Fleet, FleetHandle};

/// Interfaces every node carries, with their default channels.
pub const DEFAULT_INTERFACES: [(&str, u32); 3] = [("wlan0", 1), ("wlan1", 6), ("wlan2", 11)];

/// Probe count used by the monitor when none is configured.
pub const DEFAULT_PROBE_WINDOW: u32 = 10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FleetConfig {
    pub nodes: usize,
    #[serde(default = "default_buildings")]
    pub buildings: Vec<String>,
    /// Node id to building. Nodes not listed are spread over `buildings` in
    /// contiguous blocks.
    #[serde(default)]
    pub assignment: BTreeMap<String, String>,
    #[serde(default)]
    pub links: LinkModel,
    #[serde(default)]
    pub churn: Option<ChurnParams>,
    /// Upper bound on a single down period.
    #[serde(default)]
    pub watchdog_s: Option<u64>,
    #[serde(default)]
    pub seed: u64,
}

fn default_buildings() -> Vec<String> {
    ["A", "B", "C", "D"].iter().map(|s| s.to_string()).collect()
}

impl FleetConfig {
    /// Fleet with distance-generated links and no churn.
    pub fn new(nodes: usize, seed: u64) -> Self {
        Self {
            nodes,
            buildings: default_buildings(),
            assignment: BTreeMap::new(),
            links: LinkModel::default(),
            churn: None,
            watchdog_s: None,
            seed,
        }
    }

    pub fn node_id(index: usize) -> String {
        format!("n{}", index + 1)
    }

    pub fn validate(&self) -> Result<(), FleetError> {
        let bad = |m: String| Err(FleetError::InvalidConfig(m));
        if self.nodes == 0 {
            return bad("node count must be at least 1".into());
        }
        if self.buildings.is_empty() {
            return bad("at least one building is required".into());
        }
        for (node, building) in &self.assignment {
            if !self.is_node(node) {
                return bad(format!("assignment names unknown node {node}"));
            }
            if !self.buildings.contains(building) {
                return bad(format!("assignment names unknown building {building}"));
            }
        }
        match &self.links {
            LinkModel::Explicit { links } => {
                let mut seen = std::collections::BTreeSet::new();
                for l in links {
                    for n in [&l.a, &l.b] {
                        if !self.is_node(n) {
                            return bad(format!("link names unknown node {n}"));
                        }
                    }
                    if l.a == l.b {
                        return bad(format!("self link on {}", l.a));
                    }
                    for r in [l.df, l.dr] {
                        if !(0.0..=1.0).contains(&r) {
                            return bad(format!("delivery ratio {r} outside [0,1]"));
                        }
                    }
                    let key = if l.a < l.b { (&l.a, &l.b) } else { (&l.b, &l.a) };
                    if !seen.insert(key) {
                        return bad(format!("duplicate link {} {}", l.a, l.b));
                    }
                }
            }
            LinkModel::Distance(d) => {
                if !(d.range_m > 0.0 && d.width_m > 0.0 && d.depth_m > 0.0 && d.spacing_m >= 0.0)
                {
                    return bad("distance model dimensions must be positive".into());
                }
            }
        }
        if let Some(c) = &self.churn {
            if !(c.mean_up_s > 0.0 && c.mean_down_s > 0.0)
                || !c.mean_up_s.is_finite()
                || !c.mean_down_s.is_finite()
            {
                return bad("churn means must be positive".into());
            }
        }
        if self.watchdog_s == Some(0) {
            return bad("watchdog delay must be positive".into());
        }
        Ok(())
    }

    fn is_node(&self, id: &str) -> bool {
        id.strip_prefix('n')
            .and_then(|n| n.parse::<usize>().ok())
            .is_some_and(|n| n >= 1 && n <= self.nodes && id == Self::node_id(n - 1))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "model", rename_all = "snake_case")]
pub enum LinkModel {
    Explicit {
        #[serde(default)]
        links: Vec<LinkSpec>,
    },
    Distance(DistanceModel),
}

impl Default for LinkModel {
    fn default() -> Self {
        LinkModel::Distance(DistanceModel::default())
    }
}

/// `df` is the delivery ratio from `a` to `b`, `dr` the reverse.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinkSpec {
    pub a: String,
    pub b: String,
    pub df: f64,
    pub dr: f64,
}

/// Nodes are placed uniformly inside rectangular building footprints laid
/// out in a row; pairs closer than `range_m` share a link whose delivery
/// ratio falls off with distance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DistanceModel {
    pub range_m: f64,
    pub width_m: f64,
    pub depth_m: f64,
    /// Gap between neighbouring footprints.
    pub spacing_m: f64,
}

impl Default for DistanceModel {
    fn default() -> Self {
        Self {
            range_m: 30.0,
            width_m: 150.0,
            depth_m: 60.0,
            spacing_m: 20.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChurnParams {
    pub mean_up_s: f64,
    pub mean_down_s: f64,
}

impl ChurnParams {
    /// Chooses the mean up-time so that the long-run availability equals
    /// `availability` for the given down-time mean and watchdog.
    pub fn calibrated(availability: f64, mean_down_s: f64, watchdog_s: Option<u64>) -> Self {
        assert!(availability > 0.0 && availability < 1.0 && mean_down_s > 0.0);
        let down = effective_mean_down(mean_down_s, watchdog_s);
        Self {
            mean_up_s: availability / (1.0 - availability) * down,
            mean_down_s,
        }
    }

    /// Closed-form long-run availability of the up/down renewal process.
    pub fn availability(&self, watchdog_s: Option<u64>) -> f64 {
        let down = effective_mean_down(self.mean_down_s, watchdog_s);
        self.mean_up_s / (self.mean_up_s + down)
    }
}

/// E[min(D, w)] for exponential D.
pub fn effective_mean_down(mean_down_s: f64, watchdog_s: Option<u64>) -> f64 {
    match watchdog_s {
        Some(w) => mean_down_s * (1.0 - (-(w as f64) / mean_down_s).exp()),
        None => mean_down_s,
    }
}

/// Expected transmission count. Infinite when no probe gets through in one
/// of the two directions; serialized as `null` in that case.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd)]
pub struct Etx(f64);

impl Etx {
    pub const INFINITE: Etx = Etx(f64::INFINITY);

    pub fn value(self) -> f64 {
        self.0
    }

    pub fn is_infinite(self) -> bool {
        self.0.is_infinite()
    }
}

impl fmt::Display for Etx {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.is_infinite() {
            f.write_str("inf")
        } else {
            write!(f, "{}", self.0)
        }
    }
}

impl Serialize for Etx {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        if self.is_infinite() {
            s.serialize_none()
        } else {
            s.serialize_f64(self.0)
        }
    }
}

impl<'de> Deserialize<'de> for Etx {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let v = Option::<f64>::deserialize(d)?;
        match v {
            None => Ok(Etx::INFINITE),
            Some(x) if x >= 1.0 => Ok(Etx(x)),
            Some(x) => Err(serde::de::Error::custom(format!("etx {x} below 1"))),
        }
    }
}

/// `1/(df·dr)`; both ratios must lie in [0,1].
pub fn etx(df: f64, dr: f64) -> Result<Etx, FleetError> {
    for r in [df, dr] {
        if !(0.0..=1.0).contains(&r) {
            return Err(FleetError::Domain(r));
        }
    }
    let p = df * dr;
    Ok(if p == 0.0 { Etx::INFINITE } else { Etx(1.0 / p) })
}

/// One link as seen from the reporting node.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinkState {
    pub peer: String,
    pub df: f64,
    pub dr: f64,
    pub etx: Etx,
}

impl LinkState {
    pub fn from_estimates(peer: String, df: f64, dr: f64) -> Self {
        let etx = etx(df, dr).expect("estimates are ratios");
        Self { peer, df, dr, etx }
    }
}

/// Both directions of one undirected link, measured over the same probe
/// window.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeasuredLink {
    pub a: String,
    pub b: String,
    /// From `a`'s point of view.
    pub state: LinkState,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InterfaceState {
    pub name: String,
    pub channel: u32,
    pub tx_packets: u64,
    pub rx_packets: u64,
}

/// Configuration that must be back at its defaults between replications.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct NodeConfig {
    pub channels: Vec<u32>,
    pub traffic_running: bool,
    pub temp_data: bool,
}

impl Default for NodeConfig {
    fn default() -> Self {
        Self {
            channels: DEFAULT_INTERFACES.iter().map(|(_, c)| *c).collect(),
            traffic_running: false,
            temp_data: false,
        }
    }
}

/// Answer to a poll. A down node reports only its identity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeReport {
    pub node: String,
    pub building: String,
    pub up: bool,
    pub uptime_s: u64,
    pub boots: u64,
    #[serde(default)]
    pub interfaces: Vec<InterfaceState>,
    /// Nodes reachable over current links.
    #[serde(default)]
    pub routes: usize,
    #[serde(default)]
    pub links: Vec<LinkState>,
    #[serde(default)]
    pub config: Option<NodeConfig>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActionRequest {
    pub command: String,
    #[serde(default)]
    pub params: BTreeMap<String, String>,
    pub timeout: u64,
    #[serde(default)]
    pub seed: u64,
}

impl ActionRequest {
    pub fn new(command: impl Into<String>, timeout: u64) -> Self {
        Self {
            command: command.into(),
            params: BTreeMap::new(),
            timeout,
            seed: 0,
        }
    }

    pub fn param(mut self, k: impl Into<String>, v: impl Into<String>) -> Self {
        self.params.insert(k.into(), v.into());
        self
    }

    pub fn seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActionStatus {
    Ok,
    Failed,
    Timeout,
    NodeDown,
}

impl ActionStatus {
    pub fn as_str(self) -> &'static str {
        match self {
            ActionStatus::Ok => "ok",
            ActionStatus::Failed => "failed",
            ActionStatus::Timeout => "timeout",
            ActionStatus::NodeDown => "node_down",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActionResult {
    pub node: String,
    pub command: String,
    pub status: ActionStatus,
    /// Empty unless `status` is ok.
    pub metrics: BTreeMap<String, Vec<f64>>,
    pub started: u64,
    pub finished: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub detail: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChurnKind {
    Down,
    /// Watchdog or natural reboot; interface counters restart at zero.
    Up,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChurnEvent {
    pub time: u64,
    pub node: String,
    pub kind: ChurnKind,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum FleetError {
    #[error("invalid fleet config: {0}")]
    InvalidConfig(String),
    #[error("ratio {0} outside [0,1]")]
    Domain(f64),
    #[error("unknown node {0}")]
    UnknownNode(String),
    #[error("unknown command {0}")]
    UnknownCommand(String),
    #[error("probe window must be at least 1")]
    EmptyWindow,
}

impl FleetError {
    pub fn code(&self) -> &'static str {
        match self {
            FleetError::InvalidConfig(_) => "INVALID_CONFIG",
            FleetError::Domain(_) => "DOMAIN",
            FleetError::UnknownNode(_) => "UNKNOWN_NODE",
            FleetError::UnknownCommand(_) => "UNKNOWN_COMMAND",
            FleetError::EmptyWindow => "EMPTY_WINDOW",
        }
    }
}
