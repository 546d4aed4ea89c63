//! Experiment descriptions: data model, `.desc` text format and validation.
//!
//! A description is the formal, storable, re-runnable definition of one
//! experiment: which nodes take part (grouped by role), which actions run on
//! them and when, how often the experiment is replicated, and which metrics
//! are collected. The text format is documented in `docs/descript-grammar.md`.

mod parse;
mod registry;
mod resolve;
mod serialize;
mod validate;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

pub use parse::{parse, ParseError, ParseErrorKind};
pub use registry::{ActionRegistry, CommandSpec, ParamKind, ParamSpec, RegistryError};
pub(crate) use resolve::direct_references;
pub use resolve::{resolve_groups, Resolution, ResolveError};
pub use serialize::serialize;
pub use validate::{validate, validate_with, Issue, IssueCode, ValidationReport};

/// Version written in the mandatory `format:` header line.
pub const FORMAT_VERSION: u32 = 1;

/// An experimental study: a hypothesis examined by an ordered series of experiments.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Study {
    pub id: String,
    pub title: String,
    pub hypothesis: String,
    experiments: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum StudyError {
    #[error("a study needs at least one experiment")]
    Empty,
    #[error("experiment `{0}` appears twice in the study")]
    DuplicateExperiment(String),
}

impl Study {
    pub fn new(
        id: impl Into<String>,
        title: impl Into<String>,
        hypothesis: impl Into<String>,
        experiments: Vec<String>,
    ) -> Result<Self, StudyError> {
        if experiments.is_empty() {
            return Err(StudyError::Empty);
        }
        let mut seen = std::collections::BTreeSet::new();
        for e in &experiments {
            if !seen.insert(e.as_str()) {
                return Err(StudyError::DuplicateExperiment(e.clone()));
            }
        }
        Ok(Self {
            id: id.into(),
            title: title.into(),
            hypothesis: hypothesis.into(),
            experiments,
        })
    }

    pub fn experiments(&self) -> &[String] {
        &self.experiments
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExperimentDescription {
    pub id: String,
    pub title: String,
    /// Free text of the general information section.
    pub description: String,
    /// Research topic used by usage reports; unknown or missing topics count as "other".
    pub topic: Option<String>,
    pub replications: u32,
    /// Length of the execute phase of one replication, in seconds.
    pub duration_limit: u64,
    pub traffic: Option<TrafficSpec>,
    pub groups: Vec<NodeGroup>,
    pub actions: Vec<Action>,
    pub metrics: Vec<MetricSpec>,
    pub cleanup: Vec<Action>,
}

impl ExperimentDescription {
    pub fn group(&self, name: &str) -> Option<&NodeGroup> {
        self.groups.iter().find(|g| g.name == name)
    }
}

/// Default traffic pattern and parameters merged into `start_traffic` actions.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrafficSpec {
    pub pattern: String,
    pub params: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NodeGroup {
    pub name: String,
    pub role: Role,
    pub selection: Selection,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Client,
    Server,
    Servent,
}

impl Role {
    pub fn as_str(self) -> &'static str {
        match self {
            Role::Client => "client",
            Role::Server => "server",
            Role::Servent => "servent",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        match s {
            "client" => Some(Role::Client),
            "server" => Some(Role::Server),
            "servent" => Some(Role::Servent),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Selection {
    /// Explicit node ids, in declaration order.
    Static(Vec<String>),
    /// `count` nodes matching `predicate`, chosen when a replication is prepared.
    Dynamic { count: u32, predicate: Predicate },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Predicate {
    BuildingEq(String),
    DegreeAtLeast(u32),
    Random,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Action {
    /// Group name, or a node id when no group has that name.
    pub target: String,
    pub command: String,
    pub params: BTreeMap<String, String>,
    /// Seconds from the start of the phase the action belongs to.
    pub start_offset: u64,
    pub timeout: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MetricSpec {
    pub name: String,
    pub unit: String,
    pub aggregation: Aggregation,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    MeanCi,
    FiveNumber,
    Histogram,
}

impl Aggregation {
    pub fn as_str(self) -> &'static str {
        match self {
            Aggregation::MeanCi => "mean_ci",
            Aggregation::FiveNumber => "five_number",
            Aggregation::Histogram => "histogram",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        match s {
            "mean_ci" => Some(Aggregation::MeanCi),
            "five_number" => Some(Aggregation::FiveNumber),
            "histogram" => Some(Aggregation::Histogram),
            _ => None,
        }
    }
}

/// Characters allowed in ids, group names, node ids, metric names and parameter keys.
pub fn is_identifier(s: &str) -> bool {
    !s.is_empty()
        && s
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || matches!(c, '_' | '-' | '.'))
}

/// A node as seen by validation and group resolution.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InventoryNode {
    pub id: String,
    pub building: String,
    pub up: bool,
    /// Number of neighbours currently reachable over a usable link.
    pub degree: u32,
}
