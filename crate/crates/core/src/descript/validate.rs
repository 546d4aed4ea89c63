use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::registry::{ActionRegistry, ParamKind};
use super::resolve::{direct_references, resolve_groups, ResolveError};
use super::{Action, ExperimentDescription, InventoryNode, Predicate, Selection};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum IssueCode {
    ReplicationsPositive,
    GroupUndeclared,
    GroupUnsatisfiable,
    GroupEmpty,
    CountPositive,
    NodeUnknown,
    DuplicateNode,
    NodeInMultipleGroups,
    TooManyNodes,
    OffsetOutOfRange,
    TimeoutPositive,
    UnknownCommand,
    MissingParam,
    UnknownParam,
    BadParam,
    BadTraffic,
    DuplicateMetric,
    NoActions,
    MetricNotProduced,
}

impl IssueCode {
    pub fn as_str(self) -> &'static str {
        match self {
            IssueCode::ReplicationsPositive => "REPLICATIONS_POSITIVE",
            IssueCode::GroupUndeclared => "GROUP_UNDECLARED",
            IssueCode::GroupUnsatisfiable => "GROUP_UNSATISFIABLE",
            IssueCode::GroupEmpty => "GROUP_EMPTY",
            IssueCode::CountPositive => "COUNT_POSITIVE",
            IssueCode::NodeUnknown => "NODE_UNKNOWN",
            IssueCode::DuplicateNode => "DUPLICATE_NODE",
            IssueCode::NodeInMultipleGroups => "NODE_IN_MULTIPLE_GROUPS",
            IssueCode::TooManyNodes => "TOO_MANY_NODES",
            IssueCode::OffsetOutOfRange => "OFFSET_OUT_OF_RANGE",
            IssueCode::TimeoutPositive => "TIMEOUT_POSITIVE",
            IssueCode::UnknownCommand => "UNKNOWN_COMMAND",
            IssueCode::MissingParam => "MISSING_PARAM",
            IssueCode::UnknownParam => "UNKNOWN_PARAM",
            IssueCode::BadParam => "BAD_PARAM",
            IssueCode::BadTraffic => "BAD_TRAFFIC",
            IssueCode::DuplicateMetric => "DUPLICATE_METRIC",
            IssueCode::NoActions => "NO_ACTIONS",
            IssueCode::MetricNotProduced => "METRIC_NOT_PRODUCED",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Issue {
    pub code: IssueCode,
    /// Where in the description: `experiment`, `group <name>`, `action <n>`, `cleanup <n>`, `metrics`.
    pub location: String,
    pub message: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub errors: Vec<Issue>,
    pub warnings: Vec<Issue>,
}

impl ValidationReport {
    /// True when the description can be scheduled.
    pub fn is_ok(&self) -> bool {
        self.errors.is_empty()
    }

    pub fn has(&self, code: IssueCode) -> bool {
        self.errors.iter().any(|i| i.code == code)
    }

    fn error(&mut self, code: IssueCode, location: impl Into<String>, message: impl Into<String>) {
        self.errors.push(Issue {
            code,
            location: location.into(),
            message: message.into(),
        });
    }

    fn warn(&mut self, code: IssueCode, location: impl Into<String>, message: impl Into<String>) {
        self.warnings.push(Issue {
            code,
            location: location.into(),
            message: message.into(),
        });
    }
}

impl std::fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        for (k, i) in self.errors.iter().enumerate() {
            if k > 0 {
                f.write_str("; ")?;
            }
            write!(f, "{} at {}: {}", i.code.as_str(), i.location, i.message)?;
        }
        Ok(())
    }
}

/// Checks `desc` against an inventory snapshot using the fleet's action vocabulary.
pub fn validate(desc: &ExperimentDescription, inventory: &[InventoryNode]) -> ValidationReport {
    validate_with(desc, inventory, &ActionRegistry::fleet())
}

pub fn validate_with(
    desc: &ExperimentDescription,
    inventory: &[InventoryNode],
    registry: &ActionRegistry,
) -> ValidationReport {
    let mut report = ValidationReport::default();
    let known: BTreeSet<&str> = inventory.iter().map(|n| n.id.as_str()).collect();

    if desc.replications == 0 {
        report.error(
            IssueCode::ReplicationsPositive,
            "experiment",
            "replications must be at least 1",
        );
    }

    let mut owner: BTreeMap<&str, &str> = BTreeMap::new();
    for group in &desc.groups {
        let loc = format!("group {}", group.name);
        match &group.selection {
            Selection::Static(nodes) => {
                if nodes.is_empty() {
                    report.error(IssueCode::GroupEmpty, &loc, "static group lists no nodes");
                }
                let mut seen = BTreeSet::new();
                for n in nodes {
                    if !seen.insert(n.as_str()) {
                        report.error(IssueCode::DuplicateNode, &loc, format!("node `{n}` listed twice"));
                        continue;
                    }
                    if !known.contains(n.as_str()) {
                        report.error(IssueCode::NodeUnknown, &loc, format!("node `{n}` is not in the inventory"));
                    }
                    if let Some(prev) = owner.insert(n, &group.name) {
                        report.error(
                            IssueCode::NodeInMultipleGroups,
                            &loc,
                            format!("node `{n}` is also in group `{prev}`"),
                        );
                    }
                }
            }
            Selection::Dynamic { count, predicate } => {
                if *count == 0 {
                    report.error(IssueCode::CountPositive, &loc, "dynamic count must be at least 1");
                }
                let matching = inventory
                    .iter()
                    .filter(|n| {
                        n.up && match predicate {
                            Predicate::BuildingEq(b) => &n.building == b,
                            Predicate::DegreeAtLeast(d) => n.degree >= *d,
                            Predicate::Random => true,
                        }
                    })
                    .count();
                if matching < *count as usize {
                    report.error(
                        IssueCode::GroupUnsatisfiable,
                        &loc,
                        format!("wants {count} nodes but the predicate matches {matching}"),
                    );
                }
            }
        }
    }

    if desc.actions.is_empty() {
        report.warn(IssueCode::NoActions, "experiment", "no actions are scheduled");
    }
    for (i, action) in desc.actions.iter().enumerate() {
        check_action(desc, registry, &known, action, &format!("action {}", i + 1), &mut report);
    }
    for (i, action) in desc.cleanup.iter().enumerate() {
        check_action(desc, registry, &known, action, &format!("cleanup {}", i + 1), &mut report);
    }

    if let Some(traffic) = &desc.traffic {
        let allowed = registry
            .get("start_traffic")
            .and_then(|s| s.param("pattern"))
            .map(|p| &p.kind);
        if let Some(ParamKind::OneOf(options)) = allowed {
            if !options.contains(&traffic.pattern) {
                report.error(
                    IssueCode::BadTraffic,
                    "experiment",
                    format!("traffic pattern `{}` is not one of {}", traffic.pattern, options.join(", ")),
                );
            }
        }
    }

    let mut metric_names = BTreeSet::new();
    let produced: BTreeSet<&str> = desc
        .actions
        .iter()
        .filter_map(|a| registry.get(&a.command))
        .flat_map(|s| s.emits.iter().map(String::as_str))
        .collect();
    for m in &desc.metrics {
        if !metric_names.insert(m.name.as_str()) {
            report.error(IssueCode::DuplicateMetric, "metrics", format!("metric `{}` declared twice", m.name));
        }
        if !produced.contains(m.name.as_str()) {
            report.warn(
                IssueCode::MetricNotProduced,
                "metrics",
                format!("no action reports metric `{}`", m.name),
            );
        }
    }

    let fixed: BTreeSet<&str> = desc
        .groups
        .iter()
        .filter_map(|g| match &g.selection {
            Selection::Static(n) => Some(n.iter().map(String::as_str)),
            Selection::Dynamic { .. } => None,
        })
        .flatten()
        .collect();
    let direct = direct_references(desc, registry);
    let extra = direct.iter().filter(|d| !fixed.contains(d.as_str())).count();
    let dynamic: u64 = desc
        .groups
        .iter()
        .map(|g| match &g.selection {
            Selection::Dynamic { count, .. } => u64::from(*count),
            Selection::Static(_) => 0,
        })
        .sum();
    let requested = fixed.len() as u64 + extra as u64 + dynamic;
    if requested > inventory.len() as u64 {
        report.error(
            IssueCode::TooManyNodes,
            "experiment",
            format!("requests {requested} nodes, inventory has {}", inventory.len()),
        );
    }

    // Joint assignment, the same one the scheduler performs.
    if report.is_ok() {
        if let Err(e) = resolve_groups(desc, registry, inventory, None) {
            let message = e.to_string();
            match e {
                ResolveError::Unsatisfiable { group, .. } => report.error(
                    IssueCode::GroupUnsatisfiable,
                    format!("group {group}"),
                    message,
                ),
                ResolveError::Unavailable(n) => report.error(
                    IssueCode::NodeUnknown,
                    "experiment",
                    format!("node `{n}` is not in the inventory"),
                ),
                ResolveError::Conflict(n) => report.error(
                    IssueCode::NodeInMultipleGroups,
                    "experiment",
                    format!("node `{n}` is claimed twice"),
                ),
            }
        }
    }
    report
}

fn check_action(
    desc: &ExperimentDescription,
    registry: &ActionRegistry,
    known: &BTreeSet<&str>,
    action: &Action,
    loc: &str,
    report: &mut ValidationReport,
) {
    let reference_ok = |r: &str| desc.group(r).is_some() || known.contains(r);
    if !reference_ok(&action.target) {
        report.error(
            IssueCode::GroupUndeclared,
            loc,
            format!("target `{}` is neither a declared group nor a known node", action.target),
        );
    }
    if action.timeout == 0 {
        report.error(IssueCode::TimeoutPositive, loc, "timeout must be positive");
    }
    if action.start_offset > desc.duration_limit {
        report.error(
            IssueCode::OffsetOutOfRange,
            loc,
            format!(
                "start offset {} exceeds the duration limit {}",
                action.start_offset, desc.duration_limit
            ),
        );
    }
    let Some(spec) = registry.get(&action.command) else {
        report.error(
            IssueCode::UnknownCommand,
            loc,
            format!("command `{}` is not in the fleet vocabulary", action.command),
        );
        return;
    };
    for p in &spec.params {
        let inherited = p.name == "pattern" && action.command == "start_traffic" && desc.traffic.is_some();
        match action.params.get(&p.name) {
            None if p.required && !inherited => report.error(
                IssueCode::MissingParam,
                loc,
                format!("`{}` needs parameter `{}`", spec.name, p.name),
            ),
            None => {}
            Some(v) => {
                let ok = match &p.kind {
                    ParamKind::Int => v.parse::<u64>().is_ok_and(|n| n > 0),
                    ParamKind::Number => v.parse::<f64>().is_ok_and(|n| n.is_finite() && n > 0.0),
                    ParamKind::Word => super::is_identifier(v),
                    ParamKind::OneOf(options) => options.contains(v),
                    ParamKind::Node => {
                        if !reference_ok(v) {
                            report.error(
                                IssueCode::GroupUndeclared,
                                loc,
                                format!("parameter `{}` names unknown group or node `{v}`", p.name),
                            );
                        }
                        true
                    }
                };
                if !ok {
                    report.error(
                        IssueCode::BadParam,
                        loc,
                        format!("parameter `{}` has invalid value `{v}`", p.name),
                    );
                }
            }
        }
    }
    for key in action.params.keys() {
        if spec.param(key).is_none() {
            report.error(
                IssueCode::UnknownParam,
                loc,
                format!("`{}` takes no parameter `{key}`", spec.name),
            );
        }
    }
}

#[cfg(test)]
mod tests {
    use super::super::{parse, MetricSpec, NodeGroup, Role};
    use super::*;

    fn inventory(n: usize) -> Vec<InventoryNode> {
        (1..=n)
            .map(|i| InventoryNode {
                id: format!("n{i}"),
                building: ["A", "B", "C", "D"][i % 4].into(),
                up: true,
                degree: (i % 7) as u32,
            })
            .collect()
    }

    fn desc(body: &str) -> ExperimentDescription {
        parse(&format!(
            "format: 1\n[experiment]\nid: e\nreplications: 1\nduration: 100\n{body}"
        ))
        .unwrap()
    }

    #[test]
    fn minimal_is_valid() {
        let d = desc("[group g]\nrole: client\nnodes: n1\n[action]\ntarget: g\ncommand: noop\n");
        let r = validate(&d, &inventory(3));
        assert!(r.is_ok(), "{r:?}");
        assert!(r.warnings.is_empty());
    }

    #[test]
    fn many_static_nodes_within_inventory() {
        let nodes: Vec<String> = (1..=131).map(|i| format!("n{i}")).collect();
        let d = desc(&format!(
            "[group all]\nrole: servent\nnodes: {}\n[action]\ntarget: all\ncommand: noop\n",
            nodes.join(", ")
        ));
        let r = validate(&d, &inventory(135));
        assert!(r.is_ok(), "{r:?}");
        let r = validate(&d, &inventory(130));
        assert!(r.has(IssueCode::TooManyNodes));
        assert!(r.has(IssueCode::NodeUnknown));
    }

    #[test]
    fn zero_replications() {
        let mut d = desc("[group g]\nrole: client\nnodes: n1\n[action]\ntarget: g\ncommand: noop\n");
        d.replications = 0;
        let r = validate(&d, &inventory(3));
        assert_eq!(r.errors.len(), 1);
        assert_eq!(r.errors[0].code, IssueCode::ReplicationsPositive);
    }

    #[test]
    fn undeclared_target() {
        let d = desc("[group g]\nrole: client\nnodes: n1\n[action]\ntarget: x\ncommand: noop\n");
        let r = validate(&d, &inventory(3));
        assert!(r.has(IssueCode::GroupUndeclared));
    }

    #[test]
    fn unsatisfiable_dynamic_group_matches_brute_force() {
        let inv = inventory(12);
        // brute force: nodes whose building is "B"
        let in_b = inv.iter().filter(|n| n.building == "B").count();
        assert_eq!(in_b, 3);
        let d = desc("[group g]\nrole: client\ncount: 10\nselect: building == B\n[action]\ntarget: g\ncommand: noop\n");
        let r = validate(&d, &inv);
        assert!(r.has(IssueCode::GroupUnsatisfiable));
        let d = desc("[group g]\nrole: client\ncount: 3\nselect: building == B\n[action]\ntarget: g\ncommand: noop\n");
        assert!(validate(&d, &inv).is_ok());
    }

    #[test]
    fn joint_resolution_failure_is_reported() {
        // each group alone fits the three building-B nodes, together they do not
        let d = desc(
            "[group a]\nrole: client\ncount: 2\nselect: building == B\n\
             [group b]\nrole: server\ncount: 2\nselect: building == B\n\
             [action]\ntarget: a\ncommand: noop\n",
        );
        let r = validate(&d, &inventory(12));
        assert_eq!(r.errors.len(), 1, "{r:?}");
        assert_eq!(r.errors[0].code, IssueCode::GroupUnsatisfiable);
    }

    #[test]
    fn action_checks() {
        let d = desc(
            "[group g]\nrole: client\nnodes: n1\n\
             [action]\ntarget: g\ncommand: warp\n\
             [action]\ntarget: g\ncommand: start_traffic\nstart: 101\ntimeout: 0\n\
             [action]\ntarget: g\ncommand: ping_flood\nparam.dst: nowhere\nparam.count: -3\nparam.colour: red\n",
        );
        let r = validate(&d, &inventory(3));
        for code in [
            IssueCode::UnknownCommand,
            IssueCode::OffsetOutOfRange,
            IssueCode::TimeoutPositive,
            IssueCode::MissingParam,
            IssueCode::GroupUndeclared,
            IssueCode::BadParam,
            IssueCode::UnknownParam,
        ] {
            assert!(r.has(code), "{code:?} missing in {r:?}");
        }
    }

    #[test]
    fn traffic_pattern_inherited() {
        let d = desc(
            "traffic: burst\n[group g]\nrole: client\nnodes: n1\n\
             [action]\ntarget: g\ncommand: start_traffic\nparam.dst: n2\n",
        );
        assert!(validate(&d, &inventory(3)).is_ok());
        let mut bad = d.clone();
        bad.traffic.as_mut().unwrap().pattern = "poisson".into();
        assert!(validate(&bad, &inventory(3)).has(IssueCode::BadTraffic));
    }

    #[test]
    fn static_group_invariants() {
        let mut d = desc("[action]\ntarget: n1\ncommand: noop\n");
        d.groups.push(NodeGroup {
            name: "a".into(),
            role: Role::Client,
            selection: Selection::Static(vec!["n1".into(), "n1".into()]),
        });
        d.groups.push(NodeGroup {
            name: "b".into(),
            role: Role::Server,
            selection: Selection::Static(vec!["n1".into()]),
        });
        d.groups.push(NodeGroup {
            name: "c".into(),
            role: Role::Server,
            selection: Selection::Static(vec![]),
        });
        d.groups.push(NodeGroup {
            name: "d".into(),
            role: Role::Server,
            selection: Selection::Dynamic {
                count: 0,
                predicate: Predicate::Random,
            },
        });
        d.metrics = vec![
            MetricSpec {
                name: "alive".into(),
                unit: "".into(),
                aggregation: super::super::Aggregation::MeanCi,
            };
            2
        ];
        let r = validate(&d, &inventory(3));
        for code in [
            IssueCode::DuplicateNode,
            IssueCode::NodeInMultipleGroups,
            IssueCode::GroupEmpty,
            IssueCode::CountPositive,
            IssueCode::DuplicateMetric,
        ] {
            assert!(r.has(code), "{code:?}");
        }
    }

    #[test]
    fn codes_serialize_screaming() {
        assert_eq!(
            serde_json::to_string(&IssueCode::GroupUnsatisfiable).unwrap(),
            "\"GROUP_UNSATISFIABLE\""
        );
        assert_eq!(IssueCode::ReplicationsPositive.as_str(), "REPLICATIONS_POSITIVE");
    }
}
