use std::collections::BTreeMap;

use rand::seq::IndexedRandom;
use rand::Rng;

use crate::descript::{
    Action, Aggregation, ExperimentDescription, MetricSpec, NodeGroup, Predicate, Role, Selection, TrafficSpec,
};

const TEXT_PIECES: &[&str] = &[
    "mesh", "Kanal", "\"quoted\"", "a # not a comment", "tab\there", "line\nbreak", "ü", "[x]", "key: value", " ", "",
    "\\", "路由",
];
const COMMANDS: &[&str] = &["noop", "set_channel", "start_traffic", "stop_traffic", "ping_flood", "reset_config"];

fn ident(rng: &mut impl Rng, prefix: &str) -> String {
    const CHARS: &[u8] = b"abcdefghijklmnopqrstuvwxyz0123456789_-.";
    let len = rng.random_range(0..6);
    let tail: String = (0..len).map(|_| CHARS[rng.random_range(0..CHARS.len())] as char).collect();
    format!("{prefix}{tail}")
}

fn text(rng: &mut impl Rng) -> String {
    (0..rng.random_range(0..4))
        .map(|_| *TEXT_PIECES.choose(rng).expect("non-empty"))
        .collect()
}

fn params(rng: &mut impl Rng) -> BTreeMap<String, String> {
    (0..rng.random_range(0..3)).map(|_| (ident(rng, "p"), text(rng))).collect()
}

fn action(rng: &mut impl Rng, targets: &[String]) -> Action {
    Action {
        target: targets.choose(rng).cloned().unwrap_or_else(|| ident(rng, "n")),
        command: COMMANDS.choose(rng).expect("non-empty").to_string(),
        params: params(rng),
        start_offset: rng.random_range(0..1000),
        timeout: rng.random_range(1..600),
    }
}

/// A structurally arbitrary description: every field the grammar can carry,
/// including awkward text, without regard to whether it would validate.
pub fn random_description(rng: &mut impl Rng) -> ExperimentDescription {
    let mut groups: Vec<NodeGroup> = Vec::new();
    for k in 0..rng.random_range(0..4) {
        let selection = match rng.random_range(0..4) {
            0 => Selection::Static(Vec::new()),
            1 => Selection::Static((0..rng.random_range(1..5)).map(|_| ident(rng, "n")).collect()),
            2 => Selection::Dynamic {
                count: rng.random_range(0..200),
                predicate: Predicate::BuildingEq(format!("B{}", text(rng))),
            },
            _ => Selection::Dynamic {
                count: rng.random_range(0..200),
                predicate: if rng.random_bool(0.5) {
                    Predicate::DegreeAtLeast(rng.random_range(0..20))
                } else {
                    Predicate::Random
                },
            },
        };
        groups.push(NodeGroup {
            name: format!("g{k}{}", ident(rng, "")),
            role: [Role::Client, Role::Server, Role::Servent][rng.random_range(0..3)],
            selection,
        });
    }
    let mut targets: Vec<String> = groups.iter().map(|g| g.name.clone()).collect();
    targets.push(ident(rng, "n"));
    let metrics = (0..rng.random_range(0..3))
        .map(|k| MetricSpec {
            name: format!("m{k}{}", ident(rng, "")),
            unit: text(rng),
            aggregation: [Aggregation::MeanCi, Aggregation::FiveNumber, Aggregation::Histogram][rng.random_range(0..3)],
        })
        .collect();
    ExperimentDescription {
        id: ident(rng, "e"),
        title: text(rng),
        description: text(rng),
        topic: rng.random_bool(0.5).then(|| text(rng)),
        replications: rng.random_range(0..50),
        duration_limit: rng.random_range(0..100_000),
        traffic: rng.random_bool(0.3).then(|| TrafficSpec {
            pattern: ident(rng, "t"),
            params: params(rng),
        }),
        actions: (0..rng.random_range(0..5)).map(|_| action(rng, &targets)).collect(),
        cleanup: (0..rng.random_range(0..3)).map(|_| action(rng, &targets)).collect(),
        groups,
        metrics,
    }
}
