//! Seeded experiment workloads for whole-year runs.

use std::collections::BTreeMap;
use std::fmt::Write;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use rand_distr::{Distribution, Exp};
use serde::{Deserialize, Serialize};

use crate::descript::{parse, ExperimentDescription, InventoryNode};
use crate::eval::TOPICS;

/// Relative topic frequencies used when drawing topics.
pub const TOPIC_WEIGHTS: [u32; 11] = [70, 83, 0, 3, 102, 362, 12, 0, 0, 18, 78];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WorkloadConfig {
    pub experiments: usize,
    pub users: usize,
    /// Mean total runtime of an experiment over all its replications.
    pub mean_runtime_s: f64,
    pub max_runtime_s: u64,
    pub max_nodes: u32,
    pub max_replications: u32,
    /// Share of experiments with a static node list; the rest select nodes
    /// dynamically.
    pub static_share: f64,
}

impl Default for WorkloadConfig {
    fn default() -> Self {
        Self {
            experiments: 100,
            users: 10,
            mean_runtime_s: 4.0 * 3600.0,
            max_runtime_s: 48 * 3600,
            max_nodes: 40,
            max_replications: 3,
            static_share: 0.3,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Submission {
    pub desc: ExperimentDescription,
    pub owner: String,
    /// Store timestamp at which it is submitted and wants to start.
    pub start: u64,
}

fn user_name(k: usize) -> String {
    format!("user{:02}", k + 1)
}

/// Draws `cfg.experiments` submissions spread over `[epoch, epoch + span_s)`.
pub fn generate(
    cfg: &WorkloadConfig,
    inventory: &[InventoryNode],
    epoch: u64,
    span_s: u64,
    seed: u64,
) -> Vec<Submission> {
    assert!(cfg.users >= 1 && !inventory.is_empty());
    let mut rng = crate::seed::rng(seed, &[b"workload"]);
    let runtime = Exp::new(1.0 / cfg.mean_runtime_s).expect("positive mean");
    let mut buildings: BTreeMap<&str, usize> = BTreeMap::new();
    for n in inventory {
        *buildings.entry(n.building.as_str()).or_default() += 1;
    }
    let buildings: Vec<(&str, usize)> = buildings.into_iter().collect();
    let ids: Vec<&str> = inventory.iter().map(|n| n.id.as_str()).collect();
    let max_nodes = (cfg.max_nodes as usize).clamp(1, ids.len());
    let topic_total: u32 = TOPIC_WEIGHTS.iter().sum();

    (0..cfg.experiments)
        .map(|i| {
            // Every user submits at least once; later ones skew towards low ids.
            let owner = if i < cfg.users {
                user_name(i)
            } else {
                let u: f64 = rng.random();
                user_name(((u * u) * cfg.users as f64) as usize % cfg.users)
            };
            let mut pick = rng.random_range(0..topic_total);
            let topic = TOPICS
                .iter()
                .zip(TOPIC_WEIGHTS)
                .find(|(_, w)| {
                    if pick < *w {
                        true
                    } else {
                        pick -= w;
                        false
                    }
                })
                .map(|(t, _)| *t)
                .unwrap_or(TOPICS[0]);
            let start = epoch + rng.random_range(0..span_s.max(1) * 9 / 10 + 1);
            let reps = rng.random_range(1..=cfg.max_replications.max(1));
            let total = (runtime.sample(&mut rng) as u64).clamp(600, cfg.max_runtime_s.max(600));
            let duration = (total / reps as u64).max(60);

            let mut text = String::new();
            let id = format!("w{:04}", i + 1);
            let _ = write!(
                text,
                "format: 1\n[experiment]\nid: {id}\ntitle: \"workload {id}\"\ntopic: \"{topic}\"\n\
                 replications: {reps}\nduration: {duration}\n[group g]\nrole: servent\n"
            );
            let mut pair = None;
            if rng.random_bool(cfg.static_share.clamp(0.0, 1.0)) {
                let k = rng.random_range(1..=max_nodes);
                let mut chosen: Vec<&str> = ids.choose_multiple(&mut rng, k).copied().collect();
                chosen.shuffle(&mut rng);
                if chosen.len() >= 2 {
                    pair = Some((chosen[0].to_string(), chosen[1].to_string()));
                }
                let _ = writeln!(text, "nodes: {}", chosen.join(", "));
            } else if rng.random_bool(0.5) {
                let (b, size) = buildings.choose(&mut rng).copied().expect("non-empty");
                let k = rng.random_range(1..=(size / 2).clamp(1, max_nodes));
                let _ = writeln!(text, "count: {k}\nselect: building == \"{b}\"");
            } else {
                let k = rng.random_range(1..=max_nodes.min(ids.len() / 2).max(1));
                let _ = writeln!(text, "count: {k}\nselect: random");
            }
            text.push_str("[action]\ntarget: g\ncommand: noop\n");
            let channel = [1, 6, 11, 36, 44][rng.random_range(0..5)];
            let _ = write!(
                text,
                "[action]\ntarget: g\ncommand: set_channel\nparam.channel: {channel}\nstart: {}\n",
                (duration / 4).min(30)
            );
            if let Some((a, b)) = pair {
                let _ = write!(
                    text,
                    "[action]\ntarget: {a}\ncommand: ping_flood\nparam.dst: {b}\nparam.count: 10\nstart: {}\n",
                    (duration / 2).min(60)
                );
            }
            let desc = parse(&text).unwrap_or_else(|e| panic!("generated description does not parse: {e}\n{text}"));
            Submission { desc, owner, start }
        })
        .collect()
}
