//! Synthetic usage logs built to prescribed marginals.
//!
//! Records look exactly like what the orchestrator and monitor write, so
//! reports over them exercise the same code paths as reports over a real run.

use std::io::Cursor;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use crate::eval::{Period, TOPICS};
use crate::store::{Clock, Record, RecordKind, Store, StoreError};

#[derive(Debug, Clone, PartialEq)]
pub struct UsageMarginals {
    pub period: Period,
    pub experiments: usize,
    pub users: usize,
    pub max_runtime_s: u64,
    /// Sum of all runtimes.
    pub total_runtime_s: u64,
    pub max_nodes: u64,
    /// Sum of all node counts.
    pub total_nodes: u64,
    /// Topic weights; counts are apportioned by largest remainder.
    pub topic_weights: Vec<(String, u64)>,
    /// Monitoring samples for `nodes` nodes, when set.
    pub polls: Option<PollSpec>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PollSpec {
    pub nodes: usize,
    pub cadence_s: u64,
    pub availability: f64,
}

/// One Table-6-style row: `count` experiments adding up to `hours`.
#[derive(Debug, Clone, PartialEq)]
pub struct TopicMarginal {
    pub topic: String,
    pub count: usize,
    pub hours: u64,
}

/// The 2011 column of the usage summary.
pub fn marginals_2011() -> UsageMarginals {
    UsageMarginals {
        period: Period::year(2011).expect("valid year"),
        experiments: 661,
        users: 30,
        max_runtime_s: 875 * 3600,
        total_runtime_s: 661 * 11 * 3600,
        max_nodes: 131,
        total_nodes: 661 * 99,
        topic_weights: TOPICS
            .iter()
            .zip([70, 83, 0, 3, 102, 362, 12, 0, 0, 18, 78])
            .map(|(t, w)| (t.to_string(), w))
            .collect(),
        polls: None,
    }
}

/// The 2011 topic breakdown as per-topic rows.
pub fn topics_2011() -> Vec<TopicMarginal> {
    let rows = [
        ("Application Layer", 70, 721),
        ("Channel Assignment", 83, 1116),
        ("MAC", 3, 29),
        ("Mobility", 102, 557),
        ("Routing", 362, 4067),
        ("Security", 12, 85),
        ("Transport Layer", 18, 216),
        ("WSN", 78, 598),
    ];
    rows.iter()
        .map(|&(t, c, h)| TopicMarginal {
            topic: t.to_string(),
            count: c,
            hours: h,
        })
        .collect()
}

/// `n` values in `[lo, hi]` summing to `total`, with `values[0] == hi`.
/// Starts from `draw` and nudges the rest into place.
fn exact_sum(rng: &mut ChaCha8Rng, n: usize, total: u64, lo: u64, hi: u64, mut draw: impl FnMut(&mut ChaCha8Rng) -> u64) -> Vec<u64> {
    assert!(n >= 1 && lo <= hi);
    assert!(
        hi + lo * (n as u64 - 1) <= total && total <= hi * n as u64,
        "total {total} unreachable for {n} values in [{lo}, {hi}]"
    );
    let mut v: Vec<u64> = (0..n).map(|_| draw(rng).clamp(lo, hi)).collect();
    v[0] = hi;
    let mut sum: u64 = v.iter().sum();
    let mut order: Vec<usize> = (1..n).collect();
    while sum != total {
        order.shuffle(rng);
        let gap = sum.abs_diff(total);
        let step = gap.div_ceil(order.len().max(1) as u64);
        for &i in &order {
            if sum == total {
                break;
            }
            let want = step.min(sum.abs_diff(total));
            if sum < total {
                let d = want.min(hi - v[i]);
                v[i] += d;
                sum += d;
            } else {
                let d = want.min(v[i] - lo);
                v[i] -= d;
                sum -= d;
            }
        }
    }
    v
}

fn apportion(weights: &[(String, u64)], n: usize) -> Vec<(String, usize)> {
    let total: u64 = weights.iter().map(|w| w.1).sum();
    if total == 0 {
        return vec![(crate::eval::OTHER_TOPIC.to_string(), n)];
    }
    let mut rows: Vec<(String, usize, u64)> = weights
        .iter()
        .map(|(t, w)| {
            let exact = *w as u128 * n as u128;
            (t.clone(), (exact / total as u128) as usize, (exact % total as u128) as u64)
        })
        .collect();
    let mut left = n - rows.iter().map(|r| r.1).sum::<usize>();
    let mut idx: Vec<usize> = (0..rows.len()).collect();
    idx.sort_by(|&a, &b| rows[b].2.cmp(&rows[a].2).then(a.cmp(&b)));
    for i in idx {
        if left == 0 {
            break;
        }
        rows[i].1 += 1;
        left -= 1;
    }
    rows.into_iter().map(|(t, c, _)| (t, c)).collect()
}

struct Exp {
    owner: String,
    topic: String,
    nodes: u64,
    runtime_s: u64,
}

fn entry_records(period: Period, exps: Vec<Exp>, rng: &mut ChaCha8Rng) -> Vec<(u64, Record)> {
    let span = period.to - period.from;
    exps.into_iter()
        .enumerate()
        .map(|(i, e)| {
            let activated = period.from + rng.random_range(0..span);
            let submitted = activated.saturating_sub(rng.random_range(0..3600)).max(period.from);
            let finished = activated + e.runtime_s;
            let id = format!("s{:05}", i + 1);
            let payload = json!({
                "event": "entry_finished",
                "entry": id,
                "experiment": format!("x{:05}", i + 1),
                "owner": e.owner,
                "topic": e.topic,
                "node_count": e.nodes,
                "replications": 1,
                "submitted": submitted,
                "activated": activated,
                "finished": finished,
                "status": "done",
            });
            let rec = Record {
                id: 0,
                kind: RecordKind::RunEvent,
                run_id: Some(id),
                node_id: None,
                timestamp: finished,
                payload,
            };
            (finished, rec)
        })
        .collect()
}

fn finish(mut recs: Vec<(u64, Record)>) -> Vec<Record> {
    recs.sort_by_key(|r| r.0);
    recs.into_iter()
        .enumerate()
        .map(|(i, (_, mut r))| {
            r.id = i as u64 + 1;
            r
        })
        .collect()
}

fn owners(rng: &mut ChaCha8Rng, n: usize, users: usize) -> Vec<String> {
    assert!(users >= 1 && users <= n, "need 1 <= users <= experiments");
    let mut v: Vec<String> = (0..n)
        .map(|i| {
            let k = if i < users {
                i
            } else {
                let u: f64 = rng.random();
                ((u * u) * users as f64) as usize % users
            };
            format!("user{:02}", k + 1)
        })
        .collect();
    v.shuffle(rng);
    v
}

/// Builds `entry_finished` (and optionally poll) records matching `m`.
pub fn usage_log(m: &UsageMarginals, seed: u64) -> Vec<Record> {
    let mut rng = crate::seed::rng(seed, &[b"synthetic-usage"]);
    let n = m.experiments;
    let mean_nodes = m.total_nodes as f64 / n as f64;
    // Peaks at a few popular sizes plus a flat background, like a fleet
    // where many experiments take every node of one or more buildings.
    let peaks = [14, 98, 106, 107];
    let mut nodes = exact_sum(&mut rng, n, m.total_nodes, 1, m.max_nodes, |r| {
        if r.random_bool(0.6) {
            peaks[r.random_range(0..peaks.len())].min(m.max_nodes)
        } else {
            r.random_range(1..=((2.0 * mean_nodes) as u64).clamp(1, m.max_nodes))
        }
    });
    let mean_rt = m.total_runtime_s as f64 / n as f64;
    let mut runtimes = exact_sum(&mut rng, n, m.total_runtime_s, 60, m.max_runtime_s, |r| {
        let u: f64 = r.random();
        (-(1.0 - u).ln() * mean_rt) as u64
    });
    nodes.shuffle(&mut rng);
    runtimes.shuffle(&mut rng);
    let mut topics: Vec<String> = apportion(&m.topic_weights, n)
        .into_iter()
        .flat_map(|(t, c)| std::iter::repeat_n(t, c))
        .collect();
    topics.shuffle(&mut rng);
    let exps = owners(&mut rng, n, m.users)
        .into_iter()
        .zip(topics)
        .zip(nodes.into_iter().zip(runtimes))
        .map(|((owner, topic), (nodes, runtime_s))| Exp {
            owner,
            topic,
            nodes,
            runtime_s,
        })
        .collect();
    let mut recs = entry_records(m.period, exps, &mut rng);
    if let Some(p) = m.polls {
        for k in 0..p.nodes {
            let node = crate::fleet::FleetConfig::node_id(k);
            let mut t = m.period.from;
            while t < m.period.to {
                let up = rng.random_bool(p.availability);
                recs.push((
                    t,
                    Record {
                        id: 0,
                        kind: RecordKind::MonitoringData,
                        run_id: None,
                        node_id: Some(node.clone()),
                        timestamp: t,
                        payload: json!({"event": "poll", "node": node, "up": up}),
                    },
                ));
                t += p.cadence_s;
            }
        }
    }
    finish(recs)
}

/// One experiment per count of each row, each row's runtimes adding up to
/// its hours exactly.
pub fn topic_log(period: Period, rows: &[TopicMarginal], users: usize, seed: u64) -> Vec<Record> {
    let mut rng = crate::seed::rng(seed, &[b"synthetic-topics"]);
    let n: usize = rows.iter().map(|r| r.count).sum();
    let owner_list = owners(&mut rng, n, users.min(n).max(1));
    let mut exps = Vec::with_capacity(n);
    for row in rows.iter().filter(|r| r.count > 0) {
        let total = row.hours * 3600;
        let mean = total / row.count as u64;
        let hi = (mean * 3).clamp(mean.max(60), total - 60 * (row.count as u64 - 1));
        let rts = exact_sum(&mut rng, row.count, total, 60, hi, |r| r.random_range(60..=2 * mean.max(60)));
        for rt in rts {
            exps.push(Exp {
                owner: owner_list[exps.len()].clone(),
                topic: row.topic.clone(),
                nodes: rng.random_range(1..=131),
                runtime_s: rt,
            });
        }
    }
    finish(entry_records(period, exps, &mut rng))
}

/// Loads records into an in-memory store, preserving ids and timestamps.
pub fn to_store(records: &[Record], clock: Arc<dyn Clock>) -> Result<Store, StoreError> {
    let mut buf = Vec::new();
    for r in records {
        serde_json::to_writer(&mut buf, r).expect("records serialize");
        buf.push(b'\n');
    }
    Store::import(Cursor::new(buf), clock)
}
