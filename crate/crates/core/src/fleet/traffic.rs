//! Route selection and per-hop loss accounting for traffic actions.

use std::cmp::Reverse;
use std::collections::BinaryHeap;

use rand::Rng;

/// Directed hop with its delivery probability.
#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) struct Hop {
    pub from: usize,
    pub to: usize,
    pub p: f64,
}

/// Undirected edge list view: `(a, b, p_ab, p_ba)`.
pub(crate) type Edge = (usize, usize, f64, f64);

/// Least-ETX path from `src` to `dst` over edges whose endpoints are both in
/// `alive`. Ties break towards the lower node index, so results are stable.
pub(crate) fn shortest_path(
    n: usize,
    adj: &[Vec<usize>],
    edges: &[Edge],
    alive: &[bool],
    src: usize,
    dst: usize,
) -> Option<Vec<Hop>> {
    if !alive[src] || !alive[dst] {
        return None;
    }
    if src == dst {
        return Some(Vec::new());
    }
    // (cost, hops, node) ordered; cost compared through its bit pattern,
    // which is monotone for non-negative finite floats.
    let mut dist = vec![f64::INFINITY; n];
    let mut prev: Vec<Option<(usize, usize)>> = vec![None; n];
    let mut heap = BinaryHeap::new();
    dist[src] = 0.0;
    heap.push(Reverse((0u64, src)));
    while let Some(Reverse((bits, u))) = heap.pop() {
        let d = f64::from_bits(bits);
        if d > dist[u] {
            continue;
        }
        if u == dst {
            break;
        }
        for &e in &adj[u] {
            let (a, b, ab, ba) = edges[e];
            let v = if a == u { b } else { a };
            if !alive[v] || ab * ba == 0.0 {
                continue;
            }
            let nd = d + 1.0 / (ab * ba);
            if nd < dist[v] || (nd == dist[v] && prev[v].is_some_and(|(p, _)| u < p)) {
                dist[v] = nd;
                prev[v] = Some((u, e));
                heap.push(Reverse((nd.to_bits(), v)));
            }
        }
    }
    prev[dst]?;
    let mut hops = Vec::new();
    let mut v = dst;
    while v != src {
        let (u, e) = prev[v].expect("path is connected");
        let (a, _, ab, ba) = edges[e];
        hops.push(Hop {
            from: u,
            to: v,
            p: if a == u { ab } else { ba },
        });
        v = u;
    }
    hops.reverse();
    Some(hops)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Pattern {
    Cbr,
    /// Packets travel in groups that share each hop's fate.
    Burst(u32),
}

/// Outcome of one flow.
#[derive(Debug, Default, Clone)]
pub(crate) struct FlowOutcome {
    /// Delivered packets per bucket of `interval` packets.
    pub buckets: Vec<(u32, u32)>,
    /// Per hop, packets sent and packets received.
    pub hop_counts: Vec<(u64, u64)>,
}

pub(crate) fn run_flow(
    hops: &[Hop],
    packets: u32,
    interval: u32,
    pattern: Pattern,
    rng: &mut impl Rng,
) -> FlowOutcome {
    let mut out = FlowOutcome {
        buckets: Vec::new(),
        hop_counts: vec![(0, 0); hops.len()],
    };
    let group = match pattern {
        Pattern::Cbr => 1,
        Pattern::Burst(b) => b.max(1),
    };
    let mut sent = 0u32;
    let mut bucket = (0u32, 0u32);
    while sent < packets {
        let size = group.min(packets - sent);
        let mut reached = true;
        for (h, hop) in hops.iter().enumerate() {
            out.hop_counts[h].0 += size as u64;
            if rng.random_bool(hop.p) {
                out.hop_counts[h].1 += size as u64;
            } else {
                reached = false;
                break;
            }
        }
        // Split the group across bucket boundaries.
        let mut left = size;
        while left > 0 {
            let room = interval - bucket.0;
            let take = room.min(left);
            bucket.0 += take;
            if reached {
                bucket.1 += take;
            }
            left -= take;
            if bucket.0 == interval {
                out.buckets.push(bucket);
                bucket = (0, 0);
            }
        }
        sent += size;
    }
    if bucket.0 > 0 {
        out.buckets.push(bucket);
    }
    out
}
