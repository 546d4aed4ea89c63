use std::collections::{BTreeMap, HashMap};
use std::sync::{Arc, Mutex, MutexGuard};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp};

use super::traffic::{self, Edge, Pattern};
use super::*;
use crate::descript::InventoryNode;
use crate::seed;

#[derive(Debug, Clone)]
struct SimNode {
    id: String,
    building: String,
    up: bool,
    up_since: u64,
    uptime_acc: u64,
    /// Time of the next up/down flip, if churn is enabled or an outage is
    /// injected.
    next_flip: Option<u64>,
    /// Fixed length for the next down period (injected outages).
    forced_down: Option<u64>,
    churn_rng: ChaCha8Rng,
    ifaces: Vec<InterfaceState>,
    traffic_running: bool,
    temp_data: bool,
    boots: u64,
}

impl SimNode {
    fn config(&self) -> NodeConfig {
        NodeConfig {
            channels: self.ifaces.iter().map(|i| i.channel).collect(),
            traffic_running: self.traffic_running,
            temp_data: self.temp_data,
        }
    }

    fn reset_config(&mut self) {
        for (i, (_, ch)) in self.ifaces.iter_mut().zip(DEFAULT_INTERFACES) {
            i.channel = ch;
        }
        self.traffic_running = false;
    }
}

fn fresh_interfaces() -> Vec<InterfaceState> {
    DEFAULT_INTERFACES
        .iter()
        .map(|(name, ch)| InterfaceState {
            name: name.to_string(),
            channel: *ch,
            tx_packets: 0,
            rx_packets: 0,
        })
        .collect()
}

/// The simulation itself. Single-threaded; share it through [`FleetHandle`].
#[derive(Debug, Clone)]
pub struct Fleet {
    config: FleetConfig,
    now: u64,
    nodes: Vec<SimNode>,
    index: HashMap<String, usize>,
    edges: Vec<Edge>,
    adj: Vec<Vec<usize>>,
    up_time: Option<Exp<f64>>,
    down_time: Option<Exp<f64>>,
    /// Reachable-node counts, invalidated on every up/down flip.
    routes: Option<Vec<usize>>,
}

impl Fleet {
    pub fn spawn(config: FleetConfig) -> Result<Self, FleetError> {
        config.validate()?;
        let n = config.nodes;
        let blocks = config.buildings.len();
        let nodes: Vec<SimNode> = (0..n)
            .map(|i| {
                let id = FleetConfig::node_id(i);
                let building = config
                    .assignment
                    .get(&id)
                    .cloned()
                    .unwrap_or_else(|| config.buildings[i * blocks / n].clone());
                let churn_rng = seed::rng(config.seed, &[b"churn", id.as_bytes()]);
                SimNode {
                    id,
                    building,
                    up: true,
                    up_since: 0,
                    uptime_acc: 0,
                    next_flip: None,
                    forced_down: None,
                    churn_rng,
                    ifaces: fresh_interfaces(),
                    traffic_running: false,
                    temp_data: false,
                    boots: 0,
                }
            })
            .collect();
        let index = nodes.iter().enumerate().map(|(i, n)| (n.id.clone(), i)).collect();
        let mut fleet = Fleet {
            edges: Vec::new(),
            adj: vec![Vec::new(); n],
            up_time: config.churn.map(|c| Exp::new(1.0 / c.mean_up_s).expect("positive mean")),
            down_time: config
                .churn
                .map(|c| Exp::new(1.0 / c.mean_down_s).expect("positive mean")),
            config,
            now: 0,
            nodes,
            index,
            routes: None,
        };
        fleet.build_links();
        for i in 0..n {
            fleet.nodes[i].next_flip = fleet.draw_up(i).map(|d| d);
        }
        Ok(fleet)
    }

    fn build_links(&mut self) {
        let mut edges = Vec::new();
        match &self.config.links {
            LinkModel::Explicit { links } => {
                for l in links {
                    edges.push((self.index[&l.a], self.index[&l.b], l.df, l.dr));
                }
            }
            LinkModel::Distance(d) => {
                let mut rng = seed::rng(self.config.seed, &[b"layout"]);
                let pos: Vec<(f64, f64)> = self
                    .nodes
                    .iter()
                    .map(|node| {
                        let b = self
                            .config
                            .buildings
                            .iter()
                            .position(|x| *x == node.building)
                            .expect("validated building") as f64;
                        let x0 = b * (d.width_m + d.spacing_m);
                        (
                            x0 + rng.random::<f64>() * d.width_m,
                            rng.random::<f64>() * d.depth_m,
                        )
                    })
                    .collect();
                for i in 0..pos.len() {
                    for j in i + 1..pos.len() {
                        let dist = ((pos[i].0 - pos[j].0).powi(2) + (pos[i].1 - pos[j].1).powi(2)).sqrt();
                        if dist >= d.range_m {
                            continue;
                        }
                        let x = dist / d.range_m;
                        let base = 1.0 - 0.9 * x * x;
                        let round = |v: f64| (v.clamp(0.0, 1.0) * 1000.0).round() / 1000.0;
                        let df = round(base * (0.9 + 0.1 * rng.random::<f64>()));
                        let dr = round(base * (0.9 + 0.1 * rng.random::<f64>()));
                        edges.push((i, j, df, dr));
                    }
                }
            }
        }
        for (e, &(a, b, _, _)) in edges.iter().enumerate() {
            self.adj[a].push(e);
            self.adj[b].push(e);
        }
        self.edges = edges;
    }

    fn draw_up(&mut self, i: usize) -> Option<u64> {
        let d = self.up_time?;
        let x = d.sample(&mut self.nodes[i].churn_rng);
        Some(self.now + (x.round() as u64).max(1))
    }

    fn draw_down(&mut self, i: usize) -> u64 {
        if let Some(f) = self.nodes[i].forced_down.take() {
            return f.max(1);
        }
        let d = self.down_time.expect("down draws only with churn");
        let x = (d.sample(&mut self.nodes[i].churn_rng).round() as u64).max(1);
        match self.config.watchdog_s {
            Some(w) => x.min(w),
            None => x,
        }
    }

    pub fn config(&self) -> &FleetConfig {
        &self.config
    }

    pub fn now(&self) -> u64 {
        self.now
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn node_ids(&self) -> impl Iterator<Item = &str> {
        self.nodes.iter().map(|n| n.id.as_str())
    }

    fn idx(&self, id: &str) -> Result<usize, FleetError> {
        self.index
            .get(id)
            .copied()
            .ok_or_else(|| FleetError::UnknownNode(id.to_string()))
    }

    pub fn is_up(&self, id: &str) -> Result<bool, FleetError> {
        Ok(self.nodes[self.idx(id)?].up)
    }

    /// Seconds the node has been up since spawn.
    pub fn uptime(&self, id: &str) -> Result<u64, FleetError> {
        let n = &self.nodes[self.idx(id)?];
        Ok(n.uptime_acc + if n.up { self.now - n.up_since } else { 0 })
    }

    pub fn downtime(&self, id: &str) -> Result<u64, FleetError> {
        Ok(self.now - self.uptime(id)?)
    }

    /// The true link table as `(a, b, df, dr)`.
    pub fn true_links(&self) -> Vec<LinkSpec> {
        self.edges
            .iter()
            .map(|&(a, b, df, dr)| LinkSpec {
                a: self.nodes[a].id.clone(),
                b: self.nodes[b].id.clone(),
                df,
                dr,
            })
            .collect()
    }

    /// Time of the next scheduled up/down flip.
    pub fn next_event_time(&self) -> Option<u64> {
        self.nodes.iter().filter_map(|n| n.next_flip).min()
    }

    pub fn inventory(&self) -> Vec<InventoryNode> {
        self.nodes
            .iter()
            .enumerate()
            .map(|(i, n)| InventoryNode {
                id: n.id.clone(),
                building: n.building.clone(),
                up: n.up,
                degree: if n.up { self.live_neighbours(i).count() as u32 } else { 0 },
            })
            .collect()
    }

    /// Usable links of `i` as `(edge index, peer)`.
    fn live_neighbours(&self, i: usize) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.adj[i].iter().filter_map(move |&e| {
            let (a, b, ab, ba) = self.edges[e];
            let peer = if a == i { b } else { a };
            (self.nodes[peer].up && ab * ba > 0.0).then_some((e, peer))
        })
    }

    /// Takes `id` down at `at` for `duration` seconds, overriding the churn
    /// draw for that period. Ignored if the node is already down at `at`.
    pub fn inject_outage(&mut self, id: &str, at: u64, duration: u64) -> Result<(), FleetError> {
        let i = self.idx(id)?;
        let at = at.max(self.now + 1);
        let n = &mut self.nodes[i];
        if n.up {
            n.next_flip = Some(n.next_flip.map_or(at, |t| t.min(at)));
            n.forced_down = Some(duration);
        }
        Ok(())
    }

    /// Moves the clock forward, applying every flip due on the way.
    pub fn advance(&mut self, seconds: u64) -> Vec<ChurnEvent> {
        let target = self.now + seconds;
        let mut events = Vec::new();
        loop {
            let next = self
                .nodes
                .iter()
                .enumerate()
                .filter_map(|(i, n)| n.next_flip.map(|t| (t, i)))
                .filter(|&(t, _)| t <= target)
                .min();
            let Some((t, i)) = next else { break };
            self.now = t;
            self.routes = None;
            let kind = if self.nodes[i].up {
                let n = &mut self.nodes[i];
                n.up = false;
                n.uptime_acc += t - n.up_since;
                let d = self.draw_down(i);
                self.nodes[i].next_flip = Some(t + d);
                ChurnKind::Down
            } else {
                let n = &mut self.nodes[i];
                n.up = true;
                n.up_since = t;
                n.boots += 1;
                n.reset_config();
                for iface in &mut n.ifaces {
                    iface.tx_packets = 0;
                    iface.rx_packets = 0;
                }
                self.nodes[i].next_flip = self.draw_up(i);
                ChurnKind::Up
            };
            events.push(ChurnEvent {
                time: t,
                node: self.nodes[i].id.clone(),
                kind,
            });
        }
        self.now = target;
        events
    }

    fn route_counts(&mut self) -> &[usize] {
        if self.routes.is_none() {
            let n = self.nodes.len();
            let mut comp = vec![usize::MAX; n];
            let mut sizes = Vec::new();
            for s in 0..n {
                if comp[s] != usize::MAX || !self.nodes[s].up {
                    continue;
                }
                let c = sizes.len();
                let mut stack = vec![s];
                comp[s] = c;
                let mut size = 0;
                while let Some(u) = stack.pop() {
                    size += 1;
                    for (_, v) in self.live_neighbours(u) {
                        if comp[v] == usize::MAX {
                            comp[v] = c;
                            stack.push(v);
                        }
                    }
                }
                sizes.push(size);
            }
            self.routes = Some(
                comp.iter()
                    .map(|&c| if c == usize::MAX { 0 } else { sizes[c] - 1 })
                    .collect(),
            );
        }
        self.routes.as_deref().expect("just computed")
    }

    /// Probe counts delivered in each direction of edge `e` during a window
    /// of `window` broadcasts ending now.
    fn probe(&self, e: usize, window: u32) -> (u32, u32) {
        let (_, _, ab, ba) = self.edges[e];
        let mut rng = seed::rng(
            self.config.seed,
            &[
                b"probe",
                &(e as u64).to_le_bytes(),
                &self.now.to_le_bytes(),
                &window.to_le_bytes(),
            ],
        );
        let mut fwd = 0;
        let mut rev = 0;
        for _ in 0..window {
            fwd += rng.random_bool(ab) as u32;
            rev += rng.random_bool(ba) as u32;
        }
        (fwd, rev)
    }

    fn link_state(&self, e: usize, from: usize, window: u32) -> LinkState {
        let (a, b, _, _) = self.edges[e];
        let (fwd, rev) = self.probe(e, window);
        let w = window as f64;
        let (df, dr, peer) = if a == from {
            (fwd as f64 / w, rev as f64 / w, b)
        } else {
            (rev as f64 / w, fwd as f64 / w, a)
        };
        LinkState::from_estimates(self.nodes[peer].id.clone(), df, dr)
    }

    /// Estimates every link whose endpoints are both up.
    pub fn measure_links(&self, window: u32) -> Result<Vec<MeasuredLink>, FleetError> {
        if window == 0 {
            return Err(FleetError::EmptyWindow);
        }
        Ok(self
            .edges
            .iter()
            .enumerate()
            .filter(|(_, (a, b, _, _))| self.nodes[*a].up && self.nodes[*b].up)
            .map(|(e, &(a, b, _, _))| MeasuredLink {
                a: self.nodes[a].id.clone(),
                b: self.nodes[b].id.clone(),
                state: self.link_state(e, a, window),
            })
            .collect())
    }

    /// State report for one node. With `window == 0` no probes are sent and
    /// the link list is empty.
    pub fn poll(&mut self, id: &str, window: u32) -> Result<NodeReport, FleetError> {
        let i = self.idx(id)?;
        let uptime_s = self.uptime(id)?;
        let n = &self.nodes[i];
        if !n.up {
            return Ok(NodeReport {
                node: n.id.clone(),
                building: n.building.clone(),
                up: false,
                uptime_s,
                boots: n.boots,
                interfaces: Vec::new(),
                routes: 0,
                links: Vec::new(),
                config: None,
            });
        }
        let mut links = Vec::new();
        // Neighbour links that are up but lossy in one direction still show
        // up in the report, with an infinite ETX once no probe survives.
        if window > 0 {
            for &e in &self.adj[i] {
                let (a, b, _, _) = self.edges[e];
                let peer = if a == i { b } else { a };
                if self.nodes[peer].up {
                    links.push(self.link_state(e, i, window));
                }
            }
            let received: u64 = links.iter().map(|l| (l.dr * window as f64).round() as u64).sum();
            let n = &mut self.nodes[i];
            n.ifaces[0].tx_packets += window as u64;
            n.ifaces[0].rx_packets += received;
        }
        let routes = self.route_counts()[i];
        let n = &self.nodes[i];
        Ok(NodeReport {
            node: n.id.clone(),
            building: n.building.clone(),
            up: true,
            uptime_s,
            boots: n.boots,
            interfaces: n.ifaces.clone(),
            routes,
            links,
            config: Some(n.config()),
        })
    }

    /// Runs one action on `id` at the current time.
    pub fn execute_action(&mut self, id: &str, req: &ActionRequest) -> Result<ActionResult, FleetError> {
        let i = self.idx(id)?;
        let known = [
            "noop",
            "set_channel",
            "start_traffic",
            "stop_traffic",
            "ping_flood",
            "reset_config",
            "clear_temp",
        ];
        if !known.contains(&req.command.as_str()) {
            return Err(FleetError::UnknownCommand(req.command.clone()));
        }
        let mut result = ActionResult {
            node: id.to_string(),
            command: req.command.clone(),
            status: ActionStatus::Ok,
            metrics: BTreeMap::new(),
            started: self.now,
            finished: self.now,
            detail: None,
        };
        if !self.nodes[i].up {
            result.status = ActionStatus::NodeDown;
            result.detail = Some("node is down".into());
            return Ok(result);
        }
        match self.run_command(i, req) {
            Ok((span, metrics)) => {
                result.finished = self.now + span;
                let down_at = self.nodes[i].next_flip.filter(|_| span > 0);
                if span > req.timeout {
                    result.status = ActionStatus::Timeout;
                    result.finished = self.now + req.timeout;
                    result.detail = Some(format!("needs {span} s, timeout {} s", req.timeout));
                } else if let Some(t) = down_at.filter(|&t| t < self.now + span) {
                    result.status = ActionStatus::Failed;
                    result.finished = t;
                    result.detail = Some(format!("node went down at {t}"));
                } else {
                    result.metrics = metrics;
                }
            }
            Err(detail) => {
                result.status = ActionStatus::Failed;
                result.detail = Some(detail);
            }
        }
        Ok(result)
    }

    /// Applies the command's effects and returns its duration and metrics.
    fn run_command(
        &mut self,
        i: usize,
        req: &ActionRequest,
    ) -> Result<(u64, BTreeMap<String, Vec<f64>>), String> {
        let p = Params(&req.params);
        let mut metrics = BTreeMap::new();
        let span = match req.command.as_str() {
            "noop" => {
                metrics.insert("alive".to_string(), vec![1.0]);
                0
            }
            "set_channel" => {
                let ch: u32 = p.req("channel")?;
                if !(1..=196).contains(&ch) {
                    return Err(format!("channel {ch} out of range"));
                }
                let name = p.get("interface").unwrap_or("wlan0");
                let iface = self.nodes[i]
                    .ifaces
                    .iter_mut()
                    .find(|f| f.name == name)
                    .ok_or_else(|| format!("no interface {name}"))?;
                iface.channel = ch;
                1
            }
            "stop_traffic" => {
                self.nodes[i].traffic_running = false;
                0
            }
            "reset_config" => {
                self.nodes[i].reset_config();
                1
            }
            "clear_temp" => {
                self.nodes[i].temp_data = false;
                1
            }
            "start_traffic" => {
                let dst = self.idx(p.get("dst").ok_or("missing dst")?).map_err(|e| e.to_string())?;
                let packets: u32 = p.opt("packets")?.unwrap_or(100);
                let rate: f64 = p.opt("rate")?.unwrap_or(10.0);
                let interval: u32 = p.opt("interval")?.unwrap_or(10);
                let pattern = match p.get("pattern").unwrap_or("cbr") {
                    "cbr" => Pattern::Cbr,
                    "burst" => Pattern::Burst(p.opt("burst")?.unwrap_or(5)),
                    other => return Err(format!("unknown pattern {other}")),
                };
                if packets == 0 || interval == 0 || !(rate > 0.0 && rate.is_finite()) {
                    return Err("packets, interval and rate must be positive".into());
                }
                self.nodes[i].traffic_running = true;
                self.nodes[i].temp_data = true;
                let mut rng = ChaCha8Rng::seed_from_u64(req.seed);
                let alive: Vec<bool> = self.nodes.iter().map(|n| n.up).collect();
                let path = traffic::shortest_path(self.nodes.len(), &self.adj, &self.edges, &alive, i, dst);
                let hops = path.clone().unwrap_or_default();
                let out = if path.is_some() {
                    traffic::run_flow(&hops, packets, interval, pattern, &mut rng)
                } else {
                    // Unreachable: everything is lost at the source.
                    let mut o = traffic::run_flow(&[], packets, interval, pattern, &mut rng);
                    for b in &mut o.buckets {
                        b.1 = 0;
                    }
                    o
                };
                self.account(&hops, &out.hop_counts);
                metrics.insert(
                    "delivery_ratio".into(),
                    out.buckets.iter().map(|&(s, d)| d as f64 / s as f64).collect(),
                );
                metrics.insert(
                    "throughput".into(),
                    out.buckets.iter().map(|&(s, d)| d as f64 * rate / s as f64).collect(),
                );
                if path.is_some() {
                    metrics.insert("hop_count".into(), vec![hops.len() as f64]);
                }
                (packets as f64 / rate).ceil() as u64
            }
            "ping_flood" => {
                let dst = self.idx(p.get("dst").ok_or("missing dst")?).map_err(|e| e.to_string())?;
                let count: u32 = p.opt("count")?.unwrap_or(10);
                let rate: f64 = p.opt("rate")?.unwrap_or(1.0);
                if count == 0 || !(rate > 0.0 && rate.is_finite()) {
                    return Err("count and rate must be positive".into());
                }
                self.nodes[i].temp_data = true;
                let mut rng = ChaCha8Rng::seed_from_u64(req.seed);
                let alive: Vec<bool> = self.nodes.iter().map(|n| n.up).collect();
                let n = self.nodes.len();
                let fwd = traffic::shortest_path(n, &self.adj, &self.edges, &alive, i, dst);
                let back = traffic::shortest_path(n, &self.adj, &self.edges, &alive, dst, i);
                let replies = match (&fwd, &back) {
                    (Some(f), Some(b)) => {
                        let mut round_trip = f.clone();
                        round_trip.extend_from_slice(b);
                        let out = traffic::run_flow(&round_trip, count, count, Pattern::Cbr, &mut rng);
                        self.account(&round_trip, &out.hop_counts);
                        out.buckets[0].1
                    }
                    _ => 0,
                };
                metrics.insert("delivery_ratio".into(), vec![replies as f64 / count as f64]);
                if let (Some(f), Some(b)) = (&fwd, &back) {
                    metrics.insert("rtt_hops".into(), vec![(f.len() + b.len()) as f64]);
                }
                (count as f64 / rate).ceil() as u64
            }
            _ => unreachable!("checked against the vocabulary"),
        };
        Ok((span, metrics))
    }

    fn account(&mut self, hops: &[traffic::Hop], counts: &[(u64, u64)]) {
        for (h, &(sent, got)) in hops.iter().zip(counts) {
            self.nodes[h.from].ifaces[0].tx_packets += sent;
            self.nodes[h.to].ifaces[0].rx_packets += got;
        }
    }

    /// Current configuration tuple of an up node.
    pub fn node_config(&self, id: &str) -> Result<Option<NodeConfig>, FleetError> {
        let n = &self.nodes[self.idx(id)?];
        Ok(n.up.then(|| n.config()))
    }
}

struct Params<'a>(&'a BTreeMap<String, String>);

impl Params<'_> {
    fn get(&self, k: &str) -> Option<&str> {
        self.0.get(k).map(String::as_str)
    }

    fn opt<T: std::str::FromStr>(&self, k: &str) -> Result<Option<T>, String> {
        self.get(k)
            .map(|v| v.parse().map_err(|_| format!("bad value for {k}: {v}")))
            .transpose()
    }

    fn req<T: std::str::FromStr>(&self, k: &str) -> Result<T, String> {
        self.opt(k)?.ok_or_else(|| format!("missing {k}"))
    }
}

/// Shared, lock-protected fleet. Cloning yields another handle to the same
/// simulation.
#[derive(Debug, Clone)]
pub struct FleetHandle(Arc<Mutex<Fleet>>);

impl FleetHandle {
    pub fn spawn(config: FleetConfig) -> Result<Self, FleetError> {
        Ok(Self::new(Fleet::spawn(config)?))
    }

    pub fn new(fleet: Fleet) -> Self {
        Self(Arc::new(Mutex::new(fleet)))
    }

    pub fn lock(&self) -> MutexGuard<'_, Fleet> {
        self.0.lock().unwrap_or_else(|e| e.into_inner())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn explicit(n: usize, links: &[(usize, usize, f64, f64)]) -> FleetConfig {
        let mut c = FleetConfig::new(n, 42);
        c.links = LinkModel::Explicit {
            links: links
                .iter()
                .map(|&(a, b, df, dr)| LinkSpec {
                    a: FleetConfig::node_id(a),
                    b: FleetConfig::node_id(b),
                    df,
                    dr,
                })
                .collect(),
        };
        c
    }

    fn churny(n: usize, up: f64, down: f64, watchdog: Option<u64>) -> FleetConfig {
        let mut c = explicit(n, &[]);
        c.churn = Some(ChurnParams { mean_up_s: up, mean_down_s: down });
        c.watchdog_s = watchdog;
        c
    }

    #[test]
    fn single_node_fleet() {
        let f = Fleet::spawn(explicit(1, &[])).unwrap();
        assert_eq!(f.now(), 0);
        let inv = f.inventory();
        assert_eq!(inv.len(), 1);
        assert!(inv[0].up);
        assert!(f.true_links().is_empty());
        assert!(f.measure_links(10).unwrap().is_empty());
    }

    #[test]
    fn paper_sized_fleet_layout() {
        let f = Fleet::spawn(FleetConfig::new(135, 1)).unwrap();
        let inv = f.inventory();
        assert_eq!(inv.len(), 135);
        let mut per = BTreeMap::new();
        for n in &inv {
            *per.entry(n.building.as_str()).or_insert(0) += 1;
        }
        assert_eq!(per.len(), 4);
        let mean_degree = inv.iter().map(|n| n.degree as f64).sum::<f64>() / 135.0;
        assert!((3.0..30.0).contains(&mean_degree), "{mean_degree}");
    }

    #[test]
    fn advance_zero_is_quiet() {
        let mut f = Fleet::spawn(churny(5, 100.0, 10.0, None)).unwrap();
        assert!(f.advance(0).is_empty());
    }

    #[test]
    fn events_are_time_ordered_and_alternate() {
        let mut f = Fleet::spawn(churny(6, 500.0, 100.0, Some(60))).unwrap();
        let ev = f.advance(50_000);
        assert!(!ev.is_empty());
        assert!(ev.windows(2).all(|w| w[0].time <= w[1].time));
        let mut last: BTreeMap<&str, (ChurnKind, u64)> = BTreeMap::new();
        for e in &ev {
            match last.get(e.node.as_str()) {
                None => assert_eq!(e.kind, ChurnKind::Down),
                Some(&(k, t)) => {
                    assert_ne!(k, e.kind);
                    if k == ChurnKind::Down {
                        assert!(e.time - t <= 60, "watchdog caps down periods");
                    }
                }
            }
            last.insert(&e.node, (e.kind, e.time));
        }
    }

    #[test]
    fn same_seed_same_future() {
        let mut a = Fleet::spawn(churny(10, 300.0, 50.0, Some(100))).unwrap();
        let mut b = Fleet::spawn(churny(10, 300.0, 50.0, Some(100))).unwrap();
        for step in [7, 1000, 3, 20_000] {
            assert_eq!(a.advance(step), b.advance(step));
            for id in ["n1", "n5", "n10"] {
                assert_eq!(a.poll(id, 10).unwrap(), b.poll(id, 10).unwrap());
            }
        }
    }

    #[test]
    fn uptime_accounting() {
        let mut f = Fleet::spawn(churny(3, 1000.0, 200.0, None)).unwrap();
        f.advance(100_000);
        for id in ["n1", "n2", "n3"] {
            let up = f.uptime(id).unwrap();
            assert!(up <= f.now());
            assert_eq!(up + f.downtime(id).unwrap(), f.now());
        }
    }

    #[test]
    fn availability_matches_closed_form() {
        for (up, down, w) in [(900.0, 100.0, None), (2000.0, 1000.0, Some(300)), (50.0, 50.0, Some(40))] {
            let c = churny(20, up, down, w);
            let expected = c.churn.unwrap().availability(w);
            let mut f = Fleet::spawn(c).unwrap();
            let horizon = 4_000_000;
            f.advance(horizon);
            let total: u64 = (0..20).map(|i| f.uptime(&FleetConfig::node_id(i)).unwrap()).sum();
            let got = total as f64 / (20 * horizon) as f64;
            assert!((got - expected).abs() < 0.01, "{up} {down} {w:?}: {got} vs {expected}");
        }
    }

    #[test]
    fn reboot_resets_counters_and_config() {
        let mut f = Fleet::spawn(explicit(2, &[(0, 1, 1.0, 1.0)])).unwrap();
        let req = ActionRequest::new("start_traffic", 60).param("dst", "n2");
        assert_eq!(f.execute_action("n1", &req).unwrap().status, ActionStatus::Ok);
        let set = ActionRequest::new("set_channel", 60).param("channel", "44");
        f.execute_action("n1", &set).unwrap();
        let before = f.poll("n1", 0).unwrap();
        assert!(before.interfaces[0].tx_packets >= 100);
        assert_eq!(before.config.as_ref().unwrap().channels[0], 44);
        f.inject_outage("n1", 5, 30).unwrap();
        let ev = f.advance(100);
        assert_eq!(ev.len(), 2);
        assert_eq!((ev[0].time, ev[0].kind), (5, ChurnKind::Down));
        assert_eq!((ev[1].time, ev[1].kind), (35, ChurnKind::Up));
        let after = f.poll("n1", 0).unwrap();
        assert_eq!(after.boots, 1);
        assert_eq!(after.interfaces[0].tx_packets, 0);
        let cfg = after.config.unwrap();
        assert_eq!(cfg.channels, NodeConfig::default().channels);
        assert!(!cfg.traffic_running);
        assert!(cfg.temp_data, "temporary data survives a reboot");
    }

    #[test]
    fn counters_monotone_while_up() {
        let mut f = Fleet::spawn(FleetConfig::new(12, 4)).unwrap();
        let mut last = vec![(0, 0); 12];
        for _ in 0..20 {
            f.advance(60);
            for i in 0..12 {
                let r = f.poll(&FleetConfig::node_id(i), 10).unwrap();
                let c = (r.interfaces[0].tx_packets, r.interfaces[0].rx_packets);
                assert!(c.0 >= last[i].0 && c.1 >= last[i].1);
                last[i] = c;
            }
        }
    }

    #[test]
    fn perfect_link_estimates_exactly_one() {
        let f = Fleet::spawn(explicit(2, &[(0, 1, 1.0, 1.0)])).unwrap();
        let m = f.measure_links(10).unwrap();
        assert_eq!(m.len(), 1);
        assert_eq!(m[0].state.etx.value(), 1.0);
    }

    #[test]
    fn reported_etx_is_inverse_product_of_estimates() {
        let mut f = Fleet::spawn(FleetConfig::new(40, 8)).unwrap();
        for _ in 0..5 {
            f.advance(10);
            for l in f.measure_links(10).unwrap() {
                let s = l.state;
                let p = s.df * s.dr;
                if p == 0.0 {
                    assert!(s.etx.is_infinite());
                } else {
                    assert_eq!(s.etx.value(), 1.0 / p);
                    assert!(s.etx.value() >= 1.0);
                }
            }
        }
    }

    #[test]
    fn down_endpoint_hides_link() {
        let mut f = Fleet::spawn(explicit(3, &[(0, 1, 1.0, 1.0), (1, 2, 0.5, 0.5)])).unwrap();
        f.inject_outage("n3", 1, 100).unwrap();
        f.advance(2);
        let m = f.measure_links(10).unwrap();
        assert_eq!(m.len(), 1);
        assert_eq!((m[0].a.as_str(), m[0].b.as_str()), ("n1", "n2"));
        let r = f.poll("n3", 10).unwrap();
        assert!(!r.up && r.links.is_empty() && r.config.is_none());
        assert_eq!(f.poll("n1", 10).unwrap().routes, 1);
    }

    #[test]
    fn poll_views_are_mirrored() {
        let f = Fleet::spawn(explicit(2, &[(0, 1, 0.7, 0.4)])).unwrap();
        let mut f2 = f.clone();
        let a = f2.poll("n1", 50).unwrap().links.remove(0);
        let b = f2.poll("n2", 50).unwrap().links.remove(0);
        assert_eq!((a.df, a.dr), (b.dr, b.df));
        assert_eq!(a.peer, "n2");
    }

    #[test]
    fn noop_and_down_nodes() {
        let mut f = Fleet::spawn(explicit(2, &[])).unwrap();
        let r = f.execute_action("n1", &ActionRequest::new("noop", 5)).unwrap();
        assert_eq!(r.status, ActionStatus::Ok);
        assert_eq!(r.metrics["alive"], vec![1.0]);
        f.inject_outage("n2", 1, 1000).unwrap();
        f.advance(1);
        let r = f.execute_action("n2", &ActionRequest::new("noop", 5)).unwrap();
        assert_eq!(r.status, ActionStatus::NodeDown);
        assert!(r.metrics.is_empty());
        assert!(matches!(
            f.execute_action("n1", &ActionRequest::new("format_disk", 5)),
            Err(FleetError::UnknownCommand(_))
        ));
        assert!(matches!(
            f.execute_action("n9", &ActionRequest::new("noop", 5)),
            Err(FleetError::UnknownNode(_))
        ));
    }

    #[test]
    fn lossless_traffic() {
        let mut f = Fleet::spawn(explicit(3, &[(0, 1, 1.0, 1.0), (1, 2, 1.0, 1.0)])).unwrap();
        let req = ActionRequest::new("start_traffic", 60)
            .param("dst", "n3")
            .param("packets", "50")
            .param("rate", "10");
        let r = f.execute_action("n1", &req).unwrap();
        assert_eq!(r.status, ActionStatus::Ok);
        assert!(r.metrics["delivery_ratio"].iter().all(|&d| d == 1.0));
        assert_eq!(r.metrics["hop_count"], vec![2.0]);
        assert_eq!(r.finished - r.started, 5);
        assert!(r.metrics["throughput"].iter().all(|&t| t == 10.0));
    }

    #[test]
    fn timeout_and_interruption() {
        let mut f = Fleet::spawn(explicit(2, &[(0, 1, 1.0, 1.0)])).unwrap();
        let long = ActionRequest::new("start_traffic", 3).param("dst", "n2").param("packets", "100");
        let r = f.execute_action("n1", &long).unwrap();
        assert_eq!(r.status, ActionStatus::Timeout);
        assert!(r.metrics.is_empty());
        f.inject_outage("n1", 4, 10).unwrap();
        let ping = ActionRequest::new("ping_flood", 60).param("dst", "n2").param("count", "10");
        let r = f.execute_action("n1", &ping).unwrap();
        assert_eq!(r.status, ActionStatus::Failed);
        assert_eq!(r.finished, 4);
    }

    #[test]
    fn unreachable_destination_delivers_nothing() {
        let mut f = Fleet::spawn(explicit(2, &[])).unwrap();
        let req = ActionRequest::new("start_traffic", 60).param("dst", "n2").param("packets", "20");
        let r = f.execute_action("n1", &req).unwrap();
        assert_eq!(r.status, ActionStatus::Ok);
        assert_eq!(r.metrics["delivery_ratio"], vec![0.0, 0.0]);
        assert!(!r.metrics.contains_key("hop_count"));
    }

    #[test]
    fn traffic_is_seeded() {
        let mut f = Fleet::spawn(explicit(2, &[(0, 1, 0.6, 0.6)])).unwrap();
        let req = ActionRequest::new("start_traffic", 60).param("dst", "n2").seed(5);
        let a = f.execute_action("n1", &req).unwrap();
        let b = f.execute_action("n1", &req).unwrap();
        assert_eq!(a.metrics, b.metrics);
        let c = f.execute_action("n1", &req.clone().seed(6)).unwrap();
        assert_ne!(a.metrics, c.metrics);
    }

    #[test]
    fn registry_commands_are_implemented() {
        let reg = crate::descript::ActionRegistry::fleet();
        let mut f = Fleet::spawn(explicit(2, &[(0, 1, 1.0, 1.0)])).unwrap();
        for c in reg.commands() {
            let mut req = ActionRequest::new(c.name.clone(), 600);
            for p in c.params.iter().filter(|p| p.required) {
                let v = match p.name.as_str() {
                    "dst" => "n2",
                    "channel" => "6",
                    _ => "1",
                };
                req = req.param(p.name.clone(), v);
            }
            let r = f.execute_action("n1", &req).unwrap();
            assert_eq!(r.status, ActionStatus::Ok, "{}", c.name);
            for m in &c.emits {
                assert!(r.metrics.contains_key(m), "{} emits {m}", c.name);
            }
        }
    }
}
