//! Experiment scheduling and replication execution.
//!
//! The orchestrator owns the queue, the node reservation table and virtual
//! time. Every replication goes through prepare, execute and cleanup; the
//! fleet is only touched through [`FleetControl`]. Externally all times are
//! store timestamps (`epoch + fleet time`).
//!
//! Everything noteworthy is written to the store as `run_event` records. A
//! node is held by an entry between its `nodes_acquired` and
//! `nodes_released` events.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::descript::{
    direct_references, resolve_groups, validate_with, Action, ActionRegistry, ExperimentDescription,
    InventoryNode, ParamKind, Resolution, Selection, ValidationReport,
};
use crate::fleet::{ActionRequest, ActionResult, ActionStatus, ChurnEvent, ControlError, FleetControl, NodeConfig};
use crate::seed;
use crate::store::{NewRecord, RecordKind, Store, StoreError, VirtualClock};

mod fingerprint;
mod replications;

pub use fingerprint::{baseline_fingerprint, fingerprint};
pub use replications::{required_replications, ReplicationError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EntryStatus {
    Queued,
    Active,
    Done,
    Aborted,
    Failed,
}

impl EntryStatus {
    pub fn is_terminal(self) -> bool {
        matches!(self, EntryStatus::Done | EntryStatus::Aborted | EntryStatus::Failed)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            EntryStatus::Queued => "queued",
            EntryStatus::Active => "active",
            EntryStatus::Done => "done",
            EntryStatus::Aborted => "aborted",
            EntryStatus::Failed => "failed",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Pending,
    Preparing,
    Executing,
    Cleaning,
    Done,
    Failed,
    Aborted,
}

impl Phase {
    pub fn is_terminal(self) -> bool {
        matches!(self, Phase::Done | Phase::Failed | Phase::Aborted)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Phase::Pending => "pending",
            Phase::Preparing => "preparing",
            Phase::Executing => "executing",
            Phase::Cleaning => "cleaning",
            Phase::Done => "done",
            Phase::Failed => "failed",
            Phase::Aborted => "aborted",
        }
    }

    fn may_become(self, next: Phase) -> bool {
        use Phase::*;
        matches!(
            (self, next),
            (Pending, Preparing)
                | (Preparing, Executing)
                | (Executing, Cleaning)
                | (Cleaning, Done | Failed | Aborted)
                | (Pending | Preparing, Cleaning)
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScheduleEntry {
    pub id: String,
    pub experiment: String,
    pub owner: String,
    pub topic: Option<String>,
    pub submitted: u64,
    pub start: u64,
    /// Node set held by the entry; empty while queued.
    pub nodes: Vec<String>,
    pub replications: u32,
    /// Submission order.
    pub priority: u64,
    pub status: EntryStatus,
    pub activated: Option<u64>,
    pub finished: Option<u64>,
    pub runs: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicationRun {
    pub run_id: String,
    pub entry: String,
    pub experiment: String,
    pub replication: u32,
    pub phase: Phase,
    pub started: Option<u64>,
    pub ended: Option<u64>,
    pub nodes: Vec<String>,
    pub prepare_fingerprint: Option<String>,
    pub cleanup_fingerprint: Option<String>,
    /// Ids of the `experiment_data` records appended while executing.
    pub observations: Vec<u64>,
}

#[derive(Debug, thiserror::Error)]
pub enum OrchestratorError {
    #[error("description is not valid for the current inventory")]
    Invalid(ValidationReport),
    #[error("start time {start} is before now ({now})")]
    StartInPast { start: u64, now: u64 },
    #[error("unknown run {0}")]
    UnknownRun(String),
    #[error("run {0} has already finished")]
    RunTerminal(String),
    #[error("fleet: {0}")]
    Control(#[from] ControlError),
    #[error(transparent)]
    Store(#[from] StoreError),
}

impl OrchestratorError {
    pub fn code(&self) -> &'static str {
        match self {
            OrchestratorError::Invalid(_) => "INVALID_DESCRIPTION",
            OrchestratorError::StartInPast { .. } => "START_IN_PAST",
            OrchestratorError::UnknownRun(_) => "UNKNOWN_RUN",
            OrchestratorError::RunTerminal(_) => "RUN_TERMINAL",
            OrchestratorError::Control(_) => "FLEET",
            OrchestratorError::Store(_) => "STORE",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct OrchestratorConfig {
    pub seed: u64,
    /// Store timestamp of fleet time 0.
    pub epoch: u64,
    pub prepare_attempts: u32,
    pub retry_delay_s: u64,
    /// How often queued entries blocked on down nodes are re-examined.
    pub requeue_s: u64,
}

impl Default for OrchestratorConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            epoch: 0,
            prepare_attempts: 3,
            retry_delay_s: 10,
            requeue_s: 60,
        }
    }
}

/// Timeout for the actions the orchestrator issues itself.
const SYSTEM_TIMEOUT: u64 = 60;

#[derive(Debug)]
enum Stage {
    Prepare {
        attempt: u32,
    },
    /// Plan items are `(offset, action index)`; `end` the running phase end.
    Execute {
        t0: u64,
        plan: Vec<(u64, usize)>,
        next: usize,
        end: u64,
        ok: BTreeSet<usize>,
    },
    UserCleanup {
        t0: u64,
        plan: Vec<(u64, usize)>,
        next: usize,
        end: u64,
    },
    SystemCleanup {
        attempt: u32,
        pending: Vec<String>,
    },
}

#[derive(Debug)]
struct Active {
    j: usize,
    stage: Stage,
    wake: u64,
    failed: bool,
}

#[derive(Debug)]
struct Entry {
    info: ScheduleEntry,
    desc: ExperimentDescription,
    resolution: Resolution,
    runs: Vec<ReplicationRun>,
    active: Option<Active>,
    abort: bool,
}

pub struct Orchestrator {
    config: OrchestratorConfig,
    registry: ActionRegistry,
    fleet: Box<dyn FleetControl + Send>,
    store: Arc<Store>,
    clock: Option<VirtualClock>,
    /// Fleet time.
    now: u64,
    entries: Vec<Entry>,
    runs: BTreeMap<String, (usize, usize)>,
    reserved: BTreeMap<String, usize>,
}

impl std::fmt::Debug for Orchestrator {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Orchestrator")
            .field("now", &self.now())
            .field("entries", &self.entries.len())
            .field("reserved", &self.reserved.len())
            .finish()
    }
}

impl Orchestrator {
    /// `clock`, if given, is kept at `epoch + fleet time` so store records
    /// carry virtual timestamps.
    pub fn new(
        config: OrchestratorConfig,
        registry: ActionRegistry,
        fleet: Box<dyn FleetControl + Send>,
        store: Arc<Store>,
        clock: Option<VirtualClock>,
    ) -> Self {
        if let Some(c) = &clock {
            c.set(config.epoch);
        }
        Self {
            config,
            registry,
            fleet,
            store,
            clock,
            now: 0,
            entries: Vec::new(),
            runs: BTreeMap::new(),
            reserved: BTreeMap::new(),
        }
    }

    pub fn config(&self) -> &OrchestratorConfig {
        &self.config
    }

    pub fn store(&self) -> &Arc<Store> {
        &self.store
    }

    pub fn registry(&self) -> &ActionRegistry {
        &self.registry
    }

    pub fn fleet_mut(&mut self) -> &mut dyn FleetControl {
        self.fleet.as_mut()
    }

    /// Current time as a store timestamp.
    pub fn now(&self) -> u64 {
        self.config.epoch + self.now
    }

    fn ts(&self, t: u64) -> u64 {
        self.config.epoch + t
    }

    pub fn inventory(&mut self) -> Result<Vec<InventoryNode>, OrchestratorError> {
        Ok(self.fleet.inventory()?)
    }

    pub fn validate(&mut self, desc: &ExperimentDescription) -> Result<ValidationReport, OrchestratorError> {
        let inv = self.fleet.inventory()?;
        Ok(validate_with(desc, &inv, &self.registry))
    }

    pub fn entries(&self) -> impl Iterator<Item = &ScheduleEntry> {
        self.entries.iter().map(|e| &e.info)
    }

    pub fn entry(&self, id: &str) -> Option<&ScheduleEntry> {
        self.entry_index(id).map(|i| &self.entries[i].info)
    }

    fn entry_index(&self, id: &str) -> Option<usize> {
        let seq: usize = id.strip_prefix('q')?.parse().ok()?;
        let i = seq.checked_sub(1)?;
        (self.entries.get(i)?.info.id == id).then_some(i)
    }

    pub fn run(&self, run_id: &str) -> Option<&ReplicationRun> {
        let &(e, j) = self.runs.get(run_id)?;
        Some(&self.entries[e].runs[j])
    }

    /// Node to holding entry id.
    pub fn reservations(&self) -> BTreeMap<String, String> {
        self.reserved
            .iter()
            .map(|(n, &e)| (n.clone(), self.entries[e].info.id.clone()))
            .collect()
    }

    /// True when every entry has reached a terminal state.
    pub fn is_idle(&self) -> bool {
        self.entries.iter().all(|e| e.info.status.is_terminal())
    }

    fn event(&self, scope: &str, payload: Value) -> Result<u64, StoreError> {
        self.store
            .append(NewRecord::new(RecordKind::RunEvent, payload).run(scope))
    }

    /// Queues `desc` for execution no earlier than `start`.
    pub fn schedule(
        &mut self,
        desc: ExperimentDescription,
        owner: &str,
        start: u64,
    ) -> Result<ScheduleEntry, OrchestratorError> {
        if start < self.now() {
            return Err(OrchestratorError::StartInPast { start, now: self.now() });
        }
        let report = self.validate(&desc)?;
        if !report.is_ok() {
            return Err(OrchestratorError::Invalid(report));
        }
        let seq = self.entries.len();
        let id = format!("q{:05}", seq + 1);
        let runs: Vec<ReplicationRun> = (1..=desc.replications)
            .map(|j| ReplicationRun {
                run_id: format!("{id}.{j}"),
                entry: id.clone(),
                experiment: desc.id.clone(),
                replication: j,
                phase: Phase::Pending,
                started: None,
                ended: None,
                nodes: Vec::new(),
                prepare_fingerprint: None,
                cleanup_fingerprint: None,
                observations: Vec::new(),
            })
            .collect();
        let info = ScheduleEntry {
            id: id.clone(),
            experiment: desc.id.clone(),
            owner: owner.to_string(),
            topic: desc.topic.clone(),
            submitted: self.now(),
            start,
            nodes: Vec::new(),
            replications: desc.replications,
            priority: seq as u64,
            status: EntryStatus::Queued,
            activated: None,
            finished: None,
            runs: runs.iter().map(|r| r.run_id.clone()).collect(),
        };
        for (j, r) in runs.iter().enumerate() {
            self.runs.insert(r.run_id.clone(), (seq, j));
        }
        self.event(
            &id,
            json!({
                "event": "entry_queued",
                "entry": id,
                "experiment": desc.id,
                "owner": owner,
                "topic": desc.topic,
                "start": start,
                "replications": desc.replications,
            }),
        )?;
        self.entries.push(Entry {
            info: info.clone(),
            desc,
            resolution: Resolution::default(),
            runs,
            active: None,
            abort: false,
        });
        self.activate_waiting()?;
        Ok(info)
    }

    /// Aborts the entry owning `id` (a run id or an entry id). The current
    /// replication goes through cleanup; pending ones are dropped.
    pub fn abort(&mut self, id: &str) -> Result<(), OrchestratorError> {
        let (e, j) = match self.runs.get(id) {
            Some(&(e, j)) => (e, Some(j)),
            None => match self.entry_index(id) {
                Some(e) => (e, None),
                None => return Err(OrchestratorError::UnknownRun(id.to_string())),
            },
        };
        let entry = &self.entries[e];
        let terminal = match j {
            Some(j) => entry.runs[j].phase.is_terminal(),
            None => entry.info.status.is_terminal(),
        };
        if terminal || entry.info.status.is_terminal() {
            return Err(OrchestratorError::RunTerminal(id.to_string()));
        }
        let eid = entry.info.id.clone();
        self.event(&eid, json!({"event": "abort_requested", "entry": eid, "target": id}))?;
        self.entries[e].abort = true;
        match self.entries[e].info.status {
            EntryStatus::Queued => self.finish_entry(e)?,
            _ => {
                let act = self.entries[e].active.as_ref().expect("active entry has a run");
                if matches!(act.stage, Stage::Prepare { .. } | Stage::Execute { .. }) {
                    self.begin_cleanup(e)?;
                }
            }
        }
        Ok(())
    }

    /// Earliest time (store timestamp) at which something is due.
    pub fn next_wakeup(&self) -> Option<u64> {
        let mut best: Option<u64> = None;
        let mut consider = |t: u64| best = Some(best.map_or(t, |b| b.min(t)));
        let mut waiting = false;
        for e in &self.entries {
            if let Some(a) = &e.active {
                consider(self.ts(a.wake));
            } else if e.info.status == EntryStatus::Queued {
                if e.info.start > self.now() {
                    consider(e.info.start);
                } else {
                    waiting = true;
                }
            }
        }
        if waiting {
            consider(self.now() + self.config.requeue_s);
        }
        best
    }

    /// Moves the fleet (and the store clock) forward to `t`.
    pub fn advance_to(&mut self, t: u64) -> Result<Vec<ChurnEvent>, OrchestratorError> {
        let target = t.saturating_sub(self.config.epoch).max(self.now);
        let events = self.fleet.advance(target - self.now)?;
        self.now = target;
        if let Some(c) = &self.clock {
            c.set(self.ts(target));
        }
        Ok(events)
    }

    /// Does all work due at the current time.
    pub fn step(&mut self) -> Result<(), OrchestratorError> {
        loop {
            let mut progressed = false;
            for e in 0..self.entries.len() {
                while self.entries[e].active.as_ref().is_some_and(|a| a.wake <= self.now) {
                    self.advance_entry(e)?;
                    progressed = true;
                }
            }
            if self.activate_waiting()? {
                progressed = true;
            }
            if !progressed {
                return Ok(());
            }
        }
    }

    /// Steps through time until nothing is left to do or `until` is reached.
    pub fn run_until(&mut self, until: u64) -> Result<(), OrchestratorError> {
        self.step()?;
        while let Some(t) = self.next_wakeup() {
            if t > until || self.is_idle() {
                break;
            }
            self.advance_to(t)?;
            self.step()?;
        }
        Ok(())
    }

    /// Drives the simulation until replication `j` (1-based) of `entry` has
    /// finished and returns it.
    pub fn run_replication(&mut self, entry: &str, j: u32) -> Result<ReplicationRun, OrchestratorError> {
        let e = self
            .entry_index(entry)
            .ok_or_else(|| OrchestratorError::UnknownRun(entry.to_string()))?;
        let k = (j as usize)
            .checked_sub(1)
            .filter(|&k| k < self.entries[e].runs.len())
            .ok_or_else(|| OrchestratorError::UnknownRun(format!("{entry}.{j}")))?;
        self.step()?;
        while !self.entries[e].runs[k].phase.is_terminal() {
            match self.next_wakeup() {
                Some(t) => {
                    self.advance_to(t)?;
                    self.step()?;
                }
                None => break,
            }
        }
        Ok(self.entries[e].runs[k].clone())
    }

    fn activate_waiting(&mut self) -> Result<bool, OrchestratorError> {
        let now = self.now();
        let eligible: Vec<usize> = (0..self.entries.len())
            .filter(|&e| self.entries[e].info.status == EntryStatus::Queued && self.entries[e].info.start <= now)
            .collect();
        if eligible.is_empty() {
            return Ok(false);
        }
        let inventory = self.fleet.inventory()?;
        let mut blocked: BTreeSet<String> = BTreeSet::new();
        let mut activated = false;
        for e in eligible {
            let free: Vec<InventoryNode> = inventory
                .iter()
                .filter(|n| !self.reserved.contains_key(&n.id) && !blocked.contains(&n.id))
                .cloned()
                .collect();
            let desc = &self.entries[e].desc;
            let mut rng = seed::rng(self.config.seed, &[b"resolve", desc.id.as_bytes(), &1u32.to_le_bytes()]);
            match resolve_groups(desc, &self.registry, &free, Some(&mut rng)) {
                Ok(res) => {
                    self.activate(e, res)?;
                    activated = true;
                }
                Err(_) => {
                    // Keep the nodes this entry would get once they free up
                    // away from later entries.
                    let unreserved: Vec<InventoryNode> =
                        inventory.iter().filter(|n| !blocked.contains(&n.id)).cloned().collect();
                    let mut rng = seed::rng(self.config.seed, &[b"resolve", desc.id.as_bytes(), &1u32.to_le_bytes()]);
                    match resolve_groups(desc, &self.registry, &unreserved, Some(&mut rng)) {
                        Ok(res) => blocked.extend(res.nodes().iter().cloned()),
                        Err(_) => {
                            let mut statics: Vec<String> = desc
                                .groups
                                .iter()
                                .filter_map(|g| match &g.selection {
                                    Selection::Static(n) => Some(n.clone()),
                                    _ => None,
                                })
                                .flatten()
                                .collect();
                            statics.extend(direct_references(desc, &self.registry));
                            blocked.extend(statics);
                        }
                    }
                }
            }
        }
        Ok(activated)
    }

    fn acquire(&mut self, e: usize, nodes: &[String]) -> Result<(), StoreError> {
        if nodes.is_empty() {
            return Ok(());
        }
        for n in nodes {
            let prev = self.reserved.insert(n.clone(), e);
            assert!(prev.is_none_or(|p| p == e), "node {n} reserved twice");
        }
        let id = self.entries[e].info.id.clone();
        self.event(&id, json!({"event": "nodes_acquired", "entry": id, "nodes": nodes}))?;
        Ok(())
    }

    fn release(&mut self, e: usize, nodes: &[String]) -> Result<(), StoreError> {
        if nodes.is_empty() {
            return Ok(());
        }
        for n in nodes {
            let prev = self.reserved.remove(n);
            debug_assert_eq!(prev, Some(e));
        }
        let id = self.entries[e].info.id.clone();
        self.event(&id, json!({"event": "nodes_released", "entry": id, "nodes": nodes}))?;
        Ok(())
    }

    fn activate(&mut self, e: usize, res: Resolution) -> Result<(), StoreError> {
        let nodes = res.nodes().to_vec();
        self.acquire(e, &nodes)?;
        let now = self.now();
        let entry = &mut self.entries[e];
        entry.resolution = res;
        entry.info.status = EntryStatus::Active;
        entry.info.activated = Some(now);
        entry.info.nodes = nodes.clone();
        let id = entry.info.id.clone();
        self.event(
            &id,
            json!({"event": "entry_activated", "entry": id, "node_count": nodes.len()}),
        )?;
        self.start_run(e, 0)
    }

    fn start_run(&mut self, e: usize, j: usize) -> Result<(), StoreError> {
        self.entries[e].active = Some(Active {
            j,
            stage: Stage::Prepare { attempt: 0 },
            wake: self.now,
            failed: false,
        });
        Ok(())
    }

    fn set_phase(&mut self, e: usize, j: usize, phase: Phase, extra: Value) -> Result<(), StoreError> {
        let now = self.now();
        let run = &mut self.entries[e].runs[j];
        assert!(
            run.phase.may_become(phase),
            "illegal phase change {:?} -> {:?}",
            run.phase,
            phase
        );
        let from = run.phase;
        run.phase = phase;
        if phase == Phase::Preparing {
            run.started = Some(now);
        }
        if phase.is_terminal() {
            run.ended = Some(now);
        }
        let run_id = run.run_id.clone();
        let mut payload = json!({
            "event": "phase",
            "entry": run.entry,
            "run": run_id,
            "replication": run.replication,
            "from": from.as_str(),
            "to": phase.as_str(),
        });
        if let (Value::Object(p), Value::Object(x)) = (&mut payload, extra) {
            p.extend(x);
        }
        self.event(&run_id, payload)?;
        Ok(())
    }

    /// Fresh dynamic-group assignment for replication `j` among this
    /// entry's nodes and currently free ones.
    fn reresolve(&mut self, e: usize, j: usize) -> Result<(), OrchestratorError> {
        let has_dynamic = self.entries[e]
            .desc
            .groups
            .iter()
            .any(|g| matches!(g.selection, Selection::Dynamic { .. }));
        if j == 0 || !has_dynamic {
            return Ok(());
        }
        let inventory = self.fleet.inventory()?;
        let pool: Vec<InventoryNode> = inventory
            .into_iter()
            .filter(|n| self.reserved.get(&n.id).is_none_or(|&h| h == e))
            .collect();
        let desc = &self.entries[e].desc;
        let mut rng = seed::rng(
            self.config.seed,
            &[b"resolve", desc.id.as_bytes(), &(j as u32 + 1).to_le_bytes()],
        );
        let Ok(res) = resolve_groups(desc, &self.registry, &pool, Some(&mut rng)) else {
            return Ok(());
        };
        let old: BTreeSet<String> = self.entries[e].info.nodes.iter().cloned().collect();
        let new: BTreeSet<String> = res.nodes().iter().cloned().collect();
        let gone: Vec<String> = old.difference(&new).cloned().collect();
        let added: Vec<String> = res.nodes().iter().filter(|n| !old.contains(*n)).cloned().collect();
        self.release(e, &gone)?;
        self.acquire(e, &added)?;
        self.entries[e].info.nodes = res.nodes().to_vec();
        self.entries[e].resolution = res;
        Ok(())
    }

    fn advance_entry(&mut self, e: usize) -> Result<(), OrchestratorError> {
        let j = self.active(e).j;
        match self.active(e).stage {
            Stage::Prepare { .. } => {
                if self.entries[e].runs[j].phase == Phase::Pending {
                    self.reresolve(e, j)?;
                    let nodes = self.entries[e].info.nodes.clone();
                    self.entries[e].runs[j].nodes = nodes.clone();
                    self.set_phase(e, j, Phase::Preparing, json!({"nodes": nodes}))?;
                }
                self.prepare(e)
            }
            Stage::Execute { .. } => self.execute(e),
            Stage::UserCleanup { .. } => self.user_cleanup(e),
            Stage::SystemCleanup { .. } => self.system_cleanup(e),
        }
    }

    fn active(&mut self, e: usize) -> &mut Active {
        self.entries[e].active.as_mut().expect("entry is active")
    }

    fn read_configs(&mut self, nodes: &[String]) -> Vec<Option<NodeConfig>> {
        nodes
            .iter()
            .map(|n| self.fleet.poll(n, 0).ok().and_then(|r| r.config))
            .collect()
    }

    fn prepare(&mut self, e: usize) -> Result<(), OrchestratorError> {
        let Stage::Prepare { attempt } = self.active(e).stage else { unreachable!() };
        let nodes = self.entries[e].info.nodes.clone();
        let mut down = Vec::new();
        for n in &nodes {
            let mut ok = true;
            for cmd in ["reset_config", "clear_temp"] {
                let req = ActionRequest::new(cmd, SYSTEM_TIMEOUT);
                ok &= matches!(self.fleet.exec(n, &req), Ok(r) if r.status == ActionStatus::Ok);
            }
            if !ok {
                down.push(n.clone());
            }
        }
        let j = self.active(e).j;
        let run_id = self.entries[e].runs[j].run_id.clone();
        if down.is_empty() {
            let fp = fingerprint(&self.read_configs(&nodes));
            self.entries[e].runs[j].prepare_fingerprint = Some(fp.clone());
            self.set_phase(e, j, Phase::Executing, json!({"prepare_fingerprint": fp}))?;
            let desc = &self.entries[e].desc;
            let mut plan: Vec<(u64, usize)> = desc
                .actions
                .iter()
                .enumerate()
                .map(|(i, a)| (a.start_offset, i))
                .collect();
            plan.sort();
            let now = self.now;
            let a = self.active(e);
            a.stage = Stage::Execute {
                t0: now,
                plan,
                next: 0,
                end: now,
                ok: BTreeSet::new(),
            };
            a.wake = now;
        } else if attempt + 1 < self.config.prepare_attempts {
            self.event(
                &run_id,
                json!({"event": "prepare_retry", "run": run_id, "attempt": attempt + 1, "nodes_down": down}),
            )?;
            let wake = self.now + self.config.retry_delay_s;
            let a = self.active(e);
            a.stage = Stage::Prepare { attempt: attempt + 1 };
            a.wake = wake;
        } else {
            self.event(
                &run_id,
                json!({"event": "prepare_failed", "run": run_id, "attempts": attempt + 1, "nodes_down": down}),
            )?;
            self.active(e).failed = true;
            self.begin_cleanup(e)?;
        }
        Ok(())
    }

    /// Request for `action` as sent to the `k`-th of its target nodes.
    fn request_for(&self, e: usize, j: usize, index: usize, action: &Action, node: &str, k: usize, cleanup: bool) -> ActionRequest {
        let entry = &self.entries[e];
        let spec = self.registry.get(&action.command);
        let mut params = action.params.clone();
        if let (Some(spec), Some(traffic)) = (spec, &entry.desc.traffic) {
            if spec.param("pattern").is_some() {
                params.entry("pattern".into()).or_insert_with(|| traffic.pattern.clone());
            }
            for (k, v) in &traffic.params {
                if spec.param(k).is_some() {
                    params.entry(k.clone()).or_insert_with(|| v.clone());
                }
            }
        }
        if let Some(spec) = spec {
            for p in spec.params.iter().filter(|p| p.kind == ParamKind::Node) {
                if let Some(v) = params.get_mut(&p.name) {
                    if let Some(group) = entry.resolution.groups.get(v.as_str()) {
                        if !group.is_empty() {
                            *v = group[k % group.len()].clone();
                        }
                    }
                }
            }
        }
        let phase: &[u8] = if cleanup { b"cleanup" } else { b"execute" };
        let seed = seed::derive(
            self.config.seed,
            &[
                b"action",
                entry.desc.id.as_bytes(),
                &(j as u32 + 1).to_le_bytes(),
                phase,
                &(index as u64).to_le_bytes(),
                node.as_bytes(),
            ],
        );
        ActionRequest {
            command: action.command.clone(),
            params,
            timeout: action.timeout,
            seed,
        }
    }

    fn dispatch(&mut self, e: usize, index: usize, cleanup: bool) -> Vec<(String, ActionResult)> {
        let j = self.active(e).j;
        let action = if cleanup {
            self.entries[e].desc.cleanup[index].clone()
        } else {
            self.entries[e].desc.actions[index].clone()
        };
        let targets: Vec<String> = self.entries[e]
            .resolution
            .expand(&action.target)
            .into_iter()
            .map(str::to_string)
            .collect();
        let mut out = Vec::new();
        for (k, node) in targets.iter().enumerate() {
            let req = self.request_for(e, j, index, &action, node, k, cleanup);
            let result = self.fleet.exec(node, &req).unwrap_or_else(|err| ActionResult {
                node: node.clone(),
                command: req.command.clone(),
                status: ActionStatus::Failed,
                metrics: BTreeMap::new(),
                started: self.now,
                finished: self.now,
                detail: Some(err.to_string()),
            });
            out.push((node.clone(), result));
        }
        out
    }

    fn execute(&mut self, e: usize) -> Result<(), OrchestratorError> {
        let now = self.now;
        let j = self.active(e).j;
        let run_id = self.entries[e].runs[j].run_id.clone();
        let Stage::Execute { t0, plan, next, .. } = &self.active(e).stage else { unreachable!() };
        let (t0, plan, mut next) = (*t0, plan.clone(), *next);
        let duration = self.entries[e].desc.duration_limit;
        if next == plan.len() {
            let Stage::Execute { end, .. } = &self.active(e).stage else { unreachable!() };
            let until = (*end).max(t0 + duration);
            if now < until {
                self.active(e).wake = until;
                return Ok(());
            }
            return self.begin_cleanup(e);
        }
        let mut end = now;
        let mut ok_now = Vec::new();
        while next < plan.len() && t0 + plan[next].0 <= now {
            let index = plan[next].1;
            for (node, r) in self.dispatch(e, index, false) {
                end = end.max(r.finished);
                if r.status == ActionStatus::Ok {
                    ok_now.push(index);
                } else {
                    self.event(
                        &run_id,
                        json!({
                            "event": "action_status",
                            "run": run_id,
                            "action": index,
                            "node": node,
                            "status": r.status.as_str(),
                            "detail": r.detail,
                        }),
                    )?;
                }
                let desc = &self.entries[e].desc;
                let payload = json!({
                    "experiment": desc.id,
                    "entry": self.entries[e].info.id,
                    "replication": j + 1,
                    "action": index,
                    "command": r.command,
                    "status": r.status.as_str(),
                    "metrics": r.metrics,
                    "offset": r.started - t0,
                    "span": r.finished - r.started,
                    "detail": r.detail,
                });
                let id = self
                    .store
                    .append(NewRecord::new(RecordKind::ExperimentData, payload).run(&run_id).node(&node))?;
                self.entries[e].runs[j].observations.push(id);
            }
            next += 1;
        }
        let a = self.active(e);
        if let Stage::Execute { next: n, end: en, ok, .. } = &mut a.stage {
            *n = next;
            *en = (*en).max(end);
            ok.extend(ok_now);
            a.wake = if next < plan.len() {
                t0 + plan[next].0
            } else {
                (*en).max(t0 + duration).max(now)
            };
        }
        Ok(())
    }

    /// Metric-critical actions emit a metric the description asks for.
    fn critical_failure(&self, e: usize, ok: &BTreeSet<usize>) -> Option<usize> {
        let desc = &self.entries[e].desc;
        let wanted: BTreeSet<&str> = desc.metrics.iter().map(|m| m.name.as_str()).collect();
        desc.actions.iter().enumerate().find_map(|(i, a)| {
            let critical = self
                .registry
                .get(&a.command)
                .is_some_and(|s| s.emits.iter().any(|m| wanted.contains(m.as_str())));
            (critical && !ok.contains(&i)).then_some(i)
        })
    }

    fn begin_cleanup(&mut self, e: usize) -> Result<(), OrchestratorError> {
        let j = self.active(e).j;
        let mut extra = json!({});
        if let Stage::Execute { ok, .. } = &self.active(e).stage {
            let ok = ok.clone();
            if !self.entries[e].abort {
                if let Some(i) = self.critical_failure(e, &ok) {
                    self.active(e).failed = true;
                    extra = json!({"critical_failure": i});
                }
            }
        }
        if self.entries[e].abort {
            extra = json!({"reason": "abort"});
        }
        self.set_phase(e, j, Phase::Cleaning, extra)?;
        let mut plan: Vec<(u64, usize)> = self.entries[e]
            .desc
            .cleanup
            .iter()
            .enumerate()
            .map(|(i, a)| (a.start_offset, i))
            .collect();
        plan.sort();
        let now = self.now;
        let a = self.active(e);
        a.stage = Stage::UserCleanup {
            t0: now,
            plan,
            next: 0,
            end: now,
        };
        a.wake = now;
        Ok(())
    }

    fn user_cleanup(&mut self, e: usize) -> Result<(), OrchestratorError> {
        let now = self.now;
        let j = self.active(e).j;
        let run_id = self.entries[e].runs[j].run_id.clone();
        let Stage::UserCleanup { t0, plan, next, end } = &self.active(e).stage else { unreachable!() };
        let (t0, plan, mut next, mut end) = (*t0, plan.clone(), *next, *end);
        if next == plan.len() {
            let nodes = self.entries[e].info.nodes.clone();
            let a = self.active(e);
            a.stage = Stage::SystemCleanup { attempt: 0, pending: nodes };
            a.wake = now;
            return Ok(());
        }
        while next < plan.len() && t0 + plan[next].0 <= now {
            let index = plan[next].1;
            for (node, r) in self.dispatch(e, index, true) {
                end = end.max(r.finished);
                if r.status != ActionStatus::Ok {
                    self.event(
                        &run_id,
                        json!({
                            "event": "cleanup_action",
                            "run": run_id,
                            "action": index,
                            "node": node,
                            "status": r.status.as_str(),
                            "detail": r.detail,
                        }),
                    )?;
                }
            }
            next += 1;
        }
        let a = self.active(e);
        a.stage = Stage::UserCleanup { t0, plan: plan.clone(), next, end };
        a.wake = if next < plan.len() { t0 + plan[next].0 } else { end.max(now) };
        Ok(())
    }

    fn system_cleanup(&mut self, e: usize) -> Result<(), OrchestratorError> {
        let Stage::SystemCleanup { attempt, pending } = &self.active(e).stage else { unreachable!() };
        let (attempt, pending) = (*attempt, pending.clone());
        let mut left = Vec::new();
        for n in &pending {
            let mut ok = true;
            for cmd in ["stop_traffic", "clear_temp", "reset_config"] {
                let req = ActionRequest::new(cmd, SYSTEM_TIMEOUT);
                ok &= matches!(self.fleet.exec(n, &req), Ok(r) if r.status == ActionStatus::Ok);
            }
            if !ok {
                left.push(n.clone());
            }
        }
        if !left.is_empty() && attempt + 1 < self.config.prepare_attempts {
            let wake = self.now + self.config.retry_delay_s;
            let a = self.active(e);
            a.stage = Stage::SystemCleanup { attempt: attempt + 1, pending: left };
            a.wake = wake;
            return Ok(());
        }
        let j = self.active(e).j;
        let nodes = self.entries[e].info.nodes.clone();
        let fp = fingerprint(&self.read_configs(&nodes));
        let baseline = fp == baseline_fingerprint(nodes.len());
        self.entries[e].runs[j].cleanup_fingerprint = Some(fp.clone());
        let run_id = self.entries[e].runs[j].run_id.clone();
        self.event(
            &run_id,
            json!({"event": "cleanup_exit", "run": run_id, "fingerprint": fp, "baseline": baseline, "unclean": left}),
        )?;
        let failed = self.active(e).failed;
        let phase = if self.entries[e].abort {
            Phase::Aborted
        } else if failed {
            Phase::Failed
        } else {
            Phase::Done
        };
        let obs = self.entries[e].runs[j].observations.len();
        self.set_phase(e, j, phase, json!({"observations": obs}))?;
        self.entries[e].active = None;
        if !self.entries[e].abort && j + 1 < self.entries[e].runs.len() {
            self.start_run(e, j + 1)?;
        } else {
            self.finish_entry(e)?;
        }
        Ok(())
    }

    fn finish_entry(&mut self, e: usize) -> Result<(), OrchestratorError> {
        for j in 0..self.entries[e].runs.len() {
            if self.entries[e].runs[j].phase == Phase::Pending {
                self.set_phase(e, j, Phase::Cleaning, json!({"reason": "abort"}))?;
                self.set_phase(e, j, Phase::Aborted, json!({"observations": 0}))?;
            }
        }
        let nodes = self.entries[e].info.nodes.clone();
        self.release(e, &nodes)?;
        let now = self.now();
        let entry = &mut self.entries[e];
        entry.info.status = if entry.abort {
            EntryStatus::Aborted
        } else if entry.runs.iter().any(|r| r.phase == Phase::Failed) {
            EntryStatus::Failed
        } else {
            EntryStatus::Done
        };
        entry.info.finished = Some(now);
        let i = &entry.info;
        let payload = json!({
            "event": "entry_finished",
            "entry": i.id,
            "experiment": i.experiment,
            "owner": i.owner,
            "topic": i.topic,
            "node_count": i.nodes.len(),
            "replications": i.replications,
            "submitted": i.submitted,
            "activated": i.activated,
            "finished": now,
            "status": i.status.as_str(),
        });
        let id = i.id.clone();
        self.event(&id, payload)?;
        Ok(())
    }
}
