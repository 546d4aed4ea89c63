//! Wiring of fleet, monitor, orchestrator and store into one virtual-time
//! testbed, plus generators for workloads and synthetic usage logs.

mod generate;
pub mod synthetic;
pub mod workload;

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::descript::ActionRegistry;
use crate::fleet::{ChurnParams, FleetConfig, FleetError, FleetHandle};
use crate::monitor::{Monitor, MonitorConfig};
use crate::orchestrator::{Orchestrator, OrchestratorConfig, OrchestratorError};
use crate::seed;
use crate::store::{QueryFilter, Store, StoreError, VirtualClock};

pub use generate::random_description;
pub use workload::{Submission, WorkloadConfig};

/// Churn expressed as a target availability instead of raw means.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Calibration {
    pub availability: f64,
    pub mean_down_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    #[serde(default)]
    pub seed: u64,
    /// Store timestamp at which the simulation starts.
    #[serde(default)]
    pub epoch: u64,
    pub duration_s: u64,
    pub fleet: FleetConfig,
    /// Overrides `fleet.churn` when present.
    #[serde(default)]
    pub calibration: Option<Calibration>,
    #[serde(default)]
    pub monitor: MonitorConfig,
    #[serde(default)]
    pub workload: Option<WorkloadConfig>,
}

impl ScenarioConfig {
    pub fn from_toml(text: &str) -> Result<Self, ScenarioError> {
        toml::from_str(text).map_err(|e| ScenarioError::Config(e.to_string()))
    }

    /// Fleet config with seed and calibration applied.
    pub fn effective_fleet(&self) -> FleetConfig {
        let mut f = self.fleet.clone();
        f.seed = seed::derive(self.seed, &[b"fleet"]);
        if let Some(c) = self.calibration {
            f.churn = Some(ChurnParams::calibrated(c.availability, c.mean_down_s, f.watchdog_s));
        }
        f
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ScenarioError {
    #[error("scenario config: {0}")]
    Config(String),
    #[error(transparent)]
    Fleet(#[from] FleetError),
    #[error(transparent)]
    Orchestrator(#[from] OrchestratorError),
    #[error(transparent)]
    Store(#[from] StoreError),
}

/// Fleet, monitor and orchestrator sharing one store and one virtual clock.
pub struct Testbed {
    fleet: FleetHandle,
    store: Arc<Store>,
    clock: VirtualClock,
    monitor: Monitor,
    orchestrator: Orchestrator,
    epoch: u64,
}

impl Testbed {
    pub fn new(
        fleet: FleetConfig,
        monitor: MonitorConfig,
        orchestrator: OrchestratorConfig,
        store: Arc<Store>,
        clock: VirtualClock,
    ) -> Result<Self, ScenarioError> {
        let epoch = orchestrator.epoch;
        clock.set(epoch);
        let ids = (0..fleet.nodes).map(FleetConfig::node_id).collect();
        let fleet = FleetHandle::spawn(fleet)?;
        let orchestrator = Orchestrator::new(
            orchestrator,
            ActionRegistry::fleet(),
            Box::new(fleet.clone()),
            store.clone(),
            Some(clock.clone()),
        );
        Ok(Self {
            fleet,
            store,
            clock,
            monitor: Monitor::new(monitor, ids, epoch),
            orchestrator,
            epoch,
        })
    }

    /// In-memory testbed for a scenario config.
    pub fn from_config(config: &ScenarioConfig) -> Result<Self, ScenarioError> {
        let clock = VirtualClock::new(config.epoch);
        let store = Arc::new(Store::in_memory(Arc::new(clock.clone())));
        Self::with_store(config, store, clock)
    }

    pub fn with_store(config: &ScenarioConfig, store: Arc<Store>, clock: VirtualClock) -> Result<Self, ScenarioError> {
        let orch = OrchestratorConfig {
            seed: seed::derive(config.seed, &[b"orchestrator"]),
            epoch: config.epoch,
            ..Default::default()
        };
        Self::new(config.effective_fleet(), config.monitor, orch, store, clock)
    }

    pub fn store(&self) -> &Arc<Store> {
        &self.store
    }

    pub fn fleet(&self) -> &FleetHandle {
        &self.fleet
    }

    pub fn clock(&self) -> &VirtualClock {
        &self.clock
    }

    pub fn epoch(&self) -> u64 {
        self.epoch
    }

    pub fn orchestrator(&self) -> &Orchestrator {
        &self.orchestrator
    }

    pub fn orchestrator_mut(&mut self) -> &mut Orchestrator {
        &mut self.orchestrator
    }

    /// Current store timestamp.
    pub fn now(&self) -> u64 {
        self.orchestrator.now()
    }

    fn next_due(&self) -> u64 {
        let mut t = self.monitor.next_poll();
        if let Some(w) = self.orchestrator.next_wakeup() {
            t = t.min(w);
        }
        if let Some(f) = self.fleet.lock().next_event_time() {
            t = t.min(self.epoch + f);
        }
        t.max(self.now())
    }

    /// Processes everything due up to and including `until`.
    pub fn run_until(&mut self, until: u64) -> Result<(), ScenarioError> {
        self.orchestrator.step()?;
        loop {
            let t = self.next_due();
            if t > until {
                break;
            }
            self.tick(t)?;
        }
        if until > self.now() {
            let events = self.orchestrator.advance_to(until)?;
            self.monitor.record_churn(&self.store, &events)?;
        }
        Ok(())
    }

    /// Runs until the orchestrator has nothing left, or `limit` is reached.
    pub fn run_to_idle(&mut self, limit: u64) -> Result<(), ScenarioError> {
        self.orchestrator.step()?;
        while !self.orchestrator.is_idle() {
            let t = self.next_due();
            if t > limit {
                break;
            }
            self.tick(t)?;
        }
        Ok(())
    }

    fn tick(&mut self, t: u64) -> Result<(), ScenarioError> {
        let events = self.orchestrator.advance_to(t)?;
        self.monitor.record_churn(&self.store, &events)?;
        if self.monitor.next_poll() <= t {
            self.monitor.poll_all(&mut self.fleet, &self.store)?;
        }
        self.orchestrator.step()?;
        Ok(())
    }
}

/// Outcome of a headless scenario run.
#[derive(Debug)]
pub struct SimulationOutcome {
    pub testbed: Testbed,
    pub scheduled: usize,
    pub rejected: Vec<(String, String)>,
}

impl SimulationOutcome {
    /// Newline-delimited JSON export of the whole store.
    pub fn export(&self) -> Vec<u8> {
        self.testbed.store.export_bytes(&QueryFilter::new())
    }
}

impl std::fmt::Debug for Testbed {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Testbed")
            .field("now", &self.now())
            .field("records", &self.store.len())
            .finish()
    }
}

/// Builds the testbed, submits the generated workload at its submission
/// times and runs for `duration_s`, then drains whatever is still queued.
pub fn simulate(config: &ScenarioConfig) -> Result<SimulationOutcome, ScenarioError> {
    let mut tb = Testbed::from_config(config)?;
    let mut subs = match &config.workload {
        Some(w) => {
            let inventory = tb.orchestrator.inventory()?;
            workload::generate(w, &inventory, config.epoch, config.duration_s, seed::derive(config.seed, &[b"workload"]))
        }
        None => Vec::new(),
    };
    subs.sort_by_key(|s| s.start);
    let end = config.epoch + config.duration_s;
    let mut scheduled = 0;
    let mut rejected = Vec::new();
    for s in subs {
        tb.run_until(s.start.max(tb.now()))?;
        let start = s.start.max(tb.now());
        match tb.orchestrator.schedule(s.desc.clone(), &s.owner, start) {
            Ok(_) => scheduled += 1,
            Err(OrchestratorError::Invalid(r)) => {
                log::info!("workload entry {} rejected: {r}", s.desc.id);
                rejected.push((s.desc.id.clone(), r.to_string()));
            }
            Err(e) => return Err(e.into()),
        }
    }
    tb.run_until(end)?;
    tb.run_to_idle(u64::MAX)?;
    Ok(SimulationOutcome {
        testbed: tb,
        scheduled,
        rejected,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::store::RecordKind;

    fn config() -> ScenarioConfig {
        ScenarioConfig::from_toml(
            r#"
            seed = 5
            epoch = 1000
            duration_s = 172800
            calibration = { availability = 0.95, mean_down_s = 3600.0 }
            [fleet]
            nodes = 24
            seed = 0
            watchdog_s = 14400
            [monitor]
            cadence_s = 600
            probes = 5
            [workload]
            experiments = 30
            users = 4
            mean_runtime_s = 3600.0
            max_nodes = 8
            "#,
        )
        .unwrap()
    }

    #[test]
    fn simulation_is_deterministic_and_drains() {
        let a = simulate(&config()).unwrap();
        let b = simulate(&config()).unwrap();
        assert_eq!(a.export(), b.export());
        assert_eq!(a.scheduled + a.rejected.len(), 30);
        assert!(a.testbed.orchestrator().is_idle());
        let finished = a
            .testbed
            .store()
            .query(&QueryFilter::new().kind(RecordKind::RunEvent).eq("event", "entry_finished"));
        assert_eq!(finished.len(), a.scheduled);
        let mut c = config();
        c.seed = 6;
        assert_ne!(simulate(&c).unwrap().export(), a.export());
    }

    #[test]
    fn polls_follow_cadence() {
        let mut c = config();
        c.workload = None;
        c.calibration = None;
        let mut tb = Testbed::from_config(&c).unwrap();
        tb.run_until(1000 + 3600).unwrap();
        let polls = tb
            .store()
            .query(&QueryFilter::new().kind(RecordKind::MonitoringData).node("n1").eq("event", "poll"));
        assert_eq!(polls.iter().map(|r| r.timestamp).collect::<Vec<_>>(), (0..=6).map(|k| 1000 + 600 * k).collect::<Vec<_>>());
        assert_eq!(tb.now(), 4600);
    }

    #[test]
    fn unknown_config_keys_rejected() {
        assert!(ScenarioConfig::from_toml("duration_s = 1\nfleet = { nodes = 1, seed = 0 }\nbogus = 1\n").is_err());
    }
}
