pub mod descript;
pub mod eval;
pub mod fleet;
pub mod monitor;
pub mod orchestrator;
pub mod portal;
pub mod scenario;
pub mod seed;
pub mod store;
pub mod stats;
