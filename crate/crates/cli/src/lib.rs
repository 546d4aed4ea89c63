//! Operator tooling for meshbed: the HTTP service and a client for it.

pub mod client;
pub mod service;
