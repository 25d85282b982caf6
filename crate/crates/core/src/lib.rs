//! Online design of dynamic bus networks.
//!
//! A fleet of buses extends its lines one time-expanded edge at a time. Each
//! extension is chosen by Monte Carlo Tree Search against a learned demand
//! model, so that the growing time-expanded graph serves a stochastic stream
//! of trip requests. The crate is organised bottom-up:
//!
//! - [`substrate`]: candidate stops, distances and bus travel times
//! - [`teg`]: the time-expanded graph of bus movements and waiting edges
//! - [`router`]: earliest-arrival routing of requests through the graph
//! - [`envmodel`]: temporal and origin-destination demand model used for rollouts
//! - [`planner`]: UCT search over line extensions, plus a uniform-random baseline
//! - [`simulator`]: the event-driven online loop
//! - [`metrics`]: service rate, waiting, stretch, occupation, ECDFs and heatmaps
//! - [`trips`]: trip-record CSV ingestion

pub mod envmodel;
pub mod error;
pub mod metrics;
pub mod planner;
pub mod router;
pub mod simulator;
pub mod substrate;
pub mod teg;
pub mod trips;

pub use error::{Error, Result};

/// Simulation clock value, in minutes.
pub type Minutes = f64;

/// Random stream used throughout the crate. Seeded streams make runs reproducible.
pub type SimRng = rand_chacha::ChaCha8Rng;

/// Builds the crate's random stream from a 64-bit seed.
pub fn seeded_rng(seed: u64) -> SimRng {
    use rand::SeedableRng;
    SimRng::seed_from_u64(seed)
}
