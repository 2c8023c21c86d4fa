//! Trace-driven simulation and online optimization of energy-time cost for
//! recurring training jobs.
//!
//! A recurring job re-trains the same model as new data arrives. Each
//! recurrence runs with a batch size `b` and a GPU power limit `p`, and the
//! blended cost of a run is
//!
//! ```text
//! C(b, p; eta) = eta * energy + (1 - eta) * MAXPOWER * time
//! ```
//!
//! The optimizer picks `b` with Gaussian Thompson Sampling over windowed cost
//! observations and `p` by minimizing the profiled per-epoch cost, charging a
//! one-time profiling epoch per batch size. Everything runs against recorded
//! traces (power profiles and epochs-to-target per seed), so whole policy
//! sweeps replay deterministically from an RNG seed.
//!
//! Module map:
//! - [`domain`]: job specs, configurations, trace records, cost samples
//! - [`cost`]: blended-cost arithmetic, regret, the exhaustive oracle, Pareto
//! - [`power`]: per-batch-size power-limit selection and the profiling model
//! - [`bandit`]: Gaussian Thompson Sampling arms with sliding windows
//! - [`explorer`]: pruning exploration and hand-off to the sampler
//! - [`sim`]: the recurrence replay engine and policy runners
//! - [`traceio`]: trace bundle formats, validation, synthetic generation

pub mod bandit;
pub mod cost;
pub mod domain;
pub mod explorer;
pub mod power;
pub mod sim;
pub mod traceio;

pub use bandit::ArmState;
pub use cost::ParetoPoint;
pub use domain::{Config, CostSample, JobSpec, PowerProfile, TrainingRecord, Window};
pub use explorer::{ExplorerState, Phase};
pub use power::ProfileCache;
pub use sim::{ArmSnapshot, ArrivalSchedule, ExperimentResult, Policy, RecurrenceRecord, SliceMap};
pub use traceio::{GeneratorSpec, GroundTruth, TraceBundle};

/// The deterministic RNG used throughout the crate. ChaCha8 is seedable and
/// produces the same stream on every platform, which is what makes replays
/// bit-reproducible.
pub type SimRng = rand_chacha::ChaCha8Rng;
