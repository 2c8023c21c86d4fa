//! Core value types shared by every module: job specifications,
//! configurations, trace records, and per-recurrence outcomes.
//!
//! All values here are immutable after construction and safe to move across
//! threads.

use serde::{Deserialize, Serialize};

/// Sliding-window size for per-arm cost histories.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Window {
    /// Keep every observation.
    Unbounded,
    /// Keep only the `n` most recent observations.
    Size(usize),
}

impl Window {
    /// True when `len` observations already fill the window.
    pub fn is_full(&self, len: usize) -> bool {
        match self {
            Window::Unbounded => false,
            Window::Size(n) => len >= *n,
        }
    }
}

impl std::fmt::Display for Window {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Window::Unbounded => write!(f, "inf"),
            Window::Size(n) => write!(f, "{n}"),
        }
    }
}

/// Specification of one recurring training job: the knob grids, the cost
/// knob `eta`, the early-stop multiplier `beta`, and replay bookkeeping.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobSpec {
    pub job_id: String,
    /// Feasible batch sizes, strictly increasing.
    pub batch_sizes: Vec<u32>,
    /// Feasible power limits in watts, strictly increasing.
    pub power_limits: Vec<f64>,
    /// Starting batch size for exploration; must be in `batch_sizes`.
    pub default_batch_size: u32,
    /// The device's maximum configurable power limit in watts. Unifies the
    /// units of the blended cost; must be >= every entry of `power_limits`.
    pub max_power: f64,
    /// Energy-vs-time weight in [0, 1]. 1 optimizes energy only, 0 time only.
    pub eta: f64,
    /// Early-stop threshold multiplier, > 1.
    pub beta: f64,
    /// Number of recurrences to simulate.
    pub recurrences: u32,
    /// Window for per-arm cost histories.
    pub window: Window,
    /// Hard cap on epochs per run; non-converging runs stop here.
    pub max_epochs: u32,
    pub rng_seed: u64,
}

impl JobSpec {
    /// Largest feasible power limit. Valid specs have a non-empty grid.
    pub fn top_power_limit(&self) -> f64 {
        self.power_limits.last().copied().unwrap_or(f64::NAN)
    }

    /// Checks every invariant and returns all violations. An empty list
    /// means the job spec is well-formed.
    pub fn validate(&self) -> Vec<String> {
        let mut errs = Vec::new();
        if self.batch_sizes.is_empty() {
            errs.push("batch size set is empty".to_string());
        }
        if !strictly_increasing_u32(&self.batch_sizes) {
            errs.push("batch sizes not strictly increasing".to_string());
        }
        if self.batch_sizes.contains(&0) {
            errs.push("batch sizes must be positive".to_string());
        }
        if self.power_limits.is_empty() {
            errs.push("power limit set is empty".to_string());
        }
        if !strictly_increasing_f64(&self.power_limits) {
            errs.push("power limits not strictly increasing".to_string());
        }
        if !self.power_limits.iter().all(|&p| p.is_finite() && p > 0.0) {
            errs.push("power limits must be positive and finite".to_string());
        }
        if !self.batch_sizes.contains(&self.default_batch_size) {
            errs.push("default batch size not in set".to_string());
        }
        if let Some(&top) = self.power_limits.last() {
            if !(self.max_power.is_finite() && self.max_power >= top) {
                errs.push("max power below largest power limit".to_string());
            }
        }
        if !(0.0..=1.0).contains(&self.eta) {
            errs.push("eta out of [0,1]".to_string());
        }
        if !(self.beta.is_finite() && self.beta > 1.0) {
            errs.push("beta must be > 1".to_string());
        }
        if self.recurrences == 0 {
            errs.push("recurrences must be positive".to_string());
        }
        if self.max_epochs == 0 {
            errs.push("max epochs must be positive".to_string());
        }
        if let Window::Size(0) = self.window {
            errs.push("window size must be positive".to_string());
        }
        errs
    }
}

fn strictly_increasing_u32(xs: &[u32]) -> bool {
    xs.windows(2).all(|w| w[0] < w[1])
}

fn strictly_increasing_f64(xs: &[f64]) -> bool {
    xs.windows(2).all(|w| w[0] < w[1])
}

/// One (batch size, power limit) operating point.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Config {
    pub batch_size: u32,
    /// Power limit in watts.
    pub power_limit: f64,
}

/// Measured average power and throughput for one (batch size, power limit)
/// pair. Average power may sit well below the limit (idle draw), but never
/// above the job's `max_power`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PowerProfile {
    pub batch_size: u32,
    /// Power limit in watts.
    pub power_limit: f64,
    /// Average draw in watts while training at this configuration.
    pub avg_power: f64,
    /// Training speed in epochs per second.
    pub throughput: f64,
}

/// Epochs-to-target for one (batch size, seed replica) pair, or a
/// non-convergence marker. `slice_index` is 0 for stationary traces and
/// indexes drift slices otherwise.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainingRecord {
    pub batch_size: u32,
    pub seed_index: u32,
    pub slice_index: u32,
    /// Present iff the run reached its target metric.
    pub epochs_to_target: Option<u32>,
    pub converged: bool,
}

impl TrainingRecord {
    /// Internal consistency: `converged` iff epochs are present, and epochs
    /// never exceed the job cap.
    pub fn check(&self, max_epochs: u32) -> Result<(), String> {
        match (self.converged, self.epochs_to_target) {
            (true, None) => Err(format!(
                "record (b={}, seed={}, slice={}) converged without epochs",
                self.batch_size, self.seed_index, self.slice_index
            )),
            (false, Some(_)) => Err(format!(
                "record (b={}, seed={}, slice={}) has epochs but did not converge",
                self.batch_size, self.seed_index, self.slice_index
            )),
            (true, Some(0)) => Err(format!(
                "record (b={}, seed={}, slice={}) has zero epochs",
                self.batch_size, self.seed_index, self.slice_index
            )),
            (true, Some(e)) if e > max_epochs => Err(format!(
                "record (b={}, seed={}, slice={}) exceeds max epochs {}",
                self.batch_size, self.seed_index, self.slice_index, max_epochs
            )),
            _ => Ok(()),
        }
    }
}

/// The outcome of one recurrence: what ran, what it cost, and how it ended.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostSample {
    pub recurrence: u32,
    pub config: Config,
    /// Joules consumed.
    pub energy: f64,
    /// Seconds elapsed.
    pub time: f64,
    /// Blended cost in joule-equivalent units.
    pub cost: f64,
    pub epochs_run: u32,
    pub converged: bool,
    pub early_stopped: bool,
    /// Whether this run charged the one-time profiling epoch.
    pub profiled: bool,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn base_spec() -> JobSpec {
        JobSpec {
            job_id: "js".to_string(),
            batch_sizes: vec![8, 16, 32, 64],
            power_limits: vec![100.0, 150.0, 200.0, 250.0],
            default_batch_size: 32,
            max_power: 250.0,
            eta: 0.5,
            beta: 2.0,
            recurrences: 32,
            window: Window::Unbounded,
            max_epochs: 100,
            rng_seed: 1,
        }
    }

    #[test]
    fn well_formed_spec_validates() {
        assert!(base_spec().validate().is_empty());
    }

    #[test]
    fn default_batch_size_must_be_in_set() {
        let mut spec = base_spec();
        spec.batch_sizes = vec![8, 16, 64];
        let errs = spec.validate();
        assert!(errs.iter().any(|e| e.contains("default batch size not in set")), "{errs:?}");
    }

    #[test]
    fn eta_out_of_range_is_reported() {
        let mut spec = base_spec();
        spec.eta = 1.5;
        let errs = spec.validate();
        assert!(errs.iter().any(|e| e.contains("eta out of [0,1]")), "{errs:?}");
    }

    #[test]
    fn multiple_violations_are_all_reported() {
        let mut spec = base_spec();
        spec.eta = -0.1;
        spec.beta = 1.0;
        spec.max_power = 200.0;
        let errs = spec.validate();
        assert_eq!(errs.len(), 3, "{errs:?}");
    }

    #[test]
    fn unsorted_grids_are_rejected() {
        let mut spec = base_spec();
        spec.batch_sizes = vec![8, 8, 16, 32, 64];
        spec.power_limits = vec![100.0, 90.0];
        spec.default_batch_size = 8;
        let errs = spec.validate();
        assert!(errs.iter().any(|e| e.contains("batch sizes")));
        assert!(errs.iter().any(|e| e.contains("power limits not strictly increasing")));
    }

    #[test]
    fn training_record_consistency() {
        let ok = TrainingRecord {
            batch_size: 32,
            seed_index: 0,
            slice_index: 0,
            epochs_to_target: Some(37),
            converged: true,
        };
        assert!(ok.check(100).is_ok());
        assert!(ok.check(36).is_err());

        let bad = TrainingRecord { epochs_to_target: None, ..ok };
        assert!(bad.check(100).is_err());

        let failed = TrainingRecord { epochs_to_target: None, converged: false, ..ok };
        assert!(failed.check(100).is_ok());
    }

    #[test]
    fn serde_roundtrip_is_identity() {
        let spec = base_spec();
        let json = serde_json::to_string(&spec).unwrap();
        let back: JobSpec = serde_json::from_str(&json).unwrap();
        assert_eq!(back, spec);

        let sample = CostSample {
            recurrence: 3,
            config: Config { batch_size: 32, power_limit: 150.0 },
            energy: 1000.0,
            time: 10.0,
            cost: 1750.0,
            epochs_run: 37,
            converged: true,
            early_stopped: false,
            profiled: true,
        };
        let json = serde_json::to_string(&sample).unwrap();
        let back: CostSample = serde_json::from_str(&json).unwrap();
        assert_eq!(back, sample);
    }
}
