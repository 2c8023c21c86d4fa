//! Gaussian Thompson Sampling over batch-size arms.
//!
//! Each arm keeps a sliding window of cost observations. The observation
//! variance is not assumed known: it is re-estimated from the current window
//! and plugged into the conjugate-Gaussian update, so the posterior over an
//! arm's mean cost is
//!
//! ```text
//! var_hat = 1 / (1/prior_var + k/sample_var)
//! mean_hat = var_hat * (prior_mean/prior_var + sum(window)/sample_var)
//! ```
//!
//! The flat prior is encoded as infinite variance (zero precision), which
//! makes the prior terms vanish without special-casing. Prediction draws one
//! normal sample per arm, in arm order, and picks the smallest.

use std::collections::VecDeque;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::domain::Window;

#[derive(Debug, Error, PartialEq)]
pub enum BanditError {
    #[error("predict called with no arms")]
    NoArms,
    #[error("arm {0} has no usable posterior (fewer than 2 observations)")]
    UnusablePosterior(u32),
    #[error("arm {0} seeded with fewer than 2 costs")]
    TooFewSeedCosts(u32),
}

/// Belief about one arm's mean cost.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Posterior {
    pub mean: f64,
    pub variance: f64,
}

/// One bandit arm: a batch size, its windowed cost history, and the belief
/// parameters derived from them.
#[derive(Debug, Clone)]
pub struct ArmState {
    batch_size: u32,
    window: Window,
    history: VecDeque<f64>,
    prior_mean: f64,
    prior_variance: f64,
    posterior: Option<Posterior>,
}

impl ArmState {
    /// Fresh arm with the flat (zero-precision) prior.
    pub fn new(batch_size: u32, window: Window) -> Self {
        Self::with_prior(batch_size, window, 0.0, f64::INFINITY)
    }

    /// Fresh arm with an informative Gaussian prior.
    pub fn with_prior(batch_size: u32, window: Window, prior_mean: f64, prior_variance: f64) -> Self {
        assert!(prior_variance > 0.0, "prior variance must be positive");
        Self {
            batch_size,
            window,
            history: VecDeque::new(),
            prior_mean,
            prior_variance,
            posterior: None,
        }
    }

    /// Arm with a directly imposed posterior and no history. Useful for
    /// snapshotting belief states and for exercising degenerate cases.
    pub fn with_posterior(batch_size: u32, mean: f64, variance: f64) -> Self {
        assert!(variance >= 0.0 && variance.is_finite());
        Self {
            batch_size,
            window: Window::Unbounded,
            history: VecDeque::new(),
            prior_mean: 0.0,
            prior_variance: f64::INFINITY,
            posterior: Some(Posterior { mean, variance }),
        }
    }

    pub fn batch_size(&self) -> u32 {
        self.batch_size
    }

    pub fn history(&self) -> impl Iterator<Item = f64> + '_ {
        self.history.iter().copied()
    }

    pub fn observation_count(&self) -> usize {
        self.history.len()
    }

    pub fn posterior(&self) -> Option<Posterior> {
        self.posterior
    }

    /// Appends a cost observation, evicting oldest-first beyond the window,
    /// and recomputes the posterior from the surviving window.
    pub fn observe(&mut self, cost: f64) {
        assert!(cost.is_finite() && cost >= 0.0, "cost must be finite and non-negative");
        if self.window.is_full(self.history.len()) {
            self.history.pop_front();
        }
        self.history.push_back(cost);
        self.recompute();
    }

    fn recompute(&mut self) {
        let k = self.history.len();
        if k < 2 {
            self.posterior = None;
            return;
        }
        let kf = k as f64;
        let sum: f64 = self.history.iter().sum();
        let mean = sum / kf;
        let squares: f64 = self.history.iter().map(|c| (c - mean) * (c - mean)).sum();
        let mut sample_var = squares / (kf - 1.0);
        // Identical observations would make the precision infinite; clamp to
        // a scale-aware floor instead.
        let floor = 1e-12 * (1.0 + mean * mean);
        if sample_var < floor {
            sample_var = floor;
        }
        let prior_precision = 1.0 / self.prior_variance; // 0 under the flat prior
        let variance = 1.0 / (prior_precision + kf / sample_var);
        let post_mean = variance * (self.prior_mean * prior_precision + sum / sample_var);
        self.posterior = Some(Posterior { mean: post_mean, variance });
    }
}

/// Folds `observe` over `costs` in order. Hands pruning-phase observations to
/// the sampler; at least two are required so the window variance is defined.
pub fn seed_arm(mut arm: ArmState, costs: &[f64]) -> Result<ArmState, BanditError> {
    if costs.len() < 2 {
        return Err(BanditError::TooFewSeedCosts(arm.batch_size));
    }
    for &c in costs {
        arm.observe(c);
    }
    Ok(arm)
}

/// Thompson Sampling prediction: draws one sample from every arm's belief,
/// in the order the arms are given, and returns the batch size with the
/// smallest sampled mean cost. Exact ties break toward the smaller batch
/// size.
pub fn predict<R: Rng>(arms: &[&ArmState], rng: &mut R) -> Result<u32, BanditError> {
    if arms.is_empty() {
        return Err(BanditError::NoArms);
    }
    let mut best: Option<(u32, f64)> = None;
    for arm in arms {
        let post = arm.posterior().ok_or(BanditError::UnusablePosterior(arm.batch_size))?;
        let normal = Normal::new(post.mean, post.variance.sqrt())
            .map_err(|_| BanditError::UnusablePosterior(arm.batch_size))?;
        let theta = normal.sample(rng);
        best = Some(match best {
            None => (arm.batch_size, theta),
            Some((b, t)) if theta < t || (theta == t && arm.batch_size < b) => {
                (arm.batch_size, theta)
            }
            Some(cur) => cur,
        });
    }
    Ok(best.expect("non-empty checked above").0)
}
