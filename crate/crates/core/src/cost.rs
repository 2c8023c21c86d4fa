//! Closed-form cost arithmetic: blended cost, per-epoch cost, job cost,
//! regret, the exhaustive (b, p) oracle, and Pareto-front extraction.
//!
//! Everything here is a pure function over immutable inputs.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{Config, PowerProfile};

#[derive(Debug, Error, PartialEq)]
pub enum CostError {
    /// The claimed optimum exceeds an observed cost; the oracle that produced
    /// it is broken.
    #[error("observed cost {observed} is below claimed optimum {optimal}")]
    BrokenOracle { observed: f64, optimal: f64 },
    /// No batch size in the trace ever reached the target metric.
    #[error("no batch size converges in the trace")]
    NothingConverges,
    /// A per-batch-size profile list does not cover the power-limit grid.
    #[error("profile set is empty")]
    EmptyProfiles,
}

/// Blended energy-time cost: `eta * energy + (1 - eta) * max_power * time`.
pub fn blended_cost(energy: f64, time: f64, eta: f64, max_power: f64) -> f64 {
    eta * energy + (1.0 - eta) * (max_power * time)
}

/// Cost of one epoch at a profiled operating point:
/// `(eta * avg_power + (1 - eta) * max_power) / throughput`.
pub fn epoch_cost(profile: &PowerProfile, eta: f64, max_power: f64) -> f64 {
    (eta * profile.avg_power + (1.0 - eta) * max_power) / profile.throughput
}

/// Total cost of a job that needs `epochs` epochs at `epoch_cost` each.
pub fn job_cost(epochs: f64, epoch_cost: f64) -> f64 {
    epochs * epoch_cost
}

/// Per-recurrence regret: observed cost minus the oracle optimum.
///
/// `optimal_cost` must come from [`brute_force_optimum`] over the same
/// traces; an observation below it (beyond float tolerance) means the oracle
/// is broken and is reported as an error rather than a negative regret.
pub fn regret(observed_cost: f64, optimal_cost: f64) -> Result<f64, CostError> {
    let tolerance = 1e-9 * optimal_cost.abs().max(1.0);
    if observed_cost < optimal_cost - tolerance {
        return Err(CostError::BrokenOracle { observed: observed_cost, optimal: optimal_cost });
    }
    Ok(observed_cost - optimal_cost)
}

/// Exhaustively evaluates `E[Epochs(b)] * epoch_cost(b, p)` over every
/// profiled (b, p) pair and returns the argmin with its value.
///
/// `expected_epochs` maps each batch size to its mean epochs-to-target over
/// converged trace records; batch sizes that never converge are simply
/// absent. Ties break toward the smaller batch size, then the smaller power
/// limit, so results are independent of iteration order.
pub fn brute_force_optimum(
    expected_epochs: &BTreeMap<u32, f64>,
    profiles: &[PowerProfile],
    eta: f64,
    max_power: f64,
) -> Result<(Config, f64), CostError> {
    let mut best: Option<(Config, f64)> = None;
    for (&b, &epochs) in expected_epochs {
        let mut profs: Vec<&PowerProfile> = profiles.iter().filter(|p| p.batch_size == b).collect();
        profs.sort_by(|a, b| a.power_limit.total_cmp(&b.power_limit));
        for prof in profs {
            let cost = job_cost(epochs, epoch_cost(prof, eta, max_power));
            let cand = Config { batch_size: b, power_limit: prof.power_limit };
            best = Some(match best {
                None => (cand, cost),
                Some((cur_cfg, cur_cost)) => {
                    // Scan order is b ascending, p ascending; strict < keeps
                    // the first (smallest b, then smallest p) at equal cost.
                    if cost < cur_cost {
                        (cand, cost)
                    } else {
                        (cur_cfg, cur_cost)
                    }
                }
            });
        }
    }
    best.ok_or(CostError::NothingConverges)
}

/// One point of the time-energy tradeoff: the configuration with its
/// time-to-accuracy and energy-to-accuracy coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ParetoPoint {
    pub config: Config,
    /// Expected seconds to target at this configuration.
    pub tta: f64,
    /// Expected joules to target at this configuration.
    pub eta_energy: f64,
}

/// Extracts the non-dominated points: no other point is at least as good on
/// both axes and strictly better on one. Returned sorted by ascending TTA.
/// Exact coordinate duplicates keep only the first in (b, p) order.
pub fn pareto_front(points: &[ParetoPoint]) -> Vec<ParetoPoint> {
    let mut ordered: Vec<&ParetoPoint> = points.iter().collect();
    ordered.sort_by(|a, b| {
        (a.config.batch_size, a.config.power_limit)
            .partial_cmp(&(b.config.batch_size, b.config.power_limit))
            .unwrap_or(std::cmp::Ordering::Equal)
    });

    let mut front: Vec<ParetoPoint> = Vec::new();
    for (i, cand) in ordered.iter().enumerate() {
        let mut keep = true;
        for (j, other) in ordered.iter().enumerate() {
            if i == j {
                continue;
            }
            let le = other.tta <= cand.tta && other.eta_energy <= cand.eta_energy;
            let lt = other.tta < cand.tta || other.eta_energy < cand.eta_energy;
            if le && lt {
                keep = false;
                break;
            }
            // Exact duplicate on both axes: keep only the first in (b, p) order.
            if le && !lt && j < i {
                keep = false;
                break;
            }
        }
        if keep {
            front.push(**cand);
        }
    }
    front.sort_by(|a, b| a.tta.partial_cmp(&b.tta).unwrap_or(std::cmp::Ordering::Equal));
    front
}

/// Builds the (TTA, ETA) point for every profiled (b, p) pair with a
/// converging batch size.
pub fn tradeoff_points(
    expected_epochs: &BTreeMap<u32, f64>,
    profiles: &[PowerProfile],
) -> Vec<ParetoPoint> {
    let mut points = Vec::new();
    for (&b, &epochs) in expected_epochs {
        for prof in profiles.iter().filter(|p| p.batch_size == b) {
            let tta = epochs / prof.throughput;
            points.push(ParetoPoint {
                config: Config { batch_size: b, power_limit: prof.power_limit },
                tta,
                eta_energy: tta * prof.avg_power,
            });
        }
    }
    points
}

/// For each `eta`, returns the exhaustive optimum and its tradeoff
/// coordinates. Errors from the oracle (for example an empty grid) propagate.
pub fn eta_sweep(
    expected_epochs: &BTreeMap<u32, f64>,
    profiles: &[PowerProfile],
    etas: &[f64],
    max_power: f64,
) -> Result<Vec<(f64, Config, f64, f64)>, CostError> {
    let mut out = Vec::with_capacity(etas.len());
    for &eta in etas {
        let (config, _) = brute_force_optimum(expected_epochs, profiles, eta, max_power)?;
        let prof = profiles
            .iter()
            .find(|p| p.batch_size == config.batch_size && p.power_limit == config.power_limit)
            .ok_or(CostError::EmptyProfiles)?;
        let epochs = expected_epochs[&config.batch_size];
        let tta = epochs / prof.throughput;
        out.push((eta, config, tta, tta * prof.avg_power));
    }
    Ok(out)
}
