//! The power-limit half of the decoupled optimizer: picking the per-epoch
//! cost-optimal power limit for a batch size, modeling the one-time profiling
//! epoch, and caching both so profiling is charged once per batch size.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::cost::epoch_cost;
use crate::domain::PowerProfile;

#[derive(Debug, Error, PartialEq)]
pub enum PowerError {
    #[error("no power profiles supplied")]
    Empty,
    #[error("duplicate power limit {0} W in profile set")]
    DuplicateLimit(f64),
    #[error("profile set mixes batch sizes {0} and {1}")]
    MixedBatchSizes(u32, u32),
}

fn check_profiles(profiles: &[PowerProfile]) -> Result<(), PowerError> {
    let Some(first) = profiles.first() else {
        return Err(PowerError::Empty);
    };
    let mut limits: Vec<f64> = Vec::with_capacity(profiles.len());
    for p in profiles {
        if p.batch_size != first.batch_size {
            return Err(PowerError::MixedBatchSizes(first.batch_size, p.batch_size));
        }
        if limits.contains(&p.power_limit) {
            return Err(PowerError::DuplicateLimit(p.power_limit));
        }
        limits.push(p.power_limit);
    }
    Ok(())
}

/// Picks the power limit minimizing the per-epoch cost over a full profile
/// set for one batch size. Ties break toward the smaller limit.
pub fn optimal_power_limit(
    profiles: &[PowerProfile],
    eta: f64,
    max_power: f64,
) -> Result<(f64, f64), PowerError> {
    check_profiles(profiles)?;
    let mut ordered: Vec<&PowerProfile> = profiles.iter().collect();
    ordered.sort_by(|a, b| a.power_limit.total_cmp(&b.power_limit));
    let mut best: Option<(f64, f64)> = None;
    for prof in ordered {
        let cost = epoch_cost(prof, eta, max_power);
        best = Some(match best {
            None => (prof.power_limit, cost),
            Some(cur) if cost < cur.1 => (prof.power_limit, cost),
            Some(cur) => cur,
        });
    }
    Ok(best.expect("non-empty checked above"))
}

/// Time and energy of the one profiling epoch, modeled as equal work slices:
/// the epoch is split into one slice per power limit, each covering `1/|P|`
/// of the epoch's iterations at that limit's measured throughput and power.
pub fn profiling_epoch_cost(profiles: &[PowerProfile]) -> Result<(f64, f64), PowerError> {
    check_profiles(profiles)?;
    let share = 1.0 / profiles.len() as f64;
    let mut time = 0.0;
    let mut energy = 0.0;
    for p in profiles {
        let slice_time = share / p.throughput;
        time += slice_time;
        energy += slice_time * p.avg_power;
    }
    Ok((time, energy))
}

/// A profiled batch size: its full profile set, the chosen power limit, and
/// the per-epoch cost at that limit.
#[derive(Debug, Clone)]
pub struct ProfileEntry {
    pub profiles: Vec<PowerProfile>,
    pub optimal_limit: f64,
    pub epoch_cost: f64,
}

/// Profiling results per batch size. An entry exists only after the
/// profiling epoch was charged for that batch size, and repeated lookups
/// return the same choice without charging again.
#[derive(Debug, Default, Clone)]
pub struct ProfileCache {
    entries: BTreeMap<u32, ProfileEntry>,
}

impl ProfileCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn is_profiled(&self, batch_size: u32) -> bool {
        self.entries.contains_key(&batch_size)
    }

    pub fn get(&self, batch_size: u32) -> Option<&ProfileEntry> {
        self.entries.get(&batch_size)
    }

    /// Records the outcome of a profiling epoch. The cached choice is the
    /// epoch-cost argmin over the supplied profiles.
    pub fn insert(
        &mut self,
        batch_size: u32,
        profiles: &[PowerProfile],
        eta: f64,
        max_power: f64,
    ) -> Result<&ProfileEntry, PowerError> {
        let (optimal_limit, epoch_cost) = optimal_power_limit(profiles, eta, max_power)?;
        Ok(self.entries.entry(batch_size).or_insert(ProfileEntry {
            profiles: profiles.to_vec(),
            optimal_limit,
            epoch_cost,
        }))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cost::blended_cost;

    fn table() -> Vec<PowerProfile> {
        // (p, avg_power, throughput) rows for one batch size.
        [
            (100.0, 90.0, 0.008),
            (150.0, 130.0, 0.010),
            (200.0, 170.0, 0.011),
            (250.0, 210.0, 0.0115),
        ]
        .iter()
        .map(|&(p, avg, thr)| PowerProfile {
            batch_size: 32,
            power_limit: p,
            avg_power: avg,
            throughput: thr,
        })
        .collect()
    }

    #[test]
    fn optimal_limit_at_half_eta() {
        // Epoch costs: 21250, 19000, 19090.90..., 20000.
        let (p, cost) = optimal_power_limit(&table(), 0.5, 250.0).unwrap();
        assert_eq!(p, 150.0);
        assert_eq!(cost, 19_000.0);
    }

    #[test]
    fn pure_time_objective_picks_max_throughput() {
        let (p, _) = optimal_power_limit(&table(), 0.0, 250.0).unwrap();
        assert_eq!(p, 250.0);
    }

    #[test]
    fn singleton_profile_set() {
        let single = vec![table()[1]];
        let (p, cost) = optimal_power_limit(&single, 0.5, 250.0).unwrap();
        assert_eq!(p, 150.0);
        assert_eq!(cost, 19_000.0);
        let (time, energy) = profiling_epoch_cost(&single).unwrap();
        assert_eq!(time, 1.0 / 0.010);
        assert_eq!(energy, 130.0 / 0.010);
    }

    #[test]
    fn duplicate_limits_rejected() {
        let mut profs = table();
        profs[1].power_limit = 100.0;
        assert_eq!(
            optimal_power_limit(&profs, 0.5, 250.0),
            Err(PowerError::DuplicateLimit(100.0))
        );
        assert!(optimal_power_limit(&[], 0.5, 250.0).is_err());
    }

    #[test]
    fn profiling_epoch_slicing_model() {
        let profs = vec![
            PowerProfile { batch_size: 32, power_limit: 100.0, avg_power: 100.0, throughput: 0.01 },
            PowerProfile { batch_size: 32, power_limit: 200.0, avg_power: 200.0, throughput: 0.02 },
        ];
        let (time, energy) = profiling_epoch_cost(&profs).unwrap();
        assert_eq!(time, 75.0);
        assert_eq!(energy, 10_000.0);
    }

    #[test]
    fn profiling_epoch_never_beats_the_optimal_single_limit_epoch() {
        let profs = table();
        let (time, energy) = profiling_epoch_cost(&profs).unwrap();
        for eta in [0.0, 0.25, 0.5, 0.75, 1.0] {
            let (_, best) = optimal_power_limit(&profs, eta, 250.0).unwrap();
            let profiling = blended_cost(energy, time, eta, 250.0);
            assert!(
                profiling >= best - 1e-9,
                "eta={eta}: profiling {profiling} < best epoch {best}"
            );
        }
    }

    #[test]
    fn profiling_epoch_within_single_limit_envelope() {
        let profs = table();
        let (time, energy) = profiling_epoch_cost(&profs).unwrap();
        let times: Vec<f64> = profs.iter().map(|p| 1.0 / p.throughput).collect();
        let energies: Vec<f64> = profs.iter().map(|p| p.avg_power / p.throughput).collect();
        let min_t = times.iter().cloned().fold(f64::INFINITY, f64::min);
        let max_t = times.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let min_e = energies.iter().cloned().fold(f64::INFINITY, f64::min);
        let max_e = energies.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        assert!(time >= min_t && time <= max_t);
        assert!(energy >= min_e && energy <= max_e);
    }

    #[test]
    fn cache_charges_once_and_repeats_answers() {
        let mut cache = ProfileCache::new();
        assert!(!cache.is_profiled(32));
        cache.insert(32, &table(), 0.5, 250.0).unwrap();
        assert!(cache.is_profiled(32));
        let first = cache.get(32).unwrap().clone();
        // Re-inserting keeps the original entry.
        cache.insert(32, &table(), 0.5, 250.0).unwrap();
        let second = cache.get(32).unwrap();
        assert_eq!(first.optimal_limit, second.optimal_limit);
        assert_eq!(first.epoch_cost, second.epoch_cost);
        assert_eq!(cache.len(), 1);
    }
}
