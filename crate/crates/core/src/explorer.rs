//! Batch-size exploration: two pruning rounds around the default batch size,
//! early-stop thresholds, and hand-off to Thompson Sampling.
//!
//! Each pruning round walks the candidate set in the order: the default
//! first, then smaller batch sizes descending until one fails to converge,
//! then larger ones ascending until one fails. Only converged batch sizes
//! survive a round. After round one the default is re-based onto the
//! cheapest survivor and the walk repeats over the survivors, so every
//! final survivor carries at least two cost observations when the arms are
//! seeded.
//!
//! While an issued recurrence is still outstanding, additional submissions
//! run the best-known batch size (during pruning) or an ordinary belief draw
//! (during sampling); they never advance or prune the walk.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use rand::Rng;
use thiserror::Error;

use crate::bandit::{predict, seed_arm, ArmState, BanditError};
use crate::domain::{CostSample, JobSpec, Window};

#[derive(Debug, Error, PartialEq)]
pub enum ExplorerError {
    #[error("no batch size reached the target metric during pruning")]
    NoSurvivors,
    #[error("batch size {0} is not part of this job")]
    UnknownBatchSize(u32),
    #[error("no outstanding issuance for recurrence {0}")]
    UnknownIssuance(u32),
    #[error("walk issuance already outstanding; use the concurrent entry point")]
    WalkOutstanding,
    #[error(transparent)]
    Bandit(#[from] BanditError),
}

/// Which stage the optimizer is in.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Pruning,
    Sampling,
}

impl Phase {
    pub fn name(&self) -> &'static str {
        match self {
            Phase::Pruning => "pruning",
            Phase::Sampling => "sampling",
        }
    }
}

/// Position of a pruning-walk step relative to the round's default.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Segment {
    Origin,
    Below,
    Above,
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum IssuanceKind {
    Walk(Segment),
    Concurrent,
    Sampling,
}

#[derive(Debug, Clone, Copy)]
struct Issuance {
    batch_size: u32,
    kind: IssuanceKind,
    threshold: Option<f64>,
}

/// State of the batch-size optimizer across recurrences.
#[derive(Debug, Clone)]
pub struct ExplorerState {
    batch_sizes: Vec<u32>,
    beta: f64,
    window: Window,
    phase: Phase,
    round: u8,
    current_default: u32,
    origin_pending: bool,
    below: VecDeque<u32>,
    above: VecDeque<u32>,
    walk_outstanding: bool,
    /// Batch sizes that converged within the current round.
    round_converged: BTreeSet<u32>,
    /// Smallest cost over all completed, converged recurrences.
    min_cost: Option<f64>,
    /// Smallest converged cost seen per batch size.
    best_cost: BTreeMap<u32, f64>,
    /// Pruning-phase observations per batch size, in arrival order. Converged
    /// costs plus threshold-censored values from concurrent failures.
    pruning_costs: BTreeMap<u32, Vec<f64>>,
    arms: BTreeMap<u32, ArmState>,
    outstanding: BTreeMap<u32, Issuance>,
    failed: bool,
}

impl ExplorerState {
    pub fn new(job: &JobSpec) -> Self {
        let mut state = Self {
            batch_sizes: job.batch_sizes.clone(),
            beta: job.beta,
            window: job.window,
            phase: Phase::Pruning,
            round: 1,
            current_default: job.default_batch_size,
            origin_pending: true,
            below: VecDeque::new(),
            above: VecDeque::new(),
            walk_outstanding: false,
            round_converged: BTreeSet::new(),
            min_cost: None,
            best_cost: BTreeMap::new(),
            pruning_costs: BTreeMap::new(),
            arms: BTreeMap::new(),
            outstanding: BTreeMap::new(),
            failed: false,
        };
        let candidates = state.batch_sizes.clone();
        state.setup_round(&candidates);
        state
    }

    fn setup_round(&mut self, candidates: &[u32]) {
        self.origin_pending = true;
        self.below = candidates.iter().copied().filter(|&b| b < self.current_default).rev().collect();
        self.above = candidates.iter().copied().filter(|&b| b > self.current_default).collect();
        self.round_converged.clear();
    }

    pub fn phase(&self) -> Phase {
        self.phase
    }

    pub fn current_default(&self) -> u32 {
        self.current_default
    }

    pub fn min_cost(&self) -> Option<f64> {
        self.min_cost
    }

    /// Batch sizes still in play: round survivors during pruning, the arm
    /// set during sampling.
    pub fn surviving(&self) -> Vec<u32> {
        match self.phase {
            Phase::Pruning => self.round_converged.iter().copied().collect(),
            Phase::Sampling => self.arms.keys().copied().collect(),
        }
    }

    pub fn arms(&self) -> impl Iterator<Item = &ArmState> {
        self.arms.values()
    }

    /// The early-stop cost cap: `beta` times the smallest converged cost so
    /// far. `None` before the first converged recurrence, when only the
    /// epoch cap bounds a run.
    pub fn early_stop_threshold(&self) -> Option<f64> {
        self.min_cost.map(|m| self.beta * m)
    }

    /// Issues the next batch size for recurrence `recurrence`: the walk head
    /// during pruning, a belief draw during sampling.
    pub fn next_batch_size<R: Rng>(&mut self, recurrence: u32, rng: &mut R) -> Result<u32, ExplorerError> {
        if self.failed {
            return Err(ExplorerError::NoSurvivors);
        }
        let threshold = self.early_stop_threshold();
        match self.phase {
            Phase::Pruning => {
                if self.walk_outstanding {
                    return Err(ExplorerError::WalkOutstanding);
                }
                let (batch_size, segment) = if self.origin_pending {
                    self.origin_pending = false;
                    (self.current_default, Segment::Origin)
                } else if let Some(b) = self.below.pop_front() {
                    (b, Segment::Below)
                } else if let Some(b) = self.above.pop_front() {
                    (b, Segment::Above)
                } else {
                    // Round completion happens on report; an empty walk here
                    // means a report went missing.
                    return Err(ExplorerError::WalkOutstanding);
                };
                self.walk_outstanding = true;
                self.outstanding.insert(
                    recurrence,
                    Issuance { batch_size, kind: IssuanceKind::Walk(segment), threshold },
                );
                Ok(batch_size)
            }
            Phase::Sampling => {
                let b = self.sample_arm(rng)?;
                self.outstanding
                    .insert(recurrence, Issuance { batch_size: b, kind: IssuanceKind::Sampling, threshold });
                Ok(b)
            }
        }
    }

    /// Issues a batch size for a submission that overlaps an outstanding one.
    /// During pruning this is the best-known (cheapest converged) batch size,
    /// falling back to the current default before anything has converged;
    /// during sampling it is an ordinary belief draw.
    pub fn concurrent_batch_size<R: Rng>(
        &mut self,
        recurrence: u32,
        rng: &mut R,
    ) -> Result<u32, ExplorerError> {
        if self.failed {
            return Err(ExplorerError::NoSurvivors);
        }
        let threshold = self.early_stop_threshold();
        match self.phase {
            Phase::Pruning => {
                let b = self
                    .best_cost
                    .iter()
                    .min_by(|a, b| a.1.total_cmp(b.1))
                    .map(|(&b, _)| b)
                    .unwrap_or(self.current_default);
                self.outstanding
                    .insert(recurrence, Issuance { batch_size: b, kind: IssuanceKind::Concurrent, threshold });
                Ok(b)
            }
            Phase::Sampling => {
                let b = self.sample_arm(rng)?;
                self.outstanding
                    .insert(recurrence, Issuance { batch_size: b, kind: IssuanceKind::Sampling, threshold });
                Ok(b)
            }
        }
    }

    fn sample_arm<R: Rng>(&self, rng: &mut R) -> Result<u32, ExplorerError> {
        let refs: Vec<&ArmState> = self.arms.values().collect();
        Ok(predict(&refs, rng)?)
    }

    /// Feeds a completed recurrence back. Converged samples update the cost
    /// floor and the arm observations; pruning-walk failures cut off the rest
    /// of their direction for the round.
    pub fn report_result(&mut self, sample: &CostSample) -> Result<(), ExplorerError> {
        let b = sample.config.batch_size;
        if !self.batch_sizes.contains(&b) {
            return Err(ExplorerError::UnknownBatchSize(b));
        }
        let issuance = self
            .outstanding
            .remove(&sample.recurrence)
            .ok_or(ExplorerError::UnknownIssuance(sample.recurrence))?;
        if issuance.batch_size != b {
            return Err(ExplorerError::UnknownBatchSize(b));
        }

        if sample.converged {
            self.min_cost = Some(self.min_cost.map_or(sample.cost, |m| m.min(sample.cost)));
            let entry = self.best_cost.entry(b).or_insert(sample.cost);
            *entry = entry.min(sample.cost);
        }

        match self.phase {
            Phase::Pruning => {
                if sample.converged {
                    self.pruning_costs.entry(b).or_default().push(sample.cost);
                } else if issuance.kind == IssuanceKind::Concurrent {
                    // Concurrent failures are censored at the stop threshold
                    // rather than pruning anything.
                    if let Some(th) = issuance.threshold {
                        self.pruning_costs.entry(b).or_default().push(th);
                    }
                }
                if let IssuanceKind::Walk(segment) = issuance.kind {
                    self.walk_outstanding = false;
                    if sample.converged {
                        self.round_converged.insert(b);
                    } else {
                        match segment {
                            Segment::Below => self.below.clear(),
                            Segment::Above => self.above.clear(),
                            Segment::Origin => {}
                        }
                    }
                    if !self.origin_pending && self.below.is_empty() && self.above.is_empty() {
                        self.finish_round()?;
                    }
                }
            }
            Phase::Sampling => {
                if let Some(arm) = self.arms.get_mut(&b) {
                    let observation = if sample.early_stopped {
                        issuance.threshold.unwrap_or(sample.cost)
                    } else {
                        sample.cost
                    };
                    arm.observe(observation);
                }
            }
        }
        Ok(())
    }

    fn finish_round(&mut self) -> Result<(), ExplorerError> {
        let survivors: Vec<u32> = self.round_converged.iter().copied().collect();
        if survivors.is_empty() {
            self.failed = true;
            return Ok(());
        }
        if self.round == 1 {
            // Re-base the default onto the cheapest survivor and walk again.
            self.current_default = survivors
                .iter()
                .copied()
                .min_by(|a, b| self.best_cost[a].total_cmp(&self.best_cost[b]))
                .expect("non-empty survivors");
            self.round = 2;
            self.setup_round(&survivors);
        } else {
            self.phase = Phase::Sampling;
            for &b in &survivors {
                let costs = self.pruning_costs.get(&b).cloned().unwrap_or_default();
                let arm = seed_arm(ArmState::new(b, self.window), &costs)?;
                self.arms.insert(b, arm);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::Config;
    use crate::SimRng;
    use rand::SeedableRng;

    fn job(batch_sizes: Vec<u32>, default: u32) -> JobSpec {
        JobSpec {
            job_id: "js".to_string(),
            batch_sizes,
            power_limits: vec![100.0, 250.0],
            default_batch_size: default,
            max_power: 250.0,
            eta: 0.5,
            beta: 2.0,
            recurrences: 60,
            window: Window::Unbounded,
            max_epochs: 100,
            rng_seed: 1,
        }
    }

    fn sample(recurrence: u32, b: u32, cost: f64, converged: bool, early: bool) -> CostSample {
        CostSample {
            recurrence,
            config: Config { batch_size: b, power_limit: 100.0 },
            energy: cost,
            time: 0.0,
            cost,
            epochs_run: 10,
            converged,
            early_stopped: early,
            profiled: false,
        }
    }

    /// Drives one sequential recurrence: issue, build a scripted outcome,
    /// report it back.
    fn step(
        state: &mut ExplorerState,
        rng: &mut SimRng,
        t: u32,
        outcome: impl Fn(u32) -> (f64, bool, bool),
    ) -> u32 {
        let b = state.next_batch_size(t, rng).unwrap();
        let (cost, converged, early) = outcome(b);
        state.report_result(&sample(t, b, cost, converged, early)).unwrap();
        b
    }

    #[test]
    fn fresh_state_starts_at_the_default() {
        let job = job(vec![8, 16, 32, 64, 128], 32);
        let mut state = ExplorerState::new(&job);
        let mut rng = SimRng::seed_from_u64(0);
        assert_eq!(state.next_batch_size(0, &mut rng).unwrap(), 32);
    }

    #[test]
    fn round_one_visit_order_and_survivors() {
        let job = job(vec![8, 16, 32, 64, 128], 32);
        let mut state = ExplorerState::new(&job);
        let mut rng = SimRng::seed_from_u64(0);
        // 16 and 64 converge, 8 and 128 fail.
        let outcome = |b: u32| match b {
            8 | 128 => (0.0, false, false),
            32 => (1000.0, true, false),
            16 => (1200.0, true, false),
            64 => (1100.0, true, false),
            _ => panic!("unexpected batch size {b}"),
        };
        let mut visited = Vec::new();
        for t in 0..5 {
            visited.push(step(&mut state, &mut rng, t, outcome));
        }
        assert_eq!(visited, vec![32, 16, 8, 64, 128]);
        // Round 2 re-walks the survivors from the cheapest one.
        assert_eq!(state.phase(), Phase::Pruning);
        assert_eq!(state.current_default(), 32);
        let mut round2 = Vec::new();
        for t in 5..8 {
            round2.push(step(&mut state, &mut rng, t, outcome));
        }
        assert_eq!(round2, vec![32, 16, 64]);
        assert_eq!(state.phase(), Phase::Sampling);
        assert_eq!(state.surviving(), vec![16, 32, 64]);
        // Every arm carries its two pruning observations.
        for arm in state.arms() {
            assert_eq!(arm.observation_count(), 2);
        }
    }

    #[test]
    fn round_two_starts_at_cheapest_survivor() {
        let job = job(vec![16, 32, 64], 32);
        let mut state = ExplorerState::new(&job);
        let mut rng = SimRng::seed_from_u64(0);
        let outcome = |b: u32| match b {
            16 => (800.0, true, false),
            32 => (1000.0, true, false),
            64 => (1500.0, true, false),
            _ => unreachable!(),
        };
        for t in 0..3 {
            step(&mut state, &mut rng, t, outcome);
        }
        assert_eq!(state.current_default(), 16);
        // New walk order: 16 first, nothing below, then 32 and 64 ascending.
        assert_eq!(step(&mut state, &mut rng, 3, outcome), 16);
        assert_eq!(step(&mut state, &mut rng, 4, outcome), 32);
        assert_eq!(step(&mut state, &mut rng, 5, outcome), 64);
        assert_eq!(state.phase(), Phase::Sampling);
    }

    #[test]
    fn failure_prunes_the_rest_of_the_direction() {
        let job = job(vec![8, 16, 24, 32, 64], 32);
        let mut state = ExplorerState::new(&job);
        let mut rng = SimRng::seed_from_u64(0);
        // 24 fails during the descending walk: 16 and 8 must never be visited.
        let outcome = |b: u32| match b {
            24 => (0.0, false, true),
            _ => (1000.0 + f64::from(b), true, false),
        };
        let mut visited = Vec::new();
        for t in 0..3 {
            visited.push(step(&mut state, &mut rng, t, outcome));
        }
        assert_eq!(visited, vec![32, 24, 64]);
        assert_eq!(state.phase(), Phase::Pruning);
        assert_eq!(state.current_default(), 32);
    }

    #[test]
    fn default_failure_does_not_stop_the_walk() {
        let job = job(vec![16, 32, 64], 32);
        let mut state = ExplorerState::new(&job);
        let mut rng = SimRng::seed_from_u64(0);
        let outcome = |b: u32| match b {
            32 => (0.0, false, false),
            _ => (1000.0, true, false),
        };
        let mut visited = Vec::new();
        for t in 0..3 {
            visited.push(step(&mut state, &mut rng, t, outcome));
        }
        assert_eq!(visited, vec![32, 16, 64]);
        // 32 failed round 1, so round 2 walks the two survivors only.
        assert_eq!(state.surviving(), Vec::<u32>::new());
        assert_eq!(state.current_default(), 16);
        assert_eq!(step(&mut state, &mut rng, 3, outcome), 16);
        assert_eq!(step(&mut state, &mut rng, 4, outcome), 64);
        assert_eq!(state.phase(), Phase::Sampling);
        assert_eq!(state.surviving(), vec![16, 64]);
    }

    #[test]
    fn nothing_survives_is_an_error() {
        let job = job(vec![16, 32], 32);
        let mut state = ExplorerState::new(&job);
        let mut rng = SimRng::seed_from_u64(0);
        let outcome = |_| (0.0, false, false);
        for t in 0..2 {
            step(&mut state, &mut rng, t, outcome);
        }
        assert_eq!(state.next_batch_size(2, &mut rng), Err(ExplorerError::NoSurvivors));
    }

    #[test]
    fn threshold_tracks_the_minimum_converged_cost() {
        let job = job(vec![16, 32, 64], 32);
        let mut state = ExplorerState::new(&job);
        let mut rng = SimRng::seed_from_u64(0);
        assert_eq!(state.early_stop_threshold(), None);

        let b = state.next_batch_size(0, &mut rng).unwrap();
        state.report_result(&sample(0, b, 1000.0, true, false)).unwrap();
        assert_eq!(state.early_stop_threshold(), Some(2000.0));

        let b = state.next_batch_size(1, &mut rng).unwrap();
        state.report_result(&sample(1, b, 900.0, true, false)).unwrap();
        assert_eq!(state.early_stop_threshold(), Some(1800.0));
    }

    #[test]
    fn beta_scales_the_threshold() {
        let mut spec = job(vec![16, 32, 64], 32);
        spec.beta = 5.0;
        let mut state = ExplorerState::new(&spec);
        let mut rng = SimRng::seed_from_u64(0);
        let b = state.next_batch_size(0, &mut rng).unwrap();
        state.report_result(&sample(0, b, 1000.0, true, false)).unwrap();
        assert_eq!(state.early_stop_threshold(), Some(5000.0));
    }

    #[test]
    fn concurrent_submissions_run_best_known_without_advancing_the_walk() {
        let job = job(vec![16, 32, 64], 32);
        let mut state = ExplorerState::new(&job);
        let mut rng = SimRng::seed_from_u64(0);

        // Nothing has converged yet: concurrent falls back to the default.
        let b0 = state.next_batch_size(0, &mut rng).unwrap();
        assert_eq!(b0, 32);
        assert_eq!(state.concurrent_batch_size(1, &mut rng).unwrap(), 32);

        // Walk result arrives; a later concurrent submission tracks the
        // cheapest converged batch size.
        state.report_result(&sample(0, b0, 1000.0, true, false)).unwrap();
        state.report_result(&sample(1, 32, 1200.0, true, false)).unwrap();
        let b2 = state.next_batch_size(2, &mut rng).unwrap();
        assert_eq!(b2, 16); // walk resumed below the default
        assert_eq!(state.concurrent_batch_size(3, &mut rng).unwrap(), 32);
        state.report_result(&sample(2, 16, 800.0, true, false)).unwrap();
        assert_eq!(state.concurrent_batch_size(4, &mut rng).unwrap(), 16);
    }

    #[test]
    fn issuing_over_an_outstanding_walk_step_is_rejected() {
        let job = job(vec![16, 32, 64], 32);
        let mut state = ExplorerState::new(&job);
        let mut rng = SimRng::seed_from_u64(0);
        state.next_batch_size(0, &mut rng).unwrap();
        assert_eq!(state.next_batch_size(1, &mut rng), Err(ExplorerError::WalkOutstanding));
    }

    #[test]
    fn sampling_censors_early_stopped_runs_at_the_threshold() {
        let job = job(vec![16, 32], 32);
        let mut state = ExplorerState::new(&job);
        let mut rng = SimRng::seed_from_u64(0);
        let outcome = |b: u32| match b {
            32 => (1000.0, true, false),
            16 => (1500.0, true, false),
            _ => unreachable!(),
        };
        for t in 0..4 {
            step(&mut state, &mut rng, t, outcome);
        }
        assert_eq!(state.phase(), Phase::Sampling);
        // Early-stopped run: the arm records the issue-time threshold, 2000.
        let b = state.next_batch_size(4, &mut rng).unwrap();
        state.report_result(&sample(4, b, 1700.0, false, true)).unwrap();
        let arm = state.arms().find(|a| a.batch_size() == b).unwrap();
        let last = arm.history().last().unwrap();
        assert_eq!(last, 2000.0);
    }

    #[test]
    fn sampling_only_issues_survivors() {
        let job = job(vec![8, 16, 32, 64], 32);
        let mut state = ExplorerState::new(&job);
        let mut rng = SimRng::seed_from_u64(3);
        let outcome = |b: u32| match b {
            8 => (0.0, false, false),
            _ => (1000.0 + f64::from(b), true, false),
        };
        let mut t = 0;
        while state.phase() == Phase::Pruning {
            step(&mut state, &mut rng, t, outcome);
            t += 1;
        }
        let survivors = state.surviving();
        assert_eq!(survivors, vec![16, 32, 64]);
        for _ in 0..50 {
            let b = state.next_batch_size(t, &mut rng).unwrap();
            assert!(survivors.contains(&b), "issued pruned batch size {b}");
            state.report_result(&sample(t, b, 1000.0 + f64::from(b), true, false)).unwrap();
            t += 1;
        }
    }

    #[test]
    fn unknown_reports_are_rejected() {
        let job = job(vec![16, 32], 32);
        let mut state = ExplorerState::new(&job);
        let mut rng = SimRng::seed_from_u64(0);
        assert_eq!(
            state.report_result(&sample(0, 99, 100.0, true, false)),
            Err(ExplorerError::UnknownBatchSize(99))
        );
        state.next_batch_size(0, &mut rng).unwrap();
        assert_eq!(
            state.report_result(&sample(7, 32, 100.0, true, false)),
            Err(ExplorerError::UnknownIssuance(7))
        );
    }
}
