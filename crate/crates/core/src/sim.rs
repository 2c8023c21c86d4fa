//! Deterministic recurrence replay: runs a policy over training and power
//! traces, charging profiling epochs, enforcing early stopping at epoch
//! boundaries, and supporting drift slices and overlapping arrivals.
//!
//! The simulator is a single-threaded deterministic loop; identical inputs
//! and seed produce bit-identical results. "Concurrency" means a submission
//! whose submit time precedes an earlier completion: its decision is made
//! before that cost is observed, and observations are applied in completion
//! order.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bandit::BanditError;
use crate::cost::{self, blended_cost, epoch_cost, CostError};
use crate::domain::{Config, CostSample, JobSpec, TrainingRecord};
use crate::explorer::{ExplorerError, ExplorerState};
use crate::power::{optimal_power_limit, profiling_epoch_cost, PowerError, ProfileCache};
use crate::traceio::{TraceBundle, TraceError};
use crate::SimRng;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid job spec: {}", .0.join("; "))]
    InvalidJob(Vec<String>),
    #[error("schedule covers {0} submissions but the job has {1} recurrences")]
    ScheduleMismatch(usize, u32),
    #[error("invalid schedule: {0}")]
    InvalidSchedule(String),
    #[error(transparent)]
    Trace(#[from] TraceError),
    #[error(transparent)]
    Power(#[from] PowerError),
    #[error(transparent)]
    Cost(#[from] CostError),
    #[error(transparent)]
    Explorer(#[from] ExplorerError),
    #[error(transparent)]
    Bandit(#[from] BanditError),
}

/// The policy replayed over recurrences.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Policy {
    /// Pruning exploration + Thompson Sampling over batch sizes, with
    /// just-in-time power profiling and early stopping.
    Zeus,
    /// One recurrence per (b, p) pair in (b asc, p asc) order, pruning batch
    /// sizes that fail, then exploiting the best observed pair.
    GridSearch,
    /// Always the default batch size at the maximum power limit.
    Default,
}

impl Policy {
    pub fn name(&self) -> &'static str {
        match self {
            Policy::Zeus => "zeus",
            Policy::GridSearch => "grid",
            Policy::Default => "default",
        }
    }

    pub fn parse(s: &str) -> Option<Policy> {
        match s {
            "zeus" => Some(Policy::Zeus),
            "grid" => Some(Policy::GridSearch),
            "default" => Some(Policy::Default),
            _ => None,
        }
    }
}

/// Submission times per recurrence. A submission whose time precedes the
/// completion of an earlier one is concurrent with it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArrivalSchedule {
    submit_times: Vec<f64>,
}

impl ArrivalSchedule {
    /// Builds a schedule from (recurrence, submit time) pairs. Indices must
    /// be contiguous from 0 and times non-decreasing.
    pub fn new(mut submissions: Vec<(u32, f64)>) -> Result<Self, SimError> {
        submissions.sort_by_key(|s| s.0);
        for (i, (rec, _)) in submissions.iter().enumerate() {
            if *rec != i as u32 {
                return Err(SimError::InvalidSchedule(format!(
                    "recurrence indices must be contiguous from 0; found {rec} at position {i}"
                )));
            }
        }
        let times: Vec<f64> = submissions.iter().map(|s| s.1).collect();
        if times.windows(2).any(|w| w[0] > w[1]) {
            return Err(SimError::InvalidSchedule("submit times must be non-decreasing".to_string()));
        }
        if times.iter().any(|t| !t.is_finite() || *t < 0.0) {
            return Err(SimError::InvalidSchedule("submit times must be finite and non-negative".to_string()));
        }
        Ok(Self { submit_times: times })
    }

    pub fn len(&self) -> usize {
        self.submit_times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.submit_times.is_empty()
    }

    pub fn submit_time(&self, recurrence: u32) -> f64 {
        self.submit_times[recurrence as usize]
    }
}

/// Maps a recurrence index to the drift slice it trains on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum SliceMap {
    /// Every recurrence uses the same slice (0 for stationary bundles).
    Constant(u32),
    /// Recurrence `t` trains on slice `min(t, slices - 1)`.
    PerRecurrence,
    /// Step function: pairs of (first recurrence, slice), sorted by
    /// recurrence; recurrences before the first step use slice 0.
    Steps(Vec<(u32, u32)>),
}

impl SliceMap {
    pub fn slice_for(&self, recurrence: u32, slices: u32) -> u32 {
        let last = slices.saturating_sub(1);
        let slice = match self {
            SliceMap::Constant(s) => *s,
            SliceMap::PerRecurrence => recurrence,
            SliceMap::Steps(steps) => steps
                .iter()
                .rfind(|(start, _)| *start <= recurrence)
                .map(|(_, s)| *s)
                .unwrap_or(0),
        };
        slice.min(last)
    }
}

/// One simulated recurrence in an experiment log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecurrenceRecord {
    pub recurrence: u32,
    pub slice: u32,
    /// Policy stage when the decision was issued: pruning/sampling for the
    /// bandit policy, explore/exploit for grid search, default otherwise.
    pub phase: String,
    pub sample: CostSample,
    /// Early-stop cost cap in force when the run was issued, if any.
    pub threshold: Option<f64>,
    pub regret: f64,
    pub cumulative_regret: f64,
}

/// Final belief state of one bandit arm, for post-hoc analysis of a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmSnapshot {
    pub batch_size: u32,
    /// The cost window at the end of the run, oldest first.
    pub observations: Vec<f64>,
    pub posterior_mean: Option<f64>,
    pub posterior_variance: Option<f64>,
}

/// Full log of one policy run, in recurrence order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentResult {
    pub policy: String,
    pub rng_seed: u64,
    pub job: JobSpec,
    pub records: Vec<RecurrenceRecord>,
    /// Arm states at the end of the run; empty for policies without arms.
    pub final_arms: Vec<ArmSnapshot>,
}

impl ExperimentResult {
    pub fn total_cost(&self) -> f64 {
        self.records.iter().map(|r| r.sample.cost).sum()
    }

    pub fn final_cumulative_regret(&self) -> f64 {
        self.records.last().map(|r| r.cumulative_regret).unwrap_or(0.0)
    }

    pub fn cumulative_regret_series(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.cumulative_regret).collect()
    }
}

// ---------------------------------------------------------------------------
// Single-recurrence replay
// ---------------------------------------------------------------------------

fn draw_record<R: Rng>(records: &[TrainingRecord], rng: &mut R) -> TrainingRecord {
    records[rng.random_range(0..records.len())]
}

/// Replays one recurrence at batch size `b` with just-in-time profiling: an
/// unprofiled batch size spends its first epoch split across all power
/// limits, the cache is charged, and the rest runs at the cached optimal
/// limit. Accumulation stops at the first epoch boundary where the next
/// epoch would push the blended cost past `threshold`, at the drawn record's
/// epochs-to-target, or at the job's epoch cap.
#[allow(clippy::too_many_arguments)]
pub fn run_recurrence(
    job: &JobSpec,
    batch_size: u32,
    bundle: &TraceBundle,
    cache: &mut ProfileCache,
    threshold: Option<f64>,
    slice: u32,
    recurrence: u32,
    rng: &mut SimRng,
) -> Result<CostSample, SimError> {
    let profiles = job_profiles(job, bundle, slice, batch_size)?;
    let needs_profiling = !cache.is_profiled(batch_size);
    let optimal_limit = match cache.get(batch_size) {
        Some(entry) => entry.optimal_limit,
        None => optimal_power_limit(&profiles, job.eta, job.max_power)?.0,
    };
    let at_limit = bundle.profile_at(slice, batch_size, optimal_limit)?;
    let epoch_time = 1.0 / at_limit.throughput;
    let epoch_energy = at_limit.avg_power / at_limit.throughput;
    let (profiling_time, profiling_energy) = profiling_epoch_cost(&profiles)?;

    let record = draw_record(bundle.records(slice, batch_size)?, rng);
    // A record needing more epochs than the job cap counts as non-converging.
    let goal = record.epochs_to_target.filter(|&e| e <= job.max_epochs);
    let target = goal.unwrap_or(job.max_epochs);

    let mut time = 0.0;
    let mut energy = 0.0;
    let mut epochs_run = 0u32;
    let mut early_stopped = false;
    let mut profiled = false;
    for epoch in 1..=target {
        let (dt, de) = if epoch == 1 && needs_profiling {
            (profiling_time, profiling_energy)
        } else {
            (epoch_time, epoch_energy)
        };
        if let Some(th) = threshold {
            let projected = blended_cost(energy + de, time + dt, job.eta, job.max_power);
            if projected > th {
                early_stopped = true;
                break;
            }
        }
        time += dt;
        energy += de;
        epochs_run += 1;
        if epoch == 1 && needs_profiling {
            cache.insert(batch_size, &profiles, job.eta, job.max_power)?;
            profiled = true;
        }
    }

    let converged = goal.is_some() && !early_stopped && epochs_run == target;
    Ok(CostSample {
        recurrence,
        config: Config { batch_size, power_limit: optimal_limit },
        energy,
        time,
        cost: blended_cost(energy, time, job.eta, job.max_power),
        epochs_run,
        converged,
        early_stopped,
        profiled,
    })
}

/// Replays one recurrence pinned to an explicit configuration, with no
/// profiling charge and no early stopping. Baseline policies use this.
pub fn run_recurrence_fixed(
    job: &JobSpec,
    config: Config,
    bundle: &TraceBundle,
    slice: u32,
    recurrence: u32,
    rng: &mut SimRng,
) -> Result<CostSample, SimError> {
    let prof = bundle.profile_at(slice, config.batch_size, config.power_limit)?;
    let record = draw_record(bundle.records(slice, config.batch_size)?, rng);
    let goal = record.epochs_to_target.filter(|&e| e <= job.max_epochs);
    let target = goal.unwrap_or(job.max_epochs);
    let time = f64::from(target) / prof.throughput;
    let energy = time * prof.avg_power;
    Ok(CostSample {
        recurrence,
        config,
        energy,
        time,
        cost: blended_cost(energy, time, job.eta, job.max_power),
        epochs_run: target,
        converged: goal.is_some(),
        early_stopped: false,
        profiled: false,
    })
}

/// Profiles for one batch size restricted to the job's power-limit grid.
fn job_profiles(
    job: &JobSpec,
    bundle: &TraceBundle,
    slice: u32,
    batch_size: u32,
) -> Result<Vec<crate::domain::PowerProfile>, SimError> {
    let all = bundle.profiles(slice, batch_size)?;
    let mut out = Vec::with_capacity(job.power_limits.len());
    for &p in &job.power_limits {
        let prof = all.iter().find(|prof| prof.power_limit == p).ok_or_else(|| {
            TraceError::MissingKey(format!("power (b={batch_size}, p={p}, slice={slice})"))
        })?;
        out.push(*prof);
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Per-slice oracle view
// ---------------------------------------------------------------------------

/// Lazily computed per-slice oracle data shared by the policy runners.
struct OracleView<'a> {
    job: &'a JobSpec,
    bundle: &'a TraceBundle,
    expected: BTreeMap<u32, BTreeMap<u32, f64>>,
    optima: BTreeMap<u32, (Config, f64)>,
}

impl<'a> OracleView<'a> {
    fn new(job: &'a JobSpec, bundle: &'a TraceBundle) -> Self {
        Self { job, bundle, expected: BTreeMap::new(), optima: BTreeMap::new() }
    }

    fn expected_epochs(&mut self, slice: u32) -> &BTreeMap<u32, f64> {
        self.expected.entry(slice).or_insert_with(|| self.bundle.expected_epochs(slice))
    }

    fn optimum(&mut self, slice: u32) -> Result<(Config, f64), SimError> {
        if let Some(v) = self.optima.get(&slice) {
            return Ok(*v);
        }
        let expected = self.expected_epochs(slice).clone();
        let mut profiles = Vec::new();
        for &b in &self.job.batch_sizes {
            profiles.extend(job_profiles(self.job, self.bundle, slice, b)?);
        }
        let opt = cost::brute_force_optimum(&expected, &profiles, self.job.eta, self.job.max_power)?;
        self.optima.insert(slice, opt);
        Ok(opt)
    }

    /// Regret charged to one recurrence. A converged run is charged the
    /// expected cost of its (b, p) decision minus the slice optimum, which is
    /// non-negative by construction. A failed or early-stopped run produced
    /// nothing, so its whole realized cost counts as regret.
    fn regret_for(&mut self, slice: u32, sample: &CostSample) -> Result<f64, SimError> {
        if !sample.converged {
            return Ok(sample.cost);
        }
        let (_, optimal) = self.optimum(slice)?;
        let epochs = self.expected_epochs(slice)[&sample.config.batch_size];
        let prof = self.bundle.profile_at(slice, sample.config.batch_size, sample.config.power_limit)?;
        let decision_cost = cost::job_cost(epochs, epoch_cost(prof, self.job.eta, self.job.max_power));
        Ok(cost::regret(decision_cost, optimal)?)
    }
}

// ---------------------------------------------------------------------------
// Policies
// ---------------------------------------------------------------------------

struct GridState {
    pairs: Vec<Config>,
    next: usize,
    pruned: Vec<u32>,
    observed: Vec<(Config, f64, bool)>,
    choice: Option<Config>,
}

impl GridState {
    fn new(job: &JobSpec) -> Self {
        let mut pairs = Vec::new();
        for &b in &job.batch_sizes {
            for &p in &job.power_limits {
                pairs.push(Config { batch_size: b, power_limit: p });
            }
        }
        Self { pairs, next: 0, pruned: Vec::new(), observed: Vec::new(), choice: None }
    }

    fn decide(&mut self) -> (&'static str, Config) {
        while self.next < self.pairs.len() {
            let pair = self.pairs[self.next];
            self.next += 1;
            if !self.pruned.contains(&pair.batch_size) {
                return ("explore", pair);
            }
        }
        let choice = *self.choice.get_or_insert_with(|| {
            // Exploit the cheapest converged observation; if nothing
            // converged, fall back to the cheapest observation overall.
            self.observed
                .iter()
                .filter(|(_, _, converged)| *converged)
                .min_by(|a, b| a.1.total_cmp(&b.1))
                .or_else(|| self.observed.iter().min_by(|a, b| a.1.total_cmp(&b.1)))
                .map(|(cfg, _, _)| *cfg)
                .expect("grid search exploited before exploring anything")
        });
        ("exploit", choice)
    }

    fn observe(&mut self, sample: &CostSample) {
        if self.choice.is_some() {
            return;
        }
        self.observed.push((sample.config, sample.cost, sample.converged));
        if !sample.converged && !self.pruned.contains(&sample.config.batch_size) {
            self.pruned.push(sample.config.batch_size);
        }
    }
}

enum PolicyState {
    Zeus { explorer: ExplorerState, cache: ProfileCache },
    Grid(GridState),
    Baseline,
}

// ---------------------------------------------------------------------------
// Experiment runners
// ---------------------------------------------------------------------------

/// Runs `job.recurrences` recurrences of `policy` over the bundle.
///
/// With a schedule, submissions are issued at their submit times and
/// observations applied at completion times (submit + simulated duration),
/// ordered by completion then submission; a fully sequential schedule
/// reproduces the unscheduled run exactly. `slices` maps recurrences onto
/// drift slices; regret is computed against each recurrence's own slice
/// oracle.
pub fn run_experiment(
    job: &JobSpec,
    bundle: &TraceBundle,
    policy: Policy,
    schedule: Option<&ArrivalSchedule>,
    slices: &SliceMap,
) -> Result<ExperimentResult, SimError> {
    let issues = job.validate();
    if !issues.is_empty() {
        return Err(SimError::InvalidJob(issues));
    }
    if let Some(s) = schedule {
        if s.len() != job.recurrences as usize {
            return Err(SimError::ScheduleMismatch(s.len(), job.recurrences));
        }
    }
    check_coverage(job, bundle, slices)?;

    let mut rng = SimRng::seed_from_u64(job.rng_seed);
    let mut oracle = OracleView::new(job, bundle);
    let mut state = match policy {
        Policy::Zeus => PolicyState::Zeus { explorer: ExplorerState::new(job), cache: ProfileCache::new() },
        Policy::GridSearch => PolicyState::Grid(GridState::new(job)),
        Policy::Default => PolicyState::Baseline,
    };

    // Completions not yet observed: (completion time, recurrence, sample).
    let mut pending: Vec<(f64, u32, CostSample)> = Vec::new();
    let mut observed = 0u32;
    let mut records = Vec::with_capacity(job.recurrences as usize);
    let mut cumulative = 0.0;

    for t in 0..job.recurrences {
        let now = schedule.map(|s| s.submit_time(t));
        // Apply completions that precede this submission, in completion
        // order (ties by submission order from the stable sort).
        if let Some(now) = now {
            pending.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            while let Some(head) = pending.first() {
                if head.0 <= now {
                    let (_, _, sample) = pending.remove(0);
                    observe(&mut state, &sample)?;
                    observed += 1;
                } else {
                    break;
                }
            }
        }

        let slice = slices.slice_for(t, bundle.slices());
        let concurrent = !pending.is_empty();
        let (phase, sample, threshold) = match &mut state {
            PolicyState::Zeus { explorer, cache } => {
                let threshold = explorer.early_stop_threshold();
                let b = if concurrent {
                    explorer.concurrent_batch_size(t, &mut rng)?
                } else {
                    explorer.next_batch_size(t, &mut rng)?
                };
                let phase = explorer.phase().name();
                let sample = run_recurrence(job, b, bundle, cache, threshold, slice, t, &mut rng)?;
                (phase, sample, threshold)
            }
            PolicyState::Grid(grid) => {
                let (phase, config) = grid.decide();
                let sample = run_recurrence_fixed(job, config, bundle, slice, t, &mut rng)?;
                (phase, sample, None)
            }
            PolicyState::Baseline => {
                let config = Config {
                    batch_size: job.default_batch_size,
                    power_limit: job.top_power_limit(),
                };
                let sample = run_recurrence_fixed(job, config, bundle, slice, t, &mut rng)?;
                ("default", sample, None)
            }
        };

        match now {
            Some(now) => pending.push((now + sample.time, t, sample)),
            None => {
                observe(&mut state, &sample)?;
                observed += 1;
            }
        }

        let regret = oracle.regret_for(slice, &sample)?;
        cumulative += regret;
        records.push(RecurrenceRecord {
            recurrence: t,
            slice,
            phase: phase.to_string(),
            sample,
            threshold,
            regret,
            cumulative_regret: cumulative,
        });
    }

    // Drain outstanding completions so every cost is observed exactly once.
    pending.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    for (_, _, sample) in pending {
        observe(&mut state, &sample)?;
        observed += 1;
    }
    debug_assert_eq!(observed, job.recurrences);

    let final_arms = match &state {
        PolicyState::Zeus { explorer, .. } => explorer
            .arms()
            .map(|arm| ArmSnapshot {
                batch_size: arm.batch_size(),
                observations: arm.history().collect(),
                posterior_mean: arm.posterior().map(|p| p.mean),
                posterior_variance: arm.posterior().map(|p| p.variance),
            })
            .collect(),
        _ => Vec::new(),
    };

    Ok(ExperimentResult {
        policy: policy.name().to_string(),
        rng_seed: job.rng_seed,
        job: job.clone(),
        records,
        final_arms,
    })
}

/// Drift run: the bandit policy over a slice map, usually with a finite
/// window so stale observations age out.
pub fn run_drift_experiment(
    job: &JobSpec,
    bundle: &TraceBundle,
    slices: &SliceMap,
) -> Result<ExperimentResult, SimError> {
    run_experiment(job, bundle, Policy::Zeus, None, slices)
}

/// Overlapping-arrival run: the bandit policy over an arrival schedule on a
/// stationary bundle.
pub fn run_concurrent_experiment(
    job: &JobSpec,
    bundle: &TraceBundle,
    schedule: &ArrivalSchedule,
) -> Result<ExperimentResult, SimError> {
    run_experiment(job, bundle, Policy::Zeus, Some(schedule), &SliceMap::Constant(0))
}

fn observe(state: &mut PolicyState, sample: &CostSample) -> Result<(), SimError> {
    match state {
        PolicyState::Zeus { explorer, .. } => explorer.report_result(sample)?,
        PolicyState::Grid(grid) => grid.observe(sample),
        PolicyState::Baseline => {}
    }
    Ok(())
}

/// Verifies the traces cover the job's grid on every slice the run touches.
fn check_coverage(job: &JobSpec, bundle: &TraceBundle, slices: &SliceMap) -> Result<(), SimError> {
    let mut used: Vec<u32> = (0..job.recurrences)
        .map(|t| slices.slice_for(t, bundle.slices()))
        .collect();
    used.sort_unstable();
    used.dedup();
    for &slice in &used {
        for &b in &job.batch_sizes {
            job_profiles(job, bundle, slice, b)?;
            let records = bundle.records(slice, b)?;
            if records.is_empty() {
                return Err(TraceError::MissingKey(format!("training (b={b}, slice={slice})")).into());
            }
        }
    }
    Ok(())
}

/// Post-hoc early-stop audit: every sample issued under a threshold must
/// cost at most the threshold plus one epoch at its configuration. Returns
/// the violating recurrences.
pub fn audit_early_stop(result: &ExperimentResult, bundle: &TraceBundle) -> Vec<u32> {
    let job = &result.job;
    let mut violations = Vec::new();
    for rec in &result.records {
        let Some(th) = rec.threshold else { continue };
        let Ok(prof) = bundle.profile_at(rec.slice, rec.sample.config.batch_size, rec.sample.config.power_limit)
        else {
            violations.push(rec.recurrence);
            continue;
        };
        let one_epoch = epoch_cost(prof, job.eta, job.max_power);
        if rec.sample.cost > th + one_epoch + 1e-9 * th.abs().max(1.0) {
            violations.push(rec.recurrence);
        }
    }
    violations
}
