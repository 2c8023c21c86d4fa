//! Trace bundle I/O: file formats, loading with validation, writing, and a
//! synthetic generator with analytic ground truth.
//!
//! A bundle on disk is a directory holding:
//! - `bundle.toml`: manifest naming the data files, the job grid, units,
//!   and (for synthetic bundles) the generator parameters;
//! - `power.csv`: one row per (batch size, power limit, slice) with the
//!   measured average power and throughput;
//! - `training.csv`: one row per (batch size, seed replica, slice) with the
//!   epochs-to-target, or a non-convergence marker.
//!
//! Formats are plain delimited text with a header line so fixtures can be
//! hand-edited and diffed.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::domain::{JobSpec, PowerProfile, TrainingRecord, Window};
use crate::SimRng;

pub const MANIFEST_FILE: &str = "bundle.toml";
pub const GROUND_TRUTH_FILE: &str = "ground_truth.csv";

const POWER_HEADER: &str = "job_id,batch_size,power_limit_w,avg_power_w,throughput_epochs_per_s,slice";
const TRAINING_HEADER: &str = "job_id,batch_size,seed,slice,epochs_to_target,converged";

#[derive(Debug, Error)]
pub enum TraceError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {msg}")]
    Parse { path: PathBuf, line: u64, msg: String },
    #[error("{path}: {msg}")]
    Manifest { path: PathBuf, msg: String },
    #[error("invalid bundle: {}", issues.join("; "))]
    Validation { issues: Vec<String> },
    #[error("invalid generator parameters: {0}")]
    Generator(String),
    #[error("missing trace rows for {0}")]
    MissingKey(String),
}

fn io_err(path: &Path, source: std::io::Error) -> TraceError {
    TraceError::Io { path: path.to_path_buf(), source }
}

// ---------------------------------------------------------------------------
// Manifest
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BundleSection {
    pub job_id: String,
    pub power_file: String,
    pub training_file: String,
    /// Number of drift slices; stationary bundles have 1.
    pub slices: u32,
    /// Seed replicas per (batch size, slice).
    pub seeds: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobSection {
    pub batch_sizes: Vec<u32>,
    pub power_limits_w: Vec<f64>,
    pub default_batch_size: u32,
    pub max_power_w: f64,
    pub max_epochs: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnitsSection {
    pub power: String,
    pub energy: String,
    pub time: String,
    pub throughput: String,
}

impl Default for UnitsSection {
    fn default() -> Self {
        Self {
            power: "watts".to_string(),
            energy: "joules".to_string(),
            time: "seconds".to_string(),
            throughput: "epochs_per_second".to_string(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BundleManifest {
    pub bundle: BundleSection,
    pub job: JobSection,
    #[serde(default)]
    pub units: UnitsSection,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub generator: Option<GeneratorSpec>,
}

impl BundleManifest {
    /// Builds a job spec from the bundle's grid plus run-time knobs.
    pub fn job_spec(
        &self,
        eta: f64,
        beta: f64,
        recurrences: u32,
        window: Window,
        rng_seed: u64,
    ) -> JobSpec {
        JobSpec {
            job_id: self.bundle.job_id.clone(),
            batch_sizes: self.job.batch_sizes.clone(),
            power_limits: self.job.power_limits_w.clone(),
            default_batch_size: self.job.default_batch_size,
            max_power: self.job.max_power_w,
            eta,
            beta,
            recurrences,
            window,
            max_epochs: self.job.max_epochs,
            rng_seed,
        }
    }

    /// The `2 * |B| * |P|` recurrence-count convention, enough for a grid
    /// search to finish exploring and still exploit.
    pub fn auto_recurrences(&self) -> u32 {
        2 * self.job.batch_sizes.len() as u32 * self.job.power_limits_w.len() as u32
    }
}

// ---------------------------------------------------------------------------
// Bundle
// ---------------------------------------------------------------------------

/// A validated pair of power and training traces plus their manifest.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceBundle {
    pub manifest: BundleManifest,
    /// (slice, batch size) -> profiles sorted by power limit, one per p.
    power: BTreeMap<(u32, u32), Vec<PowerProfile>>,
    /// (slice, batch size) -> records sorted by seed index.
    training: BTreeMap<(u32, u32), Vec<TrainingRecord>>,
}

impl TraceBundle {
    /// Assembles and validates a bundle from loose rows. `power_rows` pairs
    /// each profile with its slice index.
    pub fn from_parts(
        manifest: BundleManifest,
        power_rows: Vec<(u32, PowerProfile)>,
        training_rows: Vec<TrainingRecord>,
    ) -> Result<Self, TraceError> {
        let issues = validate_parts(&manifest, &power_rows, &training_rows);
        if !issues.is_empty() {
            return Err(TraceError::Validation { issues });
        }
        let mut power: BTreeMap<(u32, u32), Vec<PowerProfile>> = BTreeMap::new();
        for (slice, prof) in power_rows {
            power.entry((slice, prof.batch_size)).or_default().push(prof);
        }
        for profs in power.values_mut() {
            profs.sort_by(|a, b| a.power_limit.total_cmp(&b.power_limit));
        }
        let mut training: BTreeMap<(u32, u32), Vec<TrainingRecord>> = BTreeMap::new();
        for rec in training_rows {
            training.entry((rec.slice_index, rec.batch_size)).or_default().push(rec);
        }
        for recs in training.values_mut() {
            recs.sort_by_key(|r| r.seed_index);
        }
        Ok(Self { manifest, power, training })
    }

    pub fn slices(&self) -> u32 {
        self.manifest.bundle.slices
    }

    pub fn batch_sizes(&self) -> &[u32] {
        &self.manifest.job.batch_sizes
    }

    pub fn power_limits(&self) -> &[f64] {
        &self.manifest.job.power_limits_w
    }

    /// All profiles for one batch size on one slice, sorted by power limit.
    pub fn profiles(&self, slice: u32, batch_size: u32) -> Result<&[PowerProfile], TraceError> {
        self.power
            .get(&(slice, batch_size))
            .map(Vec::as_slice)
            .ok_or_else(|| TraceError::MissingKey(format!("power (b={batch_size}, slice={slice})")))
    }

    /// The profile at one (b, p) point on one slice.
    pub fn profile_at(
        &self,
        slice: u32,
        batch_size: u32,
        power_limit: f64,
    ) -> Result<&PowerProfile, TraceError> {
        self.profiles(slice, batch_size)?
            .iter()
            .find(|p| p.power_limit == power_limit)
            .ok_or_else(|| {
                TraceError::MissingKey(format!(
                    "power (b={batch_size}, p={power_limit}, slice={slice})"
                ))
            })
    }

    /// All seed-replica records for one batch size on one slice.
    pub fn records(&self, slice: u32, batch_size: u32) -> Result<&[TrainingRecord], TraceError> {
        self.training
            .get(&(slice, batch_size))
            .map(Vec::as_slice)
            .ok_or_else(|| {
                TraceError::MissingKey(format!("training (b={batch_size}, slice={slice})"))
            })
    }

    /// Mean epochs-to-target per batch size over converged replicas of one
    /// slice. Batch sizes that never converge are absent.
    pub fn expected_epochs(&self, slice: u32) -> BTreeMap<u32, f64> {
        let mut out = BTreeMap::new();
        for ((s, b), recs) in &self.training {
            if *s != slice {
                continue;
            }
            let converged: Vec<f64> =
                recs.iter().filter_map(|r| r.epochs_to_target).map(f64::from).collect();
            if !converged.is_empty() {
                out.insert(*b, converged.iter().sum::<f64>() / converged.len() as f64);
            }
        }
        out
    }

    /// Every profile on one slice, flattened over batch sizes.
    pub fn all_profiles(&self, slice: u32) -> Vec<PowerProfile> {
        self.power
            .iter()
            .filter(|((s, _), _)| *s == slice)
            .flat_map(|(_, profs)| profs.iter().copied())
            .collect()
    }

    /// The observed average-power band over one slice's grid: the smallest
    /// and largest measured draw.
    pub fn avg_power_band(&self, slice: u32) -> Option<(f64, f64)> {
        let profs = self.all_profiles(slice);
        let min = profs.iter().map(|p| p.avg_power).fold(f64::INFINITY, f64::min);
        let max = profs.iter().map(|p| p.avg_power).fold(f64::NEG_INFINITY, f64::max);
        if profs.is_empty() {
            None
        } else {
            Some((min, max))
        }
    }
}

fn validate_parts(
    manifest: &BundleManifest,
    power_rows: &[(u32, PowerProfile)],
    training_rows: &[TrainingRecord],
) -> Vec<String> {
    let mut issues = Vec::new();
    let job = &manifest.job;

    if job.batch_sizes.is_empty() || job.batch_sizes.windows(2).any(|w| w[0] >= w[1]) {
        issues.push("manifest batch sizes must be non-empty and strictly increasing".to_string());
    }
    if job.power_limits_w.is_empty() || job.power_limits_w.windows(2).any(|w| w[0] >= w[1]) {
        issues.push("manifest power limits must be non-empty and strictly increasing".to_string());
    }
    if !job.batch_sizes.contains(&job.default_batch_size) {
        issues.push("manifest default batch size not in batch size set".to_string());
    }
    if manifest.bundle.slices == 0 {
        issues.push("bundle must declare at least one slice".to_string());
    }
    if manifest.bundle.seeds == 0 {
        issues.push("bundle must declare at least one seed replica".to_string());
    }

    let batches: BTreeSet<u32> = job.batch_sizes.iter().copied().collect();

    // Power completeness and units.
    let mut power_seen: BTreeSet<(u32, u32, u64)> = BTreeSet::new();
    for (slice, prof) in power_rows {
        let key = (*slice, prof.batch_size, prof.power_limit.to_bits());
        if !power_seen.insert(key) {
            issues.push(format!(
                "duplicate power row (b={}, p={}, slice={})",
                prof.batch_size, prof.power_limit, slice
            ));
        }
        if !batches.contains(&prof.batch_size) {
            issues.push(format!("power row references undeclared batch size {}", prof.batch_size));
        }
        if !job.power_limits_w.contains(&prof.power_limit) {
            issues.push(format!("power row references undeclared power limit {}", prof.power_limit));
        }
        if *slice >= manifest.bundle.slices {
            issues.push(format!("power row references undeclared slice {slice}"));
        }
        if !(prof.avg_power.is_finite() && prof.avg_power > 0.0) {
            issues.push(format!(
                "non-positive avg power for (b={}, p={}, slice={})",
                prof.batch_size, prof.power_limit, slice
            ));
        }
        if !(prof.throughput.is_finite() && prof.throughput > 0.0) {
            issues.push(format!(
                "non-positive throughput for (b={}, p={}, slice={})",
                prof.batch_size, prof.power_limit, slice
            ));
        }
        if prof.avg_power > job.max_power_w {
            issues.push(format!(
                "avg power {} exceeds max power {} at (b={}, p={}, slice={})",
                prof.avg_power, job.max_power_w, prof.batch_size, prof.power_limit, slice
            ));
        }
    }
    for slice in 0..manifest.bundle.slices {
        for &b in &job.batch_sizes {
            for &p in &job.power_limits_w {
                if !power_seen.contains(&(slice, b, p.to_bits())) {
                    issues.push(format!("missing power profile (b={b}, p={p}, slice={slice})"));
                }
            }
        }
    }

    // Training completeness and consistency.
    let mut training_seen: BTreeSet<(u32, u32, u32)> = BTreeSet::new();
    for rec in training_rows {
        let key = (rec.slice_index, rec.batch_size, rec.seed_index);
        if !training_seen.insert(key) {
            issues.push(format!(
                "duplicate training row (b={}, seed={}, slice={})",
                rec.batch_size, rec.seed_index, rec.slice_index
            ));
        }
        if !batches.contains(&rec.batch_size) {
            issues.push(format!("training row references undeclared batch size {}", rec.batch_size));
        }
        if rec.slice_index >= manifest.bundle.slices {
            issues.push(format!("training row references undeclared slice {}", rec.slice_index));
        }
        if rec.seed_index >= manifest.bundle.seeds {
            issues.push(format!("training row references undeclared seed {}", rec.seed_index));
        }
        if let Err(msg) = rec.check(job.max_epochs) {
            issues.push(msg);
        }
    }
    for slice in 0..manifest.bundle.slices {
        for &b in &job.batch_sizes {
            for seed in 0..manifest.bundle.seeds {
                if !training_seen.contains(&(slice, b, seed)) {
                    issues.push(format!("missing training record (b={b}, seed={seed}, slice={slice})"));
                }
            }
        }
    }

    issues
}

// ---------------------------------------------------------------------------
// Load / write
// ---------------------------------------------------------------------------

/// Resolves a bundle path: either the manifest file itself or the directory
/// holding `bundle.toml`.
pub fn manifest_path(path: &Path) -> PathBuf {
    if path.extension().map(|e| e == "toml").unwrap_or(false) {
        path.to_path_buf()
    } else {
        path.join(MANIFEST_FILE)
    }
}

/// Loads and validates a bundle. Validation reports every missing or
/// duplicate key, not just the first.
pub fn load_bundle(path: &Path) -> Result<TraceBundle, TraceError> {
    let manifest_file = manifest_path(path);
    let dir = manifest_file.parent().map(Path::to_path_buf).unwrap_or_default();
    let text = fs::read_to_string(&manifest_file).map_err(|e| io_err(&manifest_file, e))?;
    let manifest: BundleManifest = toml::from_str(&text)
        .map_err(|e| TraceError::Manifest { path: manifest_file.clone(), msg: e.to_string() })?;

    let power_path = dir.join(&manifest.bundle.power_file);
    let training_path = dir.join(&manifest.bundle.training_file);
    let power_rows = read_power_rows(&power_path)?;
    let training_rows = read_training_rows(&training_path)?;
    TraceBundle::from_parts(manifest, power_rows, training_rows)
}

fn read_power_rows(path: &Path) -> Result<Vec<(u32, PowerProfile)>, TraceError> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_path(path)
        .map_err(|e| match e.kind() {
            csv::ErrorKind::Io(_) => io_err(path, std::io::Error::other(e.to_string())),
            _ => TraceError::Parse { path: path.to_path_buf(), line: 1, msg: e.to_string() },
        })?;
    let mut rows = Vec::new();
    for result in reader.records() {
        let record = result.map_err(|e| TraceError::Parse {
            path: path.to_path_buf(),
            line: e.position().map(|p| p.line()).unwrap_or(0),
            msg: e.to_string(),
        })?;
        let line = record.position().map(|p| p.line()).unwrap_or(0);
        let parse = |msg: String| TraceError::Parse { path: path.to_path_buf(), line, msg };
        if record.len() != 5 && record.len() != 6 {
            return Err(parse(format!("expected 5 or 6 fields, found {}", record.len())));
        }
        let batch_size: u32 =
            record[1].trim().parse().map_err(|_| parse(format!("bad batch size '{}'", &record[1])))?;
        let power_limit: f64 = record[2]
            .trim()
            .parse()
            .map_err(|_| parse(format!("bad power limit '{}'", &record[2])))?;
        let avg_power: f64 =
            record[3].trim().parse().map_err(|_| parse(format!("bad avg power '{}'", &record[3])))?;
        let throughput: f64 = record[4]
            .trim()
            .parse()
            .map_err(|_| parse(format!("bad throughput '{}'", &record[4])))?;
        let slice: u32 = if record.len() == 6 {
            record[5].trim().parse().map_err(|_| parse(format!("bad slice '{}'", &record[5])))?
        } else {
            0
        };
        rows.push((slice, PowerProfile { batch_size, power_limit, avg_power, throughput }));
    }
    Ok(rows)
}

fn read_training_rows(path: &Path) -> Result<Vec<TrainingRecord>, TraceError> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_path(path)
        .map_err(|e| match e.kind() {
            csv::ErrorKind::Io(_) => io_err(path, std::io::Error::other(e.to_string())),
            _ => TraceError::Parse { path: path.to_path_buf(), line: 1, msg: e.to_string() },
        })?;
    let mut rows = Vec::new();
    for result in reader.records() {
        let record = result.map_err(|e| TraceError::Parse {
            path: path.to_path_buf(),
            line: e.position().map(|p| p.line()).unwrap_or(0),
            msg: e.to_string(),
        })?;
        let line = record.position().map(|p| p.line()).unwrap_or(0);
        let parse = |msg: String| TraceError::Parse { path: path.to_path_buf(), line, msg };
        if record.len() != 6 {
            return Err(parse(format!("expected 6 fields, found {}", record.len())));
        }
        let batch_size: u32 =
            record[1].trim().parse().map_err(|_| parse(format!("bad batch size '{}'", &record[1])))?;
        let seed_index: u32 =
            record[2].trim().parse().map_err(|_| parse(format!("bad seed '{}'", &record[2])))?;
        let slice_index: u32 =
            record[3].trim().parse().map_err(|_| parse(format!("bad slice '{}'", &record[3])))?;
        let epochs_field = record[4].trim();
        let epochs_to_target: Option<u32> = if epochs_field.is_empty() {
            None
        } else {
            Some(epochs_field.parse().map_err(|_| parse(format!("bad epochs '{epochs_field}'")))?)
        };
        let converged: bool = record[5]
            .trim()
            .parse()
            .map_err(|_| parse(format!("bad converged flag '{}'", &record[5])))?;
        rows.push(TrainingRecord { batch_size, seed_index, slice_index, epochs_to_target, converged });
    }
    Ok(rows)
}

/// Writes a bundle into `dir` (manifest plus both trace files). The bundle
/// is re-validated first so invalid bundles are never emitted; round-tripping
/// through `load_bundle` reproduces the input.
pub fn write_bundle(bundle: &TraceBundle, dir: &Path) -> Result<(), TraceError> {
    let power_rows: Vec<(u32, PowerProfile)> = bundle
        .power
        .iter()
        .flat_map(|((slice, _), profs)| profs.iter().map(|p| (*slice, *p)))
        .collect();
    let training_rows: Vec<TrainingRecord> =
        bundle.training.values().flatten().copied().collect();
    let issues = validate_parts(&bundle.manifest, &power_rows, &training_rows);
    if !issues.is_empty() {
        return Err(TraceError::Validation { issues });
    }

    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;

    let manifest_text = toml::to_string(&bundle.manifest)
        .map_err(|e| TraceError::Manifest { path: dir.join(MANIFEST_FILE), msg: e.to_string() })?;
    fs::write(dir.join(MANIFEST_FILE), manifest_text)
        .map_err(|e| io_err(&dir.join(MANIFEST_FILE), e))?;

    let job_id = &bundle.manifest.bundle.job_id;
    let mut power_text = String::from(POWER_HEADER);
    power_text.push('\n');
    for (slice, prof) in &power_rows {
        power_text.push_str(&format!(
            "{job_id},{},{},{},{},{slice}\n",
            prof.batch_size, prof.power_limit, prof.avg_power, prof.throughput
        ));
    }
    let power_path = dir.join(&bundle.manifest.bundle.power_file);
    fs::write(&power_path, power_text).map_err(|e| io_err(&power_path, e))?;

    let mut training_text = String::from(TRAINING_HEADER);
    training_text.push('\n');
    for rec in &training_rows {
        let epochs = rec.epochs_to_target.map(|e| e.to_string()).unwrap_or_default();
        training_text.push_str(&format!(
            "{job_id},{},{},{},{},{}\n",
            rec.batch_size, rec.seed_index, rec.slice_index, epochs, rec.converged
        ));
    }
    let training_path = dir.join(&bundle.manifest.bundle.training_file);
    fs::write(&training_path, training_text).map_err(|e| io_err(&training_path, e))?;

    Ok(())
}

/// SHA-256 over the manifest and both trace files, in manifest order.
/// Identifies a bundle in run manifests so results can be matched up.
pub fn bundle_sha256(path: &Path) -> Result<String, TraceError> {
    let manifest_file = manifest_path(path);
    let dir = manifest_file.parent().map(Path::to_path_buf).unwrap_or_default();
    let text = fs::read_to_string(&manifest_file).map_err(|e| io_err(&manifest_file, e))?;
    let manifest: BundleManifest = toml::from_str(&text)
        .map_err(|e| TraceError::Manifest { path: manifest_file.clone(), msg: e.to_string() })?;

    let mut hasher = Sha256::new();
    hasher.update(text.as_bytes());
    for file in [&manifest.bundle.power_file, &manifest.bundle.training_file] {
        let p = dir.join(file);
        let bytes = fs::read(&p).map_err(|e| io_err(&p, e))?;
        hasher.update(&bytes);
    }
    Ok(hasher.finalize().iter().fold(String::new(), |mut acc, b| {
        acc.push_str(&format!("{b:02x}"));
        acc
    }))
}

// ---------------------------------------------------------------------------
// Synthetic generation
// ---------------------------------------------------------------------------

/// A drift change point: from `slice` onward the epochs curve bottoms out at
/// a new batch size.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DriftPoint {
    pub slice: u32,
    pub optimal_batch_size: u32,
}

/// Parameters of the synthetic trace generator.
///
/// Throughput rises with batch size and saturates in the power limit;
/// average power rises linearly from the idle draw with a per-batch-size
/// utilization factor; epochs-to-target is convex in log batch size with its
/// minimum at `optimal_batch_size`, plus truncated multiplicative noise per
/// seed replica. Replicas landing above `max_epochs` become non-convergence
/// markers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorSpec {
    pub job_id: String,
    pub batch_sizes: Vec<u32>,
    pub power_limits: Vec<f64>,
    pub default_batch_size: u32,
    pub max_power: f64,
    pub max_epochs: u32,
    pub seed_replicas: u32,
    pub slices: u32,
    /// Relative standard deviation of per-replica epoch noise.
    pub noise: f64,
    /// Epochs-to-target at the optimal batch size.
    pub epochs_base: f64,
    /// Curvature of the epochs curve in log batch size.
    pub epochs_curvature: f64,
    pub optimal_batch_size: u32,
    #[serde(default)]
    pub drift_points: Vec<DriftPoint>,
    /// Epochs/second asymptote scale.
    pub throughput_scale: f64,
    /// Batch size at which throughput reaches half its batch-limit.
    pub throughput_half_batch: f64,
    /// Power below which throughput vanishes; must sit under min(P).
    pub throughput_knee_w: f64,
    /// Saturation constant of throughput in the power limit.
    pub throughput_tau_w: f64,
    pub idle_power_w: f64,
    pub util_min: f64,
    pub util_max: f64,
    pub util_half_batch: f64,
}

impl GeneratorSpec {
    fn validate(&self) -> Result<(), TraceError> {
        let gen_err = |msg: &str| Err(TraceError::Generator(msg.to_string()));
        if self.batch_sizes.is_empty() || self.batch_sizes.windows(2).any(|w| w[0] >= w[1]) {
            return gen_err("batch sizes must be non-empty and strictly increasing");
        }
        if self.batch_sizes.contains(&0) {
            return gen_err("batch sizes must be positive");
        }
        if self.power_limits.is_empty() || self.power_limits.windows(2).any(|w| w[0] >= w[1]) {
            return gen_err("power limits must be non-empty and strictly increasing");
        }
        if !self.batch_sizes.contains(&self.default_batch_size) {
            return gen_err("default batch size not in batch size set");
        }
        let min_p = self.power_limits[0];
        let max_p = *self.power_limits.last().unwrap();
        if self.max_power < max_p {
            return gen_err("max power below largest power limit");
        }
        if self.max_epochs == 0 || self.seed_replicas == 0 || self.slices == 0 {
            return gen_err("max epochs, seed replicas, and slices must be positive");
        }
        if !(self.noise >= 0.0 && self.noise < 0.34) {
            // 3-sigma truncation must keep the multiplier positive.
            return gen_err("noise must be in [0, 0.34)");
        }
        if !(self.epochs_base >= 1.0 && self.epochs_curvature >= 0.0) {
            return gen_err("epochs curve parameters out of range");
        }
        if self.optimal_batch_size == 0 {
            return gen_err("optimal batch size must be positive");
        }
        let positive = |x: f64| x.is_finite() && x > 0.0;
        if !(positive(self.throughput_scale)
            && positive(self.throughput_half_batch)
            && positive(self.throughput_tau_w))
        {
            return gen_err("non-monotone throughput: scale, half batch, and tau must be positive");
        }
        if self.throughput_knee_w.is_nan() || self.throughput_knee_w >= min_p {
            return gen_err("non-monotone throughput: knee must sit below the smallest power limit");
        }
        if !(self.idle_power_w > 0.0 && self.idle_power_w < min_p) {
            return gen_err("idle power must be positive and below the smallest power limit");
        }
        if !(0.0 < self.util_min && self.util_min < self.util_max && self.util_max < 1.0) {
            return gen_err("utilization bounds must satisfy 0 < min < max < 1");
        }
        if !positive(self.util_half_batch) {
            return gen_err("utilization half batch must be positive");
        }
        let mut prev: Option<u32> = None;
        for d in &self.drift_points {
            let ordered = prev.is_none_or(|p| d.slice > p);
            if !ordered || d.slice == 0 || d.slice >= self.slices {
                return gen_err(
                    "invalid change points: slices must be strictly increasing, nonzero, and in range",
                );
            }
            if d.optimal_batch_size == 0 {
                return gen_err("invalid change points: optimal batch size must be positive");
            }
            prev = Some(d.slice);
        }
        Ok(())
    }

    fn bstar(&self, slice: u32) -> u32 {
        self.drift_points
            .iter()
            .rfind(|d| d.slice <= slice)
            .map(|d| d.optimal_batch_size)
            .unwrap_or(self.optimal_batch_size)
    }

    /// Analytic throughput curve in epochs per second.
    pub fn throughput(&self, batch_size: u32, power_limit: f64) -> f64 {
        let batch_term = batch_size as f64 / (batch_size as f64 + self.throughput_half_batch);
        let power_term = 1.0 - (-(power_limit - self.throughput_knee_w) / self.throughput_tau_w).exp();
        self.throughput_scale * batch_term * power_term
    }

    /// Analytic average power draw in watts.
    pub fn avg_power(&self, batch_size: u32, power_limit: f64) -> f64 {
        let b = batch_size as f64;
        let util = self.util_min + (self.util_max - self.util_min) * b / (b + self.util_half_batch);
        self.idle_power_w + (power_limit - self.idle_power_w) * util
    }

    /// Analytic mean epochs-to-target before noise and rounding.
    pub fn expected_epochs(&self, batch_size: u32, slice: u32) -> f64 {
        let ratio = batch_size as f64 / self.bstar(slice) as f64;
        self.epochs_base * (1.0 + self.epochs_curvature * ratio.ln().powi(2))
    }
}

/// The generator's analytic expectation per (slice, batch size), exported so
/// tests can check oracles against known values instead of invented ones.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    pub expected_epochs: BTreeMap<(u32, u32), f64>,
}

/// Generates a complete bundle plus its analytic ground truth.
pub fn generate_synthetic(
    spec: &GeneratorSpec,
    rng_seed: u64,
) -> Result<(TraceBundle, GroundTruth), TraceError> {
    spec.validate()?;
    let mut rng = SimRng::seed_from_u64(rng_seed);
    let mut power_rows = Vec::new();
    let mut training_rows = Vec::new();
    let mut truth = BTreeMap::new();

    for slice in 0..spec.slices {
        for &b in &spec.batch_sizes {
            for &p in &spec.power_limits {
                power_rows.push((
                    slice,
                    PowerProfile {
                        batch_size: b,
                        power_limit: p,
                        avg_power: spec.avg_power(b, p),
                        throughput: spec.throughput(b, p),
                    },
                ));
            }
            let mean = spec.expected_epochs(b, slice);
            truth.insert((slice, b), mean);
            for seed in 0..spec.seed_replicas {
                let z = truncated_standard_normal(&mut rng);
                let epochs = (mean * (1.0 + spec.noise * z)).round().max(1.0);
                let converged = epochs <= spec.max_epochs as f64;
                training_rows.push(TrainingRecord {
                    batch_size: b,
                    seed_index: seed,
                    slice_index: slice,
                    epochs_to_target: converged.then_some(epochs as u32),
                    converged,
                });
            }
        }
    }

    let manifest = BundleManifest {
        bundle: BundleSection {
            job_id: spec.job_id.clone(),
            power_file: "power.csv".to_string(),
            training_file: "training.csv".to_string(),
            slices: spec.slices,
            seeds: spec.seed_replicas,
        },
        job: JobSection {
            batch_sizes: spec.batch_sizes.clone(),
            power_limits_w: spec.power_limits.clone(),
            default_batch_size: spec.default_batch_size,
            max_power_w: spec.max_power,
            max_epochs: spec.max_epochs,
        },
        units: UnitsSection::default(),
        generator: Some(spec.clone()),
    };
    let bundle = TraceBundle::from_parts(manifest, power_rows, training_rows)?;
    Ok((bundle, GroundTruth { expected_epochs: truth }))
}

/// Standard normal truncated at three sigma, so noisy replicas always stay
/// within the +/- 3 sigma band of the curve mean.
fn truncated_standard_normal<R: Rng>(rng: &mut R) -> f64 {
    loop {
        let z: f64 = rng.sample(StandardNormal);
        if z.abs() <= 3.0 {
            return z;
        }
    }
}

/// Generates a drift bundle: like [`generate_synthetic`] but the epochs
/// curve's optimal batch size shifts at each change point.
pub fn drift_slices(
    base: &GeneratorSpec,
    change_points: &[DriftPoint],
    rng_seed: u64,
) -> Result<(TraceBundle, GroundTruth), TraceError> {
    let mut spec = base.clone();
    spec.drift_points = change_points.to_vec();
    generate_synthetic(&spec, rng_seed)
}

/// Writes the analytic expectations next to a bundle.
pub fn write_ground_truth(truth: &GroundTruth, dir: &Path) -> Result<(), TraceError> {
    let mut text = String::from("slice,batch_size,expected_epochs\n");
    for ((slice, b), epochs) in &truth.expected_epochs {
        text.push_str(&format!("{slice},{b},{epochs}\n"));
    }
    let path = dir.join(GROUND_TRUTH_FILE);
    fs::write(&path, text).map_err(|e| io_err(&path, e))
}

/// The paper-shaped sample preset: a speech-recognition-sized job whose
/// energy optimum sits at (b=32, p=100 W), whose time optimum sits at
/// (b=48, p=250 W), and whose default (b=96, max power) is off-frontier.
pub fn deepspeech2_like() -> GeneratorSpec {
    GeneratorSpec {
        job_id: "deepspeech2-like".to_string(),
        batch_sizes: vec![16, 24, 32, 48, 64, 96],
        power_limits: vec![100.0, 125.0, 150.0, 200.0, 250.0],
        default_batch_size: 96,
        max_power: 250.0,
        max_epochs: 120,
        seed_replicas: 4,
        slices: 1,
        noise: 0.05,
        epochs_base: 40.0,
        epochs_curvature: 1.15,
        optimal_batch_size: 32,
        drift_points: Vec::new(),
        throughput_scale: 0.02,
        throughput_half_batch: 32.0,
        throughput_knee_w: 40.0,
        throughput_tau_w: 25.0,
        idle_power_w: 70.0,
        util_min: 0.30,
        util_max: 0.85,
        util_half_batch: 48.0,
    }
}

/// Default generation seed for the shipped sample bundle.
pub const SAMPLE_BUNDLE_SEED: u64 = 20;

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::TempDir;

    fn tiny_spec() -> GeneratorSpec {
        GeneratorSpec {
            job_id: "tiny".to_string(),
            batch_sizes: vec![16, 32, 64],
            power_limits: vec![100.0, 150.0, 200.0],
            default_batch_size: 32,
            max_power: 250.0,
            max_epochs: 200,
            seed_replicas: 4,
            slices: 1,
            noise: 0.05,
            epochs_base: 30.0,
            epochs_curvature: 0.8,
            optimal_batch_size: 32,
            drift_points: Vec::new(),
            throughput_scale: 0.02,
            throughput_half_batch: 32.0,
            throughput_knee_w: 40.0,
            throughput_tau_w: 25.0,
            idle_power_w: 70.0,
            util_min: 0.3,
            util_max: 0.85,
            util_half_batch: 48.0,
        }
    }

    #[test]
    fn generated_bundle_is_complete_and_roundtrips() {
        let (bundle, _) = generate_synthetic(&tiny_spec(), 7).unwrap();
        let dir = TempDir::new().unwrap();
        write_bundle(&bundle, dir.path()).unwrap();
        let loaded = load_bundle(dir.path()).unwrap();
        assert_eq!(loaded, bundle);
    }

    #[test]
    fn bundle_hash_is_stable_and_content_sensitive() {
        let (bundle, _) = generate_synthetic(&tiny_spec(), 7).unwrap();
        let dir = TempDir::new().unwrap();
        write_bundle(&bundle, dir.path()).unwrap();
        let h1 = bundle_sha256(dir.path()).unwrap();
        let h2 = bundle_sha256(dir.path()).unwrap();
        assert_eq!(h1, h2);

        let (other, _) = generate_synthetic(&tiny_spec(), 8).unwrap();
        let dir2 = TempDir::new().unwrap();
        write_bundle(&other, dir2.path()).unwrap();
        assert_ne!(h1, bundle_sha256(dir2.path()).unwrap());
    }

    #[test]
    fn corrupted_row_reports_its_line_number() {
        let (bundle, _) = generate_synthetic(&tiny_spec(), 7).unwrap();
        let dir = TempDir::new().unwrap();
        write_bundle(&bundle, dir.path()).unwrap();
        let power_path = dir.path().join("power.csv");
        let mut text = fs::read_to_string(&power_path).unwrap();
        // Corrupt the third data row (line 4 counting the header).
        let lines: Vec<&str> = text.lines().collect();
        let mut corrupted: Vec<String> = lines.iter().map(|l| l.to_string()).collect();
        corrupted[3] = "tiny,not-a-number,100,90,0.01,0".to_string();
        text = corrupted.join("\n");
        text.push('\n');
        fs::write(&power_path, text).unwrap();

        let err = load_bundle(dir.path()).unwrap_err();
        match err {
            TraceError::Parse { line, .. } => assert_eq!(line, 4),
            other => panic!("expected parse error, got {other}"),
        }
    }

    #[test]
    fn missing_grid_point_is_named() {
        let (bundle, _) = generate_synthetic(&tiny_spec(), 7).unwrap();
        let mut power_rows: Vec<(u32, PowerProfile)> = bundle
            .power
            .iter()
            .flat_map(|((s, _), profs)| profs.iter().map(|p| (*s, *p)))
            .collect();
        power_rows.retain(|(_, p)| !(p.batch_size == 64 && p.power_limit == 200.0));
        let training_rows: Vec<TrainingRecord> =
            bundle.training.values().flatten().copied().collect();
        let err =
            TraceBundle::from_parts(bundle.manifest.clone(), power_rows, training_rows).unwrap_err();
        match err {
            TraceError::Validation { issues } => {
                assert!(
                    issues.iter().any(|i| i.contains("missing power profile (b=64, p=200")),
                    "{issues:?}"
                );
            }
            other => panic!("expected validation error, got {other}"),
        }
    }

    #[test]
    fn empty_bundle_refuses_to_write() {
        let (bundle, _) = generate_synthetic(&tiny_spec(), 7).unwrap();
        let empty = TraceBundle {
            manifest: bundle.manifest.clone(),
            power: BTreeMap::new(),
            training: BTreeMap::new(),
        };
        let dir = TempDir::new().unwrap();
        let err = write_bundle(&empty, dir.path()).unwrap_err();
        assert!(matches!(err, TraceError::Validation { .. }));
    }

    #[test]
    fn loader_accepts_legacy_power_rows_without_slice() {
        let mut spec = tiny_spec();
        spec.batch_sizes = vec![32];
        spec.power_limits = vec![150.0];
        spec.default_batch_size = 32;
        spec.seed_replicas = 1;
        let (bundle, _) = generate_synthetic(&spec, 7).unwrap();
        let dir = TempDir::new().unwrap();
        write_bundle(&bundle, dir.path()).unwrap();
        let power_path = dir.path().join("power.csv");
        let avg = bundle.profile_at(0, 32, 150.0).unwrap().avg_power;
        let thr = bundle.profile_at(0, 32, 150.0).unwrap().throughput;
        fs::write(
            &power_path,
            format!("job_id,batch_size,power_limit_w,avg_power_w,throughput_epochs_per_s\ntiny,32,150,{avg},{thr}\n"),
        )
        .unwrap();
        let loaded = load_bundle(dir.path()).unwrap();
        assert_eq!(loaded.profile_at(0, 32, 150.0).unwrap().avg_power, avg);
    }

    #[test]
    fn parses_documented_example_rows() {
        let dir = TempDir::new().unwrap();
        fs::write(
            dir.path().join(MANIFEST_FILE),
            r#"
[bundle]
job_id = "js"
power_file = "power.csv"
training_file = "training.csv"
slices = 1
seeds = 1

[job]
batch_sizes = [32]
power_limits_w = [150.0]
default_batch_size = 32
max_power_w = 250.0
max_epochs = 100
"#,
        )
        .unwrap();
        fs::write(
            dir.path().join("power.csv"),
            "job_id,batch_size,power_limit_w,avg_power_w,throughput_epochs_per_s\njs,32,150,130.0,0.010\n",
        )
        .unwrap();
        fs::write(
            dir.path().join("training.csv"),
            "job_id,batch_size,seed,slice,epochs_to_target,converged\njs,32,0,0,37,true\n",
        )
        .unwrap();

        let bundle = load_bundle(dir.path()).unwrap();
        let prof = bundle.profile_at(0, 32, 150.0).unwrap();
        assert_eq!(prof.avg_power, 130.0);
        assert_eq!(prof.throughput, 0.010);
        let rec = bundle.records(0, 32).unwrap()[0];
        assert_eq!(rec.seed_index, 0);
        assert_eq!(rec.slice_index, 0);
        assert_eq!(rec.epochs_to_target, Some(37));
        assert!(rec.converged);
    }

    #[test]
    fn generator_rejects_non_monotone_throughput() {
        let mut spec = tiny_spec();
        spec.throughput_tau_w = -1.0;
        let err = generate_synthetic(&spec, 7).unwrap_err();
        assert!(matches!(err, TraceError::Generator(msg) if msg.contains("non-monotone")));
    }

    #[test]
    fn generated_throughput_strictly_increases_in_power() {
        let (bundle, _) = generate_synthetic(&tiny_spec(), 7).unwrap();
        for &b in bundle.batch_sizes() {
            let profs = bundle.profiles(0, b).unwrap();
            for w in profs.windows(2) {
                assert!(w[0].throughput < w[1].throughput);
            }
        }
    }

    #[test]
    fn noisy_replicas_stay_within_three_sigma_of_the_mean() {
        let spec = tiny_spec();
        let (bundle, truth) = generate_synthetic(&spec, 11).unwrap();
        for &b in bundle.batch_sizes() {
            let mean = truth.expected_epochs[&(0, b)];
            for rec in bundle.records(0, b).unwrap() {
                if let Some(e) = rec.epochs_to_target {
                    let bound = 3.0 * spec.noise * mean + 0.5;
                    assert!(
                        (f64::from(e) - mean).abs() <= bound,
                        "b={b}: {e} vs mean {mean}"
                    );
                }
            }
        }
    }

    #[test]
    fn zero_change_points_make_identical_slices() {
        let mut spec = tiny_spec();
        spec.slices = 3;
        spec.noise = 0.0;
        let (bundle, _) = drift_slices(&spec, &[], 7).unwrap();
        for slice in 1..3 {
            for &b in bundle.batch_sizes() {
                assert_eq!(
                    bundle.records(slice, b).unwrap().iter().map(|r| r.epochs_to_target).collect::<Vec<_>>(),
                    bundle.records(0, b).unwrap().iter().map(|r| r.epochs_to_target).collect::<Vec<_>>()
                );
            }
        }
    }

    #[test]
    fn drift_bundle_has_all_slices_and_shifting_optimum() {
        let mut spec = tiny_spec();
        spec.slices = 38;
        spec.noise = 0.0;
        let (bundle, truth) =
            drift_slices(&spec, &[DriftPoint { slice: 5, optimal_batch_size: 64 }], 7).unwrap();
        let slices: BTreeSet<u32> = truth.expected_epochs.keys().map(|(s, _)| *s).collect();
        assert_eq!(slices.len(), 38);
        // The cost-optimal batch size shifts at the change point.
        let oracle_batch = |slice: u32| {
            let expected = bundle.expected_epochs(slice);
            let profiles = bundle.all_profiles(slice);
            crate::cost::brute_force_optimum(&expected, &profiles, 0.5, spec.max_power)
                .unwrap()
                .0
                .batch_size
        };
        for slice in [0, 4] {
            assert_eq!(oracle_batch(slice), 32);
        }
        for slice in [5, 20, 37] {
            assert_eq!(oracle_batch(slice), 64);
        }
        let err = drift_slices(
            &spec,
            &[DriftPoint { slice: 50, optimal_batch_size: 64 }],
            7,
        )
        .unwrap_err();
        assert!(matches!(err, TraceError::Generator(msg) if msg.contains("change points")));
    }

    #[test]
    fn expected_epochs_averages_converged_replicas_only() {
        let mut spec = tiny_spec();
        // Push the largest batch size beyond the cap so it never converges.
        spec.max_epochs = 40;
        spec.noise = 0.0;
        let (bundle, _) = generate_synthetic(&spec, 7).unwrap();
        let epochs = bundle.expected_epochs(0);
        assert!(epochs.contains_key(&32));
        assert!(!epochs.contains_key(&64), "b=64 should exceed the 40-epoch cap: {epochs:?}");
    }
}
