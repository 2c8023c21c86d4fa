//! The four subcommands: gen, simulate, sweep, regret.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use etsim_core::cost::{self, pareto_front, tradeoff_points};
use etsim_core::domain::{JobSpec, Window};
use etsim_core::sim::{self, ArrivalSchedule, ExperimentResult, Policy, SliceMap};
use etsim_core::traceio::{self, DriftPoint, GeneratorSpec, TraceBundle};

use crate::args::{GenArgs, OutputFormat, RegretArgs, SimulateArgs, SweepArgs};
use crate::results::{
    simulation_to_csv, simulation_to_json, LoadedResults, RunManifest, RunSummary,
    SimulationOutput,
};
use crate::CliError;

/// Default output directory: `ETSIM_OUT_DIR` or the working directory.
fn out_dir() -> PathBuf {
    std::env::var_os("ETSIM_OUT_DIR").map(PathBuf::from).unwrap_or_else(|| PathBuf::from("."))
}

fn write_output(path: &Path, contents: &str) -> Result<(), CliError> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)
                .map_err(|e| CliError::Io(format!("{}: {e}", parent.display())))?;
        }
    }
    fs::write(path, contents).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}

// ---------------------------------------------------------------------------
// gen
// ---------------------------------------------------------------------------

fn parse_drift_points(specs: &[String]) -> Result<Vec<DriftPoint>, CliError> {
    specs
        .iter()
        .map(|s| {
            let (slice, bstar) = s
                .split_once(':')
                .ok_or_else(|| CliError::Usage(format!("bad drift point '{s}', want slice:bstar")))?;
            Ok(DriftPoint {
                slice: slice
                    .parse()
                    .map_err(|_| CliError::Usage(format!("bad drift slice '{slice}'")))?,
                optimal_batch_size: bstar
                    .parse()
                    .map_err(|_| CliError::Usage(format!("bad drift batch size '{bstar}'")))?,
            })
        })
        .collect()
}

fn generator_from_args(args: &GenArgs) -> Result<GeneratorSpec, CliError> {
    let mut spec = match args.preset.as_str() {
        "deepspeech2-like" => traceio::deepspeech2_like(),
        other => return Err(CliError::Usage(format!("unknown preset '{other}'"))),
    };
    if let Some(bs) = &args.bs {
        spec.batch_sizes = bs.clone();
        spec.job_id = "custom".to_string();
    }
    if let Some(pl) = &args.pl {
        spec.power_limits = pl.clone();
    }
    if let Some(b0) = args.b0 {
        spec.default_batch_size = b0;
    } else if args.bs.is_some() && !spec.batch_sizes.contains(&spec.default_batch_size) {
        spec.default_batch_size = *spec.batch_sizes.last().unwrap();
    }
    if let Some(p) = args.max_power {
        spec.max_power = p;
    } else if let Some(&top) = spec.power_limits.last() {
        spec.max_power = spec.max_power.max(top);
    }
    if let Some(m) = args.max_epochs {
        spec.max_epochs = m;
    }
    if let Some(s) = args.seeds {
        spec.seed_replicas = s;
    }
    if let Some(s) = args.slices {
        spec.slices = s;
    }
    if let Some(n) = args.noise {
        spec.noise = n;
    }
    if let Some(b) = args.bstar {
        spec.optimal_batch_size = b;
    }
    if let Some(e) = args.epochs_base {
        spec.epochs_base = e;
    }
    if let Some(c) = args.curvature {
        spec.epochs_curvature = c;
    }
    if let Some(drift) = &args.drift {
        spec.drift_points = parse_drift_points(drift)?;
    }
    Ok(spec)
}

pub fn run_gen(args: &GenArgs) -> Result<(), CliError> {
    let spec = generator_from_args(args)?;
    let (bundle, truth) = traceio::generate_synthetic(&spec, args.seed)?;
    let dir = args.out.clone().unwrap_or_else(|| out_dir().join(&spec.job_id));
    traceio::write_bundle(&bundle, &dir)?;
    traceio::write_ground_truth(&truth, &dir)?;
    let manifest_text = fs::read_to_string(dir.join(traceio::MANIFEST_FILE))
        .map_err(|e| CliError::Io(e.to_string()))?;
    print!("{manifest_text}");
    eprintln!("wrote bundle to {}", dir.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// simulate
// ---------------------------------------------------------------------------

fn parse_recurrences(value: &str, bundle: &TraceBundle) -> Result<u32, CliError> {
    if value == "auto" {
        return Ok(bundle.manifest.auto_recurrences());
    }
    value
        .parse::<u32>()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| CliError::Usage(format!("bad --recurrences '{value}', want a count or auto")))
}

fn parse_window(value: &str) -> Result<Window, CliError> {
    if value == "inf" || value == "none" {
        return Ok(Window::Unbounded);
    }
    value
        .parse::<usize>()
        .ok()
        .filter(|&n| n > 0)
        .map(Window::Size)
        .ok_or_else(|| CliError::Usage(format!("bad --window '{value}', want a size or inf")))
}

fn parse_drift_map(value: &str) -> Result<SliceMap, CliError> {
    match value {
        "none" => Ok(SliceMap::Constant(0)),
        "step" => Ok(SliceMap::PerRecurrence),
        other => {
            let mut steps = Vec::new();
            for part in other.split(',') {
                let (rec, slice) = part.split_once(':').ok_or_else(|| {
                    CliError::Usage(format!("bad --drift-map '{other}', want none, step, or r:s[,r:s...]"))
                })?;
                let rec: u32 = rec
                    .parse()
                    .map_err(|_| CliError::Usage(format!("bad drift-map recurrence '{rec}'")))?;
                let slice: u32 = slice
                    .parse()
                    .map_err(|_| CliError::Usage(format!("bad drift-map slice '{slice}'")))?;
                steps.push((rec, slice));
            }
            if steps.windows(2).any(|w| w[0].0 >= w[1].0) {
                return Err(CliError::Usage("drift-map recurrences must be strictly increasing".to_string()));
            }
            Ok(SliceMap::Steps(steps))
        }
    }
}

fn load_schedule(path: &Path) -> Result<ArrivalSchedule, CliError> {
    let text =
        fs::read_to_string(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    let mut submissions = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if i == 0 || line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let mut fields = line.split(',');
        let parse_err =
            || CliError::Usage(format!("{}:{}: bad schedule row '{line}'", path.display(), i + 1));
        let rec: u32 = fields.next().and_then(|f| f.trim().parse().ok()).ok_or_else(parse_err)?;
        let time: f64 = fields.next().and_then(|f| f.trim().parse().ok()).ok_or_else(parse_err)?;
        submissions.push((rec, time));
    }
    Ok(ArrivalSchedule::new(submissions)?)
}

/// Expected per-recurrence cost of pinning the default configuration, for
/// one slice. Falls back to the epoch cap when the default batch size never
/// converges in the trace.
fn default_decision_cost(job: &JobSpec, bundle: &TraceBundle, slice: u32) -> Result<f64, CliError> {
    let prof = bundle.profile_at(slice, job.default_batch_size, job.top_power_limit())?;
    let epochs = bundle
        .expected_epochs(slice)
        .get(&job.default_batch_size)
        .copied()
        .unwrap_or(f64::from(job.max_epochs));
    Ok(cost::job_cost(epochs, cost::epoch_cost(prof, job.eta, job.max_power)))
}

pub fn summarize(
    job: &JobSpec,
    bundle: &TraceBundle,
    result: &ExperimentResult,
) -> Result<RunSummary, CliError> {
    let records = &result.records;
    let tail = &records[records.len().saturating_sub(5)..];
    // Most frequent configuration in the tail; ties go to the latest.
    let mut best = (0usize, tail.len(), None);
    for (i, rec) in tail.iter().enumerate() {
        let count = tail.iter().filter(|r| r.sample.config == rec.sample.config).count();
        if count > best.0 || (count == best.0 && i >= best.1) {
            best = (count, i, Some(rec.sample.config));
        }
    }
    let converged = best.2.ok_or_else(|| CliError::Validation("empty result".to_string()))?;

    let mean_last5 = tail.iter().map(|r| r.sample.cost).sum::<f64>() / tail.len() as f64;
    let mut default_mean = 0.0;
    for rec in records {
        default_mean += default_decision_cost(job, bundle, rec.slice)?;
    }
    default_mean /= records.len() as f64;

    Ok(RunSummary {
        recurrences: records.len() as u32,
        converged_batch_size: converged.batch_size,
        converged_power_limit_w: converged.power_limit,
        total_cost_j: result.total_cost(),
        total_regret_j: result.final_cumulative_regret(),
        mean_last5_cost_j: mean_last5,
        default_mean_cost_j: default_mean,
        savings_vs_default: 1.0 - mean_last5 / default_mean,
    })
}

/// Everything `simulate` resolves before running; exposed so tests can run
/// simulations in-process and inspect the pieces.
pub struct ResolvedSimulation {
    pub job: JobSpec,
    pub bundle: TraceBundle,
    pub policy: Policy,
    pub schedule: Option<ArrivalSchedule>,
    pub slice_map: SliceMap,
    pub manifest: RunManifest,
    pub out: PathBuf,
    pub format: OutputFormat,
}

pub fn resolve_simulation(args: &SimulateArgs) -> Result<ResolvedSimulation, CliError> {
    let policy = Policy::parse(&args.policy)
        .ok_or_else(|| CliError::Usage(format!("bad --policy '{}', want zeus, grid, or default", args.policy)))?;
    let bundle = traceio::load_bundle(&args.trace)?;
    let hash = traceio::bundle_sha256(&args.trace)?;
    let recurrences = parse_recurrences(&args.recurrences, &bundle)?;
    let window = parse_window(&args.window)?;
    let slice_map = parse_drift_map(&args.drift_map)?;
    let schedule = args.schedule.as_deref().map(load_schedule).transpose()?;

    let job = bundle.manifest.job_spec(args.eta, args.beta, recurrences, window, args.seed);
    let issues = job.validate();
    if !issues.is_empty() {
        return Err(CliError::Usage(format!("invalid job parameters: {}", issues.join("; "))));
    }

    let out = args.out.clone().unwrap_or_else(|| {
        out_dir().join(format!(
            "results-{}-seed{}.{}",
            policy.name(),
            args.seed,
            args.format.extension()
        ))
    });

    let mut manifest = RunManifest::new("simulate", &out);
    manifest.trace = Some(args.trace.display().to_string());
    manifest.bundle_sha256 = Some(hash);
    manifest.policy = Some(policy.name().to_string());
    manifest.eta = Some(args.eta);
    manifest.beta = Some(args.beta);
    manifest.recurrences = Some(recurrences);
    manifest.window = Some(window.to_string());
    manifest.seed = Some(args.seed);
    manifest.schedule =
        Some(args.schedule.as_ref().map_or("sequential".to_string(), |p| p.display().to_string()));
    manifest.drift_map = Some(args.drift_map.clone());

    Ok(ResolvedSimulation {
        job,
        bundle,
        policy,
        schedule,
        slice_map,
        manifest,
        out,
        format: args.format,
    })
}

pub fn run_simulate(args: &SimulateArgs) -> Result<(), CliError> {
    let resolved = resolve_simulation(args)?;
    let result = sim::run_experiment(
        &resolved.job,
        &resolved.bundle,
        resolved.policy,
        resolved.schedule.as_ref(),
        &resolved.slice_map,
    )?;
    let summary = summarize(&resolved.job, &resolved.bundle, &result)?;
    let output = SimulationOutput { manifest: resolved.manifest, result, summary };
    let text = match resolved.format {
        OutputFormat::Csv => simulation_to_csv(&output),
        OutputFormat::Json => simulation_to_json(&output),
    };
    write_output(&resolved.out, &text)?;
    println!(
        "wrote {} ({} recurrences, converged on b={} p={} W, savings vs default {:.1}%)",
        resolved.out.display(),
        output.summary.recurrences,
        output.summary.converged_batch_size,
        output.summary.converged_power_limit_w,
        100.0 * output.summary.savings_vs_default,
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// sweep
// ---------------------------------------------------------------------------

const SWEEP_HEADER: &str =
    "kind,eta,beta,batch_size,power_limit_w,tta_s,eta_j,on_front,total_cost_j,cost_ratio_vs_beta2";

#[derive(Debug, serde::Serialize)]
struct SweepRow {
    kind: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    eta: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    beta: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    batch_size: Option<u32>,
    #[serde(skip_serializing_if = "Option::is_none")]
    power_limit_w: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    tta_s: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    eta_j: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    on_front: Option<bool>,
    #[serde(skip_serializing_if = "Option::is_none")]
    total_cost_j: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    cost_ratio_vs_beta2: Option<f64>,
}

impl SweepRow {
    fn csv(&self) -> String {
        fn cell<T: std::fmt::Display>(v: &Option<T>) -> String {
            v.as_ref().map(|x| x.to_string()).unwrap_or_default()
        }
        format!(
            "{},{},{},{},{},{},{},{},{},{}",
            self.kind,
            cell(&self.eta),
            cell(&self.beta),
            cell(&self.batch_size),
            cell(&self.power_limit_w),
            cell(&self.tta_s),
            cell(&self.eta_j),
            cell(&self.on_front),
            cell(&self.total_cost_j),
            cell(&self.cost_ratio_vs_beta2),
        )
    }
}

pub fn run_sweep(args: &SweepArgs) -> Result<(), CliError> {
    let bundle = traceio::load_bundle(&args.trace)?;
    let hash = traceio::bundle_sha256(&args.trace)?;
    let etas: Vec<f64> =
        args.eta_grid.clone().unwrap_or_else(|| (0..=10).map(|i| f64::from(i) / 10.0).collect());
    if etas.iter().any(|e| !(0.0..=1.0).contains(e)) {
        return Err(CliError::Usage("eta grid values must lie in [0, 1]".to_string()));
    }

    let max_power = bundle.manifest.job.max_power_w;
    let expected = bundle.expected_epochs(0);
    let profiles = bundle.all_profiles(0);
    let points = tradeoff_points(&expected, &profiles);
    let front = pareto_front(&points);
    let sweep = cost::eta_sweep(&expected, &profiles, &etas, max_power)
        .map_err(|e| CliError::Validation(e.to_string()))?;

    let mut rows: Vec<SweepRow> = Vec::new();
    for (eta, config, tta, eta_energy) in &sweep {
        rows.push(SweepRow {
            kind: "sweep".to_string(),
            eta: Some(*eta),
            beta: None,
            batch_size: Some(config.batch_size),
            power_limit_w: Some(config.power_limit),
            tta_s: Some(*tta),
            eta_j: Some(*eta_energy),
            on_front: Some(front.iter().any(|p| p.config == *config)),
            total_cost_j: None,
            cost_ratio_vs_beta2: None,
        });
    }
    for point in &front {
        rows.push(SweepRow {
            kind: "front".to_string(),
            eta: None,
            beta: None,
            batch_size: Some(point.config.batch_size),
            power_limit_w: Some(point.config.power_limit),
            tta_s: Some(point.tta),
            eta_j: Some(point.eta_energy),
            on_front: Some(true),
            total_cost_j: None,
            cost_ratio_vs_beta2: None,
        });
    }

    if let Some(betas) = &args.beta_grid {
        let recurrences = parse_recurrences(&args.recurrences, &bundle)?;
        let run_total = |beta: f64| -> Result<f64, CliError> {
            let job =
                bundle.manifest.job_spec(args.eta, beta, recurrences, Window::Unbounded, args.seed);
            let issues = job.validate();
            if !issues.is_empty() {
                return Err(CliError::Usage(format!("invalid beta replay: {}", issues.join("; "))));
            }
            let result =
                sim::run_experiment(&job, &bundle, Policy::Zeus, None, &SliceMap::Constant(0))?;
            Ok(result.total_cost())
        };
        let reference = run_total(2.0)?;
        for &beta in betas {
            let total = if beta == 2.0 { reference } else { run_total(beta)? };
            rows.push(SweepRow {
                kind: "beta".to_string(),
                eta: Some(args.eta),
                beta: Some(beta),
                batch_size: None,
                power_limit_w: None,
                tta_s: None,
                eta_j: None,
                on_front: None,
                total_cost_j: Some(total),
                cost_ratio_vs_beta2: Some(total / reference),
            });
        }
    }

    let out = args
        .out
        .clone()
        .unwrap_or_else(|| out_dir().join(format!("sweep.{}", args.format.extension())));
    let mut manifest = RunManifest::new("sweep", &out);
    manifest.trace = Some(args.trace.display().to_string());
    manifest.bundle_sha256 = Some(hash);
    manifest.eta = Some(args.eta);
    manifest.seed = Some(args.seed);

    let text = match args.format {
        OutputFormat::Csv => {
            let mut text = manifest.comment_lines();
            if let Some((lo, hi)) = bundle.avg_power_band(0) {
                let _ = writeln!(text, "# summary avg_power_min_w={lo}");
                let _ = writeln!(text, "# summary avg_power_max_w={hi}");
            }
            text.push_str(SWEEP_HEADER);
            text.push('\n');
            for row in &rows {
                text.push_str(&row.csv());
                text.push('\n');
            }
            text
        }
        OutputFormat::Json => {
            #[derive(serde::Serialize)]
            struct SweepOutput<'a> {
                manifest: &'a RunManifest,
                rows: &'a [SweepRow],
            }
            let mut text =
                serde_json::to_string_pretty(&SweepOutput { manifest: &manifest, rows: &rows })
                    .expect("serializable sweep");
            text.push('\n');
            text
        }
    };
    write_output(&out, &text)?;
    println!("wrote {} ({} rows)", out.display(), rows.len());
    Ok(())
}

// ---------------------------------------------------------------------------
// regret
// ---------------------------------------------------------------------------

pub fn run_regret(args: &RegretArgs) -> Result<(), CliError> {
    if args.results.len() != 2 {
        return Err(CliError::Usage("pass --results exactly twice (A then B)".to_string()));
    }
    let a = crate::results::load_results(&args.results[0])?;
    let b = crate::results::load_results(&args.results[1])?;
    check_comparable(&a, &b)?;

    let n = a.cumulative_regret.len().min(b.cumulative_regret.len());
    let final_a = a.cumulative_regret.last().copied().unwrap_or(0.0);
    let final_b = b.cumulative_regret.last().copied().unwrap_or(0.0);
    let ratio = |num: f64, den: f64| {
        if num == den {
            1.0
        } else if den == 0.0 {
            f64::INFINITY
        } else {
            num / den
        }
    };

    let out = args
        .out
        .clone()
        .unwrap_or_else(|| out_dir().join(format!("regret.{}", args.format.extension())));
    let mut manifest = RunManifest::new("regret", &out);
    manifest.bundle_sha256 = a.manifest.bundle_sha256.clone();
    manifest.eta = a.manifest.eta;
    manifest.results_a = Some(args.results[0].display().to_string());
    manifest.results_b = Some(args.results[1].display().to_string());

    let text = match args.format {
        OutputFormat::Csv => {
            let mut text = manifest.comment_lines();
            text.push_str("recurrence,cum_regret_a_j,cum_regret_b_j,diff_b_minus_a_j\n");
            for i in 0..n {
                let (ra, rb) = (a.cumulative_regret[i], b.cumulative_regret[i]);
                let _ = writeln!(text, "{i},{ra},{rb},{}", rb - ra);
            }
            let _ = writeln!(text, "# summary final_a_j={final_a}");
            let _ = writeln!(text, "# summary final_b_j={final_b}");
            let _ = writeln!(text, "# summary ratio_a_over_b={}", ratio(final_a, final_b));
            let _ = writeln!(text, "# summary ratio_b_over_a={}", ratio(final_b, final_a));
            text
        }
        OutputFormat::Json => {
            #[derive(serde::Serialize)]
            struct RegretOutput<'a> {
                manifest: &'a RunManifest,
                cum_regret_a_j: &'a [f64],
                cum_regret_b_j: &'a [f64],
                final_a_j: f64,
                final_b_j: f64,
                ratio_a_over_b: f64,
                ratio_b_over_a: f64,
            }
            let mut text = serde_json::to_string_pretty(&RegretOutput {
                manifest: &manifest,
                cum_regret_a_j: &a.cumulative_regret[..n],
                cum_regret_b_j: &b.cumulative_regret[..n],
                final_a_j: final_a,
                final_b_j: final_b,
                ratio_a_over_b: ratio(final_a, final_b),
                ratio_b_over_a: ratio(final_b, final_a),
            })
            .expect("serializable regret");
            text.push('\n');
            text
        }
    };
    write_output(&out, &text)?;
    println!(
        "wrote {} (final regret A={final_a}, B={final_b}, B/A={})",
        out.display(),
        ratio(final_b, final_a)
    );
    Ok(())
}

fn check_comparable(a: &LoadedResults, b: &LoadedResults) -> Result<(), CliError> {
    match (&a.manifest.bundle_sha256, &b.manifest.bundle_sha256) {
        (Some(ha), Some(hb)) if ha == hb => {}
        _ => {
            return Err(CliError::Usage(
                "results were produced from different bundles (bundle_sha256 mismatch)".to_string(),
            ))
        }
    }
    match (a.manifest.eta, b.manifest.eta) {
        (Some(ea), Some(eb)) if ea == eb => Ok(()),
        _ => Err(CliError::Usage("results use different eta values".to_string())),
    }
}
