//! Results file format: every output embeds its run manifest, so a rerun
//! with identical parameters can be verified byte for byte and downstream
//! commands can refuse to compare results from different bundles.
//!
//! The delimited format carries the manifest and summary as `# manifest` /
//! `# summary` comment lines around a plain CSV table; the structured format
//! is one JSON document with the same three parts.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use etsim_core::sim::ExperimentResult;

use crate::CliError;

pub const TOOL: &str = concat!("etsim ", env!("CARGO_PKG_VERSION"));

/// Resolved parameters of one command invocation. Reruns with an equal
/// manifest produce byte-identical outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub command: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trace: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bundle_sha256: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub policy: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eta: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub beta: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub recurrences: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub window: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub schedule: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub drift_map: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub results_a: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub results_b: Option<String>,
    pub out: String,
}

impl RunManifest {
    pub fn new(command: &str, out: &Path) -> Self {
        Self {
            tool: TOOL.to_string(),
            command: command.to_string(),
            trace: None,
            bundle_sha256: None,
            policy: None,
            eta: None,
            beta: None,
            recurrences: None,
            window: None,
            seed: None,
            schedule: None,
            drift_map: None,
            results_a: None,
            results_b: None,
            out: out.display().to_string(),
        }
    }

    /// The manifest as `# manifest key=value` comment lines, in a fixed
    /// field order.
    pub fn comment_lines(&self) -> String {
        let mut out = String::new();
        let mut push = |key: &str, value: Option<String>| {
            if let Some(v) = value {
                let _ = writeln!(out, "# manifest {key}={v}");
            }
        };
        push("tool", Some(self.tool.clone()));
        push("command", Some(self.command.clone()));
        push("trace", self.trace.clone());
        push("bundle_sha256", self.bundle_sha256.clone());
        push("policy", self.policy.clone());
        push("eta", self.eta.map(|v| v.to_string()));
        push("beta", self.beta.map(|v| v.to_string()));
        push("recurrences", self.recurrences.map(|v| v.to_string()));
        push("window", self.window.clone());
        push("seed", self.seed.map(|v| v.to_string()));
        push("schedule", self.schedule.clone());
        push("drift_map", self.drift_map.clone());
        push("results_a", self.results_a.clone());
        push("results_b", self.results_b.clone());
        push("out", Some(self.out.clone()));
        out
    }
}

/// Summary block of a simulation run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub recurrences: u32,
    /// Most frequent configuration over the last five recurrences.
    pub converged_batch_size: u32,
    pub converged_power_limit_w: f64,
    pub total_cost_j: f64,
    pub total_regret_j: f64,
    pub mean_last5_cost_j: f64,
    /// Expected per-recurrence cost of always running the default
    /// configuration, averaged over the slices this run visited.
    pub default_mean_cost_j: f64,
    /// 1 - mean_last5_cost / default_mean_cost.
    pub savings_vs_default: f64,
}

impl RunSummary {
    pub fn comment_lines(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "# summary recurrences={}", self.recurrences);
        let _ = writeln!(out, "# summary converged_batch_size={}", self.converged_batch_size);
        let _ = writeln!(out, "# summary converged_power_limit_w={}", self.converged_power_limit_w);
        let _ = writeln!(out, "# summary total_cost_j={}", self.total_cost_j);
        let _ = writeln!(out, "# summary total_regret_j={}", self.total_regret_j);
        let _ = writeln!(out, "# summary mean_last5_cost_j={}", self.mean_last5_cost_j);
        let _ = writeln!(out, "# summary default_mean_cost_j={}", self.default_mean_cost_j);
        let _ = writeln!(out, "# summary savings_vs_default={}", self.savings_vs_default);
        out
    }
}

/// Full structured output of `simulate`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationOutput {
    pub manifest: RunManifest,
    pub result: ExperimentResult,
    pub summary: RunSummary,
}

const RESULT_HEADER: &str = "recurrence,slice,phase,batch_size,power_limit_w,epochs,\
                             energy_j,time_s,cost_j,converged,early_stopped,profiled,\
                             threshold_j,regret_j,cum_regret_j";

pub fn simulation_to_csv(output: &SimulationOutput) -> String {
    let mut text = output.manifest.comment_lines();
    text.push_str(RESULT_HEADER);
    text.push('\n');
    for rec in &output.result.records {
        let s = &rec.sample;
        let threshold = rec.threshold.map(|t| t.to_string()).unwrap_or_default();
        let _ = writeln!(
            text,
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            rec.recurrence,
            rec.slice,
            rec.phase,
            s.config.batch_size,
            s.config.power_limit,
            s.epochs_run,
            s.energy,
            s.time,
            s.cost,
            s.converged,
            s.early_stopped,
            s.profiled,
            threshold,
            rec.regret,
            rec.cumulative_regret,
        );
    }
    text.push_str(&output.summary.comment_lines());
    for arm in &output.result.final_arms {
        let observations =
            arm.observations.iter().map(f64::to_string).collect::<Vec<_>>().join("|");
        let mean = arm.posterior_mean.map(|m| m.to_string()).unwrap_or_default();
        let variance = arm.posterior_variance.map(|v| v.to_string()).unwrap_or_default();
        let _ = writeln!(
            text,
            "# arm batch_size={} posterior_mean={mean} posterior_variance={variance} observations={observations}",
            arm.batch_size,
        );
    }
    text
}

pub fn simulation_to_json(output: &SimulationOutput) -> String {
    let mut text = serde_json::to_string_pretty(output).expect("serializable output");
    text.push('\n');
    text
}

/// The slice of a results file that `regret` needs: its manifest fields and
/// the cumulative-regret series in recurrence order.
#[derive(Debug, Clone, PartialEq)]
pub struct LoadedResults {
    pub manifest: RunManifest,
    pub cumulative_regret: Vec<f64>,
}

/// Reads either output format back, sniffing JSON by its leading brace.
pub fn load_results(path: &Path) -> Result<LoadedResults, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    if text.trim_start().starts_with('{') {
        let output: SimulationOutput = serde_json::from_str(&text)
            .map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))?;
        let series = output.result.cumulative_regret_series();
        return Ok(LoadedResults { manifest: output.manifest, cumulative_regret: series });
    }

    let mut meta: BTreeMap<String, String> = BTreeMap::new();
    let mut header: Option<Vec<String>> = None;
    let mut series: Vec<(u32, f64)> = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let lineno = i + 1;
        if let Some(rest) = line.strip_prefix("# manifest ") {
            if let Some((k, v)) = rest.split_once('=') {
                meta.insert(k.to_string(), v.to_string());
            }
            continue;
        }
        if line.starts_with('#') || line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        match &header {
            None => header = Some(fields.iter().map(|f| f.to_string()).collect()),
            Some(cols) => {
                let idx = |name: &str| {
                    cols.iter().position(|c| c == name).ok_or_else(|| {
                        CliError::Validation(format!("{}: missing column {name}", path.display()))
                    })
                };
                let rec_i = idx("recurrence")?;
                let cum_i = idx("cum_regret_j")?;
                let parse_err = |what: &str| {
                    CliError::Validation(format!("{}:{lineno}: bad {what}", path.display()))
                };
                let rec: u32 = fields
                    .get(rec_i)
                    .and_then(|f| f.parse().ok())
                    .ok_or_else(|| parse_err("recurrence"))?;
                let cum: f64 = fields
                    .get(cum_i)
                    .and_then(|f| f.parse().ok())
                    .ok_or_else(|| parse_err("cum_regret_j"))?;
                series.push((rec, cum));
            }
        }
    }
    series.sort_by_key(|(r, _)| *r);

    let manifest = RunManifest {
        tool: meta.get("tool").cloned().unwrap_or_default(),
        command: meta.get("command").cloned().unwrap_or_default(),
        trace: meta.get("trace").cloned(),
        bundle_sha256: meta.get("bundle_sha256").cloned(),
        policy: meta.get("policy").cloned(),
        eta: meta.get("eta").and_then(|v| v.parse().ok()),
        beta: meta.get("beta").and_then(|v| v.parse().ok()),
        recurrences: meta.get("recurrences").and_then(|v| v.parse().ok()),
        window: meta.get("window").cloned(),
        seed: meta.get("seed").and_then(|v| v.parse().ok()),
        schedule: meta.get("schedule").cloned(),
        drift_map: meta.get("drift_map").cloned(),
        results_a: meta.get("results_a").cloned(),
        results_b: meta.get("results_b").cloned(),
        out: meta.get("out").cloned().unwrap_or_default(),
    };
    Ok(LoadedResults { manifest, cumulative_regret: series.into_iter().map(|(_, c)| c).collect() })
}
