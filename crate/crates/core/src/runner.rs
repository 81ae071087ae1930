//! Run configuration, trace files, summaries and multi-seed comparison.

use std::fmt::Write as _;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{invalid, Error, Result};
use crate::estimators::{build_estimator, EstimatorKind, EstimatorSpec};
use crate::rng::{stream, Stream};
use crate::stein::{OperatorSpec, OperatorTag};
use crate::surrogates::SurrogateMode;
use crate::tasks::{TaskKind, TrainOutcome, Trainer};

pub const VERSION: &str = concat!("v", env!("CARGO_PKG_VERSION"));

pub const TRACE_HEADER: &str =
    "step,objective,grad_trace_variance,variance_stderr,f_eval_count,net_eval_count,wall_seconds";

/// Everything that determines a run. Missing fields in a JSON config take
/// the defaults below.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub task: TaskKind,
    pub estimator: EstimatorKind,
    pub operator: OperatorTag,
    pub surrogate_mode: SurrogateMode,
    pub k: usize,
    /// `d` for the quadratic task, latent dimension for the VAE.
    pub dim: usize,
    pub steps: u64,
    /// Defaults to 1e-2 on the quadratic task and 1e-3 on the VAE.
    pub lr_eta: Option<f64>,
    pub lr_gamma: f64,
    pub epsilon: f64,
    pub seed: u64,
    pub out_path: String,
    /// Probe every this many steps; 0 disables probing.
    pub variance_probe_every: u64,
    pub variance_probe_samples: usize,
    /// REINFORCE baseline.
    pub baseline: f64,
    /// VAE minibatch size, also the number of data points in a VAE probe.
    pub batch_size: usize,
    /// When false the wall_seconds column is written as 0 so that repeated
    /// runs produce byte-identical traces.
    pub wall_clock: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            task: TaskKind::Quadratic,
            estimator: EstimatorKind::Rodeo,
            operator: OperatorTag::Gibbs,
            surrogate_mode: SurrogateMode::LeaveOneOut,
            k: 2,
            dim: 10,
            steps: 1000,
            lr_eta: None,
            lr_gamma: 1e-3,
            epsilon: 0.0,
            seed: 0,
            out_path: "trace.csv".to_string(),
            variance_probe_every: 0,
            variance_probe_samples: 1000,
            baseline: 0.0,
            batch_size: 10,
            wall_clock: true,
        }
    }
}

impl RunConfig {
    pub fn lr_eta(&self) -> f64 {
        self.lr_eta.unwrap_or(match self.task {
            TaskKind::Quadratic => 1e-2,
            TaskKind::ToyVae => 1e-3,
        })
    }

    pub fn estimator_spec(&self) -> EstimatorSpec {
        EstimatorSpec::new(self.estimator)
            .with_operator(OperatorSpec::new(self.operator).with_epsilon(self.epsilon))
            .with_mode(self.surrogate_mode)
            .with_baseline(self.baseline)
    }

    pub fn validate(&self) -> Result<()> {
        let min_k = self.estimator.min_samples();
        if self.k < min_k {
            return invalid(format!("{} requires K ≥ {min_k} (got K = {})", self.estimator.name(), self.k));
        }
        if self.dim == 0 {
            return invalid("dim must be at least 1");
        }
        if self.task == TaskKind::Quadratic && self.dim > crate::tasks::MAX_EXACT_DIM {
            return invalid(format!(
                "quadratic task reports the exact objective and needs dim ≤ {} (got {})",
                crate::tasks::MAX_EXACT_DIM,
                self.dim
            ));
        }
        if self.task == TaskKind::ToyVae && self.batch_size == 0 {
            return invalid("batch_size must be at least 1");
        }
        let lr = self.lr_eta();
        if !(lr > 0.0 && lr.is_finite()) {
            return invalid(format!("lr_eta must be positive and finite (got {lr})"));
        }
        if !(self.lr_gamma >= 0.0 && self.lr_gamma.is_finite()) {
            return invalid(format!("lr_gamma must be non-negative and finite (got {})", self.lr_gamma));
        }
        if !(self.epsilon >= 0.0 && self.epsilon.is_finite()) {
            return invalid(format!("epsilon must be non-negative and finite (got {})", self.epsilon));
        }
        if self.variance_probe_every > 0 && self.variance_probe_samples < 2 {
            return invalid("variance_probe_samples must be at least 2 when probing");
        }
        if !self.baseline.is_finite() {
            return invalid("baseline must be finite");
        }
        build_estimator(&self.estimator_spec()).map(|_| ())
    }

    /// SHA-256 of the compact JSON form with `out_path` blanked, hex encoded.
    pub fn hash(&self) -> String {
        let keyed = RunConfig { out_path: String::new(), ..self.clone() };
        let json = serde_json::to_string(&keyed).expect("config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub step: u64,
    pub objective: f64,
    pub grad_trace_variance: Option<f64>,
    pub variance_stderr: Option<f64>,
    pub f_eval_count: u64,
    pub net_eval_count: u64,
    pub wall_seconds: f64,
}

/// What the grad_trace_variance column measures for a task.
pub fn variance_label(task: TaskKind) -> &'static str {
    match task {
        TaskKind::Quadratic => "eta_gradient",
        TaskKind::ToyVae => "encoder_parameter_gradient",
    }
}

pub fn render_trace(config: &RunConfig, rows: &[TraceRecord]) -> Result<String> {
    let meta =
        format!("# steingrad {VERSION} config_sha256={} variance_of={}\n", config.hash(), variance_label(config.task));
    let mut writer = csv::Writer::from_writer(meta.into_bytes());
    if rows.is_empty() {
        writer.write_record(TRACE_HEADER.split(','))?;
    }
    for r in rows {
        writer.serialize(r)?;
    }
    let bytes = writer.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
}

/// Parses a trace file, skipping the metadata line.
pub fn parse_trace(text: &str) -> Result<Vec<TraceRecord>> {
    let mut reader = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(text.as_bytes());
    if reader.headers()?.iter().collect::<Vec<_>>().join(",") != TRACE_HEADER {
        return invalid("trace file is missing its header");
    }
    Ok(reader.deserialize().collect::<std::result::Result<Vec<TraceRecord>, _>>()?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub version: String,
    pub config_sha256: String,
    pub config: RunConfig,
    /// See [`variance_label`].
    pub variance_of: String,
    pub steps_completed: u64,
    pub final_objective: Option<f64>,
    /// Mean trace variance over the last (up to) 10 probes.
    pub mean_variance_last_10: Option<f64>,
    pub aborted: Option<String>,
}

impl RunSummary {
    pub fn from_outcome(config: &RunConfig, outcome: &TrainOutcome) -> Self {
        let probes: Vec<f64> = outcome.trace.iter().filter_map(|r| r.grad_trace_variance).collect();
        let tail = &probes[probes.len().saturating_sub(10)..];
        RunSummary {
            version: VERSION.to_string(),
            config_sha256: config.hash(),
            config: config.clone(),
            variance_of: variance_label(config.task).to_string(),
            steps_completed: outcome.trace.last().map_or(0, |r| r.step),
            final_objective: outcome.trace.last().map(|r| r.objective),
            mean_variance_last_10: (!tail.is_empty()).then(|| tail.iter().sum::<f64>() / tail.len() as f64),
            aborted: outcome.aborted.as_ref().map(|e| e.to_string()),
        }
    }
}

/// Path of the JSON summary written next to a trace: `trace.csv` becomes
/// `trace.summary.json`.
pub fn summary_path(trace_path: &Path) -> std::path::PathBuf {
    trace_path.with_extension("summary.json")
}

/// Trains, writes the trace and summary, and returns the summary. A
/// numerical abort still writes both files and is reported in
/// [`RunSummary::aborted`].
pub fn run(config: &RunConfig) -> Result<RunSummary> {
    let outcome = Trainer::new(config)?.run();
    let path = Path::new(&config.out_path);
    if let Some(dir) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    let mut file = std::fs::File::create(path)?;
    file.write_all(render_trace(config, &outcome.trace)?.as_bytes())?;
    let summary = RunSummary::from_outcome(config, &outcome);
    std::fs::write(summary_path(path), serde_json::to_string_pretty(&summary)? + "\n")?;
    Ok(summary)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareRow {
    pub estimator: EstimatorKind,
    pub replicates: usize,
    pub objective_mean: f64,
    pub objective_stderr: f64,
    pub variance_mean: f64,
    pub variance_stderr: f64,
    pub log10_variance_mean: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareReport {
    pub seeds: Vec<u64>,
    pub rows: Vec<CompareRow>,
}

pub(crate) fn mean_and_stderr(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, f64::NAN);
    }
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// Trains every estimator on seeds `base.seed, base.seed + 1, …` and
/// probes the gradient variance of each final state with
/// `base.variance_probe_samples` draws. Runs with the same seed share their
/// sample stream, so the comparison is paired.
pub fn compare(base: &RunConfig, estimators: &[EstimatorKind], replicates: usize) -> Result<CompareReport> {
    if replicates < 3 {
        return invalid(format!("compare needs R ≥ 3 replicates (got {replicates})"));
    }
    if estimators.is_empty() {
        return invalid("compare needs at least one estimator");
    }
    if base.variance_probe_samples < 2 {
        return invalid("variance_probe_samples must be at least 2");
    }
    let seeds: Vec<u64> = (0..replicates as u64).map(|r| base.seed + r).collect();
    let configs: Vec<RunConfig> = estimators.iter().map(|&e| RunConfig { estimator: e, ..base.clone() }).collect();
    for c in &configs {
        c.validate()?;
    }
    let mut rows = Vec::with_capacity(estimators.len());
    for config in &configs {
        let mut objectives = Vec::with_capacity(replicates);
        let mut variances = Vec::with_capacity(replicates);
        for &seed in &seeds {
            let cfg = RunConfig { seed, ..config.clone() };
            let trainer = Trainer::new(&cfg)?;
            let outcome = trainer.run();
            if let Some(e) = outcome.aborted {
                return Err(Error::Numerical(format!("{} seed {seed} aborted: {e}", cfg.estimator.name())));
            }
            let estimator = build_estimator(&cfg.estimator_spec())?;
            let mut rng = stream(seed, Stream::Custom(1));
            let report = outcome.state.variance_probe(
                estimator.as_ref(),
                cfg.k,
                cfg.batch_size,
                cfg.variance_probe_samples,
                &mut rng,
            )?;
            objectives.push(outcome.trace.last().map_or(f64::NAN, |r| r.objective));
            variances.push(report.trace_variance);
        }
        let (objective_mean, objective_stderr) = mean_and_stderr(&objectives);
        let (variance_mean, variance_stderr) = mean_and_stderr(&variances);
        let logs: Vec<f64> = variances.iter().map(|v| v.log10()).collect();
        rows.push(CompareRow {
            estimator: config.estimator,
            replicates,
            objective_mean,
            objective_stderr,
            variance_mean,
            variance_stderr,
            log10_variance_mean: mean_and_stderr(&logs).0,
        });
    }
    Ok(CompareReport { seeds, rows })
}

impl CompareReport {
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:<16} {:>3} {:>24} {:>24} {:>12}",
            "estimator", "R", "final objective", "trace variance", "log10 var"
        );
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{:<16} {:>3} {:>24} {:>24} {:>12.4}",
                r.estimator.name(),
                r.replicates,
                format!("{:.4} ± {:.4}", r.objective_mean, r.objective_stderr),
                format!("{:.4e} ± {:.2e}", r.variance_mean, r.variance_stderr),
                r.log10_variance_mean
            );
        }
        out
    }
}
