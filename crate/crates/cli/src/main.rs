use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use serde_json::Value;

use steingrad::estimators::EstimatorKind;
use steingrad::oracle::{run_suite, EnumerationBudget, Suite};
use steingrad::runner::{self, RunConfig};
use steingrad::stein::OperatorTag;
use steingrad::surrogates::SurrogateMode;
use steingrad::tasks::TaskKind;

const SEED_ENV: &str = "STEINGRAD_SEED";

#[derive(Parser)]
#[command(name = "steingrad", version, about = "Discrete Stein-operator control variates for gradient estimation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train once and write a trace plus a JSON summary.
    Run(ConfigArgs),
    /// Run an exhaustive-enumeration check suite.
    Check {
        suite: Suite,
        #[arg(long, default_value_t = EnumerationBudget::default().max_states)]
        max_states: usize,
        #[arg(long, default_value_t = EnumerationBudget::default().max_tuples)]
        max_tuples: usize,
    },
    /// Train several estimators over paired seeds and tabulate the results.
    Compare {
        #[command(flatten)]
        config: ConfigArgs,
        /// Comma-separated estimator names.
        #[arg(long, value_delimiter = ',', default_value = "rloo,rodeo")]
        estimators: Vec<EstimatorKind>,
        #[arg(long, default_value_t = 5)]
        replicates: usize,
        /// Also write the report as JSON.
        #[arg(long)]
        json_out: Option<PathBuf>,
    },
}

#[derive(Args, Default)]
struct ConfigArgs {
    /// JSON config file; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    task: Option<TaskKind>,
    #[arg(long)]
    estimator: Option<EstimatorKind>,
    #[arg(long)]
    operator: Option<OperatorTag>,
    #[arg(long)]
    surrogate_mode: Option<SurrogateMode>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long)]
    steps: Option<u64>,
    #[arg(long)]
    lr_eta: Option<f64>,
    #[arg(long)]
    lr_gamma: Option<f64>,
    #[arg(long)]
    epsilon: Option<f64>,
    /// Defaults to $STEINGRAD_SEED, then 0.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out_path: Option<String>,
    #[arg(long)]
    variance_probe_every: Option<u64>,
    #[arg(long)]
    variance_probe_samples: Option<usize>,
    #[arg(long)]
    baseline: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Write 0 in the wall_seconds column so traces are byte-reproducible.
    #[arg(long)]
    no_wall_clock: bool,
}

impl ConfigArgs {
    /// Defaults, then the seed environment variable, then the config file,
    /// then flags.
    fn resolve(&self) -> anyhow::Result<RunConfig> {
        let mut base = RunConfig::default();
        if let Ok(raw) = std::env::var(SEED_ENV) {
            base.seed = raw.trim().parse().with_context(|| format!("{SEED_ENV}={raw:?} is not an unsigned integer"))?;
        }
        let mut config = match &self.config {
            Some(path) => {
                let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
                let file: Value = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
                let Value::Object(fields) = file else { bail!("{} must hold a JSON object", path.display()) };
                let mut merged = serde_json::to_value(&base)?;
                merged.as_object_mut().expect("config is an object").extend(fields);
                serde_json::from_value(merged).with_context(|| format!("invalid config in {}", path.display()))?
            }
            None => base,
        };
        macro_rules! apply {
            ($($field:ident),*) => { $(if let Some(v) = self.$field.clone() { config.$field = v; })* };
        }
        apply!(task, estimator, operator, surrogate_mode, k, dim, steps, lr_gamma, epsilon, seed, out_path);
        apply!(variance_probe_every, variance_probe_samples, baseline, batch_size);
        if self.lr_eta.is_some() {
            config.lr_eta = self.lr_eta;
        }
        if self.no_wall_clock {
            config.wall_clock = false;
        }
        config.validate()?;
        Ok(config)
    }
}

fn main() -> ExitCode {
    match dispatch(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn dispatch(cli: Cli) -> anyhow::Result<ExitCode> {
    match cli.command {
        Command::Run(args) => {
            let config = args.resolve()?;
            let summary = runner::run(&config)?;
            println!("{}", serde_json::to_string_pretty(&summary)?);
            if let Some(reason) = summary.aborted {
                eprintln!("run aborted after {} steps: {reason}", summary.steps_completed);
                return Ok(ExitCode::from(3));
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Check { suite, max_states, max_tuples } => {
            let report = run_suite(suite, &EnumerationBudget { max_states, max_tuples });
            print!("{report}");
            Ok(if report.passed() { ExitCode::SUCCESS } else { ExitCode::FAILURE })
        }
        Command::Compare { config, estimators, replicates, json_out } => {
            let base = config.resolve()?;
            let report = runner::compare(&base, &estimators, replicates)?;
            print!("{}", report.to_table());
            if let Some(path) = json_out {
                std::fs::write(&path, serde_json::to_string_pretty(&report)? + "\n")
                    .with_context(|| format!("writing {}", path.display()))?;
            }
            Ok(ExitCode::SUCCESS)
        }
    }
}
