use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, ValueEnum};

use delay_control::experiments::{error_record, run, Command, ExperimentManifest};

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Cmd {
    Simulate,
    Value,
    Feedback,
    Verify,
    ApproxNostate,
    ApproxPointwise,
    ApproxCombined,
    Counterexamples,
    Validate,
}

impl From<Cmd> for Command {
    fn from(c: Cmd) -> Self {
        match c {
            Cmd::Simulate => Command::Simulate,
            Cmd::Value => Command::Value,
            Cmd::Feedback => Command::Feedback,
            Cmd::Verify => Command::Verify,
            Cmd::ApproxNostate => Command::ApproxNostate,
            Cmd::ApproxPointwise => Command::ApproxPointwise,
            Cmd::ApproxCombined => Command::ApproxCombined,
            Cmd::Counterexamples => Command::Counterexamples,
            Cmd::Validate => Command::Validate,
        }
    }
}

/// Simulation, value estimation, feedback and approximation runs for the
/// delayed consumption problem. Set DELAYCTL_CACHE_DIR to reuse value
/// estimates across runs.
#[derive(Parser, Debug)]
#[command(name = "delayctl", version)]
struct Cli {
    #[arg(value_enum)]
    command: Cmd,
    /// TOML configuration file; takes precedence over --preset.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Built-in preset: saturating-production, zero-state-utility, strong-blowup.
    #[arg(long)]
    preset: Option<String>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1)]
    workers: usize,
    /// Run horizon (simulate, feedback, verify) or value truncation time (value).
    #[arg(long)]
    horizon: Option<f64>,
    /// Target accuracy of the approximation commands, or the estimator tolerance for `value`.
    #[arg(long)]
    eps: Option<f64>,
    /// Constant initial history value.
    #[arg(long, default_value_t = 1.0)]
    eta0: f64,
    #[arg(long)]
    n_hist: Option<usize>,
    #[arg(long)]
    substeps: Option<usize>,
    /// Knots of the consumption-rate schedule.
    #[arg(long)]
    knots: Option<usize>,
    /// Random states for the property scan of `value`.
    #[arg(long, default_value_t = 0)]
    samples: usize,
    /// Constant consumption for `simulate`.
    #[arg(long, default_value_t = 0.0)]
    consumption: f64,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let manifest = ExperimentManifest {
        command: cli.command.into(),
        config_path: cli.config,
        preset: cli.preset,
        out_dir: cli.out,
        seed: cli.seed,
        workers: cli.workers,
        horizon: cli.horizon,
        eps: cli.eps,
        eta0: cli.eta0,
        n_hist: cli.n_hist,
        substeps: cli.substeps,
        knots: cli.knots,
        samples: cli.samples,
        consumption: cli.consumption,
    };
    match run(&manifest) {
        Ok(outcome) => {
            println!("{}", serde_json::to_string_pretty(&outcome.summary).expect("summary serializes"));
            ExitCode::SUCCESS
        }
        Err(e) => {
            let record = error_record(&e);
            let text = serde_json::to_string_pretty(&record).expect("record serializes");
            if std::fs::create_dir_all(&manifest.out_dir).is_ok() {
                let _ = std::fs::write(manifest.out_dir.join("error.json"), format!("{text}\n"));
            }
            eprintln!("{text}");
            ExitCode::from(2)
        }
    }
}
