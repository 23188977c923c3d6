use clap::{Args, Parser, Subcommand};
use rado_cli::config::{Baseline, RunConfig};
use rado_cli::{CliError, CliResult};
use rado::evaluation::MetricMode;
use rado::verify::{Scope, SuiteOptions};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "rado", version, about = "Radar odometry with a learned flow / bundle-adjustment operator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Flags shared by every command; each overrides the config file.
#[derive(Args)]
struct Common {
    /// TOML config file (`.json` for JSON).
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    mode: Option<MetricMode>,
    #[arg(long)]
    baseline: Option<Baseline>,
    /// Operator iterations per tracking step.
    #[arg(long)]
    iters: Option<usize>,
    #[arg(long)]
    window: Option<usize>,
}

impl Common {
    fn resolve(&self) -> CliResult<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        macro_rules! set {
            ($flag:expr, $field:expr) => {
                if let Some(v) = $flag.clone() {
                    $field = v;
                }
            };
        }
        set!(self.dataset.clone().map(Some), cfg.dataset);
        set!(self.checkpoint.clone().map(Some), cfg.checkpoint);
        set!(self.out.clone().map(Some), cfg.out);
        set!(self.seed, cfg.seed);
        set!(self.mode, cfg.mode);
        set!(self.baseline, cfg.baseline);
        set!(self.iters, cfg.tracker.track_iters);
        set!(self.window, cfg.tracker.window);
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset.
    Synth {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        frames: Option<usize>,
        #[arg(long)]
        step: Option<f64>,
        #[arg(long)]
        yaw_rate: Option<f64>,
        #[arg(long)]
        sequences: Option<usize>,
    },
    /// Track a dataset and write its trajectory.
    Odometry {
        #[command(flatten)]
        common: Common,
    },
    /// Compare a trajectory with ground truth.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        predicted: PathBuf,
        #[arg(long)]
        truth: PathBuf,
        /// Comma-separated evaluation lengths in meters.
        #[arg(long, value_delimiter = ',')]
        lengths: Option<Vec<f64>>,
    },
    /// Finite-difference checks of the analytic derivatives.
    Gradcheck {
        #[arg(long, default_value = "all")]
        scope: Scope,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Corrupt the analytic derivatives; every check should fail.
        #[arg(long)]
        inject_sign_error: bool,
    },
    /// Train the model on synthetic sequences.
    TrainToy {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        sequences: Option<usize>,
    },
}

fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Synth { common, frames, step, yaw_rate, sequences } => {
            let mut cfg = common.resolve()?;
            cfg.synth.frames = frames.unwrap_or(cfg.synth.frames);
            cfg.synth.step = step.unwrap_or(cfg.synth.step);
            cfg.synth.yaw_rate = yaw_rate.unwrap_or(cfg.synth.yaw_rate);
            cfg.synth.sequences = sequences.unwrap_or(cfg.synth.sequences);
            for d in rado_cli::cmd_synth(&cfg)? {
                println!("{}", d.display());
            }
        }
        Command::Odometry { common } => {
            let cfg = common.resolve()?;
            let out = rado_cli::cmd_odometry(&cfg)?;
            println!("{} poses written", out.poses.len());
        }
        Command::Eval { common, predicted, truth, lengths } => {
            let mut cfg = common.resolve()?;
            if lengths.is_some() {
                cfg.lengths = lengths;
            }
            let r = rado_cli::cmd_eval(&cfg, &predicted, &truth)?;
            println!("{}\npose_loss {}", r.report, r.pose_loss);
        }
        Command::Gradcheck { scope, seed, inject_sign_error } => {
            let checks = rado_cli::cmd_gradcheck(scope, &SuiteOptions { seed, inject_sign_error })?;
            for c in &checks {
                println!("{}", rado_cli::format_check(c));
            }
            let failed = checks.iter().filter(|c| !c.passed).count();
            if failed > 0 {
                return Err(CliError::Numerical(format!("{failed} of {} checks failed", checks.len())));
            }
        }
        Command::TrainToy { common, epochs, lr, sequences } => {
            let mut cfg = common.resolve()?;
            cfg.train.epochs = epochs.unwrap_or(cfg.train.epochs);
            cfg.train.lr = lr.unwrap_or(cfg.train.lr);
            cfg.train.sequences = sequences.unwrap_or(cfg.train.sequences);
            let out = rado_cli::cmd_train_toy(&cfg)?;
            println!("{}", rado::tracker::LOSS_CSV_HEADER);
            for l in &out.logs {
                println!("{}", l.csv_row());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
