use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};
use vsfm_cli::commands;
use vsfm_cli::config::{DatasetKind, RunConfig};
use vsfm_cli::experiments::Method;

/// Virtual-sensor forecasting: training, inference, relevance analysis and
/// benchmarks.
#[derive(Parser)]
#[command(name = "vsfm", version)]
struct Cli {
    /// TOML run configuration; unset keys take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override one configuration key, e.g. `--set epochs=10`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct CheckpointArg {
    /// Checkpoint to load; defaults to `<out_dir>/model.ckpt`.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic family and write it as CSV.
    GenData {
        #[arg(long, conflicts_with = "synthetic_nonlinear")]
        synthetic_uncorrelated: bool,
        #[arg(long)]
        synthetic_nonlinear: bool,
        /// Number of input signals.
        #[arg(long)]
        m: Option<usize>,
        /// Samples per signal.
        #[arg(long)]
        t: Option<usize>,
        /// Replicated inputs (1-based), e.g. `10,20`.
        #[arg(long, value_delimiter = ',')]
        targets: Option<Vec<usize>>,
        /// Factor pairs for the nonlinear family, e.g. `1:2,3:4`.
        #[arg(long, value_delimiter = ',')]
        pairs: Option<Vec<String>>,
        #[arg(long)]
        freqs: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Teacher-forcing training with early stopping.
    Train,
    /// BPTT fine-tuning of a trained checkpoint.
    FinetuneBptt(CheckpointArg),
    /// Autoregressive forecast of one validation window.
    Forecast {
        #[command(flatten)]
        ckpt: CheckpointArg,
        /// Validation window index.
        #[arg(long, default_value_t = 0)]
        window: usize,
    },
    /// Validation MSE per sensor.
    Eval(CheckpointArg),
    /// Inspect and use learned relevance.
    #[command(subcommand)]
    Relevance(RelevanceCommand),
    /// Cost measurements.
    #[command(subcommand)]
    Bench(BenchCommand),
}

#[derive(Subcommand)]
enum RelevanceCommand {
    /// Write relevance vectors as CSV.
    Export(CheckpointArg),
    /// Threshold relevance into per-sensor input sets.
    Sparsify {
        #[command(flatten)]
        ckpt: CheckpointArg,
        #[arg(long, allow_negative_numbers = true)]
        threshold: f64,
    },
    /// Compare learned input sets with baselines of equal size.
    Compare {
        #[command(flatten)]
        ckpt: CheckpointArg,
        #[arg(long, value_delimiter = ',', default_value = "learned,correlation,random")]
        methods: Vec<Method>,
        /// Inputs kept per sensor.
        #[arg(long)]
        k: usize,
        /// Epochs of adaptation to each method's sets before evaluation.
        #[arg(long, default_value_t = 0)]
        finetune_epochs: usize,
    },
}

#[derive(Subcommand)]
enum BenchCommand {
    /// Threshold sweep for one sensor with slope fits.
    Sweep {
        #[command(flatten)]
        ckpt: CheckpointArg,
        #[arg(long, default_value_t = 0)]
        sensor: usize,
        /// Input counts to retain.
        #[arg(long, value_delimiter = ',', default_value = "0,1,2,3,4,6,8,12,16,24,32,48,64")]
        sizes: Vec<usize>,
        /// Validation windows used for the MSE column.
        #[arg(long, default_value_t = 0)]
        eval_windows: usize,
        #[arg(long)]
        reps: Option<usize>,
    },
    /// Cost of requesting one sensor versus growing sensor subsets.
    Select {
        #[command(flatten)]
        ckpt: CheckpointArg,
        #[arg(long, allow_negative_numbers = true)]
        threshold: f64,
        #[arg(long)]
        reps: Option<usize>,
    },
    /// Slope fits of an existing sweep CSV.
    Slopes {
        #[arg(long)]
        input: PathBuf,
    },
}

fn gen_data_overrides(cmd: &Command) -> Result<Vec<String>> {
    let Command::GenData {
        synthetic_uncorrelated,
        synthetic_nonlinear,
        m,
        t,
        targets,
        pairs,
        freqs,
        seed,
        ..
    } = cmd
    else {
        return Ok(Vec::new());
    };
    let mut out = Vec::new();
    let kind = match (synthetic_uncorrelated, synthetic_nonlinear) {
        (_, true) => Some(DatasetKind::SyntheticNonlinear),
        (true, _) => Some(DatasetKind::SyntheticUncorrelated),
        _ => None,
    };
    if let Some(kind) = kind {
        out.push(format!("dataset={}", serde_json::to_string(&kind)?));
    }
    if let Some(m) = m {
        out.push(format!("inputs={m}"));
    }
    if let Some(t) = t {
        out.push(format!("samples={t}"));
    }
    if let Some(targets) = targets {
        out.push(format!("targets={targets:?}"));
    }
    if let Some(pairs) = pairs {
        let parsed = pairs
            .iter()
            .map(|p| {
                let (a, b) = p
                    .split_once(':')
                    .ok_or_else(|| anyhow::anyhow!("factor pair `{p}` is not of the form a:b"))?;
                Ok(format!("[{}, {}]", a.trim().parse::<usize>()?, b.trim().parse::<usize>()?))
            })
            .collect::<Result<Vec<_>>>()?;
        out.push(format!("factor_pairs=[{}]", parsed.join(", ")));
    }
    if let Some(f) = freqs {
        out.push(format!("frequencies_per_signal={f}"));
    }
    if let Some(s) = seed {
        out.push(format!("seed={s}"));
    }
    Ok(out)
}

fn run(cli: Cli, cfg: RunConfig) -> Result<()> {
    let ck = |a: &CheckpointArg| a.checkpoint.clone();
    let paths = match &cli.command {
        Command::GenData { out, .. } => vec![commands::gen_data(&cfg, out)?],
        Command::Train => commands::train(&cfg)?,
        Command::FinetuneBptt(a) => commands::finetune_bptt(&cfg, ck(a).as_deref())?,
        Command::Forecast { ckpt, window } => commands::forecast(&cfg, ck(ckpt).as_deref(), *window)?,
        Command::Eval(a) => commands::eval(&cfg, ck(a).as_deref())?,
        Command::Relevance(RelevanceCommand::Export(a)) => commands::relevance_export(&cfg, ck(a).as_deref())?,
        Command::Relevance(RelevanceCommand::Sparsify { ckpt, threshold }) => {
            commands::relevance_sparsify(&cfg, ck(ckpt).as_deref(), *threshold)?
        }
        Command::Relevance(RelevanceCommand::Compare {
            ckpt,
            methods,
            k,
            finetune_epochs,
        }) => commands::relevance_compare(&cfg, ck(ckpt).as_deref(), methods, *k, *finetune_epochs)?,
        Command::Bench(BenchCommand::Sweep {
            ckpt,
            sensor,
            sizes,
            eval_windows,
            reps,
        }) => commands::bench_sweep(&cfg, ck(ckpt).as_deref(), *sensor, sizes, *eval_windows, *reps)?,
        Command::Bench(BenchCommand::Select { ckpt, threshold, reps }) => {
            commands::bench_select(&cfg, ck(ckpt).as_deref(), *threshold, *reps)?
        }
        Command::Bench(BenchCommand::Slopes { input }) => vec![commands::bench_slopes(&cfg, input)?.1],
    };
    for p in paths {
        println!("{}", p.display());
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => e.exit(),
    };
    let cfg = gen_data_overrides(&cli.command).and_then(|extra| {
        let mut overrides = cli.overrides.clone();
        overrides.extend(extra);
        RunConfig::resolve(cli.config.as_deref(), &overrides)
    });
    let cfg = match cfg {
        Ok(cfg) => cfg,
        Err(e) => {
            eprintln!("error: {e:#}");
            return ExitCode::from(2);
        }
    };
    match run(cli, cfg) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
