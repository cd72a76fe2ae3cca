use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use msca_cli::{
    cmd_bench, cmd_compare, cmd_eval_components, cmd_roundtrip, cmd_search, cmd_train, CliError,
    CompareMode, RunConfig, Strategy, OUT_DIR_ENV,
};
use spectral_attention::harness::experiments::Criterion;

/// Multi-spectral channel attention: DCT checks and desk-scale experiments.
///
/// Settings come from an optional JSON config file; flags override it. The
/// resolved config is written to `config.json` in the output directory.
#[derive(Parser)]
#[command(name = "msca", version)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON config file; missing fields take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory [default: $MSCA_OUT_DIR/<subcommand>, or runs/<subcommand>].
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Root for default output directories.
    #[arg(long, global = true, env = OUT_DIR_ENV, default_value = "runs", hide_default_value = true)]
    out_root: PathBuf,
    /// Model-initialization and shuffling seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
}

#[derive(Args, Default)]
struct TrainingFlags {
    /// Training epochs.
    #[arg(long)]
    epochs: Option<usize>,
    /// SGD learning rate.
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Square frequency-grid side.
    #[arg(long)]
    grid: Option<usize>,
    /// Samples per class of the synthetic data.
    #[arg(long)]
    samples_per_class: Option<usize>,
    #[arg(long)]
    noise_sigma: Option<f64>,
    /// Dataset generation seed.
    #[arg(long)]
    data_seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// DCT roundtrip, DC-equals-sum and separable-vs-naive checks.
    Roundtrip {
        #[arg(long)]
        height: Option<usize>,
        #[arg(long)]
        width: Option<usize>,
        #[arg(long)]
        trials: Option<usize>,
        /// Relative tolerance.
        #[arg(long)]
        tolerance: Option<f64>,
    },
    /// Score every grid component with single-component attention.
    EvalComponents {
        #[command(flatten)]
        training: TrainingFlags,
        /// Fine-tune epochs per component.
        #[arg(long)]
        budget: Option<usize>,
    },
    /// Train one model.
    Train {
        #[command(flatten)]
        training: TrainingFlags,
        #[arg(long, value_enum)]
        strategy: Option<Strategy>,
        #[command(flatten)]
        selection: SelectionFlags,
        #[arg(long)]
        nas_parts: Option<usize>,
    },
    /// NAS search; writes the derived assignment.
    Search {
        #[command(flatten)]
        training: TrainingFlags,
        #[arg(long)]
        nas_parts: Option<usize>,
    },
    /// Component-count sweep or the FR/LR/LD/FD table over several seeds.
    Compare {
        #[command(flatten)]
        training: TrainingFlags,
        #[arg(long, value_enum)]
        mode: Option<CompareMode>,
        #[command(flatten)]
        selection: SelectionFlags,
        /// Comma-separated component counts for the sweep.
        #[arg(long, value_delimiter = ',')]
        ks: Option<Vec<usize>>,
        /// Comma-separated seeds.
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
        /// Skip the Gap baseline runs.
        #[arg(long)]
        no_baseline: bool,
    },
    /// Time separable vs naive DCT and the attention block.
    Bench {
        #[arg(long)]
        size: Option<usize>,
        #[arg(long)]
        channels: Option<usize>,
        #[arg(long)]
        iterations: Option<usize>,
    },
}

#[derive(Args, Default)]
struct SelectionFlags {
    /// Component selection: lf or ts.
    #[arg(long, value_parser = parse_criterion)]
    criterion: Option<Criterion>,
    /// Number of components.
    #[arg(long)]
    k: Option<usize>,
    /// Component-score CSV for ts.
    #[arg(long)]
    scores: Option<PathBuf>,
}

fn parse_criterion(s: &str) -> Result<Criterion, String> {
    match s.to_ascii_lowercase().as_str() {
        "lf" => Ok(Criterion::Lf),
        "ts" => Ok(Criterion::Ts),
        _ => Err(format!("unknown criterion '{s}', expected lf or ts")),
    }
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

impl TrainingFlags {
    fn apply(self, cfg: &mut RunConfig) {
        set(&mut cfg.hyper.epochs, self.epochs);
        set(&mut cfg.hyper.lr, self.lr);
        set(&mut cfg.hyper.batch_size, self.batch_size);
        set(&mut cfg.grid, self.grid);
        set(&mut cfg.data.samples_per_class, self.samples_per_class);
        set(&mut cfg.data.noise_sigma, self.noise_sigma);
        set(&mut cfg.data.seed, self.data_seed);
    }
}

impl SelectionFlags {
    fn apply(self, cfg: &mut RunConfig) {
        set(&mut cfg.criterion, self.criterion);
        set(&mut cfg.k, self.k);
        if self.scores.is_some() {
            cfg.scores = self.scores;
        }
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    let mut cfg = match &cli.common.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    set(&mut cfg.seed, cli.common.seed);
    cfg.hyper.seed = cfg.seed;
    let name = match &cli.command {
        Command::Roundtrip { .. } => "roundtrip",
        Command::EvalComponents { .. } => "eval-components",
        Command::Train { .. } => "train",
        Command::Search { .. } => "search",
        Command::Compare { .. } => "compare",
        Command::Bench { .. } => "bench",
    };
    let out = cli
        .common
        .out
        .unwrap_or_else(|| cli.common.out_root.join(name));

    match cli.command {
        Command::Roundtrip {
            height,
            width,
            trials,
            tolerance,
        } => {
            set(&mut cfg.roundtrip.height, height);
            set(&mut cfg.roundtrip.width, width);
            set(&mut cfg.roundtrip.trials, trials);
            set(&mut cfg.roundtrip.tolerance, tolerance);
            cmd_roundtrip(&cfg, &out)?;
        }
        Command::EvalComponents { training, budget } => {
            training.apply(&mut cfg);
            set(&mut cfg.budget, budget);
            let report = cmd_eval_components(&cfg, &out)?;
            println!(
                "base {:.4}, gap attention {:.4}",
                report.base_accuracy, report.gap_accuracy
            );
            for s in &report.scores {
                println!("{} {:.4}", s.component, s.score);
            }
        }
        Command::Train {
            training,
            strategy,
            selection,
            nas_parts,
        } => {
            training.apply(&mut cfg);
            selection.apply(&mut cfg);
            set(&mut cfg.strategy, strategy);
            set(&mut cfg.nas_parts, nas_parts);
            let report = cmd_train(&cfg, &out)?;
            println!(
                "{}: final validation accuracy {:.4}",
                report.label, report.record.final_val_accuracy
            );
        }
        Command::Search {
            training,
            nas_parts,
        } => {
            training.apply(&mut cfg);
            set(&mut cfg.nas_parts, nas_parts);
            let report = cmd_search(&cfg, &out)?;
            let comps: Vec<String> = report
                .assignment
                .components()
                .iter()
                .map(|c| c.to_string())
                .collect();
            println!(
                "derived components {}; final validation accuracy {:.4}",
                comps.join(" "),
                report.record.final_val_accuracy
            );
        }
        Command::Compare {
            training,
            mode,
            selection,
            ks,
            seeds,
            no_baseline,
        } => {
            training.apply(&mut cfg);
            selection.apply(&mut cfg);
            set(&mut cfg.compare, mode);
            set(&mut cfg.ks, ks);
            set(&mut cfg.seeds, seeds);
            if no_baseline {
                cfg.baseline = false;
            }
            let report = cmd_compare(&cfg, &out)?;
            if let Some(b) = &report.baseline {
                println!("gap      {:.4} +- {:.4}", b.mean, b.std);
            }
            print!(
                "{}",
                std::fs::read_to_string(out.join("table.csv")).unwrap_or_default()
            );
        }
        Command::Bench {
            size,
            channels,
            iterations,
        } => {
            set(&mut cfg.bench.size, size);
            set(&mut cfg.bench.channels, channels);
            set(&mut cfg.bench.iterations, iterations);
            cmd_bench(&cfg, &out)?;
        }
    }
    eprintln!("artifacts in {}", out.display());
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
