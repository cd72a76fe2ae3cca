//! Experiment runner behind the `msca` binary.
//!
//! Every subcommand takes a fully resolved [`RunConfig`], echoes it to
//! `config.json` in the output directory and writes its results next to it.
//! Nothing time-dependent goes into the CSV/JSON artifacts, so identical
//! configs give byte-identical outputs.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use spectral_attention::attention::{
    apply_attention, attention_flops, attention_forward, AttentionParams, Compression,
    FrequencyAssignment,
};
use spectral_attention::dct::{dct2, dct2_naive, idct2, Normalization};
use spectral_attention::harness::data::{
    band_energy_accuracy, gen_synthetic, Dataset, SyntheticSpec,
};
use spectral_attention::harness::experiments::{
    compare_learnable, evaluate_attention, evaluate_components, mean_std, nas_search,
    pretrain_base, run_seeds, select_components, sweep_k, CompareRow, Criterion, LearnableMode,
    SweepRow,
};
use spectral_attention::harness::model::{AttentionKind, ModelConfig};
use spectral_attention::harness::train::{train, Hyper, RunRecord};
use spectral_attention::selection::{
    assign_lf, read_scores_csv, write_scores_csv, ComponentScore, FrequencyGrid,
};
use spectral_attention::Tensor;

/// Version of the `result.json` layout.
pub const SCHEMA_VERSION: u32 = 1;

/// Environment variable naming the default output root.
pub const OUT_DIR_ENV: &str = "MSCA_OUT_DIR";

#[derive(Debug, Error)]
pub enum CliError {
    #[error("usage error: {0}")]
    Usage(String),
    #[error("check failed: {0}")]
    CheckFailed(String),
    #[error(transparent)]
    Core(#[from] spectral_attention::Error),
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl CliError {
    /// 1 for failed checks and runtime failures, 2 for bad invocations.
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            _ => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, CliError>;

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

/// Attention used by `train`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    None,
    Gap,
    /// Fixed DCT pooling with `k` components chosen by `criterion`.
    Ms,
    Fr,
    Lr,
    Ld,
    Fd,
    /// NAS mixture with `nas_parts` parts.
    Nas,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum CompareMode {
    /// Component-count sweep over `ks`.
    Sweep,
    /// FR/LR/LD/FD table at `k` components.
    Learnable,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RoundtripConfig {
    /// Default 7.
    pub height: usize,
    /// Default 7.
    pub width: usize,
    /// Random inputs per check. Default 100.
    pub trials: usize,
    /// Relative tolerance. Default 1e-9.
    pub tolerance: f64,
}

impl Default for RoundtripConfig {
    fn default() -> Self {
        Self {
            height: 7,
            width: 7,
            trials: 100,
            tolerance: 1e-9,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchConfig {
    /// Map size for the DCT timings. Default 16.
    pub size: usize,
    /// Channels for the attention timings. Default 64.
    pub channels: usize,
    /// Default 200.
    pub iterations: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            size: 16,
            channels: 64,
            iterations: 200,
        }
    }
}

/// Everything a subcommand needs. Every field has a default, so `{}` is a
/// valid config file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Seed for model initialization and batch order. Default 0. Overrides
    /// `hyper.seed`.
    pub seed: u64,
    /// Seeds for multi-seed comparisons. Default 0..5.
    pub seeds: Vec<u64>,
    /// Synthetic dataset; `data.seed` drives generation only.
    pub data: SyntheticSpec,
    /// Held-out fraction of the stratified split. Default 0.2.
    pub val_fraction: f64,
    /// Backbone. `model.attention` is derived from `strategy`.
    pub model: ModelConfig,
    pub hyper: Hyper,
    /// Fine-tune epochs per component in `eval-components`. Default 5.
    pub budget: usize,
    /// Side of the square frequency grid, at most the smallest attention
    /// site. Default 4.
    pub grid: usize,
    /// Default gap.
    pub strategy: Strategy,
    /// Component selection for ms/fr/lr/ld/fd and sweeps. Default lf.
    pub criterion: Criterion,
    /// Components for `train` and the learnable table. Default 2.
    pub k: usize,
    /// Component counts for the sweep, capped at the grid size. Default
    /// 1, 2, 4, 8, 16, 32.
    pub ks: Vec<usize>,
    /// Default sweep.
    pub compare: CompareMode,
    /// Also train the Gap model on every seed when comparing. Default true.
    pub baseline: bool,
    /// Component scores (u,v,score CSV) for the TS criterion. When unset the
    /// scores are measured first, as in `eval-components`.
    pub scores: Option<PathBuf>,
    /// Parts of the NAS mixture. Default 4.
    pub nas_parts: usize,
    pub roundtrip: RoundtripConfig,
    pub bench: BenchConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            seeds: (0..5).collect(),
            data: SyntheticSpec::default(),
            val_fraction: 0.2,
            model: ModelConfig::default(),
            hyper: Hyper::default(),
            budget: 5,
            grid: 4,
            strategy: Strategy::Gap,
            criterion: Criterion::Lf,
            k: 2,
            ks: vec![1, 2, 4, 8, 16, 32],
            compare: CompareMode::Sweep,
            baseline: true,
            scores: None,
            nas_parts: 4,
            roundtrip: RoundtripConfig::default(),
            bench: BenchConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|source| CliError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        serde_json::from_str(&text).map_err(|e| usage(format!("{}: {e}", path.display())))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn grid(&self) -> Result<FrequencyGrid> {
        FrequencyGrid::square(self.grid).map_err(|e| usage(e.to_string()))
    }

    /// Checks everything that can be checked without training.
    pub fn validate(&self) -> Result<()> {
        let u = |e: spectral_attention::Error| usage(e.to_string());
        self.data.validate().map_err(u)?;
        self.hyper.validate().map_err(u)?;
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return Err(usage(format!(
                "val_fraction must be in (0, 1), got {}",
                self.val_fraction
            )));
        }
        if self.model.num_classes != self.data.num_classes {
            return Err(usage(format!(
                "model.num_classes = {} but the data has {} classes",
                self.model.num_classes, self.data.num_classes
            )));
        }
        let input = (self.data.height, self.data.width);
        self.model.site_sizes(input).map_err(u)?;
        let grid = self.grid()?;
        self.model
            .check_grid(input, (grid.height, grid.width))
            .map_err(u)?;
        if self.seeds.is_empty() {
            return Err(usage("seeds must not be empty"));
        }
        if self.k == 0 || self.ks.contains(&0) {
            return Err(usage("component counts must be positive"));
        }
        if self.nas_parts == 0 {
            return Err(usage("nas_parts must be positive"));
        }
        for &c in &self.model.channels {
            for (what, n) in [("k", self.k.min(grid.len())), ("nas_parts", self.nas_parts)] {
                if c % n != 0 {
                    return Err(usage(format!(
                        "{what} = {n} does not divide the {c}-channel stage"
                    )));
                }
            }
        }
        if let Some(path) = &self.scores {
            if !path.is_file() {
                return Err(usage(format!(
                    "score file {} does not exist",
                    path.display()
                )));
            }
        }
        if self.roundtrip.height == 0 || self.roundtrip.width == 0 {
            return Err(usage("roundtrip height and width must be >= 1"));
        }
        if self.roundtrip.tolerance.is_nan() || self.roundtrip.tolerance < 0.0 {
            return Err(usage("roundtrip tolerance must be >= 0"));
        }
        if self.bench.size == 0 || self.bench.channels == 0 || self.bench.iterations == 0 {
            return Err(usage(
                "bench size, channels and iterations must be positive",
            ));
        }
        Ok(())
    }

    fn hyper_with(&self, epochs: usize) -> Hyper {
        Hyper {
            seed: self.seed,
            epochs,
            ..self.hyper.clone()
        }
    }

    /// Generates the synthetic data and splits it into (train, validation).
    pub fn split(&self) -> Result<(Dataset, Dataset)> {
        let data = gen_synthetic(&self.data)?;
        Ok(data.split_stratified(self.val_fraction, self.data.seed)?)
    }
}

#[derive(Serialize)]
struct ResultDoc<'a, T: Serialize> {
    schema_version: u32,
    command: &'a str,
    result: &'a T,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path).map_err(io_err(path))?))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).map_err(io_err(path))
}

fn write_result<T: Serialize>(out: &Path, command: &str, result: &T) -> Result<()> {
    write_json(
        &out.join("result.json"),
        &ResultDoc {
            schema_version: SCHEMA_VERSION,
            command,
            result,
        },
    )
}

fn prepare(out: &Path, cfg: &RunConfig) -> Result<()> {
    cfg.validate()?;
    fs::create_dir_all(out).map_err(io_err(out))?;
    let mut text = cfg.to_json()?;
    text.push('\n');
    let path = out.join("config.json");
    fs::write(&path, text).map_err(io_err(&path))
}

/// One row per (run, epoch).
fn write_history(path: &Path, runs: &[(String, &RunRecord)]) -> Result<()> {
    let mut w = create(path)?;
    let io = io_err(path);
    (|| {
        writeln!(w, "run,seed,epoch,train_loss,val_accuracy")?;
        for (name, r) in runs {
            for (epoch, (loss, acc)) in r.train_loss.iter().zip(&r.val_accuracy).enumerate() {
                writeln!(w, "{name},{},{epoch},{loss:?},{acc:?}", r.seed)?;
            }
        }
        w.flush()
    })()
    .map_err(io)
}

fn write_scores(path: &Path, scores: &[ComponentScore]) -> Result<()> {
    write_scores_csv(scores, create(path)?)?;
    Ok(())
}

// ---------------------------------------------------------------- roundtrip

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckResult {
    pub name: String,
    /// Largest relative error seen.
    pub max_error: f64,
    pub tolerance: f64,
    pub passed: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundtripReport {
    pub height: usize,
    pub width: usize,
    pub trials: usize,
    pub checks: Vec<CheckResult>,
    pub passed: bool,
}

/// Orthonormal roundtrip, DC-equals-sum and separable-vs-naive checks on
/// seeded uniform inputs. Errors are relative to the input scale.
pub fn roundtrip_checks(
    height: usize,
    width: usize,
    trials: usize,
    tolerance: f64,
    seed: u64,
) -> Result<RoundtripReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = [0.0f64; 3];
    for _ in 0..trials {
        let x = Tensor::from_fn(&[height, width], |_| rng.gen_range(-1.0..1.0))?;
        let scale = x
            .data()
            .iter()
            .fold(0.0f64, |m, v| m.max(v.abs()))
            .max(f64::MIN_POSITIVE);
        let f = dct2(&x)?;
        let back = idct2(&f, Normalization::Orthonormal)?;
        worst[0] = worst[0].max(back.max_abs_diff(&x)? / scale);
        let sum = x.sum();
        let hw_gap =
            (height * width) as f64 * x.reshape(&[1, height, width])?.reduce_mean_hw()?.data()[0];
        let dc = f.data()[0];
        let denom = sum.abs().max(scale);
        worst[1] = worst[1]
            .max((dc - sum).abs() / denom)
            .max((dc - hw_gap).abs() / denom);
        let naive = dct2_naive(&x)?;
        let fscale = (height * width) as f64 * scale;
        worst[2] = worst[2].max(naive.max_abs_diff(&f)? / fscale);
    }
    let names = [
        "orthonormal roundtrip",
        "dc equals sum",
        "separable vs naive",
    ];
    let checks: Vec<CheckResult> = names
        .iter()
        .zip(worst)
        .map(|(name, max_error)| CheckResult {
            name: name.to_string(),
            max_error,
            tolerance,
            // With no trials nothing can fail.
            passed: trials == 0 || max_error <= tolerance,
        })
        .collect();
    let passed = checks.iter().all(|c| c.passed);
    Ok(RoundtripReport {
        height,
        width,
        trials,
        checks,
        passed,
    })
}

pub fn cmd_roundtrip(cfg: &RunConfig, out: &Path) -> Result<RoundtripReport> {
    prepare(out, cfg)?;
    let rt = &cfg.roundtrip;
    let report = roundtrip_checks(rt.height, rt.width, rt.trials, rt.tolerance, cfg.seed)?;
    write_result(out, "roundtrip", &report)?;
    for c in &report.checks {
        let status = if c.passed { "ok" } else { "FAIL" };
        println!(
            "{status:4} {:24} max rel err {:.3e} (tol {:.1e})",
            c.name, c.max_error, c.tolerance
        );
    }
    if !report.passed {
        let failed: Vec<&str> = report
            .checks
            .iter()
            .filter(|c| !c.passed)
            .map(|c| c.name.as_str())
            .collect();
        return Err(CliError::CheckFailed(failed.join(", ")));
    }
    Ok(report)
}

// ---------------------------------------------------------- eval-components

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComponentReport {
    pub grid: usize,
    pub budget: usize,
    pub base_accuracy: f64,
    /// The same fine-tune with plain Gap attention.
    pub gap_accuracy: f64,
    /// In low-frequency order.
    pub scores: Vec<ComponentScore>,
}

fn measure_scores(
    cfg: &RunConfig,
    train_set: &Dataset,
    val_set: &Dataset,
) -> Result<(RunRecord, ComponentReport)> {
    let grid = cfg.grid()?;
    let (base, base_record) = pretrain_base(
        &cfg.model,
        train_set,
        val_set,
        &cfg.hyper_with(cfg.hyper.epochs),
    )?;
    let budget = cfg.hyper_with(cfg.budget);
    let scores = evaluate_components(&base, grid, train_set, val_set, &budget)?;
    let gap_accuracy = evaluate_attention(&base, AttentionKind::Gap, train_set, val_set, &budget)?;
    let report = ComponentReport {
        grid: cfg.grid,
        budget: cfg.budget,
        base_accuracy: base_record.final_val_accuracy,
        gap_accuracy,
        scores,
    };
    Ok((base_record, report))
}

pub fn cmd_eval_components(cfg: &RunConfig, out: &Path) -> Result<ComponentReport> {
    prepare(out, cfg)?;
    let (train_set, val_set) = cfg.split()?;
    let (base_record, report) = measure_scores(cfg, &train_set, &val_set)?;
    write_history(&out.join("history.csv"), &[("base".into(), &base_record)])?;
    write_scores(&out.join("scores.csv"), &report.scores)?;
    write_result(out, "eval-components", &report)?;
    Ok(report)
}

/// Scores for TS: read from `cfg.scores` or measured and saved to `out`.
fn ts_scores(
    cfg: &RunConfig,
    train_set: &Dataset,
    val_set: &Dataset,
    out: &Path,
) -> Result<Vec<ComponentScore>> {
    if let Some(path) = &cfg.scores {
        let file = File::open(path).map_err(io_err(path))?;
        return Ok(read_scores_csv(BufReader::new(file))?);
    }
    let (_, report) = measure_scores(cfg, train_set, val_set)?;
    write_scores(&out.join("scores.csv"), &report.scores)?;
    Ok(report.scores)
}

fn assignment_for(
    cfg: &RunConfig,
    k: usize,
    train_set: &Dataset,
    val_set: &Dataset,
    out: &Path,
) -> Result<FrequencyAssignment> {
    let grid = cfg.grid()?;
    let scores = match cfg.criterion {
        Criterion::Ts => Some(ts_scores(cfg, train_set, val_set, out)?),
        Criterion::Lf => None,
    };
    Ok(select_components(
        cfg.criterion,
        k,
        grid,
        scores.as_deref(),
        cfg.model.channels[0],
    )?)
}

// -------------------------------------------------------------------- train

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub strategy: Strategy,
    pub label: String,
    pub record: RunRecord,
}

pub fn cmd_train(cfg: &RunConfig, out: &Path) -> Result<TrainReport> {
    prepare(out, cfg)?;
    let (train_set, val_set) = cfg.split()?;
    let grid = cfg.grid()?;
    let mode = |m: LearnableMode, a| m.attention(a);
    let attention = match cfg.strategy {
        Strategy::None => AttentionKind::None,
        Strategy::Gap => AttentionKind::Gap,
        Strategy::Nas => AttentionKind::NasSearch {
            parts: cfg.nas_parts,
            grid,
        },
        s => {
            let a = assignment_for(cfg, cfg.k, &train_set, &val_set, out)?;
            match s {
                Strategy::Ms => AttentionKind::MultiSpectral { assignment: a },
                Strategy::Fr => mode(LearnableMode::FR, a),
                Strategy::Lr => mode(LearnableMode::LR, a),
                Strategy::Ld => mode(LearnableMode::LD, a),
                _ => mode(LearnableMode::FD, a),
            }
        }
    };
    let label = attention.label();
    let model = cfg.model.with_attention(attention);
    let (_, record) = train(
        &model,
        &train_set,
        &val_set,
        &cfg.hyper_with(cfg.hyper.epochs),
    )?;
    write_history(&out.join("history.csv"), &[(label.clone(), &record)])?;
    let report = TrainReport {
        strategy: cfg.strategy,
        label,
        record,
    };
    write_result(out, "train", &report)?;
    log::info!(
        "final validation accuracy {:.4}",
        report.record.final_val_accuracy
    );
    Ok(report)
}

// ------------------------------------------------------------------- search

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchReport {
    /// Derived at the smallest attention site, on the search grid.
    pub assignment: FrequencyAssignment,
    pub record: RunRecord,
}

pub fn cmd_search(cfg: &RunConfig, out: &Path) -> Result<SearchReport> {
    prepare(out, cfg)?;
    let (train_set, val_set) = cfg.split()?;
    let (_, record, assignment) = nas_search(
        cfg.nas_parts,
        cfg.grid()?,
        &cfg.model,
        &train_set,
        &val_set,
        &cfg.hyper_with(cfg.hyper.epochs),
    )?;
    write_history(&out.join("history.csv"), &[("nas".into(), &record)])?;
    write_json(&out.join("assignment.json"), &assignment)?;
    let report = SearchReport { assignment, record };
    write_result(out, "search", &report)?;
    Ok(report)
}

// ------------------------------------------------------------------ compare

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Baseline {
    pub mean: f64,
    pub std: f64,
    pub accuracies: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum CompareTable {
    Sweep {
        criterion: Criterion,
        rows: Vec<SweepRow>,
    },
    Learnable {
        k: usize,
        rows: Vec<CompareRow>,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompareReport {
    pub seeds: Vec<u64>,
    pub baseline: Option<Baseline>,
    pub table: CompareTable,
}

fn write_table(path: &Path, table: &CompareTable) -> Result<()> {
    let mut w = create(path)?;
    let io = io_err(path);
    (|| {
        match table {
            CompareTable::Sweep { criterion, rows } => {
                writeln!(w, "criterion,k,effective_k,mean,std")?;
                for r in rows {
                    writeln!(
                        w,
                        "{criterion},{},{},{:?},{:?}",
                        r.k, r.effective_k, r.mean, r.std
                    )?;
                }
            }
            CompareTable::Learnable { rows, .. } => {
                writeln!(w, "mode,param_count,attention_param_count,mean,std")?;
                for r in rows {
                    writeln!(
                        w,
                        "{},{},{},{:?},{:?}",
                        r.label, r.param_count, r.attention_param_count, r.mean, r.std
                    )?;
                }
            }
        }
        w.flush()
    })()
    .map_err(io)
}

pub fn cmd_compare(cfg: &RunConfig, out: &Path) -> Result<CompareReport> {
    prepare(out, cfg)?;
    let (train_set, val_set) = cfg.split()?;
    let hyper = cfg.hyper_with(cfg.hyper.epochs);
    let grid = cfg.grid()?;

    let mut histories: Vec<(String, RunRecord)> = Vec::new();
    let baseline = if cfg.baseline {
        let records = run_seeds(
            &cfg.model.with_attention(AttentionKind::Gap),
            &train_set,
            &val_set,
            &hyper,
            &cfg.seeds,
        )?;
        let accuracies: Vec<f64> = records.iter().map(|r| r.final_val_accuracy).collect();
        let (mean, std) = mean_std(&accuracies);
        histories.extend(records.into_iter().map(|r| ("gap".to_string(), r)));
        Some(Baseline {
            mean,
            std,
            accuracies,
        })
    } else {
        None
    };

    let table = match cfg.compare {
        CompareMode::Sweep => {
            let scores = match cfg.criterion {
                Criterion::Ts => Some(ts_scores(cfg, &train_set, &val_set, out)?),
                Criterion::Lf => None,
            };
            let rows = sweep_k(
                cfg.criterion,
                &cfg.ks,
                grid,
                scores.as_deref(),
                &cfg.model,
                &train_set,
                &val_set,
                &hyper,
                &cfg.seeds,
            )?;
            for r in &rows {
                histories.extend(
                    r.records
                        .iter()
                        .map(|rec| (format!("k{}", r.k), rec.clone())),
                );
            }
            CompareTable::Sweep {
                criterion: cfg.criterion,
                rows,
            }
        }
        CompareMode::Learnable => {
            let assignment = assignment_for(cfg, cfg.k, &train_set, &val_set, out)?;
            let rows = compare_learnable(
                &LearnableMode::all(),
                &assignment,
                &cfg.model,
                &train_set,
                &val_set,
                &hyper,
                &cfg.seeds,
            )?;
            for r in &rows {
                histories.extend(r.records.iter().map(|rec| (r.label.clone(), rec.clone())));
            }
            CompareTable::Learnable { k: cfg.k, rows }
        }
    };

    let refs: Vec<(String, &RunRecord)> = histories.iter().map(|(n, r)| (n.clone(), r)).collect();
    write_history(&out.join("history.csv"), &refs)?;
    write_table(&out.join("table.csv"), &table)?;
    let report = CompareReport {
        seeds: cfg.seeds.clone(),
        baseline,
        table,
    };
    write_result(out, "compare", &report)?;
    Ok(report)
}

// -------------------------------------------------------------------- bench

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub size: usize,
    pub channels: usize,
    pub iterations: usize,
    pub dct_separable_us: f64,
    pub dct_naive_us: f64,
    pub attention_gap_us: f64,
    pub attention_multi_spectral_us: f64,
    /// Block FLOPs (a multiply-add counts as two).
    pub attention_gap_flops: u64,
    pub attention_multi_spectral_flops: u64,
}

fn time_us(
    iterations: usize,
    mut f: impl FnMut() -> spectral_attention::Result<()>,
) -> Result<f64> {
    let start = Instant::now();
    for _ in 0..iterations {
        f()?;
    }
    Ok(start.elapsed().as_secs_f64() * 1e6 / iterations as f64)
}

/// Wall-clock timings; unlike the other commands its output is not
/// reproducible.
pub fn cmd_bench(cfg: &RunConfig, out: &Path) -> Result<BenchReport> {
    prepare(out, cfg)?;
    let b = &cfg.bench;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let x = Tensor::from_fn(&[b.size, b.size], |_| rng.gen_range(-1.0..1.0))?;
    let dct_separable_us = time_us(b.iterations, || dct2(&x).map(drop))?;
    let dct_naive_us = time_us(b.iterations, || dct2_naive(&x).map(drop))?;

    let reduction = cfg.model.reduction.min(b.channels);
    let feat = Tensor::from_fn(&[b.channels, b.size, b.size], |_| rng.gen_range(-1.0..1.0))?;
    let mut gap = AttentionParams::new(b.channels, reduction, Compression::Gap)?;
    gap.randomize_fc(&mut rng);
    // Largest grid that divides the bench map, and a k that divides the channels.
    let g = (1..=cfg.grid.min(b.size))
        .rev()
        .find(|g| b.size.is_multiple_of(*g))
        .unwrap_or(1);
    let k = if b.channels.is_multiple_of(cfg.k.min(g * g)) {
        cfg.k.min(g * g)
    } else {
        1
    };
    let assignment =
        assign_lf(b.channels, k, FrequencyGrid::square(g)?)?.rescaled(b.size, b.size)?;
    let mut ms = AttentionParams::new(
        b.channels,
        reduction,
        Compression::MultiSpectral { assignment },
    )?;
    ms.randomize_fc(&mut rng);
    let block = |p: &AttentionParams| {
        let (att, _) = attention_forward(&feat, p)?;
        apply_attention(&feat, &att).map(drop)
    };
    let attention_gap_us = time_us(b.iterations, || block(&gap))?;
    let attention_multi_spectral_us = time_us(b.iterations, || block(&ms))?;
    let flops = |p: &AttentionParams| {
        attention_flops(b.channels, b.size, b.size, reduction, &p.compression)
    };
    let report = BenchReport {
        size: b.size,
        channels: b.channels,
        iterations: b.iterations,
        dct_separable_us,
        dct_naive_us,
        attention_gap_us,
        attention_multi_spectral_us,
        attention_gap_flops: flops(&gap)?,
        attention_multi_spectral_flops: flops(&ms)?,
    };
    write_json(&out.join("bench.json"), &report)?;
    println!(
        "dct2 {0}x{0}: separable {1:.2} us, naive {2:.2} us",
        b.size, dct_separable_us, dct_naive_us
    );
    println!(
        "attention block {}x{1}x{1}: gap {2:.2} us, multi-spectral {3:.2} us",
        b.channels, b.size, attention_gap_us, attention_multi_spectral_us
    );
    println!(
        "attention block flops: gap {}, multi-spectral {}",
        report.attention_gap_flops, report.attention_multi_spectral_flops
    );
    Ok(report)
}

/// Noise-free band-energy accuracy of the configured generator.
pub fn oracle_accuracy(spec: &SyntheticSpec) -> Result<f64> {
    let clean = gen_synthetic(&SyntheticSpec {
        noise_sigma: 0.0,
        ..spec.clone()
    })?;
    Ok(band_energy_accuracy(&clean, &spec.class_bands)?)
}
