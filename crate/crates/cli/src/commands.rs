//! Subcommand implementations. Every command writes its outputs under the
//! run's `out_dir` and returns the paths it produced.

use std::collections::BTreeSet;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use vsfm::bench::{
    selection_sweep, threshold_sweep, thresholds_for_sizes, write_csv, write_json, SweepOptions, SweepRow,
    DEFAULT_REPS, DEFAULT_WARMUPS,
};
use vsfm::datasets::{SeriesFamily, Window};
use vsfm::engine::{autoregressive_forecast, evaluate, ForecastRequest, ForecastResult, Trainer};
use vsfm::model::{checkpoint, Model};
use vsfm::relevance::{combine_requests, sparsify, sparsity_of};

use crate::config::{RunConfig, RunData};
use crate::experiments::{
    compare_methods, scaling_report, selection_report, CompareSetup, Method, ScalingReport,
};

pub const CHECKPOINT: &str = "model.ckpt";
pub const BPTT_CHECKPOINT: &str = "model_bptt.ckpt";

fn out(cfg: &RunConfig, name: &str) -> PathBuf {
    cfg.out_dir.join(name)
}

fn load_model(cfg: &RunConfig, path: Option<&Path>) -> Result<Model<f32>> {
    let path = path.map(Path::to_path_buf).unwrap_or_else(|| out(cfg, CHECKPOINT));
    checkpoint::load(&path).with_context(|| format!("loading checkpoint {}", path.display()))
}

fn check_shape(model: &Model<f32>, family: &SeriesFamily) -> Result<()> {
    if model.m != family.m() || model.n != family.n() {
        bail!(
            "checkpoint expects {} inputs and {} sensors, data has {} and {}",
            model.m,
            model.n,
            family.m(),
            family.n()
        );
    }
    Ok(())
}

fn threshold_or_dense(t: Option<f64>) -> f64 {
    t.unwrap_or(f64::NEG_INFINITY)
}

/// Writes the configured family as CSV.
pub fn gen_data(cfg: &RunConfig, path: &Path) -> Result<PathBuf> {
    let family = cfg.family()?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    family.write_csv(path)?;
    Ok(path.to_path_buf())
}

/// Teacher-forcing training with early stopping.
pub fn train(cfg: &RunConfig) -> Result<Vec<PathBuf>> {
    cfg.write_resolved()?;
    let data = RunData::load(cfg)?;
    let mut model = Model::<f32>::new(cfg.model()?, data.family.m(), data.family.n(), cfg.seed)?;
    model.norm = Some(data.stats.clone());
    let mut trainer = Trainer::new(model, cfg.train())?;
    let metrics_path = out(cfg, "metrics.jsonl");
    let mut metrics = BufWriter::new(File::create(&metrics_path)?);
    let mut write_err = None;
    let report = trainer.train(&data.train, data.val_slice(cfg), cfg.context, cfg.cycles, |log, _| {
        eprintln!(
            "epoch {:>3}  train {:.5}  val {:.5}  lr {:.2e}",
            log.epoch, log.train_loss, log.val_loss, log.lr
        );
        let line = serde_json::to_string(log).map_err(anyhow::Error::from);
        if let Err(e) = line.and_then(|l| writeln!(metrics, "{l}").map_err(Into::into)) {
            write_err.get_or_insert(e);
        }
    })?;
    if let Some(e) = write_err {
        return Err(e.context("writing metrics log"));
    }
    metrics.flush()?;
    let ckpt = out(cfg, CHECKPOINT);
    checkpoint::save(&trainer.model, &ckpt)?;
    let report_path = out(cfg, "train_report.json");
    write_json(&report_path, &report)?;
    Ok(vec![out(cfg, "config.toml"), metrics_path, ckpt, report_path])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BpttReport {
    pub val_mse_before: f64,
    pub val_mse_after: f64,
    pub epoch_loss: Vec<f64>,
    pub steps: u64,
    pub forward_passes: u64,
}

/// BPTT fine-tuning from a teacher-forcing checkpoint.
pub fn finetune_bptt(cfg: &RunConfig, checkpoint_path: Option<&Path>) -> Result<Vec<PathBuf>> {
    cfg.write_resolved()?;
    let data = RunData::load(cfg)?;
    let model = load_model(cfg, checkpoint_path)?;
    check_shape(&model, &data.family)?;
    let mut trainer = Trainer::new(model, cfg.train())?;
    let val = data.val_slice(cfg);
    let before = trainer.validation_loss(val, cfg.context, cfg.cycles)?;
    let rollout = data.rollout_train(cfg)?;
    let epoch_loss = trainer.finetune_bptt(&rollout, cfg.context, cfg.cycles, cfg.bptt_epochs, cfg.bptt_lr)?;
    let after = trainer.validation_loss(val, cfg.context, cfg.cycles)?;
    let report = BpttReport {
        val_mse_before: before,
        val_mse_after: after,
        epoch_loss,
        steps: trainer.steps,
        forward_passes: trainer.forward_passes,
    };
    let ckpt = out(cfg, BPTT_CHECKPOINT);
    checkpoint::save(&trainer.model, &ckpt)?;
    let report_path = out(cfg, "bptt_report.json");
    write_json(&report_path, &report)?;
    Ok(vec![ckpt, report_path])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForecastOutput {
    pub window: usize,
    pub start: usize,
    pub threshold: f64,
    pub result: ForecastResult,
    /// Predictions mapped back to the original units.
    pub denormalized: Vec<Vec<f64>>,
}

fn request(cfg: &RunConfig, n: usize) -> ForecastRequest {
    ForecastRequest {
        sensors: cfg.sensors_or_all(n),
        context: cfg.context,
        cycles: cfg.cycles,
        threshold: threshold_or_dense(cfg.forecast_threshold),
    }
}

/// Autoregressive forecast of one validation window.
pub fn forecast(cfg: &RunConfig, checkpoint_path: Option<&Path>, window: usize) -> Result<Vec<PathBuf>> {
    let data = RunData::load(cfg)?;
    let model = load_model(cfg, checkpoint_path)?;
    check_shape(&model, &data.family)?;
    let Some(w) = data.val.get(window) else {
        bail!("window {window} outside the {} validation windows", data.val.len());
    };
    let req = request(cfg, model.n);
    let result = autoregressive_forecast(&model, w, &req)?;
    let norm = model.norm.as_ref().unwrap_or(&data.stats);
    let denormalized = result
        .sensors
        .iter()
        .zip(&result.predictions)
        .map(|(&j, p)| p.iter().map(|&z| norm.denormalize(model.m + j, z)).collect())
        .collect();
    let output = ForecastOutput {
        window,
        start: w.start,
        threshold: req.threshold,
        result,
        denormalized,
    };
    fs::create_dir_all(&cfg.out_dir)?;
    let path = out(cfg, "forecast.json");
    write_json(&path, &output)?;
    Ok(vec![path])
}

/// Validation MSE per sensor, each sensor requested on its own.
pub fn eval(cfg: &RunConfig, checkpoint_path: Option<&Path>) -> Result<Vec<PathBuf>> {
    let data = RunData::load(cfg)?;
    let model = load_model(cfg, checkpoint_path)?;
    check_shape(&model, &data.family)?;
    let requests: Vec<ForecastRequest> = cfg
        .sensors_or_all(model.n)
        .into_iter()
        .map(|j| ForecastRequest {
            sensors: vec![j],
            ..request(cfg, model.n)
        })
        .collect();
    let report = evaluate(&model, data.val_slice(cfg), &requests)?;
    fs::create_dir_all(&cfg.out_dir)?;
    let path = out(cfg, "eval_report.json");
    write_json(&path, &report)?;
    Ok(vec![path])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct RelevanceRow {
    sensor: usize,
    variate: usize,
    name: String,
    relevance: f64,
}

/// Learned relevance rows as long-format CSV.
pub fn relevance_export(cfg: &RunConfig, checkpoint_path: Option<&Path>) -> Result<Vec<PathBuf>> {
    let family = cfg.family()?;
    let model = load_model(cfg, checkpoint_path)?;
    check_shape(&model, &family)?;
    let mut rows = Vec::new();
    for (j, r) in model.relevance.rows_f64(&model.store).into_iter().enumerate() {
        for (variate, relevance) in r.into_iter().enumerate() {
            rows.push(RelevanceRow {
                sensor: j,
                variate,
                name: family.variate_name(variate).to_string(),
                relevance,
            });
        }
    }
    fs::create_dir_all(&cfg.out_dir)?;
    let path = out(cfg, "relevance.csv");
    write_csv(&path, &rows)?;
    Ok(vec![path])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SparsifyReport {
    pub threshold: f64,
    pub sets: Vec<SensorSet>,
    /// Sparsity of requesting every sensor at once.
    pub all_sparsity: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensorSet {
    pub sensor: usize,
    pub inputs: Vec<String>,
    pub sparsity: f64,
}

/// Thresholds relevance into per-sensor input sets.
pub fn relevance_sparsify(cfg: &RunConfig, checkpoint_path: Option<&Path>, threshold: f64) -> Result<Vec<PathBuf>> {
    let family = cfg.family()?;
    let model = load_model(cfg, checkpoint_path)?;
    check_shape(&model, &family)?;
    let (m, n) = (model.m, model.n);
    let rows = model.relevance.rows_f64(&model.store);
    let sets = (0..n)
        .map(|j| {
            let set = sparsify(&rows[j], m, j, threshold);
            let single = combine_requests(&rows, m, &[j], threshold)?;
            Ok(SensorSet {
                sensor: j,
                inputs: set.inputs(m).iter().map(|&i| family.variate_name(i).to_string()).collect(),
                sparsity: sparsity_of(&single, m, n),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let all: Vec<usize> = (0..n).collect();
    let report = SparsifyReport {
        threshold,
        sets,
        all_sparsity: sparsity_of(&combine_requests(&rows, m, &all, threshold)?, m, n),
    };
    fs::create_dir_all(&cfg.out_dir)?;
    let path = out(cfg, "input_sets.json");
    write_json(&path, &report)?;
    Ok(vec![path])
}

/// Learned versus baseline input sets at equal size.
pub fn relevance_compare(
    cfg: &RunConfig,
    checkpoint_path: Option<&Path>,
    methods: &[Method],
    k: usize,
    finetune_epochs: usize,
) -> Result<Vec<PathBuf>> {
    let data = RunData::load(cfg)?;
    let model = load_model(cfg, checkpoint_path)?;
    check_shape(&model, &data.family)?;
    let mut finetune = cfg.train();
    finetune.epochs = finetune_epochs;
    let setup = CompareSetup {
        family: &data.family,
        train: &data.train,
        val: data.val_slice(cfg),
        context: cfg.context,
        cycles: cfg.cycles,
        train_fraction: cfg.train_fraction,
        finetune,
    };
    let rows = compare_methods(&model, &setup, methods, k)?;
    fs::create_dir_all(&cfg.out_dir)?;
    let path = out(cfg, "relevance_compare.csv");
    write_csv(&path, &rows)?;
    Ok(vec![path])
}

fn sweep_options(cfg: &RunConfig, reps: Option<usize>) -> SweepOptions {
    SweepOptions {
        context: cfg.context,
        cycles: cfg.cycles,
        warmups: DEFAULT_WARMUPS,
        reps: reps.unwrap_or(DEFAULT_REPS),
    }
}

fn timing_window(data: &RunData) -> Result<&Window> {
    data.val.first().context("no validation window long enough for the forecast")
}

/// Threshold sweep for one sensor, retaining each listed input count.
pub fn bench_sweep(
    cfg: &RunConfig,
    checkpoint_path: Option<&Path>,
    sensor: usize,
    sizes: &[usize],
    eval_windows: usize,
    reps: Option<usize>,
) -> Result<Vec<PathBuf>> {
    let data = RunData::load(cfg)?;
    let model = load_model(cfg, checkpoint_path)?;
    check_shape(&model, &data.family)?;
    if sensor >= model.n {
        bail!("sensor {sensor} outside 0..{}", model.n);
    }
    let rows = model.relevance.rows_f64(&model.store);
    let sizes: Vec<usize> = sizes.iter().copied().filter(|&k| k <= model.m).collect();
    let thresholds = thresholds_for_sizes(&rows[sensor], model.m, &sizes)?;
    let eval = &data.val[..eval_windows.min(data.val.len())];
    let sweep = threshold_sweep(
        &model,
        timing_window(&data)?,
        eval,
        &[sensor],
        &thresholds,
        sweep_options(cfg, reps),
    )?;
    fs::create_dir_all(&cfg.out_dir)?;
    let csv_path = out(cfg, "sweep.csv");
    write_csv(&csv_path, &sweep)?;
    let mut paths = vec![csv_path];
    match scaling_report(&sweep) {
        Ok(report) => {
            let path = out(cfg, "slopes.json");
            write_json(&path, &report)?;
            paths.push(path);
        }
        Err(e) => eprintln!("no slope fit: {e:#}"),
    }
    Ok(paths)
}

/// Reads a sweep CSV written by [`bench_sweep`].
pub fn read_sweep(path: &Path) -> Result<Vec<SweepRow>> {
    let mut r = csv::Reader::from_path(path).with_context(|| format!("reading {}", path.display()))?;
    r.deserialize()
        .collect::<std::result::Result<Vec<SweepRow>, _>>()
        .with_context(|| format!("parsing {}", path.display()))
}

/// Slope fits of an existing sweep.
pub fn bench_slopes(cfg: &RunConfig, input: &Path) -> Result<(ScalingReport, PathBuf)> {
    let report = scaling_report(&read_sweep(input)?)?;
    fs::create_dir_all(&cfg.out_dir)?;
    let path = out(cfg, "slopes.json");
    write_json(&path, &report)?;
    Ok((report, path))
}

/// Cost of requesting growing sensor prefixes at one threshold.
pub fn bench_select(
    cfg: &RunConfig,
    checkpoint_path: Option<&Path>,
    threshold: f64,
    reps: Option<usize>,
) -> Result<Vec<PathBuf>> {
    let data = RunData::load(cfg)?;
    let model = load_model(cfg, checkpoint_path)?;
    check_shape(&model, &data.family)?;
    let (m, n) = (model.m, model.n);
    let rows = model.relevance.rows_f64(&model.store);
    let sets: Vec<BTreeSet<usize>> = (0..n).map(|j| sparsify(&rows[j], m, j, threshold).inputs(m).into_iter().collect()).collect();
    let subsets: Vec<Vec<usize>> = (1..=n).map(|k| (0..k).collect()).collect();
    let overlaps: Vec<bool> = subsets
        .iter()
        .map(|s| {
            s.iter()
                .enumerate()
                .any(|(a, &i)| s[a + 1..].iter().any(|&j| !sets[i].is_disjoint(&sets[j])))
        })
        .collect();
    let sizes: Vec<usize> = sets.iter().map(BTreeSet::len).collect();
    let sweep = selection_sweep(&model, timing_window(&data)?, &subsets, threshold, sweep_options(cfg, reps))?;
    let report = selection_report(&sweep, &sizes, &overlaps)?;
    fs::create_dir_all(&cfg.out_dir)?;
    let rows_path = out(cfg, "select.json");
    write_json(&rows_path, &sweep)?;
    let report_path = out(cfg, "select_summary.json");
    write_json(&report_path, &report)?;
    Ok(vec![rows_path, report_path])
}

