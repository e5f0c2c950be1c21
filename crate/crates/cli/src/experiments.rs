//! Experiment summaries shared by the CLI and the acceptance suite.

use anyhow::{bail, Result};
use serde::{Deserialize, Serialize};
use vsfm::bench::{fit_scaling_slopes, SelectionRow, SlopeFit, SweepRow};
use vsfm::datasets::{SeriesFamily, Window};
use vsfm::engine::{evaluate_combined, TrainConfig, Trainer};
use vsfm::model::Model;
use vsfm::numerics::Float;
use vsfm::relevance::{
    combine_sets, correlation_relevance, learned_top_k, random_relevance, sparsity_of, InputSet,
};

/// Relevance of each sensor's true source against the strongest distractor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Identification {
    pub sensor: usize,
    pub source: usize,
    pub source_relevance: f64,
    pub max_other: f64,
    pub argmax_other: usize,
    pub ratio: f64,
}

/// `sources[j]` is the 0-based input that sensor `j` replicates.
pub fn identification(rows: &[Vec<f64>], m: usize, sources: &[usize]) -> Vec<Identification> {
    sources
        .iter()
        .enumerate()
        .map(|(j, &src)| {
            let r = &rows[j];
            let (argmax_other, max_other) = (0..m)
                .filter(|&i| !sources.contains(&i))
                .map(|i| (i, r[i]))
                .max_by(|a, b| a.1.total_cmp(&b.1))
                .unwrap_or((src, f64::NAN));
            Identification {
                sensor: j,
                source: src,
                source_relevance: r[src],
                max_other,
                argmax_other,
                ratio: r[src] / max_other,
            }
        })
        .collect()
}

/// Mean loss of the plateau before the largest drop, the loss after it, and
/// the epoch at which the post-drop level is first reached.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepDrop {
    pub plateau: f64,
    pub after: f64,
    pub drop_epoch: usize,
    pub ratio: f64,
}

/// Compares the early plateau (the first `plateau_epochs` epochs) with the
/// best loss reached afterwards.
pub fn step_drop(curve: &[f64], plateau_epochs: usize) -> Result<StepDrop> {
    if curve.len() <= plateau_epochs || plateau_epochs == 0 {
        bail!("curve of {} epochs cannot hold a {plateau_epochs}-epoch plateau", curve.len());
    }
    let plateau = curve[..plateau_epochs].iter().sum::<f64>() / plateau_epochs as f64;
    let (drop_epoch, after) = curve[plateau_epochs..]
        .iter()
        .enumerate()
        .map(|(i, &v)| (i + plateau_epochs, v))
        .min_by(|a, b| a.1.total_cmp(&b.1))
        .expect("non-empty tail");
    Ok(StepDrop {
        plateau,
        after,
        drop_epoch,
        ratio: after / plateau,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Learned,
    Correlation,
    Random,
}

impl std::str::FromStr for Method {
    type Err = anyhow::Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "learned" => Method::Learned,
            "correlation" => Method::Correlation,
            "random" => Method::Random,
            other => bail!("unknown relevance method `{other}`"),
        })
    }
}

/// Per-sensor input sets of size `k` chosen by `method`.
pub fn method_sets<F: Float>(
    model: &Model<F>,
    family: &SeriesFamily,
    method: Method,
    k: usize,
    train_fraction: f64,
    seed: u64,
) -> Result<Vec<InputSet>> {
    let rows = model.relevance.rows_f64(&model.store);
    (0..model.n)
        .map(|j| {
            Ok(match method {
                Method::Learned => learned_top_k(&rows[j], model.m, j, k)?,
                Method::Correlation => correlation_relevance(family, j, k, train_fraction)?,
                Method::Random => random_relevance(seed, model.m, j, k)?,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareRow {
    pub method: Method,
    pub k: usize,
    pub sparsity: f64,
    pub mse: f64,
}

/// Setup shared by every method in a comparison.
pub struct CompareSetup<'a> {
    pub family: &'a SeriesFamily,
    pub train: &'a [Window],
    pub val: &'a [Window],
    pub context: usize,
    pub cycles: usize,
    pub train_fraction: f64,
    /// Fine-tuning on the restricted sets; `epochs = 0` skips it.
    pub finetune: TrainConfig,
}

/// Validation MSE of each method at `k` inputs per sensor. Each sensor is
/// forecast on its own set; with fine-tuning the model first adapts to the
/// sets under identical settings for every method.
pub fn compare_methods<F: Float>(
    model: &Model<F>,
    setup: &CompareSetup<'_>,
    methods: &[Method],
    k: usize,
) -> Result<Vec<CompareRow>> {
    let (m, n) = (model.m, model.n);
    methods
        .iter()
        .map(|&method| {
            let sets = method_sets(model, setup.family, method, k, setup.train_fraction, setup.finetune.seed)?;
            let requests = sets
                .iter()
                .map(|s| combine_sets(m, std::slice::from_ref(s)))
                .collect::<vsfm::Result<Vec<_>>>()?;
            let mut tuned = model.clone();
            if setup.finetune.epochs > 0 {
                let mut trainer = Trainer::new(tuned, setup.finetune.clone())?;
                trainer.input_sets = Some(sets.clone());
                trainer.train(setup.train, setup.val, setup.context, setup.cycles, |_, _| {})?;
                tuned = trainer.into_model();
            }
            let report = evaluate_combined(&tuned, setup.val, &requests, setup.context, setup.cycles)?;
            let sparsity = requests.iter().map(|r| sparsity_of(r, m, n)).sum::<f64>() / n as f64;
            Ok(CompareRow {
                method,
                k,
                sparsity,
                mse: report.mean,
            })
        })
        .collect()
}

/// Slope fits of a threshold sweep plus the wall-clock monotonicity check.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingReport {
    pub counted: SlopeFit,
    pub analytic: SlopeFit,
    /// Wall-clock never rises with sparsity by more than the measured spread.
    pub wall_clock_monotone: bool,
    /// Largest rise of median wall-clock between sparsity-adjacent rows.
    pub max_rise_s: f64,
}

pub fn scaling_report(rows: &[SweepRow]) -> Result<ScalingReport> {
    let counted = fit_scaling_slopes(&rows.iter().map(|r| (r.sparsity, r.ops_counted as f64)).collect::<Vec<_>>())?;
    let analytic = fit_scaling_slopes(&rows.iter().map(|r| (r.sparsity, r.ops_analytic as f64)).collect::<Vec<_>>())?;
    let mut sorted: Vec<&SweepRow> = rows.iter().collect();
    sorted.sort_by(|a, b| a.sparsity.total_cmp(&b.sparsity));
    let mut monotone = true;
    let mut max_rise_s = f64::NEG_INFINITY;
    for pair in sorted.windows(2) {
        let rise = pair[1].median_s - pair[0].median_s;
        max_rise_s = max_rise_s.max(rise);
        if rise > pair[0].spread_s.max(pair[1].spread_s) {
            monotone = false;
        }
    }
    Ok(ScalingReport {
        counted,
        analytic,
        wall_clock_monotone: monotone,
        max_rise_s,
    })
}

/// Selection experiment summary: one sensor against all of them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionReport {
    pub single_sparsity: f64,
    pub all_sparsity: f64,
    pub time_ratio: f64,
    pub memory_ratio: f64,
    /// `(|S|, union size, sum of individual set sizes)` per prefix subset.
    pub union_growth: Vec<(usize, usize, usize)>,
    /// Union strictly smaller than the sum wherever individual sets overlap.
    pub sublinear: bool,
}

/// `rows` must hold the prefix subsets `{0}, {0,1}, …` in order; `sizes[j]`
/// is the input count of sensor `j` alone and `overlaps[i]` tells whether
/// the sets of prefix `i` overlap.
pub fn selection_report(rows: &[SelectionRow], sizes: &[usize], overlaps: &[bool]) -> Result<SelectionReport> {
    let (Some(first), Some(last)) = (rows.first(), rows.last()) else {
        bail!("selection sweep is empty");
    };
    let mut union_growth = Vec::with_capacity(rows.len());
    let mut sublinear = true;
    for (i, r) in rows.iter().enumerate() {
        let sum: usize = r.sensors.iter().map(|&j| sizes[j]).sum();
        if overlaps[i] && r.union_inputs >= sum {
            sublinear = false;
        }
        union_growth.push((r.sensors.len(), r.union_inputs, sum));
    }
    Ok(SelectionReport {
        single_sparsity: first.sparsity,
        all_sparsity: last.sparsity,
        time_ratio: last.median_s / first.median_s,
        memory_ratio: last.memory_bytes as f64 / first.memory_bytes.max(1) as f64,
        union_growth,
        sublinear,
    })
}
