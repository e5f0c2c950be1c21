//! Token accounting, analytic cost model, wall-clock profiling and the
//! sparsity scaling fit.
//!
//! Op counts are floating-point operations with a multiply-add counted as
//! two, the same convention the graph's own counter uses. Per layer and
//! `s` tokens:
//!
//! ```text
//! attention   8·s·d² (Q, K, V, output projections) + 4·s²·d (QKᵀ and AV)
//! feed-forward 4·s·d·hidden
//! ```
//!
//! plus `2·s·(p·h + h·d)` for the patch embedding and `2·s·(d·h + h·p)` for
//! the output head, with `h` the embedding hidden width.

use std::fs;
use std::hint::black_box;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::datasets::Window;
use crate::engine::{autoregressive_forecast, evaluate, request_universe, ForecastRequest};
use crate::error::{invalid, Result};
use crate::model::{Model, ModelConfig};
use crate::numerics::Float;
use crate::relevance::CombinedRequest;

pub const DEFAULT_WARMUPS: usize = 3;
pub const DEFAULT_REPS: usize = 5;

/// Tokens of a sequence in which every variate of the request's universe
/// has a token at each of `slots` slots, plus one prototype per sensor.
pub fn count_tokens(request: &CombinedRequest, m: usize, slots: usize) -> usize {
    slots * request.universe(m).len() + request.sensors.len()
}

/// Tokens processed by autoregressive cycle `cycle` (1-based) with `context`
/// input slots in cycle 1.
pub fn cycle_tokens(request: &CombinedRequest, context: usize, cycle: usize) -> usize {
    (context + cycle - 1) * request.inputs.len() + cycle * request.sensors.len()
}

/// Token count of each cycle of a `cycles`-cycle forecast.
pub fn forecast_tokens(request: &CombinedRequest, context: usize, cycles: usize) -> Vec<usize> {
    (1..=cycles).map(|k| cycle_tokens(request, context, k)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostEstimate {
    pub tokens: usize,
    /// `8·s·d²` summed over layers.
    pub attention_linear_ops: u64,
    /// `4·s²·d` summed over layers.
    pub attention_quadratic_ops: u64,
    pub feed_forward_ops: u64,
    pub embedding_ops: u64,
    pub total_ops: u64,
    pub wall_clock_s: Vec<f64>,
    pub memory_bytes: u64,
}

impl CostEstimate {
    pub fn attention_ops(&self) -> u64 {
        self.attention_linear_ops + self.attention_quadratic_ops
    }
}

pub fn estimate_ops(s: usize, config: &ModelConfig) -> CostEstimate {
    let (s, d, h, p, l) = (
        s as u64,
        config.d as u64,
        config.hidden as u64,
        config.patch as u64,
        config.layers as u64,
    );
    let attention_linear_ops = l * 8 * s * d * d;
    let attention_quadratic_ops = l * 4 * s * s * d;
    let feed_forward_ops = l * 4 * s * d * h;
    let embedding_ops = 2 * s * (p * h + h * d) + 2 * s * (d * h + h * p);
    CostEstimate {
        tokens: s as usize,
        attention_linear_ops,
        attention_quadratic_ops,
        feed_forward_ops,
        embedding_ops,
        total_ops: attention_linear_ops + attention_quadratic_ops + feed_forward_ops + embedding_ops,
        wall_clock_s: Vec::new(),
        memory_bytes: 0,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProfileStats {
    pub median_s: f64,
    /// Median absolute deviation from the median.
    pub spread_s: f64,
    pub samples: Vec<f64>,
}

impl ProfileStats {
    /// `spread / median`, with `0/0` read as 0.
    pub fn relative_spread(&self) -> f64 {
        if self.spread_s == 0.0 {
            0.0
        } else {
            self.spread_s / self.median_s
        }
    }
}

fn median(xs: &mut [f64]) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

/// Times `f` `reps` times after `warmups` untimed calls.
pub fn profile<T>(mut f: impl FnMut() -> T, warmups: usize, reps: usize) -> Result<ProfileStats> {
    if reps == 0 {
        return Err(invalid("profiling needs at least one repetition"));
    }
    for _ in 0..warmups {
        black_box(f());
    }
    let samples: Vec<f64> = (0..reps)
        .map(|_| {
            let start = Instant::now();
            black_box(f());
            start.elapsed().as_secs_f64()
        })
        .collect();
    let mut sorted = samples.clone();
    let median_s = median(&mut sorted);
    let mut dev: Vec<f64> = samples.iter().map(|x| (x - median_s).abs()).collect();
    Ok(ProfileStats {
        median_s,
        spread_s: median(&mut dev),
        samples,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LineFit {
    pub slope: f64,
    pub intercept: f64,
    /// Sum of squared residuals.
    pub residual: f64,
    pub points: usize,
}

fn line_fit(xs: &[f64], ys: &[f64]) -> Result<LineFit> {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    if sxx <= 0.0 {
        return Err(invalid("line fit over a single abscissa"));
    }
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let residual = xs
        .iter()
        .zip(ys)
        .map(|(x, y)| (y - intercept - slope * x).powi(2))
        .sum();
    Ok(LineFit {
        slope,
        intercept,
        residual,
        points: xs.len(),
    })
}

/// Two-regime fit of `log(cost)` against `log(1 − sparsity)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SlopeFit {
    /// `1 − sparsity` at the densest point of the sparse regime.
    pub boundary: f64,
    pub dense: LineFit,
    pub sparse: LineFit,
}

pub const MIN_REGIME_POINTS: usize = 4;

/// Splits the sweep at the point that minimizes the combined residual of
/// two least-squares lines, each over at least four points.
pub fn fit_scaling_slopes(points: &[(f64, f64)]) -> Result<SlopeFit> {
    let mut xy: Vec<(f64, f64)> = Vec::with_capacity(points.len());
    for &(sparsity, cost) in points {
        if !sparsity.is_finite() || !cost.is_finite() || sparsity >= 1.0 || cost <= 0.0 {
            return Err(invalid(format!(
                "sweep point (sparsity {sparsity}, cost {cost}) is off the log axes"
            )));
        }
        xy.push(((1.0 - sparsity).ln(), cost.ln()));
    }
    xy.sort_by(|a, b| a.0.total_cmp(&b.0));
    if xy.first().map(|p| p.0) == xy.last().map(|p| p.0) {
        return Err(invalid("sweep covers a single sparsity"));
    }
    if xy.len() < 2 * MIN_REGIME_POINTS {
        return Err(invalid(format!(
            "{} sweep points; need {} per regime",
            xy.len(),
            MIN_REGIME_POINTS
        )));
    }
    let (xs, ys): (Vec<f64>, Vec<f64>) = xy.into_iter().unzip();
    let mut best: Option<(f64, SlopeFit)> = None;
    for split in MIN_REGIME_POINTS..=xs.len() - MIN_REGIME_POINTS {
        let (Ok(sparse), Ok(dense)) = (line_fit(&xs[..split], &ys[..split]), line_fit(&xs[split..], &ys[split..])) else {
            continue;
        };
        let total = sparse.residual + dense.residual;
        if best.as_ref().is_none_or(|b| total < b.0) {
            best = Some((
                total,
                SlopeFit {
                    boundary: xs[split - 1].exp(),
                    dense,
                    sparse,
                },
            ));
        }
    }
    best.map(|b| b.1)
        .ok_or_else(|| invalid("no split leaves two non-degenerate regimes"))
}

/// Thresholds that retain exactly `k` inputs of relevance row `r`, for each
/// `k` in `sizes` (ties permitting). Midpoints between consecutive sorted
/// values; `+inf` keeps no input and `-inf` keeps all.
pub fn thresholds_for_sizes(r: &[f64], m: usize, sizes: &[usize]) -> Result<Vec<f64>> {
    let mut sorted: Vec<f64> = r[..m].to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    sizes
        .iter()
        .map(|&k| match k {
            0 => Ok(f64::INFINITY),
            k if k == m => Ok(f64::NEG_INFINITY),
            k if k < m => Ok(0.5 * (sorted[k - 1] + sorted[k])),
            k => Err(invalid(format!("cannot retain {k} of {m} inputs"))),
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub threshold: f64,
    pub sparsity: f64,
    /// Tokens summed over all cycles.
    pub tokens: usize,
    pub inputs: usize,
    pub ops_counted: u64,
    pub ops_analytic: u64,
    pub median_s: f64,
    pub spread_s: f64,
    /// Peak live tensor payload over cycles.
    pub memory_bytes: u64,
    pub mse: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepOptions {
    pub context: usize,
    pub cycles: usize,
    pub warmups: usize,
    pub reps: usize,
}

/// Tokens a dense model predicting all `n` sensors from all `m` inputs
/// processes over a forecast.
pub fn dense_tokens(m: usize, n: usize, context: usize, cycles: usize) -> usize {
    (1..=cycles).map(|k| (context + k - 1) * m + k * n).sum()
}

/// Profiles and evaluates one forecast request per threshold. `timing` is
/// the window used for op counts and wall-clock; `eval` (possibly empty)
/// supplies the MSE column.
pub fn threshold_sweep<F: Float>(
    model: &Model<F>,
    timing: &Window,
    eval: &[Window],
    sensors: &[usize],
    thresholds: &[f64],
    opts: SweepOptions,
) -> Result<Vec<SweepRow>> {
    let dense = dense_tokens(model.m, model.n, opts.context, opts.cycles) as f64;
    let mut rows = Vec::with_capacity(thresholds.len());
    for &threshold in thresholds {
        let req = ForecastRequest {
            sensors: sensors.to_vec(),
            context: opts.context,
            cycles: opts.cycles,
            threshold,
        };
        let combined = request_universe(model, sensors, threshold)?;
        let result = autoregressive_forecast(model, timing, &req)?;
        let tokens: usize = result.tokens_per_cycle.iter().sum();
        let ops_analytic = result
            .tokens_per_cycle
            .iter()
            .map(|&s| estimate_ops(s, &model.config).total_ops)
            .sum();
        let stats = profile(
            || autoregressive_forecast(model, timing, &req),
            opts.warmups,
            opts.reps,
        )?;
        let mse = if eval.is_empty() {
            f64::NAN
        } else {
            evaluate(model, eval, std::slice::from_ref(&req))?.mean
        };
        rows.push(SweepRow {
            threshold,
            sparsity: 1.0 - tokens as f64 / dense,
            tokens,
            inputs: combined.inputs.len(),
            ops_counted: result.flops_per_cycle.iter().sum(),
            ops_analytic,
            median_s: stats.median_s,
            spread_s: stats.spread_s,
            memory_bytes: result.memory_per_cycle.iter().copied().max().unwrap_or(0),
            mse,
        });
    }
    Ok(rows)
}

/// One row per sensor-subset size for the selection experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionRow {
    pub sensors: Vec<usize>,
    pub union_inputs: usize,
    pub sparsity: f64,
    pub tokens: usize,
    pub median_s: f64,
    pub memory_bytes: u64,
}

/// Forecast cost of each requested sensor subset at one threshold.
pub fn selection_sweep<F: Float>(
    model: &Model<F>,
    timing: &Window,
    subsets: &[Vec<usize>],
    threshold: f64,
    opts: SweepOptions,
) -> Result<Vec<SelectionRow>> {
    let dense = dense_tokens(model.m, model.n, opts.context, opts.cycles) as f64;
    subsets
        .iter()
        .map(|sensors| {
            let req = ForecastRequest {
                sensors: sensors.clone(),
                context: opts.context,
                cycles: opts.cycles,
                threshold,
            };
            let combined = request_universe(model, sensors, threshold)?;
            let result = autoregressive_forecast(model, timing, &req)?;
            let stats = profile(|| autoregressive_forecast(model, timing, &req), opts.warmups, opts.reps)?;
            let tokens: usize = result.tokens_per_cycle.iter().sum();
            Ok(SelectionRow {
                sensors: sensors.clone(),
                union_inputs: combined.inputs.len(),
                sparsity: 1.0 - tokens as f64 / dense,
                tokens,
                median_s: stats.median_s,
                memory_bytes: result.memory_per_cycle.iter().copied().max().unwrap_or(0),
            })
        })
        .collect()
}

/// Writes serializable rows as CSV with a header.
pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| invalid(format!("{}: {e}", path.display())))?;
    for r in rows {
        w.serialize(r).map_err(|e| invalid(format!("{}: {e}", path.display())))?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    fs::write(path, serde_json::to_vec_pretty(value)?)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Graph;
    use crate::relevance::combine_sets;
    use crate::relevance::InputSet;
    use crate::tokenizer::{PatchSequence, PatchToken, TokenKind};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn request(m: usize, inputs: &[usize], sensors: &[usize]) -> CombinedRequest {
        let sets: Vec<InputSet> = sensors
            .iter()
            .map(|&j| InputSet {
                sensor: j,
                variates: inputs.iter().copied().chain([m + j]).collect(),
                threshold: None,
            })
            .collect();
        combine_sets(m, &sets).unwrap()
    }

    #[test]
    fn dense_and_single_token_counts() {
        let all: Vec<usize> = (0..862).collect();
        let sensors: Vec<usize> = (0..16).collect();
        assert_eq!(count_tokens(&request(862, &all, &sensors), 862, 6), 6 * 878 + 16);
        let nine: Vec<usize> = (0..9).collect();
        assert_eq!(count_tokens(&request(20, &nine, &[3]), 20, 6), 61);
    }

    fn generic_sequence(req: &CombinedRequest, m: usize, slots: usize) -> PatchSequence {
        let mut items = Vec::new();
        for v in req.universe(m) {
            for slot in 1..=slots {
                items.push((
                    PatchToken {
                        variate: v,
                        slot,
                        kind: TokenKind::Content,
                    },
                    Some(vec![0.0; 2]),
                ));
            }
        }
        for &j in &req.sensors {
            items.push((
                PatchToken {
                    variate: m + j,
                    slot: slots,
                    kind: TokenKind::Prototype,
                },
                None,
            ));
        }
        PatchSequence::from_tokens(m, 2, items).unwrap()
    }

    #[test]
    fn counts_match_assembled_sequences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..50 {
            let m = rng.gen_range(1..12);
            let n = rng.gen_range(1..4);
            let inputs: Vec<usize> = (0..m).filter(|_| rng.gen_bool(0.5)).collect();
            let sensors: Vec<usize> = (0..n).filter(|_| rng.gen_bool(0.6)).collect();
            if sensors.is_empty() {
                continue;
            }
            let req = request(m, &inputs, &sensors);
            let slots = rng.gen_range(1..5);
            assert_eq!(generic_sequence(&req, m, slots).len(), count_tokens(&req, m, slots));
        }
    }

    #[test]
    fn polynomial_identities() {
        let cfg = ModelConfig::default();
        let a = estimate_ops(100, &cfg);
        let b = estimate_ops(200, &cfg);
        assert_eq!(b.attention_quadratic_ops, 4 * a.attention_quadratic_ops);
        assert_eq!(b.attention_linear_ops, 2 * a.attention_linear_ops);
        assert_eq!(b.feed_forward_ops, 2 * a.feed_forward_ops);
        assert_eq!(b.embedding_ops, 2 * a.embedding_ops);
        let one = estimate_ops(1, &cfg);
        assert_eq!(one.attention_quadratic_ops, cfg.layers as u64 * 4 * cfg.d as u64);
        assert_eq!(
            a.total_ops,
            a.attention_ops() + a.feed_forward_ops + a.embedding_ops
        );
        let mut last = 0;
        for s in 0..300 {
            let t = estimate_ops(s, &cfg).total_ops;
            assert!(t >= last);
            last = t;
        }
    }

    #[test]
    fn analytic_matches_instrumented_forward() {
        let cfg = ModelConfig::default();
        let model = Model::<f32>::new(cfg, 64, 2, 0).unwrap();
        for s_target in [32usize, 256] {
            // Inputs over 4 slots plus one prototype: s = 4·k + 1.
            let k = (s_target - 1) / 4;
            let req = request(64, &(0..k).collect::<Vec<_>>(), &[0]);
            let mut items = Vec::new();
            for &a in &req.inputs {
                for slot in 1..=4 {
                    items.push((
                        PatchToken {
                            variate: a,
                            slot,
                            kind: TokenKind::Content,
                        },
                        Some(vec![0.1; cfg.patch]),
                    ));
                }
            }
            items.push((
                PatchToken {
                    variate: 64,
                    slot: 4,
                    kind: TokenKind::Prototype,
                },
                None,
            ));
            let seq = PatchSequence::from_tokens(64, cfg.patch, items).unwrap();
            let mut g = Graph::<f32>::new();
            let bias = model.bias(&mut g, &seq, &[0]).unwrap();
            model.forward(&mut g, &seq, None, Some(bias), None).unwrap();
            let counted = g.flops() as f64;
            let analytic = estimate_ops(seq.len(), &cfg).total_ops as f64;
            assert!(((counted - analytic) / counted).abs() <= 0.10, "s={}: {counted} vs {analytic}", seq.len());
        }
    }

    #[test]
    fn noop_profile() {
        let st = profile(|| (), 3, 5).unwrap();
        assert!(st.median_s >= 0.0);
        assert!(st.relative_spread() <= 1.0);
        assert_eq!(st.samples.len(), 5);
        assert!(profile(|| (), 0, 0).is_err());
    }

    #[test]
    fn busy_loop_calibration() {
        let busy = |n: u64| {
            move || {
                let mut x = 0u64;
                for i in 0..n {
                    x = black_box(x.wrapping_mul(6364136223846793005).wrapping_add(i));
                }
                x
            }
        };
        let a = profile(busy(2_000_000), 3, 7).unwrap().median_s;
        let b = profile(busy(4_000_000), 3, 7).unwrap().median_s;
        let ratio = b / a;
        assert!((1.6..=2.4).contains(&ratio), "ratio {ratio}");
    }

    #[test]
    fn quadratic_curve_slope() {
        let pts: Vec<(f64, f64)> = (1..=16).map(|i| {
            let x = i as f64 / 16.0;
            (1.0 - x, 3.0 * x * x)
        }).collect();
        let fit = fit_scaling_slopes(&pts).unwrap();
        assert!((fit.dense.slope - 2.0).abs() <= 0.01);
        assert!((fit.sparse.slope - 2.0).abs() <= 0.01);
    }

    #[test]
    fn two_regime_curve() {
        // a·x² + b·x with the crossover x = b/a in the middle of a wide grid.
        let (a, b) = (1.0, 1e-2);
        let pts: Vec<(f64, f64)> = (0..=24)
            .map(|i| {
                let x = 10f64.powf(-4.0 + 4.0 * i as f64 / 24.0);
                (1.0 - x, a * x * x + b * x)
            })
            .collect();
        let fit = fit_scaling_slopes(&pts).unwrap();
        assert!((1.7..=2.3).contains(&fit.dense.slope), "{fit:?}");
        assert!((0.8..=1.3).contains(&fit.sparse.slope), "{fit:?}");
    }

    #[test]
    fn degenerate_sweeps_are_rejected() {
        assert!(fit_scaling_slopes(&[(0.5, 1.0); 10]).is_err());
        assert!(fit_scaling_slopes(&[(0.1, 1.0), (0.2, 2.0), (0.3, 3.0)]).is_err());
        assert!(fit_scaling_slopes(&[(1.0, 1.0); 8]).is_err());
    }

    #[test]
    fn thresholds_select_requested_sizes() {
        let r = [0.3, 2.0, -1.0, 1.5, 0.9, 7.0, 7.0];
        let th = thresholds_for_sizes(&r, 5, &[0, 1, 3, 5]).unwrap();
        let sizes: Vec<usize> = th.iter().map(|&t| r[..5].iter().filter(|&&x| x >= t).count()).collect();
        assert_eq!(sizes, vec![0, 1, 3, 5]);
        assert!(thresholds_for_sizes(&r, 5, &[6]).is_err());
    }

    #[test]
    fn cycle_counts_match_forecast() {
        use crate::datasets::{compute_norm_stats, generate_synthetic_uncorrelated, make_windows, Split, WindowSpec};
        let fam = generate_synthetic_uncorrelated(5, 600, &[1, 4], 2, 3).unwrap();
        let stats = compute_norm_stats(&fam, 0.7).unwrap();
        let spec = WindowSpec {
            context: 2,
            horizon: 3,
            patch: 4,
            stride: 20,
        };
        let w = make_windows(&fam, &spec, &stats, 0.7, Split::Validation).unwrap();
        let cfg = ModelConfig {
            layers: 1,
            heads: 2,
            d: 8,
            hidden: 8,
            patch: 4,
            dropout: 0.0,
        };
        let mut model = Model::<f32>::new(cfg, 5, 2, 0).unwrap();
        model.jitter(&mut ChaCha8Rng::seed_from_u64(1), 0.5);
        for th in [f64::NEG_INFINITY, 0.9, 1.0, 1.1, 10.0] {
            let req = request_universe(&model, &[0, 1], th).unwrap();
            let r = autoregressive_forecast(&model, &w[0], &ForecastRequest {
                sensors: vec![0, 1],
                context: 2,
                cycles: 3,
                threshold: th,
            })
            .unwrap();
            assert_eq!(r.tokens_per_cycle, forecast_tokens(&req, 2, 3));
        }
    }
}
