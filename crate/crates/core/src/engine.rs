//! Training and inference.
//!
//! Decoding: every virtual-sensor token at slot `t` predicts that sensor's
//! patch `t + 1`. A prototype is a zero-content virtual token marking where a
//! sensor's prediction starts.
//!
//! Teacher forcing builds one sequence per window over slots `1..W-1`. Each
//! requested sensor gets a random start slot `c_j`: a prototype there,
//! ground-truth content after it, and no tokens before it. The loss is the
//! MSE of all virtual-token predictions against the next ground-truth patch.
//! Autoregressive inference uses exactly this layout with `c_j = c` and the
//! model's own predictions in place of ground truth.

use std::time::Instant;

use rand::seq::index::sample;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datasets::Window;
use crate::error::{invalid, Error, Result};
use crate::model::Model;
use crate::numerics::{Adam, AdamConfig, Float, Gradients, Graph, LrSchedule, Var};
use crate::relevance::{combine_requests, combine_sets, CombinedRequest, InputSet};
use crate::tokenizer::{PatchSequence, PatchToken, TokenKind};

/// Named RNG sub-streams derived from the run seed.
pub mod streams {
    pub const DATA: u64 = 0;
    pub const INIT: u64 = crate::model::INIT_STREAM;
    pub const SUBSET: u64 = 2;
    pub const DROPOUT: u64 = 3;
    pub const PROTOTYPE: u64 = 4;
    pub const SHUFFLE: u64 = 5;
}

pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Sensors per training step.
    pub n_train: usize,
    pub batch_size: usize,
    pub epochs: usize,
    pub patience: usize,
    pub seed: u64,
    pub schedule: LrSchedule,
    pub adam: AdamConfig,
    pub dropout: f64,
    /// Relevance threshold applied to training sequences from
    /// `sparsify_from_epoch` on; `None` trains dense.
    pub threshold: Option<f64>,
    pub sparsify_from_epoch: usize,
    /// Learning-rate multiplier for the relevance vectors.
    pub relevance_lr_scale: f64,
    pub max_steps_per_epoch: Option<usize>,
    pub max_val_windows: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            n_train: 4,
            batch_size: 32,
            epochs: 80,
            patience: 9,
            seed: 2025,
            schedule: LrSchedule::default(),
            adam: AdamConfig::default(),
            dropout: 0.0,
            threshold: None,
            sparsify_from_epoch: 0,
            relevance_lr_scale: 1.0,
            max_steps_per_epoch: None,
            max_val_windows: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForecastRequest {
    /// Sensor indices (0-based over the virtual sensors).
    pub sensors: Vec<usize>,
    pub context: usize,
    pub cycles: usize,
    /// Relevance threshold; `-inf` keeps every variate.
    pub threshold: f64,
}

impl ForecastRequest {
    pub fn dense(sensors: Vec<usize>, context: usize, cycles: usize) -> Self {
        ForecastRequest {
            sensors,
            context,
            cycles,
            threshold: f64::NEG_INFINITY,
        }
    }

    fn validate(&self, n: usize) -> Result<()> {
        if self.sensors.is_empty() {
            return Err(invalid("forecast request names no sensors"));
        }
        if let Some(&j) = self.sensors.iter().find(|&&j| j >= n) {
            return Err(invalid(format!("sensor {j} outside 0..{n}")));
        }
        if self.cycles == 0 || self.context == 0 {
            return Err(invalid("context and cycle counts must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForecastResult {
    pub sensors: Vec<usize>,
    /// Per sensor, `K·p` predicted normalized samples for slots `c+1..c+K`.
    pub predictions: Vec<Vec<f64>>,
    /// Matching ground truth.
    pub targets: Vec<Vec<f64>>,
    pub mse: Vec<f64>,
    pub tokens_per_cycle: Vec<usize>,
    pub flops_per_cycle: Vec<u64>,
    pub memory_per_cycle: Vec<u64>,
}

pub fn mse(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len().max(1) as f64
}

/// Uniform subset of `n_train` of the `n` sensors, ascending.
pub fn sample_subset<R: Rng + ?Sized>(n: usize, n_train: usize, rng: &mut R) -> Result<Vec<usize>> {
    if n_train > n {
        return Err(invalid(format!("cannot draw {n_train} of {n} sensors")));
    }
    if n_train == 0 {
        return Err(invalid("subset size must be at least 1"));
    }
    let mut s = sample(rng, n, n_train).into_vec();
    s.sort_unstable();
    Ok(s)
}

/// Variate universe of a request at a threshold.
pub fn request_universe<F: Float>(model: &Model<F>, sensors: &[usize], threshold: f64) -> Result<CombinedRequest> {
    let rows = model.relevance.rows_f64(&model.store);
    combine_requests(&rows, model.m, sensors, threshold)
}

/// Teacher-forcing sequence for one window, with the positions whose
/// predictions enter the loss and the ground-truth patch each should match.
pub struct ForcedSequence {
    pub sequence: PatchSequence,
    pub positions: Vec<usize>,
    pub targets: Vec<f64>,
}

/// Builds the teacher-forcing layout. `starts[i]` is the prototype slot of
/// `request.sensors[i]`, in `1..W`.
pub fn forced_sequence(window: &Window, m: usize, request: &CombinedRequest, starts: &[usize]) -> Result<ForcedSequence> {
    let w = window.slots;
    if w < 2 {
        return Err(Error::WindowTooLong {
            needed: 2 * window.patch,
            available: w * window.patch,
        });
    }
    let last = w - 1;
    let mut items = Vec::new();
    for &a in &request.inputs {
        for slot in 1..=last {
            items.push((
                PatchToken {
                    variate: a,
                    slot,
                    kind: TokenKind::Content,
                },
                Some(window.patch(a, slot).to_vec()),
            ));
        }
    }
    for (&j, &c) in request.sensors.iter().zip(starts) {
        if c == 0 || c > last {
            return Err(invalid(format!("prototype slot {c} outside 1..={last}")));
        }
        let v = m + j;
        items.push((
            PatchToken {
                variate: v,
                slot: c,
                kind: TokenKind::Prototype,
            },
            None,
        ));
        for slot in c + 1..=last {
            items.push((
                PatchToken {
                    variate: v,
                    slot,
                    kind: TokenKind::Content,
                },
                Some(window.patch(v, slot).to_vec()),
            ));
        }
    }
    let sequence = PatchSequence::from_tokens(m, window.patch, items)?;
    let mut positions = Vec::new();
    let mut targets = Vec::new();
    for (i, t) in sequence.tokens.iter().enumerate() {
        if t.variate >= m {
            positions.push(i);
            targets.extend_from_slice(window.patch(t.variate, t.slot + 1));
        }
    }
    Ok(ForcedSequence {
        sequence,
        positions,
        targets,
    })
}

/// MSE of the model output at `positions` against `targets`.
pub fn virtual_loss<F: Float>(g: &mut Graph<F>, output: Var, positions: &[usize], targets: &[f64]) -> Result<Var> {
    let p = g.shape(output)[1];
    let pred = g.gather_rows(output, positions)?;
    let t = g.constant([positions.len(), p], targets.iter().map(|&x| F::from_f64(x)).collect())?;
    g.mse(pred, t)
}

/// Records the teacher-forcing loss of one window on `g`.
pub fn forced_loss<F: Float>(
    model: &Model<F>,
    g: &mut Graph<F>,
    forced: &ForcedSequence,
    sensors: &[usize],
    dropout: Option<&mut ChaCha8Rng>,
) -> Result<Var> {
    let bias = model.bias(g, &forced.sequence, sensors)?;
    let out = model.forward(g, &forced.sequence, None, Some(bias), dropout)?;
    virtual_loss(g, out, &forced.positions, &forced.targets)
}

/// Token layout of autoregressive cycle `k` (1-based): inputs at slots
/// `1..=c+k-1`; per sensor a prototype at `c` and fed-back content at
/// `c+1..=c+k-1`. Fed-back rows are zero placeholders here.
fn cycle_sequence(window: &Window, m: usize, request: &CombinedRequest, c: usize, k: usize) -> Result<PatchSequence> {
    let top = c + k - 1;
    let p = window.patch;
    let mut items = Vec::new();
    for &a in &request.inputs {
        for slot in 1..=top {
            items.push((
                PatchToken {
                    variate: a,
                    slot,
                    kind: TokenKind::Content,
                },
                Some(window.patch(a, slot).to_vec()),
            ));
        }
    }
    for &j in &request.sensors {
        items.push((
            PatchToken {
                variate: m + j,
                slot: c,
                kind: TokenKind::Prototype,
            },
            None,
        ));
        for slot in c + 1..=top {
            items.push((
                PatchToken {
                    variate: m + j,
                    slot,
                    kind: TokenKind::Content,
                },
                Some(vec![0.0; p]),
            ));
        }
    }
    PatchSequence::from_tokens(m, p, items)
}

fn check_window(window: &Window, c: usize, k: usize) -> Result<()> {
    if window.slots < c + k {
        return Err(Error::WindowTooLong {
            needed: (c + k) * window.patch,
            available: window.slots * window.patch,
        });
    }
    Ok(())
}

/// Feedback source for [`autoregressive_forecast_with`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Feedback {
    /// The model's own previous predictions (normal inference).
    Predictions,
    /// Ground-truth patches (oracle for consistency checks).
    GroundTruth,
}

pub fn autoregressive_forecast<F: Float>(model: &Model<F>, window: &Window, request: &ForecastRequest) -> Result<ForecastResult> {
    autoregressive_forecast_with(model, window, request, Feedback::Predictions)
}

/// Runs `K` cycles, one forward pass each, reading the prediction of every
/// requested sensor at its newest virtual token.
pub fn autoregressive_forecast_with<F: Float>(
    model: &Model<F>,
    window: &Window,
    request: &ForecastRequest,
    feedback: Feedback,
) -> Result<ForecastResult> {
    request.validate(model.n)?;
    let combined = request_universe(model, &request.sensors, request.threshold)?;
    forecast_combined(model, window, &combined, request.context, request.cycles, feedback)
}

/// Forecast over an explicit variate universe (for example baseline input
/// sets); the bias still comes from the model's relevance vectors.
pub fn forecast_combined<F: Float>(
    model: &Model<F>,
    window: &Window,
    combined: &CombinedRequest,
    context: usize,
    cycles: usize,
    feedback: Feedback,
) -> Result<ForecastResult> {
    let (c, kk, p, m) = (context, cycles, window.patch, model.m);
    if c == 0 || kk == 0 {
        return Err(invalid("context and cycle counts must be positive"));
    }
    check_window(window, c, kk)?;
    let sensors = combined.sensors.clone();
    let mut preds: Vec<Vec<f64>> = vec![Vec::with_capacity(kk * p); sensors.len()];
    let mut result = ForecastResult {
        sensors: sensors.clone(),
        predictions: Vec::new(),
        targets: Vec::new(),
        mse: Vec::new(),
        tokens_per_cycle: Vec::new(),
        flops_per_cycle: Vec::new(),
        memory_per_cycle: Vec::new(),
    };
    for k in 1..=kk {
        let mut seq = cycle_sequence(window, m, combined, c, k)?;
        for (i, &j) in sensors.iter().enumerate() {
            for slot in c + 1..c + k {
                let row = seq.content_row(m + j, slot).expect("fed-back token present");
                seq.patches[row] = match feedback {
                    Feedback::Predictions => preds[i][(slot - c - 1) * p..(slot - c) * p].to_vec(),
                    Feedback::GroundTruth => window.patch(m + j, slot).to_vec(),
                };
            }
        }
        let mut g = Graph::<F>::new();
        let bias = model.bias(&mut g, &seq, &sensors)?;
        let out = model.forward(&mut g, &seq, None, Some(bias), None)?;
        let ov = g.value(out);
        for (i, &j) in sensors.iter().enumerate() {
            let pos = seq.position(m + j, c + k - 1).expect("newest virtual token present");
            preds[i].extend(ov[pos * p..(pos + 1) * p].iter().map(|x| x.to_f64()));
        }
        result.tokens_per_cycle.push(seq.len());
        result.flops_per_cycle.push(g.flops());
        result.memory_per_cycle.push(g.payload_bytes());
    }
    for (i, &j) in sensors.iter().enumerate() {
        let target = window.data[m + j][c * p..(c + kk) * p].to_vec();
        result.mse.push(mse(&preds[i], &target));
        result.targets.push(target);
    }
    result.predictions = preds;
    Ok(result)
}

/// Summed per-cycle MSE of a `K`-cycle rollout recorded on one graph, with
/// predictions fed back as graph values so gradients flow through the
/// recurrence. `detach` cuts that path (for comparison only).
pub fn rollout_loss<F: Float>(
    model: &Model<F>,
    g: &mut Graph<F>,
    window: &Window,
    request: &CombinedRequest,
    context: usize,
    cycles: usize,
    detach: bool,
    mut dropout: Option<&mut ChaCha8Rng>,
) -> Result<Var> {
    let (c, p, m) = (context, window.patch, model.m);
    check_window(window, c, cycles)?;
    let sensors = &request.sensors;
    // fed[i][q] is the prediction of sensor i for slot c+1+q.
    let mut fed: Vec<Vec<Var>> = vec![Vec::new(); sensors.len()];
    let mut total: Option<Var> = None;
    for k in 1..=cycles {
        let seq = cycle_sequence(window, m, request, c, k)?;
        let content = if k == 1 {
            None
        } else {
            let rows = seq.patches.len();
            let base = g.constant(
                [rows, p],
                seq.patches.iter().flat_map(|r| r.iter().map(|&x| F::from_f64(x))).collect(),
            )?;
            let mut parts = Vec::new();
            let mut dest = Vec::new();
            for (i, &j) in sensors.iter().enumerate() {
                for slot in c + 1..c + k {
                    dest.push(seq.content_row(m + j, slot).expect("fed-back token present"));
                    parts.push(fed[i][slot - c - 1]);
                }
            }
            let stacked = g.concat_rows(&parts)?;
            let placed = g.scatter_rows(stacked, &dest, rows)?;
            Some(g.add(base, placed)?)
        };
        let bias = model.bias(g, &seq, sensors)?;
        let out = model.forward(g, &seq, content, Some(bias), dropout.as_deref_mut())?;
        let positions: Vec<usize> = sensors
            .iter()
            .map(|&j| seq.position(m + j, c + k - 1).expect("newest virtual token present"))
            .collect();
        let pred = g.gather_rows(out, &positions)?;
        let mut target = Vec::with_capacity(sensors.len() * p);
        for &j in sensors {
            target.extend(window.patch(m + j, c + k).iter().map(|&x| F::from_f64(x)));
        }
        let target = g.constant([sensors.len(), p], target)?;
        let loss = g.mse(pred, target)?;
        total = Some(match total {
            Some(t) => g.add(t, loss)?,
            None => loss,
        });
        for i in 0..sensors.len() {
            let row = g.gather_rows(pred, &[i])?;
            fed[i].push(if detach { g.detach(row) } else { row });
        }
    }
    Ok(total.expect("at least one cycle"))
}

/// Per-sensor and aggregate evaluation MSE.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// `(sensor, mean MSE over windows)`, ascending by sensor.
    pub per_sensor: Vec<(usize, f64)>,
    pub mean: f64,
    pub windows: usize,
}

/// Mean MSE per sensor over all windows and requests.
pub fn evaluate<F: Float>(model: &Model<F>, windows: &[Window], requests: &[ForecastRequest]) -> Result<EvalReport> {
    evaluate_results(&forecast_all(model, windows, requests)?, windows.len())
}

/// [`evaluate`] over explicit variate universes.
pub fn evaluate_combined<F: Float>(
    model: &Model<F>,
    windows: &[Window],
    requests: &[CombinedRequest],
    context: usize,
    cycles: usize,
) -> Result<EvalReport> {
    let mut out = Vec::with_capacity(windows.len() * requests.len());
    for req in requests {
        for w in windows {
            out.push(forecast_combined(model, w, req, context, cycles, Feedback::Predictions)?);
        }
    }
    evaluate_results(&out, windows.len())
}

pub fn forecast_all<F: Float>(model: &Model<F>, windows: &[Window], requests: &[ForecastRequest]) -> Result<Vec<ForecastResult>> {
    let mut out = Vec::with_capacity(windows.len() * requests.len());
    for req in requests {
        for w in windows {
            out.push(autoregressive_forecast(model, w, req)?);
        }
    }
    Ok(out)
}

pub fn evaluate_results(results: &[ForecastResult], windows: usize) -> Result<EvalReport> {
    let mut sums: std::collections::BTreeMap<usize, (f64, usize)> = Default::default();
    for r in results {
        for (&j, &e) in r.sensors.iter().zip(&r.mse) {
            let acc = sums.entry(j).or_default();
            acc.0 += e;
            acc.1 += 1;
        }
    }
    if sums.is_empty() {
        return Err(invalid("nothing to evaluate"));
    }
    let per_sensor: Vec<(usize, f64)> = sums.into_iter().map(|(j, (s, c))| (j, s / c as f64)).collect();
    let mean = per_sensor.iter().map(|x| x.1).sum::<f64>() / per_sensor.len() as f64;
    Ok(EvalReport {
        per_sensor,
        mean,
        windows,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub lr: f64,
    pub steps: usize,
    pub wall_clock_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub train_loss: Vec<f64>,
    pub val_loss: Vec<f64>,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub stopped_early: bool,
}

/// Optimizer state, RNG streams and counters around a model.
pub struct Trainer<F> {
    pub model: Model<F>,
    pub config: TrainConfig,
    pub adam: Adam<F>,
    subset_rng: ChaCha8Rng,
    prototype_rng: ChaCha8Rng,
    dropout_rng: ChaCha8Rng,
    shuffle_rng: ChaCha8Rng,
    /// Model forward passes issued by training steps.
    pub forward_passes: u64,
    pub steps: u64,
    /// Fixed input set per sensor; overrides relevance thresholding.
    pub input_sets: Option<Vec<InputSet>>,
    threshold_active: bool,
}

impl<F: Float> Trainer<F> {
    pub fn new(mut model: Model<F>, config: TrainConfig) -> Result<Self> {
        if config.n_train == 0 || config.n_train > model.n {
            return Err(invalid(format!(
                "n_train = {} must lie in 1..={}",
                config.n_train, model.n
            )));
        }
        if config.batch_size == 0 {
            return Err(invalid("batch size must be positive"));
        }
        model.config.dropout = config.dropout;
        model.config.validate()?;
        let mut adam = Adam::new(config.adam);
        for &id in &model.relevance.ids {
            adam.set_lr_scale(id, config.relevance_lr_scale);
        }
        let seed = config.seed;
        Ok(Trainer {
            model,
            adam,
            subset_rng: stream_rng(seed, streams::SUBSET),
            prototype_rng: stream_rng(seed, streams::PROTOTYPE),
            dropout_rng: stream_rng(seed, streams::DROPOUT),
            shuffle_rng: stream_rng(seed, streams::SHUFFLE),
            forward_passes: 0,
            steps: 0,
            input_sets: None,
            threshold_active: false,
            config,
        })
    }

    pub fn into_model(self) -> Model<F> {
        self.model
    }

    /// Threshold currently applied to training sequences.
    pub fn threshold(&self) -> f64 {
        match self.config.threshold {
            Some(t) if self.threshold_active => t,
            _ => f64::NEG_INFINITY,
        }
    }

    /// Variate universe used for a training or validation request.
    pub fn combined(&self, sensors: &[usize]) -> Result<CombinedRequest> {
        match &self.input_sets {
            Some(sets) => {
                let chosen: Vec<InputSet> = sensors
                    .iter()
                    .map(|&j| {
                        sets.iter()
                            .find(|s| s.sensor == j)
                            .cloned()
                            .ok_or_else(|| invalid(format!("no input set for sensor {j}")))
                    })
                    .collect::<Result<_>>()?;
                combine_sets(self.model.m, &chosen)
            }
            None => request_universe(&self.model, sensors, self.threshold()),
        }
    }

    pub fn sample_subset(&mut self) -> Result<Vec<usize>> {
        sample_subset(self.model.n, self.config.n_train, &mut self.subset_rng)
    }

    /// Gradients of the mean teacher-forcing loss over a batch, one forward
    /// pass per window. Returns the mean loss.
    pub fn forced_gradients(&mut self, windows: &[&Window], sensors: &[usize]) -> Result<(f64, Gradients<F>)> {
        let request = self.combined(sensors)?;
        let mut grads = Gradients::empty();
        let mut total = 0.0;
        for w in windows {
            let starts: Vec<usize> = request
                .sensors
                .iter()
                .map(|_| self.prototype_rng.gen_range(1..w.slots))
                .collect();
            let forced = forced_sequence(w, self.model.m, &request, &starts)?;
            let mut g = Graph::new();
            let dropout = if self.model.config.dropout > 0.0 {
                Some(&mut self.dropout_rng)
            } else {
                None
            };
            let loss = forced_loss(&self.model, &mut g, &forced, &request.sensors, dropout)?;
            self.forward_passes += 1;
            total += g.value(loss)[0].to_f64();
            grads.accumulate(g.backward(loss)?);
        }
        let b = windows.len().max(1) as f64;
        grads.scale(F::from_f64(1.0 / b));
        Ok((total / b, grads))
    }

    /// One teacher-forcing update.
    pub fn teacher_forcing_step(&mut self, windows: &[&Window], sensors: &[usize], lr: f64) -> Result<f64> {
        let (loss, grads) = self.forced_gradients(windows, sensors)?;
        self.adam.step(&mut self.model.store, &grads, lr)?;
        self.steps += 1;
        Ok(loss)
    }

    /// One BPTT update: `K` forward passes per window on a single graph.
    pub fn bptt_step(&mut self, windows: &[&Window], sensors: &[usize], context: usize, cycles: usize, lr: f64) -> Result<f64> {
        let request = self.combined(sensors)?;
        let mut grads = Gradients::empty();
        let mut total = 0.0;
        for w in windows {
            let mut g = Graph::new();
            let model = &self.model;
            let dropout = if model.config.dropout > 0.0 {
                Some(&mut self.dropout_rng)
            } else {
                None
            };
            let loss = rollout_loss(model, &mut g, w, &request, context, cycles, false, dropout)?;
            self.forward_passes += cycles as u64;
            total += g.value(loss)[0].to_f64();
            grads.accumulate(g.backward(loss)?);
        }
        let b = windows.len().max(1) as f64;
        grads.scale(F::from_f64(1.0 / b));
        self.adam.step(&mut self.model.store, &grads, lr)?;
        self.steps += 1;
        Ok(total / b)
    }

    /// Mean autoregressive MSE over all sensors on validation windows.
    /// Sensors are requested in groups of `n_train`, the request size seen
    /// in training.
    pub fn validation_loss(&self, windows: &[Window], context: usize, cycles: usize) -> Result<f64> {
        let take = self.config.max_val_windows.unwrap_or(windows.len()).min(windows.len());
        if take == 0 {
            return Err(invalid("no validation windows"));
        }
        let sensors: Vec<usize> = (0..self.model.n).collect();
        let requests: Vec<CombinedRequest> = sensors
            .chunks(self.config.n_train)
            .map(|s| self.combined(s))
            .collect::<Result<_>>()?;
        Ok(evaluate_combined(&self.model, &windows[..take], &requests, context, cycles)?.mean)
    }

    /// Teacher-forcing training with early stopping on the validation loss.
    /// The best parameters seen are restored at the end. `on_epoch` sees
    /// every epoch record and the current model as they are produced.
    pub fn train(
        &mut self,
        train: &[Window],
        val: &[Window],
        context: usize,
        cycles: usize,
        mut on_epoch: impl FnMut(&EpochLog, &Model<F>),
    ) -> Result<TrainReport> {
        if train.is_empty() {
            return Err(invalid("no training windows"));
        }
        let mut best = (f64::INFINITY, 0usize, self.model.store.clone());
        let mut train_curve = Vec::new();
        let mut val_curve = Vec::new();
        let mut stopped_early = false;
        let mut order: Vec<usize> = (0..train.len()).collect();
        for epoch in 0..self.config.epochs {
            let start = Instant::now();
            self.threshold_active = self.config.threshold.is_some() && epoch >= self.config.sparsify_from_epoch;
            let lr = self.config.schedule.lr_at(epoch as u64);
            order.shuffle(&mut self.shuffle_rng);
            let mut steps = 0;
            let mut loss_sum = 0.0;
            for chunk in order.chunks(self.config.batch_size) {
                if self.config.max_steps_per_epoch.is_some_and(|cap| steps >= cap) {
                    break;
                }
                let batch: Vec<&Window> = chunk.iter().map(|&i| &train[i]).collect();
                let sensors = self.sample_subset()?;
                loss_sum += self.teacher_forcing_step(&batch, &sensors, lr)?;
                steps += 1;
            }
            let val_loss = self.validation_loss(val, context, cycles)?;
            let log = EpochLog {
                epoch,
                train_loss: loss_sum / steps.max(1) as f64,
                val_loss,
                lr,
                steps,
                wall_clock_s: start.elapsed().as_secs_f64(),
            };
            on_epoch(&log, &self.model);
            train_curve.push(log.train_loss);
            val_curve.push(log.val_loss);
            if val_loss < best.0 {
                best = (val_loss, epoch, self.model.store.clone());
            } else if epoch - best.1 >= self.config.patience {
                stopped_early = true;
                break;
            }
        }
        self.model.store = best.2;
        Ok(TrainReport {
            train_loss: train_curve,
            val_loss: val_curve,
            best_epoch: best.1,
            best_val_loss: best.0,
            stopped_early,
        })
    }

    /// BPTT fine-tuning phase: optimizer state is reset, then `epochs`
    /// passes over the training windows. Returns the mean loss per epoch.
    pub fn finetune_bptt(&mut self, train: &[Window], context: usize, cycles: usize, epochs: usize, lr: f64) -> Result<Vec<f64>> {
        self.adam.reset();
        let mut order: Vec<usize> = (0..train.len()).collect();
        let mut out = Vec::new();
        for _ in 0..epochs {
            order.shuffle(&mut self.shuffle_rng);
            let mut steps = 0;
            let mut sum = 0.0;
            for chunk in order.chunks(self.config.batch_size) {
                if self.config.max_steps_per_epoch.is_some_and(|cap| steps >= cap) {
                    break;
                }
                let batch: Vec<&Window> = chunk.iter().map(|&i| &train[i]).collect();
                let sensors = self.sample_subset()?;
                sum += self.bptt_step(&batch, &sensors, context, cycles, lr)?;
                steps += 1;
            }
            out.push(sum / steps.max(1) as f64);
        }
        Ok(out)
    }

}
