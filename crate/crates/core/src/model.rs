//! Causal decoder-only patch transformer with relevance-biased attention.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datasets::NormStats;
use crate::error::{invalid, Result};
use crate::numerics::{Float, Graph, ParamId, ParamStore, Tensor, Var};
use crate::relevance::RelevanceTable;
use crate::tokenizer::{dense_init, EmbeddingTables, PatchSequence};

pub mod checkpoint;

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// RNG sub-stream used for parameter initialization.
pub const INIT_STREAM: u64 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub layers: usize,
    pub heads: usize,
    pub d: usize,
    pub hidden: usize,
    pub patch: usize,
    pub dropout: f64,
}

impl Default for ModelConfig {
    /// Desk-scale configuration.
    fn default() -> Self {
        ModelConfig {
            layers: 4,
            heads: 4,
            d: 64,
            hidden: 64,
            patch: 16,
            dropout: 0.0,
        }
    }
}

impl ModelConfig {
    /// The full-size configuration: 4 layers, 4 heads, width 512, hidden
    /// 512, patches of 32 samples.
    pub fn full_scale() -> Self {
        ModelConfig {
            layers: 4,
            heads: 4,
            d: 512,
            hidden: 512,
            patch: 32,
            dropout: 0.0,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.d / self.heads
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.heads == 0 || self.d == 0 || self.hidden == 0 || self.patch == 0 {
            return Err(invalid("model dimensions must be positive"));
        }
        if !self.d.is_multiple_of(self.heads) {
            return Err(invalid(format!("{} heads do not divide width {}", self.heads, self.d)));
        }
        if !self.d.is_multiple_of(2) {
            return Err(invalid(format!("width {} must be even for the time embedding", self.d)));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(invalid(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }

    /// Analytic number of trainable scalars for `m` inputs and `n` sensors.
    pub fn param_count(&self, m: usize, n: usize) -> usize {
        let (d, h, p) = (self.d, self.hidden, self.patch);
        let embed = p * h + h + h * d + d;
        let head = d * h + h + h * p + p;
        let variates = (m + n) * d;
        // Keys carry no bias: it shifts every score of a query equally.
        let layer = 4 * d + 4 * d * d + 3 * d + (d * h + h) + (h * d + d);
        let relevance = n * (m + n);
        embed + head + variates + self.layers * layer + 2 * d + relevance
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LayerIds {
    pub norm1_gain: ParamId,
    pub norm1_offset: ParamId,
    pub wq: ParamId,
    pub bq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub bv: ParamId,
    pub wo: ParamId,
    pub bo: ParamId,
    pub norm2_gain: ParamId,
    pub norm2_offset: ParamId,
    pub ff_w1: ParamId,
    pub ff_b1: ParamId,
    pub ff_w2: ParamId,
    pub ff_b2: ParamId,
}

/// All trainable tensors plus the ids that locate them.
#[derive(Debug, Clone)]
pub struct Model<F> {
    pub config: ModelConfig,
    pub m: usize,
    pub n: usize,
    pub store: ParamStore<F>,
    pub tables: EmbeddingTables,
    pub layers: Vec<LayerIds>,
    pub final_gain: ParamId,
    pub final_offset: ParamId,
    pub relevance: RelevanceTable,
    /// Normalization statistics of the training split, when known.
    pub norm: Option<NormStats>,
}

/// Block-causal allow matrix: token `a` may attend to token `b` iff
/// `slot(b) ≤ slot(a)`.
pub fn causal_mask(seq: &PatchSequence) -> Vec<bool> {
    let slots = seq.slots();
    let s = slots.len();
    let mut out = vec![false; s * s];
    for a in 0..s {
        for b in 0..s {
            out[a * s + b] = slots[b] <= slots[a];
        }
    }
    out
}

fn ones<F: Float>(n: usize) -> Tensor<F> {
    Tensor::filled([n], F::one())
}

impl<F: Float> Model<F> {
    pub fn new(config: ModelConfig, m: usize, n: usize, seed: u64) -> Result<Self> {
        config.validate()?;
        if m == 0 {
            return Err(invalid("model needs at least one input signal"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(INIT_STREAM);
        let mut store = ParamStore::new();
        let (d, h) = (config.d, config.hidden);
        let tables = EmbeddingTables::init(&mut store, &mut rng, m, n, config.patch, h, d)?;
        let mut layers = Vec::with_capacity(config.layers);
        for l in 0..config.layers {
            let mut add = |name: &str, t: Tensor<F>| store.add(format!("layer{l}.{name}"), t);
            let lin = |rng: &mut ChaCha8Rng, fan_in: usize, shape: &[usize]| dense_init::<F, _>(rng, fan_in, shape);
            let ids = LayerIds {
                norm1_gain: add("norm1.gain", ones(d))?,
                norm1_offset: add("norm1.offset", Tensor::zeros([d]))?,
                wq: add("attn.wq", lin(&mut rng, d, &[d, d]))?,
                bq: add("attn.bq", lin(&mut rng, d, &[d]))?,
                wk: add("attn.wk", lin(&mut rng, d, &[d, d]))?,
                wv: add("attn.wv", lin(&mut rng, d, &[d, d]))?,
                bv: add("attn.bv", lin(&mut rng, d, &[d]))?,
                wo: add("attn.wo", lin(&mut rng, d, &[d, d]))?,
                bo: add("attn.bo", lin(&mut rng, d, &[d]))?,
                norm2_gain: add("norm2.gain", ones(d))?,
                norm2_offset: add("norm2.offset", Tensor::zeros([d]))?,
                ff_w1: add("ff.w1", lin(&mut rng, d, &[d, h]))?,
                ff_b1: add("ff.b1", lin(&mut rng, d, &[h]))?,
                ff_w2: add("ff.w2", lin(&mut rng, h, &[h, d]))?,
                ff_b2: add("ff.b2", lin(&mut rng, h, &[d]))?,
            };
            layers.push(ids);
        }
        let final_gain = store.add("final_norm.gain", ones(d))?;
        let final_offset = store.add("final_norm.offset", Tensor::zeros([d]))?;
        let relevance = RelevanceTable::init(&mut store, m, n)?;
        Ok(Model {
            config,
            m,
            n,
            store,
            tables,
            layers,
            final_gain,
            final_offset,
            relevance,
            norm: None,
        })
    }

    pub fn param_count(&self) -> usize {
        self.store.scalar_count()
    }

    fn p(&self, g: &mut Graph<F>, id: ParamId) -> Var {
        g.param(id, self.store.get(id))
    }

    fn linear(&self, g: &mut Graph<F>, x: Var, w: ParamId, b: ParamId) -> Result<Var> {
        let wv = self.p(g, w);
        let bv = self.p(g, b);
        let y = g.matmul(x, wv)?;
        g.add_row(y, bv)
    }

    /// Relevance bias for a sequence, averaged over the requested sensors.
    pub fn bias(&self, g: &mut Graph<F>, seq: &PatchSequence, sensors: &[usize]) -> Result<Var> {
        self.relevance.bias_var(g, &self.store, sensors, &seq.variates())
    }

    /// Multi-head attention sub-layer on already-normalized input `x`.
    #[allow(clippy::too_many_arguments)]
    pub fn attention_layer(
        &self,
        g: &mut Graph<F>,
        layer: &LayerIds,
        x: Var,
        bias: Option<Var>,
        allow: &[bool],
        rng: Option<&mut ChaCha8Rng>,
    ) -> Result<Var> {
        let s = g.shape(x)[0];
        if (0..s).any(|a| !allow[a * s..(a + 1) * s].iter().any(|&v| v)) {
            return Err(invalid("a query token has no key it may attend to"));
        }
        let q = self.linear(g, x, layer.wq, layer.bq)?;
        let wk = self.p(g, layer.wk);
        let k = g.matmul(x, wk)?;
        let v = self.linear(g, x, layer.wv, layer.bv)?;
        let rate = self.config.dropout;
        let att = match rng {
            Some(r) if rate > 0.0 => g.attention(q, k, v, bias, allow, self.config.heads, Some((rate, r)))?,
            _ => g.attention::<ChaCha8Rng>(q, k, v, bias, allow, self.config.heads, None)?,
        };
        self.linear(g, att, layer.wo, layer.bo)
    }

    /// Full forward pass: per-token `p`-vector predictions (`s × p`).
    ///
    /// `content` replaces the sequence's own content rows (used when
    /// predictions are fed back on the graph). Dropout is active only when
    /// an RNG is given.
    pub fn forward(
        &self,
        g: &mut Graph<F>,
        seq: &PatchSequence,
        content: Option<Var>,
        bias: Option<Var>,
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> Result<Var> {
        if seq.is_empty() {
            return Err(invalid("empty token sequence"));
        }
        let allow = causal_mask(seq);
        let mut x = self.tables.embed_sequence(g, &self.store, seq, content, self.m)?;
        for layer in &self.layers {
            let gain = self.p(g, layer.norm1_gain);
            let off = self.p(g, layer.norm1_offset);
            let h = g.layer_norm(x, gain, off, LAYER_NORM_EPS)?;
            let a = self.attention_layer(g, layer, h, bias, &allow, rng.as_deref_mut())?;
            x = g.add(x, a)?;

            let gain = self.p(g, layer.norm2_gain);
            let off = self.p(g, layer.norm2_offset);
            let h = g.layer_norm(x, gain, off, LAYER_NORM_EPS)?;
            let h = self.linear(g, h, layer.ff_w1, layer.ff_b1)?;
            let mut h = g.relu(h);
            if let Some(r) = rng.as_deref_mut() {
                h = g.dropout(h, self.config.dropout, r);
            }
            let h = self.linear(g, h, layer.ff_w2, layer.ff_b2)?;
            x = g.add(x, h)?;
        }
        let gain = self.p(g, self.final_gain);
        let off = self.p(g, self.final_offset);
        let x = g.layer_norm(x, gain, off, LAYER_NORM_EPS)?;
        self.tables.deembed(g, &self.store, x)
    }

    /// Random perturbation of every parameter, for tests that need a model
    /// away from its initialization.
    pub fn jitter<R: Rng + ?Sized>(&mut self, rng: &mut R, scale: f64) {
        let ids: Vec<ParamId> = self.store.ids().collect();
        for id in ids {
            for x in self.store.get_mut(id).data_mut() {
                *x += F::from_f64(rng.gen_range(-scale..scale));
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets::Window;
    use crate::tokenizer::{assemble_sequence, PatchToken, TokenKind, VirtualPlan};

    fn toy(m: usize, n: usize, seed: u64) -> Model<f64> {
        let cfg = ModelConfig {
            layers: 2,
            heads: 2,
            d: 8,
            hidden: 8,
            patch: 4,
            dropout: 0.0,
        };
        Model::new(cfg, m, n, seed).unwrap()
    }

    fn window(variates: usize, slots: usize, p: usize, seed: u64) -> Window {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Window {
            start: 0,
            patch: p,
            slots,
            data: (0..variates)
                .map(|_| (0..slots * p).map(|_| rng.gen_range(-1.0..1.0)).collect())
                .collect(),
        }
    }

    #[test]
    fn mask_single_slot_and_two_slots() {
        let w = window(3, 2, 4, 0);
        let seq = assemble_sequence(&w, 3, &[0, 1, 2], 1, &[]).unwrap();
        assert!(causal_mask(&seq).iter().all(|&v| v));
        let seq = assemble_sequence(&w, 3, &[0], 2, &[]).unwrap();
        assert_eq!(causal_mask(&seq), vec![true, false, true, true]);
    }

    #[test]
    fn param_count_matches_analytic_formula() {
        let m = toy(3, 2, 0);
        assert_eq!(m.param_count(), m.config.param_count(3, 2));
        let full = ModelConfig::full_scale();
        // Relevance vectors at the Traffic setting: 16 sensors over 878 variates.
        assert_eq!(full.param_count(862, 16) - full.param_count(862, 0) - 16 * full.d, 16 * 878);
    }

    #[test]
    fn adding_a_sensor_adds_embedding_and_relevance_only() {
        let cfg = ModelConfig::default();
        let (m, n) = (10, 3);
        let delta = cfg.param_count(m, n + 1) - cfg.param_count(m, n);
        assert_eq!(delta, cfg.d + (m + n + 1) + n);
    }

    #[test]
    fn output_shape() {
        let model = toy(2, 1, 1);
        let w = window(3, 3, 4, 1);
        let seq = assemble_sequence(
            &w,
            2,
            &[0, 1],
            3,
            &[VirtualPlan {
                variate: 2,
                content_slots: vec![2, 3],
                prototype: Some(1),
            }],
        )
        .unwrap();
        let mut g = Graph::new();
        let y = model.forward(&mut g, &seq, None, None, None).unwrap();
        assert_eq!(g.shape(y), &[9, 4]);
    }

    #[test]
    fn single_token_attention_returns_projected_value() {
        let model = toy(1, 0, 2);
        let layer = &model.layers[0];
        let mut g = Graph::new();
        let x = g.constant([1, 8], (0..8).map(|i| i as f64 * 0.1).collect()).unwrap();
        let out = model.attention_layer(&mut g, layer, x, None, &[true], None).unwrap();
        let v = model.linear(&mut g, x, layer.wv, layer.bv).unwrap();
        let want = model.linear(&mut g, v, layer.wo, layer.bo).unwrap();
        for (a, b) in g.value(out).iter().zip(g.value(want)) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn hand_computed_two_token_attention() {
        // One head, d = 2, identity projections without biases.
        let cfg = ModelConfig {
            layers: 1,
            heads: 1,
            d: 2,
            hidden: 2,
            patch: 1,
            dropout: 0.0,
        };
        let mut model = Model::<f64>::new(cfg, 1, 0, 0).unwrap();
        let l = model.layers[0].clone();
        for w in [l.wq, l.wk, l.wv, l.wo] {
            model.store.get_mut(w).data_mut().copy_from_slice(&[1.0, 0.0, 0.0, 1.0]);
        }
        for b in [l.bq, l.bv, l.bo] {
            model.store.get_mut(b).data_mut().fill(0.0);
        }
        let x = [1.0, 0.0, 0.5, 2.0];
        let bias = [0.0, 1.0, 1.0, 0.0];
        let mut g = Graph::new();
        let xv = g.constant([2, 2], x.to_vec()).unwrap();
        let bv = g.constant([2, 2], bias.to_vec()).unwrap();
        let out = model
            .attention_layer(&mut g, &l, xv, Some(bv), &[true; 4], None)
            .unwrap();
        let scale = 1.0 / 2f64.sqrt();
        for a in 0..2 {
            let s: Vec<f64> = (0..2)
                .map(|b| (x[a * 2] * x[b * 2] + x[a * 2 + 1] * x[b * 2 + 1]) * scale + bias[a * 2 + b])
                .collect();
            let z = s[0].exp() + s[1].exp();
            let w = [s[0].exp() / z, s[1].exp() / z];
            for c in 0..2 {
                let want = w[0] * x[c] + w[1] * x[2 + c];
                assert!((g.value(out)[a * 2 + c] - want).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn constant_bias_is_a_no_op() {
        let model = toy(2, 1, 3);
        let w = window(3, 2, 4, 3);
        let seq = assemble_sequence(
            &w,
            2,
            &[0, 1],
            2,
            &[VirtualPlan {
                variate: 2,
                content_slots: vec![2],
                prototype: Some(1),
            }],
        )
        .unwrap();
        let s = seq.len();
        let mut g = Graph::new();
        let y0 = model.forward(&mut g, &seq, None, None, None).unwrap();
        let b = g.constant([s, s], vec![3.7; s * s]).unwrap();
        let y1 = model.forward(&mut g, &seq, None, Some(b), None).unwrap();
        for (a, b) in g.value(y0).iter().zip(g.value(y1)) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn forward_is_deterministic() {
        let model = toy(2, 1, 4);
        let w = window(3, 2, 4, 4);
        let seq = assemble_sequence(&w, 2, &[0, 1], 2, &[]).unwrap();
        let run = || {
            let mut g = Graph::new();
            let b = model.bias(&mut g, &seq, &[0]).unwrap();
            let y = model.forward(&mut g, &seq, None, Some(b), None).unwrap();
            g.value(y).to_vec()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn within_slot_permutation_is_equivariant() {
        let mut model = toy(3, 1, 5);
        model.jitter(&mut ChaCha8Rng::seed_from_u64(1), 0.3);
        let w = window(4, 2, 4, 5);
        let seq = assemble_sequence(
            &w,
            3,
            &[0, 1, 2],
            2,
            &[VirtualPlan {
                variate: 3,
                content_slots: vec![2],
                prototype: Some(1),
            }],
        )
        .unwrap();
        // Reverse the order of tokens inside slot 1 (positions 0..4).
        let perm = [3usize, 2, 1, 0, 4, 5, 6, 7];
        let mut tokens: Vec<PatchToken> = perm.iter().map(|&i| seq.tokens[i]).collect();
        let rows = seq.content_positions();
        let mut patches = Vec::new();
        for &i in &perm {
            if let Some(r) = rows.iter().position(|&x| x == i) {
                patches.push(seq.patches[r].clone());
            }
        }
        let permuted = PatchSequence {
            tokens: std::mem::take(&mut tokens),
            patches,
            patch_len: 4,
        };
        assert_eq!(permuted.tokens[0].kind, TokenKind::Prototype);
        let mut g = Graph::new();
        let b = model.bias(&mut g, &seq, &[0]).unwrap();
        let y = model.forward(&mut g, &seq, None, Some(b), None).unwrap();
        let bp = model.bias(&mut g, &permuted, &[0]).unwrap();
        let yp = model.forward(&mut g, &permuted, None, Some(bp), None).unwrap();
        for (k, &i) in perm.iter().enumerate() {
            for c in 0..4 {
                let (a, b) = (g.value(y)[i * 4 + c], g.value(yp)[k * 4 + c]);
                assert!((a - b).abs() < 1e-10, "token {i}: {a} vs {b}");
            }
        }
    }
}
