//! Patching, token sequences, and the embedding/de-embedding tables.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::datasets::Window;
use crate::error::{invalid, Result};
use crate::numerics::{Float, Graph, ParamId, ParamStore, Tensor, Var};

/// Splits a segment into consecutive non-overlapping patches of length `p`.
pub fn patchify<T: Copy>(segment: &[T], p: usize) -> Result<Vec<Vec<T>>> {
    if p == 0 || !segment.len().is_multiple_of(p) {
        return Err(invalid(format!(
            "segment of length {} is not a multiple of the patch length {p}",
            segment.len()
        )));
    }
    Ok(segment.chunks(p).map(<[T]>::to_vec).collect())
}

/// Sinusoidal encoding of a time slot: `sin` on even dimensions, `cos` on
/// odd ones, wavelengths growing geometrically up to `10000·2π`.
pub fn time_embedding(slot: usize, d: usize) -> Result<Vec<f64>> {
    if !d.is_multiple_of(2) {
        return Err(invalid(format!("time embedding width {d} must be even")));
    }
    let mut out = vec![0.0; d];
    for i in 0..d / 2 {
        let angle = slot as f64 / 10000f64.powf(2.0 * i as f64 / d as f64);
        out[2 * i] = angle.sin();
        out[2 * i + 1] = angle.cos();
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum TokenKind {
    Content,
    Prototype,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PatchToken {
    /// Global variate id (`0..M` inputs, `M..M+N` virtual sensors).
    pub variate: usize,
    /// 1-based patch index.
    pub slot: usize,
    pub kind: TokenKind,
}

impl PatchToken {
    fn order_key(&self) -> (usize, TokenKind, usize) {
        (self.slot, self.kind, self.variate)
    }
}

/// An ordered token list. Content patches are stored row by row in the
/// order their tokens appear.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchSequence {
    pub tokens: Vec<PatchToken>,
    pub patches: Vec<Vec<f64>>,
    pub patch_len: usize,
}

impl PatchSequence {
    /// Sorts tokens slot-major, then content before prototypes, then by
    /// variate id. `content` pairs with tokens and must be `Some` exactly for
    /// content tokens.
    pub fn from_tokens(
        m: usize,
        patch_len: usize,
        items: Vec<(PatchToken, Option<Vec<f64>>)>,
    ) -> Result<Self> {
        let mut items = items;
        items.sort_by_key(|(t, _)| t.order_key());
        let mut tokens = Vec::with_capacity(items.len());
        let mut patches = Vec::new();
        for (t, c) in items {
            if t.slot == 0 {
                return Err(invalid("time slots are 1-based"));
            }
            match (t.kind, c) {
                (TokenKind::Prototype, None) => {
                    if t.variate < m {
                        return Err(invalid(format!(
                            "prototype requested for input variate {}",
                            t.variate
                        )));
                    }
                }
                (TokenKind::Content, Some(c)) => {
                    if c.len() != patch_len {
                        return Err(invalid(format!(
                            "patch of length {} for patch length {patch_len}",
                            c.len()
                        )));
                    }
                    patches.push(c);
                }
                (kind, _) => return Err(invalid(format!("{kind:?} token with mismatched content"))),
            }
            if let Some(prev) = tokens.last() {
                let prev: &PatchToken = prev;
                if prev.order_key() == t.order_key() {
                    return Err(invalid(format!(
                        "duplicate token for variate {} at slot {}",
                        t.variate, t.slot
                    )));
                }
                if t.slot > prev.slot + 1 {
                    return Err(invalid(format!("time slots jump from {} to {}", prev.slot, t.slot)));
                }
            }
            tokens.push(t);
        }
        Ok(PatchSequence {
            tokens,
            patches,
            patch_len,
        })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn variates(&self) -> Vec<usize> {
        self.tokens.iter().map(|t| t.variate).collect()
    }

    pub fn slots(&self) -> Vec<usize> {
        self.tokens.iter().map(|t| t.slot).collect()
    }

    pub fn max_slot(&self) -> usize {
        self.tokens.iter().map(|t| t.slot).max().unwrap_or(0)
    }

    /// Token positions holding content, in patch-row order.
    pub fn content_positions(&self) -> Vec<usize> {
        (0..self.tokens.len())
            .filter(|&i| self.tokens[i].kind == TokenKind::Content)
            .collect()
    }

    pub fn position(&self, variate: usize, slot: usize) -> Option<usize> {
        self.tokens
            .iter()
            .position(|t| t.variate == variate && t.slot == slot)
    }

    /// Row of `patches` holding the content of `(variate, slot)`.
    pub fn content_row(&self, variate: usize, slot: usize) -> Option<usize> {
        let mut row = 0;
        for t in &self.tokens {
            if t.kind == TokenKind::Content {
                if t.variate == variate && t.slot == slot {
                    return Some(row);
                }
                row += 1;
            }
        }
        None
    }
}

/// Tokens contributed by one virtual sensor.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VirtualPlan {
    pub variate: usize,
    /// Slots with ground-truth content.
    pub content_slots: Vec<usize>,
    pub prototype: Option<usize>,
}

/// Builds a sequence from a window: every variate in `inputs` at slots
/// `1..=input_slots`, plus each virtual sensor's content and prototype
/// tokens. Content comes from the window's ground truth.
pub fn assemble_sequence(
    window: &Window,
    m: usize,
    inputs: &[usize],
    input_slots: usize,
    virtuals: &[VirtualPlan],
) -> Result<PatchSequence> {
    let mut items = Vec::new();
    for &a in inputs {
        if a >= m {
            return Err(invalid(format!("variate {a} is not an input signal")));
        }
        for slot in 1..=input_slots {
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
    for v in virtuals {
        for &slot in &v.content_slots {
            items.push((
                PatchToken {
                    variate: v.variate,
                    slot,
                    kind: TokenKind::Content,
                },
                Some(window.patch(v.variate, slot).to_vec()),
            ));
        }
        if let Some(slot) = v.prototype {
            items.push((
                PatchToken {
                    variate: v.variate,
                    slot,
                    kind: TokenKind::Prototype,
                },
                None,
            ));
        }
    }
    PatchSequence::from_tokens(m, window.patch, items)
}

/// Parameter ids of the patch MLP, variate embeddings and output head.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EmbeddingTables {
    pub embed_w1: ParamId,
    pub embed_b1: ParamId,
    pub embed_w2: ParamId,
    pub embed_b2: ParamId,
    /// `M × d`.
    pub input_variates: ParamId,
    /// `N × d`.
    pub virtual_variates: ParamId,
    pub head_w1: ParamId,
    pub head_b1: ParamId,
    pub head_w2: ParamId,
    pub head_b2: ParamId,
    pub d: usize,
    pub patch_len: usize,
}

/// Uniform `±1/√fan_in` initialization for a dense layer.
pub(crate) fn dense_init<F: Float, R: Rng + ?Sized>(
    rng: &mut R,
    fan_in: usize,
    shape: &[usize],
) -> Tensor<F> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| F::from_f64(rng.gen_range(-bound..bound))).collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches")
}

impl EmbeddingTables {
    pub fn init<F: Float, R: Rng + ?Sized>(
        store: &mut ParamStore<F>,
        rng: &mut R,
        m: usize,
        n: usize,
        patch_len: usize,
        hidden: usize,
        d: usize,
    ) -> Result<Self> {
        let (p, h) = (patch_len, hidden);
        let variates = |rng: &mut R, rows: usize| {
            let data = (0..rows * d).map(|_| F::from_f64(rng.gen_range(-1.0..1.0))).collect();
            Tensor::new([rows, d], data).expect("shape matches")
        };
        Ok(EmbeddingTables {
            embed_w1: store.add("embed.w1", dense_init(rng, p, &[p, h]))?,
            embed_b1: store.add("embed.b1", dense_init(rng, p, &[h]))?,
            embed_w2: store.add("embed.w2", dense_init(rng, h, &[h, d]))?,
            embed_b2: store.add("embed.b2", dense_init(rng, h, &[d]))?,
            input_variates: store.add("variates.input", variates(rng, m))?,
            virtual_variates: store.add("variates.virtual", variates(rng, n))?,
            head_w1: store.add("head.w1", dense_init(rng, d, &[d, h]))?,
            head_b1: store.add("head.b1", dense_init(rng, d, &[h]))?,
            head_w2: store.add("head.w2", dense_init(rng, h, &[h, p]))?,
            head_b2: store.add("head.b2", dense_init(rng, h, &[p]))?,
            d,
            patch_len,
        })
    }

    /// Patch MLP applied to each row of `patches` (`rows × p` → `rows × d`).
    pub fn embed_patches<F: Float>(
        &self,
        g: &mut Graph<F>,
        store: &ParamStore<F>,
        patches: Var,
    ) -> Result<Var> {
        let w1 = g.param(self.embed_w1, store.get(self.embed_w1));
        let b1 = g.param(self.embed_b1, store.get(self.embed_b1));
        let w2 = g.param(self.embed_w2, store.get(self.embed_w2));
        let b2 = g.param(self.embed_b2, store.get(self.embed_b2));
        let h = g.matmul(patches, w1)?;
        let h = g.add_row(h, b1)?;
        let h = g.relu(h);
        let out = g.matmul(h, w2)?;
        g.add_row(out, b2)
    }

    /// Shared output MLP (`rows × d` → `rows × p`).
    pub fn deembed<F: Float>(&self, g: &mut Graph<F>, store: &ParamStore<F>, x: Var) -> Result<Var> {
        let w1 = g.param(self.head_w1, store.get(self.head_w1));
        let b1 = g.param(self.head_b1, store.get(self.head_b1));
        let w2 = g.param(self.head_w2, store.get(self.head_w2));
        let b2 = g.param(self.head_b2, store.get(self.head_b2));
        let h = g.matmul(x, w1)?;
        let h = g.add_row(h, b1)?;
        let h = g.relu(h);
        let out = g.matmul(h, w2)?;
        g.add_row(out, b2)
    }

    /// Constant content matrix of a sequence (`content tokens × p`).
    pub fn content_constant<F: Float>(&self, g: &mut Graph<F>, seq: &PatchSequence) -> Result<Var> {
        let data = seq
            .patches
            .iter()
            .flat_map(|p| p.iter().map(|&x| F::from_f64(x)))
            .collect();
        g.constant([seq.patches.len(), seq.patch_len], data)
    }

    /// Token embeddings `s × d`: embedded content (zero for prototypes) plus
    /// the time embedding of the slot plus the variate embedding.
    ///
    /// `content` overrides the sequence's own patches; its rows must follow
    /// the order of content tokens.
    pub fn embed_sequence<F: Float>(
        &self,
        g: &mut Graph<F>,
        store: &ParamStore<F>,
        seq: &PatchSequence,
        content: Option<Var>,
        m: usize,
    ) -> Result<Var> {
        let s = seq.len();
        let d = self.d;
        let positions = seq.content_positions();
        let mut x = if positions.is_empty() {
            g.constant([s, d], vec![F::zero(); s * d])?
        } else {
            let content = match content {
                Some(c) => c,
                None => self.content_constant(g, seq)?,
            };
            let emb = self.embed_patches(g, store, content)?;
            g.scatter_rows(emb, &positions, s)?
        };

        let mut time = Vec::with_capacity(s * d);
        for t in &seq.tokens {
            time.extend(time_embedding(t.slot, d)?.into_iter().map(F::from_f64));
        }
        let time = g.constant([s, d], time)?;
        x = g.add(x, time)?;

        let vi = g.param(self.input_variates, store.get(self.input_variates));
        let vv = g.param(self.virtual_variates, store.get(self.virtual_variates));
        let table = if store.get(self.virtual_variates).numel() == 0 {
            vi
        } else {
            g.concat_rows(&[vi, vv])?
        };
        let ids = seq.variates();
        if let Some(&bad) = ids.iter().find(|&&v| v >= m + store.get(self.virtual_variates).dims2().0)
        {
            return Err(invalid(format!("variate {bad} has no embedding")));
        }
        let var_emb = g.gather_rows(table, &ids)?;
        g.add(x, var_emb)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn window(m_plus_n: usize, slots: usize, p: usize) -> Window {
        Window {
            start: 0,
            patch: p,
            slots,
            data: (0..m_plus_n)
                .map(|v| (0..slots * p).map(|i| (v * 1000 + i) as f64).collect())
                .collect(),
        }
    }

    #[test]
    fn patch_counts() {
        let x: Vec<f64> = (0..192).map(f64::from).collect();
        let ps = patchify(&x, 32).unwrap();
        assert_eq!(ps.len(), 6);
        assert_eq!(ps.concat(), x);
        assert!(patchify(&x[..33], 32).is_err());
    }

    #[test]
    fn time_embedding_at_zero_alternates() {
        let e = time_embedding(0, 8).unwrap();
        assert_eq!(e, vec![0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
        assert!(time_embedding(1, 7).is_err());
    }

    #[test]
    fn time_embeddings_are_distinct() {
        let e: Vec<Vec<f64>> = (0..64).map(|s| time_embedding(s, 32).unwrap()).collect();
        for a in 0..64 {
            for b in a + 1..64 {
                assert_ne!(e[a], e[b]);
            }
        }
    }

    #[test]
    fn single_slot_ordering() {
        let w = window(3, 1, 4);
        let seq = assemble_sequence(
            &w,
            2,
            &[0, 1],
            1,
            &[VirtualPlan {
                variate: 2,
                content_slots: vec![],
                prototype: Some(1),
            }],
        )
        .unwrap();
        let kinds: Vec<_> = seq.tokens.iter().map(|t| (t.variate, t.kind)).collect();
        assert_eq!(
            kinds,
            vec![(0, TokenKind::Content), (1, TokenKind::Content), (2, TokenKind::Prototype)]
        );
    }

    #[test]
    fn three_slot_ordering_matches_enumeration() {
        let w = window(4, 3, 2);
        let seq = assemble_sequence(
            &w,
            3,
            &[2, 0, 1],
            3,
            &[VirtualPlan {
                variate: 3,
                content_slots: vec![1, 2],
                prototype: Some(3),
            }],
        )
        .unwrap();
        assert_eq!(seq.len(), 12);
        let mut want = Vec::new();
        for slot in 1..=3 {
            for v in 0..4 {
                let kind = if v == 3 && slot == 3 {
                    TokenKind::Prototype
                } else {
                    TokenKind::Content
                };
                want.push(PatchToken {
                    variate: v,
                    slot,
                    kind,
                });
            }
        }
        assert_eq!(seq.tokens, want);
        assert_eq!(seq.patches[0], w.patch(0, 1));
        assert_eq!(seq.content_row(3, 2), Some(7));
    }

    #[test]
    fn prototype_for_input_is_rejected() {
        let w = window(2, 1, 2);
        let err = assemble_sequence(
            &w,
            2,
            &[0],
            1,
            &[VirtualPlan {
                variate: 1,
                content_slots: vec![],
                prototype: Some(1),
            }],
        );
        assert!(err.is_err());
    }

    fn tables(m: usize, n: usize) -> (ParamStore<f64>, EmbeddingTables) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let t = EmbeddingTables::init(&mut store, &mut rng, m, n, 4, 8, 6).unwrap();
        (store, t)
    }

    #[test]
    fn embedding_and_head_shapes() {
        let (store, t) = tables(2, 1);
        let mut g = Graph::new();
        let x = g.constant([3, 4], vec![0.5; 12]).unwrap();
        let e = t.embed_patches(&mut g, &store, x).unwrap();
        assert_eq!(g.shape(e), &[3, 6]);
        let y = t.deembed(&mut g, &store, e).unwrap();
        assert_eq!(g.shape(y), &[3, 4]);
    }

    #[test]
    fn distinct_patches_embed_distinctly() {
        let (store, t) = tables(2, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let mut g = Graph::new();
        let data: Vec<f64> = (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let x = g.constant([2, 4], data).unwrap();
        let e = t.embed_patches(&mut g, &store, x).unwrap();
        assert_ne!(g.value(e)[..6], g.value(e)[6..]);
    }

    #[test]
    fn prototype_embeds_to_zero_without_embeddings() {
        let (mut store, t) = tables(2, 1);
        store.get_mut(t.virtual_variates).data_mut().fill(0.0);
        let w = window(3, 1, 4);
        let seq = assemble_sequence(
            &w,
            2,
            &[0, 1],
            1,
            &[VirtualPlan {
                variate: 2,
                content_slots: vec![],
                prototype: Some(1),
            }],
        )
        .unwrap();
        let mut g = Graph::new();
        let x = t.embed_sequence(&mut g, &store, &seq, None, 2).unwrap();
        let te = time_embedding(1, 6).unwrap();
        // Remove the time embedding; what remains of the prototype is zero.
        let row: Vec<f64> = g.value(x)[12..18].iter().zip(&te).map(|(a, b)| a - b).collect();
        assert!(row.iter().all(|v| v.abs() < 1e-15), "{row:?}");
    }

    #[test]
    fn head_output_depends_on_variate_embedding() {
        let (store, t) = tables(2, 1);
        let w = window(3, 1, 4);
        let seq = assemble_sequence(&w, 2, &[0, 1], 1, &[]).unwrap();
        let mut g = Graph::new();
        let x = t.embed_sequence(&mut g, &store, &seq, None, 2).unwrap();
        let y = t.deembed(&mut g, &store, x).unwrap();
        let mut store2 = store.clone();
        store2.get_mut(t.input_variates).data_mut()[0] += 0.5;
        let mut g2 = Graph::new();
        let x2 = t.embed_sequence(&mut g2, &store2, &seq, None, 2).unwrap();
        let y2 = t.deembed(&mut g2, &store2, x2).unwrap();
        assert_ne!(g.value(y)[..4], g2.value(y2)[..4]);
        assert_eq!(g.value(y)[4..], g2.value(y2)[4..]);
    }
}
