//! Learned signal relevance: per-sensor vectors over all variates, the
//! outer-product attention bias, threshold sparsification, request
//! combination, and the correlation/random baselines.

use std::collections::BTreeSet;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datasets::{pearson, train_len, SeriesFamily};
use crate::error::{invalid, Result};
use crate::numerics::{Float, Graph, ParamId, ParamStore, Tensor, Var};

/// One trainable vector `r′_j ∈ R^{M+N}` per virtual sensor.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RelevanceTable {
    pub ids: Vec<ParamId>,
    pub m: usize,
    pub n: usize,
}

impl RelevanceTable {
    /// Adds `n` all-ones relevance vectors to the store.
    pub fn init<F: Float>(store: &mut ParamStore<F>, m: usize, n: usize) -> Result<Self> {
        let ids = (0..n)
            .map(|j| store.add(format!("relevance.{j}"), Tensor::filled([m + n], F::one())))
            .collect::<Result<_>>()?;
        Ok(RelevanceTable { ids, m, n })
    }

    pub fn width(&self) -> usize {
        self.m + self.n
    }

    pub fn row<'a, F: Float>(&self, store: &'a ParamStore<F>, j: usize) -> &'a [F] {
        store.get(self.ids[j]).data()
    }

    pub fn rows_f64<F: Float>(&self, store: &ParamStore<F>) -> Vec<Vec<f64>> {
        (0..self.n)
            .map(|j| self.row(store, j).iter().map(|x| x.to_f64()).collect())
            .collect()
    }

    /// Averaged bias `Σ_j u_j u_jᵀ / |S|` with `u_j = r′_j[variates]`, built on
    /// the graph so gradients reach the relevance vectors.
    pub fn bias_var<F: Float>(
        &self,
        g: &mut Graph<F>,
        store: &ParamStore<F>,
        sensors: &[usize],
        variates: &[usize],
    ) -> Result<Var> {
        if sensors.is_empty() {
            return Err(invalid("a request needs at least one sensor"));
        }
        let mut acc: Option<Var> = None;
        for &j in sensors {
            if j >= self.n {
                return Err(invalid(format!("sensor {j} outside 0..{}", self.n)));
            }
            let r = g.param(self.ids[j], store.get(self.ids[j]));
            let col = g.reshape(r, [self.width(), 1])?;
            let u = g.gather_rows(col, variates)?;
            let b = g.matmul_nt(u, u)?;
            acc = Some(match acc {
                Some(a) => g.add(a, b)?,
                None => b,
            });
        }
        let acc = acc.expect("at least one sensor");
        Ok(g.scale(acc, F::from_f64(1.0 / sensors.len() as f64)))
    }
}

/// Sets every bias row and column of a token whose variate is not in
/// `keep` to `-inf`: the masked dense counterpart of pruning those variates.
pub fn mask_pruned<F: Float>(g: &mut Graph<F>, bias: Var, variates: &[usize], keep: &BTreeSet<usize>) -> Result<Var> {
    let s = variates.len();
    let kept: Vec<bool> = variates.iter().map(|v| keep.contains(v)).collect();
    let mut mask = vec![F::zero(); s * s];
    for a in 0..s {
        for b in 0..s {
            if !(kept[a] && kept[b]) {
                mask[a * s + b] = F::neg_infinity();
            }
        }
    }
    let mask = g.constant([s, s], mask)?;
    g.add(bias, mask)
}

/// `B[a, b] = r[var(a)] · r[var(b)]` for a token sequence with the given
/// variates, row-major.
pub fn bias_from_relevance(r: &[f64], variates: &[usize]) -> Vec<f64> {
    let s = variates.len();
    let mut out = vec![0.0; s * s];
    for (a, &va) in variates.iter().enumerate() {
        for (b, &vb) in variates.iter().enumerate() {
            out[a * s + b] = r[va] * r[vb];
        }
    }
    out
}

/// Elementwise mean of the single-sensor biases.
pub fn averaged_bias(rows: &[&[f64]], variates: &[usize]) -> Result<Vec<f64>> {
    if rows.is_empty() {
        return Err(invalid("a request needs at least one sensor"));
    }
    let s = variates.len();
    let mut out = vec![0.0; s * s];
    for r in rows {
        for (o, b) in out.iter_mut().zip(bias_from_relevance(r, variates)) {
            *o += b;
        }
    }
    let k = rows.len() as f64;
    out.iter_mut().for_each(|x| *x /= k);
    Ok(out)
}

/// Retained variates of one sensor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputSet {
    /// Sensor index `j` (0-based over the virtual sensors).
    pub sensor: usize,
    pub variates: BTreeSet<usize>,
    /// Relevance cut-off, for sets derived from relevance vectors.
    pub threshold: Option<f64>,
}

impl InputSet {
    pub fn len(&self) -> usize {
        self.variates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.variates.is_empty()
    }

    pub fn inputs(&self, m: usize) -> Vec<usize> {
        self.variates.iter().copied().filter(|&v| v < m).collect()
    }
}

/// Keeps every variate whose relevance is at least `threshold`, plus the
/// sensor's own id `m + j`. Use `f64::NEG_INFINITY` to keep everything.
pub fn sparsify(r: &[f64], m: usize, j: usize, threshold: f64) -> InputSet {
    let mut variates: BTreeSet<usize> = (0..r.len()).filter(|&a| r[a] >= threshold).collect();
    variates.insert(m + j);
    InputSet {
        sensor: j,
        variates,
        threshold: Some(threshold),
    }
}

/// The variate universe and sensor list of a multi-sensor request.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CombinedRequest {
    /// Requested sensors, ascending.
    pub sensors: Vec<usize>,
    /// Retained input ids, ascending.
    pub inputs: Vec<usize>,
    /// Union of all retained ids (including other sensors' ids a set may
    /// name), ascending.
    pub union: Vec<usize>,
}

impl CombinedRequest {
    /// Variate ids present in sequences built for this request: the retained
    /// inputs and the requested sensors' own ids.
    pub fn universe(&self, m: usize) -> Vec<usize> {
        let mut u = self.inputs.clone();
        u.extend(self.sensors.iter().map(|j| m + j));
        u
    }
}

/// Unions the input sets of the requested sensors.
pub fn combine_sets(m: usize, sets: &[InputSet]) -> Result<CombinedRequest> {
    if sets.is_empty() {
        return Err(invalid("a request needs at least one sensor"));
    }
    let mut union = BTreeSet::new();
    let mut sensors = BTreeSet::new();
    for s in sets {
        union.extend(s.variates.iter().copied());
        sensors.insert(s.sensor);
    }
    Ok(CombinedRequest {
        sensors: sensors.into_iter().collect(),
        inputs: union.iter().copied().filter(|&v| v < m).collect(),
        union: union.into_iter().collect(),
    })
}

/// Sparsifies every requested sensor at `threshold` and unions the sets.
/// The bias for a sequence is then [`RelevanceTable::bias_var`] over the
/// same sensors.
pub fn combine_requests(rows: &[Vec<f64>], m: usize, sensors: &[usize], threshold: f64) -> Result<CombinedRequest> {
    if sensors.is_empty() {
        return Err(invalid("a request needs at least one sensor"));
    }
    let sets: Vec<InputSet> = sensors
        .iter()
        .map(|&j| {
            rows.get(j)
                .map(|r| sparsify(r, m, j, threshold))
                .ok_or_else(|| invalid(format!("sensor {j} outside 0..{}", rows.len())))
        })
        .collect::<Result<_>>()?;
    combine_sets(m, &sets)
}

/// Top-`k` inputs by absolute Pearson correlation with sensor `j` over the
/// training split, plus the sensor's own id.
pub fn correlation_relevance(family: &SeriesFamily, j: usize, k: usize, train_fraction: f64) -> Result<InputSet> {
    let m = family.m();
    if k > m {
        return Err(invalid(format!("k = {k} exceeds the {m} inputs")));
    }
    if j >= family.n() {
        return Err(invalid(format!("sensor {j} outside 0..{}", family.n())));
    }
    let cut = train_len(family.len(), train_fraction);
    let target = &family.variate(m + j)[..cut];
    let mut scored: Vec<(f64, usize)> = (0..m)
        .map(|a| (pearson(&family.variate(a)[..cut], target).abs(), a))
        .collect();
    scored.sort_by(|x, y| y.0.total_cmp(&x.0).then(x.1.cmp(&y.1)));
    let mut variates: BTreeSet<usize> = scored.iter().take(k).map(|&(_, a)| a).collect();
    variates.insert(m + j);
    Ok(InputSet {
        sensor: j,
        variates,
        threshold: None,
    })
}

/// Uniform `k`-subset of the `m` inputs plus the sensor's own id.
pub fn random_relevance(seed: u64, m: usize, j: usize, k: usize) -> Result<InputSet> {
    if k > m {
        return Err(invalid(format!("k = {k} exceeds the {m} inputs")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(j as u64);
    let mut variates: BTreeSet<usize> = sample(&mut rng, m, k).into_iter().collect();
    variates.insert(m + j);
    Ok(InputSet {
        sensor: j,
        variates,
        threshold: None,
    })
}

/// Top-`k` inputs by learned relevance, plus own id.
pub fn learned_top_k(r: &[f64], m: usize, j: usize, k: usize) -> Result<InputSet> {
    if k > m {
        return Err(invalid(format!("k = {k} exceeds the {m} inputs")));
    }
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| r[b].total_cmp(&r[a]).then(a.cmp(&b)));
    let mut variates: BTreeSet<usize> = order[..k].iter().copied().collect();
    variates.insert(m + j);
    Ok(InputSet {
        sensor: j,
        variates,
        threshold: Some(if k == 0 { f64::INFINITY } else { r[order[k - 1]] }),
    })
}

fn pairwise_mean(sets: &[&BTreeSet<usize>], f: impl Fn(&BTreeSet<usize>, &BTreeSet<usize>) -> f64) -> Result<f64> {
    if sets.len() < 2 {
        return Err(invalid("set similarity needs at least two sets"));
    }
    let mut total = 0.0;
    let mut pairs = 0usize;
    for a in 0..sets.len() {
        for b in a + 1..sets.len() {
            total += f(sets[a], sets[b]);
            pairs += 1;
        }
    }
    Ok(total / pairs as f64)
}

/// Mean pairwise Jaccard index `|A∩B| / |A∪B|`.
pub fn set_similarity(sets: &[&BTreeSet<usize>]) -> Result<f64> {
    pairwise_mean(sets, |a, b| {
        let union = a.union(b).count();
        if union == 0 {
            1.0
        } else {
            a.intersection(b).count() as f64 / union as f64
        }
    })
}

/// Mean pairwise overlap `|A∩B| / min(|A|, |B|)`.
pub fn overlap_fraction(sets: &[&BTreeSet<usize>]) -> Result<f64> {
    pairwise_mean(sets, |a, b| {
        let small = a.len().min(b.len());
        if small == 0 {
            0.0
        } else {
            a.intersection(b).count() as f64 / small as f64
        }
    })
}

/// Token-relative sparsity of a request against the dense model that
/// processes all `m + n` variates over the same slots.
pub fn sparsity_of(request: &CombinedRequest, m: usize, n: usize) -> f64 {
    1.0 - request.universe(m).len() as f64 / (m + n) as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets::{generate_synthetic_nonlinear, generate_synthetic_uncorrelated};

    #[test]
    fn outer_product_bias() {
        assert_eq!(bias_from_relevance(&[2.0, 1.0], &[0, 1]), vec![4.0, 2.0, 2.0, 1.0]);
    }

    #[test]
    fn bias_is_tiled_over_slots() {
        let r = [1.5, -0.5];
        let variates = [0, 1, 0, 1, 0, 1];
        let b = bias_from_relevance(&r, &variates);
        for a in 0..6 {
            for c in 0..6 {
                assert_eq!(b[a * 6 + c], b[(a % 2) * 6 + c % 2]);
                assert_eq!(b[a * 6 + c], r[a % 2] * r[c % 2]);
            }
        }
    }

    #[test]
    fn averaged_bias_of_two_sensors() {
        let b = averaged_bias(&[&[2.0, 1.0], &[0.0, 1.0]], &[0, 1]).unwrap();
        assert_eq!(b, vec![2.0, 1.0, 1.0, 1.0]);
        assert!(averaged_bias(&[], &[0]).is_err());
    }

    #[test]
    fn graph_bias_matches_plain_bias() {
        let mut store = ParamStore::<f64>::new();
        let t = RelevanceTable::init(&mut store, 2, 2).unwrap();
        store.get_mut(t.ids[0]).data_mut().copy_from_slice(&[2.0, 1.0, 0.5, 3.0]);
        store.get_mut(t.ids[1]).data_mut().copy_from_slice(&[0.0, 1.0, 1.0, -1.0]);
        let variates = [0, 1, 2, 3, 0];
        let mut g = Graph::new();
        let b = t.bias_var(&mut g, &store, &[0, 1], &variates).unwrap();
        let r0 = store.get(t.ids[0]).data().to_vec();
        let r1 = store.get(t.ids[1]).data().to_vec();
        let want = averaged_bias(&[&r0, &r1], &variates).unwrap();
        assert_eq!(g.value(b), want.as_slice());
    }

    #[test]
    fn threshold_sparsification() {
        let all = sparsify(&[0.1, -3.0, 2.0, 0.0], 3, 0, f64::NEG_INFINITY);
        assert_eq!(all.variates, BTreeSet::from([0, 1, 2, 3]));
        // Variates 1, 2 and own (id 3); relevance [0.5, 2.0, 1.0(own)].
        let s = sparsify(&[0.5, 2.0, 1.0], 2, 0, 1.0);
        assert_eq!(s.variates, BTreeSet::from([1, 2]));
        let s = sparsify(&[0.5, 0.2, -1.0], 2, 0, 1.0);
        assert_eq!(s.variates, BTreeSet::from([2]));
    }

    #[test]
    fn request_union() {
        // m = 4, sensors 0 and 1 (ids 4 and 5).
        let a = InputSet {
            sensor: 0,
            variates: BTreeSet::from([1, 2, 4]),
            threshold: None,
        };
        let b = InputSet {
            sensor: 1,
            variates: BTreeSet::from([2, 3, 5]),
            threshold: None,
        };
        let c = combine_sets(4, &[a.clone(), b]).unwrap();
        assert_eq!(c.union, vec![1, 2, 3, 4, 5]);
        assert_eq!(c.universe(4), vec![1, 2, 3, 4, 5]);
        let single = combine_sets(4, &[a]).unwrap();
        assert_eq!(single.universe(4), vec![1, 2, 4]);
        assert!(combine_sets(4, &[]).is_err());
    }

    #[test]
    fn replica_ranks_its_source_first() {
        let f = generate_synthetic_uncorrelated(16, 2048, &[5], 2, 1).unwrap();
        let set = correlation_relevance(&f, 0, 1, 0.8).unwrap();
        assert_eq!(set.variates, BTreeSet::from([4, 16]));
        let all = correlation_relevance(&f, 0, 16, 0.8).unwrap();
        assert_eq!(all.len(), 17);
    }

    #[test]
    fn correlation_misses_product_factors() {
        let f = generate_synthetic_nonlinear(32, 8192, &[(3, 9)], 3, 2).unwrap();
        let set = correlation_relevance(&f, 0, 2, 0.8).unwrap();
        assert!(!set.variates.contains(&2) && !set.variates.contains(&8), "{set:?}");
    }

    #[test]
    fn random_sets() {
        assert_eq!(random_relevance(1, 5, 0, 5).unwrap().len(), 6);
        assert_eq!(random_relevance(1, 5, 0, 0).unwrap().variates, BTreeSet::from([5]));
        assert_eq!(random_relevance(4, 9, 1, 3).unwrap(), random_relevance(4, 9, 1, 3).unwrap());
        assert!(random_relevance(1, 5, 0, 6).is_err());
    }

    #[test]
    fn jaccard_similarity() {
        let a = BTreeSet::from([1, 2]);
        let b = BTreeSet::from([2, 3]);
        let c = BTreeSet::from([7]);
        assert_eq!(set_similarity(&[&a, &a]).unwrap(), 1.0);
        assert_eq!(set_similarity(&[&a, &c]).unwrap(), 0.0);
        assert!((set_similarity(&[&a, &b]).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        assert!(set_similarity(&[&a]).is_err());
        assert_eq!(overlap_fraction(&[&a, &b]).unwrap(), 0.5);
    }

    #[test]
    fn sparsity_arithmetic() {
        let rows = vec![vec![1.0; 6]; 2];
        let dense = combine_requests(&rows, 4, &[0, 1], f64::NEG_INFINITY).unwrap();
        assert_eq!(sparsity_of(&dense, 4, 2), 0.0);
        let half = CombinedRequest {
            sensors: vec![0, 1],
            inputs: vec![0],
            union: vec![0, 4, 5],
        };
        assert_eq!(sparsity_of(&half, 4, 2), 0.5);
    }
}
