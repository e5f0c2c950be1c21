use std::collections::BTreeSet;

use proptest::prelude::*;
use proptest::test_runner::{Config, RngSeed};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use vsfm::datasets::{window_starts, Window};
use vsfm::engine::{sample_subset, stream_rng, streams, Trainer, TrainConfig, forced_sequence, request_universe};
use vsfm::model::{Model, ModelConfig};
use vsfm::numerics::{grad_check, softmax_in_place, Adam, AdamConfig, Gradients, Graph, ParamStore, Tensor, Var};
use vsfm::relevance::{combine_sets, mask_pruned, sparsify, InputSet};
use vsfm::tokenizer::{PatchSequence, PatchToken, TokenKind};

fn config(cases: u32) -> Config {
    Config {
        cases,
        rng_seed: RngSeed::Fixed(2025),
        failure_persistence: None,
        ..Config::default()
    }
}

fn toy_config(layers: usize, heads: usize, d: usize, patch: usize) -> ModelConfig {
    ModelConfig {
        layers,
        heads,
        d,
        hidden: d,
        patch,
        dropout: 0.0,
    }
}

fn window(rng_seed: u64, variates: usize, slots: usize, patch: usize) -> Window {
    use rand::Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    Window {
        start: 0,
        patch,
        slots,
        data: (0..variates)
            .map(|_| (0..slots * patch).map(|_| rng.gen_range(-2.0..2.0)).collect())
            .collect(),
    }
}

/// One prototype per sensor at slot `c`, inputs at slots `1..=c`.
fn frontier_sequence(w: &Window, m: usize, inputs: &[usize], sensors: &[usize], c: usize) -> PatchSequence {
    let mut items = Vec::new();
    for &a in inputs {
        for slot in 1..=c {
            items.push((
                PatchToken {
                    variate: a,
                    slot,
                    kind: TokenKind::Content,
                },
                Some(w.patch(a, slot).to_vec()),
            ));
        }
    }
    for &j in sensors {
        items.push((
            PatchToken {
                variate: m + j,
                slot: c,
                kind: TokenKind::Prototype,
            },
            None,
        ));
    }
    PatchSequence::from_tokens(m, w.patch, items).unwrap()
}

proptest! {
    #![proptest_config(config(64))]

    #[test]
    fn softmax_rows_sum_to_one(row in prop::collection::vec(-50.0f64..50.0, 1..40)) {
        let mut r = row.clone();
        softmax_in_place(&mut r);
        let sum: f64 = r.iter().sum();
        prop_assert!((sum - 1.0).abs() <= 1e-12);
        prop_assert!(r.iter().all(|&x| (0.0..=1.0).contains(&x)));
    }

    #[test]
    fn constant_shift_leaves_softmax_unchanged(row in prop::collection::vec(-20.0f64..20.0, 1..20), c in -30.0f64..30.0) {
        let mut a = row.clone();
        let mut b: Vec<f64> = row.iter().map(|x| x + c).collect();
        softmax_in_place(&mut a);
        softmax_in_place(&mut b);
        for (x, y) in a.iter().zip(&b) {
            prop_assert!((x - y).abs() <= 1e-12);
        }
    }

    #[test]
    fn window_count_matches_enumeration(lo in 0usize..50, span in 0usize..300, len in 1usize..60, stride in 1usize..20) {
        let hi = lo + span;
        let starts = window_starts(lo, hi, len, stride);
        let brute: Vec<usize> = (lo..hi).filter(|s| (s - lo) % stride == 0 && s + len <= hi).collect();
        prop_assert_eq!(starts, brute);
    }

    #[test]
    fn subsets_are_sorted_distinct_and_sized(n in 1usize..30, seed in any::<u64>(), frac in 0.0f64..1.0) {
        let k = 1 + ((n - 1) as f64 * frac) as usize;
        let mut rng = stream_rng(seed, streams::SUBSET);
        let s = sample_subset(n, k, &mut rng).unwrap();
        prop_assert_eq!(s.len(), k);
        prop_assert!(s.windows(2).all(|w| w[0] < w[1]));
        prop_assert!(s.iter().all(|&j| j < n));
        let again = sample_subset(n, k, &mut stream_rng(seed, streams::SUBSET)).unwrap();
        prop_assert_eq!(s, again);
    }

    #[test]
    fn union_is_monotone(m in 1usize..20, masks in prop::collection::vec(any::<u32>(), 1..5)) {
        let sets: Vec<InputSet> = masks
            .iter()
            .enumerate()
            .map(|(j, mask)| InputSet {
                sensor: j,
                variates: (0..m).filter(|i| mask >> i & 1 == 1).chain([m + j]).collect(),
                threshold: None,
            })
            .collect();
        let mut prev = 0;
        for k in 1..=sets.len() {
            let u = combine_sets(m, &sets[..k]).unwrap();
            prop_assert!(u.inputs.len() >= prev);
            prev = u.inputs.len();
            let total: usize = sets[..k].iter().map(|s| s.inputs(m).len()).sum();
            prop_assert!(u.inputs.len() <= total);
            for s in &sets[..k] {
                prop_assert!(s.inputs(m).iter().all(|i| u.inputs.contains(i)));
            }
        }
    }

    #[test]
    fn raising_the_threshold_never_grows_a_set(r in prop::collection::vec(-3.0f64..3.0, 6), t1 in -3.0f64..3.0, dt in 0.0f64..2.0) {
        let a = sparsify(&r, 5, 0, t1);
        let b = sparsify(&r, 5, 0, t1 + dt);
        prop_assert!(b.variates.is_subset(&a.variates));
    }

    #[test]
    fn zero_gradient_adam_step_is_identity(vals in prop::collection::vec(-5.0f64..5.0, 1..12), lr in 1e-5f64..1.0) {
        let mut store = ParamStore::<f64>::new();
        let id = store.add("w", Tensor::new([vals.len()], vals.clone()).unwrap()).unwrap();
        let mut grads = Gradients::empty();
        grads.params.insert(id, Tensor::zeros([vals.len()]));
        let mut adam = Adam::new(AdamConfig::default());
        adam.step(&mut store, &grads, lr).unwrap();
        prop_assert_eq!(store.get(id).data(), vals.as_slice());
    }
}

/// Random smooth composition of graph ops, reduced by an MSE.
fn composed(ops: &[u8]) -> impl Fn(&mut Graph<f64>, &[Var]) -> vsfm::Result<Var> + '_ {
    move |g, v| {
        let (x, w, gain, off, target) = (v[0], v[1], v[2], v[3], v[4]);
        let mut h = g.matmul(x, w)?;
        for &op in ops {
            h = match op % 6 {
                0 => g.matmul(h, w)?,
                1 => {
                    let sq = g.mul(h, h)?;
                    g.scale(sq, 0.3)
                }
                2 => g.layer_norm(h, gain, off, 1e-5)?,
                3 => {
                    let s = g.softmax(h);
                    g.mul(s, target)?
                }
                4 => g.add(h, target)?,
                _ => g.mul_row(h, gain)?,
            };
        }
        g.mse(h, target)
    }
}

proptest! {
    #![proptest_config(config(48))]

    #[test]
    fn random_graph_backward_matches_finite_differences(
        ops in prop::collection::vec(any::<u8>(), 1..5),
        seed in any::<u64>(),
    ) {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut t = |shape: &[usize]| {
            let n = shape.iter().product();
            Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
        };
        let point = vec![t(&[3, 4]), t(&[4, 4]), t(&[4]), t(&[4]), t(&[3, 4])];
        let err = grad_check(composed(&ops), &point, 1e-5).unwrap();
        prop_assert!(err <= 1e-4, "ops {:?}: {}", ops, err);
    }
}

proptest! {
    #![proptest_config(config(24))]

    #[test]
    fn pruned_and_masked_sequences_agree(
        m in 1usize..=8,
        n in 1usize..=3,
        keep_mask in any::<u8>(),
        seed in any::<u64>(),
    ) {
        let cfg = toy_config(2, 2, 8, 3);
        let mut model = Model::<f32>::new(cfg, m, n, seed).unwrap();
        model.jitter(&mut ChaCha8Rng::seed_from_u64(seed ^ 1), 0.5);
        let w = window(seed, m + n, 3, 3);
        let sensors: Vec<usize> = (0..n).collect();
        let all: Vec<usize> = (0..m).collect();
        let kept: Vec<usize> = all.iter().copied().filter(|&i| keep_mask >> i & 1 == 1).collect();

        let dense = frontier_sequence(&w, m, &all, &sensors, 2);
        let mut g = Graph::new();
        let bias = model.bias(&mut g, &dense, &sensors).unwrap();
        let keep: BTreeSet<usize> = kept.iter().copied().chain(sensors.iter().map(|j| m + j)).collect();
        let bias = mask_pruned(&mut g, bias, &dense.variates(), &keep).unwrap();
        let out_dense = model.forward(&mut g, &dense, None, Some(bias), None).unwrap();

        let pruned = frontier_sequence(&w, m, &kept, &sensors, 2);
        let mut h = Graph::new();
        let bias = model.bias(&mut h, &pruned, &sensors).unwrap();
        let out_pruned = model.forward(&mut h, &pruned, None, Some(bias), None).unwrap();

        for &j in &sensors {
            let a = dense.position(m + j, 2).unwrap();
            let b = pruned.position(m + j, 2).unwrap();
            let p = cfg.patch;
            for k in 0..p {
                let x = g.value(out_dense)[a * p + k];
                let y = h.value(out_pruned)[b * p + k];
                prop_assert!((x - y).abs() <= 1e-4, "{} vs {}", x, y);
            }
        }
    }

    #[test]
    fn all_ones_relevance_matches_the_bias_free_model(
        m in 1usize..=6,
        n in 1usize..=3,
        seed in any::<u64>(),
    ) {
        let cfg = toy_config(2, 2, 8, 3);
        let model = Model::<f32>::new(cfg, m, n, seed).unwrap();
        let w = window(seed, m + n, 3, 3);
        let sensors: Vec<usize> = (0..n).collect();
        let seq = frontier_sequence(&w, m, &(0..m).collect::<Vec<_>>(), &sensors, 2);
        let mut g = Graph::new();
        let bias = model.bias(&mut g, &seq, &sensors).unwrap();
        let with = model.forward(&mut g, &seq, None, Some(bias), None).unwrap();
        let without = model.forward(&mut g, &seq, None, None, None).unwrap();
        for (a, b) in g.value(with).iter().zip(g.value(without)) {
            prop_assert!((a - b).abs() <= 1e-5);
        }
    }

    #[test]
    fn identical_seeds_give_identical_models(seed in any::<u64>()) {
        let cfg = toy_config(1, 2, 8, 4);
        let a = Model::<f32>::new(cfg, 3, 2, seed).unwrap();
        let b = Model::<f32>::new(cfg, 3, 2, seed).unwrap();
        prop_assert_eq!(&a.store, &b.store);
    }

    #[test]
    fn unrequested_relevance_is_never_updated(
        n in 2usize..=4,
        seed in any::<u64>(),
    ) {
        let cfg = toy_config(1, 2, 8, 3);
        let m = 3;
        let model = Model::<f32>::new(cfg, m, n, seed).unwrap();
        let before = model.store.clone();
        let mut t = Trainer::new(model, TrainConfig { n_train: 1, seed, ..TrainConfig::default() }).unwrap();
        let w = window(seed, m + n, 4, 3);
        let mut touched = BTreeSet::new();
        for _ in 0..5 {
            let s = t.sample_subset().unwrap();
            touched.extend(s.iter().copied());
            t.teacher_forcing_step(&[&w], &s, 1e-2).unwrap();
        }
        for j in 0..n {
            let id = t.model.relevance.ids[j];
            let same = t.model.store.get(id) == before.get(id);
            prop_assert_eq!(same, !touched.contains(&j));
        }
    }

    #[test]
    fn forced_sequences_have_one_prediction_per_virtual_token(
        m in 1usize..5,
        n in 1usize..4,
        starts_seed in any::<u64>(),
    ) {
        use rand::Rng;
        let cfg = toy_config(1, 2, 8, 3);
        let model = Model::<f32>::new(cfg, m, n, 0).unwrap();
        let w = window(starts_seed, m + n, 5, 3);
        let sensors: Vec<usize> = (0..n).collect();
        let req = request_universe(&model, &sensors, f64::NEG_INFINITY).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(starts_seed);
        let starts: Vec<usize> = sensors.iter().map(|_| rng.gen_range(1..5)).collect();
        let f = forced_sequence(&w, m, &req, &starts).unwrap();
        let expected: usize = starts.iter().map(|c| 5 - c).sum();
        prop_assert_eq!(f.positions.len(), expected);
        prop_assert_eq!(f.targets.len(), expected * 3);
        prop_assert_eq!(f.sequence.len(), 4 * m + expected);
    }
}
