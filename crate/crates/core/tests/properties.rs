//! Randomised invariants of attention, GSF, heads and the harness.

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use vidmix::attention::{spatial_attention, stm_attention, stm_attention_weights};
use vidmix::gsf::{
    fuse_add, fuse_weighted, gate_split, gsf_forward, init_gsf_params, temporal_shift,
};
use vidmix::harness::metrics::in_top_k;
use vidmix::harness::{temporal_jitter, uniform_sample, LrSchedule};
use vidmix::heads::{ensemble_average, multitask_loss};
use vidmix::{
    ActionVocab, ChannelPlan, Fusion, GsfConfig, ParamStore, PredictionScores, TaskLabels, Tensor,
    TokenField,
};

fn rand_t(shape: Vec<usize>, seed: u64) -> Tensor {
    Tensor::uniform(shape, 1.0, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
}

fn field(h: usize, t: usize, s: usize, d: usize, seed: u64) -> TokenField {
    TokenField::new(
        rand_t(vec![h, t, s, d], seed),
        rand_t(vec![h, t, s, d], seed.wrapping_add(1)),
        rand_t(vec![h, t, s, d], seed.wrapping_add(2)),
    )
    .unwrap()
}

/// Reorders the token axis of a `[H,T,S,D]` tensor: `out[..,i,..] = x[..,perm[i],..]`.
fn permute_tokens(x: &Tensor, perm: &[usize]) -> Tensor {
    let s = x.shape();
    let (h, t, n, d) = (s[0], s[1], s[2], s[3]);
    let mut data = Vec::with_capacity(x.len());
    for a in 0..h {
        for b in 0..t {
            for &p in perm {
                for c in 0..d {
                    data.push(x.get(&[a, b, p, c]));
                }
            }
        }
    }
    Tensor::new(vec![h, t, n, d], data).unwrap()
}

fn scores(v: usize, n: usize, a: usize, seed: u64) -> PredictionScores {
    PredictionScores::logits(
        rand_t(vec![v], seed).map(|x| 4.0 * x),
        rand_t(vec![n], seed.wrapping_add(1)).map(|x| 4.0 * x),
        rand_t(vec![a], seed.wrapping_add(2)).map(|x| 4.0 * x),
    )
}

fn close(a: &Tensor, b: &Tensor, tol: f64) -> bool {
    a.max_abs_diff(b).unwrap() <= tol
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 64, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn attention_weights_are_distributions(
        t in 1usize..5, s in 1usize..6, t_w in 0usize..3, extra in 0usize..4, seed in any::<u64>()
    ) {
        let d = 2 * t_w + 1 + extra;
        let f = field(2, t, s, d, seed);
        let w = stm_attention_weights(&f, &ChannelPlan::build(d, t_w).unwrap()).unwrap();
        for row in w.data().chunks(s) {
            prop_assert!(row.iter().all(|&p| p >= 0.0));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn window_collapse_is_spatial_attention(
        t in 1usize..5, s in 1usize..6, d in 1usize..7, seed in any::<u64>()
    ) {
        let f = field(1, t, s, d, seed);
        let a = stm_attention(&f, &ChannelPlan::build(d, 0).unwrap()).unwrap().y;
        let b = spatial_attention(&f).unwrap().y;
        prop_assert!(close(&a, &b, 1e-15));
    }

    #[test]
    fn token_permutation_equivariance(
        t in 1usize..4, perm in Just((0..5usize).collect::<Vec<_>>()).prop_shuffle(),
        t_w in 0usize..3, seed in any::<u64>()
    ) {
        let d = 2 * t_w + 2;
        let f = field(2, t, 5, d, seed);
        let plan = ChannelPlan::build(d, t_w).unwrap();
        let y = stm_attention(&f, &plan).unwrap().y;
        let g = TokenField::new(
            permute_tokens(&f.q, &perm),
            permute_tokens(&f.k, &perm),
            permute_tokens(&f.v, &perm),
        ).unwrap();
        let yp = stm_attention(&g, &plan).unwrap().y;
        prop_assert!(close(&yp, &permute_tokens(&y, &perm), 1e-12));
    }

    #[test]
    fn gate_split_conserves_input(c in 1usize..4, t in 1usize..4, seed in any::<u64>()) {
        let x = rand_t(vec![2 * c, t, 3, 3], seed);
        let gate = rand_t(vec![2 * c, t, 3, 3], seed ^ 1).map(|g| 0.5 + 0.5 * g);
        let (gated, residual) = gate_split(&x, &gate).unwrap();
        prop_assert!(close(&fuse_add(&gated, &residual).unwrap(), &x, 1e-12));
    }

    #[test]
    fn closed_gate_gsm_is_identity(c in 1usize..4, t in 1usize..5, seed in any::<u64>()) {
        let ch = 2 * c;
        let cfg = GsfConfig::new(ch, Fusion::Additive).unwrap();
        let mut p = ParamStore::new();
        init_gsf_params(&mut p, "g", &cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        p.insert("g.gate.w", Tensor::zeros(vec![2, ch, 3, 3, 3]).unwrap());
        p.insert("g.gate.b", Tensor::full(vec![2], -1000.0).unwrap());
        let x = rand_t(vec![ch, t, 2, 3], seed);
        prop_assert_eq!(gsf_forward(&x, &cfg, &p, "g").unwrap(), x);
    }

    #[test]
    fn shift_is_local(c in 1usize..3, t in 2usize..7, frame in 0usize..7, seed in any::<u64>()) {
        let frame = frame % t;
        let x = rand_t(vec![2 * c, t, 2, 2], seed);
        let bumped = Tensor::from_fn(x.shape().to_vec(), |i| {
            let f = (i / 4) % t;
            x.data()[i] + if f == frame { 1.0 } else { 0.0 }
        }).unwrap();
        let a = temporal_shift(&x).unwrap();
        let b = temporal_shift(&bumped).unwrap();
        for ch in 0..2 * c {
            for f in 0..t {
                let changed = (0..4).any(|k| {
                    let i = ((ch * t + f) * 4) + k;
                    a.data()[i] != b.data()[i]
                });
                if changed {
                    prop_assert!(f + 1 == frame || frame + 1 == f, "frame {f} moved by {frame}");
                }
            }
        }
    }

    #[test]
    fn shift_is_linear(alpha in -3.0f64..3.0, beta in -3.0f64..3.0, seed in any::<u64>()) {
        let a = rand_t(vec![4, 5, 2, 3], seed);
        let b = rand_t(vec![4, 5, 2, 3], seed ^ 7);
        let mix = a.zip_map(&b, |x, y| alpha * x + beta * y).unwrap();
        let lhs = temporal_shift(&mix).unwrap();
        let rhs = temporal_shift(&a).unwrap()
            .zip_map(&temporal_shift(&b).unwrap(), |x, y| alpha * x + beta * y).unwrap();
        prop_assert!(close(&lhs, &rhs, 1e-12));
    }

    #[test]
    fn weighted_fusion_is_convex(c in 1usize..4, scale in 0.1f64..20.0, seed in any::<u64>()) {
        let ch = 2 * c;
        let s = rand_t(vec![ch, 3, 2, 2], seed);
        let r = rand_t(vec![ch, 3, 2, 2], seed ^ 3);
        let w = rand_t(vec![2 * ch, ch], seed ^ 5).map(|x| scale * x);
        let bias = rand_t(vec![ch], seed ^ 9);
        let (out, weights) = fuse_weighted(&s, &r, &w, &bias).unwrap();
        prop_assert!(weights.data().iter().all(|&x| (0.0..=1.0).contains(&x)));
        for ((&o, &a), &b) in out.data().iter().zip(s.data()).zip(r.data()) {
            prop_assert!(o >= a.min(b) - 1e-12 && o <= a.max(b) + 1e-12);
        }
    }

    #[test]
    fn ensemble_idempotent(k in 1usize..6, seed in any::<u64>()) {
        let m = scores(4, 5, 7, seed);
        let avg = ensemble_average(&vec![m.clone(); k]).unwrap();
        let norm = m.normalized();
        prop_assert!(close(&avg.verb, &norm.verb, 1e-15));
        prop_assert!(close(&avg.noun, &norm.noun, 1e-15));
        prop_assert!(close(&avg.action, &norm.action, 1e-15));
    }

    #[test]
    fn ensemble_order_free_and_normalised(
        order in Just((0..5usize).collect::<Vec<_>>()).prop_shuffle(), seed in any::<u64>()
    ) {
        let members: Vec<_> = (0..5).map(|i| scores(3, 4, 6, seed.wrapping_add(10 * i))).collect();
        let shuffled: Vec<_> = order.iter().map(|&i| members[i].clone()).collect();
        let a = ensemble_average(&members).unwrap();
        prop_assert_eq!(&a, &ensemble_average(&shuffled).unwrap());
        for t in [&a.verb, &a.noun, &a.action] {
            prop_assert!(t.data().iter().all(|&p| p >= 0.0));
            prop_assert!((t.sum() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn ensemble_keeps_unanimous_argmax(top in 0usize..6, seed in any::<u64>()) {
        let members: Vec<_> = (0..4u64)
            .map(|i| {
                let mut s = scores(6, 6, 6, seed.wrapping_add(10 * i));
                s.verb = Tensor::from_fn(vec![6], |c| s.verb.data()[c] + if c == top { 10.0 } else { 0.0 }).unwrap();
                s
            })
            .collect();
        let avg = ensemble_average(&members).unwrap();
        prop_assert!(in_top_k(&avg.verb, top, 1));
    }

    #[test]
    fn multitask_loss_non_negative(seed in any::<u64>(), v in 0usize..3, n in 0usize..4, a in 0usize..5) {
        let s = scores(3, 4, 5, seed);
        let loss = multitask_loss(&s, &TaskLabels { verb: v, noun: n, action: Some(a) }).unwrap();
        prop_assert!(loss > 0.0);
    }

    #[test]
    fn vocab_round_trip(pairs in prop::collection::vec((0usize..6, 0usize..7), 1..30)) {
        let vocab = ActionVocab::build(6, 7, &pairs).unwrap();
        for a in 0..vocab.actions() {
            let (v, n) = vocab.decompose(a).unwrap();
            prop_assert_eq!(vocab.compose(v, n).unwrap(), Some(a));
        }
        prop_assert!(vocab.decompose(vocab.actions()).is_none());
        for &(v, n) in &pairs {
            prop_assert!(vocab.compose(v, n).unwrap().is_some());
        }
    }

    #[test]
    fn sampling_is_pure(len in 1usize..200, n in 1usize..20, seed in any::<u64>()) {
        let u = uniform_sample(len, n).unwrap();
        prop_assert_eq!(&u, &uniform_sample(len, n).unwrap());
        prop_assert!(u.windows(2).all(|w| w[0] <= w[1]) && u.iter().all(|&i| i < len));
        let j = temporal_jitter(len, n, seed).unwrap();
        prop_assert_eq!(&j, &temporal_jitter(len, n, seed).unwrap());
        prop_assert!(j.iter().all(|&i| i < len));
    }

    #[test]
    fn schedule_shape(base in 1e-4f64..1.0, warmup in 0usize..20, rest in 1usize..200) {
        let sched = LrSchedule { base_lr: base, warmup_steps: warmup, total_steps: warmup + rest };
        let trace = sched.trace();
        prop_assert!(trace[..warmup].windows(2).all(|w| w[0] <= w[1]));
        prop_assert!(trace[warmup..].windows(2).all(|w| w[0] >= w[1]));
        if warmup > 0 {
            prop_assert!((trace[warmup - 1] - trace[warmup]).abs() < 1e-12);
        }
        prop_assert!(trace.iter().all(|&lr| (0.0..=base).contains(&lr)));
    }
}

#[test]
fn peaked_correct_scores_have_zero_loss() {
    let peaked = |n: usize, c: usize| {
        Tensor::from_fn(vec![n], |i| if i == c { 800.0 } else { 0.0 }).unwrap()
    };
    let s = PredictionScores::logits(peaked(3, 1), peaked(4, 2), peaked(5, 0));
    let loss = multitask_loss(
        &s,
        &TaskLabels {
            verb: 1,
            noun: 2,
            action: Some(0),
        },
    )
    .unwrap();
    assert_eq!(loss, 0.0);
}
