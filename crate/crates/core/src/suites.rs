//! Self-checks runnable outside the test harness: optimised kernels against
//! the loop oracles, and tape gradients against central differences.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention::{
    eq1_reference, init_xvit_params, stm_attention, xvit_logits, ChannelPlan, TokenField,
    XViTConfig,
};
use crate::backend::Backend;
use crate::error::Result;
use crate::gradcheck::{grad_check_many, DEFAULT_STEP};
use crate::gsf::{
    gsf_forward_on, init_backbone_params, init_gsf_params, toy_backbone_logits, Fusion, GsfConfig,
    ToyBackboneConfig,
};
use crate::heads::{init_head_params, multitask_heads, multitask_loss_on, ClassCounts, TaskLabels};
use crate::ops;
use crate::params::{Bound, ParamStore};
use crate::reference::{conv3d_naive, matmul_naive};
use crate::tape::{GradTape, Var};
use crate::tensor::Tensor;

pub const ORACLE_TOL: f64 = 1e-12;
pub const GRAD_TOL: f64 = 1e-4;

/// One named check: the worst observed error against its bound.
#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: String,
    pub error: f64,
    pub bound: f64,
}

impl Check {
    pub fn passed(&self) -> bool {
        self.error < self.bound
    }
}

impl fmt::Display for Check {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let verdict = if self.passed() { "PASS" } else { "FAIL" };
        write!(
            f,
            "{verdict} {} (max error {:.3e}, bound {:.0e})",
            self.name, self.error, self.bound
        )
    }
}

fn rand_t(shape: Vec<usize>, rng: &mut ChaCha8Rng) -> Result<Tensor> {
    Tensor::uniform(shape, 1.0, rng)
}

/// Seeded random matmuls against the triple loop.
pub fn matmul_oracle(cases: u64, seed: u64) -> Result<Check> {
    let mut worst = 0.0f64;
    for case in 0..cases {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(case));
        let (m, k, n) = (
            rng.gen_range(1..9),
            rng.gen_range(1..9),
            rng.gen_range(1..9),
        );
        let a = rand_t(vec![m, k], &mut rng)?;
        let b = rand_t(vec![k, n], &mut rng)?;
        worst = worst.max(ops::matmul(&a, &b)?.max_abs_diff(&matmul_naive(&a, &b)?)?);
    }
    Ok(Check {
        name: format!("matmul vs triple loop, {cases} cases"),
        error: worst,
        bound: ORACLE_TOL,
    })
}

/// Seeded random 3D convolutions against the nested loops.
pub fn conv3d_oracle(cases: u64, seed: u64) -> Result<Check> {
    let mut worst = 0.0f64;
    for case in 0..cases {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(case));
        let (ci, co) = (rng.gen_range(1..4), rng.gen_range(1..4));
        let (t, h, w) = (
            rng.gen_range(1..5),
            rng.gen_range(1..6),
            rng.gen_range(1..6),
        );
        let mut odd = || [1, 3][rng.gen_range(0..2)];
        let (kt, kh, kw) = (odd(), odd(), odd());
        let x = rand_t(vec![ci, t, h, w], &mut rng)?;
        let kernel = rand_t(vec![co, ci, kt, kh, kw], &mut rng)?;
        let bias = rand_t(vec![co], &mut rng)?;
        let fast = ops::conv3d(&x, &kernel, Some(&bias))?;
        worst = worst.max(fast.max_abs_diff(&conv3d_naive(&x, &kernel, Some(&bias))?)?);
    }
    Ok(Check {
        name: format!("conv3d vs nested loops, {cases} cases"),
        error: worst,
        bound: ORACLE_TOL,
    })
}

/// Mixing attention against its loop reference over `S ∈ {1,4,9}`,
/// `T ∈ {1,2,4,8}`, `d_h ∈ {4,8,64}`, `t_w ∈ {0,1,2}` (where `d_h ≥ 2t_w+1`).
pub fn stm_oracle_grid(seed: u64) -> Result<Check> {
    let mut worst = 0.0f64;
    let mut cases = 0;
    for s in [1, 4, 9] {
        for t in [1, 2, 4, 8] {
            for d in [4, 8, 64] {
                for t_w in [0, 1, 2] {
                    if d < 2 * t_w + 1 {
                        continue;
                    }
                    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(cases));
                    cases += 1;
                    let shape = vec![2, t, s, d];
                    let field = TokenField::new(
                        rand_t(shape.clone(), &mut rng)?,
                        rand_t(shape.clone(), &mut rng)?,
                        rand_t(shape, &mut rng)?,
                    )?;
                    let plan = ChannelPlan::build(d, t_w)?;
                    let fast = stm_attention(&field, &plan)?.y;
                    worst = worst.max(fast.max_abs_diff(&eq1_reference(&field, &plan)?.y)?);
                }
            }
        }
    }
    Ok(Check {
        name: format!("stm_attention vs loop reference, {cases}-case grid"),
        error: worst,
        bound: ORACLE_TOL,
    })
}

pub fn oracle_suite(seed: u64) -> Result<Vec<Check>> {
    Ok(vec![
        matmul_oracle(100, seed)?,
        conv3d_oracle(100, seed)?,
        stm_oracle_grid(seed)?,
    ])
}

fn split_store(store: &ParamStore) -> (Vec<String>, Vec<Tensor>) {
    store
        .iter()
        .map(|(n, t)| (n.to_string(), t.clone()))
        .unzip()
}

fn rebind(names: &[String], vars: &[Var]) -> Bound<Var> {
    Bound::from_pairs(names.iter().cloned().zip(vars.iter().copied()))
}

/// `Σ w ⊙ y` with fixed random `w`, so every output element matters.
fn weighted_sum(tape: &GradTape, y: Var, rng: &mut ChaCha8Rng) -> Result<Var> {
    let w = tape.constant(rand_t(tape.shape(&y), rng)?);
    Ok(tape.sum(&tape.mul(&y, &w)?))
}

fn grad(name: impl Into<String>, report: Result<crate::GradCheckReport>) -> Result<Check> {
    Ok(Check {
        name: name.into(),
        error: report?.max_rel_error,
        bound: GRAD_TOL,
    })
}

pub fn stm_attention_gradients(seed: u64) -> Result<Check> {
    let mut worst = 0.0f64;
    for (t_w, frames, tokens, d) in [(1, 3, 4, 6), (2, 4, 3, 5), (0, 2, 5, 4)] {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let plan = ChannelPlan::build(d, t_w)?;
        let shape = vec![2, frames, tokens, d];
        let inputs = [
            rand_t(shape.clone(), &mut rng)?,
            rand_t(shape.clone(), &mut rng)?,
            rand_t(shape, &mut rng)?,
        ];
        let report = grad_check_many(
            |tape, v| {
                let y = tape.stm_attention(&v[0], &v[1], &v[2], &plan)?;
                weighted_sum(tape, y, &mut ChaCha8Rng::seed_from_u64(seed ^ 1))
            },
            &inputs,
            DEFAULT_STEP,
        )?;
        worst = worst.max(report.max_rel_error);
    }
    Ok(Check {
        name: "stm_attention wrt q, k, v".into(),
        error: worst,
        bound: GRAD_TOL,
    })
}

pub fn gsf_gradients(fusion: Fusion, seed: u64) -> Result<Check> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = GsfConfig::new(4, fusion)?;
    let mut store = ParamStore::new();
    init_gsf_params(&mut store, "g", &cfg, &mut rng)?;
    let (names, mut inputs) = split_store(&store);
    inputs.push(rand_t(vec![4, 3, 4, 5], &mut rng)?);
    let n = names.len();
    let report = grad_check_many(
        |tape, v| {
            let y = gsf_forward_on(tape, &cfg, &rebind(&names, &v[..n]), "g", &v[n])?;
            weighted_sum(tape, y, &mut ChaCha8Rng::seed_from_u64(seed ^ 1))
        },
        &inputs,
        DEFAULT_STEP,
    );
    grad(
        format!("gsf_forward ({fusion:?} fusion) wrt input and parameters"),
        report,
    )
}

pub fn multitask_loss_gradients(seed: u64) -> Result<Check> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let counts = ClassCounts {
        verbs: 4,
        nouns: 5,
        actions: 6,
    };
    let mut store = ParamStore::new();
    init_head_params(&mut store, 8, counts, &mut rng)?;
    let (names, mut inputs) = split_store(&store);
    inputs.push(rand_t(vec![8], &mut rng)?.map(|x| 3.0 * x));
    let n = names.len();
    let labels = TaskLabels {
        verb: 2,
        noun: 0,
        action: Some(5),
    };
    let report = grad_check_many(
        |tape, v| {
            let logits = multitask_heads(tape, &rebind(&names, &v[..n]), &v[n])?;
            multitask_loss_on(tape, &logits, &labels)
        },
        &inputs,
        DEFAULT_STEP,
    );
    grad("multitask_loss through the heads", report)
}

/// Moves the channel norms off their unit-gain, zero-shift init. At the init
/// point every channel has zero mean, so the pooled inputs of the fusion
/// weights nearly cancel and their gradients sink into the central-difference
/// roundoff.
fn perturb_norms(store: &mut ParamStore, rng: &mut ChaCha8Rng) -> Result<()> {
    let norms: Vec<(String, Vec<usize>)> = store
        .iter()
        .filter(|(n, _)| n.contains(".norm."))
        .map(|(n, t)| (n.to_string(), t.shape().to_vec()))
        .collect();
    for (name, shape) in norms {
        let u = rand_t(shape, rng)?;
        let value = if name.ends_with(".g") {
            u.map(|x| 1.0 + 0.5 * x)
        } else {
            u
        };
        store.insert(name, value);
    }
    Ok(())
}

pub fn toy_backbone_gradients(fusion: Fusion, seed: u64) -> Result<Check> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let counts = ClassCounts {
        verbs: 3,
        nouns: 3,
        actions: 5,
    };
    let cfg = ToyBackboneConfig {
        widths: [4, 6],
        ..ToyBackboneConfig::new(fusion, counts)
    };
    let mut store = init_backbone_params(&cfg, &mut rng)?;
    perturb_norms(&mut store, &mut rng)?;
    let (names, inputs) = split_store(&store);
    // A short high-amplitude clip keeps every gradient component far above
    // the ~1e-11 roundoff of the central difference.
    let clip = rand_t(vec![2, 3, 8, 8], &mut rng)?.map(|x| 16.0 * x);
    let labels = TaskLabels {
        verb: 1,
        noun: 2,
        action: Some(4),
    };
    let report = grad_check_many(
        |tape, v| {
            let logits = toy_backbone_logits(tape, &cfg, &rebind(&names, v), &clip)?;
            multitask_loss_on(tape, &logits, &labels)
        },
        &inputs,
        DEFAULT_STEP,
    );
    grad(
        format!("toy GSF backbone ({fusion:?} fusion) end to end"),
        report,
    )
}

pub fn toy_xvit_gradients(seed: u64) -> Result<Check> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = XViTConfig {
        layers: 2,
        heads: 2,
        embed_dim: 6,
        patch: 4,
        t_w: 1,
        frames: 3,
        input_hw: (8, 4),
        channels: 3,
        class_counts: ClassCounts {
            verbs: 3,
            nouns: 2,
            actions: 4,
        },
    };
    let store = init_xvit_params(&cfg, &mut rng)?;
    let (names, inputs) = split_store(&store);
    let clip = rand_t(vec![3, 3, 8, 4], &mut rng)?;
    let labels = TaskLabels {
        verb: 0,
        noun: 1,
        action: Some(2),
    };
    let report = grad_check_many(
        |tape, v| {
            let logits = xvit_logits(tape, &cfg, &rebind(&names, v), &clip)?;
            multitask_loss_on(tape, &logits, &labels)
        },
        &inputs,
        DEFAULT_STEP,
    );
    grad("toy XViT end to end", report)
}

pub fn gradient_suite(seed: u64) -> Result<Vec<Check>> {
    Ok(vec![
        stm_attention_gradients(seed)?,
        gsf_gradients(Fusion::Additive, seed)?,
        gsf_gradients(Fusion::Weighted, seed)?,
        multitask_loss_gradients(seed)?,
        toy_backbone_gradients(Fusion::Additive, seed)?,
        toy_backbone_gradients(Fusion::Weighted, seed)?,
        toy_xvit_gradients(seed)?,
    ])
}
