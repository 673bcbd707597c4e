//! One PASS/FAIL line per acceptance criterion; exits non-zero if any fail.

use std::fs;
use std::process::Command;
use std::time::{Duration, Instant};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use vidmix::attention::{init_xvit_params, xvit_forward};
use vidmix::gsf::{gsf_forward, init_gsf_params};
use vidmix::harness::metrics::in_top_k;
use vidmix::harness::{
    aggregate_views, generate_views, mac_scaling_experiment, run_controlled_eval, AttentionModel,
    ExperimentConfig, SamplingSpec, ViewSpec,
};
use vidmix::heads::{ensemble_average, Task};
use vidmix::suites::{gradient_suite, stm_oracle_grid};
use vidmix::{Fusion, GsfConfig, ParamStore, PredictionScores, Tensor, XViTConfig};

type Outcome = Result<String, String>;

struct Criterion {
    number: usize,
    title: &'static str,
    limit: Duration,
    check: fn() -> Outcome,
}

fn ensure(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn err<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

fn random(shape: Vec<usize>, seed: u64) -> Tensor {
    Tensor::uniform(shape, 1.0, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
}

fn mixing_equivalence() -> Outcome {
    let c = stm_oracle_grid(0).map_err(err)?;
    ensure(
        c.passed(),
        format!("max |stm − reference| = {:.2e} < 1e-12", c.error),
    )
}

fn complexity_slopes() -> Outcome {
    let frames = [2, 4, 8, 16];
    let stm = mac_scaling_experiment(AttentionModel::Stm, &frames, 49, 64, 0).map_err(err)?;
    let full = mac_scaling_experiment(AttentionModel::Full, &frames, 49, 64, 0).map_err(err)?;
    ensure(
        (stm.slope - 1.0).abs() <= 0.1 && (full.slope - 2.0).abs() <= 0.1,
        format!(
            "slope stm {:.4} (1.0±0.1), full {:.4} (2.0±0.1)",
            stm.slope, full.slope
        ),
    )
}

fn gradients() -> Outcome {
    let checks = gradient_suite(0).map_err(err)?;
    let worst = checks.iter().map(|c| c.error).fold(0.0, f64::max);
    let failed: Vec<&str> = checks
        .iter()
        .filter(|c| !c.passed())
        .map(|c| c.name.as_str())
        .collect();
    ensure(
        failed.is_empty(),
        format!(
            "{} checks, max rel. error {worst:.2e} < 1e-4 {failed:?}",
            checks.len()
        ),
    )
}

fn presets() -> Outcome {
    let cfg = XViTConfig::desk_preset();
    let shape_ok = (cfg.layers, cfg.heads, cfg.embed_dim, cfg.t_w) == (12, 12, 768, 1);
    let params = init_xvit_params(&cfg, &mut ChaCha8Rng::seed_from_u64(0)).map_err(err)?;
    let clip = random(vec![cfg.frames, 3, 112, 112], 1);
    let start = Instant::now();
    let scores = xvit_forward(&clip, &cfg, &params).map_err(err)?;
    let forward = start.elapsed();
    drop(params);
    let extents = (scores.verb.len(), scores.noun.len(), scores.action.len());

    let gsm = GsfConfig::new(8, Fusion::Additive).map_err(err)?;
    let mut p = ParamStore::new();
    init_gsf_params(&mut p, "g", &gsm, &mut ChaCha8Rng::seed_from_u64(2)).map_err(err)?;
    p.insert("g.gate.w", Tensor::zeros(vec![2, 8, 3, 3, 3]).unwrap());
    p.insert("g.gate.b", Tensor::full(vec![2], -1000.0).unwrap());
    let x = random(vec![8, 4, 6, 6], 3);
    let identity = gsf_forward(&x, &gsm, &p, "g").map_err(err)? == x;

    ensure(
        shape_ok && extents == (97, 300, 3806) && identity && forward < Duration::from_secs(600),
        format!(
            "12L/12H/768/t_w=1: {shape_ok}, logits {extents:?}, GSM identity exact: {identity}, \
             112² forward {:.1}s < 600s",
            forward.as_secs_f64()
        ),
    )
}

fn scores(seed: u64) -> PredictionScores {
    let r =
        |n: usize, k: u64| random(vec![n], seed.wrapping_mul(3).wrapping_add(k)).map(|x| 5.0 * x);
    PredictionScores::logits(r(5, 0), r(7, 1), r(11, 2))
}

fn protocol() -> Outcome {
    let video = random(vec![48, 3, 16, 24], 4);
    let views =
        generate_views(&video, &ViewSpec::new(16), &SamplingSpec::uniform(16)).map_err(err)?;
    let views_ok = views.len() == 6 && views.iter().all(|v| v.frames.shape() == [16, 3, 16, 16]);

    let spec = ViewSpec::new(16);
    let mut invariants = true;
    let close = |a: &PredictionScores, b: &PredictionScores| {
        Task::ALL
            .iter()
            .all(|&t| a.task(t).max_abs_diff(b.task(t)).unwrap() <= 1e-12)
    };
    for seed in 0..50 {
        let members: Vec<PredictionScores> = (0..6).map(|i| scores(seed * 10 + i)).collect();
        let agg = aggregate_views(&members, &spec).map_err(err)?;
        let mut rotated = members.clone();
        rotated.rotate_left(seed as usize % 6 + 1);
        invariants &= agg == aggregate_views(&rotated, &spec).map_err(err)?;
        invariants &= close(&ensemble_average(&members).map_err(err)?, &agg);
        let one = &members[0];
        invariants &= close(
            &ensemble_average(&vec![one.clone(); 3]).map_err(err)?,
            &one.normalized(),
        );
        invariants &= close(
            &aggregate_views(&vec![one.clone(); 6], &spec).map_err(err)?,
            &one.normalized(),
        );
        invariants &= Task::ALL.iter().all(|&t| {
            let p = agg.task(t);
            p.data().iter().all(|&x| x >= 0.0) && (p.sum() - 1.0).abs() <= 1e-12
        });
    }

    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut topk_ok = true;
    for _ in 0..200 {
        use rand::Rng;
        let n = rng.gen_range(1..40);
        let data: Vec<f64> = (0..n).map(|_| rng.gen_range(0..8) as f64).collect();
        let label = rng.gen_range(0..n);
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| data[b].total_cmp(&data[a]).then(a.cmp(&b)));
        let t = Tensor::new(vec![n], data).unwrap();
        for k in [1, 5] {
            topk_ok &= in_top_k(&t, label, k) == order[..k.min(n)].contains(&label);
        }
    }
    ensure(
        views_ok && invariants && topk_ok,
        format!("6 views of 16 frames: {views_ok}, aggregation/ensemble invariants at 1e-12: {invariants}, top-k = sort oracle on 200 samples: {topk_ok}"),
    )
}

const SEEDS: u64 = 5;

fn complementarity() -> Outcome {
    let cfg = ExperimentConfig::toy_default();
    let (mut gap_ok, mut noun_ok, mut ens_ok, mut trained) = (0, 0, 0, 0);
    for seed in 0..SEEDS {
        let run = run_controlled_eval(&cfg, seed).map_err(err)?;
        let gsf = run.member("gsf_toy").ok_or("gsf_toy missing")?;
        let xvit = run.member("xvit_toy").ok_or("xvit_toy missing")?;
        let gap = run.verb_gap().unwrap();
        let ens = run.report.ensemble.action.top1;
        let best_member = gsf.metrics.action.top1.max(xvit.metrics.action.top1);
        let best_train = |m: &vidmix::harness::experiment::MemberRun| {
            m.training
                .history
                .iter()
                .map(|e| e.action_top1)
                .fold(0.0, f64::max)
        };
        gap_ok += (gap >= 20.0) as usize;
        noun_ok += (xvit.metrics.noun.top1 >= 90.0) as usize;
        ens_ok += (ens >= best_member) as usize;
        trained += (best_train(gsf) >= 90.0 && best_train(xvit) >= 90.0) as usize;
        println!(
            "    seed {seed}: GSF verb {:.1} vs shuffled {:.1} (gap {gap:.1}); XViT noun {:.1}; \
             action GSF {:.1} XViT {:.1} ensemble {ens:.1}; best train action GSF {:.1} XViT {:.1}",
            gsf.metrics.verb.top1,
            run.shuffled_gsf.verb.top1,
            xvit.metrics.noun.top1,
            gsf.metrics.action.top1,
            xvit.metrics.action.top1,
            best_train(gsf),
            best_train(xvit),
        );
    }
    let n = SEEDS as usize;
    ensure(
        gap_ok == n && noun_ok == n && ens_ok >= 4,
        format!(
            "verb gap ≥ 20 on {gap_ok}/{n}, XViT noun ≥ 90% on {noun_ok}/{n}, ensemble ≥ best member on {ens_ok}/{n} (need 4); \
             training reached 90% action on {trained}/{n}"
        ),
    )
}

fn determinism() -> Outcome {
    let dir = std::env::temp_dir().join(format!("vidmix-acceptance-{}", std::process::id()));
    fs::create_dir_all(&dir).map_err(err)?;
    let run = |args: &[&str]| -> Result<Vec<u8>, String> {
        let out = Command::new(env!("CARGO_BIN_EXE_vidmix"))
            .args(args)
            .output()
            .map_err(err)?;
        if !out.status.success() {
            return Err(String::from_utf8_lossy(&out.stderr).into_owned());
        }
        Ok(out.stdout)
    };
    let eval_csv = |name: &str| -> Result<Vec<u8>, String> {
        let path = dir.join(name);
        run(&["eval", "--seed", "7", "--csv", path.to_str().unwrap()])?;
        fs::read(&path).map_err(err)
    };
    let eval_same = eval_csv("a.csv")? == eval_csv("b.csv")?;
    let bench_same = run(&["bench", "--seed", "7"])? == run(&["bench", "--seed", "7"])?;
    let _ = fs::remove_dir_all(&dir);
    ensure(
        eval_same && bench_same,
        format!("eval CSV identical: {eval_same}, bench CSV identical: {bench_same} (default config, seed 7)"),
    )
}

fn main() {
    let criteria = [
        Criterion {
            number: 1,
            title: "mixing attention equals its loop reference",
            limit: Duration::from_secs(60),
            check: mixing_equivalence,
        },
        Criterion {
            number: 2,
            title: "MAC scaling in T",
            limit: Duration::from_secs(120),
            check: complexity_slopes,
        },
        Criterion {
            number: 3,
            title: "gradient suite",
            limit: Duration::from_secs(120),
            check: gradients,
        },
        Criterion {
            number: 4,
            title: "paper presets",
            limit: Duration::MAX,
            check: presets,
        },
        Criterion {
            number: 5,
            title: "view, aggregation and top-k protocol",
            limit: Duration::MAX,
            check: protocol,
        },
        Criterion {
            number: 6,
            title: "desk-scale complementarity",
            limit: Duration::from_secs(1800),
            check: complementarity,
        },
        Criterion {
            number: 7,
            title: "determinism of eval and bench",
            limit: Duration::MAX,
            check: determinism,
        },
    ];
    let mut failures = 0;
    for c in criteria {
        let start = Instant::now();
        let outcome = (c.check)();
        let elapsed = start.elapsed();
        let in_time = elapsed < c.limit;
        let (ok, detail) = match outcome {
            Ok(d) => (in_time, d),
            Err(d) => (false, d),
        };
        let budget = if c.limit == Duration::MAX {
            String::new()
        } else {
            format!(" < {}s", c.limit.as_secs())
        };
        println!(
            "{} criterion {}: {} | {} | {:.1}s{budget}",
            if ok { "PASS" } else { "FAIL" },
            c.number,
            c.title,
            detail,
            elapsed.as_secs_f64()
        );
        failures += usize::from(!ok);
    }
    if failures > 0 {
        println!("{failures} criteria failed");
        std::process::exit(1);
    }
}
