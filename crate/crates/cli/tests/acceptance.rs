//! Acceptance suite. Runs every criterion and prints one line each:
//!
//! ```text
//! cargo test --release -p c3r-cli --test acceptance            # all nine
//! cargo test --release -p c3r-cli --test acceptance -- 5 6 7   # a subset
//! ```

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::{Command, ExitCode};
use std::time::{Duration, Instant};

use c3r::dataset::Dataset;
use c3r::encoder::{
    count_parameters, normalized_shared_depth, vit_parameter_count, Aggregation, CceEncoder, EncoderConfig,
    ForwardOptions, ModelConfig, VitConfig,
};
use c3r::eval::{
    cosine_diagnostic, flip_retrieval, limited_context_sweep, mean_context_drop, median, retrieval_scores, ProbeConfig,
};
use c3r::mcd::channel_drop::{sample_drop_count, DropPolicy};
use c3r::mcd::heads::Projected;
use c3r::mcd::loss::mcd_loss;
use c3r::mcd::trainer::{ema_update, new_optimizer, train, train_step, DistillationState, StepMetrics, TrainConfig};
use c3r::params::ParamStore;
use c3r::schema::GroupedBatch;
use c3r::stats::{channel_stats, parity_entropy, StatsConfig, VitExtractor};
use c3r::stems::{instance_normalize, INSTANCE_NORM_EPS};
use c3r::synth::{generate, SynthConfig};
use candle_core::{DType, Device, Tensor, Var};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

fn rand_tensor(shape: &[usize], seed: u64, dtype: DType) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n: usize = shape.iter().product();
    let v: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
    Tensor::from_vec(v, shape, &Device::Cpu).unwrap().to_dtype(dtype).unwrap()
}

fn to_vec(t: &Tensor) -> Vec<f64> {
    t.flatten_all().unwrap().to_dtype(DType::F64).unwrap().to_vec1().unwrap()
}

fn max_abs(a: &Tensor, b: &Tensor) -> f64 {
    to_vec(a).iter().zip(to_vec(b)).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn build_cce(cfg: &EncoderConfig, dtype: DType, seed: u64) -> (ParamStore, CceEncoder) {
    let mut store = ParamStore::new(dtype);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let enc = CceEncoder::new(&mut store.builder(&mut rng), cfg).unwrap();
    (store, enc)
}

// 1. Parameter normalization ------------------------------------------------

/// Transformer block with biases and two LayerNorms, mlp_ratio 4.
fn block_formula(d: usize) -> usize {
    12 * d * d + 13 * d
}

fn vit_formula(c: &VitConfig) -> usize {
    let n = (c.image_size / c.patch_size).pow(2);
    let p2 = c.patch_size * c.patch_size;
    c.in_channels * p2 * c.embed_dim + c.embed_dim + (n + 1) * c.embed_dim + c.embed_dim + c.depth * block_formula(c.embed_dim) + 2 * c.embed_dim
}

fn cce_formula(c: &EncoderConfig) -> usize {
    let n = (c.image_size / c.patch_size).pow(2);
    let p2 = c.patch_size * c.patch_size;
    let d = c.embed_dim / 2;
    let stem = p2 * d + d + n * d;
    2 * stem + 2 * c.branch_depth * block_formula(d) + 2 * c.embed_dim + c.embed_dim + c.shared_depth * block_formula(c.embed_dim) + 2 * c.embed_dim
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let small = EncoderConfig::vit_small();
    let toy = EncoderConfig {
        embed_dim: 64,
        heads: 4,
        branch_depth: 2,
        shared_depth: 10,
        patch_size: 8,
        image_size: 32,
        ..small.clone()
    };
    let mut pass = true;
    let mut detail = Vec::new();
    for cfg in [small, toy.clone()] {
        let baseline = VitConfig::baseline_for(&cfg, 4, 12);
        let base = vit_parameter_count(&baseline);
        pass &= base == vit_formula(&baseline);
        let depth = normalized_shared_depth(&baseline, &cfg);
        pass &= depth == 10 || depth == 11;
        let mut totals = Vec::new();
        for s in [10, 11] {
            let c = EncoderConfig { shared_depth: s, ..cfg.clone() };
            let total = count_parameters(&c);
            pass &= total == cce_formula(&c);
            totals.push(format!("s={s}: {total} ({:+.2}%)", 100.0 * (total as f64 - base as f64) / base as f64));
        }
        let normalized = count_parameters(&EncoderConfig { shared_depth: depth, ..cfg.clone() });
        let gap = (normalized as f64 - base as f64).abs() / base as f64;
        pass &= gap <= 0.02;
        detail.push(format!("D={} baseline {base}, normalized s={depth}, {}", cfg.embed_dim, totals.join(", ")));
    }
    // the analytic count agrees with the instantiated model at D=64
    let (store, _) = build_cce(&EncoderConfig { shared_depth: 11, ..toy.clone() }, DType::F32, 0);
    pass &= store.count_where(|n| !n.starts_with("mask_token")) == count_parameters(&EncoderConfig { shared_depth: 11, ..toy });
    let secs = start.elapsed().as_secs_f64();
    pass &= secs < 1.0;
    outcome(pass, format!("{}; {secs:.2}s", detail.join("; ")))
}

// 2. Invariants ---------------------------------------------------------------

fn small_encoder(aggregation: Aggregation) -> EncoderConfig {
    EncoderConfig {
        embed_dim: 32,
        branch_depth: 1,
        shared_depth: 2,
        heads: 4,
        aggregation,
        patch_size: 8,
        image_size: 32,
        ..EncoderConfig::toy()
    }
}

fn criterion_2() -> Outcome {
    let start = Instant::now();
    let mut checks: Vec<(&str, bool)> = Vec::new();

    let mut perm_dev: f64 = 0.0;
    for agg in [Aggregation::Pre, Aggregation::Post] {
        let (_, enc) = build_cce(&small_encoder(agg), DType::F32, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for trial in 0..5 {
            let batch = GroupedBatch::new(
                rand_tensor(&[2, 3, 32, 32], trial, DType::F32),
                rand_tensor(&[2, 2, 32, 32], trial + 100, DType::F32),
            )
            .unwrap();
            let mut p1 = vec![0, 1, 2];
            let mut p2 = vec![0, 1];
            p1.shuffle(&mut rng);
            p2.shuffle(&mut rng);
            let permuted = batch.select_context(&p1).unwrap().select_concept(&p2).unwrap();
            let a = enc.forward_grouped(&batch, &ForwardOptions::default()).unwrap();
            let b = enc.forward_grouped(&permuted, &ForwardOptions::default()).unwrap();
            perm_dev = perm_dev.max(max_abs(&a.cls, &b.cls)).max(max_abs(&a.patches, &b.patches));
        }
    }
    checks.push(("permutation", perm_dev <= 1e-5));

    let mut moments_ok = true;
    for seed in 0..20 {
        let x = ((rand_tensor(&[1, 1, 32, 32], seed, DType::F64) * (1.0 + seed as f64)).unwrap() - 3.0).unwrap();
        let v = to_vec(&instance_normalize(&x, INSTANCE_NORM_EPS).unwrap());
        let mean = v.iter().sum::<f64>() / v.len() as f64;
        let sd = (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / v.len() as f64).sqrt();
        moments_ok &= mean.abs() <= 1e-4 && (sd - 1.0).abs() <= 1e-3;
    }
    checks.push(("instance-norm moments", moments_ok));

    let mut kl_ok = true;
    for seed in 0..50 {
        let zs = Projected::from_logits(&(rand_tensor(&[4, 16], seed, DType::F64) * 5.0).unwrap(), 1.0).unwrap();
        let zt = Projected::from_logits(&(rand_tensor(&[4, 16], seed + 1000, DType::F64) * 5.0).unwrap(), 1.0).unwrap();
        let kl = mcd_loss(&zs, &zt).unwrap().to_scalar::<f64>().unwrap();
        let zero = mcd_loss(&zt, &zt).unwrap().to_scalar::<f64>().unwrap();
        kl_ok &= kl >= 0.0 && zero.abs() <= 1e-12;
    }
    checks.push(("KL >= 0, KL(z,z) = 0", kl_ok));

    let mk = |s: u64| {
        let mut p = ParamStore::new(DType::F64);
        p.insert("w", &rand_tensor(&[5, 3], s, DType::F64)).unwrap();
        p
    };
    let (teacher, student) = (mk(1), mk(2));
    let (t0, s0) = (to_vec(teacher.get("w").unwrap().as_tensor()), to_vec(student.get("w").unwrap().as_tensor()));
    ema_update(&teacher, &student, 0.9).unwrap();
    let t1 = to_vec(teacher.get("w").unwrap().as_tensor());
    let ema_ok = t1.iter().zip(t0.iter().zip(&s0)).all(|(n, (t, s))| *n == 0.9 * t + (1.0 - 0.9) * s);
    checks.push(("EMA exact", ema_ok));

    let ds = generate(&SynthConfig { n_samples: 32, ..Default::default() }).unwrap();
    let mut cfg = directional_train(0, 1, DropPolicy::UniformStudent { max_c: 2 });
    cfg.lr = TrainConfig::toy(32).lr;
    cfg.ema_momentum = 1.0;
    let mut state = DistillationState::new(&ModelConfig::Cce(small_encoder(Aggregation::Post)), &ds.schema, &cfg.head, DType::F32, 0).unwrap();
    let before = state.teacher_params.snapshot().unwrap();
    let mut opt = new_optimizer(&state, &cfg).unwrap();
    train_step(&mut state, &ds, &cfg, &mut opt).unwrap();
    let frozen = state.teacher_params.iter().all(|(n, v)| to_vec(v.as_tensor()) == to_vec(&before[n]));
    checks.push(("teacher gradient-free", frozen));

    let (mut store, pre) = build_cce(&small_encoder(Aggregation::Pre), DType::F32, 4);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let post = CceEncoder::new(&mut store.builder(&mut rng), &small_encoder(Aggregation::Post)).unwrap();
    let mut single_dev: f64 = 0.0;
    for seed in 0..5 {
        let batch = GroupedBatch::new(
            rand_tensor(&[2, 1, 32, 32], seed, DType::F32),
            rand_tensor(&[2, 1, 32, 32], seed + 50, DType::F32),
        )
        .unwrap();
        let a = pre.forward_grouped(&batch, &ForwardOptions::default()).unwrap();
        let b = post.forward_grouped(&batch, &ForwardOptions::default()).unwrap();
        single_dev = single_dev.max(max_abs(&a.cls, &b.cls));
    }
    checks.push(("C_g=1 pre/post", single_dev <= 1e-6));

    let (p1, h1) = parity_entropy(&[1.0, 0.0, 0.0, 0.0]);
    let (p2, h2) = parity_entropy(&[0.25; 4]);
    let mut bounds_ok = p1 == 1.0 && h1 == 0.0 && p2 == 0.25 && (h2 - 2.0).abs() < 1e-12;
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for _ in 0..200 {
        let k = rng.random_range(2..9);
        let w: Vec<f64> = (0..k).map(|_| rng.random::<f64>() + 1e-9).collect();
        let s: f64 = w.iter().sum();
        let (p, h) = parity_entropy(&w.iter().map(|x| x / s).collect::<Vec<_>>());
        bounds_ok &= p >= 1.0 / k as f64 - 1e-12 && p <= 1.0 && h >= 0.0 && h <= (k as f64).log2() + 1e-12;
    }
    checks.push(("parity/entropy", bounds_ok));

    let secs = start.elapsed().as_secs_f64();
    let failed: Vec<&str> = checks.iter().filter(|c| !c.1).map(|c| c.0).collect();
    outcome(
        failed.is_empty() && secs < 120.0,
        format!(
            "{} checks, failed: {:?}; permutation dev {perm_dev:.1e}, C_g=1 dev {single_dev:.1e}; {secs:.1}s",
            checks.len(),
            failed
        ),
    )
}

// 3. Gradient check -----------------------------------------------------------

fn set_element(var: &Var, index: usize, value: f64) {
    let mut v = to_vec(var.as_tensor());
    v[index] = value;
    var.set(&Tensor::from_vec(v, var.dims(), var.device()).unwrap()).unwrap();
}

fn criterion_3() -> Outcome {
    let start = Instant::now();
    let cfg = EncoderConfig {
        embed_dim: 16,
        branch_depth: 1,
        shared_depth: 1,
        heads: 2,
        aggregation: Aggregation::Post,
        patch_size: 8,
        image_size: 16,
        ..EncoderConfig::toy()
    };
    let (store, enc) = build_cce(&cfg, DType::F64, 3);
    let batch = GroupedBatch::new(
        rand_tensor(&[2, 3, 16, 16], 1, DType::F64),
        rand_tensor(&[2, 1, 16, 16], 2, DType::F64),
    )
    .unwrap();
    let w = rand_tensor(&[2, 16], 3, DType::F64);
    let loss = || -> Tensor {
        let out = enc.forward_grouped(&batch, &ForwardOptions::default()).unwrap();
        let lin = (&out.cls * &w).unwrap().sum_all().unwrap();
        let quad = out.cls.sqr().unwrap().sum_all().unwrap();
        (lin + (quad * 0.5).unwrap()).unwrap()
    };
    let grads = loss().backward().unwrap();
    let elements: Vec<(&str, &Var, usize)> = store
        .iter()
        .filter(|(n, _)| !n.starts_with("mask_token"))
        .flat_map(|(n, v)| (0..v.elem_count()).map(move |i| (n, v, i)))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let picked = rand::seq::index::sample(&mut rng, elements.len(), 200);
    let eps = 1e-5;
    let mut worst: f64 = 0.0;
    let mut worst_name = String::new();
    for k in picked.iter() {
        let (name, var, i) = elements[k];
        let analytic = grads.get(var.as_tensor()).map_or(0.0, |g| to_vec(g)[i]);
        let x0 = to_vec(var.as_tensor())[i];
        set_element(var, i, x0 + eps);
        let up = loss().to_scalar::<f64>().unwrap();
        set_element(var, i, x0 - eps);
        let down = loss().to_scalar::<f64>().unwrap();
        set_element(var, i, x0);
        let numeric = (up - down) / (2.0 * eps);
        let rel = (numeric - analytic).abs() / numeric.abs().max(analytic.abs()).max(1e-6);
        if rel > worst {
            worst = rel;
            worst_name = format!("{name}[{i}]");
        }
    }
    let secs = start.elapsed().as_secs_f64();
    outcome(
        worst <= 1e-3 && secs < 300.0,
        format!("200 of {} parameters, worst relative error {worst:.2e} at {worst_name}; {secs:.1}s", elements.len()),
    )
}

// 4. KL and mAP oracles -------------------------------------------------------

fn brute_force_map(vectors: &[Vec<f64>], classes: &[usize]) -> f64 {
    let cos = |a: &[f64], b: &[f64]| {
        let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
        let na: f64 = a.iter().map(|x| x * x).sum();
        let nb: f64 = b.iter().map(|x| x * x).sum();
        // same rounding as the library so exact ties stay ties
        dot / (na * nb).sqrt()
    };
    let n = vectors.len();
    let (mut total, mut queries) = (0.0, 0);
    for q in 0..n {
        let relevant: Vec<usize> = (0..n).filter(|&j| j != q && classes[j] == classes[q]).collect();
        if relevant.is_empty() {
            continue;
        }
        let s: Vec<f64> = (0..n).map(|j| cos(&vectors[q], &vectors[j])).collect();
        let rank = |j: usize| 1 + (0..n).filter(|&l| l != q && l != j && (s[l] > s[j] || (s[l] == s[j] && l < j))).count();
        total += relevant
            .iter()
            .map(|&j| relevant.iter().filter(|&&l| rank(l) <= rank(j)).count() as f64 / rank(j) as f64)
            .sum::<f64>()
            / relevant.len() as f64;
        queries += 1;
    }
    total / queries as f64
}

fn criterion_4() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut kl_err: f64 = 0.0;
    for _ in 0..100 {
        let k = rng.random_range(2..32);
        let mut draw = || {
            let w: Vec<f64> = (0..k).map(|_| rng.random::<f64>().powi(3) + 1e-4).collect();
            let s: f64 = w.iter().sum();
            w.into_iter().map(|x| x / s).collect::<Vec<f64>>()
        };
        let (zs, zt) = (draw(), draw());
        let oracle: f64 = zt.iter().zip(&zs).map(|(t, s)| t * (t.ln() - s.ln())).sum();
        let tensor = |v: &[f64]| Projected::from_probs(&Tensor::from_vec(v.to_vec(), (1, k), &Device::Cpu).unwrap()).unwrap();
        let got = mcd_loss(&tensor(&zs), &tensor(&zt)).unwrap().to_scalar::<f64>().unwrap();
        kl_err = kl_err.max((got - oracle).abs());
    }

    let at = |deg: f64| vec![deg.to_radians().cos(), deg.to_radians().sin()];
    let four = retrieval_scores(&[at(0.0), at(60.0), at(25.0), at(100.0)], &[0, 0, 1, 1], 1).unwrap().map;
    let four_ok = four == (0.5 + 1.0 / 3.0 + 1.0 / 3.0 + 0.5) / 4.0;

    let mut map_err: f64 = 0.0;
    for _ in 0..50 {
        let n = rng.random_range(3..12);
        let dim = rng.random_range(1..5);
        let n_classes = rng.random_range(1..4);
        let vectors: Vec<Vec<f64>> = (0..n).map(|_| (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let mut classes: Vec<usize> = (0..n).map(|_| rng.random_range(0..n_classes)).collect();
        classes[1] = classes[0];
        let got = retrieval_scores(&vectors, &classes, 1).unwrap().map;
        map_err = map_err.max((got - brute_force_map(&vectors, &classes)).abs());
    }
    outcome(
        kl_err <= 1e-6 && four_ok && map_err <= 1e-9,
        format!("KL max error {kl_err:.1e} over 100 pairs; 4-point mAP {four:.6} exact: {four_ok}; brute-force max error {map_err:.1e} over 50"),
    )
}

// 5-7. Directional analogs on trained toy models -------------------------------

const DIRECTIONAL_SEEDS: u64 = 5;
const DIRECTIONAL_SAMPLES: usize = 512;
const DIRECTIONAL_STEPS: usize = 400;
const DIRECTIONAL_LR: f64 = 2e-3;

fn directional_train(seed: u64, steps: usize, drop: DropPolicy) -> TrainConfig {
    let mut t = TrainConfig::toy(32);
    t.seed = seed;
    t.steps = steps;
    t.drop = drop;
    t.lr = DIRECTIONAL_LR;
    t.head.hidden_dim = 64;
    t.head.bottleneck_dim = 32;
    t.head.prototypes = 64;
    t
}

struct Trained {
    ds: Dataset,
    post_mcd: DistillationState,
    post_plain: DistillationState,
    pre_mcd: DistillationState,
}

fn train_one(ds: &Dataset, agg: Aggregation, drop: DropPolicy, seed: u64) -> DistillationState {
    let cfg = directional_train(seed, DIRECTIONAL_STEPS, drop);
    let model = ModelConfig::Cce(EncoderConfig { branch_depth: 2, ..small_encoder(agg) });
    let mut state = DistillationState::new(&model, &ds.schema, &cfg.head, DType::F32, seed).unwrap();
    train(&mut state, ds, &cfg, |_| Ok(())).unwrap();
    state
}

fn trained_models(cache: &mut Option<Vec<Trained>>) -> &[Trained] {
    cache.get_or_insert_with(|| {
        (0..DIRECTIONAL_SEEDS)
            .map(|seed| {
                let ds = generate(&SynthConfig {
                    n_samples: DIRECTIONAL_SAMPLES,
                    seed,
                    ..Default::default()
                })
                .unwrap();
                let mcd = DropPolicy::UniformStudent { max_c: 2 };
                Trained {
                    post_mcd: train_one(&ds, Aggregation::Post, mcd, seed),
                    post_plain: train_one(&ds, Aggregation::Post, DropPolicy::None, seed),
                    pre_mcd: train_one(&ds, Aggregation::Pre, mcd, seed),
                    ds,
                }
            })
            .collect()
    })
}

fn criterion_5(cache: &mut Option<Vec<Trained>>) -> Outcome {
    let mut lower = 0;
    let mut gaps = Vec::new();
    for t in trained_models(cache) {
        let r = flip_retrieval(&t.post_mcd.teacher.backbone, &t.ds, c3r::eval::retrieval::DEFAULT_K).unwrap();
        let gap = r.unflipped.map - r.flipped.map;
        if gap > 0.0 {
            lower += 1;
        }
        gaps.push(gap);
    }
    let mean = gaps.iter().sum::<f64>() / gaps.len() as f64;
    outcome(
        lower >= 4 && mean > 0.0,
        format!("flipped lower in {lower}/{DIRECTIONAL_SEEDS} seeds, mean gap {mean:+.4}, gaps {gaps:+.4?}"),
    )
}

fn criterion_6(cache: &mut Option<Vec<Trained>>) -> Outcome {
    let mut wins = 0;
    let mut rows = Vec::new();
    for (seed, t) in trained_models(cache).iter().enumerate() {
        let probe = ProbeConfig { seed: seed as u64, ..Default::default() };
        let with = mean_context_drop(&limited_context_sweep(&t.post_mcd.teacher.backbone, &t.ds, &probe).unwrap());
        let without = mean_context_drop(&limited_context_sweep(&t.post_plain.teacher.backbone, &t.ds, &probe).unwrap());
        if with < without {
            wins += 1;
        }
        rows.push(format!("{with:+.3}/{without:+.3}"));
    }
    outcome(
        wins >= 4,
        format!("MCD drop smaller in {wins}/{DIRECTIONAL_SEEDS} seeds (MCD/no-MCD drops: {})", rows.join(", ")),
    )
}

fn criterion_7(cache: &mut Option<Vec<Trained>>) -> Outcome {
    // pooled over seeds: [variant][drop count - 1] -> (intermediate, final)
    let mut pooled = [[(Vec::new(), Vec::new()), (Vec::new(), Vec::new())], [(Vec::new(), Vec::new()), (Vec::new(), Vec::new())]];
    for t in trained_models(cache) {
        let samples: Vec<usize> = (0..200.min(t.ds.len())).collect();
        for (v, state) in [&t.pre_mcd, &t.post_mcd].into_iter().enumerate() {
            let enc = state.teacher.backbone.as_cce().unwrap();
            for c in [1, 2] {
                let curves = cosine_diagnostic(enc, &t.ds, &samples, c).unwrap();
                pooled[v][c - 1].0.extend(curves.intermediate);
                pooled[v][c - 1].1.extend(curves.final_cls);
            }
        }
    }
    let m = |v: usize, c: usize| (median(&pooled[v][c].0), median(&pooled[v][c].1));
    let (pre1, pre2, post1, post2) = (m(0, 0), m(0, 1), m(1, 0), m(1, 1));
    let higher = pre1.0 > post1.0 && pre2.0 > post2.0;
    let decreasing = pre2.0 < pre1.0 && pre2.1 < pre1.1 && post2.0 < post1.0 && post2.1 < post1.1;
    outcome(
        higher && decreasing,
        format!(
            "medians intermediate/final: pre c1 {:.4}/{:.4} c2 {:.4}/{:.4}; post c1 {:.4}/{:.4} c2 {:.4}/{:.4}",
            pre1.0, pre1.1, pre2.0, pre2.1, post1.0, post1.1, post2.0, post2.1
        ),
    )
}

// 8. Channel-role recovery and drop-count frequencies ---------------------------

fn criterion_8() -> Outcome {
    let mut pass = true;
    let mut detail = Vec::new();
    for coherence in [0.8, 0.9] {
        let ds = generate(&SynthConfig {
            n_samples: 1000,
            n_classes: 8,
            context_coherence: coherence,
            ..Default::default()
        })
        .unwrap();
        let extractor = VitExtractor::random(&VitExtractor::default_config(ds.image_size), 0).unwrap();
        let report = channel_stats(&ds, &extractor, &StatsConfig::default()).unwrap();
        let context = ds.schema.context_names();
        let (ctx, con): (Vec<_>, Vec<_>) = report.channels.iter().partition(|c| context.contains(&c.channel));
        let min_ctx = ctx.iter().map(|c| c.parity).fold(f64::INFINITY, f64::min);
        let max_con = con.iter().map(|c| c.parity).fold(f64::NEG_INFINITY, f64::max);
        pass &= min_ctx > max_con;
        let parities: Vec<String> = report.channels.iter().map(|c| format!("{} {:.3}", c.channel, c.parity)).collect();
        detail.push(format!("coherence {coherence}: {}", parities.join(", ")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut counts = [0usize; 3];
    let draws = 30_000;
    for _ in 0..draws {
        counts[sample_drop_count(&DropPolicy::UniformStudent { max_c: 2 }, 3, &mut rng).unwrap()] += 1;
    }
    let freq: Vec<f64> = counts.iter().map(|&c| c as f64 / draws as f64).collect();
    pass &= freq.iter().all(|f| (f - 1.0 / 3.0).abs() <= 0.02);
    detail.push(format!("UniformStudent(2) frequencies {freq:.4?}"));
    outcome(pass, detail.join("; "))
}

// 9. End-to-end smoke through the binary ----------------------------------------

fn c3r(args: &[&str]) {
    let status = Command::new(env!("CARGO_BIN_EXE_c3r"))
        .args(args)
        .env("RUST_LOG", "warn")
        .status()
        .expect("run c3r");
    assert!(status.success(), "c3r {args:?} failed with {status}");
}

fn losses(metrics: &Path) -> Vec<StepMetrics> {
    std::fs::read_to_string(metrics)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

fn criterion_9() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let p = |s: &str| root.join(s).to_string_lossy().into_owned();
    let start = Instant::now();
    c3r(&["gen", "--seed", "0", "--out", &p("data")]);
    c3r(&["train", "--seed", "0", "--data", &p("data"), "--out", &p("run0")]);
    let ckpt = p("run0/checkpoint.safetensors");
    c3r(&["embed", "--data", &p("data"), "--checkpoint", &ckpt, "--level", "well", "--out", &p("embed")]);
    c3r(&["eval", "--data", &p("data"), "--checkpoint", &ckpt, "--drop", "nucleus", "--flip", "--out", &p("eval")]);
    let pipeline = start.elapsed();
    let embedded = c3r::eval::read_embeddings(&root.join("embed/embeddings.csv")).unwrap();
    let report: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(root.join("eval/report.json")).unwrap()).unwrap();
    let mut pass = !embedded.is_empty() && report["probe"]["dropped"]["map"].is_number() && pipeline <= Duration::from_secs(15 * 60);

    let mut lower = 0;
    let mut pairs = Vec::new();
    for seed in 0..10u64 {
        let run = if seed == 0 {
            root.join("run0")
        } else {
            let out = p(&format!("run{seed}"));
            c3r(&["train", "--seed", &seed.to_string(), "--data", &p("data"), "--out", &out]);
            root.join(format!("run{seed}"))
        };
        let m = losses(&run.join("metrics.jsonl"));
        pass &= m.len() == 200;
        let (l10, l200) = (m[9].total, m[199].total);
        if l200 < l10 {
            lower += 1;
        }
        pairs.push(format!("{l10:.3}->{l200:.3}"));
    }
    pass &= lower >= 8;
    outcome(
        pass,
        format!(
            "gen->train->embed->eval in {:.0}s ({} threads); step-200 loss below step-10 in {lower}/10 seeds: {}",
            pipeline.as_secs_f64(),
            std::thread::available_parallelism().map_or(1, |n| n.get()),
            pairs.join(", ")
        ),
    )
}

fn main() -> ExitCode {
    let selected: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let names = [
        "parameter normalization",
        "invariant suite",
        "gradient check",
        "KL and mAP oracles",
        "group flip lowers retrieval",
        "MCD robust to limited context",
        "pre vs post aggregation similarity",
        "channel-role recovery",
        "end-to-end smoke",
    ];
    let mut cache = None;
    let mut failures = 0;
    for (i, name) in names.iter().enumerate() {
        let n = i + 1;
        if !selected.is_empty() && !selected.contains(&n) {
            continue;
        }
        let start = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(|| match n {
            1 => criterion_1(),
            2 => criterion_2(),
            3 => criterion_3(),
            4 => criterion_4(),
            5 => criterion_5(&mut cache),
            6 => criterion_6(&mut cache),
            7 => criterion_7(&mut cache),
            8 => criterion_8(),
            _ => criterion_9(),
        }));
        let out = result.unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            outcome(false, format!("panicked: {msg}"))
        });
        if !out.pass {
            failures += 1;
        }
        println!(
            "criterion {n} [{}] {name} ({:.1}s): {}",
            if out.pass { "PASS" } else { "FAIL" },
            start.elapsed().as_secs_f64(),
            out.detail
        );
    }
    if failures == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
