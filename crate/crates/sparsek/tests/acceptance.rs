//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Runs without the libtest harness so the report prints in order. The
//! process exits nonzero if any criterion fails.

use std::process::ExitCode;
use std::time::Instant;

use ::sparsek::bench::{self, BenchMode, BenchSpec};
use ::sparsek::config::{RunConfig, TaskKind};
use ::sparsek::gradcheck::{self, Preset};
use ::sparsek::train::{DataSource, Trainer};
use sparsek_core::attention::{
    dense_causal_attention, sparsek_attention, AttnConfig, AttnParams, KeyMode, LinearAttnParams,
};
use sparsek_core::cache::chunked_forward;
use sparsek_core::numerics::{dot, finite_diff_jvp, matmul};
use sparsek_core::selection::{score_tokens, Scorer, SelectionMode};
use sparsek_core::sparsek::topk_indices;
use sparsek_core::trainer::{make_passkey_at, passkey_accuracy, AttnKind};
use sparsek_core::{sparsek, sparsek_jvp, KBudget, Rng, SparseKSolution, StreamState, Tensor2};

type Criterion = (&'static str, fn() -> Verdict);

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: String) -> Verdict {
    Verdict { pass, detail }
}

fn kb(k: f64) -> KBudget {
    KBudget::new(k).unwrap()
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Largest stationarity residual of `p - z + tau - mu + nu = 0` with the
/// multipliers implied by `p`, plus the gap between `p` and `clamp(z - tau)`.
fn kkt_residual(z: &[f64], sol: &SparseKSolution) -> f64 {
    let tau = sol.tau;
    let mut worst: f64 = 0.0;
    for (&zj, &pj) in z.iter().zip(&sol.p) {
        if !(0.0..=1.0).contains(&pj) {
            return f64::INFINITY;
        }
        let mu = if pj == 0.0 { (tau - zj).max(0.0) } else { 0.0 };
        let nu = if pj == 1.0 { (zj - 1.0 - tau).max(0.0) } else { 0.0 };
        worst = worst.max((pj - zj + tau - mu + nu).abs());
        worst = worst.max((pj - (zj - tau).clamp(0.0, 1.0)).abs());
    }
    worst
}

/// Feasible point with coordinates drawn uniformly and then shifted so they
/// sum to `k`.
fn random_feasible(rng: &mut Rng, m: usize, k: f64) -> Vec<f64> {
    let shape = 0.2 + 3.0 * rng.uniform();
    let y: Vec<f64> = (0..m).map(|_| rng.uniform().powf(shape)).collect();
    let total = |c: f64| y.iter().map(|v| (v + c).clamp(0.0, 1.0)).sum::<f64>();
    let (mut lo, mut hi) = (-1.0, 1.0);
    for _ in 0..64 {
        let mid = 0.5 * (lo + hi);
        if total(mid) < k {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let c = 0.5 * (lo + hi);
    let mut p: Vec<f64> = y.iter().map(|v| (v + c).clamp(0.0, 1.0)).collect();
    let err = k - p.iter().sum::<f64>();
    if let Some(j) = p.iter().position(|&v| v + err >= 0.0 && v + err <= 1.0) {
        p[j] += err;
    }
    p
}

/// Moves mass between two coordinates of `p`, staying inside the box.
fn local_feasible(rng: &mut Rng, p: &[f64]) -> Vec<f64> {
    let mut y = p.to_vec();
    let m = y.len();
    if m < 2 {
        return y;
    }
    let i = rng.below(m);
    let j = (i + 1 + rng.below(m - 1)) % m;
    let lo = -(y[i].min(1.0 - y[j]));
    let hi = (1.0 - y[i]).min(y[j]);
    let spread = if rng.below(2) == 0 { 1e-3 } else { 1.0 };
    let t = (lo + (hi - lo) * rng.uniform()) * spread;
    y[i] += t;
    y[j] -= t;
    y
}

fn criterion_1() -> Verdict {
    let mut rng = Rng::new(1);
    let (mut worst_margin, mut worst_sum, mut worst_kkt) = (f64::INFINITY, 0.0f64, 0.0f64);
    for _ in 0..1000 {
        let m = 1 + rng.below(64);
        let scale = [0.1, 1.0, 5.0][rng.below(3)];
        let mut z = rng.normal_vec(m, scale);
        if rng.below(4) == 0 {
            for v in &mut z {
                *v = (*v * 4.0).round() / 4.0;
            }
        }
        let k = if rng.below(4) == 0 {
            (1 + rng.below(m)) as f64
        } else {
            (m as f64 * rng.uniform()).max(1e-3)
        };
        let sol = sparsek(&z, kb(k)).unwrap();
        worst_sum = worst_sum.max((sol.p.iter().sum::<f64>() - k).abs());
        worst_kkt = worst_kkt.max(kkt_residual(&z, &sol));
        let own = sq_dist(&sol.p, &z);
        for c in 0..10_000 {
            let y = if c % 2 == 0 {
                random_feasible(&mut rng, m, k)
            } else {
                local_feasible(&mut rng, &sol.p)
            };
            if (y.iter().sum::<f64>() - k).abs() > 1e-9 {
                continue;
            }
            worst_margin = worst_margin.min(sq_dist(&y, &z) - own);
        }
    }
    let pass = worst_margin >= -1e-9 && worst_sum <= 1e-9 && worst_kkt <= 1e-9;
    verdict(
        pass,
        format!("min margin {worst_margin:.3e}, max |sum-k| {worst_sum:.1e}, max KKT residual {worst_kkt:.1e}"),
    )
}

fn criterion_2() -> Verdict {
    let mut rng = Rng::new(2);
    let mut worst: f64 = 0.0;
    let (mut points, mut flat, mut flat_bad) = (0, 0, 0);
    while points < 500 {
        let m = 2 + rng.below(63);
        let z = rng.normal_vec(m, 1.0);
        let k = 0.5 + (m as f64 - 1.0) * rng.uniform();
        let sol = sparsek(&z, kb(k)).unwrap();
        let near = z
            .iter()
            .any(|&v| (v - sol.tau).abs() < 1e-3 || (v - sol.tau - 1.0).abs() < 1e-3);
        if near {
            continue;
        }
        points += 1;
        let v = rng.normal_vec(m, 1.0);
        let jvp = sparsek_jvp(&sol, &v).unwrap();
        let fd = finite_diff_jvp(|y| Ok(sparsek(y, kb(k))?.p), &z, &v, 1e-5).unwrap();
        let diff = sq_dist(&jvp, &fd).sqrt();
        if sol.support.len() < 2 {
            flat += 1;
            if jvp.iter().any(|&g| g != 0.0) || diff > 1e-8 {
                flat_bad += 1;
            }
            continue;
        }
        let norm = dot(&jvp, &jvp).sqrt().max(dot(&fd, &fd).sqrt()).max(1e-6);
        worst = worst.max(diff / norm);
    }
    verdict(
        worst < 1e-4 && flat_bad == 0,
        format!("{points} points, max relative error {worst:.2e}, {flat} points with a locally constant mask, {flat_bad} nonzero there"),
    )
}

fn criterion_3() -> Verdict {
    let mut rng = Rng::new(3);
    let mut worst: f64 = 0.0;
    let mut tau_ok = true;
    let mut reappeared = 0;
    for s in 0..200 {
        let m = 1 + rng.below(512);
        let k = if s % 5 == 0 {
            (1 + rng.below(16)) as f64
        } else {
            0.2 + 32.0 * rng.uniform()
        };
        let drift = 0.01 * rng.normal();
        let z: Vec<f64> = (0..m)
            .map(|i| {
                let v = rng.normal() + drift * i as f64;
                if s % 7 == 0 {
                    (v * 2.0).round() / 2.0
                } else {
                    v
                }
            })
            .collect();
        let mut stream = StreamState::new(kb(k));
        let mut evicted = vec![false; m];
        let mut last_tau = f64::NEG_INFINITY;
        for t in 0..m {
            let info = stream.push(z[t]).unwrap();
            if info.tau < last_tau {
                tau_ok = false;
            }
            last_tau = info.tau;
            for &e in stream.last_evicted() {
                evicted[e] = true;
            }
            let got = stream.solution().unwrap();
            let want = sparsek(&z[..=t], kb(k)).unwrap();
            let mut full = vec![0.0; t + 1];
            for (&j, &p) in got.indices.iter().zip(&got.p) {
                if evicted[j] {
                    reappeared += 1;
                }
                full[j] = p;
            }
            for (a, b) in full.iter().zip(&want.p) {
                worst = worst.max((a - b).abs());
            }
        }
    }
    let pass = worst <= 1e-9 && tau_ok && reappeared == 0;
    verdict(
        pass,
        format!("max prefix error {worst:.1e}, tau nondecreasing {tau_ok}, reappearances {reappeared}"),
    )
}

fn attn_setup(n: usize, d: usize, seed: u64) -> (Tensor2, AttnParams) {
    let mut rng = Rng::new(seed);
    let x = Tensor2::randn(n, d, 1.0, &mut rng);
    let params = AttnParams::random(d, &mut rng);
    (x, params)
}

fn criterion_4() -> Verdict {
    let n = 128;
    let mut worst: f64 = 0.0;
    let mut cases = 0;
    for seed in 0..6u64 {
        let (x, mut params) = attn_setup(n, 8, 40 + seed);
        params.linear = Some(LinearAttnParams::identity(2, 4));
        let mut rng = Rng::new(seed);
        let mut cfg = AttnConfig::new(8, 2, 1.0 + 15.0 * rng.uniform(), rng.below(12));
        cfg.key_mode = if seed % 2 == 0 { KeyMode::Hard } else { KeyMode::Soft };
        cfg.value_mode = [SelectionMode::Soft, SelectionMode::Hard, SelectionMode::StraightThrough][seed as usize % 3];
        cfg.linear_mix = seed >= 4;
        let (want, _) = sparsek_attention(&x, &params, &cfg).unwrap();
        for chunk in [1, 7, 64, 128] {
            let (got, _) = chunked_forward(&x, &params, &cfg, chunk).unwrap();
            worst = worst.max(got.max_abs_diff(&want));
            cases += 1;
        }
    }
    verdict(worst <= 1e-6, format!("{cases} cases, max difference {worst:.1e}"))
}

fn criterion_5() -> Verdict {
    let mut worst: f64 = 0.0;
    for n in [16, 64, 256] {
        let (x, params) = attn_setup(n, 8, n as u64);
        for (k, w) in [(n as f64, 0), (n as f64, 3), (0.0, n), (4.0, n)] {
            for key_mode in [KeyMode::Hard, KeyMode::Soft] {
                let mut cfg = AttnConfig::new(8, 2, k, w);
                cfg.key_mode = key_mode;
                cfg.group_size = 16;
                let (got, _) = sparsek_attention(&x, &params, &cfg).unwrap();
                let want = dense_causal_attention(&x, &params, &cfg).unwrap();
                worst = worst.max(got.max_abs_diff(&want));
            }
        }
    }
    verdict(worst <= 1e-9, format!("max difference {worst:.1e}"))
}

fn elu_plus_one(y: f64) -> f64 {
    if y > 0.0 {
        y + 1.0
    } else {
        y.exp()
    }
}

fn feature(map: &Tensor2, x: &[f64]) -> Vec<f64> {
    (0..map.rows()).map(|a| elu_plus_one(dot(map.row(a), x))).collect()
}

/// Direct evaluation of the gated mixture: every pair `(i, j)` gets weight
/// `g_ij exp(s_ij) + (1 - g_ij) phi(q_i).phi(k_j)`, where `g_ij` is one inside
/// the window, the selection weight for selected positions, and zero
/// elsewhere (where `exp(s_ij)` does not contribute).
fn linear_mix_reference(x: &Tensor2, params: &AttnParams, cfg: &AttnConfig) -> Tensor2 {
    let n = x.rows();
    let p = cfg.head_dim;
    let lin = params.linear.as_ref().unwrap();
    let q = matmul(x, &params.wq).unwrap();
    let k = matmul(x, &params.wk).unwrap();
    let v = matmul(x, &params.wv).unwrap();
    let u = score_tokens(x, &params.scoring, &mut Scorer::new(&params.scoring)).unwrap();
    let mut o = Tensor2::zeros(n, cfg.d_model());
    for i in 0..n {
        let lim = (i + 1).saturating_sub(cfg.window);
        let mut gate = vec![0.0; i + 1];
        let mut softmax = vec![false; i + 1];
        for j in lim..=i {
            gate[j] = 1.0;
            softmax[j] = true;
        }
        if cfg.k > 0.0 && lim > 0 {
            let sol = sparsek(&u[..lim], kb(cfg.k)).unwrap();
            for j in topk_indices(&u[..lim], kb(cfg.k).hard()) {
                gate[j] = if cfg.value_mode.forward_is_soft() {
                    sol.p[j]
                } else {
                    1.0
                };
                softmax[j] = true;
            }
        }
        for h in 0..cfg.heads {
            let hs = h * p..(h + 1) * p;
            let qi = &q.row(i)[hs.clone()];
            let fq = feature(&lin.maps[h], qi);
            let weights: Vec<f64> = (0..=i)
                .map(|j| {
                    let kj = &k.row(j)[hs.clone()];
                    let e = if softmax[j] {
                        (cfg.scale * dot(qi, kj)).exp()
                    } else {
                        0.0
                    };
                    gate[j] * e + (1.0 - gate[j]) * dot(&fq, &feature(&lin.maps[h], kj))
                })
                .collect();
            let den: f64 = weights.iter().sum();
            for (j, w) in weights.iter().enumerate() {
                for t in 0..p {
                    let cur = o.get(i, h * p + t);
                    o.set(i, h * p + t, cur + w / den * v.get(j, h * p + t));
                }
            }
        }
    }
    matmul(&o, &params.wo).unwrap()
}

/// Plain causal linear attention with the same feature maps.
fn linear_attention(x: &Tensor2, params: &AttnParams, cfg: &AttnConfig) -> Tensor2 {
    let n = x.rows();
    let p = cfg.head_dim;
    let lin = params.linear.as_ref().unwrap();
    let q = matmul(x, &params.wq).unwrap();
    let k = matmul(x, &params.wk).unwrap();
    let v = matmul(x, &params.wv).unwrap();
    let mut o = Tensor2::zeros(n, cfg.d_model());
    for i in 0..n {
        for h in 0..cfg.heads {
            let hs = h * p..(h + 1) * p;
            let fq = feature(&lin.maps[h], &q.row(i)[hs.clone()]);
            let w: Vec<f64> = (0..=i)
                .map(|j| dot(&fq, &feature(&lin.maps[h], &k.row(j)[hs.clone()])))
                .collect();
            let den: f64 = w.iter().sum();
            for (j, wj) in w.iter().enumerate() {
                for t in 0..p {
                    let cur = o.get(i, h * p + t);
                    o.set(i, h * p + t, cur + wj / den * v.get(j, h * p + t));
                }
            }
        }
    }
    matmul(&o, &params.wo).unwrap()
}

fn criterion_6() -> Verdict {
    let n = 64;
    let (x, mut params) = attn_setup(n, 8, 6);
    let mut rng = Rng::new(60);
    let mut lin = LinearAttnParams::identity(2, 4);
    for m in &mut lin.maps {
        for v in m.data_mut() {
            *v += 0.3 * rng.normal();
        }
    }
    params.linear = Some(lin);
    let mut mix_err: f64 = 0.0;
    for (k, w) in [(4.0, 8), (2.5, 0), (0.0, 5), (6.0, 1)] {
        for mode in [SelectionMode::Soft, SelectionMode::Hard] {
            let mut cfg = AttnConfig::new(8, 2, k, w);
            cfg.linear_mix = true;
            cfg.value_mode = mode;
            let (got, _) = sparsek_attention(&x, &params, &cfg).unwrap();
            mix_err = mix_err.max(got.max_abs_diff(&linear_mix_reference(&x, &params, &cfg)));
        }
    }
    let mut cfg = AttnConfig::new(8, 2, 0.0, n);
    cfg.linear_mix = true;
    let (got, _) = sparsek_attention(&x, &params, &cfg).unwrap();
    let softmax_err = got.max_abs_diff(&dense_causal_attention(&x, &params, &cfg).unwrap());
    let mut cfg = AttnConfig::new(8, 2, 0.0, 0);
    cfg.linear_mix = true;
    let (got, _) = sparsek_attention(&x, &params, &cfg).unwrap();
    let linear_err = got.max_abs_diff(&linear_attention(&x, &params, &cfg));
    let pass = mix_err <= 1e-9 && softmax_err <= 1e-9 && linear_err <= 1e-9;
    verdict(
        pass,
        format!("mixture {mix_err:.1e}, softmax limit {softmax_err:.1e}, linear limit {linear_err:.1e}"),
    )
}

fn criterion_7() -> Verdict {
    let r = gradcheck::run(Preset::Model, 7, false).unwrap();
    verdict(
        r.pass && r.max_rel_err < 1e-3,
        format!(
            "{} coordinates, {} skipped at kinks, {} failures, max relative error {:.2e}",
            r.checks, r.skipped, r.failures, r.max_rel_err
        ),
    )
}

fn criterion_8() -> Verdict {
    let spec = |mode, n| BenchSpec {
        mode,
        n,
        k: 512.0,
        window: 512,
        d_model: 64,
        heads: 1,
        repeats: 5,
        seed: 8,
    };
    let specs = [
        spec(BenchMode::Attn, 4096),
        spec(BenchMode::Attn, 8192),
        spec(BenchMode::Dense, 4096),
        spec(BenchMode::Dense, 8192),
    ];
    let rows = bench::run_all(&specs).unwrap();
    let attn = rows[1].median_ms / rows[0].median_ms;
    let dense = rows[3].median_ms / rows[2].median_ms;
    let cfg = AttnConfig::new(64, 1, 512.0, 512);
    let profile = bench::decode_profile(&cfg, 1000, 10_000, 200, 8).unwrap();
    let decode = profile.late_ms / profile.early_ms;
    let pass = attn <= 2.5 && dense >= 3.5 && decode <= 1.3 && profile.peak_entries <= 512 + 512 + 1;
    verdict(
        pass,
        format!(
            "attention 4096->8192 x{attn:.2}, dense x{dense:.2}, decode step 10000/1000 x{decode:.2}, peak entries {}",
            profile.peak_entries
        ),
    )
}

fn toy_config(task: TaskKind, kind: AttnKind, seed: u64, steps: u64) -> RunConfig {
    let mut cfg = RunConfig {
        seed,
        ..RunConfig::default()
    };
    cfg.task.kind = task;
    cfg.model.context = 64;
    cfg.model.d_model = 32;
    cfg.model.layers = 2;
    cfg.model.heads = 2;
    cfg.model.attention = kind;
    cfg.model.mimic_init = true;
    match kind {
        AttnKind::Sw => {
            cfg.model.k = 0.0;
            cfg.model.window = 16;
        }
        _ => {
            cfg.model.k = 8.0;
            cfg.model.window = 8;
        }
    }
    cfg.train.steps = steps;
    cfg.train.batch_size = 8;
    cfg.train.lr = 5e-3;
    cfg.train.warmup = 100;
    cfg
}

fn train(cfg: RunConfig) -> Trainer {
    let data = DataSource::new(&cfg, None).unwrap();
    let mut trainer = Trainer::new(cfg, data, 1).unwrap();
    while !trainer.done() {
        trainer.step().unwrap();
    }
    trainer
}

fn criterion_9() -> Verdict {
    let mut wins = 0;
    let mut detail = Vec::new();
    for seed in 0..3 {
        let sparse = train(toy_config(TaskKind::Recall, AttnKind::SparseKSw, seed, 1500))
            .held_out_loss()
            .unwrap();
        let sw = train(toy_config(TaskKind::Recall, AttnKind::Sw, seed, 1500))
            .held_out_loss()
            .unwrap();
        if sparse < sw {
            wins += 1;
        }
        detail.push(format!("seed {seed}: {sparse:.4} vs {sw:.4}"));
    }
    verdict(
        wins >= 2,
        format!("sparsek_sw beats sw in {wins}/3 ({})", detail.join(", ")),
    )
}

fn criterion_10() -> Verdict {
    let distance = 32;
    let mut acc = Vec::new();
    for kind in [AttnKind::SparseKSw, AttnKind::Sw] {
        let trainer = train(toy_config(TaskKind::Passkey, kind, 0, 1200));
        let mut rng = Rng::new(10);
        let tasks: Vec<_> = (0..100)
            .map(|_| make_passkey_at(&mut rng, trainer.model.context, distance).unwrap())
            .collect();
        acc.push(passkey_accuracy(&trainer.model, &trainer.state.params, &tasks).unwrap());
    }
    verdict(
        acc[0] >= 0.9 && acc[1] <= 0.2,
        format!(
            "distance {distance} (2x the sw window): sparsek_sw {:.2}, sw {:.2}",
            acc[0], acc[1]
        ),
    )
}

fn criterion_11() -> Verdict {
    let mut wins = 0;
    let mut detail = Vec::new();
    for seed in 0..3 {
        let losses: Vec<f64> = [true, false]
            .into_iter()
            .map(|use_slope| {
                let mut cfg = toy_config(TaskKind::Recall, AttnKind::SparseKSw, seed, 800);
                cfg.model.window = 0;
                cfg.scoring.slope_eps = 0.05;
                cfg.scoring.use_slope = use_slope;
                train(cfg).held_out_loss().unwrap()
            })
            .collect();
        if losses[1] > losses[0] {
            wins += 1;
        }
        detail.push(format!("seed {seed}: {:.4} vs {:.4}", losses[0], losses[1]));
    }
    verdict(
        wins >= 2,
        format!("removing the slope hurts in {wins}/3 ({})", detail.join(", ")),
    )
}

fn main() -> ExitCode {
    let criteria: [Criterion; 11] = [
        ("projection correctness", criterion_1),
        ("gradient fidelity", criterion_2),
        ("incremental equals batch", criterion_3),
        ("chunked equals unchunked", criterion_4),
        ("full-attention equivalence", criterion_5),
        ("linear-mix correctness", criterion_6),
        ("end-to-end gradient check", criterion_7),
        ("linear-time scaling", criterion_8),
        ("recall: sparsek_sw vs sw", criterion_9),
        ("passkey retrieval", criterion_10),
        ("slope ablation", criterion_11),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let id = (i + 1).to_string();
        if !filter.is_empty() && !filter.contains(&id) {
            continue;
        }
        let start = Instant::now();
        let v = run();
        let secs = start.elapsed().as_secs_f64();
        let status = if v.pass { "PASS" } else { "FAIL" };
        println!("{status} criterion {id:>2} {name}: {} [{secs:.1}s]", v.detail);
        if !v.pass {
            failed += 1;
        }
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} criteria failed");
        ExitCode::FAILURE
    }
}
