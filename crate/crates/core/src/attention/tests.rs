use super::*;
use crate::selection::{score_tokens, NormMode, Scorer};
use crate::sparsek::{sparsek, topk_indices};
use std::vec::Vec;

fn setup(n: usize, d: usize, seed: u64) -> (Tensor2, AttnParams) {
    let mut rng = Rng::new(seed);
    let x = Tensor2::randn(n, d, 1.0, &mut rng);
    let mut params = AttnParams::random(d, &mut rng);
    params.scoring.gain = 1.5;
    params.scoring.bias = 0.3;
    (x, params)
}

fn cfg(d: usize, heads: usize, k: f64, w: usize) -> AttnConfig {
    AttnConfig::new(d, heads, k, w)
}

/// Brute force: batch SparseK over each query's prefix, then a plain softmax.
fn oracle(x: &Tensor2, params: &AttnParams, cfg: &AttnConfig) -> Tensor2 {
    let n = x.rows();
    let p = cfg.head_dim;
    let q = matmul(x, &params.wq).unwrap();
    let k = matmul(x, &params.wk).unwrap();
    let v = matmul(x, &params.wv).unwrap();
    let u = score_tokens(x, &params.scoring, &mut Scorer::new(&params.scoring)).unwrap();
    let mut o = Tensor2::zeros(n, cfg.d_model());
    for i in 0..n {
        let lim = (i + 1).saturating_sub(cfg.window);
        let mut cols: Vec<(usize, f64, f64)> = Vec::new();
        if cfg.k > 0.0 && lim > 0 {
            let kb = KBudget::new(cfg.k).unwrap();
            let sol = sparsek(&u[..lim], kb).unwrap();
            for j in topk_indices(&u[..lim], kb.hard()) {
                let m = sol.p[j];
                let (kw, vw) = entry_weights(cfg, m);
                cols.push((j, kw, vw));
            }
        }
        let mut attended: Vec<usize> = cols.iter().map(|c| c.0).collect();
        if cfg.window == 0 {
            if !attended.contains(&i) && !cfg.linear_mix {
                cols.push((i, 1.0, 1.0));
            }
        } else {
            for j in lim..=i {
                cols.push((j, 1.0, 1.0));
            }
        }
        attended.clear();
        for h in 0..cfg.heads {
            let hs = h * p..(h + 1) * p;
            let s: Vec<f64> = cols
                .iter()
                .map(|&(j, kw, _)| cfg.scale * kw * dot(&q.row(i)[hs.clone()], &k.row(j)[hs.clone()]))
                .collect();
            let a = crate::numerics::softmax_row(&s).unwrap();
            for (c, &(j, _, vw)) in cols.iter().enumerate() {
                for t in 0..p {
                    let cur = o.get(i, h * p + t);
                    o.set(i, h * p + t, cur + a[c] * vw * v.get(j, h * p + t));
                }
            }
        }
    }
    matmul(&o, &params.wo).unwrap()
}

#[test]
fn full_window_matches_dense() {
    for &n in &[1, 16, 64] {
        let (x, params) = setup(n, 8, n as u64);
        let c = cfg(8, 2, 0.0, n);
        let (y, _) = sparsek_attention(&x, &params, &c).unwrap();
        let dense = dense_causal_attention(&x, &params, &c).unwrap();
        assert!(y.max_abs_diff(&dense) < 1e-9, "n={n}");
    }
}

#[test]
fn budget_covering_prefix_matches_dense() {
    let n = 40;
    let (x, params) = setup(n, 8, 3);
    for mode in [SelectionMode::Hard, SelectionMode::Soft, SelectionMode::StraightThrough] {
        let mut c = cfg(8, 2, n as f64, 1);
        c.value_mode = mode;
        let (y, _) = sparsek_attention(&x, &params, &c).unwrap();
        let dense = dense_causal_attention(&x, &params, &c).unwrap();
        assert!(y.max_abs_diff(&dense) < 1e-9, "{mode:?}");
    }
}

#[test]
fn matches_bruteforce_oracle() {
    let (x, params) = setup(48, 8, 11);
    for (k, w) in [(4.0, 4), (2.5, 3), (5.0, 0), (3.0, 1), (0.0, 6)] {
        for key_mode in [KeyMode::Hard, KeyMode::Soft] {
            for mode in [SelectionMode::Hard, SelectionMode::Soft, SelectionMode::StraightThrough] {
                let mut c = cfg(8, 2, k, w);
                c.key_mode = key_mode;
                c.value_mode = mode;
                let (y, _) = sparsek_attention(&x, &params, &c).unwrap();
                let want = oracle(&x, &params, &c);
                assert!(y.max_abs_diff(&want) < 1e-10, "k={k} w={w} {key_mode:?} {mode:?}");
            }
        }
    }
}

#[test]
fn block_size_does_not_change_results() {
    let (x, params) = setup(150, 8, 5);
    let mut c = cfg(8, 2, 6.0, 8);
    c.group_size = 1;
    let (a, _) = sparsek_attention(&x, &params, &c).unwrap();
    for g in [7, 64, 1000] {
        c.group_size = g;
        let (b, _) = sparsek_attention(&x, &params, &c).unwrap();
        assert_eq!(a.data(), b.data(), "group {g}");
    }
}

#[test]
fn attended_count_is_bounded() {
    let (x, params) = setup(100, 4, 9);
    let c = cfg(4, 1, 5.0, 7);
    let out = sparsek_attention_infer(&x, &params, &c).unwrap();
    assert!(out.tape.is_none());
    assert_eq!(out.max_attended, 12);
    assert!(out.max_attended <= c.kv_budget());
}

#[test]
fn config_errors() {
    let (x, params) = setup(4, 8, 1);
    assert!(matches!(
        sparsek_attention(&x, &params, &cfg(8, 3, 2.0, 2)),
        Err(Error::Config(_))
    ));
    assert!(sparsek_attention(&x, &params, &cfg(8, 2, 0.0, 0)).is_err());
    assert!(sparsek_attention(&x, &params, &cfg(8, 2, -1.0, 2)).is_err());
    let empty = Tensor2::zeros(0, 8);
    assert!(sparsek_attention(&empty, &params, &cfg(8, 2, 2.0, 2)).is_err());
    let mut c = cfg(8, 2, 2.0, 2);
    c.linear_mix = true;
    assert!(sparsek_attention(&x, &params, &c).is_err());
    let mut p2 = params.clone();
    p2.linear = Some(LinearAttnParams::identity(2, 4));
    p2.scoring.norm_mode = NormMode::None;
    assert!(matches!(sparsek_attention(&x, &p2, &c), Err(Error::Config(_))));
}

#[test]
fn multi_head_concatenates() {
    let a = Tensor2::from_rows(&[vec![1.0], vec![2.0]]).unwrap();
    let b = Tensor2::from_rows(&[vec![3.0], vec![4.0]]).unwrap();
    let wo = Tensor2::from_rows(&[vec![1.0, 0.0], vec![1.0, 1.0]]).unwrap();
    let y = multi_head(&[a.clone(), b], &wo).unwrap();
    assert_eq!(y.data(), &[4.0, 3.0, 6.0, 4.0]);
    assert!(multi_head(&[], &wo).is_err());
    let short = Tensor2::from_rows(&[vec![1.0]]).unwrap();
    assert!(multi_head(&[a, short], &wo).is_err());
}

/// O(n^2) linear-mixture reference: explicit weights for every pair.
fn linear_oracle(x: &Tensor2, params: &AttnParams, cfg: &AttnConfig) -> Tensor2 {
    let n = x.rows();
    let p = cfg.head_dim;
    let lin = params.linear.as_ref().unwrap();
    let q = matmul(x, &params.wq).unwrap();
    let k = matmul(x, &params.wk).unwrap();
    let v = matmul(x, &params.wv).unwrap();
    let u = score_tokens(x, &params.scoring, &mut Scorer::new(&params.scoring)).unwrap();
    let phi = |l: &Tensor2, xs: &[f64]| -> Vec<f64> {
        (0..p)
            .map(|a| {
                let y = dot(l.row(a), xs);
                if y > 0.0 {
                    y + 1.0
                } else {
                    y.exp()
                }
            })
            .collect()
    };
    let mut o = Tensor2::zeros(n, cfg.d_model());
    for i in 0..n {
        let lim = (i + 1).saturating_sub(cfg.window);
        let mut gate = vec![0.0; i + 1];
        for g in gate.iter_mut().skip(lim) {
            *g = 1.0;
        }
        let mut attended: Vec<usize> = (lim..=i).collect();
        if cfg.k > 0.0 && lim > 0 {
            let kb = KBudget::new(cfg.k).unwrap();
            let sol = sparsek(&u[..lim], kb).unwrap();
            for j in topk_indices(&u[..lim], kb.hard()) {
                gate[j] = entry_weights(cfg, sol.p[j]).1;
                attended.push(j);
            }
        }
        for h in 0..cfg.heads {
            let hs = h * p..(h + 1) * p;
            let l = &lin.maps[h];
            let fq = phi(l, &q.row(i)[hs.clone()]);
            let mut wts = Vec::new();
            for j in 0..=i {
                let s = cfg.scale * dot(&q.row(i)[hs.clone()], &k.row(j)[hs.clone()]);
                let ell = dot(&fq, &phi(l, &k.row(j)[hs.clone()]));
                let e = if attended.contains(&j) { s.exp() } else { 0.0 };
                wts.push(gate[j] * e + (1.0 - gate[j]) * ell);
            }
            let den: f64 = wts.iter().sum();
            for (j, w) in wts.iter().enumerate() {
                for t in 0..p {
                    let cur = o.get(i, h * p + t);
                    o.set(i, h * p + t, cur + w / den * v.get(j, h * p + t));
                }
            }
        }
    }
    matmul(&o, &params.wo).unwrap()
}

fn with_linear(mut params: AttnParams, heads: usize, p: usize, seed: u64) -> AttnParams {
    let mut rng = Rng::new(seed);
    let mut lin = LinearAttnParams::identity(heads, p);
    for m in &mut lin.maps {
        for v in m.data_mut() {
            *v += 0.3 * rng.normal();
        }
    }
    params.linear = Some(lin);
    params
}

#[test]
fn linear_mix_matches_quadratic_reference() {
    let (x, params) = setup(40, 8, 21);
    let params = with_linear(params, 2, 4, 2);
    for (k, w) in [(3.0, 4), (2.5, 0), (0.0, 5), (4.0, 1)] {
        for mode in [SelectionMode::Hard, SelectionMode::Soft] {
            let mut c = cfg(8, 2, k, w);
            c.linear_mix = true;
            c.value_mode = mode;
            let (y, _) = sparsek_attention(&x, &params, &c).unwrap();
            let want = linear_oracle(&x, &params, &c);
            assert!(y.max_abs_diff(&want) < 1e-9, "k={k} w={w} {mode:?}");
        }
    }
}

#[test]
fn linear_mix_limits() {
    let n = 24;
    let (x, params) = setup(n, 8, 4);
    let params = with_linear(params, 2, 4, 3);
    // Window covering everything: pure softmax attention.
    let mut c = cfg(8, 2, 0.0, n);
    c.linear_mix = true;
    let (y, _) = sparsek_attention(&x, &params, &c).unwrap();
    let dense = dense_causal_attention(&x, &params, &c).unwrap();
    assert!(y.max_abs_diff(&dense) < 1e-9);
    // Nothing attended: pure linear attention.
    let mut c = cfg(8, 2, 0.0, 0);
    c.linear_mix = true;
    let (y, _) = sparsek_attention(&x, &params, &c).unwrap();
    assert!(y.max_abs_diff(&linear_oracle(&x, &params, &c)) < 1e-9);
}

struct Flat {
    sizes: Vec<usize>,
}

fn flatten(x: &Tensor2, p: &AttnParams) -> (Vec<f64>, Flat) {
    let mut v = Vec::new();
    let mut sizes = Vec::new();
    for t in [x, &p.wq, &p.wk, &p.wv, &p.wo] {
        v.extend_from_slice(t.data());
        sizes.push(t.data().len());
    }
    v.extend_from_slice(&p.scoring.w_score);
    sizes.push(p.scoring.w_score.len());
    v.push(p.scoring.gain);
    v.push(p.scoring.bias);
    sizes.push(2);
    if let Some(lin) = &p.linear {
        for m in &lin.maps {
            v.extend_from_slice(m.data());
            sizes.push(m.data().len());
        }
    }
    (v, Flat { sizes })
}

fn unflatten(v: &[f64], x: &Tensor2, p: &AttnParams) -> (Tensor2, AttnParams) {
    let mut x = x.clone();
    let mut p = p.clone();
    let mut off = 0;
    for t in [&mut x, &mut p.wq, &mut p.wk, &mut p.wv, &mut p.wo] {
        let len = t.data().len();
        t.data_mut().copy_from_slice(&v[off..off + len]);
        off += len;
    }
    let len = p.scoring.w_score.len();
    p.scoring.w_score.copy_from_slice(&v[off..off + len]);
    off += len;
    p.scoring.gain = v[off];
    p.scoring.bias = v[off + 1];
    off += 2;
    if let Some(lin) = &mut p.linear {
        for m in &mut lin.maps {
            let len = m.data().len();
            m.data_mut().copy_from_slice(&v[off..off + len]);
            off += len;
        }
    }
    (x, p)
}

fn grads_flat(g: &AttnGrads) -> Vec<f64> {
    let mut v = Vec::new();
    for t in [&g.dx, &g.dwq, &g.dwk, &g.dwv, &g.dwo] {
        v.extend_from_slice(t.data());
    }
    v.extend_from_slice(&g.dw_score);
    v.push(g.d_gain);
    v.push(g.d_bias);
    for m in &g.d_maps {
        v.extend_from_slice(m.data());
    }
    v
}

fn check_gradients(x: &Tensor2, params: &AttnParams, c: &AttnConfig, floor: usize, seed: u64) -> f64 {
    let mut rng = Rng::new(seed);
    let (y, tape) = sparsek_attention(x, params, c).unwrap();
    let dy = Tensor2::randn(y.rows(), y.cols(), 1.0, &mut rng);
    let grads = sparsek_attention_backward(&tape, params, &dy, floor).unwrap();
    let analytic = grads_flat(&grads);
    let (theta, flat) = flatten(x, params);
    assert_eq!(theta.len(), analytic.len(), "{:?}", flat.sizes);
    let loss = |th: &[f64]| -> f64 {
        let (xx, pp) = unflatten(th, x, params);
        let (yy, _) = sparsek_attention(&xx, &pp, c).unwrap();
        yy.data()
            .iter()
            .zip(dy.data())
            .enumerate()
            .filter(|(idx, _)| idx / y.cols() >= floor)
            .map(|(_, (a, b))| a * b)
            .sum()
    };
    // Straight-through scores carry a surrogate gradient (also reaching x)
    // that the hard forward pass cannot reproduce.
    let score_start: usize = flat.sizes[..5].iter().sum();
    let score_end = score_start + flat.sizes[5] + 2;
    let surrogate = c.value_mode == SelectionMode::StraightThrough;
    if surrogate {
        assert!(analytic[score_start..score_end].iter().any(|&g| g != 0.0));
    }
    let h = 1e-6;
    let mut worst: f64 = 0.0;
    let mut th = theta.clone();
    for idx in 0..theta.len() {
        if surrogate && (idx < flat.sizes[0] || (score_start..score_end).contains(&idx)) {
            continue;
        }
        th[idx] = theta[idx] + h;
        let lp = loss(&th);
        th[idx] = theta[idx] - h;
        let lm = loss(&th);
        th[idx] = theta[idx];
        let fd = (lp - lm) / (2.0 * h);
        let err = (fd - analytic[idx]).abs() / (1.0 + fd.abs());
        worst = worst.max(err);
    }
    worst
}

#[test]
fn gradients_match_finite_differences() {
    let (x, params) = setup(20, 8, 31);
    let cases: Vec<(f64, usize, KeyMode, SelectionMode)> = vec![
        (4.0, 4, KeyMode::Hard, SelectionMode::Soft),
        (3.5, 2, KeyMode::Soft, SelectionMode::Soft),
        (3.0, 3, KeyMode::Soft, SelectionMode::StraightThrough),
        (4.0, 0, KeyMode::Hard, SelectionMode::Soft),
        (4.0, 4, KeyMode::Hard, SelectionMode::Hard),
    ];
    for (k, w, km, vm) in cases {
        let mut c = cfg(8, 2, k, w);
        c.key_mode = km;
        c.value_mode = vm;
        let err = check_gradients(&x, &params, &c, 0, 7);
        assert!(err < 1e-5, "k={k} w={w} {km:?} {vm:?}: {err}");
    }
}

#[test]
fn linear_mix_gradients_match_finite_differences() {
    let (x, params) = setup(16, 8, 41);
    let params = with_linear(params, 2, 4, 5);
    for (k, w) in [(3.0, 3), (2.5, 0)] {
        let mut c = cfg(8, 2, k, w);
        c.linear_mix = true;
        let err = check_gradients(&x, &params, &c, 0, 8);
        assert!(err < 1e-5, "k={k} w={w}: {err}");
    }
}

#[test]
fn zero_upstream_gives_zero_gradients() {
    let (x, params) = setup(12, 8, 2);
    let (_, tape) = sparsek_attention(&x, &params, &cfg(8, 2, 3.0, 2)).unwrap();
    let g = sparsek_attention_backward(&tape, &params, &Tensor2::zeros(12, 8), 0).unwrap();
    assert!(grads_flat(&g).iter().all(|&v| v == 0.0));
    assert!(sparsek_attention_backward(&tape, &params, &Tensor2::zeros(11, 8), 0).is_err());
}

#[test]
fn saturated_selection_has_no_score_gradient() {
    // k larger than every prefix: all weights are 1 and constant.
    let (x, params) = setup(12, 8, 6);
    let c = cfg(8, 2, 50.0, 2);
    let (y, tape) = sparsek_attention(&x, &params, &c).unwrap();
    let dy = Tensor2::randn(y.rows(), y.cols(), 1.0, &mut Rng::new(1));
    let g = sparsek_attention_backward(&tape, &params, &dy, 0).unwrap();
    assert!(g.dw_score.iter().all(|&v| v == 0.0));
    assert_eq!(g.d_gain, 0.0);
}

#[test]
fn floor_stops_gradients_into_earlier_positions() {
    let (x, params) = setup(20, 8, 13);
    let c = cfg(8, 2, 3.0, 3);
    let (y, tape) = sparsek_attention(&x, &params, &c).unwrap();
    let dy = Tensor2::randn(y.rows(), y.cols(), 1.0, &mut Rng::new(3));
    let g = sparsek_attention_backward(&tape, &params, &dy, 8).unwrap();
    for i in 0..8 {
        assert!(g.dx.row(i).iter().all(|&v| v == 0.0));
    }
    assert!(g.dx.row(8).iter().any(|&v| v != 0.0));
}

#[test]
fn single_position_returns_projected_value() {
    let (x, params) = setup(1, 8, 17);
    for c in [cfg(8, 2, 3.0, 0), cfg(8, 2, 0.0, 4), cfg(8, 1, 2.5, 2)] {
        let (y, _) = sparsek_attention(&x, &params, &c).unwrap();
        let want = matmul(&matmul(&x, &params.wv).unwrap(), &params.wo).unwrap();
        assert!(y.max_abs_diff(&want) < 1e-12);
    }
}

#[test]
fn tape_replay_is_bit_exact() {
    let (x, params) = setup(70, 8, 19);
    let params = with_linear(params, 2, 4, 1);
    for linear_mix in [false, true] {
        let mut c = cfg(8, 2, 4.5, 5);
        c.linear_mix = linear_mix;
        c.key_mode = KeyMode::Soft;
        c.group_size = 16;
        let (y, tape) = sparsek_attention(&x, &params, &c).unwrap();
        assert_eq!(tape.replay(&params.wo).unwrap().data(), y.data());
    }
}

#[test]
fn blocked_execution_at_scale() {
    let (x, params) = setup(256, 8, 23);
    let mut c = cfg(8, 2, 16.0, 16);
    c.group_size = 1;
    let (a, _) = sparsek_attention(&x, &params, &c).unwrap();
    c.group_size = 64;
    let (b, _) = sparsek_attention(&x, &params, &c).unwrap();
    assert!(a.max_abs_diff(&b) <= 1e-12);
}
