//! Mixture of SparseK softmax attention and linear attention.
//!
//! For query `i` every earlier position `j` gets the unnormalized weight
//!
//! ```text
//! g_j exp(s_j - M) + (1 - g_j) e^{-M} phi(q_i) . phi(k_j)
//! ```
//!
//! where `g_j` is 1 inside the window, the SparseK weight for selected
//! positions and 0 elsewhere. The linear part over all positions comes from
//! running prefix sums, so each query costs `O((k + w) p + p^2)`.

use alloc::vec;
use alloc::vec::Vec;

use super::backward::mask_to_scores;
use super::{plan_cols, project, AttnConfig, AttnOutput, AttnParams, AttnTape, Col, Planner, QueryPlan};
use crate::error::{Error, Result};
use crate::numerics::{dot, fmath, matmul, Tensor2};
use crate::selection::NormMode;

/// Per-head feature maps `phi(x) = elu(L x) + 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearAttnParams {
    pub maps: Vec<Tensor2>,
}

impl LinearAttnParams {
    pub fn identity(heads: usize, head_dim: usize) -> Self {
        Self {
            maps: (0..heads).map(|_| Tensor2::identity(head_dim)).collect(),
        }
    }
}

/// Feature-map activations saved for the backward pass.
#[derive(Debug, Clone)]
pub struct LinearTape {
    pub yq: Tensor2,
    pub yk: Tensor2,
    pub fq: Tensor2,
    pub fk: Tensor2,
}

#[inline]
pub(crate) fn elu1(y: f64) -> f64 {
    if y > 0.0 {
        y + 1.0
    } else {
        fmath::exp(y)
    }
}

#[inline]
fn elu1_grad(y: f64) -> f64 {
    if y > 0.0 {
        1.0
    } else {
        fmath::exp(y)
    }
}

pub(crate) fn feature_map(x: &Tensor2, lin: &LinearAttnParams, p: usize) -> (Tensor2, Tensor2) {
    let (n, d) = x.shape();
    let mut y = Tensor2::zeros(n, d);
    let mut f = Tensor2::zeros(n, d);
    for (h, l) in lin.maps.iter().enumerate() {
        for i in 0..n {
            let xs = &x.row(i)[h * p..(h + 1) * p];
            for a in 0..p {
                let v = dot(l.row(a), xs);
                y.set(i, h * p + a, v);
                f.set(i, h * p + a, elu1(v));
            }
        }
    }
    (y, f)
}

/// Logit, gate and linear kernel value of one attended column.
#[derive(Debug, Clone)]
pub(crate) struct Term {
    e: f64,
    gate: f64,
    ell: f64,
}

pub(crate) fn linear_params<'a>(params: &'a AttnParams, cfg: &AttnConfig) -> Result<&'a LinearAttnParams> {
    if params.scoring.norm_mode != NormMode::TimestepNorm {
        return Err(Error::Config("the linear mixture requires timestep-normalized scores"));
    }
    let lin = params
        .linear
        .as_ref()
        .ok_or(Error::Config("linear mixture needs feature maps"))?;
    let p = cfg.head_dim;
    if lin.maps.len() != cfg.heads || lin.maps.iter().any(|m| m.shape() != (p, p)) {
        return Err(Error::Shape {
            op: "linear feature maps",
            expected: (p, p),
            found: lin.maps.first().map_or((0, 0), Tensor2::shape),
        });
    }
    Ok(lin)
}

pub(super) fn forward(x: &Tensor2, params: &AttnParams, cfg: &AttnConfig, keep_tape: bool) -> Result<AttnOutput> {
    let lin = linear_params(params, cfg)?;
    let p = cfg.head_dim;
    let proj = project(x, params)?;
    let n = x.rows();
    let d = cfg.d_model();
    let (yq, fq) = feature_map(&proj.q, lin, p);
    let (yk, fk) = feature_map(&proj.k, lin, p);
    let with_support = keep_tape && cfg.value_mode.has_gradient();

    let mut planner = Planner::new(cfg);
    let mut o = Tensor2::zeros(n, d);
    let mut plans = Vec::new();
    let mut stats = vec![(0.0, 0.0); if keep_tape { n * cfg.heads } else { 0 }];
    let mut kv = vec![0.0; cfg.heads * p * p];
    let mut z = vec![0.0; cfg.heads * p];
    let mut cols: Vec<Col> = Vec::new();
    let mut terms: Vec<Term> = Vec::new();
    let mut max_attended = 0;

    for i in 0..n {
        while planner.pushed < planner.needed(i) {
            let u = proj.records[planner.pushed].u;
            planner.push_score(u)?;
        }
        let plan = planner.plan(i, with_support);
        plan_cols(cfg, &plan, i, &mut cols);
        max_attended = max_attended.max(cols.len());
        for h in 0..cfg.heads {
            let hs = h * p..(h + 1) * p;
            accumulate(
                &mut kv[h * p * p..(h + 1) * p * p],
                &mut z[hs.clone()],
                &fk.row(i)[hs.clone()],
                &proj.v.row(i)[hs.clone()],
            );
            let (max, den) = head_output(
                cfg,
                &cols,
                &proj.q.row(i)[hs.clone()],
                &fq.row(i)[hs.clone()],
                |j| &proj.k.row(j)[hs.clone()],
                |j| &fk.row(j)[hs.clone()],
                |j| &proj.v.row(j)[hs.clone()],
                &kv[h * p * p..(h + 1) * p * p],
                &z[hs.clone()],
                &mut terms,
                &mut o.row_mut(i)[hs.clone()],
            );
            if keep_tape {
                stats[i * cfg.heads + h] = (max, den);
            }
        }
        if keep_tape {
            plans.push(plan);
        }
    }

    let y = matmul(&o, &params.wo)?;
    if !y.is_finite() {
        return Err(Error::NonFinite("attention output"));
    }
    let tape = keep_tape.then(|| AttnTape {
        cfg: cfg.clone(),
        x: x.clone(),
        q: proj.q,
        k: proj.k,
        v: proj.v,
        o,
        records: proj.records,
        plans,
        stats,
        linear: Some(LinearTape { yq, yk, fq, fk }),
    });
    Ok(AttnOutput { y, tape, max_attended })
}

pub(crate) fn accumulate(kv: &mut [f64], z: &mut [f64], fk: &[f64], v: &[f64]) {
    let p = z.len();
    for a in 0..p {
        z[a] += fk[a];
        for b in 0..p {
            kv[a * p + b] += fk[a] * v[b];
        }
    }
}

/// Fills `terms` for the attended columns and returns `(M, denominator)`.
#[allow(clippy::too_many_arguments)]
fn head_terms<'a, K, F>(
    cfg: &AttnConfig,
    cols: &[Col],
    qrow: &[f64],
    fqr: &[f64],
    key: K,
    fkey: F,
    z: &[f64],
    terms: &mut Vec<Term>,
) -> (f64, f64)
where
    K: Fn(usize) -> &'a [f64],
    F: Fn(usize) -> &'a [f64],
{
    terms.clear();
    let mut max = f64::NEG_INFINITY;
    for c in cols {
        let s = cfg.scale * dot(qrow, key(c.pos));
        max = max.max(s);
        terms.push(Term {
            e: s,
            gate: c.vw,
            ell: dot(fqr, fkey(c.pos)),
        });
    }
    if cols.is_empty() {
        max = 0.0;
    }
    let lam = fmath::exp(-max);
    let mut den = lam * dot(fqr, z);
    for t in terms.iter_mut() {
        t.e = fmath::exp(t.e - max);
        den += t.gate * (t.e - lam * t.ell);
    }
    (max, den)
}

/// Output of one head for one query; `kv` and `z` are the prefix sums up to
/// and including the query. Returns `(M, denominator)`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn head_output<'a, K, F, V>(
    cfg: &AttnConfig,
    cols: &[Col],
    qrow: &[f64],
    fqr: &[f64],
    key: K,
    fkey: F,
    value: V,
    kv: &[f64],
    z: &[f64],
    terms: &mut Vec<Term>,
    out: &mut [f64],
) -> (f64, f64)
where
    K: Fn(usize) -> &'a [f64],
    F: Fn(usize) -> &'a [f64],
    V: Fn(usize) -> &'a [f64],
{
    let p = z.len();
    let (max, den) = head_terms(cfg, cols, qrow, fqr, key, fkey, z, terms);
    let lam = fmath::exp(-max);
    for (b, ob) in out.iter_mut().enumerate() {
        let mut acc = 0.0;
        for a in 0..p {
            acc += fqr[a] * kv[a * p + b];
        }
        *ob = lam * acc;
    }
    for (c, t) in cols.iter().zip(terms.iter()) {
        let coef = t.gate * (t.e - lam * t.ell);
        for (ob, vb) in out.iter_mut().zip(value(c.pos)) {
            *ob += coef * vb;
        }
    }
    for ob in out.iter_mut() {
        *ob /= den;
    }
    (max, den)
}

#[allow(clippy::too_many_arguments)]
pub(super) fn backward(
    tape: &AttnTape,
    lt: &LinearTape,
    lin: &LinearAttnParams,
    d_o: &Tensor2,
    floor: usize,
    dq: &mut Tensor2,
    dk: &mut Tensor2,
    dv: &mut Tensor2,
    du: &mut [f64],
) -> Result<Vec<Tensor2>> {
    let cfg = &tape.cfg;
    let p = cfg.head_dim;
    let n = tape.x.rows();
    let d = cfg.d_model();
    let grad_m = cfg.value_mode.has_gradient();
    let mut dfq = Tensor2::zeros(n, d);
    let mut dfk = Tensor2::zeros(n, d);
    let mut kv = vec![0.0; cfg.heads * p * p];
    let mut z = vec![0.0; cfg.heads * p];
    let mut cols: Vec<Col> = Vec::new();
    let mut terms: Vec<Term> = Vec::new();
    let mut dm: Vec<f64> = Vec::new();

    for i in 0..n {
        let plan: &QueryPlan = &tape.plans[i];
        if i >= floor {
            plan_cols(cfg, plan, i, &mut cols);
            dm.clear();
            dm.resize(plan.sel_pos.len(), 0.0);
        }
        for h in 0..cfg.heads {
            let hs = h * p..(h + 1) * p;
            let pm = &mut kv[h * p * p..(h + 1) * p * p];
            accumulate(
                pm,
                &mut z[hs.clone()],
                &lt.fk.row(i)[hs.clone()],
                &tape.v.row(i)[hs.clone()],
            );
            if i < floor {
                continue;
            }
            let qrow = &tape.q.row(i)[hs.clone()];
            let fqr = &lt.fq.row(i)[hs.clone()];
            let (max, den) = head_terms(
                cfg,
                &cols,
                qrow,
                fqr,
                |j| &tape.k.row(j)[hs.clone()],
                |j| &lt.fk.row(j)[hs.clone()],
                &z[hs.clone()],
                &mut terms,
            );
            let lam = fmath::exp(-max);
            let dorow = &d_o.row(i)[hs.clone()];
            let orow = &tape.o.row(i)[hs.clone()];
            let doo = dot(dorow, orow);
            // Baseline: every position treated as unattended.
            let pm = &kv[h * p * p..(h + 1) * p * p];
            {
                let dfqr = &mut dfq.row_mut(i)[hs.clone()];
                for a in 0..p {
                    let pd = dot(&pm[a * p..(a + 1) * p], dorow);
                    dfqr[a] += lam / den * (pd - doo * z[h * p + a]);
                }
            }
            for (ci, (c, t)) in cols.iter().zip(&terms).enumerate() {
                let vj = &tape.v.row(c.pos)[hs.clone()];
                let dw = (dot(dorow, vj) - doo) / den;
                let ds = dw * t.gate * t.e;
                if ds != 0.0 {
                    let coef = ds * cfg.scale;
                    for (g, kv_) in dq.row_mut(i)[hs.clone()].iter_mut().zip(&tape.k.row(c.pos)[hs.clone()]) {
                        *g += coef * kv_;
                    }
                    for (g, qv) in dk.row_mut(c.pos)[hs.clone()].iter_mut().zip(qrow) {
                        *g += coef * qv;
                    }
                }
                let corr = -dw * t.gate * lam;
                if corr != 0.0 {
                    for (g, f) in dfq.row_mut(i)[hs.clone()].iter_mut().zip(&lt.fk.row(c.pos)[hs.clone()]) {
                        *g += corr * f;
                    }
                    for (g, f) in dfk.row_mut(c.pos)[hs.clone()].iter_mut().zip(fqr) {
                        *g += corr * f;
                    }
                }
                let vcoef = t.gate * (t.e - lam * t.ell) / den;
                for (g, dov) in dv.row_mut(c.pos)[hs.clone()].iter_mut().zip(dorow) {
                    *g += vcoef * dov;
                }
                if grad_m && ci < dm.len() {
                    dm[ci] += dw * (t.e - lam * t.ell);
                }
            }
        }
        if i >= floor && grad_m {
            mask_to_scores(plan, &dm, du);
        }
    }

    // Suffix pass for the baseline key and value gradients.
    let mut r_mat = vec![0.0; cfg.heads * p * p];
    let mut r_vec = vec![0.0; cfg.heads * p];
    for j in (floor..n).rev() {
        for h in 0..cfg.heads {
            let hs = h * p..(h + 1) * p;
            let (max, den) = tape.stats[j * cfg.heads + h];
            let c = fmath::exp(-max) / den;
            let fqr = &lt.fq.row(j)[hs.clone()];
            let dorow = &d_o.row(j)[hs.clone()];
            let doo = dot(dorow, &tape.o.row(j)[hs.clone()]);
            let rm = &mut r_mat[h * p * p..(h + 1) * p * p];
            let rv = &mut r_vec[h * p..(h + 1) * p];
            for a in 0..p {
                rv[a] += c * doo * fqr[a];
                for b in 0..p {
                    rm[a * p + b] += c * fqr[a] * dorow[b];
                }
            }
            let vj = &tape.v.row(j)[hs.clone()];
            let fkj = &lt.fk.row(j)[hs.clone()];
            {
                let dfkr = &mut dfk.row_mut(j)[hs.clone()];
                for a in 0..p {
                    dfkr[a] += dot(&rm[a * p..(a + 1) * p], vj) - rv[a];
                }
            }
            let dvr = &mut dv.row_mut(j)[hs.clone()];
            for (b, g) in dvr.iter_mut().enumerate() {
                let mut acc = 0.0;
                for a in 0..p {
                    acc += rm[a * p + b] * fkj[a];
                }
                *g += acc;
            }
        }
    }

    let mut d_maps: Vec<Tensor2> = (0..cfg.heads).map(|_| Tensor2::zeros(p, p)).collect();
    map_backward(&tape.q, &lt.yq, &dfq, lin, &mut d_maps, dq, p, floor);
    map_backward(&tape.k, &lt.yk, &dfk, lin, &mut d_maps, dk, p, floor);
    Ok(d_maps)
}

#[allow(clippy::too_many_arguments)]
fn map_backward(
    x: &Tensor2,
    y: &Tensor2,
    df: &Tensor2,
    lin: &LinearAttnParams,
    d_maps: &mut [Tensor2],
    dx: &mut Tensor2,
    p: usize,
    floor: usize,
) {
    let n = x.rows();
    let mut dy = vec![0.0; p];
    for i in floor..n {
        for (h, l) in lin.maps.iter().enumerate() {
            let off = h * p;
            for a in 0..p {
                dy[a] = df.get(i, off + a) * elu1_grad(y.get(i, off + a));
            }
            let xs = &x.row(i)[off..off + p];
            let dl = &mut d_maps[h];
            for a in 0..p {
                if dy[a] != 0.0 {
                    for (b, &xb) in xs.iter().enumerate() {
                        let cur = dl.get(a, b);
                        dl.set(a, b, cur + dy[a] * xb);
                    }
                }
            }
            let dxr = &mut dx.row_mut(i)[off..off + p];
            for a in 0..p {
                for (b, g) in dxr.iter_mut().enumerate() {
                    *g += l.get(a, b) * dy[a];
                }
            }
        }
    }
}
