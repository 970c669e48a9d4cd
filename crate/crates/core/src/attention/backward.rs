use alloc::vec;
use alloc::vec::Vec;

use super::{linear, logit, plan_cols, AttnParams, AttnTape, Col, KeyMode, QueryPlan};
use crate::error::{Error, Result};
use crate::numerics::{dot, fmath, matmul_nt, matmul_tn, Tensor2};
use crate::selection::{score_backward, SelectionMode};

/// Parameter and input gradients of one attention layer.
#[derive(Debug, Clone, PartialEq)]
pub struct AttnGrads {
    pub dx: Tensor2,
    pub dwq: Tensor2,
    pub dwk: Tensor2,
    pub dwv: Tensor2,
    pub dwo: Tensor2,
    pub dw_score: Vec<f64>,
    pub d_gain: f64,
    pub d_bias: f64,
    /// Gradients of the per-head feature maps (linear mixture only).
    pub d_maps: Vec<Tensor2>,
}

/// Backward pass. Positions before `floor` are constants: their outputs get
/// no gradient and nothing flows into their projections or scores.
pub fn sparsek_attention_backward(
    tape: &AttnTape,
    params: &AttnParams,
    dy: &Tensor2,
    floor: usize,
) -> Result<AttnGrads> {
    let n = tape.x.rows();
    let d = tape.cfg.d_model();
    if dy.shape() != (n, d) {
        return Err(Error::Shape {
            op: "attention backward",
            expected: (n, d),
            found: dy.shape(),
        });
    }
    let mut dy = dy.clone();
    for i in 0..floor.min(n) {
        dy.row_mut(i).fill(0.0);
    }
    let dwo = matmul_tn(&tape.o, &dy)?;
    let d_o = matmul_nt(&dy, &params.wo)?;

    let mut dq = Tensor2::zeros(n, d);
    let mut dk = Tensor2::zeros(n, d);
    let mut dv = Tensor2::zeros(n, d);
    let mut du = vec![0.0; n];
    let mut d_maps = Vec::new();

    match &tape.linear {
        Some(lin) => {
            let params_lin = params
                .linear
                .as_ref()
                .ok_or(Error::Config("linear mixture needs feature maps"))?;
            d_maps = linear::backward(tape, lin, params_lin, &d_o, floor, &mut dq, &mut dk, &mut dv, &mut du)?;
        }
        None => core_backward(tape, &d_o, floor, &mut dq, &mut dk, &mut dv, &mut du),
    }
    for i in 0..floor.min(n) {
        dk.row_mut(i).fill(0.0);
        dv.row_mut(i).fill(0.0);
        du[i] = 0.0;
    }

    let sg = score_backward(&params.scoring, &tape.records, &du, floor);
    let mut dx = matmul_nt(&dq, &params.wq)?;
    dx.add_assign(&matmul_nt(&dk, &params.wk)?)?;
    dx.add_assign(&matmul_nt(&dv, &params.wv)?)?;
    let mut dw_score = vec![0.0; d];
    for i in floor..n {
        let g = sg.d_raw[i];
        if g != 0.0 {
            for (dx_c, w_c) in dx.row_mut(i).iter_mut().zip(&params.scoring.w_score) {
                *dx_c += g * w_c;
            }
            for (dw, x_c) in dw_score.iter_mut().zip(tape.x.row(i)) {
                *dw += g * x_c;
            }
        }
    }
    Ok(AttnGrads {
        dx,
        dwq: matmul_tn(&tape.x, &dq)?,
        dwk: matmul_tn(&tape.x, &dk)?,
        dwv: matmul_tn(&tape.x, &dv)?,
        dwo,
        dw_score,
        d_gain: sg.d_gain,
        d_bias: sg.d_bias,
        d_maps,
    })
}

/// Pushes gradients w.r.t. the SparseK weights of query `i`'s selection into
/// the scores. `dm` is aligned with `plan.sel_pos`.
pub(crate) fn mask_to_scores(plan: &QueryPlan, dm: &[f64], du: &mut [f64]) {
    if plan.support.is_empty() {
        return;
    }
    let mut sum = 0.0;
    for ((&pos, &m), &g) in plan.sel_pos.iter().zip(&plan.sel_m).zip(dm) {
        if m > 0.0 && m < 1.0 {
            du[pos] += g;
            sum += g;
        }
    }
    if sum != 0.0 {
        let mean = sum / plan.support.len() as f64;
        for &l in &plan.support {
            du[l] -= mean;
        }
    }
}

fn core_backward(
    tape: &AttnTape,
    d_o: &Tensor2,
    floor: usize,
    dq: &mut Tensor2,
    dk: &mut Tensor2,
    dv: &mut Tensor2,
    du: &mut [f64],
) {
    let cfg = &tape.cfg;
    let p = cfg.head_dim;
    let n = tape.x.rows();
    let grad_m = cfg.value_mode.has_gradient();
    let value_path = cfg.value_mode != SelectionMode::Hard;
    let key_path = cfg.key_mode == KeyMode::Soft && cfg.value_mode != SelectionMode::Hard;

    let mut cols: Vec<Col> = Vec::new();
    let mut a: Vec<f64> = Vec::new();
    let mut raw: Vec<f64> = Vec::new();
    let mut dvdot: Vec<f64> = Vec::new();
    let mut dm: Vec<f64> = Vec::new();
    for i in floor..n {
        let plan = &tape.plans[i];
        plan_cols(cfg, plan, i, &mut cols);
        let nsel = plan.sel_pos.len();
        dm.clear();
        dm.resize(nsel, 0.0);
        for h in 0..cfg.heads {
            let hs = h * p..(h + 1) * p;
            let qrow = &tape.q.row(i)[hs.clone()];
            let dorow = &d_o.row(i)[hs.clone()];
            let (max, den) = tape.stats[i * cfg.heads + h];
            raw.clear();
            a.clear();
            dvdot.clear();
            for c in &cols {
                let r = dot(qrow, &tape.k.row(c.pos)[hs.clone()]);
                raw.push(r);
                a.push(fmath::exp(logit(cfg.scale, c.kw, r) - max) / den);
                dvdot.push(dot(dorow, &tape.v.row(c.pos)[hs.clone()]));
            }
            // da_c = vw_c (do . v_c); ds_c = a_c (da_c - sum a da)
            let mean: f64 = cols
                .iter()
                .zip(&a)
                .zip(&dvdot)
                .map(|((c, &ac), &g)| ac * c.vw * g)
                .sum();
            for (ci, c) in cols.iter().enumerate() {
                let ds = a[ci] * (c.vw * dvdot[ci] - mean);
                let coef = ds * cfg.scale * c.kw;
                if coef != 0.0 {
                    let krow = &tape.k.row(c.pos)[hs.clone()];
                    for (g, kv) in dq.row_mut(i)[hs.clone()].iter_mut().zip(krow) {
                        *g += coef * kv;
                    }
                    for (g, qv) in dk.row_mut(c.pos)[hs.clone()].iter_mut().zip(qrow) {
                        *g += coef * qv;
                    }
                }
                let vcoef = a[ci] * c.vw;
                for (g, dov) in dv.row_mut(c.pos)[hs.clone()].iter_mut().zip(dorow) {
                    *g += vcoef * dov;
                }
                if grad_m && ci < nsel {
                    let mut g = 0.0;
                    if value_path {
                        g += a[ci] * dvdot[ci];
                    }
                    if key_path {
                        g += ds * cfg.scale * raw[ci];
                    }
                    dm[ci] += g;
                }
            }
        }
        if grad_m {
            mask_to_scores(plan, &dm, du);
        }
    }
}
