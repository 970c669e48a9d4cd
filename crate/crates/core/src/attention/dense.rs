use alloc::vec;
use alloc::vec::Vec;

use super::{multi_head, AttnConfig, AttnParams};
use crate::error::Result;
use crate::numerics::{axpy, dot, matmul, softmax_row, Tensor2};

/// Full causal softmax attention with the same projections, one query row at
/// a time. Quadratic time, linear memory.
pub fn dense_causal_attention(x: &Tensor2, params: &AttnParams, cfg: &AttnConfig) -> Result<Tensor2> {
    params.check(x, cfg)?;
    let n = x.rows();
    let p = cfg.head_dim;
    let q = matmul(x, &params.wq)?;
    let k = matmul(x, &params.wk)?;
    let v = matmul(x, &params.wv)?;
    let mut heads = Vec::with_capacity(cfg.heads);
    let mut logits = Vec::with_capacity(n);
    for h in 0..cfg.heads {
        let (qh, kh, vh) = (
            q.slice_cols(h * p, (h + 1) * p),
            k.slice_cols(h * p, (h + 1) * p),
            v.slice_cols(h * p, (h + 1) * p),
        );
        let mut out = Tensor2::zeros(n, p);
        let mut acc = vec![0.0; p];
        for i in 0..n {
            let qi = qh.row(i);
            logits.clear();
            logits.extend((0..=i).map(|j| cfg.scale * dot(qi, kh.row(j))));
            let a = softmax_row(&logits)?;
            acc.fill(0.0);
            for (j, &aj) in a.iter().enumerate() {
                axpy(aj, vh.row(j), &mut acc);
            }
            out.row_mut(i).copy_from_slice(&acc);
        }
        heads.push(out);
    }
    multi_head(&heads, &params.wo)
}
