//! Query-independent key scoring and the hard/soft selection masks built from
//! the scores.
//!
//! Scores are a linear read-out of the token states plus a position slope
//! `i * eps`, optionally passed through a cumulative (prefix) standardization.
//! Each score depends only on rows up to its own position, so it is computed
//! once and frozen: a position that falls out of the top-k can never return.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::numerics::{dot, fmath, Rng, Tensor2};
use crate::sparsek::{sparsek, sparsek_jvp, topk_indices, KBudget};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NormMode {
    None,
    TimestepNorm,
}

/// Where the position slope enters relative to the normalization.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SlopeOrder {
    /// Normalize `X w`, then add the slope. Keeps the ramp intact.
    NormThenSlope,
    /// Add the slope, then normalize the sum.
    SlopeThenNorm,
}

/// How the selection mask enters the forward and backward passes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SelectionMode {
    /// Selected entries are scaled by their hard 0/1 value; no gradient.
    Hard,
    /// Selected entries are scaled by their SparseK weight.
    Soft,
    /// Hard forward, SparseK backward.
    StraightThrough,
}

impl SelectionMode {
    pub fn forward_is_soft(self) -> bool {
        self == SelectionMode::Soft
    }

    pub fn has_gradient(self) -> bool {
        self != SelectionMode::Hard
    }
}

/// Parameters of the scoring network.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoringParams {
    pub w_score: Vec<f64>,
    pub slope_eps: f64,
    /// Ablation switch for the position slope.
    pub use_slope: bool,
    pub norm_mode: NormMode,
    pub slope_order: SlopeOrder,
    /// Stabilizer added to the running variance.
    pub norm_eps: f64,
    /// Affine applied after normalization.
    pub gain: f64,
    pub bias: f64,
}

impl ScoringParams {
    pub fn new(w_score: Vec<f64>) -> Self {
        Self {
            w_score,
            slope_eps: 0.01,
            use_slope: true,
            norm_mode: NormMode::TimestepNorm,
            slope_order: SlopeOrder::NormThenSlope,
            norm_eps: 1e-5,
            gain: 1.0,
            bias: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.slope_eps > 0.0) || !self.slope_eps.is_finite() {
            return Err(Error::InvalidArgument("slope_eps must be positive"));
        }
        if self.w_score.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("w_score"));
        }
        if !(self.norm_eps > 0.0) {
            return Err(Error::InvalidArgument("norm_eps must be positive"));
        }
        Ok(())
    }

    /// Slope at 0-based position `pos`.
    #[inline]
    pub fn slope(&self, pos: usize) -> f64 {
        if self.use_slope {
            (pos + 1) as f64 * self.slope_eps
        } else {
            0.0
        }
    }
}

/// Welford accumulators for the cumulative standardization.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimestepNormState {
    pub count: u64,
    pub mean: f64,
    pub m2: f64,
    pub eps: f64,
}

impl TimestepNormState {
    pub fn new(eps: f64) -> Self {
        Self {
            count: 0,
            mean: 0.0,
            m2: 0.0,
            eps,
        }
    }

    /// Folds `a` into the statistics and returns `(normalized, mean, sigma)`
    /// using the statistics that include `a`.
    pub fn step(&mut self, a: f64) -> (f64, f64, f64) {
        self.count += 1;
        let delta = a - self.mean;
        self.mean += delta / self.count as f64;
        self.m2 += delta * (a - self.mean);
        let var = (self.m2 / self.count as f64).max(0.0);
        let sigma = fmath::sqrt(var + self.eps);
        ((a - self.mean) / sigma, self.mean, sigma)
    }

    pub fn variance(&self) -> f64 {
        if self.count == 0 {
            0.0
        } else {
            (self.m2 / self.count as f64).max(0.0)
        }
    }
}

/// Everything needed to backpropagate through one position's score.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoreRecord {
    /// Final score.
    pub u: f64,
    /// `x . w_score`
    pub raw: f64,
    /// Normalization input.
    pub pre: f64,
    /// Normalization output (equals `pre` without normalization).
    pub normed: f64,
    pub mean: f64,
    pub sigma: f64,
}

/// Incremental scorer: carries the normalization state across calls.
#[derive(Debug, Clone, PartialEq)]
pub struct Scorer {
    pub norm: TimestepNormState,
    pub pos: usize,
}

impl Scorer {
    pub fn new(params: &ScoringParams) -> Self {
        Self {
            norm: TimestepNormState::new(params.norm_eps),
            pos: 0,
        }
    }

    /// Scores the next position from its raw read-out `x . w_score`.
    pub fn next_raw(&mut self, params: &ScoringParams, raw: f64) -> Result<ScoreRecord> {
        if !raw.is_finite() {
            return Err(Error::NonFinite("score input"));
        }
        let slope = params.slope(self.pos);
        self.pos += 1;
        let rec = match params.norm_mode {
            NormMode::None => ScoreRecord {
                u: params.gain * raw + params.bias + slope,
                raw,
                pre: raw,
                normed: raw,
                mean: 0.0,
                sigma: 1.0,
            },
            NormMode::TimestepNorm => {
                let pre = match params.slope_order {
                    SlopeOrder::NormThenSlope => raw,
                    SlopeOrder::SlopeThenNorm => raw + slope,
                };
                let (normed, mean, sigma) = self.norm.step(pre);
                let tail = match params.slope_order {
                    SlopeOrder::NormThenSlope => slope,
                    SlopeOrder::SlopeThenNorm => 0.0,
                };
                ScoreRecord {
                    u: params.gain * normed + params.bias + tail,
                    raw,
                    pre,
                    normed,
                    mean,
                    sigma,
                }
            }
        };
        Ok(rec)
    }

    pub fn next_row(&mut self, params: &ScoringParams, x: &[f64]) -> Result<ScoreRecord> {
        if x.len() != params.w_score.len() {
            return Err(Error::Shape {
                op: "score_tokens",
                expected: (1, params.w_score.len()),
                found: (1, x.len()),
            });
        }
        self.next_raw(params, dot(x, &params.w_score))
    }
}

/// Scores every row of `x`, continuing from `scorer`'s state.
pub fn score_tokens(x: &Tensor2, params: &ScoringParams, scorer: &mut Scorer) -> Result<Vec<f64>> {
    Ok(score_records(x, params, scorer)?.iter().map(|r| r.u).collect())
}

pub fn score_records(x: &Tensor2, params: &ScoringParams, scorer: &mut Scorer) -> Result<Vec<ScoreRecord>> {
    if x.cols() != params.w_score.len() {
        return Err(Error::Shape {
            op: "score_tokens",
            expected: (x.rows(), params.w_score.len()),
            found: x.shape(),
        });
    }
    (0..x.rows()).map(|i| scorer.next_row(params, x.row(i))).collect()
}

/// Gradients of the scoring network.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreGrads {
    /// Gradient w.r.t. each raw read-out `x_i . w_score`.
    pub d_raw: Vec<f64>,
    pub d_gain: f64,
    pub d_bias: f64,
}

/// Backpropagates `d_u` to the raw read-outs. Positions before `floor` are
/// treated as constants (their entries of `d_raw` are zero).
pub fn score_backward(params: &ScoringParams, records: &[ScoreRecord], d_u: &[f64], floor: usize) -> ScoreGrads {
    let n = records.len();
    let mut d_raw = vec![0.0; n];
    let mut d_gain = 0.0;
    let mut d_bias = 0.0;
    for i in floor..n {
        d_gain += d_u[i] * records[i].normed;
        d_bias += d_u[i];
    }
    match params.norm_mode {
        NormMode::None => {
            for i in floor..n {
                d_raw[i] = params.gain * d_u[i];
            }
        }
        NormMode::TimestepNorm => {
            // d pre_j = dn_j / s_j - sum_{i>=j} A_i - pre_j sum_{i>=j} B_i
            //           + sum_{i>=j} B_i mu_i
            // with A_i = dn_i / (c_i s_i), B_i = dn_i (pre_i - mu_i) / (c_i s_i^3).
            let (mut sa, mut sb, mut sbm) = (0.0, 0.0, 0.0);
            for i in (floor..n).rev() {
                let r = &records[i];
                let dn = params.gain * d_u[i];
                let c = (i + 1) as f64;
                let a = dn / (c * r.sigma);
                let b = dn * (r.pre - r.mean) / (c * r.sigma * r.sigma * r.sigma);
                sa += a;
                sb += b;
                sbm += b * r.mean;
                d_raw[i] = dn / r.sigma - sa - r.pre * sb + sbm;
            }
        }
    }
    ScoreGrads { d_raw, d_gain, d_bias }
}

/// `w' = W_Q W_K^T 1`, normalized. Returns the vector and whether the random
/// fallback was used because `w'` vanished.
pub fn init_mimic_attention(wq: &Tensor2, wk: &Tensor2, rng: &mut Rng) -> Result<(Vec<f64>, bool)> {
    if wq.shape() != wk.shape() {
        return Err(Error::Shape {
            op: "init_mimic_attention",
            expected: wq.shape(),
            found: wk.shape(),
        });
    }
    let (d, p) = wq.shape();
    // W_K^T 1: column sums of W_K.
    let mut col = vec![0.0; p];
    for r in 0..d {
        for (c, v) in col.iter_mut().zip(wk.row(r)) {
            *c += v;
        }
    }
    let w: Vec<f64> = (0..d).map(|r| dot(wq.row(r), &col)).collect();
    let norm = fmath::sqrt(dot(&w, &w));
    if norm > 0.0 && norm.is_finite() {
        return Ok((w.iter().map(|v| v / norm).collect(), false));
    }
    let w = rng.normal_vec(d, 1.0);
    let norm = fmath::sqrt(dot(&w, &w));
    Ok((w.iter().map(|v| v / norm).collect(), true))
}

/// Hard and soft selection masks over a prefix of scores.
#[derive(Debug, Clone, PartialEq)]
pub struct SelectionMask {
    /// Top-`floor(k)` indicator.
    pub hard: Vec<f64>,
    /// SparseK weights.
    pub soft: Vec<f64>,
    /// Positions with `hard == 1`, ascending.
    pub indices: Vec<usize>,
    pub mode: SelectionMode,
}

impl SelectionMask {
    /// Weights applied in the forward pass: soft weights at the hard
    /// positions in soft mode, the hard indicator otherwise.
    pub fn forward_weights(&self) -> Vec<f64> {
        match self.mode {
            SelectionMode::Soft => self.hard.iter().zip(&self.soft).map(|(h, s)| h * s).collect(),
            SelectionMode::Hard | SelectionMode::StraightThrough => self.hard.clone(),
        }
    }
}

pub fn build_mask(u_prefix: &[f64], k: KBudget, mode: SelectionMode) -> Result<SelectionMask> {
    let sol = sparsek(u_prefix, k)?;
    let indices = topk_indices(u_prefix, k.hard());
    let mut hard = vec![0.0; u_prefix.len()];
    for &i in &indices {
        hard[i] = 1.0;
    }
    Ok(SelectionMask {
        hard,
        soft: sol.p,
        indices,
        mode,
    })
}

/// Gradient w.r.t. the scores given the gradient w.r.t. the forward
/// weights. Only hard-selected entries carry weight; their gradient passes
/// through the SparseK Jacobian in soft and straight-through modes.
pub fn mask_backward(u_prefix: &[f64], k: KBudget, mask: &SelectionMask, d_weights: &[f64]) -> Result<Vec<f64>> {
    if !mask.mode.has_gradient() {
        return Ok(vec![0.0; u_prefix.len()]);
    }
    let sol = sparsek(u_prefix, k)?;
    let g: Vec<f64> = d_weights.iter().zip(&mask.hard).map(|(d, h)| d * h).collect();
    sparsek_jvp(&sol, &g)
}
