//! SparseK attention.
//!
//! Query `i` attends to the union of
//! * the hard top-`floor(k)` positions among `0..=i-w` by frozen score, and
//! * the sliding window `i-w+1..=i`.
//!
//! Selected values (and, in soft key mode, selected keys) are scaled by their
//! SparseK weight. With `w = 0` the query's own position is appended when it
//! is not selected, so the softmax support is never empty.
//!
//! Queries are processed in blocks of `group_size`: the key/value rows used
//! by any query in the block are gathered once and all query-key logits of
//! the block are computed together. Each logit is still the same dot product,
//! so the block size never changes results.

mod backward;
mod dense;
pub(crate) mod linear;

use alloc::vec;
use alloc::vec::Vec;

pub use backward::{sparsek_attention_backward, AttnGrads};
pub use dense::dense_causal_attention;
pub use linear::{LinearAttnParams, LinearTape};

use crate::error::{Error, Result};
use crate::numerics::{dot, fmath, matmul, Rng, Tensor2};
use crate::selection::{score_records, ScoreRecord, Scorer, ScoringParams, SelectionMode};
use crate::sparsek::KBudget;
use crate::stream::SelectionTracker;

/// Whether selected keys are scaled by their mask weight.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KeyMode {
    /// Keys enter unscaled; gradients reach the scores through values only.
    Hard,
    /// Keys are scaled by their SparseK weight.
    Soft,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttnConfig {
    /// Selection budget; `0` disables selection (window only).
    pub k: f64,
    pub window: usize,
    pub heads: usize,
    pub head_dim: usize,
    pub scale: f64,
    pub key_mode: KeyMode,
    /// How selected values are weighted and differentiated.
    pub value_mode: SelectionMode,
    pub group_size: usize,
    pub linear_mix: bool,
}

impl AttnConfig {
    /// Defaults: hard keys, soft values, `1/sqrt(head_dim)` scale, blocks of 128.
    pub fn new(d_model: usize, heads: usize, k: f64, window: usize) -> Self {
        let head_dim = d_model / heads.max(1);
        Self {
            k,
            window,
            heads,
            head_dim,
            scale: 1.0 / fmath::sqrt(head_dim as f64),
            key_mode: KeyMode::Hard,
            value_mode: SelectionMode::Soft,
            group_size: 128,
            linear_mix: false,
        }
    }

    pub fn d_model(&self) -> usize {
        self.heads * self.head_dim
    }

    pub fn budget(&self) -> Option<KBudget> {
        if self.k > 0.0 {
            KBudget::new(self.k).ok()
        } else {
            None
        }
    }

    /// Maximum number of key-value pairs one query can attend to.
    pub fn kv_budget(&self) -> usize {
        self.budget().map_or(0, KBudget::hard) + self.window.max(1)
    }

    pub fn validate(&self, d_model: usize) -> Result<()> {
        if self.heads == 0 || self.head_dim == 0 {
            return Err(Error::Config("heads and head_dim must be positive"));
        }
        if self.heads * self.head_dim != d_model {
            return Err(Error::Config("heads * head_dim must equal the model dimension"));
        }
        if !(self.k >= 0.0) || !self.k.is_finite() {
            return Err(Error::Config("k must be a finite nonnegative number"));
        }
        if self.window == 0 && self.k == 0.0 && !self.linear_mix {
            return Err(Error::Config("window + k must be at least 1"));
        }
        if self.group_size == 0 {
            return Err(Error::Config("group_size must be positive"));
        }
        if !(self.scale > 0.0) {
            return Err(Error::Config("scale must be positive"));
        }
        Ok(())
    }
}

/// Projection weights of one attention layer plus its scoring network.
#[derive(Debug, Clone, PartialEq)]
pub struct AttnParams {
    pub wq: Tensor2,
    pub wk: Tensor2,
    pub wv: Tensor2,
    pub wo: Tensor2,
    pub scoring: ScoringParams,
    /// Feature maps for the linear-attention mixture.
    pub linear: Option<LinearAttnParams>,
}

impl AttnParams {
    /// Gaussian init with std `1/sqrt(d)`; zero scoring weights.
    pub fn random(d: usize, rng: &mut Rng) -> Self {
        let std = 1.0 / fmath::sqrt(d as f64);
        Self {
            wq: Tensor2::randn(d, d, std, rng),
            wk: Tensor2::randn(d, d, std, rng),
            wv: Tensor2::randn(d, d, std, rng),
            wo: Tensor2::randn(d, d, std, rng),
            scoring: ScoringParams::new(rng.normal_vec(d, std)),
            linear: None,
        }
    }

    pub fn d_model(&self) -> usize {
        self.wq.rows()
    }

    pub(crate) fn check(&self, x: &Tensor2, cfg: &AttnConfig) -> Result<()> {
        let d = self.d_model();
        cfg.validate(d)?;
        for w in [&self.wq, &self.wk, &self.wv, &self.wo] {
            if w.shape() != (d, d) {
                return Err(Error::Shape {
                    op: "attention weights",
                    expected: (d, d),
                    found: w.shape(),
                });
            }
        }
        if x.cols() != d {
            return Err(Error::Shape {
                op: "attention input",
                expected: (x.rows(), d),
                found: x.shape(),
            });
        }
        if x.rows() == 0 {
            return Err(Error::InvalidArgument("attention needs at least one position"));
        }
        if !x.is_finite() {
            return Err(Error::NonFinite("attention input"));
        }
        self.scoring.validate()
    }
}

/// Forward weights of a selected entry given its SparseK weight `m`.
#[inline]
pub(crate) fn entry_weights(cfg: &AttnConfig, m: f64) -> (f64, f64) {
    let soft = cfg.value_mode.forward_is_soft();
    let vw = if soft { m } else { 1.0 };
    let kw = if soft && cfg.key_mode == KeyMode::Soft { m } else { 1.0 };
    (kw, vw)
}

#[inline]
pub(crate) fn logit(scale: f64, kw: f64, raw: f64) -> f64 {
    scale * (kw * raw)
}

/// Attended set of one query.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct QueryPlan {
    /// Selected positions (ascending), all before `window_lo`.
    pub sel_pos: Vec<usize>,
    /// SparseK weights of the selected positions.
    pub sel_m: Vec<f64>,
    /// First window position; the window is `window_lo..=query`.
    pub window_lo: usize,
    /// `w = 0` and the query position was not selected.
    pub self_appended: bool,
    /// Positions with fractional SparseK weight (for the backward pass).
    pub support: Vec<usize>,
    pub tau: f64,
}

/// Walks queries in order, feeding scores that leave the window into the
/// selection tracker.
#[derive(Debug, Clone)]
pub(crate) struct Planner {
    pub tracker: Option<SelectionTracker>,
    pub window: usize,
    pub append_self: bool,
    pub pushed: usize,
}

impl Planner {
    pub fn new(cfg: &AttnConfig) -> Self {
        Self {
            tracker: cfg.budget().map(SelectionTracker::new),
            window: cfg.window,
            append_self: cfg.window == 0 && !cfg.linear_mix,
            pushed: 0,
        }
    }

    /// Number of positions that must have been pushed before query `i`.
    #[inline]
    pub fn needed(&self, i: usize) -> usize {
        (i + 1).saturating_sub(self.window)
    }

    /// Pushes the score of the next position into the tracker.
    pub fn push_score(&mut self, u: f64) -> Result<Option<usize>> {
        self.pushed += 1;
        match &mut self.tracker {
            Some(t) => t.push(u),
            None => Ok(Some(self.pushed - 1)),
        }
    }

    /// Plan for query `i`; all scores up to `needed(i)` must be pushed.
    pub fn plan(&self, i: usize, with_support: bool) -> QueryPlan {
        debug_assert_eq!(self.pushed, self.needed(i));
        let window_lo = (i + 1).saturating_sub(self.window);
        let mut plan = QueryPlan {
            window_lo,
            tau: f64::NEG_INFINITY,
            ..QueryPlan::default()
        };
        if let Some(tr) = &self.tracker {
            for e in tr.topk.selected() {
                plan.sel_pos.push(e.index);
                plan.sel_m.push(tr.weight(e.value));
            }
            if with_support && !tr.stream.infeasible() {
                plan.support = tr.stream.fractional_support();
            }
            plan.tau = tr.stream.tau();
        }
        plan.self_appended = self.append_self && plan.sel_pos.last() != Some(&i);
        plan
    }
}

/// One attended column: position and forward key/value weights.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Col {
    pub pos: usize,
    pub kw: f64,
    pub vw: f64,
}

/// Attended columns of a plan in ascending position order.
pub(crate) fn plan_cols(cfg: &AttnConfig, plan: &QueryPlan, i: usize, out: &mut Vec<Col>) {
    out.clear();
    for (&pos, &m) in plan.sel_pos.iter().zip(&plan.sel_m) {
        let (kw, vw) = entry_weights(cfg, m);
        out.push(Col { pos, kw, vw });
    }
    if plan.self_appended {
        out.push(Col {
            pos: i,
            kw: 1.0,
            vw: 1.0,
        });
    } else {
        for pos in plan.window_lo..=i {
            if plan.sel_pos.last().is_none_or(|&l| l < pos) {
                out.push(Col { pos, kw: 1.0, vw: 1.0 });
            }
        }
    }
}

/// Softmax over `logits`, then `out = sum_j p_j vw_j v_j`. Returns the
/// softmax statistics `(max, denominator)`.
pub(crate) fn softmax_combine<'a, V>(cols: &[Col], logits: &mut [f64], value: V, out: &mut [f64]) -> (f64, f64)
where
    V: Fn(usize) -> &'a [f64],
{
    let mut max = f64::NEG_INFINITY;
    for &s in logits.iter() {
        if s > max {
            max = s;
        }
    }
    let mut den = 0.0;
    for s in logits.iter_mut() {
        *s = fmath::exp(*s - max);
        den += *s;
    }
    out.fill(0.0);
    for (c, &e) in cols.iter().zip(logits.iter()) {
        let coef = (e / den) * c.vw;
        for (o, v) in out.iter_mut().zip(value(c.pos)) {
            *o += coef * v;
        }
    }
    (max, den)
}

/// Everything the backward pass needs, saved by the forward pass.
#[derive(Debug, Clone)]
pub struct AttnTape {
    pub cfg: AttnConfig,
    pub x: Tensor2,
    pub q: Tensor2,
    pub k: Tensor2,
    pub v: Tensor2,
    /// Concatenated head outputs before the output projection.
    pub o: Tensor2,
    pub records: Vec<ScoreRecord>,
    pub plans: Vec<QueryPlan>,
    /// Per `(query, head)`: softmax max and denominator.
    pub stats: Vec<(f64, f64)>,
    pub linear: Option<linear::LinearTape>,
}

/// Output of a forward pass.
#[derive(Debug, Clone)]
pub struct AttnOutput {
    pub y: Tensor2,
    pub tape: Option<AttnTape>,
    /// Largest number of attended positions over all queries.
    pub max_attended: usize,
}

pub(crate) struct Projected {
    pub q: Tensor2,
    pub k: Tensor2,
    pub v: Tensor2,
    pub records: Vec<ScoreRecord>,
}

pub(crate) fn project(x: &Tensor2, params: &AttnParams) -> Result<Projected> {
    let mut scorer = Scorer::new(&params.scoring);
    Ok(Projected {
        q: matmul(x, &params.wq)?,
        k: matmul(x, &params.wk)?,
        v: matmul(x, &params.wv)?,
        records: score_records(x, &params.scoring, &mut scorer)?,
    })
}

/// SparseK attention forward pass (dispatches to the linear mixture when
/// `cfg.linear_mix` is set).
pub fn sparsek_attention(x: &Tensor2, params: &AttnParams, cfg: &AttnConfig) -> Result<(Tensor2, AttnTape)> {
    let out = attention_forward(x, params, cfg, true)?;
    Ok((out.y, out.tape.expect("tape requested")))
}

/// Forward pass without saving a tape.
pub fn sparsek_attention_infer(x: &Tensor2, params: &AttnParams, cfg: &AttnConfig) -> Result<AttnOutput> {
    attention_forward(x, params, cfg, false)
}

pub fn attention_forward(x: &Tensor2, params: &AttnParams, cfg: &AttnConfig, keep_tape: bool) -> Result<AttnOutput> {
    params.check(x, cfg)?;
    if cfg.linear_mix {
        return linear::forward(x, params, cfg, keep_tape);
    }
    let proj = project(x, params)?;
    let n = x.rows();
    let d = cfg.d_model();
    let p = cfg.head_dim;
    let with_support = keep_tape && cfg.value_mode.has_gradient();

    let mut planner = Planner::new(cfg);
    let mut o = Tensor2::zeros(n, d);
    let mut plans: Vec<QueryPlan> = Vec::new();
    let mut stats = vec![(0.0, 0.0); if keep_tape { n * cfg.heads } else { 0 }];
    let mut max_attended = 0;

    let mut block_plans: Vec<QueryPlan> = Vec::with_capacity(cfg.group_size);
    let mut block_cols: Vec<Vec<Col>> = Vec::with_capacity(cfg.group_size);
    let mut union: Vec<usize> = Vec::new();
    let mut col_of = vec![usize::MAX; n];
    let mut kbuf: Vec<f64> = Vec::new();
    let mut dots: Vec<f64> = Vec::new();
    let mut logits: Vec<f64> = Vec::new();

    let mut start = 0;
    while start < n {
        let end = (start + cfg.group_size).min(n);
        block_plans.clear();
        for i in start..end {
            while planner.pushed < planner.needed(i) {
                let u = proj.records[planner.pushed].u;
                planner.push_score(u)?;
            }
            block_plans.push(planner.plan(i, with_support));
        }
        block_cols.resize_with(end - start, Vec::new);
        union.clear();
        for (b, plan) in block_plans.iter().enumerate() {
            let cols = &mut block_cols[b];
            plan_cols(cfg, plan, start + b, cols);
            max_attended = max_attended.max(cols.len());
            for c in cols.iter() {
                if col_of[c.pos] == usize::MAX {
                    col_of[c.pos] = union.len();
                    union.push(c.pos);
                }
            }
        }
        let width = union.len();
        let g = end - start;

        for h in 0..cfg.heads {
            let hs = h * p..(h + 1) * p;
            kbuf.clear();
            for &pos in &union {
                kbuf.extend_from_slice(&proj.k.row(pos)[hs.clone()]);
            }
            dots.clear();
            dots.resize(g * width, 0.0);
            for b in 0..g {
                let qrow = &proj.q.row(start + b)[hs.clone()];
                for c in 0..width {
                    dots[b * width + c] = dot(qrow, &kbuf[c * p..(c + 1) * p]);
                }
            }
            for b in 0..g {
                let i = start + b;
                let cols = &block_cols[b];
                logits.clear();
                logits.extend(
                    cols.iter()
                        .map(|c| logit(cfg.scale, c.kw, dots[b * width + col_of[c.pos]])),
                );
                let v = &proj.v;
                let (max, den) = softmax_combine(
                    cols,
                    &mut logits,
                    |pos| &v.row(pos)[hs.clone()],
                    &mut o.row_mut(i)[hs.clone()],
                );
                if keep_tape {
                    stats[i * cfg.heads + h] = (max, den);
                }
            }
        }
        for &pos in &union {
            col_of[pos] = usize::MAX;
        }
        if keep_tape {
            plans.append(&mut block_plans);
        }
        start = end;
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
        linear: None,
    });
    Ok(AttnOutput { y, tape, max_attended })
}

impl AttnTape {
    /// Recomputes the layer output from the saved projections and plans.
    pub fn replay(&self, wo: &Tensor2) -> Result<Tensor2> {
        let cfg = &self.cfg;
        let p = cfg.head_dim;
        let n = self.x.rows();
        let mut o = Tensor2::zeros(n, cfg.d_model());
        let mut cols = Vec::new();
        let mut logits = Vec::new();
        let mut terms = Vec::new();
        let mut kv = vec![0.0; cfg.heads * p * p];
        let mut z = vec![0.0; cfg.heads * p];
        for i in 0..n {
            plan_cols(cfg, &self.plans[i], i, &mut cols);
            for h in 0..cfg.heads {
                let hs = h * p..(h + 1) * p;
                let qrow = &self.q.row(i)[hs.clone()];
                match &self.linear {
                    Some(lt) => {
                        linear::accumulate(
                            &mut kv[h * p * p..(h + 1) * p * p],
                            &mut z[hs.clone()],
                            &lt.fk.row(i)[hs.clone()],
                            &self.v.row(i)[hs.clone()],
                        );
                        linear::head_output(
                            cfg,
                            &cols,
                            qrow,
                            &lt.fq.row(i)[hs.clone()],
                            |j| &self.k.row(j)[hs.clone()],
                            |j| &lt.fk.row(j)[hs.clone()],
                            |j| &self.v.row(j)[hs.clone()],
                            &kv[h * p * p..(h + 1) * p * p],
                            &z[hs.clone()],
                            &mut terms,
                            &mut o.row_mut(i)[hs.clone()],
                        );
                    }
                    None => {
                        logits.clear();
                        logits.extend(
                            cols.iter()
                                .map(|c| logit(cfg.scale, c.kw, dot(qrow, &self.k.row(c.pos)[hs.clone()]))),
                        );
                        softmax_combine(
                            &cols,
                            &mut logits,
                            |j| &self.v.row(j)[hs.clone()],
                            &mut o.row_mut(i)[hs.clone()],
                        );
                    }
                }
            }
        }
        matmul(&o, wo)
    }
}

/// Concatenates per-head outputs along the feature axis and applies `wo`.
pub fn multi_head(heads: &[Tensor2], wo: &Tensor2) -> Result<Tensor2> {
    let first = heads.first().ok_or(Error::InvalidArgument("at least one head"))?;
    let n = first.rows();
    let width: usize = heads.iter().map(Tensor2::cols).sum();
    let mut cat = Tensor2::zeros(n, width);
    let mut off = 0;
    for hd in heads {
        if hd.rows() != n {
            return Err(Error::Shape {
                op: "multi_head",
                expected: (n, hd.cols()),
                found: hd.shape(),
            });
        }
        for r in 0..n {
            cat.row_mut(r)[off..off + hd.cols()].copy_from_slice(hd.row(r));
        }
        off += hd.cols();
    }
    matmul(&cat, wo)
}

#[cfg(test)]
mod tests;
