//! Recurrent key-value cache for SparseK attention.
//!
//! The cache processes one position at a time and keeps only the key-value
//! rows that can still be attended: the hard top-`floor(k)` selection plus
//! the sliding window. Evicted entries never return, so memory stays at
//! `floor(k) + w` entries between steps. Outputs are bitwise identical to
//! the batch forward pass.

use alloc::vec;
use alloc::vec::Vec;

use crate::attention::linear::{accumulate, feature_map, head_output, linear_params, Term};
use crate::attention::{logit, plan_cols, softmax_combine, AttnConfig, AttnParams, Col, Planner};
use crate::error::{Error, Result};
use crate::numerics::{dot, matmul, Tensor2};
use crate::selection::{Scorer, TimestepNormState};
use crate::stream::{Scored, SelectionTracker, StreamParts, StreamState, TopKTracker};

/// Cached key and value rows of one position.
#[derive(Debug, Clone, PartialEq)]
pub struct KvEntry {
    pub pos: usize,
    pub score: f64,
    pub key: Vec<f64>,
    pub value: Vec<f64>,
    /// Linear-attention features of the key (empty without the mixture).
    pub feat: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct SparseKvCache {
    cfg: AttnConfig,
    scorer: Scorer,
    planner: Planner,
    entries: Vec<KvEntry>,
    kv_sum: Vec<f64>,
    z_sum: Vec<f64>,
    t: usize,
    peak: usize,
    evicted_total: usize,
    last_evicted: Vec<usize>,
    cols: Vec<Col>,
    terms: Vec<Term>,
    logits: Vec<f64>,
}

impl SparseKvCache {
    pub fn new(cfg: &AttnConfig, params: &AttnParams) -> Result<Self> {
        cfg.validate(params.d_model())?;
        let lin = if cfg.linear_mix {
            linear_params(params, cfg)?;
            cfg.heads * cfg.head_dim * cfg.head_dim
        } else {
            0
        };
        Ok(Self {
            cfg: cfg.clone(),
            scorer: Scorer::new(&params.scoring),
            planner: Planner::new(cfg),
            entries: Vec::new(),
            kv_sum: vec![0.0; lin],
            z_sum: vec![0.0; if cfg.linear_mix { cfg.d_model() } else { 0 }],
            t: 0,
            peak: 0,
            evicted_total: 0,
            last_evicted: Vec::new(),
            cols: Vec::new(),
            terms: Vec::new(),
            logits: Vec::new(),
        })
    }

    pub fn config(&self) -> &AttnConfig {
        &self.cfg
    }

    /// Number of positions processed so far.
    pub fn position(&self) -> usize {
        self.t
    }

    /// Entries currently held.
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Largest number of entries held at any point, including the one added
    /// during a step.
    pub fn peak(&self) -> usize {
        self.peak
    }

    pub fn entries(&self) -> &[KvEntry] {
        &self.entries
    }

    fn find(&self, pos: usize) -> usize {
        self.entries
            .binary_search_by_key(&pos, |e| e.pos)
            .expect("attended entry is cached")
    }

    /// Processes one position and returns its attention output row.
    pub fn step(&mut self, params: &AttnParams, x: &[f64]) -> Result<Vec<f64>> {
        let d = self.cfg.d_model();
        if x.len() != d || params.d_model() != d {
            return Err(Error::Shape {
                op: "cache step",
                expected: (1, d),
                found: (1, x.len()),
            });
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("attention input"));
        }
        let xr = Tensor2::from_vec(1, d, x.to_vec())?;
        let q = matmul(&xr, &params.wq)?;
        let k = matmul(&xr, &params.wk)?;
        let v = matmul(&xr, &params.wv)?;
        let rec = self.scorer.next_row(&params.scoring, x)?;
        let p = self.cfg.head_dim;
        let t = self.t;

        let (fq, feat) = if self.cfg.linear_mix {
            let lin = linear_params(params, &self.cfg)?;
            let (_, fq) = feature_map(&q, lin, p);
            let (_, fk) = feature_map(&k, lin, p);
            (fq.into_vec(), fk.into_vec())
        } else {
            (Vec::new(), Vec::new())
        };
        self.entries.push(KvEntry {
            pos: t,
            score: rec.u,
            key: k.into_vec(),
            value: v.into_vec(),
            feat,
        });
        self.peak = self.peak.max(self.entries.len());

        while self.planner.pushed < self.planner.needed(t) {
            let j = self.planner.pushed;
            let u = self.entries[self.find(j)].score;
            self.planner.push_score(u)?;
        }
        let plan = self.planner.plan(t, false);
        let mut cols = core::mem::take(&mut self.cols);
        plan_cols(&self.cfg, &plan, t, &mut cols);

        let mut o = vec![0.0; d];
        let entries = &self.entries;
        let idx = |pos: usize| {
            entries
                .binary_search_by_key(&pos, |e| e.pos)
                .expect("attended entry is cached")
        };
        for h in 0..self.cfg.heads {
            let hs = h * p..(h + 1) * p;
            let qrow = &q.row(0)[hs.clone()];
            if self.cfg.linear_mix {
                let last = entries.last().expect("entry just added");
                let pm = &mut self.kv_sum[h * p * p..(h + 1) * p * p];
                accumulate(
                    pm,
                    &mut self.z_sum[hs.clone()],
                    &last.feat[hs.clone()],
                    &last.value[hs.clone()],
                );
                head_output(
                    &self.cfg,
                    &cols,
                    qrow,
                    &fq[hs.clone()],
                    |j| &entries[idx(j)].key[hs.clone()],
                    |j| &entries[idx(j)].feat[hs.clone()],
                    |j| &entries[idx(j)].value[hs.clone()],
                    &self.kv_sum[h * p * p..(h + 1) * p * p],
                    &self.z_sum[hs.clone()],
                    &mut self.terms,
                    &mut o[hs.clone()],
                );
            } else {
                self.logits.clear();
                self.logits.extend(
                    cols.iter()
                        .map(|c| logit(self.cfg.scale, c.kw, dot(qrow, &entries[idx(c.pos)].key[hs.clone()]))),
                );
                softmax_combine(
                    &cols,
                    &mut self.logits,
                    |j| &entries[idx(j)].value[hs.clone()],
                    &mut o[hs.clone()],
                );
            }
        }
        self.cols = cols;
        self.t += 1;
        self.last_evicted = self.prune_cache();
        let y = matmul(&Tensor2::from_vec(1, d, o)?, &params.wo)?;
        if !y.is_finite() {
            return Err(Error::NonFinite("attention output"));
        }
        Ok(y.into_vec())
    }

    /// Drops entries that no future query can attend to and returns their
    /// positions. Runs at the end of every step; calling it again is a no-op.
    pub fn prune_cache(&mut self) -> Vec<usize> {
        let lo = self.t.saturating_sub(self.cfg.window);
        let selected: &[Scored] = self.planner.tracker.as_ref().map_or(&[], |t| t.topk.selected());
        let mut evicted = Vec::new();
        self.entries.retain(|e| {
            let keep = e.pos >= lo || selected.binary_search_by_key(&e.pos, |s| s.index).is_ok();
            if !keep {
                evicted.push(e.pos);
            }
            keep
        });
        self.evicted_total += evicted.len();
        evicted
    }

    /// Positions evicted by the most recent step.
    pub fn last_evicted(&self) -> &[usize] {
        &self.last_evicted
    }

    pub fn evicted_total(&self) -> usize {
        self.evicted_total
    }

    /// Processes a block of positions.
    pub fn extend(&mut self, params: &AttnParams, x: &Tensor2) -> Result<Tensor2> {
        let mut out = Vec::with_capacity(x.rows() * x.cols());
        for i in 0..x.rows() {
            out.extend(self.step(params, x.row(i))?);
        }
        Tensor2::from_vec(x.rows(), self.cfg.d_model(), out)
    }

    /// Plain-data snapshot.
    pub fn parts(&self) -> CacheParts {
        let (stream, selected) = match &self.planner.tracker {
            Some(tr) => (Some(tr.stream.parts()), tr.topk.selected().to_vec()),
            None => (None, Vec::new()),
        };
        CacheParts {
            t: self.t,
            pushed: self.planner.pushed,
            norm: self.scorer.norm,
            stream,
            selected,
            entries: self.entries.clone(),
            kv_sum: self.kv_sum.clone(),
            z_sum: self.z_sum.clone(),
            peak: self.peak,
        }
    }

    pub fn from_parts(cfg: &AttnConfig, params: &AttnParams, parts: CacheParts) -> Result<Self> {
        let mut cache = Self::new(cfg, params)?;
        let d = cfg.d_model();
        if parts.pushed > parts.t
            || parts.kv_sum.len() != cache.kv_sum.len()
            || parts.z_sum.len() != cache.z_sum.len()
            || parts.entries.windows(2).any(|w| w[0].pos >= w[1].pos)
            || parts.entries.iter().any(|e| {
                e.pos >= parts.t
                    || e.key.len() != d
                    || e.value.len() != d
                    || e.feat.len() != if cfg.linear_mix { d } else { 0 }
            })
        {
            return Err(Error::InvalidArgument("inconsistent cache snapshot"));
        }
        cache.planner.tracker = match (cfg.budget(), parts.stream) {
            (Some(k), Some(sp)) => {
                if sp.k != k.get() || sp.t != parts.pushed {
                    return Err(Error::InvalidArgument("cache snapshot has a different budget"));
                }
                let stream = StreamState::from_parts(sp)?;
                Some(SelectionTracker {
                    stream,
                    topk: TopKTracker::from_selected(k.hard(), parts.selected)?,
                })
            }
            (None, None) => None,
            _ => return Err(Error::InvalidArgument("cache snapshot has a different budget")),
        };
        cache.planner.pushed = parts.pushed;
        cache.scorer.norm = parts.norm;
        cache.scorer.pos = parts.t;
        cache.t = parts.t;
        cache.entries = parts.entries;
        cache.kv_sum = parts.kv_sum;
        cache.z_sum = parts.z_sum;
        cache.peak = parts.peak;
        Ok(cache)
    }
}

/// One decoding step: attends from `x` over the cache, then appends and
/// prunes.
pub fn generate_step(cache: &mut SparseKvCache, params: &AttnParams, x: &[f64]) -> Result<Vec<f64>> {
    cache.step(params, x)
}

/// Serializable contents of a [`SparseKvCache`].
#[derive(Debug, Clone, PartialEq)]
pub struct CacheParts {
    pub t: usize,
    pub pushed: usize,
    pub norm: TimestepNormState,
    pub stream: Option<StreamParts>,
    pub selected: Vec<Scored>,
    pub entries: Vec<KvEntry>,
    pub kv_sum: Vec<f64>,
    pub z_sum: Vec<f64>,
    pub peak: usize,
}

/// Runs the layer over `x` in chunks of `chunk_len` positions through one
/// cache. Returns the outputs and the peak number of cached entries.
pub fn chunked_forward(
    x: &Tensor2,
    params: &AttnParams,
    cfg: &AttnConfig,
    chunk_len: usize,
) -> Result<(Tensor2, usize)> {
    if chunk_len == 0 {
        return Err(Error::InvalidArgument("chunk_len must be positive"));
    }
    let mut cache = SparseKvCache::new(cfg, params)?;
    let mut out = Vec::with_capacity(x.rows() * x.cols());
    let mut start = 0;
    while start < x.rows() {
        let end = (start + chunk_len).min(x.rows());
        out.extend(cache.extend(params, &x.slice_rows(start, end))?.into_vec());
        start = end;
    }
    Ok((Tensor2::from_vec(x.rows(), cfg.d_model(), out)?, cache.peak()))
}
