//! Incremental SparseK over growing prefixes.
//!
//! Two min-heaps track the candidates: `S` holds every value above the
//! previous threshold and `F` the values at least one above it. Because the
//! threshold never decreases as values are added, anything that leaves `S` has
//! a zero mask entry at every later step and is dropped for good. Each push
//! inserts into at most both heaps and the threshold search resumes from the
//! previous `(|F|, |S|)`, popping heap minima as it moves up, so `m` pushes
//! cost `O(m log m)` in total.

use alloc::collections::BinaryHeap;
use alloc::vec;
use alloc::vec::Vec;
use core::cmp::{Ordering, Reverse};

use crate::error::{Error, Result};
use crate::selection::{SelectionMask, SelectionMode};
use crate::sparsek::{flat_tau, g_at, tau_for, KBudget};

/// Maintained heap sums are recomputed from the heap contents this often.
const RESUM_PERIOD: usize = 1 << 16;

/// Heap entry ordered by value, then by insertion index.
#[derive(Debug, Clone, Copy)]
pub struct Scored {
    pub value: f64,
    pub index: usize,
}

impl PartialEq for Scored {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}
impl Eq for Scored {}
impl PartialOrd for Scored {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Scored {
    fn cmp(&self, other: &Self) -> Ordering {
        self.value.total_cmp(&other.value).then(self.index.cmp(&other.index))
    }
}

/// Summary of one push.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepInfo {
    pub tau: f64,
    pub u_count: usize,
    pub w_count: usize,
    /// Entries evicted by this push.
    pub evicted: usize,
}

/// SparseK solution over the surviving indices of a stream.
#[derive(Debug, Clone, PartialEq)]
pub struct StreamSolution {
    /// Surviving indices, ascending.
    pub indices: Vec<usize>,
    /// Mask values aligned with `indices`.
    pub p: Vec<f64>,
    pub tau: f64,
    pub u_count: usize,
    pub w_count: usize,
}

/// Streaming SparseK state.
#[derive(Debug, Clone)]
pub struct StreamState {
    k: KBudget,
    heap_f: BinaryHeap<Reverse<Scored>>,
    sum_f: f64,
    heap_s: BinaryHeap<Reverse<Scored>>,
    sum_s: f64,
    tau: f64,
    t: usize,
    max_dropped: f64,
    s_cap: Option<usize>,
    capacity_max_dropped: f64,
    last_evicted: Vec<usize>,
    evicted_total: usize,
    heap_ops: u64,
}

impl StreamState {
    pub fn new(k: KBudget) -> Self {
        Self {
            k,
            heap_f: BinaryHeap::new(),
            sum_f: 0.0,
            heap_s: BinaryHeap::new(),
            sum_s: 0.0,
            tau: f64::NEG_INFINITY,
            t: 0,
            max_dropped: f64::NEG_INFINITY,
            s_cap: None,
            capacity_max_dropped: f64::NEG_INFINITY,
            last_evicted: Vec::new(),
            evicted_total: 0,
            heap_ops: 0,
        }
    }

    /// Bounds `|S|`; the smallest candidate is evicted when the bound is
    /// exceeded. Results stay exact unless [`Self::capacity_exact`] reports
    /// otherwise.
    pub fn with_capacity_bound(k: KBudget, cap: usize) -> Self {
        let mut s = Self::new(k);
        s.s_cap = Some(cap.max(k.ceil()));
        s
    }

    pub fn k(&self) -> KBudget {
        self.k
    }

    /// Number of values pushed so far.
    pub fn len(&self) -> usize {
        self.t
    }

    pub fn is_empty(&self) -> bool {
        self.t == 0
    }

    /// Threshold after the last push; `-inf` while `t < k`.
    pub fn tau(&self) -> f64 {
        self.tau
    }

    pub fn survivors(&self) -> usize {
        self.heap_s.len()
    }

    pub fn saturated(&self) -> usize {
        self.heap_f.len()
    }

    /// Indices evicted by the most recent push.
    pub fn last_evicted(&self) -> &[usize] {
        &self.last_evicted
    }

    pub fn evicted_total(&self) -> usize {
        self.evicted_total
    }

    /// Heap pushes and pops performed so far.
    pub fn heap_ops(&self) -> u64 {
        self.heap_ops
    }

    /// False once a capacity eviction removed a value that still has a
    /// nonzero mask entry.
    pub fn capacity_exact(&self) -> bool {
        self.capacity_max_dropped <= self.tau
    }

    /// Mask value of a surviving entry with score `value`.
    #[inline]
    pub fn weight(&self, value: f64) -> f64 {
        (value - self.tau).clamp(0.0, 1.0)
    }

    pub fn infeasible(&self) -> bool {
        (self.t as f64) < self.k.get()
    }

    fn drop_entry(&mut self, e: Scored) {
        self.last_evicted.push(e.index);
        self.evicted_total += 1;
        if e.value > self.max_dropped {
            self.max_dropped = e.value;
        }
    }

    fn pop_s(&mut self) -> Scored {
        let Reverse(e) = self.heap_s.pop().expect("nonempty S");
        self.sum_s -= e.value;
        self.heap_ops += 1;
        e
    }

    fn pop_f(&mut self) -> Scored {
        let Reverse(e) = self.heap_f.pop().expect("nonempty F");
        self.sum_f -= e.value;
        self.heap_ops += 1;
        e
    }

    fn resum(&mut self) {
        self.sum_s = self.heap_s.iter().map(|Reverse(e)| e.value).sum();
        self.sum_f = self.heap_f.iter().map(|Reverse(e)| e.value).sum();
    }

    /// Appends `z` and updates the threshold.
    pub fn push(&mut self, z: f64) -> Result<StepInfo> {
        if !z.is_finite() {
            return Err(Error::NonFinite("stream value"));
        }
        self.last_evicted.clear();
        let entry = Scored {
            value: z,
            index: self.t,
        };
        self.t += 1;

        if z > self.tau {
            self.heap_s.push(Reverse(entry));
            self.sum_s += z;
            self.heap_ops += 1;
            if z >= self.tau + 1.0 {
                self.heap_f.push(Reverse(entry));
                self.sum_f += z;
                self.heap_ops += 1;
            }
        } else {
            self.drop_entry(entry);
        }
        if let Some(cap) = self.s_cap {
            while self.heap_s.len() > cap {
                let e = self.pop_s();
                if e.value > self.capacity_max_dropped {
                    self.capacity_max_dropped = e.value;
                }
                self.drop_entry(e);
            }
        }
        if self.t.is_multiple_of(RESUM_PERIOD) {
            self.resum();
        }

        if !self.infeasible() {
            self.solve();
        }
        Ok(StepInfo {
            tau: self.tau,
            u_count: self.heap_f.len(),
            w_count: self.heap_s.len(),
            evicted: self.last_evicted.len(),
        })
    }

    /// Moves the threshold up from its previous value to the new root.
    fn solve(&mut self) {
        let k = self.k.get();
        let mut lo = self.tau;
        let tau = loop {
            let s_min = self.heap_s.peek().map_or(f64::INFINITY, |Reverse(e)| e.value);
            let f_edge = self.heap_f.peek().map_or(f64::INFINITY, |Reverse(e)| e.value - 1.0);
            let hi = s_min.min(f_edge);
            let (u, w) = (self.heap_f.len(), self.heap_s.len());
            let mid = self.sum_s - self.sum_f;
            if hi == f64::INFINITY {
                // Only reachable after lossy capacity evictions emptied S.
                break lo;
            }
            if g_at(mid, u, w, k, hi) <= 0.0 {
                if w == u {
                    // S == F: valid interval is [max dropped, min F - 1].
                    break flat_tau(self.max_dropped, hi).max(lo);
                }
                break tau_for(mid, u, w, k).clamp(lo, hi);
            }
            if s_min <= f_edge {
                let e = self.pop_s();
                self.drop_entry(e);
            } else {
                self.pop_f();
            }
            lo = hi;
        };
        self.tau = tau;
        while let Some(Reverse(e)) = self.heap_s.peek() {
            if e.value > tau {
                break;
            }
            let e = self.pop_s();
            self.drop_entry(e);
        }
        while let Some(Reverse(e)) = self.heap_f.peek() {
            if e.value >= tau + 1.0 {
                break;
            }
            self.pop_f();
        }
    }

    /// Solution over the surviving indices.
    pub fn solution(&self) -> Result<StreamSolution> {
        if self.t == 0 {
            return Err(Error::EmptyState);
        }
        let mut entries: Vec<Scored> = self.heap_s.iter().map(|Reverse(e)| *e).collect();
        entries.sort_by_key(|e| e.index);
        let p: Vec<f64> = entries.iter().map(|e| self.weight(e.value)).collect();
        let u_count = p.iter().filter(|&&v| v >= 1.0).count();
        let w_count = p.iter().filter(|&&v| v > 0.0).count();
        Ok(StreamSolution {
            indices: entries.iter().map(|e| e.index).collect(),
            p,
            tau: self.tau,
            u_count,
            w_count,
        })
    }

    /// Surviving indices whose mask value is strictly between 0 and 1.
    pub fn fractional_support(&self) -> Vec<usize> {
        let mut out: Vec<usize> = self
            .heap_s
            .iter()
            .filter(|Reverse(e)| {
                let w = self.weight(e.value);
                w > 0.0 && w < 1.0
            })
            .map(|Reverse(e)| e.index)
            .collect();
        out.sort_unstable();
        out
    }

    /// Hard top-`floor(k)` indicator and soft weights over the whole prefix;
    /// evicted positions are zero in both.
    pub fn mask(&self) -> Result<SelectionMask> {
        let sol = self.solution()?;
        let t = self.t;
        let mut soft = vec![0.0; t];
        for (&i, &p) in sol.indices.iter().zip(&sol.p) {
            soft[i] = p;
        }
        let mut by_value: Vec<Scored> = self.heap_s.iter().map(|Reverse(e)| *e).collect();
        by_value.sort_by(|a, b| b.value.total_cmp(&a.value).then(a.index.cmp(&b.index)));
        by_value.truncate(self.k.hard().min(t));
        let mut indices: Vec<usize> = by_value.iter().map(|e| e.index).collect();
        indices.sort_unstable();
        let mut hard = vec![0.0; t];
        for &i in &indices {
            hard[i] = 1.0;
        }
        Ok(SelectionMask {
            hard,
            soft,
            indices,
            mode: SelectionMode::Soft,
        })
    }

    /// Raw heap contents, for serialization.
    pub fn parts(&self) -> StreamParts {
        let mut s: Vec<Scored> = self.heap_s.iter().map(|Reverse(e)| *e).collect();
        let mut f: Vec<Scored> = self.heap_f.iter().map(|Reverse(e)| *e).collect();
        s.sort();
        f.sort();
        StreamParts {
            k: self.k.get(),
            heap_s: s,
            sum_s: self.sum_s,
            heap_f: f,
            sum_f: self.sum_f,
            tau: self.tau,
            t: self.t,
            max_dropped: self.max_dropped,
            s_cap: self.s_cap,
            capacity_max_dropped: self.capacity_max_dropped,
            evicted_total: self.evicted_total,
            heap_ops: self.heap_ops,
        }
    }

    pub fn from_parts(parts: StreamParts) -> Result<Self> {
        Ok(Self {
            k: KBudget::new(parts.k)?,
            heap_f: parts.heap_f.into_iter().map(Reverse).collect(),
            sum_f: parts.sum_f,
            heap_s: parts.heap_s.into_iter().map(Reverse).collect(),
            sum_s: parts.sum_s,
            tau: parts.tau,
            t: parts.t,
            max_dropped: parts.max_dropped,
            s_cap: parts.s_cap,
            capacity_max_dropped: parts.capacity_max_dropped,
            last_evicted: Vec::new(),
            evicted_total: parts.evicted_total,
            heap_ops: parts.heap_ops,
        })
    }

    #[cfg(test)]
    fn sums_consistent(&self) -> bool {
        let s: f64 = self.heap_s.iter().map(|Reverse(e)| e.value).sum();
        let f: f64 = self.heap_f.iter().map(|Reverse(e)| e.value).sum();
        (s - self.sum_s).abs() < 1e-9 && (f - self.sum_f).abs() < 1e-9
    }
}

/// Plain-data view of a [`StreamState`].
#[derive(Debug, Clone, PartialEq)]
pub struct StreamParts {
    pub k: f64,
    pub heap_s: Vec<Scored>,
    pub sum_s: f64,
    pub heap_f: Vec<Scored>,
    pub sum_f: f64,
    pub tau: f64,
    pub t: usize,
    pub max_dropped: f64,
    pub s_cap: Option<usize>,
    pub capacity_max_dropped: f64,
    pub evicted_total: usize,
    pub heap_ops: u64,
}

/// Worst-first ordering for the hard top-k heap: lowest value, and among
/// equal values the latest index, is evicted first.
#[derive(Debug, Clone, Copy)]
struct Worst(Scored);

impl PartialEq for Worst {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}
impl Eq for Worst {}
impl PartialOrd for Worst {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Worst {
    // BinaryHeap is a max-heap: the "largest" Worst is the one to evict.
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .0
            .value
            .total_cmp(&self.0.value)
            .then(self.0.index.cmp(&other.0.index))
    }
}

/// Streaming hard top-`n` over frozen scores. Once an index is evicted it can
/// never come back, since later scores only raise the bar.
#[derive(Debug, Clone)]
pub struct TopKTracker {
    n: usize,
    heap: BinaryHeap<Worst>,
    /// Selected `(index, score)` pairs, ascending by index.
    selected: Vec<Scored>,
}

impl TopKTracker {
    pub fn new(n: usize) -> Self {
        Self {
            n,
            heap: BinaryHeap::new(),
            selected: Vec::new(),
        }
    }

    /// Rebuilds a tracker from its selected entries.
    pub fn from_selected(n: usize, selected: Vec<Scored>) -> Result<Self> {
        if selected.len() > n || selected.windows(2).any(|w| w[0].index >= w[1].index) {
            return Err(Error::InvalidArgument(
                "selected entries must be ascending and fit the capacity",
            ));
        }
        Ok(Self {
            n,
            heap: selected.iter().copied().map(Worst).collect(),
            selected,
        })
    }

    pub fn capacity(&self) -> usize {
        self.n
    }

    /// Inserts the score of the next position (indices must increase).
    /// Returns the evicted entry, which may be the new one.
    pub fn push(&mut self, index: usize, value: f64) -> Option<Scored> {
        let e = Scored { value, index };
        if self.n == 0 {
            return Some(e);
        }
        debug_assert!(self.selected.last().is_none_or(|l| l.index < index));
        self.heap.push(Worst(e));
        self.selected.push(e);
        if self.heap.len() > self.n {
            let Worst(out) = self.heap.pop().expect("nonempty");
            let pos = self
                .selected
                .binary_search_by_key(&out.index, |s| s.index)
                .expect("selected entry");
            self.selected.remove(pos);
            return Some(out);
        }
        None
    }

    pub fn selected(&self) -> &[Scored] {
        &self.selected
    }

    pub fn len(&self) -> usize {
        self.selected.len()
    }

    pub fn is_empty(&self) -> bool {
        self.selected.is_empty()
    }
}

/// Hard top-`floor(k)` selection plus the streaming SparseK threshold for
/// the soft weights: the per-query selection state of SparseK attention.
#[derive(Debug, Clone)]
pub struct SelectionTracker {
    pub stream: StreamState,
    pub topk: TopKTracker,
}

impl SelectionTracker {
    pub fn new(k: KBudget) -> Self {
        Self {
            stream: StreamState::new(k),
            topk: TopKTracker::new(k.hard()),
        }
    }

    /// Adds the next position's score; returns the index that left the hard
    /// selection, if any.
    pub fn push(&mut self, value: f64) -> Result<Option<usize>> {
        let index = self.stream.len();
        self.stream.push(value)?;
        Ok(self.topk.push(index, value).map(|e| e.index))
    }

    pub fn len(&self) -> usize {
        self.stream.len()
    }

    pub fn is_empty(&self) -> bool {
        self.stream.is_empty()
    }

    /// Soft weight of a selected entry.
    #[inline]
    pub fn weight(&self, value: f64) -> f64 {
        if self.stream.infeasible() {
            1.0
        } else {
            self.stream.weight(value)
        }
    }
}
