//! The SparseK operator: Euclidean projection onto
//! `C = { p | 0 <= p <= 1, sum(p) = k }`.
//!
//! The solution is `p = clamp(z - tau, 0, 1)` where `tau` is the root of the
//! piecewise-linear, nonincreasing function
//! `g(t) = sum_j clamp(z_j - t, 0, 1) - k`. Its breakpoints are `{z_j}` and
//! `{z_j - 1}`; between consecutive breakpoints the number of saturated
//! entries `u` and nonzero entries `w` is constant and
//! `tau = (sum_{u < j <= w} z_(j) + u - k) / (w - u)`.
//!
//! [`sparsek`] sorts once and walks the breakpoints from the top. Each
//! interval is tested by the sign of `g` at its lower end, so a root is never
//! skipped because of rounding in the closed-form threshold.

use alloc::vec;
use alloc::vec::Vec;
use core::cmp::Ordering;

use crate::error::{Error, Result};
use crate::numerics::fmath;

/// Selection budget `k > 0`. Real-valued; integer budgets are the common case.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd)]
pub struct KBudget(f64);

impl KBudget {
    pub fn new(k: f64) -> Result<Self> {
        if !(k > 0.0) || !k.is_finite() {
            return Err(Error::InvalidArgument("budget k must be a positive finite number"));
        }
        Ok(Self(k))
    }

    #[inline]
    pub fn get(self) -> f64 {
        self.0
    }

    /// `floor(k)`: the number of hard-selected entries.
    #[inline]
    pub fn hard(self) -> usize {
        fmath::floor(self.0) as usize
    }

    /// `ceil(k)`
    #[inline]
    pub fn ceil(self) -> usize {
        fmath::ceil(self.0) as usize
    }
}

/// Result of a SparseK evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseKSolution {
    /// Relaxed mask, `clamp(z - tau, 0, 1)`.
    pub p: Vec<f64>,
    /// Threshold. `-inf` when the budget is infeasible (`m < k`).
    pub tau: f64,
    /// Number of entries equal to one.
    pub u_count: usize,
    /// Number of nonzero entries.
    pub w_count: usize,
    /// Indices with `0 < p < 1`, ascending.
    pub support: Vec<usize>,
    /// Indices with `p == 1`, ascending.
    pub full_set: Vec<usize>,
    /// `m < k`: nothing can be pruned and `p` is all ones.
    pub infeasible: bool,
}

impl SparseKSolution {
    pub fn len(&self) -> usize {
        self.p.len()
    }

    pub fn is_empty(&self) -> bool {
        self.p.is_empty()
    }

    /// The budget is met by saturated entries alone, so the Jacobian is zero.
    pub fn is_degenerate(&self) -> bool {
        self.support.is_empty()
    }

    fn from_tau(z: &[f64], tau: f64) -> Self {
        let p: Vec<f64> = z.iter().map(|&v| (v - tau).clamp(0.0, 1.0)).collect();
        let mut support = Vec::new();
        let mut full_set = Vec::new();
        let mut w_count = 0;
        for (j, &pj) in p.iter().enumerate() {
            if pj > 0.0 {
                w_count += 1;
                if pj >= 1.0 {
                    full_set.push(j);
                } else {
                    support.push(j);
                }
            }
        }
        Self {
            u_count: full_set.len(),
            w_count,
            p,
            tau,
            support,
            full_set,
            infeasible: false,
        }
    }

    fn all_ones(m: usize) -> Self {
        Self {
            p: vec![1.0; m],
            tau: f64::NEG_INFINITY,
            u_count: m,
            w_count: m,
            support: Vec::new(),
            full_set: (0..m).collect(),
            infeasible: true,
        }
    }
}

/// Outcome of one breakpoint scan.
#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) enum Scan {
    /// Root found; `tau` lies in `[lo, hi]` of the accepted interval.
    Root { tau: f64 },
    /// `g` is identically zero on `[lo, hi]` (no fractional entries).
    Flat { lo: f64, hi: f64 },
    /// The root lies below `floor`: the truncated input cannot decide it.
    BelowFloor,
}

/// `g` evaluated at `t` for an interval with counts `(u, w)` and
/// `mid_sum = sum_{u < j <= w} z_(j)`.
#[inline]
pub(crate) fn g_at(mid_sum: f64, u: usize, w: usize, k: f64, t: f64) -> f64 {
    if w == u {
        return u as f64 - k;
    }
    if t == f64::NEG_INFINITY {
        return f64::INFINITY;
    }
    mid_sum - (w - u) as f64 * t + u as f64 - k
}

/// Closed-form threshold for counts `(u, w)`, `w > u`.
#[inline]
pub(crate) fn tau_for(mid_sum: f64, u: usize, w: usize, k: f64) -> f64 {
    (mid_sum + u as f64 - k) / (w - u) as f64
}

/// Threshold reported when no entry is fractional: the midpoint of the
/// valid interval, with an infinite lower end replaced by `hi - 1`.
#[inline]
pub(crate) fn flat_tau(lo: f64, hi: f64) -> f64 {
    let lo = if lo == f64::NEG_INFINITY { hi - 1.0 } else { lo };
    0.5 * (lo + hi)
}

/// Walks breakpoints of the descending-sorted `zs` (with prefix sums `cs`,
/// `cs[j] = zs[0] + ... + zs[j-1]`) from the top. `floor` is the largest
/// value not present in `zs`, or `-inf`.
pub(crate) fn scan_sorted(zs: &[f64], cs: &[f64], k: f64, floor: f64) -> Scan {
    let m = zs.len();
    let (mut u, mut w) = (0usize, 0usize);
    let mut hi = f64::INFINITY;
    loop {
        let next_w = if w < m { zs[w] } else { f64::NEG_INFINITY };
        let next_u = if u < m { zs[u] - 1.0 } else { f64::NEG_INFINITY };
        let v = next_w.max(next_u);
        let lo = v.max(floor);
        let mid = cs[w] - cs[u];
        if g_at(mid, u, w, k, lo) >= 0.0 {
            if w == u {
                return Scan::Flat { lo, hi };
            }
            let tau = tau_for(mid, u, w, k).clamp(lo, hi);
            return Scan::Root { tau };
        }
        if v <= floor {
            return Scan::BelowFloor;
        }
        while w < m && zs[w] == v {
            w += 1;
        }
        while u < m && zs[u] - 1.0 == v {
            u += 1;
        }
        hi = v;
    }
}

/// Descending by value, ascending by index on ties.
#[inline]
fn desc(z: &[f64], a: usize, b: usize) -> Ordering {
    z[b].total_cmp(&z[a]).then(a.cmp(&b))
}

fn check_input(z: &[f64]) -> Result<()> {
    if z.is_empty() {
        return Err(Error::InvalidArgument("sparsek needs at least one score"));
    }
    if z.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("sparsek scores"));
    }
    Ok(())
}

fn prefix_sums(zs: &[f64]) -> Vec<f64> {
    let mut cs = Vec::with_capacity(zs.len() + 1);
    let mut acc = 0.0;
    cs.push(acc);
    for &v in zs {
        acc += v;
        cs.push(acc);
    }
    cs
}

/// Resolves a scan outcome into a full solution.
fn finish(z: &[f64], zs: &[f64], floor: f64, scan: Scan) -> SparseKSolution {
    let tau = match scan {
        Scan::Root { tau } => tau,
        Scan::Flat { lo, hi } => flat_tau(lo, hi),
        Scan::BelowFloor => unreachable!("caller handles fallback"),
    };
    let mut sol = SparseKSolution::from_tau(z, tau);
    if sol.support.is_empty() {
        // Report the midpoint of [z_(u+1), z_(u) - 1].
        let u = sol.u_count;
        let hi = zs[u - 1] - 1.0;
        let lo = if u < zs.len() { zs[u] } else { floor };
        sol.tau = flat_tau(lo, hi);
    }
    sol
}

/// Exact SparseK by full sort, `O(m log m)`.
pub fn sparsek(z: &[f64], k: KBudget) -> Result<SparseKSolution> {
    check_input(z)?;
    let m = z.len();
    if (m as f64) < k.get() {
        return Ok(SparseKSolution::all_ones(m));
    }
    if m as f64 == k.get() {
        // Every entry saturates; skip the scan so rounding cannot leave one
        // a hair below 1.
        let lowest = z.iter().copied().fold(f64::INFINITY, f64::min);
        let mut sol = SparseKSolution::from_tau(z, f64::NEG_INFINITY);
        sol.tau = flat_tau(f64::NEG_INFINITY, lowest - 1.0);
        return Ok(sol);
    }
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| desc(z, a, b));
    let zs: Vec<f64> = order.iter().map(|&i| z[i]).collect();
    let cs = prefix_sums(&zs);
    let scan = scan_sorted(&zs, &cs, k.get(), f64::NEG_INFINITY);
    Ok(finish(z, &zs, f64::NEG_INFINITY, scan))
}

/// Result of [`sparsek_partial`].
#[derive(Debug, Clone, PartialEq)]
pub struct PartialEval {
    pub solution: SparseKSolution,
    /// The top `sort_cap` values did not decide the threshold and the full
    /// sort was used instead.
    pub fallback: bool,
}

/// Default partial-sort cap: `4 * ceil(k)`.
pub fn default_sort_cap(k: KBudget) -> usize {
    4 * k.ceil()
}

/// SparseK from a partial selection of the `sort_cap` largest values,
/// `O(m + sort_cap log sort_cap)`. Falls back to [`sparsek`] when the
/// threshold falls below the cut.
pub fn sparsek_partial(z: &[f64], k: KBudget, sort_cap: usize) -> Result<PartialEval> {
    check_input(z)?;
    if sort_cap < k.ceil() {
        return Err(Error::InvalidArgument("sort_cap must be at least ceil(k)"));
    }
    let m = z.len();
    if sort_cap >= m || (m as f64) < k.get() {
        return Ok(PartialEval {
            solution: sparsek(z, k)?,
            fallback: false,
        });
    }
    let mut order: Vec<usize> = (0..m).collect();
    order.select_nth_unstable_by(sort_cap, |&a, &b| desc(z, a, b));
    let floor = z[order[sort_cap]];
    let top = &mut order[..sort_cap];
    top.sort_by(|&a, &b| desc(z, a, b));
    let zs: Vec<f64> = top.iter().map(|&i| z[i]).collect();
    let cs = prefix_sums(&zs);
    match scan_sorted(&zs, &cs, k.get(), floor) {
        Scan::BelowFloor => Ok(PartialEval {
            solution: sparsek(z, k)?,
            fallback: true,
        }),
        scan => Ok(PartialEval {
            solution: finish(z, &zs, floor, scan),
            fallback: false,
        }),
    }
}

/// Jacobian-vector product `s * (v - mean_S(v))`, where `s` indicates the
/// fractional support. The Jacobian is symmetric, so this is also the
/// vector-Jacobian product.
pub fn sparsek_jvp(sol: &SparseKSolution, v: &[f64]) -> Result<Vec<f64>> {
    if v.len() != sol.p.len() {
        return Err(Error::Shape {
            op: "sparsek_jvp",
            expected: (sol.p.len(), 1),
            found: (v.len(), 1),
        });
    }
    let mut out = vec![0.0; v.len()];
    if sol.support.is_empty() {
        return Ok(out);
    }
    let mean = sol.support.iter().map(|&j| v[j]).sum::<f64>() / sol.support.len() as f64;
    for &j in &sol.support {
        out[j] = v[j] - mean;
    }
    Ok(out)
}

/// Indices of the `k` largest entries (ties to the lower index), ascending.
pub fn topk_indices(z: &[f64], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..z.len()).collect();
    if k < z.len() {
        order.select_nth_unstable_by(k, |&a, &b| desc(z, a, b));
        order.truncate(k);
    }
    order.sort_unstable();
    order
}

/// 0/1 indicator of the `k` largest entries; ties go to the lower index.
pub fn topk_hard(z: &[f64], k: usize) -> Vec<f64> {
    let mut out = vec![0.0; z.len()];
    for i in topk_indices(z, k) {
        out[i] = 1.0;
    }
    out
}

/// Straight-through SparseK: the forward value is the hard top-`floor(k)`
/// indicator; gradients are routed through the returned soft solution via
/// [`sparsek_jvp`].
pub fn sparsek_st(z: &[f64], k: KBudget) -> Result<(Vec<f64>, SparseKSolution)> {
    let sol = sparsek(z, k)?;
    Ok((topk_hard(z, k.hard()), sol))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{finite_diff_jvp, Rng};
    use proptest::prelude::*;
    use std::vec::Vec;

    fn kb(k: f64) -> KBudget {
        KBudget::new(k).unwrap()
    }

    /// Bisection on the monotone residual; independent of the breakpoint scan.
    fn bisect_tau(z: &[f64], k: f64) -> f64 {
        let g = |t: f64| z.iter().map(|&v| (v - t).clamp(0.0, 1.0)).sum::<f64>() - k;
        let mut lo = z.iter().cloned().fold(f64::INFINITY, f64::min) - 1.0;
        let mut hi = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if g(mid) > 0.0 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        0.5 * (lo + hi)
    }

    fn project_bisect(z: &[f64], k: f64) -> Vec<f64> {
        let t = bisect_tau(z, k);
        z.iter().map(|&v| (v - t).clamp(0.0, 1.0)).collect()
    }

    /// Exhaustive (u, w) enumeration over the sorted values, checking the
    /// interval conditions of the KKT system directly.
    fn enumerate_uw(z: &[f64], k: f64) -> (usize, usize, f64) {
        let mut zs = z.to_vec();
        zs.sort_by(|a, b| b.total_cmp(a));
        let m = zs.len();
        for u in 0..=m {
            for w in (u + 1)..=m {
                let s: f64 = zs[u..w].iter().sum();
                let tau = (s + u as f64 - k) / (w - u) as f64;
                let above_u = u == 0 || zs[u - 1] >= tau + 1.0;
                let below_u = u == m || tau + 1.0 > zs[u];
                let above_w = zs[w - 1] > tau;
                let below_w = w == m || tau >= zs[w];
                if above_u && below_u && above_w && below_w {
                    return (u, w, tau);
                }
            }
        }
        panic!("no consistent (u, w)");
    }

    #[test]
    fn worked_example() {
        let sol = sparsek(&[0.9, 0.5, 0.1], kb(2.0)).unwrap();
        let expect = [1.0, 0.7, 0.3];
        for (a, b) in sol.p.iter().zip(&expect) {
            assert!((a - b).abs() < 1e-12, "{:?}", sol.p);
        }
        assert!((sol.tau + 0.2).abs() < 1e-12);
        assert_eq!((sol.u_count, sol.w_count), (1, 3));
        assert_eq!(sol.full_set, vec![0]);
        assert_eq!(sol.support, vec![1, 2]);
        let (u, w, tau) = enumerate_uw(&[0.9, 0.5, 0.1], 2.0);
        assert_eq!((u, w), (1, 3));
        assert!((tau - sol.tau).abs() < 1e-12);
        assert!((bisect_tau(&[0.9, 0.5, 0.1], 2.0) - sol.tau).abs() < 1e-12);
    }

    #[test]
    fn constant_input_splits_budget() {
        for c in [-3.0, 0.0, 0.25, 17.0] {
            let sol = sparsek(&[c, c, c], kb(2.0)).unwrap();
            for p in &sol.p {
                assert!((p - 2.0 / 3.0).abs() < 1e-12);
            }
            assert!((sol.tau - (c - 2.0 / 3.0)).abs() < 1e-12);
        }
    }

    #[test]
    fn k_equal_m_saturates() {
        let sol = sparsek(&[0.3, -1.0, 5.0, 2.0], kb(4.0)).unwrap();
        assert_eq!(sol.p, vec![1.0; 4]);
        assert!(sol.tau.is_finite());
        assert!(sol.is_degenerate());
        assert!(!sol.infeasible);
        // Valid interval is (-inf, min - 1]; reported 0.5 below its top.
        assert!((sol.tau - (-2.5)).abs() < 1e-12);
        // Inexact decimals must still saturate exactly.
        assert_eq!(sparsek(&[0.9, 0.5, 0.1], kb(3.0)).unwrap().p, vec![1.0; 3]);
    }

    #[test]
    fn infeasible_budget_is_all_ones() {
        let sol = sparsek(&[0.3, 0.1], kb(3.0)).unwrap();
        assert_eq!(sol.p, vec![1.0, 1.0]);
        assert!(sol.infeasible);
        assert_eq!(sol.tau, f64::NEG_INFINITY);
        assert_eq!(sparsek_jvp(&sol, &[1.0, 2.0]).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn argument_errors() {
        assert!(KBudget::new(0.0).is_err());
        assert!(KBudget::new(-1.0).is_err());
        assert!(KBudget::new(f64::NAN).is_err());
        assert!(sparsek(&[], kb(1.0)).is_err());
        assert!(sparsek(&[1.0, f64::NAN], kb(1.0)).is_err());
        assert!(sparsek_partial(&[1.0, 2.0, 3.0], kb(2.5), 2).is_err());
    }

    #[test]
    fn degenerate_midpoint() {
        // Top two are saturated, third is zero; valid tau in [0.0, 1.0].
        let sol = sparsek(&[3.0, 2.0, 0.0], kb(2.0)).unwrap();
        assert_eq!(sol.p, vec![1.0, 1.0, 0.0]);
        assert!((sol.tau - 0.5).abs() < 1e-15);
        assert!(sol.is_degenerate());
    }

    /// Projection onto the probability simplex by sort-and-threshold.
    fn sparsemax(z: &[f64]) -> Vec<f64> {
        let mut zs = z.to_vec();
        zs.sort_by(|a, b| b.total_cmp(a));
        let mut cum = 0.0;
        let mut tau = 0.0;
        for (j, v) in zs.iter().enumerate() {
            cum += v;
            let t = (cum - 1.0) / (j + 1) as f64;
            if *v > t {
                tau = t;
            }
        }
        z.iter().map(|v| (v - tau).max(0.0)).collect()
    }

    #[test]
    fn k_one_matches_sparsemax() {
        let mut rng = Rng::new(9);
        let mut checked = 0;
        for _ in 0..500 {
            let m = 1 + rng.below(20);
            let z = rng.normal_vec(m, 0.5);
            let sm = sparsemax(&z);
            if sm.iter().any(|&v| v >= 1.0) {
                continue;
            }
            let sol = sparsek(&z, kb(1.0)).unwrap();
            for (a, b) in sol.p.iter().zip(&sm) {
                assert!((a - b).abs() < 1e-12);
            }
            checked += 1;
        }
        assert!(checked > 100);
    }

    #[test]
    fn matches_enumeration_and_bisection() {
        let mut rng = Rng::new(21);
        for _ in 0..300 {
            let m = 1 + rng.below(30);
            let z = rng.normal_vec(m, 1.5);
            let k = rng.uniform_range(0.1, m as f64);
            let sol = sparsek(&z, kb(k)).unwrap();
            let (_, _, tau) = enumerate_uw(&z, k);
            let oracle = project_bisect(&z, k);
            if !sol.is_degenerate() {
                assert!((sol.tau - tau).abs() < 1e-9);
            }
            for (a, b) in sol.p.iter().zip(&oracle) {
                assert!((a - b).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn ties_are_handled() {
        let z = [1.0, 1.0, 0.0, 0.0, 1.0, 0.0];
        for k in [1.0, 2.0, 3.0, 3.5, 4.0, 5.5] {
            let sol = sparsek(&z, kb(k)).unwrap();
            let oracle = project_bisect(&z, k);
            for (a, b) in sol.p.iter().zip(&oracle) {
                assert!((a - b).abs() < 1e-12, "k={k} {:?}", sol.p);
            }
            assert!((sol.p.iter().sum::<f64>() - k).abs() < 1e-12);
        }
    }

    #[test]
    fn jvp_examples() {
        let mut sol = sparsek(&[0.9, 0.5, 0.1], kb(2.0)).unwrap();
        assert_eq!(sol.support, vec![1, 2]);
        assert_eq!(sparsek_jvp(&sol, &[1.0, 1.0, 1.0]).unwrap(), vec![0.0, 0.0, 0.0]);
        assert_eq!(sparsek_jvp(&sol, &[0.0, 4.0, 2.0]).unwrap(), vec![0.0, 1.0, -1.0]);
        let fd = finite_diff_jvp(|z| Ok(sparsek(z, kb(2.0))?.p), &[0.9, 0.5, 0.1], &[0.0, 4.0, 2.0], 1e-6).unwrap();
        for (a, b) in fd.iter().zip(&[0.0, 1.0, -1.0]) {
            assert!((a - b).abs() < 1e-6);
        }
        assert!(sparsek_jvp(&sol, &[1.0]).is_err());
        sol.support.clear();
        assert_eq!(sparsek_jvp(&sol, &[3.0, 1.0, 2.0]).unwrap(), vec![0.0; 3]);
    }

    #[test]
    fn topk_cases() {
        assert_eq!(topk_hard(&[0.9, 0.5, 0.1], 2), vec![1.0, 1.0, 0.0]);
        assert_eq!(topk_hard(&[5.0, 5.0, 1.0], 1), vec![1.0, 0.0, 0.0]);
        assert_eq!(topk_hard(&[0.2, 0.1], 3), vec![1.0, 1.0]);
        assert_eq!(topk_indices(&[1.0, 3.0, 3.0, 2.0], 2), vec![1, 2]);
    }

    #[test]
    fn straight_through() {
        let (fwd, sol) = sparsek_st(&[0.9, 0.5, 0.1], kb(2.0)).unwrap();
        assert_eq!(fwd, vec![1.0, 1.0, 0.0]);
        let g = [0.3, -0.2, 0.7];
        assert_eq!(
            sparsek_jvp(&sol, &g).unwrap(),
            sparsek_jvp(&sparsek(&[0.9, 0.5, 0.1], kb(2.0)).unwrap(), &g).unwrap()
        );
        let (fwd, sol) = sparsek_st(&[0.4, 0.2], kb(2.0)).unwrap();
        assert_eq!(fwd, vec![1.0, 1.0]);
        assert_eq!(sparsek_jvp(&sol, &[1.0, -1.0]).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn partial_matches_full() {
        let sol = sparsek(&[0.9, 0.5, 0.1], kb(2.0)).unwrap();
        let part = sparsek_partial(&[0.9, 0.5, 0.1], kb(2.0), 3).unwrap();
        assert_eq!(part.solution, sol);
        assert!(!part.fallback);

        let mut rng = Rng::new(1000);
        let mut fallbacks = 0;
        for _ in 0..100 {
            let z = rng.normal_vec(1000, 1.0);
            let full = sparsek(&z, kb(16.0)).unwrap();
            let part = sparsek_partial(&z, kb(16.0), 64).unwrap();
            assert_eq!(part.solution, full);
            fallbacks += part.fallback as usize;
            let same = sparsek_partial(&z, kb(16.0), z.len()).unwrap();
            assert_eq!(same.solution, full);
        }
        // Gaussian scores with k = 16 of 1000 keep far fewer than 64 nonzeros.
        assert!(fallbacks <= 1);
    }

    #[test]
    fn partial_fallback_fires() {
        // Nearly constant scores spread the budget over many entries.
        let z: Vec<f64> = (0..200).map(|i| 1e-3 * i as f64).collect();
        let part = sparsek_partial(&z, kb(4.0), 16).unwrap();
        assert!(part.fallback);
        assert_eq!(part.solution, sparsek(&z, kb(4.0)).unwrap());
    }

    fn kkt_residual(z: &[f64], sol: &SparseKSolution) -> f64 {
        // p - z - mu + nu + tau = 0 with mu, nu >= 0 and complementarity.
        let tau = sol.tau;
        let mut worst: f64 = 0.0;
        for (j, (&zj, &pj)) in z.iter().zip(&sol.p).enumerate() {
            let mu = if pj == 0.0 { (tau - zj).max(0.0) } else { 0.0 };
            let nu = if pj == 1.0 { (zj - 1.0 - tau).max(0.0) } else { 0.0 };
            let stationarity = pj - zj - mu + nu + tau;
            worst = worst.max(stationarity.abs());
            let _ = j;
        }
        worst
    }

    proptest! {
        #[test]
        fn feasible_and_kkt(z in proptest::collection::vec(-5.0f64..5.0, 1..40), kf in 0.05f64..1.0) {
            let k = (kf * z.len() as f64).max(0.05);
            let sol = sparsek(&z, kb(k)).unwrap();
            prop_assert!((sol.p.iter().sum::<f64>() - k).abs() < 1e-9);
            prop_assert!(sol.p.iter().all(|&p| (0.0..=1.0).contains(&p)));
            prop_assert_eq!(sol.full_set.len(), sol.u_count);
            prop_assert_eq!(sol.support.len(), sol.w_count - sol.u_count);
            for (zj, pj) in z.iter().zip(&sol.p) {
                prop_assert_eq!(*pj, (zj - sol.tau).clamp(0.0, 1.0));
            }
            prop_assert!(kkt_residual(&z, &sol) < 1e-9);
        }

        #[test]
        fn shift_covariance(z in proptest::collection::vec(-3.0f64..3.0, 2..30), c in -10.0f64..10.0) {
            let k = z.len() as f64 / 3.0 + 0.1;
            let a = sparsek(&z, kb(k)).unwrap();
            let shifted: Vec<f64> = z.iter().map(|v| v + c).collect();
            let b = sparsek(&shifted, kb(k)).unwrap();
            for (x, y) in a.p.iter().zip(&b.p) {
                prop_assert!((x - y).abs() < 1e-9);
            }
        }

        #[test]
        fn idempotent_on_feasible(raw in proptest::collection::vec(0.0f64..1.0, 2..30), kf in 0.1f64..0.9) {
            let k = (kf * raw.len() as f64).max(0.1);
            let q = project_bisect(&raw, k);
            let sol = sparsek(&q, kb(k)).unwrap();
            for (x, y) in sol.p.iter().zip(&q) {
                prop_assert!((x - y).abs() < 1e-12);
            }
        }
    }
}
