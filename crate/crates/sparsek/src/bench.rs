//! Wall-clock benchmarks of the operator, the streaming state and attention.

use std::io::Write;
use std::time::Instant;

use serde::Serialize;
use sparsek_core::attention::{dense_causal_attention, sparsek_attention_infer, AttnConfig, AttnParams};
use sparsek_core::cache::SparseKvCache;
use sparsek_core::{sparsek, KBudget, Rng, StreamState, Tensor2};

use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum BenchMode {
    /// Batch SparseK over `n` scores.
    Op,
    /// `n` pushes into the streaming state.
    Stream,
    /// SparseK plus sliding-window attention forward over `n` positions.
    Attn,
    /// Dense causal attention forward over `n` positions.
    Dense,
}

impl BenchMode {
    pub fn name(self) -> &'static str {
        match self {
            BenchMode::Op => "op",
            BenchMode::Stream => "stream",
            BenchMode::Attn => "attn",
            BenchMode::Dense => "dense",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchSpec {
    pub mode: BenchMode,
    pub n: usize,
    pub k: f64,
    pub window: usize,
    pub d_model: usize,
    pub heads: usize,
    pub repeats: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchRow {
    pub mode: BenchMode,
    pub n: usize,
    pub k: f64,
    pub w: usize,
    pub median_ms: f64,
    pub p10_ms: f64,
    pub p90_ms: f64,
}

pub const CSV_HEADER: &str = "mode,n,k,w,median_ms,p10_ms,p90_ms";

impl BenchRow {
    pub fn csv(&self) -> String {
        format!(
            "{},{},{},{},{:.4},{:.4},{:.4}",
            self.mode.name(),
            self.n,
            self.k,
            self.w,
            self.median_ms,
            self.p10_ms,
            self.p90_ms
        )
    }
}

/// Nearest-rank percentile of sorted samples.
pub fn percentile(sorted: &[f64], q: f64) -> f64 {
    let rank = ((q * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len());
    sorted[rank - 1]
}

fn time_ms(f: &mut dyn FnMut() -> CliResult<()>) -> CliResult<f64> {
    let t = Instant::now();
    f()?;
    Ok(t.elapsed().as_secs_f64() * 1e3)
}

type Job = Box<dyn FnMut() -> CliResult<()>>;

fn build_job(spec: &BenchSpec) -> CliResult<Job> {
    if spec.n == 0 || spec.repeats == 0 {
        return Err(CliError::Usage("bench needs n > 0 and repeats > 0".into()));
    }
    let mut rng = Rng::new(spec.seed);
    Ok(match spec.mode {
        BenchMode::Op => {
            let z = rng.normal_vec(spec.n, 1.0);
            let k = KBudget::new(spec.k)?;
            Box::new(move || {
                std::hint::black_box(sparsek(&z, k)?);
                Ok(())
            })
        }
        BenchMode::Stream => {
            let z = rng.normal_vec(spec.n, 1.0);
            let k = KBudget::new(spec.k)?;
            Box::new(move || {
                let mut s = StreamState::new(k);
                for &v in &z {
                    s.push(v)?;
                }
                std::hint::black_box(s.tau());
                Ok(())
            })
        }
        BenchMode::Attn | BenchMode::Dense => {
            let cfg = AttnConfig::new(spec.d_model, spec.heads, spec.k, spec.window);
            cfg.validate(spec.d_model)?;
            let params = AttnParams::random(spec.d_model, &mut rng);
            let x = Tensor2::randn(spec.n, spec.d_model, 1.0, &mut rng);
            let dense = spec.mode == BenchMode::Dense;
            Box::new(move || {
                if dense {
                    std::hint::black_box(dense_causal_attention(&x, &params, &cfg)?);
                } else {
                    std::hint::black_box(sparsek_attention_infer(&x, &params, &cfg)?);
                }
                Ok(())
            })
        }
    })
}

/// Times several configurations together: one warm-up run each, then
/// `repeats` rounds that run every configuration once, so drift in machine
/// speed affects all sizes alike.
pub fn run_all(specs: &[BenchSpec]) -> CliResult<Vec<BenchRow>> {
    let mut jobs = specs.iter().map(build_job).collect::<CliResult<Vec<_>>>()?;
    for job in &mut jobs {
        time_ms(job)?;
    }
    let rounds = specs.iter().map(|s| s.repeats).max().unwrap_or(0);
    let mut samples = vec![Vec::new(); specs.len()];
    for _ in 0..rounds {
        for ((job, spec), out) in jobs.iter_mut().zip(specs).zip(&mut samples) {
            if out.len() < spec.repeats {
                out.push(time_ms(job)?);
            }
        }
    }
    Ok(specs
        .iter()
        .zip(samples)
        .map(|(spec, mut t)| {
            t.sort_by(f64::total_cmp);
            BenchRow {
                mode: spec.mode,
                n: spec.n,
                k: spec.k,
                w: spec.window,
                median_ms: percentile(&t, 0.5),
                p10_ms: percentile(&t, 0.1),
                p90_ms: percentile(&t, 0.9),
            }
        })
        .collect())
}

pub fn run(spec: &BenchSpec) -> CliResult<BenchRow> {
    Ok(run_all(std::slice::from_ref(spec))?.remove(0))
}

pub fn write_csv(rows: &[BenchRow], out: &mut dyn Write) -> std::io::Result<()> {
    writeln!(out, "{CSV_HEADER}")?;
    for r in rows {
        writeln!(out, "{}", r.csv())?;
    }
    Ok(())
}

/// Per-step decoding cost early and late in a stream.
#[derive(Debug, Clone, PartialEq)]
pub struct DecodeProfile {
    /// Median milliseconds per step just after `early` steps.
    pub early_ms: f64,
    /// Median milliseconds per step just after `late` steps.
    pub late_ms: f64,
    /// Peak number of cached entries in the longer stream.
    pub peak_entries: usize,
    /// Entries held at the end of the longer stream.
    pub final_entries: usize,
}

/// Advances one cache `early` steps and another `late` steps over the same
/// random stream, then times `span` further steps of each, alternating
/// between the two so both see the same machine conditions.
pub fn decode_profile(cfg: &AttnConfig, early: usize, late: usize, span: usize, seed: u64) -> CliResult<DecodeProfile> {
    if span == 0 || early > late {
        return Err(CliError::Usage(
            "decode profile needs span > 0 and early <= late".into(),
        ));
    }
    let d = cfg.d_model();
    let mut rng = Rng::new(seed);
    let params = AttnParams::random(d, &mut rng);
    let rows: Vec<Vec<f64>> = (0..late + span).map(|_| rng.normal_vec(d, 1.0)).collect();
    let mut a = SparseKvCache::new(cfg, &params)?;
    let mut b = SparseKvCache::new(cfg, &params)?;
    for (t, row) in rows[..late].iter().enumerate() {
        if t < early {
            a.step(&params, row)?;
        }
        b.step(&params, row)?;
    }
    let mut ta = Vec::with_capacity(span);
    let mut tb = Vec::with_capacity(span);
    for i in 0..span {
        for (cache, row, times) in [(&mut a, &rows[early + i], &mut ta), (&mut b, &rows[late + i], &mut tb)] {
            let start = Instant::now();
            std::hint::black_box(cache.step(&params, row)?);
            times.push(start.elapsed().as_secs_f64() * 1e3);
        }
    }
    ta.sort_by(f64::total_cmp);
    tb.sort_by(f64::total_cmp);
    Ok(DecodeProfile {
        early_ms: percentile(&ta, 0.5),
        late_ms: percentile(&tb, 0.5),
        peak_entries: b.peak(),
        final_entries: b.len(),
    })
}
