//! Finite-difference checks of the analytic gradients.

use std::slice;

use serde::Serialize;
use sparsek_core::attention::{
    attention_forward, sparsek_attention_backward, AttnConfig, AttnParams, KeyMode, LinearAttnParams,
};
use sparsek_core::selection::SelectionMode;
use sparsek_core::trainer::{cross_entropy, forward, loss_and_grads, AttnKind, ModelParams, ToyModelConfig};
use sparsek_core::{sparsek, sparsek_jvp, KBudget, Rng, Tensor2};

use crate::error::CliResult;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    /// SparseK Jacobian-vector products.
    Op,
    /// One attention layer, every input and parameter.
    Attn,
    /// Two-layer toy model, every parameter.
    Model,
}

impl Preset {
    pub fn tolerance(self) -> f64 {
        match self {
            Preset::Op | Preset::Attn => 1e-4,
            Preset::Model => 1e-3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradcheckReport {
    pub preset: Preset,
    pub seed: u64,
    pub checks: usize,
    /// Coordinates where the two finite-difference step sizes disagree, so
    /// the loss has a kink within the step.
    pub skipped: usize,
    pub failures: usize,
    pub max_rel_err: f64,
    pub tolerance: f64,
    pub pass: bool,
}

const H: f64 = 1e-5;
const FLOOR: f64 = 1e-6;

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(FLOOR)
}

struct Tally {
    tol: f64,
    /// Multiplies every analytic value; anything but 1 simulates a broken
    /// backward pass.
    fault: f64,
    checks: usize,
    skipped: usize,
    failures: usize,
    max_rel: f64,
}

impl Tally {
    fn new(tol: f64, corrupt: bool) -> Self {
        Self {
            tol,
            fault: if corrupt { 1.01 } else { 1.0 },
            checks: 0,
            skipped: 0,
            failures: 0,
            max_rel: 0.0,
        }
    }

    fn record(&mut self, rel: f64) {
        self.checks += 1;
        self.max_rel = self.max_rel.max(rel);
        if !(rel <= self.tol) {
            self.failures += 1;
        }
    }

    /// Compares `analytic` with central differences of `f(delta)`.
    fn coord(&mut self, analytic: f64, mut f: impl FnMut(f64) -> f64) {
        let a = analytic * self.fault;
        let fd = (f(H) - f(-H)) / (2.0 * H);
        let rel = rel_err(a, fd);
        if rel > self.tol {
            let fd_half = (f(H / 2.0) - f(-H / 2.0)) / H;
            if rel_err(fd, fd_half) > self.tol {
                self.skipped += 1;
                return;
            }
        }
        self.record(rel);
    }

    fn report(self, preset: Preset, seed: u64) -> GradcheckReport {
        GradcheckReport {
            preset,
            seed,
            checks: self.checks,
            skipped: self.skipped,
            failures: self.failures,
            max_rel_err: self.max_rel,
            tolerance: self.tol,
            pass: self.failures == 0 && self.checks > 0,
        }
    }
}

pub fn run(preset: Preset, seed: u64, corrupt: bool) -> CliResult<GradcheckReport> {
    let mut tally = Tally::new(preset.tolerance(), corrupt);
    let mut rng = Rng::new(seed);
    match preset {
        Preset::Op => check_op(&mut tally, &mut rng, 500)?,
        Preset::Attn => check_attn(&mut tally, &mut rng)?,
        Preset::Model => check_model(&mut tally, &mut rng)?,
    }
    Ok(tally.report(preset, seed))
}

/// Smallest distance from any `z_i - tau` to the kinks at 0 and 1.
fn breakpoint_margin(z: &[f64], tau: f64) -> f64 {
    z.iter()
        .map(|&zi| (zi - tau).abs().min((zi - tau - 1.0).abs()))
        .fold(f64::INFINITY, f64::min)
}

/// JVPs at `points` random inputs at least 1e-3 away from a breakpoint.
fn check_op(tally: &mut Tally, rng: &mut Rng, points: usize) -> CliResult<()> {
    let mut done = 0;
    while done < points {
        let m = 2 + rng.below(63);
        let k = KBudget::new(rng.uniform_range(0.5, m as f64 - 0.5))?;
        let z = rng.normal_vec(m, 1.0);
        let sol = sparsek(&z, k)?;
        if sol.infeasible || breakpoint_margin(&z, sol.tau) < 1e-3 {
            continue;
        }
        let v = rng.normal_vec(m, 1.0);
        let jvp: Vec<f64> = sparsek_jvp(&sol, &v)?.iter().map(|x| x * tally.fault).collect();
        let shifted = |s: f64| -> CliResult<Vec<f64>> {
            let zs: Vec<f64> = z.iter().zip(&v).map(|(a, b)| a + s * b).collect();
            Ok(sparsek(&zs, k)?.p)
        };
        let (plus, minus) = (shifted(H)?, shifted(-H)?);
        let fd: Vec<f64> = plus.iter().zip(&minus).map(|(a, b)| (a - b) / (2.0 * H)).collect();
        let diff: f64 = jvp.iter().zip(&fd).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
        let na = jvp.iter().map(|a| a * a).sum::<f64>().sqrt();
        let nf = fd.iter().map(|a| a * a).sum::<f64>().sqrt();
        tally.record(diff / na.max(nf).max(FLOOR));
        done += 1;
    }
    Ok(())
}

/// Every trainable buffer of an attention layer plus its input, in a fixed
/// order.
fn attn_buffers<'a>(x: &'a mut Tensor2, p: &'a mut AttnParams) -> Vec<&'a mut [f64]> {
    let mut v: Vec<&mut [f64]> = vec![
        x.data_mut(),
        p.wq.data_mut(),
        p.wk.data_mut(),
        p.wv.data_mut(),
        p.wo.data_mut(),
        &mut p.scoring.w_score,
        slice::from_mut(&mut p.scoring.gain),
        slice::from_mut(&mut p.scoring.bias),
    ];
    if let Some(lin) = &mut p.linear {
        v.extend(lin.maps.iter_mut().map(Tensor2::data_mut));
    }
    v
}

fn check_attn(tally: &mut Tally, rng: &mut Rng) -> CliResult<()> {
    let (n, d, heads) = (24, 8, 2);
    for linear in [false, true] {
        let mut cfg = AttnConfig::new(d, heads, 3.0, 2);
        cfg.key_mode = KeyMode::Soft;
        cfg.value_mode = SelectionMode::Soft;
        cfg.group_size = 5;
        cfg.linear_mix = linear;
        let mut params = AttnParams::random(d, rng);
        if linear {
            let mut lin = LinearAttnParams::identity(heads, d / heads);
            for m in &mut lin.maps {
                for v in m.data_mut() {
                    *v += 0.3 * rng.normal();
                }
            }
            params.linear = Some(lin);
        }
        let x = Tensor2::randn(n, d, 1.0, rng);
        let dy = Tensor2::randn(n, d, 1.0, rng);
        let out = attention_forward(&x, &params, &cfg, true)?;
        let g = sparsek_attention_backward(out.tape.as_ref().expect("tape"), &params, &dy, 0)?;
        let mut grads: Vec<Vec<f64>> = vec![
            g.dx.data().to_vec(),
            g.dwq.data().to_vec(),
            g.dwk.data().to_vec(),
            g.dwv.data().to_vec(),
            g.dwo.data().to_vec(),
            g.dw_score.clone(),
            vec![g.d_gain],
            vec![g.d_bias],
        ];
        grads.extend(g.d_maps.iter().map(|m| m.data().to_vec()));
        let loss = |x: &Tensor2, p: &AttnParams| -> f64 {
            let y = attention_forward(x, p, &cfg, false).expect("forward").y;
            y.data().iter().zip(dy.data()).map(|(a, b)| a * b).sum()
        };
        for (b, gb) in grads.iter().enumerate() {
            for (i, &a) in gb.iter().enumerate() {
                tally.coord(a, |delta| {
                    let mut xs = x.clone();
                    let mut ps = params.clone();
                    attn_buffers(&mut xs, &mut ps)[b][i] += delta;
                    loss(&xs, &ps)
                });
            }
        }
    }
    Ok(())
}

/// The two-layer configurations used by the model preset.
pub fn model_configs() -> Vec<ToyModelConfig> {
    [AttnKind::SparseKSw, AttnKind::SparseKLinearSw]
        .into_iter()
        .map(|kind| {
            let mut c = ToyModelConfig::new(12, 16, 2, 2, 32, kind);
            c.k = 4.0;
            c.window = 4;
            c
        })
        .collect()
}

fn check_model(tally: &mut Tally, rng: &mut Rng) -> CliResult<()> {
    for cfg in model_configs() {
        let params = ModelParams::init(&cfg, rng)?;
        let seq: Vec<usize> = (0..=cfg.context).map(|_| rng.below(cfg.vocab)).collect();
        let (tokens, targets) = (&seq[..cfg.context], &seq[1..]);
        let weights = vec![1.0; cfg.context];
        let (_, g) = loss_and_grads(&cfg, &params, tokens, targets, &weights, None)?;
        let grads: Vec<Vec<f64>> = g.views().into_iter().map(|v| v.data.to_vec()).collect();
        for (b, gb) in grads.iter().enumerate() {
            for (i, &a) in gb.iter().enumerate() {
                tally.coord(a, |delta| {
                    let mut p = params.clone();
                    p.buffers_mut()[b][i] += delta;
                    let logits = forward(&cfg, &p, tokens, false).expect("forward").logits;
                    cross_entropy(&logits, targets, &weights).expect("loss").0
                });
            }
        }
    }
    Ok(())
}
