//! A small pre-norm decoder: token plus learned position embeddings, blocks of
//! attention and a GELU MLP, final layer norm and an untied output head.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::slice;

use crate::attention::{
    attention_forward, sparsek_attention_backward, AttnConfig, AttnParams, AttnTape, KeyMode, LinearAttnParams,
};
use crate::cache::SparseKvCache;
use crate::error::{Error, Result};
use crate::numerics::{fmath, matmul, matmul_nt, matmul_tn, Rng, Tensor2};
use crate::selection::{init_mimic_attention, NormMode, ScoringParams, SelectionMode, SlopeOrder};

/// Attention variant of every layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttnKind {
    /// Dense causal attention.
    Full,
    /// Sliding window only.
    Sw,
    /// SparseK selection plus sliding window (`window = 0` gives SparseK only).
    SparseKSw,
    /// SparseK plus sliding window plus the linear-attention mixture.
    SparseKLinearSw,
}

impl AttnKind {
    pub fn name(self) -> &'static str {
        match self {
            AttnKind::Full => "full",
            AttnKind::Sw => "sw",
            AttnKind::SparseKSw => "sparsek_sw",
            AttnKind::SparseKLinearSw => "sparsek_linear_sw",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        [
            AttnKind::Full,
            AttnKind::Sw,
            AttnKind::SparseKSw,
            AttnKind::SparseKLinearSw,
        ]
        .into_iter()
        .find(|k| k.name() == s)
    }

    pub fn uses_selection(self) -> bool {
        matches!(self, AttnKind::SparseKSw | AttnKind::SparseKLinearSw)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyModelConfig {
    pub vocab: usize,
    pub d_model: usize,
    pub layers: usize,
    pub heads: usize,
    /// Maximum sequence length (size of the position table).
    pub context: usize,
    pub d_ff: usize,
    pub kind: AttnKind,
    pub k: f64,
    pub window: usize,
    pub key_mode: KeyMode,
    pub value_mode: SelectionMode,
    pub group_size: usize,
    pub slope_eps: f64,
    pub use_slope: bool,
    pub norm_mode: NormMode,
    pub slope_order: SlopeOrder,
    pub norm_eps: f64,
    /// Initialize the scoring vectors from the query/key projections.
    pub mimic_init: bool,
    pub seed: u64,
}

impl ToyModelConfig {
    pub fn new(vocab: usize, d_model: usize, layers: usize, heads: usize, context: usize, kind: AttnKind) -> Self {
        Self {
            vocab,
            d_model,
            layers,
            heads,
            context,
            d_ff: 4 * d_model,
            kind,
            k: 8.0,
            window: 8,
            key_mode: KeyMode::Hard,
            value_mode: SelectionMode::Soft,
            group_size: 128,
            slope_eps: 0.01,
            use_slope: true,
            norm_mode: NormMode::TimestepNorm,
            slope_order: SlopeOrder::NormThenSlope,
            norm_eps: 1e-5,
            mimic_init: false,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab == 0 || self.d_model == 0 || self.layers == 0 || self.context == 0 || self.d_ff == 0 {
            return Err(Error::Config(
                "vocab, d_model, layers, context and d_ff must be positive",
            ));
        }
        if self.kind.uses_selection() && !(self.k > 0.0) {
            return Err(Error::Config("selection kinds need k > 0"));
        }
        if self.kind == AttnKind::Sw && self.window == 0 {
            return Err(Error::Config("sliding-window attention needs window > 0"));
        }
        if self.kind == AttnKind::SparseKLinearSw && self.norm_mode != NormMode::TimestepNorm {
            return Err(Error::Config("the linear mixture needs timestep normalization"));
        }
        self.attn_config().validate(self.d_model)?;
        self.scoring(Vec::new()).validate()
    }

    pub fn attn_config(&self) -> AttnConfig {
        let (k, window) = match self.kind {
            AttnKind::Full => (0.0, self.context),
            AttnKind::Sw => (0.0, self.window),
            AttnKind::SparseKSw | AttnKind::SparseKLinearSw => (self.k, self.window),
        };
        let mut cfg = AttnConfig::new(self.d_model, self.heads, k, window);
        cfg.key_mode = self.key_mode;
        cfg.value_mode = self.value_mode;
        cfg.group_size = self.group_size;
        cfg.linear_mix = self.kind == AttnKind::SparseKLinearSw;
        cfg
    }

    fn scoring(&self, w: Vec<f64>) -> ScoringParams {
        let mut s = ScoringParams::new(w);
        s.slope_eps = self.slope_eps;
        s.use_slope = self.use_slope;
        s.norm_mode = self.norm_mode;
        s.slope_order = self.slope_order;
        s.norm_eps = self.norm_eps;
        s
    }

    /// Largest number of key-value pairs a query attends to.
    pub fn kv_budget(&self) -> usize {
        self.attn_config().kv_budget()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub ln1_g: Vec<f64>,
    pub ln1_b: Vec<f64>,
    pub attn: AttnParams,
    pub ln2_g: Vec<f64>,
    pub ln2_b: Vec<f64>,
    pub w1: Tensor2,
    pub b1: Vec<f64>,
    pub w2: Tensor2,
    pub b2: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub tok: Tensor2,
    pub pos: Tensor2,
    pub layers: Vec<LayerParams>,
    pub lnf_g: Vec<f64>,
    pub lnf_b: Vec<f64>,
    pub head: Tensor2,
}

/// Named view of one parameter buffer.
pub struct ParamView<'a> {
    pub name: String,
    pub data: &'a [f64],
    /// Receives weight decay.
    pub decay: bool,
}

impl ModelParams {
    pub fn init(cfg: &ToyModelConfig, rng: &mut Rng) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.d_model;
        let std = 1.0 / fmath::sqrt(d as f64);
        let acfg = cfg.attn_config();
        let mut layers = Vec::with_capacity(cfg.layers);
        for _ in 0..cfg.layers {
            let mut attn = AttnParams::random(d, rng);
            attn.wo.scale(1.0 / fmath::sqrt(2.0 * cfg.layers as f64));
            let w = if cfg.mimic_init {
                init_mimic_attention(&attn.wq, &attn.wk, rng)?.0
            } else {
                attn.scoring.w_score.clone()
            };
            attn.scoring = cfg.scoring(w);
            if acfg.linear_mix {
                attn.linear = Some(LinearAttnParams::identity(cfg.heads, acfg.head_dim));
            }
            let mut w2 = Tensor2::randn(cfg.d_ff, d, 1.0 / fmath::sqrt(cfg.d_ff as f64), rng);
            w2.scale(1.0 / fmath::sqrt(2.0 * cfg.layers as f64));
            layers.push(LayerParams {
                ln1_g: vec![1.0; d],
                ln1_b: vec![0.0; d],
                attn,
                ln2_g: vec![1.0; d],
                ln2_b: vec![0.0; d],
                w1: Tensor2::randn(d, cfg.d_ff, std, rng),
                b1: vec![0.0; cfg.d_ff],
                w2,
                b2: vec![0.0; d],
            });
        }
        Ok(Self {
            tok: Tensor2::randn(cfg.vocab, d, 0.5, rng),
            pos: Tensor2::randn(cfg.context, d, 0.1, rng),
            layers,
            lnf_g: vec![1.0; d],
            lnf_b: vec![0.0; d],
            head: Tensor2::randn(d, cfg.vocab, std, rng),
        })
    }

    /// Same shapes, all zeros (used for gradients and optimizer moments).
    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for s in z.buffers_mut() {
            s.fill(0.0);
        }
        z
    }

    /// All trainable buffers in a fixed order.
    pub fn views<'a>(&'a self) -> Vec<ParamView<'a>> {
        let mut out = Vec::new();
        let mut push = |name: String, data: &'a [f64], decay: bool| out.push(ParamView { name, data, decay });
        push(String::from("tok"), self.tok.data(), false);
        push(String::from("pos"), self.pos.data(), false);
        for (l, layer) in self.layers.iter().enumerate() {
            push(format!("layers.{l}.ln1_g"), &layer.ln1_g, false);
            push(format!("layers.{l}.ln1_b"), &layer.ln1_b, false);
            push(format!("layers.{l}.wq"), layer.attn.wq.data(), true);
            push(format!("layers.{l}.wk"), layer.attn.wk.data(), true);
            push(format!("layers.{l}.wv"), layer.attn.wv.data(), true);
            push(format!("layers.{l}.wo"), layer.attn.wo.data(), true);
            push(format!("layers.{l}.w_score"), &layer.attn.scoring.w_score, false);
            push(
                format!("layers.{l}.score_gain"),
                slice::from_ref(&layer.attn.scoring.gain),
                false,
            );
            push(
                format!("layers.{l}.score_bias"),
                slice::from_ref(&layer.attn.scoring.bias),
                false,
            );
            if let Some(lin) = &layer.attn.linear {
                for (h, m) in lin.maps.iter().enumerate() {
                    push(format!("layers.{l}.phi.{h}"), m.data(), false);
                }
            }
            push(format!("layers.{l}.ln2_g"), &layer.ln2_g, false);
            push(format!("layers.{l}.ln2_b"), &layer.ln2_b, false);
            push(format!("layers.{l}.w1"), layer.w1.data(), true);
            push(format!("layers.{l}.b1"), &layer.b1, false);
            push(format!("layers.{l}.w2"), layer.w2.data(), true);
            push(format!("layers.{l}.b2"), &layer.b2, false);
        }
        push(String::from("lnf_g"), &self.lnf_g, false);
        push(String::from("lnf_b"), &self.lnf_b, false);
        push(String::from("head"), self.head.data(), true);
        out
    }

    /// Mutable buffers in the same order as [`ModelParams::views`].
    pub fn buffers_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = Vec::new();
        out.push(self.tok.data_mut());
        out.push(self.pos.data_mut());
        for layer in &mut self.layers {
            out.push(&mut layer.ln1_g);
            out.push(&mut layer.ln1_b);
            out.push(layer.attn.wq.data_mut());
            out.push(layer.attn.wk.data_mut());
            out.push(layer.attn.wv.data_mut());
            out.push(layer.attn.wo.data_mut());
            out.push(&mut layer.attn.scoring.w_score);
            out.push(slice::from_mut(&mut layer.attn.scoring.gain));
            out.push(slice::from_mut(&mut layer.attn.scoring.bias));
            if let Some(lin) = &mut layer.attn.linear {
                for m in &mut lin.maps {
                    out.push(m.data_mut());
                }
            }
            out.push(&mut layer.ln2_g);
            out.push(&mut layer.ln2_b);
            out.push(layer.w1.data_mut());
            out.push(&mut layer.b1);
            out.push(layer.w2.data_mut());
            out.push(&mut layer.b2);
        }
        out.push(&mut self.lnf_g);
        out.push(&mut self.lnf_b);
        out.push(self.head.data_mut());
        out
    }

    pub fn num_params(&self) -> usize {
        self.views().iter().map(|v| v.data.len()).sum()
    }

    /// `self += alpha * other` (same shapes).
    pub fn add_scaled(&mut self, alpha: f64, other: &ModelParams) {
        let src = other.views();
        for (dst, s) in self.buffers_mut().into_iter().zip(src) {
            for (a, b) in dst.iter_mut().zip(s.data) {
                *a += alpha * b;
            }
        }
    }

    pub fn sq_norm(&self) -> f64 {
        self.views().iter().flat_map(|v| v.data.iter()).map(|x| x * x).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.views().iter().all(|v| v.data.iter().all(|x| x.is_finite()))
    }
}

const LN_EPS: f64 = 1e-5;

/// Normalized rows and reciprocal standard deviations.
#[derive(Debug, Clone)]
pub struct LnCache {
    xhat: Tensor2,
    inv: Vec<f64>,
}

fn ln_row(x: &[f64], g: &[f64], b: &[f64], xhat: &mut [f64], y: &mut [f64]) -> f64 {
    let d = x.len() as f64;
    let mean = x.iter().sum::<f64>() / d;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
    let inv = 1.0 / fmath::sqrt(var + LN_EPS);
    for c in 0..x.len() {
        xhat[c] = (x[c] - mean) * inv;
        y[c] = g[c] * xhat[c] + b[c];
    }
    inv
}

fn layer_norm(x: &Tensor2, g: &[f64], b: &[f64]) -> (Tensor2, LnCache) {
    let (n, d) = x.shape();
    let mut y = Tensor2::zeros(n, d);
    let mut xhat = Tensor2::zeros(n, d);
    let mut inv = vec![0.0; n];
    for i in 0..n {
        inv[i] = ln_row(x.row(i), g, b, xhat.row_mut(i), y.row_mut(i));
    }
    (y, LnCache { xhat, inv })
}

/// Returns `dx` and accumulates `dg`, `db`.
fn layer_norm_backward(cache: &LnCache, g: &[f64], dy: &Tensor2, dg: &mut [f64], db: &mut [f64]) -> Tensor2 {
    let (n, d) = dy.shape();
    let mut dx = Tensor2::zeros(n, d);
    let mut dxhat = vec![0.0; d];
    for i in 0..n {
        let dyr = dy.row(i);
        let xh = cache.xhat.row(i);
        for c in 0..d {
            dg[c] += dyr[c] * xh[c];
            db[c] += dyr[c];
            dxhat[c] = dyr[c] * g[c];
        }
        let m1 = dxhat.iter().sum::<f64>() / d as f64;
        let m2 = dxhat.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / d as f64;
        for (c, out) in dx.row_mut(i).iter_mut().enumerate() {
            *out = cache.inv[i] * (dxhat[c] - m1 - xh[c] * m2);
        }
    }
    dx
}

const GELU_C: f64 = 0.797_884_560_802_865_4;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + fmath::tanh(GELU_C * (x + 0.044715 * x * x * x)))
}

fn gelu_grad(x: f64) -> f64 {
    let t = fmath::tanh(GELU_C * (x + 0.044715 * x * x * x));
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

fn add_bias(x: &mut Tensor2, b: &[f64]) {
    for i in 0..x.rows() {
        for (v, bb) in x.row_mut(i).iter_mut().zip(b) {
            *v += bb;
        }
    }
}

fn col_sums(x: &Tensor2, out: &mut [f64]) {
    for i in 0..x.rows() {
        for (o, v) in out.iter_mut().zip(x.row(i)) {
            *o += v;
        }
    }
}

struct LayerTape {
    ln1: LnCache,
    attn: AttnTape,
    ln2: LnCache,
    b: Tensor2,
    pre: Tensor2,
    act: Tensor2,
}

/// Saved activations of a forward pass.
pub struct ModelTape {
    tokens: Vec<usize>,
    layers: Vec<LayerTape>,
    lnf: LnCache,
    f: Tensor2,
}

pub struct Forward {
    pub logits: Tensor2,
    pub tape: Option<ModelTape>,
}

fn check_tokens(cfg: &ToyModelConfig, tokens: &[usize]) -> Result<()> {
    if tokens.is_empty() {
        return Err(Error::InvalidArgument("empty token sequence"));
    }
    if tokens.len() > cfg.context {
        return Err(Error::InvalidArgument("sequence longer than the context"));
    }
    if tokens.iter().any(|&t| t >= cfg.vocab) {
        return Err(Error::InvalidArgument("token outside the vocabulary"));
    }
    Ok(())
}

fn mlp_row_block(layer: &LayerParams, b: &Tensor2) -> Result<(Tensor2, Tensor2, Tensor2)> {
    let mut pre = matmul(b, &layer.w1)?;
    add_bias(&mut pre, &layer.b1);
    let mut act = pre.clone();
    for v in act.data_mut() {
        *v = gelu(*v);
    }
    let mut m = matmul(&act, &layer.w2)?;
    add_bias(&mut m, &layer.b2);
    Ok((pre, act, m))
}

pub fn forward(cfg: &ToyModelConfig, params: &ModelParams, tokens: &[usize], keep_tape: bool) -> Result<Forward> {
    check_tokens(cfg, tokens)?;
    let acfg = cfg.attn_config();
    let n = tokens.len();
    let d = cfg.d_model;
    let mut h = Tensor2::zeros(n, d);
    for (i, &t) in tokens.iter().enumerate() {
        for ((o, a), b) in h.row_mut(i).iter_mut().zip(params.tok.row(t)).zip(params.pos.row(i)) {
            *o = a + b;
        }
    }
    let mut layers = Vec::new();
    for layer in &params.layers {
        let (a, ln1) = layer_norm(&h, &layer.ln1_g, &layer.ln1_b);
        let out = attention_forward(&a, &layer.attn, &acfg, keep_tape)?;
        h.add_assign(&out.y)?;
        let (b, ln2) = layer_norm(&h, &layer.ln2_g, &layer.ln2_b);
        let (pre, act, m) = mlp_row_block(layer, &b)?;
        h.add_assign(&m)?;
        if let Some(attn) = out.tape {
            layers.push(LayerTape {
                ln1,
                attn,
                ln2,
                b,
                pre,
                act,
            });
        }
    }
    let (f, lnf) = layer_norm(&h, &params.lnf_g, &params.lnf_b);
    let logits = matmul(&f, &params.head)?;
    if !logits.is_finite() {
        return Err(Error::NonFinite("logits"));
    }
    let tape = keep_tape.then(|| ModelTape {
        tokens: tokens.to_vec(),
        layers,
        lnf,
        f,
    });
    Ok(Forward { logits, tape })
}

/// Log-softmax of one row.
pub fn log_softmax(row: &[f64]) -> Vec<f64> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + fmath::ln(row.iter().map(|v| fmath::exp(v - max)).sum::<f64>());
    row.iter().map(|v| v - lse).collect()
}

/// Weighted mean cross-entropy and its gradient w.r.t. the logits.
pub fn cross_entropy(logits: &Tensor2, targets: &[usize], weights: &[f64]) -> Result<(f64, Tensor2)> {
    let n = logits.rows();
    if targets.len() != n || weights.len() != n {
        return Err(Error::Shape {
            op: "cross_entropy",
            expected: (n, 1),
            found: (targets.len(), weights.len()),
        });
    }
    let total: f64 = weights.iter().sum();
    if !(total > 0.0) {
        return Err(Error::InvalidArgument("no weighted targets"));
    }
    let mut loss = 0.0;
    let mut grad = Tensor2::zeros(n, logits.cols());
    for i in 0..n {
        if weights[i] == 0.0 {
            continue;
        }
        if targets[i] >= logits.cols() {
            return Err(Error::InvalidArgument("target outside the vocabulary"));
        }
        let lp = log_softmax(logits.row(i));
        loss -= weights[i] * lp[targets[i]];
        let scale = weights[i] / total;
        for (g, l) in grad.row_mut(i).iter_mut().zip(&lp) {
            *g = scale * fmath::exp(*l);
        }
        grad.row_mut(i)[targets[i]] -= scale;
    }
    Ok((loss / total, grad))
}

/// Backward pass from logit gradients. Positions before `floor` are treated
/// as constants in every attention layer.
pub fn backward(params: &ModelParams, tape: &ModelTape, dlogits: &Tensor2, floor: usize) -> Result<ModelParams> {
    let mut g = params.zeros_like();
    g.head = matmul_tn(&tape.f, dlogits)?;
    let df = matmul_nt(dlogits, &params.head)?;
    let mut dh = layer_norm_backward(&tape.lnf, &params.lnf_g, &df, &mut g.lnf_g, &mut g.lnf_b);
    for (l, lt) in tape.layers.iter().enumerate().rev() {
        let layer = &params.layers[l];
        let gl = &mut g.layers[l];
        // MLP branch.
        col_sums(&dh, &mut gl.b2);
        gl.w2 = matmul_tn(&lt.act, &dh)?;
        let mut dpre = matmul_nt(&dh, &layer.w2)?;
        for (dv, &p) in dpre.data_mut().iter_mut().zip(lt.pre.data()) {
            *dv *= gelu_grad(p);
        }
        col_sums(&dpre, &mut gl.b1);
        gl.w1 = matmul_tn(&lt.b, &dpre)?;
        let db = matmul_nt(&dpre, &layer.w1)?;
        dh.add_assign(&layer_norm_backward(
            &lt.ln2,
            &layer.ln2_g,
            &db,
            &mut gl.ln2_g,
            &mut gl.ln2_b,
        ))?;
        // Attention branch.
        let ag = sparsek_attention_backward(&lt.attn, &layer.attn, &dh, floor)?;
        gl.attn.wq = ag.dwq;
        gl.attn.wk = ag.dwk;
        gl.attn.wv = ag.dwv;
        gl.attn.wo = ag.dwo;
        gl.attn.scoring.w_score = ag.dw_score;
        gl.attn.scoring.gain = ag.d_gain;
        gl.attn.scoring.bias = ag.d_bias;
        if let Some(lin) = &mut gl.attn.linear {
            lin.maps = ag.d_maps;
        }
        dh.add_assign(&layer_norm_backward(
            &lt.ln1,
            &layer.ln1_g,
            &ag.dx,
            &mut gl.ln1_g,
            &mut gl.ln1_b,
        ))?;
    }
    for (i, &t) in tape.tokens.iter().enumerate().skip(floor) {
        let row = dh.row(i);
        for (a, b) in g.tok.row_mut(t).iter_mut().zip(row) {
            *a += b;
        }
        for (a, b) in g.pos.row_mut(i).iter_mut().zip(row) {
            *a += b;
        }
    }
    Ok(g)
}

/// Loss and gradients for one sequence. With `chunk_len`, the loss of each
/// chunk is backpropagated with earlier positions held constant and the
/// chunk gradients are summed.
pub fn loss_and_grads(
    cfg: &ToyModelConfig,
    params: &ModelParams,
    tokens: &[usize],
    targets: &[usize],
    weights: &[f64],
    chunk_len: Option<usize>,
) -> Result<(f64, ModelParams)> {
    let fwd = forward(cfg, params, tokens, true)?;
    let (loss, dlogits) = cross_entropy(&fwd.logits, targets, weights)?;
    if !loss.is_finite() {
        return Err(Error::NonFinite("training loss"));
    }
    let tape = fwd.tape.expect("tape requested");
    let n = tokens.len();
    let grads = match chunk_len {
        None => backward(params, &tape, &dlogits, 0)?,
        Some(0) => return Err(Error::InvalidArgument("chunk_len must be positive")),
        Some(c) => {
            let mut total = params.zeros_like();
            let mut start = 0;
            while start < n {
                let end = (start + c).min(n);
                let mut dl = Tensor2::zeros(n, dlogits.cols());
                for i in start..end {
                    dl.row_mut(i).copy_from_slice(dlogits.row(i));
                }
                total.add_scaled(1.0, &backward(params, &tape, &dl, start)?);
                start = end;
            }
            total
        }
    };
    Ok((loss, grads))
}

/// Summed negative log-likelihood and number of scored targets.
pub fn sequence_nll(
    cfg: &ToyModelConfig,
    params: &ModelParams,
    tokens: &[usize],
    targets: &[usize],
) -> Result<(f64, usize)> {
    let fwd = forward(cfg, params, tokens, false)?;
    let mut nll = 0.0;
    for (i, &t) in targets.iter().enumerate() {
        nll -= log_softmax(fwd.logits.row(i))[t];
    }
    Ok((nll, targets.len()))
}

/// Incremental decoder: one [`SparseKvCache`] per layer, constant memory per
/// step once the selection is full.
#[derive(Debug, Clone)]
pub struct Decoder {
    caches: Vec<SparseKvCache>,
}

impl Decoder {
    pub fn new(cfg: &ToyModelConfig, params: &ModelParams) -> Result<Self> {
        cfg.validate()?;
        let acfg = cfg.attn_config();
        let caches = params
            .layers
            .iter()
            .map(|l| SparseKvCache::new(&acfg, &l.attn))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { caches })
    }

    pub fn from_caches(caches: Vec<SparseKvCache>) -> Self {
        Self { caches }
    }

    pub fn caches(&self) -> &[SparseKvCache] {
        &self.caches
    }

    pub fn position(&self) -> usize {
        self.caches.first().map_or(0, SparseKvCache::position)
    }

    /// Feeds `token` and returns the logits for the next position.
    pub fn step(&mut self, cfg: &ToyModelConfig, params: &ModelParams, token: usize) -> Result<Vec<f64>> {
        let t = self.position();
        if t >= cfg.context {
            return Err(Error::InvalidArgument("decoding past the position table"));
        }
        if token >= cfg.vocab {
            return Err(Error::InvalidArgument("token outside the vocabulary"));
        }
        let d = cfg.d_model;
        let mut h = Tensor2::zeros(1, d);
        for ((o, a), b) in h
            .row_mut(0)
            .iter_mut()
            .zip(params.tok.row(token))
            .zip(params.pos.row(t))
        {
            *o = a + b;
        }
        for (layer, cache) in params.layers.iter().zip(&mut self.caches) {
            let (a, _) = layer_norm(&h, &layer.ln1_g, &layer.ln1_b);
            let y = cache.step(&layer.attn, a.row(0))?;
            h.add_assign(&Tensor2::from_vec(1, d, y)?)?;
            let (b, _) = layer_norm(&h, &layer.ln2_g, &layer.ln2_b);
            let (_, _, m) = mlp_row_block(layer, &b)?;
            h.add_assign(&m)?;
        }
        let (f, _) = layer_norm(&h, &params.lnf_g, &params.lnf_b);
        Ok(matmul(&f, &params.head)?.into_vec())
    }

    /// Largest number of cached entries in any layer.
    pub fn peak_entries(&self) -> usize {
        self.caches.iter().map(SparseKvCache::peak).max().unwrap_or(0)
    }
}

/// Index of the largest logit (first on ties).
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}
