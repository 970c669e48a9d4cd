//! Generation with resumable caches and bucketed passkey accuracy.

use serde_json::{Map, Value};
use sparsek_core::cache::SparseKvCache;
use sparsek_core::trainer::{make_passkey_at, passkey_accuracy, Decoder, ModelParams, ToyModelConfig};
use sparsek_core::Rng;

use crate::error::{CliError, CliResult};
use crate::formats::CacheSnapshot;

/// Tokens produced by [`generate`] and the state needed to continue.
#[derive(Debug, Clone, PartialEq)]
pub struct Generation {
    pub tokens: Vec<usize>,
    pub snapshot: CacheSnapshot,
}

/// Samples from `logits / temperature`; zero temperature is greedy.
pub fn sample_token(logits: &[f64], temperature: f64, rng: &mut Rng) -> usize {
    if temperature <= 0.0 {
        return sparsek_core::trainer::argmax(logits);
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = logits.iter().map(|l| ((l - max) / temperature).exp()).collect();
    let mut u = rng.uniform() * w.iter().sum::<f64>();
    for (i, wi) in w.iter().enumerate() {
        if u < *wi {
            return i;
        }
        u -= wi;
    }
    w.len() - 1
}

/// Feeds `prompt` (or resumes from `resume`) and samples `count` tokens.
/// The sampler for position `t` is seeded by `(seed, t)`, so splitting a run
/// across snapshots gives the same tokens.
pub fn generate(
    cfg: &ToyModelConfig,
    params: &ModelParams,
    prompt: &[usize],
    resume: Option<CacheSnapshot>,
    count: usize,
    temperature: f64,
    seed: u64,
) -> CliResult<Generation> {
    let (mut decoder, mut pending) = match resume {
        Some(snap) => {
            if snap.layers.len() != params.layers.len() {
                return Err(CliError::Usage("snapshot layer count does not match the model".into()));
            }
            let acfg = cfg.attn_config();
            let caches = snap
                .layers
                .into_iter()
                .zip(&params.layers)
                .map(|(p, l)| SparseKvCache::from_parts(&acfg, &l.attn, p))
                .collect::<Result<Vec<_>, _>>()?;
            let mut dec = Decoder::from_caches(caches);
            let mut pending = snap.pending;
            for &t in prompt {
                if let Some(p) = pending {
                    dec.step(cfg, params, p)?;
                }
                pending = Some(t);
            }
            (dec, pending)
        }
        None => {
            let (last, head) = prompt
                .split_last()
                .ok_or_else(|| CliError::Usage("generation needs a prompt or a snapshot".into()))?;
            let mut dec = Decoder::new(cfg, params)?;
            for &t in head {
                dec.step(cfg, params, t)?;
            }
            (dec, Some(*last))
        }
    };
    let mut tokens = Vec::with_capacity(count);
    for _ in 0..count {
        let token = pending.ok_or_else(|| CliError::Usage("snapshot has no pending token".into()))?;
        let logits = decoder.step(cfg, params, token)?;
        let mut rng = Rng::fork(seed, decoder.position() as u64);
        let next = sample_token(&logits, temperature, &mut rng);
        tokens.push(next);
        pending = Some(next);
    }
    Ok(Generation {
        tokens,
        snapshot: CacheSnapshot {
            pending,
            layers: decoder.caches().iter().map(SparseKvCache::parts).collect(),
        },
    })
}

/// Accuracy per distance bucket `((j - 1) w, j w]` for `j = 1..=4`, as an
/// ordered JSON object keyed `"lo-hi"`.
pub fn passkey_buckets(
    cfg: &ToyModelConfig,
    params: &ModelParams,
    window: usize,
    per_bucket: usize,
    seed: u64,
) -> CliResult<Map<String, Value>> {
    if window == 0 || per_bucket == 0 {
        return Err(CliError::Usage(
            "passkey buckets need window > 0 and at least one instance".into(),
        ));
    }
    if 4 * window + 2 > cfg.context {
        return Err(CliError::Usage(format!(
            "context {} is too short for passkeys up to distance {}",
            cfg.context,
            4 * window
        )));
    }
    let mut out = Map::new();
    for j in 1..=4u64 {
        let (lo, hi) = ((j as usize - 1) * window + 1, j as usize * window);
        let mut rng = Rng::fork(seed, j);
        let tasks = (0..per_bucket)
            .map(|_| {
                let dist = lo + rng.below(hi - lo + 1);
                make_passkey_at(&mut rng, cfg.context, dist)
            })
            .collect::<Result<Vec<_>, _>>()?;
        let acc = passkey_accuracy(cfg, params, &tasks)?;
        out.insert(format!("{lo}-{hi}"), Value::from(acc));
    }
    Ok(out)
}
