//! Versioned little-endian binary files: training checkpoints (`SPKT`) and
//! decoder cache snapshots (`SPKC`). See `docs/formats.md`.

use std::fs;
use std::path::Path;

use sparsek_core::cache::{CacheParts, KvEntry};
use sparsek_core::selection::TimestepNormState;
use sparsek_core::stream::{Scored, StreamParts};
use sparsek_core::trainer::{ModelParams, TrainState};
use sparsek_core::Rng;

use crate::binio::{DecodeError, DecodeResult, Reader, Writer};
use crate::config::RunConfig;
use crate::error::{CliError, CliResult};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"SPKT";
pub const CHECKPOINT_VERSION: u16 = 1;
pub const SNAPSHOT_MAGIC: &[u8; 4] = b"SPKC";
pub const SNAPSHOT_VERSION: u16 = 1;

fn bad(msg: impl Into<String>) -> DecodeError {
    DecodeError(msg.into())
}

/// Run configuration plus the full optimizer state.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub state: TrainState,
}

fn write_params(w: &mut Writer, p: &ModelParams) {
    let views = p.views();
    w.u32(views.len() as u32);
    for v in views {
        w.f64s(v.data);
    }
}

fn read_params(r: &mut Reader, template: &ModelParams) -> DecodeResult<ModelParams> {
    let mut p = template.clone();
    let mut bufs = p.buffers_mut();
    if r.u32()? as usize != bufs.len() {
        return Err(bad("parameter buffer count does not match the configuration"));
    }
    for b in bufs.iter_mut() {
        let data = r.f64s()?;
        if data.len() != b.len() {
            return Err(bad("parameter buffer size does not match the configuration"));
        }
        b.copy_from_slice(&data);
    }
    Ok(p)
}

impl Checkpoint {
    pub fn encode(&self) -> Vec<u8> {
        let mut w = Writer::default();
        w.bytes(CHECKPOINT_MAGIC);
        w.u16(CHECKPOINT_VERSION);
        w.str(&self.config.to_json());
        w.u64(self.state.step);
        w.f64s(&self.state.loss_history);
        write_params(&mut w, &self.state.params);
        write_params(&mut w, &self.state.m);
        write_params(&mut w, &self.state.v);
        w.buf
    }

    pub fn decode(bytes: &[u8]) -> DecodeResult<Self> {
        let mut r = Reader::new(bytes);
        r.header(CHECKPOINT_MAGIC, CHECKPOINT_VERSION)?;
        let config = RunConfig::from_json(r.str()?).map_err(|e| bad(e.to_string()))?;
        let step = r.u64()?;
        let loss_history = r.f64s()?;
        let template = ModelParams::init(&config.model_config(), &mut Rng::new(0)).map_err(|e| bad(e.to_string()))?;
        let params = read_params(&mut r, &template)?;
        let m = read_params(&mut r, &template)?;
        let v = read_params(&mut r, &template)?;
        r.finish()?;
        Ok(Self {
            config,
            state: TrainState {
                params,
                m,
                v,
                step,
                loss_history,
            },
        })
    }

    pub fn save(&self, path: &Path) -> CliResult<()> {
        write_atomic(path, &self.encode())
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        let bytes = fs::read(path).map_err(|e| CliError::io(path, e))?;
        Self::decode(&bytes).map_err(|e| CliError::format(path, e.to_string()))
    }
}

/// Decoder caches of every layer plus the token to feed next.
#[derive(Debug, Clone, PartialEq)]
pub struct CacheSnapshot {
    pub pending: Option<usize>,
    pub layers: Vec<CacheParts>,
}

fn write_scored(w: &mut Writer, xs: &[Scored]) {
    w.usize(xs.len());
    for s in xs {
        w.f64(s.value);
        w.usize(s.index);
    }
}

fn read_scored(r: &mut Reader) -> DecodeResult<Vec<Scored>> {
    let n = r.count(16)?;
    (0..n)
        .map(|_| {
            Ok(Scored {
                value: r.f64()?,
                index: r.usize()?,
            })
        })
        .collect()
}

fn write_stream(w: &mut Writer, s: &StreamParts) {
    w.f64(s.k);
    write_scored(w, &s.heap_s);
    w.f64(s.sum_s);
    write_scored(w, &s.heap_f);
    w.f64(s.sum_f);
    w.f64(s.tau);
    w.usize(s.t);
    w.f64(s.max_dropped);
    match s.s_cap {
        Some(c) => {
            w.u8(1);
            w.usize(c);
        }
        None => w.u8(0),
    }
    w.f64(s.capacity_max_dropped);
    w.usize(s.evicted_total);
    w.u64(s.heap_ops);
}

fn read_stream(r: &mut Reader) -> DecodeResult<StreamParts> {
    Ok(StreamParts {
        k: r.f64()?,
        heap_s: read_scored(r)?,
        sum_s: r.f64()?,
        heap_f: read_scored(r)?,
        sum_f: r.f64()?,
        tau: r.f64()?,
        t: r.usize()?,
        max_dropped: r.f64()?,
        s_cap: if r.bool()? { Some(r.usize()?) } else { None },
        capacity_max_dropped: r.f64()?,
        evicted_total: r.usize()?,
        heap_ops: r.u64()?,
    })
}

fn write_cache(w: &mut Writer, c: &CacheParts) {
    w.usize(c.t);
    w.usize(c.pushed);
    w.u64(c.norm.count);
    w.f64(c.norm.mean);
    w.f64(c.norm.m2);
    w.f64(c.norm.eps);
    match &c.stream {
        Some(s) => {
            w.u8(1);
            write_stream(w, s);
        }
        None => w.u8(0),
    }
    write_scored(w, &c.selected);
    w.usize(c.entries.len());
    for e in &c.entries {
        w.usize(e.pos);
        w.f64(e.score);
        w.f64s(&e.key);
        w.f64s(&e.value);
        w.f64s(&e.feat);
    }
    w.f64s(&c.kv_sum);
    w.f64s(&c.z_sum);
    w.usize(c.peak);
}

fn read_cache(r: &mut Reader) -> DecodeResult<CacheParts> {
    let t = r.usize()?;
    let pushed = r.usize()?;
    let norm = TimestepNormState {
        count: r.u64()?,
        mean: r.f64()?,
        m2: r.f64()?,
        eps: r.f64()?,
    };
    let stream = if r.bool()? { Some(read_stream(r)?) } else { None };
    let selected = read_scored(r)?;
    let n = r.count(40)?;
    let entries = (0..n)
        .map(|_| {
            Ok(KvEntry {
                pos: r.usize()?,
                score: r.f64()?,
                key: r.f64s()?,
                value: r.f64s()?,
                feat: r.f64s()?,
            })
        })
        .collect::<DecodeResult<Vec<_>>>()?;
    Ok(CacheParts {
        t,
        pushed,
        norm,
        stream,
        selected,
        entries,
        kv_sum: r.f64s()?,
        z_sum: r.f64s()?,
        peak: r.usize()?,
    })
}

impl CacheSnapshot {
    pub fn encode(&self) -> Vec<u8> {
        let mut w = Writer::default();
        w.bytes(SNAPSHOT_MAGIC);
        w.u16(SNAPSHOT_VERSION);
        w.u64(self.pending.map_or(u64::MAX, |t| t as u64));
        w.u32(self.layers.len() as u32);
        for c in &self.layers {
            write_cache(&mut w, c);
        }
        w.buf
    }

    pub fn decode(bytes: &[u8]) -> DecodeResult<Self> {
        let mut r = Reader::new(bytes);
        r.header(SNAPSHOT_MAGIC, SNAPSHOT_VERSION)?;
        let pending = match r.u64()? {
            u64::MAX => None,
            t => Some(usize::try_from(t).map_err(|_| bad("pending token out of range"))?),
        };
        let n = r.u32()? as usize;
        let layers = (0..n).map(|_| read_cache(&mut r)).collect::<DecodeResult<Vec<_>>>()?;
        r.finish()?;
        Ok(Self { pending, layers })
    }

    pub fn save(&self, path: &Path) -> CliResult<()> {
        write_atomic(path, &self.encode())
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        let bytes = fs::read(path).map_err(|e| CliError::io(path, e))?;
        Self::decode(&bytes).map_err(|e| CliError::format(path, e.to_string()))
    }
}

/// Writes through a temporary sibling so a crash never leaves a torn file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> CliResult<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    fs::write(&tmp, bytes).map_err(|e| CliError::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| CliError::io(path, e))
}
