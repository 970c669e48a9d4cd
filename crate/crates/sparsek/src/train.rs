//! Training driver: deterministic batches, parallel per-sample gradients with
//! an ordered reduction, metrics and divergence diagnostics.

use std::io::Write;
use std::time::Instant;

use rayon::prelude::*;
use sparsek_core::trainer::{
    cross_entropy, eval_ppl, forward, grad_norms, loss_and_grads, make_passkey_at, Corpus, ModelParams, RecallTask,
    Sample, StepStats, ToyModelConfig, TrainHyper, TrainState,
};
use sparsek_core::Rng;

use crate::config::{RunConfig, TaskKind};
use crate::error::{CliError, CliResult};
use crate::formats::Checkpoint;

/// Stream id reserved for held-out synthetic samples.
const HELD_OUT_STREAM: u64 = u64::MAX;
const HELD_OUT_SAMPLES: usize = 64;

/// Source of training and held-out sequences.
#[derive(Debug, Clone)]
pub enum DataSource {
    Corpus { train: Corpus, held_out: Corpus },
    Recall(RecallTask),
    Passkey { min_distance: usize, answer_weight: f64 },
    Repeating(Corpus),
}

impl DataSource {
    /// `corpus` holds the bytes of `--corpus`, needed only by the corpus task.
    pub fn new(cfg: &RunConfig, corpus: Option<&[u8]>) -> CliResult<Self> {
        let context = cfg.model.context;
        Ok(match cfg.task.kind {
            TaskKind::Corpus => {
                let bytes = corpus.ok_or_else(|| CliError::Usage("the corpus task needs --corpus".into()))?;
                let (train, held_out) = Corpus::from_bytes(bytes).split(cfg.task.held_out);
                if !train.docs().iter().any(|d| d.len() > context) {
                    return Err(CliError::Usage(format!(
                        "corpus has no training document longer than the context ({context} bytes)"
                    )));
                }
                DataSource::Corpus { train, held_out }
            }
            TaskKind::Recall => {
                let task = RecallTask {
                    context,
                    queries: cfg.task.recall_queries,
                };
                task.sample(&mut Rng::new(0))?;
                DataSource::Recall(task)
            }
            TaskKind::Passkey => {
                if context < 3 || cfg.task.passkey_min_distance + 2 > context || cfg.task.passkey_min_distance == 0 {
                    return Err(CliError::Usage("passkey distances do not fit the context".into()));
                }
                DataSource::Passkey {
                    min_distance: cfg.task.passkey_min_distance,
                    answer_weight: cfg.task.passkey_answer_weight,
                }
            }
            TaskKind::Repeating => {
                let symbols = cfg.task.repeating_symbols;
                DataSource::Repeating(Corpus::repeating(symbols, (4 * context).max(symbols) + 1))
            }
        })
    }

    fn draw(&self, rng: &mut Rng, context: usize) -> CliResult<Sample> {
        Ok(match self {
            DataSource::Corpus { train, .. } => train.sample(rng, context)?,
            DataSource::Recall(task) => task.sample(rng)?,
            DataSource::Passkey {
                min_distance,
                answer_weight,
            } => {
                let distance = min_distance + rng.below(context - 1 - min_distance);
                let inst = make_passkey_at(rng, context, distance)?;
                let mut s = inst.sample();
                s.weights[inst.answer_pos] = *answer_weight;
                s
            }
            DataSource::Repeating(c) => c.sample(rng, context)?,
        })
    }

    /// The batch for `step`, a pure function of `(seed, step)`.
    pub fn batch(&self, seed: u64, step: u64, size: usize, context: usize) -> CliResult<Vec<Sample>> {
        let mut rng = Rng::fork(seed, step);
        (0..size).map(|_| self.draw(&mut rng, context)).collect()
    }

    /// Mean next-token loss on held-out data: the held-out corpus split for
    /// text, a fixed set of fresh instances for synthetic tasks.
    pub fn held_out_loss(&self, cfg: &ToyModelConfig, params: &ModelParams, seed: u64) -> CliResult<f64> {
        match self {
            DataSource::Corpus { held_out, .. } => Ok(eval_ppl(cfg, params, held_out)?.ln()),
            DataSource::Repeating(c) => Ok(eval_ppl(cfg, params, c)?.ln()),
            _ => {
                let mut rng = Rng::fork(seed, HELD_OUT_STREAM);
                let mut total = 0.0;
                for _ in 0..HELD_OUT_SAMPLES {
                    let s = self.draw(&mut rng, cfg.context)?;
                    let logits = forward(cfg, params, &s.tokens, false)?.logits;
                    total += cross_entropy(&logits, &s.targets, &s.weights)?.0;
                }
                Ok(total / HELD_OUT_SAMPLES as f64)
            }
        }
    }
}

/// Resolves `--threads`: 0 means one thread.
pub fn thread_pool(threads: usize) -> CliResult<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads.max(1))
        .build()
        .map_err(|e| CliError::Usage(format!("thread pool: {e}")))
}

pub struct Trainer {
    pub config: RunConfig,
    pub model: ToyModelConfig,
    pub hyper: TrainHyper,
    pub data: DataSource,
    pub state: TrainState,
    pool: rayon::ThreadPool,
    last_norms: Vec<(String, f64)>,
}

impl Trainer {
    pub fn new(config: RunConfig, data: DataSource, threads: usize) -> CliResult<Self> {
        config.validate()?;
        let model = config.model_config();
        let params = ModelParams::init(&model, &mut Rng::new(config.seed))?;
        Self::with_state(config, data, TrainState::new(params), threads)
    }

    pub fn from_checkpoint(ck: Checkpoint, data: DataSource, threads: usize) -> CliResult<Self> {
        Self::with_state(ck.config, data, ck.state, threads)
    }

    fn with_state(config: RunConfig, data: DataSource, state: TrainState, threads: usize) -> CliResult<Self> {
        Ok(Self {
            model: config.model_config(),
            hyper: config.hyper(),
            data,
            state,
            pool: thread_pool(threads)?,
            last_norms: Vec::new(),
            config,
        })
    }

    pub fn done(&self) -> bool {
        self.state.step >= self.hyper.steps
    }

    /// Per-buffer gradient norms of the most recent step.
    pub fn last_grad_norms(&self) -> &[(String, f64)] {
        &self.last_norms
    }

    /// Mean loss and gradient of a batch. Samples run in parallel; the sum is
    /// taken in sample order, so the result does not depend on the thread
    /// count.
    pub fn batch_grads(&self, batch: &[Sample]) -> CliResult<(f64, ModelParams)> {
        let params = &self.state.params;
        let chunk = self.hyper.chunk_len;
        let per_sample: Vec<_> = self.pool.install(|| {
            batch
                .par_iter()
                .map(|s| loss_and_grads(&self.model, params, &s.tokens, &s.targets, &s.weights, chunk))
                .collect()
        });
        let mut total = params.zeros_like();
        let mut loss = 0.0;
        for r in per_sample {
            let (l, g) = r?;
            loss += l;
            total.add_scaled(1.0, &g);
        }
        let inv = 1.0 / batch.len() as f64;
        for b in total.buffers_mut() {
            for g in b.iter_mut() {
                *g *= inv;
            }
        }
        Ok((loss * inv, total))
    }

    /// One optimizer step. On divergence the error names the step and
    /// [`last_grad_norms`](Self::last_grad_norms) holds the diagnostics.
    pub fn step(&mut self) -> CliResult<StepStats> {
        let step = self.state.step;
        let batch = self
            .data
            .batch(self.config.seed, step, self.hyper.batch_size, self.model.context)?;
        let diverged = |e| CliError::Numeric(format!("training diverged at step {step}: {e}"));
        let (loss, grads) = self.batch_grads(&batch).map_err(|e| match e {
            CliError::Numeric(m) => diverged(m),
            e => e,
        })?;
        self.last_norms = grad_norms(&grads);
        self.state
            .apply(&self.hyper, grads, loss)
            .map_err(|e| diverged(e.to_string()))
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config: self.config.clone(),
            state: self.state.clone(),
        }
    }

    pub fn held_out_loss(&self) -> CliResult<f64> {
        self.data
            .held_out_loss(&self.model, &self.state.params, self.config.seed)
    }
}

pub const METRICS_HEADER: &str = "step,loss,lr,wall_ms";

/// Runs until `until` (or the configured step count), writing one metrics
/// row per step. `on_checkpoint` is called at every `checkpoint_every`.
pub fn run_steps(
    trainer: &mut Trainer,
    until: u64,
    metrics: &mut dyn Write,
    on_checkpoint: &mut dyn FnMut(&Trainer) -> CliResult<()>,
) -> CliResult<()> {
    let start = Instant::now();
    let until = until.min(trainer.hyper.steps);
    while trainer.state.step < until {
        let stats = trainer.step()?;
        let ms = start.elapsed().as_secs_f64() * 1e3;
        writeln!(
            metrics,
            "{},{},{},{:.3}",
            trainer.state.step - 1,
            stats.loss,
            stats.lr,
            ms
        )
        .map_err(|e| CliError::io("metrics.csv", e))?;
        if let Some(every) = trainer.config.train.checkpoint_every {
            if trainer.state.step.is_multiple_of(every) {
                on_checkpoint(trainer)?;
            }
        }
    }
    Ok(())
}
