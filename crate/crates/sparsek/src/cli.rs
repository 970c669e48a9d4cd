//! Command-line interface. Exit codes: 0 success, 1 usage, 2 numeric or
//! check failure, 3 IO.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use serde_json::{json, Map, Value};
use sparsek_core::sparsek::sparsek_partial;
use sparsek_core::trainer::tasks::PASSKEY_VOCAB;
use sparsek_core::{sparsek, KBudget, StreamState};

use crate::bench::{self, BenchMode, BenchSpec};
use crate::config::RunConfig;
use crate::error::{CliError, CliResult};
use crate::eval::{generate, passkey_buckets};
use crate::formats::{write_atomic, CacheSnapshot, Checkpoint};
use crate::gradcheck::{self, Preset};
use crate::train::{run_steps, DataSource, Trainer, METRICS_HEADER};

#[derive(Debug, Parser)]
#[command(name = "sparsek", version, about = "SparseK operator, attention and toy trainer")]
pub struct Cli {
    /// Random seed (commands that train default to the config's seed).
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads for per-sequence parallelism.
    #[arg(long, global = true, env = "SPARSEK_THREADS", default_value_t = 1)]
    pub threads: usize,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Evaluate SparseK on a score vector.
    Eval(EvalArgs),
    /// Time the operator or attention and print CSV.
    Bench(BenchArgs),
    /// Compare analytic gradients with finite differences.
    Gradcheck(GradcheckArgs),
    /// Train the toy model.
    Train(TrainArgs),
    /// Generate tokens from a checkpoint.
    Generate(GenerateArgs),
    /// Passkey retrieval accuracy by distance.
    Passkey(PasskeyArgs),
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// JSON array of scores, inline or a file path.
    #[arg(long)]
    pub scores: String,
    #[arg(long)]
    pub k: f64,
    /// Run the streaming algorithm and print one solution per prefix.
    #[arg(long)]
    pub stream: bool,
    /// Only fully sort the largest N scores.
    #[arg(long, conflicts_with = "stream")]
    pub sort_cap: Option<usize>,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[arg(long, value_enum)]
    pub mode: BenchMode,
    /// Comma-separated sizes.
    #[arg(long, value_delimiter = ',', required = true)]
    pub n: Vec<usize>,
    #[arg(long, default_value_t = 8.0)]
    pub k: f64,
    #[arg(long, default_value_t = 8)]
    pub window: usize,
    #[arg(long, default_value_t = 5)]
    pub repeats: usize,
    #[arg(long, default_value_t = 64)]
    pub d_model: usize,
    #[arg(long, default_value_t = 1)]
    pub heads: usize,
    /// Also write the CSV here.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long, value_enum, default_value = "op")]
    pub size_preset: Preset,
    /// Perturb the analytic gradients (negative control).
    #[arg(long, hide = true)]
    pub inject_fault: bool,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// JSON run configuration; defaults apply when omitted.
    #[arg(long, conflicts_with = "resume")]
    pub config: Option<PathBuf>,
    /// Text corpus for the corpus task. Documents are separated by 0x1E.
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Continue from a checkpoint.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Stop after this step instead of the configured step count.
    #[arg(long)]
    pub until: Option<u64>,
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Prompt text (byte vocabulary only).
    #[arg(long, conflicts_with = "prompt_tokens")]
    pub prompt: Option<String>,
    /// Prompt as a JSON array of token ids.
    #[arg(long)]
    pub prompt_tokens: Option<String>,
    #[arg(long, default_value_t = 100)]
    pub tokens: usize,
    /// Sampling temperature; 0 is greedy.
    #[arg(long, default_value_t = 0.0)]
    pub temperature: f64,
    /// Continue from a cache snapshot.
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PasskeyArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Bucket width; defaults to the model's window.
    #[arg(long)]
    pub window: Option<usize>,
    #[arg(long, default_value_t = 100)]
    pub per_bucket: usize,
}

/// Parses `args`, runs the command and returns the exit code.
pub fn main_with(
    args: impl IntoIterator<Item = impl Into<OsString> + Clone>,
    out: &mut dyn Write,
    err: &mut dyn Write,
) -> i32 {
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            if e.use_stderr() {
                let _ = write!(err, "{e}");
                return 1;
            }
            let _ = write!(out, "{e}");
            return 0;
        }
    };
    match run(cli, out) {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            e.exit_code()
        }
    }
}

pub fn run(cli: Cli, out: &mut dyn Write) -> CliResult<()> {
    let threads = cli.threads.max(1);
    match cli.command {
        Command::Eval(a) => cmd_eval(&a, out),
        Command::Bench(a) => cmd_bench(&a, cli.seed.unwrap_or(0), out),
        Command::Gradcheck(a) => cmd_gradcheck(&a, cli.seed.unwrap_or(0), out),
        Command::Train(a) => cmd_train(&a, cli.seed, threads, out),
        Command::Generate(a) => cmd_generate(&a, cli.seed.unwrap_or(0), out),
        Command::Passkey(a) => cmd_passkey(&a, cli.seed.unwrap_or(0), out),
    }
}

fn stdout_err(e: std::io::Error) -> CliError {
    CliError::io("<stdout>", e)
}

fn emit(out: &mut dyn Write, v: &impl Serialize) -> CliResult<()> {
    let s = serde_json::to_string(v).expect("serializable");
    writeln!(out, "{s}").map_err(stdout_err)
}

fn read_file(path: &Path) -> CliResult<Vec<u8>> {
    fs::read(path).map_err(|e| CliError::io(path, e))
}

fn parse_json<T: serde::de::DeserializeOwned>(what: &str, text: &str) -> CliResult<T> {
    serde_json::from_str(text).map_err(|e| CliError::Usage(format!("{what}: {e}")))
}

#[derive(Serialize)]
struct Solution {
    p: Vec<f64>,
    /// `null` when the budget exceeds the number of scores.
    tau: f64,
    u_count: usize,
    w_count: usize,
}

fn cmd_eval(a: &EvalArgs, out: &mut dyn Write) -> CliResult<()> {
    let text = if a.scores.trim_start().starts_with('[') {
        a.scores.clone()
    } else {
        let path = Path::new(&a.scores);
        String::from_utf8(read_file(path)?).map_err(|_| CliError::format(path, "not UTF-8"))?
    };
    let z: Vec<f64> = parse_json("--scores", &text)?;
    let k = KBudget::new(a.k)?;
    if a.stream {
        let mut s = StreamState::new(k);
        for (t, &v) in z.iter().enumerate() {
            s.push(v)?;
            let sol = s.solution()?;
            let mut p = vec![0.0; t + 1];
            for (&i, &pi) in sol.indices.iter().zip(&sol.p) {
                p[i] = pi;
            }
            emit(
                out,
                &Solution {
                    p,
                    tau: sol.tau,
                    u_count: sol.u_count,
                    w_count: sol.w_count,
                },
            )?;
        }
        return Ok(());
    }
    let sol = match a.sort_cap {
        Some(cap) => sparsek_partial(&z, k, cap)?.solution,
        None => sparsek(&z, k)?,
    };
    emit(
        out,
        &Solution {
            p: sol.p,
            tau: sol.tau,
            u_count: sol.u_count,
            w_count: sol.w_count,
        },
    )
}

fn cmd_bench(a: &BenchArgs, seed: u64, out: &mut dyn Write) -> CliResult<()> {
    let specs: Vec<BenchSpec> =
        a.n.iter()
            .map(|&n| BenchSpec {
                mode: a.mode,
                n,
                k: a.k,
                window: a.window,
                d_model: a.d_model,
                heads: a.heads,
                repeats: a.repeats,
                seed,
            })
            .collect();
    let rows = bench::run_all(&specs)?;
    bench::write_csv(&rows, out).map_err(stdout_err)?;
    if let Some(path) = &a.out {
        let mut buf = Vec::new();
        bench::write_csv(&rows, &mut buf).expect("in-memory write");
        write_atomic(path, &buf)?;
    }
    Ok(())
}

fn cmd_gradcheck(a: &GradcheckArgs, seed: u64, out: &mut dyn Write) -> CliResult<()> {
    let report = gradcheck::run(a.size_preset, seed, a.inject_fault)?;
    emit(out, &report)?;
    if !report.pass {
        return Err(CliError::Numeric(format!(
            "gradient check failed: {} of {} checks above {:e}, max relative error {:e}",
            report.failures, report.checks, report.tolerance, report.max_rel_err
        )));
    }
    Ok(())
}

fn create_dir(path: &Path) -> CliResult<()> {
    fs::create_dir_all(path).map_err(|e| CliError::io(path, e))
}

fn cmd_train(a: &TrainArgs, seed: Option<u64>, threads: usize, out: &mut dyn Write) -> CliResult<()> {
    let corpus = a.corpus.as_deref().map(read_file).transpose()?;
    let mut trainer = match &a.resume {
        Some(path) => {
            let ck = Checkpoint::load(path)?;
            if seed.is_some_and(|s| s != ck.config.seed) {
                return Err(CliError::Usage("--seed differs from the checkpoint's seed".into()));
            }
            let data = DataSource::new(&ck.config, corpus.as_deref())?;
            Trainer::from_checkpoint(ck, data, threads)?
        }
        None => {
            let mut config = match &a.config {
                Some(path) => {
                    let bytes = read_file(path)?;
                    let text = String::from_utf8(bytes).map_err(|_| CliError::format(path, "not UTF-8"))?;
                    RunConfig::from_json(&text)?
                }
                None => RunConfig::default(),
            };
            if let Some(s) = seed {
                config.seed = s;
            }
            let data = DataSource::new(&config, corpus.as_deref())?;
            Trainer::new(config, data, threads)?
        }
    };
    create_dir(&a.out)?;
    let metrics_path = a.out.join("metrics.csv");
    let append = a.resume.is_some() && metrics_path.exists();
    let mut metrics = fs::OpenOptions::new()
        .create(true)
        .append(append)
        .write(true)
        .truncate(!append)
        .open(&metrics_path)
        .map_err(|e| CliError::io(&metrics_path, e))?;
    if !append {
        writeln!(metrics, "{METRICS_HEADER}").map_err(|e| CliError::io(&metrics_path, e))?;
    }
    let ck_path = a.out.join("checkpoint.spkt");
    let until = a.until.unwrap_or(u64::MAX);
    let result = run_steps(&mut trainer, until, &mut metrics, &mut |t| {
        t.checkpoint().save(&ck_path)
    });
    if let Err(e) = result {
        if matches!(e, CliError::Numeric(_)) {
            let norms: Map<String, Value> = trainer
                .last_grad_norms()
                .iter()
                .map(|(n, v)| (n.clone(), Value::from(*v)))
                .collect();
            let dump = json!({ "step": trainer.state.step, "error": e.to_string(), "grad_norms": norms });
            let path = a.out.join("divergence.json");
            write_atomic(&path, serde_json::to_string_pretty(&dump).expect("json").as_bytes())?;
        }
        return Err(e);
    }
    trainer.checkpoint().save(&ck_path)?;
    let held_out = trainer.held_out_loss()?;
    let summary = json!({
        "step": trainer.state.step,
        "final_loss": trainer.state.loss_history.last(),
        "held_out_loss": held_out,
        "held_out_ppl": held_out.exp(),
        "params": trainer.state.params.num_params(),
    });
    write_atomic(
        &a.out.join("summary.json"),
        serde_json::to_string_pretty(&summary).expect("json").as_bytes(),
    )?;
    emit(out, &summary)
}

fn cmd_generate(a: &GenerateArgs, seed: u64, out: &mut dyn Write) -> CliResult<()> {
    let ck = Checkpoint::load(&a.checkpoint)?;
    let cfg = ck.config.model_config();
    let prompt: Vec<usize> = match (&a.prompt, &a.prompt_tokens) {
        (Some(text), _) => {
            if cfg.vocab != 256 {
                return Err(CliError::Usage(
                    "--prompt needs a byte-level model; use --prompt-tokens".into(),
                ));
            }
            text.bytes().map(usize::from).collect()
        }
        (None, Some(json)) => parse_json("--prompt-tokens", json)?,
        (None, None) => Vec::new(),
    };
    let resume = a.resume.as_deref().map(CacheSnapshot::load).transpose()?;
    let g = generate(&cfg, &ck.state.params, &prompt, resume, a.tokens, a.temperature, seed)?;
    create_dir(&a.out)?;
    g.snapshot.save(&a.out.join("cache.spkc"))?;
    let text = (cfg.vocab == 256).then(|| {
        let bytes: Vec<u8> = g.tokens.iter().map(|&t| t as u8).collect();
        String::from_utf8_lossy(&bytes).into_owned()
    });
    let doc = json!({ "prompt_tokens": prompt, "tokens": g.tokens, "text": text });
    write_atomic(
        &a.out.join("generation.json"),
        serde_json::to_string_pretty(&doc).expect("json").as_bytes(),
    )?;
    emit(out, &doc)
}

fn cmd_passkey(a: &PasskeyArgs, seed: u64, out: &mut dyn Write) -> CliResult<()> {
    let ck = Checkpoint::load(&a.checkpoint)?;
    let cfg = ck.config.model_config();
    if cfg.vocab != PASSKEY_VOCAB {
        return Err(CliError::Usage("checkpoint was not trained on the passkey task".into()));
    }
    let window = a.window.unwrap_or(cfg.window);
    let buckets = passkey_buckets(&cfg, &ck.state.params, window, a.per_bucket, seed)?;
    if let Some(dir) = &a.out {
        create_dir(dir)?;
        write_atomic(
            &dir.join("passkey.json"),
            serde_json::to_string_pretty(&buckets).expect("json").as_bytes(),
        )?;
    }
    emit(out, &buckets)
}
