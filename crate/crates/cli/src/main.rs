//! Command-line frontend tying corpus generation, training, sampling,
//! conversation, analysis, and benchmarking into reproducible runs.
//!
//! Every artifact-producing subcommand snapshots its merged effective
//! configuration into the output directory, so a run can be reproduced
//! from the directory alone. Flags override config-file values. Exit
//! codes: 0 on success, 2 for unusable configuration, 1 for runtime
//! failures.

use std::fs;
use std::io::{BufRead, Write as IoWrite};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};

use ntpp_core::analyze::{
    delta, report, segment, write_traces_jsonl, DeltaReport, EventReport, SwapEvalOptions,
    DEFAULT_SILENCE_MS, METRIC_NAMES,
};
use ntpp_core::codec::{
    read_streams_jsonl, write_streams_jsonl, Channel, DualTokenStream, TokenId, Vocab,
    DEFAULT_FRAME_RATE_HZ,
};
use ntpp_core::mask::build_mask;
use ntpp_core::model::{ModelConfig, ModelParams};
use ntpp_core::stream::{bench_latency, generate_free, ConverseSession, SamplerSeeds, WireMessage};
use ntpp_core::synth::{generate, mix2, DialogueProfile};
use ntpp_core::train::{load_checkpoint, save_checkpoint, train, TrainOptions};

// ── Command-line surface ────────────────────────────────────────────

#[derive(Parser)]
#[command(name = "ntpp", version, about = "Dual-channel dialogue modeling toolkit")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic dialogue corpus with ground-truth event traces
    GenData(GenDataArgs),
    /// Train a model on a corpus and write a checkpoint
    Train(TrainArgs),
    /// Sample streams from a checkpoint at one or more temperatures
    Sample(SampleArgs),
    /// Converse over stdin/stdout in newline-delimited JSON frames
    Converse(ConverseArgs),
    /// Compare turn-taking statistics of samples against a reference corpus
    Analyze(AnalyzeArgs),
    /// Measure turn-taking shift when prompt channels are swapped
    SwapEval(SwapEvalArgs),
    /// Time chunked self-play rounds and report cache growth
    Bench(BenchArgs),
    /// Print the pair-wise causal visibility grid as 0/1 rows
    DumpMask(DumpMaskArgs),
}

#[derive(clap::Args)]
struct GenDataArgs {
    /// Dialogue profile JSON; built-in defaults apply when omitted
    #[arg(long)]
    profile: Option<PathBuf>,
    /// Number of streams to generate
    #[arg(long, default_value_t = 16)]
    streams: usize,
    /// Frames per stream
    #[arg(long, default_value_t = 1200)]
    frames: usize,
    /// Override the profile's master seed
    #[arg(long)]
    seed: Option<u64>,
    /// Override the profile's content vocabulary size
    #[arg(long)]
    vocab: Option<u32>,
    /// Output directory
    #[arg(long)]
    out: PathBuf,
}

#[derive(clap::Args)]
struct TrainArgs {
    /// Corpus: a directory holding streams.jsonl, or a JSONL file
    #[arg(long)]
    data: PathBuf,
    /// Model config JSON; built-in desk-scale defaults apply when omitted
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    d_model: Option<usize>,
    #[arg(long)]
    n_layers: Option<usize>,
    #[arg(long)]
    n_heads: Option<usize>,
    /// Content vocabulary size
    #[arg(long)]
    vocab: Option<u32>,
    /// Codebook depth
    #[arg(long)]
    depth: Option<usize>,
    /// Maximum pair steps per sequence
    #[arg(long)]
    max_steps: Option<usize>,
    #[arg(long)]
    rope_base: Option<f64>,
    /// Weight-initialization seed
    #[arg(long)]
    model_seed: Option<u64>,
    /// Optimizer steps
    #[arg(long)]
    steps: Option<usize>,
    /// Learning rate
    #[arg(long)]
    lr: Option<f64>,
    /// Streams per optimizer step
    #[arg(long)]
    batch: Option<usize>,
    /// Global-norm gradient clip; 0 disables clipping
    #[arg(long)]
    grad_clip: Option<f64>,
    /// Output directory
    #[arg(long)]
    out: PathBuf,
}

#[derive(clap::Args)]
struct SampleArgs {
    /// Checkpoint to sample from
    #[arg(long)]
    ckpt: PathBuf,
    /// Prompt corpus (directory or JSONL file); samples continuations
    #[arg(long)]
    prompts: Option<PathBuf>,
    /// Pair steps of each prompt stream to keep
    #[arg(long, default_value_t = 16)]
    prompt_steps: usize,
    /// Free-run streams to sample when no prompts are given
    #[arg(long, default_value_t = 8, conflicts_with = "prompts")]
    streams: usize,
    /// Pair steps to sample per stream
    #[arg(long, default_value_t = 120)]
    new_steps: usize,
    /// Sampling temperature; repeat the flag for a sweep
    #[arg(long = "temp")]
    temps: Vec<f64>,
    /// Master sampling seed; per-stream seeds are derived from it
    #[arg(long, default_value_t = 7)]
    seed: u64,
    /// Frame rate stamped on free-run streams
    #[arg(long, default_value_t = DEFAULT_FRAME_RATE_HZ)]
    frame_rate: f64,
    /// Output directory
    #[arg(long)]
    out: PathBuf,
}

#[derive(clap::Args)]
struct ConverseArgs {
    /// Checkpoint to converse with
    #[arg(long)]
    ckpt: PathBuf,
    /// Caller frames committed per reply burst
    #[arg(long, default_value_t = 5)]
    chunk: usize,
    /// Sampling temperature
    #[arg(long, default_value_t = 0.7)]
    temp: f64,
    /// Reply sampler seed
    #[arg(long, default_value_t = 7)]
    seed: u64,
    /// Reply after every frame instead of at chunk boundaries
    #[arg(long)]
    eager: bool,
}

#[derive(clap::Args)]
struct AnalyzeArgs {
    /// Sample output directory (config.json plus gen_*.jsonl)
    #[arg(long)]
    gen: PathBuf,
    /// Reference corpus: gen-data directory or a JSONL file
    #[arg(long = "ref")]
    reference: PathBuf,
    /// Silence token for references lacking a config snapshot
    #[arg(long)]
    sil: Option<TokenId>,
    /// Silence threshold in milliseconds
    #[arg(long, default_value_t = DEFAULT_SILENCE_MS)]
    silence_ms: f64,
    /// Directory for CSV artifacts; the delta table always prints to stdout
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(clap::Args)]
struct SwapEvalArgs {
    /// Checkpoint to evaluate
    #[arg(long)]
    ckpt: PathBuf,
    /// Prompt corpus (directory or JSONL file)
    #[arg(long)]
    data: PathBuf,
    /// Pair steps of each corpus stream used as the prompt
    #[arg(long, default_value_t = 40)]
    prompt_steps: usize,
    /// Pair steps sampled beyond each prompt
    #[arg(long, default_value_t = 200)]
    new_steps: usize,
    /// Sampling temperature
    #[arg(long, default_value_t = 0.7)]
    temp: f64,
    /// Base seed for the first channel's sampler
    #[arg(long, default_value_t = 17)]
    seed_a: u64,
    /// Base seed for the second channel's sampler
    #[arg(long, default_value_t = 18)]
    seed_b: u64,
    /// Silence threshold in milliseconds
    #[arg(long, default_value_t = DEFAULT_SILENCE_MS)]
    silence_ms: f64,
    /// Directory for CSV artifacts; the table always prints to stdout
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(clap::Args)]
struct BenchArgs {
    /// Checkpoint to benchmark
    #[arg(long)]
    ckpt: PathBuf,
    /// Timed self-play rounds
    #[arg(long, default_value_t = 20)]
    rounds: usize,
    /// Pair steps sampled per round
    #[arg(long, default_value_t = 5)]
    chunk: usize,
    /// Sampling temperature
    #[arg(long, default_value_t = 0.8)]
    temp: f64,
    #[arg(long, default_value_t = 3)]
    seed_a: u64,
    #[arg(long, default_value_t = 4)]
    seed_b: u64,
    /// Untimed rounds run before measurement starts
    #[arg(long, default_value_t = 2)]
    warmup: usize,
    /// Directory for CSV artifacts; the table always prints to stdout
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(clap::Args)]
struct DumpMaskArgs {
    /// Pair steps
    #[arg(long = "T")]
    steps: usize,
    /// Codebook depth
    #[arg(long = "D")]
    depth: usize,
}

// ── Failure plumbing ────────────────────────────────────────────────

/// Usage failures exit 2, runtime failures exit 1.
enum Failure {
    Usage(anyhow::Error),
    Runtime(anyhow::Error),
}

fn usage(e: impl Into<anyhow::Error>) -> Failure {
    Failure::Usage(e.into())
}

fn runtime(e: impl Into<anyhow::Error>) -> Failure {
    Failure::Runtime(e.into())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.cmd {
        Cmd::GenData(a) => run_gen_data(a),
        Cmd::Train(a) => run_train(a),
        Cmd::Sample(a) => run_sample(a),
        Cmd::Converse(a) => run_converse(a),
        Cmd::Analyze(a) => run_analyze(a),
        Cmd::SwapEval(a) => run_swap_eval(a),
        Cmd::Bench(a) => run_bench(a),
        Cmd::DumpMask(a) => run_dump_mask(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

// ── Run configuration snapshots ─────────────────────────────────────

/// Merged effective configuration of one run, written to the output
/// directory as config.json so the run can be reproduced from it.
#[derive(Serialize, Deserialize)]
#[serde(tag = "subcommand", rename_all = "kebab-case")]
enum RunConfig {
    GenData {
        profile: DialogueProfile,
        streams: usize,
        frames: usize,
    },
    Train {
        model: ModelConfig,
        train: TrainOptions,
        data: String,
    },
    Sample {
        ckpt: String,
        prompts: Option<String>,
        prompt_steps: Option<usize>,
        streams: Option<usize>,
        new_steps: usize,
        temperatures: Vec<f64>,
        seed: u64,
        vocab: Vocab,
        frame_rate_hz: f64,
        files: Vec<String>,
    },
    Analyze {
        gen: String,
        reference: String,
        sil: TokenId,
        silence_ms: f64,
    },
    SwapEval {
        ckpt: String,
        data: String,
        options: SwapEvalOptions,
    },
    Bench {
        ckpt: String,
        rounds: usize,
        chunk: usize,
        temperature: f64,
        seed_a: u64,
        seed_b: u64,
        warmup: usize,
    },
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), Failure> {
    let mut text = serde_json::to_string_pretty(value)
        .with_context(|| format!("serializing {}", path.display()))
        .map_err(runtime)?;
    text.push('\n');
    fs::write(path, text)
        .with_context(|| format!("writing {}", path.display()))
        .map_err(runtime)
}

fn make_out_dir(dir: &Path) -> Result<(), Failure> {
    fs::create_dir_all(dir)
        .with_context(|| format!("creating {}", dir.display()))
        .map_err(runtime)
}

fn read_run_config(dir: &Path) -> Result<RunConfig, Failure> {
    let path = dir.join("config.json");
    let text = fs::read_to_string(&path)
        .with_context(|| format!("reading {}", path.display()))
        .map_err(usage)?;
    serde_json::from_str(&text)
        .with_context(|| format!("parsing {}", path.display()))
        .map_err(usage)
}

/// A corpus argument names either a directory holding streams.jsonl or a
/// JSONL file directly.
fn corpus_file(path: &Path) -> PathBuf {
    if path.is_dir() {
        path.join("streams.jsonl")
    } else {
        path.to_path_buf()
    }
}

fn read_corpus(path: &Path) -> Result<Vec<DualTokenStream>, Failure> {
    let file = corpus_file(path);
    read_streams_jsonl(&file)
        .with_context(|| format!("reading corpus {}", file.display()))
        .map_err(runtime)
}

fn load_params(path: &Path) -> Result<ModelParams, Failure> {
    let (params, _) = load_checkpoint(path)
        .with_context(|| format!("loading checkpoint {}", path.display()))
        .map_err(runtime)?;
    Ok(params)
}

fn check_temperature(t: f64) -> Result<(), Failure> {
    if t.is_finite() && t >= 0.0 {
        Ok(())
    } else {
        Err(usage(anyhow!("temperature must be finite and >= 0, got {t}")))
    }
}

/// Continuation frames of `full` beyond the first `prompt_steps` steps.
fn tail_of(full: &DualTokenStream, prompt_steps: usize) -> DualTokenStream {
    let skip = prompt_steps * full.depth();
    DualTokenStream::from_flat(
        full.frame_rate_hz(),
        full.depth(),
        full.channel_flat(Channel::A)[skip..].to_vec(),
        full.channel_flat(Channel::B)[skip..].to_vec(),
    )
    .expect("tail of a valid stream is valid")
}

// ── gen-data ────────────────────────────────────────────────────────

fn run_gen_data(args: GenDataArgs) -> Result<(), Failure> {
    let mut profile = match &args.profile {
        Some(path) => {
            let text = fs::read_to_string(path)
                .with_context(|| format!("reading {}", path.display()))
                .map_err(usage)?;
            serde_json::from_str::<DialogueProfile>(&text)
                .with_context(|| format!("parsing {}", path.display()))
                .map_err(usage)?
        }
        None => DialogueProfile::default(),
    };
    if let Some(seed) = args.seed {
        profile.seed = seed;
    }
    if let Some(content) = args.vocab {
        profile.vocab = Vocab::new(content);
    }
    let (gens, stats) = generate(&profile, args.frames, args.streams).map_err(usage)?;

    make_out_dir(&args.out)?;
    let streams: Vec<DualTokenStream> = gens.iter().map(|g| g.stream.clone()).collect();
    let traces: Vec<_> = gens.iter().map(|g| g.trace.clone()).collect();
    write_streams_jsonl(&args.out.join("streams.jsonl"), &streams)
        .context("writing streams.jsonl")
        .map_err(runtime)?;
    write_traces_jsonl(&args.out.join("traces.jsonl"), &traces)
        .context("writing traces.jsonl")
        .map_err(runtime)?;
    write_json(&args.out.join("stats.json"), &stats)?;
    write_json(
        &args.out.join("config.json"),
        &RunConfig::GenData {
            profile,
            streams: args.streams,
            frames: args.frames,
        },
    )?;
    println!(
        "wrote {} streams x {} frames to {}",
        args.streams,
        args.frames,
        args.out.display()
    );
    Ok(())
}

// ── train ───────────────────────────────────────────────────────────

fn run_train(args: TrainArgs) -> Result<(), Failure> {
    let mut config = match &args.config {
        Some(path) => {
            let text = fs::read_to_string(path)
                .with_context(|| format!("reading {}", path.display()))
                .map_err(usage)?;
            serde_json::from_str::<ModelConfig>(&text)
                .with_context(|| format!("parsing {}", path.display()))
                .map_err(usage)?
        }
        None => ModelConfig::tiny(),
    };
    if let Some(v) = args.d_model {
        config.d_model = v;
    }
    if let Some(v) = args.n_layers {
        config.n_layers = v;
    }
    if let Some(v) = args.n_heads {
        config.n_heads = v;
    }
    if let Some(v) = args.vocab {
        config.vocab = Vocab::new(v);
    }
    if let Some(v) = args.depth {
        config.depth = v;
    }
    if let Some(v) = args.max_steps {
        config.max_steps = v;
    }
    if let Some(v) = args.rope_base {
        config.rope_base = v;
    }
    if let Some(v) = args.model_seed {
        config.seed = v;
    }
    config.validate().map_err(usage)?;

    let mut opts = TrainOptions::default();
    if let Some(v) = args.steps {
        opts.steps = v;
    }
    if let Some(v) = args.lr {
        opts.lr = v;
    }
    if let Some(v) = args.batch {
        opts.batch = v;
    }
    if let Some(v) = args.grad_clip {
        opts.grad_clip = if v == 0.0 { None } else { Some(v) };
    }

    let corpus = read_corpus(&args.data)?;
    let (params, report) = train(config, &corpus, &opts)
        .context("training")
        .map_err(runtime)?;

    make_out_dir(&args.out)?;
    save_checkpoint(&args.out.join("model.ckpt"), &params, &report)
        .context("writing model.ckpt")
        .map_err(runtime)?;
    let mut loss_csv = String::from("step,loss\n");
    for (i, l) in report.loss_history.iter().enumerate() {
        loss_csv.push_str(&format!("{},{l}\n", i + 1));
    }
    fs::write(args.out.join("loss.csv"), loss_csv)
        .context("writing loss.csv")
        .map_err(runtime)?;
    write_json(
        &args.out.join("config.json"),
        &RunConfig::Train {
            model: config,
            train: opts,
            data: args.data.display().to_string(),
        },
    )?;
    println!(
        "trained {} steps, final loss {:.6}, checkpoint at {}",
        report.steps_done,
        report.loss_history.last().copied().unwrap_or(f64::NAN),
        args.out.join("model.ckpt").display()
    );
    Ok(())
}

// ── sample ──────────────────────────────────────────────────────────

fn run_sample(args: SampleArgs) -> Result<(), Failure> {
    let temps = if args.temps.is_empty() {
        vec![0.7]
    } else {
        args.temps.clone()
    };
    for &t in &temps {
        check_temperature(t)?;
    }
    if args.new_steps == 0 {
        return Err(usage(anyhow!("--new-steps must be at least 1")));
    }
    let params = load_params(&args.ckpt)?;

    let prompts: Option<Vec<DualTokenStream>> = match &args.prompts {
        Some(path) => Some(
            read_corpus(path)?
                .into_iter()
                .map(|s| s.truncate_steps(args.prompt_steps))
                .collect(),
        ),
        None => None,
    };
    let per_temp = prompts.as_ref().map_or(args.streams, Vec::len);

    make_out_dir(&args.out)?;
    let mut files = Vec::with_capacity(temps.len());
    for (ti, &temp) in temps.iter().enumerate() {
        let mut sampled = Vec::with_capacity(per_temp);
        for i in 0..per_temp {
            let k = (ti * per_temp + i) as u64;
            let seeds = SamplerSeeds {
                a: mix2(args.seed, 2 * k),
                b: mix2(args.seed, 2 * k + 1),
            };
            let stream = match &prompts {
                Some(ps) => {
                    let p = &ps[i];
                    let full =
                        generate_free(&params, Some(p), args.new_steps, temp, seeds, p.frame_rate_hz())
                            .context("sampling continuation")
                            .map_err(runtime)?;
                    tail_of(&full, p.steps())
                }
                None => generate_free(&params, None, args.new_steps, temp, seeds, args.frame_rate)
                    .context("sampling free run")
                    .map_err(runtime)?,
            };
            sampled.push(stream);
        }
        let name = format!("gen_{ti}.jsonl");
        write_streams_jsonl(&args.out.join(&name), &sampled)
            .with_context(|| format!("writing {name}"))
            .map_err(runtime)?;
        files.push(name);
    }

    let frame_rate_hz = prompts
        .as_ref()
        .and_then(|ps| ps.first().map(|p| p.frame_rate_hz()))
        .unwrap_or(args.frame_rate);
    write_json(
        &args.out.join("config.json"),
        &RunConfig::Sample {
            ckpt: args.ckpt.display().to_string(),
            prompts: args.prompts.as_ref().map(|p| p.display().to_string()),
            prompt_steps: prompts.as_ref().map(|_| args.prompt_steps),
            streams: prompts.is_none().then_some(args.streams),
            new_steps: args.new_steps,
            temperatures: temps.clone(),
            seed: args.seed,
            vocab: params.config.vocab,
            frame_rate_hz,
            files,
        },
    )?;
    println!(
        "sampled {} streams x {} temperatures to {}",
        per_temp,
        temps.len(),
        args.out.display()
    );
    Ok(())
}

// ── converse ────────────────────────────────────────────────────────

fn write_replies(out: &mut impl IoWrite, replies: &[WireMessage]) -> Result<(), Failure> {
    for msg in replies {
        let line = serde_json::to_string(msg)
            .context("serializing reply")
            .map_err(runtime)?;
        writeln!(out, "{line}")
            .context("writing reply")
            .map_err(runtime)?;
    }
    out.flush().context("flushing replies").map_err(runtime)
}

fn run_converse(args: ConverseArgs) -> Result<(), Failure> {
    check_temperature(args.temp)?;
    let params = load_params(&args.ckpt)?;
    let mut session =
        ConverseSession::new(&params, args.chunk, args.temp, args.seed, args.eager).map_err(usage)?;

    let stdin = std::io::stdin();
    let stdout = std::io::stdout();
    let mut out = stdout.lock();
    let mut received = 0usize;
    for (idx, line) in stdin.lock().lines().enumerate() {
        let line = line.context("reading stdin").map_err(runtime)?;
        if line.trim().is_empty() {
            continue;
        }
        let msg: WireMessage = serde_json::from_str(&line)
            .with_context(|| format!("line {}", idx + 1))
            .map_err(runtime)?;
        if msg.ch != Channel::A {
            return Err(runtime(anyhow!(
                "line {}: expected caller channel \"a\"",
                idx + 1
            )));
        }
        if msg.t != received {
            return Err(runtime(anyhow!(
                "line {}: frame index {} out of order, expected {}",
                idx + 1,
                msg.t,
                received
            )));
        }
        received += 1;
        let replies = session
            .push_user_frame(&msg.tokens)
            .with_context(|| format!("line {}", idx + 1))
            .map_err(runtime)?;
        write_replies(&mut out, &replies)?;
    }
    let replies = session.flush().context("flushing session").map_err(runtime)?;
    write_replies(&mut out, &replies)?;
    Ok(())
}

// ── analyze ─────────────────────────────────────────────────────────

fn report_for(streams: &[DualTokenStream], sil: TokenId, silence_ms: f64) -> Result<EventReport, Failure> {
    let traces: Vec<_> = streams.iter().map(|s| segment(s, sil, silence_ms)).collect();
    report(&traces).context("aggregating reports").map_err(runtime)
}

fn delta_table(rows: &[(f64, DeltaReport)]) -> String {
    let mut csv = String::from("temperature");
    for name in METRIC_NAMES {
        csv.push(',');
        csv.push_str(name);
    }
    csv.push('\n');
    for (temp, d) in rows {
        csv.push_str(&format!("{temp}"));
        for v in d.abs {
            csv.push_str(&format!(",{v}"));
        }
        csv.push('\n');
    }
    csv
}

fn report_table(rows: &[(String, EventReport)]) -> String {
    let mut csv = String::from("source,minutes");
    for name in METRIC_NAMES {
        csv.push(',');
        csv.push_str(name);
    }
    csv.push_str(",turn_count\n");
    for (label, r) in rows {
        csv.push_str(&format!("{label},{}", r.minutes));
        for v in r.metrics() {
            csv.push_str(&format!(",{v}"));
        }
        csv.push_str(&format!(",{}\n", r.turn_count));
    }
    csv
}

fn run_analyze(args: AnalyzeArgs) -> Result<(), Failure> {
    let (temperatures, files, gen_vocab) = match read_run_config(&args.gen)? {
        RunConfig::Sample {
            temperatures,
            files,
            vocab,
            ..
        } => (temperatures, files, vocab),
        _ => {
            return Err(usage(anyhow!(
                "--gen must point at a sample output directory"
            )))
        }
    };

    let ref_sil = match args.sil {
        Some(sil) => sil,
        None if args.reference.is_dir() => match read_run_config(&args.reference)? {
            RunConfig::GenData { profile, .. } => profile.vocab.sil(),
            _ => {
                return Err(usage(anyhow!(
                    "--ref directory is not a gen-data corpus; pass --sil explicitly"
                )))
            }
        },
        None => {
            return Err(usage(anyhow!(
                "--ref is a plain file; pass --sil for its silence token"
            )))
        }
    };

    let reference = report_for(&read_corpus(&args.reference)?, ref_sil, args.silence_ms)?;
    let mut deltas = Vec::with_capacity(files.len());
    let mut reports = vec![("reference".to_string(), reference.clone())];
    for (file, &temp) in files.iter().zip(temperatures.iter()) {
        let streams = read_streams_jsonl(&args.gen.join(file))
            .with_context(|| format!("reading {file}"))
            .map_err(runtime)?;
        let rep = report_for(&streams, gen_vocab.sil(), args.silence_ms)?;
        let d = delta(&rep, &reference)
            .context("comparing against the reference")
            .map_err(runtime)?;
        reports.push((format!("temp_{temp}"), rep));
        deltas.push((temp, d));
    }

    let table = delta_table(&deltas);
    print!("{table}");
    if let Some(dir) = &args.out {
        make_out_dir(dir)?;
        fs::write(dir.join("analysis.csv"), &table)
            .context("writing analysis.csv")
            .map_err(runtime)?;
        fs::write(dir.join("reports.csv"), report_table(&reports))
            .context("writing reports.csv")
            .map_err(runtime)?;
        write_json(
            &dir.join("config.json"),
            &RunConfig::Analyze {
                gen: args.gen.display().to_string(),
                reference: args.reference.display().to_string(),
                sil: ref_sil,
                silence_ms: args.silence_ms,
            },
        )?;
    }
    Ok(())
}

// ── swap-eval ───────────────────────────────────────────────────────

fn run_swap_eval(args: SwapEvalArgs) -> Result<(), Failure> {
    check_temperature(args.temp)?;
    if args.new_steps == 0 {
        return Err(usage(anyhow!("--new-steps must be at least 1")));
    }
    let params = load_params(&args.ckpt)?;
    let corpus = read_corpus(&args.data)?;
    let options = SwapEvalOptions {
        prompt_steps: args.prompt_steps,
        new_steps: args.new_steps,
        temperature: args.temp,
        seeds: SamplerSeeds {
            a: args.seed_a,
            b: args.seed_b,
        },
        silence_ms: args.silence_ms,
    };
    let outcome = ntpp_core::analyze::swap_eval(&params, &corpus, &options)
        .context("running the swap evaluation")
        .map_err(runtime)?;

    let mut csv = String::from("metric,delta_original,delta_swapped,robustness\n");
    for (i, name) in METRIC_NAMES.iter().enumerate() {
        csv.push_str(&format!(
            "{name},{},{},{}\n",
            outcome.delta_original.abs[i], outcome.delta_swapped.abs[i], outcome.robustness.abs[i]
        ));
    }
    print!("{csv}");
    if let Some(dir) = &args.out {
        make_out_dir(dir)?;
        fs::write(dir.join("swap_eval.csv"), &csv)
            .context("writing swap_eval.csv")
            .map_err(runtime)?;
        write_json(
            &dir.join("config.json"),
            &RunConfig::SwapEval {
                ckpt: args.ckpt.display().to_string(),
                data: args.data.display().to_string(),
                options,
            },
        )?;
    }
    Ok(())
}

// ── bench ───────────────────────────────────────────────────────────

fn run_bench(args: BenchArgs) -> Result<(), Failure> {
    check_temperature(args.temp)?;
    let params = load_params(&args.ckpt)?;
    let rows = bench_latency(
        &params,
        args.rounds,
        args.chunk,
        args.temp,
        SamplerSeeds {
            a: args.seed_a,
            b: args.seed_b,
        },
        args.warmup,
    )
    .context("benchmarking")
    .map_err(runtime)?;

    let mut csv = String::from("round,latency_ms,cache_bytes\n");
    for r in &rows {
        csv.push_str(&format!("{},{},{}\n", r.round, r.latency_ms, r.cache_bytes));
    }
    print!("{csv}");
    if let Some(dir) = &args.out {
        make_out_dir(dir)?;
        fs::write(dir.join("bench.csv"), &csv)
            .context("writing bench.csv")
            .map_err(runtime)?;
        write_json(
            &dir.join("config.json"),
            &RunConfig::Bench {
                ckpt: args.ckpt.display().to_string(),
                rounds: args.rounds,
                chunk: args.chunk,
                temperature: args.temp,
                seed_a: args.seed_a,
                seed_b: args.seed_b,
                warmup: args.warmup,
            },
        )?;
    }
    Ok(())
}

// ── dump-mask ───────────────────────────────────────────────────────

fn run_dump_mask(args: DumpMaskArgs) -> Result<(), Failure> {
    if args.steps == 0 || args.depth == 0 {
        return Err(usage(anyhow!("--T and --D must be at least 1")));
    }
    let bias = build_mask(args.steps, args.depth).bias();
    let len = 2 * args.steps * args.depth;
    let mut line = String::with_capacity(2 * len);
    for i in 0..len {
        line.clear();
        for j in 0..len {
            if j > 0 {
                line.push(' ');
            }
            line.push(if bias.data()[i * len + j] == 0.0 { '1' } else { '0' });
        }
        println!("{line}");
    }
    Ok(())
}
