//! `intent-reward`: data generation, training, evaluation and serving.

use std::io::{BufRead, Read};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use serde_json::json;

use intent_reward::eval::{build_pairs_up_to, evaluate, pairwise_eval, raw_gap_probe, EvalConfig, EvalReport, PairKind};
use intent_reward::model::{load_checkpoint, ModelDims, ModelParams};
use intent_reward::rerank::wire::{serve_stream, serve_tcp, Service};
use intent_reward::rerank::{BehaviorStats, RerankDecision, DEFAULT_SIGMA};
use intent_reward::store::{l2_norm, load_dataset, save_dataset, split_by_task, DatasetSplit, Trajectory, DEFAULT_SPLIT_RATIOS};
use intent_reward::synthetic::{Suite, SuiteConfig};
use intent_reward::trainer::{StageConfig, StageData, StageRunner};

const SPLIT_FILE: &str = "split.json";
const MANIFEST_FILE: &str = "manifest.json";

#[derive(Parser)]
#[command(name = "intent-reward", version, about = "Plan-aware reward model for GUI agent actions")]
struct Cli {
    /// Seed for every random choice; overrides the seed in a --config file.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Print errors to stderr as one JSON object.
    #[arg(long, global = true)]
    json_errors: bool,
    /// Log progress to stderr (repeat for more detail).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum DimsChoice {
    /// Full-size network; needs 768-d text and 1152-d vision embeddings.
    Full,
    /// Small network sized from the data's embedding widths.
    Desk,
}

#[derive(Clone, Copy, ValueEnum)]
enum Part {
    Train,
    Val,
    Test,
}

#[derive(Clone, Copy, ValueEnum)]
enum Kind {
    Hard,
    Real,
    All,
}

#[derive(clap::Args)]
struct TrainArgs {
    /// Stage configuration JSON; stage defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dataset directory (trajectories.jsonl + embeddings.iseb, optional split.json).
    #[arg(long)]
    data: PathBuf,
    /// Output directory for checkpoints and the epoch log.
    #[arg(long)]
    out: PathBuf,
    /// Checkpoint to start from.
    #[arg(long)]
    init: Option<PathBuf>,
    /// Network size for a fresh init.
    #[arg(long, value_enum, default_value = "desk")]
    dims: DimsChoice,
}

#[derive(clap::Args)]
struct DataArgs {
    #[arg(long, env = "INTENT_REWARD_CKPT")]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum, default_value = "test")]
    split: Part,
    /// Restrict to these OS tags / worlds (repeatable).
    #[arg(long)]
    world: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic worlds as a dataset directory.
    GenSynthetic {
        #[arg(long)]
        out: PathBuf,
        /// Multiplier on every world's task count.
        #[arg(long, default_value_t = 1.0)]
        scale: f64,
    },
    /// Load a dataset and report its embedding shapes, norms and chain warnings.
    EmbedCheck {
        #[arg(long)]
        data: PathBuf,
    },
    /// Stage 1: train from scratch (or --init) on the configured worlds.
    Pretrain(TrainArgs),
    /// Stage 2: continue from --init with the finetune defaults.
    Finetune(TrainArgs),
    /// Pairwise accuracy on held-out pairs; prints CSV for --kind all.
    Eval {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long, default_value_t = 2000)]
        pairs: usize,
        #[arg(long, value_enum, default_value = "all")]
        kind: Kind,
        /// Also write the report as CSV here.
        #[arg(long)]
        csv: Option<PathBuf>,
        /// Also write the report as JSON here.
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// Mean raw cosine of each step with its own action, by label.
    ProbeGap {
        #[command(flatten)]
        data: DataArgs,
    },
    /// Re-rank one request read from --request or stdin.
    Score {
        #[arg(long, env = "INTENT_REWARD_CKPT")]
        ckpt: PathBuf,
        #[arg(long)]
        request: Option<PathBuf>,
        #[arg(long, default_value_t = DEFAULT_SIGMA)]
        sigma: f64,
    },
    /// Answer newline-delimited JSON requests over TCP or stdin/stdout.
    Serve {
        #[arg(long, env = "INTENT_REWARD_CKPT")]
        ckpt: PathBuf,
        /// Address to listen on, e.g. 127.0.0.1:7878.
        #[arg(long, conflicts_with = "stdio")]
        listen: Option<String>,
        #[arg(long)]
        stdio: bool,
        #[arg(long, default_value_t = DEFAULT_SIGMA)]
        sigma: f64,
        /// Stop after this many TCP connections.
        #[arg(long)]
        max_connections: Option<usize>,
    },
    /// Aggregate decision responses (NDJSON from --decisions or stdin).
    Stats {
        #[arg(long)]
        decisions: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    env_logger::Builder::new().filter_level(level).init();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            if cli.json_errors {
                let chain: Vec<String> = e.chain().skip(1).map(|c| c.to_string()).collect();
                eprintln!("{}", json!({ "error": { "message": e.to_string(), "causes": chain } }));
            } else {
                eprintln!("error: {e:#}");
            }
            ExitCode::from(1)
        }
    }
}

fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::GenSynthetic { out, scale } => gen_synthetic(out, *scale, cli.seed.unwrap_or(0)),
        Command::EmbedCheck { data } => embed_check(data),
        Command::Pretrain(args) => train(args, StageConfig::pretrain(), cli.seed),
        Command::Finetune(args) => {
            if args.init.is_none() {
                bail!("finetune needs --init");
            }
            train(args, StageConfig::finetune(), cli.seed)
        }
        Command::Eval { data, pairs, kind, csv, json } => eval(data, *pairs, *kind, csv.as_deref(), json.as_deref(), cli.seed.unwrap_or(0)),
        Command::ProbeGap { data } => probe_gap(data, cli.seed.unwrap_or(0)),
        Command::Score { ckpt, request, sigma } => score(ckpt, request.as_deref(), *sigma),
        Command::Serve { ckpt, listen, stdio, sigma, max_connections } => serve(ckpt, listen.as_deref(), *stdio, *sigma, *max_connections),
        Command::Stats { decisions } => stats(decisions.as_deref()),
    }
}

fn gen_synthetic(out: &Path, scale: f64, seed: u64) -> Result<()> {
    if !(scale > 0.0) {
        bail!("--scale must be positive");
    }
    let suite = Suite::generate(SuiteConfig::standard(seed).scaled(scale))?;
    save_dataset(out, &suite.trajectories)?;
    suite.split.write(&out.join(SPLIT_FILE))?;
    let manifest = suite.manifest();
    std::fs::write(out.join(MANIFEST_FILE), serde_json::to_string_pretty(&manifest)?)?;
    println!("{}", json!({ "tasks": suite.trajectories.len(), "splits": manifest.split_sizes, "out": out }));
    Ok(())
}

fn load(data: &Path, seed: u64) -> Result<(Vec<Trajectory>, DatasetSplit)> {
    let loaded = load_dataset(data).with_context(|| format!("loading {}", data.display()))?;
    for w in &loaded.warnings {
        log::warn!("{}: screenshot chain breaks at {:?}", w.task_id, w.step_indices);
    }
    let split_path = data.join(SPLIT_FILE);
    let split = if split_path.exists() { DatasetSplit::read(&split_path)? } else { split_by_task(&loaded.trajectories, DEFAULT_SPLIT_RATIOS, seed)? };
    Ok((loaded.trajectories, split))
}

/// `(text, vision)` embedding widths of the first step.
fn data_dims(trajectories: &[Trajectory]) -> Result<(usize, usize)> {
    let step = trajectories.iter().flat_map(|t| &t.steps).next().context("dataset has no steps")?;
    let text = [&step.action, &step.code, &step.observation, &step.instruction, &step.thought, &step.reflection]
        .iter()
        .find_map(|f| f.emb().map(<[f32]>::len))
        .context("first step has no text embeddings")?;
    Ok((text, step.screenshot_before.len()))
}

fn embed_check(data: &Path) -> Result<()> {
    let loaded = load_dataset(data)?;
    let (text, vision) = data_dims(&loaded.trajectories)?;
    let mut vectors = 0usize;
    let mut variants = 0usize;
    let mut worst = 0.0f32;
    for step in loaded.trajectories.iter().flat_map(|t| &t.steps) {
        let fields = [&step.observation, &step.action, &step.code, &step.thought, &step.reflection, &step.instruction];
        let base = fields.iter().filter_map(|f| f.emb());
        let extra = fields.iter().flat_map(|f| f.variants.iter().map(Vec::as_slice));
        variants += fields.iter().map(|f| f.variants.len()).sum::<usize>();
        for v in base.chain(extra).chain([step.screenshot_before.as_slice()]) {
            worst = worst.max((l2_norm(v) - 1.0).abs());
            vectors += 1;
        }
    }
    let report = json!({
        "trajectories": loaded.trajectories.len(),
        "steps": loaded.trajectories.iter().map(Trajectory::len).sum::<usize>(),
        "text_dim": text,
        "vision_dim": vision,
        "vectors": vectors,
        "variants": variants,
        "max_norm_error": worst,
        "chain_warnings": loaded.warnings.len(),
    });
    println!("{report}");
    Ok(())
}

fn train(args: &TrainArgs, defaults: StageConfig, seed: Option<u64>) -> Result<()> {
    let mut config = match &args.config {
        Some(path) => StageConfig::read(path)?,
        None => defaults,
    };
    if let Some(seed) = seed {
        config.seed = seed;
    }
    let (trajectories, split) = load(&args.data, config.seed)?;
    let init = match &args.init {
        Some(path) => load_checkpoint(path)?.0,
        None => {
            let (text, vision) = data_dims(&trajectories)?;
            let dims = match args.dims {
                DimsChoice::Full => ModelDims::full(),
                DimsChoice::Desk => ModelDims::desk().with_text_vision(text, vision),
            };
            if (dims.text, dims.vision) != (text, vision) {
                bail!("data has {text}-d text and {vision}-d vision embeddings; --dims full expects {}/{}", dims.text, dims.vision);
            }
            ModelParams::<f32>::seeded(dims, config.seed)
        }
    };
    let data = StageData::from_split(&trajectories, &split, &config.dataset_filter);
    let mut runner = StageRunner { out_dir: Some(args.out.clone()), hook: None };
    let result = runner.run(&config, &data, init)?;
    std::fs::write(args.out.join(format!("{}.config.json", config.name.as_str())), serde_json::to_string_pretty(&config)?)?;
    println!(
        "{}",
        json!({
            "stage": config.name.as_str(),
            "best_epoch": result.best_epoch,
            "best_score": result.best_score,
            "epochs_run": result.log.records.len(),
            "checkpoint": args.out.join(format!("{}-best.iscr", config.name.as_str())),
        })
    );
    Ok(())
}

fn eval_tasks<'a>(trajectories: &'a [Trajectory], split: &DatasetSplit, part: Part, worlds: &[String]) -> Vec<&'a Trajectory> {
    let set = match part {
        Part::Train => &split.train,
        Part::Val => &split.val,
        Part::Test => &split.test,
    };
    trajectories
        .iter()
        .filter(|t| set.contains(&t.task_id))
        .filter(|t| worlds.is_empty() || worlds.iter().any(|w| w == t.os_tag.as_str()))
        .collect()
}

fn eval(args: &DataArgs, pairs: usize, kind: Kind, csv: Option<&Path>, json_out: Option<&Path>, seed: u64) -> Result<()> {
    let (params, _) = load_checkpoint(&args.ckpt)?;
    let (trajectories, split) = load(&args.data, seed)?;
    let tasks = eval_tasks(&trajectories, &split, args.split, &args.world);
    match kind {
        Kind::Hard | Kind::Real => {
            let (pk, name, salt) = match kind {
                Kind::Hard => (PairKind::HardAdjacent, "hard", 0),
                _ => (PairKind::RealIncorrect, "real_inc", 1),
            };
            // same pair draw as the full report
            let set = build_pairs_up_to(&tasks, pk, pairs, seed ^ salt);
            let acc = pairwise_eval(&params, &set)?;
            println!("{name} accuracy {acc:.4} over {} pairs", set.len());
        }
        Kind::All => {
            let report = evaluate(&params, &tasks, &EvalConfig { n_pairs: pairs, seed, ..EvalConfig::default() })?;
            println!("{}\n{}", EvalReport::CSV_HEADER, report.csv_row());
            if csv.is_some() || json_out.is_some() {
                let default_json = args.ckpt.with_extension("eval.json");
                report.write(json_out.unwrap_or(&default_json), csv)?;
            }
        }
    }
    Ok(())
}

fn probe_gap(args: &DataArgs, seed: u64) -> Result<()> {
    let (params, _) = load_checkpoint(&args.ckpt)?;
    let (trajectories, split) = load(&args.data, seed)?;
    let tasks = eval_tasks(&trajectories, &split, args.split, &args.world);
    println!("{}", serde_json::to_string(&raw_gap_probe(&params, &tasks)?)?);
    Ok(())
}

fn score(ckpt: &Path, request: Option<&Path>, sigma: f64) -> Result<()> {
    let (params, _) = load_checkpoint(ckpt)?;
    let text = match request {
        Some(path) => std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?,
        None => {
            let mut s = String::new();
            std::io::stdin().read_to_string(&mut s)?;
            s
        }
    };
    let service = Service::new(params, sigma);
    let line: String = text.lines().collect::<Vec<_>>().join(" ");
    let response = service.handle(&line);
    println!("{response}");
    if let Some(err) = response.get("error") {
        bail!("request rejected: {}", err["message"].as_str().unwrap_or("unknown"));
    }
    Ok(())
}

fn serve(ckpt: &Path, listen: Option<&str>, stdio: bool, sigma: f64, max_connections: Option<usize>) -> Result<()> {
    let (params, _) = load_checkpoint(ckpt)?;
    let service = Arc::new(Service::new(params, sigma));
    match (listen, stdio) {
        (Some(addr), _) => {
            let listener = std::net::TcpListener::bind(addr).with_context(|| format!("binding {addr}"))?;
            log::info!("listening on {}", listener.local_addr()?);
            serve_tcp(service, listener, max_connections)?;
        }
        (None, true) => {
            serve_stream(&service, std::io::stdin().lock(), std::io::stdout().lock())?;
        }
        (None, false) => bail!("give --listen ADDR or --stdio"),
    }
    Ok(())
}

fn stats(decisions: Option<&Path>) -> Result<()> {
    let reader: Box<dyn BufRead> = match decisions {
        Some(path) => Box::new(std::io::BufReader::new(std::fs::File::open(path).with_context(|| format!("opening {}", path.display()))?)),
        None => Box::new(std::io::stdin().lock()),
    };
    let mut stats = BehaviorStats::default();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let value: serde_json::Value = serde_json::from_str(&line).with_context(|| format!("line {}", i + 1))?;
        if value.get("error").is_some() {
            continue;
        }
        let decision: RerankDecision = serde_json::from_value(value).with_context(|| format!("line {} is not a decision", i + 1))?;
        stats.record(&decision);
    }
    println!("{}", serde_json::to_string(&stats)?);
    Ok(())
}
