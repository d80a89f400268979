use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use tsgm::config::RunConfig;
use tsgm::gridsim::{
    build_graph_along, evaluate, generate_world, random_walk, EvalReport, Heading, OracleAgent, Pose, RandomAgent, Suite, Tier, World,
};
use tsgm::io;
use tsgm::mixer::Ablation;
use tsgm::model::{TsgmAgent, TsgmModel};
use tsgm::policy::{Action, SampleMode};
use tsgm::training::train;
use tsgm::{Result, TsgmError};

#[derive(Parser)]
#[command(name = "tsgm", version, about = "Topological semantic graph memory for image-goal navigation")]
struct Cli {
    /// TOML run configuration; missing keys take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides one configuration key, e.g. `--set train.bc_epochs=10`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    /// Shorthand for `--set seed=N`.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Shorthand for `--set eval.threads=N`; 0 uses every core.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Builds a graph along a recorded or random trajectory and writes it as JSON.
    BuildGraph(BuildGraphArgs),
    /// Behaviour cloning followed by PPO finetuning.
    Train(TrainArgs),
    /// Success and SPL of a checkpoint (or a reference agent) on an episode set.
    Eval(EvalArgs),
    /// Dumps checkpoint tensors as JSON.
    ExportParams(ExportArgs),
    /// Writes one generated world as JSON.
    GenWorld(OutArgs),
    /// Writes an episode set (worlds plus episodes.jsonl) into a directory.
    GenEpisodes(GenEpisodesArgs),
}

#[derive(Args)]
struct OutArgs {
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct BuildGraphArgs {
    #[arg(long)]
    out: PathBuf,
    /// World JSON; generated from the seed when absent.
    #[arg(long)]
    world: Option<PathBuf>,
    /// JSON array of actions (`forward`, `turn_left`, `turn_right`).
    #[arg(long, conflicts_with = "random_steps")]
    actions: Option<PathBuf>,
    /// Length of a seeded random walk.
    #[arg(long, default_value_t = 0)]
    random_steps: usize,
}

#[derive(Args)]
struct TrainArgs {
    /// Output directory; defaults to `out_dir` from the configuration.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Trains the given mixer variant.
    #[arg(long)]
    ablate: Option<Ablation>,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum AgentKind {
    Model,
    Oracle,
    Random,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum TierArg {
    Easy,
    Medium,
    Hard,
    All,
}

impl TierArg {
    fn tier(self) -> Option<Tier> {
        match self {
            TierArg::Easy => Some(Tier::Easy),
            TierArg::Medium => Some(Tier::Medium),
            TierArg::Hard => Some(Tier::Hard),
            TierArg::All => None,
        }
    }
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "model")]
    agent: AgentKind,
    /// Directory written by `gen-episodes`; the validation suite of the configuration when absent.
    #[arg(long)]
    episodes: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "all")]
    tier: TierArg,
    /// Evaluates the checkpoint with a different mixer variant.
    #[arg(long)]
    ablate: Option<Ablation>,
    /// Records per-step attention weights in the report.
    #[arg(long)]
    log_attention: bool,
    /// Takes the most likely action instead of sampling; same as `--set eval.greedy=true`.
    #[arg(long)]
    greedy: bool,
    /// JSON report path.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ExportArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Split {
    Train,
    Val,
}

#[derive(Args)]
struct GenEpisodesArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value = "val")]
    split: Split,
    #[arg(long, value_enum, default_value = "all")]
    tier: TierArg,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let mut overrides = cli.overrides.clone();
    if let Some(seed) = cli.seed {
        overrides.push(format!("seed={seed}"));
    }
    if let Some(t) = cli.threads {
        overrides.push(format!("eval.threads={t}"));
    }
    RunConfig::load(cli.config.as_deref(), &overrides)
}

fn config_json(cfg: &RunConfig) -> serde_json::Value {
    serde_json::to_value(cfg).expect("run config always serializes")
}

fn run(cli: Cli) -> Result<()> {
    let cfg = load_config(&cli)?;
    if cfg.eval.threads > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.eval.threads)
            .build_global()
            .map_err(|e| TsgmError::invalid(format!("thread pool: {e}")))?;
    }
    match &cli.command {
        Command::BuildGraph(args) => build_graph(&cfg, args),
        Command::Train(args) => train_cmd(cfg, args),
        Command::Eval(args) => eval_cmd(&cfg, args),
        Command::ExportParams(args) => export_params(args),
        Command::GenWorld(args) => {
            let world = generate_world(cfg.seed, &cfg.world, &cfg.encoder)?;
            io::save_world(&args.out, &world, &cfg.encoder)
        }
        Command::GenEpisodes(args) => gen_episodes(&cfg, args),
    }
}

fn build_graph(cfg: &RunConfig, args: &BuildGraphArgs) -> Result<()> {
    let world = match &args.world {
        Some(p) => io::load_world(p)?,
        None => generate_world(cfg.seed, &cfg.world, &cfg.encoder)?,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let cells = world.free_cells();
    let (x, y) = cells[rng.random_range(0..cells.len())];
    let start = Pose { x, y, heading: Heading::North };
    let actions: Vec<Action> = match &args.actions {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| TsgmError::io(p, e))?;
            serde_json::from_str(&text).map_err(|e| TsgmError::validation(p.display().to_string(), e.to_string()))?
        }
        None => random_walk(args.random_steps, &mut rng),
    };
    let (graph, _) = build_graph_along(&world, start, &actions, cfg.seed)?;
    let meta = io::GraphMeta {
        seed: cfg.seed,
        config: config_json(cfg),
    };
    io::save_graph(&args.out, &graph, meta)?;
    println!("{} image nodes, {} object nodes -> {}", graph.num_images(), graph.num_objects(), args.out.display());
    Ok(())
}

fn train_cmd(mut cfg: RunConfig, args: &TrainArgs) -> Result<()> {
    if let Some(a) = args.ablate {
        cfg.model.ablation = a;
    }
    let out = args.out.clone().unwrap_or_else(|| cfg.out_dir.clone());
    std::fs::create_dir_all(out.join("checkpoints")).map_err(|e| TsgmError::io(&out, e))?;
    std::fs::write(out.join("config.toml"), cfg.to_toml_string()).map_err(|e| TsgmError::io(out.join("config.toml"), e))?;
    let (train_suite, val_suite) = cfg.suites()?;
    let mut model = TsgmModel::new(&cfg.model, &cfg.encoder, cfg.world.categories, cfg.seed)?;
    let eval = cfg.eval.settings();
    let echo = config_json(&cfg);
    let mut written = Vec::new();
    let records = train(&mut model, &train_suite, &val_suite, &cfg.train, &eval, cfg.seed, |model, rec| {
        let path = out.join("checkpoints").join(format!("epoch-{:04}.ckpt", rec.epoch));
        let info = io::CheckpointInfo {
            epoch: rec.epoch,
            phase: rec.phase,
            seed: cfg.seed,
        };
        io::save_checkpoint(&path, model, info, echo.clone())?;
        written.push(rec.clone());
        io::save_metrics_csv(&out.join("metrics.csv"), &written)?;
        let loss = rec.loss.map_or_else(|| "-".to_string(), |l| format!("{l:.4}"));
        match &rec.eval {
            Some(m) => println!("epoch {:>4} {:<4} loss {loss} success {:.3} spl {:.3}", rec.epoch, rec.phase, m.success, m.spl),
            None => println!("epoch {:>4} {:<4} loss {loss}", rec.epoch, rec.phase),
        }
        Ok(())
    })?;
    let last = records.last().expect("the trainer always emits the initial epoch");
    let info = io::CheckpointInfo {
        epoch: last.epoch,
        phase: last.phase,
        seed: cfg.seed,
    };
    io::save_checkpoint(&out.join("final.ckpt"), &model, info, echo)?;
    println!("wrote {}", out.display());
    Ok(())
}

fn load_suite(dir: &Path) -> Result<Suite> {
    let episodes = io::load_episodes(&dir.join("episodes.jsonl"))?;
    let count = episodes.iter().map(|e| e.world + 1).max().unwrap_or(0);
    let worlds = (0..count)
        .map(|i| io::load_world(&dir.join("worlds").join(format!("world-{i}.json"))))
        .collect::<Result<Vec<World>>>()?;
    Ok(Suite { worlds, episodes })
}

fn gen_episodes(cfg: &RunConfig, args: &GenEpisodesArgs) -> Result<()> {
    let (train, val) = cfg.suites()?;
    let suite = match args.split {
        Split::Train => train,
        Split::Val => val,
    }
    .filter_tier(args.tier.tier());
    for (i, w) in suite.worlds.iter().enumerate() {
        io::save_world(&args.out.join("worlds").join(format!("world-{i}.json")), w, &cfg.encoder)?;
    }
    io::save_episodes(&args.out.join("episodes.jsonl"), &suite.episodes)?;
    println!("{} episodes in {} worlds -> {}", suite.episodes.len(), suite.worlds.len(), args.out.display());
    Ok(())
}

fn eval_cmd(cfg: &RunConfig, args: &EvalArgs) -> Result<()> {
    let suite = match &args.episodes {
        Some(dir) => load_suite(dir)?,
        None => cfg.suites()?.1,
    }
    .filter_tier(args.tier.tier());
    let (max_steps, seed) = (cfg.eval.max_steps, cfg.eval.seed);
    let report: EvalReport = match args.agent {
        AgentKind::Oracle => evaluate(&OracleAgent::default(), &suite, max_steps, seed, false)?,
        AgentKind::Random => evaluate(&RandomAgent::new(seed), &suite, max_steps, seed, false)?,
        AgentKind::Model => {
            let path = args
                .checkpoint
                .as_ref()
                .ok_or_else(|| TsgmError::invalid("--checkpoint is required for the model agent"))?;
            // the checkpoint carries its own architecture; the configuration only picks the episodes
            let (model, _) = io::load_checkpoint(path)?;
            let mode = if args.greedy { SampleMode::Greedy } else { cfg.eval.settings().mode };
            let ablation = args.ablate.unwrap_or(model.config.ablation);
            let agent = TsgmAgent::new(Arc::new(model), mode, seed)
                .with_ablation(ablation)
                .with_attention_log(args.log_attention);
            evaluate(&agent, &suite, max_steps, seed, args.log_attention)?
        }
    };
    let m = &report.metrics;
    println!("episodes {} success {:.4} spl {:.4}", m.episodes, m.success, m.spl);
    for (tier, t) in &m.per_tier {
        println!("  {tier:<6} episodes {:>4} success {:.4} spl {:.4}", t.episodes, t.success, t.spl);
    }
    if let Some(out) = &args.out {
        let doc = json!({
            "seed": cfg.seed,
            "config": config_json(cfg),
            "metrics": m,
            "records": report.records,
        });
        io::save_json(out, &doc)?;
    }
    Ok(())
}

fn export_params(args: &ExportArgs) -> Result<()> {
    let (manifest, tensors) = io::read_checkpoint(&args.checkpoint)?;
    let params: serde_json::Map<String, serde_json::Value> = manifest
        .tensors
        .iter()
        .zip(&tensors)
        .map(|(entry, m)| {
            let value = json!({ "shape": [entry.rows, entry.cols], "data": m.data() });
            (entry.name.clone(), value)
        })
        .collect();
    let doc = json!({
        "epoch": manifest.epoch,
        "phase": manifest.phase,
        "seed": manifest.seed,
        "model": manifest.model,
        "encoder": manifest.encoder,
        "num_categories": manifest.num_categories,
        "config": manifest.config,
        "params": params,
    });
    io::save_json(&args.out, &doc)
}
