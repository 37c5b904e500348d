//! Subcommand definitions and handlers.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use moenav::ablation::{build_grid, render_table, run_grid, Axis};
use moenav::discretize::{snap_batch, ContinuousTrajectory, DEFAULT_ENDPOINT_THRESHOLD_M};
use moenav::envgraph::{generate_episode, generate_world, Episode, EpisodeRecord, Granularity, NavGraph};
use moenav::gradsuite::{run_suite, Scope};
use moenav::metrics::{MetricConfig, MetricsReport};
use moenav::numcore::gradcheck::DEFAULT_TOLERANCE;
use moenav::policy::{Policy, PolicyCheckpoint, PolicyConfig};
use moenav::trainer::{evaluate, evaluate_random_walk, train, Algorithm, BatchMode, EvalReport, EvalSet, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::io::{
    load_world, manifest_path, read_json, read_jsonl, to_json_pretty, to_jsonl, write_bytes, CliError, ManifestBuilder,
};

#[derive(Debug, Parser)]
#[command(name = "moenav", version, about = "Mixture-of-experts navigation agents on synthetic graph worlds")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a random world.
    GenWorld(GenWorldArgs),
    /// Sample episodes on one or more worlds.
    GenEpisodes(GenEpisodesArgs),
    /// Snap continuous trajectories onto a world graph.
    Discretize(DiscretizeArgs),
    /// Train a policy.
    Train(TrainArgs),
    /// Evaluate a checkpoint or the random-walk baseline.
    Eval(EvalArgs),
    /// Sweep one configuration axis with shared seeds.
    Ablate(AblateArgs),
    /// Finite-difference gradient checks.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Args)]
pub struct GenWorldArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 40)]
    nodes: usize,
    #[arg(long, default_value_t = 4.0)]
    degree: f64,
    #[arg(long, default_value_t = 5)]
    landmarks: usize,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    manifest: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum GranArg {
    All,
    Fine,
    Coarse,
    Zero,
}

#[derive(Debug, Args)]
pub struct GenEpisodesArgs {
    #[arg(long = "world", required = true, num_args = 1..)]
    worlds: Vec<PathBuf>,
    /// Episodes per world and granularity.
    #[arg(long, default_value_t = 10)]
    count: usize,
    #[arg(long, value_enum, default_value_t = GranArg::All)]
    granularity: GranArg,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    manifest: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct DiscretizeArgs {
    #[arg(long)]
    world: PathBuf,
    /// JSON lines of `{source_id, points}`.
    #[arg(long)]
    traj: PathBuf,
    #[arg(long, default_value_t = DEFAULT_ENDPOINT_THRESHOLD_M)]
    threshold: f64,
    #[arg(long)]
    out: PathBuf,
    /// Defaults to `<out>.stats.json`.
    #[arg(long)]
    stats: Option<PathBuf>,
    #[arg(long)]
    manifest: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum AlgArg {
    Imitation,
    Dagger,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum BatchArg {
    Sequential,
    Mixed,
}

/// Flags shared by `train` and `ablate` that override the config file.
#[derive(Debug, Args)]
struct TrainOverrides {
    /// JSON document `{"policy": {...}, "train": {...}}`; missing fields take defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Balance-loss weight (default 0.8).
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long, value_enum)]
    algorithm: Option<AlgArg>,
    #[arg(long, value_enum)]
    batch_mode: Option<BatchArg>,
    #[arg(long)]
    updates: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    overrides: TrainOverrides,
    #[arg(long, required = true, num_args = 1..)]
    worlds: Vec<PathBuf>,
    #[arg(long)]
    out_checkpoint: PathBuf,
    #[arg(long)]
    log: PathBuf,
    /// Held-out episodes for periodic evaluation snapshots.
    #[arg(long, requires = "eval_worlds")]
    eval_episodes: Option<PathBuf>,
    #[arg(long, num_args = 1..)]
    eval_worlds: Vec<PathBuf>,
    #[arg(long)]
    eval_every: Option<usize>,
    /// Keep only update and eval lines in the log.
    #[arg(long)]
    no_step_log: bool,
    #[arg(long)]
    manifest: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long, required_unless_present = "random_walk", conflicts_with = "random_walk")]
    checkpoint: Option<PathBuf>,
    /// Evaluate the uniform random-walk baseline instead of a checkpoint.
    #[arg(long)]
    random_walk: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 15)]
    max_steps: usize,
    #[arg(long)]
    episodes: PathBuf,
    #[arg(long, required = true, num_args = 1..)]
    worlds: Vec<PathBuf>,
    #[arg(long)]
    out_report: PathBuf,
    #[arg(long)]
    manifest: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    /// routing, placement, lambda or nk.
    #[arg(long)]
    axis: String,
    /// Comma-separated grid values; defaults to the axis's standard grid.
    #[arg(long)]
    grid: Option<String>,
    #[command(flatten)]
    overrides: TrainOverrides,
    #[arg(long, required = true, num_args = 1..)]
    worlds: Vec<PathBuf>,
    #[arg(long, required = true, num_args = 1..)]
    eval_worlds: Vec<PathBuf>,
    #[arg(long)]
    episodes: PathBuf,
    /// JSON table; the aligned-text table goes to `<out>.txt`.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    manifest: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ScopeArg {
    Layer,
    Policy,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long, value_enum, default_value_t = ScopeArg::Layer)]
    scope: ScopeArg,
    #[arg(long, default_value_t = 10)]
    trials: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    manifest: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub policy: PolicyConfig,
    pub train: TrainConfig,
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::GenWorld(a) => gen_world(a),
        Command::GenEpisodes(a) => gen_episodes(a),
        Command::Discretize(a) => discretize(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Ablate(a) => ablate(a),
        Command::Gradcheck(a) => gradcheck(a),
    }
}

fn config_value<T: Serialize>(v: &T) -> serde_json::Value {
    serde_json::to_value(v).expect("configs serialize")
}

fn gen_world(a: GenWorldArgs) -> Result<(), CliError> {
    let m = ManifestBuilder::start("gen-world");
    if a.nodes < 2 {
        return Err(CliError::Usage(format!("--nodes must be at least 2, got {}", a.nodes)));
    }
    if !(a.degree >= 2.0) {
        return Err(CliError::Usage(format!("--degree must be at least 2, got {}", a.degree)));
    }
    let world = generate_world(a.seed, a.nodes, a.degree, a.landmarks)?;
    write_bytes(&a.out, &to_json_pretty(&world.to_file()))?;
    let cfg = serde_json::json!({"nodes": a.nodes, "degree": a.degree, "landmarks": a.landmarks});
    m.finish(cfg, Some(a.seed), &[], &[&a.out], Some(&manifest_path(a.manifest.as_deref(), &a.out)))
}

fn episode_seed(seed: u64, world: usize, gran: usize, k: u64) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ ((world as u64) << 40) ^ ((gran as u64) << 32) ^ k
}

fn gen_episodes(a: GenEpisodesArgs) -> Result<(), CliError> {
    let m = ManifestBuilder::start("gen-episodes");
    let grans: Vec<Granularity> = match a.granularity {
        GranArg::All => Granularity::ALL.to_vec(),
        GranArg::Fine => vec![Granularity::Fine],
        GranArg::Coarse => vec![Granularity::Coarse],
        GranArg::Zero => vec![Granularity::Zero],
    };
    let mut records = Vec::new();
    for (wi, path) in a.worlds.iter().enumerate() {
        let world = load_world(path)?;
        for &gran in &grans {
            for k in 0..a.count as u64 {
                let ep = generate_episode(&world, episode_seed(a.seed, wi, gran.task_id(), k), gran)?;
                records.push(ep.to_record(Some(world.seed())));
            }
        }
    }
    write_bytes(&a.out, &to_jsonl(&records))?;
    let inputs: Vec<&Path> = a.worlds.iter().map(PathBuf::as_path).collect();
    let cfg = serde_json::json!({"count": a.count, "granularity": format!("{:?}", a.granularity).to_lowercase()});
    m.finish(cfg, Some(a.seed), &inputs, &[&a.out], Some(&manifest_path(a.manifest.as_deref(), &a.out)))
}

fn discretize(a: DiscretizeArgs) -> Result<(), CliError> {
    let m = ManifestBuilder::start("discretize");
    if !(a.threshold >= 0.0) {
        return Err(CliError::Usage(format!("--threshold must be non-negative, got {}", a.threshold)));
    }
    let world = load_world(&a.world)?;
    let trajs: Vec<ContinuousTrajectory> = read_jsonl(&a.traj)?;
    let (paths, stats) = snap_batch(&world, &trajs, a.threshold);
    let stats_path = a.stats.clone().unwrap_or_else(|| {
        let mut s = a.out.as_os_str().to_owned();
        s.push(".stats.json");
        PathBuf::from(s)
    });
    write_bytes(&a.out, &to_jsonl(&paths))?;
    write_bytes(&stats_path, &to_json_pretty(&stats))?;
    println!(
        "kept {} of {} (disconnected {}, endpoint {}, empty {})",
        stats.kept,
        trajs.len(),
        stats.rejected_disconnected,
        stats.rejected_endpoint,
        stats.rejected_empty
    );
    let cfg = serde_json::json!({"threshold_m": a.threshold});
    m.finish(
        cfg,
        None,
        &[&a.world, &a.traj],
        &[&a.out, &stats_path],
        Some(&manifest_path(a.manifest.as_deref(), &a.out)),
    )
}

fn resolve_config(o: &TrainOverrides) -> Result<RunConfig, CliError> {
    let mut cfg: RunConfig = match &o.config {
        Some(p) => read_json(p)?,
        None => RunConfig::default(),
    };
    if let Some(l) = o.lambda {
        cfg.train.lambda = l;
    }
    if let Some(a) = o.algorithm {
        cfg.train.algorithm = match a {
            AlgArg::Imitation => Algorithm::Imitation,
            AlgArg::Dagger => Algorithm::Dagger,
        };
    }
    if let Some(b) = o.batch_mode {
        cfg.train.batch_mode = match b {
            BatchArg::Sequential => BatchMode::Sequential,
            BatchArg::Mixed => BatchMode::Mixed,
        };
    }
    if let Some(u) = o.updates {
        cfg.train.updates = u;
    }
    if let Some(b) = o.batch_size {
        cfg.train.batch_size = b;
    }
    if let Some(lr) = o.lr {
        cfg.train.lr = lr;
    }
    if let Some(s) = o.seed {
        cfg.train.seed = s;
    }
    cfg.train.validate()?;
    cfg.policy.validate()?;
    Ok(cfg)
}

fn load_worlds(paths: &[PathBuf]) -> Result<Vec<NavGraph>, CliError> {
    paths.iter().map(|p| load_world(p)).collect()
}

/// Pairs each episode with its world by seed; a single world needs no tag.
fn load_episodes(path: &Path, worlds: &[NavGraph]) -> Result<Vec<(usize, Episode)>, CliError> {
    let records: Vec<EpisodeRecord> = read_jsonl(path)?;
    let by_seed: BTreeMap<u64, usize> = worlds.iter().enumerate().map(|(i, w)| (w.seed(), i)).collect();
    records
        .iter()
        .enumerate()
        .map(|(i, r)| {
            let w = match r.world {
                Some(s) => *by_seed
                    .get(&s)
                    .ok_or_else(|| CliError::Validation(format!("episode {i}: no world with seed {s}")))?,
                None if worlds.len() == 1 => 0,
                None => {
                    return Err(CliError::Validation(format!(
                        "episode {i} has no world tag and {} worlds were given",
                        worlds.len()
                    )))
                }
            };
            let world = &worlds[w];
            for n in r.reference_path.iter().chain([&r.start, &r.goal]) {
                if !world.contains(*n) {
                    return Err(CliError::Validation(format!("episode {i}: node {n} is not in its world")));
                }
            }
            Ok((w, Episode::from_record(r)))
        })
        .collect()
}

fn cmd_train(a: TrainArgs) -> Result<(), CliError> {
    let m = ManifestBuilder::start("train");
    let mut cfg = resolve_config(&a.overrides)?;
    if a.eval_every.is_some() {
        cfg.train.eval_every = a.eval_every;
    }
    if a.no_step_log {
        cfg.train.log_steps = false;
    }
    let worlds = load_worlds(&a.worlds)?;
    let eval_worlds = load_worlds(&a.eval_worlds)?;
    let eval_eps = match &a.eval_episodes {
        Some(p) => load_episodes(p, &eval_worlds)?,
        None => Vec::new(),
    };
    let eval = a.eval_episodes.as_ref().map(|_| EvalSet {
        worlds: &eval_worlds,
        episodes: &eval_eps,
    });
    if let Some(dir) = a.log.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|source| CliError::Io {
            path: dir.to_path_buf(),
            source,
        })?;
    }
    let file = File::create(&a.log).map_err(|source| CliError::Io {
        path: a.log.clone(),
        source,
    })?;
    let mut log = BufWriter::new(file);
    let result = train(&cfg.train, &cfg.policy, &worlds, eval.as_ref(), &mut log);
    log.flush().map_err(|source| CliError::Io {
        path: a.log.clone(),
        source,
    })?;
    let out = result?;
    let ck: PolicyCheckpoint = out.policy.to_checkpoint(cfg.train.seed);
    write_bytes(&a.out_checkpoint, &to_json_pretty(&ck))?;
    if let Some(last) = out.updates.last() {
        println!(
            "{} updates; final loss {:.4} (action {:.4})",
            out.updates.len(),
            last.loss_total,
            last.loss_action
        );
    }
    let mut inputs: Vec<&Path> = a.worlds.iter().map(PathBuf::as_path).collect();
    inputs.extend(a.eval_worlds.iter().map(PathBuf::as_path));
    if let Some(p) = &a.eval_episodes {
        inputs.push(p);
    }
    if let Some(p) = &a.overrides.config {
        inputs.push(p);
    }
    m.finish(
        config_value(&cfg),
        Some(cfg.train.seed),
        &inputs,
        &[&a.out_checkpoint, &a.log],
        Some(&manifest_path(a.manifest.as_deref(), &a.out_checkpoint)),
    )
}

fn print_summary(rep: &EvalReport) {
    println!("{:<8} {:>6} {:>6} {:>6} {:>6} {:>7} {:>6}", "split", "SR", "SPL", "nDTW", "NE", "GP", "TL");
    let row = |name: &str, r: &MetricsReport| {
        println!(
            "{:<8} {:>6.1} {:>6.1} {:>6.1} {:>6.2} {:>7.2} {:>6.2}",
            name,
            100.0 * r.sr,
            100.0 * r.spl,
            100.0 * r.ndtw,
            r.ne_m,
            r.gp_m,
            r.tl_m
        )
    };
    for (g, r) in &rep.by_granularity {
        row(&format!("{g:?}").to_lowercase(), r);
    }
    row("all", &rep.aggregate);
}

fn cmd_eval(a: EvalArgs) -> Result<(), CliError> {
    let m = ManifestBuilder::start("eval");
    let worlds = load_worlds(&a.worlds)?;
    let episodes = load_episodes(&a.episodes, &worlds)?;
    if episodes.is_empty() {
        return Err(CliError::Validation(format!("{}: no episodes", a.episodes.display())));
    }
    let metric_cfg = MetricConfig::default();
    let (rep, cfg) = match &a.checkpoint {
        Some(p) => {
            let ck: PolicyCheckpoint = read_json(p)?;
            let policy = Policy::from_checkpoint(&ck)?;
            let rep = evaluate(&policy, &worlds, &episodes, &metric_cfg)?;
            (rep, serde_json::json!({"decoding": "greedy", "policy": config_value(&policy.config)}))
        }
        None => (
            evaluate_random_walk(&worlds, &episodes, a.max_steps, a.seed, &metric_cfg)?,
            serde_json::json!({"baseline": "random_walk", "max_steps": a.max_steps}),
        ),
    };
    let mut rows: Vec<MetricsReport> = rep.episodes.iter().map(|e| e.metrics).collect();
    rows.push(rep.aggregate);
    write_bytes(&a.out_report, &to_jsonl(&rows))?;
    print_summary(&rep);
    let mut inputs: Vec<&Path> = vec![&a.episodes];
    inputs.extend(a.worlds.iter().map(PathBuf::as_path));
    if let Some(p) = &a.checkpoint {
        inputs.push(p);
    }
    let seed = a.random_walk.then_some(a.seed);
    m.finish(cfg, seed, &inputs, &[&a.out_report], Some(&manifest_path(a.manifest.as_deref(), &a.out_report)))
}

fn ablate(a: AblateArgs) -> Result<(), CliError> {
    let m = ManifestBuilder::start("ablate");
    let axis: Axis = a.axis.parse()?;
    let values: Vec<String> = match &a.grid {
        Some(g) => g.split(',').map(|s| s.trim().to_string()).filter(|s| !s.is_empty()).collect(),
        None => axis.default_grid(),
    };
    let cfg = resolve_config(&a.overrides)?;
    let mut train_cfg = cfg.train.clone();
    train_cfg.log_steps = false;
    let cells = build_grid(axis, &values, &cfg.policy, &train_cfg)?;
    let worlds = load_worlds(&a.worlds)?;
    let eval_worlds = load_worlds(&a.eval_worlds)?;
    let episodes = load_episodes(&a.episodes, &eval_worlds)?;
    if episodes.is_empty() {
        return Err(CliError::Validation(format!("{}: no episodes", a.episodes.display())));
    }
    let table = run_grid(axis, &cells, &worlds, &eval_worlds, &episodes, |r| {
        eprintln!("{} = {}: SR {:.1}", axis.name(), r.label, 100.0 * r.aggregate.sr);
    })?;
    let text = render_table(&table);
    let mut txt = a.out.as_os_str().to_owned();
    txt.push(".txt");
    let txt = PathBuf::from(txt);
    write_bytes(&a.out, &to_json_pretty(&table))?;
    write_bytes(&txt, text.as_bytes())?;
    print!("{text}");
    let mut inputs: Vec<&Path> = vec![&a.episodes];
    inputs.extend(a.worlds.iter().chain(&a.eval_worlds).map(PathBuf::as_path));
    if let Some(p) = &a.overrides.config {
        inputs.push(p);
    }
    let snapshot = serde_json::json!({"axis": axis.name(), "grid": values, "base": config_value(&cfg)});
    m.finish(
        snapshot,
        Some(cfg.train.seed),
        &inputs,
        &[&a.out, &txt],
        Some(&manifest_path(a.manifest.as_deref(), &a.out)),
    )
}

fn gradcheck(a: GradcheckArgs) -> Result<(), CliError> {
    let m = ManifestBuilder::start("gradcheck");
    if a.trials == 0 {
        return Err(CliError::Usage("--trials must be positive".into()));
    }
    let scope = match a.scope {
        ScopeArg::Layer => Scope::Layer,
        ScopeArg::Policy => Scope::Policy,
    };
    let results = run_suite(scope, a.trials, a.seed);
    let width = results.iter().map(|r| r.component.len()).max().unwrap_or(9).max(9);
    println!("{:<width$}  {:>12}  {:>8}", "component", "max_rel_err", "checked");
    for r in &results {
        println!("{:<width$}  {:>12.3e}  {:>8}", r.component, r.max_rel_error, r.checked);
    }
    let failed: Vec<&str> = results
        .iter()
        .filter(|r| !(r.max_rel_error < DEFAULT_TOLERANCE))
        .map(|r| r.component.as_str())
        .collect();
    let cfg = serde_json::json!({"scope": format!("{:?}", a.scope).to_lowercase(), "trials": a.trials, "tolerance": DEFAULT_TOLERANCE});
    let outputs: Vec<&Path> = a.out.iter().map(PathBuf::as_path).collect();
    if let Some(out) = &a.out {
        write_bytes(out, &to_json_pretty(&results))?;
    }
    let dest = a.out.as_ref().map(|o| manifest_path(a.manifest.as_deref(), o)).or(a.manifest.clone());
    m.finish(cfg, Some(a.seed), &[], &outputs, dest.as_deref())?;
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::Numeric(format!(
            "gradient check above {DEFAULT_TOLERANCE:e}: {}",
            failed.join(", ")
        )))
    }
}
