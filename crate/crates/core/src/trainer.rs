//! Imitation and DAgger training, evaluation and the random-walk baseline.

use std::collections::BTreeMap;
use std::io::Write;

use rand::distributions::{Distribution, WeightedIndex};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::envgraph::{generate_episode, Episode, Granularity, NavGraph, NodeId};
use crate::metrics::{aggregate, evaluate_episode, EpisodeResult, MetricConfig, MetricError, MetricsReport};
use crate::moe::{balance_loss, balance_row_gradient, BalanceAccumulator, GateRecord, MoeError};
use crate::numcore::{Gradients, Graph, ParamStore, Tensor2D, Var};
use crate::policy::{Action, Decision, Policy, PolicyConfig, PolicyError, DEFAULT_MAX_STEPS};

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("non-finite {what} at update {update}")]
    NonFinite { what: &'static str, update: usize },
    #[error("no training worlds")]
    NoWorlds,
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Moe(#[from] MoeError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error(transparent)]
    Env(#[from] crate::envgraph::EnvError),
    #[error("log write failed: {0}")]
    Io(#[from] std::io::Error),
    #[error("log encode failed: {0}")]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algorithm {
    Imitation,
    Dagger,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BatchMode {
    Sequential,
    Mixed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub algorithm: Algorithm,
    pub batch_mode: BatchMode,
    pub batch_size: usize,
    /// Weight of the load-balancing term.
    pub lambda: f64,
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Global gradient-norm clip; `None` disables clipping.
    pub grad_clip: Option<f64>,
    pub updates: usize,
    pub max_steps: usize,
    pub task_ratios: BTreeMap<Granularity, f64>,
    pub seed: u64,
    /// Linearly decays the probability of executing the teacher's action from
    /// 1 to 0 over this many updates (DAgger only). `None` samples throughout.
    pub teacher_forcing_decay: Option<usize>,
    /// Evaluate on the eval set every this many updates.
    pub eval_every: Option<usize>,
    /// Write per-step records into the training log.
    pub log_steps: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            algorithm: Algorithm::Dagger,
            batch_mode: BatchMode::Sequential,
            batch_size: 16,
            lambda: 0.8,
            lr: 3e-3,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            grad_clip: Some(5.0),
            updates: 600,
            max_steps: DEFAULT_MAX_STEPS,
            task_ratios: Granularity::ALL.into_iter().map(|g| (g, 1.0)).collect(),
            seed: 0,
            teacher_forcing_decay: None,
            eval_every: None,
            log_steps: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::InvalidConfig(m));
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad(format!("lambda = {} must be non-negative", self.lambda));
        }
        if self.batch_size == 0 || self.max_steps == 0 {
            return bad("batch_size and max_steps must be positive".into());
        }
        if !(self.lr > 0.0) || self.weight_decay < 0.0 {
            return bad("lr must be positive and weight_decay non-negative".into());
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("betas must lie in [0, 1)".into());
        }
        if self.task_ratios.values().any(|&r| !(r >= 0.0 && r.is_finite())) {
            return bad("task ratios must be non-negative".into());
        }
        if self.task_ratios.values().all(|&r| r == 0.0) {
            return bad("at least one task ratio must be positive".into());
        }
        if self.grad_clip.is_some_and(|c| !(c > 0.0)) {
            return bad("grad_clip must be positive".into());
        }
        Ok(())
    }

    /// Ratios in `Granularity::ALL` order, missing entries as 0.
    pub fn ratio_vector(&self) -> Vec<f64> {
        Granularity::ALL
            .iter()
            .map(|g| self.task_ratios.get(g).copied().unwrap_or(0.0))
            .collect()
    }
}

/// One decision during training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub update: usize,
    pub episode_id: usize,
    pub t: usize,
    pub granularity: Granularity,
    pub teacher_action: Action,
    pub taken_action: Action,
    pub loss_action: f64,
    /// Batch-level balance loss of the update this step belongs to.
    pub loss_balance: f64,
    pub routing: Vec<GateRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UpdateRecord {
    pub update: usize,
    pub granularities: Vec<Granularity>,
    pub loss_action: f64,
    pub loss_balance: f64,
    pub loss_total: f64,
    pub grad_norm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSnapshot {
    pub update: usize,
    pub report: MetricsReport,
}

/// A line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum LogLine {
    Step(StepRecord),
    Update(UpdateRecord),
    Eval(EvalSnapshot),
}

/// The expert: STOP at the goal, otherwise the selectable map node minimising
/// `geodesic(current, c) + geodesic(c, goal)`, ties to the smaller id.
pub fn teacher_action(g: &NavGraph, candidates: &[NodeId], current: NodeId, goal: NodeId) -> Result<Action, TrainError> {
    if current == goal {
        return Ok(Action::Stop);
    }
    let mut best: Option<(f64, NodeId)> = None;
    for &c in candidates {
        if c == current {
            continue;
        }
        let cost = g.geodesic(current, c)? + g.geodesic(c, goal)?;
        let better = match best {
            None => true,
            Some((bc, bid)) => cost < bc - 1e-9 || ((cost - bc).abs() <= 1e-9 && c < bid),
        };
        if better {
            best = Some((cost, c));
        }
    }
    Ok(best.map_or(Action::Stop, |(_, c)| Action::Node(c)))
}

fn selectable_nodes(d: &Decision) -> Vec<NodeId> {
    d.candidates
        .iter()
        .zip(&d.mask)
        .filter_map(|(c, &m)| match c {
            Action::Node(n) if m => Some(*n),
            _ => None,
        })
        .collect()
}

/// A finished rollout whose tape is still alive for backpropagation.
pub struct EpisodeTape<'p> {
    pub graph: Graph<'p>,
    /// Cross-entropy of each decision against the teacher.
    pub step_losses: Vec<Var>,
    /// Router probability nodes per MoE layer.
    pub gates: Vec<Vec<Var>>,
    pub records: Vec<StepRecord>,
    pub path: Vec<NodeId>,
    pub granularity: Granularity,
}

impl EpisodeTape<'_> {
    /// Mean cross-entropy over decisions.
    pub fn action_loss(&self) -> f64 {
        let n = self.step_losses.len().max(1) as f64;
        self.step_losses.iter().map(|&v| self.graph.scalar(v)).sum::<f64>() / n
    }
}

/// Rolls out one episode, supervising every decision with the teacher.
///
/// `choose` maps `(decision, teacher action, t)` to the executed action.
pub fn rollout_with<'p>(
    policy: &'p Policy,
    world: &NavGraph,
    episode: &Episode,
    max_steps: usize,
    mut choose: impl FnMut(&Decision, Action, usize) -> Action,
) -> Result<EpisodeTape<'p>, TrainError> {
    let mut g = Graph::new(&policy.params);
    let mut es = policy.begin(&mut g, world, episode)?;
    let mut step_losses = Vec::new();
    let mut gates = vec![Vec::new(); policy.num_moe_layers()];
    let mut records = Vec::new();
    let mut t = 0;
    while !es.done {
        let d = policy.decide(&mut g, world, &mut es, None)?;
        let teacher = teacher_action(world, &selectable_nodes(&d), es.state.node, es.goal)?;
        let target = d.index_of(teacher).expect("teacher picks a candidate");
        let ce = g.cross_entropy(d.logits, Some(&d.mask), target);
        let taken = choose(&d, teacher, t);
        for (i, gate) in &d.gates {
            gates[*i].push(gate.probs);
        }
        records.push(StepRecord {
            update: 0,
            episode_id: 0,
            t,
            granularity: episode.instruction.granularity,
            teacher_action: teacher,
            taken_action: taken,
            loss_action: g.scalar(ce),
            loss_balance: 0.0,
            routing: d.gate_records(&g, policy.moe_layer_names()),
        });
        step_losses.push(ce);
        policy.execute(world, &mut es, taken)?;
        t += 1;
        if t >= max_steps {
            es.done = true;
        }
    }
    Ok(EpisodeTape {
        graph: g,
        step_losses,
        gates,
        records,
        path: es.path,
        granularity: episode.instruction.granularity,
    })
}

/// Follows the teacher at every step.
pub fn rollout_imitation<'p>(
    policy: &'p Policy,
    world: &NavGraph,
    episode: &Episode,
    max_steps: usize,
) -> Result<EpisodeTape<'p>, TrainError> {
    rollout_with(policy, world, episode, max_steps, |_, teacher, _| teacher)
}

/// Samples from the policy; with probability `teacher_prob` executes the teacher instead.
pub fn rollout_dagger<'p, R: Rng>(
    policy: &'p Policy,
    world: &NavGraph,
    episode: &Episode,
    max_steps: usize,
    teacher_prob: f64,
    rng: &mut R,
) -> Result<EpisodeTape<'p>, TrainError> {
    rollout_with(policy, world, episode, max_steps, |d, teacher, _| {
        let forced = teacher_prob > 0.0 && rng.gen_bool(teacher_prob.min(1.0));
        let sampled = d.sample(rng);
        if forced {
            teacher
        } else {
            sampled
        }
    })
}

/// `action + lambda * mean(balance per MoE layer)`.
pub fn total_loss(action_loss: f64, balance_losses: &[f64], lambda: f64) -> f64 {
    if balance_losses.is_empty() {
        return action_loss;
    }
    action_loss + lambda * balance_losses.iter().sum::<f64>() / balance_losses.len() as f64
}

/// Task index per batch slot: one task for the whole batch (sequential) or one per slot (mixed).
pub fn sample_tasks<R: Rng>(mode: BatchMode, ratios: &[f64], batch_size: usize, rng: &mut R) -> Vec<usize> {
    let dist = WeightedIndex::new(ratios).expect("ratios are validated");
    match mode {
        BatchMode::Sequential => vec![dist.sample(rng); batch_size],
        BatchMode::Mixed => (0..batch_size).map(|_| dist.sample(rng)).collect(),
    }
}

/// Draws a batch from per-task streams.
pub fn sample_batch<T, S: Iterator<Item = T>, R: Rng>(
    streams: &mut [S],
    mode: BatchMode,
    ratios: &[f64],
    batch_size: usize,
    rng: &mut R,
) -> Vec<(usize, T)> {
    sample_tasks(mode, ratios, batch_size, rng)
        .into_iter()
        .map(|task| (task, streams[task].next().expect("episode streams are endless")))
        .collect()
}

/// Endless episodes of one granularity over a set of worlds.
pub struct EpisodeStream<'w> {
    worlds: &'w [NavGraph],
    granularity: Granularity,
    rng: ChaCha8Rng,
}

impl<'w> EpisodeStream<'w> {
    pub fn new(worlds: &'w [NavGraph], granularity: Granularity, seed: u64) -> Self {
        EpisodeStream {
            worlds,
            granularity,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }
}

impl Iterator for EpisodeStream<'_> {
    type Item = (usize, Episode);

    fn next(&mut self) -> Option<Self::Item> {
        for _ in 0..1000 {
            let w = self.rng.gen_range(0..self.worlds.len());
            let seed = self.rng.gen();
            if let Ok(ep) = generate_episode(&self.worlds[w], seed, self.granularity) {
                return Some((w, ep));
            }
        }
        None
    }
}

/// Adam with decoupled weight decay.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    t: u64,
    m: Vec<Tensor2D>,
    v: Vec<Tensor2D>,
}

impl AdamW {
    pub fn new(store: &ParamStore, cfg: &TrainConfig) -> Self {
        let zeros: Vec<Tensor2D> = store.ids().map(|id| {
            let (r, c) = store.get(id).shape();
            Tensor2D::zeros(r, c)
        }).collect();
        AdamW {
            lr: cfg.lr,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.adam_eps,
            weight_decay: cfg.weight_decay,
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// Parameters whose gradient is exactly zero are skipped, weight decay included.
    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (id, gr) in grads.iter() {
            if gr.data().iter().all(|&x| x == 0.0) {
                continue;
            }
            let m = self.m[id.index()].data_mut();
            let v = self.v[id.index()].data_mut();
            let p = store.get_mut(id).data_mut();
            for i in 0..p.len() {
                let gi = gr.data()[i];
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * gi;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * gi * gi;
                let mh = m[i] / bc1;
                let vh = v[i] / bc2;
                p[i] -= self.lr * (mh / (vh.sqrt() + self.eps) + self.weight_decay * p[i]);
            }
        }
    }
}

/// Summary of one gradient update.
#[derive(Debug, Clone, PartialEq)]
pub struct UpdateStats {
    pub loss_action: f64,
    pub balance_per_layer: Vec<f64>,
    pub loss_total: f64,
    pub grad_norm: f64,
}

/// Backpropagates the batch objective through every episode tape into `grads`.
///
/// The action loss is the mean over episodes of the per-episode mean
/// cross-entropy. Balance statistics are pooled over every routing row of the
/// batch per layer; the argmax fractions are held constant.
pub fn batch_gradients(
    tapes: &[EpisodeTape],
    n_experts: usize,
    lambda: f64,
    grads: &mut Gradients,
) -> Result<UpdateStats, TrainError> {
    let b = tapes.len() as f64;
    let layers = tapes.first().map_or(0, |t| t.gates.len());
    let mut balance = Vec::new();
    let mut row_grads = Vec::new();
    for l in 0..layers {
        let mut acc = BalanceAccumulator::new(n_experts);
        for t in tapes {
            for &p in &t.gates[l] {
                acc.add_tensor(t.graph.value(p));
            }
        }
        if acc.rows == 0 {
            row_grads.push(None);
            continue;
        }
        let stats = acc.stats()?;
        balance.push(balance_loss(&stats, n_experts)?);
        row_grads.push(Some(balance_row_gradient(&stats, n_experts)));
    }
    let used = balance.len().max(1) as f64;
    let loss_action = tapes.iter().map(|t| t.action_loss()).sum::<f64>() / b;
    for t in tapes {
        let n = t.step_losses.len().max(1) as f64;
        let mut seeds: Vec<(Var, Tensor2D)> = t
            .step_losses
            .iter()
            .map(|&v| (v, Tensor2D::filled(1, 1, 1.0 / (n * b))))
            .collect();
        if lambda > 0.0 {
            for (l, rg) in row_grads.iter().enumerate() {
                let Some(rg) = rg else { continue };
                let scaled: Vec<f64> = rg.iter().map(|v| v * lambda / used).collect();
                for &p in &t.gates[l] {
                    let rows = t.graph.shape(p).0;
                    let seed = Tensor2D::from_rows(&vec![scaled.clone(); rows]).expect("rows share a width");
                    seeds.push((p, seed));
                }
            }
        }
        t.graph.backward_seeded(&seeds, grads);
    }
    Ok(UpdateStats {
        loss_action,
        loss_total: total_loss(loss_action, &balance, lambda),
        balance_per_layer: balance,
        grad_norm: grads.norm(),
    })
}

/// Trained policy plus its update summaries.
pub struct TrainOutcome {
    pub policy: Policy,
    pub updates: Vec<UpdateStats>,
}

/// Held-out episodes evaluated during training.
pub struct EvalSet<'a> {
    pub worlds: &'a [NavGraph],
    pub episodes: &'a [(usize, Episode)],
}

fn mix(seed: u64, a: u64, b: u64) -> u64 {
    let mut z = seed ^ a.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ b.wrapping_mul(0xC2B2_AE3D_27D4_EB4F);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Runs `config.updates` gradient steps from a freshly initialised policy.
pub fn train(
    config: &TrainConfig,
    policy_config: &PolicyConfig,
    worlds: &[NavGraph],
    eval: Option<&EvalSet>,
    log: &mut dyn Write,
) -> Result<TrainOutcome, TrainError> {
    let policy = Policy::new(policy_config.clone(), mix(config.seed, 1, 0))?;
    train_from(config, policy, worlds, eval, log)
}

/// Continues training an existing policy.
pub fn train_from(
    config: &TrainConfig,
    mut policy: Policy,
    worlds: &[NavGraph],
    eval: Option<&EvalSet>,
    log: &mut dyn Write,
) -> Result<TrainOutcome, TrainError> {
    config.validate()?;
    if worlds.is_empty() {
        return Err(TrainError::NoWorlds);
    }
    let ratios = config.ratio_vector();
    let mut streams: Vec<EpisodeStream> = Granularity::ALL
        .iter()
        .enumerate()
        .map(|(i, &g)| EpisodeStream::new(worlds, g, mix(config.seed, 2, i as u64)))
        .collect();
    let mut batch_rng = ChaCha8Rng::seed_from_u64(mix(config.seed, 3, 0));
    let mut opt = AdamW::new(&policy.params, config);
    let mut history = Vec::with_capacity(config.updates);
    let n_experts = policy.config.experts;
    for update in 0..config.updates {
        let batch = sample_batch(&mut streams, config.batch_mode, &ratios, config.batch_size, &mut batch_rng);
        let teacher_prob = match (config.algorithm, config.teacher_forcing_decay) {
            (Algorithm::Dagger, Some(n)) if n > 0 => (1.0 - update as f64 / n as f64).max(0.0),
            _ => 0.0,
        };
        let mut grads = Gradients::zeros_like(&policy.params);
        let (stats, mut records) = {
            let mut tapes = Vec::with_capacity(batch.len());
            for (slot, (_, (w, ep))) in batch.iter().enumerate() {
                let tape = match config.algorithm {
                    Algorithm::Imitation => rollout_imitation(&policy, &worlds[*w], ep, config.max_steps),
                    Algorithm::Dagger => {
                        let mut rng = ChaCha8Rng::seed_from_u64(mix(config.seed, 4 + update as u64, slot as u64));
                        rollout_dagger(&policy, &worlds[*w], ep, config.max_steps, teacher_prob, &mut rng)
                    }
                }
                .map_err(|e| match e {
                    TrainError::Policy(PolicyError::NonFinite(what)) => TrainError::NonFinite { what, update },
                    e => e,
                })?;
                tapes.push(tape);
            }
            let stats = batch_gradients(&tapes, n_experts, config.lambda, &mut grads)?;
            let records: Vec<Vec<StepRecord>> = tapes.into_iter().map(|t| t.records).collect();
            (stats, records)
        };
        if !stats.loss_total.is_finite() {
            return Err(TrainError::NonFinite { what: "loss", update });
        }
        if !grads.is_finite() {
            return Err(TrainError::NonFinite { what: "gradient", update });
        }
        if let Some(clip) = config.grad_clip {
            if stats.grad_norm > clip {
                grads.scale(clip / stats.grad_norm);
            }
        }
        opt.step(&mut policy.params, &grads);
        if !policy.params.ids().all(|id| policy.params.get(id).data().iter().all(|v| v.is_finite())) {
            return Err(TrainError::NonFinite { what: "parameters", update });
        }
        let balance_mean = if stats.balance_per_layer.is_empty() {
            0.0
        } else {
            stats.balance_per_layer.iter().sum::<f64>() / stats.balance_per_layer.len() as f64
        };
        if config.log_steps {
            for (slot, recs) in records.iter_mut().enumerate() {
                for r in recs.iter_mut() {
                    r.update = update;
                    r.episode_id = update * config.batch_size + slot;
                    r.loss_balance = balance_mean;
                    write_line(log, &LogLine::Step(r.clone()))?;
                }
            }
        }
        write_line(
            log,
            &LogLine::Update(UpdateRecord {
                update,
                granularities: batch.iter().map(|(_, (_, ep))| ep.instruction.granularity).collect(),
                loss_action: stats.loss_action,
                loss_balance: balance_mean,
                loss_total: stats.loss_total,
                grad_norm: stats.grad_norm,
            }),
        )?;
        if let (Some(every), Some(ev)) = (config.eval_every, eval) {
            if every > 0 && (update + 1) % every == 0 {
                let rep = evaluate(&policy, ev.worlds, ev.episodes, &MetricConfig::default())?;
                write_line(
                    log,
                    &LogLine::Eval(EvalSnapshot {
                        update: update + 1,
                        report: rep.aggregate,
                    }),
                )?;
            }
        }
        history.push(stats);
    }
    Ok(TrainOutcome {
        policy,
        updates: history,
    })
}

fn write_line(log: &mut dyn Write, line: &LogLine) -> Result<(), TrainError> {
    serde_json::to_writer(&mut *log, line)?;
    log.write_all(b"\n")?;
    Ok(())
}

/// Per-episode metrics of an evaluation run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeReport {
    pub world: usize,
    pub granularity: Granularity,
    pub path: Vec<NodeId>,
    pub metrics: MetricsReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub episodes: Vec<EpisodeReport>,
    pub aggregate: MetricsReport,
    pub by_granularity: BTreeMap<Granularity, MetricsReport>,
}

fn report_from(
    worlds: &[NavGraph],
    episodes: &[(usize, Episode)],
    paths: Vec<Vec<NodeId>>,
    cfg: &MetricConfig,
) -> Result<EvalReport, TrainError> {
    let mut rows = Vec::with_capacity(episodes.len());
    for ((w, ep), path) in episodes.iter().zip(paths) {
        let r = EpisodeResult {
            executed_path: path.clone(),
            reference_path: ep.instruction.reference_path.clone(),
            goal: ep.instruction.goal,
        };
        rows.push(EpisodeReport {
            world: *w,
            granularity: ep.instruction.granularity,
            path,
            metrics: evaluate_episode(&r, &worlds[*w], cfg)?,
        });
    }
    let all: Vec<MetricsReport> = rows.iter().map(|r| r.metrics).collect();
    let mut by_granularity = BTreeMap::new();
    for gran in Granularity::ALL {
        let sub: Vec<MetricsReport> = rows.iter().filter(|r| r.granularity == gran).map(|r| r.metrics).collect();
        if !sub.is_empty() {
            by_granularity.insert(gran, aggregate(&sub)?);
        }
    }
    Ok(EvalReport {
        aggregate: aggregate(&all)?,
        episodes: rows,
        by_granularity,
    })
}

/// Greedy rollouts of `policy` scored with the standard metrics.
pub fn evaluate(
    policy: &Policy,
    worlds: &[NavGraph],
    episodes: &[(usize, Episode)],
    cfg: &MetricConfig,
) -> Result<EvalReport, TrainError> {
    let mut paths = Vec::with_capacity(episodes.len());
    for (w, ep) in episodes {
        paths.push(policy.act(&worlds[*w], ep, None)?.path);
    }
    report_from(worlds, episodes, paths, cfg)
}

/// Uniform choice over neighbors and STOP at each step.
pub fn random_walk<R: Rng>(world: &NavGraph, start: NodeId, max_steps: usize, rng: &mut R) -> Result<Vec<NodeId>, TrainError> {
    let mut path = vec![start];
    let mut cur = start;
    for _ in 0..max_steps {
        let nbs = world.neighbors(cur)?;
        let pick = rng.gen_range(0..=nbs.len());
        if pick == nbs.len() {
            break;
        }
        cur = nbs[pick].0;
        path.push(cur);
    }
    Ok(path)
}

pub fn evaluate_random_walk(
    worlds: &[NavGraph],
    episodes: &[(usize, Episode)],
    max_steps: usize,
    seed: u64,
    cfg: &MetricConfig,
) -> Result<EvalReport, TrainError> {
    let mut paths = Vec::with_capacity(episodes.len());
    for (i, (w, ep)) in episodes.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(mix(seed, 5, i as u64));
        paths.push(random_walk(&worlds[*w], ep.start.node, max_steps, &mut rng)?);
    }
    report_from(worlds, episodes, paths, cfg)
}

/// `per_granularity` episodes of each granularity on every world, seeded by position.
pub fn held_out_episodes(worlds: &[NavGraph], per_granularity: usize, seed: u64) -> Vec<(usize, Episode)> {
    let mut out = Vec::new();
    for (w, world) in worlds.iter().enumerate() {
        for (gi, &gran) in Granularity::ALL.iter().enumerate() {
            let mut made = 0;
            let mut k = 0u64;
            while made < per_granularity && k < 100 * per_granularity as u64 + 100 {
                if let Ok(ep) = generate_episode(world, mix(seed, (w * 3 + gi) as u64, k), gran) {
                    out.push((w, ep));
                    made += 1;
                }
                k += 1;
            }
        }
    }
    out
}
