//! Dual-branch navigation policy over a topological map.

use std::collections::{BTreeMap, BTreeSet, BinaryHeap};
use std::cmp::Reverse;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::envgraph::{
    bearing, observe, transition, view_elevation, view_heading, AgentState, EnvError, Episode, NavGraph, NodeId,
    Observation, DEFAULT_VIEW_DIM, DEFAULT_VOCAB, NUM_VIEWS,
};
use crate::moe::{
    build_routing_feature, ffn_experts, kv_experts, linear_experts, Gate, GateRecord, KvExpert, MoeError,
    MoeLayer, Placement, RoutingInputs, RoutingKind, RoutingParams,
};
use crate::numcore::layers::{affinity_from_positions, attend, sinusoidal_positions, AttentionParams, Ffn, Linear};
use crate::numcore::{Graph, ParamCheckpoint, ParamId, ParamStore, ShapeError, Tensor2D, Var};

pub const DEFAULT_MAX_STEPS: usize = 15;
pub const CHECKPOINT_FORMAT: &str = "moenav-policy";

#[derive(Debug, thiserror::Error)]
pub enum PolicyError {
    #[error("invalid policy config: {0}")]
    InvalidConfig(String),
    #[error("instruction has no tokens")]
    EmptyInstruction,
    #[error("token {token} is outside the vocabulary of {vocab}")]
    TokenOutOfRange { token: u32, vocab: usize },
    #[error("instruction of {len} tokens exceeds the limit of {max}")]
    InstructionTooLong { len: usize, max: usize },
    #[error("node {0} is visible locally but absent from the map")]
    MissingMapNode(NodeId),
    #[error("no path to node {0} through the known map")]
    Unreachable(NodeId),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("non-finite {0} in forward pass")]
    NonFinite(&'static str),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Moe(#[from] MoeError),
    #[error(transparent)]
    Shape(#[from] ShapeError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PolicyConfig {
    pub d: usize,
    pub heads: usize,
    pub layers_text: usize,
    pub layers_local: usize,
    pub layers_global: usize,
    pub vocab: usize,
    pub view_dim: usize,
    pub tasks: usize,
    pub max_instruction_len: usize,
    pub moe_placement: Placement,
    pub routing_kind: RoutingKind,
    pub experts: usize,
    pub top_k: usize,
    /// Distance temperature of the graph-aware attention bias, in metres.
    pub affinity_tau: f64,
    /// Hide previously visited non-current nodes from the global action space.
    pub mask_visited: bool,
    pub max_steps: usize,
    pub layer_norm: bool,
    pub dropout: f64,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        PolicyConfig {
            d: 32,
            heads: 2,
            layers_text: 2,
            layers_local: 2,
            layers_global: 2,
            vocab: DEFAULT_VOCAB,
            view_dim: DEFAULT_VIEW_DIM,
            tasks: 3,
            max_instruction_len: 64,
            moe_placement: Placement::VisualQuery,
            routing_kind: RoutingKind::Multimodal,
            experts: 3,
            top_k: 2,
            affinity_tau: 1.0,
            mask_visited: false,
            max_steps: DEFAULT_MAX_STEPS,
            layer_norm: false,
            dropout: 0.0,
        }
    }
}

impl PolicyConfig {
    pub fn validate(&self) -> Result<(), PolicyError> {
        let bad = |m: String| Err(PolicyError::InvalidConfig(m));
        if self.d == 0 || self.heads == 0 || !self.d.is_multiple_of(self.heads) {
            return bad(format!("d = {} must be a positive multiple of heads = {}", self.d, self.heads));
        }
        if self.moe_placement != Placement::None && (self.top_k == 0 || self.top_k > self.experts) {
            return bad(format!("top_k = {} must lie in 1..={}", self.top_k, self.experts));
        }
        if self.vocab == 0 || self.view_dim == 0 || self.tasks == 0 || self.max_steps == 0 {
            return bad("vocab, view_dim, tasks and max_steps must be positive".into());
        }
        if self.max_instruction_len == 0 {
            return bad("max_instruction_len must be positive".into());
        }
        if !(self.affinity_tau > 0.0 && self.affinity_tau.is_finite()) {
            return bad(format!("affinity_tau = {} must be positive", self.affinity_tau));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout = {} must lie in [0, 1)", self.dropout));
        }
        Ok(())
    }

    /// Number of MoE layers the placement creates.
    pub fn moe_layer_count(&self) -> usize {
        match self.moe_placement {
            Placement::None => 0,
            _ => self.layers_local + self.layers_global,
        }
    }
}

/// A decision: terminate or move toward a map node.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Action {
    Stop,
    Node(NodeId),
}

#[derive(Debug, Clone, PartialEq)]
struct MoeSlot<E> {
    layer: MoeLayer<E>,
    index: usize,
}

#[derive(Debug, Clone, PartialEq)]
enum Projection {
    Dense(Linear),
    Experts(MoeSlot<Linear>),
}

#[derive(Debug, Clone, PartialEq)]
enum KvProjection {
    Dense { key: Linear, value: Linear },
    Experts(MoeSlot<KvExpert>),
}

#[derive(Debug, Clone, PartialEq)]
enum FeedForward {
    Dense(Ffn),
    Experts(MoeSlot<Ffn>),
}

/// Cross-attention from map rows to text, optional graph-aware self-attention, FFN.
#[derive(Debug, Clone, PartialEq)]
struct Block {
    q: Projection,
    kv: KvProjection,
    gasa: Option<AttentionParams>,
    ffn: FeedForward,
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct EncoderBlock {
    att: AttentionParams,
    ffn: Ffn,
}

/// Everything a forward pass needs beyond the parameters.
struct Ctx<'a> {
    kind: RoutingKind,
    shared: Option<Var>,
    gates: &'a mut Vec<(usize, Gate)>,
    heads: usize,
    layer_norm: bool,
    dropout: Option<(f64, &'a mut ChaCha8Rng)>,
}

impl Ctx<'_> {
    fn routing_rows(&self, rows: Var) -> Var {
        match self.kind {
            RoutingKind::Token => rows,
            _ => self.shared.expect("shared routing feature is built before the branches"),
        }
    }

    fn drop(&mut self, g: &mut Graph, x: Var) -> Var {
        match &mut self.dropout {
            Some((p, rng)) => {
                let keep = 1.0 - *p;
                let (r, c) = g.shape(x);
                let mask = (0..r * c).map(|_| if rng.gen_bool(keep) { 1.0 / keep } else { 0.0 }).collect();
                g.dropout(x, mask)
            }
            None => x,
        }
    }

    fn residual(&mut self, g: &mut Graph, x: Var, delta: Var) -> Var {
        let delta = self.drop(g, delta);
        let y = g.add(x, delta);
        if self.layer_norm {
            g.layer_norm(y)
        } else {
            y
        }
    }
}

impl Projection {
    fn forward(&self, g: &mut Graph, x: Var, ctx: &mut Ctx) -> Result<Var, PolicyError> {
        match self {
            Projection::Dense(l) => Ok(l.try_forward(g, x)?),
            Projection::Experts(slot) => {
                let xr = ctx.routing_rows(x);
                let (y, gate) = slot.layer.forward(g, x, xr)?;
                ctx.gates.push((slot.index, gate));
                Ok(y)
            }
        }
    }
}

impl KvProjection {
    fn forward(&self, g: &mut Graph, text: Var, ctx: &mut Ctx) -> Result<(Var, Var), PolicyError> {
        match self {
            KvProjection::Dense { key, value } => Ok((key.try_forward(g, text)?, value.try_forward(g, text)?)),
            KvProjection::Experts(slot) => {
                let xr = ctx.routing_rows(text);
                let (k, v, gate) = slot.layer.forward_kv(g, text, xr)?;
                ctx.gates.push((slot.index, gate));
                Ok((k, v))
            }
        }
    }
}

impl FeedForward {
    fn forward(&self, g: &mut Graph, x: Var, ctx: &mut Ctx) -> Result<Var, PolicyError> {
        match self {
            FeedForward::Dense(f) => Ok(f.forward(g, x)),
            FeedForward::Experts(slot) => {
                let xr = ctx.routing_rows(x);
                let (y, gate) = slot.layer.forward(g, x, xr)?;
                ctx.gates.push((slot.index, gate));
                Ok(y)
            }
        }
    }
}

impl Block {
    fn forward(&self, g: &mut Graph, x: Var, text: Var, affinity: Option<Var>, ctx: &mut Ctx) -> Result<Var, PolicyError> {
        let q = self.q.forward(g, x, ctx)?;
        let (k, v) = self.kv.forward(g, text, ctx)?;
        let a = attend(g, q, k, v, ctx.heads, None)?;
        let mut x = ctx.residual(g, x, a);
        if let (Some(p), Some(aff)) = (&self.gasa, affinity) {
            let s = crate::numcore::layers::gasa(g, x, p, aff, ctx.heads)?;
            x = ctx.residual(g, x, s);
        }
        let f = self.ffn.forward(g, x, ctx)?;
        Ok(ctx.residual(g, x, f))
    }
}

impl EncoderBlock {
    fn forward(&self, g: &mut Graph, x: Var, ctx: &mut Ctx) -> Result<Var, PolicyError> {
        let a = crate::numcore::layers::self_attention(g, x, &self.att, ctx.heads)?;
        let x = ctx.residual(g, x, a);
        let f = self.ffn.forward(g, x);
        Ok(ctx.residual(g, x, f))
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Net {
    tok_emb: ParamId,
    cls: ParamId,
    text_pos: Tensor2D,
    text_blocks: Vec<EncoderBlock>,
    view_proj: Linear,
    ang_proj: Linear,
    nav_emb: ParamId,
    pano_block: EncoderBlock,
    local_stop: ParamId,
    local_loc: Linear,
    local_blocks: Vec<Block>,
    local_head: Ffn,
    global_stop: ParamId,
    global_loc: Linear,
    step_emb: ParamId,
    global_blocks: Vec<Block>,
    global_head: Ffn,
    sigma_head: Linear,
    routing: RoutingParams,
}

/// Instruction encoding: row 0 is the CLS summary.
#[derive(Debug, Clone, Copy)]
pub struct EncodedInstruction {
    pub tokens: Var,
    pub cls: Var,
}

#[derive(Debug, Clone)]
pub struct MapEntry {
    pub position: [f64; 3],
    /// Step of the most recent visit; 0 for frontier nodes.
    pub last_visit_step: usize,
    sightings: Vec<Var>,
    visit_embedding: Option<Var>,
}

impl MapEntry {
    pub fn is_visited(&self) -> bool {
        self.visit_embedding.is_some()
    }

    pub fn sightings(&self) -> usize {
        self.sightings.len()
    }
}

/// The agent's incrementally built map: visited nodes, frontier nodes and the
/// edges observed from visited nodes. Embeddings live on the episode's tape.
#[derive(Debug, Clone, Default)]
pub struct TopoMap {
    entries: BTreeMap<NodeId, MapEntry>,
    /// Undirected edges with at least one visited endpoint.
    known_edges: BTreeMap<NodeId, Vec<(NodeId, f64)>>,
}

impl TopoMap {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn node_ids(&self) -> Vec<NodeId> {
        self.entries.keys().copied().collect()
    }

    pub fn entry(&self, id: NodeId) -> Option<&MapEntry> {
        self.entries.get(&id)
    }

    pub fn contains(&self, id: NodeId) -> bool {
        self.entries.contains_key(&id)
    }

    /// Records a visit: the node embedding becomes the mean of the panorama and
    /// every navigable neighbor gains a sighting from the view that shows it.
    pub fn update(
        &mut self,
        g: &mut Graph,
        world: &NavGraph,
        state: &AgentState,
        obs: &Observation,
        pano: Var,
        step: usize,
    ) -> Result<(), PolicyError> {
        let here = world.position(state.node)?;
        let mean = g.mean_rows(pano);
        let e = self.entries.entry(state.node).or_insert(MapEntry {
            position: here,
            last_visit_step: 0,
            sightings: Vec::new(),
            visit_embedding: None,
        });
        e.visit_embedding = Some(mean);
        e.last_visit_step = step;
        let mut edges = Vec::new();
        for (v, nb) in obs.navigable_views() {
            let len = world.edge_length(state.node, nb).ok_or(EnvError::NotAdjacent {
                from: state.node,
                to: nb,
            })?;
            edges.push((nb, len));
            let pos = world.position(nb)?;
            let entry = self.entries.entry(nb).or_insert(MapEntry {
                position: pos,
                last_visit_step: 0,
                sightings: Vec::new(),
                visit_embedding: None,
            });
            if !entry.is_visited() {
                let row = g.row(pano, v);
                entry.sightings.push(row);
            }
        }
        for &(nb, len) in &edges {
            let back = self.known_edges.entry(nb).or_default();
            if !back.iter().any(|&(n, _)| n == state.node) {
                back.push((state.node, len));
            }
        }
        let fwd = self.known_edges.entry(state.node).or_default();
        for (nb, len) in edges {
            if !fwd.iter().any(|&(n, _)| n == nb) {
                fwd.push((nb, len));
            }
        }
        Ok(())
    }

    /// Current embedding of a map node.
    pub fn embedding(&self, g: &mut Graph, id: NodeId) -> Option<Var> {
        let e = self.entries.get(&id)?;
        if let Some(v) = e.visit_embedding {
            return Some(v);
        }
        match e.sightings.len() {
            0 => None,
            1 => Some(e.sightings[0]),
            _ => {
                let rows = g.concat_rows(&e.sightings);
                Some(g.mean_rows(rows))
            }
        }
    }

    /// Shortest route over edges observed from visited nodes.
    pub fn route(&self, from: NodeId, to: NodeId) -> Option<(Vec<NodeId>, f64)> {
        let mut dist: BTreeMap<NodeId, f64> = BTreeMap::new();
        let mut prev: BTreeMap<NodeId, NodeId> = BTreeMap::new();
        let mut heap = BinaryHeap::new();
        dist.insert(from, 0.0);
        heap.push(Reverse((OrdF64(0.0), from)));
        while let Some(Reverse((OrdF64(d), u))) = heap.pop() {
            if d > dist[&u] {
                continue;
            }
            if u == to {
                break;
            }
            let Some(nbs) = self.known_edges.get(&u) else { continue };
            for &(v, w) in nbs {
                let nd = d + w;
                let better = dist.get(&v).is_none_or(|&old| nd < old - 1e-12);
                if better {
                    dist.insert(v, nd);
                    prev.insert(v, u);
                    heap.push(Reverse((OrdF64(nd), v)));
                }
            }
        }
        let total = *dist.get(&to)?;
        let mut path = vec![to];
        let mut cur = to;
        while cur != from {
            cur = prev[&cur];
            path.push(cur);
        }
        path.reverse();
        Some((path, total))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct OrdF64(f64);

impl Eq for OrdF64 {}

impl PartialOrd for OrdF64 {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for OrdF64 {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.0.total_cmp(&other.0)
    }
}

/// Per-episode rollout state.
#[derive(Debug, Clone)]
pub struct EpisodeState {
    pub instruction: EncodedInstruction,
    pub task_id: usize,
    pub goal: NodeId,
    pub map: TopoMap,
    pub state: AgentState,
    pub start: [f64; 3],
    /// Executed node sequence, including teleport intermediates.
    pub path: Vec<NodeId>,
    /// Decisions taken so far.
    pub steps: usize,
    pub done: bool,
}

/// The output of one policy decision.
#[derive(Debug, Clone)]
pub struct Decision {
    /// `1 x (1 + map nodes)` fused scores; index 0 is STOP.
    pub logits: Var,
    pub mask: Vec<bool>,
    pub candidates: Vec<Action>,
    pub probs: Vec<f64>,
    pub sigma: f64,
    /// Local-branch distribution over `[stop; 36 views]`, unnavigable views at 0.
    pub local_probs: Vec<f64>,
    pub gates: Vec<(usize, Gate)>,
}

impl Decision {
    pub fn index_of(&self, a: Action) -> Option<usize> {
        self.candidates.iter().position(|&c| c == a)
    }

    /// Highest-probability candidate; ties go to the lower index.
    pub fn greedy(&self) -> Action {
        let mut best = 0;
        for (i, &p) in self.probs.iter().enumerate() {
            if p > self.probs[best] {
                best = i;
            }
        }
        self.candidates[best]
    }

    pub fn sample<R: Rng>(&self, rng: &mut R) -> Action {
        let u: f64 = rng.gen();
        let mut acc = 0.0;
        let mut last = 0;
        for (i, &p) in self.probs.iter().enumerate() {
            if p <= 0.0 {
                continue;
            }
            acc += p;
            last = i;
            if u < acc {
                return self.candidates[i];
            }
        }
        self.candidates[last]
    }

    pub fn gate_records(&self, g: &Graph, layer_names: &[String]) -> Vec<GateRecord> {
        self.gates
            .iter()
            .map(|(i, gate)| {
                let pv = g.value(gate.probs);
                GateRecord {
                    layer: layer_names[*i].clone(),
                    probs: (0..pv.rows()).map(|r| pv.row(r).to_vec()).collect(),
                    selected: gate.selected.clone(),
                }
            })
            .collect()
    }
}

/// Output of the global branch.
#[derive(Debug, Clone)]
pub struct GlobalOutput {
    pub scores: Var,
    pub node_ids: Vec<NodeId>,
    /// Final embedding of the current node.
    pub current: Var,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Policy {
    pub config: PolicyConfig,
    pub params: ParamStore,
    net: Net,
    moe_names: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyCheckpoint {
    pub format: String,
    pub config: PolicyConfig,
    pub init_seed: u64,
    pub params: ParamCheckpoint,
}

/// Result of a full greedy or sampled rollout.
#[derive(Debug, Clone, PartialEq)]
pub struct Rollout {
    pub path: Vec<NodeId>,
    pub actions: Vec<Action>,
    pub stopped: bool,
}

fn row_param(store: &mut ParamStore, name: &str, d: usize, rng: &mut ChaCha8Rng) -> ParamId {
    store.add_init(name, 1, d, rng)
}

impl Policy {
    pub fn new(config: PolicyConfig, seed: u64) -> Result<Policy, PolicyError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut s = ParamStore::new();
        let d = config.d;
        let r = &mut rng;
        let mut moe_names = Vec::new();

        let tok_emb = s.add_init("text.tok_emb", config.vocab, d, r);
        let cls = row_param(&mut s, "text.cls", d, r);
        let text_blocks = (0..config.layers_text)
            .map(|i| EncoderBlock {
                att: AttentionParams::new(&mut s, &format!("text.{i}.att"), d, r),
                ffn: Ffn::new(&mut s, &format!("text.{i}.ffn"), d, 2 * d, d, r),
            })
            .collect();
        let view_proj = Linear::new(&mut s, "pano.view", config.view_dim, d, true, r);
        let ang_proj = Linear::new(&mut s, "pano.angle", 4, d, false, r);
        let nav_emb = row_param(&mut s, "pano.nav", d, r);
        let pano_block = EncoderBlock {
            att: AttentionParams::new(&mut s, "pano.att", d, r),
            ffn: Ffn::new(&mut s, "pano.ffn", d, 2 * d, d, r),
        };
        let routing = RoutingParams::new(&mut s, "route", d, config.tasks, r);

        let mut block = |s: &mut ParamStore, prefix: &str, with_gasa: bool, r: &mut ChaCha8Rng| -> Result<Block, PolicyError> {
            let n = config.experts;
            let k = config.top_k;
            let mut next_slot = |name: String| {
                moe_names.push(name);
                moe_names.len() - 1
            };
            let q = if config.moe_placement == Placement::VisualQuery {
                let name = format!("{prefix}.wq");
                let experts = linear_experts(s, &name, n, d, d, false, r);
                let layer = MoeLayer::with_random_router(s, &name, d, k, experts, r)?;
                Projection::Experts(MoeSlot { layer, index: next_slot(name) })
            } else {
                Projection::Dense(Linear::new(s, &format!("{prefix}.wq"), d, d, false, r))
            };
            let kv = if config.moe_placement == Placement::TextualKv {
                let name = format!("{prefix}.kv");
                let experts = kv_experts(s, &name, n, d, r);
                let layer = MoeLayer::with_random_router(s, &name, d, k, experts, r)?;
                KvProjection::Experts(MoeSlot { layer, index: next_slot(name) })
            } else {
                KvProjection::Dense {
                    key: Linear::new(s, &format!("{prefix}.wk"), d, d, false, r),
                    value: Linear::new(s, &format!("{prefix}.wv"), d, d, false, r),
                }
            };
            let gasa = with_gasa.then(|| AttentionParams::new(s, &format!("{prefix}.gasa"), d, r));
            let ffn = if config.moe_placement == Placement::Ffn {
                let name = format!("{prefix}.ffn");
                let experts = ffn_experts(s, &name, n, d, 2 * d, r);
                let layer = MoeLayer::with_random_router(s, &name, d, k, experts, r)?;
                FeedForward::Experts(MoeSlot { layer, index: next_slot(name) })
            } else {
                FeedForward::Dense(Ffn::new(s, &format!("{prefix}.ffn"), d, 2 * d, d, r))
            };
            Ok(Block { q, kv, gasa, ffn })
        };

        let local_stop = row_param(&mut s, "local.stop", d, r);
        let local_loc = Linear::new(&mut s, "local.loc", 4, d, false, r);
        let local_blocks = (0..config.layers_local)
            .map(|i| block(&mut s, &format!("local.{i}"), false, r))
            .collect::<Result<Vec<_>, _>>()?;
        let local_head = Ffn::new(&mut s, "local.head", d, d, 1, r);
        let global_stop = row_param(&mut s, "global.stop", d, r);
        let global_loc = Linear::new(&mut s, "global.loc", 3, d, false, r);
        let step_emb = s.add_init("global.step", config.max_steps + 2, d, r);
        let global_blocks = (0..config.layers_global)
            .map(|i| block(&mut s, &format!("global.{i}"), true, r))
            .collect::<Result<Vec<_>, _>>()?;
        let global_head = Ffn::new(&mut s, "global.head", d, d, 1, r);
        let sigma_head = Linear::new(&mut s, "sigma", d, 1, true, r);

        let net = Net {
            tok_emb,
            cls,
            text_pos: sinusoidal_positions(config.max_instruction_len + 1, d),
            text_blocks,
            view_proj,
            ang_proj,
            nav_emb,
            pano_block,
            local_stop,
            local_loc,
            local_blocks,
            local_head,
            global_stop,
            global_loc,
            step_emb,
            global_blocks,
            global_head,
            sigma_head,
            routing,
        };
        Ok(Policy {
            config,
            params: s,
            net,
            moe_names,
        })
    }

    /// Names of the MoE layers, indexed like the gates in a [`Decision`].
    pub fn moe_layer_names(&self) -> &[String] {
        &self.moe_names
    }

    pub fn num_moe_layers(&self) -> usize {
        self.moe_names.len()
    }

    pub fn to_checkpoint(&self, init_seed: u64) -> PolicyCheckpoint {
        PolicyCheckpoint {
            format: CHECKPOINT_FORMAT.to_string(),
            config: self.config.clone(),
            init_seed,
            params: self.params.to_checkpoint(),
        }
    }

    pub fn from_checkpoint(ck: &PolicyCheckpoint) -> Result<Policy, PolicyError> {
        if ck.format != CHECKPOINT_FORMAT {
            return Err(PolicyError::Checkpoint(format!("unexpected format '{}'", ck.format)));
        }
        let mut p = Policy::new(ck.config.clone(), ck.init_seed)?;
        p.params
            .load_checkpoint(&ck.params)
            .map_err(|e| PolicyError::Checkpoint(e.to_string()))?;
        Ok(p)
    }

    fn ctx<'a>(&self, gates: &'a mut Vec<(usize, Gate)>, shared: Option<Var>, dropout: Option<&'a mut ChaCha8Rng>) -> Ctx<'a> {
        Ctx {
            kind: self.config.routing_kind,
            shared,
            gates,
            heads: self.config.heads,
            layer_norm: self.config.layer_norm,
            dropout: match dropout {
                Some(rng) if self.config.dropout > 0.0 => Some((self.config.dropout, rng)),
                _ => None,
            },
        }
    }

    /// Token embeddings plus positions, a learned CLS row in front, then self-attention blocks.
    pub fn encode_instruction(&self, g: &mut Graph, tokens: &[u32]) -> Result<EncodedInstruction, PolicyError> {
        if tokens.is_empty() {
            return Err(PolicyError::EmptyInstruction);
        }
        if tokens.len() > self.config.max_instruction_len {
            return Err(PolicyError::InstructionTooLong {
                len: tokens.len(),
                max: self.config.max_instruction_len,
            });
        }
        if let Some(&t) = tokens.iter().find(|&&t| t as usize >= self.config.vocab) {
            return Err(PolicyError::TokenOutOfRange {
                token: t,
                vocab: self.config.vocab,
            });
        }
        let table = g.param(self.net.tok_emb);
        let idx: Vec<usize> = tokens.iter().map(|&t| t as usize).collect();
        let emb = g.gather_rows(table, &idx);
        let cls = g.param(self.net.cls);
        let x = g.concat_rows(&[cls, emb]);
        let n = tokens.len() + 1;
        let pos = Tensor2D::from_vec(n, self.config.d, self.net.text_pos.data()[..n * self.config.d].to_vec())?;
        let pos = g.input(pos);
        let mut x = g.add(x, pos);
        let mut gates = Vec::new();
        let mut ctx = self.ctx(&mut gates, None, None);
        for b in &self.net.text_blocks {
            x = b.forward(g, x, &mut ctx)?;
        }
        let cls = g.row(x, 0);
        Ok(EncodedInstruction { tokens: x, cls })
    }

    /// `36 x d` view embeddings: projected features, angle embedding and a navigable flag, then self-attention.
    pub fn embed_panorama(&self, g: &mut Graph, obs: &Observation) -> Result<Var, PolicyError> {
        if obs.view_dim != self.config.view_dim {
            return Err(ShapeError::new(format!(
                "observation has {} feature columns, policy expects {}",
                obs.view_dim, self.config.view_dim
            ))
            .into());
        }
        let feats = g.input(Tensor2D::from_vec(NUM_VIEWS, obs.view_dim, obs.features.clone())?);
        let x = self.net.view_proj.forward(g, feats);
        let mut ang = Tensor2D::zeros(NUM_VIEWS, 4);
        let mut nav = Tensor2D::zeros(NUM_VIEWS, 1);
        for v in 0..NUM_VIEWS {
            let (h, e) = (view_heading(v), view_elevation(v));
            ang.row_mut(v).copy_from_slice(&[h.sin(), h.cos(), e.sin(), e.cos()]);
            if obs.navigable[v].is_some() {
                nav.set(v, 0, 1.0);
            }
        }
        let ang = g.input(ang);
        let ang = self.net.ang_proj.forward(g, ang);
        let nav = g.input(nav);
        let nav_emb = g.param(self.net.nav_emb);
        let nav = g.matmul(nav, nav_emb);
        let x = g.add(x, ang);
        let x = g.add(x, nav);
        let mut gates = Vec::new();
        let mut ctx = self.ctx(&mut gates, None, None);
        self.net.pano_block.forward(g, x, &mut ctx)
    }

    /// Scores over `[stop; 36 views]` as a `1 x 37` row, plus the candidate mask.
    fn local_branch(
        &self,
        g: &mut Graph,
        pano: Var,
        obs: &Observation,
        instr: &EncodedInstruction,
        location: [f64; 4],
        ctx: &mut Ctx,
    ) -> Result<(Var, Vec<bool>), PolicyError> {
        let stop = g.param(self.net.local_stop);
        let mut x = g.concat_rows(&[stop, pano]);
        let loc = g.input(Tensor2D::row_vector(location.to_vec()));
        let loc = self.net.local_loc.forward(g, loc);
        x = g.add_row(x, loc);
        for b in &self.net.local_blocks {
            x = b.forward(g, x, instr.tokens, None, ctx)?;
        }
        let s = self.net.local_head.forward(g, x);
        let s = g.transpose(s);
        let mut mask = vec![false; NUM_VIEWS + 1];
        mask[0] = true;
        for (v, _) in obs.navigable_views() {
            mask[1 + v] = true;
        }
        Ok((s, mask))
    }

    /// Scores over `[stop; map nodes by id]` as a `1 x (1 + M)` row.
    fn global_branch(
        &self,
        g: &mut Graph,
        map: &TopoMap,
        current: NodeId,
        instr: &EncodedInstruction,
        ctx: &mut Ctx,
    ) -> Result<GlobalOutput, PolicyError> {
        let node_ids = map.node_ids();
        let here = map.entry(current).ok_or(PolicyError::MissingMapNode(current))?.position;
        let mut rows = Vec::with_capacity(node_ids.len() + 1);
        rows.push(g.param(self.net.global_stop));
        let mut loc = Tensor2D::zeros(node_ids.len(), 3);
        let mut steps = Vec::with_capacity(node_ids.len());
        let mut positions = Vec::with_capacity(node_ids.len() + 1);
        positions.push(here);
        for (j, &id) in node_ids.iter().enumerate() {
            rows.push(map.embedding(g, id).ok_or(PolicyError::MissingMapNode(id))?);
            let e = map.entry(id).expect("id comes from the map");
            if id != current {
                let dx = e.position[0] - here[0];
                let dy = e.position[1] - here[1];
                let dist = (dx * dx + dy * dy + (e.position[2] - here[2]).powi(2)).sqrt();
                let b = bearing(&here, &e.position);
                loc.row_mut(j).copy_from_slice(&[b.sin(), b.cos(), dist / 10.0]);
            }
            steps.push(e.last_visit_step.min(self.config.max_steps + 1));
            positions.push(e.position);
        }
        let nodes = g.concat_rows(&rows[1..]);
        let loc = g.input(loc);
        let loc = self.net.global_loc.forward(g, loc);
        let table = g.param(self.net.step_emb);
        let step = g.gather_rows(table, &steps);
        let nodes = g.add(nodes, loc);
        let nodes = g.add(nodes, step);
        let mut x = g.concat_rows(&[rows[0], nodes]);
        // The stop row sits at the current position, so its affinity to the current node is zero.
        let aff = g.input(affinity_from_positions(&positions, self.config.affinity_tau));
        for b in &self.net.global_blocks {
            x = b.forward(g, x, instr.tokens, Some(aff), ctx)?;
        }
        let s = self.net.global_head.forward(g, x);
        let scores = g.transpose(s);
        let cur_idx = 1 + node_ids.binary_search(&current).expect("current node is on the map");
        let current_row = g.row(x, cur_idx);
        Ok(GlobalOutput {
            scores,
            node_ids,
            current: current_row,
        })
    }

    /// `sigmoid(w · h + b)` on the current node's embedding.
    pub fn predict_sigma(&self, g: &mut Graph, state_embedding: Var) -> Var {
        let z = self.net.sigma_head.forward(g, state_embedding);
        g.sigmoid(z)
    }

    /// Starts an episode: encodes the instruction on `g`.
    pub fn begin(&self, g: &mut Graph, world: &NavGraph, episode: &Episode) -> Result<EpisodeState, PolicyError> {
        let instruction = self.encode_instruction(g, &episode.instruction.tokens)?;
        let start = world.position(episode.start.node)?;
        Ok(EpisodeState {
            instruction,
            task_id: episode.instruction.granularity.task_id(),
            goal: episode.instruction.goal,
            map: TopoMap::new(),
            state: episode.start,
            start,
            path: vec![episode.start.node],
            steps: 0,
            done: false,
        })
    }

    /// Observes, updates the map and scores every candidate action.
    pub fn decide(
        &self,
        g: &mut Graph,
        world: &NavGraph,
        es: &mut EpisodeState,
        dropout: Option<&mut ChaCha8Rng>,
    ) -> Result<Decision, PolicyError> {
        let step = es.steps + 1;
        let obs = observe(world, &es.state)?;
        let pano = self.embed_panorama(g, &obs)?;
        es.map.update(g, world, &es.state, &obs, pano, step)?;

        let shared = match self.config.routing_kind {
            RoutingKind::Token => None,
            kind if self.config.moe_placement != Placement::None => {
                let inputs = RoutingInputs {
                    token: None,
                    task_id: Some(es.task_id),
                    text_cls: Some(es.instruction.cls),
                    views: Some(pano),
                };
                Some(build_routing_feature(g, kind, &inputs, &self.net.routing)?.vector)
            }
            _ => None,
        };
        let mut gates = Vec::new();
        let mut ctx = self.ctx(&mut gates, shared, dropout);

        let here = world.position(es.state.node)?;
        let (dx, dy) = (here[0] - es.start[0], here[1] - es.start[1]);
        let location = [
            dx / 10.0,
            dy / 10.0,
            (dx * dx + dy * dy).sqrt() / 10.0,
            es.steps as f64 / self.config.max_steps as f64,
        ];
        let (local, local_mask) = self.local_branch(g, pano, &obs, &es.instruction, location, &mut ctx)?;
        let global = self.global_branch(g, &es.map, es.state.node, &es.instruction, &mut ctx)?;
        let sigma = self.predict_sigma(g, global.current);

        let lift = lift_matrix(&obs, &global.node_ids)?;
        let mut mask = vec![true; global.node_ids.len() + 1];
        for (j, &id) in global.node_ids.iter().enumerate() {
            let visited_elsewhere = es.map.entry(id).is_some_and(|e| e.is_visited());
            if id == es.state.node || (self.config.mask_visited && visited_elsewhere) {
                mask[1 + j] = false;
            }
        }
        let local_probs = g.masked_softmax_rows(local, Some(&local_mask));
        let (logits, probs) = fuse_scores(g, local, global.scores, sigma, &lift, &mask)?;
        let mut candidates = vec![Action::Stop];
        candidates.extend(global.node_ids.iter().map(|&n| Action::Node(n)));
        Ok(Decision {
            logits,
            probs: g.value(probs).data().to_vec(),
            mask,
            candidates,
            sigma: g.scalar(sigma),
            local_probs: g.value(local_probs).data().to_vec(),
            gates,
        })
    }

    /// Applies an action: stop, step to a neighbor, or travel through the known map.
    pub fn execute(&self, world: &NavGraph, es: &mut EpisodeState, action: Action) -> Result<(), PolicyError> {
        es.steps += 1;
        match action {
            Action::Stop => es.done = true,
            Action::Node(target) => {
                let (route, _) = es
                    .map
                    .route(es.state.node, target)
                    .ok_or(PolicyError::Unreachable(target))?;
                for &n in &route[1..] {
                    es.state = transition(world, &es.state, n)?;
                    es.path.push(n);
                }
            }
        }
        if es.steps >= self.config.max_steps {
            es.done = true;
        }
        Ok(())
    }

    /// Full rollout on a fresh tape, greedy when `rng` is `None`.
    pub fn act(&self, world: &NavGraph, episode: &Episode, mut rng: Option<&mut ChaCha8Rng>) -> Result<Rollout, PolicyError> {
        let mut g = Graph::new(&self.params);
        let mut es = self.begin(&mut g, world, episode)?;
        let mut actions = Vec::new();
        while !es.done {
            let d = self.decide(&mut g, world, &mut es, None)?;
            let a = match rng.as_deref_mut() {
                Some(r) => d.sample(r),
                None => d.greedy(),
            };
            actions.push(a);
            self.execute(world, &mut es, a)?;
        }
        Ok(Rollout {
            stopped: actions.last() == Some(&Action::Stop),
            path: es.path,
            actions,
        })
    }
}

/// Maps `[stop; 36 views]` local scores onto `[stop; map nodes]`.
///
/// A node seen through view `v` takes that view's score. Nodes not adjacent to
/// the agent take the mean score of the navigable views, which keeps the fused
/// scores shift-equivariant.
pub fn lift_matrix(obs: &Observation, node_ids: &[NodeId]) -> Result<Tensor2D, PolicyError> {
    let mut lift = Tensor2D::zeros(NUM_VIEWS + 1, node_ids.len() + 1);
    lift.set(0, 0, 1.0);
    let nav: Vec<(usize, NodeId)> = obs.navigable_views().collect();
    for &(_, n) in &nav {
        if node_ids.binary_search(&n).is_err() {
            return Err(PolicyError::MissingMapNode(n));
        }
    }
    for (j, &id) in node_ids.iter().enumerate() {
        match nav.iter().find(|&&(_, n)| n == id) {
            Some(&(v, _)) => lift.set(1 + v, 1 + j, 1.0),
            None => {
                for &(v, _) in &nav {
                    lift.set(1 + v, 1 + j, 1.0 / nav.len() as f64);
                }
            }
        }
    }
    Ok(lift)
}

/// `sigma * lifted_local + (1 - sigma) * global`, then a masked softmax.
///
/// Returns the fused logits and the action distribution.
pub fn fuse_scores(
    g: &mut Graph,
    local: Var,
    global: Var,
    sigma: Var,
    lift: &Tensor2D,
    mask: &[bool],
) -> Result<(Var, Var), PolicyError> {
    let (lr, lc) = g.shape(local);
    let (gr, gc) = g.shape(global);
    if lr != 1 || gr != 1 || lc != lift.rows() || gc != lift.cols() || mask.len() != gc {
        return Err(ShapeError::new(format!(
            "fusion shapes local 1x{lc}, global 1x{gc}, lift {}x{}, mask {}",
            lift.rows(),
            lift.cols(),
            mask.len()
        ))
        .into());
    }
    let s = g.scalar(sigma);
    if s.is_nan() {
        return Err(PolicyError::NonFinite("fusion weight"));
    }
    if !(0.0..=1.0).contains(&s) {
        return Err(PolicyError::InvalidConfig(format!("fusion weight {s} outside [0, 1]")));
    }
    let lift = g.input(lift.clone());
    let lifted = g.matmul(local, lift);
    let a = g.scale_by(sigma, lifted);
    let rest = g.affine(sigma, -1.0, 1.0);
    let b = g.scale_by(rest, global);
    let fused = g.add(a, b);
    let probs = g.masked_softmax_rows(fused, Some(mask));
    Ok((fused, probs))
}

/// Copies dense weights into every expert so a single-expert layer matches the dense policy.
pub fn copy_dense_into_experts(dense: &Policy, moe: &mut Policy) -> usize {
    let mut copied = 0;
    for id in moe.params.ids().collect::<Vec<_>>() {
        let name = moe.params.name(id).to_string();
        let dense_name = expert_to_dense_name(&name);
        if let Some(did) = dense.params.id(&dense_name) {
            if dense.params.get(did).shape() == moe.params.get(id).shape() {
                *moe.params.get_mut(id) = dense.params.get(did).clone();
                copied += 1;
            }
        }
    }
    copied
}

fn expert_to_dense_name(name: &str) -> String {
    // `local.0.wq.e0.w` -> `local.0.wq.w`; `local.0.kv.e0.wk.w` -> `local.0.wk.w`.
    let parts: Vec<&str> = name.split('.').collect();
    let mut out = Vec::with_capacity(parts.len());
    let mut i = 0;
    while i < parts.len() {
        let p = parts[i];
        if p == "kv" && parts.get(i + 1).is_some_and(|e| e.starts_with('e')) {
            i += 2;
            continue;
        }
        if p.len() > 1 && p.starts_with('e') && p[1..].chars().all(|c| c.is_ascii_digit()) {
            i += 1;
            continue;
        }
        out.push(p);
        i += 1;
    }
    out.join(".")
}

/// Nodes the agent has stood on.
pub fn visited_nodes(map: &TopoMap) -> BTreeSet<NodeId> {
    map.entries
        .iter()
        .filter(|(_, e)| e.is_visited())
        .map(|(&id, _)| id)
        .collect()
}

/// A 4-node chain with one landmark at the far end and a 3-token instruction.
pub fn four_node_fixture() -> (NavGraph, Episode) {
    use crate::envgraph::{tokens, Granularity, Instruction, Node, WorldParams};
    let nodes = vec![
        Node { id: 0, pos: [0.0, 0.0, 0.0] },
        Node { id: 1, pos: [3.0, 0.0, 0.0] },
        Node { id: 2, pos: [3.0, 3.0, 0.0] },
        Node { id: 3, pos: [0.0, 3.5, 0.0] },
    ];
    let landmarks = [(3, vec![4])].into_iter().collect();
    let world = NavGraph::new(nodes, &[[0, 1], [1, 2], [2, 3]], landmarks, 5, WorldParams::default())
        .expect("fixture world is valid");
    let episode = Episode {
        start: AgentState::new(0, 0.0),
        instruction: Instruction {
            tokens: vec![tokens::DIRECTION_BASE, tokens::DIRECTION_BASE + 2, tokens::END],
            granularity: Granularity::Fine,
            goal: 3,
            reference_path: vec![0, 1, 2, 3],
        },
    };
    (world, episode)
}
