//! Synthetic discrete navigation worlds.
//!
//! A [`NavGraph`] is an undirected, connected graph of 3D-positioned nodes.
//! Agents observe a fixed 36-view panorama (12 headings x 3 elevations) at
//! every node and move along edges. Episodes pair a start state with an
//! instruction at one of three granularities.

use std::collections::{BTreeMap, BTreeSet, BinaryHeap, HashMap};
use std::cmp::Ordering;
use std::f64::consts::PI;
use std::sync::OnceLock;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type NodeId = usize;

pub const HEADINGS: usize = 12;
pub const ELEVATIONS: usize = 3;
pub const NUM_VIEWS: usize = HEADINGS * ELEVATIONS;
/// Elevation angles of the three view rows, bottom to top.
pub const ELEVATION_ANGLES: [f64; ELEVATIONS] = [-PI / 6.0, 0.0, PI / 6.0];

pub const DEFAULT_CATEGORIES: usize = 21;
pub const DEFAULT_VIEW_DIM: usize = 32;
pub const DEFAULT_VOCAB: usize = 64;
pub const DEFAULT_BOX: [f64; 3] = [20.0, 20.0, 3.0];

/// Token layout of the instruction vocabulary.
pub mod tokens {
    pub const PAD: u32 = 0;
    /// Landmark category `c` is token `LANDMARK_BASE + c`.
    pub const LANDMARK_BASE: u32 = 1;
    /// Direction `d` (0 = east, counter-clockwise in 45 degree steps) is token `DIRECTION_BASE + d`.
    pub const DIRECTION_BASE: u32 = 22;
    pub const DIRECTIONS: u32 = 8;
    pub const END: u32 = 30;
}

const EPS_LEN: f64 = 1e-9;

#[derive(Debug, Error, PartialEq)]
pub enum EnvError {
    #[error("a world needs at least 2 nodes, got {0}")]
    TooFewNodes(usize),
    #[error("mean degree must be at least 2, got {0}")]
    BadDegree(f64),
    #[error("unknown node id {0}")]
    UnknownNode(NodeId),
    #[error("node {to} is not adjacent to {from}")]
    NotAdjacent { from: NodeId, to: NodeId },
    #[error("world has no landmarks but the granularity needs one")]
    NoLandmarks,
    #[error("no start/goal pair with a 3-10 edge shortest path")]
    GraphTooSmall,
    #[error("invalid world: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Node {
    pub id: NodeId,
    pub pos: [f64; 3],
}

/// Knobs for world generation beyond the four primary arguments.
#[derive(Debug, Clone, PartialEq)]
pub struct WorldParams {
    pub bounds: [f64; 3],
    pub categories: usize,
    pub view_dim: usize,
    /// Norm of the additive landmark embedding relative to unit-norm view noise.
    pub landmark_strength: f64,
}

impl Default for WorldParams {
    fn default() -> Self {
        WorldParams {
            bounds: DEFAULT_BOX,
            categories: DEFAULT_CATEGORIES,
            view_dim: DEFAULT_VIEW_DIM,
            landmark_strength: 1.0,
        }
    }
}

/// Connected undirected navigation graph with landmarks.
#[derive(Debug, Clone)]
pub struct NavGraph {
    nodes: Vec<Node>,
    index: HashMap<NodeId, usize>,
    /// Adjacency by node index, sorted by neighbor id.
    adj: Vec<Vec<(usize, f64)>>,
    landmarks: BTreeMap<NodeId, Vec<u32>>,
    seed: u64,
    params: WorldParams,
    geodesic: OnceLock<Vec<f64>>,
}

/// Serialized world layout.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct WorldFile {
    pub nodes: Vec<Node>,
    pub edges: Vec<[NodeId; 2]>,
    pub landmarks: BTreeMap<NodeId, Vec<u32>>,
    pub seed: u64,
}

impl PartialEq for NavGraph {
    fn eq(&self, other: &Self) -> bool {
        self.to_file() == other.to_file() && self.params == other.params
    }
}

fn dist3(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

/// Bearing from `a` to `b` in the horizontal plane, radians in [0, 2pi); +x is 0.
pub fn bearing(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    normalize_angle((b[1] - a[1]).atan2(b[0] - a[0]))
}

pub fn normalize_angle(theta: f64) -> f64 {
    let t = theta.rem_euclid(2.0 * PI);
    if t >= 2.0 * PI {
        0.0
    } else {
        t
    }
}

/// View slot (elevation row * 12 + heading sector) in which `to` is seen from `from`.
pub fn view_slot(from: &[f64; 3], to: &[f64; 3]) -> usize {
    let sector = ((bearing(from, to) / (2.0 * PI / HEADINGS as f64)).floor() as usize) % HEADINGS;
    let horiz = ((to[0] - from[0]).powi(2) + (to[1] - from[1]).powi(2)).sqrt();
    let pitch = (to[2] - from[2]).atan2(horiz);
    let row = if pitch < -PI / 12.0 {
        0
    } else if pitch > PI / 12.0 {
        2
    } else {
        1
    };
    row * HEADINGS + sector
}

/// Heading (radians) of view `v`'s centre.
pub fn view_heading(v: usize) -> f64 {
    ((v % HEADINGS) as f64 + 0.5) * 2.0 * PI / HEADINGS as f64
}

pub fn view_elevation(v: usize) -> f64 {
    ELEVATION_ANGLES[v / HEADINGS]
}

/// 8-way compass direction index of a bearing (0 = +x, counter-clockwise).
pub fn direction_index(theta: f64) -> u32 {
    ((normalize_angle(theta) / (PI / 4.0)).round() as u32) % tokens::DIRECTIONS
}

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

fn unit_vector(seed: u64, dim: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-12 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

/// Fixed embedding of a landmark category, shared by every world.
pub fn landmark_embedding(category: u32, dim: usize, strength: f64) -> Vec<f64> {
    unit_vector(splitmix(0x4C41_4E44_4D41_524B ^ category as u64), dim)
        .into_iter()
        .map(|x| x * strength)
        .collect()
}

impl NavGraph {
    /// Builds and validates a graph from explicit nodes and edges.
    pub fn new(
        nodes: Vec<Node>,
        edges: &[[NodeId; 2]],
        landmarks: BTreeMap<NodeId, Vec<u32>>,
        seed: u64,
        params: WorldParams,
    ) -> Result<Self, EnvError> {
        let mut nodes = nodes;
        nodes.sort_by_key(|n| n.id);
        if nodes.is_empty() {
            return Err(EnvError::Invalid("no nodes".into()));
        }
        let mut index = HashMap::with_capacity(nodes.len());
        for (i, n) in nodes.iter().enumerate() {
            if index.insert(n.id, i).is_some() {
                return Err(EnvError::Invalid(format!("duplicate node id {}", n.id)));
            }
            if n.pos.iter().any(|x| !x.is_finite()) {
                return Err(EnvError::Invalid(format!("non-finite position at node {}", n.id)));
            }
        }
        let mut adj = vec![Vec::new(); nodes.len()];
        let mut seen = BTreeSet::new();
        for &[a, b] in edges {
            if a == b {
                return Err(EnvError::Invalid(format!("self-loop at {a}")));
            }
            let ia = *index.get(&a).ok_or(EnvError::UnknownNode(a))?;
            let ib = *index.get(&b).ok_or(EnvError::UnknownNode(b))?;
            if !seen.insert((a.min(b), a.max(b))) {
                continue;
            }
            let len = dist3(&nodes[ia].pos, &nodes[ib].pos);
            adj[ia].push((ib, len));
            adj[ib].push((ia, len));
        }
        for list in adj.iter_mut() {
            list.sort_by_key(|&(j, _)| nodes[j].id);
        }
        for (id, cats) in &landmarks {
            if !index.contains_key(id) {
                return Err(EnvError::UnknownNode(*id));
            }
            if let Some(c) = cats.iter().find(|&&c| c as usize >= params.categories) {
                return Err(EnvError::Invalid(format!("landmark category {c} out of range")));
            }
        }
        let g = NavGraph {
            nodes,
            index,
            adj,
            landmarks,
            seed,
            params,
            geodesic: OnceLock::new(),
        };
        if !g.is_connected() {
            return Err(EnvError::Invalid("graph is not connected".into()));
        }
        for i in 0..g.nodes.len() {
            let mut slots = BTreeSet::new();
            for &(j, _) in &g.adj[i] {
                if !slots.insert(view_slot(&g.nodes[i].pos, &g.nodes[j].pos)) {
                    return Err(EnvError::Invalid(format!(
                        "two neighbors of node {} share a view",
                        g.nodes[i].id
                    )));
                }
            }
        }
        Ok(g)
    }

    pub fn from_file(file: &WorldFile, params: WorldParams) -> Result<Self, EnvError> {
        NavGraph::new(
            file.nodes.clone(),
            &file.edges,
            file.landmarks.clone(),
            file.seed,
            params,
        )
    }

    pub fn to_file(&self) -> WorldFile {
        WorldFile {
            nodes: self.nodes.clone(),
            edges: self.edges(),
            landmarks: self.landmarks.clone(),
            seed: self.seed,
        }
    }

    fn is_connected(&self) -> bool {
        let mut seen = vec![false; self.nodes.len()];
        let mut stack = vec![0];
        seen[0] = true;
        while let Some(u) = stack.pop() {
            for &(v, _) in &self.adj[u] {
                if !seen[v] {
                    seen[v] = true;
                    stack.push(v);
                }
            }
        }
        seen.into_iter().all(|s| s)
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn params(&self) -> &WorldParams {
        &self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn node_ids(&self) -> impl Iterator<Item = NodeId> + '_ {
        self.nodes.iter().map(|n| n.id)
    }

    pub fn contains(&self, id: NodeId) -> bool {
        self.index.contains_key(&id)
    }

    fn idx(&self, id: NodeId) -> Result<usize, EnvError> {
        self.index.get(&id).copied().ok_or(EnvError::UnknownNode(id))
    }

    pub fn position(&self, id: NodeId) -> Result<[f64; 3], EnvError> {
        Ok(self.nodes[self.idx(id)?].pos)
    }

    /// Unordered edges as `[smaller, larger]` id pairs, sorted.
    pub fn edges(&self) -> Vec<[NodeId; 2]> {
        let mut out = Vec::new();
        for (i, list) in self.adj.iter().enumerate() {
            let a = self.nodes[i].id;
            for &(j, _) in list {
                let b = self.nodes[j].id;
                if a < b {
                    out.push([a, b]);
                }
            }
        }
        out.sort();
        out
    }

    pub fn num_edges(&self) -> usize {
        self.adj.iter().map(Vec::len).sum::<usize>() / 2
    }

    pub fn mean_degree(&self) -> f64 {
        2.0 * self.num_edges() as f64 / self.nodes.len() as f64
    }

    /// Neighbors of `id` with edge lengths, sorted by neighbor id.
    pub fn neighbors(&self, id: NodeId) -> Result<Vec<(NodeId, f64)>, EnvError> {
        let i = self.idx(id)?;
        Ok(self.adj[i].iter().map(|&(j, l)| (self.nodes[j].id, l)).collect())
    }

    pub fn degree(&self, id: NodeId) -> Result<usize, EnvError> {
        Ok(self.adj[self.idx(id)?].len())
    }

    pub fn edge_length(&self, a: NodeId, b: NodeId) -> Option<f64> {
        let ia = self.index.get(&a)?;
        let ib = self.index.get(&b)?;
        self.adj[*ia].iter().find(|&&(j, _)| j == *ib).map(|&(_, l)| l)
    }

    pub fn is_adjacent(&self, a: NodeId, b: NodeId) -> bool {
        self.edge_length(a, b).is_some()
    }

    pub fn euclidean(&self, a: NodeId, b: NodeId) -> Result<f64, EnvError> {
        Ok(dist3(&self.position(a)?, &self.position(b)?))
    }

    pub fn landmarks(&self) -> &BTreeMap<NodeId, Vec<u32>> {
        &self.landmarks
    }

    pub fn landmarks_at(&self, id: NodeId) -> &[u32] {
        self.landmarks.get(&id).map(Vec::as_slice).unwrap_or(&[])
    }

    fn dijkstra(&self, source: usize) -> Vec<f64> {
        #[derive(PartialEq)]
        struct Item(f64, usize);
        impl Eq for Item {}
        impl Ord for Item {
            fn cmp(&self, o: &Self) -> Ordering {
                o.0.total_cmp(&self.0).then_with(|| o.1.cmp(&self.1))
            }
        }
        impl PartialOrd for Item {
            fn partial_cmp(&self, o: &Self) -> Option<Ordering> {
                Some(self.cmp(o))
            }
        }
        let mut dist = vec![f64::INFINITY; self.nodes.len()];
        dist[source] = 0.0;
        let mut heap = BinaryHeap::new();
        heap.push(Item(0.0, source));
        while let Some(Item(d, u)) = heap.pop() {
            if d > dist[u] {
                continue;
            }
            for &(v, w) in &self.adj[u] {
                let nd = d + w;
                if nd < dist[v] {
                    dist[v] = nd;
                    heap.push(Item(nd, v));
                }
            }
        }
        dist
    }

    fn geodesic_table(&self) -> &[f64] {
        self.geodesic.get_or_init(|| {
            let n = self.nodes.len();
            let mut table = Vec::with_capacity(n * n);
            for i in 0..n {
                table.extend(self.dijkstra(i));
            }
            table
        })
    }

    /// Shortest-path distance in meters.
    pub fn geodesic(&self, a: NodeId, b: NodeId) -> Result<f64, EnvError> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        Ok(self.geodesic_table()[ia * self.nodes.len() + ib])
    }

    /// Metric shortest path; among equal-length paths the one whose successive
    /// next nodes have the smallest ids is returned.
    pub fn shortest_path(&self, a: NodeId, b: NodeId) -> Result<(Vec<NodeId>, f64), EnvError> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        let n = self.nodes.len();
        let table = self.geodesic_table();
        let to_b = |i: usize| table[i * n + ib];
        let mut path = vec![a];
        let mut u = ia;
        while u != ib {
            let du = to_b(u);
            let next = self.adj[u]
                .iter()
                .find(|&&(v, w)| (w + to_b(v) - du).abs() <= EPS_LEN * (1.0 + du))
                .map(|&(v, _)| v)
                .expect("connected graph has a successor on every shortest path");
            path.push(self.nodes[next].id);
            u = next;
        }
        Ok((path, to_b(ia)))
    }

    /// Sum of edge lengths along `path`; errors on non-adjacent steps.
    pub fn path_length(&self, path: &[NodeId]) -> Result<f64, EnvError> {
        let mut total = 0.0;
        for w in path.windows(2) {
            total += self.edge_length(w[0], w[1]).ok_or(EnvError::NotAdjacent {
                from: w[0],
                to: w[1],
            })?;
        }
        if let Some(&first) = path.first() {
            self.idx(first)?;
        }
        Ok(total)
    }
}

/// Generates a random connected world.
///
/// Nodes are sampled uniformly in the bounding box. Candidate edges are taken
/// shortest-first: first a spanning forest is grown until the graph is
/// connected, then further edges are added until the mean degree target is
/// met. An edge is only admissible if it occupies a free view slot at both
/// endpoints, so every neighbor is visible in exactly one view.
pub fn generate_world(
    seed: u64,
    n_nodes: usize,
    mean_degree: f64,
    n_landmarks: usize,
) -> Result<NavGraph, EnvError> {
    generate_world_with(seed, n_nodes, mean_degree, n_landmarks, WorldParams::default())
}

pub fn generate_world_with(
    seed: u64,
    n_nodes: usize,
    mean_degree: f64,
    n_landmarks: usize,
    params: WorldParams,
) -> Result<NavGraph, EnvError> {
    if n_nodes < 2 {
        return Err(EnvError::TooFewNodes(n_nodes));
    }
    if !(mean_degree >= 2.0) {
        return Err(EnvError::BadDegree(mean_degree));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _attempt in 0..64 {
        let nodes: Vec<Node> = (0..n_nodes)
            .map(|id| Node {
                id,
                pos: [
                    rng.gen::<f64>() * params.bounds[0],
                    rng.gen::<f64>() * params.bounds[1],
                    rng.gen::<f64>() * params.bounds[2],
                ],
            })
            .collect();
        let Some(edges) = build_edges(&nodes, mean_degree) else {
            continue;
        };
        let mut landmarks = BTreeMap::new();
        let mut ids: Vec<NodeId> = (0..n_nodes).collect();
        ids.shuffle(&mut rng);
        let mut cats: Vec<u32> = (0..params.categories as u32).collect();
        cats.shuffle(&mut rng);
        for (k, &id) in ids.iter().take(n_landmarks.min(n_nodes)).enumerate() {
            let c = if k < cats.len() {
                cats[k]
            } else {
                rng.gen_range(0..params.categories as u32)
            };
            landmarks.insert(id, vec![c]);
        }
        return NavGraph::new(nodes, &edges, landmarks, seed, params);
    }
    Err(EnvError::Invalid("could not build a connected world".into()))
}

fn build_edges(nodes: &[Node], mean_degree: f64) -> Option<Vec<[NodeId; 2]>> {
    let n = nodes.len();
    let mut pairs = Vec::with_capacity(n * (n - 1) / 2);
    for i in 0..n {
        for j in i + 1..n {
            pairs.push((dist3(&nodes[i].pos, &nodes[j].pos), i, j));
        }
    }
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0).then((a.1, a.2).cmp(&(b.1, b.2))));

    let mut slots = vec![BTreeSet::new(); n];
    let mut used = vec![false; pairs.len()];
    let mut edges = Vec::new();
    let mut parent: Vec<usize> = (0..n).collect();
    fn find(p: &mut [usize], mut x: usize) -> usize {
        while p[x] != x {
            p[x] = p[p[x]];
            x = p[x];
        }
        x
    }
    let admissible = |slots: &[BTreeSet<usize>], i: usize, j: usize| {
        !slots[i].contains(&view_slot(&nodes[i].pos, &nodes[j].pos))
            && !slots[j].contains(&view_slot(&nodes[j].pos, &nodes[i].pos))
    };
    let add = |slots: &mut [BTreeSet<usize>], edges: &mut Vec<[NodeId; 2]>, i: usize, j: usize| {
        slots[i].insert(view_slot(&nodes[i].pos, &nodes[j].pos));
        slots[j].insert(view_slot(&nodes[j].pos, &nodes[i].pos));
        edges.push([nodes[i].id, nodes[j].id]);
    };

    let mut components = n;
    for (k, &(_, i, j)) in pairs.iter().enumerate() {
        if components == 1 {
            break;
        }
        let (ri, rj) = (find(&mut parent, i), find(&mut parent, j));
        if ri != rj && admissible(&slots, i, j) {
            parent[ri] = rj;
            components -= 1;
            used[k] = true;
            add(&mut slots, &mut edges, i, j);
        }
    }
    if components != 1 {
        return None;
    }
    for (k, &(_, i, j)) in pairs.iter().enumerate() {
        if 2.0 * edges.len() as f64 / n as f64 >= mean_degree {
            break;
        }
        if !used[k] && admissible(&slots, i, j) {
            used[k] = true;
            add(&mut slots, &mut edges, i, j);
        }
    }
    Some(edges)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AgentState {
    pub node: NodeId,
    /// Radians in [0, 2pi).
    pub heading: f64,
    /// One of the three view-row elevations.
    pub elevation: f64,
}

impl AgentState {
    pub fn new(node: NodeId, heading: f64) -> Self {
        AgentState {
            node,
            heading: normalize_angle(heading),
            elevation: 0.0,
        }
    }
}

/// Panoramic observation: 36 view features plus the neighbor visible in each view.
#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub view_dim: usize,
    /// Row-major `NUM_VIEWS x view_dim`.
    pub features: Vec<f64>,
    pub navigable: [Option<NodeId>; NUM_VIEWS],
}

impl Observation {
    pub fn view(&self, v: usize) -> &[f64] {
        &self.features[v * self.view_dim..(v + 1) * self.view_dim]
    }

    pub fn navigable_views(&self) -> impl Iterator<Item = (usize, NodeId)> + '_ {
        self.navigable
            .iter()
            .enumerate()
            .filter_map(|(v, n)| n.map(|n| (v, n)))
    }
}

/// Deterministic panorama at the agent's node.
///
/// Each view is a seeded unit-norm vector. A neighbor's landmarks are added to
/// the view facing that neighbor; the node's own landmarks are added to the
/// downward-looking row.
pub fn observe(g: &NavGraph, s: &AgentState) -> Result<Observation, EnvError> {
    let i = g.idx(s.node)?;
    let dim = g.params.view_dim;
    let mut features = Vec::with_capacity(NUM_VIEWS * dim);
    for v in 0..NUM_VIEWS {
        let key = splitmix(splitmix(g.seed ^ 0xD1B5_4A32_D192_ED03) ^ (s.node as u64).wrapping_mul(64) ^ v as u64);
        features.extend(unit_vector(key, dim));
    }
    let mut navigable = [None; NUM_VIEWS];
    let here = g.nodes[i].pos;
    for &(j, _) in &g.adj[i] {
        let nb = g.nodes[j];
        let v = view_slot(&here, &nb.pos);
        navigable[v] = Some(nb.id);
        for &c in g.landmarks_at(nb.id) {
            let emb = landmark_embedding(c, dim, g.params.landmark_strength);
            for (f, e) in features[v * dim..(v + 1) * dim].iter_mut().zip(&emb) {
                *f += e;
            }
        }
    }
    for &c in g.landmarks_at(s.node) {
        let emb = landmark_embedding(c, dim, g.params.landmark_strength);
        for v in 0..HEADINGS {
            for (f, e) in features[v * dim..(v + 1) * dim].iter_mut().zip(&emb) {
                *f += e;
            }
        }
    }
    Ok(Observation {
        view_dim: dim,
        features,
        navigable,
    })
}

/// Moves the agent to `target` (an adjacent node, or its own node to stay).
pub fn transition(g: &NavGraph, s: &AgentState, target: NodeId) -> Result<AgentState, EnvError> {
    let from = g.position(s.node)?;
    if target == s.node {
        return Ok(AgentState {
            elevation: 0.0,
            ..*s
        });
    }
    if !g.is_adjacent(s.node, target) {
        g.idx(target)?;
        return Err(EnvError::NotAdjacent {
            from: s.node,
            to: target,
        });
    }
    let to = g.position(target)?;
    Ok(AgentState {
        node: target,
        heading: bearing(&from, &to),
        elevation: 0.0,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Granularity {
    Fine,
    Coarse,
    Zero,
}

impl Granularity {
    pub const ALL: [Granularity; 3] = [Granularity::Fine, Granularity::Coarse, Granularity::Zero];

    /// Task index used for task-embedding routing.
    pub fn task_id(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Granularity::Fine => "fine",
            Granularity::Coarse => "coarse",
            Granularity::Zero => "zero",
        }
    }
}

impl std::str::FromStr for Granularity {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "fine" => Ok(Granularity::Fine),
            "coarse" => Ok(Granularity::Coarse),
            "zero" => Ok(Granularity::Zero),
            other => Err(format!("unknown granularity {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Instruction {
    pub tokens: Vec<u32>,
    pub granularity: Granularity,
    pub goal: NodeId,
    pub reference_path: Vec<NodeId>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    pub start: AgentState,
    pub instruction: Instruction,
}

/// One line of an episode file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRecord {
    pub start: NodeId,
    pub heading: f64,
    pub tokens: Vec<u32>,
    pub granularity: Granularity,
    pub goal: NodeId,
    pub reference_path: Vec<NodeId>,
    /// Seed of the world the episode belongs to, when a file mixes worlds.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub world: Option<u64>,
}

impl Episode {
    pub fn to_record(&self, world: Option<u64>) -> EpisodeRecord {
        EpisodeRecord {
            start: self.start.node,
            heading: self.start.heading,
            tokens: self.instruction.tokens.clone(),
            granularity: self.instruction.granularity,
            goal: self.instruction.goal,
            reference_path: self.instruction.reference_path.clone(),
            world,
        }
    }

    pub fn from_record(r: &EpisodeRecord) -> Self {
        Episode {
            start: AgentState::new(r.start, r.heading),
            instruction: Instruction {
                tokens: r.tokens.clone(),
                granularity: r.granularity,
                goal: r.goal,
                reference_path: r.reference_path.clone(),
            },
        }
    }
}

pub const MIN_PATH_EDGES: usize = 3;
pub const MAX_PATH_EDGES: usize = 10;

/// Samples a start state and an instruction at the given granularity.
pub fn generate_episode(g: &NavGraph, seed: u64, granularity: Granularity) -> Result<Episode, EnvError> {
    let mut rng = ChaCha8Rng::seed_from_u64(splitmix(seed ^ 0x5EED_E915_0DE0_0000));
    let mut goals: Vec<NodeId> = match granularity {
        Granularity::Fine => g.node_ids().collect(),
        _ => {
            if g.landmarks.is_empty() {
                return Err(EnvError::NoLandmarks);
            }
            g.landmarks.keys().copied().collect()
        }
    };
    goals.shuffle(&mut rng);
    for goal in goals {
        let starts: Vec<NodeId> = g
            .node_ids()
            .filter(|&s| {
                let (p, _) = g.shortest_path(s, goal).expect("ids come from the graph");
                (MIN_PATH_EDGES..=MAX_PATH_EDGES).contains(&(p.len() - 1))
            })
            .collect();
        let Some(&start) = starts.choose(&mut rng) else {
            continue;
        };
        let (reference_path, _) = g.shortest_path(start, goal)?;
        let tokens = match granularity {
            Granularity::Fine => {
                let mut t: Vec<u32> = reference_path
                    .windows(2)
                    .map(|w| {
                        let b = bearing(&g.position(w[0]).unwrap(), &g.position(w[1]).unwrap());
                        tokens::DIRECTION_BASE + direction_index(b)
                    })
                    .collect();
                t.push(tokens::END);
                t
            }
            Granularity::Zero => vec![tokens::LANDMARK_BASE + g.landmarks_at(goal)[0]],
            Granularity::Coarse => {
                let mut t = vec![tokens::LANDMARK_BASE + g.landmarks_at(goal)[0]];
                let mut others: Vec<(f64, NodeId)> = g
                    .landmarks
                    .keys()
                    .filter(|&&n| n != goal)
                    .map(|&n| (g.geodesic(goal, n).unwrap(), n))
                    .collect();
                others.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
                let k = rng.gen_range(2..=4usize).min(others.len());
                t.extend(
                    others[..k]
                        .iter()
                        .map(|&(_, n)| tokens::LANDMARK_BASE + g.landmarks_at(n)[0]),
                );
                t
            }
        };
        let heading = (rng.gen_range(0..HEADINGS) as f64) * 2.0 * PI / HEADINGS as f64;
        return Ok(Episode {
            start: AgentState::new(start, heading),
            instruction: Instruction {
                tokens,
                granularity,
                goal,
                reference_path,
            },
        });
    }
    Err(EnvError::GraphTooSmall)
}
