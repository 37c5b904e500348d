//! Sparse mixture-of-experts: router, top-k dispatch, load balancing and routing features.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::numcore::layers::{Ffn, Linear};
use crate::numcore::{Graph, ParamId, ParamStore, ShapeError, Tensor2D, Var};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum MoeError {
    #[error("routing feature has dimension {got}, router expects {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("routing kind {kind} requires {input}")]
    MissingInput { kind: RoutingKind, input: &'static str },
    #[error("balance statistics are empty")]
    EmptyStats,
    #[error("top-k of {k} is invalid for {n} experts")]
    InvalidTopK { k: usize, n: usize },
    #[error("{routing_rows} routing rows for {input_rows} input rows")]
    RowMismatch { routing_rows: usize, input_rows: usize },
    #[error(transparent)]
    Shape(#[from] ShapeError),
}

/// What the router conditions on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RoutingKind {
    Token,
    Task,
    Text,
    Multimodal,
    TextTask,
    MultimodalTask,
}

impl RoutingKind {
    pub const ALL: [RoutingKind; 6] = [
        RoutingKind::Token,
        RoutingKind::Task,
        RoutingKind::Text,
        RoutingKind::TextTask,
        RoutingKind::Multimodal,
        RoutingKind::MultimodalTask,
    ];

    pub fn name(self) -> &'static str {
        match self {
            RoutingKind::Token => "token",
            RoutingKind::Task => "task",
            RoutingKind::Text => "text",
            RoutingKind::Multimodal => "multimodal",
            RoutingKind::TextTask => "text_task",
            RoutingKind::MultimodalTask => "multimodal_task",
        }
    }

    pub fn uses_task(self) -> bool {
        matches!(self, RoutingKind::Task | RoutingKind::TextTask | RoutingKind::MultimodalTask)
    }
}

impl fmt::Display for RoutingKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for RoutingKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        RoutingKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| format!("unknown routing kind '{s}'"))
    }
}

/// Where experts replace dense weights in the policy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Placement {
    None,
    Ffn,
    VisualQuery,
    TextualKv,
}

impl Placement {
    pub const ALL: [Placement; 4] = [Placement::None, Placement::Ffn, Placement::VisualQuery, Placement::TextualKv];

    pub fn name(self) -> &'static str {
        match self {
            Placement::None => "none",
            Placement::Ffn => "ffn",
            Placement::VisualQuery => "visual_query",
            Placement::TextualKv => "textual_kv",
        }
    }
}

impl fmt::Display for Placement {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Placement {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Placement::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| format!("unknown placement '{s}'"))
    }
}

/// A parameter block that maps rows independently.
pub trait Expert {
    fn forward(&self, g: &mut Graph, x: Var) -> Var;
}

impl Expert for Linear {
    fn forward(&self, g: &mut Graph, x: Var) -> Var {
        Linear::forward(self, g, x)
    }
}

impl Expert for Ffn {
    fn forward(&self, g: &mut Graph, x: Var) -> Var {
        Ffn::forward(self, g, x)
    }
}

/// Key and value projections sharing one gate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KvExpert {
    pub key: Linear,
    pub value: Linear,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MoeLayer<E> {
    pub name: String,
    pub experts: Vec<E>,
    /// Router weight, `d_route x N`.
    pub router: ParamId,
    pub k: usize,
}

/// Router output for one forward call.
#[derive(Debug, Clone)]
pub struct Gate {
    /// `rows x N` router probabilities on the tape.
    pub probs: Var,
    /// Selected experts per routing row, in descending probability.
    pub selected: Vec<Vec<usize>>,
}

/// Plain-value snapshot of a gate, for logs and balance statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GateRecord {
    pub layer: String,
    pub probs: Vec<Vec<f64>>,
    pub selected: Vec<Vec<usize>>,
}

/// Indices of the `k` largest entries, descending; ties go to the smaller index.
pub fn top_k(p: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..p.len()).collect();
    idx.sort_by(|&a, &b| p[b].total_cmp(&p[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

/// Index of the largest entry; ties go to the smaller index.
pub fn argmax(p: &[f64]) -> usize {
    top_k(p, 1)[0]
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}

impl<E> MoeLayer<E> {
    /// Creates a layer whose router starts at zero (uniform routing).
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        d_route: usize,
        k: usize,
        experts: Vec<E>,
    ) -> Result<Self, MoeError> {
        let n = experts.len();
        if k == 0 || k > n {
            return Err(MoeError::InvalidTopK { k, n });
        }
        let router = store.add_zeros(format!("{name}.router"), d_route, n);
        Ok(MoeLayer {
            name: name.to_string(),
            experts,
            router,
            k,
        })
    }

    /// Like [`MoeLayer::new`] but with a Gaussian router (std `1/sqrt(d_route)`),
    /// so routing starts without exact ties.
    pub fn with_random_router<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        d_route: usize,
        k: usize,
        experts: Vec<E>,
        rng: &mut R,
    ) -> Result<Self, MoeError> {
        let n = experts.len();
        if k == 0 || k > n {
            return Err(MoeError::InvalidTopK { k, n });
        }
        let router = store.add_init(format!("{name}.router"), d_route, n, rng);
        Ok(MoeLayer {
            name: name.to_string(),
            experts,
            router,
            k,
        })
    }

    pub fn num_experts(&self) -> usize {
        self.experts.len()
    }

    pub fn route_dim(&self, store: &ParamStore) -> usize {
        store.get(self.router).rows()
    }

    /// Router probabilities for one feature vector, off the tape.
    pub fn route(&self, store: &ParamStore, x_r: &[f64]) -> Result<Vec<f64>, MoeError> {
        let w = store.get(self.router);
        if x_r.len() != w.rows() {
            return Err(MoeError::DimensionMismatch {
                expected: w.rows(),
                got: x_r.len(),
            });
        }
        let logits: Vec<f64> = (0..w.cols())
            .map(|j| x_r.iter().enumerate().map(|(i, x)| x * w.get(i, j)).sum())
            .collect();
        Ok(softmax(&logits))
    }

    /// Router probabilities and top-k selection on the tape. `x_r` is `rows x d_route`.
    pub fn gate(&self, g: &mut Graph, x_r: Var) -> Result<Gate, MoeError> {
        let expected = self.route_dim(g.params());
        let got = g.shape(x_r).1;
        if got != expected {
            return Err(MoeError::DimensionMismatch { expected, got });
        }
        let w = g.param(self.router);
        let logits = g.matmul(x_r, w);
        let probs = g.softmax_rows(logits);
        let pv = g.value(probs);
        let selected = (0..pv.rows()).map(|r| top_k(pv.row(r), self.k)).collect();
        Ok(Gate { probs, selected })
    }

    /// `sum_{i in top-k} P_i f_i(x)` for each row, without renormalising.
    ///
    /// `gate` has either one routing row (shared by every input row) or one per
    /// input row. Experts that no row selects are never evaluated.
    pub fn combine(
        &self,
        g: &mut Graph,
        gate: &Gate,
        x: Var,
        mut apply: impl FnMut(&mut Graph, &E, Var) -> Var,
    ) -> Result<Var, MoeError> {
        let rows = g.shape(x).0;
        let routing_rows = gate.selected.len();
        if routing_rows != 1 && routing_rows != rows {
            return Err(MoeError::RowMismatch {
                routing_rows,
                input_rows: rows,
            });
        }
        let mut out: Option<Var> = None;
        let mut push = |g: &mut Graph, term: Var| -> Result<(), MoeError> {
            out = Some(match out {
                None => term,
                Some(acc) => {
                    if g.shape(acc) != g.shape(term) {
                        return Err(ShapeError::new("expert outputs differ in shape").into());
                    }
                    g.add(acc, term)
                }
            });
            Ok(())
        };
        if routing_rows == 1 {
            for &i in &gate.selected[0] {
                let p = g.slice_cols(gate.probs, i, 1);
                let y = apply(g, &self.experts[i], x);
                let term = g.scale_by(p, y);
                push(g, term)?;
            }
        } else {
            for i in 0..self.experts.len() {
                let rows_i: Vec<usize> = (0..rows).filter(|&r| gate.selected[r].contains(&i)).collect();
                if rows_i.is_empty() {
                    continue;
                }
                let all = rows_i.len() == rows;
                let xi = if all { x } else { g.gather_rows(x, &rows_i) };
                let y = apply(g, &self.experts[i], xi);
                let col = g.slice_cols(gate.probs, i, 1);
                let w = if all { col } else { g.gather_rows(col, &rows_i) };
                let term = g.mul_col(y, w);
                let term = if all {
                    term
                } else {
                    g.scatter_rows(term, &rows_i, rows)
                };
                push(g, term)?;
            }
        }
        Ok(out.expect("top-k selects at least one expert"))
    }

    pub fn record(&self, g: &Graph, gate: &Gate) -> GateRecord {
        let pv = g.value(gate.probs);
        GateRecord {
            layer: self.name.clone(),
            probs: (0..pv.rows()).map(|r| pv.row(r).to_vec()).collect(),
            selected: gate.selected.clone(),
        }
    }
}

impl<E: Expert> MoeLayer<E> {
    /// Gate and combine in one call.
    pub fn forward(&self, g: &mut Graph, x: Var, x_r: Var) -> Result<(Var, Gate), MoeError> {
        let gate = self.gate(g, x_r)?;
        let y = self.combine(g, &gate, x, |g, e, xi| e.forward(g, xi))?;
        Ok((y, gate))
    }
}

impl MoeLayer<KvExpert> {
    /// Keys and values from the same gate.
    pub fn forward_kv(&self, g: &mut Graph, x: Var, x_r: Var) -> Result<(Var, Var, Gate), MoeError> {
        let gate = self.gate(g, x_r)?;
        let k = self.combine(g, &gate, x, |g, e, xi| e.key.forward(g, xi))?;
        let v = self.combine(g, &gate, x, |g, e, xi| e.value.forward(g, xi))?;
        Ok((k, v, gate))
    }
}

pub fn linear_experts<R: Rng>(
    store: &mut ParamStore,
    name: &str,
    n: usize,
    d_in: usize,
    d_out: usize,
    bias: bool,
    rng: &mut R,
) -> Vec<Linear> {
    (0..n)
        .map(|i| Linear::new(store, &format!("{name}.e{i}"), d_in, d_out, bias, rng))
        .collect()
}

pub fn ffn_experts<R: Rng>(store: &mut ParamStore, name: &str, n: usize, d: usize, hidden: usize, rng: &mut R) -> Vec<Ffn> {
    (0..n)
        .map(|i| Ffn::new(store, &format!("{name}.e{i}"), d, hidden, d, rng))
        .collect()
}

pub fn kv_experts<R: Rng>(store: &mut ParamStore, name: &str, n: usize, d: usize, rng: &mut R) -> Vec<KvExpert> {
    (0..n)
        .map(|i| KvExpert {
            key: Linear::new(store, &format!("{name}.e{i}.wk"), d, d, false, rng),
            value: Linear::new(store, &format!("{name}.e{i}.wv"), d, d, false, rng),
        })
        .collect()
}

/// Expert utilisation over a set of routing rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BalanceStats {
    /// Fraction of rows whose argmax expert is `i`.
    pub f: Vec<f64>,
    /// Mean router probability of expert `i`.
    pub d: Vec<f64>,
    /// Rows counted.
    pub k: usize,
}

/// Running argmax counts and probability sums for one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct BalanceAccumulator {
    pub counts: Vec<usize>,
    pub prob_sums: Vec<f64>,
    pub rows: usize,
}

impl BalanceAccumulator {
    pub fn new(n: usize) -> Self {
        BalanceAccumulator {
            counts: vec![0; n],
            prob_sums: vec![0.0; n],
            rows: 0,
        }
    }

    pub fn add_row(&mut self, p: &[f64]) {
        self.counts[argmax(p)] += 1;
        for (s, v) in self.prob_sums.iter_mut().zip(p) {
            *s += v;
        }
        self.rows += 1;
    }

    pub fn add_tensor(&mut self, probs: &Tensor2D) {
        for r in 0..probs.rows() {
            self.add_row(probs.row(r));
        }
    }

    pub fn stats(&self) -> Result<BalanceStats, MoeError> {
        if self.rows == 0 {
            return Err(MoeError::EmptyStats);
        }
        let k = self.rows as f64;
        Ok(BalanceStats {
            f: self.counts.iter().map(|&c| c as f64 / k).collect(),
            d: self.prob_sums.iter().map(|&s| s / k).collect(),
            k: self.rows,
        })
    }
}

/// `N * sum_i F_i D_i`.
pub fn balance_loss(stats: &BalanceStats, n: usize) -> Result<f64, MoeError> {
    if stats.k == 0 || stats.f.is_empty() {
        return Err(MoeError::EmptyStats);
    }
    Ok(n as f64 * stats.f.iter().zip(&stats.d).map(|(f, d)| f * d).sum::<f64>())
}

/// Gradient of [`balance_loss`] with respect to each probability entry of a
/// routing row, holding the argmax fractions fixed: `N F_i / K`.
pub fn balance_row_gradient(stats: &BalanceStats, n: usize) -> Vec<f64> {
    stats.f.iter().map(|f| n as f64 * f / stats.k as f64).collect()
}

/// The balance loss built on the tape from every routing row of `probs`.
pub fn balance_loss_on_tape(g: &mut Graph, probs: &[Var], n: usize) -> Result<Var, MoeError> {
    if probs.is_empty() {
        return Err(MoeError::EmptyStats);
    }
    let all = g.concat_rows(probs);
    let mut acc = BalanceAccumulator::new(n);
    acc.add_tensor(g.value(all));
    let stats = acc.stats()?;
    let d = g.mean_rows(all);
    let f = g.input(Tensor2D::row_vector(stats.f));
    let fd = g.mul(f, d);
    let s = g.sum(fd);
    Ok(g.scale(s, n as f64))
}

/// Balance statistics plus a per-expert argmax histogram over a batch of features.
pub fn routing_stats<E>(
    layer: &MoeLayer<E>,
    store: &ParamStore,
    batch: &[Vec<f64>],
) -> Result<(BalanceStats, Vec<usize>), MoeError> {
    let mut acc = BalanceAccumulator::new(layer.num_experts());
    for x in batch {
        acc.add_row(&layer.route(store, x)?);
    }
    let stats = acc.stats()?;
    Ok((stats, acc.counts))
}

/// Shared parameters for routing-feature construction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RoutingParams {
    /// Fuses `[mean view feature ; CLS]` (`2d -> d`).
    pub fuse: Linear,
    /// One learned row per task.
    pub task_table: ParamId,
}

impl RoutingParams {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, d: usize, tasks: usize, rng: &mut R) -> Self {
        RoutingParams {
            fuse: Linear::new(store, &format!("{name}.fuse"), 2 * d, d, false, rng),
            task_table: store.add_init(format!("{name}.task_table"), tasks, d, rng),
        }
    }
}

/// Inputs available when building a routing feature.
#[derive(Debug, Clone, Copy, Default)]
pub struct RoutingInputs {
    pub token: Option<Var>,
    pub task_id: Option<usize>,
    pub text_cls: Option<Var>,
    /// All view embeddings of the panorama, one per row.
    pub views: Option<Var>,
}

#[derive(Debug, Clone, Copy)]
pub struct RoutingFeature {
    pub kind: RoutingKind,
    pub vector: Var,
}

pub fn build_routing_feature(
    g: &mut Graph,
    kind: RoutingKind,
    inputs: &RoutingInputs,
    params: &RoutingParams,
) -> Result<RoutingFeature, MoeError> {
    let need = |v: Option<Var>, input: &'static str| v.ok_or(MoeError::MissingInput { kind, input });
    let base = match kind {
        RoutingKind::Token => Some(need(inputs.token, "a token")?),
        RoutingKind::Task => None,
        RoutingKind::Text | RoutingKind::TextTask => Some(need(inputs.text_cls, "the text CLS")?),
        RoutingKind::Multimodal | RoutingKind::MultimodalTask => {
            let cls = need(inputs.text_cls, "the text CLS")?;
            let views = need(inputs.views, "view features")?;
            let mean = g.mean_rows(views);
            let cat = g.concat_cols(&[mean, cls]);
            Some(params.fuse.try_forward(g, cat)?)
        }
    };
    let vector = if kind.uses_task() {
        let id = inputs.task_id.ok_or(MoeError::MissingInput {
            kind,
            input: "a task id",
        })?;
        let table = g.param(params.task_table);
        if id >= g.shape(table).0 {
            return Err(MoeError::MissingInput {
                kind,
                input: "a known task id",
            });
        }
        let task = g.row(table, id);
        match base {
            Some(b) => {
                if g.shape(b) != g.shape(task) {
                    return Err(ShapeError::new("routing feature and task embedding differ in width").into());
                }
                g.add(b, task)
            }
            None => task,
        }
    } else {
        base.expect("non-task kinds have a base feature")
    };
    Ok(RoutingFeature { kind, vector })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::gradcheck::{grad_check, weighted_sum, DEFAULT_EPS, DEFAULT_TOLERANCE};
    use crate::numcore::Gradients;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor2D {
        Tensor2D::from_vec(r, c, (0..r * c).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    fn randomize(store: &mut ParamStore, id: ParamId, rng: &mut ChaCha8Rng) {
        store
            .get_mut(id)
            .data_mut()
            .iter_mut()
            .for_each(|v| *v = rng.gen_range(-1.5..1.5));
    }

    fn linear_layer(n: usize, k: usize, d: usize, seed: u64) -> (ParamStore, MoeLayer<Linear>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut s = ParamStore::new();
        let experts = linear_experts(&mut s, "m", n, d, d, true, &mut rng);
        for e in &experts {
            randomize(&mut s, e.b.unwrap(), &mut rng);
        }
        let layer = MoeLayer::new(&mut s, "m", d, k, experts).unwrap();
        randomize(&mut s, layer.router, &mut rng);
        (s, layer)
    }

    #[test]
    fn route_trivial_and_hand_values() {
        let (mut s, layer) = linear_layer(1, 1, 3, 1);
        assert_eq!(layer.route(&s, &[0.3, -0.2, 1.0]).unwrap(), vec![1.0]);
        assert!(matches!(
            layer.route(&s, &[1.0]),
            Err(MoeError::DimensionMismatch { expected: 3, got: 1 })
        ));
        let (mut s3, l3) = linear_layer(3, 2, 2, 2);
        s3.get_mut(l3.router).data_mut().iter_mut().for_each(|v| *v = 0.0);
        for p in l3.route(&s3, &[0.4, 0.9]).unwrap() {
            assert!((p - 1.0 / 3.0).abs() < 1e-15);
        }
        // Logits: x W with x = [1, 2], W = [[1, 0, -1], [0.5, 1, 0]] -> [2, 2, -1].
        s3.get_mut(l3.router)
            .data_mut()
            .copy_from_slice(&[1.0, 0.0, -1.0, 0.5, 1.0, 0.0]);
        let p = l3.route(&s3, &[1.0, 2.0]).unwrap();
        let z = 2.0 * 2f64.exp() + (-1f64).exp();
        let want = [2f64.exp() / z, 2f64.exp() / z, (-1f64).exp() / z];
        for (a, b) in p.iter().zip(want) {
            assert!((a - b).abs() < 1e-15);
        }
        s.get_mut(layer.router).data_mut()[0] = 7.0;
        assert_eq!(layer.route(&s, &[1.0, 0.0, 0.0]).unwrap(), vec![1.0]);
    }

    #[test]
    fn top_k_breaks_ties_by_index() {
        assert_eq!(top_k(&[0.25, 0.5, 0.25], 2), vec![1, 0]);
        assert_eq!(top_k(&[0.2, 0.4, 0.4], 2), vec![1, 2]);
        assert_eq!(argmax(&[0.5, 0.5]), 0);
    }

    #[test]
    fn invalid_k_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut s = ParamStore::new();
        let e = linear_experts(&mut s, "m", 2, 2, 2, false, &mut rng);
        assert_eq!(
            MoeLayer::new(&mut s, "m", 2, 3, e.clone()).unwrap_err(),
            MoeError::InvalidTopK { k: 3, n: 2 }
        );
        assert!(MoeLayer::new(&mut s, "m2", 2, 0, e).is_err());
    }

    #[test]
    fn single_expert_equals_dense_bitwise() {
        let (s, layer) = linear_layer(1, 1, 4, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = rand_tensor(&mut rng, 3, 4);
        let mut g = Graph::new(&s);
        let xv = g.input(x);
        let dense = layer.experts[0].forward(&mut g, xv);
        let r0 = g.row(xv, 0);
        let (shared, _) = layer.forward(&mut g, xv, r0).unwrap();
        let (per_row, _) = layer.forward(&mut g, xv, xv).unwrap();
        assert_eq!(g.value(dense), g.value(shared));
        assert_eq!(g.value(dense), g.value(per_row));
    }

    #[test]
    fn identity_experts_with_full_k_return_input() {
        let mut s = ParamStore::new();
        let experts: Vec<Linear> = (0..3)
            .map(|i| Linear {
                w: s.add(format!("e{i}"), Tensor2D::identity(2)),
                b: None,
            })
            .collect();
        let layer = MoeLayer::new(&mut s, "m", 2, 3, experts).unwrap();
        s.get_mut(layer.router)
            .data_mut()
            .copy_from_slice(&[0.3, -1.0, 2.0, 0.1, 0.7, -0.4]);
        let mut g = Graph::new(&s);
        let x = g.input(Tensor2D::from_rows(&[vec![1.0, -2.0], vec![0.5, 3.0]]).unwrap());
        let (y, _) = layer.forward(&mut g, x, x).unwrap();
        for (a, b) in g.value(y).data().iter().zip(g.value(x).data()) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn two_experts_top_one_hand_evaluation() {
        let mut s = ParamStore::new();
        let e0 = Linear {
            w: s.add("e0", Tensor2D::from_rows(&[vec![1.0, 2.0], vec![0.0, 1.0]]).unwrap()),
            b: None,
        };
        let e1 = Linear {
            w: s.add("e1", Tensor2D::from_rows(&[vec![-1.0, 0.0], vec![3.0, 1.0]]).unwrap()),
            b: None,
        };
        let layer = MoeLayer::new(&mut s, "m", 1, 1, vec![e0, e1]).unwrap();
        s.get_mut(layer.router).data_mut().copy_from_slice(&[2.0, 0.0]);
        let mut g = Graph::new(&s);
        let x = g.input(Tensor2D::row_vector(vec![1.0, 1.0]));
        let xr = g.input(Tensor2D::row_vector(vec![1.0]));
        let (y, gate) = layer.forward(&mut g, x, xr).unwrap();
        assert_eq!(gate.selected, vec![vec![0]]);
        let sig = 1.0 / (1.0 + (-2f64).exp());
        let want = [sig * 1.0, sig * 3.0];
        for (a, b) in g.value(y).data().iter().zip(want) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    /// Scalar-loop evaluation of the non-renormalised top-k sum.
    fn oracle(s: &ParamStore, layer: &MoeLayer<Linear>, x: &Tensor2D, xr: &Tensor2D) -> Tensor2D {
        let mut out = Tensor2D::zeros(x.rows(), x.cols());
        for r in 0..x.rows() {
            let feat = if xr.rows() == 1 { xr.row(0) } else { xr.row(r) };
            let p = layer.route(s, feat).unwrap();
            let mut order: Vec<usize> = (0..p.len()).collect();
            order.sort_by(|&a, &b| p[b].partial_cmp(&p[a]).unwrap().then(a.cmp(&b)));
            for &i in &order[..layer.k] {
                let w = s.get(layer.experts[i].w);
                let b = s.get(layer.experts[i].b.unwrap());
                for c in 0..w.cols() {
                    let mut v = b.get(0, c);
                    for j in 0..w.rows() {
                        v += x.get(r, j) * w.get(j, c);
                    }
                    out.set(r, c, out.get(r, c) + p[i] * v);
                }
            }
        }
        out
    }

    #[test]
    fn forward_matches_scalar_oracle() {
        for seed in 0..20 {
            let (s, layer) = linear_layer(4, 2, 3, 100 + seed);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = rand_tensor(&mut rng, 5, 3);
            let shared = rand_tensor(&mut rng, 1, 3);
            let mut g = Graph::new(&s);
            let xv = g.input(x.clone());
            let sv = g.input(shared.clone());
            let (y1, _) = layer.forward(&mut g, xv, xv).unwrap();
            let (y2, _) = layer.forward(&mut g, xv, sv).unwrap();
            for (y, xr) in [(y1, &x), (y2, &shared)] {
                let want = oracle(&s, &layer, &x, xr);
                for (a, b) in g.value(y).data().iter().zip(want.data()) {
                    assert!((a - b).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn gradients_flow_to_selected_experts_only() {
        let (s, layer) = linear_layer(3, 1, 3, 7);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = rand_tensor(&mut rng, 1, 3);
        let mut g = Graph::new(&s);
        let xv = g.input(x);
        let (y, gate) = layer.forward(&mut g, xv, xv).unwrap();
        let l = weighted_sum(&mut g, y, 9);
        let mut grads = Gradients::zeros_like(&s);
        g.backward(l, &mut grads);
        let chosen = gate.selected[0][0];
        for (i, e) in layer.experts.iter().enumerate() {
            let zero = grads.get(e.w).data().iter().all(|&v| v == 0.0);
            assert_eq!(zero, i != chosen);
        }
        assert!(grads.get(layer.router).data().iter().any(|&v| v != 0.0));
    }

    #[test]
    fn gradient_check_through_routing() {
        let (mut s, layer) = linear_layer(3, 2, 3, 10);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let xid = s.add("x", rand_tensor(&mut rng, 4, 3));
        let rep = grad_check(&s, DEFAULT_EPS, None, 0, |g| {
            let x = g.param(xid);
            let (y, _) = layer.forward(g, x, x).unwrap();
            weighted_sum(g, y, 12)
        });
        assert!(rep.passes(DEFAULT_TOLERANCE), "{rep:?}");
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let mut s2 = ParamStore::new();
        let experts = ffn_experts(&mut s2, "f", 3, 3, 4, &mut rng);
        let fl = MoeLayer::new(&mut s2, "f", 3, 2, experts).unwrap();
        randomize(&mut s2, fl.router, &mut rng);
        let xid = s2.add("x", rand_tensor(&mut rng, 3, 3));
        let rid = s2.add("xr", rand_tensor(&mut rng, 1, 3));
        let rep = grad_check(&s2, DEFAULT_EPS, None, 0, |g| {
            let x = g.param(xid);
            let xr = g.param(rid);
            let (y, _) = fl.forward(g, x, xr).unwrap();
            weighted_sum(g, y, 14)
        });
        assert!(rep.passes(DEFAULT_TOLERANCE), "{rep:?}");
    }

    #[test]
    fn kv_experts_share_gate() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let mut s = ParamStore::new();
        let experts = kv_experts(&mut s, "kv", 3, 4, &mut rng);
        let layer = MoeLayer::new(&mut s, "kv", 4, 2, experts).unwrap();
        randomize(&mut s, layer.router, &mut rng);
        let x = rand_tensor(&mut rng, 3, 4);
        let xr = rand_tensor(&mut rng, 1, 4);
        let mut g = Graph::new(&s);
        let (xv, rv) = (g.input(x.clone()), g.input(xr.clone()));
        let (k, v, gate) = layer.forward_kv(&mut g, xv, rv).unwrap();
        let p = layer.route(&s, xr.row(0)).unwrap();
        let mut want_k = Tensor2D::zeros(3, 4);
        let mut want_v = Tensor2D::zeros(3, 4);
        for &i in &gate.selected[0] {
            let mut a = x.matmul(s.get(layer.experts[i].key.w));
            a.scale_assign(p[i]);
            want_k.add_assign(&a);
            let mut b = x.matmul(s.get(layer.experts[i].value.w));
            b.scale_assign(p[i]);
            want_v.add_assign(&b);
        }
        for (a, b) in g.value(k).data().iter().zip(want_k.data()) {
            assert!((a - b).abs() < 1e-12);
        }
        for (a, b) in g.value(v).data().iter().zip(want_v.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn row_mismatch_rejected() {
        let (s, layer) = linear_layer(2, 1, 2, 16);
        let mut g = Graph::new(&s);
        let x = g.input(Tensor2D::zeros(3, 2));
        let xr = g.input(Tensor2D::zeros(2, 2));
        assert!(matches!(layer.forward(&mut g, x, xr), Err(MoeError::RowMismatch { .. })));
        let xr = g.input(Tensor2D::zeros(1, 5));
        assert!(matches!(layer.forward(&mut g, x, xr), Err(MoeError::DimensionMismatch { .. })));
    }

    #[test]
    fn balance_loss_regimes() {
        let n = 4;
        let uniform = BalanceStats {
            f: vec![0.25; 4],
            d: vec![0.25; 4],
            k: 8,
        };
        assert_eq!(balance_loss(&uniform, n).unwrap(), 1.0);
        let collapse = BalanceStats {
            f: vec![0.0, 0.0, 1.0, 0.0],
            d: vec![0.0, 0.0, 1.0, 0.0],
            k: 8,
        };
        assert_eq!(balance_loss(&collapse, n).unwrap(), 4.0);
        assert_eq!(BalanceAccumulator::new(3).stats(), Err(MoeError::EmptyStats));
        let empty = BalanceStats { f: vec![], d: vec![], k: 0 };
        assert_eq!(balance_loss(&empty, 3), Err(MoeError::EmptyStats));
    }

    #[test]
    fn balance_batch_of_four_by_hand() {
        let rows = [
            [0.7, 0.2, 0.1],
            [0.1, 0.6, 0.3],
            [0.5, 0.25, 0.25],
            [0.2, 0.2, 0.6],
        ];
        let mut acc = BalanceAccumulator::new(3);
        for r in &rows {
            acc.add_row(r);
        }
        let st = acc.stats().unwrap();
        assert_eq!(st.f, vec![0.5, 0.25, 0.25]);
        let d = [1.5 / 4.0, 1.25 / 4.0, 1.25 / 4.0];
        for (a, b) in st.d.iter().zip(d) {
            assert!((a - b).abs() < 1e-15);
        }
        let want = 3.0 * (0.5 * d[0] + 0.25 * d[1] + 0.25 * d[2]);
        assert!((balance_loss(&st, 3).unwrap() - want).abs() < 1e-12);
    }

    #[test]
    fn balance_tape_matches_value_and_gradient_formula() {
        let (mut s, layer) = linear_layer(3, 2, 3, 17);
        let mut rng = ChaCha8Rng::seed_from_u64(18);
        let xid = s.add("x", rand_tensor(&mut rng, 6, 3));
        let mut g = Graph::new(&s);
        let x = g.param(xid);
        let gate = layer.gate(&mut g, x).unwrap();
        let l = balance_loss_on_tape(&mut g, &[gate.probs], 3).unwrap();
        let mut acc = BalanceAccumulator::new(3);
        acc.add_tensor(g.value(gate.probs));
        let st = acc.stats().unwrap();
        assert!((g.scalar(l) - balance_loss(&st, 3).unwrap()).abs() < 1e-12);
        // Seeding the probability rows directly gives the same parameter gradient.
        let mut g1 = Gradients::zeros_like(&s);
        g.backward(l, &mut g1);
        let row = balance_row_gradient(&st, 3);
        let seed = Tensor2D::from_rows(&vec![row; 6]).unwrap();
        let mut g2 = Gradients::zeros_like(&s);
        g.backward_seeded(&[(gate.probs, seed)], &mut g2);
        for (a, b) in g1.get(layer.router).data().iter().zip(g2.get(layer.router).data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn routing_stats_trivial_cases() {
        let (s, layer) = linear_layer(3, 2, 2, 19);
        let (st, hist) = routing_stats(&layer, &s, &[vec![0.3, -0.8]]).unwrap();
        assert_eq!(st.f.iter().filter(|&&f| f == 1.0).count(), 1);
        assert_eq!(hist.iter().sum::<usize>(), 1);
        let same = vec![vec![0.5, 0.1]; 5];
        let (st, _) = routing_stats(&layer, &s, &same).unwrap();
        let p = layer.route(&s, &same[0]).unwrap();
        for (a, b) in st.d.iter().zip(p) {
            assert!((a - b).abs() < 1e-15);
        }
        assert_eq!(routing_stats(&layer, &s, &[]).unwrap_err(), MoeError::EmptyStats);
    }

    fn routing_fixture() -> (ParamStore, RoutingParams) {
        let mut rng = ChaCha8Rng::seed_from_u64(20);
        let mut s = ParamStore::new();
        let p = RoutingParams::new(&mut s, "route", 3, 3, &mut rng);
        (s, p)
    }

    #[test]
    fn routing_features_by_kind() {
        let (mut s, p) = routing_fixture();
        let mut w = Tensor2D::zeros(6, 3);
        for i in 0..3 {
            w.set(i, i, 1.0);
        }
        *s.get_mut(p.fuse.w) = w;
        let table = s.get(p.task_table).clone();
        let mut g = Graph::new(&s);
        let token = g.input(Tensor2D::row_vector(vec![0.1, 0.2, 0.3]));
        let cls = g.input(Tensor2D::row_vector(vec![5.0, -1.0, 2.0]));
        let views = g.input(Tensor2D::from_rows(&vec![vec![0.4, -0.6, 0.9]; 36]).unwrap());
        let inputs = RoutingInputs {
            token: Some(token),
            task_id: Some(1),
            text_cls: Some(cls),
            views: Some(views),
        };
        let f = build_routing_feature(&mut g, RoutingKind::Token, &inputs, &p).unwrap();
        assert_eq!(g.value(f.vector).data(), &[0.1, 0.2, 0.3]);
        let f = build_routing_feature(&mut g, RoutingKind::Task, &inputs, &p).unwrap();
        assert_eq!(g.value(f.vector).data(), table.row(1));
        let f = build_routing_feature(&mut g, RoutingKind::Text, &inputs, &p).unwrap();
        assert_eq!(g.value(f.vector).data(), &[5.0, -1.0, 2.0]);
        let f = build_routing_feature(&mut g, RoutingKind::TextTask, &inputs, &p).unwrap();
        for (i, v) in g.value(f.vector).data().iter().enumerate() {
            assert!((v - ([5.0, -1.0, 2.0][i] + table.get(1, i))).abs() < 1e-15);
        }
        let f = build_routing_feature(&mut g, RoutingKind::Multimodal, &inputs, &p).unwrap();
        for (a, b) in g.value(f.vector).data().iter().zip([0.4, -0.6, 0.9]) {
            assert!((a - b).abs() < 1e-15);
        }
        let f = build_routing_feature(&mut g, RoutingKind::MultimodalTask, &inputs, &p).unwrap();
        for (i, v) in g.value(f.vector).data().iter().enumerate() {
            assert!((v - ([0.4, -0.6, 0.9][i] + table.get(1, i))).abs() < 1e-15);
        }
    }

    #[test]
    fn routing_feature_missing_inputs() {
        let (s, p) = routing_fixture();
        let mut g = Graph::new(&s);
        let cls = g.input(Tensor2D::row_vector(vec![1.0, 0.0, 0.0]));
        let only_cls = RoutingInputs {
            text_cls: Some(cls),
            ..Default::default()
        };
        for kind in [RoutingKind::Token, RoutingKind::Task, RoutingKind::Multimodal, RoutingKind::TextTask] {
            assert!(matches!(
                build_routing_feature(&mut g, kind, &only_cls, &p),
                Err(MoeError::MissingInput { .. })
            ));
        }
        assert!(build_routing_feature(&mut g, RoutingKind::Text, &only_cls, &p).is_ok());
    }

    #[test]
    fn kind_and_placement_names_round_trip() {
        for k in RoutingKind::ALL {
            assert_eq!(k.name().parse::<RoutingKind>().unwrap(), k);
            assert_eq!(serde_json::to_string(&k).unwrap(), format!("\"{}\"", k.name()));
        }
        for p in Placement::ALL {
            assert_eq!(p.name().parse::<Placement>().unwrap(), p);
        }
        assert!("bogus".parse::<RoutingKind>().is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::{any, prop_assert, prop_assert_eq, proptest, ProptestConfig};

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(32))]

            #[test]
            fn route_sums_to_one_and_is_permutation_equivariant(seed in any::<u64>(), n in 1usize..6, shift in 0usize..6) {
                let (s, layer) = linear_layer(n, 1, 3, seed);
                let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
                let x: Vec<f64> = (0..3).map(|_| rng.gen_range(-2.0..2.0)).collect();
                let p = layer.route(&s, &x).unwrap();
                prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
                // Rotate router columns and experts together.
                let perm: Vec<usize> = (0..n).map(|j| (j + shift) % n).collect();
                let mut s2 = s.clone();
                let w = s.get(layer.router).clone();
                for r in 0..3 {
                    for j in 0..n {
                        s2.get_mut(layer.router).set(r, j, w.get(r, perm[j]));
                    }
                }
                let q = layer.route(&s2, &x).unwrap();
                for j in 0..n {
                    prop_assert!((q[j] - p[perm[j]]).abs() < 1e-12);
                }
                let mut permuted = layer.clone();
                permuted.experts = perm.iter().map(|&j| layer.experts[j]).collect();
                let xt = Tensor2D::row_vector(x.clone());
                let mut g1 = Graph::new(&s);
                let xv = g1.input(xt.clone());
                let (y1, _) = layer.forward(&mut g1, xv, xv).unwrap();
                let mut g2 = Graph::new(&s2);
                let xv2 = g2.input(xt);
                let (y2, _) = permuted.forward(&mut g2, xv2, xv2).unwrap();
                for (a, b) in g1.value(y1).data().iter().zip(g2.value(y2).data()) {
                    prop_assert!((a - b).abs() < 1e-12);
                }
            }

            #[test]
            fn unselected_experts_do_not_affect_output(seed in any::<u64>(), rows in 1usize..5) {
                let (s, layer) = linear_layer(4, 2, 3, seed);
                let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
                let x = rand_tensor(&mut rng, rows, 3);
                let mut g = Graph::new(&s);
                let xv = g.input(x.clone());
                let (y, gate) = layer.forward(&mut g, xv, xv).unwrap();
                let used: Vec<usize> = gate.selected.iter().flatten().copied().collect();
                let mut s2 = s.clone();
                for (i, e) in layer.experts.iter().enumerate() {
                    if !used.contains(&i) {
                        randomize(&mut s2, e.w, &mut rng);
                        randomize(&mut s2, e.b.unwrap(), &mut rng);
                    }
                }
                let mut g2 = Graph::new(&s2);
                let xv2 = g2.input(x);
                let (y2, _) = layer.forward(&mut g2, xv2, xv2).unwrap();
                prop_assert_eq!(g.value(y), g2.value(y2));
            }

            #[test]
            fn routing_stats_match_scalar_loop(seed in any::<u64>(), len in 1usize..20) {
                let (s, layer) = linear_layer(3, 2, 2, seed);
                let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 7);
                let batch: Vec<Vec<f64>> = (0..len).map(|_| vec![rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0)]).collect();
                let (st, _) = routing_stats(&layer, &s, &batch).unwrap();
                let mut f = [0.0; 3];
                let mut d = [0.0; 3];
                for x in &batch {
                    let p = layer.route(&s, x).unwrap();
                    let mut best = 0;
                    for j in 1..3 {
                        if p[j] > p[best] {
                            best = j;
                        }
                    }
                    f[best] += 1.0 / len as f64;
                    for j in 0..3 {
                        d[j] += p[j] / len as f64;
                    }
                }
                for j in 0..3 {
                    prop_assert!((st.f[j] - f[j]).abs() < 1e-12);
                    prop_assert!((st.d[j] - d[j]).abs() < 1e-12);
                }
                prop_assert!((st.f.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                prop_assert!((st.d.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            }
        }
    }
}
