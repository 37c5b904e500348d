//! Parameterised layers built from tape operations.

use rand::Rng;

use super::{Graph, ParamId, ParamStore, ShapeError, Tensor2D, Var};
use crate::envgraph::{NavGraph, NodeId};

/// `y = x W + b`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl Linear {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, d_in: usize, d_out: usize, bias: bool, rng: &mut R) -> Self {
        let w = store.add_init(format!("{name}.w"), d_in, d_out, rng);
        let b = bias.then(|| store.add_zeros(format!("{name}.b"), 1, d_out));
        Linear { w, b }
    }

    pub fn d_in(&self, store: &ParamStore) -> usize {
        store.get(self.w).rows()
    }

    pub fn d_out(&self, store: &ParamStore) -> usize {
        store.get(self.w).cols()
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let w = g.param(self.w);
        let y = g.matmul(x, w);
        match self.b {
            Some(b) => {
                let b = g.param(b);
                g.add_row(y, b)
            }
            None => y,
        }
    }

    pub fn try_forward(&self, g: &mut Graph, x: Var) -> Result<Var, ShapeError> {
        let d_in = self.d_in(g.params());
        if g.shape(x).1 != d_in {
            return Err(ShapeError::new(format!("linear expects {d_in} input columns, got {}", g.shape(x).1)));
        }
        Ok(self.forward(g, x))
    }
}

/// Two-layer feed-forward network with ReLU.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ffn {
    pub l1: Linear,
    pub l2: Linear,
}

impl Ffn {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, d_in: usize, hidden: usize, d_out: usize, rng: &mut R) -> Self {
        Ffn {
            l1: Linear::new(store, &format!("{name}.l1"), d_in, hidden, true, rng),
            l2: Linear::new(store, &format!("{name}.l2"), hidden, d_out, true, rng),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let h = self.l1.forward(g, x);
        let h = g.relu(h);
        self.l2.forward(g, h)
    }
}

/// Query/key/value projections without bias.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AttentionParams {
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
}

impl AttentionParams {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, d: usize, rng: &mut R) -> Self {
        AttentionParams {
            wq: Linear::new(store, &format!("{name}.wq"), d, d, false, rng),
            wk: Linear::new(store, &format!("{name}.wk"), d, d, false, rng),
            wv: Linear::new(store, &format!("{name}.wv"), d, d, false, rng),
        }
    }
}

/// Multi-head scaled dot-product attention over already-projected inputs.
///
/// Each head uses scale `1/sqrt(d_head)`. `bias`, when given, is added to the
/// pre-softmax logits of every head.
pub fn attend(g: &mut Graph, q: Var, k: Var, v: Var, heads: usize, bias: Option<Var>) -> Result<Var, ShapeError> {
    let (nq, d) = g.shape(q);
    let (nk, dk) = g.shape(k);
    let (nv, dv) = g.shape(v);
    if d != dk || nk != nv {
        return Err(ShapeError::new(format!(
            "attention shapes q {nq}x{d}, k {nk}x{dk}, v {nv}x{dv}"
        )));
    }
    if heads == 0 || d % heads != 0 || dv % heads != 0 {
        return Err(ShapeError::new(format!("{heads} heads do not divide width {d}")));
    }
    if let Some(b) = bias {
        if g.shape(b) != (nq, nk) {
            return Err(ShapeError::new("attention bias must be queries x keys"));
        }
    }
    let dh = d / heads;
    let dvh = dv / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let (qh, kh, vh) = if heads == 1 {
            (q, k, v)
        } else {
            (
                g.slice_cols(q, h * dh, dh),
                g.slice_cols(k, h * dh, dh),
                g.slice_cols(v, h * dvh, dvh),
            )
        };
        let logits = g.matmul_t(qh, kh);
        let mut logits = g.scale(logits, scale);
        if let Some(b) = bias {
            logits = g.add(logits, b);
        }
        let p = g.softmax_rows(logits);
        outs.push(g.matmul(p, vh));
    }
    Ok(if heads == 1 { outs[0] } else { g.concat_cols(&outs) })
}

/// `softmax(X_q W_q (X_kv W_k)ᵀ / sqrt(d)) X_kv W_v`.
pub fn cross_attention(g: &mut Graph, xq: Var, xkv: Var, p: &AttentionParams, heads: usize) -> Result<Var, ShapeError> {
    let q = p.wq.try_forward(g, xq)?;
    let k = p.wk.try_forward(g, xkv)?;
    let v = p.wv.try_forward(g, xkv)?;
    attend(g, q, k, v, heads, None)
}

pub fn self_attention(g: &mut Graph, x: Var, p: &AttentionParams, heads: usize) -> Result<Var, ShapeError> {
    cross_attention(g, x, x, p, heads)
}

/// Graph-aware self-attention: self-attention with an additive logit bias.
pub fn gasa(g: &mut Graph, x: Var, p: &AttentionParams, affinity: Var, heads: usize) -> Result<Var, ShapeError> {
    let n = g.shape(x).0;
    if g.shape(affinity) != (n, n) {
        return Err(ShapeError::new(format!(
            "affinity is {:?}, expected {n}x{n}",
            g.shape(affinity)
        )));
    }
    let q = p.wq.try_forward(g, x)?;
    let k = p.wk.try_forward(g, x)?;
    let v = p.wv.try_forward(g, x)?;
    attend(g, q, k, v, heads, Some(affinity))
}

/// `A[i][j] = -|p_i - p_j| / tau`, so nearer nodes get a larger logit bias.
pub fn affinity_from_positions(positions: &[[f64; 3]], tau: f64) -> Tensor2D {
    let n = positions.len();
    let mut a = Tensor2D::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            if i != j {
                let d = ((positions[i][0] - positions[j][0]).powi(2)
                    + (positions[i][1] - positions[j][1]).powi(2)
                    + (positions[i][2] - positions[j][2]).powi(2))
                .sqrt();
                a.set(i, j, -d / tau);
            }
        }
    }
    a
}

pub fn affinity_from_graph(nodes: &[NodeId], g: &NavGraph, tau: f64) -> Result<Tensor2D, crate::envgraph::EnvError> {
    let pos = nodes.iter().map(|&n| g.position(n)).collect::<Result<Vec<_>, _>>()?;
    Ok(affinity_from_positions(&pos, tau))
}

/// Standard sinusoidal position table (`len x d`).
pub fn sinusoidal_positions(len: usize, d: usize) -> Tensor2D {
    let mut t = Tensor2D::zeros(len, d);
    for pos in 0..len {
        for i in 0..d {
            let freq = 1.0 / 10000f64.powf((2 * (i / 2)) as f64 / d as f64);
            let angle = pos as f64 * freq;
            t.set(pos, i, if i % 2 == 0 { angle.sin() } else { angle.cos() });
        }
    }
    t
}
