//! Reverse-mode tape over a fixed operation set.
//!
//! Every operation computes its forward value eagerly and records what its
//! backward pass needs. [`Graph::backward`] walks the tape in reverse and
//! accumulates parameter gradients into a [`Gradients`] buffer, so independent
//! graphs over the same read-only [`ParamStore`] never share mutable state.

use super::{Gradients, ParamId, ParamStore, Tensor2D};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Input,
    Param(ParamId),
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Affine(Var, f64),
    ScaleBy(Var, Var),
    MulCol(Var, Var),
    Relu(Var),
    Sigmoid(Var),
    Softmax(Var),
    CrossEntropy { x: Var, target: usize, probs: Vec<f64> },
    Transpose(Var),
    SliceCols(Var, usize),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    GatherRows(Var, Vec<usize>),
    ScatterRows(Var, Vec<usize>),
    MeanRows(Var),
    Sum(Var),
    LayerNorm { x: Var, inv_std: Vec<f64> },
    Dropout(Var, Vec<f64>),
}

#[derive(Debug)]
struct Node {
    value: Tensor2D,
    op: Op,
    needs_grad: bool,
}

pub struct Graph<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
    param_vars: Vec<Option<Var>>,
}

fn softmax_row(x: &[f64], mask: Option<&[bool]>, out: &mut [f64]) {
    let allowed = |j: usize| mask.is_none_or(|m| m[j]);
    let mut max = f64::NEG_INFINITY;
    for (j, &v) in x.iter().enumerate() {
        if allowed(j) && v > max {
            max = v;
        }
    }
    let mut total = 0.0;
    for (j, &v) in x.iter().enumerate() {
        out[j] = if allowed(j) { (v - max).exp() } else { 0.0 };
        total += out[j];
    }
    for o in out.iter_mut() {
        *o /= total;
    }
}

impl<'p> Graph<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Graph {
            params,
            nodes: Vec::new(),
            param_vars: vec![None; params.len()],
        }
    }

    pub fn params(&self) -> &'p ParamStore {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor2D {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    /// Scalar value of a 1x1 node.
    pub fn scalar(&self, v: Var) -> f64 {
        let t = self.value(v);
        debug_assert_eq!(t.shape(), (1, 1));
        t.data()[0]
    }

    fn push(&mut self, value: Tensor2D, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Constant input; receives no gradient.
    pub fn input(&mut self, t: Tensor2D) -> Var {
        self.push(t, Op::Input, false)
    }

    /// Leaf bound to a parameter. Repeated calls return the same node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars[id.0] {
            return v;
        }
        let v = self.push(self.params.get(id).clone(), Op::Param(id), true);
        self.param_vars[id.0] = Some(v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let y = self.value(a).matmul(self.value(b));
        let ng = self.ng(a) || self.ng(b);
        self.push(y, Op::MatMul(a, b), ng)
    }

    /// `a · bᵀ`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let y = self.value(a).matmul_t(self.value(b));
        let ng = self.ng(a) || self.ng(b);
        self.push(y, Op::MatMulT(a, b), ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "add shapes");
        let mut y = self.value(a).clone();
        y.add_assign(self.value(b));
        let ng = self.ng(a) || self.ng(b);
        self.push(y, Op::Add(a, b), ng)
    }

    /// Adds a `1 x c` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (r, c) = self.shape(a);
        assert_eq!(self.shape(row), (1, c), "add_row shapes");
        let mut y = self.value(a).clone();
        let b = self.value(row).data().to_vec();
        for i in 0..r {
            for (x, bb) in y.row_mut(i).iter_mut().zip(&b) {
                *x += bb;
            }
        }
        let ng = self.ng(a) || self.ng(row);
        self.push(y, Op::AddRow(a, row), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "mul shapes");
        let (r, c) = self.shape(a);
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let ng = self.ng(a) || self.ng(b);
        self.push(Tensor2D::from_vec(r, c, data).unwrap(), Op::Mul(a, b), ng)
    }

    /// `scale * a + shift`.
    pub fn affine(&mut self, a: Var, scale: f64, shift: f64) -> Var {
        let y = self.value(a).map(|x| scale * x + shift);
        let ng = self.ng(a);
        self.push(y, Op::Affine(a, scale), ng)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        self.affine(a, s, 0.0)
    }

    /// Multiplies `a` by the 1x1 node `s`.
    pub fn scale_by(&mut self, s: Var, a: Var) -> Var {
        assert_eq!(self.shape(s), (1, 1), "scale_by expects a scalar");
        let k = self.scalar(s);
        let y = self.value(a).map(|x| k * x);
        let ng = self.ng(s) || self.ng(a);
        self.push(y, Op::ScaleBy(s, a), ng)
    }

    /// Scales row `r` of `a` by `w[r]` where `w` is `rows x 1`.
    pub fn mul_col(&mut self, a: Var, w: Var) -> Var {
        let (r, _) = self.shape(a);
        assert_eq!(self.shape(w), (r, 1), "mul_col shapes");
        let mut y = self.value(a).clone();
        for i in 0..r {
            let k = self.value(w).data()[i];
            y.row_mut(i).iter_mut().for_each(|x| *x *= k);
        }
        let ng = self.ng(a) || self.ng(w);
        self.push(y, Op::MulCol(a, w), ng)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let y = self.value(a).map(|x| x.max(0.0));
        let ng = self.ng(a);
        self.push(y, Op::Relu(a), ng)
    }

    /// Which side of zero every ReLU input lies on, in tape order.
    pub fn relu_pattern(&self) -> Vec<bool> {
        self.nodes
            .iter()
            .filter_map(|n| match n.op {
                Op::Relu(a) => Some(a),
                _ => None,
            })
            .flat_map(|a| self.value(a).data().iter().map(|&x| x > 0.0))
            .collect()
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let y = self.value(a).map(|x| 1.0 / (1.0 + (-x).exp()));
        let ng = self.ng(a);
        self.push(y, Op::Sigmoid(a), ng)
    }

    /// Row-wise softmax, max-subtracted.
    pub fn softmax_rows(&mut self, a: Var) -> Var {
        self.masked_softmax_rows(a, None)
    }

    /// Row-wise softmax where columns with `mask[j] == false` get probability 0.
    pub fn masked_softmax_rows(&mut self, a: Var, mask: Option<&[bool]>) -> Var {
        let x = self.value(a);
        let (r, c) = x.shape();
        if let Some(m) = mask {
            assert_eq!(m.len(), c, "mask length");
            assert!(m.iter().any(|&b| b), "mask hides every column");
        }
        let mut y = Tensor2D::zeros(r, c);
        for i in 0..r {
            softmax_row(x.row(i), mask, y.row_mut(i));
        }
        let ng = self.ng(a);
        self.push(y, Op::Softmax(a), ng)
    }

    /// `-log softmax(x)[target]` for a `1 x n` row, with optional column mask.
    pub fn cross_entropy(&mut self, x: Var, mask: Option<&[bool]>, target: usize) -> Var {
        let xv = self.value(x);
        assert_eq!(xv.rows(), 1, "cross_entropy expects a row vector");
        let n = xv.cols();
        if let Some(m) = mask {
            assert!(m[target], "target column is masked");
        }
        let mut probs = vec![0.0; n];
        softmax_row(xv.row(0), mask, &mut probs);
        let allowed = |j: usize| mask.is_none_or(|m| m[j]);
        let max = (0..n)
            .filter(|&j| allowed(j))
            .map(|j| xv.data()[j])
            .fold(f64::NEG_INFINITY, f64::max);
        let lse = max
            + (0..n)
                .filter(|&j| allowed(j))
                .map(|j| (xv.data()[j] - max).exp())
                .sum::<f64>()
                .ln();
        let loss = lse - xv.data()[target];
        let ng = self.ng(x);
        self.push(
            Tensor2D::filled(1, 1, loss),
            Op::CrossEntropy { x, target, probs },
            ng,
        )
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let y = self.value(a).transpose();
        let ng = self.ng(a);
        self.push(y, Op::Transpose(a), ng)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let x = self.value(a);
        let (r, c) = x.shape();
        assert!(start + len <= c, "slice_cols out of range");
        let mut data = Vec::with_capacity(r * len);
        for i in 0..r {
            data.extend_from_slice(&x.row(i)[start..start + len]);
        }
        let ng = self.ng(a);
        self.push(Tensor2D::from_vec(r, len, data).unwrap(), Op::SliceCols(a, start), ng)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let r = self.shape(parts[0]).0;
        assert!(parts.iter().all(|&p| self.shape(p).0 == r), "concat_cols rows");
        let c: usize = parts.iter().map(|&p| self.shape(p).1).sum();
        let mut data = Vec::with_capacity(r * c);
        for i in 0..r {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(i));
            }
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(Tensor2D::from_vec(r, c, data).unwrap(), Op::ConcatCols(parts.to_vec()), ng)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let c = self.shape(parts[0]).1;
        assert!(parts.iter().all(|&p| self.shape(p).1 == c), "concat_rows cols");
        let r: usize = parts.iter().map(|&p| self.shape(p).0).sum();
        let mut data = Vec::with_capacity(r * c);
        for &p in parts {
            data.extend_from_slice(self.value(p).data());
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(Tensor2D::from_vec(r, c, data).unwrap(), Op::ConcatRows(parts.to_vec()), ng)
    }

    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Var {
        let x = self.value(a);
        let c = x.cols();
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            data.extend_from_slice(x.row(i));
        }
        let ng = self.ng(a);
        self.push(
            Tensor2D::from_vec(idx.len(), c, data).unwrap(),
            Op::GatherRows(a, idx.to_vec()),
            ng,
        )
    }

    pub fn row(&mut self, a: Var, i: usize) -> Var {
        self.gather_rows(a, &[i])
    }

    /// Places row `k` of `a` at row `idx[k]` of a zero `total x c` matrix.
    pub fn scatter_rows(&mut self, a: Var, idx: &[usize], total: usize) -> Var {
        let x = self.value(a);
        assert_eq!(x.rows(), idx.len(), "scatter_rows index count");
        let c = x.cols();
        let mut y = Tensor2D::zeros(total, c);
        for (k, &i) in idx.iter().enumerate() {
            for (o, v) in y.row_mut(i).iter_mut().zip(x.row(k)) {
                *o += v;
            }
        }
        let ng = self.ng(a);
        self.push(y, Op::ScatterRows(a, idx.to_vec()), ng)
    }

    pub fn mean_rows(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let (r, c) = x.shape();
        let mut y = vec![0.0; c];
        for i in 0..r {
            for (o, v) in y.iter_mut().zip(x.row(i)) {
                *o += v;
            }
        }
        y.iter_mut().for_each(|v| *v /= r as f64);
        let ng = self.ng(a);
        self.push(Tensor2D::row_vector(y), Op::MeanRows(a), ng)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        let ng = self.ng(a);
        self.push(Tensor2D::filled(1, 1, s), Op::Sum(a), ng)
    }

    /// Per-row normalisation to zero mean and unit variance (no affine part).
    pub fn layer_norm(&mut self, a: Var) -> Var {
        const EPS: f64 = 1e-5;
        let x = self.value(a);
        let (r, c) = x.shape();
        let mut y = Tensor2D::zeros(r, c);
        let mut inv_std = Vec::with_capacity(r);
        for i in 0..r {
            let row = x.row(i);
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / c as f64;
            let is = 1.0 / (var + EPS).sqrt();
            for (o, v) in y.row_mut(i).iter_mut().zip(row) {
                *o = (v - mean) * is;
            }
            inv_std.push(is);
        }
        let ng = self.ng(a);
        self.push(y, Op::LayerNorm { x: a, inv_std }, ng)
    }

    /// Elementwise multiplication by a fixed (pre-scaled) keep mask.
    pub fn dropout(&mut self, a: Var, mask: Vec<f64>) -> Var {
        let (r, c) = self.shape(a);
        assert_eq!(mask.len(), r * c, "dropout mask size");
        let data = self.value(a).data().iter().zip(&mask).map(|(x, m)| x * m).collect();
        let ng = self.ng(a);
        self.push(Tensor2D::from_vec(r, c, data).unwrap(), Op::Dropout(a, mask), ng)
    }

    /// Backpropagates `d loss / d loss = 1` from a scalar node.
    pub fn backward(&self, loss: Var, grads: &mut Gradients) {
        self.backward_seeded(&[(loss, Tensor2D::filled(1, 1, 1.0))], grads);
    }

    /// Backpropagates explicit upstream gradients for several nodes at once.
    pub fn backward_seeded(&self, seeds: &[(Var, Tensor2D)], grads: &mut Gradients) {
        let Some(top) = seeds.iter().map(|(v, _)| v.0).max() else {
            return;
        };
        let mut g: Vec<Option<Tensor2D>> = Vec::with_capacity(top + 1);
        g.resize_with(top + 1, || None);
        for (v, t) in seeds {
            assert_eq!(t.shape(), self.shape(*v), "seed shape");
            acc(&mut g, *v, t.clone());
        }
        for i in (0..=top).rev() {
            let Some(dy) = g[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            self.backward_op(&node.op, &node.value, dy, &mut g, grads);
        }
    }

    fn backward_op(
        &self,
        op: &Op,
        y: &Tensor2D,
        dy: Tensor2D,
        g: &mut [Option<Tensor2D>],
        grads: &mut Gradients,
    ) {
        let val = |v: Var| &self.nodes[v.0].value;
        let want = |v: Var| self.nodes[v.0].needs_grad;
        match op {
            Op::Input => {}
            Op::Param(id) => grads.accumulate(*id, &dy),
            Op::MatMul(a, b) => {
                if want(*a) {
                    acc(g, *a, dy.matmul_t(val(*b)));
                }
                if want(*b) {
                    acc(g, *b, val(*a).t_matmul(&dy));
                }
            }
            Op::MatMulT(a, b) => {
                if want(*a) {
                    acc(g, *a, dy.matmul(val(*b)));
                }
                if want(*b) {
                    acc(g, *b, dy.t_matmul(val(*a)));
                }
            }
            Op::Add(a, b) => {
                if want(*a) {
                    acc(g, *a, dy.clone());
                }
                if want(*b) {
                    acc(g, *b, dy);
                }
            }
            Op::AddRow(a, row) => {
                if want(*row) {
                    let mut s = Tensor2D::zeros(1, dy.cols());
                    for i in 0..dy.rows() {
                        for (o, v) in s.row_mut(0).iter_mut().zip(dy.row(i)) {
                            *o += v;
                        }
                    }
                    acc(g, *row, s);
                }
                if want(*a) {
                    acc(g, *a, dy);
                }
            }
            Op::Mul(a, b) => {
                if want(*a) {
                    let d = zip_map(&dy, val(*b), |d, x| d * x);
                    acc(g, *a, d);
                }
                if want(*b) {
                    let d = zip_map(&dy, val(*a), |d, x| d * x);
                    acc(g, *b, d);
                }
            }
            Op::Affine(a, s) => acc(g, *a, dy.map(|d| d * s)),
            Op::ScaleBy(s, a) => {
                if want(*s) {
                    let ds: f64 = dy.data().iter().zip(val(*a).data()).map(|(d, x)| d * x).sum();
                    acc(g, *s, Tensor2D::filled(1, 1, ds));
                }
                if want(*a) {
                    let k = val(*s).data()[0];
                    acc(g, *a, dy.map(|d| d * k));
                }
            }
            Op::MulCol(a, w) => {
                let (r, _) = dy.shape();
                if want(*w) {
                    let mut dw = Tensor2D::zeros(r, 1);
                    for i in 0..r {
                        let s: f64 = dy.row(i).iter().zip(val(*a).row(i)).map(|(d, x)| d * x).sum();
                        dw.set(i, 0, s);
                    }
                    acc(g, *w, dw);
                }
                if want(*a) {
                    let mut da = dy;
                    for i in 0..r {
                        let k = val(*w).data()[i];
                        da.row_mut(i).iter_mut().for_each(|x| *x *= k);
                    }
                    acc(g, *a, da);
                }
            }
            Op::Relu(a) => acc(g, *a, zip_map(&dy, val(*a), |d, x| if x > 0.0 { d } else { 0.0 })),
            Op::Sigmoid(a) => acc(g, *a, zip_map(&dy, y, |d, s| d * s * (1.0 - s))),
            Op::Softmax(a) => {
                let (r, c) = y.shape();
                let mut dx = Tensor2D::zeros(r, c);
                for i in 0..r {
                    let p = y.row(i);
                    let d = dy.row(i);
                    let dot: f64 = p.iter().zip(d).map(|(p, d)| p * d).sum();
                    for (o, (pp, dd)) in dx.row_mut(i).iter_mut().zip(p.iter().zip(d)) {
                        *o = pp * (dd - dot);
                    }
                }
                acc(g, *a, dx);
            }
            Op::CrossEntropy { x, target, probs } => {
                let k = dy.data()[0];
                let mut dx = probs.clone();
                dx[*target] -= 1.0;
                dx.iter_mut().for_each(|v| *v *= k);
                acc(g, *x, Tensor2D::row_vector(dx));
            }
            Op::Transpose(a) => acc(g, *a, dy.transpose()),
            Op::SliceCols(a, start) => {
                let (r, c) = val(*a).shape();
                let mut dx = Tensor2D::zeros(r, c);
                for i in 0..r {
                    dx.row_mut(i)[*start..*start + dy.cols()].copy_from_slice(dy.row(i));
                }
                acc(g, *a, dx);
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for &p in parts {
                    let (r, c) = val(p).shape();
                    if want(p) {
                        let mut dp = Tensor2D::zeros(r, c);
                        for i in 0..r {
                            dp.row_mut(i).copy_from_slice(&dy.row(i)[off..off + c]);
                        }
                        acc(g, p, dp);
                    }
                    off += c;
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let (r, c) = val(p).shape();
                    if want(p) {
                        let dp = Tensor2D::from_vec(r, c, dy.data()[off * c..(off + r) * c].to_vec()).unwrap();
                        acc(g, p, dp);
                    }
                    off += r;
                }
            }
            Op::GatherRows(a, idx) => {
                let (r, c) = val(*a).shape();
                let mut dx = Tensor2D::zeros(r, c);
                for (k, &i) in idx.iter().enumerate() {
                    for (o, v) in dx.row_mut(i).iter_mut().zip(dy.row(k)) {
                        *o += v;
                    }
                }
                acc(g, *a, dx);
            }
            Op::ScatterRows(a, idx) => {
                let c = dy.cols();
                let mut data = Vec::with_capacity(idx.len() * c);
                for &i in idx {
                    data.extend_from_slice(dy.row(i));
                }
                acc(g, *a, Tensor2D::from_vec(idx.len(), c, data).unwrap());
            }
            Op::MeanRows(a) => {
                let (r, c) = val(*a).shape();
                let mut dx = Tensor2D::zeros(r, c);
                for i in 0..r {
                    for (o, v) in dx.row_mut(i).iter_mut().zip(dy.row(0)) {
                        *o = v / r as f64;
                    }
                }
                acc(g, *a, dx);
            }
            Op::Sum(a) => {
                let (r, c) = val(*a).shape();
                acc(g, *a, Tensor2D::filled(r, c, dy.data()[0]));
            }
            Op::LayerNorm { x, inv_std } => {
                let (r, c) = y.shape();
                let mut dx = Tensor2D::zeros(r, c);
                for i in 0..r {
                    let yr = y.row(i);
                    let dr = dy.row(i);
                    let mean_d = dr.iter().sum::<f64>() / c as f64;
                    let mean_dy = dr.iter().zip(yr).map(|(d, y)| d * y).sum::<f64>() / c as f64;
                    for (j, o) in dx.row_mut(i).iter_mut().enumerate() {
                        *o = inv_std[i] * (dr[j] - mean_d - yr[j] * mean_dy);
                    }
                }
                acc(g, *x, dx);
            }
            Op::Dropout(a, mask) => {
                let (r, c) = dy.shape();
                let data = dy.data().iter().zip(mask).map(|(d, m)| d * m).collect();
                acc(g, *a, Tensor2D::from_vec(r, c, data).unwrap());
            }
        }
    }
}

fn zip_map(a: &Tensor2D, b: &Tensor2D, f: impl Fn(f64, f64) -> f64) -> Tensor2D {
    let (r, c) = a.shape();
    Tensor2D::from_vec(r, c, a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect()).unwrap()
}

fn acc(g: &mut [Option<Tensor2D>], v: Var, t: Tensor2D) {
    match &mut g[v.0] {
        Some(existing) => existing.add_assign(&t),
        slot @ None => *slot = Some(t),
    }
}
