use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{ShapeError, Tensor2D};

pub const PARAM_FORMAT: &str = "moenav-params";
pub const PARAM_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named parameter tensors in insertion order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor2D>,
    by_name: BTreeMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor2D) -> ParamId {
        let name = name.into();
        assert!(!self.by_name.contains_key(&name), "duplicate parameter {name}");
        let id = ParamId(self.values.len());
        self.by_name.insert(name.clone(), id);
        self.names.push(name);
        self.values.push(value);
        id
    }

    /// Gaussian init with std `1/sqrt(rows)` (fan-in of an `x · W` weight).
    pub fn add_init<R: Rng>(&mut self, name: impl Into<String>, rows: usize, cols: usize, rng: &mut R) -> ParamId {
        let std = 1.0 / (rows.max(1) as f64).sqrt();
        let data = (0..rows * cols).map(|_| rng.sample::<f64, _>(StandardNormal) * std).collect();
        self.add(name, Tensor2D::from_vec(rows, cols, data).unwrap())
    }

    pub fn add_zeros(&mut self, name: impl Into<String>, rows: usize, cols: usize) -> ParamId {
        self.add(name, Tensor2D::zeros(rows, cols))
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn get(&self, id: ParamId) -> &Tensor2D {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor2D {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(|t| t.data().len()).sum()
    }

    pub fn to_checkpoint(&self) -> ParamCheckpoint {
        ParamCheckpoint {
            format: PARAM_FORMAT.to_string(),
            version: PARAM_FORMAT_VERSION,
            params: self
                .names
                .iter()
                .zip(&self.values)
                .map(|(name, t)| NamedTensor {
                    name: name.clone(),
                    shape: [t.rows(), t.cols()],
                    values: t.data().to_vec(),
                })
                .collect(),
        }
    }

    /// Overwrites values from a checkpoint; every parameter must be present with the same shape.
    pub fn load_checkpoint(&mut self, ckpt: &ParamCheckpoint) -> Result<(), ShapeError> {
        if ckpt.format != PARAM_FORMAT || ckpt.version != PARAM_FORMAT_VERSION {
            return Err(ShapeError::new(format!(
                "unsupported checkpoint format {} v{}",
                ckpt.format, ckpt.version
            )));
        }
        let by_name: BTreeMap<&str, &NamedTensor> = ckpt.params.iter().map(|p| (p.name.as_str(), p)).collect();
        for i in 0..self.values.len() {
            let name = &self.names[i];
            let p = by_name
                .get(name.as_str())
                .ok_or_else(|| ShapeError::new(format!("checkpoint lacks {name}")))?;
            let t = Tensor2D::from_vec(p.shape[0], p.shape[1], p.values.clone())?;
            if t.shape() != self.values[i].shape() {
                return Err(ShapeError::new(format!("shape mismatch for {name}")));
            }
            self.values[i] = t;
        }
        Ok(())
    }
}

/// Gradient buffers matching a [`ParamStore`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    grads: Vec<Tensor2D>,
}

impl Gradients {
    pub fn zeros_like(store: &ParamStore) -> Self {
        Gradients {
            grads: store.values.iter().map(|t| Tensor2D::zeros(t.rows(), t.cols())).collect(),
        }
    }

    pub fn get(&self, id: ParamId) -> &Tensor2D {
        &self.grads[id.0]
    }

    pub(crate) fn accumulate(&mut self, id: ParamId, g: &Tensor2D) {
        self.grads[id.0].add_assign(g);
    }

    pub fn add(&mut self, other: &Gradients) {
        for (a, b) in self.grads.iter_mut().zip(&other.grads) {
            a.add_assign(b);
        }
    }

    pub fn scale(&mut self, s: f64) {
        for g in self.grads.iter_mut() {
            g.scale_assign(s);
        }
    }

    pub fn zero(&mut self) {
        for g in self.grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|x| *x = 0.0);
        }
    }

    pub fn norm(&self) -> f64 {
        self.grads
            .iter()
            .flat_map(|g| g.data())
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.grads.iter().all(Tensor2D::is_finite)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Tensor2D)> {
        self.grads.iter().enumerate().map(|(i, g)| (ParamId(i), g))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedTensor {
    pub name: String,
    pub shape: [usize; 2],
    pub values: Vec<f64>,
}

/// Versioned JSON parameter checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamCheckpoint {
    pub format: String,
    pub version: u32,
    pub params: Vec<NamedTensor>,
}
