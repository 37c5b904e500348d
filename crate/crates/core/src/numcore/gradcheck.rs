//! Central finite-difference verification of tape gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Gradients, Graph, ParamStore, Var};

pub const DEFAULT_EPS: f64 = 1e-5;
pub const DEFAULT_TOLERANCE: f64 = 1e-4;
/// Denominator floor of the relative error, so vanishing gradients are judged absolutely.
/// [`grad_check`] scales it by `max(1, |loss|)` to track the roundoff of the difference quotient.
pub const REL_ERROR_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub checked: usize,
    /// Coordinates left out because a discrete decision changed within `±eps`.
    pub skipped: usize,
    /// Parameter name and flat index of the worst coordinate.
    pub worst: Option<(String, usize)>,
}

impl GradCheckReport {
    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_rel_error < tolerance
    }
}

pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    rel_error_floored(analytic, numeric, REL_ERROR_FLOOR)
}

pub fn rel_error_floored(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compares analytic gradients of the scalar built by `loss` with central
/// differences `(f(x+eps) - f(x-eps)) / 2eps`.
///
/// With `per_param = Some(m)` only `m` seeded-random coordinates of each
/// parameter tensor are probed; `None` probes every coordinate.
pub fn grad_check<F>(store: &ParamStore, eps: f64, per_param: Option<usize>, seed: u64, loss: F) -> GradCheckReport
where
    F: Fn(&mut Graph) -> Var,
{
    grad_check_piecewise(store, eps, per_param, seed, |g| (loss(g), ()))
}

/// Like [`grad_check`] for losses with discrete branches (top-k routing, argmax counts).
///
/// `loss` also returns a signature of its discrete decisions, which is paired with
/// the tape's ReLU pattern. A coordinate whose `±eps` evaluations produce a
/// different signature straddles a kink, where the central difference is
/// meaningless; it is counted in `skipped` instead.
pub fn grad_check_piecewise<F, S>(
    store: &ParamStore,
    eps: f64,
    per_param: Option<usize>,
    seed: u64,
    loss: F,
) -> GradCheckReport
where
    F: Fn(&mut Graph) -> (Var, S),
    S: PartialEq,
{
    let mut grads = Gradients::zeros_like(store);
    let (base, signature) = {
        let mut g = Graph::new(store);
        let (l, sig) = loss(&mut g);
        let v = g.scalar(l);
        let relu = g.relu_pattern();
        g.backward(l, &mut grads);
        (v, (sig, relu))
    };
    let floor = REL_ERROR_FLOOR * base.abs().max(1.0);
    let eval = |s: &ParamStore| {
        let mut g = Graph::new(s);
        let (l, sig) = loss(&mut g);
        (g.scalar(l), (sig, g.relu_pattern()))
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut work = store.clone();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        checked: 0,
        skipped: 0,
        worst: None,
    };
    for id in store.ids() {
        let n = store.get(id).data().len();
        let coords: Vec<usize> = match per_param {
            Some(m) if m < n => sample(&mut rng, n, m).into_vec(),
            _ => (0..n).collect(),
        };
        for i in coords {
            let orig = store.get(id).data()[i];
            work.get_mut(id).data_mut()[i] = orig + eps;
            let (fp, sp) = eval(&work);
            work.get_mut(id).data_mut()[i] = orig - eps;
            let (fm, sm) = eval(&work);
            work.get_mut(id).data_mut()[i] = orig;
            if sp != signature || sm != signature {
                report.skipped += 1;
                continue;
            }
            let numeric = (fp - fm) / (2.0 * eps);
            let err = rel_error_floored(grads.get(id).data()[i], numeric, floor);
            report.checked += 1;
            if err >= report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = err;
                report.worst = Some((store.name(id).to_string(), i));
            }
        }
    }
    report
}

/// Reduces a tensor output to a scalar with fixed pseudo-random weights, so
/// every output coordinate contributes a distinct sensitivity.
pub fn weighted_sum(g: &mut Graph, y: Var, seed: u64) -> Var {
    use rand::Rng;
    let (r, c) = g.shape(y);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w: Vec<f64> = (0..r * c).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let w = g.input(super::Tensor2D::from_vec(r, c, w).unwrap());
    let p = g.mul(y, w);
    g.sum(p)
}
