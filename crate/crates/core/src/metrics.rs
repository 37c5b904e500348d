//! Navigation metrics: TL, NE, SR, SPL, nDTW and goal progress.
//!
//! Distances for NE, nDTW and GP are geodesic (shortest path on the graph).

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::envgraph::{EnvError, NavGraph, NodeId};

pub const DEFAULT_SUCCESS_THRESHOLD_M: f64 = 3.0;
pub const DEFAULT_NDTW_THRESHOLD_M: f64 = 3.0;

#[derive(Debug, Error, PartialEq)]
pub enum MetricError {
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error("path is empty")]
    EmptyPath,
    #[error("negative length {0}")]
    NegativeLength(f64),
    #[error("cannot aggregate an empty result list")]
    EmptyAggregate,
    #[error("threshold must be positive, got {0}")]
    BadThreshold(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeResult {
    pub executed_path: Vec<NodeId>,
    pub reference_path: Vec<NodeId>,
    pub goal: NodeId,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub tl_m: f64,
    pub ne_m: f64,
    pub sr: f64,
    pub spl: f64,
    pub ndtw: f64,
    pub gp_m: f64,
    pub success_threshold_m: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricConfig {
    pub success_threshold_m: f64,
    pub ndtw_threshold_m: f64,
}

impl Default for MetricConfig {
    fn default() -> Self {
        MetricConfig {
            success_threshold_m: DEFAULT_SUCCESS_THRESHOLD_M,
            ndtw_threshold_m: DEFAULT_NDTW_THRESHOLD_M,
        }
    }
}

pub fn trajectory_length(path: &[NodeId], g: &NavGraph) -> Result<f64, MetricError> {
    if path.is_empty() {
        return Err(MetricError::EmptyPath);
    }
    Ok(g.path_length(path)?)
}

pub fn navigation_error(path: &[NodeId], goal: NodeId, g: &NavGraph) -> Result<f64, MetricError> {
    let end = *path.last().ok_or(MetricError::EmptyPath)?;
    Ok(g.geodesic(end, goal)?)
}

/// Boundary inclusive: an error equal to the threshold counts as success.
pub fn success(ne_m: f64, threshold_m: f64) -> f64 {
    if ne_m <= threshold_m {
        1.0
    } else {
        0.0
    }
}

pub fn spl(success: f64, shortest_m: f64, executed_m: f64) -> Result<f64, MetricError> {
    if shortest_m < 0.0 {
        return Err(MetricError::NegativeLength(shortest_m));
    }
    if executed_m < 0.0 {
        return Err(MetricError::NegativeLength(executed_m));
    }
    if success == 0.0 {
        return Ok(0.0);
    }
    let denom = executed_m.max(shortest_m);
    if denom == 0.0 {
        return Ok(success);
    }
    Ok(success * shortest_m / denom)
}

/// Dynamic time warping cost with geodesic local cost.
pub fn dtw(pred: &[NodeId], reference: &[NodeId], g: &NavGraph) -> Result<f64, MetricError> {
    if pred.is_empty() || reference.is_empty() {
        return Err(MetricError::EmptyPath);
    }
    let m = reference.len();
    let mut prev = vec![f64::INFINITY; m + 1];
    let mut cur = vec![f64::INFINITY; m + 1];
    prev[0] = 0.0;
    for &p in pred {
        cur[0] = f64::INFINITY;
        for (j, &r) in reference.iter().enumerate() {
            let c = g.geodesic(p, r)?;
            cur[j + 1] = c + prev[j + 1].min(cur[j]).min(prev[j]);
        }
        std::mem::swap(&mut prev, &mut cur);
        prev[0] = f64::INFINITY;
    }
    Ok(prev[m])
}

/// `exp(-DTW / (|ref| * d_th))`.
pub fn ndtw(pred: &[NodeId], reference: &[NodeId], g: &NavGraph, d_th: f64) -> Result<f64, MetricError> {
    if !(d_th > 0.0) {
        return Err(MetricError::BadThreshold(d_th));
    }
    let cost = dtw(pred, reference, g)?;
    Ok((-cost / (reference.len() as f64 * d_th)).exp())
}

/// Reduction in geodesic distance to the goal between start and end.
pub fn goal_progress(start: NodeId, end: NodeId, goal: NodeId, g: &NavGraph) -> Result<f64, MetricError> {
    Ok(g.geodesic(start, goal)? - g.geodesic(end, goal)?)
}

pub fn evaluate_episode(r: &EpisodeResult, g: &NavGraph, cfg: &MetricConfig) -> Result<MetricsReport, MetricError> {
    let start = *r.executed_path.first().ok_or(MetricError::EmptyPath)?;
    let end = *r.executed_path.last().unwrap();
    if r.reference_path.is_empty() {
        return Err(MetricError::EmptyPath);
    }
    let tl = trajectory_length(&r.executed_path, g)?;
    let ne = navigation_error(&r.executed_path, r.goal, g)?;
    let sr = success(ne, cfg.success_threshold_m);
    let shortest = g.geodesic(start, r.goal)?;
    Ok(MetricsReport {
        tl_m: tl,
        ne_m: ne,
        sr,
        spl: spl(sr, shortest, tl)?,
        ndtw: ndtw(&r.executed_path, &r.reference_path, g, cfg.ndtw_threshold_m)?,
        gp_m: goal_progress(start, end, r.goal, g)?,
        success_threshold_m: cfg.success_threshold_m,
    })
}

/// Field-wise arithmetic mean.
pub fn aggregate(results: &[MetricsReport]) -> Result<MetricsReport, MetricError> {
    if results.is_empty() {
        return Err(MetricError::EmptyAggregate);
    }
    let n = results.len() as f64;
    let mean = |f: fn(&MetricsReport) -> f64| results.iter().map(f).sum::<f64>() / n;
    Ok(MetricsReport {
        tl_m: mean(|r| r.tl_m),
        ne_m: mean(|r| r.ne_m),
        sr: mean(|r| r.sr),
        spl: mean(|r| r.spl),
        ndtw: mean(|r| r.ndtw),
        gp_m: mean(|r| r.gp_m),
        success_threshold_m: mean(|r| r.success_threshold_m),
    })
}
