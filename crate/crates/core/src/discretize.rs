//! Snapping continuous viewpoint trajectories onto a navigation graph.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::envgraph::{NavGraph, NodeId};

pub const DEFAULT_ENDPOINT_THRESHOLD_M: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContinuousTrajectory {
    pub source_id: String,
    pub points: Vec<[f64; 3]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscretePath {
    pub source_id: String,
    pub nodes: Vec<NodeId>,
    pub endpoint_error_m: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Error, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Rejection {
    #[error("trajectory has no points")]
    Empty,
    #[error("snapped nodes {from} and {to} are not adjacent")]
    Disconnected { from: NodeId, to: NodeId },
    #[error("final node is {error_m:.3} m from the trajectory end")]
    EndpointTooFar { error_m: f64 },
}

fn nearest_node(g: &NavGraph, p: &[f64; 3]) -> NodeId {
    let mut best: Option<(f64, NodeId)> = None;
    // nodes() is sorted by id, so strict < keeps the smaller id on ties
    for n in g.nodes() {
        let d = ((n.pos[0] - p[0]).powi(2) + (n.pos[1] - p[1]).powi(2) + (n.pos[2] - p[2]).powi(2)).sqrt();
        if best.is_none_or(|(bd, _)| d < bd) {
            best = Some((d, n.id));
        }
    }
    best.expect("graphs are non-empty").1
}

/// Maps each point to its nearest node, merges repeats, and applies the
/// adjacency and endpoint-distance rejection rules.
pub fn snap_trajectory(
    g: &NavGraph,
    t: &ContinuousTrajectory,
    threshold_m: f64,
) -> Result<DiscretePath, Rejection> {
    let last = *t.points.last().ok_or(Rejection::Empty)?;
    let mut nodes: Vec<NodeId> = Vec::new();
    for p in &t.points {
        let n = nearest_node(g, p);
        if nodes.last() != Some(&n) {
            nodes.push(n);
        }
    }
    for w in nodes.windows(2) {
        if !g.is_adjacent(w[0], w[1]) {
            return Err(Rejection::Disconnected { from: w[0], to: w[1] });
        }
    }
    let end = g.position(*nodes.last().unwrap()).expect("snapped to a graph node");
    let error_m = ((end[0] - last[0]).powi(2) + (end[1] - last[1]).powi(2) + (end[2] - last[2]).powi(2)).sqrt();
    if error_m > threshold_m {
        return Err(Rejection::EndpointTooFar { error_m });
    }
    Ok(DiscretePath {
        source_id: t.source_id.clone(),
        nodes,
        endpoint_error_m: error_m,
    })
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SnapStats {
    pub kept: usize,
    pub rejected_disconnected: usize,
    pub rejected_endpoint: usize,
    pub rejected_empty: usize,
    /// Mean node count of kept paths; absent when nothing was kept.
    pub mean_len: Option<f64>,
}

pub fn snap_batch(
    g: &NavGraph,
    trajectories: &[ContinuousTrajectory],
    threshold_m: f64,
) -> (Vec<DiscretePath>, SnapStats) {
    let mut stats = SnapStats::default();
    let mut paths = Vec::new();
    let mut total_len = 0usize;
    for t in trajectories {
        match snap_trajectory(g, t, threshold_m) {
            Ok(p) => {
                stats.kept += 1;
                total_len += p.nodes.len();
                paths.push(p);
            }
            Err(Rejection::Disconnected { .. }) => stats.rejected_disconnected += 1,
            Err(Rejection::EndpointTooFar { .. }) => stats.rejected_endpoint += 1,
            Err(Rejection::Empty) => stats.rejected_empty += 1,
        }
    }
    if stats.kept > 0 {
        stats.mean_len = Some(total_len as f64 / stats.kept as f64);
    }
    (paths, stats)
}
