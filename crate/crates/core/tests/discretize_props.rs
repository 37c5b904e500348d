mod common;

use common::random_walk;
use moenav::discretize::{snap_batch, snap_trajectory, ContinuousTrajectory, Rejection, DEFAULT_ENDPOINT_THRESHOLD_M};
use moenav::envgraph::{generate_world, NavGraph, NodeId};
use proptest::prelude::{prop_assert, prop_assert_eq, proptest, ProptestConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Densely sampled segments along a node walk with Gaussian-ish jitter, sometimes jumping.
fn noisy_trajectory<R: Rng>(g: &NavGraph, rng: &mut R, id: usize) -> ContinuousTrajectory {
    let len = rng.gen_range(1..7);
    let mut walk = random_walk(g, len, rng);
    if rng.gen_bool(0.2) {
        let far = rng.gen_range(0..g.len());
        walk.push(far);
    }
    let jitter = rng.gen_range(0.0..0.6);
    let mut points = Vec::new();
    for w in walk.windows(2) {
        let (a, b) = (g.position(w[0]).unwrap(), g.position(w[1]).unwrap());
        for s in 0..8 {
            let t = s as f64 / 8.0;
            points.push([
                a[0] + t * (b[0] - a[0]) + rng.gen_range(-jitter..=jitter),
                a[1] + t * (b[1] - a[1]) + rng.gen_range(-jitter..=jitter),
                a[2] + t * (b[2] - a[2]),
            ]);
        }
    }
    let end = g.position(*walk.last().unwrap()).unwrap();
    points.push([end[0] + rng.gen_range(-jitter..=jitter), end[1] + rng.gen_range(-jitter..=jitter), end[2]]);
    ContinuousTrajectory {
        source_id: format!("t{id}"),
        points,
    }
}

fn node_points(g: &NavGraph, nodes: &[NodeId]) -> Vec<[f64; 3]> {
    nodes.iter().map(|&n| g.position(n).unwrap()).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn accepted_paths_satisfy_invariants(seed in 0u64..10_000) {
        let g = generate_world(seed, 20, 3.0, 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let trajs: Vec<_> = (0..20).map(|i| noisy_trajectory(&g, &mut rng, i)).collect();
        let (paths, stats) = snap_batch(&g, &trajs, DEFAULT_ENDPOINT_THRESHOLD_M);
        prop_assert_eq!(stats.kept + stats.rejected_disconnected + stats.rejected_endpoint + stats.rejected_empty, trajs.len());
        prop_assert_eq!(paths.len(), stats.kept);
        for p in &paths {
            prop_assert!(!p.nodes.is_empty());
            for w in p.nodes.windows(2) {
                prop_assert!(w[0] != w[1]);
                prop_assert!(g.is_adjacent(w[0], w[1]));
            }
            prop_assert!(p.endpoint_error_m <= DEFAULT_ENDPOINT_THRESHOLD_M);
        }
    }

    #[test]
    fn snapping_is_idempotent(seed in 0u64..10_000) {
        let g = generate_world(seed, 20, 3.0, 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 3);
        for i in 0..10 {
            let t = noisy_trajectory(&g, &mut rng, i);
            if let Ok(p) = snap_trajectory(&g, &t, DEFAULT_ENDPOINT_THRESHOLD_M) {
                let again = ContinuousTrajectory { source_id: p.source_id.clone(), points: node_points(&g, &p.nodes) };
                let q = snap_trajectory(&g, &again, DEFAULT_ENDPOINT_THRESHOLD_M).unwrap();
                prop_assert_eq!(&q.nodes, &p.nodes);
                prop_assert_eq!(q.endpoint_error_m, 0.0);
            }
        }
    }

    #[test]
    fn endpoint_boundary(seed in 0u64..10_000, offset in 0.0f64..1.0) {
        let g = generate_world(seed, 20, 3.0, 3).unwrap();
        // Node 0 with the end point displaced horizontally by `offset`; nearest-node snapping
        // still holds as long as no other node is closer.
        let p0 = g.position(0).unwrap();
        let end = [p0[0] + offset, p0[1], p0[2]];
        let nearest_is_zero = g.nodes().iter().all(|n| {
            let d = ((n.pos[0] - end[0]).powi(2) + (n.pos[1] - end[1]).powi(2) + (n.pos[2] - end[2]).powi(2)).sqrt();
            n.id == 0 || d > offset
        });
        if nearest_is_zero {
            let t = ContinuousTrajectory { source_id: "b".into(), points: vec![p0, end] };
            let r = snap_trajectory(&g, &t, DEFAULT_ENDPOINT_THRESHOLD_M);
            if offset > DEFAULT_ENDPOINT_THRESHOLD_M {
                prop_assert!(matches!(r, Err(Rejection::EndpointTooFar { .. })), "{offset}");
            } else {
                prop_assert!(r.is_ok(), "{offset}");
            }
        }
    }
}

#[test]
fn endpoint_exactly_at_threshold_is_kept() {
    let g = generate_world(2, 20, 3.0, 3).unwrap();
    let p0 = g.position(0).unwrap();
    let at = ContinuousTrajectory {
        source_id: "at".into(),
        points: vec![[p0[0] + 0.5, p0[1], p0[2]]],
    };
    assert!(snap_trajectory(&g, &at, 0.5).is_ok());
    let beyond = ContinuousTrajectory {
        source_id: "beyond".into(),
        points: vec![[p0[0] + 0.5 + 1e-9, p0[1], p0[2]]],
    };
    assert!(matches!(snap_trajectory(&g, &beyond, 0.5), Err(Rejection::EndpointTooFar { .. })));
}
