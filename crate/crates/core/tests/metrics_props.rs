mod common;

use std::collections::BTreeMap;

use common::{brute_force_dtw, floyd, random_walk};
use moenav::envgraph::{generate_world, NavGraph, Node, NodeId, WorldParams};
use moenav::metrics::{aggregate, dtw, evaluate_episode, ndtw, EpisodeResult, MetricConfig};
use proptest::prelude::{prop_assert, proptest, ProptestConfig};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn relabel(g: &NavGraph, perm: &[NodeId]) -> NavGraph {
    let nodes = g
        .nodes()
        .iter()
        .map(|n| Node {
            id: perm[n.id],
            pos: n.pos,
        })
        .collect();
    let edges: Vec<[NodeId; 2]> = g.edges().iter().map(|[a, b]| [perm[*a], perm[*b]]).collect();
    let landmarks: BTreeMap<NodeId, Vec<u32>> = g.to_file().landmarks.into_iter().map(|(k, v)| (perm[k], v)).collect();
    NavGraph::new(nodes, &edges, landmarks, g.seed(), WorldParams::default()).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn dtw_matches_brute_force(seed in 0u64..10_000, lp in 1usize..=5, lr in 1usize..=5) {
        let g = generate_world(seed, 8, 2.5, 2).unwrap();
        let d = floyd(&g);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pred = random_walk(&g, lp, &mut rng);
        let reference = random_walk(&g, lr, &mut rng);
        let fast = dtw(&pred, &reference, &g).unwrap();
        prop_assert!((fast - brute_force_dtw(&pred, &reference, &d)).abs() < 1e-9);
    }

    #[test]
    fn moving_away_never_raises_ndtw(seed in 0u64..10_000, lp in 1usize..=6, lr in 2usize..=6) {
        let g = generate_world(seed, 10, 3.0, 2).unwrap();
        let d = floyd(&g);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 7);
        let pred = random_walk(&g, lp, &mut rng);
        let reference = random_walk(&g, lr, &mut rng);
        let last = *pred.last().unwrap();
        let base = ndtw(&pred, &reference, &g, 3.0).unwrap();
        for x in 0..g.len() {
            if reference.iter().all(|&r| d[x][r] >= d[last][r]) {
                let mut longer = pred.clone();
                longer.push(x);
                prop_assert!(ndtw(&longer, &reference, &g, 3.0).unwrap() <= base + 1e-12);
            }
        }
    }

    #[test]
    fn metrics_are_bounded_and_match_distance_oracles(seed in 0u64..10_000, lp in 1usize..=8) {
        let g = generate_world(seed, 12, 3.0, 3).unwrap();
        let d = floyd(&g);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let executed = random_walk(&g, lp, &mut rng);
        let reference = random_walk(&g, 4, &mut rng);
        let goal = *reference.last().unwrap();
        let r = EpisodeResult { executed_path: executed.clone(), reference_path: reference, goal };
        let m = evaluate_episode(&r, &g, &MetricConfig::default()).unwrap();
        prop_assert!(0.0 <= m.spl && m.spl <= m.sr && m.sr <= 1.0);
        prop_assert!(m.ndtw > 0.0 && m.ndtw <= 1.0);
        prop_assert!(m.tl_m >= 0.0);
        let end = *executed.last().unwrap();
        prop_assert!((m.ne_m - d[end][goal]).abs() < 1e-9);
        prop_assert!((m.gp_m - (d[executed[0]][goal] - d[end][goal])).abs() < 1e-9);
    }

    #[test]
    fn metrics_ignore_node_labels(seed in 0u64..10_000) {
        let g = generate_world(seed, 10, 3.0, 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut perm: Vec<NodeId> = (0..g.len()).collect();
        perm.shuffle(&mut rng);
        let h = relabel(&g, &perm);
        let executed = random_walk(&g, 5, &mut rng);
        let reference = random_walk(&g, 4, &mut rng);
        let goal = *reference.last().unwrap();
        let a = evaluate_episode(&EpisodeResult { executed_path: executed.clone(), reference_path: reference.clone(), goal }, &g, &MetricConfig::default()).unwrap();
        let map = |p: &[NodeId]| p.iter().map(|&n| perm[n]).collect::<Vec<_>>();
        let b = evaluate_episode(&EpisodeResult { executed_path: map(&executed), reference_path: map(&reference), goal: perm[goal] }, &h, &MetricConfig::default()).unwrap();
        for (x, y) in [(a.tl_m, b.tl_m), (a.ne_m, b.ne_m), (a.sr, b.sr), (a.spl, b.spl), (a.ndtw, b.ndtw), (a.gp_m, b.gp_m)] {
            prop_assert!((x - y).abs() < 1e-9);
        }
    }

    #[test]
    fn aggregate_is_order_free(seed in 0u64..10_000, n in 1usize..20) {
        let g = generate_world(seed, 12, 3.0, 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut rows: Vec<_> = (0..n).map(|_| {
            let executed = random_walk(&g, 4, &mut rng);
            let reference = random_walk(&g, 4, &mut rng);
            let goal = reference[3];
            evaluate_episode(&EpisodeResult { executed_path: executed, reference_path: reference, goal }, &g, &MetricConfig::default()).unwrap()
        }).collect();
        let a = aggregate(&rows).unwrap();
        rows.shuffle(&mut rng);
        let b = aggregate(&rows).unwrap();
        prop_assert!((a.sr - b.sr).abs() < 1e-12 && (a.spl - b.spl).abs() < 1e-12 && (a.ndtw - b.ndtw).abs() < 1e-12);
        prop_assert!((a.tl_m - b.tl_m).abs() < 1e-9 && (a.ne_m - b.ne_m).abs() < 1e-9);
        prop_assert!(a.spl <= a.sr);
    }
}

#[test]
fn ndtw_of_reference_against_itself_is_one() {
    let g = generate_world(4, 10, 3.0, 2).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let p = random_walk(&g, 5, &mut rng);
    assert_eq!(ndtw(&p, &p, &g, 3.0).unwrap(), 1.0);
}
