//! Registry of finite-difference gradient checks over every layer and the full policy.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::envgraph::{Episode, NavGraph};
use crate::moe::{
    balance_loss_on_tape, build_routing_feature, ffn_experts, kv_experts, linear_experts, MoeLayer, Placement,
    RoutingInputs, RoutingKind, RoutingParams,
};
use crate::numcore::gradcheck::{grad_check, grad_check_piecewise, weighted_sum, GradCheckReport, DEFAULT_EPS};
use crate::numcore::layers::{affinity_from_positions, cross_attention, gasa, self_attention, AttentionParams, Ffn, Linear};
use crate::numcore::{Graph, ParamId, ParamStore, Tensor2D, Var};
use crate::policy::{four_node_fixture, Action, Policy, PolicyConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComponentCheck {
    pub component: String,
    pub max_rel_error: f64,
    pub checked: usize,
    /// Coordinates skipped because a routing decision flipped within the step.
    pub skipped: usize,
    pub trials: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scope {
    Layer,
    Policy,
}

type Check = fn(u64) -> GradCheckReport;

fn tensor(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor2D {
    Tensor2D::from_vec(r, c, (0..r * c).map(|_| rng.gen_range(-1.0..1.0)).collect()).expect("sizes match")
}

fn leaves(seed: u64, shapes: &[(usize, usize)]) -> (ParamStore, Vec<ParamId>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut s = ParamStore::new();
    let ids = shapes
        .iter()
        .enumerate()
        .map(|(i, &(r, c))| s.add(format!("x{i}"), tensor(&mut rng, r, c)))
        .collect();
    (s, ids)
}

fn full(store: &ParamStore, seed: u64, f: impl Fn(&mut Graph) -> Var) -> GradCheckReport {
    grad_check(store, DEFAULT_EPS, None, seed, |g| {
        let y = f(g);
        weighted_sum(g, y, seed ^ 0xA5)
    })
}

/// [`full`] for outputs whose discrete routing is part of the returned signature.
fn full_routed(store: &ParamStore, seed: u64, f: impl Fn(&mut Graph) -> (Var, Vec<Vec<usize>>)) -> GradCheckReport {
    grad_check_piecewise(store, DEFAULT_EPS, None, seed, |g| {
        let (y, sig) = f(g);
        (weighted_sum(g, y, seed ^ 0xA5), sig)
    })
}

fn check_matmul(seed: u64) -> GradCheckReport {
    let (s, p) = leaves(seed, &[(3, 4), (4, 2), (5, 4)]);
    full(&s, seed, |g| {
        let (a, b, c) = (g.param(p[0]), g.param(p[1]), g.param(p[2]));
        let x = g.matmul(a, b);
        let y = g.matmul_t(a, c);
        let xt = g.transpose(x);
        let z = g.matmul(xt, y);
        g.sum(z)
    })
}

fn check_elementwise(seed: u64) -> GradCheckReport {
    let (s, p) = leaves(seed, &[(3, 4), (3, 4), (1, 4), (1, 1), (3, 1)]);
    full(&s, seed, |g| {
        let v: Vec<Var> = p.iter().map(|&id| g.param(id)).collect();
        let a = g.add(v[0], v[1]);
        let m = g.mul(a, v[1]);
        let r = g.add_row(m, v[2]);
        let f = g.affine(r, 1.5, -0.2);
        let sb = g.scale_by(v[3], f);
        let mc = g.mul_col(sb, v[4]);
        let sg = g.sigmoid(mc);
        let re = g.relu(mc);
        let both = g.concat_cols(&[sg, re]);
        g.scale(both, 0.7)
    })
}

fn check_softmax(seed: u64) -> GradCheckReport {
    let (s, p) = leaves(seed, &[(3, 5), (1, 5)]);
    let mask = [true, false, true, true, false];
    full(&s, seed, |g| {
        let a = g.param(p[0]);
        let b = g.param(p[1]);
        let sm = g.softmax_rows(a);
        let ms = g.masked_softmax_rows(a, Some(&mask));
        let ce = g.cross_entropy(b, Some(&mask), 2);
        let x = g.add(sm, ms);
        let t = g.sum(x);
        g.concat_cols(&[t, ce])
    })
}

fn check_structural(seed: u64) -> GradCheckReport {
    let (s, p) = leaves(seed, &[(4, 6), (2, 6)]);
    full(&s, seed, |g| {
        let a = g.param(p[0]);
        let b = g.param(p[1]);
        let sl = g.slice_cols(a, 1, 3);
        let ga = g.gather_rows(a, &[3, 0, 3]);
        let sc = g.scatter_rows(b, &[1, 3], 4);
        let cr = g.concat_rows(&[a, b]);
        let mr = g.mean_rows(cr);
        let r = g.row(ga, 1);
        let x = g.add(a, sc);
        let xs = g.slice_cols(x, 0, 3);
        let sum = g.add(sl, xs);
        let t = g.transpose(sum);
        let tm = g.mean_rows(t);
        g.concat_cols(&[mr, r, tm])
    })
}

fn check_layer_norm(seed: u64) -> GradCheckReport {
    let (s, p) = leaves(seed, &[(3, 6)]);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mask: Vec<f64> = (0..18).map(|_| if rng.gen_bool(0.7) { 1.0 / 0.7 } else { 0.0 }).collect();
    full(&s, seed, |g| {
        let a = g.param(p[0]);
        let ln = g.layer_norm(a);
        g.dropout(ln, mask.clone())
    })
}

fn check_linear_ffn(seed: u64) -> GradCheckReport {
    let (mut s, p) = leaves(seed, &[(3, 5)]);
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 1);
    let lin = Linear::new(&mut s, "lin", 5, 4, true, &mut rng);
    let ffn = Ffn::new(&mut s, "ffn", 4, 7, 3, &mut rng);
    full(&s, seed, |g| {
        let x = g.param(p[0]);
        let h = lin.forward(g, x);
        ffn.forward(g, h)
    })
}

fn check_attention(seed: u64) -> GradCheckReport {
    let (mut s, p) = leaves(seed, &[(4, 6), (3, 6)]);
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 1);
    let ap = AttentionParams::new(&mut s, "att", 6, &mut rng);
    full(&s, seed, |g| {
        let xq = g.param(p[0]);
        let xkv = g.param(p[1]);
        let c = cross_attention(g, xq, xkv, &ap, 2).expect("shapes agree");
        self_attention(g, c, &ap, 3).expect("shapes agree")
    })
}

fn check_gasa(seed: u64) -> GradCheckReport {
    let (mut s, p) = leaves(seed, &[(4, 6)]);
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 1);
    let ap = AttentionParams::new(&mut s, "gasa", 6, &mut rng);
    let pos: Vec<[f64; 3]> = (0..4).map(|_| [rng.gen_range(0.0..5.0), rng.gen_range(0.0..5.0), 0.0]).collect();
    let aff = affinity_from_positions(&pos, 2.0);
    full(&s, seed, |g| {
        let x = g.param(p[0]);
        let a = g.input(aff.clone());
        gasa(g, x, &ap, a, 2).expect("shapes agree")
    })
}

fn check_moe_linear(seed: u64) -> GradCheckReport {
    let (mut s, p) = leaves(seed, &[(5, 4), (5, 3)]);
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 1);
    let experts = linear_experts(&mut s, "moe", 4, 4, 3, true, &mut rng);
    let layer = MoeLayer::with_random_router(&mut s, "moe", 3, 2, experts, &mut rng).expect("valid k");
    full_routed(&s, seed, |g| {
        let x = g.param(p[0]);
        let xr = g.param(p[1]);
        let (y, gate) = layer.forward(g, x, xr).expect("shapes agree");
        (y, gate.selected)
    })
}

fn check_moe_ffn(seed: u64) -> GradCheckReport {
    let (mut s, p) = leaves(seed, &[(4, 4), (1, 4)]);
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 1);
    let experts = ffn_experts(&mut s, "moe", 4, 4, 6, &mut rng);
    let layer = MoeLayer::with_random_router(&mut s, "moe", 4, 2, experts, &mut rng).expect("valid k");
    full_routed(&s, seed, |g| {
        let x = g.param(p[0]);
        let xr = g.param(p[1]);
        let (y, gate) = layer.forward(g, x, xr).expect("shapes agree");
        (y, gate.selected)
    })
}

fn check_moe_kv(seed: u64) -> GradCheckReport {
    let (mut s, p) = leaves(seed, &[(3, 4), (1, 4)]);
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 1);
    let experts = kv_experts(&mut s, "moe", 3, 4, &mut rng);
    let layer = MoeLayer::with_random_router(&mut s, "moe", 4, 1, experts, &mut rng).expect("valid k");
    full_routed(&s, seed, |g| {
        let x = g.param(p[0]);
        let xr = g.param(p[1]);
        let (k, v, gate) = layer.forward_kv(g, x, xr).expect("shapes agree");
        (g.concat_cols(&[k, v]), gate.selected)
    })
}

fn check_balance(seed: u64) -> GradCheckReport {
    let (mut s, p) = leaves(seed, &[(6, 4), (2, 4)]);
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 1);
    let experts = linear_experts(&mut s, "moe", 3, 4, 4, false, &mut rng);
    let layer = MoeLayer::with_random_router(&mut s, "moe", 4, 2, experts, &mut rng).expect("valid k");
    grad_check_piecewise(&s, DEFAULT_EPS, None, seed, |g| {
        let a = g.param(p[0]);
        let b = g.param(p[1]);
        let ga = layer.gate(g, a).expect("shapes agree");
        let gb = layer.gate(g, b).expect("shapes agree");
        let l = balance_loss_on_tape(g, &[ga.probs, gb.probs], 3).expect("rows present");
        (l, [ga.selected, gb.selected].concat())
    })
}

fn check_routing_features(seed: u64) -> GradCheckReport {
    let (mut s, p) = leaves(seed, &[(1, 4), (1, 4), (5, 4)]);
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 1);
    let rp = RoutingParams::new(&mut s, "route", 4, 3, &mut rng);
    full(&s, seed, |g| {
        let inputs = RoutingInputs {
            token: Some(g.param(p[0])),
            task_id: Some(1),
            text_cls: Some(g.param(p[1])),
            views: Some(g.param(p[2])),
        };
        let parts: Vec<Var> = RoutingKind::ALL
            .iter()
            .map(|&k| build_routing_feature(g, k, &inputs, &rp).expect("inputs present").vector)
            .collect();
        g.concat_cols(&parts)
    })
}

/// Every numcore and MoE component, by name.
pub fn layer_checks() -> Vec<(&'static str, Check)> {
    vec![
        ("matmul", check_matmul as Check),
        ("elementwise", check_elementwise),
        ("softmax_cross_entropy", check_softmax),
        ("structural", check_structural),
        ("layer_norm_dropout", check_layer_norm),
        ("linear_ffn", check_linear_ffn),
        ("attention", check_attention),
        ("gasa", check_gasa),
        ("moe_linear", check_moe_linear),
        ("moe_ffn", check_moe_ffn),
        ("moe_kv", check_moe_kv),
        ("balance_loss", check_balance),
        ("routing_features", check_routing_features),
    ]
}

/// Top-k selections of every gate, in decision order.
pub type RoutingSignature = Vec<(usize, Vec<Vec<usize>>)>;

/// Cross-entropy along fixed actions plus the balance term over the rollout's routing rows.
pub fn fixture_loss(p: &Policy, g: &mut Graph, world: &NavGraph, ep: &Episode, actions: &[Action], lambda: f64) -> Var {
    fixture_loss_routed(p, g, world, ep, actions, lambda).0
}

/// [`fixture_loss`] together with the routing decisions taken along the way.
pub fn fixture_loss_routed(
    p: &Policy,
    g: &mut Graph,
    world: &NavGraph,
    ep: &Episode,
    actions: &[Action],
    lambda: f64,
) -> (Var, RoutingSignature) {
    let mut es = p.begin(g, world, ep).expect("fixture episode is valid");
    let mut terms = Vec::new();
    let mut signature = Vec::new();
    let mut probs: Vec<Vec<Var>> = vec![Vec::new(); p.num_moe_layers()];
    for &a in actions {
        let d = p.decide(g, world, &mut es, None).expect("fixture decision");
        let target = d.index_of(a).expect("fixture action is a candidate");
        terms.push(g.cross_entropy(d.logits, Some(&d.mask), target));
        for (i, gate) in &d.gates {
            probs[*i].push(gate.probs);
            signature.push((*i, gate.selected.clone()));
        }
        p.execute(world, &mut es, a).expect("fixture action is executable");
    }
    for layer in probs.iter().filter(|v| !v.is_empty()) {
        let b = balance_loss_on_tape(g, layer, p.config.experts).expect("rows present");
        terms.push(g.scale(b, lambda / p.num_moe_layers() as f64));
    }
    let all = g.concat_cols(&terms);
    (g.sum(all), signature)
}

fn policy_check(placement: Placement, kind: RoutingKind, seed: u64) -> GradCheckReport {
    let (world, ep) = four_node_fixture();
    let cfg = PolicyConfig {
        moe_placement: placement,
        routing_kind: kind,
        ..PolicyConfig::default()
    };
    let p = Policy::new(cfg, seed).expect("default config is valid");
    let actions = [Action::Node(1), Action::Node(2), Action::Stop];
    grad_check_piecewise(&p.params, DEFAULT_EPS, Some(3), seed, |g| {
        fixture_loss_routed(&p, g, &world, &ep, &actions, 0.8)
    })
}

/// End-to-end checks on the four-node fixture, one per placement plus token routing.
pub fn policy_checks() -> Vec<(&'static str, Check)> {
    vec![
        ("policy/none", (|s| policy_check(Placement::None, RoutingKind::Multimodal, s)) as Check),
        ("policy/ffn", |s| policy_check(Placement::Ffn, RoutingKind::Multimodal, s)),
        ("policy/visual_query", |s| policy_check(Placement::VisualQuery, RoutingKind::Multimodal, s)),
        ("policy/textual_kv", |s| policy_check(Placement::TextualKv, RoutingKind::Multimodal, s)),
        ("policy/visual_query_token", |s| policy_check(Placement::VisualQuery, RoutingKind::Token, s)),
        ("policy/visual_query_task", |s| policy_check(Placement::VisualQuery, RoutingKind::MultimodalTask, s)),
    ]
}

/// Runs every check of `scope` over `trials` seeds and keeps the worst error per component.
pub fn run_suite(scope: Scope, trials: usize, seed: u64) -> Vec<ComponentCheck> {
    let checks = match scope {
        Scope::Layer => layer_checks(),
        Scope::Policy => policy_checks(),
    };
    checks
        .into_iter()
        .map(|(name, f)| {
            let mut out = ComponentCheck {
                component: name.to_string(),
                max_rel_error: 0.0,
                checked: 0,
                skipped: 0,
                trials,
            };
            for t in 0..trials {
                let r = f(seed.wrapping_mul(1000).wrapping_add(t as u64));
                out.max_rel_error = out.max_rel_error.max(r.max_rel_error);
                out.checked += r.checked;
                out.skipped += r.skipped;
            }
            out
        })
        .collect()
}
