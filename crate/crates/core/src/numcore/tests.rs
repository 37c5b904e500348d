use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::gradcheck::{grad_check, weighted_sum, DEFAULT_EPS, DEFAULT_TOLERANCE};
use super::layers::*;
use super::*;

fn rand_tensor(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor2D {
    Tensor2D::from_vec(r, c, (0..r * c).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

fn store_with(shapes: &[(usize, usize)], seed: u64) -> (ParamStore, Vec<ParamId>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut s = ParamStore::new();
    let ids = shapes
        .iter()
        .enumerate()
        .map(|(i, &(r, c))| s.add(format!("p{i}"), rand_tensor(&mut rng, r, c)))
        .collect();
    (s, ids)
}

fn check(store: &ParamStore, f: impl Fn(&mut Graph) -> Var) {
    let rep = grad_check(store, DEFAULT_EPS, None, 0, f);
    assert!(rep.passes(DEFAULT_TOLERANCE), "{rep:?}");
    assert!(rep.checked > 0);
}

#[test]
fn matmul_matches_naive() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a = rand_tensor(&mut rng, 3, 4);
    let b = rand_tensor(&mut rng, 4, 5);
    let c = a.matmul(&b);
    for i in 0..3 {
        for j in 0..5 {
            let want: f64 = (0..4).map(|k| a.get(i, k) * b.get(k, j)).sum();
            assert!((c.get(i, j) - want).abs() < 1e-12);
        }
    }
    let bt = b.transpose();
    for (x, y) in a.matmul_t(&bt).data().iter().zip(c.data()) {
        assert!((x - y).abs() < 1e-12);
    }
    assert_eq!(a.transpose().t_matmul(&b), c);
}

#[test]
fn grad_matmul_family() {
    let (s, ids) = store_with(&[(3, 4), (4, 5), (2, 4)], 2);
    check(&s, |g| {
        let a = g.param(ids[0]);
        let b = g.param(ids[1]);
        let c = g.param(ids[2]);
        let y = g.matmul(a, b);
        let z = g.matmul_t(c, a);
        let y2 = g.transpose(z);
        let y2 = g.matmul(y2, c);
        let l1 = weighted_sum(g, y, 1);
        let l2 = weighted_sum(g, y2, 2);
        let l = g.concat_cols(&[l1, l2]);
        g.sum(l)
    });
}

#[test]
fn grad_elementwise_ops() {
    let (s, ids) = store_with(&[(3, 4), (3, 4), (1, 4), (1, 1), (3, 1)], 3);
    check(&s, |g| {
        let a = g.param(ids[0]);
        let b = g.param(ids[1]);
        let r = g.param(ids[2]);
        let k = g.param(ids[3]);
        let w = g.param(ids[4]);
        let x = g.add(a, b);
        let x = g.mul(x, a);
        let x = g.add_row(x, r);
        let x = g.affine(x, 0.7, 0.3);
        let x = g.scale_by(k, x);
        let x = g.mul_col(x, w);
        let x = g.sigmoid(x);
        weighted_sum(g, x, 4)
    });
}

#[test]
fn grad_relu_away_from_kink() {
    let mut s = ParamStore::new();
    let id = s.add("x", Tensor2D::from_vec(2, 3, vec![0.5, -0.3, 1.2, -2.0, 0.8, 0.1]).unwrap());
    check(&s, |g| {
        let x = g.param(id);
        let y = g.relu(x);
        weighted_sum(g, y, 5)
    });
}

#[test]
fn grad_softmax_and_masking() {
    let (s, ids) = store_with(&[(3, 5), (1, 5)], 6);
    let mask = [true, false, true, true, false];
    check(&s, |g| {
        let a = g.param(ids[0]);
        let p = g.softmax_rows(a);
        let x = g.param(ids[1]);
        let q = g.masked_softmax_rows(x, Some(&mask));
        let l1 = weighted_sum(g, p, 7);
        let l2 = weighted_sum(g, q, 8);
        let ce = g.cross_entropy(x, Some(&mask), 3);
        let l = g.concat_cols(&[l1, l2, ce]);
        g.sum(l)
    });
}

#[test]
fn masked_softmax_zeroes_hidden_columns() {
    let s = ParamStore::new();
    let mut g = Graph::new(&s);
    let x = g.input(Tensor2D::row_vector(vec![1.0, 50.0, 2.0]));
    let p = g.masked_softmax_rows(x, Some(&[true, false, true]));
    let v = g.value(p).data().to_vec();
    assert_eq!(v[1], 0.0);
    let e = 1f64.exp() + 2f64.exp();
    assert!((v[0] - 1f64.exp() / e).abs() < 1e-12);
    assert!((v[2] - 2f64.exp() / e).abs() < 1e-12);
}

#[test]
fn cross_entropy_matches_log_softmax() {
    let s = ParamStore::new();
    let mut g = Graph::new(&s);
    let x = g.input(Tensor2D::row_vector(vec![0.2, -1.0, 3.0]));
    let l = g.cross_entropy(x, None, 0);
    let z: f64 = [0.2f64, -1.0, 3.0].iter().map(|v| v.exp()).sum();
    assert!((g.scalar(l) - (z.ln() - 0.2)).abs() < 1e-12);
}

#[test]
fn grad_structural_ops() {
    let (s, ids) = store_with(&[(4, 6), (2, 6), (4, 3)], 9);
    check(&s, |g| {
        let a = g.param(ids[0]);
        let b = g.param(ids[1]);
        let c = g.param(ids[2]);
        let rows = g.concat_rows(&[a, b]);
        let picked = g.gather_rows(rows, &[5, 0, 0, 3]);
        let sl = g.slice_cols(picked, 1, 3);
        let cat = g.concat_cols(&[sl, c]);
        let sc = g.scatter_rows(cat, &[6, 1, 2, 0], 7);
        let m = g.mean_rows(sc);
        let r = g.row(rows, 4);
        let l1 = weighted_sum(g, sc, 10);
        let l2 = weighted_sum(g, m, 11);
        let l3 = weighted_sum(g, r, 12);
        let l = g.concat_cols(&[l1, l2, l3]);
        g.sum(l)
    });
}

#[test]
fn grad_layer_norm_and_dropout() {
    let (s, ids) = store_with(&[(3, 6)], 13);
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let mask: Vec<f64> = (0..18).map(|_| if rng.gen_bool(0.8) { 1.25 } else { 0.0 }).collect();
    check(&s, |g| {
        let a = g.param(ids[0]);
        let y = g.layer_norm(a);
        let y = g.dropout(y, mask.clone());
        weighted_sum(g, y, 15)
    });
}

#[test]
fn layer_norm_rows_are_standardised() {
    let (s, ids) = store_with(&[(3, 8)], 16);
    let mut g = Graph::new(&s);
    let a = g.param(ids[0]);
    let y = g.layer_norm(a);
    for i in 0..3 {
        let row = g.value(y).row(i);
        let mean = row.iter().sum::<f64>() / 8.0;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 8.0;
        assert!(mean.abs() < 1e-12);
        assert!((var - 1.0).abs() < 1e-3);
    }
}

#[test]
fn reused_param_accumulates_gradient() {
    let mut s = ParamStore::new();
    let id = s.add("x", Tensor2D::row_vector(vec![2.0]));
    let mut g = Graph::new(&s);
    let x = g.param(id);
    let y = g.mul(x, x);
    let x2 = g.param(id);
    let z = g.add(y, x2);
    let mut grads = Gradients::zeros_like(&s);
    g.backward(z, &mut grads);
    assert_eq!(grads.get(id).data(), &[5.0]);
}

/// Naive single-head attention used as an oracle.
fn naive_attention(q: &Tensor2D, k: &Tensor2D, v: &Tensor2D, bias: Option<&Tensor2D>) -> Tensor2D {
    let d = q.cols() as f64;
    let mut out = Tensor2D::zeros(q.rows(), v.cols());
    for i in 0..q.rows() {
        let logits: Vec<f64> = (0..k.rows())
            .map(|j| {
                let dot: f64 = (0..q.cols()).map(|c| q.get(i, c) * k.get(j, c)).sum();
                dot / d.sqrt() + bias.map_or(0.0, |b| b.get(i, j))
            })
            .collect();
        let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
        let z: f64 = e.iter().sum();
        for j in 0..k.rows() {
            for c in 0..v.cols() {
                out.set(i, c, out.get(i, c) + e[j] / z * v.get(j, c));
            }
        }
    }
    out
}

#[test]
fn attention_matches_naive_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let q = rand_tensor(&mut rng, 3, 4);
    let k = rand_tensor(&mut rng, 5, 4);
    let v = rand_tensor(&mut rng, 5, 4);
    let bias = rand_tensor(&mut rng, 3, 5);
    let s = ParamStore::new();
    let mut g = Graph::new(&s);
    let (qv, kv, vv, bv) = (g.input(q.clone()), g.input(k.clone()), g.input(v.clone()), g.input(bias.clone()));
    let one = attend(&mut g, qv, kv, vv, 1, Some(bv)).unwrap();
    let want = naive_attention(&q, &k, &v, Some(&bias));
    for (a, b) in g.value(one).data().iter().zip(want.data()) {
        assert!((a - b).abs() < 1e-12);
    }
    // Two heads equal per-slice naive attention concatenated.
    let two = attend(&mut g, qv, kv, vv, 2, None).unwrap();
    let slice = |t: &Tensor2D, s: usize| {
        Tensor2D::from_rows(&(0..t.rows()).map(|r| t.row(r)[s..s + 2].to_vec()).collect::<Vec<_>>()).unwrap()
    };
    for h in 0..2 {
        let want = naive_attention(&slice(&q, 2 * h), &slice(&k, 2 * h), &slice(&v, 2 * h), None);
        for r in 0..3 {
            for c in 0..2 {
                assert!((g.value(two).get(r, 2 * h + c) - want.get(r, c)).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn attention_rejects_bad_shapes() {
    let s = ParamStore::new();
    let mut g = Graph::new(&s);
    let q = g.input(Tensor2D::zeros(2, 4));
    let k = g.input(Tensor2D::zeros(3, 5));
    let v = g.input(Tensor2D::zeros(3, 4));
    assert!(attend(&mut g, q, k, v, 1, None).is_err());
    let k = g.input(Tensor2D::zeros(3, 4));
    assert!(attend(&mut g, q, k, v, 3, None).is_err());
    let bad = g.input(Tensor2D::zeros(3, 3));
    assert!(attend(&mut g, q, k, v, 2, Some(bad)).is_err());
}

#[test]
fn cross_attention_and_gasa_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(18);
    let mut s = ParamStore::new();
    let p = AttentionParams::new(&mut s, "att", 4, &mut rng);
    let xq = s.add("xq", rand_tensor(&mut rng, 2, 4));
    let xkv = s.add("xkv", rand_tensor(&mut rng, 3, 4));
    let aff = affinity_from_positions(&[[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 2.0, 0.0]], 1.0);
    check(&s, |g| {
        let q = g.param(xq);
        let kv = g.param(xkv);
        let y = cross_attention(g, q, kv, &p, 2).unwrap();
        let a = g.input(aff.clone());
        let z = gasa(g, kv, &p, a, 2).unwrap();
        let l1 = weighted_sum(g, y, 19);
        let l2 = weighted_sum(g, z, 20);
        let l = g.concat_cols(&[l1, l2]);
        g.sum(l)
    });
}

#[test]
fn gasa_with_zero_affinity_is_self_attention() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let mut s = ParamStore::new();
    let p = AttentionParams::new(&mut s, "att", 4, &mut rng);
    let x = rand_tensor(&mut rng, 3, 4);
    let mut g = Graph::new(&s);
    let xv = g.input(x);
    let zero = g.input(Tensor2D::zeros(3, 3));
    let a = gasa(&mut g, xv, &p, zero, 2).unwrap();
    let b = self_attention(&mut g, xv, &p, 2).unwrap();
    assert_eq!(g.value(a), g.value(b));
    let wrong = g.input(Tensor2D::zeros(2, 3));
    assert!(gasa(&mut g, xv, &p, wrong, 2).is_err());
}

#[test]
fn affinity_prefers_nearer_nodes() {
    let a = affinity_from_positions(&[[0.0, 0.0, 0.0], [3.0, 4.0, 0.0], [1.0, 0.0, 0.0]], 2.0);
    assert_eq!(a.get(0, 0), 0.0);
    assert!((a.get(0, 1) + 2.5).abs() < 1e-12);
    assert_eq!(a.get(0, 1), a.get(1, 0));
    assert!(a.get(0, 2) > a.get(0, 1));
}

#[test]
fn linear_and_ffn_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let mut s = ParamStore::new();
    let lin = Linear::new(&mut s, "lin", 4, 3, true, &mut rng);
    let ffn = Ffn::new(&mut s, "ffn", 3, 6, 2, &mut rng);
    let b = lin.b.unwrap();
    s.get_mut(b).data_mut().copy_from_slice(&[0.1, -0.2, 0.3]);
    let x = rand_tensor(&mut rng, 5, 4);
    check(&s, |g| {
        let xv = g.input(x.clone());
        let h = lin.forward(g, xv);
        let y = ffn.forward(g, h);
        weighted_sum(g, y, 23)
    });
    let mut g = Graph::new(&s);
    let bad = g.input(Tensor2D::zeros(1, 5));
    assert!(lin.try_forward(&mut g, bad).is_err());
}

#[test]
fn sinusoidal_table_first_rows() {
    let t = sinusoidal_positions(3, 4);
    assert_eq!(t.row(0), &[0.0, 1.0, 0.0, 1.0]);
    assert!((t.get(1, 0) - 1f64.sin()).abs() < 1e-12);
    assert!((t.get(2, 2) - (2.0f64 / 100.0).sin()).abs() < 1e-12);
}

#[test]
fn checkpoint_round_trip_and_mismatch() {
    let (s, _) = store_with(&[(2, 3), (1, 4)], 24);
    let ck = s.to_checkpoint();
    let json = serde_json::to_string(&ck).unwrap();
    let back: ParamCheckpoint = serde_json::from_str(&json).unwrap();
    let (mut t, _) = store_with(&[(2, 3), (1, 4)], 25);
    t.load_checkpoint(&back).unwrap();
    assert_eq!(s, t);
    let (mut u, _) = store_with(&[(3, 2), (1, 4)], 25);
    assert!(u.load_checkpoint(&back).is_err());
}

#[test]
fn linear_gradient_is_tight() {
    let mut rng = ChaCha8Rng::seed_from_u64(26);
    let mut s = ParamStore::new();
    let lin = Linear::new(&mut s, "lin", 3, 4, true, &mut rng);
    let x = rand_tensor(&mut rng, 2, 3);
    let rep = grad_check(&s, DEFAULT_EPS, None, 0, |g| {
        let xv = g.input(x.clone());
        let y = lin.forward(g, xv);
        weighted_sum(g, y, 27)
    });
    assert!(rep.max_rel_error < 1e-6, "{rep:?}");
    let (s2, ids) = store_with(&[(2, 5)], 28);
    let rep = grad_check(&s2, DEFAULT_EPS, None, 0, |g| {
        let a = g.param(ids[0]);
        let p = g.softmax_rows(a);
        weighted_sum(g, p, 29)
    });
    assert!(rep.max_rel_error < 1e-6, "{rep:?}");
}

#[test]
fn linear_trivial_cases() {
    let mut s = ParamStore::new();
    let w = s.add("w", Tensor2D::identity(3));
    let b = s.add("b", Tensor2D::row_vector(vec![0.5, -1.0, 2.0]));
    let lin = Linear { w, b: Some(b) };
    let mut g = Graph::new(&s);
    let x = Tensor2D::from_rows(&[vec![1.0, 2.0, 3.0], vec![0.0, 0.0, 0.0]]).unwrap();
    let xv = g.input(x);
    let y = lin.forward(&mut g, xv);
    assert_eq!(g.value(y).row(0), &[1.5, 1.0, 5.0]);
    assert_eq!(g.value(y).row(1), &[0.5, -1.0, 2.0]);
}

#[test]
fn ffn_zero_weights_give_output_bias() {
    let mut rng = ChaCha8Rng::seed_from_u64(30);
    let mut s = ParamStore::new();
    let ffn = Ffn::new(&mut s, "f", 3, 5, 2, &mut rng);
    s.get_mut(ffn.l1.w).data_mut().iter_mut().for_each(|v| *v = 0.0);
    s.get_mut(ffn.l2.b.unwrap()).data_mut().copy_from_slice(&[0.25, -0.75]);
    let mut g = Graph::new(&s);
    let x = g.input(rand_tensor(&mut rng, 4, 3));
    let y = ffn.forward(&mut g, x);
    for r in 0..4 {
        assert_eq!(g.value(y).row(r), &[0.25, -0.75]);
    }
}

#[test]
fn softmax_trivial_cases() {
    let s = ParamStore::new();
    let mut g = Graph::new(&s);
    let u = g.input(Tensor2D::filled(1, 4, 3.0));
    let p = g.softmax_rows(u);
    assert!(g.value(p).data().iter().all(|&v| (v - 0.25).abs() < 1e-15));
    let h = g.input(Tensor2D::row_vector(vec![0.0, 1000.0, 0.0]));
    let p = g.softmax_rows(h);
    assert!((g.value(p).data()[1] - 1.0).abs() < 1e-12);
}

#[test]
fn cross_attention_trivial_cases() {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let mut s = ParamStore::new();
    let p = AttentionParams::new(&mut s, "a", 4, &mut rng);
    let xq = rand_tensor(&mut rng, 3, 4);
    let one = rand_tensor(&mut rng, 1, 4);
    let many = rand_tensor(&mut rng, 5, 4);
    let wv = s.get(p.wv.w).clone();
    {
        let mut g = Graph::new(&s);
        let q = g.input(xq.clone());
        let kv = g.input(one.clone());
        let y = cross_attention(&mut g, q, kv, &p, 2).unwrap();
        let want = one.matmul(&wv);
        for r in 0..3 {
            for (a, b) in g.value(y).row(r).iter().zip(want.row(0)) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }
    s.get_mut(p.wq.w).data_mut().iter_mut().for_each(|v| *v = 0.0);
    let mut g = Graph::new(&s);
    let q = g.input(xq);
    let kv = g.input(many.clone());
    let y = cross_attention(&mut g, q, kv, &p, 2).unwrap();
    let v = many.matmul(&wv);
    for c in 0..4 {
        let mean = (0..5).map(|r| v.get(r, c)).sum::<f64>() / 5.0;
        for r in 0..3 {
            assert!((g.value(y).get(r, c) - mean).abs() < 1e-12);
        }
    }
}

#[test]
fn gasa_strong_negative_affinity_attends_to_self() {
    let mut rng = ChaCha8Rng::seed_from_u64(32);
    let mut s = ParamStore::new();
    let p = AttentionParams::new(&mut s, "a", 4, &mut rng);
    let x = rand_tensor(&mut rng, 3, 4);
    let mut a = Tensor2D::filled(3, 3, -1e4);
    for i in 0..3 {
        a.set(i, i, 0.0);
    }
    let mut g = Graph::new(&s);
    let xv = g.input(x.clone());
    let av = g.input(a);
    let y = gasa(&mut g, xv, &p, av, 2).unwrap();
    let want = x.matmul(s.get(p.wv.w));
    for (a, b) in g.value(y).data().iter().zip(want.data()) {
        assert!((a - b).abs() < 1e-9);
    }
}

#[test]
fn gasa_gradient_reaches_affinity() {
    let mut rng = ChaCha8Rng::seed_from_u64(33);
    let mut s = ParamStore::new();
    let p = AttentionParams::new(&mut s, "a", 4, &mut rng);
    let x = rand_tensor(&mut rng, 3, 4);
    let aff = s.add("aff", rand_tensor(&mut rng, 3, 3));
    let rep = grad_check(&s, DEFAULT_EPS, None, 0, |g| {
        let xv = g.input(x.clone());
        let a = g.param(aff);
        let y = gasa(g, xv, &p, a, 2).unwrap();
        weighted_sum(g, y, 34)
    });
    assert!(rep.passes(DEFAULT_TOLERANCE), "{rep:?}");
}

#[test]
fn affinity_single_node_and_hand_values() {
    assert_eq!(affinity_from_positions(&[[1.0, 2.0, 3.0]], 1.0), Tensor2D::zeros(1, 1));
    let a = affinity_from_positions(&[[0.0, 0.0, 0.0], [3.0, 0.0, 0.0], [3.0, 4.0, 0.0]], 1.0);
    let want = [[0.0, -3.0, -5.0], [-3.0, 0.0, -4.0], [-5.0, -4.0, 0.0]];
    for i in 0..3 {
        for j in 0..3 {
            assert!((a.get(i, j) - want[i][j]).abs() < 1e-12);
        }
    }
}

mod props {
    use super::*;
    use proptest::prelude::{any, prop_assert, prop_assert_eq, proptest, ProptestConfig};

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn softmax_rows_sum_to_one(seed in any::<u64>(), r in 1usize..5, c in 1usize..9) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let t = Tensor2D::from_vec(r, c, (0..r * c).map(|_| rng.gen_range(-50.0..50.0)).collect()).unwrap();
            let s = ParamStore::new();
            let mut g = Graph::new(&s);
            let x = g.input(t);
            let p = g.softmax_rows(x);
            for i in 0..r {
                let row = g.value(p).row(i);
                prop_assert!(row.iter().all(|&v| v >= 0.0));
                prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            }
        }

        #[test]
        fn attention_block_gradients_on_random_shapes(
            seed in any::<u64>(), nq in 1usize..4, nk in 1usize..4, heads in 1usize..3,
        ) {
            let d = 2 * heads;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut s = ParamStore::new();
            let p = AttentionParams::new(&mut s, "a", d, &mut rng);
            let ffn = Ffn::new(&mut s, "f", d, 3, d, &mut rng);
            let xq = s.add("xq", rand_tensor(&mut rng, nq, d));
            let xkv = s.add("xkv", rand_tensor(&mut rng, nk, d));
            let rep = grad_check(&s, DEFAULT_EPS, None, 0, |g| {
                let q = g.param(xq);
                let kv = g.param(xkv);
                let y = cross_attention(g, q, kv, &p, heads).unwrap();
                let y = g.add(y, q);
                let y = ffn.forward(g, y);
                let y = g.sigmoid(y);
                weighted_sum(g, y, seed)
            });
            prop_assert!(rep.passes(DEFAULT_TOLERANCE), "{:?}", rep);
        }

        #[test]
        fn forward_is_deterministic(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut s = ParamStore::new();
            let p = AttentionParams::new(&mut s, "a", 4, &mut rng);
            let x = rand_tensor(&mut rng, 3, 4);
            let run = || {
                let mut g = Graph::new(&s);
                let xv = g.input(x.clone());
                let y = self_attention(&mut g, xv, &p, 2).unwrap();
                g.value(y).clone()
            };
            prop_assert_eq!(run(), run());
        }
    }
}
