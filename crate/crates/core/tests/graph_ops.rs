//! Finite-difference checks for every differentiable graph op.

mod common;

use common::finite_difference_check;
use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use wlfm::graph::{ContrastSet, GaussianPrior, Graph, Var};
use wlfm::nn::{normal_init, ParamId, ParamStore};

/// Contracts `out` with fixed random weights so every output entry
/// contributes to a scalar loss.
fn project(g: &mut Graph, out: Var, seed: u64) -> Var {
    let (r, c) = g.value(out).dim();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = g.constant(normal_init(&mut rng, r, c, 1.0));
    let p = g.mul(out, w);
    g.sum(p)
}

fn check(store: &mut ParamStore, build: impl Fn(&mut Graph, &[ParamId]) -> Var, ids: Vec<ParamId>) {
    let loss = |s: &ParamStore| {
        let mut g = Graph::new(s);
        let root = build(&mut g, &ids);
        g.scalar(root)
    };
    let grads = |s: &ParamStore| {
        let mut g = Graph::new(s);
        let root = build(&mut g, &ids);
        g.backward(root)
    };
    let res = finite_difference_check(store, loss, grads, |_| true, 400, 1e-5, 1e-4, 7);
    assert!(res.checked > 0);
    assert!(res.max_rel_err < 1e-6, "max rel err {} at {:?}", res.max_rel_err, res.worst);
}

fn store_with(shapes: &[(&str, usize, usize)], seed: u64) -> (ParamStore, Vec<ParamId>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let ids = shapes
        .iter()
        .map(|(n, r, c)| store.add(*n, normal_init(&mut rng, *r, *c, 0.7)))
        .collect();
    (store, ids)
}

#[test]
fn elementwise_and_matmul() {
    let (mut s, ids) = store_with(&[("a", 3, 4), ("b", 4, 5), ("c", 3, 5), ("r", 1, 5), ("col", 3, 1)], 1);
    check(
        &mut s,
        |g, p| {
            let a = g.param(p[0]);
            let b = g.param(p[1]);
            let c = g.param(p[2]);
            let r = g.param(p[3]);
            let col = g.param(p[4]);
            let m = g.matmul(a, b);
            let x = g.add(m, c);
            let x = g.mul(x, c);
            let x = g.sub(x, m);
            let x = g.add_row(x, r);
            let x = g.mul_row(x, r);
            let x = g.add_col(x, col);
            let x = g.scale(x, 0.3);
            let x = g.gelu(x);
            let x = g.sigmoid(x);
            let t = g.transpose(x);
            project(g, t, 2)
        },
        ids,
    );
}

#[test]
fn row_ops_and_layer_norm() {
    let (mut s, ids) = store_with(&[("a", 5, 6), ("r", 1, 6), ("b", 2, 6)], 3);
    check(
        &mut s,
        |g, p| {
            let a = g.param(p[0]);
            let r = g.param(p[1]);
            let b = g.param(p[2]);
            let x = g.gather_rows(a, &[4, 0, 0, 2]);
            let x = g.concat_rows(&[x, b]);
            let x = g.replace_rows(x, &[1, 3], r);
            let x = g.layer_norm(x);
            let n = g.l2_normalize_rows(x);
            let m = g.mean(n);
            let y = project(g, n, 4);
            g.add(y, m)
        },
        ids,
    );
}

#[test]
fn segment_ops_and_depthwise_conv() {
    let (mut s, ids) = store_with(&[("x", 3, 12), ("w", 3, 5), ("c", 3, 3)], 5);
    check(
        &mut s,
        |g, p| {
            let x = g.param(p[0]);
            let w = g.param(p[1]);
            let c = g.param(p[2]);
            let y = g.depthwise_conv(x, w, 4);
            let rep = g.repeat_cols(c, 4);
            let y = g.add(y, rep);
            let f = g.fold_segments(y, 4);
            let f = g.gelu(f);
            let u = g.unfold_segments(f, 4);
            project(g, u, 6)
        },
        ids,
    );
}

#[test]
fn channel_lift() {
    let (mut s, ids) = store_with(&[("w", 1, 3), ("b", 1, 3), ("emb", 2, 3), ("miss", 1, 3)], 8);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let x = normal_init(&mut rng, 2, 8, 1.0);
    check(
        &mut s,
        move |g, p| {
            let (w, b, e, m) = (g.param(p[0]), g.param(p[1]), g.param(p[2]), g.param(p[3]));
            let y = g.channel_lift(x.clone(), vec![true, false, true, true], 4, w, b, e, m);
            project(g, y, 10)
        },
        ids,
    );
}

#[test]
fn attention() {
    let (mut s, ids) = store_with(&[("q", 8, 6), ("k", 8, 6), ("v", 8, 6)], 11);
    check(
        &mut s,
        |g, p| {
            let (q, k, v) = (g.param(p[0]), g.param(p[1]), g.param(p[2]));
            let y = g.attention(q, k, v, 4, 2);
            project(g, y, 12)
        },
        ids,
    );
}

#[test]
fn straight_through_passes_identity_gradient() {
    let (s, ids) = store_with(&[("z", 2, 3)], 13);
    let mut g = Graph::new(&s);
    let z = g.param(ids[0]);
    let y = g.straight_through(z, Array2::from_elem((2, 3), 5.0));
    assert!(g.value(y).iter().all(|&v| v == 5.0));
    let root = project(&mut g, y, 14);
    let grads = g.backward(root);
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let w = normal_init(&mut rng, 2, 3, 1.0);
    assert_eq!(grads.get(ids[0]).unwrap(), &w);
}

#[test]
fn losses() {
    let (mut s, ids) = store_with(&[("logits", 6, 4), ("pred", 6, 4), ("emb", 6, 5), ("poro", 6, 1)], 15);
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    let target = normal_init(&mut rng, 6, 4, 1.0);
    let weight = Array2::from_shape_fn((6, 4), |(i, j)| ((i + j) % 3) as f64);
    let soft = Array2::from_shape_fn((6, 4), |(i, j)| if j == i % 4 { 0.7 } else { 0.1 });
    check(
        &mut s,
        move |g, p| {
            let logits = g.param(p[0]);
            let pred = g.param(p[1]);
            let emb = g.param(p[2]);
            let poro = g.param(p[3]);
            let ce = g.cross_entropy(logits, &[0, 3, 1, 1, 2, 0]);
            let sce = g.soft_cross_entropy(logits, soft.clone());
            let mse = g.masked_mse(pred, target.clone(), weight.clone());
            let mae = g.masked_mae(pred, target.clone(), weight.clone());
            let n = g.l2_normalize_rows(emb);
            let nce = g.info_nce(
                n,
                ContrastSet {
                    pairs: vec![(0, 3), (1, 4)],
                    negatives: vec![vec![1, 2, 5], vec![0, 5]],
                },
                0.2,
            );
            let sig = g.sigmoid(poro);
            let three = g.gather_rows(logits, &[0, 1, 2, 3, 4, 5]);
            let kl = g.consistency_kl(
                sig,
                three,
                GaussianPrior {
                    means: vec![0.05, 0.25, 0.12, 0.4],
                    stds: vec![0.03, 0.05, 0.04, 0.1],
                },
                1e-8,
            );
            let parts = [ce, sce, mse, mae, nce, kl];
            let mut acc = parts[0];
            for &x in &parts[1..] {
                acc = g.add(acc, x);
            }
            acc
        },
        ids,
    );
}

#[test]
fn frozen_params_receive_no_gradient() {
    let (s, ids) = store_with(&[("enc.w", 2, 2), ("head.w", 2, 2)], 17);
    let mut g = Graph::new(&s);
    g.freeze_prefix("enc.");
    let a = g.param(ids[0]);
    let b = g.param(ids[1]);
    let m = g.matmul(a, b);
    let l = g.sum(m);
    let grads = g.backward(l);
    assert!(grads.get(ids[0]).is_none());
    assert!(grads.get(ids[1]).is_some());
}
