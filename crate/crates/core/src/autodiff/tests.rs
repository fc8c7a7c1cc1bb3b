use alloc::vec;
use alloc::vec::Vec;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::error::Error;

const EPS: f64 = 1e-4;
const TOL: f64 = 1e-4;

fn random_tensor(rng: &mut ChaCha8Rng, rows: usize, cols: usize, lo: f64, hi: f64) -> Tensor {
    let data = (0..rows * cols).map(|_| rng.random_range(lo..hi)).collect();
    Tensor::from_vec(rows, cols, data).unwrap()
}

/// Gradient-check `op` with every input a parameter drawn from [lo, hi).
/// The loss is a fixed random projection of the output so that every
/// output entry contributes.
fn check_op(
    seed: u64,
    shapes: &[(usize, usize)],
    lo: f64,
    hi: f64,
    op: impl Fn(&mut Graph, &[Var]) -> crate::error::Result<Var>,
) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    for (i, &(r, c)) in shapes.iter().enumerate() {
        store.add(&alloc::format!("x{i}"), random_tensor(&mut rng, r, c, lo, hi));
    }
    let probe = {
        let mut g = Graph::new();
        let xs: Vec<Var> = (0..shapes.len()).map(|i| g.param(&store, i).unwrap()).collect();
        let out = op(&mut g, &xs).unwrap();
        g.shape(out)
    };
    let weights = random_tensor(&mut rng, probe.0, probe.1, -1.0, 1.0);
    let report = check_gradients(&mut store, EPS, None, |g, s| {
        let xs: Vec<Var> = (0..shapes.len()).map(|i| g.param(s, i)).collect::<Result<_, _>>()?;
        let out = op(g, &xs)?;
        let w = g.input(weights.clone())?;
        let m = g.mul(out, w)?;
        g.sum(m)
    })
    .unwrap();
    report.max_rel_error
}

macro_rules! grad_test {
    ($name:ident, $shapes:expr, $lo:expr, $hi:expr, $op:expr) => {
        #[test]
        fn $name() {
            let err = check_op(7, &$shapes, $lo, $hi, $op);
            assert!(err < TOL, "relative error {err}");
        }
    };
}

grad_test!(grad_matmul, [(3, 4), (4, 2)], -1.0, 1.0, |g, x| g.matmul(x[0], x[1]));
grad_test!(grad_matmul_nt, [(3, 4), (5, 4)], -1.0, 1.0, |g, x| g.matmul_nt(x[0], x[1]));
grad_test!(grad_matmul_tn, [(4, 3), (4, 2)], -1.0, 1.0, |g, x| g.matmul_tn(x[0], x[1]));
grad_test!(grad_add, [(2, 3), (2, 3)], -1.0, 1.0, |g, x| g.add(x[0], x[1]));
grad_test!(grad_sub, [(2, 3), (2, 3)], -1.0, 1.0, |g, x| g.sub(x[0], x[1]));
grad_test!(grad_mul, [(2, 3), (2, 3)], -1.0, 1.0, |g, x| g.mul(x[0], x[1]));
grad_test!(grad_div, [(2, 3), (2, 3)], 0.5, 2.0, |g, x| g.div(x[0], x[1]));
grad_test!(grad_add_row, [(4, 3), (1, 3)], -1.0, 1.0, |g, x| g.add_row(x[0], x[1]));
grad_test!(grad_mul_row, [(4, 3), (1, 3)], -1.0, 1.0, |g, x| g.mul_row(x[0], x[1]));
grad_test!(grad_mul_col, [(4, 3), (4, 1)], -1.0, 1.0, |g, x| g.mul_col(x[0], x[1]));
grad_test!(grad_div_col, [(4, 3), (4, 1)], 0.5, 2.0, |g, x| g.div_col(x[0], x[1]));
grad_test!(grad_mul_scalar, [(4, 3), (1, 1)], -1.0, 1.0, |g, x| g.mul_scalar(x[0], x[1]));
grad_test!(grad_scale, [(3, 3)], -1.0, 1.0, |g, x| g.scale(x[0], -2.5));
grad_test!(grad_add_scalar, [(3, 3)], -1.0, 1.0, |g, x| g.add_scalar(x[0], 0.7));
grad_test!(grad_relu, [(4, 4)], 0.01, 1.0, |g, x| {
    let y = g.scale(x[0], -1.0)?;
    let z = g.relu(x[0])?;
    let w = g.relu(y)?;
    g.add(z, w)
});
grad_test!(grad_elu1, [(4, 4)], -2.0, 2.0, |g, x| g.elu1(x[0]));
grad_test!(grad_softplus, [(4, 4)], -3.0, 3.0, |g, x| g.softplus(x[0]));
grad_test!(grad_sigmoid, [(4, 4)], -3.0, 3.0, |g, x| g.sigmoid(x[0]));
grad_test!(grad_abs, [(4, 4)], 0.01, 1.0, |g, x| {
    let y = g.scale(x[0], -1.0)?;
    g.abs(y)
});
grad_test!(grad_square, [(4, 4)], -2.0, 2.0, |g, x| g.square(x[0]));
grad_test!(grad_sqrt, [(4, 4)], 0.2, 2.0, |g, x| g.sqrt(x[0]));
grad_test!(grad_exp, [(4, 4)], -2.0, 2.0, |g, x| g.exp(x[0]));
grad_test!(grad_ln, [(4, 4)], 0.2, 2.0, |g, x| g.ln(x[0]));
grad_test!(grad_sum, [(3, 4)], -1.0, 1.0, |g, x| g.sum(x[0]));
grad_test!(grad_mean, [(3, 4)], -1.0, 1.0, |g, x| g.mean(x[0]));
grad_test!(grad_sum_rows, [(3, 4)], -1.0, 1.0, |g, x| g.sum_rows(x[0]));
grad_test!(grad_sum_cols, [(3, 4)], -1.0, 1.0, |g, x| g.sum_cols(x[0]));
grad_test!(grad_mean_rows, [(3, 4)], -1.0, 1.0, |g, x| g.mean_rows(x[0]));
grad_test!(grad_broadcast_rows, [(1, 4)], -1.0, 1.0, |g, x| g.broadcast_rows(x[0], 5));
grad_test!(grad_concat, [(3, 2), (3, 4), (3, 1)], -1.0, 1.0, |g, x| g.concat_cols(x));
grad_test!(grad_slice, [(3, 5)], -1.0, 1.0, |g, x| g.slice_cols(x[0], 1, 4));
grad_test!(grad_gather, [(4, 3)], -1.0, 1.0, |g, x| g.gather_rows(x[0], &[2, 0, 2, 3]));
grad_test!(grad_layer_norm, [(4, 6), (1, 6), (1, 6)], -1.0, 1.0, |g, x| g.layer_norm(x[0], x[1], x[2]));
grad_test!(grad_cross_entropy, [(5, 4)], -2.0, 2.0, |g, x| g.cross_entropy(x[0], &[0, 3, 1, 1, 2], None));
grad_test!(grad_cross_entropy_weighted, [(5, 4)], -2.0, 2.0, |g, x| {
    g.cross_entropy(x[0], &[0, 3, 1, 1, 2], Some(&[1.0, 2.0, 0.5, 1.0, 3.0]))
});
grad_test!(grad_softmax_col, [(6, 1)], -2.0, 2.0, |g, x| g.softmax_col(x[0]));
grad_test!(grad_max_rows, [(5, 3)], -1.0, 1.0, |g, x| g.max_rows(x[0]));
grad_test!(grad_linear_attention, [(4, 3), (5, 3), (5, 2)], -1.5, 1.5, |g, x| {
    linear_attention(g, x[0], x[1], x[2])
});
grad_test!(grad_custom_rowwise, [(4, 3)], -1.0, 1.0, |g, x| {
    // f(row) = (r0·r1, r2²)
    let t = g.value(x[0]).clone();
    let mut val = Tensor::zeros(4, 2);
    let mut jac = vec![0.0; 4 * 2 * 3];
    for r in 0..4 {
        let (a, b, c) = (t.at(r, 0), t.at(r, 1), t.at(r, 2));
        val.data[r * 2] = a * b;
        val.data[r * 2 + 1] = c * c;
        jac[r * 6] = b;
        jac[r * 6 + 1] = a;
        jac[r * 6 + 5] = 2.0 * c;
    }
    g.custom_rowwise(x[0], val, jac)
});

#[test]
fn linear_case_gradient_is_outer_product() {
    // loss = sum(x·W) with x 1×3 constant: dW[i][j] = x_i
    let mut store = ParamStore::new();
    let w = store.add("w", Tensor::from_vec(3, 2, vec![0.1, -0.2, 0.3, 0.4, -0.5, 0.6]).unwrap());
    let mut g = Graph::new();
    let x = g.input(Tensor::row_vector(vec![1.0, 2.0, 3.0])).unwrap();
    let wv = g.param(&store, w).unwrap();
    let y = g.matmul(x, wv).unwrap();
    let l = g.sum(y).unwrap();
    let gr = g.backward(l).unwrap();
    assert_eq!(gr.get(w).unwrap().data, vec![1.0, 1.0, 2.0, 2.0, 3.0, 3.0]);
}

#[test]
fn squared_norm_gradient_is_twice_x() {
    let mut store = ParamStore::new();
    let x = store.add("x", Tensor::row_vector(vec![0.5, -1.5, 2.0]));
    let mut g = Graph::new();
    let xv = g.param(&store, x).unwrap();
    let sq = g.square(xv).unwrap();
    let l = g.sum(sq).unwrap();
    let gr = g.backward(l).unwrap();
    assert_eq!(gr.get(x).unwrap().data, vec![1.0, -3.0, 4.0]);
}

#[test]
fn three_layer_network_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut store = ParamStore::new();
    let l1 = Linear::new(&mut store, "l1", 4, 8, &mut rng);
    let l2 = Linear::new(&mut store, "l2", 8, 8, &mut rng);
    let l3 = Linear::new(&mut store, "l3", 8, 2, &mut rng);
    for id in 0..store.len() {
        let t = store.value(id).clone();
        *store.value_mut(id) = random_tensor(&mut rng, t.rows, t.cols, -0.8, 0.8);
    }
    let x = random_tensor(&mut rng, 6, 4, -1.0, 1.0);
    let report = check_gradients(&mut store, EPS, None, |g, s| {
        let xi = g.input(x.clone())?;
        let h = l1.forward(g, s, xi)?;
        let h = g.softplus(h)?;
        let h = l2.forward(g, s, h)?;
        let h = g.sigmoid(h)?;
        let y = l3.forward(g, s, h)?;
        let y = g.square(y)?;
        g.mean(y)
    })
    .unwrap();
    assert!(report.max_rel_error < TOL, "{report:?}");
}

#[test]
fn non_scalar_loss_rejected() {
    let mut g = Graph::new();
    let x = g.input(Tensor::zeros(2, 2)).unwrap();
    assert_eq!(g.backward(x).unwrap_err(), Error::NonScalarLoss { rows: 2, cols: 2 });
}

#[test]
fn non_finite_values_trip_an_error() {
    let mut g = Graph::new();
    let x = g.input(Tensor::scalar(-1.0)).unwrap();
    assert_eq!(g.ln(x).unwrap_err(), Error::NonFinite("ln"));
}

#[test]
fn disconnected_loss_has_no_gradients() {
    let mut g = Graph::new();
    let x = g.input(Tensor::scalar(2.0)).unwrap();
    let y = g.square(x).unwrap();
    let gr = g.backward(y).unwrap();
    assert!(!gr.connected);
    assert!(gr.by_param.is_empty());
}

#[test]
fn shared_parameter_is_one_node() {
    let mut store = ParamStore::new();
    let w = store.add("w", Tensor::scalar(3.0));
    let mut g = Graph::new();
    let a = g.param(&store, w).unwrap();
    let b = g.param(&store, w).unwrap();
    assert_eq!(a, b);
    let p = g.mul(a, b).unwrap();
    let gr = g.backward(p).unwrap();
    assert_eq!(gr.get(w).unwrap().data, vec![6.0]);
}

#[test]
fn attention_single_key_returns_its_value() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let q = random_tensor(&mut rng, 5, 4, -1.0, 1.0);
    let k = random_tensor(&mut rng, 1, 4, -1.0, 1.0);
    let v = random_tensor(&mut rng, 1, 3, -1.0, 1.0);
    let mut g = Graph::new();
    let (qv, kv, vv) = (g.input(q).unwrap(), g.input(k).unwrap(), g.input(v.clone()).unwrap());
    let out = linear_attention(&mut g, qv, kv, vv).unwrap();
    for r in 0..5 {
        for c in 0..3 {
            // exact up to the eps guard: v·s/(s+eps) with s ≥ e^-4
            assert!((g.value(out).at(r, c) - v.at(0, c)).abs() < 1e-4);
        }
    }
}

#[test]
fn attention_matches_direct_formula_with_identical_keys() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let q = random_tensor(&mut rng, 4, 3, -1.0, 1.0);
    let row = random_tensor(&mut rng, 1, 3, -1.0, 1.0);
    let mut kd = Vec::new();
    for _ in 0..6 {
        kd.extend_from_slice(&row.data);
    }
    let k = Tensor::from_vec(6, 3, kd).unwrap();
    let v = random_tensor(&mut rng, 6, 2, -1.0, 1.0);
    let direct = linear_attention_direct(&q, &k, &v);
    let mut g = Graph::new();
    let (qv, kv, vv) = (g.input(q).unwrap(), g.input(k).unwrap(), g.input(v.clone()).unwrap());
    let out = linear_attention(&mut g, qv, kv, vv).unwrap();
    for (a, b) in g.value(out).data.iter().zip(&direct.data) {
        assert!((a - b).abs() < 1e-9);
    }
    // identical keys weight every value equally
    for c in 0..2 {
        let mean = (0..6).map(|j| v.at(j, c)).sum::<f64>() / 6.0;
        assert!((g.value(out).at(0, c) - mean).abs() < 1e-5);
    }
}

fn attention_out(q: &Tensor, k: &Tensor, v: &Tensor) -> Tensor {
    let mut g = Graph::new();
    let (qv, kv, vv) = (
        g.input(q.clone()).unwrap(),
        g.input(k.clone()).unwrap(),
        g.input(v.clone()).unwrap(),
    );
    let out = linear_attention(&mut g, qv, kv, vv).unwrap();
    g.value(out).clone()
}

fn permute_rows(t: &Tensor, perm: &[usize]) -> Tensor {
    let mut data = Vec::new();
    for &p in perm {
        data.extend_from_slice(t.row(p));
    }
    Tensor::from_vec(t.rows, t.cols, data).unwrap()
}

proptest! {
    #[test]
    fn attention_key_permutation_invariant(seed in 0u64..1000, m in 1usize..12) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let q = random_tensor(&mut rng, 5, 4, -2.0, 2.0);
        let k = random_tensor(&mut rng, m, 4, -2.0, 2.0);
        let v = random_tensor(&mut rng, m, 3, -2.0, 2.0);
        let mut perm: Vec<usize> = (0..m).collect();
        perm.reverse();
        perm.rotate_left(seed as usize % m);
        let a = attention_out(&q, &k, &v);
        let b = attention_out(&q, &permute_rows(&k, &perm), &permute_rows(&v, &perm));
        for (x, y) in a.data.iter().zip(&b.data) {
            prop_assert!((x - y).abs() <= 1e-12);
        }
    }

    #[test]
    fn attention_query_permutation_equivariant(seed in 0u64..1000, n in 1usize..10) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let q = random_tensor(&mut rng, n, 4, -2.0, 2.0);
        let k = random_tensor(&mut rng, 7, 4, -2.0, 2.0);
        let v = random_tensor(&mut rng, 7, 3, -2.0, 2.0);
        let perm: Vec<usize> = (0..n).rev().collect();
        let a = permute_rows(&attention_out(&q, &k, &v), &perm);
        let b = attention_out(&permute_rows(&q, &perm), &k, &v);
        for (x, y) in a.data.iter().zip(&b.data) {
            prop_assert!((x - y).abs() <= 1e-12);
        }
    }
}

#[test]
fn zero_learning_rate_leaves_params_unchanged() {
    let mut store = ParamStore::new();
    let w = store.add("w", Tensor::row_vector(vec![1.0, 2.0]));
    let before = store.clone();
    let mut g = Graph::new();
    let wv = g.param(&store, w).unwrap();
    let s = g.square(wv).unwrap();
    let l = g.sum(s).unwrap();
    let gr = g.backward(l).unwrap();
    Sgd::new(0.0, 0.9).step(&mut store, &gr);
    Adam::new(0.0).step(&mut store, &gr);
    assert_eq!(store, before);
}

#[test]
fn optimizers_minimise_a_quadratic() {
    for mut opt in [Optimizer::Sgd(Sgd::new(0.05, 0.9)), Optimizer::Adam(Adam::new(0.05))] {
        let mut store = ParamStore::new();
        let w = store.add("w", Tensor::row_vector(vec![3.0, -2.0]));
        for _ in 0..500 {
            let mut g = Graph::new();
            let wv = g.param(&store, w).unwrap();
            let s = g.square(wv).unwrap();
            let l = g.sum(s).unwrap();
            let gr = g.backward(l).unwrap();
            opt.step(&mut store, &gr);
        }
        assert!(store.value(w).data.iter().all(|x| x.abs() < 1e-3));
    }
}
