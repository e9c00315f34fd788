use super::*;
use crate::rng;

fn assert_close(actual: f64, expected: f64, tol: f64, msg: &str) {
    assert!(
        (actual - expected).abs() <= tol,
        "{msg}: actual={actual} expected={expected} diff={}",
        (actual - expected).abs()
    );
}

fn assert_vec_close(actual: &[f64], expected: &[f64], tol: f64, msg: &str) {
    assert_eq!(actual.len(), expected.len(), "{msg}: length mismatch");
    for (i, (a, e)) in actual.iter().zip(expected.iter()).enumerate() {
        assert!(
            (a - e).abs() <= tol,
            "{msg}[{i}]: actual={a} expected={e}"
        );
    }
}

#[test]
fn matmul_identity() {
    let a = Tensor::from_vec(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
    let eye = Tensor::from_vec(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
    let out = a.matmul(&eye).unwrap();
    assert_eq!(out.data(), vec![1.0, 2.0, 3.0, 4.0]);
}

#[test]
fn matmul_shape_error_names_op_and_shapes() {
    let a = Tensor::zeros(vec![2, 3]);
    let b = Tensor::zeros(vec![2, 3]);
    let err = a.matmul(&b).unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains("matmul"), "{msg}");
    assert!(msg.contains("[2, 3]"), "{msg}");
}

#[test]
fn softmax_symmetry() {
    let x = Tensor::from_vec(vec![2], vec![0.0, 0.0]).unwrap();
    let s = x.softmax().unwrap();
    assert_vec_close(&s.data(), &[0.5, 0.5], 1e-15, "softmax");
}

#[test]
fn softmax_rows_sum_to_one() {
    let mut r = rng::seeded(3);
    for _ in 0..10 {
        let x = rng::randn_tensor(&mut r, vec![4, 7], 3.0);
        let s = x.softmax().unwrap();
        for row in s.data().chunks(7) {
            let sum: f64 = row.iter().sum();
            assert_close(sum, 1.0, 1e-12, "row sum");
        }
    }
}

#[test]
fn cross_entropy_uniform_two_way() {
    let x = Tensor::from_vec(vec![2], vec![0.0, 0.0]).unwrap();
    let ce = x.cross_entropy_from_logits(&[0]).unwrap();
    assert_close(ce.data()[0], std::f64::consts::LN_2, 1e-12, "ln 2");
}

#[test]
fn cross_entropy_target_out_of_range() {
    let x = Tensor::from_vec(vec![2], vec![0.0, 0.0]).unwrap();
    let err = x.cross_entropy_from_logits(&[5]).unwrap_err();
    assert!(matches!(err, TensorError::IndexOutOfRange { .. }));
}

#[test]
fn backward_square_analytic() {
    // loss = x*x at x=3 -> grad 6
    let x = Tensor::from_vec(vec![], vec![3.0]).unwrap().requires_grad(true);
    let loss = x.mul(&x).unwrap();
    loss.backward().unwrap();
    assert_vec_close(&x.grad().unwrap(), &[6.0], 1e-12, "d(x^2)/dx");
}

#[test]
fn backward_softmax_cross_entropy_analytic() {
    let x = Tensor::from_vec(vec![2], vec![0.0, 0.0]).unwrap().requires_grad(true);
    let loss = x.cross_entropy_from_logits(&[0]).unwrap().mean().unwrap();
    loss.backward().unwrap();
    assert_vec_close(&x.grad().unwrap(), &[-0.5, 0.5], 1e-12, "softmax-CE grad");
}

#[test]
fn backward_rejects_non_scalar() {
    let x = Tensor::from_vec(vec![2], vec![1.0, 2.0]).unwrap().requires_grad(true);
    let y = x.scale(2.0).unwrap();
    assert!(matches!(y.backward(), Err(TensorError::NotScalar { .. })));
}

#[test]
fn backward_diamond_sums_contributions() {
    // d(x + x)/dx = 2
    let x = Tensor::from_vec(vec![], vec![1.5]).unwrap().requires_grad(true);
    let loss = x.add(&x).unwrap();
    loss.backward().unwrap();
    assert_vec_close(&x.grad().unwrap(), &[2.0], 1e-15, "diamond");
}

#[test]
fn repeated_backward_accumulates() {
    let x = Tensor::from_vec(vec![], vec![3.0]).unwrap().requires_grad(true);
    let loss = x.mul(&x).unwrap();
    loss.backward().unwrap();
    loss.backward().unwrap();
    assert_vec_close(&x.grad().unwrap(), &[12.0], 1e-12, "two backward calls");
}

#[test]
fn detach_blocks_gradient() {
    let x = Tensor::from_vec(vec![], vec![2.0]).unwrap().requires_grad(true);
    let frozen = x.mul(&x).unwrap().detach();
    let loss = frozen.mul(&frozen).unwrap();
    assert!(loss.backward().is_err(), "detached graph has no grad path");
    assert!(x.grad().is_none());
}

#[test]
fn no_grad_scope_builds_leaves() {
    let x = Tensor::from_vec(vec![], vec![2.0]).unwrap().requires_grad(true);
    let y = {
        let _g = NoGradGuard::new();
        x.mul(&x).unwrap()
    };
    assert!(y.is_leaf());
    let z = x.mul(&x).unwrap();
    assert!(!z.is_leaf());
}

#[test]
fn broadcast_add_and_grads() {
    let a = Tensor::from_vec(vec![2, 3], vec![0.0; 6]).unwrap().requires_grad(true);
    let b = Tensor::from_vec(vec![3], vec![1.0, 2.0, 3.0]).unwrap().requires_grad(true);
    let out = a.add(&b).unwrap();
    assert_eq!(out.data(), vec![1.0, 2.0, 3.0, 1.0, 2.0, 3.0]);
    out.sum().unwrap().backward().unwrap();
    assert_vec_close(&a.grad().unwrap(), &[1.0; 6], 1e-15, "lhs grad");
    assert_vec_close(&b.grad().unwrap(), &[2.0, 2.0, 2.0], 1e-15, "rhs grad summed");
}

#[test]
fn add_rejects_non_suffix_shapes() {
    let a = Tensor::zeros(vec![2, 3]);
    let b = Tensor::zeros(vec![2]);
    let err = a.add(&b).unwrap_err();
    assert!(err.to_string().contains("add"));
}

#[test]
fn gather_out_of_range() {
    let table = Tensor::zeros(vec![4, 2]);
    let err = Tensor::gather(&table, &[0, 4]).unwrap_err();
    assert!(matches!(err, TensorError::IndexOutOfRange { index: 4, size: 4, .. }));
}

#[test]
fn layer_norm_normalizes_rows() {
    let mut r = rng::seeded(11);
    let x = rng::randn_tensor(&mut r, vec![4, 16], 1.0);
    let gain = Tensor::full(vec![16], 1.0);
    let bias = Tensor::zeros(vec![16]);
    let out = x.layer_norm(&gain, &bias).unwrap();
    for row in out.data().chunks(16) {
        let mean: f64 = row.iter().sum::<f64>() / 16.0;
        let var: f64 = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 16.0;
        assert!(mean.abs() < 1e-10, "row mean {mean}");
        assert!((var - 1.0).abs() < 1e-8, "row var {var}");
    }
}

#[test]
fn causal_softmax_zeroes_future_and_normalizes() {
    let mut r = rng::seeded(5);
    let x = rng::randn_tensor(&mut r, vec![5, 5], 2.0);
    let s = x.causal_softmax().unwrap();
    let d = s.data();
    for i in 0..5 {
        let sum: f64 = d[i * 5..i * 5 + i + 1].iter().sum();
        assert_close(sum, 1.0, 1e-12, "prefix sum");
        for j in i + 1..5 {
            assert_eq!(d[i * 5 + j], 0.0, "future weight must be exactly zero");
        }
    }
}

#[test]
fn grad_check_sum_of_squares_is_sharp() {
    let x = Tensor::from_vec(vec![3], vec![1.0, 2.0, 3.0]).unwrap().requires_grad(true);
    let err = grad_check(|x| x.mul(x)?.sum(), &x, 1e-5).unwrap();
    assert!(err < 1e-8, "max_rel_err {err}");
}

#[test]
fn grad_check_layer_norm() {
    let mut r = rng::seeded(2);
    let x = rng::randn_tensor(&mut r, vec![2, 8], 1.0).requires_grad(true);
    let gain = rng::randn_tensor(&mut r, vec![8], 0.5);
    let bias = rng::randn_tensor(&mut r, vec![8], 0.5);
    let err = grad_check(|x| x.layer_norm(&gain, &bias)?.mean(), &x, 1e-5).unwrap();
    assert!(err < 1e-5, "max_rel_err {err}");
}

#[test]
fn grad_check_matmul_chain_against_finite_differences() {
    // Random 3x4 matmul chain; analytic vs central differences.
    let mut r = rng::seeded(7);
    let a = rng::randn_tensor(&mut r, vec![3, 4], 1.0).requires_grad(true);
    let b = rng::randn_tensor(&mut r, vec![4, 3], 1.0);
    let c = rng::randn_tensor(&mut r, vec![3, 4], 1.0);
    let err = grad_check(|a| a.matmul(&b)?.matmul(&c)?.mul(&a)?.mean(), &a, 1e-5).unwrap();
    assert!(err < 1e-6, "max_rel_err {err}");
}

/// Every op in the suite, checked against finite differences on small
/// random tensors. This is the fast mirror of the acceptance gradient
/// suite, which runs more seeds.
#[test]
fn grad_check_every_op_small() {
    run_op_suite_grad_checks(5, 1e-4);
}

pub(crate) fn run_op_suite_grad_checks(seeds: u64, tol: f64) {
    for seed in 0..seeds {
        let mut r = rng::seeded(100 + seed);

        let x = rng::randn_tensor(&mut r, vec![3, 4], 1.0).requires_grad(true);
        let w = rng::randn_tensor(&mut r, vec![4, 2], 1.0);
        let e = grad_check(|x| x.matmul(&w)?.mean(), &x, 1e-5).unwrap();
        assert!(e < tol, "matmul seed {seed}: {e}");

        let e = grad_check(|x| x.transpose()?.mean(), &x, 1e-5).unwrap();
        assert!(e < tol, "transpose seed {seed}: {e}");

        let bias = rng::randn_tensor(&mut r, vec![4], 1.0);
        let e = grad_check(|x| x.add(&bias)?.mean(), &x, 1e-5).unwrap();
        assert!(e < tol, "add seed {seed}: {e}");
        let y = rng::randn_tensor(&mut r, vec![3, 4], 1.0);
        let e = grad_check(|x| x.sub(&y)?.mul(&x)?.mean(), &x, 1e-5).unwrap();
        assert!(e < tol, "sub/mul seed {seed}: {e}");

        let e = grad_check(|x| x.scale(-2.5)?.mean(), &x, 1e-5).unwrap();
        assert!(e < tol, "scale seed {seed}: {e}");

        let e = grad_check(|x| x.gelu()?.mean(), &x, 1e-5).unwrap();
        assert!(e < tol, "gelu seed {seed}: {e}");

        let e = grad_check(|x| x.softmax()?.mul(&x)?.mean(), &x, 1e-5).unwrap();
        assert!(e < tol, "softmax seed {seed}: {e}");

        let sq = rng::randn_tensor(&mut r, vec![4, 4], 1.0).requires_grad(true);
        let e = grad_check(|x| x.causal_softmax()?.mul(&x)?.mean(), &sq, 1e-5).unwrap();
        assert!(e < tol, "causal_softmax seed {seed}: {e}");

        let gain = rng::randn_tensor(&mut r, vec![4], 0.5);
        let bln = rng::randn_tensor(&mut r, vec![4], 0.5);
        let e = grad_check(|x| x.layer_norm(&gain, &bln)?.mean(), &x, 1e-5).unwrap();
        assert!(e < tol, "layer_norm(x) seed {seed}: {e}");
        let xc = x.detach();
        let e = grad_check(|g| xc.layer_norm(g, &bln)?.mean(), &gain.detach().requires_grad(true), 1e-5).unwrap();
        assert!(e < tol, "layer_norm(gain) seed {seed}: {e}");

        let table = rng::randn_tensor(&mut r, vec![6, 3], 1.0).requires_grad(true);
        let e = grad_check(|t| Tensor::gather(t, &[0, 2, 2, 5])?.mean(), &table, 1e-5).unwrap();
        assert!(e < tol, "gather seed {seed}: {e}");

        let other = rng::randn_tensor(&mut r, vec![2, 4], 1.0);
        let e = grad_check(|x| Tensor::concat(&[x.clone(), other.clone()], 0)?.mean(), &x, 1e-5).unwrap();
        assert!(e < tol, "concat seed {seed}: {e}");

        let e = grad_check(|x| x.slice(1, 1, 2)?.mean(), &x, 1e-5).unwrap();
        assert!(e < tol, "slice seed {seed}: {e}");

        let e = grad_check(|x| x.reshape(vec![2, 6])?.mul(&x.reshape(vec![2, 6])?)?.mean(), &x, 1e-5).unwrap();
        assert!(e < tol, "reshape seed {seed}: {e}");

        let e = grad_check(|x| x.mean(), &x, 1e-5).unwrap();
        assert!(e < tol, "mean seed {seed}: {e}");
        let e = grad_check(|x| x.sum(), &x, 1e-5).unwrap();
        assert!(e < tol, "sum seed {seed}: {e}");
        let e = grad_check(|x| x.mean_rows()?.mul(&x.mean_rows()?)?.mean(), &x, 1e-5).unwrap();
        assert!(e < tol, "mean_rows seed {seed}: {e}");

        let logits = rng::randn_tensor(&mut r, vec![3, 5], 1.0).requires_grad(true);
        let e = grad_check(
            |l| l.cross_entropy_from_logits(&[1, 0, 4])?.mean(),
            &logits,
            1e-5,
        )
        .unwrap();
        assert!(e < tol, "cross_entropy seed {seed}: {e}");
    }
}

#[test]
fn grad_check_reports_non_finite() {
    let x = Tensor::from_vec(vec![1], vec![0.0]).unwrap().requires_grad(true);
    // 1/x at 0 explodes under perturbation.
    let res = grad_check(
        |x| {
            let inv: Vec<f64> = x.data().iter().map(|v| 1.0 / v).collect();
            Tensor::from_vec(vec![1], inv)?.sum()
        },
        &x,
        1e-5,
    );
    assert!(res.is_err());
}

mod properties {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn softmax_rows_always_normalized(vals in proptest::collection::vec(-50.0f64..50.0, 6)) {
            let x = Tensor::from_vec(vec![2, 3], vals).unwrap();
            let s = x.softmax().unwrap();
            for row in s.data().chunks(3) {
                let sum: f64 = row.iter().sum();
                prop_assert!((sum - 1.0).abs() < 1e-12);
            }
        }

        #[test]
        fn concat_then_slice_roundtrips(a in proptest::collection::vec(-5.0f64..5.0, 6),
                                        b in proptest::collection::vec(-5.0f64..5.0, 9)) {
            let ta = Tensor::from_vec(vec![2, 3], a.clone()).unwrap();
            let tb = Tensor::from_vec(vec![3, 3], b).unwrap();
            let cat = Tensor::concat(&[ta, tb], 0).unwrap();
            let back = cat.slice(0, 0, 2).unwrap();
            prop_assert_eq!(back.data(), a);
        }
    }
}
