use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::error::Error;

fn mat(rows: usize, cols: usize, data: &[f64]) -> Tensor {
    Tensor::matrix(rows, cols, data.to_vec()).unwrap()
}

fn random(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn close(a: &[f64], b: &[f64], tol: f64) {
    assert_eq!(a.len(), b.len());
    for (x, y) in a.iter().zip(b) {
        assert!((x - y).abs() <= tol, "{a:?} vs {b:?}");
    }
}

#[test]
fn linear_identity_and_hand_product() {
    let mut tape = Tape::new();
    let x = tape.leaf(&mat(1, 2, &[1.0, 2.0]));
    let w = tape.leaf(&mat(2, 2, &[1.0, 0.0, 0.0, 1.0]));
    let b = tape.constant(vec![2], vec![0.0, 0.0]).unwrap();
    let y = tape.linear(x, w, b).unwrap();
    assert_eq!(tape.value(y).unwrap(), &[1.0, 2.0]);

    let x = tape.leaf(&mat(1, 2, &[1.0, 0.0]));
    let w = tape.leaf(&mat(2, 2, &[0.0, 1.0, 1.0, 0.0]));
    let b = tape.constant(vec![2], vec![1.0, 1.0]).unwrap();
    let y = tape.linear(x, w, b).unwrap();
    assert_eq!(tape.value(y).unwrap(), &[1.0, 2.0]);
}

#[test]
fn linear_shape_error_names_both_shapes() {
    let mut tape = Tape::new();
    let x = tape.leaf(&mat(1, 3, &[1.0, 2.0, 3.0]));
    let w = tape.leaf(&mat(2, 2, &[1.0; 4]));
    let b = tape.constant(vec![2], vec![0.0; 2]).unwrap();
    match tape.linear(x, w, b) {
        Err(Error::Shape { left, right, .. }) => {
            assert_eq!(left, vec![1, 3]);
            assert_eq!(right, vec![2, 2]);
        }
        other => panic!("expected shape error, got {other:?}"),
    }
}

#[test]
fn linear_weight_gradient_is_x_transpose_ones() {
    let x = mat(2, 3, &[1.0, -2.0, 0.5, 3.0, 0.0, 1.5]);
    let mut tape = Tape::new();
    let xv = tape.leaf(&x);
    let w = tape.leaf(&Tensor::zeros(vec![3, 2]).with_grad());
    let b = tape.constant(vec![2], vec![0.0; 2]).unwrap();
    let y = tape.linear(xv, w, b).unwrap();
    let s = tape.sum(y).unwrap();
    let grads = tape.backward(s).unwrap();
    // xᵀ · ones(2×2): each row of the gradient is the column sum of x.
    close(grads.get(w).unwrap(), &[4.0, 4.0, -2.0, -2.0, 2.0, 2.0], 1e-12);

    let err = finite_diff_check(
        |t, wv| {
            let xv = t.leaf(&x);
            let b = t.constant(vec![2], vec![0.0; 2])?;
            let y = t.linear(xv, wv, b)?;
            t.sum(y)
        },
        &Tensor::zeros(vec![3, 2]),
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-6, "{err}");
}

#[test]
fn softmax_examples() {
    let mut tape = Tape::new();
    let a = tape.leaf(&mat(1, 2, &[0.0, 0.0]));
    let s = tape.softmax_rows(a).unwrap();
    close(tape.value(s).unwrap(), &[0.5, 0.5], 1e-15);

    let a = tape.leaf(&mat(1, 2, &[1f64.ln(), 3f64.ln()]));
    let s = tape.softmax_rows(a).unwrap();
    close(tape.value(s).unwrap(), &[0.25, 0.75], 1e-15);

    let a = tape.leaf(&mat(1, 2, &[1000.0, 1000.0]));
    let s = tape.softmax_rows(a).unwrap();
    close(tape.value(s).unwrap(), &[0.5, 0.5], 1e-15);
}

#[test]
fn softmax_rejects_nan() {
    let mut tape = Tape::new();
    let a = tape.leaf(&mat(1, 2, &[f64::NAN, 0.0]));
    assert!(matches!(tape.softmax_rows(a), Err(Error::Numeric(_))));
}

#[test]
fn layer_norm_examples() {
    let mut tape = Tape::new();
    let g = tape.constant(vec![2], vec![1.0, 1.0]).unwrap();
    let b = tape.constant(vec![2], vec![0.0, 0.0]).unwrap();
    let x = tape.leaf(&mat(1, 2, &[5.0, 5.0]));
    let y = tape.layer_norm(x, g, b, 1e-5).unwrap();
    close(tape.value(y).unwrap(), &[0.0, 0.0], 0.0);

    let x = tape.leaf(&mat(1, 2, &[1.0, 3.0]));
    let y = tape.layer_norm(x, g, b, 1e-12).unwrap();
    close(tape.value(y).unwrap(), &[-1.0, 1.0], 1e-6);
}

#[test]
fn conv_rows_examples() {
    let mut tape = Tape::new();
    let stack = tape.leaf(&mat(2, 3, &[4.0, 5.0, 6.0, 7.0, 8.0, 9.0]));
    let k = tape.leaf(&Tensor::new(vec![1, 2, 1], vec![1.0, 0.0]).unwrap());
    let y = tape.conv_rows(stack, k).unwrap();
    assert_eq!(tape.shape(y).unwrap(), &[1, 3]);
    close(tape.value(y).unwrap(), &[4.0, 5.0, 6.0], 0.0);

    let stack = tape.leaf(&mat(2, 3, &[1.0, 2.0, 3.0, 0.0, 0.0, 0.0]));
    let k = tape
        .leaf(&Tensor::new(vec![1, 2, 3], vec![0.0, 1.0, 0.0, 0.0, 0.0, 0.0]).unwrap());
    let y = tape.conv_rows(stack, k).unwrap();
    close(tape.value(y).unwrap(), &[1.0, 2.0, 3.0], 0.0);

    // Border padding: a left-shift kernel pulls in the zero pad on the right.
    let k = tape
        .leaf(&Tensor::new(vec![1, 2, 3], vec![0.0, 0.0, 1.0, 0.0, 0.0, 0.0]).unwrap());
    let y = tape.conv_rows(stack, k).unwrap();
    close(tape.value(y).unwrap(), &[2.0, 3.0, 0.0], 0.0);
}

#[test]
fn conv_rejects_even_width() {
    let mut tape = Tape::new();
    let stack = tape.leaf(&mat(2, 3, &[0.0; 6]));
    let k = tape.leaf(&Tensor::new(vec![1, 2, 2], vec![0.0; 4]).unwrap());
    assert!(matches!(tape.conv_rows(stack, k), Err(Error::Config(_))));
}

#[test]
fn cross_entropy_examples() {
    let mut tape = Tape::new();
    let l = tape.leaf(&mat(1, 2, &[0.0, 0.0]));
    let ce = tape.cross_entropy_logits(l, &[0]).unwrap();
    assert!((tape.scalar(ce).unwrap() - 2f64.ln()).abs() < 1e-15);

    let l = tape.leaf(&mat(1, 2, &[10.0, -10.0]));
    let ce = tape.cross_entropy_logits(l, &[0]).unwrap();
    let expected = (-20f64).exp().ln_1p();
    let got = tape.scalar(ce).unwrap();
    assert!((got - expected).abs() / expected < 1e-12, "{got}");
    assert!((got - 2.06e-9).abs() < 1e-11);

    let l = tape.leaf(&mat(1, 2, &[0.0, 0.0]));
    assert!(matches!(
        tape.cross_entropy_logits(l, &[2]),
        Err(Error::Index { index: 2, len: 2, .. })
    ));
}

#[test]
fn cross_entropy_gradient_is_softmax_minus_onehot() {
    let logits = mat(2, 3, &[0.3, -1.2, 2.0, 1.0, 1.0, -0.5]);
    let targets = [2usize, 0];
    let mut tape = Tape::new();
    let l = tape.leaf(&logits.clone().with_grad());
    let ce = tape.cross_entropy_logits(l, &targets).unwrap();
    let grads = tape.backward(ce).unwrap();
    let g = grads.get(l).unwrap();
    for (i, row) in logits.data().chunks(3).enumerate() {
        let mut p = row.to_vec();
        softmax_in_place(&mut p);
        p[targets[i]] -= 1.0;
        for j in 0..3 {
            assert!((g[i * 3 + j] - p[j] / 2.0).abs() < 1e-14);
        }
    }
    let err = finite_diff_check(|t, v| t.cross_entropy_logits(v, &targets), &logits, 1e-5).unwrap();
    assert!(err < 1e-6, "{err}");
}

#[test]
fn backward_linear_and_quadratic() {
    let x = mat(1, 3, &[1.0, -2.0, 0.5]).with_grad();
    let mut tape = Tape::new();
    let v = tape.leaf(&x);
    let s = tape.sum(v).unwrap();
    let g = tape.backward(s).unwrap();
    assert_eq!(g.get(v).unwrap(), &[1.0, 1.0, 1.0]);

    let v = tape.leaf(&x);
    let sq = tape.mul(v, v).unwrap();
    let s = tape.sum(sq).unwrap();
    let g = tape.backward(s).unwrap();
    assert_eq!(g.get(v).unwrap(), &[2.0, -4.0, 1.0]);
}

#[test]
fn backward_contracts() {
    let mut tape = Tape::new();
    let v = tape.leaf(&mat(1, 2, &[1.0, 2.0]).with_grad());
    assert!(matches!(tape.backward(v), Err(Error::Contract(_))));

    let s = tape.sum(v).unwrap();
    tape.backward(s).unwrap();
    assert!(tape.is_empty());
    assert!(matches!(tape.backward(s), Err(Error::Contract(_))));

    // Re-recording after a backward pass is allowed.
    let v = tape.leaf(&mat(1, 2, &[1.0, 2.0]).with_grad());
    let s = tape.sum(v).unwrap();
    assert!(tape.backward(s).is_ok());
}

#[test]
fn constants_get_no_gradient_and_unused_leaves_get_zeros() {
    let mut tape = Tape::new();
    let c = tape.leaf(&mat(1, 2, &[1.0, 2.0]));
    let p = tape.leaf(&mat(1, 2, &[3.0, 4.0]).with_grad());
    let unused = tape.leaf(&mat(1, 1, &[9.0]).with_grad());
    let d = tape.detach(p).unwrap();
    let y = tape.mul(c, d).unwrap();
    let s = tape.sum(y).unwrap();
    let g = tape.backward(s).unwrap();
    assert!(g.get(c).is_none());
    assert_eq!(g.get(p).unwrap(), &[0.0, 0.0]);
    assert_eq!(g.get(unused).unwrap(), &[0.0]);
}

#[test]
fn finite_diff_self_tests() {
    let err = finite_diff_check(
        |t, v| {
            let sq = t.mul(v, v)?;
            t.sum(sq)
        },
        &mat(1, 2, &[1.0, 2.0]),
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-6, "{err}");

    let weights = mat(1, 4, &[0.2, -1.0, 0.7, 1.5]);
    let err = finite_diff_check(
        |t, v| {
            let s = t.softmax_rows(v)?;
            let w = t.leaf(&weights);
            let p = t.mul(s, w)?;
            t.sum(p)
        },
        &mat(1, 4, &[0.1, 0.4, -0.3, 0.9]),
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-4, "{err}");
}

#[test]
fn finite_diff_detects_kink_near_tie() {
    // max(0, x) evaluated within one step of its kink: the central difference
    // straddles the discontinuity in the derivative and disagrees sharply.
    let err = finite_diff_check(
        |t, v| {
            let r = t.relu(v)?;
            t.sum(r)
        },
        &mat(1, 1, &[1e-7]),
        1e-5,
    )
    .unwrap();
    assert!(err > 0.1, "kink not detected: {err}");
}

#[test]
fn finite_diff_rejects_bad_step_and_non_finite() {
    let x = mat(1, 1, &[1.0]);
    assert!(finite_diff_check(|t, v| t.sum(v), &x, 0.0).is_err());
    assert!(matches!(
        finite_diff_check(|t, v| t.scale(v, f64::INFINITY).and_then(|s| t.sum(s)), &x, 1e-5),
        Err(Error::Numeric(_))
    ));
}

type Probe = fn(&mut Tape, Var, &mut ChaCha8Rng) -> crate::error::Result<Var>;

/// Reduces an arbitrary output to a scalar through fixed random weights so
/// every output coordinate contributes a distinct adjoint.
fn readout(t: &mut Tape, y: Var, rng: &mut ChaCha8Rng) -> crate::error::Result<Var> {
    let shape = t.shape(y)?.to_vec();
    let w = random(rng, shape);
    let wv = t.leaf(&w);
    let p = t.mul(y, wv)?;
    t.sum(p)
}

fn op_cases() -> Vec<(&'static str, Vec<usize>, Probe)> {
    vec![
        ("matmul", vec![3, 4], |t, x, r| {
            let w = random(r, vec![4, 2]);
            let w = t.leaf(&w);
            let y = t.matmul(x, w)?;
            readout(t, y, r)
        }),
        ("linear", vec![3, 4], |t, x, r| {
            let w = t.leaf(&random(r, vec![4, 2]));
            let b = t.leaf(&random(r, vec![2]));
            let y = t.linear(x, w, b)?;
            readout(t, y, r)
        }),
        ("linear_weight", vec![4, 2], |t, w, r| {
            let x = t.leaf(&random(r, vec![3, 4]));
            let b = t.leaf(&random(r, vec![2]));
            let y = t.linear(x, w, b)?;
            readout(t, y, r)
        }),
        ("add_sub_mul", vec![2, 3], |t, x, r| {
            let c = t.leaf(&random(r, vec![2, 3]));
            let a = t.add(x, c)?;
            let s = t.sub(a, x)?;
            let m = t.mul(s, x)?;
            let m2 = t.mul(m, x)?;
            readout(t, m2, r)
        }),
        ("add_row", vec![1, 3], |t, row, r| {
            let a = t.leaf(&random(r, vec![4, 3]));
            let y = t.add_row(a, row)?;
            let y = t.tanh(y)?;
            readout(t, y, r)
        }),
        ("scale_tanh", vec![2, 3], |t, x, r| {
            let y = t.scale(x, 1.7)?;
            let y = t.tanh(y)?;
            readout(t, y, r)
        }),
        ("sigmoid", vec![2, 3], |t, x, r| {
            let y = t.sigmoid(x)?;
            readout(t, y, r)
        }),
        ("relu", vec![2, 3], |t, x, r| {
            let y = t.relu(x)?;
            readout(t, y, r)
        }),
        ("softmax_rows", vec![3, 4], |t, x, r| {
            let y = t.softmax_rows(x)?;
            readout(t, y, r)
        }),
        ("layer_norm_input", vec![3, 5], |t, x, r| {
            let g = t.leaf(&random(r, vec![5]));
            let b = t.leaf(&random(r, vec![5]));
            let y = t.layer_norm(x, g, b, 1e-5)?;
            readout(t, y, r)
        }),
        ("layer_norm_gain", vec![5], |t, g, r| {
            let x = t.leaf(&random(r, vec![3, 5]));
            let b = t.leaf(&random(r, vec![5]));
            let y = t.layer_norm(x, g, b, 1e-5)?;
            readout(t, y, r)
        }),
        ("conv_rows_input", vec![2, 6], |t, x, r| {
            let k = t.leaf(&random(r, vec![3, 2, 3]));
            let y = t.conv_rows(x, k)?;
            readout(t, y, r)
        }),
        ("conv_rows_kernels", vec![3, 2, 3], |t, k, r| {
            let x = t.leaf(&random(r, vec![2, 6]));
            let y = t.conv_rows(x, k)?;
            readout(t, y, r)
        }),
        ("cross_entropy", vec![3, 5], |t, x, _| t.cross_entropy_logits(x, &[4, 0, 2])),
        ("transpose_reshape", vec![2, 3], |t, x, r| {
            let y = t.transpose(x)?;
            let y = t.reshape(y, vec![1, 6])?;
            let y = t.tanh(y)?;
            readout(t, y, r)
        }),
        ("concat_slice_gather", vec![2, 3], |t, x, r| {
            let c = t.leaf(&random(r, vec![2, 2]));
            let y = t.concat_cols(&[x, c, x])?;
            let y = t.slice_cols(y, 1, 5)?;
            let z = t.concat_rows(&[y, y])?;
            let z = t.gather_rows(z, &[3, 0, 0, 2])?;
            let z = t.tanh(z)?;
            readout(t, z, r)
        }),
    ]
}

#[test]
fn every_op_matches_finite_differences_at_random_points() {
    for (name, shape, probe) in op_cases() {
        for point in 0..10u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(100 + point);
            let x = random(&mut rng, shape.clone());
            let seed = 1000 + point;
            let err = finite_diff_check(
                |t, v| {
                    let mut r = ChaCha8Rng::seed_from_u64(seed);
                    probe(t, v, &mut r)
                },
                &x,
                1e-5,
            )
            .unwrap();
            assert!(err < 1e-4, "{name} at point {point}: rel err {err}");
        }
    }
}

#[test]
fn backward_is_deterministic() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = random(&mut rng, vec![3, 4]).with_grad();
        let mut tape = Tape::new();
        let v = tape.leaf(&x);
        let y = readout(&mut tape, v, &mut rng).unwrap();
        let s = tape.softmax_rows(v).unwrap();
        let z = readout(&mut tape, s, &mut rng).unwrap();
        let tot = tape.add(y, z).unwrap();
        tape.backward(tot).unwrap().get(v).unwrap().to_vec()
    };
    let a = run();
    let b = run();
    assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
}

proptest! {
    #[test]
    fn softmax_rows_sum_to_one_and_are_shift_invariant(
        row in prop::collection::vec(-50.0f64..50.0, 1..12),
        shift in -100.0f64..100.0,
    ) {
        let n = row.len();
        let mut tape = Tape::new();
        let a = tape.leaf(&mat(1, n, &row));
        let s = tape.softmax_rows(a).unwrap();
        let shifted: Vec<f64> = row.iter().map(|x| x + shift).collect();
        let b = tape.leaf(&mat(1, n, &shifted));
        let s2 = tape.softmax_rows(b).unwrap();
        let p = tape.value(s).unwrap().to_vec();
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        prop_assert!(p.iter().all(|x| *x >= 0.0));
        for (x, y) in p.iter().zip(tape.value(s2).unwrap()) {
            prop_assert!((x - y).abs() <= 1e-12);
        }
    }

    #[test]
    fn layer_norm_rows_are_standardized(row in prop::collection::vec(-10.0f64..10.0, 2..16)) {
        let d = row.len();
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / d as f64;
        prop_assume!(var > 1e-3);
        let mut tape = Tape::new();
        let x = tape.leaf(&mat(1, d, &row));
        let g = tape.constant(vec![d], vec![1.0; d]).unwrap();
        let b = tape.constant(vec![d], vec![0.0; d]).unwrap();
        let y = tape.layer_norm(x, g, b, 1e-5).unwrap();
        let out = tape.value(y).unwrap();
        let m = out.iter().sum::<f64>() / d as f64;
        let v = out.iter().map(|x| (x - m).powi(2)).sum::<f64>() / d as f64;
        prop_assert!(m.abs() < 1e-9);
        prop_assert!((v - var / (var + 1e-5)).abs() < 1e-9);
    }
}
