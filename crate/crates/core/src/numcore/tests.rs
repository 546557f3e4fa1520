use proptest::prelude::*;
use rand::{Rng as _, SeedableRng};

use super::*;
use crate::rng::Rng;

/// Gradients below this magnitude are dominated by finite-difference
/// roundoff at h = 1e-5 (structurally zero entries come back as ~1e-10).
const GRAD_FLOOR: f64 = 1e-5;

fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(GRAD_FLOOR)
}

/// Central finite differences over every element of every input that
/// requires gradients; returns the worst relative error.
fn max_fd_error(inputs: &[Tensor], build: impl Fn(&mut Tape, &[Var]) -> Var) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t)).collect();
    let loss = build(&mut tape, &vars);
    let grads = tape.backward(loss).unwrap();

    let eval = |inputs: &[Tensor]| {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t)).collect();
        let out = build(&mut tape, &vars);
        tape.value(out)[0]
    };

    let h = 1e-5;
    let mut worst = 0.0f64;
    for (i, t) in inputs.iter().enumerate() {
        if !t.requires_grad() {
            continue;
        }
        let analytic = grads.get(vars[i]).expect("gradient for input");
        for j in 0..t.len() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[j] += h;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[j] -= h;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * h);
            worst = worst.max(relative_error(analytic[j], numeric));
        }
    }
    worst
}

fn random_tensor(shape: &[usize], rng: &mut Rng) -> Tensor {
    let len = shape.iter().product();
    let data = (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect();
    Tensor::new(shape.to_vec(), data)
        .unwrap()
        .with_requires_grad(true)
}

#[test]
fn matmul_identity() {
    let mut tape = Tape::new();
    let eye = tape
        .constant(vec![3, 3], vec![1., 0., 0., 0., 1., 0., 0., 0., 1.])
        .unwrap();
    let x = tape.constant(vec![3, 2], vec![1., 2., 3., 4., 5., 6.]).unwrap();
    let y = tape.matmul(eye, x).unwrap();
    assert_eq!(tape.value(y), tape.value(x));
}

#[test]
fn matmul_hand_example() {
    let mut tape = Tape::new();
    let a = tape.constant(vec![2, 2], vec![1., 2., 3., 4.]).unwrap();
    let b = tape.constant(vec![2, 1], vec![1., 1.]).unwrap();
    let c = tape.matmul(a, b).unwrap();
    assert_eq!(tape.shape(c), &[2, 1]);
    assert_eq!(tape.value(c), &[3., 7.]);
}

#[test]
fn matmul_shape_mismatch() {
    let mut tape = Tape::new();
    let a = tape.constant(vec![2, 3], vec![0.; 6]).unwrap();
    let b = tape.constant(vec![2, 3], vec![0.; 6]).unwrap();
    assert!(tape.matmul(a, b).is_err());
}

#[test]
fn grad_of_sum_matmul_is_ones_times_bt() {
    let mut rng = Rng::seed_from_u64(1);
    let a = random_tensor(&[3, 4], &mut rng);
    let b = random_tensor(&[4, 2], &mut rng).with_requires_grad(false);
    let mut tape = Tape::new();
    let (va, vb) = (tape.leaf(&a), tape.leaf(&b));
    let c = tape.matmul(va, vb).unwrap();
    let s = tape.sum(c);
    let grads = tape.backward(s).unwrap();
    let ga = grads.get(va).unwrap();
    // ones[3×2]·Bᵀ: every row equals the row sums of B.
    for i in 0..3 {
        for k in 0..4 {
            let want = b.data()[k * 2] + b.data()[k * 2 + 1];
            assert!((ga[i * 4 + k] - want).abs() < 1e-12);
        }
    }
    let err = max_fd_error(&[a, b], |t, v| {
        let c = t.matmul(v[0], v[1]).unwrap();
        t.sum(c)
    });
    assert!(err < 1e-6, "fd error {err}");
}

#[test]
fn batch_matmul_gradients() {
    let mut rng = Rng::seed_from_u64(2);
    let a = random_tensor(&[2, 3, 4], &mut rng);
    let b = random_tensor(&[2, 4, 5], &mut rng);
    let bt = random_tensor(&[2, 5, 4], &mut rng);
    let w = random_tensor(&[2, 3, 5], &mut rng).with_requires_grad(false);
    // sum(gelu(y + w)) gives every output element a distinct weight
    let weighted = |t: &mut Tape, y: Var, w: Var| {
        let shifted = t.add(y, w).unwrap();
        let act = t.gelu(shifted);
        t.sum(act)
    };
    let err = max_fd_error(&[a.clone(), b, w.clone()], |t, v| {
        let y = t.batch_matmul(v[0], v[1], false).unwrap();
        weighted(t, y, v[2])
    });
    assert!(err < 1e-6, "fd error {err}");
    let err = max_fd_error(&[a, bt, w], |t, v| {
        let y = t.batch_matmul(v[0], v[1], true).unwrap();
        weighted(t, y, v[2])
    });
    assert!(err < 1e-6, "fd error (trans_b) {err}");
}

#[test]
fn softmax_closed_forms() {
    let mut tape = Tape::new();
    let u = tape.constant(vec![1, 4], vec![0.3; 4]).unwrap();
    let su = tape.softmax(u);
    assert!(tape.value(su).iter().all(|&p| (p - 0.25).abs() < 1e-15));

    let x = tape.constant(vec![1, 2], vec![0.0, 3f64.ln()]).unwrap();
    let sx = tape.softmax(x);
    assert!((tape.value(sx)[0] - 0.25).abs() < 1e-15);
    assert!((tape.value(sx)[1] - 0.75).abs() < 1e-15);

    let shifted = tape.constant(vec![1, 2], vec![1000.0, 1000.0 + 3f64.ln()]).unwrap();
    let ss = tape.softmax(shifted);
    for (a, b) in tape.value(ss).iter().zip(tape.value(sx)) {
        assert!((a - b).abs() < 1e-12);
    }
}

proptest! {
    #[test]
    fn softmax_rows_are_distributions(values in prop::collection::vec(-50.0f64..50.0, 1..40)) {
        let n = values.len();
        let mut tape = Tape::new();
        let x = tape.constant(vec![1, n], values).unwrap();
        let s = tape.softmax(x);
        let row = tape.value(s);
        let total: f64 = row.iter().sum();
        prop_assert!((total - 1.0).abs() < 1e-12);
        prop_assert!(row.iter().all(|&p| p > 0.0 && p <= 1.0));
    }
}

#[test]
fn softmax_gradient() {
    let mut rng = Rng::seed_from_u64(3);
    let x = random_tensor(&[3, 5], &mut rng);
    let w = random_tensor(&[3, 5], &mut rng).with_requires_grad(false);
    let err = max_fd_error(&[x, w], |t, v| {
        let s = t.softmax(v[0]);
        let p = t.add(s, v[1]).unwrap();
        let q = t.gelu(p);
        t.sum(q)
    });
    assert!(err < 1e-6, "fd error {err}");
}

#[test]
fn layer_norm_closed_forms() {
    let mut tape = Tape::new();
    let ones = Tensor::full(&[2], 1.0);
    let zeros = Tensor::zeros(&[2]);
    let g = tape.leaf(&ones);
    let b = tape.leaf(&zeros);
    let c = tape.constant(vec![1, 2], vec![4.2, 4.2]).unwrap();
    let y = tape.layer_norm(c, g, b, LAYER_NORM_EPS).unwrap();
    assert!(tape.value(y).iter().all(|v| v.abs() < 1e-12));

    // [1, 3] has unit variance, so the output is ±1/√(1 + eps)
    let x = tape.constant(vec![1, 2], vec![1.0, 3.0]).unwrap();
    let y = tape.layer_norm(x, g, b, LAYER_NORM_EPS).unwrap();
    let expect = 1.0 / (1.0 + LAYER_NORM_EPS).sqrt();
    assert!((tape.value(y)[0] + expect).abs() < 1e-12);
    assert!((tape.value(y)[1] - expect).abs() < 1e-12);
    let y = tape.layer_norm(x, g, b, 1e-9).unwrap();
    assert!((tape.value(y)[0] + 1.0).abs() < 1e-6);
    assert!((tape.value(y)[1] - 1.0).abs() < 1e-6);
}

#[test]
fn layer_norm_gradient() {
    let mut rng = Rng::seed_from_u64(4);
    let x = random_tensor(&[4, 6], &mut rng);
    let g = random_tensor(&[6], &mut rng);
    let b = random_tensor(&[6], &mut rng);
    let err = max_fd_error(&[x, g, b], |t, v| {
        let y = t.layer_norm(v[0], v[1], v[2], LAYER_NORM_EPS).unwrap();
        let z = t.gelu(y);
        t.sum(z)
    });
    assert!(err < 1e-4, "fd error {err}");
}

#[test]
fn gelu_values_and_gradient() {
    assert_eq!(ops::gelu(0.0), 0.0);
    // 3·Φ(3) with Φ(3) = 0.998650101968370
    assert!((ops::gelu(3.0) - 2.995950305905111).abs() < 1e-12);
    assert!((ops::gelu(3.0) - 2.9960).abs() < 1e-4);
    let mut rng = Rng::seed_from_u64(5);
    let x = random_tensor(&[10], &mut rng);
    let err = max_fd_error(&[x], |t, v| {
        let y = t.gelu(v[0]);
        t.sum(y)
    });
    assert!(err < 1e-6, "fd error {err}");
}

#[test]
fn dropout_identity_cases() {
    let mut rng = Rng::seed_from_u64(6);
    let mut tape = Tape::new();
    let x = tape.constant(vec![5], vec![1., 2., 3., 4., 5.]).unwrap();
    let y = tape.dropout(x, 0.0, &mut rng).unwrap();
    assert_eq!(x, y);
    assert!(tape.dropout(x, 1.0, &mut rng).is_err());
}

#[test]
fn dropout_rate_monte_carlo() {
    let mut rng = Rng::seed_from_u64(7);
    let n = 1_000_000;
    for rate in [0.1, 0.5] {
        let mut tape = Tape::new();
        let x = tape.constant(vec![n], vec![1.0; n]).unwrap();
        let y = tape.dropout(x, rate, &mut rng).unwrap();
        let dropped = tape.value(y).iter().filter(|&&v| v == 0.0).count() as f64 / n as f64;
        assert!((dropped - rate).abs() < 0.003, "rate {rate}: dropped {dropped}");
        let kept = tape.value(y).iter().find(|&&v| v != 0.0).copied().unwrap();
        assert!((kept - 1.0 / (1.0 - rate)).abs() < 1e-15);
    }
}

#[test]
fn cross_entropy_closed_forms() {
    let mut tape = Tape::new();
    let uniform = tape.constant(vec![2, 11], vec![0.7; 22]).unwrap();
    let l = tape.cross_entropy(uniform, &[3, 9]).unwrap();
    assert!((tape.value(l)[0] - 11f64.ln()).abs() < 1e-12);
    assert!((11f64.ln() - 2.3979).abs() < 1e-4);

    let mut confident = vec![0.0; 11];
    confident[4] = 60.0;
    let c = tape.constant(vec![1, 11], confident).unwrap();
    let l = tape.cross_entropy(c, &[4]).unwrap();
    assert!(tape.value(l)[0] < 1e-20);
    assert!(tape.cross_entropy(c, &[11]).is_err());
}

#[test]
fn cross_entropy_gradient() {
    let mut rng = Rng::seed_from_u64(8);
    let logits = random_tensor(&[4, 11], &mut rng);
    let err = max_fd_error(&[logits], |t, v| t.cross_entropy(v[0], &[0, 5, 10, 5]).unwrap());
    assert!(err < 1e-6, "fd error {err}");
}

#[test]
fn backward_of_sum_is_ones_and_accumulates() {
    let mut x = Tensor::new(vec![2, 3], vec![1., 2., 3., 4., 5., 6.])
        .unwrap()
        .with_requires_grad(true);
    let mut tape = Tape::new();
    let vx = tape.leaf(&x);
    let s = tape.sum(vx);
    let grads = tape.backward(s).unwrap();
    grads.accumulate_into(vx, &mut x);
    assert_eq!(x.grad().unwrap(), &[1.0; 6]);
    let again = tape.backward(s).unwrap();
    again.accumulate_into(vx, &mut x);
    assert_eq!(x.grad().unwrap(), &[2.0; 6]);
}

#[test]
fn backward_requires_scalar() {
    let mut tape = Tape::new();
    let x = tape.constant(vec![2], vec![1.0, 2.0]).unwrap();
    assert!(tape.backward(x).is_err());
}

#[test]
fn structural_ops_gradients() {
    let mut rng = Rng::seed_from_u64(9);
    let x = random_tensor(&[2, 3, 4], &mut rng);
    let tok = random_tensor(&[4], &mut rng);
    let pos = random_tensor(&[4, 4], &mut rng);
    let w = random_tensor(&[4, 6], &mut rng);
    let b = random_tensor(&[6], &mut rng);
    let err = max_fd_error(&[x, tok, pos, w, b], |t, v| {
        let z = t.prepend_token(v[0], v[1]).unwrap();
        let z = t.add_broadcast(z, v[2]).unwrap();
        let y = t.linear(z, v[3], Some(v[4])).unwrap();
        let h = t.split_heads(y, 3).unwrap();
        let h = t.gelu(h);
        let m = t.merge_heads(h, 3).unwrap();
        let c = t.select_token(m, 1).unwrap();
        let c = t.scale(c, 0.5);
        let c = t.gelu(c);
        t.sum(c)
    });
    assert!(err < 1e-6, "fd error {err}");
}

#[test]
fn split_merge_round_trip() {
    let mut tape = Tape::new();
    let data: Vec<f64> = (0..2 * 3 * 8).map(|v| v as f64).collect();
    let x = tape.constant(vec![2, 3, 8], data.clone()).unwrap();
    let h = tape.split_heads(x, 4).unwrap();
    assert_eq!(tape.shape(h), &[8, 3, 2]);
    let m = tape.merge_heads(h, 4).unwrap();
    assert_eq!(tape.value(m), data.as_slice());
}

/// Pre-norm multi-head attention block assembled from primitives, checked
/// end-to-end against finite differences.
#[test]
fn composite_attention_block_gradient() {
    let mut rng = Rng::seed_from_u64(10);
    let (seq, dim, heads, head_dim) = (5, 8, 2, 3);
    let inner = heads * head_dim;
    let inputs = vec![
        random_tensor(&[2, seq, dim], &mut rng),
        random_tensor(&[dim], &mut rng),
        random_tensor(&[dim], &mut rng),
        random_tensor(&[dim, inner], &mut rng),
        random_tensor(&[inner], &mut rng),
        random_tensor(&[dim, inner], &mut rng),
        random_tensor(&[inner], &mut rng),
        random_tensor(&[dim, inner], &mut rng),
        random_tensor(&[inner], &mut rng),
        random_tensor(&[inner, dim], &mut rng),
        random_tensor(&[dim], &mut rng),
    ];
    let err = max_fd_error(&inputs, |t, v| {
        let n = t.layer_norm(v[0], v[1], v[2], LAYER_NORM_EPS).unwrap();
        let q = t.linear(n, v[3], Some(v[4])).unwrap();
        let k = t.linear(n, v[5], Some(v[6])).unwrap();
        let val = t.linear(n, v[7], Some(v[8])).unwrap();
        let (q, k, val) = (
            t.split_heads(q, heads).unwrap(),
            t.split_heads(k, heads).unwrap(),
            t.split_heads(val, heads).unwrap(),
        );
        let s = t.batch_matmul(q, k, true).unwrap();
        let s = t.scale(s, 1.0 / (head_dim as f64).sqrt());
        let a = t.softmax(s);
        let o = t.batch_matmul(a, val, false).unwrap();
        let o = t.merge_heads(o, heads).unwrap();
        let o = t.linear(o, v[9], Some(v[10])).unwrap();
        let z = t.add(o, v[0]).unwrap();
        let z = t.gelu(z);
        t.sum(z)
    });
    assert!(err < 1e-4, "fd error {err}");
}
