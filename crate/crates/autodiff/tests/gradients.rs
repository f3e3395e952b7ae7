//! Analytic gradients of every op against central finite differences.

use jn_autodiff::fdcheck::{op_suite, STEP};
use jn_autodiff::{Tape, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const TOL: f64 = 1e-6;

#[test]
fn every_op_matches_finite_differences() {
    let suite = op_suite(100);
    assert!(suite.len() >= 30);
    for c in &suite {
        assert!(c.max_rel_error < TOL, "{}: max relative error {:e}", c.name, c.max_rel_error);
    }
}

#[test]
fn sigmoid_slope_matches_finite_difference() {
    let f = jn_autodiff::sigmoid;
    let fd = (f(STEP) - f(-STEP)) / (2.0 * STEP);
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::scalar(0.0), true);
    let y = tape.sigmoid(x);
    tape.backward(y).unwrap();
    let an = tape.grad(x).unwrap().item();
    assert!((an - 0.25).abs() < 1e-15);
    assert!((an - fd).abs() < 1e-9);
}

fn build_and_grad(seed: u64) -> Vec<u64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let a = Tensor::from_fn(vec![4, 5], |_| rng.random_range(-1.0..1.0));
    let b = Tensor::from_fn(vec![5, 3], |_| rng.random_range(-1.0..1.0));
    let mut tape = Tape::new();
    let va = tape.leaf(a, true);
    let vb = tape.leaf(b, true);
    let m = tape.matmul(va, vb).unwrap();
    let s = tape.softmax(m, 1).unwrap();
    let l = tape.log(s);
    let loss = tape.mean_all(l);
    tape.backward(loss).unwrap();
    let mut bits: Vec<u64> = tape.grad(va).unwrap().data().iter().map(|x| x.to_bits()).collect();
    bits.extend(tape.grad(vb).unwrap().data().iter().map(|x| x.to_bits()));
    bits
}

#[test]
fn independent_graphs_give_bitwise_identical_gradients() {
    assert_eq!(build_and_grad(9), build_and_grad(9));
}

proptest! {
    #[test]
    fn softmax_is_a_distribution(vals in proptest::collection::vec(-30.0f64..30.0, 1..24), rows in 1usize..4) {
        let cols = vals.len();
        let data: Vec<f64> = (0..rows).flat_map(|r| vals.iter().map(move |v| v + r as f64)).collect();
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(vec![rows, cols], data).unwrap());
        let y = tape.softmax(x, 1).unwrap();
        for r in 0..rows {
            let row = &tape.data(y)[r * cols..(r + 1) * cols];
            prop_assert!(row.iter().all(|&p| p >= 0.0));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn matmul_is_linear_in_each_argument(a in proptest::collection::vec(-3.0f64..3.0, 6), b in proptest::collection::vec(-3.0f64..3.0, 6), s in -4.0f64..4.0) {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(vec![2, 3], a).unwrap());
        let y = tape.constant(Tensor::new(vec![3, 2], b).unwrap());
        let xs = tape.mul_scalar(x, s);
        let lhs = tape.matmul(xs, y).unwrap();
        let p = tape.matmul(x, y).unwrap();
        let rhs = tape.mul_scalar(p, s);
        for (l, r) in tape.data(lhs).iter().zip(tape.data(rhs)) {
            prop_assert!((l - r).abs() <= 1e-12 * (1.0 + r.abs()));
        }
    }
}
