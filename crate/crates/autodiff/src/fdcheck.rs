//! Analytic gradients of every op against central finite differences.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::{Tape, Tensor, Var};

pub const STEP: f64 = 1e-5;

pub type Build = dyn Fn(&mut Tape, &[Var]) -> Var;

type Case = Box<dyn Fn(&mut ChaCha8Rng) -> (Vec<Tensor>, Box<Build>)>;

fn eval(inputs: &[Tensor], weights: &[f64], build: &Build) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    let out = build(&mut tape, &vars);
    tape.data(out).iter().zip(weights).map(|(a, b)| a * b).sum()
}

fn analytic(inputs: &[Tensor], weights: &[f64], build: &Build) -> Vec<Tensor> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let out = build(&mut tape, &vars);
    let w = tape.constant(Tensor::new(tape.shape(out).to_vec(), weights.to_vec()).expect("weights match output"));
    let prod = tape.mul(out, w).expect("equal shapes");
    let loss = tape.sum_all(prod);
    tape.backward(loss).expect("scalar loss");
    vars.iter()
        .map(|&v| tape.grad(v).unwrap_or_else(|| Tensor::zeros(tape.shape(v).to_vec())))
        .collect()
}

/// Max over input coordinates of `|analytic - numeric| / max(1, |analytic|)` for the loss
/// `Σ w ⊙ build(inputs)` with random weights `w`.
pub fn max_rel_error(inputs: &[Tensor], rng: &mut impl Rng, build: &Build) -> f64 {
    let n_out = {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
        let out = build(&mut tape, &vars);
        tape.value(out).numel()
    };
    let weights: Vec<f64> = (0..n_out).map(|_| rng.random_range(-1.0..1.0)).collect();
    let grads = analytic(inputs, &weights, build);
    let mut worst = 0.0f64;
    for (k, input) in inputs.iter().enumerate() {
        for j in 0..input.numel() {
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[j] += STEP;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[j] -= STEP;
            let fd = (eval(&plus, &weights, build) - eval(&minus, &weights, build)) / (2.0 * STEP);
            let an = grads[k].data()[j];
            worst = worst.max((an - fd).abs() / an.abs().max(1.0));
        }
    }
    worst
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(lo..hi))
}

/// Magnitudes in [0.05, 2] with random sign, so kinks at zero stay far from the step.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |_| {
        let m = rng.random_range(0.05..2.0);
        if rng.random_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

fn small_shape(rng: &mut ChaCha8Rng, rank: usize) -> Vec<usize> {
    (0..rank).map(|_| rng.random_range(1..=4)).collect()
}

fn random_rank(rng: &mut ChaCha8Rng) -> Vec<usize> {
    let rank = rng.random_range(1..4);
    small_shape(rng, rank)
}

fn unary(gen: fn(&mut ChaCha8Rng, &[usize]) -> Tensor, f: fn(&mut Tape, Var) -> Var) -> Case {
    Box::new(move |rng| {
        let shape = random_rank(rng);
        (vec![gen(rng, &shape)], Box::new(move |t: &mut Tape, v: &[Var]| f(t, v[0])))
    })
}

fn binary(f: fn(&mut Tape, Var, Var) -> Var, positive_rhs: bool) -> Case {
    Box::new(move |rng| {
        let shape = random_rank(rng);
        let a = uniform(rng, &shape, -2.0, 2.0);
        let b = if positive_rhs {
            away_from_zero(rng, &shape).map(|x| x.signum() * (x.abs() + 0.5))
        } else {
            uniform(rng, &shape, -2.0, 2.0)
        };
        (vec![a, b], Box::new(move |t: &mut Tape, v: &[Var]| f(t, v[0], v[1])))
    })
}

/// Distinct values spaced far beyond the step, so reductions by max have a stable argmax.
fn distinct(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    let mut vals: Vec<f64> = (0..n).map(|j| j as f64 * 0.1).collect();
    for j in (1..n).rev() {
        vals.swap(j, rng.random_range(0..=j));
    }
    Tensor::new(shape.to_vec(), vals).expect("length matches shape")
}

fn reduction(f: fn(&mut Tape, Var, usize) -> Var) -> Case {
    Box::new(move |rng| {
        let shape = random_rank(rng);
        let axis = rng.random_range(0..shape.len());
        (vec![distinct(rng, &shape)], Box::new(move |t: &mut Tape, v: &[Var]| f(t, v[0], axis)))
    })
}

fn cases() -> Vec<(&'static str, Case)> {
    vec![
        ("matmul", Box::new(|rng: &mut ChaCha8Rng| {
            let (m, k, n) = (rng.random_range(1..5), rng.random_range(1..5), rng.random_range(1..5));
            let a = uniform(rng, &[m, k], -1.0, 1.0);
            let b = uniform(rng, &[k, n], -1.0, 1.0);
            (vec![a, b], Box::new(|t: &mut Tape, v: &[Var]| t.matmul(v[0], v[1]).unwrap()) as Box<Build>)
        })),
        ("batched matmul", Box::new(|rng: &mut ChaCha8Rng| {
            let (bt, m, k, n) = (rng.random_range(1..4), rng.random_range(1..4), rng.random_range(1..4), rng.random_range(1..4));
            let a = uniform(rng, &[bt, m, k], -1.0, 1.0);
            let b = uniform(rng, &[bt, k, n], -1.0, 1.0);
            (vec![a, b], Box::new(|t: &mut Tape, v: &[Var]| t.matmul(v[0], v[1]).unwrap()) as Box<Build>)
        })),
        ("add", binary(|t, a, b| t.add(a, b).unwrap(), false)),
        ("sub", binary(|t, a, b| t.sub(a, b).unwrap(), false)),
        ("mul", binary(|t, a, b| t.mul(a, b).unwrap(), false)),
        ("div", binary(|t, a, b| t.div(a, b).unwrap(), true)),
        ("mul self", unary(|r, s| uniform(r, s, -2.0, 2.0), |t, v| t.mul(v, v).unwrap())),
        ("add_scalar", unary(|r, s| uniform(r, s, -2.0, 2.0), |t, v| t.add_scalar(v, 0.7))),
        ("mul_scalar", unary(|r, s| uniform(r, s, -2.0, 2.0), |t, v| t.mul_scalar(v, -1.3))),
        ("rsub_scalar", unary(|r, s| uniform(r, s, -2.0, 2.0), |t, v| t.rsub_scalar(0.4, v))),
        ("neg", unary(|r, s| uniform(r, s, -2.0, 2.0), |t, v| t.neg(v))),
        ("exp", unary(|r, s| uniform(r, s, -2.0, 2.0), |t, v| t.exp(v))),
        ("log", unary(|r, s| uniform(r, s, 0.1, 3.0), |t, v| t.log(v))),
        ("sigmoid", unary(|r, s| uniform(r, s, -4.0, 4.0), |t, v| t.sigmoid(v))),
        ("relu", unary(away_from_zero, |t, v| t.relu(v))),
        ("gelu", unary(|r, s| uniform(r, s, -3.0, 3.0), |t, v| t.gelu(v))),
        ("abs", unary(away_from_zero, |t, v| t.abs(v))),
        ("powf", unary(|r, s| uniform(r, s, 0.1, 2.0), |t, v| t.powf(v, 2.5))),
        ("clamp", unary(
            // at least 0.05 away from the bounds at ±1
            |r, s| Tensor::from_fn(s.to_vec(), |_| {
                let x: f64 = r.random_range(-2.0..2.0);
                if (x.abs() - 1.0).abs() < 0.05 { x * 0.5 } else { x }
            }),
            |t, v| t.clamp(v, -1.0, 1.0),
        )),
        ("softmax", Box::new(|rng: &mut ChaCha8Rng| {
            let shape = random_rank(rng);
            let axis = rng.random_range(0..shape.len());
            let x = uniform(rng, &shape, -3.0, 3.0);
            (vec![x], Box::new(move |t: &mut Tape, v: &[Var]| t.softmax(v[0], axis).unwrap()) as Box<Build>)
        })),
        ("layernorm", Box::new(|rng: &mut ChaCha8Rng| {
            let (rows, d) = (rng.random_range(1..4), rng.random_range(2..6));
            let x = uniform(rng, &[rows, d], -2.0, 2.0);
            let g = uniform(rng, &[d], 0.5, 1.5);
            let b = uniform(rng, &[d], -0.5, 0.5);
            (vec![x, g, b], Box::new(|t: &mut Tape, v: &[Var]| t.layernorm(v[0], v[1], v[2], 1e-5).unwrap()) as Box<Build>)
        })),
        ("reshape", Box::new(|rng: &mut ChaCha8Rng| {
            let x = uniform(rng, &[2, 6], -1.0, 1.0);
            (vec![x], Box::new(|t: &mut Tape, v: &[Var]| t.reshape(v[0], &[3, 4]).unwrap()) as Box<Build>)
        })),
        ("permute", Box::new(|rng: &mut ChaCha8Rng| {
            let shape = small_shape(rng, 3);
            let x = uniform(rng, &shape, -1.0, 1.0);
            (vec![x], Box::new(|t: &mut Tape, v: &[Var]| t.permute(v[0], &[2, 0, 1]).unwrap()) as Box<Build>)
        })),
        ("transpose", Box::new(|rng: &mut ChaCha8Rng| {
            let rank = rng.random_range(2..4);
            let shape = small_shape(rng, rank);
            let x = uniform(rng, &shape, -1.0, 1.0);
            (vec![x], Box::new(|t: &mut Tape, v: &[Var]| t.transpose(v[0]).unwrap()) as Box<Build>)
        })),
        ("broadcast", Box::new(|rng: &mut ChaCha8Rng| {
            let (d, rows) = (rng.random_range(1..5), rng.random_range(1..5));
            let x = uniform(rng, &[d], -1.0, 1.0);
            (vec![x], Box::new(move |t: &mut Tape, v: &[Var]| t.broadcast_to(v[0], &[rows, 2, d]).unwrap()) as Box<Build>)
        })),
        ("broadcast middle", Box::new(|rng: &mut ChaCha8Rng| {
            let x = uniform(rng, &[3, 1], -1.0, 1.0);
            (vec![x], Box::new(|t: &mut Tape, v: &[Var]| t.broadcast_to(v[0], &[3, 4]).unwrap()) as Box<Build>)
        })),
        ("concat", Box::new(|rng: &mut ChaCha8Rng| {
            let axis = rng.random_range(0..2);
            let mut s1 = small_shape(rng, 2);
            let mut s2 = s1.clone();
            s2[axis] = rng.random_range(1..4);
            s1[axis] = rng.random_range(1..4);
            let a = uniform(rng, &s1, -1.0, 1.0);
            let b = uniform(rng, &s2, -1.0, 1.0);
            (vec![a, b], Box::new(move |t: &mut Tape, v: &[Var]| t.concat(&[v[0], v[1], v[0]], axis).unwrap()) as Box<Build>)
        })),
        ("slice", Box::new(|rng: &mut ChaCha8Rng| {
            let shape = small_shape(rng, 3);
            let axis = rng.random_range(0..3);
            let start = rng.random_range(0..shape[axis]);
            let end = rng.random_range(start + 1..=shape[axis]);
            let x = uniform(rng, &shape, -1.0, 1.0);
            (vec![x], Box::new(move |t: &mut Tape, v: &[Var]| t.slice(v[0], axis, start, end).unwrap()) as Box<Build>)
        })),
        ("gather", Box::new(|rng: &mut ChaCha8Rng| {
            let x = uniform(rng, &[2, 3], -1.0, 1.0);
            let idx: Vec<usize> = (0..5).map(|_| rng.random_range(0..6)).collect();
            (vec![x], Box::new(move |t: &mut Tape, v: &[Var]| t.gather(v[0], &idx).unwrap()) as Box<Build>)
        })),
        ("sum", reduction(|t, v, a| t.sum(v, a).unwrap())),
        ("mean", reduction(|t, v, a| t.mean(v, a).unwrap())),
        ("max", reduction(|t, v, a| t.max(v, a).unwrap())),
        ("sum_all", unary(|r, s| uniform(r, s, -1.0, 1.0), |t, v| t.sum_all(v))),
        ("mean_all", unary(|r, s| uniform(r, s, -1.0, 1.0), |t, v| t.mean_all(v))),
        ("attention chain", Box::new(|rng: &mut ChaCha8Rng| {
            let q = uniform(rng, &[2, 3, 4], -1.0, 1.0);
            let k = uniform(rng, &[2, 3, 4], -1.0, 1.0);
            (vec![q, k], Box::new(|t: &mut Tape, v: &[Var]| {
                let kt = t.transpose(v[1]).unwrap();
                let s = t.matmul(v[0], kt).unwrap();
                let s = t.mul_scalar(s, 0.5);
                let p = t.softmax(s, 2).unwrap();
                let o = t.matmul(p, v[1]).unwrap();
                t.gelu(o)
            }) as Box<Build>)
        })),
    ]
}

#[derive(Clone, Debug, PartialEq)]
pub struct OpCheck {
    pub name: &'static str,
    pub trials: usize,
    pub max_rel_error: f64,
}

/// `trials` random cases per op, each op with its own fixed seed.
pub fn op_suite(trials: usize) -> Vec<OpCheck> {
    cases()
        .into_iter()
        .enumerate()
        .map(|(i, (name, case))| {
            let mut rng = ChaCha8Rng::seed_from_u64(1000 + i as u64);
            let mut worst = 0.0f64;
            for _ in 0..trials {
                let (inputs, build) = case(&mut rng);
                worst = worst.max(max_rel_error(&inputs, &mut rng, build.as_ref()));
            }
            OpCheck {
                name,
                trials,
                max_rel_error: worst,
            }
        })
        .collect()
}
