//! Central finite-difference oracle for the tape's backward rules.
//!
//! Every case builds a small graph from freshly perturbed inputs, projects the
//! output onto fixed random weights and compares the tape gradient with
//! the five-point central difference on 50 randomly chosen coordinates.

#![allow(dead_code)]

use addlab_core::tensor::{AttentionMask, Real, Tape, Tensor, Var};
use addlab_core::Rng;

pub const COORDS: usize = 50;

pub struct CaseResult {
    pub name: &'static str,
    pub max_rel_err: f64,
    pub checked: usize,
}

type Build<T> = Box<dyn Fn(&mut Tape<T>, &[Var]) -> Var>;

pub struct Case<T: Real> {
    pub name: &'static str,
    pub inputs: Vec<Tensor<T>>,
    pub build: Build<T>,
}

fn random_tensor<T: Real>(rng: &mut Rng, shape: &[usize]) -> Tensor<T> {
    let n: usize = shape.iter().product();
    // magnitudes bounded away from zero keep kinks (relu) out of the stencil
    let data = (0..n)
        .map(|_| {
            let mag = rng.uniform(0.1, 1.0);
            T::from_f64(if rng.below(2) == 0 { mag } else { -mag })
        })
        .collect();
    Tensor::new(shape, data).unwrap()
}

fn project<T: Real>(tape: &Tape<T>, out: Var, weights: &[f64]) -> f64 {
    tape.data(out).iter().zip(weights).map(|(&y, &w)| y.to_f64() * w).sum()
}

/// Relative error with a floor on the denominator so near-zero gradients
/// are compared absolutely.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-2)
}

pub fn check<T: Real>(case: &Case<T>, eps: f64, seed: u64) -> CaseResult {
    let mut rng = Rng::seed(seed);
    let mut tape = Tape::<T>::new();
    let vars: Vec<Var> = case.inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let out = (case.build)(&mut tape, &vars);
    let out_len = tape.value(out).len();
    let weights: Vec<f64> = (0..out_len).map(|_| rng.uniform(-1.0, 1.0)).collect();
    let w = tape.constant(Tensor::new(tape.shape(out), weights.iter().map(|&x| T::from_f64(x)).collect()).unwrap());
    let prod = tape.mul(out, w).unwrap();
    let loss = tape.sum(prod);
    let grads = tape.backward(loss).unwrap();

    let eval = |inputs: &[Tensor<T>]| -> f64 {
        let mut tape = Tape::<T>::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
        let out = (case.build)(&mut tape, &vars);
        project(&tape, out, &weights)
    };

    let total: usize = case.inputs.iter().map(|t| t.len()).sum();
    let mut max_rel = 0.0f64;
    let mut checked = 0;
    for _ in 0..COORDS {
        let mut flat = rng.below(total as u64) as usize;
        let mut which = 0;
        while flat >= case.inputs[which].len() {
            flat -= case.inputs[which].len();
            which += 1;
        }
        let analytic = grads.get(vars[which]).map(|g| g[flat].to_f64()).unwrap_or(0.0);
        let shifted = |delta: f64| {
            let mut inputs = case.inputs.clone();
            let base = inputs[which].data()[flat].to_f64();
            inputs[which].data_mut()[flat] = T::from_f64(base + delta);
            eval(&inputs)
        };
        // five-point stencil, truncation error O(eps^4)
        let numeric = (-shifted(2.0 * eps) + 8.0 * shifted(eps) - 8.0 * shifted(-eps) + shifted(-2.0 * eps)) / (12.0 * eps);
        max_rel = max_rel.max(rel_err(analytic, numeric));
        checked += 1;
    }
    CaseResult { name: case.name, max_rel_err: max_rel, checked }
}

/// One case per differentiable operation plus a two-layer perceptron.
pub fn op_cases<T: Real>(seed: u64) -> Vec<Case<T>> {
    let mut rng = Rng::seed(seed);
    let mut r = |shape: &[usize]| random_tensor::<T>(&mut rng, shape);
    let mut cases: Vec<Case<T>> = Vec::new();
    macro_rules! case {
        ($name:expr, [$($shape:expr),*], $f:expr) => {
            cases.push(Case { name: $name, inputs: vec![$(r(&$shape)),*], build: Box::new($f) });
        };
    }
    case!("matmul", [[3, 4, 5], [5, 6]], |t, v| t.matmul(v[0], v[1]).unwrap());
    case!("add_broadcast", [[4, 5], [5]], |t, v| t.add(v[0], v[1]).unwrap());
    case!("add_general_broadcast", [[4, 1], [1, 5]], |t, v| t.add(v[0], v[1]).unwrap());
    case!("sub", [[3, 4], [3, 4]], |t, v| t.sub(v[0], v[1]).unwrap());
    case!("mul", [[3, 4], [3, 4]], |t, v| t.mul(v[0], v[1]).unwrap());
    case!("mul_broadcast", [[3, 4], [3, 1]], |t, v| t.mul(v[0], v[1]).unwrap());
    case!("scale", [[7]], |t, v| t.scale(v[0], -1.7));
    case!("embedding", [[6, 4]], |t, v| t.embedding(v[0], &[0, 3, 3, 5, 1]).unwrap());
    case!("relu", [[20]], |t, v| t.relu(v[0]));
    case!("tanh", [[20]], |t, v| t.tanh(v[0]));
    case!("sigmoid", [[20]], |t, v| t.sigmoid(v[0]));
    case!("softmax_last", [[3, 5]], |t, v| t.softmax(v[0], 1).unwrap());
    case!("softmax_inner_axis", [[2, 4, 3]], |t, v| t.softmax(v[0], 1).unwrap());
    case!("layer_norm", [[4, 6], [6], [6]], |t, v| t.layer_norm(v[0], v[1], v[2], 1e-5).unwrap());
    case!("dropout", [[30]], |t, v| {
        let mut rng = Rng::seed(99);
        t.dropout(v[0], 0.3, true, &mut rng).unwrap()
    });
    case!("concat", [[2, 3, 2], [2, 1, 2]], |t, v| t.concat(&[v[0], v[1]], 1).unwrap());
    case!("slice", [[3, 5]], |t, v| t.slice(v[0], 1, 1, 4).unwrap());
    case!("transpose", [[2, 3, 4]], |t, v| t.transpose(v[0], &[2, 0, 1]).unwrap());
    case!("reshape", [[2, 6]], |t, v| {
        let y = t.reshape(v[0], &[3, 4]).unwrap();
        t.tanh(y)
    });
    case!("attention_cross_padded", [[2, 3, 8], [2, 4, 8], [2, 4, 8]], |t, v| {
        let mask = AttentionMask {
            causal: false,
            key_padding: Some(vec![false, false, false, true, false, false, true, true]),
        };
        t.attention(v[0], v[1], v[2], 2, &mask).unwrap()
    });
    case!("attention_causal", [[2, 4, 8], [2, 4, 8], [2, 4, 8]], |t, v| {
        t.attention(v[0], v[1], v[2], 4, &AttentionMask { causal: true, key_padding: None }).unwrap()
    });
    case!("cross_entropy", [[5, 6]], |t, v| t.cross_entropy(v[0], &[1, 0, 5, 0, 2], 0).unwrap());
    case!("sum", [[9]], |t, v| t.sum(v[0]));
    case!("mean", [[9]], |t, v| t.mean(v[0]));
    case!("mlp_two_layer", [[4, 5], [5, 7], [7], [7, 3], [3]], |t, v| {
        let h = t.linear(v[0], v[1], v[2]).unwrap();
        let h = t.tanh(h);
        let o = t.linear(h, v[3], v[4]).unwrap();
        t.cross_entropy(o, &[0, 2, 1, 2], usize::MAX).unwrap()
    });
    cases
}

pub fn run_all<T: Real>(eps: f64, seed: u64) -> Vec<CaseResult> {
    op_cases::<T>(seed).iter().enumerate().map(|(i, c)| check(c, eps, seed + i as u64 + 1)).collect()
}
