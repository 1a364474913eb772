//! Weight initialisation. Dense and recurrent weights are uniform in
//! `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`; embeddings are normal with standard
//! deviation `dim^-1/2`.

use alloc::vec::Vec;

use crate::rng::Rng;
use crate::tensor::{ParamId, ParamStore, Tensor};

pub(crate) fn uniform(store: &mut ParamStore<f32>, rng: &mut Rng, name: &str, shape: &[usize], fan_in: usize) -> ParamId {
    let bound = 1.0 / libm::sqrt(fan_in as f64);
    let n: usize = shape.iter().product();
    let data: Vec<f32> = (0..n).map(|_| rng.uniform(-bound, bound) as f32).collect();
    store.add(name, Tensor::new(shape, data).expect("shape matches"))
}

pub(crate) fn embedding(store: &mut ParamStore<f32>, rng: &mut Rng, name: &str, rows: usize, dim: usize) -> ParamId {
    let std = 1.0 / libm::sqrt(dim as f64);
    let data: Vec<f32> = (0..rows * dim).map(|_| (rng.normal() * std) as f32).collect();
    store.add(name, Tensor::new(&[rows, dim], data).expect("shape matches"))
}

pub(crate) fn constant(store: &mut ParamStore<f32>, name: &str, shape: &[usize], value: f32) -> ParamId {
    store.add(name, Tensor::full(shape, value))
}

/// `[in, out]` weight plus `[out]` bias.
pub(crate) fn linear(store: &mut ParamStore<f32>, rng: &mut Rng, name: &str, fan_in: usize, fan_out: usize) -> (ParamId, ParamId) {
    let w = uniform(store, rng, &alloc::format!("{name}.weight"), &[fan_in, fan_out], fan_in);
    let b = uniform(store, rng, &alloc::format!("{name}.bias"), &[fan_out], fan_in);
    (w, b)
}
