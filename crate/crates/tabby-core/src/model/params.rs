//! Parameter tensors with paired gradient buffers, plus the visitor used by
//! the optimizer, checkpointing, and gradient checks.

use ndarray::{Array1, Array2};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::scalar::Scalar;

#[derive(Debug, Clone, PartialEq)]
pub struct Param2<F> {
    pub v: Array2<F>,
    pub g: Array2<F>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param1<F> {
    pub v: Array1<F>,
    pub g: Array1<F>,
}

impl<F: Scalar> Param2<F> {
    pub fn randn(rows: usize, cols: usize, std: f64, rng: &mut ChaCha8Rng) -> Self {
        let data: Vec<F> = (0..rows * cols)
            .map(|_| F::of_f64(std * gauss(rng)))
            .collect();
        Param2 {
            v: Array2::from_shape_vec((rows, cols), data).expect("shape matches"),
            g: Array2::zeros((rows, cols)),
        }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Param2 {
            v: Array2::zeros((rows, cols)),
            g: Array2::zeros((rows, cols)),
        }
    }
}

impl<F: Scalar> Param1<F> {
    pub fn zeros(n: usize) -> Self {
        Param1 {
            v: Array1::zeros(n),
            g: Array1::zeros(n),
        }
    }

    pub fn ones(n: usize) -> Self {
        Param1 {
            v: Array1::from_elem(n, F::one()),
            g: Array1::zeros(n),
        }
    }
}

/// Standard normal deviate (Box-Muller), deterministic given the rng.
fn gauss(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.random::<f64>().max(f64::MIN_POSITIVE);
    let u2: f64 = rng.random();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Uniform read-only view over 1-D and 2-D parameters.
pub enum ParamRef<'a, F> {
    M(&'a Param2<F>),
    V(&'a Param1<F>),
}

impl<F: Scalar> ParamRef<'_, F> {
    pub fn shape(&self) -> Vec<usize> {
        match self {
            ParamRef::M(p) => p.v.shape().to_vec(),
            ParamRef::V(p) => p.v.shape().to_vec(),
        }
    }

    pub fn len(&self) -> usize {
        match self {
            ParamRef::M(p) => p.v.len(),
            ParamRef::V(p) => p.v.len(),
        }
    }

    pub fn values(&self) -> &[F] {
        match self {
            ParamRef::M(p) => p.v.as_slice().expect("standard layout"),
            ParamRef::V(p) => p.v.as_slice().expect("standard layout"),
        }
    }

    pub fn grads(&self) -> &[F] {
        match self {
            ParamRef::M(p) => p.g.as_slice().expect("standard layout"),
            ParamRef::V(p) => p.g.as_slice().expect("standard layout"),
        }
    }
}

/// Uniform mutable view over 1-D and 2-D parameters.
pub enum ParamMut<'a, F> {
    M(&'a mut Param2<F>),
    V(&'a mut Param1<F>),
}

impl<F: Scalar> ParamMut<'_, F> {
    pub fn shape(&self) -> Vec<usize> {
        match self {
            ParamMut::M(p) => p.v.shape().to_vec(),
            ParamMut::V(p) => p.v.shape().to_vec(),
        }
    }

    pub fn len(&self) -> usize {
        match self {
            ParamMut::M(p) => p.v.len(),
            ParamMut::V(p) => p.v.len(),
        }
    }

    pub fn values(&self) -> &[F] {
        match self {
            ParamMut::M(p) => p.v.as_slice().expect("standard layout"),
            ParamMut::V(p) => p.v.as_slice().expect("standard layout"),
        }
    }

    pub fn values_mut(&mut self) -> &mut [F] {
        match self {
            ParamMut::M(p) => p.v.as_slice_mut().expect("standard layout"),
            ParamMut::V(p) => p.v.as_slice_mut().expect("standard layout"),
        }
    }

    pub fn grads(&self) -> &[F] {
        match self {
            ParamMut::M(p) => p.g.as_slice().expect("standard layout"),
            ParamMut::V(p) => p.g.as_slice().expect("standard layout"),
        }
    }

    pub fn zero_grad(&mut self) {
        match self {
            ParamMut::M(p) => p.g.fill(F::zero()),
            ParamMut::V(p) => p.g.fill(F::zero()),
        }
    }
}
