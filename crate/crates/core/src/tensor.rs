//! Dense row-major `f32` tensors.
//!
//! A [`Tensor`] is the storage type for every learnable weight. Computation
//! happens in a [`Graph`](crate::autodiff::Graph), which may run in `f32` or
//! `f64`; tensors are converted on entry and the gradients written back here.

use std::fmt::Debug;

use num_traits::{Float, FromPrimitive};
use rand::Rng;

use crate::error::{Error, Result};

/// Numeric type a graph can compute in.
pub trait Scalar: Float + FromPrimitive + Default + Debug + Send + Sync + 'static {
    fn of_f32(v: f32) -> Self;
    fn as_f32(self) -> f32;
    fn as_f64(self) -> f64;
    fn of_f64(v: f64) -> Self;
}

impl Scalar for f32 {
    fn of_f32(v: f32) -> Self {
        v
    }
    fn as_f32(self) -> f32 {
        self
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
    fn of_f64(v: f64) -> Self {
        v as f32
    }
}

impl Scalar for f64 {
    fn of_f32(v: f32) -> Self {
        v as f64
    }
    fn as_f32(self) -> f32 {
        self as f32
    }
    fn as_f64(self) -> f64 {
        self
    }
    fn of_f64(v: f64) -> Self {
        v
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub name: String,
    shape: Vec<usize>,
    data: Vec<f32>,
    pub requires_grad: bool,
    pub grad: Option<Vec<f32>>,
}

impl Tensor {
    pub fn new(name: impl Into<String>, shape: &[usize], data: Vec<f32>) -> Result<Self> {
        check_shape(shape)?;
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::dim("tensor", shape, &[data.len()]));
        }
        Ok(Tensor {
            name: name.into(),
            shape: shape.to_vec(),
            data,
            requires_grad: true,
            grad: None,
        })
    }

    pub fn zeros(name: impl Into<String>, shape: &[usize]) -> Self {
        Self::filled(name, shape, 0.0)
    }

    pub fn filled(name: impl Into<String>, shape: &[usize], value: f32) -> Self {
        let numel = shape.iter().product();
        Tensor {
            name: name.into(),
            shape: shape.to_vec(),
            data: vec![value; numel],
            requires_grad: true,
            grad: None,
        }
    }

    /// Glorot/Xavier uniform: U(-a, a) with a = sqrt(6 / (fan_in + fan_out)).
    pub fn glorot<R: Rng>(name: impl Into<String>, fan_in: usize, fan_out: usize, rng: &mut R) -> Self {
        let a = (6.0 / (fan_in + fan_out) as f64).sqrt() as f32;
        let data = (0..fan_in * fan_out).map(|_| rng.gen_range(-a..a)).collect();
        Tensor {
            name: name.into(),
            shape: vec![fan_in, fan_out],
            data,
            requires_grad: true,
            grad: None,
        }
    }

    /// Normal(0, std) via Box-Muller, so no extra distribution crate is needed.
    pub fn normal<R: Rng>(name: impl Into<String>, shape: &[usize], std: f32, rng: &mut R) -> Self {
        let numel: usize = shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        while data.len() < numel {
            let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
            let u2: f64 = rng.gen();
            let r = (-2.0 * u1.ln()).sqrt();
            let theta = 2.0 * std::f64::consts::PI * u2;
            data.push((r * theta.cos()) as f32 * std);
            if data.len() < numel {
                data.push((r * theta.sin()) as f32 * std);
            }
        }
        Tensor {
            name: name.into(),
            shape: shape.to_vec(),
            data,
            requires_grad: true,
            grad: None,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn zero_grad(&mut self) {
        match &mut self.grad {
            Some(g) => g.iter_mut().for_each(|v| *v = 0.0),
            None => self.grad = Some(vec![0.0; self.data.len()]),
        }
    }

    pub fn accumulate_grad<S: Scalar>(&mut self, g: &[S]) {
        let n = self.data.len();
        let buf = self.grad.get_or_insert_with(|| vec![0.0; n]);
        for (b, v) in buf.iter_mut().zip(g) {
            *b += v.as_f32();
        }
    }

    /// Little-endian bytes of the data, the form weights are checksummed and stored in.
    pub fn le_bytes(&self) -> impl Iterator<Item = u8> + '_ {
        self.data.iter().flat_map(|v| v.to_le_bytes())
    }
}

fn check_shape(shape: &[usize]) -> Result<()> {
    if shape.is_empty() || shape.iter().any(|&d| d == 0) {
        return Err(Error::Config(format!("shape {shape:?} must have positive dims")));
    }
    Ok(())
}

/// Numerically stable softmax along `axis` of a row-major array.
pub fn softmax(x: &Tensor, axis: usize) -> Result<Tensor> {
    let shape = x.shape();
    if axis >= shape.len() {
        return Err(Error::Config(format!("axis {axis} out of range for {shape:?}")));
    }
    let n = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let outer: usize = shape[..axis].iter().product();
    let mut out = vec![0.0f32; x.numel()];
    for o in 0..outer {
        for i in 0..inner {
            let idx = |j: usize| (o * n + j) * inner + i;
            let max = (0..n).map(|j| x.data[idx(j)]).fold(f32::NEG_INFINITY, f32::max);
            let mut sum = 0.0f64;
            for j in 0..n {
                let e = ((x.data[idx(j)] - max) as f64).exp();
                out[idx(j)] = e as f32;
                sum += e;
            }
            for j in 0..n {
                out[idx(j)] = (out[idx(j)] as f64 / sum) as f32;
            }
        }
    }
    Tensor::new(format!("softmax({})", x.name), shape, out)
}
