//! First-order optimizers over named `f32` tensors.
//!
//! Parameters are registered once at construction; frozen tensors
//! (`requires_grad == false`) are rejected there, so a frozen model can never
//! end up in an optimizer's parameter set.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub trait Optimizer {
    /// Applies one update using each tensor's accumulated `grad`.
    fn step(&mut self, params: &mut [&mut Tensor]);
    fn lr(&self) -> f64;
    fn set_lr(&mut self, lr: f64);
    /// Names of the registered parameters, in registration order.
    fn param_names(&self) -> &[String];
}

fn register(params: &[&Tensor]) -> Result<Vec<String>> {
    params
        .iter()
        .map(|t| {
            if t.requires_grad {
                Ok(t.name.clone())
            } else {
                Err(Error::FrozenParameter(t.name.clone()))
            }
        })
        .collect()
}

fn check_lr(lr: f64) -> Result<()> {
    if !(lr > 0.0 && lr.is_finite()) {
        return Err(Error::Config(format!("learning rate must be positive, got {lr}")));
    }
    Ok(())
}

#[derive(Clone, Debug)]
pub struct Sgd {
    lr: f64,
    names: Vec<String>,
}

impl Sgd {
    pub fn new(params: &[&Tensor], lr: f64) -> Result<Self> {
        check_lr(lr)?;
        Ok(Sgd {
            lr,
            names: register(params)?,
        })
    }
}

impl Optimizer for Sgd {
    fn step(&mut self, params: &mut [&mut Tensor]) {
        debug_assert_eq!(params.len(), self.names.len());
        let lr = self.lr as f32;
        for p in params.iter_mut() {
            let Some(g) = p.grad.take() else { continue };
            for (w, gv) in p.data_mut().iter_mut().zip(&g) {
                *w -= lr * gv;
            }
            p.grad = Some(g);
        }
    }

    fn lr(&self) -> f64 {
        self.lr
    }

    fn set_lr(&mut self, lr: f64) {
        self.lr = lr;
    }

    fn param_names(&self) -> &[String] {
        &self.names
    }
}

#[derive(Clone, Debug)]
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: i32,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
    names: Vec<String>,
}

impl Adam {
    pub fn new(params: &[&Tensor], lr: f64) -> Result<Self> {
        check_lr(lr)?;
        Ok(Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
            names: register(params)?,
        })
    }
}

impl Optimizer for Adam {
    fn step(&mut self, params: &mut [&mut Tensor]) {
        debug_assert_eq!(params.len(), self.names.len());
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t);
        let bc2 = 1.0 - self.beta2.powi(self.t);
        let (b1, b2) = (self.beta1 as f32, self.beta2 as f32);
        let step = (self.lr * bc2.sqrt() / bc1) as f32;
        let eps = self.eps as f32;
        for ((p, m), v) in params.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            let Some(g) = p.grad.take() else { continue };
            for (((w, &gv), mi), vi) in p.data_mut().iter_mut().zip(&g).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = b1 * *mi + (1.0 - b1) * gv;
                *vi = b2 * *vi + (1.0 - b2) * gv * gv;
                *w -= step * *mi / (vi.sqrt() + eps);
            }
            p.grad = Some(g);
        }
    }

    fn lr(&self) -> f64 {
        self.lr
    }

    fn set_lr(&mut self, lr: f64) {
        self.lr = lr;
    }

    fn param_names(&self) -> &[String] {
        &self.names
    }
}
