use indexmap::IndexMap;

use super::{Params, Result, TensorError};
use crate::real::Real;

/// SGD with classical momentum and decoupled weight decay:
/// `v <- mu*v + g`, `p <- p - lr*wd*p - lr*v`.
///
/// Missing gradients are an error: a parameter that never received one
/// indicates a wiring bug, not a quiet no-op.
#[derive(Debug, Clone)]
pub struct SgdMomentum<R> {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: IndexMap<String, Vec<R>>,
}

impl<R: Real> SgdMomentum<R> {
    pub fn new(lr: f64, momentum: f64, weight_decay: f64) -> Self {
        SgdMomentum {
            lr,
            momentum,
            weight_decay,
            velocity: IndexMap::new(),
        }
    }

    pub fn step(&mut self, params: &mut Params<R>) -> Result<()> {
        let mu = R::from_f64(self.momentum);
        let lr = R::from_f64(self.lr);
        let decay = R::from_f64(self.lr * self.weight_decay);
        for (name, p) in params.iter_mut() {
            let g = p
                .grad
                .take()
                .ok_or_else(|| TensorError::MissingGrad(name.to_string()))?;
            let v = self
                .velocity
                .entry(name.to_string())
                .or_insert_with(|| vec![R::zero(); g.len()]);
            for i in 0..g.len() {
                v[i] = mu * v[i] + g[i];
                p.data[i] = p.data[i] - decay * p.data[i] - lr * v[i];
            }
        }
        Ok(())
    }
}

/// Adadelta with accumulated squared gradients and updates:
/// `Eg <- rho*Eg + (1-rho)*g^2`,
/// `dx = -sqrt(Eu + eps)/sqrt(Eg + eps) * g`,
/// `Eu <- rho*Eu + (1-rho)*dx^2`, `p <- p + lr*dx - lr*wd*p`.
#[derive(Debug, Clone)]
pub struct Adadelta<R> {
    pub lr: f64,
    pub rho: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
    acc_grad: IndexMap<String, Vec<R>>,
    acc_update: IndexMap<String, Vec<R>>,
}

impl<R: Real> Adadelta<R> {
    pub fn new(lr: f64, rho: f64, epsilon: f64, weight_decay: f64) -> Self {
        Adadelta {
            lr,
            rho,
            epsilon,
            weight_decay,
            acc_grad: IndexMap::new(),
            acc_update: IndexMap::new(),
        }
    }

    pub fn step(&mut self, params: &mut Params<R>) -> Result<()> {
        let rho = R::from_f64(self.rho);
        let one_minus = R::one() - rho;
        let eps = R::from_f64(self.epsilon);
        let lr = R::from_f64(self.lr);
        let decay = R::from_f64(self.lr * self.weight_decay);
        for (name, p) in params.iter_mut() {
            let g = p
                .grad
                .take()
                .ok_or_else(|| TensorError::MissingGrad(name.to_string()))?;
            let eg = self
                .acc_grad
                .entry(name.to_string())
                .or_insert_with(|| vec![R::zero(); g.len()]);
            let eu = self
                .acc_update
                .entry(name.to_string())
                .or_insert_with(|| vec![R::zero(); g.len()]);
            for i in 0..g.len() {
                eg[i] = rho * eg[i] + one_minus * g[i] * g[i];
                let dx = -((eu[i] + eps).sqrt() / (eg[i] + eps).sqrt()) * g[i];
                eu[i] = rho * eu[i] + one_minus * dx * dx;
                p.data[i] = p.data[i] + lr * dx - decay * p.data[i];
            }
        }
        Ok(())
    }
}

/// Either optimizer behind one stepping interface with a mutable rate.
#[derive(Debug, Clone)]
pub enum Optimizer<R> {
    Sgd(SgdMomentum<R>),
    Adadelta(Adadelta<R>),
}

impl<R: Real> Optimizer<R> {
    pub fn step(&mut self, params: &mut Params<R>) -> Result<()> {
        match self {
            Optimizer::Sgd(o) => o.step(params),
            Optimizer::Adadelta(o) => o.step(params),
        }
    }

    pub fn lr(&self) -> f64 {
        match self {
            Optimizer::Sgd(o) => o.lr,
            Optimizer::Adadelta(o) => o.lr,
        }
    }

    pub fn set_lr(&mut self, lr: f64) {
        match self {
            Optimizer::Sgd(o) => o.lr = lr,
            Optimizer::Adadelta(o) => o.lr = lr,
        }
    }
}
