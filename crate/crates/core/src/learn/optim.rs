//! First-order optimizers over the flat tensor list of a [`SensingNet`].

use serde::{Deserialize, Serialize};

use super::net::{Gradients, SensingNet};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    #[default]
    Adam,
    Sgd,
}

#[derive(Clone, Debug)]
pub struct Optimizer<T> {
    kind: OptimizerKind,
    lr: f64,
    mask_lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: u64,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Scalar> Optimizer<T> {
    /// `mask_lr` applies to the masks tensor when it is trainable.
    pub fn new(kind: OptimizerKind, lr: f64, mask_lr: f64) -> Result<Self> {
        for (name, v) in [("learning rate", lr), ("mask learning rate", mask_lr)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Parameter(format!("{name} must be nonnegative, got {v}")));
            }
        }
        Ok(Self {
            kind,
            lr,
            mask_lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        })
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, net: &mut SensingNet<T>, grads: &Gradients<T>) -> Result<()> {
        let has_masks = net.train_masks;
        if has_masks != grads.masks.is_some() {
            return Err(Error::Config("gradient set does not match trainable tensors".into()));
        }
        let gs = grads.slices();
        let mut ps = net.param_slices_mut();
        if ps.len() != gs.len() || ps.iter().zip(&gs).any(|(p, g)| p.len() != g.len()) {
            return Err(Error::Config("gradient shapes do not match parameters".into()));
        }
        self.step += 1;
        if self.m.is_empty() {
            self.m = gs.iter().map(|g| vec![T::zero(); g.len()]).collect();
            self.v = self.m.clone();
        }
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (ti, (p, g)) in ps.iter_mut().zip(&gs).enumerate() {
            let lr = if has_masks && ti == 0 { self.mask_lr } else { self.lr };
            match self.kind {
                OptimizerKind::Sgd => {
                    let lr = T::lit(lr);
                    for (pv, gv) in p.iter_mut().zip(g.iter()) {
                        *pv -= lr * *gv;
                    }
                }
                OptimizerKind::Adam => {
                    let (b1, b2) = (T::lit(self.beta1), T::lit(self.beta2));
                    let (ob1, ob2) = (T::one() - b1, T::one() - b2);
                    let step = T::lit(lr / bc1);
                    let inv_bc2 = T::lit(1.0 / bc2);
                    let eps = T::lit(self.eps);
                    let (m, v) = (&mut self.m[ti], &mut self.v[ti]);
                    for i in 0..p.len() {
                        let gi = g[i];
                        m[i] = b1 * m[i] + ob1 * gi;
                        v[i] = b2 * v[i] + ob2 * gi * gi;
                        p[i] -= step * m[i] / ((v[i] * inv_bc2).sqrt() + eps);
                    }
                }
            }
        }
        Ok(())
    }
}
