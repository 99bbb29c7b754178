//! SGD with momentum, the cosine learning-rate schedule, and the
//! ascent/descent update rules.
//!
//! Descent folds weight decay into the momentum buffer (coupled form):
//!   buf <- mu*buf + (grad + lambda*theta);  theta <- theta - eta*buf
//! Ascent feeds only the loss gradient through the buffer and applies the
//! decay term directly with norm-shrinking sign:
//!   buf <- mu*buf + grad;  theta <- theta + eta_a*buf - eta_a*lambda*theta

use crate::error::{Error, Result};
use crate::nn::{LayeredModel, ParamId};
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Direction {
    Descent,
    Ascent,
}

/// Cosine-decayed learning rate, restarting at each generation boundary:
/// eta(e) = eta0 * (1 + cos(pi * e / E)) / 2 for e in [0, E).
pub fn cosine_lr(epoch_in_gen: usize, epochs_per_gen: usize, eta0: f64) -> f64 {
    debug_assert!(epoch_in_gen < epochs_per_gen);
    let frac = epoch_in_gen as f64 / epochs_per_gen as f64;
    eta0 * (1.0 + (std::f64::consts::PI * frac).cos()) / 2.0
}

/// Per-parameter momentum buffers plus the shared momentum and weight-decay
/// coefficients.
#[derive(Clone, Debug, PartialEq)]
pub struct SgdState {
    pub momentum: f64,
    pub weight_decay: f64,
    buffers: BTreeMap<ParamId, Vec<f64>>,
}

impl SgdState {
    /// Zero-initialized buffers for every model parameter.
    pub fn new(model: &LayeredModel, momentum: f64, weight_decay: f64) -> Self {
        let buffers = model
            .param_ids()
            .into_iter()
            .map(|id| {
                let n = model.param(id).expect("id from param_ids").value.numel();
                (id, vec![0.0; n])
            })
            .collect();
        SgdState {
            momentum,
            weight_decay,
            buffers,
        }
    }

    pub fn buffer(&self, id: ParamId) -> Option<&[f64]> {
        self.buffers.get(&id).map(|b| b.as_slice())
    }

    pub fn buffer_mut(&mut self, id: ParamId) -> Option<&mut Vec<f64>> {
        self.buffers.get_mut(&id)
    }

    /// Zero the buffers of the selected parameters.
    pub fn zero_buffers<'a>(&mut self, selector: impl IntoIterator<Item = &'a ParamId>) {
        for id in selector {
            if let Some(buf) = self.buffers.get_mut(id) {
                buf.iter_mut().for_each(|v| *v = 0.0);
            }
        }
    }

    pub fn ids(&self) -> impl Iterator<Item = &ParamId> {
        self.buffers.keys()
    }
}

/// One SGD update on a raw parameter slice.
pub fn sgd_update(
    theta: &mut [f64],
    grad: &[f64],
    buf: &mut [f64],
    mu: f64,
    lambda: f64,
    eta: f64,
    direction: Direction,
    eta_a: f64,
) -> Result<()> {
    if theta.len() != grad.len() || theta.len() != buf.len() {
        return Err(Error::Shape(format!(
            "sgd_update: parameter has {} elements, gradient {}, buffer {}",
            theta.len(),
            grad.len(),
            buf.len()
        )));
    }
    match direction {
        Direction::Descent => {
            for i in 0..theta.len() {
                buf[i] = mu * buf[i] + grad[i] + lambda * theta[i];
                theta[i] -= eta * buf[i];
            }
        }
        Direction::Ascent => {
            for i in 0..theta.len() {
                buf[i] = mu * buf[i] + grad[i];
                theta[i] += eta_a * buf[i] - eta_a * lambda * theta[i];
            }
        }
    }
    Ok(())
}

/// Apply one SGD step to every unfrozen model parameter that has a gradient.
/// `direction_of` selects the rule per parameter; ascent parameters step at
/// `eta_a`, descent parameters at `eta`.
pub fn sgd_step(
    model: &mut LayeredModel,
    grads: &BTreeMap<ParamId, Tensor>,
    state: &mut SgdState,
    eta: f64,
    direction_of: impl Fn(ParamId) -> Direction,
    eta_a: f64,
) -> Result<()> {
    let (mu, lambda) = (state.momentum, state.weight_decay);
    for (&id, grad) in grads {
        let param = model.param_mut(id)?;
        if param.frozen {
            continue;
        }
        if grad.shape() != param.value.shape() {
            return Err(Error::Shape(format!(
                "sgd_step: gradient shape {:?} vs parameter shape {:?} for {id}",
                grad.shape(),
                param.value.shape()
            )));
        }
        let buf = state
            .buffer_mut(id)
            .ok_or_else(|| Error::Lookup(format!("no momentum buffer for {id}")))?;
        sgd_update(
            param.value.data_mut(),
            grad.data(),
            buf,
            mu,
            lambda,
            eta,
            direction_of(id),
            eta_a,
        )?;
    }
    Ok(())
}
