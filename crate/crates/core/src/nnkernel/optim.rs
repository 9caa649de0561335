//! Stochastic optimizers over [`MlpParams`]: adaptive moment estimation
//! with bias correction (the default), and plain SGD.

use nalgebra::{DMatrix, DVector};

use super::{Gradients, MlpParams};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Optimizer {
    Adam { beta1: f64, beta2: f64, epsilon: f64 },
    Sgd,
}

impl Default for Optimizer {
    fn default() -> Self {
        Optimizer::Adam { beta1: 0.9, beta2: 0.999, epsilon: 1e-8 }
    }
}

/// First/second moment accumulators plus the step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct OptState {
    pub m: Gradients,
    pub v: Gradients,
    pub step: u64,
}

impl OptState {
    pub fn new(params: &MlpParams) -> Self {
        Self { m: Gradients::zeros_like(params), v: Gradients::zeros_like(params), step: 0 }
    }
}

fn adam_update_vec(
    p: &mut DVector<f64>,
    g: &DVector<f64>,
    m: &mut DVector<f64>,
    v: &mut DVector<f64>,
    lr: f64,
    beta1: f64,
    beta2: f64,
    epsilon: f64,
    bc1: f64,
    bc2: f64,
) {
    for i in 0..p.len() {
        m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
        v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
        let m_hat = m[i] / bc1;
        let v_hat = v[i] / bc2;
        p[i] -= lr * m_hat / (v_hat.sqrt() + epsilon);
    }
}

fn adam_update_mat(
    p: &mut DMatrix<f64>,
    g: &DMatrix<f64>,
    m: &mut DMatrix<f64>,
    v: &mut DMatrix<f64>,
    lr: f64,
    beta1: f64,
    beta2: f64,
    epsilon: f64,
    bc1: f64,
    bc2: f64,
) {
    for (pi, (gi, (mi, vi))) in
        p.iter_mut().zip(g.iter().zip(m.iter_mut().zip(v.iter_mut())))
    {
        *mi = beta1 * *mi + (1.0 - beta1) * gi;
        *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
        let m_hat = *mi / bc1;
        let v_hat = *vi / bc2;
        *pi -= lr * m_hat / (v_hat.sqrt() + epsilon);
    }
}

/// One optimizer step in place. Deterministic; the step counter advances
/// even on all-zero gradients.
pub fn opt_step(
    params: &mut MlpParams,
    grads: &Gradients,
    state: &mut OptState,
    lr: f64,
    optimizer: Optimizer,
) {
    state.step += 1;
    match optimizer {
        Optimizer::Sgd => {
            for (p, g) in params.weights.iter_mut().zip(&grads.weights) {
                *p -= &(g * lr);
            }
            for (p, g) in params.biases.iter_mut().zip(&grads.biases) {
                *p -= &(g * lr);
            }
            for (p, g) in params.bn_gamma.iter_mut().zip(&grads.bn_gamma) {
                *p -= &(g * lr);
            }
            for (p, g) in params.bn_beta.iter_mut().zip(&grads.bn_beta) {
                *p -= &(g * lr);
            }
        }
        Optimizer::Adam { beta1, beta2, epsilon } => {
            let t = state.step as i32;
            let bc1 = 1.0 - beta1.powi(t);
            let bc2 = 1.0 - beta2.powi(t);
            for l in 0..params.weights.len() {
                adam_update_mat(
                    &mut params.weights[l],
                    &grads.weights[l],
                    &mut state.m.weights[l],
                    &mut state.v.weights[l],
                    lr,
                    beta1,
                    beta2,
                    epsilon,
                    bc1,
                    bc2,
                );
                adam_update_vec(
                    &mut params.biases[l],
                    &grads.biases[l],
                    &mut state.m.biases[l],
                    &mut state.v.biases[l],
                    lr,
                    beta1,
                    beta2,
                    epsilon,
                    bc1,
                    bc2,
                );
            }
            for l in 0..params.bn_gamma.len() {
                adam_update_vec(
                    &mut params.bn_gamma[l],
                    &grads.bn_gamma[l],
                    &mut state.m.bn_gamma[l],
                    &mut state.v.bn_gamma[l],
                    lr,
                    beta1,
                    beta2,
                    epsilon,
                    bc1,
                    bc2,
                );
                adam_update_vec(
                    &mut params.bn_beta[l],
                    &grads.bn_beta[l],
                    &mut state.m.bn_beta[l],
                    &mut state.v.bn_beta[l],
                    lr,
                    beta1,
                    beta2,
                    epsilon,
                    bc1,
                    bc2,
                );
            }
        }
    }
}
