//! SGD with Nesterov momentum and a step learning-rate schedule.

use crate::tensor::Tensor;

/// Velocity buffers, one per parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct SgdState {
    velocity: Vec<Vec<f64>>,
}

impl SgdState {
    pub fn new(params: &[Tensor]) -> Self {
        Self { velocity: params.iter().map(|p| vec![0.0; p.len()]).collect() }
    }

    pub fn velocity(&self, i: usize) -> &[f64] {
        &self.velocity[i]
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SgdParams {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

/// One Nesterov step without dampening:
/// `g' = g + wd w; v = μ v + g'; w -= lr (g' + μ v)`.
pub fn sgd_nesterov_step(params: &mut [Tensor], grads: &[&[f64]], state: &mut SgdState, hp: SgdParams) {
    for ((p, g), v) in params.iter_mut().zip(grads).zip(&mut state.velocity) {
        for ((w, &g), v) in p.data_mut().iter_mut().zip(g.iter()).zip(v.iter_mut()) {
            let g = g + hp.weight_decay * *w;
            *v = hp.momentum * *v + g;
            *w -= hp.lr * (g + hp.momentum * *v);
        }
    }
}

/// `lr0 · factor^(number of drops ≤ epoch)`; epochs count from 0.
pub fn lr_schedule(epoch: usize, lr0: f64, drops: &[usize], factor: f64) -> f64 {
    let n = drops.iter().filter(|&&d| d <= epoch).count();
    lr0 * factor.powi(n as i32)
}

/// Drop epochs at one half and three quarters of the run.
pub fn default_drops(epochs: usize) -> Vec<usize> {
    let e = epochs as f64;
    vec![(0.5 * e).round() as usize, (0.75 * e).round() as usize]
}
