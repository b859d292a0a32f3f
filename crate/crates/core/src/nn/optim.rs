use super::params::{Grads, ParamSet};

/// Momentum SGD with L2 weight decay folded into the gradient.
#[derive(Debug, Clone)]
pub struct Sgd {
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<Vec<f64>>,
}

impl Sgd {
    pub fn new(params: &ParamSet, momentum: f64, weight_decay: f64) -> Self {
        Self {
            momentum,
            weight_decay,
            velocity: params
                .tensors()
                .iter()
                .map(|t| vec![0.0; t.data.len()])
                .collect(),
        }
    }

    /// Applies one step to the tensors flagged in `trainable`. Weight decay
    /// skips 1-D tensors (biases).
    pub fn step(&mut self, params: &mut ParamSet, grads: &Grads, lr: f64, trainable: &[bool]) {
        for (i, t) in params.tensors_mut().iter_mut().enumerate() {
            if !trainable[i] {
                continue;
            }
            let decay = if t.shape.len() > 1 {
                self.weight_decay
            } else {
                0.0
            };
            let vel = &mut self.velocity[i];
            for ((w, g), v) in t.data.iter_mut().zip(&grads.0[i]).zip(vel.iter_mut()) {
                *v = self.momentum * *v + g + decay * *w;
                *w -= lr * *v;
            }
        }
    }
}
