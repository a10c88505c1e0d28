//! SGD with momentum, coupled weight decay, and a step learning-rate
//! schedule with separate backbone and classifier rates.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::DenseMatrix;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ParamGroup {
    Backbone,
    Classifier,
}

/// `g' = g + wd·w; v' = momentum·v + g'; w' = w - lr·v'`.
pub fn sgd_step(
    param: &mut DenseMatrix,
    grad: &DenseMatrix,
    velocity: &mut DenseMatrix,
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) {
    debug_assert_eq!(param.shape(), grad.shape());
    debug_assert_eq!(param.shape(), velocity.shape());
    for ((w, &g), v) in param
        .data_mut()
        .iter_mut()
        .zip(grad.data())
        .zip(velocity.data_mut())
    {
        let g = g + weight_decay * *w;
        *v = momentum * *v + g;
        *w -= lr * *v;
    }
}

/// Velocity buffers and hyper-parameters for every trainable matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimState {
    pub momentum: f64,
    pub weight_decay: f64,
    pub lr_backbone: f64,
    pub lr_classifier: f64,
    pub backbone: Vec<DenseMatrix>,
    pub classifier: Vec<DenseMatrix>,
}

impl OptimState {
    pub fn new(
        backbone_shapes: &[(usize, usize)],
        classifier_shapes: &[(usize, usize)],
        momentum: f64,
        weight_decay: f64,
        lr_backbone: f64,
        lr_classifier: f64,
    ) -> Self {
        let zeros = |s: &[(usize, usize)]| s.iter().map(|&(r, c)| DenseMatrix::zeros(r, c)).collect();
        Self {
            momentum,
            weight_decay,
            lr_backbone,
            lr_classifier,
            backbone: zeros(backbone_shapes),
            classifier: zeros(classifier_shapes),
        }
    }

    pub fn step_group(&mut self, group: ParamGroup, params: &mut [&mut DenseMatrix], grads: &[DenseMatrix], lr: f64) {
        let velocities = match group {
            ParamGroup::Backbone => &mut self.backbone,
            ParamGroup::Classifier => &mut self.classifier,
        };
        assert_eq!(params.len(), velocities.len());
        assert_eq!(params.len(), grads.len());
        for ((p, g), v) in params.iter_mut().zip(grads).zip(velocities.iter_mut()) {
            sgd_step(p, g, v, lr, self.momentum, self.weight_decay);
        }
    }
}

/// Step schedule: the base rate, times `decay_factor` from `decay_epoch` on.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub epochs: usize,
    pub decay_epoch: usize,
    pub decay_factor: f64,
    pub lr_backbone: f64,
    pub lr_classifier: f64,
}

impl LrSchedule {
    pub fn lr_at_epoch(&self, epoch: usize, which: ParamGroup) -> Result<f64> {
        if epoch >= self.epochs {
            return Err(Error::Config(format!(
                "epoch {epoch} outside schedule of {} epochs",
                self.epochs
            )));
        }
        let base = match which {
            ParamGroup::Backbone => self.lr_backbone,
            ParamGroup::Classifier => self.lr_classifier,
        };
        Ok(if epoch >= self.decay_epoch { base * self.decay_factor } else { base })
    }
}
