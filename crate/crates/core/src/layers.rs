//! Composite layers built from graph primitives.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::matrix::DenseMatrix;
use crate::rng::Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Mode {
    Train,
    Eval,
}

/// Running statistics of a 1-D batch-norm layer (population variance).
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats {
    pub mean: DenseMatrix,
    pub var: DenseMatrix,
}

impl RunningStats {
    pub fn new(dim: usize) -> Self {
        Self {
            mean: DenseMatrix::zeros(1, dim),
            var: DenseMatrix::filled(1, dim, 1.0),
        }
    }
}

/// Batch normalization over the rows of `x` (`b×d`).
///
/// In train mode the batch mean and population variance normalize the input
/// and the running statistics move toward them by `momentum`:
/// `running = (1 - momentum)·running + momentum·batch`. In eval mode the
/// running statistics are used as constants.
pub fn batch_norm_1d(
    g: &mut Graph,
    x: NodeId,
    scale: NodeId,
    shift: NodeId,
    stats: &mut RunningStats,
    mode: Mode,
    momentum: f64,
    eps: f64,
) -> Result<NodeId> {
    let (b, d) = g.value(x).shape();
    if g.value(scale).shape() != (1, d) || g.value(shift).shape() != (1, d) {
        return Err(Error::Dimension(format!(
            "batch norm affine parameters must be 1x{d}"
        )));
    }
    let normalized = match mode {
        Mode::Train => {
            if b < 2 {
                return Err(Error::DegenerateBatch(format!(
                    "batch norm in train mode needs at least 2 rows, got {b}"
                )));
            }
            let mu = g.mean_rows(x);
            let centered = g.sub(x, mu)?;
            let sq = g.pow_const(centered, 2.0)?;
            let var = g.mean_rows(sq);
            let shifted = g.offset(var, eps);
            let std = g.pow_const(shifted, 0.5)?;
            let out = g.div(centered, std)?;

            let batch_mean = g.value(mu).clone();
            let batch_var = g.value(var).clone();
            for c in 0..d {
                let m = (1.0 - momentum) * stats.mean.get(0, c) + momentum * batch_mean.get(0, c);
                let v = (1.0 - momentum) * stats.var.get(0, c) + momentum * batch_var.get(0, c);
                stats.mean.set(0, c, m);
                stats.var.set(0, c, v);
            }
            out
        }
        Mode::Eval => {
            let mean = g.constant(stats.mean.clone());
            let std = g.constant(stats.var.map(|v| (v + eps).sqrt()));
            let centered = g.sub(x, mean)?;
            g.div(centered, std)?
        }
    };
    let scaled = g.mul(normalized, scale)?;
    g.add(scaled, shift)
}

/// Inverted dropout: survivors are scaled by `1/(1-p)` so eval mode is the
/// identity.
pub fn dropout(g: &mut Graph, x: NodeId, p: f64, mode: Mode, rng: &mut Rng) -> Result<NodeId> {
    if !(0.0..1.0).contains(&p) {
        return Err(Error::Config(format!(
            "dropout rate must be in [0, 1), got {p}"
        )));
    }
    if mode == Mode::Eval || p == 0.0 {
        return Ok(x);
    }
    let (r, c) = g.value(x).shape();
    let keep = 1.0 / (1.0 - p);
    let mask = DenseMatrix::from_fn(r, c, |_, _| if rng.uniform() < p { 0.0 } else { keep });
    let mask = g.constant(mask);
    g.mul(x, mask)
}
