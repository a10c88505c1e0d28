//! Objective functions: cross-correlation and Pearson matrices, the
//! dynamically weighted decorrelation loss, Barlow Twins, instance
//! (cross-entropy) loss, triplet losses and their joint combination.
//!
//! Channels are columns; every correlation matrix is `d×d` for `b×d`
//! feature batches.

use serde::{Deserialize, Serialize};

use crate::autodiff::{standardize_columns, Graph, NodeId, Reduce};
use crate::error::{Error, Result};
use crate::matrix::DenseMatrix;

/// Hyper-parameters of the decorrelation regularizer and the joint objective.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DwdrConfig {
    /// Off-diagonal balance.
    pub lambda: f64,
    /// Focusing exponent of the diagonal weights.
    pub gamma1: f64,
    /// Focusing exponent of the off-diagonal weights.
    pub gamma2: f64,
    /// Weight of the identity loss in the joint objective.
    pub alpha: f64,
    /// Guard added to each standard deviation in the Pearson denominator.
    pub eps: f64,
    /// Regularize the correlation between the two platform branches.
    pub cross_view: bool,
    /// Regularize the correlation between two augmented copies of each platform.
    pub intra_view: bool,
}

impl Default for DwdrConfig {
    fn default() -> Self {
        Self {
            lambda: 1e-3,
            gamma1: 1.0,
            gamma2: 1.0,
            alpha: 0.9,
            eps: 1e-8,
            cross_view: true,
            intra_view: false,
        }
    }
}

impl DwdrConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda > 0.0) || !self.lambda.is_finite() {
            return Err(Error::Config(format!("lambda must be > 0, got {}", self.lambda)));
        }
        check_gamma(self.gamma1, self.gamma2)?;
        check_alpha(self.alpha)?;
        if !(self.eps > 0.0) {
            return Err(Error::Config(format!("eps must be > 0, got {}", self.eps)));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum TripletVariant {
    HardMargin,
    SoftMargin,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TripletConfig {
    pub margin: f64,
    pub variant: TripletVariant,
}

impl Default for TripletConfig {
    fn default() -> Self {
        Self {
            margin: 0.3,
            variant: TripletVariant::HardMargin,
        }
    }
}

fn check_gamma(gamma1: f64, gamma2: f64) -> Result<()> {
    if !(gamma1 >= 0.0) || !(gamma2 >= 0.0) {
        return Err(Error::Config(format!(
            "focusing parameters must be non-negative, got ({gamma1}, {gamma2})"
        )));
    }
    Ok(())
}

fn check_alpha(alpha: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Config(format!("alpha must lie in [0, 1], got {alpha}")));
    }
    Ok(())
}

fn same_shape(g: &Graph, x: NodeId, y: NodeId, what: &str) -> Result<(usize, usize)> {
    let (sx, sy) = (g.value(x).shape(), g.value(y).shape());
    if sx != sy {
        return Err(Error::Dimension(format!("{what}: shapes {sx:?} and {sy:?} differ")));
    }
    Ok(sx)
}

/// `(1/b)·xᵀy`, the batch expectation of the channel outer products.
pub fn cross_correlation_matrix(g: &mut Graph, x: NodeId, y: NodeId) -> Result<NodeId> {
    let (b, _) = same_shape(g, x, y, "cross_correlation_matrix")?;
    if b == 0 {
        return Err(Error::DegenerateBatch("empty batch".into()));
    }
    let xt = g.transpose(x);
    let prod = g.matmul(xt, y)?;
    Ok(g.scale(prod, 1.0 / b as f64))
}

/// Pearson cross-correlation coefficient matrix between the columns of `x`
/// and the columns of `y`.
///
/// `ρ_mn = cov(x_m, y_n) / ((σx_m + eps)(σy_n + eps))` with population
/// statistics.
pub fn pearson_matrix(g: &mut Graph, x: NodeId, y: NodeId, eps: f64) -> Result<NodeId> {
    let (b, _) = same_shape(g, x, y, "pearson_matrix")?;
    if b < 2 {
        return Err(Error::DegenerateBatch(format!(
            "pearson_matrix needs at least 2 rows, got {b}"
        )));
    }
    let (zx, _, _) = standardize_columns(g, x, eps)?;
    let (zy, _, _) = standardize_columns(g, y, eps)?;
    let zxt = g.transpose(zx);
    let prod = g.matmul(zxt, zy)?;
    Ok(g.scale(prod, 1.0 / b as f64))
}

/// Dynamic weights for a Pearson matrix.
///
/// Returns `w1` (`1×d`) with `w1_i = ((1 - ρ_ii)/2)^γ1` and `w2` (`d×d`,
/// zero diagonal) with `w2_ij = |ρ_ij|^γ2`. Entries of `ρ` are clamped to
/// `[-1, 1]` first. The weights stay on the graph, so gradients flow through
/// them.
pub fn dynamic_weights(
    g: &mut Graph,
    rho: NodeId,
    gamma1: f64,
    gamma2: f64,
) -> Result<(NodeId, NodeId)> {
    check_gamma(gamma1, gamma2)?;
    let (r, c) = g.value(rho).shape();
    if r != c {
        return Err(Error::Dimension(format!("dynamic_weights needs a square matrix, got {r}x{c}")));
    }
    let clamped = g.clamp(rho, -1.0, 1.0);

    let diag = g.diag(clamped)?;
    let neg = g.scale(diag, -0.5);
    let base1 = g.offset(neg, 0.5);
    let w1 = g.pow_const(base1, gamma1)?;

    let magnitude = g.abs(clamped);
    let full = g.pow_const(magnitude, gamma2)?;
    let mask = g.constant(DenseMatrix::from_fn(r, r, |i, j| if i == j { 0.0 } else { 1.0 }));
    let w2 = g.mul(full, mask)?;
    Ok((w1, w2))
}

/// Weighted identity regression of a correlation matrix:
/// `Σ_i w1_i (1 - ρ_ii)² + λ Σ_{i≠j} w2_ij ρ_ij²`.
pub fn dwdr_from_rho(g: &mut Graph, rho: NodeId, cfg: &DwdrConfig) -> Result<NodeId> {
    let (w1, w2) = dynamic_weights(g, rho, cfg.gamma1, cfg.gamma2)?;
    let diag = g.diag(rho)?;
    let neg = g.scale(diag, -1.0);
    let miss = g.offset(neg, 1.0);
    let miss_sq = g.pow_const(miss, 2.0)?;
    let on = g.mul(w1, miss_sq)?;
    let on_sum = g.sum_all(on);

    let rho_sq = g.pow_const(rho, 2.0)?;
    let off = g.mul(w2, rho_sq)?;
    let off_sum = g.reduce(Reduce::SumOffDiag, off)?;
    let off_scaled = g.scale(off_sum, cfg.lambda);
    g.add(on_sum, off_scaled)
}

/// Dynamic weighted decorrelation loss between two feature batches.
pub fn dwdr_loss(g: &mut Graph, x: NodeId, y: NodeId, cfg: &DwdrConfig) -> Result<NodeId> {
    cfg.validate()?;
    let rho = pearson_matrix(g, x, y, cfg.eps)?;
    dwdr_from_rho(g, rho, cfg)
}

/// `Σ_i (1 - m_ii)² + λ Σ_{i≠j} m_ij²`.
pub fn barlow_twins_loss(g: &mut Graph, m: NodeId, lambda: f64) -> Result<NodeId> {
    let (r, c) = g.value(m).shape();
    if r != c {
        return Err(Error::Dimension(format!("barlow_twins_loss needs a square matrix, got {r}x{c}")));
    }
    let diag = g.diag(m)?;
    let neg = g.scale(diag, -1.0);
    let miss = g.offset(neg, 1.0);
    let miss_sq = g.pow_const(miss, 2.0)?;
    let on = g.sum_all(miss_sq);
    let sq = g.pow_const(m, 2.0)?;
    let off = g.reduce(Reduce::SumOffDiag, sq)?;
    let off = g.scale(off, lambda);
    g.add(on, off)
}

fn one_hot(labels: &[usize], classes: usize) -> Result<DenseMatrix> {
    if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::Data(format!("label {bad} outside [0, {classes})")));
    }
    Ok(DenseMatrix::from_fn(labels.len(), classes, |r, c| {
        if labels[r] == c {
            1.0
        } else {
            0.0
        }
    }))
}

/// Mean negative log-likelihood of `labels` under row-softmax of `z`.
pub fn cross_entropy(g: &mut Graph, z: NodeId, labels: &[usize]) -> Result<NodeId> {
    let (b, c) = g.value(z).shape();
    if labels.len() != b {
        return Err(Error::Dimension(format!("{} labels for {b} rows", labels.len())));
    }
    let mask = g.constant(one_hot(labels, c)?);
    let log_p = g.log_softmax_rows(z)?;
    let picked = g.mul(log_p, mask)?;
    let total = g.sum_all(picked);
    Ok(g.scale(total, -1.0 / b as f64))
}

/// Instance loss over the two platforms sharing one classifier: batch-mean
/// cross-entropy per platform, summed over platforms.
pub fn instance_loss(g: &mut Graph, z1: NodeId, z2: NodeId, labels: &[usize]) -> Result<NodeId> {
    same_shape(g, z1, z2, "instance_loss")?;
    let l1 = cross_entropy(g, z1, labels)?;
    let l2 = cross_entropy(g, z2, labels)?;
    g.add(l1, l2)
}

fn row_distances(g: &mut Graph, a: NodeId, b: NodeId) -> Result<NodeId> {
    let diff = g.sub(a, b)?;
    let sq = g.pow_const(diff, 2.0)?;
    let sums = g.sum_cols(sq);
    g.pow_const(sums, 0.5)
}

/// Batch-mean triplet loss on Euclidean distances.
pub fn triplet_loss(
    g: &mut Graph,
    anchor: NodeId,
    positive: NodeId,
    negative: NodeId,
    cfg: &TripletConfig,
) -> Result<NodeId> {
    if !(cfg.margin >= 0.0) {
        return Err(Error::Config(format!("triplet margin must be >= 0, got {}", cfg.margin)));
    }
    let (b, _) = same_shape(g, anchor, positive, "triplet_loss")?;
    same_shape(g, anchor, negative, "triplet_loss")?;
    let d_pos = row_distances(g, anchor, positive)?;
    let d_neg = row_distances(g, anchor, negative)?;
    let gap = g.sub(d_pos, d_neg)?;
    let terms = match cfg.variant {
        TripletVariant::HardMargin => {
            let shifted = g.offset(gap, cfg.margin);
            g.relu(shifted)
        }
        TripletVariant::SoftMargin => g.softplus(gap),
    };
    let total = g.sum_all(terms);
    Ok(g.scale(total, 1.0 / b as f64))
}

/// `α·l_id + (1 - α)·l_dwdr`.
pub fn total_loss(g: &mut Graph, l_id: NodeId, l_dwdr: NodeId, alpha: f64) -> Result<NodeId> {
    check_alpha(alpha)?;
    let a = g.scale(l_id, alpha);
    let b = g.scale(l_dwdr, 1.0 - alpha);
    g.add(a, b)
}
