//! InfoNCE alignment between projected image features and text embeddings,
//! and the combined training objective.

use crate::autodiff::{Graph, Tensor, Var};
use crate::error::{Error, Result};

/// Floor on the projection norm when normalizing, so an all-zero projection
/// maps to zero instead of NaN.
pub const NORM_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AlignmentConfig {
    /// Weight of the distance term.
    pub lambda: f64,
    /// Softmax temperature.
    pub tau: f64,
    /// L2-normalize `W·f_img` before the dot product with the text rows.
    pub normalize_projection: bool,
}

impl Default for AlignmentConfig {
    fn default() -> Self {
        Self {
            lambda: 0.3,
            tau: 0.5,
            normalize_projection: true,
        }
    }
}

impl AlignmentConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::Config(format!("temperature must be > 0, got {}", self.tau)));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        Ok(())
    }
}

/// Batch-mean InfoNCE loss.
///
/// With `p_i = W·f_i` (optionally unit-normalized) and text rows `t_j`, the
/// logits are `L[i,j] = t_jᵀ p_i / τ` and sample i contributes
/// `−log softmax_j(L[i,·])[i]`. Negatives are the other rows of the batch;
/// the positive pair stays in the denominator. `text` is `B×k` row-major and
/// enters the graph as a constant.
pub fn distance_loss(
    g: &mut Graph,
    text: &[f64],
    features: Var,
    projection: Var,
    tau: f64,
    normalize_projection: bool,
) -> Result<Var> {
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(Error::Config(format!("temperature must be > 0, got {tau}")));
    }
    let k = match g.shape(projection) {
        [k, _] => *k,
        other => return Err(Error::dim("distance_loss", format!("projection must be k×d, got {other:?}"))),
    };
    if text.is_empty() {
        return Err(Error::Validation("empty batch".into()));
    }
    if text.len() % k != 0 {
        return Err(Error::dim("distance_loss", format!("{} text values is not a multiple of k={k}", text.len())));
    }
    let batch = text.len() / k;
    match g.shape(features) {
        [b, _] if *b == batch => {}
        other => {
            return Err(Error::dim(
                "distance_loss",
                format!("features {other:?} vs {batch} text rows"),
            ))
        }
    }
    let mut text_t = vec![0.0; text.len()];
    for i in 0..batch {
        for j in 0..k {
            text_t[j * batch + i] = text[i * k + j];
        }
    }
    let text_t = g.constant(Tensor::new(vec![k, batch], text_t)?);

    let wt = g.transpose(projection)?;
    let mut projected = g.matmul(features, wt)?;
    if normalize_projection {
        projected = g.normalize_rows(projected, NORM_EPS)?;
    }
    let sims = g.matmul(projected, text_t)?;
    let logits = g.scale(sims, 1.0 / tau);
    let targets: Vec<usize> = (0..batch).collect();
    g.softmax_cross_entropy(logits, &targets)
}

/// `ce + λ·dist`.
pub fn total_objective(g: &mut Graph, ce: Var, dist: Var, lambda: f64) -> Result<Var> {
    for v in [ce, dist] {
        if g.value(v).numel() != 1 {
            return Err(Error::Usage(format!("objective terms must be scalars, got {:?}", g.shape(v))));
        }
    }
    let weighted = g.scale(dist, lambda);
    g.add(ce, weighted)
}
