use crate::error::{Error, Result};
use crate::tensor::{Graph, Var};

use super::SoftWeightMatrix;

/// Weighted InfoNCE between clean anchors `z` and augmented candidates
/// `z_aug` (both `B × d`). Row `i` of `weights` spreads the positive mass of
/// anchor `i` over the candidates; the weights are constants.
///
/// Returns the summed (not averaged) loss.
pub fn rscl_loss(g: &mut Graph, z: Var, z_aug: Var, weights: &SoftWeightMatrix, tau: f64) -> Result<Var> {
    if !(tau > 0.0) || !tau.is_finite() {
        return Err(Error::InvalidArgument(format!("tau must be positive, got {tau}")));
    }
    let b = g.value(z).rows();
    if b == 0 {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    if g.value(z_aug).shape() != g.value(z).shape() {
        return Err(Error::InvalidArgument(format!(
            "embedding shapes differ: {:?} vs {:?}",
            g.value(z).shape(),
            g.value(z_aug).shape()
        )));
    }
    let w = &weights.weights;
    if w.shape() != [b, b] {
        return Err(Error::InvalidArgument(format!("weights are {:?}, expected [{b}, {b}]", w.shape())));
    }
    for i in 0..b {
        let row = w.row(i);
        let s: f64 = row.iter().sum();
        if (s - 1.0).abs() > 1e-9 || row.iter().any(|&v| !(0.0..=1.0).contains(&v)) {
            return Err(Error::InvalidArgument(format!("weight row {i} is not stochastic (sum {s})")));
        }
    }
    let zn = g.l2_normalize_rows(z)?;
    let zan = g.l2_normalize_rows(z_aug)?;
    let sim = g.matmul_t(zn, zan)?;
    let logits = g.scale(sim, 1.0 / tau)?;
    let logp = g.log_softmax_rows(logits)?;
    let wv = g.constant(w.clone())?;
    let weighted = g.mul(wv, logp)?;
    let total = g.sum(weighted)?;
    Ok(g.scale(total, -1.0)?)
}
