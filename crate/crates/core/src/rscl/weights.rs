use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::soft_dtw;

/// Row-stochastic `B × B` supervision weights.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftWeightMatrix {
    pub weights: Tensor,
    pub beta: f64,
}

impl SoftWeightMatrix {
    /// Identity weights: each anchor's only positive is its own augmented view.
    pub fn identity(b: usize) -> Self {
        SoftWeightMatrix {
            weights: Tensor::identity(b),
            beta: f64::NAN,
        }
    }

    pub fn batch(&self) -> usize {
        self.weights.rows()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        self.weights.row(i)
    }
}

/// Pairwise Euclidean distances between the rows of a `B × d` matrix.
pub fn pairwise_euclidean(x: &Tensor) -> Result<Tensor> {
    if !x.is_finite() {
        return Err(Error::NonFinite("distance input".into()));
    }
    let b = x.rows();
    let mut d = Tensor::zeros(&[b, b]);
    for i in 0..b {
        for j in 0..b {
            let s: f64 = x.row(i).iter().zip(x.row(j)).map(|(a, c)| (a - c) * (a - c)).sum();
            d.data_mut()[i * b + j] = s.sqrt();
        }
    }
    Ok(d)
}

/// Row-softmax of `-distance / beta`.
pub fn soft_weights_from_distances(dist: &Tensor, beta: f64) -> Result<SoftWeightMatrix> {
    if !(beta > 0.0) || !beta.is_finite() {
        return Err(Error::InvalidArgument(format!("beta must be positive, got {beta}")));
    }
    let b = dist.rows();
    if dist.shape() != [b, b] {
        return Err(Error::InvalidArgument(format!(
            "distance matrix must be square, got {:?}",
            dist.shape()
        )));
    }
    if !dist.is_finite() {
        return Err(Error::NonFinite("distance matrix".into()));
    }
    let mut w = dist.map(|v| -v / beta);
    for row in w.data_mut().chunks_mut(b) {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut s = 0.0;
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            s += *v;
        }
        row.iter_mut().for_each(|v| *v /= s);
    }
    Ok(SoftWeightMatrix { weights: w, beta })
}

/// Proprioceptive soft weights: `w_ij ∝ exp(−‖q_i − q_j‖₂ / β)`, normalized per row.
pub fn soft_weights(q: &Tensor, beta: f64) -> Result<SoftWeightMatrix> {
    if q.rows() == 0 {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    soft_weights_from_distances(&pairwise_euclidean(q)?, beta)
}

/// What defines "similar" samples for the contrastive weights.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SupervisionTarget {
    ProprioState,
    NextAction,
    ActionSequenceDtw { gamma: f64 },
    /// Plain InfoNCE: identity weights.
    OneHot,
}

impl SupervisionTarget {
    pub fn name(&self) -> &'static str {
        match self {
            SupervisionTarget::ProprioState => "proprio_state",
            SupervisionTarget::NextAction => "next_action",
            SupervisionTarget::ActionSequenceDtw { .. } => "action_sequence_dtw",
            SupervisionTarget::OneHot => "one_hot",
        }
    }
}

/// Per-batch fields the supervision targets read from.
#[derive(Debug, Clone, Copy, Default)]
pub struct SupervisionFields<'a> {
    /// `B × d_q` normalized proprio.
    pub proprio: Option<&'a Tensor>,
    /// `B × d_a` first action of each chunk.
    pub next_action: Option<&'a Tensor>,
    /// One `H × d_a` chunk per sample.
    pub action_sequences: Option<&'a [Tensor]>,
}

fn missing(field: &str, target: &SupervisionTarget) -> Error {
    Error::InvalidArgument(format!("target `{}` needs the `{field}` field", target.name()))
}

/// `B × B` distances for `target`; `None` for [`SupervisionTarget::OneHot`].
pub fn supervision_distances(fields: &SupervisionFields<'_>, target: &SupervisionTarget) -> Result<Option<Tensor>> {
    match target {
        SupervisionTarget::ProprioState => {
            let q = fields.proprio.ok_or_else(|| missing("proprio", target))?;
            Ok(Some(pairwise_euclidean(q)?))
        }
        SupervisionTarget::NextAction => {
            let a = fields.next_action.ok_or_else(|| missing("next_action", target))?;
            Ok(Some(pairwise_euclidean(a)?))
        }
        SupervisionTarget::ActionSequenceDtw { gamma } => {
            let seqs = fields
                .action_sequences
                .ok_or_else(|| missing("action_sequences", target))?;
            let b = seqs.len();
            let mut d = Tensor::zeros(&[b, b]);
            for i in 0..b {
                for j in 0..b {
                    d.data_mut()[i * b + j] = soft_dtw(&seqs[i], &seqs[j], *gamma)?;
                }
            }
            Ok(Some(d))
        }
        SupervisionTarget::OneHot => Ok(None),
    }
}

/// Soft weights for `target`, or the identity for one-hot supervision.
pub fn supervision_weights(
    fields: &SupervisionFields<'_>,
    target: &SupervisionTarget,
    batch: usize,
    beta: f64,
) -> Result<SoftWeightMatrix> {
    match supervision_distances(fields, target)? {
        Some(d) => soft_weights_from_distances(&d, beta),
        None => Ok(SoftWeightMatrix::identity(batch)),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn identical_states_give_uniform_rows() {
        let q = Tensor::from_rows(&[[0.3, -1.0, 2.0]; 3]).unwrap();
        let w = soft_weights(&q, 1.0).unwrap();
        for &v in w.weights.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn single_sample_is_one() {
        let q = Tensor::from_rows(&[[0.5, 0.5]]).unwrap();
        assert_eq!(soft_weights(&q, 0.3).unwrap().weights.data(), &[1.0]);
    }

    #[test]
    fn two_point_example() {
        let q = Tensor::from_rows(&[[0.0], [1.0]]).unwrap();
        let w = soft_weights(&q, 1.0).unwrap();
        let e = (-1.0f64).exp();
        let expected = [1.0 / (1.0 + e), e / (1.0 + e)];
        assert!((w.row(0)[0] - expected[0]).abs() < 1e-15);
        assert!((w.row(0)[1] - expected[1]).abs() < 1e-15);
        assert!((w.row(0)[0] - 0.73106).abs() < 1e-5);
        assert!((w.row(0)[1] - 0.26894).abs() < 1e-5);
    }

    #[test]
    fn invalid_inputs() {
        let q = Tensor::from_rows(&[[0.0], [1.0]]).unwrap();
        assert!(soft_weights(&q, 0.0).is_err());
        assert!(soft_weights(&q, -1.0).is_err());
        let bad = Tensor::from_rows(&[[0.0], [f64::INFINITY]]).unwrap();
        assert!(soft_weights(&bad, 1.0).is_err());
    }

    #[test]
    fn one_hot_is_identity() {
        let w = supervision_weights(&SupervisionFields::default(), &SupervisionTarget::OneHot, 4, 1.0).unwrap();
        assert_eq!(w.weights, Tensor::identity(4));
    }

    #[test]
    fn identical_next_actions_have_zero_distance() {
        let a = Tensor::from_rows(&[[0.1, -0.2, 1.0]; 4]).unwrap();
        let fields = SupervisionFields {
            next_action: Some(&a),
            ..Default::default()
        };
        let d = supervision_distances(&fields, &SupervisionTarget::NextAction).unwrap().unwrap();
        assert!(d.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn proprio_target_matches_soft_weights_bitwise() {
        let q = Tensor::from_rows(&[[0.1, 0.4, -1.0], [0.3, -0.2, 1.0], [2.0, 0.0, 0.5]]).unwrap();
        let fields = SupervisionFields {
            proprio: Some(&q),
            ..Default::default()
        };
        let a = supervision_weights(&fields, &SupervisionTarget::ProprioState, 3, 0.7).unwrap();
        let b = soft_weights(&q, 0.7).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn missing_field_is_an_error() {
        let err = supervision_distances(&SupervisionFields::default(), &SupervisionTarget::NextAction).unwrap_err();
        assert!(err.to_string().contains("next_action"));
    }

    fn batch() -> impl Strategy<Value = Vec<Vec<f64>>> {
        (1usize..8, 1usize..5).prop_flat_map(|(b, d)| {
            proptest::collection::vec(proptest::collection::vec(-5.0f64..5.0, d), b)
        })
    }

    proptest! {
        #[test]
        fn rows_are_stochastic_with_diagonal_max(q in batch(), beta in 0.1f64..10.0) {
            let q = Tensor::from_rows(&q).unwrap();
            let w = soft_weights(&q, beta).unwrap();
            for i in 0..w.batch() {
                let row = w.row(i);
                prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
                prop_assert!(row.iter().all(|&v| v > 0.0 && v <= 1.0));
                let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                prop_assert_eq!(row[i], max);
            }
        }

        #[test]
        fn distance_and_temperature_scale_together(q in batch(), beta in 0.05f64..5.0, c in 0.1f64..10.0) {
            let qt = Tensor::from_rows(&q).unwrap();
            let scaled = qt.map(|v| v * c);
            let a = soft_weights(&qt, beta).unwrap();
            let b = soft_weights(&scaled, c * beta).unwrap();
            for (x, y) in a.weights.data().iter().zip(b.weights.data()) {
                prop_assert!((x - y).abs() < 1e-12);
            }
        }
    }
}
