//! Proprioception-weighted contrastive regularizer: soft weights, the
//! weighted InfoNCE loss, token-level cutoff augmentations and the weight
//! schedule.

mod augment;
mod dtw;
mod loss;
mod schedule;
mod weights;

pub use augment::{
    apply_embedding_mask, apply_mask, cutoff_mask, embedding_cutoff_mask, feature_cutoff, token_cutoff, view_cutoff,
    view_mask, AugmentationKind, CutoffMask,
};
pub use dtw::{dtw, soft_dtw};
pub use loss::rscl_loss;
pub use schedule::lambda_schedule;
pub use weights::{
    pairwise_euclidean, soft_weights, soft_weights_from_distances, supervision_distances, supervision_weights,
    SoftWeightMatrix, SupervisionFields, SupervisionTarget,
};
