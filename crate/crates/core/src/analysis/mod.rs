//! Alignment between learned embeddings and proprioceptive states.

mod dump;
mod metrics;

pub use dump::{dump_embeddings, select_trajectories, EmbeddingDump};
pub use metrics::{center_columns, cknna, linear_cka};
