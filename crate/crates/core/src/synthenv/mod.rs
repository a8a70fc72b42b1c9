//! Planar pick-and-place world with a scripted expert.
//!
//! A gripper moves in the unit square, picks up a single object and drops it
//! in one of two target regions selected by the instruction id. Observations
//! are frozen random linear projections of scene features ("views").

mod dataset;
mod eval;
mod render;
mod scene;

pub use dataset::{expert_trajectory, generate_dataset, stats_path, Dataset, DatasetStats, Trajectory};
pub use eval::{evaluate_policy, EpisodeRecord, EvalReport, ExpertPolicy, Observation, Policy, RandomPolicy};
pub use render::{Renderer, ViewKind};
pub use scene::{clip_action, env_step, scripted_expert, Action, SceneState, TARGETS};

/// Environment constants shared by data generation and evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct EnvConfig {
    pub views: usize,
    pub view_dim: usize,
    pub horizon: usize,
    pub max_steps: usize,
    pub pick_radius: f64,
    pub place_radius: f64,
    pub max_delta: f64,
    pub sigma_obs: f64,
    /// Proportional gain of the scripted expert.
    pub expert_gain: f64,
    /// The expert closes/opens once its next position is within this
    /// fraction of the pick/place radius.
    pub expert_margin: f64,
}

impl Default for EnvConfig {
    fn default() -> Self {
        EnvConfig {
            views: 2,
            view_dim: 16,
            horizon: 8,
            max_steps: 200,
            pick_radius: 0.05,
            place_radius: 0.05,
            max_delta: 0.1,
            sigma_obs: 0.01,
            expert_gain: 0.5,
            expert_margin: 0.6,
        }
    }
}
