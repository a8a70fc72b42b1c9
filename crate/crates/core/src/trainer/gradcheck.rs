use serde::Serialize;

use super::config::TrainConfig;
use super::step::{build_objective, Objective, Trainer};
use crate::error::Result;
use crate::synthenv::generate_dataset;

/// Result of checking one objective.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LossCheck {
    pub loss: &'static str,
    pub max_rel_err: f64,
    pub worst_param: String,
    /// Analytic and numeric derivative at the worst coordinate.
    pub worst_values: (f64, f64),
    pub coords_checked: usize,
}

/// Central-difference check of the flow-matching, contrastive and joint
/// objectives at a freshly initialized model. `coords_per_param` bounds the
/// probed coordinates of each tensor (evenly spaced); `None` checks all.
pub fn check_objectives(
    cfg: &TrainConfig,
    seed: u64,
    batch: usize,
    coords_per_param: Option<usize>,
    step: f64,
) -> Result<Vec<LossCheck>> {
    let mut cfg = cfg.clone();
    cfg.batch_size = batch;
    cfg.train_seed = seed;
    cfg.validate()?;
    let env = cfg.env_config();
    let ds = generate_dataset(8, &env, seed)?;
    let trainer = Trainer::new(cfg.clone(), ds)?;
    let (b, noise, weights) = trainer.prepare()?;
    let names: Vec<&str> = trainer.trainable.iter().map(String::as_str).collect();
    let lambda = 0.7;
    let mut out = Vec::new();
    let mut objectives = vec![("flow_matching", Objective::FlowMatching)];
    if weights.is_some() {
        objectives.push(("contrastive", Objective::Contrastive));
        objectives.push(("joint", Objective::Total { lambda }));
    }
    for (label, obj) in objectives {
        let rep = trainer.params.gradcheck(&names, step, coords_per_param, |g, bp| {
            Ok(build_objective(g, bp, &cfg, &trainer.dims, &b, &noise, weights.as_ref(), obj)?.root)
        })?;
        out.push(LossCheck {
            loss: label,
            max_rel_err: rep.max_rel_err,
            worst_param: names[rep.worst.0].to_string(),
            worst_values: rep.worst_values,
            coords_checked: rep.coords_checked,
        });
    }
    Ok(out)
}
