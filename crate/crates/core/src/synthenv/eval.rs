use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{env_step, scripted_expert, Action, EnvConfig, Renderer, SceneState};
use crate::error::{Error, Result};

/// What a policy sees at a re-planning point.
#[derive(Debug, Clone)]
pub struct Observation<'a> {
    pub views: Vec<Vec<f64>>,
    pub proprio: [f64; 3],
    pub instruction_id: usize,
    /// Ground-truth state; only the scripted expert reads it.
    pub state: &'a SceneState,
}

/// Closed-loop controller. Each call returns a chunk of actions that is
/// executed in full before the next call.
pub trait Policy {
    fn plan(&mut self, obs: &Observation<'_>, rng: &mut ChaCha8Rng) -> Result<Vec<Action>>;
}

/// The scripted expert, re-planning every step.
#[derive(Debug, Clone, Default)]
pub struct ExpertPolicy {
    pub cfg: EnvConfig,
}

impl Policy for ExpertPolicy {
    fn plan(&mut self, obs: &Observation<'_>, _rng: &mut ChaCha8Rng) -> Result<Vec<Action>> {
        Ok(vec![scripted_expert(&self.cfg, obs.state)])
    }
}

/// Uniform random actions within the clip bounds.
#[derive(Debug, Clone, Default)]
pub struct RandomPolicy {
    pub cfg: EnvConfig,
}

impl Policy for RandomPolicy {
    fn plan(&mut self, _obs: &Observation<'_>, rng: &mut ChaCha8Rng) -> Result<Vec<Action>> {
        let d = self.cfg.max_delta;
        Ok(vec![[rng.gen_range(-d..d), rng.gen_range(-d..d), rng.gen_range(0.0..1.0)]])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRecord {
    pub episode: usize,
    pub seed: u64,
    pub task_id: usize,
    pub success: bool,
    pub steps: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub success_rate: f64,
    pub episodes: Vec<EpisodeRecord>,
}

/// Runs `n_episodes` closed-loop rollouts. Episode `i` starts from the scene
/// drawn with seed `seed + i`; it ends on success or after `cfg.max_steps`.
pub fn evaluate_policy<P: Policy + ?Sized>(
    policy: &mut P,
    cfg: &EnvConfig,
    renderer: &Renderer,
    n_episodes: usize,
    seed: u64,
) -> Result<EvalReport> {
    if n_episodes == 0 {
        return Err(Error::EmptyEvaluation);
    }
    let mut episodes = Vec::with_capacity(n_episodes);
    for episode in 0..n_episodes {
        let ep_seed = seed.wrapping_add(episode as u64);
        let mut rng = ChaCha8Rng::seed_from_u64(ep_seed);
        let mut state = SceneState::sample(&mut rng);
        let task_id = state.task_id;
        let mut steps = 0;
        let mut success = false;
        'episode: while steps < cfg.max_steps {
            let obs = Observation {
                views: renderer.render(&state, &mut rng),
                proprio: state.proprio(),
                instruction_id: state.task_id,
                state: &state,
            };
            let chunk = policy.plan(&obs, &mut rng)?;
            if chunk.is_empty() {
                return Err(Error::InvalidArgument("policy returned an empty action chunk".into()));
            }
            for a in chunk {
                state = env_step(cfg, &state, a)?;
                steps += 1;
                if state.is_success(cfg) {
                    success = true;
                    break 'episode;
                }
                if steps >= cfg.max_steps {
                    break 'episode;
                }
            }
        }
        episodes.push(EpisodeRecord {
            episode,
            seed: ep_seed,
            task_id,
            success,
            steps,
        });
    }
    let success_rate = episodes.iter().filter(|e| e.success).count() as f64 / n_episodes as f64;
    Ok(EvalReport { success_rate, episodes })
}
