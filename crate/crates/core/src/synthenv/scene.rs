use rand::Rng;
use serde::{Deserialize, Serialize};

use super::EnvConfig;
use crate::error::{Error, Result};

/// `(Δx, Δy, grip)`; grip below 0.5 closes the gripper.
pub type Action = [f64; 3];

/// Fixed target regions, indexed by task / instruction id.
pub const TARGETS: [[f64; 2]; 2] = [[0.2, 0.85], [0.8, 0.85]];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SceneState {
    pub gripper_xy: [f64; 2],
    pub gripper_open: f64,
    pub object_xy: [f64; 2],
    pub target_xy: [f64; 2],
    pub holding: bool,
    pub task_id: usize,
}

impl SceneState {
    /// Random start: open gripper anywhere, object in the lower part of the
    /// table, target chosen by the task id.
    pub fn sample<R: Rng>(rng: &mut R) -> Self {
        let task_id = rng.gen_range(0..TARGETS.len());
        SceneState {
            gripper_xy: [rng.gen_range(0.1..0.9), rng.gen_range(0.1..0.9)],
            gripper_open: 1.0,
            object_xy: [rng.gen_range(0.1..0.9), rng.gen_range(0.1..0.55)],
            target_xy: TARGETS[task_id],
            holding: false,
            task_id,
        }
    }

    /// Proprioceptive reading `(x, y, open)`.
    pub fn proprio(&self) -> [f64; 3] {
        [self.gripper_xy[0], self.gripper_xy[1], self.gripper_open]
    }

    /// Object released inside the target region.
    pub fn is_success(&self, cfg: &EnvConfig) -> bool {
        !self.holding && dist(self.object_xy, self.target_xy) < cfg.place_radius
    }
}

pub(crate) fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

fn clip_unit(xy: [f64; 2]) -> [f64; 2] {
    [xy[0].clamp(0.0, 1.0), xy[1].clamp(0.0, 1.0)]
}

pub fn clip_action(cfg: &EnvConfig, a: Action) -> Action {
    [
        a[0].clamp(-cfg.max_delta, cfg.max_delta),
        a[1].clamp(-cfg.max_delta, cfg.max_delta),
        a[2].clamp(0.0, 1.0),
    ]
}

pub fn env_step(cfg: &EnvConfig, state: &SceneState, action: Action) -> Result<SceneState> {
    if action.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("action {action:?}")));
    }
    let [dx, dy, grip] = clip_action(cfg, action);
    let mut s = *state;
    s.gripper_xy = clip_unit([s.gripper_xy[0] + dx, s.gripper_xy[1] + dy]);
    let closing = grip < 0.5;
    if s.holding {
        s.object_xy = s.gripper_xy;
        if !closing {
            s.holding = false;
        }
    } else if closing && dist(s.gripper_xy, s.object_xy) < cfg.pick_radius {
        s.holding = true;
        s.object_xy = s.gripper_xy;
    }
    s.object_xy = clip_unit(s.object_xy);
    s.gripper_open = if closing { 0.0 } else { 1.0 };
    Ok(s)
}

/// Proportional pick-and-place controller.
pub fn scripted_expert(cfg: &EnvConfig, state: &SceneState) -> Action {
    if state.is_success(cfg) {
        return [0.0, 0.0, 1.0];
    }
    let (goal, radius) = if state.holding {
        (state.target_xy, cfg.place_radius)
    } else {
        (state.object_xy, cfg.pick_radius)
    };
    let dx = (cfg.expert_gain * (goal[0] - state.gripper_xy[0])).clamp(-cfg.max_delta, cfg.max_delta);
    let dy = (cfg.expert_gain * (goal[1] - state.gripper_xy[1])).clamp(-cfg.max_delta, cfg.max_delta);
    let next = [state.gripper_xy[0] + dx, state.gripper_xy[1] + dy];
    let arrived = dist(next, goal) < cfg.expert_margin * radius;
    // Close on arrival at the object; keep closed while carrying until arrival at the target.
    let grip = match (state.holding, arrived) {
        (false, true) => 0.0,
        (false, false) => 1.0,
        (true, true) => 1.0,
        (true, false) => 0.0,
    };
    [dx, dy, grip]
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cfg() -> EnvConfig {
        EnvConfig::default()
    }

    fn closed_state() -> SceneState {
        SceneState {
            gripper_xy: [0.3, 0.3],
            gripper_open: 0.0,
            object_xy: [0.7, 0.2],
            target_xy: TARGETS[0],
            holding: false,
            task_id: 0,
        }
    }

    #[test]
    fn zero_action_is_a_fixed_point() {
        let s = closed_state();
        assert_eq!(env_step(&cfg(), &s, [0.0, 0.0, 0.0]).unwrap(), s);
    }

    #[test]
    fn closing_at_object_grabs_it() {
        let mut s = closed_state();
        s.gripper_xy = s.object_xy;
        let next = env_step(&cfg(), &s, [0.0, 0.0, 0.0]).unwrap();
        assert!(next.holding);
    }

    #[test]
    fn held_object_follows_gripper() {
        let mut s = closed_state();
        s.gripper_xy = [0.4, 0.4];
        s.object_xy = [0.4, 0.4];
        s.holding = true;
        let next = env_step(&cfg(), &s, [0.05, 0.0, 0.0]).unwrap();
        assert!((next.gripper_xy[0] - 0.45).abs() < 1e-12);
        assert_eq!(next.object_xy, next.gripper_xy);
        assert!(next.holding);
    }

    #[test]
    fn opening_releases() {
        let mut s = closed_state();
        s.object_xy = s.gripper_xy;
        s.holding = true;
        let next = env_step(&cfg(), &s, [0.0, 0.0, 1.0]).unwrap();
        assert!(!next.holding);
        assert_eq!(next.gripper_open, 1.0);
    }

    #[test]
    fn non_finite_action_is_rejected() {
        assert!(env_step(&cfg(), &closed_state(), [f64::NAN, 0.0, 0.0]).is_err());
    }

    #[test]
    fn large_actions_are_clipped() {
        let s = closed_state();
        let next = env_step(&cfg(), &s, [5.0, -5.0, 3.0]).unwrap();
        assert!((next.gripper_xy[0] - 0.4).abs() < 1e-12);
        assert!((next.gripper_xy[1] - 0.2).abs() < 1e-12);
    }

    #[test]
    fn expert_closes_on_object() {
        let mut s = closed_state();
        s.gripper_open = 1.0;
        s.gripper_xy = s.object_xy;
        let a = scripted_expert(&cfg(), &s);
        assert!(a[2] < 0.5);
    }

    #[test]
    fn expert_carries_toward_target() {
        let mut s = closed_state();
        s.gripper_xy = [0.1, 0.5];
        s.object_xy = s.gripper_xy;
        s.holding = true;
        s.target_xy = [0.8, 0.5];
        let a = scripted_expert(&cfg(), &s);
        assert!(a[0] > 0.0);
        assert!(a[2] < 0.5);
    }

    #[test]
    fn expert_actions_within_clip_bounds() {
        let c = cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..200 {
            let s = SceneState::sample(&mut rng);
            let a = scripted_expert(&c, &s);
            assert_eq!(clip_action(&c, a), a);
        }
    }

    #[test]
    fn expert_succeeds_from_seeded_starts() {
        let c = cfg();
        let mut ok = 0;
        for seed in 0..1000u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut s = SceneState::sample(&mut rng);
            for _ in 0..c.max_steps {
                s = env_step(&c, &s, scripted_expert(&c, &s)).unwrap();
                if s.is_success(&c) {
                    ok += 1;
                    break;
                }
            }
        }
        assert!(ok >= 990, "expert succeeded {ok}/1000");
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn positions_stay_in_unit_square(
                seed in 0u64..10_000,
                actions in proptest::collection::vec((-1.0f64..1.0, -1.0f64..1.0, -0.5f64..1.5), 1..40),
            ) {
                let c = EnvConfig::default();
                let mut s = SceneState::sample(&mut ChaCha8Rng::seed_from_u64(seed));
                for (x, y, g) in actions {
                    s = env_step(&c, &s, [x, y, g]).unwrap();
                    for v in s.gripper_xy.iter().chain(s.object_xy.iter()) {
                        prop_assert!((0.0..=1.0).contains(v));
                    }
                    if s.holding {
                        prop_assert_eq!(s.object_xy, s.gripper_xy);
                    }
                }
            }
        }
    }
}
