use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{EnvConfig, SceneState};
use crate::error::{Error, Result};

/// Feature set a view is built from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ViewKind {
    /// Absolute scene coordinates and flags.
    Exterior,
    /// Object position relative to the gripper, plus flags.
    Wrist,
}

impl ViewKind {
    fn features(self, s: &SceneState) -> Vec<f64> {
        let holding = if s.holding { 1.0 } else { 0.0 };
        match self {
            ViewKind::Exterior => vec![
                s.gripper_xy[0],
                s.gripper_xy[1],
                s.gripper_open,
                s.object_xy[0],
                s.object_xy[1],
                s.target_xy[0],
                s.target_xy[1],
                holding,
            ],
            ViewKind::Wrist => vec![
                s.object_xy[0] - s.gripper_xy[0],
                s.object_xy[1] - s.gripper_xy[1],
                s.gripper_open,
                holding,
            ],
        }
    }
}

/// Frozen random linear "cameras". View 0 is exterior, view 1 wrist, and any
/// further views alternate between the two feature sets with their own maps.
#[derive(Debug, Clone)]
pub struct Renderer {
    views: Vec<(ViewKind, Vec<Vec<f64>>)>,
    sigma_obs: f64,
}

impl Renderer {
    pub fn new(cfg: &EnvConfig, seed: u64) -> Result<Self> {
        if cfg.views < 2 {
            return Err(Error::InvalidArgument(format!(
                "at least 2 views are required, got {}",
                cfg.views
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(0x7265_6e64);
        let probe = SceneState {
            gripper_xy: [0.0; 2],
            gripper_open: 0.0,
            object_xy: [0.0; 2],
            target_xy: [0.0; 2],
            holding: false,
            task_id: 0,
        };
        let views = (0..cfg.views)
            .map(|i| {
                let kind = if i % 2 == 0 { ViewKind::Exterior } else { ViewKind::Wrist };
                let fan_in = kind.features(&probe).len();
                let map = (0..cfg.view_dim)
                    .map(|_| {
                        (0..fan_in)
                            .map(|_| StandardNormal.sample(&mut rng))
                            .collect::<Vec<f64>>()
                    })
                    .collect();
                (kind, map)
            })
            .collect();
        Ok(Renderer {
            views,
            sigma_obs: cfg.sigma_obs,
        })
    }

    pub fn num_views(&self) -> usize {
        self.views.len()
    }

    pub fn kind(&self, view: usize) -> ViewKind {
        self.views[view].0
    }

    /// Noise-free observation of every view.
    pub fn render_clean(&self, s: &SceneState) -> Vec<Vec<f64>> {
        self.views
            .iter()
            .map(|(kind, map)| {
                let f = kind.features(s);
                map.iter()
                    .map(|row| row.iter().zip(&f).map(|(a, b)| a * b).sum())
                    .collect()
            })
            .collect()
    }

    pub fn render<R: Rng>(&self, s: &SceneState, rng: &mut R) -> Vec<Vec<f64>> {
        let mut views = self.render_clean(s);
        if self.sigma_obs > 0.0 {
            for v in views.iter_mut().flatten() {
                let n: f64 = StandardNormal.sample(rng);
                *v += self.sigma_obs * n;
            }
        }
        views
    }
}
