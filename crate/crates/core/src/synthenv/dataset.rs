use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{env_step, scripted_expert, Action, EnvConfig, Renderer, SceneState};
use crate::error::{Error, Result};

/// One expert demonstration. Serialized as one JSON line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub seed: u64,
    pub task_id: usize,
    /// `[step][view][feature]`
    pub views: Vec<Vec<Vec<f64>>>,
    pub proprio: Vec<[f64; 3]>,
    pub actions: Vec<Action>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    pub fn instruction_id(&self) -> usize {
        self.task_id
    }

    /// Actions `t .. t+horizon`, repeating the final action past the end.
    pub fn action_chunk(&self, t: usize, horizon: usize) -> Vec<Action> {
        let last = self.actions.len() - 1;
        (t..t + horizon).map(|i| self.actions[i.min(last)]).collect()
    }
}

/// Contents of the `<dataset>.stats.json` sidecar.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub proprio_mean: [f64; 3],
    pub proprio_std: [f64; 3],
    /// Seed of the frozen view maps; evaluation renders with the same maps.
    pub render_seed: u64,
    pub n_traj: usize,
    /// Expert rollouts discarded for not finishing within the step limit.
    pub redrawn: usize,
    pub views: usize,
    pub view_dim: usize,
}

impl DatasetStats {
    pub fn from_trajectories(trajs: &[Trajectory], cfg: &EnvConfig, render_seed: u64, redrawn: usize) -> Self {
        let mut sum = [0.0; 3];
        let mut sq = [0.0; 3];
        let mut n = 0.0;
        for q in trajs.iter().flat_map(|t| t.proprio.iter()) {
            for d in 0..3 {
                sum[d] += q[d];
                sq[d] += q[d] * q[d];
            }
            n += 1.0;
        }
        let mut mean = [0.0; 3];
        let mut std = [1.0; 3];
        if n > 0.0 {
            for d in 0..3 {
                mean[d] = sum[d] / n;
                let var = (sq[d] / n - mean[d] * mean[d]).max(0.0);
                std[d] = if var > 1e-12 { var.sqrt() } else { 1.0 };
            }
        }
        DatasetStats {
            proprio_mean: mean,
            proprio_std: std,
            render_seed,
            n_traj: trajs.len(),
            redrawn,
            views: cfg.views,
            view_dim: cfg.view_dim,
        }
    }

    pub fn normalize(&self, q: &[f64; 3]) -> [f64; 3] {
        let mut out = [0.0; 3];
        for d in 0..3 {
            out[d] = (q[d] - self.proprio_mean[d]) / self.proprio_std[d];
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub trajectories: Vec<Trajectory>,
    pub stats: DatasetStats,
}

/// Rolls out the expert from the start state drawn with `seed`.
/// Returns `None` if it does not succeed within `cfg.max_steps`.
pub fn expert_trajectory(cfg: &EnvConfig, renderer: &Renderer, seed: u64) -> Result<Option<Trajectory>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut state = SceneState::sample(&mut rng);
    let mut traj = Trajectory {
        seed,
        task_id: state.task_id,
        views: Vec::new(),
        proprio: Vec::new(),
        actions: Vec::new(),
    };
    let record = |traj: &mut Trajectory, s: &SceneState, a: Action, rng: &mut ChaCha8Rng| {
        traj.views.push(renderer.render(s, rng));
        traj.proprio.push(s.proprio());
        traj.actions.push(a);
    };
    let mut success = false;
    for _ in 0..cfg.max_steps {
        let a = scripted_expert(cfg, &state);
        record(&mut traj, &state, a, &mut rng);
        state = env_step(cfg, &state, a)?;
        if state.is_success(cfg) {
            success = true;
            break;
        }
    }
    if !success {
        return Ok(None);
    }
    // Idle at the goal until every index has a full future chunk.
    while traj.actions.len() < cfg.horizon + 1 {
        let a = scripted_expert(cfg, &state);
        record(&mut traj, &state, a, &mut rng);
        state = env_step(cfg, &state, a)?;
    }
    Ok(Some(traj))
}

/// `n_traj` successful expert demonstrations. Trajectory `i` uses seed
/// `seed + i`; a failed rollout is redrawn with a seed offset by multiples
/// of `n_traj` and counted in the stats.
pub fn generate_dataset(n_traj: usize, cfg: &EnvConfig, seed: u64) -> Result<Dataset> {
    if n_traj == 0 {
        return Err(Error::InvalidArgument("n_traj must be positive".into()));
    }
    let renderer = Renderer::new(cfg, seed)?;
    let mut trajectories = Vec::with_capacity(n_traj);
    let mut redrawn = 0;
    for i in 0..n_traj as u64 {
        let mut attempt = 0u64;
        loop {
            let s = seed.wrapping_add(i).wrapping_add(attempt * n_traj as u64);
            if let Some(t) = expert_trajectory(cfg, &renderer, s)? {
                trajectories.push(t);
                break;
            }
            redrawn += 1;
            attempt += 1;
            if attempt > 1000 {
                return Err(Error::InvalidArgument(format!(
                    "expert failed 1000 redraws for trajectory {i}"
                )));
            }
        }
    }
    let stats = DatasetStats::from_trajectories(&trajectories, cfg, seed, redrawn);
    Ok(Dataset { trajectories, stats })
}

pub fn stats_path(dataset: &Path) -> PathBuf {
    let mut s = dataset.as_os_str().to_owned();
    s.push(".stats.json");
    PathBuf::from(s)
}

impl Dataset {
    /// Writes the JSON-lines file and its stats sidecar.
    pub fn write(&self, path: &Path) -> Result<()> {
        let f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(f);
        for t in &self.trajectories {
            let line = serde_json::to_string(t).map_err(|e| Error::format("trajectory", e))?;
            writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))?;
        let sp = stats_path(path);
        let stats = serde_json::to_string_pretty(&self.stats).map_err(|e| Error::format("stats", e))?;
        fs::write(&sp, stats + "\n").map_err(|e| Error::io(&sp, e))?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut trajectories = Vec::new();
        for (i, line) in BufReader::new(f).lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let t: Trajectory = serde_json::from_str(&line)
                .map_err(|e| Error::format(format!("dataset line {}", i + 1), e))?;
            trajectories.push(t);
        }
        let sp = stats_path(path);
        let raw = fs::read_to_string(&sp).map_err(|e| Error::io(&sp, e))?;
        let stats: DatasetStats = serde_json::from_str(&raw).map_err(|e| Error::format("stats sidecar", e))?;
        let ds = Dataset { trajectories, stats };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<()> {
        for (i, t) in self.trajectories.iter().enumerate() {
            let n = t.actions.len();
            if n == 0 || t.views.len() != n || t.proprio.len() != n {
                return Err(Error::format(
                    "dataset",
                    format!("trajectory {i} has inconsistent step counts"),
                ));
            }
            for v in &t.views {
                if v.len() != self.stats.views || v.iter().any(|x| x.len() != self.stats.view_dim) {
                    return Err(Error::format(
                        "dataset",
                        format!("trajectory {i} views do not match {}×{}", self.stats.views, self.stats.view_dim),
                    ));
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn chunk_pads_with_final_action() {
        let t = Trajectory {
            seed: 0,
            task_id: 0,
            views: vec![],
            proprio: vec![],
            actions: vec![[0.1, 0.0, 1.0], [0.2, 0.0, 0.0], [0.3, 0.0, 1.0]],
        };
        let c = t.action_chunk(2, 4);
        assert!(c.iter().all(|a| *a == [0.3, 0.0, 1.0]));
        let c = t.action_chunk(0, 2);
        assert_eq!(c, vec![[0.1, 0.0, 1.0], [0.2, 0.0, 0.0]]);
    }

    #[test]
    fn every_trajectory_is_long_enough_and_succeeds() {
        let cfg = EnvConfig::default();
        let ds = generate_dataset(200, &cfg, 3).unwrap();
        assert_eq!(ds.trajectories.len(), 200);
        let renderer = Renderer::new(&cfg, 3).unwrap();
        for t in &ds.trajectories {
            assert!(t.len() >= cfg.horizon + 1);
            // replaying the actions from the seeded start reaches the goal
            let mut rng = ChaCha8Rng::seed_from_u64(t.seed);
            let mut s = SceneState::sample(&mut rng);
            for a in &t.actions {
                s = env_step(&cfg, &s, *a).unwrap();
            }
            assert!(s.is_success(&cfg));
        }
        let _ = renderer;
    }

    #[test]
    fn distinct_seeds_differ() {
        let cfg = EnvConfig::default();
        let a = generate_dataset(1, &cfg, 1).unwrap();
        let b = generate_dataset(1, &cfg, 2).unwrap();
        assert_ne!(a.trajectories[0].proprio[0], b.trajectories[0].proprio[0]);
    }

    #[test]
    fn zero_trajectories_is_an_error() {
        assert!(generate_dataset(0, &EnvConfig::default(), 1).is_err());
    }

    #[test]
    fn write_is_byte_deterministic_and_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = EnvConfig::default();
        let p1 = dir.path().join("a.jsonl");
        let p2 = dir.path().join("b.jsonl");
        generate_dataset(3, &cfg, 7).unwrap().write(&p1).unwrap();
        generate_dataset(3, &cfg, 7).unwrap().write(&p2).unwrap();
        assert_eq!(fs::read(&p1).unwrap(), fs::read(&p2).unwrap());
        let back = Dataset::read(&p1).unwrap();
        assert_eq!(back, generate_dataset(3, &cfg, 7).unwrap());
    }

    #[test]
    fn normalized_mean_state_is_zero() {
        let ds = generate_dataset(20, &EnvConfig::default(), 11).unwrap();
        let z = ds.stats.normalize(&ds.stats.proprio_mean);
        assert!(z.iter().all(|v| v.abs() < 1e-12));
    }
}
