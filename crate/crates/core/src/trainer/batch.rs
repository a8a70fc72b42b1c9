use rand::Rng;

use crate::encoder::EncoderInput;
use crate::error::{Error, Result};
use crate::model::normalize_action;
use crate::rscl::SupervisionFields;
use crate::synthenv::{Dataset, EnvConfig};
use crate::tensor::Tensor;

/// One training batch. Actions are in the normalized space of
/// [`normalize_action`]; proprio is normalized with the dataset statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub input: EncoderInput,
    /// `B × 3`
    pub proprio: Tensor,
    /// `B × H·3`, each row a flattened chunk.
    pub actions: Tensor,
    /// `B × 3`, the first action of each chunk.
    pub next_action: Tensor,
    /// One `H × 3` chunk per sample.
    pub action_sequences: Vec<Tensor>,
    /// `(trajectory index, timestep)` of every sample.
    pub samples: Vec<(usize, usize)>,
}

impl Batch {
    pub fn size(&self) -> usize {
        self.samples.len()
    }

    pub fn supervision_fields(&self) -> SupervisionFields<'_> {
        SupervisionFields {
            proprio: Some(&self.proprio),
            next_action: Some(&self.next_action),
            action_sequences: Some(&self.action_sequences),
        }
    }
}

/// Samples `b` (trajectory, timestep) pairs uniformly over all timesteps of
/// the dataset.
pub fn assemble_batch<R: Rng>(ds: &Dataset, b: usize, env: &EnvConfig, rng: &mut R) -> Result<Batch> {
    let mut prefix = Vec::with_capacity(ds.trajectories.len());
    let mut total = 0usize;
    for t in &ds.trajectories {
        total += t.len();
        prefix.push(total);
    }
    if total == 0 {
        return Err(Error::InvalidArgument("empty dataset".into()));
    }
    let samples: Vec<(usize, usize)> = (0..b)
        .map(|_| {
            let k = rng.gen_range(0..total);
            let ti = prefix.partition_point(|&p| p <= k);
            let start = if ti == 0 { 0 } else { prefix[ti - 1] };
            (ti, k - start)
        })
        .collect();
    batch_from_samples(ds, &samples, env)
}

/// Builds a batch from explicit `(trajectory, timestep)` pairs.
pub fn batch_from_samples(ds: &Dataset, samples: &[(usize, usize)], env: &EnvConfig) -> Result<Batch> {
    let b = samples.len();
    let h = env.horizon;
    let v = ds.stats.views;
    let mut views: Vec<Vec<f64>> = vec![Vec::with_capacity(b * ds.stats.view_dim); v];
    let mut instructions = Vec::with_capacity(b);
    let mut proprio = Vec::with_capacity(b * 3);
    let mut actions = Vec::with_capacity(b * h * 3);
    let mut next = Vec::with_capacity(b * 3);
    let mut seqs = Vec::with_capacity(b);
    for &(ti, t) in samples {
        let traj = ds
            .trajectories
            .get(ti)
            .filter(|tr| t < tr.len())
            .ok_or_else(|| Error::InvalidArgument(format!("sample ({ti}, {t}) out of range")))?;
        for (vi, rows) in views.iter_mut().enumerate() {
            rows.extend_from_slice(&traj.views[t][vi]);
        }
        instructions.push(traj.instruction_id());
        proprio.extend_from_slice(&ds.stats.normalize(&traj.proprio[t]));
        let chunk: Vec<f64> = traj
            .action_chunk(t, h)
            .iter()
            .flat_map(|a| normalize_action(env, a))
            .collect();
        next.extend_from_slice(&chunk[..3]);
        seqs.push(Tensor::new(vec![h, 3], chunk.clone())?);
        actions.extend(chunk);
    }
    let views = views
        .into_iter()
        .map(|r| Tensor::new(vec![b, ds.stats.view_dim], r))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    Ok(Batch {
        input: EncoderInput { views, instructions },
        proprio: Tensor::new(vec![b, 3], proprio)?,
        actions: Tensor::new(vec![b, h * 3], actions)?,
        next_action: Tensor::new(vec![b, 3], next)?,
        action_sequences: seqs,
        samples: samples.to_vec(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthenv::generate_dataset;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn fixed_seed_gives_identical_batches() {
        let env = EnvConfig::default();
        let ds = generate_dataset(4, &env, 2).unwrap();
        let a = assemble_batch(&ds, 1, &env, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let b = assemble_batch(&ds, 1, &env, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.actions.shape(), &[1, 24]);
    }

    #[test]
    fn last_timestep_chunk_repeats_final_action() {
        let env = EnvConfig::default();
        let ds = generate_dataset(2, &env, 2).unwrap();
        let t = ds.trajectories[1].len() - 1;
        let b = batch_from_samples(&ds, &[(1, t)], &env).unwrap();
        let last = normalize_action(&env, ds.trajectories[1].actions.last().unwrap());
        for r in 0..env.horizon {
            assert_eq!(b.action_sequences[0].row(r), &last);
        }
    }

    #[test]
    fn sampling_covers_every_timestep_uniformly() {
        let env = EnvConfig::default();
        let ds = generate_dataset(3, &env, 4).unwrap();
        let total: usize = ds.trajectories.iter().map(|t| t.len()).sum();
        let b = assemble_batch(&ds, 200 * total, &env, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let mut counts = std::collections::HashMap::new();
        for s in &b.samples {
            *counts.entry(*s).or_insert(0usize) += 1;
        }
        assert_eq!(counts.len(), total);
        assert!(counts.values().all(|&c| c > 100 && c < 300));
    }

    #[test]
    fn empty_dataset_is_an_error() {
        let env = EnvConfig::default();
        let mut ds = generate_dataset(1, &env, 4).unwrap();
        ds.trajectories.clear();
        assert!(assemble_batch(&ds, 2, &env, &mut ChaCha8Rng::seed_from_u64(1)).is_err());
    }
}
