//! The full policy: encoder, adapter, projector and flow-matching decoder
//! sharing one parameter store.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::encoder::{adapter_forward, backbone_forward, init_encoder, pool, AdapterOutput, EncoderDims, EncoderInput};
use crate::error::{Error, Result};
use crate::flowmatch::{init_decoder, sample_actions, DecoderDims};
use crate::params::{Group, ParamStore};
use crate::synthenv::{Action, DatasetStats, EnvConfig, Observation, Policy};
use crate::tensor::{Graph, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelDims {
    pub encoder: EncoderDims,
    pub decoder: DecoderDims,
}

impl Default for ModelDims {
    fn default() -> Self {
        ModelDims {
            encoder: EncoderDims::default(),
            decoder: DecoderDims::default(),
        }
    }
}

impl ModelDims {
    pub fn validate(&self) -> Result<()> {
        if self.encoder.d_model != self.decoder.d_model {
            return Err(Error::InvalidArgument(format!(
                "encoder width {} differs from decoder conditioning width {}",
                self.encoder.d_model, self.decoder.d_model
            )));
        }
        if self.decoder.d_a != 3 || self.decoder.d_q != 3 {
            return Err(Error::InvalidArgument("actions and proprio are 3-dimensional".into()));
        }
        Ok(())
    }
}

pub fn init_params(dims: &ModelDims, seed: u64) -> Result<ParamStore> {
    dims.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = ParamStore::new();
    init_encoder(&mut p, &dims.encoder, &mut rng);
    init_decoder(&mut p, &dims.decoder, &mut rng);
    Ok(p)
}

/// Actions are regressed in a rescaled space: deltas divided by the clip
/// bound, grip mapped from {0, 1} to {−1, 1}.
pub fn normalize_action(cfg: &EnvConfig, a: &Action) -> [f64; 3] {
    [a[0] / cfg.max_delta, a[1] / cfg.max_delta, 2.0 * a[2] - 1.0]
}

pub fn denormalize_action(cfg: &EnvConfig, a: &[f64]) -> Action {
    [a[0] * cfg.max_delta, a[1] * cfg.max_delta, 0.5 * (a[2] + 1.0)]
}

/// Backbone followed by the adapter, without augmentation.
pub fn encode(
    g: &mut Graph,
    bp: &crate::params::BoundParams,
    dims: &ModelDims,
    input: &EncoderInput,
) -> Result<AdapterOutput> {
    let seq = backbone_forward(g, bp, &dims.encoder, input)?;
    adapter_forward(g, bp, &seq)
}

/// Token-mean of the adapter's content outputs, `B × d_model`.
pub fn pooled_embedding(params: &ParamStore, dims: &ModelDims, input: &EncoderInput) -> Result<Tensor> {
    let mut g = Graph::new();
    let bp = params.bind(&mut g, &Group::ALL)?;
    let out = encode(&mut g, &bp, dims, input)?;
    let pooled = pool(&mut g, &out.h)?;
    Ok(g.value(pooled).clone())
}

/// Builds a one-sample encoder input.
pub fn single_input(views: &[Vec<f64>], instruction: usize) -> Result<EncoderInput> {
    let views = views
        .iter()
        .map(|v| Tensor::new(vec![1, v.len()], v.clone()))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    Ok(EncoderInput {
        views,
        instructions: vec![instruction],
    })
}

/// Closed-loop policy backed by trained parameters.
#[derive(Debug, Clone)]
pub struct ModelPolicy {
    pub params: ParamStore,
    pub dims: ModelDims,
    pub stats: DatasetStats,
    pub env: EnvConfig,
    pub denoise_steps: usize,
}

impl Policy for ModelPolicy {
    fn plan(&mut self, obs: &Observation<'_>, rng: &mut ChaCha8Rng) -> Result<Vec<Action>> {
        let input = single_input(&obs.views, obs.instruction_id)?;
        let pooled = pooled_embedding(&self.params, &self.dims, &input)?;
        let q = Tensor::new(vec![1, 3], self.stats.normalize(&obs.proprio).to_vec())?;
        let chunk = sample_actions(&self.params, &pooled, &q, &self.dims.decoder, self.denoise_steps, rng)?;
        Ok(chunk.data().chunks(3).map(|a| denormalize_action(&self.env, a)).collect())
    }
}
