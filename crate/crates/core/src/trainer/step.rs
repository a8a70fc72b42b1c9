use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::batch::{assemble_batch, Batch};
use super::config::{CutoffLevel, LambdaSchedule, TrainConfig};
use crate::encoder::{adapter_forward, backbone_forward, pool, project, TokenSequence, TokenTag};
use crate::error::{Error, Result};
use crate::flowmatch::{decoder_forward, fm_loss, interpolate_rows, sample_timestep, standard_normal};
use crate::model::{init_params, ModelDims};
use crate::params::{BoundParams, Group, ParamStore};
use crate::rscl::{
    apply_embedding_mask, apply_mask, cutoff_mask, embedding_cutoff_mask, lambda_schedule, rscl_loss,
    supervision_weights, CutoffMask, SoftWeightMatrix,
};
use crate::synthenv::{Dataset, EnvConfig};
use crate::tensor::{AdamState, Graph, Tensor, TensorError, Var};

/// Per-step log record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: u64,
    pub loss_fm: f64,
    pub loss_rscl: f64,
    pub lambda: f64,
    pub total: f64,
    pub grad_norm: f64,
}

/// Random draws of one step, made before the graph is built so the same
/// draws can be replayed for several objectives.
#[derive(Debug, Clone, PartialEq)]
pub struct StepNoise {
    pub s: Vec<f64>,
    /// `B × H·d_a`
    pub epsilon: Tensor,
    pub mask: Option<CutoffMask>,
}

/// Which scalar to differentiate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Objective {
    /// `L_FM + λ·L_RS-CL`
    Total { lambda: f64 },
    FlowMatching,
    Contrastive,
}

#[derive(Debug, Clone)]
pub struct StepGradients {
    pub grads: ParamStore,
    pub loss_fm: f64,
    /// Zero when the contrastive term is disabled.
    pub loss_rscl: f64,
}

// RNG stream purposes; stream 0 of the train seed initializes the parameters.
const STREAM_BATCH: u64 = 1;
const STREAM_NOISE: u64 = 2;
const STREAM_AUGMENT: u64 = 3;

pub fn content_view_map(dims: &ModelDims) -> Vec<TokenTag> {
    let mut m = Vec::with_capacity(dims.encoder.content_tokens());
    for v in 0..dims.encoder.views {
        m.extend(std::iter::repeat(TokenTag::View(v)).take(dims.encoder.n_tok));
    }
    m.push(TokenTag::Instruction);
    m
}

/// Timesteps, flow noise and the augmentation mask for a batch of `b`.
pub fn draw_noise(
    cfg: &TrainConfig,
    dims: &ModelDims,
    b: usize,
    noise_rng: &mut ChaCha8Rng,
    aug_rng: &mut ChaCha8Rng,
) -> Result<StepNoise> {
    let s = (0..b).map(|_| sample_timestep(noise_rng)).collect();
    let epsilon = standard_normal(&[b, dims.decoder.chunk_len()], noise_rng);
    let mask = if cfg.supervision_target().is_none() {
        None
    } else {
        Some(match cfg.cutoff_level {
            CutoffLevel::Tokens => cutoff_mask(
                &cfg.augmentation_kind(),
                &content_view_map(dims),
                b,
                dims.encoder.d_model,
                aug_rng,
            )?,
            CutoffLevel::Embedding => embedding_cutoff_mask(b, dims.encoder.d_proj, dims.encoder.views, aug_rng)?,
        })
    };
    Ok(StepNoise { s, epsilon, mask })
}

pub fn frozen_groups(cfg: &TrainConfig) -> Vec<Group> {
    if cfg.freeze_backbone {
        vec![Group::Backbone]
    } else {
        vec![]
    }
}

/// Graph handles of one objective evaluation.
#[derive(Debug, Clone, Copy)]
pub struct ObjectiveVars {
    pub root: Var,
    pub fm: Var,
    pub rscl: Option<Var>,
}

/// Builds both losses and the requested objective from bound parameters.
pub fn build_objective(
    g: &mut Graph,
    bp: &BoundParams,
    cfg: &TrainConfig,
    dims: &ModelDims,
    batch: &Batch,
    noise: &StepNoise,
    weights: Option<&SoftWeightMatrix>,
    objective: Objective,
) -> Result<ObjectiveVars> {
    let seq = backbone_forward(g, bp, &dims.encoder, &batch.input)?;
    let out = adapter_forward(g, bp, &seq)?;
    let pooled = pool(g, &out.h)?;
    let q = g.constant(batch.proprio.clone())?;
    let (a_s, target) = interpolate_rows(&batch.actions, &noise.epsilon, &noise.s)?;
    let a_s = g.constant(a_s)?;
    let target = g.constant(target)?;
    let pred = decoder_forward(g, bp, pooled, q, a_s, &noise.s)?;
    let fm = fm_loss(g, pred, target)?;

    let rscl = match (weights, &noise.mask) {
        (Some(w), Some(mask)) => {
            let (cseq, w_clean) = if cfg.rscl_backbone_grad {
                (seq.clone(), out.w)
            } else {
                let tokens = g.detach(seq.tokens)?;
                let cseq = TokenSequence { tokens, ..seq.clone() };
                let w = adapter_forward(g, bp, &cseq)?.w;
                (cseq, w)
            };
            let z = project(g, bp, w_clean)?;
            let z_aug = match cfg.cutoff_level {
                CutoffLevel::Tokens => {
                    let aug = apply_mask(g, &cseq, mask)?;
                    let w_aug = adapter_forward(g, bp, &aug)?.w;
                    project(g, bp, w_aug)?
                }
                CutoffLevel::Embedding => apply_embedding_mask(g, z, mask)?,
            };
            Some(rscl_loss(g, z, z_aug, w, cfg.tau)?)
        }
        _ => None,
    };
    let root = match (objective, rscl) {
        (Objective::FlowMatching, _) | (Objective::Total { .. }, None) => fm,
        (Objective::Total { lambda }, Some(r)) => {
            let scaled = g.scale(r, lambda)?;
            g.add(fm, scaled)?
        }
        (Objective::Contrastive, Some(r)) => r,
        (Objective::Contrastive, None) => {
            return Err(Error::InvalidArgument("contrastive term is disabled".into()));
        }
    };
    Ok(ObjectiveVars { root, fm, rscl })
}

/// Losses and gradients of `objective` for one batch with fixed draws.
/// Frozen parameters get zero gradients.
pub fn compute_gradients(
    params: &ParamStore,
    cfg: &TrainConfig,
    dims: &ModelDims,
    batch: &Batch,
    noise: &StepNoise,
    weights: Option<&SoftWeightMatrix>,
    objective: Objective,
) -> Result<StepGradients> {
    let mut g = Graph::new();
    let bp = params.bind(&mut g, &frozen_groups(cfg))?;
    let vars = build_objective(&mut g, &bp, cfg, dims, batch, noise, weights, objective)?;
    let loss_fm = g.value(vars.fm).item();
    let loss_rscl = vars.rscl.map_or(0.0, |r| g.value(r).item());
    let grads = g.backward(vars.root)?;
    Ok(StepGradients {
        grads: bp.collect(&grads),
        loss_fm,
        loss_rscl,
    })
}

/// Training state: parameters, optimizer moments and the step counter.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub cfg: TrainConfig,
    pub dims: ModelDims,
    pub env: EnvConfig,
    pub dataset: Dataset,
    pub params: ParamStore,
    pub adam: AdamState,
    /// Parameters updated by the optimizer, in `adam` order.
    pub trainable: Vec<String>,
    pub step: u64,
}

impl Trainer {
    pub fn new(cfg: TrainConfig, dataset: Dataset) -> Result<Self> {
        cfg.validate()?;
        let dims = cfg.model_dims();
        let params = init_params(&dims, cfg.train_seed)?;
        let trainable = trainable_names(&params, &cfg);
        let refs = trainable
            .iter()
            .map(|n| params.get(n))
            .collect::<Result<Vec<_>>>()?;
        let adam = AdamState::new(cfg.adam_config(), &refs);
        Self::assemble(cfg, dataset, params, adam, 0)
    }

    /// Rebuilds a trainer from saved state.
    pub fn assemble(cfg: TrainConfig, dataset: Dataset, params: ParamStore, adam: AdamState, step: u64) -> Result<Self> {
        cfg.validate()?;
        let dims = cfg.model_dims();
        let env = cfg.env_config();
        if dataset.stats.views != dims.encoder.views || dataset.stats.view_dim != dims.encoder.view_dim {
            return Err(Error::InvalidArgument(format!(
                "dataset has {}×{} views, config expects {}×{}",
                dataset.stats.views, dataset.stats.view_dim, dims.encoder.views, dims.encoder.view_dim
            )));
        }
        if dataset.trajectories.is_empty() {
            return Err(Error::InvalidArgument("empty dataset".into()));
        }
        let trainable = trainable_names(&params, &cfg);
        if adam.m.len() != trainable.len() {
            return Err(Error::InvalidArgument("optimizer state does not match trainable parameters".into()));
        }
        Ok(Trainer {
            cfg,
            dims,
            env,
            dataset,
            params,
            adam,
            trainable,
            step,
        })
    }

    /// Generator for `purpose` at the current step. Independent of how many
    /// draws earlier steps made, so resuming replays the same stream.
    pub fn step_rng(&self, purpose: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.train_seed);
        rng.set_stream(1 + self.step * 4 + purpose);
        rng
    }

    pub fn lambda(&self) -> Result<f64> {
        match self.cfg.lambda_schedule {
            LambdaSchedule::Off => Ok(self.cfg.lambda0),
            LambdaSchedule::Cosine => Ok(self.cfg.lambda0 * lambda_schedule(self.step, self.cfg.max_steps.max(1))?),
        }
    }

    /// Batch, draws and soft weights for the current step.
    pub fn prepare(&self) -> Result<(Batch, StepNoise, Option<SoftWeightMatrix>)> {
        let batch = assemble_batch(&self.dataset, self.cfg.batch_size, &self.env, &mut self.step_rng(STREAM_BATCH))?;
        let noise = draw_noise(
            &self.cfg,
            &self.dims,
            batch.size(),
            &mut self.step_rng(STREAM_NOISE),
            &mut self.step_rng(STREAM_AUGMENT),
        )?;
        let weights = match self.cfg.supervision_target() {
            Some(t) => Some(supervision_weights(&batch.supervision_fields(), &t, batch.size(), self.cfg.beta)?),
            None => None,
        };
        Ok((batch, noise, weights))
    }

    /// One optimizer update on the joint objective.
    pub fn train_step(&mut self) -> Result<StepMetrics> {
        if self.step >= self.cfg.max_steps {
            return Err(Error::InvalidArgument(format!("already at max_steps {}", self.cfg.max_steps)));
        }
        let (batch, noise, weights) = self.prepare()?;
        let lambda = self.lambda()?;
        let sg = compute_gradients(
            &self.params,
            &self.cfg,
            &self.dims,
            &batch,
            &noise,
            weights.as_ref(),
            Objective::Total { lambda },
        )
        .map_err(|e| self.diagnose(e, &batch))?;
        let total = sg.loss_fm + lambda * sg.loss_rscl;
        if !total.is_finite() {
            return Err(self.diagnose(Error::NonFinite("loss".into()), &batch));
        }
        let grad_norm = self
            .trainable
            .iter()
            .map(|n| sg.grads.get(n).map(|t| t.data().iter().map(|v| v * v).sum::<f64>()))
            .sum::<Result<f64>>()?
            .sqrt();
        if !grad_norm.is_finite() {
            return Err(self.diagnose(Error::NonFinite("gradient".into()), &batch));
        }
        self.apply_update(&sg.grads)?;
        self.step += 1;
        Ok(StepMetrics {
            step: self.step,
            loss_fm: sg.loss_fm,
            loss_rscl: sg.loss_rscl,
            lambda,
            total,
            grad_norm,
        })
    }

    /// Adam update of the trainable parameters with the current step's
    /// learning rate; does not advance the step counter.
    pub fn apply_update(&mut self, grads: &ParamStore) -> Result<()> {
        let lr = self.cfg.lr_at(self.step);
        let grad_refs = self
            .trainable
            .iter()
            .map(|n| grads.get(n))
            .collect::<Result<Vec<_>>>()?;
        let mut param_refs: Vec<&mut Tensor> = self
            .params
            .iter_mut()
            .filter(|(n, _)| self.trainable.iter().any(|t| t == n))
            .map(|(_, t)| t)
            .collect();
        // `trainable` is in store order, so the two lists line up.
        self.adam.step(lr, &mut param_refs, &grad_refs)?;
        Ok(())
    }

    fn diagnose(&self, e: Error, batch: &Batch) -> Error {
        let what = match e {
            Error::NonFinite(what) => what,
            Error::Tensor(TensorError::NonFinite { op }) => format!("value in `{op}`"),
            other => return other,
        };
        Error::NonFinite(format!(
            "{what} at step {}; batch samples (trajectory, timestep): {:?}",
            self.step + 1,
            batch.samples
        ))
    }
}

fn trainable_names(params: &ParamStore, cfg: &TrainConfig) -> Vec<String> {
    let frozen = frozen_groups(cfg);
    params
        .names()
        .filter(|n| !Group::of(n).is_some_and(|g| frozen.contains(&g)))
        .map(str::to_string)
        .collect()
}
