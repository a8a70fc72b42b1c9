use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use crate::encoder::EncoderDims;
use crate::error::{Error, Result};
use crate::flowmatch::DecoderDims;
use crate::model::ModelDims;
use crate::rscl::{AugmentationKind, SupervisionTarget};
use crate::synthenv::EnvConfig;
use crate::tensor::AdamConfig;

/// Which distance defines the contrastive soft weights. `None` drops the
/// contrastive term entirely.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Supervision {
    None,
    ProprioState,
    NextAction,
    ActionSequenceDtw,
    OneHot,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LambdaSchedule {
    Cosine,
    /// Constant `lambda0`.
    Off,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LrSchedule {
    Cosine,
    Constant,
}

/// Where the cutoff augmentation is applied.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CutoffLevel {
    /// Backbone tokens, before the adapter.
    Tokens,
    /// Projected embeddings.
    Embedding,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AugmentationChoice {
    ViewCutoff,
    TokenCutoff,
    FeatureCutoff,
    None,
}

macro_rules! keyword_enum {
    ($ty:ident { $($variant:ident => $name:literal),+ $(,)? }) => {
        impl $ty {
            pub fn name(self) -> &'static str {
                match self { $($ty::$variant => $name),+ }
            }
        }
        impl FromStr for $ty {
            type Err = String;
            fn from_str(s: &str) -> std::result::Result<Self, String> {
                match s {
                    $($name => Ok($ty::$variant),)+
                    _ => Err(format!("expected one of: {}", [$($name),+].join(", "))),
                }
            }
        }
        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.name())
            }
        }
    };
}

keyword_enum!(Supervision {
    None => "none",
    ProprioState => "proprio_state",
    NextAction => "next_action",
    ActionSequenceDtw => "action_sequence_dtw",
    OneHot => "one_hot",
});
keyword_enum!(LambdaSchedule { Cosine => "cosine", Off => "off" });
keyword_enum!(LrSchedule { Cosine => "cosine", Constant => "constant" });
keyword_enum!(CutoffLevel { Tokens => "tokens", Embedding => "embedding" });
keyword_enum!(AugmentationChoice {
    ViewCutoff => "view_cutoff",
    TokenCutoff => "token_cutoff",
    FeatureCutoff => "feature_cutoff",
    None => "none",
});

/// Every hyperparameter of a run. Loaded from a flat `key = value` file and
/// command-line overrides; precedence is CLI, then file, then defaults.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub dataset: PathBuf,
    pub out_dir: PathBuf,
    pub n_traj: usize,
    pub data_seed: u64,
    pub train_seed: u64,
    pub eval_seed: u64,

    pub batch_size: usize,
    pub max_steps: u64,
    pub lr: f64,
    pub warmup_steps: u64,
    pub lr_schedule: LrSchedule,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub weight_decay: f64,

    pub tau: f64,
    pub beta: f64,
    pub gamma: f64,
    pub lambda0: f64,
    pub lambda_schedule: LambdaSchedule,
    pub supervision: Supervision,
    pub augmentation: AugmentationChoice,
    pub cutoff_p: f64,
    pub cutoff_level: CutoffLevel,
    pub freeze_backbone: bool,
    /// When false the contrastive gradient stops at the backbone output.
    pub rscl_backbone_grad: bool,

    pub horizon: usize,
    pub denoise_steps: usize,
    pub views: usize,
    pub view_dim: usize,
    pub n_tok: usize,
    pub d_model: usize,
    pub d_hidden: usize,
    pub d_proj: usize,
    pub decoder_hidden: usize,

    pub eval_every: u64,
    pub eval_episodes: usize,
    pub checkpoint_every: u64,
    pub cknna_k: usize,
    pub analysis_per_task: usize,
    pub analysis_window: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            dataset: PathBuf::from("data/train.jsonl"),
            out_dir: PathBuf::from("runs/default"),
            n_traj: 200,
            data_seed: 0,
            train_seed: 0,
            eval_seed: 1_000_000,
            batch_size: 32,
            max_steps: 3000,
            lr: 1e-3,
            warmup_steps: 100,
            lr_schedule: LrSchedule::Cosine,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            weight_decay: 0.0,
            tau: 0.2,
            beta: 1.0,
            gamma: 10.0,
            lambda0: 1.0,
            lambda_schedule: LambdaSchedule::Cosine,
            supervision: Supervision::ProprioState,
            augmentation: AugmentationChoice::ViewCutoff,
            cutoff_p: 0.1,
            cutoff_level: CutoffLevel::Tokens,
            freeze_backbone: false,
            rscl_backbone_grad: true,
            horizon: 8,
            denoise_steps: 16,
            views: 2,
            view_dim: 16,
            n_tok: 4,
            d_model: 32,
            d_hidden: 64,
            d_proj: 16,
            decoder_hidden: 128,
            eval_every: 500,
            eval_episodes: 100,
            checkpoint_every: 500,
            cknna_k: 10,
            analysis_per_task: 10,
            analysis_window: 16,
        }
    }
}

/// `(key, description)` for every accepted key, in file order.
pub const CONFIG_KEYS: &[(&str, &str)] = &[
    ("dataset", "path of the JSON-lines dataset"),
    ("out_dir", "directory for metrics and checkpoints"),
    ("n_traj", "trajectories generated by gen-data"),
    ("data_seed", "seed for dataset generation and the view maps"),
    ("train_seed", "seed for initialization, batches, noise and augmentation"),
    ("eval_seed", "seed of the first evaluation episode"),
    ("batch_size", "samples per step"),
    ("max_steps", "optimizer steps"),
    ("lr", "peak learning rate"),
    ("warmup_steps", "linear warmup steps"),
    ("lr_schedule", "cosine | constant after warmup"),
    ("adam_beta1", "Adam first-moment decay"),
    ("adam_beta2", "Adam second-moment decay"),
    ("adam_eps", "Adam denominator epsilon"),
    ("weight_decay", "decoupled weight decay, 0 disables"),
    ("tau", "contrastive temperature"),
    ("beta", "soft-weight sharpness"),
    ("gamma", "soft-DTW smoothing"),
    ("lambda0", "initial weight of the contrastive loss"),
    ("lambda_schedule", "cosine | off (constant lambda0)"),
    ("supervision", "none | proprio_state | next_action | action_sequence_dtw | one_hot"),
    ("augmentation", "view_cutoff | token_cutoff | feature_cutoff | none"),
    ("cutoff_p", "drop probability for token/feature cutoff"),
    ("cutoff_level", "tokens | embedding"),
    ("freeze_backbone", "true keeps backbone parameters fixed"),
    ("rscl_backbone_grad", "false stops the contrastive gradient at the backbone"),
    ("horizon", "action chunk length"),
    ("denoise_steps", "Euler steps when sampling actions"),
    ("views", "camera views per observation"),
    ("view_dim", "features per view"),
    ("n_tok", "tokens per view"),
    ("d_model", "token width"),
    ("d_hidden", "projector hidden width"),
    ("d_proj", "projection width"),
    ("decoder_hidden", "decoder hidden width"),
    ("eval_every", "steps between evaluation hooks, 0 disables"),
    ("eval_episodes", "rollouts per evaluation"),
    ("checkpoint_every", "steps between checkpoints, 0 keeps only initial and final"),
    ("cknna_k", "neighbors for the alignment metric"),
    ("analysis_per_task", "trajectories per task in embedding dumps"),
    ("analysis_window", "timestep stride in embedding dumps"),
];

fn parse<T: FromStr>(v: &str) -> std::result::Result<T, String>
where
    T::Err: fmt::Display,
{
    v.parse::<T>().map_err(|e| format!("cannot parse `{v}`: {e}"))
}

impl TrainConfig {
    /// Sets one key from its textual value.
    pub fn set(&mut self, key: &str, value: &str) -> std::result::Result<(), String> {
        let v = value.trim();
        match key {
            "dataset" => self.dataset = PathBuf::from(v),
            "out_dir" => self.out_dir = PathBuf::from(v),
            "n_traj" => self.n_traj = parse(v)?,
            "data_seed" => self.data_seed = parse(v)?,
            "train_seed" => self.train_seed = parse(v)?,
            "eval_seed" => self.eval_seed = parse(v)?,
            "batch_size" => self.batch_size = parse(v)?,
            "max_steps" => self.max_steps = parse(v)?,
            "lr" => self.lr = parse(v)?,
            "warmup_steps" => self.warmup_steps = parse(v)?,
            "lr_schedule" => self.lr_schedule = parse(v)?,
            "adam_beta1" => self.adam_beta1 = parse(v)?,
            "adam_beta2" => self.adam_beta2 = parse(v)?,
            "adam_eps" => self.adam_eps = parse(v)?,
            "weight_decay" => self.weight_decay = parse(v)?,
            "tau" => self.tau = parse(v)?,
            "beta" => self.beta = parse(v)?,
            "gamma" => self.gamma = parse(v)?,
            "lambda0" => self.lambda0 = parse(v)?,
            "lambda_schedule" => self.lambda_schedule = parse(v)?,
            "supervision" => self.supervision = parse(v)?,
            "augmentation" => self.augmentation = parse(v)?,
            "cutoff_p" => self.cutoff_p = parse(v)?,
            "cutoff_level" => self.cutoff_level = parse(v)?,
            "freeze_backbone" => self.freeze_backbone = parse(v)?,
            "rscl_backbone_grad" => self.rscl_backbone_grad = parse(v)?,
            "horizon" => self.horizon = parse(v)?,
            "denoise_steps" => self.denoise_steps = parse(v)?,
            "views" => self.views = parse(v)?,
            "view_dim" => self.view_dim = parse(v)?,
            "n_tok" => self.n_tok = parse(v)?,
            "d_model" => self.d_model = parse(v)?,
            "d_hidden" => self.d_hidden = parse(v)?,
            "d_proj" => self.d_proj = parse(v)?,
            "decoder_hidden" => self.decoder_hidden = parse(v)?,
            "eval_every" => self.eval_every = parse(v)?,
            "eval_episodes" => self.eval_episodes = parse(v)?,
            "checkpoint_every" => self.checkpoint_every = parse(v)?,
            "cknna_k" => self.cknna_k = parse(v)?,
            "analysis_per_task" => self.analysis_per_task = parse(v)?,
            "analysis_window" => self.analysis_window = parse(v)?,
            _ => return Err("unknown key".into()),
        }
        Ok(())
    }

    /// All keys with their current values, in [`CONFIG_KEYS`] order. Float
    /// formatting is shortest round-trip, so `set` on these pairs restores
    /// the config exactly.
    pub fn to_pairs(&self) -> Vec<(String, String)> {
        let s = |x: &dyn fmt::Display| x.to_string();
        let vals: Vec<String> = vec![
            self.dataset.display().to_string(),
            self.out_dir.display().to_string(),
            s(&self.n_traj),
            s(&self.data_seed),
            s(&self.train_seed),
            s(&self.eval_seed),
            s(&self.batch_size),
            s(&self.max_steps),
            s(&self.lr),
            s(&self.warmup_steps),
            s(&self.lr_schedule),
            s(&self.adam_beta1),
            s(&self.adam_beta2),
            s(&self.adam_eps),
            s(&self.weight_decay),
            s(&self.tau),
            s(&self.beta),
            s(&self.gamma),
            s(&self.lambda0),
            s(&self.lambda_schedule),
            s(&self.supervision),
            s(&self.augmentation),
            s(&self.cutoff_p),
            s(&self.cutoff_level),
            s(&self.freeze_backbone),
            s(&self.rscl_backbone_grad),
            s(&self.horizon),
            s(&self.denoise_steps),
            s(&self.views),
            s(&self.view_dim),
            s(&self.n_tok),
            s(&self.d_model),
            s(&self.d_hidden),
            s(&self.d_proj),
            s(&self.decoder_hidden),
            s(&self.eval_every),
            s(&self.eval_episodes),
            s(&self.checkpoint_every),
            s(&self.cknna_k),
            s(&self.analysis_per_task),
            s(&self.analysis_window),
        ];
        CONFIG_KEYS.iter().zip(vals).map(|((k, _), v)| (k.to_string(), v)).collect()
    }

    /// Applies `key = value` lines; `#` starts a comment.
    pub fn apply_file(&mut self, text: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let location = format!("line {}", i + 1);
            let Some((k, v)) = line.split_once('=') else {
                return Err(Error::Config {
                    location,
                    key: line.to_string(),
                    msg: "expected `key = value`".into(),
                });
            };
            let key = k.trim();
            self.set(key, v).map_err(|msg| Error::Config {
                location,
                key: key.to_string(),
                msg,
            })?;
        }
        Ok(())
    }

    /// Applies `(key, value)` overrides from the command line.
    pub fn apply_overrides<'a, I>(&mut self, pairs: I) -> Result<()>
    where
        I: IntoIterator<Item = (&'a str, &'a str)>,
    {
        for (k, v) in pairs {
            self.set(k, v).map_err(|msg| Error::Config {
                location: "command line".into(),
                key: k.to_string(),
                msg,
            })?;
        }
        Ok(())
    }

    /// Defaults, then the file (if any), then overrides; validated.
    pub fn load<'a, I>(file_text: Option<&str>, overrides: I) -> Result<Self>
    where
        I: IntoIterator<Item = (&'a str, &'a str)>,
    {
        let mut cfg = TrainConfig::default();
        if let Some(t) = file_text {
            cfg.apply_file(t)?;
        }
        cfg.apply_overrides(overrides)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, msg: &str| {
            Err(Error::Config {
                location: "validation".into(),
                key: key.into(),
                msg: msg.into(),
            })
        };
        let positive_f = [
            ("lr", self.lr),
            ("adam_eps", self.adam_eps),
            ("tau", self.tau),
            ("beta", self.beta),
            ("gamma", self.gamma),
        ];
        for (k, v) in positive_f {
            if !(v > 0.0 && v.is_finite()) {
                return bad(k, "must be positive and finite");
            }
        }
        for (k, v) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)] {
            if !(0.0..1.0).contains(&v) {
                return bad(k, "must be in [0, 1)");
            }
        }
        for (k, v) in [("weight_decay", self.weight_decay), ("lambda0", self.lambda0)] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(k, "must be non-negative");
            }
        }
        let positive_u = [
            ("n_traj", self.n_traj),
            ("batch_size", self.batch_size),
            ("horizon", self.horizon),
            ("denoise_steps", self.denoise_steps),
            ("view_dim", self.view_dim),
            ("n_tok", self.n_tok),
            ("d_model", self.d_model),
            ("d_hidden", self.d_hidden),
            ("d_proj", self.d_proj),
            ("decoder_hidden", self.decoder_hidden),
            ("eval_episodes", self.eval_episodes),
            ("cknna_k", self.cknna_k),
            ("analysis_per_task", self.analysis_per_task),
            ("analysis_window", self.analysis_window),
        ];
        for (k, v) in positive_u {
            if v == 0 {
                return bad(k, "must be positive");
            }
        }
        if self.views < 2 {
            return bad("views", "at least 2 views are required");
        }
        if matches!(self.augmentation, AugmentationChoice::TokenCutoff | AugmentationChoice::FeatureCutoff)
            && !(self.cutoff_p > 0.0 && self.cutoff_p < 1.0)
        {
            return bad("cutoff_p", "must be in (0, 1)");
        }
        if self.cutoff_level == CutoffLevel::Embedding && self.augmentation != AugmentationChoice::ViewCutoff {
            return bad("cutoff_level", "embedding-level cutoff only supports view_cutoff");
        }
        Ok(())
    }

    pub fn model_dims(&self) -> ModelDims {
        ModelDims {
            encoder: EncoderDims {
                views: self.views,
                view_dim: self.view_dim,
                n_tok: self.n_tok,
                d_model: self.d_model,
                d_hidden: self.d_hidden,
                d_proj: self.d_proj,
                n_instructions: 2,
            },
            decoder: DecoderDims {
                d_model: self.d_model,
                d_q: 3,
                horizon: self.horizon,
                d_a: 3,
                hidden: self.decoder_hidden,
            },
        }
    }

    pub fn env_config(&self) -> EnvConfig {
        EnvConfig {
            views: self.views,
            view_dim: self.view_dim,
            horizon: self.horizon,
            ..EnvConfig::default()
        }
    }

    pub fn adam_config(&self) -> AdamConfig {
        AdamConfig {
            beta1: self.adam_beta1,
            beta2: self.adam_beta2,
            eps: self.adam_eps,
            weight_decay: self.weight_decay,
        }
    }

    pub fn supervision_target(&self) -> Option<SupervisionTarget> {
        match self.supervision {
            Supervision::None => None,
            Supervision::ProprioState => Some(SupervisionTarget::ProprioState),
            Supervision::NextAction => Some(SupervisionTarget::NextAction),
            Supervision::ActionSequenceDtw => Some(SupervisionTarget::ActionSequenceDtw { gamma: self.gamma }),
            Supervision::OneHot => Some(SupervisionTarget::OneHot),
        }
    }

    pub fn augmentation_kind(&self) -> AugmentationKind {
        match self.augmentation {
            AugmentationChoice::ViewCutoff => AugmentationKind::ViewCutoff,
            AugmentationChoice::TokenCutoff => AugmentationKind::TokenCutoff { p: self.cutoff_p },
            AugmentationChoice::FeatureCutoff => AugmentationKind::FeatureCutoff { p: self.cutoff_p },
            AugmentationChoice::None => AugmentationKind::None,
        }
    }

    /// Learning rate for the update at 0-based `step`.
    pub fn lr_at(&self, step: u64) -> f64 {
        if step < self.warmup_steps {
            return self.lr * (step + 1) as f64 / self.warmup_steps as f64;
        }
        match self.lr_schedule {
            LrSchedule::Constant => self.lr,
            LrSchedule::Cosine => {
                let span = self.max_steps.saturating_sub(self.warmup_steps).max(1);
                let t = ((step - self.warmup_steps) as f64 / span as f64).min(1.0);
                0.5 * self.lr * (1.0 + (std::f64::consts::PI * t).cos())
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pairs_round_trip() {
        let mut cfg = TrainConfig::default();
        cfg.lr = 0.1 + 0.2;
        cfg.supervision = Supervision::ActionSequenceDtw;
        cfg.out_dir = PathBuf::from("x/y");
        let mut back = TrainConfig::default();
        for (k, v) in cfg.to_pairs() {
            back.set(&k, &v).unwrap();
        }
        assert_eq!(back, cfg);
        assert_eq!(cfg.to_pairs().len(), CONFIG_KEYS.len());
    }

    #[test]
    fn file_errors_name_line_and_key() {
        let mut cfg = TrainConfig::default();
        let err = cfg.apply_file("# header\nlr = 0.01\nbogus = 3\n").unwrap_err();
        assert_eq!(err.to_string(), "config line 3, key `bogus`: unknown key");
        let err = cfg.apply_file("\n\ntau = abc").unwrap_err();
        assert!(err.to_string().starts_with("config line 3, key `tau`: cannot parse"));
        let err = cfg.apply_file("just words").unwrap_err();
        assert!(err.to_string().contains("line 1"));
    }

    #[test]
    fn cli_beats_file_beats_default() {
        let cfg = TrainConfig::load(Some("lr = 0.01\ntau = 0.5 # inline comment\n"), [("lr", "0.02")]).unwrap();
        assert_eq!(cfg.lr, 0.02);
        assert_eq!(cfg.tau, 0.5);
        assert_eq!(cfg.beta, 1.0);
    }

    #[test]
    fn validation_rejects_bad_values() {
        for (k, v) in [("tau", "0"), ("views", "1"), ("batch_size", "0"), ("adam_beta1", "1")] {
            assert!(TrainConfig::load(None, [(k, v)]).is_err(), "{k}");
        }
        assert!(TrainConfig::load(None, [("augmentation", "token_cutoff"), ("cutoff_p", "1.0")]).is_err());
        assert!(TrainConfig::load(None, [("cutoff_level", "embedding"), ("augmentation", "none")]).is_err());
    }

    #[test]
    fn lr_warms_up_then_decays() {
        let cfg = TrainConfig::default();
        assert!((cfg.lr_at(0) - 1e-5).abs() < 1e-18);
        assert_eq!(cfg.lr_at(99), 1e-3);
        assert_eq!(cfg.lr_at(100), 1e-3);
        assert!(cfg.lr_at(2999) < 1e-6);
    }

    #[test]
    fn enum_names_parse_back() {
        for s in [Supervision::None, Supervision::OneHot, Supervision::ActionSequenceDtw] {
            assert_eq!(s.name().parse::<Supervision>().unwrap(), s);
        }
        assert!("cos".parse::<LambdaSchedule>().is_err());
    }
}
