pub mod analysis;
pub mod encoder;
pub mod error;
pub mod flowmatch;
pub mod model;
pub mod params;
pub mod rscl;
pub mod synthenv;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};

pub use analysis::EmbeddingDump;
pub use encoder::{EncoderDims, EncoderInput, TokenSequence};
pub use flowmatch::{DecoderDims, FlowSample};
pub use model::{ModelDims, ModelPolicy};
pub use params::ParamStore;
pub use rscl::{SoftWeightMatrix, SupervisionTarget};
pub use synthenv::{Dataset, EnvConfig, SceneState, Trajectory};
pub use tensor::{Graph, Tensor, Var};
pub use trainer::{Checkpoint, TrainConfig, Trainer};
