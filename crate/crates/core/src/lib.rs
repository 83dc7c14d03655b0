//! Video object segmentation by re-identification and recurrent mask propagation.

pub mod config;
pub mod error;
pub mod features;
pub mod flow;
pub mod inference;
pub mod io;
pub mod kernels;
pub mod linker;
pub mod mask;
pub mod metrics;
pub mod model;
pub mod ops;
pub mod overlay;
pub mod proposals;
pub mod reid;
pub mod remp;
pub mod sequence;
pub mod synth;
pub mod tape;
pub mod tensor;
pub mod trainer;

pub use config::Config;
pub use error::{DyeError, Result};
pub use features::{FeatureCache, FeatureMap, Frame};
pub use flow::{FlowField, FlowMode, FlowProvider};
pub use inference::{run_dyenet, InferenceConfig, InferenceOutput, IterationReport};
pub use linker::MaskTube;
pub use mask::{BBox, Mask};
pub use metrics::{evaluate, EvalReport};
pub use model::{init_params, ModelDims};
pub use proposals::{ProposalConfig, ProposalMode};
pub use reid::{Embedding, OimTable, StartingPoint, Template, TemplateSet};
pub use remp::{HiddenState, RempConfig, Tracklet};
pub use sequence::{LabelMap, Sequence};
pub use synth::SynthSpec;
pub use tensor::{ParamStore, Tensor};
pub use trainer::{train, TrainConfig, TrainOutput};
