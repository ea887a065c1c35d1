//! Memory-bounded CNN inference inside a simulated secure enclave.
//!
//! Convolutions run through im2col + GEMM. When the expanded matrix does not
//! fit the enclave, layers can be split by output rows ([`partition::YPlanePlan`])
//! or by input channels ([`partition::ChannelPlan`]); a hybrid picks per layer.
//! Fully connected weights can be streamed in compressed form
//! ([`codec`]).

pub mod codec;
pub mod enclave;
pub mod error;
pub mod experiment;
pub mod im2col;
pub mod layers;
pub mod model;
pub mod partition;
pub mod tensor;
pub mod zoo;

pub use codec::{Codec, WeightBlob};
pub use enclave::{Enclave, EnclaveConfig, Memory, PagingStats};
pub use error::{Error, Result, SchemeKind};
pub use experiment::{run_experiment, run_model, ExperimentConfig, LayerReport, Scheme};
pub use layers::{ActivationKind, ConvLayer, ConvLayerSpec, FcLayer, FcLayerSpec, PoolSpec};
pub use model::{Architecture, LayerDesc, Model};
pub use partition::{ChannelPlan, FootprintModel, YPlanePlan};
pub use tensor::{Shape3, Tensor3D};
