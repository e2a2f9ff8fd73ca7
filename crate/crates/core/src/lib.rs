//! Tensor autodiff substrate and model components for evidence-conditioned
//! multimodal misinformation detection.
//!
//! Everything numeric is generic over [`Scalar`] (`f32` or `f64`); the
//! aliases at the bottom fix the precision.

pub mod attention;
pub mod error;
pub mod gradcheck;
pub mod llm;
pub mod model;
pub mod optim;
pub mod params;
pub mod qava;
pub mod scalar;
pub mod tape;
pub mod tensor;
pub mod types;
pub mod vision;
pub mod vocab;

pub use attention::{AttentionConfig, AttentionMask, CrossInput, LayerConfig, LayerNorm, Linear, MultiHeadAttention, TransformerLayer};
pub use error::{Result, TensorError};
pub use llm::{argmax_lowest, greedy_decode, LmConfig, ToyLlm};
pub use model::{encode_pair, LmSample, ModelConfig, TrustVl, TrustVlNet};
pub use optim::{adam_step, AdamConfig, AdamState, StepStats};
pub use params::{Group, ParamBuilder, ParamId, ParamStore, Parameter};
pub use qava::{GeneralProjector, Qava, QavaConfig, QuestionTemplates, TaskQuestion};
pub use scalar::{Precision, Scalar};
pub use tape::{softmax_rows, Gradients, Tape, Var};
pub use tensor::Tensor;
pub use types::{DistortionType, Label};
pub use vision::{extract_views, patchify, plan_tiles, Image, ImageInput, TilePlan, VisionConfig, VisionEncoder};
pub use vocab::{split_words, Vocab, VocabError};

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type ParamStore32 = ParamStore<f32>;
pub type ParamStore64 = ParamStore<f64>;
pub type Tape32 = Tape<f32>;
pub type Tape64 = Tape<f64>;
pub type TrustVl32 = TrustVl<f32>;
pub type TrustVl64 = TrustVl<f64>;
