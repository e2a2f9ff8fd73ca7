//! Data, evidence, reasoning, instruction generation, training and
//! evaluation on top of `trustvl-core`.

pub mod checkpoint;
pub mod dataset;
pub mod digest;
pub mod error;
pub mod eval;
pub mod evidence;
pub mod instruct;
pub mod metrics;
pub mod reasoning;
pub mod remote;
pub mod synth;
pub mod training;

pub use checkpoint::{load_checkpoint, read_header, save_checkpoint, CheckpointHeader, CheckpointMeta};
pub use dataset::{load_dataset, write_dataset, ClaimRecord, ClassCounts, Dataset, ImageRef, SuppliedEvidence};
pub use digest::config_digest;
pub use error::{PipelineError, Result};
pub use eval::{ablate_evidence, ablate_joint, ablate_tokens, evaluate, AblationSetup, EvalConfig, EvalReport, Predictor};
pub use evidence::{corrupt, CorpusIndex, EvidenceBundle, EvidenceDoc, EvidenceKind, RetrievalDepth};
pub use instruct::{generate_and_verify, run_pipeline, HintPolicy, StubBackend, StubBehavior, StubMode};
pub use metrics::{metrics, Confusion, Metrics, Prediction};
pub use reasoning::{parse_verdict, validate_chain, PromptBuilder, PromptStyle, ReasoningChain, ReasoningStep, ReasoningTemplates};
pub use training::{freeze_mask, train_all, train_stage, StageDatasets, StageName, StageSpec, TrainConfig, TrainManifest};
