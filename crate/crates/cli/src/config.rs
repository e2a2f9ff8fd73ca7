//! Run configuration: TOML file merged with command-line flags.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use trustvl_core::{DistortionType, ModelConfig, Precision, QuestionTemplates};
use trustvl_pipeline::eval::AblationSetup;
use trustvl_pipeline::reasoning::TemplateOverrides;
use trustvl_pipeline::remote::RemoteConfig;
use trustvl_pipeline::synth::SynthConfig;
use trustvl_pipeline::{config_digest, HintPolicy, PipelineError, ReasoningTemplates, RetrievalDepth, TrainConfig};

/// Optional model knobs; unset ones keep the desk defaults.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSettings {
    pub qava_enabled: Option<bool>,
    pub qava_tokens: Option<usize>,
    pub qava_layers: Option<usize>,
    pub qava_dim: Option<usize>,
    pub vision_base: Option<usize>,
    pub vision_patch: Option<usize>,
    pub vision_feat_dim: Option<usize>,
    pub vision_layers: Option<usize>,
    pub llm_dim: Option<usize>,
    pub llm_layers: Option<usize>,
    pub llm_heads: Option<usize>,
    pub llm_ffn_dim: Option<usize>,
    pub max_seq: Option<usize>,
}

impl ModelSettings {
    pub fn apply(&self, mut cfg: ModelConfig) -> ModelConfig {
        let set = |dst: &mut usize, v: Option<usize>| {
            if let Some(v) = v {
                *dst = v;
            }
        };
        if let Some(e) = self.qava_enabled {
            cfg.qava_enabled = e;
        }
        set(&mut cfg.qava.num_tokens, self.qava_tokens);
        set(&mut cfg.qava.num_layers, self.qava_layers);
        set(&mut cfg.qava.model_dim, self.qava_dim);
        set(&mut cfg.vision.base, self.vision_base);
        set(&mut cfg.vision.patch, self.vision_patch);
        set(&mut cfg.vision.feat_dim, self.vision_feat_dim);
        set(&mut cfg.vision.layers, self.vision_layers);
        set(&mut cfg.llm.llm_dim, self.llm_dim);
        set(&mut cfg.llm.layers, self.llm_layers);
        set(&mut cfg.llm.heads, self.llm_heads);
        set(&mut cfg.llm.ffn_dim, self.llm_ffn_dim);
        set(&mut cfg.llm.max_seq, self.max_seq);
        cfg
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InstructSettings {
    pub max_rounds: usize,
    pub hint_template: String,
    pub workers: usize,
    pub inspect: usize,
}

impl Default for InstructSettings {
    fn default() -> Self {
        let h = HintPolicy::default();
        Self {
            max_rounds: h.max_rounds,
            hint_template: h.hint_template,
            workers: 1,
            inspect: trustvl_pipeline::instruct::DEFAULT_INSPECTION_SIZE,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSettings {
    pub workers: usize,
    pub max_new_tokens: usize,
}

impl Default for EvalSettings {
    fn default() -> Self {
        Self {
            workers: 1,
            max_new_tokens: 48,
        }
    }
}

/// Contents of a `--config` file.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FileConfig {
    pub seed: Option<u64>,
    pub precision: Option<Precision>,
    pub model: ModelSettings,
    pub train: Option<TrainConfig>,
    pub ablation: Option<AblationSetup>,
    /// Overrides on top of `ablation.model`.
    pub ablation_model: ModelSettings,
    pub instruct: InstructSettings,
    pub remote: RemoteConfig,
    pub retrieval: RetrievalDepth,
    pub eval: EvalSettings,
    pub synth: SynthConfig,
    pub templates: Option<TemplateOverrides>,
    pub questions: BTreeMap<DistortionType, String>,
}

impl FileConfig {
    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let text = std::fs::read_to_string(path).map_err(|e| PipelineError::io(path, e))?;
        toml::from_str(&text).map_err(|e| PipelineError::Config(format!("{}: {e}", path.display())))
    }
}

/// Fully resolved settings of one invocation. Its digest is stamped on every
/// output.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunConfig {
    pub command: String,
    pub seed: u64,
    pub precision: Precision,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub ablation: AblationSetup,
    pub instruct: InstructSettings,
    pub remote: RemoteConfig,
    pub retrieval: RetrievalDepth,
    pub eval: EvalSettings,
    pub synth: SynthConfig,
    pub templates: ReasoningTemplates,
    pub args: serde_json::Value,
}

impl RunConfig {
    /// Merges the file with global flags; flags win.
    pub fn resolve(
        command: &str,
        file: FileConfig,
        seed: Option<u64>,
        precision: Option<Precision>,
        args: serde_json::Value,
    ) -> Result<Self, PipelineError> {
        let seed = seed.or(file.seed).unwrap_or(0);
        let precision = precision.or(file.precision).unwrap_or(Precision::Single);
        let questions = QuestionTemplates::with_overrides(&file.questions)?;
        let mut model = file.model.apply(ModelConfig::desk(0));
        model.questions = questions.clone();
        let mut train = file.train.unwrap_or_default();
        train.seed = seed;
        train.precision = precision;
        let mut ablation = file.ablation.unwrap_or_default();
        ablation.seed = seed;
        ablation.train.precision = precision;
        ablation.model = file.ablation_model.apply(ablation.model);
        ablation.model.questions = questions;
        let templates = match &file.templates {
            Some(o) => ReasoningTemplates::with_overrides(o)?,
            None => ReasoningTemplates::default(),
        };
        Ok(Self {
            command: command.to_string(),
            seed,
            precision,
            model,
            train,
            ablation,
            instruct: file.instruct,
            remote: file.remote,
            retrieval: file.retrieval,
            eval: file.eval,
            synth: file.synth,
            templates,
            args,
        })
    }

    pub fn digest(&self) -> Result<String, PipelineError> {
        config_digest(self)
    }
}
