//! General projector and the Question-Aware Visual Amplifier (QAVA).
//!
//! The projector maps every image feature to one general visual token. QAVA
//! owns `K` learnable query tokens. In each layer the tokens first
//! self-attend jointly with the embedded task question, then the token
//! positions (and only those) cross-attend to the image features, then a
//! feed-forward block updates every position. The final token states are
//! mapped to the language model width and used as soft visual prompts.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::attention::{AttentionConfig, AttentionMask, CrossInput, LayerConfig, LayerNorm, Linear, TransformerLayer};
use crate::error::{shape_err, Result, TensorError};
use crate::params::{ParamBuilder, ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::types::DistortionType;
use crate::vocab::Vocab;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct QavaConfig {
    pub num_tokens: usize,
    pub num_layers: usize,
    pub model_dim: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub max_question_len: usize,
}

impl Default for QavaConfig {
    /// 6 layers and 32 learnable tokens; widths are desk-scale.
    fn default() -> Self {
        Self {
            num_tokens: 32,
            num_layers: 6,
            model_dim: 64,
            heads: 4,
            ffn_dim: 128,
            max_question_len: 32,
        }
    }
}

/// Question text for one distortion type.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskQuestion {
    pub distortion: DistortionType,
    pub text: String,
}

/// One registered question per distortion type.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuestionTemplates {
    templates: BTreeMap<DistortionType, String>,
}

impl Default for QuestionTemplates {
    fn default() -> Self {
        let templates = [
            (DistortionType::Textual, "Does the text contradict the evidence?"),
            (DistortionType::Visual, "Is the image manipulated or AI-generated?"),
            (DistortionType::CrossModal, "Does the image match the caption and evidence?"),
            (DistortionType::Mixed, "Is there any textual, visual or cross-modal distortion?"),
            (DistortionType::Unknown, "Is there any distortion?"),
        ]
        .into_iter()
        .map(|(d, t)| (d, t.to_string()))
        .collect();
        Self { templates }
    }
}

impl QuestionTemplates {
    /// Defaults with the given entries replaced.
    pub fn with_overrides(overrides: &BTreeMap<DistortionType, String>) -> Result<Self> {
        let mut q = Self::default();
        for (d, t) in overrides {
            if t.trim().is_empty() {
                return Err(TensorError::Invalid {
                    op: "question_templates",
                    detail: format!("empty question for {d}"),
                });
            }
            q.templates.insert(*d, t.clone());
        }
        Ok(q)
    }

    pub fn question(&self, d: DistortionType) -> TaskQuestion {
        TaskQuestion {
            distortion: d,
            text: self.templates[&d].clone(),
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (DistortionType, &str)> {
        self.templates.iter().map(|(d, t)| (*d, t.as_str()))
    }
}

/// Two affine layers with a GELU between, `feat_dim → llm_dim`, group
/// `projector`.
#[derive(Debug, Clone)]
pub struct GeneralProjector {
    pub feat_dim: usize,
    pub llm_dim: usize,
    fc1: Linear,
    fc2: Linear,
}

impl GeneralProjector {
    pub fn new<T: Scalar>(pb: &mut ParamBuilder<'_, T>, feat_dim: usize, llm_dim: usize) -> Result<Self> {
        Ok(Self {
            feat_dim,
            llm_dim,
            fc1: Linear::new(pb, "fc1", feat_dim, llm_dim)?,
            fc2: Linear::new(pb, "fc2", llm_dim, llm_dim)?,
        })
    }

    /// `[n × feat_dim] → [n × llm_dim]`, position-wise.
    pub fn forward<'t, T: Scalar>(&self, tape: &'t Tape<T>, store: &ParamStore<T>, feats: Var<'t, T>) -> Result<Var<'t, T>> {
        if feats.cols() != self.feat_dim {
            return shape_err(
                "project_general",
                format!("feature dim {} but projector expects {}", feats.cols(), self.feat_dim),
            );
        }
        let h = self.fc1.forward(tape, store, feats)?.gelu()?;
        self.fc2.forward(tape, store, h)
    }
}

/// Question-Aware Visual Amplifier; every parameter is in group `qava`.
#[derive(Debug, Clone)]
pub struct Qava {
    pub cfg: QavaConfig,
    pub feat_dim: usize,
    pub llm_dim: usize,
    tokens: ParamId,
    question_embed: ParamId,
    question_pos: ParamId,
    image_adapter: Linear,
    layers: Vec<TransformerLayer>,
    ln_out: LayerNorm,
    out: Linear,
}

impl Qava {
    pub fn new<T: Scalar>(
        pb: &mut ParamBuilder<'_, T>,
        cfg: QavaConfig,
        feat_dim: usize,
        llm_dim: usize,
        vocab_size: usize,
    ) -> Result<Self> {
        if cfg.num_tokens == 0 || cfg.num_layers == 0 || cfg.max_question_len == 0 {
            return Err(TensorError::Invalid {
                op: "qava_config",
                detail: format!("{cfg:?}"),
            });
        }
        let d = cfg.model_dim;
        let layer_cfg = LayerConfig {
            attention: AttentionConfig::new(d, cfg.heads)?,
            ffn_dim: cfg.ffn_dim,
            cross_attention: true,
        };
        Ok(Self {
            cfg,
            feat_dim,
            llm_dim,
            tokens: pb.randn("tokens", &[cfg.num_tokens, d], 0.5)?,
            question_embed: pb.randn("question_embed", &[vocab_size, d], 0.5)?,
            question_pos: pb.randn("question_pos", &[cfg.max_question_len, d], 0.1)?,
            image_adapter: Linear::new(pb, "image_adapter", feat_dim, d)?,
            layers: (0..cfg.num_layers)
                .map(|i| TransformerLayer::new(pb, &format!("layer{i}"), layer_cfg))
                .collect::<Result<_>>()?,
            ln_out: LayerNorm::new(pb, "ln_out", d)?,
            out: Linear::new(pb, "out", d, llm_dim)?,
        })
    }

    /// Question ids, validated against the embedder's limits.
    pub fn question_ids(&self, vocab: &Vocab, q: &TaskQuestion) -> Result<Vec<usize>> {
        if q.text.trim().is_empty() {
            return Err(TensorError::Invalid {
                op: "embed_question",
                detail: "empty question".into(),
            });
        }
        let ids = vocab.tokenize(&q.text);
        if ids.len() > self.cfg.max_question_len {
            return Err(TensorError::Invalid {
                op: "embed_question",
                detail: format!("{} tokens exceed max_question_len {}", ids.len(), self.cfg.max_question_len),
            });
        }
        Ok(ids)
    }

    /// `[L_q × model_dim]` token plus positional embeddings.
    pub fn embed_question<'t, T: Scalar>(&self, tape: &'t Tape<T>, store: &ParamStore<T>, ids: &[usize]) -> Result<Var<'t, T>> {
        if ids.is_empty() || ids.len() > self.cfg.max_question_len {
            return Err(TensorError::Invalid {
                op: "embed_question",
                detail: format!("question of {} tokens", ids.len()),
            });
        }
        let tok = tape.embed(tape.param(store, self.question_embed), ids)?;
        let pos_ids: Vec<usize> = (0..ids.len()).collect();
        let pos = tape.embed(tape.param(store, self.question_pos), &pos_ids)?;
        tok.add(&pos)
    }

    /// `[n × feat_dim]` image features and question ids → `[K × llm_dim]`.
    pub fn forward<'t, T: Scalar>(
        &self,
        tape: &'t Tape<T>,
        store: &ParamStore<T>,
        image_features: Var<'t, T>,
        question_ids: &[usize],
    ) -> Result<Var<'t, T>> {
        let n = image_features.rows();
        if n == 0 {
            return Err(TensorError::Invalid {
                op: "qava_forward",
                detail: "no image features".into(),
            });
        }
        if image_features.cols() != self.feat_dim {
            return shape_err(
                "qava_forward",
                format!("feature dim {} but QAVA expects {}", image_features.cols(), self.feat_dim),
            );
        }
        let k = self.cfg.num_tokens;
        let q = self.embed_question(tape, store, question_ids)?;
        let tokens = tape.param(store, self.tokens);
        let mut x = tape.concat(&[tokens, q], 0)?;
        let source = self.image_adapter.forward(tape, store, image_features)?;

        let total = x.rows();
        let self_mask = AttentionMask::full(total, total);
        let cross_mask = AttentionMask::full(k, n);
        for layer in &self.layers {
            x = layer.forward(
                tape,
                store,
                x,
                &self_mask,
                Some(CrossInput {
                    source,
                    mask: &cross_mask,
                    query_rows: Some(k),
                }),
            )?;
        }
        let h = self.ln_out.forward(tape, store, x.slice_rows(0, k)?)?;
        self.out.forward(tape, store, h)
    }
}
