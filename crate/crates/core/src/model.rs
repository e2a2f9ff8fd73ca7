//! Full model: vision encoder, general projector, optional QAVA and the
//! toy language model.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, TensorError};
use crate::llm::{greedy_decode, LmConfig, ToyLlm};
use crate::params::{Group, ParamBuilder, ParamStore};
use crate::qava::{GeneralProjector, Qava, QavaConfig, QuestionTemplates};
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use crate::types::DistortionType;
use crate::vision::{ImageInput, VisionConfig, VisionEncoder};
use crate::vocab::{Vocab, BOS, EOS};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vision: VisionConfig,
    pub qava: QavaConfig,
    pub qava_enabled: bool,
    pub llm: LmConfig,
    pub questions: QuestionTemplates,
}

impl ModelConfig {
    /// Desk-scale defaults for a vocabulary of `vocab_size` tokens.
    pub fn desk(vocab_size: usize) -> Self {
        Self {
            vision: VisionConfig::default(),
            qava: QavaConfig::default(),
            qava_enabled: true,
            llm: LmConfig::desk(vocab_size),
            questions: QuestionTemplates::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.vision.validate()?;
        self.llm.validate()
    }
}

/// Module structure; parameter values live in a separate [`ParamStore`].
#[derive(Debug, Clone)]
pub struct TrustVlNet {
    pub vision: VisionEncoder,
    pub projector: GeneralProjector,
    pub qava: Option<Qava>,
    pub lm: ToyLlm,
}

/// One training or inference example, already reduced to text.
#[derive(Debug, Clone)]
pub struct LmSample {
    pub image: ImageInput,
    pub distortion: DistortionType,
    pub prompt: String,
    pub response: String,
}

/// Token ids `[BOS, prompt.., response.., EOS]` and the mask selecting the
/// response and EOS as targets.
pub fn encode_pair(vocab: &Vocab, prompt: &str, response: &str) -> (Vec<usize>, Vec<bool>) {
    let p = vocab.tokenize(prompt);
    let r = vocab.tokenize(response);
    let mut ids = Vec::with_capacity(p.len() + r.len() + 2);
    ids.push(BOS);
    ids.extend_from_slice(&p);
    ids.extend_from_slice(&r);
    ids.push(EOS);
    let mut mask = vec![false; 1 + p.len()];
    mask.resize(ids.len(), true);
    (ids, mask)
}

#[derive(Debug, Clone)]
pub struct TrustVl<T: Scalar> {
    pub cfg: ModelConfig,
    pub vocab: Vocab,
    pub store: ParamStore<T>,
    pub net: TrustVlNet,
}

impl<T: Scalar> TrustVl<T> {
    pub fn new(cfg: ModelConfig, vocab: Vocab, seed: u64) -> Result<Self> {
        cfg.validate()?;
        if cfg.llm.vocab_size != vocab.len() {
            return Err(TensorError::Invalid {
                op: "model",
                detail: format!("config vocab_size {} but vocabulary has {}", cfg.llm.vocab_size, vocab.len()),
            });
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let feat = cfg.vision.feat_dim;
        let d = cfg.llm.llm_dim;
        let vision = VisionEncoder::new(&mut ParamBuilder::new(&mut store, &mut rng, "vision", Group::Vision), cfg.vision)?;
        let projector =
            GeneralProjector::new(&mut ParamBuilder::new(&mut store, &mut rng, "projector", Group::Projector), feat, d)?;
        let qava = if cfg.qava_enabled {
            Some(Qava::new(
                &mut ParamBuilder::new(&mut store, &mut rng, "qava", Group::Qava),
                cfg.qava,
                feat,
                d,
                vocab.len(),
            )?)
        } else {
            None
        };
        let lm = ToyLlm::new(&mut ParamBuilder::new(&mut store, &mut rng, "llm", Group::Llm), cfg.llm)?;
        Ok(Self {
            cfg,
            vocab,
            store,
            net: TrustVlNet {
                vision,
                projector,
                qava,
                lm,
            },
        })
    }

    pub fn question_ids(&self, distortion: DistortionType) -> Result<Vec<usize>> {
        match &self.net.qava {
            Some(q) => q.question_ids(&self.vocab, &self.cfg.questions.question(distortion)),
            None => Ok(Vec::new()),
        }
    }

    /// `[general tokens ; QAVA tokens]`, or only general tokens when QAVA is
    /// disabled.
    pub fn visual_prefix<'t>(&self, tape: &'t Tape<T>, image: &ImageInput, distortion: DistortionType) -> Result<Var<'t, T>> {
        let feats = self.net.vision.encode(tape, &self.store, image)?;
        let general = self.net.projector.forward(tape, &self.store, feats)?;
        match &self.net.qava {
            Some(q) => {
                let ids = q.question_ids(&self.vocab, &self.cfg.questions.question(distortion))?;
                let task = q.forward(tape, &self.store, feats, &ids)?;
                tape.concat(&[general, task], 0)
            }
            None => Ok(general),
        }
    }

    /// Masked next-token loss on the response span.
    pub fn sample_loss<'t>(&self, tape: &'t Tape<T>, sample: &LmSample) -> Result<Var<'t, T>> {
        let prefix = self.visual_prefix(tape, &sample.image, sample.distortion)?;
        let (ids, mask) = encode_pair(&self.vocab, &sample.prompt, &sample.response);
        self.net.lm.masked_loss(tape, &self.store, Some(prefix), &ids, &mask)
    }

    /// Prefix values detached from any tape.
    pub fn prefix_tensor(&self, image: &ImageInput, distortion: DistortionType) -> Result<Tensor<T>> {
        let tape = Tape::new();
        let v = self.visual_prefix(&tape, image, distortion)?.value();
        Ok((*v).clone())
    }

    /// Greedy response ids for a prompt.
    pub fn generate_ids(&self, image: &ImageInput, distortion: DistortionType, prompt: &str, max_new: usize) -> Result<Vec<usize>> {
        let prefix = self.prefix_tensor(image, distortion)?;
        let mut ids = vec![BOS];
        ids.extend(self.vocab.tokenize(prompt));
        greedy_decode(&self.net.lm, &self.store, Some(&prefix), &ids, max_new)
    }

    pub fn generate(&self, image: &ImageInput, distortion: DistortionType, prompt: &str, max_new: usize) -> Result<String> {
        let ids = self.generate_ids(image, distortion, prompt, max_new)?;
        Ok(self.vocab.detokenize(&ids))
    }
}
