//! Progressive three-stage trainer with per-stage group freezing and
//! per-group learning rates.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use trustvl_core::{
    adam_step, AdamConfig, AdamState, DistortionType, Gradients, Group, Image, ImageInput, LmSample, Precision, Scalar,
    Tape, TensorError, TrustVl,
};

use crate::checkpoint::{checkpoint_bytes, CheckpointMeta};
use crate::dataset::ClaimRecord;
use crate::error::{PipelineError, Result};
use crate::evidence::EvidenceBundle;
use crate::reasoning::{serialize_chain, PromptBuilder, PromptStyle};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StageName {
    Stage1,
    Stage2,
    Stage3,
}

impl StageName {
    pub const ALL: [StageName; 3] = [StageName::Stage1, StageName::Stage2, StageName::Stage3];

    pub fn as_str(self) -> &'static str {
        match self {
            StageName::Stage1 => "stage1",
            StageName::Stage2 => "stage2",
            StageName::Stage3 => "stage3",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|n| n.as_str() == s)
    }

    /// Record shape the stage trains on.
    pub fn data_source(self) -> &'static str {
        match self {
            StageName::Stage1 => "alignment",
            StageName::Stage2 => "conversation",
            StageName::Stage3 => "reasoning",
        }
    }

    fn index(self) -> usize {
        self as usize
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub seed: u64,
    pub precision: Precision,
    pub lr_llm: f64,
    pub lr_vision: f64,
    /// Defaults to the LLM rate.
    pub lr_projector: Option<f64>,
    /// Defaults to the LLM rate.
    pub lr_qava: Option<f64>,
    pub epochs: [usize; 3],
    pub adam: AdamConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 128,
            seed: 0,
            precision: Precision::Single,
            lr_llm: 2e-5,
            lr_vision: 2e-6,
            lr_projector: None,
            lr_qava: None,
            epochs: [1, 1, 3],
            adam: AdamConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn lr_by_group(&self) -> BTreeMap<Group, f64> {
        BTreeMap::from([
            (Group::Llm, self.lr_llm),
            (Group::Vision, self.lr_vision),
            (Group::Projector, self.lr_projector.unwrap_or(self.lr_llm)),
            (Group::Qava, self.lr_qava.unwrap_or(self.lr_llm)),
        ])
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(PipelineError::Config("batch_size must be positive".into()));
        }
        if let Some((g, lr)) = self.lr_by_group().into_iter().find(|&(_, lr)| !(lr > 0.0 && lr.is_finite())) {
            return Err(PipelineError::Config(format!("learning rate for {g} must be positive, got {lr}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageSpec {
    pub name: StageName,
    pub trainable_groups: BTreeSet<Group>,
    pub data_source: String,
    pub epochs: usize,
    pub lr_by_group: BTreeMap<Group, f64>,
}

impl StageSpec {
    /// Default spec; stage3 trains every group in `model_groups`.
    pub fn new(name: StageName, cfg: &TrainConfig, model_groups: &BTreeSet<Group>) -> Self {
        let trainable_groups = match name {
            StageName::Stage1 => BTreeSet::from([Group::Projector]),
            StageName::Stage2 => BTreeSet::from([Group::Projector, Group::Llm]),
            StageName::Stage3 => model_groups.clone(),
        };
        let rates = cfg.lr_by_group();
        Self {
            name,
            lr_by_group: trainable_groups.iter().map(|g| (*g, rates[g])).collect(),
            trainable_groups,
            data_source: name.data_source().into(),
            epochs: cfg.epochs[name.index()],
        }
    }
}

/// Makes exactly the stage's groups trainable.
pub fn freeze_mask<T: Scalar>(stage: &StageSpec, model: &mut TrustVl<T>) -> Result<()> {
    let present = model.store.groups();
    if let Some(g) = stage.trainable_groups.iter().find(|g| !present.contains(g)) {
        return Err(PipelineError::Config(format!("{}: unknown group {g}", stage.name.as_str())));
    }
    model.store.set_trainable_groups(&stage.trainable_groups);
    Ok(())
}

/// Training data of one stage.
#[derive(Debug, Clone)]
pub enum StageData {
    /// `(image, caption)` pairs.
    Alignment(Vec<(Image, String)>),
    /// `(image, prompt, response)` triples.
    Conversation(Vec<(Image, String, String)>),
    /// Claims with reasoning chains and supplied evidence.
    Reasoning(Vec<ClaimRecord>),
}

pub const ALIGNMENT_PROMPT: &str = "Describe the image.";

impl StageData {
    pub fn source(&self) -> &'static str {
        match self {
            StageData::Alignment(_) => "alignment",
            StageData::Conversation(_) => "conversation",
            StageData::Reasoning(_) => "reasoning",
        }
    }

    pub fn len(&self) -> usize {
        match self {
            StageData::Alignment(v) => v.len(),
            StageData::Conversation(v) => v.len(),
            StageData::Reasoning(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn to_samples(&self, prompts: &PromptBuilder) -> Result<Vec<LmSample>> {
        match self {
            StageData::Alignment(v) => Ok(v
                .iter()
                .map(|(img, cap)| LmSample {
                    image: ImageInput::Pixels(img.clone()),
                    distortion: DistortionType::Unknown,
                    prompt: ALIGNMENT_PROMPT.into(),
                    response: cap.clone(),
                })
                .collect()),
            StageData::Conversation(v) => Ok(v
                .iter()
                .map(|(img, p, r)| LmSample {
                    image: ImageInput::Pixels(img.clone()),
                    distortion: DistortionType::Unknown,
                    prompt: p.clone(),
                    response: r.clone(),
                })
                .collect()),
            StageData::Reasoning(v) => v.iter().map(|r| reasoning_sample(r, prompts)).collect(),
        }
    }
}

/// Prompt from the record's supplied evidence, response the serialized
/// chain.
pub fn reasoning_sample(r: &ClaimRecord, prompts: &PromptBuilder) -> Result<LmSample> {
    let chain = r
        .reasoning
        .as_ref()
        .ok_or_else(|| PipelineError::Training(format!("{}: reasoning record without a chain", r.id)))?;
    let bundle = match &r.evidence {
        Some(e) => e.to_bundle(&r.id)?,
        None => EvidenceBundle::default(),
    };
    Ok(LmSample {
        image: r.image.resolve()?,
        distortion: r.distortion,
        prompt: prompts.assemble(&r.text, &bundle, r.distortion),
        response: serialize_chain(chain)?,
    })
}

/// Every text the stage trains on, for vocabulary construction.
pub fn sample_texts(samples: &[LmSample]) -> impl Iterator<Item = &str> {
    samples.iter().flat_map(|s| [s.prompt.as_str(), s.response.as_str()])
}

/// SHA-256 over the samples' text and image contents.
pub fn data_digest(samples: &[LmSample]) -> String {
    let mut h = Sha256::new();
    for s in samples {
        match &s.image {
            ImageInput::Pixels(img) => {
                h.update(b"pixels");
                for d in [img.height(), img.width(), img.channels()] {
                    h.update((d as u64).to_le_bytes());
                }
                for v in img.data() {
                    h.update(v.to_le_bytes());
                }
            }
            ImageInput::Features(t) => {
                h.update(b"features");
                for &d in t.shape() {
                    h.update((d as u64).to_le_bytes());
                }
                for v in t.data() {
                    h.update(v.to_le_bytes());
                }
            }
        }
        for part in [s.distortion.as_str(), &s.prompt, &s.response] {
            h.update((part.len() as u64).to_le_bytes());
            h.update(part.as_bytes());
        }
    }
    hex::encode(h.finalize())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageLog {
    pub stage: StageName,
    pub trainable_groups: BTreeSet<Group>,
    pub lr_by_group: BTreeMap<Group, f64>,
    pub epochs: usize,
    pub num_samples: usize,
    pub data_sha256: String,
    /// Mean batch loss of every optimizer step.
    pub step_losses: Vec<f64>,
    pub epoch_losses: Vec<f64>,
    /// Rates actually applied, per group, over the whole stage.
    pub lr_used: BTreeMap<Group, f64>,
    pub max_update: BTreeMap<Group, f64>,
}

/// Per-epoch hook, used for checkpoints.
pub type EpochHook<'a, T> = dyn FnMut(&TrustVl<T>, usize) -> Result<()> + 'a;

fn non_finite(stage: &StageSpec, epoch: usize, step: usize, idx: usize, e: TensorError) -> PipelineError {
    match e {
        TensorError::NonFinite { op } => PipelineError::Training(format!(
            "{} epoch {} step {} sample {idx}: non-finite value in {op}; lower the learning rates or check the input",
            stage.name.as_str(),
            epoch + 1,
            step + 1
        )),
        other => other.into(),
    }
}

/// Runs `stage.epochs` epochs over `samples` with seeded shuffling and
/// per-batch Adam updates.
pub fn train_stage<T: Scalar>(
    model: &mut TrustVl<T>,
    stage: &StageSpec,
    samples: &[LmSample],
    cfg: &TrainConfig,
    mut on_epoch: Option<&mut EpochHook<'_, T>>,
) -> Result<StageLog> {
    cfg.validate()?;
    if samples.is_empty() {
        return Err(PipelineError::Training(format!("{}: empty dataset", stage.name.as_str())));
    }
    freeze_mask(stage, model)?;
    let mut log = StageLog {
        stage: stage.name,
        trainable_groups: stage.trainable_groups.clone(),
        lr_by_group: stage.lr_by_group.clone(),
        epochs: stage.epochs,
        num_samples: samples.len(),
        data_sha256: data_digest(samples),
        step_losses: Vec::new(),
        epoch_losses: Vec::new(),
        lr_used: BTreeMap::new(),
        max_update: BTreeMap::new(),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ (0x5eed_0000 + stage.name.index() as u64));
    let mut adam = AdamState::<T>::new(cfg.adam);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut step = 0;
    for epoch in 0..stage.epochs {
        order.shuffle(&mut rng);
        let mut epoch_sum = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let mut grads = Gradients::empty();
            let mut batch_sum = 0.0;
            for &i in batch {
                let tape = Tape::new();
                let loss = model.sample_loss(&tape, &samples[i]).map_err(|e| non_finite(stage, epoch, step, i, e))?;
                batch_sum += loss.value().item().to_f64().unwrap_or(f64::NAN);
                grads.accumulate(tape.backward(loss).map_err(|e| non_finite(stage, epoch, step, i, e))?);
            }
            if !batch_sum.is_finite() {
                return Err(PipelineError::Training(format!(
                    "{} epoch {} step {}: loss is {batch_sum}",
                    stage.name.as_str(),
                    epoch + 1,
                    step + 1
                )));
            }
            grads.scale(T::from_f64(1.0 / batch.len() as f64).expect("finite"));
            let stats = adam_step(&mut model.store, &grads, &stage.lr_by_group, &mut adam)
                .map_err(|e| non_finite(stage, epoch, step, batch[0], e))?;
            log.lr_used.extend(stats.lr_used);
            for (g, u) in stats.max_update {
                let e = log.max_update.entry(g).or_insert(0.0);
                *e = e.max(u);
            }
            let mean = batch_sum / batch.len() as f64;
            log.step_losses.push(mean);
            epoch_sum += batch_sum;
            step += 1;
        }
        let mean = epoch_sum / samples.len() as f64;
        log::info!("{} epoch {}/{}: mean loss {mean:.5}", stage.name.as_str(), epoch + 1, stage.epochs);
        log.epoch_losses.push(mean);
        if let Some(hook) = on_epoch.as_deref_mut() {
            hook(model, epoch)?;
        }
    }
    Ok(log)
}

/// Mean loss over `samples` without updating anything.
pub fn mean_loss<T: Scalar>(model: &TrustVl<T>, samples: &[LmSample]) -> Result<f64> {
    if samples.is_empty() {
        return Err(PipelineError::Training("empty dataset".into()));
    }
    let mut sum = 0.0;
    for s in samples {
        let tape = Tape::new();
        sum += model.sample_loss(&tape, s)?.value().item().to_f64().unwrap_or(f64::NAN);
    }
    Ok(sum / samples.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub spec: StageSpec,
    pub log: StageLog,
    /// File name inside the output directory.
    pub checkpoint: Option<PathBuf>,
    pub checkpoint_sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainManifest {
    pub config_digest: String,
    pub seed: u64,
    pub precision: Precision,
    pub batch_size: usize,
    pub lr_schedule: String,
    pub stages: Vec<StageRecord>,
}

impl TrainManifest {
    pub fn stage_order(&self) -> Vec<StageName> {
        self.stages.iter().map(|s| s.spec.name).collect()
    }
}

/// Stage data keyed by stage.
#[derive(Debug, Clone, Default)]
pub struct StageDatasets {
    pub stage1: Option<StageData>,
    pub stage2: Option<StageData>,
    pub stage3: Option<StageData>,
}

impl StageDatasets {
    pub fn get(&self, s: StageName) -> Option<&StageData> {
        match s {
            StageName::Stage1 => self.stage1.as_ref(),
            StageName::Stage2 => self.stage2.as_ref(),
            StageName::Stage3 => self.stage3.as_ref(),
        }
    }
}

/// Runs the listed stages in order, each continuing from the previous
/// one's parameters. With `out_dir`, writes `<stage>.ckpt` at each epoch
/// end and `manifest.json` at the end.
pub fn train_stages<T: Scalar>(
    model: &mut TrustVl<T>,
    stages: &[StageName],
    data: &StageDatasets,
    cfg: &TrainConfig,
    prompts: &PromptBuilder,
    digest: &str,
    out_dir: Option<&Path>,
) -> Result<TrainManifest> {
    cfg.validate()?;
    if T::PRECISION != cfg.precision {
        return Err(PipelineError::Config(format!("model is {} but config asks for {}", T::PRECISION, cfg.precision)));
    }
    let mut prepared = Vec::new();
    for &s in stages {
        let d = data
            .get(s)
            .ok_or_else(|| PipelineError::Training(format!("missing dataset for {}", s.as_str())))?;
        if d.source() != s.data_source() {
            return Err(PipelineError::Training(format!(
                "{} expects {} data, got {}",
                s.as_str(),
                s.data_source(),
                d.source()
            )));
        }
        prepared.push((s, d.to_samples(prompts)?));
    }
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir).map_err(|e| PipelineError::io(dir, e))?;
    }
    let groups = model.store.groups();
    let mut manifest = TrainManifest {
        config_digest: digest.to_string(),
        seed: cfg.seed,
        precision: cfg.precision,
        batch_size: cfg.batch_size,
        lr_schedule: "constant".into(),
        stages: Vec::new(),
    };
    for (name, samples) in prepared {
        let spec = StageSpec::new(name, cfg, &groups);
        let meta = CheckpointMeta {
            seed: cfg.seed,
            config_digest: digest.to_string(),
            stage: name.as_str().into(),
        };
        let path = out_dir.map(|d| d.join(format!("{}.ckpt", name.as_str())));
        let mut last_sha = String::new();
        let mut hook = |m: &TrustVl<T>, _epoch: usize| -> Result<()> {
            let bytes = checkpoint_bytes(m, &meta)?;
            last_sha = hex::encode(Sha256::digest(&bytes));
            if let Some(p) = &path {
                std::fs::write(p, &bytes).map_err(|e| PipelineError::io(p, e))?;
            }
            Ok(())
        };
        let log = train_stage(model, &spec, &samples, cfg, Some(&mut hook))?;
        if spec.epochs == 0 {
            hook(model, 0)?;
        }
        manifest.stages.push(StageRecord {
            spec,
            log,
            checkpoint: path.map(|_| PathBuf::from(format!("{}.ckpt", name.as_str()))),
            checkpoint_sha256: last_sha,
        });
    }
    if let Some(dir) = out_dir {
        let p = dir.join("manifest.json");
        let text = serde_json::to_string_pretty(&manifest).map_err(|e| PipelineError::Config(e.to_string()))?;
        std::fs::write(&p, text).map_err(|e| PipelineError::io(p, e))?;
    }
    Ok(manifest)
}

/// All three stages in order; every stage dataset must be present.
pub fn train_all<T: Scalar>(
    model: &mut TrustVl<T>,
    data: &StageDatasets,
    cfg: &TrainConfig,
    prompts: &PromptBuilder,
    digest: &str,
    out_dir: Option<&Path>,
) -> Result<TrainManifest> {
    train_stages(model, &StageName::ALL, data, cfg, prompts, digest, out_dir)
}

/// Default prompt style for training and evaluation.
pub fn default_prompts() -> PromptBuilder {
    PromptBuilder::new(PromptStyle::Compact)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stage_groups() {
        let all: BTreeSet<Group> = Group::ALL.into_iter().collect();
        let cfg = TrainConfig::default();
        assert_eq!(StageSpec::new(StageName::Stage1, &cfg, &all).trainable_groups, BTreeSet::from([Group::Projector]));
        assert_eq!(
            StageSpec::new(StageName::Stage2, &cfg, &all).trainable_groups,
            BTreeSet::from([Group::Projector, Group::Llm])
        );
        let s3 = StageSpec::new(StageName::Stage3, &cfg, &all);
        assert_eq!(s3.trainable_groups, all);
        assert_eq!(s3.epochs, 3);
        assert_eq!(s3.lr_by_group[&Group::Vision], 2e-6);
        assert_eq!(s3.lr_by_group[&Group::Llm], 2e-5);
        assert_eq!(s3.lr_by_group[&Group::Qava], 2e-5);
    }

    #[test]
    fn config_validation() {
        let mut c = TrainConfig::default();
        assert!(c.validate().is_ok());
        c.lr_vision = 0.0;
        assert!(c.validate().is_err());
        let c = TrainConfig {
            batch_size: 0,
            ..TrainConfig::default()
        };
        assert!(c.validate().is_err());
    }
}
