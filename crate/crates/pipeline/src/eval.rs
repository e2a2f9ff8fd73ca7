//! Evaluation and the three ablation drivers.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::hash::Hasher;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use fnv::FnvHasher;
use serde::{Deserialize, Serialize};
use trustvl_core::{DistortionType, Label, ModelConfig, Scalar, TrustVl, Vocab};

use crate::dataset::{retrieval_features, ClaimRecord};
use crate::error::{PipelineError, Result};
use crate::evidence::{corrupt, CorpusIndex, EvidenceBundle, EvidenceDoc, RetrievalDepth};
use crate::metrics::{Confusion, Metrics, Prediction};
use crate::reasoning::{parse_verdict, PromptBuilder};
use crate::synth::{lexicon, split, synthesize_dataset, SynthConfig};
use crate::training::{default_prompts, reasoning_sample, sample_texts, train_stage, StageName, StageSpec, TrainConfig};

/// Maps an assembled prompt to generated text.
pub trait Predictor: Sync {
    fn predict(&self, record: &ClaimRecord, prompt: &str) -> Result<String>;
}

/// Greedy decoding from a trained model.
pub struct ModelPredictor<'a, T: Scalar> {
    pub model: &'a TrustVl<T>,
    pub max_new_tokens: usize,
}

impl<T: Scalar> Predictor for ModelPredictor<'_, T> {
    fn predict(&self, record: &ClaimRecord, prompt: &str) -> Result<String> {
        let image = record.image.resolve()?;
        Ok(self.model.generate(&image, record.distortion, prompt, self.max_new_tokens)?)
    }
}

/// Echoes the gold label.
pub struct OraclePredictor;

impl Predictor for OraclePredictor {
    fn predict(&self, record: &ClaimRecord, _prompt: &str) -> Result<String> {
        Ok(format!("oracle {}", record.label.token()))
    }
}

/// Seeded coin flip per record id.
pub struct CoinFlipPredictor {
    pub seed: u64,
}

impl Predictor for CoinFlipPredictor {
    fn predict(&self, record: &ClaimRecord, _prompt: &str) -> Result<String> {
        let l = if record_seed(self.seed, &record.id) & 1 == 0 { Label::Real } else { Label::Fake };
        Ok(format!("coin {}", l.token()))
    }
}

fn record_seed(seed: u64, id: &str) -> u64 {
    let mut h = FnvHasher::default();
    h.write(&seed.to_le_bytes());
    h.write(id.as_bytes());
    h.finish()
}

pub enum EvidenceSource<'a> {
    /// The record's own evidence, or none.
    Supplied,
    /// Direct and inverse evidence retrieved from a corpus; context evidence
    /// is the record's own, truncated to `depth.k`.
    Retrieved {
        index: &'a CorpusIndex,
        depth: RetrievalDepth,
        patch: usize,
    },
}

pub struct Corruption<'a> {
    pub proportion: f64,
    pub pool: &'a [EvidenceDoc],
    pub seed: u64,
}

pub struct EvalConfig<'a> {
    pub evidence: EvidenceSource<'a>,
    pub corruption: Option<Corruption<'a>>,
    pub prompts: PromptBuilder,
    pub workers: usize,
    pub config_digest: String,
}

impl Default for EvalConfig<'_> {
    fn default() -> Self {
        Self {
            evidence: EvidenceSource::Supplied,
            corruption: None,
            prompts: default_prompts(),
            workers: 1,
            config_digest: String::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PredictionRow {
    pub id: String,
    pub gold: Label,
    pub prediction: Prediction,
    pub output: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub dataset: String,
    pub size: usize,
    pub accuracy: f64,
    pub macro_f1: f64,
    pub confusion: Confusion,
    pub unparseable: usize,
    pub config_digest: String,
    pub predictions: Vec<PredictionRow>,
}

impl EvalReport {
    pub fn to_text(&self) -> String {
        let c = &self.confusion;
        format!(
            "config_digest: {}\ndataset: {}  size: {}\naccuracy: {:.4}  macro_f1: {:.4}  unparseable: {}\nconfusion (gold/pred): real/real {} real/fake {} real/unparseable {} fake/real {} fake/fake {} fake/unparseable {}\n",
            self.config_digest,
            self.dataset,
            self.size,
            self.accuracy,
            self.macro_f1,
            self.unparseable,
            c.real_as_real,
            c.real_as_fake,
            c.real_unparseable,
            c.fake_as_real,
            c.fake_as_fake,
            c.fake_unparseable
        )
    }
}

/// Evidence bundle for one record under `cfg`, before corruption.
pub fn build_bundle(record: &ClaimRecord, source: &EvidenceSource<'_>) -> Result<EvidenceBundle> {
    let supplied = match &record.evidence {
        Some(e) => e.to_bundle(&record.id)?,
        None => EvidenceBundle::default(),
    };
    match source {
        EvidenceSource::Supplied => Ok(supplied),
        EvidenceSource::Retrieved { index, depth, patch } => {
            let feats = retrieval_features(&record.image.resolve()?, *patch)?;
            let mut context = supplied.context;
            context.truncate(depth.k);
            Ok(EvidenceBundle {
                direct: index.retrieve_direct(&record.text, depth.m)?,
                inverse: index.retrieve_inverse(&feats, depth.n)?,
                context,
            })
        }
    }
}

/// Prompt the evaluator feeds for `record`.
pub fn record_prompt(record: &ClaimRecord, cfg: &EvalConfig<'_>) -> Result<String> {
    let mut bundle = build_bundle(record, &cfg.evidence)?;
    if let Some(c) = &cfg.corruption {
        bundle = corrupt(&bundle, c.proportion, c.pool, record_seed(c.seed, &record.id))?;
    }
    Ok(cfg.prompts.assemble(&record.text, &bundle, record.distortion))
}

/// Scores every record; a pure function of its inputs whatever the worker
/// count.
pub fn evaluate(predictor: &dyn Predictor, dataset: &str, records: &[ClaimRecord], cfg: &EvalConfig<'_>) -> Result<EvalReport> {
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<Result<PredictionRow>>>> = Mutex::new((0..records.len()).map(|_| None).collect());
    let run = |r: &ClaimRecord| -> Result<PredictionRow> {
        let prompt = record_prompt(r, cfg)?;
        let output = predictor.predict(r, &prompt)?;
        let prediction = parse_verdict(&output).map_or(Prediction::Unparseable, |v| v.label.into());
        Ok(PredictionRow {
            id: r.id.clone(),
            gold: r.label,
            prediction,
            output,
        })
    };
    std::thread::scope(|s| {
        for _ in 0..cfg.workers.max(1) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= records.len() {
                    break;
                }
                let row = run(&records[i]);
                slots.lock().expect("no worker panicked")[i] = Some(row);
            });
        }
    });
    let rows = slots
        .into_inner()
        .expect("no worker panicked")
        .into_iter()
        .map(|r| r.expect("every index was processed"))
        .collect::<Result<Vec<_>>>()?;
    let mut confusion = Confusion::default();
    for r in &rows {
        confusion.add(r.gold, r.prediction);
    }
    let m = Metrics::from_confusion(confusion);
    Ok(EvalReport {
        dataset: dataset.to_string(),
        size: rows.len(),
        accuracy: m.accuracy,
        macro_f1: m.macro_f1,
        confusion,
        unparseable: confusion.unparseable(),
        config_digest: cfg.config_digest.clone(),
        predictions: rows,
    })
}

/// Desk settings shared by the training ablations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationSetup {
    pub n_per_type: usize,
    pub train_fraction: f64,
    pub seed: u64,
    pub synth: SynthConfig,
    /// `llm.vocab_size` is replaced by the built vocabulary's size.
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub max_new_tokens: usize,
    pub workers: usize,
}

/// Desk-scale model for the ablations.
pub fn ablation_model_config() -> ModelConfig {
    let mut cfg = ModelConfig::desk(0);
    cfg.vision.base = 16;
    cfg.vision.feat_dim = 32;
    cfg.vision.layers = 1;
    cfg.vision.ffn_dim = 64;
    cfg.qava.num_tokens = 8;
    cfg.qava.num_layers = 2;
    cfg.qava.model_dim = 32;
    cfg.qava.ffn_dim = 64;
    cfg.llm.llm_dim = 48;
    cfg.llm.ffn_dim = 96;
    cfg.llm.max_seq = 160;
    cfg
}

impl Default for AblationSetup {
    fn default() -> Self {
        Self {
            n_per_type: 600,
            train_fraction: 0.75,
            seed: 0,
            synth: SynthConfig {
                block_size: 4,
                num_topics: 4,
                ..SynthConfig::default()
            },
            model: ablation_model_config(),
            train: TrainConfig {
                batch_size: 16,
                lr_llm: 2e-3,
                lr_vision: 2e-4,
                epochs: [0, 0, 30],
                ..TrainConfig::default()
            },
            max_new_tokens: 48,
            workers: 1,
        }
    }
}

pub const ABLATION_KINDS: [DistortionType; 3] = DistortionType::BASIC;

/// Train/test splits per kind, the equal-budget joint training set and a
/// vocabulary shared by every ablation model.
#[derive(Debug, Clone)]
pub struct AblationData {
    pub train: BTreeMap<DistortionType, Vec<ClaimRecord>>,
    pub test: BTreeMap<DistortionType, Vec<ClaimRecord>>,
    pub joint_train: Vec<ClaimRecord>,
    pub vocab: Vocab,
}

pub fn prepare_ablation(setup: &AblationSetup) -> Result<AblationData> {
    let mut train = BTreeMap::new();
    let mut test = BTreeMap::new();
    let mut joint_train = Vec::new();
    let prompts = default_prompts();
    let mut texts: Vec<String> = lexicon();
    for kind in ABLATION_KINDS {
        let all = synthesize_dataset(kind, setup.n_per_type, setup.seed, &setup.synth)?;
        let (tr, te) = split(&all, setup.train_fraction);
        let share = tr.len() / ABLATION_KINDS.len() / 2 * 2;
        joint_train.extend_from_slice(&tr[..share]);
        for r in &tr {
            let s = reasoning_sample(r, &prompts)?;
            texts.extend(sample_texts(std::slice::from_ref(&s)).map(str::to_string));
        }
        train.insert(kind, tr);
        test.insert(kind, te);
    }
    for d in DistortionType::ALL {
        texts.push(setup.model.questions.question(d).text);
    }
    let vocab = Vocab::build(texts.iter().map(String::as_str));
    Ok(AblationData {
        train,
        test,
        joint_train,
        vocab,
    })
}

/// Reasoning-stage training from a fresh model seeded with `setup.seed`.
pub fn train_reasoning_model<T: Scalar>(
    setup: &AblationSetup,
    model_cfg: &ModelConfig,
    vocab: &Vocab,
    records: &[ClaimRecord],
) -> Result<TrustVl<T>> {
    let mut cfg = model_cfg.clone();
    cfg.llm.vocab_size = vocab.len();
    let mut model = TrustVl::<T>::new(cfg, vocab.clone(), setup.seed)?;
    let prompts = default_prompts();
    let samples = records.iter().map(|r| reasoning_sample(r, &prompts)).collect::<Result<Vec<_>>>()?;
    let tc = TrainConfig {
        precision: T::PRECISION,
        seed: setup.seed,
        ..setup.train.clone()
    };
    let spec = StageSpec::new(StageName::Stage3, &tc, &model.store.groups());
    train_stage(&mut model, &spec, &samples, &tc, None)?;
    Ok(model)
}

fn eval_cfg(setup: &AblationSetup, digest: &str) -> EvalConfig<'static> {
    EvalConfig {
        workers: setup.workers,
        config_digest: digest.to_string(),
        ..EvalConfig::default()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JointGrid {
    pub config_digest: String,
    pub seed: u64,
    /// Training-set name of each row: the three kinds, then `joint`.
    pub rows: Vec<String>,
    pub columns: Vec<DistortionType>,
    pub train_sizes: Vec<usize>,
    pub accuracy: Vec<Vec<f64>>,
    pub macro_f1: Vec<Vec<f64>>,
}

impl JointGrid {
    /// Mean accuracy of single-type row `i` on the other kinds' test sets.
    pub fn off_diagonal_mean(&self, i: usize) -> f64 {
        let v: Vec<f64> = (0..self.columns.len()).filter(|&j| j != i).map(|j| self.accuracy[i][j]).collect();
        v.iter().sum::<f64>() / v.len() as f64
    }

    /// Mean accuracy of the joint row over the columns other than `i`.
    pub fn joint_off_diagonal_mean(&self, i: usize) -> f64 {
        let last = self.rows.len() - 1;
        let v: Vec<f64> = (0..self.columns.len()).filter(|&j| j != i).map(|j| self.accuracy[last][j]).collect();
        v.iter().sum::<f64>() / v.len() as f64
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("config_digest: {}\nseed: {}\n{:<14}", self.config_digest, self.seed, "train \\ test");
        for c in &self.columns {
            let _ = write!(s, "{:>12}", c.as_str());
        }
        s.push_str("      size\n");
        for (i, r) in self.rows.iter().enumerate() {
            let _ = write!(s, "{r:<14}");
            for a in &self.accuracy[i] {
                let _ = write!(s, "{:>12.4}", a);
            }
            let _ = writeln!(s, "{:>10}", self.train_sizes[i]);
        }
        s
    }
}

/// Three single-type models and one joint model with the same training
/// budget, each scored on the three held-out type-specific test sets.
/// Returns the grid and the joint model.
pub fn ablate_joint<T: Scalar>(setup: &AblationSetup, digest: &str) -> Result<(JointGrid, TrustVl<T>)> {
    let data = prepare_ablation(setup)?;
    let mut grid = JointGrid {
        config_digest: digest.to_string(),
        seed: setup.seed,
        rows: Vec::new(),
        columns: ABLATION_KINDS.to_vec(),
        train_sizes: Vec::new(),
        accuracy: Vec::new(),
        macro_f1: Vec::new(),
    };
    let cfg = eval_cfg(setup, digest);
    let mut sets: Vec<(String, &[ClaimRecord])> = ABLATION_KINDS.iter().map(|k| (k.as_str().to_string(), data.train[k].as_slice())).collect();
    sets.push(("joint".into(), &data.joint_train));
    if let Some(bad) = sets.iter().find(|(_, s)| s.len() != data.joint_train.len()) {
        return Err(PipelineError::Config(format!(
            "training budgets differ: {} has {} records, joint has {}",
            bad.0,
            bad.1.len(),
            data.joint_train.len()
        )));
    }
    let mut joint = None;
    for (name, records) in sets {
        log::info!("ablate_joint: training {name} on {} records", records.len());
        let model = train_reasoning_model::<T>(setup, &setup.model, &data.vocab, records)?;
        let p = ModelPredictor {
            model: &model,
            max_new_tokens: setup.max_new_tokens,
        };
        let mut acc = Vec::new();
        let mut f1 = Vec::new();
        for k in ABLATION_KINDS {
            let rep = evaluate(&p, k.as_str(), &data.test[&k], &cfg)?;
            acc.push(rep.accuracy);
            f1.push(rep.macro_f1);
        }
        log::info!("ablate_joint: {name} accuracy {acc:?}");
        grid.rows.push(name.clone());
        grid.train_sizes.push(records.len());
        grid.accuracy.push(acc);
        grid.macro_f1.push(f1);
        if name == "joint" {
            joint = Some(model);
        }
    }
    Ok((grid, joint.expect("joint row trained")))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenRow {
    pub num_tokens: usize,
    pub accuracy: BTreeMap<DistortionType, f64>,
    pub macro_f1: BTreeMap<DistortionType, f64>,
    pub mean_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenSweep {
    pub config_digest: String,
    pub seed: u64,
    pub rows: Vec<TokenRow>,
}

impl TokenSweep {
    pub fn to_text(&self) -> String {
        let mut s = format!("config_digest: {}\nseed: {}\n{:>6}", self.config_digest, self.seed, "K");
        for k in ABLATION_KINDS {
            let _ = write!(s, "{:>12}", k.as_str());
        }
        s.push_str("        mean\n");
        for r in &self.rows {
            let _ = write!(s, "{:>6}", r.num_tokens);
            for k in ABLATION_KINDS {
                let _ = write!(s, "{:>12.4}", r.accuracy.get(&k).copied().unwrap_or(f64::NAN));
            }
            let _ = writeln!(s, "{:>12.4}", r.mean_accuracy);
        }
        s
    }
}

/// One joint-trained model per QAVA token count, same seed and data.
pub fn ablate_tokens<T: Scalar>(k_list: &[usize], setup: &AblationSetup, digest: &str) -> Result<TokenSweep> {
    if k_list.is_empty() || k_list.contains(&0) {
        return Err(PipelineError::Config("token counts must be a non-empty list of positive values".into()));
    }
    let data = prepare_ablation(setup)?;
    let cfg = eval_cfg(setup, digest);
    let mut rows = Vec::new();
    for &k in k_list {
        let mut mc = setup.model.clone();
        mc.qava_enabled = true;
        mc.qava.num_tokens = k;
        log::info!("ablate_tokens: K = {k}");
        let model = train_reasoning_model::<T>(setup, &mc, &data.vocab, &data.joint_train)?;
        let p = ModelPredictor {
            model: &model,
            max_new_tokens: setup.max_new_tokens,
        };
        let mut accuracy = BTreeMap::new();
        let mut macro_f1 = BTreeMap::new();
        for kind in ABLATION_KINDS {
            let rep = evaluate(&p, kind.as_str(), &data.test[&kind], &cfg)?;
            accuracy.insert(kind, rep.accuracy);
            macro_f1.insert(kind, rep.macro_f1);
        }
        let mean_accuracy = accuracy.values().sum::<f64>() / accuracy.len() as f64;
        rows.push(TokenRow {
            num_tokens: k,
            accuracy,
            macro_f1,
            mean_accuracy,
        });
    }
    Ok(TokenSweep {
        config_digest: digest.to_string(),
        seed: setup.seed,
        rows,
    })
}

pub const EVIDENCE_PROPORTIONS: [f64; 5] = [0.0, 0.25, 0.5, 0.75, 1.0];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvidenceRow {
    pub proportion: f64,
    pub report: EvalReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvidenceSweep {
    pub config_digest: String,
    pub seed: u64,
    pub rows: Vec<EvidenceRow>,
}

impl EvidenceSweep {
    pub fn to_text(&self) -> String {
        let mut s = format!("config_digest: {}\nseed: {}\nproportion    accuracy    macro_f1\n", self.config_digest, self.seed);
        for r in &self.rows {
            let _ = writeln!(s, "{:>10.2}{:>12.4}{:>12.4}", r.proportion, r.report.accuracy, r.report.macro_f1);
        }
        s
    }

    /// Adjacent pairs where accuracy rises, with the size of each rise.
    pub fn inversions(&self) -> Vec<(f64, f64)> {
        self.rows
            .windows(2)
            .filter(|w| w[1].report.accuracy > w[0].report.accuracy)
            .map(|w| (w[1].proportion, w[1].report.accuracy - w[0].report.accuracy))
            .collect()
    }
}

/// Evaluates with a share of every evidence list replaced by distractors,
/// one row per proportion, the same corruption seed throughout.
pub fn ablate_evidence(
    predictor: &dyn Predictor,
    dataset: &str,
    records: &[ClaimRecord],
    proportions: &[f64],
    pool: &[EvidenceDoc],
    seed: u64,
    base: &EvalConfig<'_>,
) -> Result<EvidenceSweep> {
    let allowed: BTreeSet<u64> = EVIDENCE_PROPORTIONS.iter().map(|p| p.to_bits()).collect();
    if proportions.is_empty() || proportions.iter().any(|p| !allowed.contains(&p.to_bits())) {
        return Err(PipelineError::Config(format!(
            "proportions must be a non-empty subset of {EVIDENCE_PROPORTIONS:?}, got {proportions:?}"
        )));
    }
    let mut rows = Vec::new();
    for &p in proportions {
        let cfg = EvalConfig {
            evidence: match &base.evidence {
                EvidenceSource::Supplied => EvidenceSource::Supplied,
                EvidenceSource::Retrieved { index, depth, patch } => EvidenceSource::Retrieved {
                    index,
                    depth: *depth,
                    patch: *patch,
                },
            },
            corruption: Some(Corruption { proportion: p, pool, seed }),
            prompts: base.prompts.clone(),
            workers: base.workers,
            config_digest: base.config_digest.clone(),
        };
        rows.push(EvidenceRow {
            proportion: p,
            report: evaluate(predictor, dataset, records, &cfg)?,
        });
    }
    Ok(EvidenceSweep {
        config_digest: base.config_digest.clone(),
        seed,
        rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::distractor_pool;

    fn records() -> Vec<ClaimRecord> {
        synthesize_dataset(DistortionType::Textual, 40, 5, &SynthConfig::default()).unwrap()
    }

    #[test]
    fn oracle_scores_perfectly() {
        let r = evaluate(&OraclePredictor, "t", &records(), &EvalConfig::default()).unwrap();
        assert_eq!((r.accuracy, r.macro_f1, r.size), (1.0, 1.0, 40));
    }

    #[test]
    fn coin_flip_is_reproducible_and_worker_independent() {
        let p = CoinFlipPredictor { seed: 3 };
        let a = evaluate(&p, "t", &records(), &EvalConfig::default()).unwrap();
        let cfg = EvalConfig {
            workers: 4,
            ..EvalConfig::default()
        };
        let b = evaluate(&p, "t", &records(), &cfg).unwrap();
        assert_eq!(a, b);
        assert!(a.accuracy > 0.2 && a.accuracy < 0.8, "{}", a.accuracy);
        assert_eq!(a.confusion.total(), 40);
    }

    #[test]
    fn zero_corruption_equals_plain_evaluation() {
        let recs = records();
        let pool = distractor_pool(50, 1).unwrap();
        let p = CoinFlipPredictor { seed: 1 };
        let plain = evaluate(&p, "t", &recs, &EvalConfig::default()).unwrap();
        let sweep = ablate_evidence(&p, "t", &recs, &EVIDENCE_PROPORTIONS, &pool, 9, &EvalConfig::default()).unwrap();
        assert_eq!(sweep.rows.len(), 5);
        assert_eq!(sweep.rows[0].report, plain);
        assert!(ablate_evidence(&p, "t", &recs, &[0.3], &pool, 9, &EvalConfig::default()).is_err());
    }

    #[test]
    fn corrupted_prompts_contain_distractors() {
        let recs = records();
        let pool = distractor_pool(50, 1).unwrap();
        let cfg = EvalConfig {
            corruption: Some(Corruption {
                proportion: 1.0,
                pool: &pool,
                seed: 2,
            }),
            ..EvalConfig::default()
        };
        let p = record_prompt(&recs[0], &cfg).unwrap();
        let direct = p.lines().find(|l| l.starts_with("Direct Evidence:")).unwrap();
        assert!(!direct.contains(&recs[0].evidence.as_ref().unwrap().direct[0]), "{p}");
    }

    #[test]
    fn joint_budget_matches_single_budgets() {
        let setup = AblationSetup {
            n_per_type: 24,
            ..AblationSetup::default()
        };
        let d = prepare_ablation(&setup).unwrap();
        for k in ABLATION_KINDS {
            assert_eq!(d.train[&k].len(), d.joint_train.len());
            assert_eq!(d.test[&k].len(), 6);
        }
    }
}
