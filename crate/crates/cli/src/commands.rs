use std::path::Path;

use clap::CommandFactory;
use serde::Serialize;
use serde_json::json;
use trustvl_core::gradcheck::{check_module, ModuleKind};
use trustvl_core::{DistortionType, Precision, Scalar, TensorError, TrustVl, Vocab};
use trustvl_pipeline::eval::{EvidenceSource, ModelPredictor, EVIDENCE_PROPORTIONS};
use trustvl_pipeline::instruct::{sample_for_inspection, write_outputs, GeneratorBackend};
use trustvl_pipeline::remote::RemoteBackend;
use trustvl_pipeline::synth::{alignment_pairs, conversations, distractor_pool, lexicon, synthesize_dataset};
use trustvl_pipeline::training::{default_prompts, sample_texts, train_stages, StageData};
use trustvl_pipeline::{
    ablate_evidence, ablate_joint, ablate_tokens, evaluate, load_checkpoint, load_dataset, read_header, run_pipeline,
    save_checkpoint, write_dataset, CheckpointMeta, ClaimRecord, CorpusIndex, EvalConfig, EvidenceDoc, RetrievalDepth, EvidenceBundle, HintPolicy,
    PipelineError, StageDatasets, StageName, StubBackend, StubBehavior, StubMode,
};
use trustvl_pipeline::dataset::retrieval_features;
use trustvl_pipeline::evidence::CorpusLine;

use crate::config::{FileConfig, RunConfig};
use crate::{AblateArgs, AblateKind, BackendArg, Cli, Command, EvalArgs, GenArgs, GradArgs, ModuleArg, RetrieveArgs, StageArg, StubArg, SynthArgs, TrainArgs};

pub const GRADCHECK_TOLERANCE: f64 = 1e-4;

/// Runtime failure reported as `error[class]: message`.
#[derive(Debug)]
pub struct Failure {
    pub class: &'static str,
    pub message: String,
}

impl From<PipelineError> for Failure {
    fn from(e: PipelineError) -> Self {
        Failure {
            class: e.class(),
            message: e.to_string(),
        }
    }
}

impl From<TensorError> for Failure {
    fn from(e: TensorError) -> Self {
        PipelineError::from(e).into()
    }
}

type Result<T> = std::result::Result<T, Failure>;

fn usage_error(msg: &str) -> ! {
    Cli::command().error(clap::error::ErrorKind::ValueValidation, msg).exit()
}

fn io_fail(path: &Path, e: std::io::Error) -> Failure {
    PipelineError::io(path, e).into()
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| io_fail(dir, e))
}

fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| io_fail(path, e))
}

fn to_json<S: Serialize>(v: &S) -> Result<String> {
    serde_json::to_string_pretty(v).map(|mut s| {
        s.push('\n');
        s
    })
    .map_err(|e| PipelineError::Config(e.to_string()).into())
}

/// Writes `run.json` with the resolved configuration and its digest.
fn write_run(dir: &Path, rc: &RunConfig, digest: &str) -> Result<()> {
    create_dir(dir)?;
    write_file(&dir.join("run.json"), to_json(&json!({ "config_digest": digest, "config": rc }))?)
}

/// Report as `<name>.json` and `<name>.txt`.
fn write_report<S: Serialize>(dir: &Path, name: &str, value: &S, text: &str) -> Result<()> {
    write_file(&dir.join(format!("{name}.json")), to_json(value)?)?;
    write_file(&dir.join(format!("{name}.txt")), text)
}

pub fn run(cli: Cli) -> Result<()> {
    let file = match &cli.config {
        Some(p) => FileConfig::load(p)?,
        None => FileConfig::default(),
    };
    let resolve = |name: &str, precision: Option<Precision>, args: serde_json::Value| -> Result<RunConfig> {
        Ok(RunConfig::resolve(name, file.clone(), cli.seed, precision, args)?)
    };
    match &cli.command {
        Command::Train(a) => {
            let mut rc = resolve("train", cli.precision, args_value(a)?)?;
            match a.epochs.as_deref() {
                None => {}
                Some([e]) => rc.train.epochs = [*e; 3],
                Some([x, y, z]) => rc.train.epochs = [*x, *y, *z],
                Some(_) => usage_error("--epochs takes one value or three comma-separated values"),
            }
            if let Some(b) = a.batch {
                rc.train.batch_size = b;
            }
            let d = rc.digest()?;
            match rc.precision {
                Precision::Single => train::<f32>(&rc, &d, a),
                Precision::Double => train::<f64>(&rc, &d, a),
            }
        }
        Command::Eval(a) => {
            let header = read_header(&a.checkpoint)?;
            let mut rc = resolve("eval", cli.precision.or(Some(header.precision)), args_value(a)?)?;
            rc.eval.workers = a.workers.unwrap_or(rc.eval.workers);
            rc.eval.max_new_tokens = a.max_new.unwrap_or(rc.eval.max_new_tokens);
            let d = rc.digest()?;
            match rc.precision {
                Precision::Single => eval::<f32>(&rc, &d, a),
                Precision::Double => eval::<f64>(&rc, &d, a),
            }
        }
        Command::GenInstruct(a) => {
            let mut rc = resolve("gen-instruct", cli.precision, args_value(a)?)?;
            rc.instruct.max_rounds = a.rounds.unwrap_or(rc.instruct.max_rounds);
            rc.instruct.workers = a.workers.unwrap_or(rc.instruct.workers);
            rc.instruct.inspect = a.inspect.unwrap_or(rc.instruct.inspect);
            if let Some(u) = &a.url {
                rc.remote.endpoint = u.clone();
            }
            let d = rc.digest()?;
            gen_instruct(&rc, &d, a)
        }
        Command::Retrieve(a) => {
            let mut rc = resolve("retrieve", cli.precision, args_value(a)?)?;
            rc.retrieval.m = a.m.unwrap_or(rc.retrieval.m);
            rc.retrieval.n = a.n.unwrap_or(rc.retrieval.n);
            let d = rc.digest()?;
            retrieve(&rc, &d, a)
        }
        Command::Ablate(a) => {
            let precision = match (&a.kind, &a.checkpoint) {
                (AblateKind::Evidence, Some(c)) => cli.precision.or(Some(read_header(c)?.precision)),
                _ => cli.precision,
            };
            let rc = resolve("ablate", precision, args_value(a)?)?;
            let d = rc.digest()?;
            match rc.precision {
                Precision::Single => ablate::<f32>(&rc, &d, a),
                Precision::Double => ablate::<f64>(&rc, &d, a),
            }
        }
        Command::Gradcheck(a) => {
            let rc = resolve("gradcheck", cli.precision, args_value(a)?)?;
            let d = rc.digest()?;
            gradcheck(&rc, &d, a)
        }
        Command::Synthesize(a) => {
            let rc = resolve("synthesize", cli.precision, args_value(a)?)?;
            let d = rc.digest()?;
            synthesize(&rc, &d, a)
        }
    }
}

/// Subcommand arguments as JSON, for the run digest.
fn args_value<S: Serialize>(a: &S) -> Result<serde_json::Value> {
    serde_json::to_value(a).map_err(|e| PipelineError::Config(e.to_string()).into())
}

fn basic_records(n: usize, seed: u64, rc: &RunConfig, kinds: &[DistortionType]) -> Result<Vec<ClaimRecord>> {
    let mut out = Vec::new();
    for &k in kinds {
        out.extend(synthesize_dataset(k, n, seed, &rc.synth)?);
    }
    Ok(out)
}

fn build_vocab(rc: &RunConfig, data: &StageDatasets) -> Result<Vocab> {
    let prompts = default_prompts();
    let mut texts = lexicon();
    for s in StageName::ALL {
        if let Some(d) = data.get(s) {
            let samples = d.to_samples(&prompts)?;
            texts.extend(sample_texts(&samples).map(str::to_string));
        }
    }
    texts.push(trustvl_pipeline::training::ALIGNMENT_PROMPT.into());
    for d in DistortionType::ALL {
        texts.push(rc.model.questions.question(d).text);
    }
    Ok(Vocab::build(texts.iter().map(String::as_str)))
}

fn train<T: Scalar>(rc: &RunConfig, digest: &str, a: &TrainArgs) -> Result<()> {
    let stages: Vec<StageName> = match a.stage {
        StageArg::Stage1 => vec![StageName::Stage1],
        StageArg::Stage2 => vec![StageName::Stage2],
        StageArg::Stage3 => vec![StageName::Stage3],
        StageArg::All => StageName::ALL.to_vec(),
    };
    let reasoning = match &a.data {
        Some(p) => load_dataset(p)?.records,
        None => basic_records(a.synth_n.max(2) / 2 * 2, rc.seed, rc, &DistortionType::BASIC)?,
    };
    let data = StageDatasets {
        stage1: Some(StageData::Alignment(alignment_pairs(a.synth_n, rc.seed, &rc.synth)?)),
        stage2: Some(StageData::Conversation(conversations(a.synth_n, rc.seed, &rc.synth)?)),
        stage3: Some(StageData::Reasoning(reasoning)),
    };
    let mut model = match &a.resume {
        Some(p) => load_checkpoint::<T>(p)?.0,
        None => {
            let vocab = build_vocab(rc, &data)?;
            let mut mc = rc.model.clone();
            mc.llm.vocab_size = vocab.len();
            TrustVl::<T>::new(mc, vocab, rc.seed)?
        }
    };
    write_run(&a.out, rc, digest)?;
    let manifest = train_stages(&mut model, &stages, &data, &rc.train, &default_prompts(), digest, Some(&a.out))?;
    for s in &manifest.stages {
        let last = s.log.epoch_losses.last().copied().unwrap_or(f64::NAN);
        println!("{}: {} epochs, final loss {last:.6}", s.spec.name.as_str(), s.spec.epochs);
    }
    println!("config_digest: {digest}");
    Ok(())
}

fn eval<T: Scalar>(rc: &RunConfig, digest: &str, a: &EvalArgs) -> Result<()> {
    let (model, header) = load_checkpoint::<T>(&a.checkpoint)?;
    let ds = load_dataset(&a.data)?;
    let index = a.corpus.as_deref().map(CorpusIndex::load).transpose()?;
    let cfg = EvalConfig {
        evidence: match &index {
            Some(index) => EvidenceSource::Retrieved {
                index,
                depth: rc.retrieval,
                patch: header.model_config.vision.patch,
            },
            None => EvidenceSource::Supplied,
        },
        workers: rc.eval.workers,
        config_digest: digest.to_string(),
        ..EvalConfig::default()
    };
    let p = ModelPredictor {
        model: &model,
        max_new_tokens: rc.eval.max_new_tokens,
    };
    let report = evaluate(&p, &ds.name, &ds.records, &cfg)?;
    write_run(&a.out, rc, digest)?;
    write_report(&a.out, "report", &report, &report.to_text())?;
    println!("{}: accuracy {:.4}, macro_f1 {:.4}, n {}", ds.name, report.accuracy, report.macro_f1, report.size);
    Ok(())
}

fn bundles_for(records: &[ClaimRecord], index: Option<&CorpusIndex>, rc: &RunConfig) -> Result<Vec<EvidenceBundle>> {
    let source = match index {
        Some(index) => EvidenceSource::Retrieved {
            index,
            depth: rc.retrieval,
            patch: rc.model.vision.patch,
        },
        None => EvidenceSource::Supplied,
    };
    Ok(records
        .iter()
        .map(|r| trustvl_pipeline::eval::build_bundle(r, &source))
        .collect::<std::result::Result<_, _>>()?)
}

fn gen_instruct(rc: &RunConfig, digest: &str, a: &GenArgs) -> Result<()> {
    let records = load_dataset(&a.data)?.records;
    let index = a.corpus.as_deref().map(CorpusIndex::load).transpose()?;
    let bundles = bundles_for(&records, index.as_ref(), rc)?;
    let policy = HintPolicy {
        max_rounds: rc.instruct.max_rounds,
        hint_template: rc.instruct.hint_template.clone(),
    };
    let backend: Box<dyn GeneratorBackend> = match a.backend {
        BackendArg::Stub => {
            let mode = match a.stub_mode {
                StubArg::Agree => StubMode::Fixed(StubBehavior::Agree),
                StubArg::Hint => StubMode::Fixed(StubBehavior::AgreeWithHint),
                StubArg::Never => StubMode::Fixed(StubBehavior::Never),
                StubArg::Fail => StubMode::Fixed(StubBehavior::TransportFail),
                StubArg::Mixed => StubMode::Mixed(vec![
                    (StubBehavior::Agree, 5),
                    (StubBehavior::AgreeWithHint, 3),
                    (StubBehavior::Never, 1),
                    (StubBehavior::TransportFail, 1),
                ]),
            };
            Box::new(StubBackend::new(rc.seed, mode, rc.templates.clone(), &records)?)
        }
        BackendArg::Remote => {
            Box::new(RemoteBackend::new(rc.remote.clone())?)
        }
    };
    let out = run_pipeline(&records, &bundles, backend.as_ref(), &policy, &rc.templates, rc.instruct.workers)?;
    write_run(&a.out, rc, digest)?;
    write_outputs(&a.out, &out, digest)?;
    let n = rc.instruct.inspect.min(out.records.len());
    if n > 0 {
        let (_, rows) = sample_for_inspection(&out.records, n, rc.seed, &rc.templates)?;
        write_file(&a.out.join("inspection.json"), to_json(&json!({ "config_digest": digest, "rows": rows }))?)?;
    }
    let t = &out.report.totals;
    println!(
        "accepted {}, rejected {}, transport_failed {} of {}",
        t.accepted, t.rejected, t.transport_failed, out.report.input_count
    );
    Ok(())
}

#[derive(Serialize)]
struct RetrievalLine<'a> {
    config_digest: &'a str,
    id: String,
    direct: Vec<Hit>,
    inverse: Vec<Hit>,
}

#[derive(Serialize)]
struct Hit {
    id: String,
    text: String,
}

fn hits(docs: Vec<EvidenceDoc>) -> Vec<Hit> {
    docs.into_iter().map(|d| Hit { id: d.id, text: d.text }).collect()
}

fn retrieve(rc: &RunConfig, digest: &str, a: &RetrieveArgs) -> Result<()> {
    let index = CorpusIndex::load(&a.corpus)?;
    let RetrievalDepth { m, n, .. } = rc.retrieval;
    let mut lines = Vec::new();
    if let Some(text) = &a.text {
        lines.push(RetrievalLine {
            config_digest: digest,
            id: "query".into(),
            direct: hits(index.retrieve_direct(text, m)?),
            inverse: Vec::new(),
        });
    }
    if let Some(p) = &a.data {
        for r in load_dataset(p)?.records {
            let feats = retrieval_features(&r.image.resolve()?, rc.model.vision.patch)?;
            lines.push(RetrievalLine {
                config_digest: digest,
                direct: hits(index.retrieve_direct(&r.text, m)?),
                inverse: hits(index.retrieve_inverse(&feats, n)?),
                id: r.id,
            });
        }
    }
    let mut body = String::new();
    for l in &lines {
        body.push_str(&serde_json::to_string(l).map_err(|e| Failure::from(PipelineError::Config(e.to_string())))?);
        body.push('\n');
    }
    write_run(&a.out, rc, digest)?;
    write_file(&a.out.join("evidence.jsonl"), body)?;
    println!("{} queries, m = {m}, n = {n}", lines.len());
    Ok(())
}

fn ablate<T: Scalar>(rc: &RunConfig, digest: &str, a: &AblateArgs) -> Result<()> {
    write_run(&a.out, rc, digest)?;
    match a.kind {
        AblateKind::Tokens => {
            if a.k.is_empty() || a.k.contains(&0) {
                usage_error("--k takes positive token counts");
            }
            let sweep = ablate_tokens::<T>(&a.k, &rc.ablation, digest)?;
            write_report(&a.out, "tokens", &sweep, &sweep.to_text())?;
            print!("{}", sweep.to_text());
        }
        AblateKind::Joint => {
            let (grid, model) = ablate_joint::<T>(&rc.ablation, digest)?;
            write_report(&a.out, "joint", &grid, &grid.to_text())?;
            let meta = CheckpointMeta {
                seed: rc.seed,
                config_digest: digest.to_string(),
                stage: StageName::Stage3.as_str().into(),
            };
            save_checkpoint(&model, &meta, &a.out.join("joint.ckpt"))?;
            print!("{}", grid.to_text());
        }
        AblateKind::Evidence => {
            let (ckpt, data) = match (&a.checkpoint, &a.data) {
                (Some(c), Some(d)) => (c, d),
                _ => usage_error("--kind evidence needs --checkpoint and --data"),
            };
            let (model, _) = load_checkpoint::<T>(ckpt)?;
            let ds = load_dataset(data)?;
            let pool = distractor_pool(a.pool_size, a.pool_seed)?;
            let p = ModelPredictor {
                model: &model,
                max_new_tokens: rc.eval.max_new_tokens,
            };
            let base = EvalConfig {
                workers: rc.eval.workers,
                config_digest: digest.to_string(),
                ..EvalConfig::default()
            };
            let sweep = ablate_evidence(&p, &ds.name, &ds.records, &EVIDENCE_PROPORTIONS, &pool, rc.seed, &base)?;
            write_report(&a.out, "evidence", &sweep, &sweep.to_text())?;
            print!("{}", sweep.to_text());
        }
    }
    Ok(())
}

fn gradcheck(rc: &RunConfig, digest: &str, a: &GradArgs) -> Result<()> {
    let modules: Vec<ModuleKind> = match a.module {
        ModuleArg::Vision => vec![ModuleKind::Vision],
        ModuleArg::Projector => vec![ModuleKind::Projector],
        ModuleArg::Qava => vec![ModuleKind::Qava],
        ModuleArg::Llm => vec![ModuleKind::Llm],
        ModuleArg::All => ModuleKind::ALL.to_vec(),
    };
    if a.seeds == 0 || a.coords == 0 {
        usage_error("--seeds and --coords must be positive");
    }
    println!("config_digest: {digest}");
    let mut overall: f64 = 0.0;
    for m in modules {
        let mut worst: f64 = 0.0;
        let mut worst_param = String::new();
        for seed in rc.seed..rc.seed + a.seeds {
            let r = check_module(m, seed, a.coords)?;
            if r.max_rel_error >= worst {
                worst = r.max_rel_error;
                worst_param = r.worst_param;
            }
        }
        println!("{}: max relative error {worst:.3e} over {} seeds (worst at {worst_param})", m.as_str(), a.seeds);
        overall = overall.max(worst);
    }
    println!("max relative error: {overall:.3e}");
    if overall.is_nan() || overall >= GRADCHECK_TOLERANCE {
        return Err(Failure {
            class: "gradcheck",
            message: format!("max relative error {overall:.3e} is not below {GRADCHECK_TOLERANCE:e}"),
        });
    }
    Ok(())
}

/// Corpus with every supplied direct caption as an image document and
/// every inverse text as a text document tagged with its record's image.
fn corpus_for(records: &[ClaimRecord], patch: usize) -> Result<Vec<CorpusLine>> {
    let mut lines = Vec::new();
    for r in records {
        let Some(ev) = &r.evidence else { continue };
        for (j, d) in ev.direct.iter().enumerate() {
            lines.push(CorpusLine {
                id: format!("{}-d{j}", r.id),
                kind: "image".into(),
                text: d.clone(),
                image_features: None,
            });
        }
        let rows = retrieval_features(&r.image.resolve()?, patch)?;
        let dim = rows.first().map_or(0, Vec::len);
        let mut mean = vec![0.0; dim];
        for row in &rows {
            mean.iter_mut().zip(row).for_each(|(a, b)| *a += b / rows.len() as f64);
        }
        for (j, t) in ev.inverse.iter().enumerate() {
            lines.push(CorpusLine {
                id: format!("{}-i{j}", r.id),
                kind: "text".into(),
                text: t.clone(),
                image_features: Some(mean.clone()),
            });
        }
    }
    Ok(lines)
}

fn synthesize(rc: &RunConfig, digest: &str, a: &SynthArgs) -> Result<()> {
    if a.n < 2 || a.n % 2 != 0 {
        usage_error("--n must be even and at least 2");
    }
    let records = basic_records(a.n, rc.seed, rc, &a.kind.kinds())?;
    write_run(&a.out, rc, digest)?;
    write_dataset(&a.out.join("dataset.jsonl"), &records)?;
    let mut body = String::new();
    for l in corpus_for(&records, rc.model.vision.patch)? {
        body.push_str(&serde_json::to_string(&l).map_err(|e| Failure::from(PipelineError::Config(e.to_string())))?);
        body.push('\n');
    }
    write_file(&a.out.join("corpus.jsonl"), body)?;
    println!("{} records", records.len());
    Ok(())
}
