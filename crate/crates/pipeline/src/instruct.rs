//! Instruction construction: prompt a generator with the reasoning template,
//! verify the verdict against the gold label, retry with a hint naming the
//! label, and keep only verified chains.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::hash::Hasher;
use std::io::Write as _;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use fnv::FnvHasher;
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use trustvl_core::{DistortionType, Label};

use crate::dataset::ClaimRecord;
use crate::error::{PipelineError, Result};
use crate::evidence::{EvidenceBundle, EvidenceKind};
use crate::reasoning::{parse_steps, parse_verdict, render_steps, validate_chain, ReasoningChain, ReasoningStep, ReasoningTemplates, Violation};

const TASK_DESCRIPTION: &str = "Task description: some rumormongers intentionally write fake news, manipulate images, or use images from other news events to make multimodal misinformation. Given a news text and a news image, you are responsible for judging whether the given text and image are both credible and faithfully represent the news event. You will be presented with a text and an image. You should use the following step-by-step instructions to derive your judgement:";

const STEP_DETAILS: [(&str, &str); 3] = [
    (
        "Analyze the text",
        "Carefully review the provided text, summarize its key facts, events, and entities. Pay attention to any misleading, false, or fabricated contents.",
    ),
    (
        "Provide a detailed description of the news image",
        "Identify the main subjects, such as people, groups, or specific elements related to the news event.",
    ),
    (
        "What is your final judgement?",
        "According to the previous steps, you will first think out loud about your eventual conclusion, enumerating reasons why the news does or does not contain false information. After thinking out loud, you should output either 'Real' or 'Fake' depending on whether you think the given text and accompanying image are both truthful and consistent: 'Real' if the news is factually correct and the image faithfully represent the news text, or 'Fake' if the news is misleading, manipulated or the image is used out of context.",
    ),
];

const ANSWER_FORMAT: &str = "Answer with one line per step in the form 'Step <number> - <sub-query>: <answer>'.";

/// Retry bound and the hint appended from the second round on.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HintPolicy {
    pub max_rounds: usize,
    /// `{label}` is replaced by `Real` or `Fake`.
    pub hint_template: String,
}

impl Default for HintPolicy {
    fn default() -> Self {
        Self {
            max_rounds: 3,
            hint_template: "Hint: the ground-truth judgement for this news is '{label}'. Reason towards it and end with '{label}'.".into(),
        }
    }
}

impl HintPolicy {
    pub fn validate(&self) -> Result<()> {
        if self.max_rounds == 0 {
            return Err(PipelineError::Config("max_rounds must be at least 1".into()));
        }
        if !self.hint_template.contains("{label}") {
            return Err(PipelineError::Config("hint template must contain {label}".into()));
        }
        Ok(())
    }

    pub fn hint(&self, gold: Label) -> String {
        self.hint_template.replace("{label}", gold.token())
    }
}

fn render_evidence(out: &mut String, header: &str, bundle: &EvidenceBundle, kind: EvidenceKind) {
    let list = bundle.list(kind);
    if list.is_empty() {
        let _ = writeln!(out, "{header}: There is no {} evidence.", kind.as_str());
    } else {
        let texts: Vec<&str> = list.iter().map(|d| d.text.as_str()).collect();
        let _ = writeln!(out, "{header}: {}", texts.join(" | "));
    }
}

/// Generation prompt: task description, numbered template steps, the input
/// sections and, when given, the hint as the final instruction.
pub fn build_gen_prompt(
    templates: &ReasoningTemplates,
    claim: &str,
    bundle: &EvidenceBundle,
    d: DistortionType,
    hint: Option<&str>,
) -> String {
    let details: HashMap<&str, &str> = STEP_DETAILS.into_iter().collect();
    let mut out = String::new();
    let _ = writeln!(out, "{TASK_DESCRIPTION}");
    for (i, q) in templates.template_for(d).iter().enumerate() {
        let _ = match details.get(q.as_str()) {
            Some(detail) if q.ends_with('?') => writeln!(out, "Step {} - {q} {detail}", i + 1),
            Some(detail) => writeln!(out, "Step {} - {q}: {detail}", i + 1),
            None => writeln!(out, "Step {} - {q}.", i + 1),
        };
    }
    let _ = writeln!(out, "{ANSWER_FORMAT}\n\n<image>");
    let _ = writeln!(out, "Caption: {}", claim.trim());
    render_evidence(&mut out, "Direct Evidence", bundle, EvidenceKind::Direct);
    render_evidence(&mut out, "Inverse Evidence", bundle, EvidenceKind::Inverse);
    render_evidence(&mut out, "Context Evidence", bundle, EvidenceKind::Context);
    out.push_str("Your judgement:");
    if let Some(h) = hint {
        let _ = write!(out, "\n{h}");
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GenRequest {
    pub id: String,
    pub distortion: DistortionType,
    pub prompt: String,
    /// 1-based round number.
    pub round: usize,
    pub hint: Option<String>,
}

/// Text-in, text-out generator. Errors are transport failures that
/// survived the backend's own retries.
pub trait GeneratorBackend: Send + Sync {
    fn generate(&self, req: &GenRequest) -> Result<String>;
}

/// How the stub answers a record.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StubBehavior {
    Agree,
    AgreeWithHint,
    Never,
    TransportFail,
}

/// Per-record behaviour: fixed, or drawn by weight from a hash of the seed
/// and record id.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StubMode {
    Fixed(StubBehavior),
    Mixed(Vec<(StubBehavior, u32)>),
}

fn hash_parts(parts: &[&[u8]]) -> u64 {
    let mut h = FnvHasher::default();
    for p in parts {
        h.write(p);
        h.write(&[0xff]);
    }
    h.finish()
}

/// Deterministic template-filling generator.
pub struct StubBackend {
    seed: u64,
    mode: StubMode,
    templates: ReasoningTemplates,
    golds: HashMap<String, Label>,
}

impl StubBackend {
    pub fn new(seed: u64, mode: StubMode, templates: ReasoningTemplates, records: &[ClaimRecord]) -> Result<Self> {
        if let StubMode::Mixed(w) = &mode {
            if w.iter().map(|&(_, x)| x as u64).sum::<u64>() == 0 {
                return Err(PipelineError::Config("stub weights sum to zero".into()));
            }
        }
        Ok(Self {
            seed,
            mode,
            templates,
            golds: records.iter().map(|r| (r.id.clone(), r.label)).collect(),
        })
    }

    pub fn behavior(&self, id: &str) -> StubBehavior {
        match &self.mode {
            StubMode::Fixed(b) => *b,
            StubMode::Mixed(weights) => {
                let total: u64 = weights.iter().map(|&(_, w)| w as u64).sum();
                let mut pick = hash_parts(&[&self.seed.to_le_bytes(), id.as_bytes()]) % total;
                for &(b, w) in weights {
                    if pick < w as u64 {
                        return b;
                    }
                    pick -= w as u64;
                }
                unreachable!("pick is below the weight total")
            }
        }
    }
}

impl GeneratorBackend for StubBackend {
    fn generate(&self, req: &GenRequest) -> Result<String> {
        let gold = *self
            .golds
            .get(&req.id)
            .ok_or_else(|| PipelineError::Transport(format!("stub has no record {}", req.id)))?;
        let flip = |l: Label| if l == Label::Real { Label::Fake } else { Label::Real };
        let verdict = match self.behavior(&req.id) {
            StubBehavior::Agree => gold,
            StubBehavior::AgreeWithHint if req.hint.is_some() => gold,
            StubBehavior::AgreeWithHint | StubBehavior::Never => flip(gold),
            StubBehavior::TransportFail => {
                return Err(PipelineError::Transport(format!("stub refused {} in round {}", req.id, req.round)))
            }
        };
        let h = hash_parts(&[&self.seed.to_le_bytes(), req.id.as_bytes(), &(req.round as u64).to_le_bytes()]);
        let queries = self.templates.template_for(req.distortion);
        let answers: Vec<String> = (0..queries.len() - 1).map(|i| format!("observation {} for step {}", (h >> (i * 4)) & 0xf, i + 1)).collect();
        let chain = ReasoningChain::from_answers(&queries, &answers, "weighing the steps above", verdict)?;
        Ok(render_steps(&chain))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum RecordStatus {
    Accepted,
    Rejected,
    TransportFailed { error: String },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InstructRecord {
    pub id: String,
    pub distortion: DistortionType,
    /// Prompt without the hint.
    pub prompt: String,
    pub chain: Option<ReasoningChain>,
    pub gold_label: Label,
    pub rounds_used: usize,
    pub status: RecordStatus,
}

/// One line of the instruction file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InstructLine {
    pub id: String,
    pub distortion: DistortionType,
    pub prompt: String,
    pub steps: Vec<ReasoningStep>,
    pub verdict: Label,
    pub rounds_used: usize,
}

/// Up to `max_rounds` generations; the first uses the plain prompt, later
/// ones append the hint. Accepted only on a verdict equal to `gold`.
pub fn generate_and_verify(
    claim: &ClaimRecord,
    bundle: &EvidenceBundle,
    backend: &dyn GeneratorBackend,
    policy: &HintPolicy,
    templates: &ReasoningTemplates,
) -> InstructRecord {
    let d = claim.distortion;
    let gold = claim.label;
    let base = build_gen_prompt(templates, &claim.text, bundle, d, None);
    let mut rec = InstructRecord {
        id: claim.id.clone(),
        distortion: d,
        prompt: base.clone(),
        chain: None,
        gold_label: gold,
        rounds_used: 0,
        status: RecordStatus::Rejected,
    };
    for round in 1..=policy.max_rounds {
        let hint = (round > 1).then(|| policy.hint(gold));
        let prompt = match &hint {
            Some(h) => build_gen_prompt(templates, &claim.text, bundle, d, Some(h)),
            None => base.clone(),
        };
        rec.rounds_used = round;
        let req = GenRequest {
            id: claim.id.clone(),
            distortion: d,
            prompt,
            round,
            hint,
        };
        let text = match backend.generate(&req) {
            Ok(t) => t,
            Err(e) => {
                rec.status = RecordStatus::TransportFailed { error: e.to_string() };
                return rec;
            }
        };
        if parse_verdict(&text).is_ok_and(|v| v.label == gold) {
            rec.chain = parse_steps(&text).ok().filter(|c| c.verdict == gold);
            if rec.chain.is_some() {
                rec.status = RecordStatus::Accepted;
                return rec;
            }
        }
    }
    rec
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StatusCounts {
    pub accepted: usize,
    pub rejected: usize,
    pub transport_failed: usize,
}

impl StatusCounts {
    pub fn total(&self) -> usize {
        self.accepted + self.rejected + self.transport_failed
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PipelineReport {
    pub max_rounds: usize,
    pub input_count: usize,
    pub totals: StatusCounts,
    pub by_distortion: BTreeMap<DistortionType, StatusCounts>,
}

impl PipelineReport {
    pub fn to_text(&self) -> String {
        let mut s = format!("records: {}  max_rounds: {}\n", self.input_count, self.max_rounds);
        let mut row = |name: &str, c: &StatusCounts| {
            let _ = writeln!(s, "{name:<12} accepted {:>5}  rejected {:>5}  transport {:>5}", c.accepted, c.rejected, c.transport_failed);
        };
        for (d, c) in &self.by_distortion {
            row(d.as_str(), c);
        }
        row("total", &self.totals);
        s
    }
}

pub struct PipelineOutput {
    /// Every record, in input order.
    pub records: Vec<InstructRecord>,
    pub report: PipelineReport,
}

impl PipelineOutput {
    pub fn accepted_lines(&self) -> Vec<InstructLine> {
        self.records
            .iter()
            .filter(|r| r.status == RecordStatus::Accepted)
            .filter_map(|r| {
                let c = r.chain.as_ref()?;
                Some(InstructLine {
                    id: r.id.clone(),
                    distortion: r.distortion,
                    prompt: r.prompt.clone(),
                    steps: c.steps.clone(),
                    verdict: c.verdict,
                    rounds_used: r.rounds_used,
                })
            })
            .collect()
    }

    /// JSONL bytes of the accepted records.
    pub fn instruction_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        for l in self.accepted_lines() {
            serde_json::to_writer(&mut out, &l).map_err(|e| PipelineError::Config(e.to_string()))?;
            out.push(b'\n');
        }
        Ok(out)
    }
}

/// Processes every record with up to `workers` threads; output order is the
/// input order whatever the completion order.
pub fn run_pipeline(
    records: &[ClaimRecord],
    bundles: &[EvidenceBundle],
    backend: &dyn GeneratorBackend,
    policy: &HintPolicy,
    templates: &ReasoningTemplates,
    workers: usize,
) -> Result<PipelineOutput> {
    policy.validate()?;
    if records.len() != bundles.len() {
        return Err(PipelineError::LengthMismatch(bundles.len(), records.len()));
    }
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<InstructRecord>>> = Mutex::new(vec![None; records.len()]);
    std::thread::scope(|s| {
        for _ in 0..workers.max(1) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= records.len() {
                    break;
                }
                let r = generate_and_verify(&records[i], &bundles[i], backend, policy, templates);
                slots.lock().expect("no worker panicked")[i] = Some(r);
            });
        }
    });
    let out: Vec<InstructRecord> = slots
        .into_inner()
        .expect("no worker panicked")
        .into_iter()
        .map(|r| r.expect("every index was processed"))
        .collect();
    let mut report = PipelineReport {
        max_rounds: policy.max_rounds,
        input_count: records.len(),
        totals: StatusCounts::default(),
        by_distortion: BTreeMap::new(),
    };
    for r in &out {
        let c = report.by_distortion.entry(r.distortion).or_default();
        for counts in [c, &mut report.totals] {
            match r.status {
                RecordStatus::Accepted => counts.accepted += 1,
                RecordStatus::Rejected => counts.rejected += 1,
                RecordStatus::TransportFailed { .. } => counts.transport_failed += 1,
            }
        }
    }
    Ok(PipelineOutput { records: out, report })
}

/// One row of the manual inspection checklist, pre-filled from
/// [`validate_chain`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChecklistRow {
    pub id: String,
    pub distortion: DistortionType,
    pub aligned_with_type: bool,
    pub logically_ordered: bool,
    pub specialized_step_ok: bool,
    pub label_accurate: bool,
    pub violations: Vec<Violation>,
    pub reviewer_notes: String,
}

pub const DEFAULT_INSPECTION_SIZE: usize = 200;

/// Seeded uniform sample of `n` records (kept in input order) with their
/// checklist rows.
pub fn sample_for_inspection(
    records: &[InstructRecord],
    n: usize,
    seed: u64,
    templates: &ReasoningTemplates,
) -> Result<(Vec<InstructRecord>, Vec<ChecklistRow>)> {
    if n > records.len() {
        return Err(PipelineError::Config(format!("cannot sample {n} of {} records", records.len())));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx = sample(&mut rng, records.len(), n).into_vec();
    idx.sort_unstable();
    let subset: Vec<InstructRecord> = idx.into_iter().map(|i| records[i].clone()).collect();
    let rows = subset
        .iter()
        .map(|r| {
            let violations = match &r.chain {
                Some(c) => validate_chain(templates, c, r.distortion),
                None => vec![Violation::Verdict {
                    detail: "no accepted chain".into(),
                }],
            };
            let has = |f: fn(&Violation) -> bool| violations.iter().any(f);
            ChecklistRow {
                id: r.id.clone(),
                distortion: r.distortion,
                aligned_with_type: !has(|v| matches!(v, Violation::QueryOrder { .. })),
                logically_ordered: !has(|v| matches!(v, Violation::QueryOrder { .. } | Violation::EmptyAnswer { .. })),
                specialized_step_ok: !has(|v| matches!(v, Violation::MissingSpecialized { .. })),
                label_accurate: r.chain.as_ref().is_some_and(|c| c.verdict == r.gold_label),
                violations,
                reviewer_notes: String::new(),
            }
        })
        .collect();
    Ok((subset, rows))
}

/// Writes the instruction JSONL plus `report.json` and `report.txt` into
/// `dir`.
pub fn write_outputs(dir: &Path, out: &PipelineOutput, digest: &str) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| PipelineError::io(dir, e))?;
    let write = |name: &str, bytes: &[u8]| {
        let p = dir.join(name);
        std::fs::File::create(&p).and_then(|mut f| f.write_all(bytes)).map_err(|e| PipelineError::io(p, e))
    };
    write("instructions.jsonl", &out.instruction_bytes()?)?;
    let json = serde_json::json!({ "config_digest": digest, "report": out.report });
    write("report.json", serde_json::to_string_pretty(&json).unwrap_or_default().as_bytes())?;
    write("report.txt", format!("config_digest: {digest}\n{}", out.report.to_text()).as_bytes())
}
