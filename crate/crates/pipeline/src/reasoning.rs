//! Structured reasoning protocol: sub-query templates, prompt assembly,
//! verdict parsing, chain validation and chain serialization.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;
use trustvl_core::{DistortionType, Label, QuestionTemplates};

use crate::error::{PipelineError, Result};
use crate::evidence::{EvidenceBundle, EvidenceKind};

/// Version tag of the compact chain serialization used as the LM target.
pub const CHAIN_FORMAT: &str = "v1";
pub const STEP_SEPARATOR: &str = " ; ";

const SYSTEM_MESSAGE: &str = "You are a misinformation detection assistant. Task description: some rumormongers intentionally write fake news, manipulate images, or use images from other news events to make multimodal misinformation. Given a news text and a news image, you are responsible for judging whether the given text and image are both credible and faithfully represent the news event. You will be presented with a text, an image, direct evidence, and inverse evidence. For final judgement, you should output either 'Real' or 'Fake' depending on whether you think the given text and accompanying image are both truthful and consistent: 'Real' if the news is factually correct and the image faithfully represent the news text, or 'Fake' if the news is misleading, manipulated or the image is wrongly used in the news text.";

const RULES: &str = "A few rules:
- If a specific type of evidence (i.e., direct, or inverse) is not provided, state clearly: 'There is no {type} evidence.'
- Do not nitpick over the direct and inverse evidence as it may contain some noise.
- Your judgement must always end with either 'Real' or 'Fake'.";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReasoningStep {
    pub query: String,
    pub answer: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReasoningChain {
    /// Template steps; the last is the conclusion, whose answer is the
    /// explanation followed by the verdict token.
    pub steps: Vec<ReasoningStep>,
    pub verdict: Label,
    pub explanation: String,
}

impl ReasoningChain {
    /// Chain over `template_for(d)` with the given answers; the conclusion
    /// answer is `explanation` plus the verdict token.
    pub fn from_answers(queries: &[String], answers: &[String], explanation: &str, verdict: Label) -> Result<Self> {
        if answers.len() + 1 != queries.len() {
            return Err(PipelineError::Config(format!(
                "{} answers for {} queries (conclusion excluded)",
                answers.len(),
                queries.len()
            )));
        }
        let mut steps: Vec<ReasoningStep> = queries
            .iter()
            .zip(answers)
            .map(|(q, a)| ReasoningStep {
                query: q.clone(),
                answer: a.clone(),
            })
            .collect();
        let conclusion = if explanation.is_empty() {
            verdict.token().to_string()
        } else {
            format!("{explanation} {}", verdict.token())
        };
        steps.push(ReasoningStep {
            query: queries.last().cloned().unwrap_or_default(),
            answer: conclusion,
        });
        Ok(Self {
            steps,
            verdict,
            explanation: explanation.to_string(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Verdict {
    pub label: Label,
    pub raw_text: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("unparseable verdict in {tail:?}")]
pub struct UnparseableVerdict {
    pub tail: String,
}

/// Final alphabetic token after stripping trailing whitespace and
/// punctuation; must be exactly `Real` or `Fake`.
pub fn parse_verdict(text: &str) -> std::result::Result<Verdict, UnparseableVerdict> {
    let trimmed = text.trim_end_matches(|c: char| c.is_whitespace() || c.is_ascii_punctuation());
    let start = trimmed
        .char_indices()
        .rev()
        .find(|(_, c)| !c.is_alphabetic())
        .map_or(0, |(i, c)| i + c.len_utf8());
    let token = &trimmed[start..];
    let label = match token {
        "Real" => Label::Real,
        "Fake" => Label::Fake,
        _ => {
            return Err(UnparseableVerdict {
                tail: token.to_string(),
            })
        }
    };
    Ok(Verdict {
        label,
        raw_text: text.to_string(),
    })
}

/// Sub-query wording: two shared steps, a specialized branch per distortion
/// type and a conclusion.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReasoningTemplates {
    pub shared: Vec<String>,
    pub specialized: BTreeMap<DistortionType, Vec<String>>,
    pub conclusion: String,
}

/// Partial template file; absent keys keep their defaults.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TemplateOverrides {
    pub shared: Option<Vec<String>>,
    #[serde(default)]
    pub specialized: BTreeMap<DistortionType, Vec<String>>,
    pub conclusion: Option<String>,
}

fn strings(v: &[&str]) -> Vec<String> {
    v.iter().map(|s| s.to_string()).collect()
}

impl Default for ReasoningTemplates {
    fn default() -> Self {
        let specialized = [
            (
                DistortionType::Textual,
                strings(&[
                    "Evaluate the tone and stance of the text",
                    "Check whether the evidence supports the text",
                    "Identify statements that conflict with the evidence",
                ]),
            ),
            (
                DistortionType::Visual,
                strings(&[
                    "Inspect the image for manipulated artifacts",
                    "Look for AI-generated patterns in the image",
                    "Judge whether the visual details are physically plausible",
                ]),
            ),
            (
                DistortionType::CrossModal,
                strings(&[
                    "Check whether the image matches the caption",
                    "Check whether the image matches the retrieved evidence",
                    "Check whether the caption and the evidence describe the same event",
                ]),
            ),
            (
                DistortionType::Mixed,
                strings(&[
                    "Check whether the evidence supports the text",
                    "Inspect the image for manipulated or AI-generated patterns",
                    "Check whether the image matches the caption",
                ]),
            ),
            (
                DistortionType::Unknown,
                strings(&[
                    "Is there any distortion?",
                    "Identify which signals point to a distortion",
                    "Weigh those signals against the evidence",
                ]),
            ),
        ]
        .into_iter()
        .collect();
        Self {
            shared: strings(&["Analyze the text", "Provide a detailed description of the news image"]),
            specialized,
            conclusion: "What is your final judgement?".into(),
        }
    }
}

impl ReasoningTemplates {
    pub fn with_overrides(o: &TemplateOverrides) -> Result<Self> {
        let mut t = Self::default();
        if let Some(s) = &o.shared {
            t.shared = s.clone();
        }
        for (d, steps) in &o.specialized {
            t.specialized.insert(*d, steps.clone());
        }
        if let Some(c) = &o.conclusion {
            t.conclusion = c.clone();
        }
        t.validate()?;
        Ok(t)
    }

    /// Parses a TOML template file.
    pub fn from_toml(text: &str) -> Result<Self> {
        let o: TemplateOverrides = toml::from_str(text).map_err(|e| PipelineError::Config(e.to_string()))?;
        Self::with_overrides(&o)
    }

    pub fn validate(&self) -> Result<()> {
        if self.shared.len() != 2 {
            return Err(PipelineError::Config(format!("expected 2 shared steps, got {}", self.shared.len())));
        }
        for d in DistortionType::ALL {
            if self.specialized.get(&d).is_none_or(|s| s.is_empty()) {
                return Err(PipelineError::Config(format!("no specialized steps for {d}")));
            }
        }
        let all = self.shared.iter().chain(self.specialized.values().flatten()).chain([&self.conclusion]);
        for q in all {
            if q.trim().is_empty() || q.contains(": ") || q.contains('\n') {
                return Err(PipelineError::Config(format!("invalid sub-query {q:?}")));
            }
        }
        Ok(())
    }

    pub fn specialized(&self, d: DistortionType) -> &[String] {
        &self.specialized[&d]
    }

    /// Shared steps, then the branch for `d`, then the conclusion.
    pub fn template_for(&self, d: DistortionType) -> Vec<String> {
        let mut q = self.shared.clone();
        q.extend(self.specialized(d).iter().cloned());
        q.push(self.conclusion.clone());
        q
    }
}

pub fn template_for(d: DistortionType) -> Vec<String> {
    ReasoningTemplates::default().template_for(d)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PromptStyle {
    /// System message, rules and input sections.
    Full,
    /// Task question and input sections only.
    Compact,
}

fn render_evidence(out: &mut String, header: &str, bundle: &EvidenceBundle, kind: EvidenceKind) {
    let list = bundle.list(kind);
    if list.is_empty() {
        let _ = writeln!(out, "{header}: There is no {} evidence.", kind.as_str());
    } else {
        let joined: Vec<&str> = list.iter().map(|d| d.text.as_str()).collect();
        let _ = writeln!(out, "{header}: {}", joined.join(" | "));
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptBuilder {
    pub style: PromptStyle,
    pub questions: QuestionTemplates,
}

impl PromptBuilder {
    pub fn new(style: PromptStyle) -> Self {
        Self {
            style,
            questions: QuestionTemplates::default(),
        }
    }

    pub fn assemble(&self, claim: &str, bundle: &EvidenceBundle, d: DistortionType) -> String {
        let mut out = String::new();
        match self.style {
            PromptStyle::Full => {
                let _ = write!(out, "{SYSTEM_MESSAGE}\n\n{RULES}\n\n<image>\n");
            }
            PromptStyle::Compact => {
                let _ = writeln!(out, "Question: {}", self.questions.question(d).text);
            }
        }
        let _ = writeln!(out, "Caption: {}", claim.trim());
        render_evidence(&mut out, "Direct Evidence", bundle, EvidenceKind::Direct);
        render_evidence(&mut out, "Inverse Evidence", bundle, EvidenceKind::Inverse);
        render_evidence(&mut out, "Context Evidence", bundle, EvidenceKind::Context);
        out.push_str("Your judgement:");
        out
    }
}

/// Full-style prompt.
pub fn assemble_prompt(claim: &str, bundle: &EvidenceBundle, d: DistortionType) -> String {
    PromptBuilder::new(PromptStyle::Full).assemble(claim, bundle, d)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "check", rename_all = "snake_case")]
pub enum Violation {
    /// Queries differ from the template at `step` (or in count).
    QueryOrder { step: usize, expected: String, found: String },
    EmptyAnswer { step: usize },
    MissingSpecialized { query: String },
    Verdict { detail: String },
}

/// Machine-checkable chain properties: template order, non-empty answers,
/// specialized steps present and a conclusion ending in the verdict.
pub fn validate_chain(templates: &ReasoningTemplates, chain: &ReasoningChain, d: DistortionType) -> Vec<Violation> {
    let mut v = Vec::new();
    let want = templates.template_for(d);
    let n = want.len().max(chain.steps.len());
    for i in 0..n {
        let expected = want.get(i).cloned().unwrap_or_default();
        let found = chain.steps.get(i).map(|s| s.query.clone()).unwrap_or_default();
        if expected != found {
            v.push(Violation::QueryOrder { step: i + 1, expected, found });
            break;
        }
    }
    for (i, s) in chain.steps.iter().enumerate() {
        if s.answer.trim().is_empty() {
            v.push(Violation::EmptyAnswer { step: i + 1 });
        }
    }
    for q in templates.specialized(d) {
        if !chain.steps.iter().any(|s| &s.query == q) {
            v.push(Violation::MissingSpecialized { query: q.clone() });
        }
    }
    match chain.steps.last().map(|s| parse_verdict(&s.answer)) {
        Some(Ok(verdict)) if verdict.label == chain.verdict => {}
        Some(Ok(verdict)) => v.push(Violation::Verdict {
            detail: format!("conclusion says {} but chain verdict is {}", verdict.label, chain.verdict),
        }),
        Some(Err(e)) => v.push(Violation::Verdict { detail: e.to_string() }),
        None => v.push(Violation::Verdict {
            detail: "no conclusion step".into(),
        }),
    }
    v
}

/// Compact form: step answers joined by [`STEP_SEPARATOR`].
pub fn serialize_chain(chain: &ReasoningChain) -> Result<String> {
    if let Some(s) = chain.steps.iter().find(|s| s.answer.contains(';')) {
        return Err(PipelineError::Config(format!("answer {:?} contains ';'", s.answer)));
    }
    let answers: Vec<&str> = chain.steps.iter().map(|s| s.answer.trim()).collect();
    Ok(answers.join(STEP_SEPARATOR))
}

/// Inverse of [`serialize_chain`] given the distortion type.
pub fn parse_chain(templates: &ReasoningTemplates, text: &str, d: DistortionType) -> Result<ReasoningChain> {
    let queries = templates.template_for(d);
    let parts: Vec<&str> = text.split(';').map(str::trim).collect();
    if parts.len() != queries.len() {
        return Err(PipelineError::Config(format!(
            "{} chain parts for {} template steps",
            parts.len(),
            queries.len()
        )));
    }
    chain_from_parts(&queries, &parts)
}

fn chain_from_parts(queries: &[String], answers: &[&str]) -> Result<ReasoningChain> {
    let last = answers.last().copied().unwrap_or_default();
    let verdict = parse_verdict(last).map_err(|e| PipelineError::Config(e.to_string()))?;
    let trimmed = last.trim_end_matches(|c: char| c.is_whitespace() || c.is_ascii_punctuation());
    let explanation = trimmed[..trimmed.len() - verdict.label.token().len()].trim().to_string();
    Ok(ReasoningChain {
        steps: queries
            .iter()
            .zip(answers)
            .map(|(q, a)| ReasoningStep {
                query: q.clone(),
                answer: a.to_string(),
            })
            .collect(),
        verdict: verdict.label,
        explanation,
    })
}

/// Generator-side rendering: one `Step i - query: answer` line per step.
pub fn render_steps(chain: &ReasoningChain) -> String {
    let mut out = String::new();
    for (i, s) in chain.steps.iter().enumerate() {
        let _ = writeln!(out, "Step {} - {}: {}", i + 1, s.query, s.answer);
    }
    out
}

/// Parses `Step i - query: answer` lines; lines that do not follow the
/// pattern are ignored. The verdict comes from the last step's answer.
pub fn parse_steps(text: &str) -> Result<ReasoningChain> {
    let mut queries = Vec::new();
    let mut answers = Vec::new();
    for line in text.lines() {
        let Some(rest) = line.trim().strip_prefix("Step ") else {
            continue;
        };
        let Some((num, body)) = rest.split_once(" - ") else {
            continue;
        };
        if num.parse::<usize>().is_err() {
            continue;
        }
        let Some((q, a)) = body.split_once(": ") else {
            continue;
        };
        queries.push(q.trim().to_string());
        answers.push(a.trim());
    }
    if queries.is_empty() {
        return Err(PipelineError::Config("no steps found".into()));
    }
    chain_from_parts(&queries, &answers)
}
