//! Synthetic claim world with planted, type-specific fake signals.
//!
//! Each topic has a subject, a pair of opposite verbs and a dominant image
//! colour. Real claims repeat the fact stated in the direct evidence next to
//! an image of the same topic. Fakes carry exactly one signal: an antonym
//! verb (textual), a bright square block in the image (visual), or an image
//! and inverse evidence from a different topic (cross-modal).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use trustvl_core::{DistortionType, Image, Label};

use crate::dataset::{ClaimRecord, ImageRef, SuppliedEvidence};
use crate::error::{PipelineError, Result};
use crate::evidence::{EvidenceDoc, EvidenceKind};
use crate::reasoning::{ReasoningChain, ReasoningTemplates};

struct Topic {
    name: &'static str,
    subject: &'static str,
    verbs: [&'static str; 2],
    color: [f32; 3],
}

const TOPICS: [Topic; 6] = [
    Topic {
        name: "flood",
        subject: "river",
        verbs: ["rose", "fell"],
        color: [0.10, 0.15, 0.50],
    },
    Topic {
        name: "wildfire",
        subject: "fire",
        verbs: ["grew", "shrank"],
        color: [0.50, 0.20, 0.05],
    },
    Topic {
        name: "election",
        subject: "candidate",
        verbs: ["won", "lost"],
        color: [0.35, 0.05, 0.35],
    },
    Topic {
        name: "football",
        subject: "striker",
        verbs: ["scored", "missed"],
        color: [0.10, 0.45, 0.10],
    },
    Topic {
        name: "protest",
        subject: "crowd",
        verbs: ["gathered", "dispersed"],
        color: [0.45, 0.40, 0.05],
    },
    Topic {
        name: "concert",
        subject: "festival",
        verbs: ["opened", "closed"],
        color: [0.05, 0.35, 0.45],
    },
];

const PLACES: [&str; 4] = ["downtown", "harbor", "uptown", "campus"];

/// Calibration constants of the synthetic world.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub image_size: usize,
    pub noise: f32,
    pub block_size: usize,
    pub block_intensity: f32,
    pub num_topics: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            image_size: 16,
            noise: 0.04,
            block_size: 2,
            block_intensity: 1.0,
            num_topics: 6,
        }
    }
}

impl SynthConfig {
    fn validate(&self) -> Result<()> {
        if !(2..=TOPICS.len()).contains(&self.num_topics) || self.block_size > self.image_size || self.image_size == 0 {
            return Err(PipelineError::Config(format!("invalid synthetic config {self:?}")));
        }
        Ok(())
    }
}

fn quantize(v: f32) -> f32 {
    (v.clamp(0.0, 1.0) * 255.0).round() / 255.0
}

fn topic_image(cfg: &SynthConfig, topic: usize, block: bool, rng: &mut ChaCha8Rng) -> Result<Image> {
    let s = cfg.image_size;
    let color = TOPICS[topic].color;
    let mut data = Vec::with_capacity(s * s * 3);
    for _ in 0..s * s {
        for c in color {
            data.push(quantize(c + rng.random_range(-cfg.noise..=cfg.noise)));
        }
    }
    if block {
        let b = cfg.block_size;
        let (y0, x0) = (rng.random_range(0..=s - b), rng.random_range(0..=s - b));
        for y in y0..y0 + b {
            for x in x0..x0 + b {
                for c in 0..3 {
                    data[(y * s + x) * 3 + c] = quantize(cfg.block_intensity);
                }
            }
        }
    }
    Ok(Image::new(s, s, 3, data)?)
}

fn other_topic(topic: usize, n: usize, rng: &mut ChaCha8Rng) -> usize {
    (topic + rng.random_range(1..n)) % n
}

fn caption(topic: usize, verb: &str, place: &str) -> String {
    format!("the {} {verb} near {place}", TOPICS[topic].subject)
}

fn inverse_text(topic: usize) -> String {
    format!("photo of the {} scene", TOPICS[topic].name)
}

/// Which fake signal a record carries.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Signal {
    None,
    Text,
    Image,
    Mismatch,
}

struct Draw {
    text_topic: usize,
    image_topic: usize,
    true_verb: &'static str,
    claim_verb: &'static str,
    signal: Signal,
}

fn answers(d: DistortionType, w: &Draw) -> (Vec<String>, &'static str) {
    let t = &TOPICS[w.text_topic];
    let text_step = format!("{} {}", t.subject, w.claim_verb);
    let image_step = format!("{} scene", TOPICS[w.image_topic].subject);
    let yes = |s: Signal, a: &str, b: &str| if w.signal == s { a.to_string() } else { b.to_string() };
    let (specialized, explanation): (Vec<String>, &'static str) = match d {
        DistortionType::Textual => (
            vec!["neutral".into(), w.true_verb.into(), yes(Signal::Text, "conflict", "agreement")],
            if w.signal == Signal::Text { "text contradicts evidence" } else { "text matches evidence" },
        ),
        DistortionType::Visual => (
            vec![
                yes(Signal::Image, "artifact", "clean"),
                yes(Signal::Image, "edited", "natural"),
                yes(Signal::Image, "implausible", "plausible"),
            ],
            if w.signal == Signal::Image { "image manipulated" } else { "image authentic" },
        ),
        DistortionType::CrossModal => (
            vec![
                yes(Signal::Mismatch, "mismatch", "match"),
                yes(Signal::Mismatch, "mismatch", "match"),
                yes(Signal::Mismatch, "different event", "same event"),
            ],
            if w.signal == Signal::Mismatch { "image out of context" } else { "image fits caption" },
        ),
        DistortionType::Mixed => (
            vec![
                yes(Signal::Text, "conflict", "agreement"),
                yes(Signal::Image, "artifact", "clean"),
                yes(Signal::Mismatch, "mismatch", "match"),
            ],
            if w.signal == Signal::None { "no distortion" } else { "distortion found" },
        ),
        DistortionType::Unknown => (
            vec![
                yes(Signal::None, "no", "yes"),
                match w.signal {
                    Signal::None => "none".into(),
                    Signal::Text => "textual".into(),
                    Signal::Image => "visual".into(),
                    Signal::Mismatch => "cross-modal".into(),
                },
                yes(Signal::None, "weak", "strong"),
            ],
            if w.signal == Signal::None { "no distortion" } else { "distortion found" },
        ),
    };
    let mut all = vec![text_step, image_step];
    all.extend(specialized);
    (all, explanation)
}

/// `n` balanced records of one kind: even indices real, odd fake.
pub fn synthesize_dataset(kind: DistortionType, n: usize, seed: u64, cfg: &SynthConfig) -> Result<Vec<ClaimRecord>> {
    if n < 2 || n % 2 != 0 {
        return Err(PipelineError::Config(format!("n must be even and at least 2, got {n}")));
    }
    cfg.validate()?;
    let templates = ReasoningTemplates::default();
    let queries = |d: DistortionType| templates.template_for(d);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (kind as u64) << 32);
    let nt = cfg.num_topics;
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let fake = i % 2 == 1;
        let text_topic = rng.random_range(0..nt);
        let t = &TOPICS[text_topic];
        let true_verb = t.verbs[rng.random_range(0..2)];
        let antonym = if true_verb == t.verbs[0] { t.verbs[1] } else { t.verbs[0] };
        let place = PLACES[rng.random_range(0..PLACES.len())];
        let signal = match (fake, kind) {
            (false, _) => Signal::None,
            (true, DistortionType::Textual) => Signal::Text,
            (true, DistortionType::Visual) => Signal::Image,
            (true, DistortionType::CrossModal) => Signal::Mismatch,
            (true, _) => [Signal::Text, Signal::Image, Signal::Mismatch][rng.random_range(0..3)],
        };
        let image_topic = if signal == Signal::Mismatch {
            other_topic(text_topic, nt, &mut rng)
        } else {
            text_topic
        };
        let draw = Draw {
            text_topic,
            image_topic,
            true_verb,
            claim_verb: if signal == Signal::Text { antonym } else { true_verb },
            signal,
        };
        let img = topic_image(cfg, image_topic, signal == Signal::Image, &mut rng)?;
        let label = if fake { Label::Fake } else { Label::Real };
        let (ans, explanation) = answers(kind, &draw);
        let chain = ReasoningChain::from_answers(&queries(kind), &ans, explanation, label)?;
        out.push(ClaimRecord {
            id: format!("{}-{i:05}", kind.as_str()),
            text: caption(text_topic, draw.claim_verb, place),
            image: ImageRef::from_image(&img),
            label,
            distortion: kind,
            evidence: Some(SuppliedEvidence {
                direct: vec![caption(text_topic, true_verb, place), format!("{} news from {place}", t.name)],
                inverse: vec![inverse_text(image_topic)],
                context: vec![],
            }),
            reasoning: Some(chain),
        });
    }
    Ok(out)
}

/// First `train_fraction` of every class to train, the rest to test; both
/// keep the real/fake interleaving.
pub fn split(records: &[ClaimRecord], train_fraction: f64) -> (Vec<ClaimRecord>, Vec<ClaimRecord>) {
    let pairs = records.len() / 2;
    let cut = ((pairs as f64) * train_fraction).round() as usize * 2;
    (records[..cut].to_vec(), records[cut..].to_vec())
}

/// Irrelevant evidence for corruption runs; never produced by the
/// generator's own bundles.
pub fn distractor_pool(n: usize, seed: u64) -> Result<Vec<EvidenceDoc>> {
    const THINGS: [&str; 8] = ["bridge", "museum", "market", "library", "airport", "factory", "garden", "tower"];
    const EVENTS: [&str; 6] = ["was renovated", "reported delays", "hosted visitors", "changed hours", "lost power", "was inspected"];
    const WHEN: [&str; 5] = ["on monday", "last week", "this morning", "in spring", "overnight"];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let text = format!(
                "the {} {} {}",
                THINGS[rng.random_range(0..THINGS.len())],
                EVENTS[rng.random_range(0..EVENTS.len())],
                WHEN[rng.random_range(0..WHEN.len())]
            );
            EvidenceDoc::new(format!("pool-{i:05}"), EvidenceKind::Context, text)
        })
        .collect()
}

/// Every word the generator and the distractor pool can emit.
pub fn lexicon() -> Vec<String> {
    let mut words = vec![
        "the near news from photo of scene".to_string(),
        "bridge museum market library airport factory garden tower was renovated reported delays hosted visitors changed hours lost power inspected on monday last week this morning in spring overnight".to_string(),
    ];
    for t in &TOPICS {
        words.push(format!("{} {} {} {}", t.name, t.subject, t.verbs[0], t.verbs[1]));
    }
    words.push(PLACES.join(" "));
    words
}

/// Stage-1 alignment pairs: describe the image.
pub fn alignment_pairs(n: usize, seed: u64, cfg: &SynthConfig) -> Result<Vec<(Image, String)>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xa11);
    (0..n)
        .map(|_| {
            let topic = rng.random_range(0..cfg.num_topics);
            Ok((topic_image(cfg, topic, false, &mut rng)?, inverse_text(topic)))
        })
        .collect()
}

/// Stage-2 conversations: restate the caption given the image.
pub fn conversations(n: usize, seed: u64, cfg: &SynthConfig) -> Result<Vec<(Image, String, String)>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xc0);
    (0..n)
        .map(|_| {
            let topic = rng.random_range(0..cfg.num_topics);
            let verb = TOPICS[topic].verbs[rng.random_range(0..2)];
            let place = PLACES[rng.random_range(0..PLACES.len())];
            let c = caption(topic, verb, place);
            let img = topic_image(cfg, topic, false, &mut rng)?;
            Ok((img, format!("What happened? Caption: {c}"), format!("{} {verb} near {place}", TOPICS[topic].subject)))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::reasoning::validate_chain;

    #[test]
    fn balanced_and_deterministic() {
        let cfg = SynthConfig::default();
        let a = synthesize_dataset(DistortionType::Textual, 100, 3, &cfg).unwrap();
        assert_eq!(a.iter().filter(|r| r.label == Label::Fake).count(), 50);
        assert_eq!(a, synthesize_dataset(DistortionType::Textual, 100, 3, &cfg).unwrap());
        assert!(synthesize_dataset(DistortionType::Textual, 7, 3, &cfg).is_err());
    }

    #[test]
    fn textual_fakes_contradict_their_evidence() {
        let recs = synthesize_dataset(DistortionType::Textual, 100, 5, &SynthConfig::default()).unwrap();
        for r in &recs {
            let fact = &r.evidence.as_ref().unwrap().direct[0];
            assert_eq!(fact == &r.text, r.label == Label::Real, "{} vs {fact}", r.text);
        }
    }

    #[test]
    fn chains_are_valid() {
        let t = ReasoningTemplates::default();
        for d in DistortionType::ALL {
            for r in synthesize_dataset(d, 20, 1, &SynthConfig::default()).unwrap() {
                let v = validate_chain(&t, r.reasoning.as_ref().unwrap(), d);
                assert!(v.is_empty(), "{v:?}");
            }
        }
    }

    #[test]
    fn cross_modal_fakes_use_another_topic() {
        for r in synthesize_dataset(DistortionType::CrossModal, 60, 2, &SynthConfig::default()).unwrap() {
            let ev = r.evidence.unwrap();
            let topic = ev.direct[1].split(' ').next().unwrap().to_string();
            assert_eq!(ev.inverse[0].contains(&topic), r.label == Label::Real);
        }
    }

    #[test]
    fn distractors_never_collide_with_generated_evidence() {
        let pool = distractor_pool(200, 1).unwrap();
        for d in DistortionType::BASIC {
            for r in synthesize_dataset(d, 50, 4, &SynthConfig::default()).unwrap() {
                let ev = r.evidence.unwrap();
                for t in ev.direct.iter().chain(&ev.inverse) {
                    assert!(!pool.iter().any(|p| &p.text == t));
                }
            }
        }
    }
}
