//! Evidence bundles: hashed n-gram text embeddings, a local corpus index
//! for direct and inverse retrieval, and the seeded corruption injector.

use std::cmp::Ordering;
use std::collections::BTreeSet;
use std::hash::Hasher;
use std::io::BufRead;
use std::path::Path;

use fnv::FnvHasher;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use trustvl_core::split_words;

use crate::error::{PipelineError, Result};

pub const TEXT_EMBED_DIM: usize = 1024;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EvidenceKind {
    Direct,
    Inverse,
    Context,
}

impl EvidenceKind {
    pub fn as_str(self) -> &'static str {
        match self {
            EvidenceKind::Direct => "direct",
            EvidenceKind::Inverse => "inverse",
            EvidenceKind::Context => "context",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvidenceDoc {
    pub id: String,
    pub kind: EvidenceKind,
    pub text: String,
    pub embedding: Vec<f64>,
}

impl EvidenceDoc {
    /// Builds a doc, embedding its text.
    pub fn new(id: impl Into<String>, kind: EvidenceKind, text: impl Into<String>) -> Result<Self> {
        let text = text.into();
        let embedding = embed_text(&text)?;
        Ok(Self {
            id: id.into(),
            kind,
            text,
            embedding,
        })
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EvidenceBundle {
    pub direct: Vec<EvidenceDoc>,
    pub inverse: Vec<EvidenceDoc>,
    pub context: Vec<EvidenceDoc>,
}

impl EvidenceBundle {
    pub fn list(&self, kind: EvidenceKind) -> &[EvidenceDoc] {
        match kind {
            EvidenceKind::Direct => &self.direct,
            EvidenceKind::Inverse => &self.inverse,
            EvidenceKind::Context => &self.context,
        }
    }

    fn list_mut(&mut self, kind: EvidenceKind) -> &mut Vec<EvidenceDoc> {
        match kind {
            EvidenceKind::Direct => &mut self.direct,
            EvidenceKind::Inverse => &mut self.inverse,
            EvidenceKind::Context => &mut self.context,
        }
    }

    pub fn len(&self) -> usize {
        self.direct.len() + self.inverse.len() + self.context.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Bundle from plain texts; ids are `{prefix}-{kind}-{i}`.
    pub fn from_texts(prefix: &str, direct: &[String], inverse: &[String], context: &[String]) -> Result<Self> {
        let mk = |kind: EvidenceKind, texts: &[String]| -> Result<Vec<EvidenceDoc>> {
            texts
                .iter()
                .enumerate()
                .map(|(i, t)| EvidenceDoc::new(format!("{prefix}-{}-{i}", kind.as_str()), kind, t.clone()))
                .collect()
        };
        Ok(Self {
            direct: mk(EvidenceKind::Direct, direct)?,
            inverse: mk(EvidenceKind::Inverse, inverse)?,
            context: mk(EvidenceKind::Context, context)?,
        })
    }
}

/// Retrieval depths: `m` direct, `n` inverse, at most `k` context documents.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RetrievalDepth {
    pub m: usize,
    pub n: usize,
    pub k: usize,
}

impl Default for RetrievalDepth {
    fn default() -> Self {
        Self { m: 3, n: 3, k: 2 }
    }
}

fn bucket(feature: &str) -> usize {
    let mut h = FnvHasher::default();
    h.write(feature.as_bytes());
    (h.finish() % TEXT_EMBED_DIM as u64) as usize
}

fn normalize(mut v: Vec<f64>, what: &str) -> Result<Vec<f64>> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm == 0.0 || !norm.is_finite() {
        return Err(PipelineError::Evidence(format!("cannot normalize empty {what}")));
    }
    v.iter_mut().for_each(|x| *x /= norm);
    Ok(v)
}

/// Hashed unigram and bigram counts, L2-normalized.
pub fn embed_text(text: &str) -> Result<Vec<f64>> {
    let words = split_words(text);
    if words.is_empty() {
        return Err(PipelineError::Evidence("empty text".into()));
    }
    let mut v = vec![0.0; TEXT_EMBED_DIM];
    for w in &words {
        v[bucket(w)] += 1.0;
    }
    for pair in words.windows(2) {
        v[bucket(&format!("{} {}", pair[0], pair[1]))] += 1.0;
    }
    normalize(v, "text")
}

/// Mean over feature rows, L2-normalized.
pub fn embed_image(rows: &[Vec<f64>]) -> Result<Vec<f64>> {
    let first = rows.first().ok_or_else(|| PipelineError::Evidence("no image features".into()))?;
    let d = first.len();
    if d == 0 || rows.iter().any(|r| r.len() != d) {
        return Err(PipelineError::Evidence("ragged or empty image features".into()));
    }
    let mut v = vec![0.0; d];
    for r in rows {
        for (a, b) in v.iter_mut().zip(r) {
            *a += b;
        }
    }
    let n = rows.len() as f64;
    v.iter_mut().for_each(|x| *x /= n);
    normalize(v, "image features")
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Image-corpus entry: retrieved by text through its stored caption.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageEntry {
    pub id: String,
    pub caption: String,
    pub caption_embedding: Vec<f64>,
}

/// Text-corpus entry: retrieved by image through its associated image
/// features.
#[derive(Debug, Clone, PartialEq)]
pub struct TextEntry {
    pub id: String,
    pub text: String,
    pub image_embedding: Vec<f64>,
}

/// One corpus line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusLine {
    pub id: String,
    pub kind: String,
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_features: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct CorpusIndex {
    pub images: Vec<ImageEntry>,
    pub texts: Vec<TextEntry>,
}

/// Descending score, then ascending id.
fn rank(a: &(f64, &str), b: &(f64, &str)) -> Ordering {
    b.0.partial_cmp(&a.0).unwrap_or(Ordering::Equal).then_with(|| a.1.cmp(b.1))
}

impl CorpusIndex {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add_image(&mut self, id: impl Into<String>, caption: impl Into<String>) -> Result<()> {
        let caption = caption.into();
        self.images.push(ImageEntry {
            id: id.into(),
            caption_embedding: embed_text(&caption)?,
            caption,
        });
        Ok(())
    }

    pub fn add_text(&mut self, id: impl Into<String>, text: impl Into<String>, image_features: &[f64]) -> Result<()> {
        let text = text.into();
        if text.trim().is_empty() {
            return Err(PipelineError::Evidence("empty text".into()));
        }
        self.texts.push(TextEntry {
            id: id.into(),
            text,
            image_embedding: embed_image(&[image_features.to_vec()])?,
        });
        Ok(())
    }

    pub fn from_lines(lines: &[CorpusLine]) -> Result<Self> {
        let mut idx = Self::new();
        for l in lines {
            match l.kind.as_str() {
                "image" => idx.add_image(&l.id, &l.text)?,
                "text" => {
                    let f = l
                        .image_features
                        .as_ref()
                        .ok_or_else(|| PipelineError::Evidence(format!("text doc {} lacks image_features", l.id)))?;
                    idx.add_text(&l.id, &l.text, f)?
                }
                other => return Err(PipelineError::Evidence(format!("unknown corpus kind {other:?} for {}", l.id))),
            }
        }
        Ok(idx)
    }

    /// Reads a JSONL corpus.
    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| PipelineError::io(path, e))?;
        let mut lines = Vec::new();
        for (i, line) in std::io::BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| PipelineError::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            lines.push(serde_json::from_str(&line).map_err(|e| PipelineError::Schema {
                path: path.display().to_string(),
                line: i + 1,
                detail: e.to_string(),
            })?);
        }
        Self::from_lines(&lines)
    }

    /// Top-`m` image-corpus captions by cosine to the claim text.
    pub fn retrieve_direct(&self, claim_text: &str, m: usize) -> Result<Vec<EvidenceDoc>> {
        if m == 0 {
            return Ok(Vec::new());
        }
        let q = embed_text(claim_text)?;
        let mut scored: Vec<(f64, &str, usize)> = self
            .images
            .iter()
            .enumerate()
            .map(|(i, e)| (cosine(&q, &e.caption_embedding), e.id.as_str(), i))
            .collect();
        scored.sort_by(|a, b| rank(&(a.0, a.1), &(b.0, b.1)));
        Ok(scored
            .into_iter()
            .take(m)
            .map(|(_, _, i)| {
                let e = &self.images[i];
                EvidenceDoc {
                    id: e.id.clone(),
                    kind: EvidenceKind::Direct,
                    text: e.caption.clone(),
                    embedding: e.caption_embedding.clone(),
                }
            })
            .collect())
    }

    /// Top-`n` text-corpus entries by cosine between the pooled claim image
    /// features and each entry's image features.
    pub fn retrieve_inverse(&self, claim_image_features: &[Vec<f64>], n: usize) -> Result<Vec<EvidenceDoc>> {
        if n == 0 {
            return Ok(Vec::new());
        }
        let q = embed_image(claim_image_features)?;
        let mut scored = Vec::with_capacity(self.texts.len());
        for (i, e) in self.texts.iter().enumerate() {
            if e.image_embedding.len() != q.len() {
                return Err(PipelineError::Evidence(format!(
                    "query image dim {} vs {} for {}",
                    q.len(),
                    e.image_embedding.len(),
                    e.id
                )));
            }
            scored.push((cosine(&q, &e.image_embedding), e.id.as_str(), i));
        }
        scored.sort_by(|a, b| rank(&(a.0, a.1), &(b.0, b.1)));
        scored
            .into_iter()
            .take(n)
            .map(|(_, _, i)| EvidenceDoc::new(self.texts[i].id.clone(), EvidenceKind::Inverse, self.texts[i].text.clone()))
            .collect()
    }
}

/// Replaces `round(proportion × len)` items of every list with seeded draws
/// from `pool`.
///
/// Positions come from a seeded permutation per list and each list draws
/// from its own slice of a seeded pool shuffle, so for one seed the
/// replaced sets grow monotonically with the proportion.
pub fn corrupt(bundle: &EvidenceBundle, proportion: f64, pool: &[EvidenceDoc], seed: u64) -> Result<EvidenceBundle> {
    if !(0.0..=1.0).contains(&proportion) {
        return Err(PipelineError::Evidence(format!("proportion {proportion} outside [0, 1]")));
    }
    let kinds = [EvidenceKind::Direct, EvidenceKind::Inverse, EvidenceKind::Context];
    let needed = bundle.len();
    if pool.len() < needed {
        return Err(PipelineError::Evidence(format!(
            "pool of {} cannot cover {needed} bundle items",
            pool.len()
        )));
    }
    let sources: BTreeSet<&str> = kinds.iter().flat_map(|&k| bundle.list(k)).map(|d| d.text.as_str()).collect();
    if let Some(d) = pool.iter().find(|d| sources.contains(d.text.as_str())) {
        return Err(PipelineError::Evidence(format!("pool doc {} duplicates bundle evidence", d.id)));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..pool.len()).collect();
    order.shuffle(&mut rng);
    let mut out = bundle.clone();
    let mut offset = 0;
    for kind in kinds {
        let len = bundle.list(kind).len();
        let mut positions: Vec<usize> = (0..len).collect();
        positions.shuffle(&mut rng);
        let r = (proportion * len as f64).round() as usize;
        let list = out.list_mut(kind);
        for (j, &pos) in positions.iter().take(r).enumerate() {
            let mut doc = pool[order[offset + j]].clone();
            doc.kind = kind;
            list[pos] = doc;
        }
        offset += len;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn embeddings_are_unit_and_deterministic() {
        let a = embed_text("the blue car").unwrap();
        assert_eq!(a, embed_text("the blue car").unwrap());
        assert!((cosine(&a, &a) - 1.0).abs() < 1e-12);
        assert!(embed_text("   ").is_err());
    }

    #[test]
    fn lexical_overlap_raises_cosine() {
        let q = embed_text("the blue car").unwrap();
        let near = cosine(&q, &embed_text("the blue car parked").unwrap());
        let far = cosine(&q, &embed_text("election results tally").unwrap());
        assert!(near > far, "{near} vs {far}");
    }

    #[test]
    fn zero_depth_returns_nothing() {
        let mut idx = CorpusIndex::new();
        idx.add_image("a", "the blue car").unwrap();
        idx.add_text("b", "a car", &[1.0, 0.0]).unwrap();
        assert!(idx.retrieve_direct("car", 0).unwrap().is_empty());
        assert!(idx.retrieve_inverse(&[vec![1.0, 0.0]], 0).unwrap().is_empty());
    }

    #[test]
    fn ties_go_to_lower_id() {
        let mut idx = CorpusIndex::new();
        idx.add_image("b", "flood water").unwrap();
        idx.add_image("a", "flood water").unwrap();
        idx.add_image("c", "dry land").unwrap();
        let got: Vec<_> = idx.retrieve_direct("flood water", 3).unwrap().into_iter().map(|d| d.id).collect();
        assert_eq!(got, ["a", "b", "c"]);

        let mut idx = CorpusIndex::new();
        idx.add_text("z", "one", &[0.0, 1.0]).unwrap();
        idx.add_text("y", "two", &[0.0, 2.0]).unwrap();
        let got: Vec<_> = idx.retrieve_inverse(&[vec![0.0, 3.0]], 2).unwrap().into_iter().map(|d| d.id).collect();
        assert_eq!(got, ["y", "z"]);
    }

    fn bundle(n: usize) -> EvidenceBundle {
        let texts: Vec<String> = (0..n).map(|i| format!("fact number {i}")).collect();
        EvidenceBundle::from_texts("c", &texts, &texts[..1], &[]).unwrap()
    }

    fn pool(n: usize) -> Vec<EvidenceDoc> {
        (0..n)
            .map(|i| EvidenceDoc::new(format!("p{i}"), EvidenceKind::Context, format!("unrelated item {i}")).unwrap())
            .collect()
    }

    #[test]
    fn corruption_counts_and_reproducibility() {
        let b = bundle(4);
        let p = pool(10);
        assert_eq!(corrupt(&b, 0.0, &p, 7).unwrap(), b);
        let half = corrupt(&b, 0.5, &p, 7).unwrap();
        let changed = b.direct.iter().zip(&half.direct).filter(|(x, y)| x != y).count();
        assert_eq!(changed, 2);
        assert_eq!(half, corrupt(&b, 0.5, &p, 7).unwrap());
        let all = corrupt(&b, 1.0, &p, 7).unwrap();
        for kind in [EvidenceKind::Direct, EvidenceKind::Inverse] {
            for d in all.list(kind) {
                assert!(!b.list(kind).iter().any(|o| o.text == d.text));
                assert_eq!(d.kind, kind);
            }
        }
    }

    #[test]
    fn corruption_rejects_small_or_overlapping_pools() {
        let b = bundle(4);
        assert!(corrupt(&b, 0.5, &pool(3), 1).is_err());
        let mut p = pool(10);
        p[3].text = "fact number 2".into();
        assert!(corrupt(&b, 0.5, &p, 1).is_err());
    }
}
