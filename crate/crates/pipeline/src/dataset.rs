//! Claim dataset schema and JSONL loading.

use std::collections::BTreeSet;
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use trustvl_core::{patchify, DistortionType, Image, ImageInput, Label, Tensor};

use crate::error::{PipelineError, Result};
use crate::evidence::EvidenceBundle;
use crate::reasoning::ReasoningChain;

/// Where a claim image comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ImageRef {
    /// PNG file, relative paths resolved against the dataset file.
    Path(String),
    /// Precomputed `[n_patches × feat_dim]` features.
    Features(Vec<Vec<f64>>),
    /// Inline 8-bit pixels, row-major `height × width × channels`.
    Pixels {
        height: usize,
        width: usize,
        channels: usize,
        data: Vec<u8>,
    },
}

impl ImageRef {
    pub fn from_image(img: &Image) -> Self {
        ImageRef::Pixels {
            height: img.height(),
            width: img.width(),
            channels: img.channels(),
            data: img.data().iter().map(|&v| (v * 255.0).round() as u8).collect(),
        }
    }

    /// Decodes to a model input.
    pub fn resolve(&self) -> Result<ImageInput> {
        match self {
            ImageRef::Path(p) => {
                let img = image::open(p).map_err(|e| PipelineError::Image(format!("{p}: {e}")))?.to_rgb8();
                let (w, h) = img.dimensions();
                let data = img.into_raw().into_iter().map(|v| f32::from(v) / 255.0).collect();
                Ok(ImageInput::Pixels(Image::new(h as usize, w as usize, 3, data)?))
            }
            ImageRef::Features(rows) => {
                let n = rows.len();
                let d = rows.first().map_or(0, Vec::len);
                if n == 0 || d == 0 || rows.iter().any(|r| r.len() != d) {
                    return Err(PipelineError::Image("empty or ragged feature matrix".into()));
                }
                Ok(ImageInput::Features(Tensor::new(vec![n, d], rows.concat())?))
            }
            ImageRef::Pixels {
                height,
                width,
                channels,
                data,
            } => {
                let data = data.iter().map(|&v| f32::from(v) / 255.0).collect();
                Ok(ImageInput::Pixels(Image::new(*height, *width, *channels, data)?))
            }
        }
    }
}

/// Feature rows used for image-side retrieval: given features as-is, raw
/// `patch × patch` patches for pixel images.
pub fn retrieval_features(input: &ImageInput, patch: usize) -> Result<Vec<Vec<f64>>> {
    let t: Tensor<f64> = match input {
        ImageInput::Features(t) => t.clone(),
        ImageInput::Pixels(img) => {
            let p = patch.min(img.height()).min(img.width()).max(1);
            let h = img.height() / p * p;
            let w = img.width() / p * p;
            let crop = Image::from_fn(h, w, img.channels(), |y, x, c| img.get(y, x, c))?;
            patchify(&crop, p)?
        }
    };
    Ok((0..t.rows()).map(|r| t.row(r).to_vec()).collect())
}

/// Evidence texts shipped with a record.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SuppliedEvidence {
    #[serde(default)]
    pub direct: Vec<String>,
    #[serde(default)]
    pub inverse: Vec<String>,
    #[serde(default)]
    pub context: Vec<String>,
}

impl SuppliedEvidence {
    pub fn to_bundle(&self, id: &str) -> Result<EvidenceBundle> {
        EvidenceBundle::from_texts(id, &self.direct, &self.inverse, &self.context)
    }
}

mod label_lower {
    use serde::{Deserialize, Deserializer, Serializer};
    use trustvl_core::Label;

    pub fn serialize<S: Serializer>(l: &Label, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(l.as_lower())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Label, D::Error> {
        let s = String::deserialize(d)?;
        Label::parse_lower(&s).ok_or_else(|| serde::de::Error::custom(format!("label must be \"real\" or \"fake\", got {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClaimRecord {
    pub id: String,
    pub text: String,
    pub image: ImageRef,
    #[serde(with = "label_lower")]
    pub label: Label,
    pub distortion: DistortionType,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub evidence: Option<SuppliedEvidence>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reasoning: Option<ReasoningChain>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassCounts {
    pub real: usize,
    pub fake: usize,
}

impl ClassCounts {
    pub fn of(records: &[ClaimRecord]) -> Self {
        let fake = records.iter().filter(|r| r.label == Label::Fake).count();
        Self {
            real: records.len() - fake,
            fake,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub name: String,
    pub records: Vec<ClaimRecord>,
}

impl Dataset {
    pub fn new(name: impl Into<String>, records: Vec<ClaimRecord>) -> Self {
        Self {
            name: name.into(),
            records,
        }
    }

    pub fn counts(&self) -> ClassCounts {
        ClassCounts::of(&self.records)
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}

/// Reads and validates a JSONL dataset. Errors name the offending line.
pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let file = std::fs::File::open(path).map_err(|e| PipelineError::io(path, e))?;
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let shown = path.display().to_string();
    let schema = |line: usize, detail: String| PipelineError::Schema {
        path: shown.clone(),
        line,
        detail,
    };
    let mut records = Vec::new();
    let mut seen = BTreeSet::new();
    for (i, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| PipelineError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let mut rec: ClaimRecord = serde_json::from_str(&line).map_err(|e| schema(i + 1, e.to_string()))?;
        if rec.id.trim().is_empty() || rec.text.trim().is_empty() {
            return Err(schema(i + 1, "empty id or text".into()));
        }
        if !seen.insert(rec.id.clone()) {
            return Err(schema(i + 1, format!("duplicate id {:?}", rec.id)));
        }
        if let ImageRef::Path(p) = &rec.image {
            let full: PathBuf = base.join(p);
            if !full.is_file() {
                return Err(schema(i + 1, format!("image file {} not found", full.display())));
            }
            rec.image = ImageRef::Path(full.display().to_string());
        }
        records.push(rec);
    }
    let name = path.file_stem().map_or_else(|| "dataset".into(), |s| s.to_string_lossy().into_owned());
    Ok(Dataset::new(name, records))
}

/// Writes records as JSONL.
pub fn write_dataset(path: &Path, records: &[ClaimRecord]) -> Result<()> {
    let mut out = Vec::new();
    for r in records {
        serde_json::to_writer(&mut out, r).map_err(|e| PipelineError::Config(e.to_string()))?;
        out.push(b'\n');
    }
    std::fs::File::create(path)
        .and_then(|mut f| f.write_all(&out))
        .map_err(|e| PipelineError::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn line(id: &str, label: &str) -> String {
        format!(
            r#"{{"id":"{id}","text":"a claim","image":{{"features":[[0.5,1.0]]}},"label":"{label}","distortion":"textual"}}"#
        )
    }

    fn write(lines: &[String]) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        for l in lines {
            writeln!(f, "{l}").unwrap();
        }
        f
    }

    #[test]
    fn balanced_file_counts() {
        let lines: Vec<String> = (0..10).map(|i| line(&format!("r{i}"), if i < 5 { "real" } else { "fake" })).collect();
        let ds = load_dataset(write(&lines).path()).unwrap();
        assert_eq!(ds.counts(), ClassCounts { real: 5, fake: 5 });
    }

    #[test]
    fn missing_label_is_reported_at_its_line() {
        let mut lines = vec![line("a", "real"), line("b", "fake")];
        lines.push(r#"{"id":"c","text":"x","image":{"features":[[1.0]]},"distortion":"visual"}"#.into());
        let err = load_dataset(write(&lines).path()).unwrap_err();
        match err {
            PipelineError::Schema { line, detail, .. } => {
                assert_eq!(line, 3);
                assert!(detail.contains("label"), "{detail}");
            }
            e => panic!("{e:?}"),
        }
    }

    #[test]
    fn bad_label_spelling_and_duplicates_are_rejected() {
        assert!(load_dataset(write(&[line("a", "Fake")]).path()).is_err());
        assert!(load_dataset(write(&[line("a", "real"), line("a", "fake")]).path()).is_err());
    }

    #[test]
    fn pixels_round_trip_through_u8() {
        let img = Image::from_fn(2, 2, 3, |y, x, c| ((y + x + c) as f32) / 255.0).unwrap();
        match ImageRef::from_image(&img).resolve().unwrap() {
            ImageInput::Pixels(back) => assert_eq!(back, img),
            _ => unreachable!(),
        }
    }
}
