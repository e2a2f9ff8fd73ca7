//! Checkpoint container.
//!
//! ```text
//! TRUSTVL-CHECKPOINT
//! format_version: 1
//! precision: double
//! seed: 7
//! config_digest: 3f2a...
//! stage: stage3
//! params: 112
//! model_config: {...}
//! vocab: "<PAD>\n<BOS>\n..."
//! end_header
//! <blob>*  <sha256 of everything above, 32 bytes>
//! ```
//!
//! Each blob is `u32 name_len, name, u32 ndim, u64 dims.., values` with all
//! integers and values little-endian, in parameter creation order.

use std::path::Path;

use sha2::{Digest, Sha256};
use trustvl_core::{ModelConfig, Precision, Scalar, Tensor, TrustVl, Vocab};

use crate::error::{PipelineError, Result};

pub const MAGIC: &str = "TRUSTVL-CHECKPOINT";
pub const FORMAT_VERSION: u32 = 1;
const END_HEADER: &str = "end_header\n";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CheckpointMeta {
    pub seed: u64,
    pub config_digest: String,
    pub stage: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CheckpointHeader {
    pub format_version: u32,
    pub precision: Precision,
    pub meta: CheckpointMeta,
    pub params: usize,
    pub model_config: ModelConfig,
    pub vocab: Vocab,
}

fn err(msg: impl Into<String>) -> PipelineError {
    PipelineError::Checkpoint(msg.into())
}

fn put_value<T: Scalar>(out: &mut Vec<u8>, v: T) {
    match T::PRECISION {
        Precision::Single => out.extend_from_slice(&v.to_f32().unwrap_or(f32::NAN).to_le_bytes()),
        Precision::Double => out.extend_from_slice(&v.to_f64().unwrap_or(f64::NAN).to_le_bytes()),
    }
}

pub fn checkpoint_bytes<T: Scalar>(model: &TrustVl<T>, meta: &CheckpointMeta) -> Result<Vec<u8>> {
    if meta.stage.contains('\n') || meta.config_digest.contains('\n') {
        return Err(err("header fields must be single-line"));
    }
    let cfg = serde_json::to_string(&model.cfg).map_err(|e| err(e.to_string()))?;
    let vocab = serde_json::to_string(&model.vocab.to_text()).map_err(|e| err(e.to_string()))?;
    let mut out = format!(
        "{MAGIC}\nformat_version: {FORMAT_VERSION}\nprecision: {}\nseed: {}\nconfig_digest: {}\nstage: {}\nparams: {}\nmodel_config: {cfg}\nvocab: {vocab}\n{END_HEADER}",
        T::PRECISION,
        meta.seed,
        meta.config_digest,
        meta.stage,
        model.store.len()
    )
    .into_bytes();
    for (_, p) in model.store.iter() {
        out.extend_from_slice(&(p.name.len() as u32).to_le_bytes());
        out.extend_from_slice(p.name.as_bytes());
        out.extend_from_slice(&(p.tensor.shape().len() as u32).to_le_bytes());
        for &d in p.tensor.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in p.tensor.data() {
            put_value(&mut out, v);
        }
    }
    let sum = Sha256::digest(&out);
    out.extend_from_slice(&sum);
    Ok(out)
}

pub fn save_checkpoint<T: Scalar>(model: &TrustVl<T>, meta: &CheckpointMeta, path: &Path) -> Result<()> {
    let bytes = checkpoint_bytes(model, meta)?;
    std::fs::write(path, bytes).map_err(|e| PipelineError::io(path, e))
}

/// Verifies the trailer, returning the body without it.
fn verified_body(bytes: &[u8]) -> Result<&[u8]> {
    if bytes.len() < 32 {
        return Err(err("file too short for a checksum"));
    }
    let (body, sum) = bytes.split_at(bytes.len() - 32);
    if Sha256::digest(body).as_slice() != sum {
        return Err(err("checksum mismatch"));
    }
    Ok(body)
}

fn parse_header(body: &[u8]) -> Result<(CheckpointHeader, usize)> {
    let end = body
        .windows(END_HEADER.len())
        .position(|w| w == END_HEADER.as_bytes())
        .ok_or_else(|| err("missing end_header"))?;
    let text = std::str::from_utf8(&body[..end]).map_err(|_| err("header is not UTF-8"))?;
    let mut lines = text.lines();
    if lines.next() != Some(MAGIC) {
        return Err(err("not a checkpoint file"));
    }
    let mut field = |key: &str| -> Result<String> {
        let line = lines.next().ok_or_else(|| err(format!("missing {key}")))?;
        line.strip_prefix(key)
            .and_then(|r| r.strip_prefix(": "))
            .map(str::to_string)
            .ok_or_else(|| err(format!("expected {key}, found {line:?}")))
    };
    let version: u32 = field("format_version")?.parse().map_err(|_| err("bad format_version"))?;
    if version != FORMAT_VERSION {
        return Err(err(format!("unsupported format_version {version}, expected {FORMAT_VERSION}")));
    }
    let precision = Precision::parse(&field("precision")?).ok_or_else(|| err("bad precision"))?;
    let seed = field("seed")?.parse().map_err(|_| err("bad seed"))?;
    let config_digest = field("config_digest")?;
    let stage = field("stage")?;
    let params = field("params")?.parse().map_err(|_| err("bad params"))?;
    let model_config = serde_json::from_str(&field("model_config")?).map_err(|e| err(format!("model_config: {e}")))?;
    let vocab_text: String = serde_json::from_str(&field("vocab")?).map_err(|e| err(format!("vocab: {e}")))?;
    let vocab = Vocab::from_text(&vocab_text).map_err(|e| err(format!("vocab: {e}")))?;
    Ok((
        CheckpointHeader {
            format_version: version,
            precision,
            meta: CheckpointMeta {
                seed,
                config_digest,
                stage,
            },
            params,
            model_config,
            vocab,
        },
        end + END_HEADER.len(),
    ))
}

/// Header of a checkpoint, after checksum verification.
pub fn read_header(path: &Path) -> Result<CheckpointHeader> {
    let bytes = std::fs::read(path).map_err(|e| PipelineError::io(path, e))?;
    Ok(parse_header(verified_body(&bytes)?)?.0)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let s = self.buf.get(self.pos..self.pos + n).ok_or_else(|| err("truncated parameter blob"))?;
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

pub fn checkpoint_from_bytes<T: Scalar>(bytes: &[u8]) -> Result<(TrustVl<T>, CheckpointHeader)> {
    let body = verified_body(bytes)?;
    let (header, start) = parse_header(body)?;
    if header.precision != T::PRECISION {
        return Err(err(format!(
            "checkpoint precision is {} but {} was requested",
            header.precision,
            T::PRECISION
        )));
    }
    let mut model = TrustVl::<T>::new(header.model_config.clone(), header.vocab.clone(), header.meta.seed)?;
    if header.params != model.store.len() {
        return Err(err(format!("{} parameters stored, model has {}", header.params, model.store.len())));
    }
    let mut r = Reader { buf: body, pos: start };
    let mut loaded = Vec::with_capacity(header.params);
    for _ in 0..header.params {
        let n = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(n)?).map_err(|_| err("parameter name is not UTF-8"))?.to_string();
        let ndim = r.u32()? as usize;
        let shape = (0..ndim).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let count: usize = shape.iter().product();
        let raw = r.take(count * T::BYTES)?;
        let data: Vec<T> = match T::PRECISION {
            Precision::Single => raw.chunks_exact(4).map(|c| T::from_f32(f32::from_le_bytes(c.try_into().expect("4 bytes"))).expect("f32 fits")).collect(),
            Precision::Double => raw.chunks_exact(8).map(|c| T::from_f64(f64::from_le_bytes(c.try_into().expect("8 bytes"))).expect("f64 fits")).collect(),
        };
        let id = model.store.id(&name).ok_or_else(|| err(format!("unknown parameter {name}")))?;
        loaded.push((id, Tensor::new(shape, data)?));
    }
    if r.pos != body.len() {
        return Err(err("trailing bytes after the last parameter"));
    }
    for (id, t) in loaded {
        model.store.set_tensor(id, t)?;
    }
    Ok((model, header))
}

pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<(TrustVl<T>, CheckpointHeader)> {
    let bytes = std::fs::read(path).map_err(|e| PipelineError::io(path, e))?;
    checkpoint_from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use trustvl_core::{LmConfig, QavaConfig, VisionConfig};

    fn tiny<T: Scalar>() -> TrustVl<T> {
        let vocab = Vocab::build(["the river rose", "Is there any distortion?"]);
        let mut cfg = ModelConfig::desk(vocab.len());
        cfg.vision = VisionConfig {
            feat_dim: 8,
            layers: 1,
            heads: 2,
            ffn_dim: 16,
            ..VisionConfig::default()
        };
        cfg.qava = QavaConfig {
            num_tokens: 2,
            num_layers: 1,
            model_dim: 8,
            heads: 2,
            ffn_dim: 16,
            max_question_len: 8,
        };
        cfg.llm = LmConfig {
            llm_dim: 8,
            layers: 1,
            heads: 2,
            ffn_dim: 16,
            max_seq: 64,
            vocab_size: vocab.len(),
        };
        TrustVl::new(cfg, vocab, 3).unwrap()
    }

    fn meta() -> CheckpointMeta {
        CheckpointMeta {
            seed: 3,
            config_digest: "abc".into(),
            stage: "stage1".into(),
        }
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let a = checkpoint_bytes(&tiny::<f64>(), &meta()).unwrap();
        let (m, h) = checkpoint_from_bytes::<f64>(&a).unwrap();
        assert_eq!(h.meta, meta());
        assert_eq!(checkpoint_bytes(&m, &meta()).unwrap(), a);
        let a32 = checkpoint_bytes(&tiny::<f32>(), &meta()).unwrap();
        let (m32, _) = checkpoint_from_bytes::<f32>(&a32).unwrap();
        assert_eq!(checkpoint_bytes(&m32, &meta()).unwrap(), a32);
    }

    #[test]
    fn corruption_and_mismatches_are_rejected() {
        let good = checkpoint_bytes(&tiny::<f64>(), &meta()).unwrap();
        let mut bad = good.clone();
        let i = bad.len() - 100;
        bad[i] ^= 1;
        assert!(checkpoint_from_bytes::<f64>(&bad).unwrap_err().to_string().contains("checksum"));
        let e = checkpoint_from_bytes::<f32>(&good).unwrap_err().to_string();
        assert!(e.contains("precision"), "{e}");
        let mut v2 = good[..good.len() - 32].to_vec();
        let at = v2.windows(16).position(|w| w == b"format_version: ").unwrap() + 16;
        v2[at] = b'9';
        let sum = Sha256::digest(&v2);
        v2.extend_from_slice(&sum);
        assert!(checkpoint_from_bytes::<f64>(&v2).unwrap_err().to_string().contains("format_version"));
    }
}
