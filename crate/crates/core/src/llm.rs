//! Small decoder-only language model over `[soft prefix ; token embeddings]`.

use serde::{Deserialize, Serialize};

use crate::attention::{AttentionConfig, AttentionMask, LayerConfig, LayerNorm, Linear, TransformerLayer};
use crate::error::{shape_err, Result, TensorError};
use crate::params::{ParamBuilder, ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use crate::vocab::EOS;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LmConfig {
    pub llm_dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub max_seq: usize,
    pub vocab_size: usize,
}

impl LmConfig {
    /// Desk defaults: width 64, 2 layers, 4 heads, 512 positions.
    pub fn desk(vocab_size: usize) -> Self {
        Self {
            llm_dim: 64,
            layers: 2,
            heads: 4,
            ffn_dim: 128,
            max_seq: 512,
            vocab_size,
        }
    }

    pub fn validate(&self) -> Result<()> {
        AttentionConfig::new(self.llm_dim, self.heads)?;
        if self.layers == 0 || self.max_seq == 0 || self.vocab_size < 4 || self.ffn_dim == 0 {
            return Err(TensorError::Invalid {
                op: "lm_config",
                detail: format!("{self:?}"),
            });
        }
        Ok(())
    }
}

/// Decoder-only transformer; all parameters in group `llm`.
#[derive(Debug, Clone)]
pub struct ToyLlm {
    pub cfg: LmConfig,
    tok_embed: ParamId,
    pos_embed: ParamId,
    layers: Vec<TransformerLayer>,
    ln_f: LayerNorm,
    head: Linear,
}

impl ToyLlm {
    pub fn new<T: Scalar>(pb: &mut ParamBuilder<'_, T>, cfg: LmConfig) -> Result<Self> {
        cfg.validate()?;
        let layer_cfg = LayerConfig {
            attention: AttentionConfig::new(cfg.llm_dim, cfg.heads)?,
            ffn_dim: cfg.ffn_dim,
            cross_attention: false,
        };
        Ok(Self {
            cfg,
            tok_embed: pb.randn("tok_embed", &[cfg.vocab_size, cfg.llm_dim], 0.5)?,
            pos_embed: pb.randn("pos_embed", &[cfg.max_seq, cfg.llm_dim], 0.02)?,
            layers: (0..cfg.layers)
                .map(|i| TransformerLayer::new(pb, &format!("layer{i}"), layer_cfg))
                .collect::<Result<_>>()?,
            ln_f: LayerNorm::new(pb, "ln_f", cfg.llm_dim)?,
            head: Linear::new(pb, "head", cfg.llm_dim, cfg.vocab_size)?,
        })
    }

    /// Final hidden states `[P+L × llm_dim]` under a causal mask.
    pub fn hidden<'t, T: Scalar>(
        &self,
        tape: &'t Tape<T>,
        store: &ParamStore<T>,
        prefix: Option<Var<'t, T>>,
        ids: &[usize],
    ) -> Result<Var<'t, T>> {
        let p = prefix.map_or(0, |v| v.rows());
        let total = p + ids.len();
        if total == 0 {
            return Err(TensorError::Invalid {
                op: "lm_forward",
                detail: "empty sequence".into(),
            });
        }
        if total > self.cfg.max_seq {
            return Err(TensorError::Invalid {
                op: "lm_forward",
                detail: format!("sequence length {total} exceeds max_seq {}", self.cfg.max_seq),
            });
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= self.cfg.vocab_size) {
            return Err(TensorError::Invalid {
                op: "lm_forward",
                detail: format!("token id {bad} outside vocabulary of {}", self.cfg.vocab_size),
            });
        }
        let mut parts = Vec::with_capacity(2);
        if let Some(pre) = prefix {
            if pre.cols() != self.cfg.llm_dim {
                return shape_err("lm_forward", format!("prefix width {} vs llm_dim {}", pre.cols(), self.cfg.llm_dim));
            }
            parts.push(pre);
        }
        if !ids.is_empty() {
            parts.push(tape.embed(tape.param(store, self.tok_embed), ids)?);
        }
        let x = if parts.len() == 1 { parts[0] } else { tape.concat(&parts, 0)? };
        let pos_ids: Vec<usize> = (0..total).collect();
        let mut x = x.add(&tape.embed(tape.param(store, self.pos_embed), &pos_ids)?)?;
        let mask = AttentionMask::causal(total);
        for layer in &self.layers {
            x = layer.forward(tape, store, x, &mask, None)?;
        }
        Ok(x)
    }

    /// Logits for hidden rows `start..start+len`.
    pub fn logits<'t, T: Scalar>(
        &self,
        tape: &'t Tape<T>,
        store: &ParamStore<T>,
        hidden: Var<'t, T>,
        start: usize,
        len: usize,
    ) -> Result<Var<'t, T>> {
        let h = if start == 0 && len == hidden.rows() {
            hidden
        } else {
            hidden.slice_rows(start, len)?
        };
        let h = self.ln_f.forward(tape, store, h)?;
        self.head.forward(tape, store, h)
    }

    /// `[P+L × vocab]` logits.
    pub fn forward<'t, T: Scalar>(
        &self,
        tape: &'t Tape<T>,
        store: &ParamStore<T>,
        prefix: Option<Var<'t, T>>,
        ids: &[usize],
    ) -> Result<Var<'t, T>> {
        let h = self.hidden(tape, store, prefix, ids)?;
        let n = h.rows();
        self.logits(tape, store, h, 0, n)
    }

    /// Mean next-token cross-entropy where `ids[t+1]` is scored from
    /// position `P+t` and only targets with `target_mask[t+1]` count.
    pub fn masked_loss<'t, T: Scalar>(
        &self,
        tape: &'t Tape<T>,
        store: &ParamStore<T>,
        prefix: Option<Var<'t, T>>,
        ids: &[usize],
        target_mask: &[bool],
    ) -> Result<Var<'t, T>> {
        if target_mask.len() != ids.len() {
            return shape_err("lm_loss", format!("{} mask entries for {} ids", target_mask.len(), ids.len()));
        }
        let first = target_mask.iter().position(|&m| m).ok_or_else(|| TensorError::Invalid {
            op: "lm_loss",
            detail: "no target positions".into(),
        })?;
        if first == 0 {
            return Err(TensorError::Invalid {
                op: "lm_loss",
                detail: "the first token has no predecessor to score it".into(),
            });
        }
        let p = prefix.map_or(0, |v| v.rows());
        let h = self.hidden(tape, store, prefix, ids)?;
        // rows p+first-1 .. p+L-2 predict ids[first..L]
        let len = ids.len() - first;
        let logits = self.logits(tape, store, h, p + first - 1, len)?;
        tape.cross_entropy(logits, &ids[first..], &target_mask[first..])
    }
}

/// Index of the largest value; the lowest index wins ties.
pub fn argmax_lowest<T: Scalar>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Greedy decoding from a fixed prefix and prompt. Stops after emitting EOS
/// (not included in the result), after `max_new` tokens, or when the
/// context is full.
pub fn greedy_decode<T: Scalar>(
    lm: &ToyLlm,
    store: &ParamStore<T>,
    prefix: Option<&Tensor<T>>,
    prompt_ids: &[usize],
    max_new: usize,
) -> Result<Vec<usize>> {
    if max_new == 0 {
        return Err(TensorError::Invalid {
            op: "greedy_decode",
            detail: "budget must be at least 1".into(),
        });
    }
    let p = prefix.map_or(0, |t| t.rows());
    let mut ids = prompt_ids.to_vec();
    let mut out = Vec::new();
    while out.len() < max_new && p + ids.len() < lm.cfg.max_seq {
        let tape = Tape::new();
        let pre = prefix.map(|t| tape.constant(t.clone()));
        let h = lm.hidden(&tape, store, pre, &ids)?;
        let last = h.rows() - 1;
        let logits = lm.logits(&tape, store, h, last, 1)?.value();
        let next = argmax_lowest(logits.data());
        if next == EOS {
            break;
        }
        out.push(next);
        ids.push(next);
    }
    Ok(out)
}
