//! Multi-head attention and pre-norm transformer layers.
//!
//! The same [`TransformerLayer`] serves the vision encoder (self-attention
//! only), QAVA (self-attention then cross-attention from the learnable
//! tokens into image features) and the toy language model (causal
//! self-attention).

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Result, TensorError};
use crate::params::{ParamBuilder, ParamId, ParamStore};
use crate::scalar::{c, Scalar};
use crate::tape::{Tape, Var};

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Affine map `x · w + b`, `w: [in × out]`.
#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn new<T: Scalar>(pb: &mut ParamBuilder<'_, T>, name: &str, fan_in: usize, fan_out: usize) -> Result<Self> {
        let mut pb = pb.pp(name);
        let std = 1.0 / (fan_in as f64).sqrt();
        Ok(Self {
            w: pb.randn("w", &[fan_in, fan_out], std)?,
            b: pb.zeros("b", &[fan_out])?,
        })
    }

    /// Both weight and bias start at zero.
    pub fn zeroed<T: Scalar>(pb: &mut ParamBuilder<'_, T>, name: &str, fan_in: usize, fan_out: usize) -> Result<Self> {
        let mut pb = pb.pp(name);
        Ok(Self {
            w: pb.zeros("w", &[fan_in, fan_out])?,
            b: pb.zeros("b", &[fan_out])?,
        })
    }

    pub fn forward<'t, T: Scalar>(&self, tape: &'t Tape<T>, store: &ParamStore<T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        let w = tape.param(store, self.w);
        let b = tape.param(store, self.b);
        x.linear(&w, &b)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new<T: Scalar>(pb: &mut ParamBuilder<'_, T>, name: &str, dim: usize) -> Result<Self> {
        let mut pb = pb.pp(name);
        Ok(Self {
            gain: pb.ones("gain", &[dim])?,
            bias: pb.zeros("bias", &[dim])?,
        })
    }

    pub fn forward<'t, T: Scalar>(&self, tape: &'t Tape<T>, store: &ParamStore<T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        let g = tape.param(store, self.gain);
        let b = tape.param(store, self.bias);
        x.layer_norm(&g, &b, c(LAYER_NORM_EPS))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttentionConfig {
    pub model_dim: usize,
    pub num_heads: usize,
}

impl AttentionConfig {
    pub fn new(model_dim: usize, num_heads: usize) -> Result<Self> {
        let cfg = Self { model_dim, num_heads };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.model_dim == 0 || self.num_heads == 0 || self.model_dim % self.num_heads != 0 {
            return Err(TensorError::Invalid {
                op: "attention_config",
                detail: format!(
                    "model_dim {} must be a positive multiple of num_heads {}",
                    self.model_dim, self.num_heads
                ),
            });
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.model_dim / self.num_heads
    }
}

/// Boolean `[queries × keys]` matrix; `true` means "may attend".
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttentionMask {
    queries: usize,
    keys: usize,
    allow: Vec<bool>,
}

impl AttentionMask {
    pub fn new(queries: usize, keys: usize, allow: Vec<bool>) -> Result<Self> {
        if allow.len() != queries * keys {
            return shape_err("attention_mask", format!("{} entries for {queries}×{keys}", allow.len()));
        }
        if let Some(r) = (0..queries).find(|&r| !allow[r * keys..(r + 1) * keys].iter().any(|&a| a)) {
            return Err(TensorError::Invalid {
                op: "attention_mask",
                detail: format!("query row {r} attends to nothing"),
            });
        }
        Ok(Self { queries, keys, allow })
    }

    pub fn full(queries: usize, keys: usize) -> Self {
        Self {
            queries,
            keys,
            allow: vec![true; queries * keys],
        }
    }

    /// Lower-triangular mask: position `i` sees positions `0..=i`.
    pub fn causal(n: usize) -> Self {
        let allow = (0..n * n).map(|k| k % n <= k / n).collect();
        Self {
            queries: n,
            keys: n,
            allow,
        }
    }

    pub fn from_fn(queries: usize, keys: usize, f: impl Fn(usize, usize) -> bool) -> Result<Self> {
        let allow = (0..queries * keys).map(|k| f(k / keys, k % keys)).collect();
        Self::new(queries, keys, allow)
    }

    pub fn queries(&self) -> usize {
        self.queries
    }

    pub fn keys(&self) -> usize {
        self.keys
    }

    pub fn allows(&self, q: usize, k: usize) -> bool {
        self.allow[q * self.keys + k]
    }

    pub fn as_slice(&self) -> &[bool] {
        &self.allow
    }
}

/// Scaled dot-product attention with `num_heads` heads and separate
/// query/key/value/output projections.
#[derive(Debug, Clone, Copy)]
pub struct MultiHeadAttention {
    pub cfg: AttentionConfig,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
}

impl MultiHeadAttention {
    pub fn new<T: Scalar>(pb: &mut ParamBuilder<'_, T>, name: &str, cfg: AttentionConfig, zero_out: bool) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.model_dim;
        let mut pb = pb.pp(name);
        Ok(Self {
            cfg,
            q: Linear::new(&mut pb, "wq", d, d)?,
            k: Linear::new(&mut pb, "wk", d, d)?,
            v: Linear::new(&mut pb, "wv", d, d)?,
            o: if zero_out {
                Linear::zeroed(&mut pb, "wo", d, d)?
            } else {
                Linear::new(&mut pb, "wo", d, d)?
            },
        })
    }

    /// `queries_in: [Lq × d]`, `keys_values_in: [Lk × d]` → `[Lq × d]`.
    pub fn forward<'t, T: Scalar>(
        &self,
        tape: &'t Tape<T>,
        store: &ParamStore<T>,
        queries_in: Var<'t, T>,
        keys_values_in: Var<'t, T>,
        mask: &AttentionMask,
    ) -> Result<Var<'t, T>> {
        let (lq, lk) = (queries_in.rows(), keys_values_in.rows());
        if mask.queries() != lq || mask.keys() != lk {
            return shape_err(
                "multi_head_attention",
                format!("mask {}×{} for {lq} queries and {lk} keys", mask.queries(), mask.keys()),
            );
        }
        let q = self.q.forward(tape, store, queries_in)?;
        let k = self.k.forward(tape, store, keys_values_in)?;
        let v = self.v.forward(tape, store, keys_values_in)?;
        let hd = self.cfg.head_dim();
        let scale: T = c(1.0 / (hd as f64).sqrt());
        let mut heads = Vec::with_capacity(self.cfg.num_heads);
        for h in 0..self.cfg.num_heads {
            let qh = q.slice_cols(h * hd, hd)?;
            let kh = k.slice_cols(h * hd, hd)?;
            let vh = v.slice_cols(h * hd, hd)?;
            let scores = qh.matmul_nt(&kh)?.scale(scale)?;
            let weights = scores.masked_softmax(mask.as_slice())?;
            heads.push(weights.matmul(&vh)?);
        }
        let merged = if heads.len() == 1 { heads[0] } else { tape.concat(&heads, 1)? };
        self.o.forward(tape, store, merged)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerConfig {
    pub attention: AttentionConfig,
    pub ffn_dim: usize,
    pub cross_attention: bool,
}

/// Cross-attention source for one layer call.
pub struct CrossInput<'t, 'm, T: Scalar> {
    pub source: Var<'t, T>,
    pub mask: &'m AttentionMask,
    /// Only the first `query_rows` rows of the layer input query the source;
    /// `None` means all rows do.
    pub query_rows: Option<usize>,
}

/// Pre-norm layer: `x += SelfAttn(LN(x))`, then optionally
/// `x += CrossAttn(LN(x), source)`, then `x += FFN(LN(x))`.
#[derive(Debug, Clone)]
pub struct TransformerLayer {
    pub cfg: LayerConfig,
    ln_self: LayerNorm,
    self_attn: MultiHeadAttention,
    cross: Option<(LayerNorm, MultiHeadAttention)>,
    ln_ffn: LayerNorm,
    ffn_in: Linear,
    ffn_out: Linear,
}

impl TransformerLayer {
    pub fn new<T: Scalar>(pb: &mut ParamBuilder<'_, T>, name: &str, cfg: LayerConfig) -> Result<Self> {
        Self::build(pb, name, cfg, false)
    }

    /// All residual-branch output projections start at zero, making the
    /// layer an identity map until trained.
    pub fn new_identity<T: Scalar>(pb: &mut ParamBuilder<'_, T>, name: &str, cfg: LayerConfig) -> Result<Self> {
        Self::build(pb, name, cfg, true)
    }

    fn build<T: Scalar>(pb: &mut ParamBuilder<'_, T>, name: &str, cfg: LayerConfig, zero: bool) -> Result<Self> {
        let d = cfg.attention.model_dim;
        let mut pb = pb.pp(name);
        let ln_self = LayerNorm::new(&mut pb, "ln_self", d)?;
        let self_attn = MultiHeadAttention::new(&mut pb, "self_attn", cfg.attention, zero)?;
        let cross = if cfg.cross_attention {
            Some((
                LayerNorm::new(&mut pb, "ln_cross", d)?,
                MultiHeadAttention::new(&mut pb, "cross_attn", cfg.attention, zero)?,
            ))
        } else {
            None
        };
        let ln_ffn = LayerNorm::new(&mut pb, "ln_ffn", d)?;
        let ffn_in = Linear::new(&mut pb, "ffn_in", d, cfg.ffn_dim)?;
        let ffn_out = if zero {
            Linear::zeroed(&mut pb, "ffn_out", cfg.ffn_dim, d)?
        } else {
            Linear::new(&mut pb, "ffn_out", cfg.ffn_dim, d)?
        };
        Ok(Self {
            cfg,
            ln_self,
            self_attn,
            cross,
            ln_ffn,
            ffn_in,
            ffn_out,
        })
    }

    pub fn forward<'t, T: Scalar>(
        &self,
        tape: &'t Tape<T>,
        store: &ParamStore<T>,
        x: Var<'t, T>,
        self_mask: &AttentionMask,
        cross: Option<CrossInput<'t, '_, T>>,
    ) -> Result<Var<'t, T>> {
        match (&self.cross, &cross) {
            (Some(_), None) => {
                return Err(TensorError::Invalid {
                    op: "transformer_layer",
                    detail: "layer has cross-attention but no source was given".into(),
                })
            }
            (None, Some(_)) => {
                return Err(TensorError::Invalid {
                    op: "transformer_layer",
                    detail: "cross source given to a self-attention-only layer".into(),
                })
            }
            _ => {}
        }

        let h = self.ln_self.forward(tape, store, x)?;
        let a = self.self_attn.forward(tape, store, h, h, self_mask)?;
        let mut x = x.add(&a)?;

        if let (Some((ln, attn)), Some(cross)) = (&self.cross, cross) {
            let n = x.rows();
            let q_rows = cross.query_rows.unwrap_or(n);
            if q_rows == 0 || q_rows > n {
                return shape_err("transformer_layer", format!("{q_rows} query rows of {n}"));
            }
            let head = if q_rows == n { x } else { x.slice_rows(0, q_rows)? };
            let hq = ln.forward(tape, store, head)?;
            let ca = attn.forward(tape, store, hq, cross.source, cross.mask)?;
            let head = head.add(&ca)?;
            x = if q_rows == n {
                head
            } else {
                let tail = x.slice_rows(q_rows, n - q_rows)?;
                tape.concat(&[head, tail], 0)?
            };
        }

        let h = self.ln_ffn.forward(tape, store, x)?;
        let f = self.ffn_in.forward(tape, store, h)?.gelu()?;
        let f = self.ffn_out.forward(tape, store, f)?;
        x.add(&f)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::Group;
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup(zero: bool, cross: bool) -> (ParamStore<f64>, TransformerLayer) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cfg = LayerConfig {
            attention: AttentionConfig::new(8, 2).unwrap(),
            ffn_dim: 16,
            cross_attention: cross,
        };
        let mut pb = ParamBuilder::new(&mut store, &mut rng, "l", Group::Qava);
        let layer = if zero {
            TransformerLayer::new_identity(&mut pb, "0", cfg).unwrap()
        } else {
            TransformerLayer::new(&mut pb, "0", cfg).unwrap()
        };
        (store, layer)
    }

    #[test]
    fn head_count_must_divide_width() {
        assert!(AttentionConfig::new(10, 4).is_err());
        assert_eq!(AttentionConfig::new(64, 4).unwrap().head_dim(), 16);
    }

    #[test]
    fn mask_rows_need_an_allowed_key() {
        assert!(AttentionMask::new(2, 2, vec![true, false, false, false]).is_err());
        let m = AttentionMask::causal(3);
        assert!(m.allows(2, 0) && !m.allows(0, 1));
    }

    #[test]
    fn single_key_returns_projected_value() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mha = MultiHeadAttention::new(
            &mut ParamBuilder::new(&mut store, &mut rng, "a", Group::Qava),
            "m",
            AttentionConfig::new(4, 2).unwrap(),
            false,
        )
        .unwrap();
        let tape = Tape::new();
        let kv = tape.input(Tensor::randn(&[1, 4], 1.0, &mut rng));
        let want = mha
            .o
            .forward(&tape, &store, mha.v.forward(&tape, &store, kv).unwrap())
            .unwrap()
            .value();
        for seed in 0..3 {
            let q = tape.input(Tensor::randn(&[3, 4], 1.0, &mut ChaCha8Rng::seed_from_u64(seed)));
            let out = mha.forward(&tape, &store, q, kv, &AttentionMask::full(3, 1)).unwrap().value();
            for r in 0..3 {
                for (a, b) in out.row(r).iter().zip(want.row(0)) {
                    assert!((a - b).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn zeroed_output_projections_make_identity() {
        let (store, layer) = setup(true, false);
        let tape = Tape::new();
        let x = Tensor::randn(&[5, 8], 1.0, &mut ChaCha8Rng::seed_from_u64(9));
        let y = layer
            .forward(&tape, &store, tape.input(x.clone()), &AttentionMask::full(5, 5), None)
            .unwrap()
            .value();
        assert_eq!(*y, x);
    }

    #[test]
    fn cross_source_must_match_layer_config() {
        let (store, layer) = setup(false, false);
        let tape = Tape::new();
        let x = tape.input(Tensor::zeros(&[2, 8]));
        let m = AttentionMask::full(2, 2);
        let src = CrossInput {
            source: x,
            mask: &m,
            query_rows: None,
        };
        assert!(layer.forward(&tape, &store, x, &m, Some(src)).is_err());
        let y = layer.forward(&tape, &store, x, &m, None).unwrap();
        assert_eq!(y.shape(), vec![2, 8]);

        let (store, layer) = setup(false, true);
        assert!(layer.forward(&tape, &store, x, &m, None).is_err());
    }
}
