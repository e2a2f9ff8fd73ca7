//! Patch-based vision encoder with dynamic high-resolution tiling.
//!
//! An image is covered by `base × base` tiles (edge tiles padded by
//! replicating the border pixels) followed by one global view, the whole
//! image mean-pooled down to `base × base`. An image smaller than `base` in
//! either dimension is encoded as a single view: itself, padded by
//! replication to a multiple of the patch size. Every view is cut into
//! non-overlapping `patch × patch` patches and encoded on its own; the
//! per-view outputs are concatenated along the patch axis.

use serde::{Deserialize, Serialize};

use crate::attention::{AttentionConfig, AttentionMask, LayerConfig, LayerNorm, Linear, TransformerLayer};
use crate::error::{shape_err, Result, TensorError};
use crate::params::{ParamBuilder, ParamId, ParamStore};
use crate::scalar::{c, Scalar};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// An `height × width × channels` image with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f32>,
}

impl Image {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 || channels == 0 {
            return Err(TensorError::Invalid {
                op: "image",
                detail: format!("empty image {height}×{width}×{channels}"),
            });
        }
        if data.len() != height * width * channels {
            return shape_err("image", format!("{} values for {height}×{width}×{channels}", data.len()));
        }
        if data.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(TensorError::Invalid {
                op: "image",
                detail: "pixel values must lie in [0, 1]".into(),
            });
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn from_fn(height: usize, width: usize, channels: usize, f: impl Fn(usize, usize, usize) -> f32) -> Result<Self> {
        let mut data = Vec::with_capacity(height * width * channels);
        for y in 0..height {
            for x in 0..width {
                for ch in 0..channels {
                    data.push(f(y, x, ch));
                }
            }
        }
        Self::new(height, width, channels, data)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn get(&self, y: usize, x: usize, ch: usize) -> f32 {
        self.data[(y * self.width + x) * self.channels + ch]
    }

    /// Pixel lookup with coordinates clamped to the image (border replication).
    pub fn get_clamped(&self, y: usize, x: usize, ch: usize) -> f32 {
        self.get(y.min(self.height - 1), x.min(self.width - 1), ch)
    }
}

/// Either raw pixels or a precomputed `[n_patches × feat_dim]` feature matrix.
#[derive(Debug, Clone, PartialEq)]
pub enum ImageInput {
    Pixels(Image),
    Features(Tensor<f64>),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TileCoord {
    pub row: usize,
    pub col: usize,
}

/// Which views an image is encoded as. The global view is always last.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TilePlan {
    pub base: usize,
    pub height: usize,
    pub width: usize,
    pub tiles: Vec<TileCoord>,
}

impl TilePlan {
    /// Tiles plus the global view.
    pub fn num_views(&self) -> usize {
        self.tiles.len() + 1
    }

    /// Height and width of the replication-padded canvas the tiles cover.
    pub fn padded_dims(&self) -> (usize, usize) {
        let up = |v: usize| v.div_ceil(self.base).max(1) * self.base;
        (up(self.height), up(self.width))
    }
}

/// Plans `ceil(h/base)·ceil(w/base)` tiles plus one global view. Images
/// smaller than `base` in either dimension get the global view only.
pub fn plan_tiles(height: usize, width: usize, base: usize) -> Result<TilePlan> {
    if base == 0 || height == 0 || width == 0 {
        return Err(TensorError::Invalid {
            op: "plan_tiles",
            detail: format!("h={height} w={width} base={base}"),
        });
    }
    let tiles = if height < base || width < base {
        Vec::new()
    } else {
        let (rows, cols) = (height.div_ceil(base), width.div_ceil(base));
        (0..rows)
            .flat_map(|row| (0..cols).map(move |col| TileCoord { row, col }))
            .collect()
    };
    Ok(TilePlan {
        base,
        height,
        width,
        tiles,
    })
}

/// Extracts every view of `plan`: `base × base` tiles and global view, or the
/// padded image itself when it is smaller than `base`.
pub fn extract_views(image: &Image, plan: &TilePlan, patch: usize) -> Result<Vec<Image>> {
    let b = plan.base;
    let ch = image.channels();
    if plan.tiles.is_empty() {
        if patch == 0 {
            return shape_err("extract_views", "patch size 0");
        }
        let (h, w) = (
            image.height().div_ceil(patch) * patch,
            image.width().div_ceil(patch) * patch,
        );
        return Ok(vec![Image::from_fn(h, w, ch, |y, x, k| image.get_clamped(y, x, k))?]);
    }
    let mut views = Vec::with_capacity(plan.num_views());
    for t in &plan.tiles {
        views.push(Image::from_fn(b, b, ch, |y, x, k| {
            image.get_clamped(t.row * b + y, t.col * b + x, k)
        })?);
    }
    let (ph, pw) = plan.padded_dims();
    let (fh, fw) = (ph / b, pw / b);
    let inv = 1.0 / (fh * fw) as f64;
    views.push(Image::from_fn(b, b, ch, |y, x, k| {
        let mut s = 0.0f64;
        for dy in 0..fh {
            for dx in 0..fw {
                s += image.get_clamped(y * fh + dy, x * fw + dx, k) as f64;
            }
        }
        (s * inv) as f32
    })?);
    Ok(views)
}

/// Cuts a view into row-major non-overlapping patches, one flattened
/// `patch·patch·channels` row per patch.
pub fn patchify<T: Scalar>(view: &Image, patch: usize) -> Result<Tensor<T>> {
    if patch == 0 || view.height() % patch != 0 || view.width() % patch != 0 {
        return shape_err(
            "patchify",
            format!("{}×{} view is not divisible by patch {patch}", view.height(), view.width()),
        );
    }
    let (gh, gw, ch) = (view.height() / patch, view.width() / patch, view.channels());
    let dim = patch * patch * ch;
    let mut data = Vec::with_capacity(gh * gw * dim);
    for py in 0..gh {
        for px in 0..gw {
            for dy in 0..patch {
                for dx in 0..patch {
                    for k in 0..ch {
                        data.push(c(view.get(py * patch + dy, px * patch + dx, k) as f64));
                    }
                }
            }
        }
    }
    Tensor::new(vec![gh * gw, dim], data)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct VisionConfig {
    pub base: usize,
    pub patch: usize,
    pub channels: usize,
    pub feat_dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub ffn_dim: usize,
}

impl Default for VisionConfig {
    fn default() -> Self {
        Self {
            base: 32,
            patch: 8,
            channels: 3,
            feat_dim: 64,
            layers: 2,
            heads: 4,
            ffn_dim: 128,
        }
    }
}

impl VisionConfig {
    pub fn patches_per_view(&self) -> usize {
        (self.base / self.patch).pow(2)
    }

    pub fn patch_dim(&self) -> usize {
        self.patch * self.patch * self.channels
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch == 0 || self.base % self.patch != 0 {
            return Err(TensorError::Invalid {
                op: "vision_config",
                detail: format!("base {} must be a multiple of patch {}", self.base, self.patch),
            });
        }
        AttentionConfig::new(self.feat_dim, self.heads).map(|_| ())
    }
}

/// Vision tower; parameters live in group `vision`.
#[derive(Debug, Clone)]
pub struct VisionEncoder {
    pub cfg: VisionConfig,
    patch_embed: Linear,
    pos: ParamId,
    layers: Vec<TransformerLayer>,
    ln_out: LayerNorm,
}

impl VisionEncoder {
    pub fn new<T: Scalar>(pb: &mut ParamBuilder<'_, T>, cfg: VisionConfig) -> Result<Self> {
        cfg.validate()?;
        let patch_embed = Linear::new(pb, "patch_embed", cfg.patch_dim(), cfg.feat_dim)?;
        let pos = pb.randn("pos", &[cfg.patches_per_view(), cfg.feat_dim], 0.02)?;
        let layer_cfg = LayerConfig {
            attention: AttentionConfig::new(cfg.feat_dim, cfg.heads)?,
            ffn_dim: cfg.ffn_dim,
            cross_attention: false,
        };
        let layers = (0..cfg.layers)
            .map(|i| TransformerLayer::new(pb, &format!("layer{i}"), layer_cfg))
            .collect::<Result<_>>()?;
        let ln_out = LayerNorm::new(pb, "ln_out", cfg.feat_dim)?;
        Ok(Self {
            cfg,
            patch_embed,
            pos,
            layers,
            ln_out,
        })
    }

    /// Linear patch embedding, before positional embeddings are added.
    pub fn patch_embed<'t, T: Scalar>(
        &self,
        tape: &'t Tape<T>,
        store: &ParamStore<T>,
        patches: Var<'t, T>,
    ) -> Result<Var<'t, T>> {
        self.patch_embed.forward(tape, store, patches)
    }

    /// Number of output rows for a pixel image of the given size.
    pub fn num_patches(&self, height: usize, width: usize) -> Result<usize> {
        let p = self.cfg.patch;
        let plan = plan_tiles(height, width, self.cfg.base)?;
        if plan.tiles.is_empty() {
            Ok(height.div_ceil(p) * width.div_ceil(p))
        } else {
            Ok(plan.num_views() * self.cfg.patches_per_view())
        }
    }

    /// Encodes an image to `[n_total_patches × feat_dim]`. Precomputed
    /// features are passed through as constants.
    pub fn encode<'t, T: Scalar>(&self, tape: &'t Tape<T>, store: &ParamStore<T>, image: &ImageInput) -> Result<Var<'t, T>> {
        let img = match image {
            ImageInput::Features(f) => {
                if f.rank() != 2 || f.cols() != self.cfg.feat_dim {
                    return shape_err(
                        "encode",
                        format!("features {:?} but feat_dim is {}", f.shape(), self.cfg.feat_dim),
                    );
                }
                return Ok(tape.constant(f.cast()));
            }
            ImageInput::Pixels(img) => img,
        };
        if img.channels() != self.cfg.channels {
            return shape_err(
                "encode",
                format!("{} channels, encoder expects {}", img.channels(), self.cfg.channels),
            );
        }
        let plan = plan_tiles(img.height(), img.width(), self.cfg.base)?;
        let views = extract_views(img, &plan, self.cfg.patch)?;
        let p = self.cfg.patch;
        let grid = self.cfg.base / p;
        let mut rows = Vec::new();
        let mut view_of = Vec::new();
        let mut pos_ids = Vec::new();
        for (vi, v) in views.iter().enumerate() {
            rows.extend_from_slice(patchify::<T>(v, p)?.data());
            let gw = v.width() / p;
            for i in 0..(v.height() / p) * gw {
                view_of.push(vi);
                // positions wrap onto the base grid for oversized single views
                pos_ids.push((i / gw) % grid * grid + (i % gw) % grid);
            }
        }
        let n = view_of.len();
        let patches = tape.constant(Tensor::new(vec![n, self.cfg.patch_dim()], rows)?);

        let emb = self.patch_embed(tape, store, patches)?;
        let pos = tape.embed(tape.param(store, self.pos), &pos_ids)?;
        let mut x = emb.add(&pos)?;
        // Views are encoded independently: block-diagonal attention.
        let mask = AttentionMask::from_fn(n, n, |q, k| view_of[q] == view_of[k])?;
        for layer in &self.layers {
            x = layer.forward(tape, store, x, &mask, None)?;
        }
        self.ln_out.forward(tape, store, x)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tile_counts() {
        assert_eq!(plan_tiles(64, 64, 32).unwrap().num_views(), 5);
        assert_eq!(plan_tiles(32, 32, 32).unwrap().num_views(), 2);
        assert_eq!(plan_tiles(96, 64, 32).unwrap().num_views(), 7);
        assert_eq!(plan_tiles(40, 33, 32).unwrap().num_views(), 5);
    }

    #[test]
    fn undersized_image_gets_global_view_only() {
        let plan = plan_tiles(20, 40, 32).unwrap();
        assert!(plan.tiles.is_empty());
        assert_eq!(plan.num_views(), 1);
        let img = Image::from_fn(20, 40, 1, |y, _, _| y as f32 / 20.0).unwrap();
        let views = extract_views(&img, &plan, 8).unwrap();
        assert_eq!(views.len(), 1);
        assert_eq!((views[0].height(), views[0].width()), (24, 40));
    }

    #[test]
    fn edge_tiles_replicate_border() {
        let img = Image::from_fn(40, 32, 1, |y, _, _| if y == 39 { 1.0 } else { 0.0 }).unwrap();
        let plan = plan_tiles(40, 32, 32).unwrap();
        let views = extract_views(&img, &plan, 8).unwrap();
        // second tile covers rows 32..64; rows 39.. are the replicated last row
        assert_eq!(views[1].get(7, 0, 0), 1.0);
        assert_eq!(views[1].get(31, 5, 0), 1.0);
        assert_eq!(views[1].get(6, 0, 0), 0.0);
    }

    #[test]
    fn global_view_is_mean_pooled() {
        let img = Image::from_fn(64, 64, 1, |y, x, _| ((y + x) % 2) as f32).unwrap();
        let views = extract_views(&img, &plan_tiles(64, 64, 32).unwrap(), 8).unwrap();
        let global = views.last().unwrap();
        assert!(global.data().iter().all(|&v| (v - 0.5).abs() < 1e-7));
    }

    #[test]
    fn patchify_shape_and_divisibility() {
        let img = Image::from_fn(16, 16, 3, |_, _, _| 0.5).unwrap();
        let p = patchify::<f64>(&img, 8).unwrap();
        assert_eq!(p.shape(), &[4, 192]);
        assert!(patchify::<f64>(&img, 5).is_err());
    }
}
