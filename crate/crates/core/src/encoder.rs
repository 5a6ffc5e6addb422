//! Hierarchical windowed-attention vision encoder.
//!
//! An input image is cut into non-overlapping patches, linearly embedded, and
//! pushed through stages of transformer blocks whose self-attention is
//! restricted to local M×M token windows. Odd-numbered blocks cyclically
//! shift the grid by M/2 first so information crosses window boundaries;
//! tokens that wrap around the edge are kept from attending to each other by
//! an additive −1e9 score mask. Between stages, 2×2 token neighborhoods are
//! merged and projected to double width, halving the grid side.
//!
//! All spatial rearrangements — patch extraction, window partition and its
//! inverse, cyclic shifts, neighborhood merging — are precomputed index maps
//! fed to the single differentiable `gather_rows` primitive, so each has one
//! gradient rule and the maps themselves are testable as plain functions.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nn::{linear, ones_param, uniform_param, zeros_param, LAYER_NORM_EPS};
use crate::tensor::{Real, Tensor, TensorError};

/// Additive score for masked (cross-boundary) token pairs.
const MASK_NEG: f64 = -1e9;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    /// Input side length in pixels; images are `3×size×size`.
    pub image_size: usize,
    pub patch_size: usize,
    /// Channel width after patch embedding; doubles at every merge.
    pub embed_dim: usize,
    /// Per stage: (number of blocks, number of heads).
    pub stages: Vec<(usize, usize)>,
    /// Window side M, in tokens.
    pub window_size: usize,
    /// Hidden width of each block's MLP, as a multiple of the stage width.
    pub mlp_ratio: f64,
    /// Learned relative position bias on attention scores (zero-initialized).
    pub use_relative_bias: bool,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            image_size: 224,
            patch_size: 4,
            embed_dim: 32,
            stages: vec![(2, 2), (2, 4)],
            window_size: 4,
            mlp_ratio: 2.0,
            use_relative_bias: true,
        }
    }
}

#[derive(Debug, Error)]
pub enum EncoderError {
    #[error("image size {image} is not divisible by patch size {patch}")]
    IndivisiblePatch { image: usize, patch: usize },
    #[error("stage {stage}: token grid {grid} is not divisible by window size {window}")]
    IndivisibleWindow {
        stage: usize,
        grid: usize,
        window: usize,
    },
    #[error("stage {stage}: width {dim} is not divisible by {heads} heads")]
    IndivisibleHeads {
        stage: usize,
        dim: usize,
        heads: usize,
    },
    #[error("stage {stage}: grid {grid} is odd, cannot merge 2×2 neighborhoods")]
    OddMergeGrid { stage: usize, grid: usize },
    #[error("encoder config field {field} must be positive")]
    ZeroField { field: &'static str },
    #[error("encoder needs at least one stage")]
    NoStages,
    #[error("expected image shape {expected:?}, got {got:?}")]
    BadImage {
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<(), EncoderError> {
        for (field, v) in [
            ("image_size", self.image_size),
            ("patch_size", self.patch_size),
            ("embed_dim", self.embed_dim),
            ("window_size", self.window_size),
        ] {
            if v == 0 {
                return Err(EncoderError::ZeroField { field });
            }
        }
        if self.mlp_ratio <= 0.0 {
            return Err(EncoderError::ZeroField { field: "mlp_ratio" });
        }
        if self.stages.is_empty() {
            return Err(EncoderError::NoStages);
        }
        if self.image_size % self.patch_size != 0 {
            return Err(EncoderError::IndivisiblePatch {
                image: self.image_size,
                patch: self.patch_size,
            });
        }
        let mut grid = self.image_size / self.patch_size;
        for (stage, &(blocks, heads)) in self.stages.iter().enumerate() {
            if blocks == 0 {
                return Err(EncoderError::ZeroField { field: "stage blocks" });
            }
            if heads == 0 {
                return Err(EncoderError::ZeroField { field: "stage heads" });
            }
            let dim = self.stage_dim(stage);
            if dim % heads != 0 {
                return Err(EncoderError::IndivisibleHeads { stage, dim, heads });
            }
            if grid % self.window_size != 0 {
                return Err(EncoderError::IndivisibleWindow {
                    stage,
                    grid,
                    window: self.window_size,
                });
            }
            if stage + 1 < self.stages.len() {
                if grid % 2 != 0 {
                    return Err(EncoderError::OddMergeGrid { stage, grid });
                }
                grid /= 2;
            }
        }
        Ok(())
    }

    pub fn stage_dim(&self, stage: usize) -> usize {
        self.embed_dim << stage
    }

    pub fn stage_grid(&self, stage: usize) -> usize {
        (self.image_size / self.patch_size) >> stage
    }

    /// Final feature width D seen by the decoder.
    pub fn out_dim(&self) -> usize {
        self.stage_dim(self.stages.len() - 1)
    }

    /// Final grid side; the decoder attends over its `side²` positions.
    pub fn out_grid(&self) -> usize {
        self.stage_grid(self.stages.len() - 1)
    }

    fn mlp_hidden(&self, stage: usize) -> usize {
        ((self.stage_dim(stage) as f64 * self.mlp_ratio).round() as usize).max(1)
    }
}

/// The encoder's product: `L = grid_h·grid_w` feature rows of width D.
#[derive(Debug, Clone)]
pub struct EncoderOutput<F: Real = f32> {
    pub features: Tensor<F>,
    pub grid_h: usize,
    pub grid_w: usize,
}

// ---------------------------------------------------------------------------
// Index maps. Each returns, for every output row, the source row to copy.
// ---------------------------------------------------------------------------

/// Patch extraction map: output row = one patch, laid out channel-major
/// (`[c][dr][dc]`); source indexes the flattened `3×S×S` image.
pub fn patch_indices(size: usize, patch: usize) -> Vec<usize> {
    let grid = size / patch;
    let mut idx = Vec::with_capacity(grid * grid * 3 * patch * patch);
    for pr in 0..grid {
        for pc in 0..grid {
            for c in 0..3 {
                for dr in 0..patch {
                    for dc in 0..patch {
                        idx.push(c * size * size + (pr * patch + dr) * size + (pc * patch + dc));
                    }
                }
            }
        }
    }
    idx
}

/// Window partition: output row `w·M² + p` is token `p` of window `w`
/// (windows and in-window positions both row-major). Token `(r, c)` lands in
/// window `(r/M, c/M)` at offset `(r mod M, c mod M)`.
pub fn window_partition_indices(grid: usize, m: usize) -> Vec<usize> {
    let per_side = grid / m;
    let mut idx = Vec::with_capacity(grid * grid);
    for wr in 0..per_side {
        for wc in 0..per_side {
            for r in 0..m {
                for c in 0..m {
                    idx.push((wr * m + r) * grid + wc * m + c);
                }
            }
        }
    }
    idx
}

/// Inverse of [`window_partition_indices`]: scatter windows back to the grid.
pub fn window_reverse_indices(grid: usize, m: usize) -> Vec<usize> {
    let partition = window_partition_indices(grid, m);
    let mut reverse = vec![0usize; partition.len()];
    for (pos, &src) in partition.iter().enumerate() {
        reverse[src] = pos;
    }
    reverse
}

/// Circular roll of the grid by `(−s, −s)`: output `(r, c)` takes input
/// `((r+s) mod g, (c+s) mod g)`, so an element at `(r, c)` moves to
/// `((r−s) mod g, (c−s) mod g)`.
pub fn cyclic_shift_indices(grid: usize, s: usize) -> Vec<usize> {
    let mut idx = Vec::with_capacity(grid * grid);
    for r in 0..grid {
        for c in 0..grid {
            idx.push(((r + s) % grid) * grid + (c + s) % grid);
        }
    }
    idx
}

/// 2×2 neighborhood gather: four source rows per output position, ordered
/// `(r,c), (r,c+1), (r+1,c), (r+1,c+1)`, so a row-major reshape concatenates
/// them into one row of 4·D channels.
pub fn merge_indices(grid: usize) -> Vec<usize> {
    let half = grid / 2;
    let mut idx = Vec::with_capacity(grid * grid);
    for r in 0..half {
        for c in 0..half {
            let (r0, c0) = (2 * r, 2 * c);
            idx.push(r0 * grid + c0);
            idx.push(r0 * grid + c0 + 1);
            idx.push((r0 + 1) * grid + c0);
            idx.push((r0 + 1) * grid + c0 + 1);
        }
    }
    idx
}

/// For each (query, key) position pair in an M×M window, the row of the
/// `(2M−1)²`-entry relative-bias table holding their offset's bias.
pub fn relative_bias_indices(m: usize) -> Vec<usize> {
    let span = 2 * m - 1;
    let mut idx = Vec::with_capacity(m * m * m * m);
    for q in 0..m * m {
        let (qr, qc) = (q / m, q % m);
        for k in 0..m * m {
            let (kr, kc) = (k / m, k % m);
            let dr = qr + m - 1 - kr;
            let dc = qc + m - 1 - kc;
            idx.push(dr * span + dc);
        }
    }
    idx
}

/// Region id per *shifted-grid* position. After a roll by `(−s, −s)`, the
/// last `s` rows/columns hold tokens wrapped from the opposite edge; tokens
/// may attend only within their own region. (Tokens from different windows
/// never interact, so one boundary flag per axis is enough.)
fn shift_region_ids(grid: usize, s: usize) -> Vec<u8> {
    let mut ids = Vec::with_capacity(grid * grid);
    for r in 0..grid {
        for c in 0..grid {
            let fr = u8::from(r >= grid - s);
            let fc = u8::from(c >= grid - s);
            ids.push(fr << 1 | fc);
        }
    }
    ids
}

// ---------------------------------------------------------------------------
// Parameters
// ---------------------------------------------------------------------------

pub(crate) struct AttnParams<F: Real> {
    pub wq: Tensor<F>,
    pub bq: Tensor<F>,
    pub wk: Tensor<F>,
    pub bk: Tensor<F>,
    pub wv: Tensor<F>,
    pub bv: Tensor<F>,
    pub proj: Tensor<F>,
    pub proj_bias: Tensor<F>,
}

impl<F: Real> AttnParams<F> {
    fn new(rng: &mut impl Rng, dim: usize) -> Self {
        AttnParams {
            wq: uniform_param(rng, vec![dim, dim], dim),
            bq: uniform_param(rng, vec![1, dim], dim),
            wk: uniform_param(rng, vec![dim, dim], dim),
            bk: uniform_param(rng, vec![1, dim], dim),
            wv: uniform_param(rng, vec![dim, dim], dim),
            bv: uniform_param(rng, vec![1, dim], dim),
            proj: uniform_param(rng, vec![dim, dim], dim),
            proj_bias: uniform_param(rng, vec![1, dim], dim),
        }
    }
}

struct Block<F: Real> {
    norm1_gamma: Tensor<F>,
    norm1_beta: Tensor<F>,
    attn: AttnParams<F>,
    /// `[(2M−1)² × heads]`, zero-initialized so a fresh encoder scores
    /// exactly as a bias-free one.
    rel_bias: Option<Tensor<F>>,
    norm2_gamma: Tensor<F>,
    norm2_beta: Tensor<F>,
    mlp_w1: Tensor<F>,
    mlp_b1: Tensor<F>,
    mlp_w2: Tensor<F>,
    mlp_b2: Tensor<F>,
}

struct Stage<F: Real> {
    blocks: Vec<Block<F>>,
    /// 4D → 2D projection applied after this stage (absent on the last).
    merge: Option<(Tensor<F>, Tensor<F>)>,
}

/// Precomputed index maps and masks for one stage.
struct StageLayout<F: Real> {
    grid: usize,
    heads: usize,
    shift: usize,
    partition: Vec<usize>,
    reverse: Vec<usize>,
    shift_map: Vec<usize>,
    unshift_map: Vec<usize>,
    rel_index: Vec<usize>,
    /// Per window: additive mask for shifted blocks, `None` when no pair in
    /// that window crosses a wrap boundary.
    masks: Vec<Option<Tensor<F>>>,
}

pub struct Encoder<F: Real = f32> {
    cfg: EncoderConfig,
    patch_w: Tensor<F>,
    patch_b: Tensor<F>,
    stages: Vec<Stage<F>>,
    layouts: Vec<StageLayout<F>>,
    patch_map: Vec<usize>,
}

impl<F: Real> Encoder<F> {
    pub fn new(cfg: EncoderConfig, rng: &mut impl Rng) -> Result<Self, EncoderError> {
        cfg.validate()?;
        let patch_in = 3 * cfg.patch_size * cfg.patch_size;
        let patch_w = uniform_param(rng, vec![patch_in, cfg.embed_dim], patch_in);
        let patch_b = uniform_param(rng, vec![1, cfg.embed_dim], patch_in);

        let m = cfg.window_size;
        let mut stages = Vec::new();
        for (s, &(blocks, heads)) in cfg.stages.iter().enumerate() {
            let dim = cfg.stage_dim(s);
            let hidden = cfg.mlp_hidden(s);
            let mut blocks_v = Vec::new();
            for _ in 0..blocks {
                blocks_v.push(Block {
                    norm1_gamma: ones_param(vec![1, dim]),
                    norm1_beta: zeros_param(vec![1, dim]),
                    attn: AttnParams::new(rng, dim),
                    rel_bias: cfg
                        .use_relative_bias
                        .then(|| zeros_param(vec![(2 * m - 1) * (2 * m - 1), heads])),
                    norm2_gamma: ones_param(vec![1, dim]),
                    norm2_beta: zeros_param(vec![1, dim]),
                    mlp_w1: uniform_param(rng, vec![dim, hidden], dim),
                    mlp_b1: uniform_param(rng, vec![1, hidden], dim),
                    mlp_w2: uniform_param(rng, vec![hidden, dim], hidden),
                    mlp_b2: uniform_param(rng, vec![1, dim], hidden),
                });
            }
            let merge = (s + 1 < cfg.stages.len())
                .then(|| {
                    (
                        uniform_param(rng, vec![4 * dim, 2 * dim], 4 * dim),
                        uniform_param(rng, vec![1, 2 * dim], 4 * dim),
                    )
                });
            stages.push(Stage {
                blocks: blocks_v,
                merge,
            });
        }

        let layouts = (0..cfg.stages.len())
            .map(|s| Self::build_layout(&cfg, s))
            .collect();
        Ok(Encoder {
            patch_map: patch_indices(cfg.image_size, cfg.patch_size),
            cfg,
            patch_w,
            patch_b,
            stages,
            layouts,
        })
    }

    fn build_layout(cfg: &EncoderConfig, stage: usize) -> StageLayout<F> {
        let grid = cfg.stage_grid(stage);
        let m = cfg.window_size;
        // Shifting a grid that is a single window only relabels positions;
        // follow the usual convention and skip the shift entirely.
        let shift = if grid > m { m / 2 } else { 0 };
        let partition = window_partition_indices(grid, m);
        let reverse = window_reverse_indices(grid, m);
        let masks = if shift > 0 {
            let ids = shift_region_ids(grid, shift);
            let windows = (grid / m) * (grid / m);
            (0..windows)
                .map(|w| {
                    let tokens = &partition[w * m * m..(w + 1) * m * m];
                    let mut any = false;
                    let mut data = vec![F::zero(); m * m * m * m];
                    for (i, &p) in tokens.iter().enumerate() {
                        for (j, &q) in tokens.iter().enumerate() {
                            if ids[p] != ids[q] {
                                data[i * m * m + j] = F::from_f64(MASK_NEG);
                                any = true;
                            }
                        }
                    }
                    any.then(|| Tensor::new(vec![m * m, m * m], data).expect("mask shape"))
                })
                .collect()
        } else {
            vec![None; (grid / m) * (grid / m)]
        };
        StageLayout {
            grid,
            heads: cfg.stages[stage].1,
            shift,
            partition,
            reverse,
            shift_map: cyclic_shift_indices(grid, shift),
            unshift_map: cyclic_shift_indices(grid, (grid - shift) % grid),
            rel_index: relative_bias_indices(m),
            masks,
        }
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.cfg
    }

    /// Embed the image's non-overlapping patches: one token per patch.
    /// The image is data, not a differentiated input — gradients flow to the
    /// projection only.
    pub fn patch_embed(&self, image: &Tensor<F>) -> Result<Tensor<F>, EncoderError> {
        let s = self.cfg.image_size;
        if image.shape() != [3, s, s] {
            return Err(EncoderError::BadImage {
                expected: vec![3, s, s],
                got: image.shape().to_vec(),
            });
        }
        let p = self.cfg.patch_size;
        let data = image.data();
        let mut rows = Vec::with_capacity(self.patch_map.len());
        for &src in &self.patch_map {
            rows.push(data[src]);
        }
        drop(data);
        let grid = s / p;
        let patches = Tensor::new(vec![grid * grid, 3 * p * p], rows)?;
        Ok(linear(&patches, &self.patch_w, &self.patch_b)?)
    }

    /// Full forward pass: `3×S×S` image to the final `L×D` feature grid.
    pub fn encode(&self, image: &Tensor<F>) -> Result<EncoderOutput<F>, EncoderError> {
        let mut x = self.patch_embed(image)?;
        for (s, stage) in self.stages.iter().enumerate() {
            let lay = &self.layouts[s];
            for (b, block) in stage.blocks.iter().enumerate() {
                let shifted = lay.shift > 0 && b % 2 == 1;
                let normed = x.layer_norm(&block.norm1_gamma, &block.norm1_beta, LAYER_NORM_EPS)?;
                let attended = self.windowed_attention(&normed, block, lay, shifted)?;
                x = x.add(&attended)?;
                let normed = x.layer_norm(&block.norm2_gamma, &block.norm2_beta, LAYER_NORM_EPS)?;
                let h = linear(&normed, &block.mlp_w1, &block.mlp_b1)?.gelu();
                let h = linear(&h, &block.mlp_w2, &block.mlp_b2)?;
                x = x.add(&h)?;
            }
            if let Some((w, b)) = &stage.merge {
                let gathered = x.gather_rows(&merge_indices(lay.grid))?;
                let half = lay.grid / 2;
                let dim = x.shape()[1];
                let merged = gathered.reshape(vec![half * half, 4 * dim])?;
                x = linear(&merged, w, b)?;
            }
        }
        let grid = self.cfg.out_grid();
        Ok(EncoderOutput {
            features: x,
            grid_h: grid,
            grid_w: grid,
        })
    }

    fn windowed_attention(
        &self,
        x: &Tensor<F>,
        block: &Block<F>,
        lay: &StageLayout<F>,
        shifted: bool,
    ) -> Result<Tensor<F>, EncoderError> {
        let m = self.cfg.window_size;
        let rolled = if shifted {
            x.gather_rows(&lay.shift_map)?
        } else {
            x.clone()
        };
        let part = rolled.gather_rows(&lay.partition)?;

        // Per-head bias matrices, shared by all windows of the block.
        let rel_bias: Option<Vec<Tensor<F>>> = match &block.rel_bias {
            Some(table) => {
                let rows = table.gather_rows(&lay.rel_index)?;
                let mut per_head = Vec::with_capacity(lay.heads);
                for h in 0..lay.heads {
                    per_head.push(rows.slice_cols(h, h + 1)?.reshape(vec![m * m, m * m])?);
                }
                Some(per_head)
            }
            None => None,
        };

        let windows = (lay.grid / m) * (lay.grid / m);
        let mut outs = Vec::with_capacity(windows);
        for w in 0..windows {
            let tokens = part.slice_rows(w * m * m, (w + 1) * m * m)?;
            let mask = if shifted { lay.masks[w].as_ref() } else { None };
            let (out, _probs) =
                window_mha(&tokens, &block.attn, lay.heads, rel_bias.as_deref(), mask)?;
            outs.push(out);
        }
        let merged = Tensor::concat(&outs, 0)?;
        let restored = merged.gather_rows(&lay.reverse)?;
        Ok(if shifted {
            restored.gather_rows(&lay.unshift_map)?
        } else {
            restored
        })
    }

    /// All trainable tensors with stable hierarchical names.
    pub fn named_params(&self) -> Vec<(String, Tensor<F>)> {
        let mut out = vec![
            ("encoder.patch_embed.weight".to_string(), self.patch_w.clone()),
            ("encoder.patch_embed.bias".to_string(), self.patch_b.clone()),
        ];
        for (s, stage) in self.stages.iter().enumerate() {
            for (b, blk) in stage.blocks.iter().enumerate() {
                let p = format!("encoder.stages.{s}.blocks.{b}");
                let mut push = |suffix: &str, t: &Tensor<F>| {
                    out.push((format!("{p}.{suffix}"), t.clone()));
                };
                push("norm1.gamma", &blk.norm1_gamma);
                push("norm1.beta", &blk.norm1_beta);
                push("attn.wq", &blk.attn.wq);
                push("attn.bq", &blk.attn.bq);
                push("attn.wk", &blk.attn.wk);
                push("attn.bk", &blk.attn.bk);
                push("attn.wv", &blk.attn.wv);
                push("attn.bv", &blk.attn.bv);
                push("attn.proj", &blk.attn.proj);
                push("attn.proj_bias", &blk.attn.proj_bias);
                if let Some(rb) = &blk.rel_bias {
                    push("attn.rel_bias", rb);
                }
                push("norm2.gamma", &blk.norm2_gamma);
                push("norm2.beta", &blk.norm2_beta);
                push("mlp.w1", &blk.mlp_w1);
                push("mlp.b1", &blk.mlp_b1);
                push("mlp.w2", &blk.mlp_w2);
                push("mlp.b2", &blk.mlp_b2);
            }
            if let Some((w, b)) = &stage.merge {
                out.push((format!("encoder.stages.{s}.merge.weight"), w.clone()));
                out.push((format!("encoder.stages.{s}.merge.bias"), b.clone()));
            }
        }
        out
    }
}

/// Multi-head self-attention inside one window.
///
/// Scores are scaled by `1/√(D/heads)`; `rel_bias` (per head) and `mask` are
/// added to the scores before the row softmax. Returns the projected output
/// and the per-head attention matrices.
pub(crate) fn window_mha<F: Real>(
    tokens: &Tensor<F>,
    p: &AttnParams<F>,
    heads: usize,
    rel_bias: Option<&[Tensor<F>]>,
    mask: Option<&Tensor<F>>,
) -> Result<(Tensor<F>, Vec<Tensor<F>>), TensorError> {
    let dim = tokens.shape()[1];
    let dh = dim / heads;
    let scale = F::from_f64(1.0 / (dh as f64).sqrt());
    let q = linear(tokens, &p.wq, &p.bq)?;
    let k = linear(tokens, &p.wk, &p.bk)?;
    let v = linear(tokens, &p.wv, &p.bv)?;

    let mut head_outs = Vec::with_capacity(heads);
    let mut head_probs = Vec::with_capacity(heads);
    for h in 0..heads {
        let (lo, hi) = (h * dh, (h + 1) * dh);
        let qh = q.slice_cols(lo, hi)?;
        let kh = k.slice_cols(lo, hi)?;
        let vh = v.slice_cols(lo, hi)?;
        let mut scores = qh.matmul(&kh.transpose()?)?.scale(scale);
        if let Some(bias) = rel_bias {
            scores = scores.add(&bias[h])?;
        }
        if let Some(mask) = mask {
            scores = scores.add(mask)?;
        }
        let probs = scores.softmax(1)?;
        head_outs.push(probs.matmul(&vh)?);
        head_probs.push(probs);
    }
    let concat = Tensor::concat(&head_outs, 1)?;
    Ok((linear(&concat, &p.proj, &p.proj_bias)?, head_probs))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{seeded_rng, uniform_vec};
    use crate::tensor::gradcheck::{check_gradients, Tolerance};

    fn toy_config() -> EncoderConfig {
        EncoderConfig {
            image_size: 32,
            patch_size: 4,
            embed_dim: 32,
            stages: vec![(2, 2)],
            window_size: 4,
            ..EncoderConfig::default()
        }
    }

    fn rand_image<F: Real>(seed: u64, size: usize) -> Tensor<F> {
        let mut rng = seeded_rng(seed);
        Tensor::new(
            vec![3, size, size],
            uniform_vec(&mut rng, 3 * size * size, -1.0, 1.0),
        )
        .unwrap()
    }

    #[test]
    fn config_validation_catches_each_violation() {
        assert!(EncoderConfig::default().validate().is_ok());
        let bad = EncoderConfig {
            image_size: 30,
            ..toy_config()
        };
        assert!(matches!(
            bad.validate(),
            Err(EncoderError::IndivisiblePatch { .. })
        ));
        let bad = EncoderConfig {
            window_size: 3,
            ..toy_config()
        };
        assert!(matches!(
            bad.validate(),
            Err(EncoderError::IndivisibleWindow { .. })
        ));
        let bad = EncoderConfig {
            stages: vec![(2, 5)],
            ..toy_config()
        };
        assert!(matches!(
            bad.validate(),
            Err(EncoderError::IndivisibleHeads { .. })
        ));
        let bad = EncoderConfig {
            stages: vec![],
            ..toy_config()
        };
        assert!(matches!(bad.validate(), Err(EncoderError::NoStages)));
    }

    #[test]
    fn window_partition_maps_tokens_to_expected_windows() {
        let (grid, m) = (4, 2);
        let part = window_partition_indices(grid, m);
        assert_eq!(part.len(), 16); // 4 windows × 4 tokens
        for (pos, &src) in part.iter().enumerate() {
            let (w, off) = (pos / (m * m), pos % (m * m));
            let (r, c) = (src / grid, src % grid);
            assert_eq!(w, (r / m) * (grid / m) + c / m);
            assert_eq!(off, (r % m) * m + c % m);
        }
        // Reverse really is the inverse permutation.
        let rev = window_reverse_indices(grid, m);
        for i in 0..16 {
            assert_eq!(part[rev[i]], i);
            assert_eq!(rev[part[i]], i);
        }
    }

    #[test]
    fn cyclic_shift_roundtrip_and_movement() {
        let grid = 5;
        for s in 0..grid {
            let fwd = cyclic_shift_indices(grid, s);
            let back = cyclic_shift_indices(grid, (grid - s) % grid);
            // Element at (r, c) must appear at ((r−s) mod g, (c−s) mod g).
            for r in 0..grid {
                for c in 0..grid {
                    let dst = ((r + grid - s) % grid) * grid + (c + grid - s) % grid;
                    assert_eq!(fwd[dst], r * grid + c);
                }
            }
            // Shift then unshift is the identity.
            for i in 0..grid * grid {
                assert_eq!(fwd[back[i]], i);
            }
        }
        assert_eq!(cyclic_shift_indices(4, 0), (0..16).collect::<Vec<_>>());
    }

    #[test]
    fn patch_indices_match_direct_extraction() {
        let (size, patch) = (8, 4);
        let idx = patch_indices(size, patch);
        assert_eq!(idx.len(), 4 * 3 * 16); // 4 patches × 48 values
        // Patch row p, channel-major layout, against direct coordinates.
        for (out_pos, &src) in idx.iter().enumerate() {
            let per_patch = 3 * patch * patch;
            let p = out_pos / per_patch;
            let within = out_pos % per_patch;
            let c = within / (patch * patch);
            let dr = (within % (patch * patch)) / patch;
            let dc = within % patch;
            let (pr, pc) = (p / (size / patch), p % (size / patch));
            assert_eq!(src, c * size * size + (pr * patch + dr) * size + pc * patch + dc);
        }
    }

    #[test]
    fn merge_indices_collect_2x2_neighborhoods() {
        let idx = merge_indices(4);
        assert_eq!(idx.len(), 16);
        assert_eq!(&idx[0..4], &[0, 1, 4, 5]); // top-left neighborhood
        assert_eq!(&idx[12..16], &[10, 11, 14, 15]); // bottom-right
    }

    #[test]
    fn relative_bias_index_is_centered_and_in_range() {
        let m = 3;
        let idx = relative_bias_indices(m);
        let span = 2 * m - 1;
        assert_eq!(idx.len(), 81);
        assert!(idx.iter().all(|&i| i < span * span));
        // Self-offset (0,0) hits the table center for every diagonal pair.
        for q in 0..m * m {
            assert_eq!(idx[q * m * m + q], (m - 1) * span + (m - 1));
        }
    }

    #[test]
    fn toy_shape_contract_and_determinism() {
        let mut rng = seeded_rng(5);
        let enc: Encoder<f32> = Encoder::new(toy_config(), &mut rng).unwrap();
        let image = rand_image(1, 32);
        let out = enc.encode(&image).unwrap();
        assert_eq!(out.features.shape(), &[64, 32]);
        assert_eq!((out.grid_h, out.grid_w), (8, 8));

        let mut rng2 = seeded_rng(5);
        let enc2: Encoder<f32> = Encoder::new(toy_config(), &mut rng2).unwrap();
        let out2 = enc2.encode(&image).unwrap();
        assert_eq!(out.features.to_vec(), out2.features.to_vec());

        let mut rng3 = seeded_rng(6);
        let enc3: Encoder<f32> = Encoder::new(toy_config(), &mut rng3).unwrap();
        assert_ne!(out.features.to_vec(), enc3.encode(&image).unwrap().features.to_vec());
    }

    #[test]
    fn two_stage_config_halves_grid_and_doubles_width() {
        let cfg = EncoderConfig {
            image_size: 32,
            patch_size: 4,
            embed_dim: 8,
            stages: vec![(2, 2), (2, 4)],
            window_size: 4,
            ..EncoderConfig::default()
        };
        let mut rng = seeded_rng(2);
        let enc: Encoder<f32> = Encoder::new(cfg, &mut rng).unwrap();
        let out = enc.encode(&rand_image(3, 32)).unwrap();
        assert_eq!(out.features.shape(), &[16, 16]); // grid 8→4, width 8→16
    }

    #[test]
    fn zero_image_tokens_equal_projection_bias() {
        let mut rng = seeded_rng(9);
        let enc: Encoder<f32> = Encoder::new(toy_config(), &mut rng).unwrap();
        let zero = Tensor::zeros(vec![3, 32, 32]);
        let tokens = enc.patch_embed(&zero).unwrap();
        let bias = enc.patch_b.to_vec();
        for row in tokens.to_vec().chunks(32) {
            assert_eq!(row, &bias[..]);
        }
    }

    #[test]
    fn one_hot_pixel_changes_exactly_one_token() {
        let mut rng = seeded_rng(9);
        let enc: Encoder<f32> = Encoder::new(toy_config(), &mut rng).unwrap();
        let zero_tokens = enc.patch_embed(&Tensor::zeros(vec![3, 32, 32])).unwrap();
        let mut img = vec![0.0f32; 3 * 32 * 32];
        // Pixel (row 13, col 22) in channel 1 belongs to patch (3, 5).
        img[32 * 32 + 13 * 32 + 22] = 1.0;
        let tokens = enc
            .patch_embed(&Tensor::new(vec![3, 32, 32], img).unwrap())
            .unwrap();
        let changed: Vec<usize> = tokens
            .to_vec()
            .chunks(32)
            .zip(zero_tokens.to_vec().chunks(32))
            .enumerate()
            .filter(|(_, (a, b))| a != b)
            .map(|(i, _)| i)
            .collect();
        assert_eq!(changed, vec![3 * 8 + 5]);
    }

    #[test]
    fn constant_image_yields_identical_feature_rows() {
        // Every patch sees the same content, and window attention is a convex
        // combination, so all rows must stay equal through the whole stack.
        let mut rng = seeded_rng(21);
        let enc: Encoder<f32> = Encoder::new(toy_config(), &mut rng).unwrap();
        let img = Tensor::new(vec![3, 32, 32], vec![0.37; 3 * 32 * 32]).unwrap();
        let out = enc.encode(&img).unwrap();
        let v = out.features.to_vec();
        let first = &v[..32];
        for row in v.chunks(32) {
            for (a, b) in row.iter().zip(first) {
                assert!((a - b).abs() < 1e-5, "rows diverged: {a} vs {b}");
            }
        }
    }

    #[test]
    fn attention_rows_sum_to_one_and_identical_tokens_stay_identical() {
        let mut rng = seeded_rng(3);
        let p: AttnParams<f64> = AttnParams::new(&mut rng, 8);
        let row: Vec<f64> = uniform_vec(&mut rng, 8, -1.0, 1.0);
        let tokens =
            Tensor::new(vec![4, 8], row.iter().cycle().take(32).copied().collect()).unwrap();
        let (out, probs) = window_mha(&tokens, &p, 2, None, None).unwrap();
        for mat in &probs {
            for prow in mat.to_vec().chunks(4) {
                let s: f64 = prow.iter().sum();
                assert!((s - 1.0).abs() < 1e-6);
                assert!(prow.iter().all(|&x| x >= 0.0));
            }
        }
        let out_v = out.to_vec();
        let first = &out_v[..8];
        for orow in out_v.chunks(8) {
            for (a, b) in orow.iter().zip(first) {
                assert!((a - b).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn mask_suppresses_attention_below_threshold() {
        let mut rng = seeded_rng(4);
        let p: AttnParams<f64> = AttnParams::new(&mut rng, 4);
        let tokens = Tensor::new(vec![4, 4], uniform_vec(&mut rng, 16, -1.0, 1.0)).unwrap();
        let mut mask = vec![0.0f64; 16];
        mask[1] = MASK_NEG; // token 0 must not see token 1
        mask[4] = MASK_NEG; // token 1 must not see token 0
        let mask = Tensor::new(vec![4, 4], mask).unwrap();
        let (_, probs) = window_mha(&tokens, &p, 1, None, Some(&mask)).unwrap();
        let m = probs[0].to_vec();
        assert!(m[1] < 1e-6);
        assert!(m[4] < 1e-6);
        // Direct-softmax oracle on the masked scores for row 0.
        let sums: f64 = m[0] + m[2] + m[3];
        assert!((sums - 1.0).abs() < 1e-6);
    }

    #[test]
    fn zero_relative_bias_is_a_bitwise_no_op() {
        let mut rng = seeded_rng(8);
        let p: AttnParams<f64> = AttnParams::new(&mut rng, 4);
        let tokens = Tensor::new(vec![4, 4], uniform_vec(&mut rng, 16, -1.0, 1.0)).unwrap();
        let zero_bias = vec![Tensor::zeros(vec![4, 4])];
        let (with, _) = window_mha(&tokens, &p, 1, Some(&zero_bias), None).unwrap();
        let (without, _) = window_mha(&tokens, &p, 1, None, None).unwrap();
        assert_eq!(with.to_vec(), without.to_vec());
    }

    #[test]
    fn shifted_masks_match_region_adjacency_oracle() {
        let cfg = EncoderConfig {
            image_size: 8,
            patch_size: 2,
            embed_dim: 4,
            stages: vec![(2, 2)],
            window_size: 2,
            ..EncoderConfig::default()
        };
        let mut rng = seeded_rng(1);
        let enc: Encoder<f64> = Encoder::new(cfg, &mut rng).unwrap();
        let lay = &enc.layouts[0];
        assert_eq!(lay.shift, 1);
        let ids = shift_region_ids(lay.grid, lay.shift);
        for (w, mask) in lay.masks.iter().enumerate() {
            let tokens = &lay.partition[w * 4..(w + 1) * 4];
            for (i, &pi) in tokens.iter().enumerate() {
                for (j, &pj) in tokens.iter().enumerate() {
                    let blocked = match mask {
                        Some(m) => m.to_vec()[i * 4 + j] != 0.0,
                        None => false,
                    };
                    assert_eq!(blocked, ids[pi] != ids[pj]);
                }
            }
        }
        // The wrap-corner window must carry a mask at grid 4, shift 1.
        assert!(lay.masks.iter().any(|m| m.is_some()));
    }

    #[test]
    fn gradcheck_through_one_stage_encoder() {
        let cfg = EncoderConfig {
            image_size: 8,
            patch_size: 2,
            embed_dim: 4,
            stages: vec![(2, 2)],
            window_size: 2,
            ..EncoderConfig::default()
        };
        let mut rng = seeded_rng(77);
        let enc: Encoder<f64> = Encoder::new(cfg, &mut rng).unwrap();
        let image = rand_image::<f64>(78, 8);
        let proj = Tensor::new(vec![16, 4], uniform_vec(&mut rng, 64, -1.0, 1.0)).unwrap();
        let params: Vec<Tensor<f64>> =
            enc.named_params().into_iter().map(|(_, t)| t).collect();
        check_gradients(
            "encoder/1stage",
            &params,
            || {
                enc.encode(&image)
                    .unwrap()
                    .features
                    .mul(&proj)
                    .unwrap()
                    .sum_all()
            },
            Tolerance::COMPOSED,
        )
        .unwrap();
    }
}
