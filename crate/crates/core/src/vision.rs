//! Frozen patch encoder: patchifies images and produces patch-wise
//! features from the penultimate block of a small seeded transformer.
//! The encoder stands in for a pre-trained backbone — it is initialized
//! once from the run seed and never receives gradient updates.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::attention::{BlockVars, TransformerBlock};
use crate::init;
use crate::tensor::{Result as TResult, Tape, Tensor, Var};

#[derive(Debug, Error)]
pub enum VisionError {
    #[error("image {h}x{w} is not divisible into {patch}x{patch} patches; no implicit resize")]
    NonDivisible { h: usize, w: usize, patch: usize },
    #[error("image data length {len} does not match 3x{h}x{w}")]
    DataLength { len: usize, h: usize, w: usize },
    #[error("pixel value {value} outside [0, 1]")]
    PixelRange { value: f64 },
    #[error("patch count {patches} exceeds encoder capacity {max}")]
    TooManyPatches { patches: usize, max: usize },
}

/// A dense 3xHxW image with intensities in [0, 1], channel-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl ImageTensor {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self, VisionError> {
        if data.len() != 3 * height * width {
            return Err(VisionError::DataLength { len: data.len(), h: height, w: width });
        }
        for &v in &data {
            if !(0.0..=1.0).contains(&v) {
                return Err(VisionError::PixelRange { value: v });
            }
        }
        Ok(Self { height, width, data })
    }

    /// The all-zero placeholder used for text-only samples.
    pub fn blank(height: usize, width: usize) -> Self {
        Self { height, width, data: vec![0.0; 3 * height * width] }
    }

    pub fn is_blank(&self) -> bool {
        self.data.iter().all(|&v| v == 0.0)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[c * self.height * self.width + y * self.width + x]
    }

    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f64) {
        self.data[c * self.height * self.width + y * self.width + x] = v;
    }
}

/// Row-major grid of flattened patches; each row is one patch laid out
/// channel-major (c, dy, dx).
#[derive(Debug, Clone, PartialEq)]
pub struct PatchSequence {
    patches: Tensor,
    grid_h: usize,
    grid_w: usize,
    patch_size: usize,
}

impl PatchSequence {
    pub fn count(&self) -> usize {
        self.grid_h * self.grid_w
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.grid_h, self.grid_w)
    }

    pub fn patch_size(&self) -> usize {
        self.patch_size
    }

    /// N x (3*U*U) matrix of flattened patches.
    pub fn matrix(&self) -> &Tensor {
        &self.patches
    }

    /// Reorders patch rows; used by the equivariance checks.
    pub fn permuted(&self, order: &[usize]) -> Self {
        let cols = self.patches.cols();
        let mut data = Vec::with_capacity(self.patches.numel());
        for &r in order {
            data.extend_from_slice(&self.patches.data()[r * cols..(r + 1) * cols]);
        }
        Self {
            patches: Tensor::new(vec![order.len(), cols], data).expect("same layout"),
            grid_h: self.grid_h,
            grid_w: self.grid_w,
            patch_size: self.patch_size,
        }
    }
}

/// Splits an image into non-overlapping U x U patches, row-major over
/// the patch grid. Lossless: [`unpatchify`] reconstructs the image.
pub fn patchify(image: &ImageTensor, patch_size: usize) -> Result<PatchSequence, VisionError> {
    let (h, w) = (image.height, image.width);
    if patch_size == 0 || h % patch_size != 0 || w % patch_size != 0 {
        return Err(VisionError::NonDivisible { h, w, patch: patch_size });
    }
    let grid_h = h / patch_size;
    let grid_w = w / patch_size;
    let u = patch_size;
    let mut data = Vec::with_capacity(grid_h * grid_w * 3 * u * u);
    for gy in 0..grid_h {
        for gx in 0..grid_w {
            for c in 0..3 {
                for dy in 0..u {
                    for dx in 0..u {
                        data.push(image.get(c, gy * u + dy, gx * u + dx));
                    }
                }
            }
        }
    }
    Ok(PatchSequence {
        patches: Tensor::new(vec![grid_h * grid_w, 3 * u * u], data).expect("counted layout"),
        grid_h,
        grid_w,
        patch_size,
    })
}

/// Reassembles the image a [`patchify`] call came from, bit-exactly.
pub fn unpatchify(patches: &PatchSequence) -> ImageTensor {
    let u = patches.patch_size;
    let (grid_h, grid_w) = (patches.grid_h, patches.grid_w);
    let (h, w) = (grid_h * u, grid_w * u);
    let mut img = ImageTensor::blank(h, w);
    let cols = patches.patches.cols();
    for gy in 0..grid_h {
        for gx in 0..grid_w {
            let row = &patches.patches.data()[(gy * grid_w + gx) * cols..][..cols];
            for c in 0..3 {
                for dy in 0..u {
                    for dx in 0..u {
                        img.set(c, gy * u + dy, gx * u + dx, row[c * u * u + dy * u + dx]);
                    }
                }
            }
        }
    }
    img
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct EncoderConfig {
    pub feature_width: usize,
    pub blocks: usize,
    pub heads: usize,
    pub patch_size: usize,
    pub max_patches: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self { feature_width: 32, blocks: 3, heads: 4, patch_size: 14, max_patches: 16 }
    }
}

impl EncoderConfig {
    pub fn patch_dim(&self) -> usize {
        3 * self.patch_size * self.patch_size
    }
}

/// Patch-wise features tapped from the penultimate encoder block.
pub struct PatchFeatures {
    pub features: Var,
    /// 1-based index of the block whose output was tapped.
    pub layer_index: usize,
}

/// Frozen toy transformer encoder over patch sequences.
///
/// Positional embeddings are a learned table zero-initialized and, the
/// encoder being frozen, they stay zero: features depend on patch
/// content alone, which the permutation-equivariance checks rely on.
#[derive(Debug, Clone)]
pub struct VisionEncoder {
    pub config: EncoderConfig,
    patch_w: Tensor,
    patch_b: Tensor,
    pos: Tensor,
    blocks: Vec<TransformerBlock>,
}

impl VisionEncoder {
    pub fn init(rng: &mut ChaCha8Rng, config: EncoderConfig) -> Self {
        assert!(config.blocks >= 2, "penultimate tap needs at least 2 blocks");
        let d = config.feature_width;
        let patch_dim = config.patch_dim();
        Self {
            patch_w: init::fanin_uniform(rng, vec![patch_dim, d], patch_dim),
            patch_b: init::zeros(vec![d]),
            pos: init::zeros(vec![config.max_patches, d]),
            blocks: (0..config.blocks)
                .map(|_| {
                    // Conservative block init keeps the frozen features
                    // close to the patch projection, so each tapped row
                    // mostly reflects its own patch content.
                    TransformerBlock::init(rng, d, config.heads, 0.02)
                })
                .collect(),
            config,
        }
    }

    pub fn bind(&self, tape: &Tape) -> EncoderVars {
        // The encoder is frozen in both stages: leaves never require
        // gradients, so their accumulators stay empty after backward.
        let leaf = |t: &Tensor| tape.leaf(&t.clone().with_requires_grad(false));
        EncoderVars {
            tape: tape.clone(),
            config: self.config.clone(),
            patch_w: leaf(&self.patch_w),
            patch_b: leaf(&self.patch_b),
            pos: leaf(&self.pos),
            blocks: self.blocks.iter().map(|b| b.bind(tape, false)).collect(),
        }
    }

    pub fn visit(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        f("enc.patch.w", &self.patch_w);
        f("enc.patch.b", &self.patch_b);
        f("enc.pos", &self.pos);
        for (i, b) in self.blocks.iter().enumerate() {
            b.visit(&format!("enc.block{i}"), f);
        }
    }

    pub fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        f("enc.patch.w", &mut self.patch_w);
        f("enc.patch.b", &mut self.patch_b);
        f("enc.pos", &mut self.pos);
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit_mut(&format!("enc.block{i}"), f);
        }
    }

    /// One-off encoding outside any caller-owned tape; used to cache
    /// features for frozen images.
    pub fn encode_tensor(&self, patches: &PatchSequence) -> Result<Tensor, VisionError> {
        let tape = Tape::new();
        let vars = self.bind(&tape);
        let out = vars.encode(patches)?;
        Ok(out.features.value())
    }
}

pub struct EncoderVars {
    tape: Tape,
    pub config: EncoderConfig,
    patch_w: Var,
    patch_b: Var,
    pos: Var,
    blocks: Vec<BlockVars>,
}

impl EncoderVars {
    /// Features from the penultimate block: with L blocks, the first
    /// L-1 run and the output of block L-1 is returned.
    pub fn encode(&self, patches: &PatchSequence) -> Result<PatchFeatures, VisionError> {
        let n = patches.count();
        if n > self.config.max_patches {
            return Err(VisionError::TooManyPatches { patches: n, max: self.config.max_patches });
        }
        let run = || -> TResult<Var> {
            let input = self.tape.constant(patches.matrix());
            let positions: Vec<usize> = (0..n).collect();
            let pos = self.pos.gather_rows(&positions)?;
            let mut x = input
                .matmul(&self.patch_w)?
                .add_row(&self.patch_b)?
                .add(&pos)?;
            for block in &self.blocks[..self.config.blocks - 1] {
                x = block.forward(&x, None)?;
            }
            Ok(x)
        };
        let features = run().expect("encoder shapes are internally consistent");
        Ok(PatchFeatures { features, layer_index: self.config.blocks - 1 })
    }

    pub fn visit(&self, f: &mut dyn FnMut(&str, &Var)) {
        f("enc.patch.w", &self.patch_w);
        f("enc.patch.b", &self.patch_b);
        f("enc.pos", &self.pos);
        for (i, b) in self.blocks.iter().enumerate() {
            b.visit(&format!("enc.block{i}"), f);
        }
    }
}
