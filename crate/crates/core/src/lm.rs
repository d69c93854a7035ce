//! Toy decoder-only language model with a byte-level vocabulary.
//!
//! The model conditions next-token predictions on an optional visual
//! prefix: projected patch features are concatenated in front of the
//! token embeddings along the sequence axis, and a causal mask covers
//! the full concatenated length.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::attention::{causal_mask, BlockVars, TransformerBlock, LN_EPS};
use crate::init;
use crate::tensor::{Result as TResult, Tape, Tensor, TensorError, Var};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const SEP: usize = 3;
/// First non-special token id; byte b maps to token id b.
pub const FIRST_CONTENT: usize = 4;

/// True for caption/response bytes, false for PAD/BOS/EOS/SEP.
pub fn is_content(id: usize) -> bool {
    id >= FIRST_CONTENT
}

#[derive(Debug, Error)]
pub enum TextError {
    #[error("text byte {byte:#04x} collides with the reserved special-token range")]
    ReservedByte { byte: u8 },
    #[error("token id {id} exceeds vocabulary size {vocab}")]
    IdOutOfVocab { id: usize, vocab: usize },
    #[error("padded position {pos} must have loss_mask = false")]
    PaddedLossPosition { pos: usize },
    #[error("mask length {len} does not match ids length {ids}")]
    MaskLength { len: usize, ids: usize },
}

/// Byte-level encoding: token id == byte value. Bytes 0..=3 are
/// reserved for the special tokens and rejected.
pub fn encode_text(text: &str) -> Result<Vec<usize>, TextError> {
    text.bytes()
        .map(|b| {
            if (b as usize) < FIRST_CONTENT {
                Err(TextError::ReservedByte { byte: b })
            } else {
                Ok(b as usize)
            }
        })
        .collect()
}

/// Inverse of [`encode_text`]; special tokens are dropped.
pub fn decode_text(ids: &[usize]) -> String {
    let bytes: Vec<u8> = ids
        .iter()
        .filter(|&&id| is_content(id) && id < 256)
        .map(|&id| id as u8)
        .collect();
    String::from_utf8_lossy(&bytes).into_owned()
}

/// A tokenized text with padding and loss masks.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenSequence {
    ids: Vec<usize>,
    pad_mask: Vec<bool>,
    loss_mask: Vec<bool>,
}

impl TokenSequence {
    pub fn new(
        ids: Vec<usize>,
        pad_mask: Vec<bool>,
        loss_mask: Vec<bool>,
        vocab: usize,
    ) -> Result<Self, TextError> {
        if pad_mask.len() != ids.len() {
            return Err(TextError::MaskLength { len: pad_mask.len(), ids: ids.len() });
        }
        if loss_mask.len() != ids.len() {
            return Err(TextError::MaskLength { len: loss_mask.len(), ids: ids.len() });
        }
        for &id in &ids {
            if id >= vocab {
                return Err(TextError::IdOutOfVocab { id, vocab });
            }
        }
        for (pos, (&padded, &in_loss)) in pad_mask.iter().zip(&loss_mask).enumerate() {
            if padded && in_loss {
                return Err(TextError::PaddedLossPosition { pos });
            }
        }
        Ok(Self { ids, pad_mask, loss_mask })
    }

    /// Caption layout: BOS, text bytes, EOS; the loss covers the bytes
    /// and the EOS, never the BOS.
    pub fn caption(text: &str) -> Result<Self, TextError> {
        let body = encode_text(text)?;
        let mut ids = Vec::with_capacity(body.len() + 2);
        ids.push(BOS);
        ids.extend_from_slice(&body);
        ids.push(EOS);
        let mut loss_mask = vec![true; ids.len()];
        loss_mask[0] = false;
        let pad_mask = vec![false; ids.len()];
        Ok(Self { ids, pad_mask, loss_mask })
    }

    pub fn ids(&self) -> &[usize] {
        &self.ids
    }

    pub fn pad_mask(&self) -> &[bool] {
        &self.pad_mask
    }

    pub fn loss_mask(&self) -> &[bool] {
        &self.loss_mask
    }

    pub fn loss_mask_mut(&mut self) -> &mut [bool] {
        &mut self.loss_mask
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Indices of content (non-special, non-pad) positions.
    pub fn content_positions(&self) -> Vec<usize> {
        self.ids
            .iter()
            .enumerate()
            .filter(|&(pos, &id)| is_content(id) && !self.pad_mask[pos])
            .map(|(pos, _)| pos)
            .collect()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct LmConfig {
    pub vocab: usize,
    pub width: usize,
    pub blocks: usize,
    pub heads: usize,
    pub max_seq: usize,
}

impl Default for LmConfig {
    fn default() -> Self {
        Self { vocab: 256, width: 32, blocks: 3, heads: 4, max_seq: 256 }
    }
}

/// Decoder-only language model; output head is tied to the embedding
/// table.
#[derive(Debug, Clone)]
pub struct LanguageModel {
    pub config: LmConfig,
    embed: Tensor,
    pos: Tensor,
    blocks: Vec<TransformerBlock>,
    ln_f_g: Tensor,
    ln_f_b: Tensor,
}

const INIT_STD: f64 = 0.02;

impl LanguageModel {
    pub fn init(rng: &mut ChaCha8Rng, config: LmConfig) -> Self {
        let embed = init::normal(rng, vec![config.vocab, config.width], INIT_STD);
        let pos = init::normal(rng, vec![config.max_seq, config.width], INIT_STD);
        // Fan-in-scaled blocks give the attention meaningful mixing
        // from step one; the tied embedding table stays small so the
        // untrained head is still near uniform.
        let block_std = 1.0 / (config.width as f64).sqrt();
        let blocks = (0..config.blocks)
            .map(|_| TransformerBlock::init(rng, config.width, config.heads, block_std))
            .collect();
        Self {
            ln_f_g: init::ones(vec![config.width]),
            ln_f_b: init::zeros(vec![config.width]),
            config,
            embed,
            pos,
            blocks,
        }
    }

    pub fn bind(&self, tape: &Tape, trainable: bool) -> LmVars {
        let leaf = |t: &Tensor| tape.leaf(&t.clone().with_requires_grad(trainable));
        LmVars {
            tape: tape.clone(),
            config: self.config.clone(),
            embed: leaf(&self.embed),
            pos: leaf(&self.pos),
            blocks: self.blocks.iter().map(|b| b.bind(tape, trainable)).collect(),
            ln_f_g: leaf(&self.ln_f_g),
            ln_f_b: leaf(&self.ln_f_b),
        }
    }

    pub fn visit(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        f("lm.embed", &self.embed);
        f("lm.pos", &self.pos);
        for (i, b) in self.blocks.iter().enumerate() {
            b.visit(&format!("lm.block{i}"), f);
        }
        f("lm.ln_f.g", &self.ln_f_g);
        f("lm.ln_f.b", &self.ln_f_b);
    }

    pub fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        f("lm.embed", &mut self.embed);
        f("lm.pos", &mut self.pos);
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit_mut(&format!("lm.block{i}"), f);
        }
        f("lm.ln_f.g", &mut self.ln_f_g);
        f("lm.ln_f.b", &mut self.ln_f_b);
    }
}

/// Tape-bound language model.
pub struct LmVars {
    tape: Tape,
    pub config: LmConfig,
    pub embed: Var,
    pos: Var,
    blocks: Vec<BlockVars>,
    ln_f_g: Var,
    ln_f_b: Var,
}

impl LmVars {
    /// Embedding lookup: one table row per token id.
    pub fn embed_tokens(&self, ids: &[usize]) -> TResult<Var> {
        self.embed.gather_rows(ids)
    }

    /// Logits over the concatenated sequence [visual; tokens].
    ///
    /// Row `p` of the result scores the token at position `p + 1` of
    /// the concatenation, so with `n` visual rows the prediction for
    /// text position `j` (0-based within `ids`) lives at row `n+j-1`.
    pub fn forward_multimodal(&self, visual: Option<&Var>, ids: &[usize]) -> TResult<Var> {
        let embedded = self.embed_tokens(ids)?;
        self.forward_from_rows(visual, &embedded)
    }

    /// Same as [`forward_multimodal`](Self::forward_multimodal) but
    /// over pre-embedded text rows.
    pub fn forward_from_rows(&self, visual: Option<&Var>, embedded: &Var) -> TResult<Var> {
        let seq = match visual {
            Some(z) => {
                if z.shape()[1] != self.config.width {
                    return Err(TensorError::ShapeMismatch {
                        op: "forward_multimodal",
                        left: z.shape().to_vec(),
                        right: vec![embedded.shape()[0], self.config.width],
                    });
                }
                Var::concat_rows(&[z.clone(), embedded.clone()])?
            }
            None => embedded.clone(),
        };
        let total = seq.shape()[0];
        if total > self.config.max_seq {
            return Err(TensorError::IndexOutOfBounds {
                op: "forward_multimodal",
                index: total,
                size: self.config.max_seq,
            });
        }
        // Positions run 0..total over the concatenation; visual rows
        // share the learned positional table with text.
        let positions: Vec<usize> = (0..total).collect();
        let pos = self.pos.gather_rows(&positions)?;
        let mut x = seq.add(&pos)?;

        let mask = causal_mask(&self.tape, total);
        for block in &self.blocks {
            x = block.forward(&x, Some(&mask))?;
        }
        let h = x.layer_norm(&self.ln_f_g, &self.ln_f_b, LN_EPS)?;
        h.matmul(&self.embed.transpose()?)
    }

    pub fn visit(&self, f: &mut dyn FnMut(&str, &Var)) {
        f("lm.embed", &self.embed);
        f("lm.pos", &self.pos);
        for (i, b) in self.blocks.iter().enumerate() {
            b.visit(&format!("lm.block{i}"), f);
        }
        f("lm.ln_f.g", &self.ln_f_g);
        f("lm.ln_f.b", &self.ln_f_b);
    }
}

/// Per-position log p(x_j | visual, x_<j) from a logits matrix.
///
/// Entry `j - 1` of the result is the log-probability of `ids[j]`
/// under logits row `n_visual + j - 1`. Computed with a stable
/// log-softmax independent of the fused cross-entropy op.
pub fn next_token_logprobs(logits: &Tensor, n_visual: usize, ids: &[usize]) -> Vec<f64> {
    let cols = logits.cols();
    let mut out = Vec::with_capacity(ids.len().saturating_sub(1));
    for j in 1..ids.len() {
        let row_idx = n_visual + j - 1;
        let row = &logits.data()[row_idx * cols..(row_idx + 1) * cols];
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        out.push(row[ids[j]] - lse);
    }
    out
}

/// Greedy next-token choice from the last logits row; ties resolve to
/// the lowest id.
pub fn argmax_last_row(logits: &Tensor) -> usize {
    let cols = logits.cols();
    let rows = logits.rows();
    let row = &logits.data()[(rows - 1) * cols..rows * cols];
    let mut best = 0;
    let mut best_v = f64::NEG_INFINITY;
    for (i, &v) in row.iter().enumerate() {
        if v > best_v {
            best_v = v;
            best = i;
        }
    }
    best
}
