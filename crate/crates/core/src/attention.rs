//! Pre-norm transformer block shared by the patch encoder and the
//! decoder language model. The block is bidirectional unless an
//! additive attention mask is supplied.

use rand_chacha::ChaCha8Rng;

use crate::init;
use crate::tensor::{Result, Tape, Tensor, Var};

pub const LN_EPS: f64 = 1e-5;
/// Additive mask value for disallowed attention links. Large enough
/// that exp underflows to exactly 0.0 after max subtraction, keeping
/// causality bit-exact, while every intermediate stays finite.
pub const MASK_NEG: f64 = -1e30;

/// Parameters of one block: attention + MLP, each behind a layer norm.
#[derive(Debug, Clone)]
pub struct TransformerBlock {
    pub ln1_g: Tensor,
    pub ln1_b: Tensor,
    pub wq: Tensor,
    pub bq: Tensor,
    pub wk: Tensor,
    pub bk: Tensor,
    pub wv: Tensor,
    pub bv: Tensor,
    pub wo: Tensor,
    pub bo: Tensor,
    pub ln2_g: Tensor,
    pub ln2_b: Tensor,
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
    pub heads: usize,
}

impl TransformerBlock {
    /// Seeded block with gaussian weights of the given std and a
    /// 4x-wide GELU MLP.
    pub fn init(rng: &mut ChaCha8Rng, width: usize, heads: usize, std: f64) -> Self {
        assert!(width % heads == 0, "width must divide by heads");
        let hidden = 4 * width;
        Self {
            ln1_g: init::ones(vec![width]),
            ln1_b: init::zeros(vec![width]),
            wq: init::normal(rng, vec![width, width], std),
            bq: init::zeros(vec![width]),
            wk: init::normal(rng, vec![width, width], std),
            bk: init::zeros(vec![width]),
            wv: init::normal(rng, vec![width, width], std),
            bv: init::zeros(vec![width]),
            wo: init::normal(rng, vec![width, width], std),
            bo: init::zeros(vec![width]),
            ln2_g: init::ones(vec![width]),
            ln2_b: init::zeros(vec![width]),
            w1: init::normal(rng, vec![width, hidden], std),
            b1: init::zeros(vec![hidden]),
            w2: init::normal(rng, vec![hidden, width], std),
            b2: init::zeros(vec![width]),
            heads,
        }
    }

    pub fn bind(&self, tape: &Tape, trainable: bool) -> BlockVars {
        let leaf = |t: &Tensor| tape.leaf(&t.clone().with_requires_grad(trainable));
        BlockVars {
            ln1_g: leaf(&self.ln1_g),
            ln1_b: leaf(&self.ln1_b),
            wq: leaf(&self.wq),
            bq: leaf(&self.bq),
            wk: leaf(&self.wk),
            bk: leaf(&self.bk),
            wv: leaf(&self.wv),
            bv: leaf(&self.bv),
            wo: leaf(&self.wo),
            bo: leaf(&self.bo),
            ln2_g: leaf(&self.ln2_g),
            ln2_b: leaf(&self.ln2_b),
            w1: leaf(&self.w1),
            b1: leaf(&self.b1),
            w2: leaf(&self.w2),
            b2: leaf(&self.b2),
            heads: self.heads,
        }
    }

    pub fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        for (name, t) in self.named() {
            f(&format!("{prefix}.{name}"), t);
        }
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        let names: Vec<String> = FIELDS.iter().map(|n| format!("{prefix}.{n}")).collect();
        for (name, t) in names.iter().zip(self.named_mut()) {
            f(name, t);
        }
    }

    fn named(&self) -> Vec<(&'static str, &Tensor)> {
        vec![
            ("ln1.g", &self.ln1_g),
            ("ln1.b", &self.ln1_b),
            ("attn.wq", &self.wq),
            ("attn.bq", &self.bq),
            ("attn.wk", &self.wk),
            ("attn.bk", &self.bk),
            ("attn.wv", &self.wv),
            ("attn.bv", &self.bv),
            ("attn.wo", &self.wo),
            ("attn.bo", &self.bo),
            ("ln2.g", &self.ln2_g),
            ("ln2.b", &self.ln2_b),
            ("mlp.w1", &self.w1),
            ("mlp.b1", &self.b1),
            ("mlp.w2", &self.w2),
            ("mlp.b2", &self.b2),
        ]
    }

    fn named_mut(&mut self) -> Vec<&mut Tensor> {
        vec![
            &mut self.ln1_g,
            &mut self.ln1_b,
            &mut self.wq,
            &mut self.bq,
            &mut self.wk,
            &mut self.bk,
            &mut self.wv,
            &mut self.bv,
            &mut self.wo,
            &mut self.bo,
            &mut self.ln2_g,
            &mut self.ln2_b,
            &mut self.w1,
            &mut self.b1,
            &mut self.w2,
            &mut self.b2,
        ]
    }
}

const FIELDS: [&str; 16] = [
    "ln1.g", "ln1.b", "attn.wq", "attn.bq", "attn.wk", "attn.bk", "attn.wv", "attn.bv",
    "attn.wo", "attn.bo", "ln2.g", "ln2.b", "mlp.w1", "mlp.b1", "mlp.w2", "mlp.b2",
];

/// Tape-bound block parameters.
pub struct BlockVars {
    pub ln1_g: Var,
    pub ln1_b: Var,
    pub wq: Var,
    pub bq: Var,
    pub wk: Var,
    pub bk: Var,
    pub wv: Var,
    pub bv: Var,
    pub wo: Var,
    pub bo: Var,
    pub ln2_g: Var,
    pub ln2_b: Var,
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
    heads: usize,
}

impl BlockVars {
    /// x + attn(ln(x)) followed by x + mlp(ln(x)); `mask` is an
    /// additive [T x T] score offset (e.g. a causal mask).
    pub fn forward(&self, x: &Var, mask: Option<&Var>) -> Result<Var> {
        let width = x.shape()[1];
        let dk = width / self.heads;
        let scale = 1.0 / (dk as f64).sqrt();

        let h = x.layer_norm(&self.ln1_g, &self.ln1_b, LN_EPS)?;
        let q = h.matmul(&self.wq)?.add_row(&self.bq)?;
        let k = h.matmul(&self.wk)?.add_row(&self.bk)?;
        let v = h.matmul(&self.wv)?.add_row(&self.bv)?;

        let mut head_outs = Vec::with_capacity(self.heads);
        for i in 0..self.heads {
            let qh = q.slice_cols(i * dk, dk)?;
            let kh = k.slice_cols(i * dk, dk)?;
            let vh = v.slice_cols(i * dk, dk)?;
            let mut scores = qh.matmul(&kh.transpose()?)?.scale(scale);
            if let Some(m) = mask {
                scores = scores.add(m)?;
            }
            let weights = scores.softmax(1)?;
            head_outs.push(weights.matmul(&vh)?);
        }
        let merged = Var::concat_cols(&head_outs)?;
        let attn_out = merged.matmul(&self.wo)?.add_row(&self.bo)?;
        let x = x.add(&attn_out)?;

        let h2 = x.layer_norm(&self.ln2_g, &self.ln2_b, LN_EPS)?;
        let mlp = h2
            .matmul(&self.w1)?
            .add_row(&self.b1)?
            .gelu()
            .matmul(&self.w2)?
            .add_row(&self.b2)?;
        x.add(&mlp)
    }

    pub fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Var)) {
        let vars = [
            &self.ln1_g, &self.ln1_b, &self.wq, &self.bq, &self.wk, &self.bk, &self.wv,
            &self.bv, &self.wo, &self.bo, &self.ln2_g, &self.ln2_b, &self.w1, &self.b1,
            &self.w2, &self.b2,
        ];
        for (name, v) in FIELDS.iter().zip(vars) {
            f(&format!("{prefix}.{name}"), v);
        }
    }
}

/// Additive causal mask: position t may attend to positions <= t.
pub fn causal_mask(tape: &Tape, len: usize) -> Var {
    let mut data = vec![0.0; len * len];
    for r in 0..len {
        for c in (r + 1)..len {
            data[r * len + c] = MASK_NEG;
        }
    }
    tape.constant(&Tensor::new(vec![len, len], data).expect("square mask"))
}
