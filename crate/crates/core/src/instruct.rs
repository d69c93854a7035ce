//! Stage-2 instruction tuning: dialogue packing with response-only
//! supervision, the tuning loss, and greedy decoding for evaluation.

use thiserror::Error;

use crate::lm::{argmax_last_row, encode_text, LmVars, TextError, TokenSequence, BOS, EOS, SEP};
use crate::model::ModelVars;
use crate::objectives::caption_nll;
use crate::tensor::{Result as TResult, Tape, Tensor, Var};
use crate::vision::ImageTensor;

#[derive(Debug, Error)]
pub enum DialogueError {
    #[error("turn {turn} has an empty response")]
    EmptyResponse { turn: usize },
    #[error("dialogue has no turns")]
    NoTurns,
    #[error(transparent)]
    Text(#[from] TextError),
    #[error("packed dialogue malformed at position {pos}: {what}")]
    Malformed { pos: usize, what: String },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DialogueTurn {
    pub query: String,
    pub response: String,
}

/// One instruction-tuning sample: an image (blank for text-only
/// dialogues) plus ordered query/response turns.
#[derive(Debug, Clone)]
pub struct DialogueSample {
    pub image: ImageTensor,
    pub turns: Vec<DialogueTurn>,
}

/// Token layout of a packed dialogue:
/// BOS, then per turn: SEP, query bytes, SEP, response bytes, EOS.
/// The loss mask is true exactly on response bytes and each turn's EOS.
#[derive(Debug, Clone, PartialEq)]
pub struct PackedDialogue {
    seq: TokenSequence,
}

impl PackedDialogue {
    pub fn tokens(&self) -> &TokenSequence {
        &self.seq
    }

    pub fn len(&self) -> usize {
        self.seq.len()
    }

    pub fn is_empty(&self) -> bool {
        self.seq.is_empty()
    }

    pub fn unmasked_count(&self) -> usize {
        self.seq.loss_mask().iter().filter(|m| **m).count()
    }

    /// A copy with every position after BOS supervised, used by the
    /// mask-equivalence cross-check against the generative loss.
    pub fn with_full_supervision(&self) -> TokenSequence {
        let mut seq = self.seq.clone();
        for (pos, m) in seq.loss_mask_mut().iter_mut().enumerate() {
            *m = pos != 0;
        }
        seq
    }
}

pub fn pack_dialogue(turns: &[DialogueTurn]) -> Result<PackedDialogue, DialogueError> {
    if turns.is_empty() {
        return Err(DialogueError::NoTurns);
    }
    let mut ids = vec![BOS];
    let mut loss_mask = vec![false];
    for (i, turn) in turns.iter().enumerate() {
        if turn.response.is_empty() {
            return Err(DialogueError::EmptyResponse { turn: i });
        }
        let q = encode_text(&turn.query)?;
        let r = encode_text(&turn.response)?;
        ids.push(SEP);
        loss_mask.push(false);
        ids.extend_from_slice(&q);
        loss_mask.extend(std::iter::repeat(false).take(q.len()));
        ids.push(SEP);
        loss_mask.push(false);
        ids.extend_from_slice(&r);
        loss_mask.extend(std::iter::repeat(true).take(r.len()));
        ids.push(EOS);
        loss_mask.push(true);
    }
    let pad_mask = vec![false; ids.len()];
    let seq = TokenSequence::new(ids, pad_mask, loss_mask, 256)?;
    Ok(PackedDialogue { seq })
}

/// Inverse of [`pack_dialogue`]: recovers the turns from the layout.
pub fn unpack_dialogue(packed: &PackedDialogue) -> Result<Vec<DialogueTurn>, DialogueError> {
    let ids = packed.seq.ids();
    if ids.first() != Some(&BOS) {
        return Err(DialogueError::Malformed { pos: 0, what: "missing BOS".into() });
    }
    let mut turns = Vec::new();
    let mut pos = 1;
    while pos < ids.len() {
        if ids[pos] != SEP {
            return Err(DialogueError::Malformed { pos, what: "expected SEP before query".into() });
        }
        pos += 1;
        let q_start = pos;
        while pos < ids.len() && ids[pos] != SEP {
            pos += 1;
        }
        if pos >= ids.len() {
            return Err(DialogueError::Malformed { pos, what: "query not terminated".into() });
        }
        let query = crate::lm::decode_text(&ids[q_start..pos]);
        pos += 1;
        let r_start = pos;
        while pos < ids.len() && ids[pos] != EOS {
            pos += 1;
        }
        if pos >= ids.len() {
            return Err(DialogueError::Malformed { pos, what: "response not terminated".into() });
        }
        let response = crate::lm::decode_text(&ids[r_start..pos]);
        pos += 1;
        turns.push(DialogueTurn { query, response });
    }
    Ok(turns)
}

/// Response-only tuning loss: mean NLL over the unmasked positions of
/// one packed dialogue, conditioned on the visual prefix and all
/// preceding text. Per-sample normalization; callers average over the
/// batch.
pub fn tune_loss(vars: &ModelVars, tape: &Tape, features: &Tensor, packed: &PackedDialogue) -> TResult<Var> {
    let z = vars.project_features(tape, features)?;
    let n = z.shape()[0];
    let logits = vars.lm.forward_multimodal(Some(&z), packed.seq.ids())?;
    caption_nll(&logits, n, &packed.seq)
}

pub const DECODE_MAX_LEN: usize = 128;

/// Greedy decode of a response given a visual prefix and prompt token
/// ids (the prompt must end at the position where the response
/// starts). Deterministic: argmax with lowest-id tie break; stops at
/// EOS or after `DECODE_MAX_LEN` generated tokens.
pub fn greedy_decode_ids(
    lm: &LmVars,
    visual: Option<&Var>,
    prompt: &[usize],
) -> TResult<Vec<usize>> {
    let mut ids = prompt.to_vec();
    let mut generated = Vec::new();
    for _ in 0..DECODE_MAX_LEN {
        let capacity = lm.config.max_seq - visual.map_or(0, |z| z.shape()[0]);
        if ids.len() >= capacity {
            break;
        }
        let logits = lm.forward_multimodal(visual, &ids)?;
        let next = argmax_last_row(&logits.value());
        if next == EOS {
            break;
        }
        ids.push(next);
        generated.push(next);
    }
    Ok(generated)
}

/// Decodes an answer to `query` given image features, conditioning on
/// any `history` of completed turns. Returns the decoded response
/// text.
pub fn greedy_decode(
    vars: &ModelVars,
    tape: &Tape,
    features: &Tensor,
    history: &[DialogueTurn],
    query: &str,
) -> Result<String, DialogueError> {
    let z = vars
        .project_features(tape, features)
        .expect("projector width matches cached features");
    let mut prompt = vec![BOS];
    for turn in history {
        prompt.push(SEP);
        prompt.extend(encode_text(&turn.query)?);
        prompt.push(SEP);
        prompt.extend(encode_text(&turn.response)?);
        prompt.push(EOS);
    }
    prompt.push(SEP);
    prompt.extend(encode_text(query)?);
    prompt.push(SEP);
    let generated = greedy_decode_ids(&vars.lm, Some(&z), &prompt)
        .expect("decode forward uses validated ids");
    Ok(crate::lm::decode_text(&generated))
}
