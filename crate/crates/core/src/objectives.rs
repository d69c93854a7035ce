//! Stage-1 alignment losses.
//!
//! The generative loss is the mean next-token NLL of a caption
//! conditioned on the projected visual prefix. The contrastive loss
//! scores every image descriptor against every caption in the batch —
//! an image-sentence similarity is the average scaled cosine between
//! the pooled patch descriptor and each content-token embedding — and
//! applies an InfoNCE objective over the rows of that matrix, image as
//! anchor. The combined loss is `gen + alpha * con`.

use crate::lm::{LmVars, TokenSequence};
use crate::model::ModelVars;
use crate::tensor::{Result as TResult, Tape, Tensor, TensorError, Var};

/// Pooled image descriptor: the arithmetic mean over the projected
/// patch rows. The gradient distributes 1/N to every row.
pub fn pool_descriptor(z: &Var) -> TResult<Var> {
    z.mean_rows()
}

/// Scaled cosine similarity between two vectors:
/// tau * (u . v) / (|u| |v|). Errors on a zero-norm operand rather
/// than silently returning 0.
pub fn scaled_cosine(u: &Var, v: &Var, tau: &Var) -> TResult<Var> {
    let uu = u.mul(u)?.sum_all();
    let vv = v.mul(v)?.sum_all();
    if uu.item() == 0.0 || vv.item() == 0.0 {
        return Err(TensorError::DegenerateInput {
            op: "scaled_cosine",
            what: "zero-norm vector".to_string(),
        });
    }
    let dot = u.mul(v)?.sum_all();
    let cos = dot.div(&uu.sqrt().mul(&vv.sqrt())?)?;
    cos.mul(tau)
}

/// Image-sentence similarity s^{i,j}: the mean scaled cosine between
/// one image descriptor and each content-token embedding of one
/// caption. Special and padded tokens are excluded from the average.
///
/// The per-token terms are accumulated in value-sorted order, so the
/// result is bit-identical under caption token permutation.
pub fn image_sentence_similarity(
    descriptor: &Var,
    embeddings: &Var,
    content_positions: &[usize],
    tau: &Var,
) -> TResult<Var> {
    if content_positions.is_empty() {
        return Err(TensorError::DegenerateInput {
            op: "image_sentence_similarity",
            what: "caption has no content tokens".to_string(),
        });
    }
    let width = descriptor.numel();
    let mut terms: Vec<Var> = Vec::with_capacity(content_positions.len());
    for &pos in content_positions {
        let row = embeddings.gather_rows(&[pos])?.reshape(vec![width])?;
        terms.push(scaled_cosine(descriptor, &row, tau)?);
    }
    terms.sort_by(|a, b| a.item().total_cmp(&b.item()));
    let mut acc = terms[0].clone();
    for t in &terms[1..] {
        acc = acc.add(t)?;
    }
    Ok(acc.scale(1.0 / content_positions.len() as f64))
}

/// One caption's unit-norm code: content-token embedding rows are
/// L2-normalized and averaged. Combined with a normalized descriptor,
/// a plain dot product times tau reproduces s^{i,j}.
fn caption_code(embeddings: &Var, content_positions: &[usize]) -> TResult<Var> {
    if content_positions.is_empty() {
        return Err(TensorError::DegenerateInput {
            op: "caption_code",
            what: "caption has no content tokens".to_string(),
        });
    }
    let rows = embeddings.gather_rows(content_positions)?;
    let unit = rows.normalize_rows()?;
    unit.mean_rows()
}

/// Batched B x B similarity matrix: entry (i, j) is s^{i,j} between
/// image i's descriptor and caption j.
pub fn similarity_matrix(
    descriptors: &[Var],
    captions: &[(Var, Vec<usize>)],
    tau: &Var,
) -> TResult<Var> {
    if descriptors.is_empty() || descriptors.len() != captions.len() {
        return Err(TensorError::ShapeMismatch {
            op: "similarity_matrix",
            left: vec![descriptors.len()],
            right: vec![captions.len()],
        });
    }
    let width = descriptors[0].numel();
    let image_rows: Vec<Var> = descriptors
        .iter()
        .map(|d| d.reshape(vec![1, width])?.normalize_rows())
        .collect::<TResult<_>>()?;
    let caption_rows: Vec<Var> = captions
        .iter()
        .map(|(e, content)| caption_code(e, content)?.reshape(vec![1, width]))
        .collect::<TResult<_>>()?;
    let z = Var::concat_rows(&image_rows)?;
    let c = Var::concat_rows(&caption_rows)?;
    z.matmul(&c.transpose()?)?.mul_scalar(tau)
}

/// InfoNCE over the rows of a similarity matrix, image as anchor:
/// -(1/B) sum_b log softmax(S[b, :])[b], via stable log-softmax.
pub fn contrastive_loss_from_matrix(s: &Var) -> TResult<Var> {
    let shape = s.shape();
    if shape.len() != 2 || shape[0] != shape[1] {
        return Err(TensorError::BadRank {
            op: "contrastive_loss",
            expected: "a square similarity matrix",
            got: shape,
        });
    }
    let b = shape[0];
    let log_probs = s.log_softmax_rows()?;
    let diag = diagonal_mask(s, b);
    Ok(log_probs.mul(&diag)?.sum_all().scale(-1.0 / b as f64))
}

fn diagonal_mask(on_tape_with: &Var, b: usize) -> Var {
    let mut eye = vec![0.0; b * b];
    for i in 0..b {
        eye[i * b + i] = 1.0;
    }
    on_tape_with.constant_like(&Tensor::new(vec![b, b], eye).expect("square"))
}

/// Contrastive alignment loss over a batch of (descriptor, caption
/// embedding + content positions) pairs. `symmetric` adds the
/// caption-as-anchor direction and halves the sum; the default
/// one-directional form uses images as anchors only.
pub fn contrastive_loss(
    descriptors: &[Var],
    captions: &[(Var, Vec<usize>)],
    tau: &Var,
    symmetric: bool,
) -> TResult<Var> {
    let s = similarity_matrix(descriptors, captions, tau)?;
    let image_anchor = contrastive_loss_from_matrix(&s)?;
    if symmetric {
        let caption_anchor = contrastive_loss_from_matrix(&s.transpose()?)?;
        Ok(image_anchor.add(&caption_anchor)?.scale(0.5))
    } else {
        Ok(image_anchor)
    }
}

/// The literal positive-fraction value of the batch similarity matrix,
/// (1/B) sum_b softmax(S[b, :])[b] — no log, no negation. Logged per
/// step for inspection alongside the InfoNCE loss that is optimized.
pub fn contrastive_literal_value(s: &Tensor) -> f64 {
    let b = s.rows();
    let mut total = 0.0;
    for r in 0..b {
        let row = &s.data()[r * b..(r + 1) * b];
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let denom: f64 = row.iter().map(|v| (v - max).exp()).sum();
        total += (row[r] - max).exp() / denom;
    }
    total / b as f64
}

/// Mean next-token NLL of a caption given `n_visual` prefix rows.
/// Logits row `n_visual + j - 1` scores caption token `j`; the loss
/// mask covers caption tokens and EOS, never BOS or visual positions.
pub fn caption_nll(logits: &Var, n_visual: usize, tokens: &TokenSequence) -> TResult<Var> {
    let t = tokens.len();
    if t < 2 {
        return Err(TensorError::EmptyLoss);
    }
    let rows = logits.slice_rows(n_visual, t - 1)?;
    rows.cross_entropy(&tokens.ids()[1..], &tokens.loss_mask()[1..])
}

/// Generative alignment loss: full forward through the language model
/// with the projected visual prefix, then caption NLL.
pub fn generative_alignment_loss(
    lm: &LmVars,
    visual: Option<&Var>,
    caption: &TokenSequence,
) -> TResult<Var> {
    let n = visual.map_or(0, |z| z.shape()[0]);
    let logits = lm.forward_multimodal(visual, caption.ids())?;
    caption_nll(&logits, n, caption)
}

/// One prepared alignment sample: cached frozen patch features plus
/// the tokenized caption. `has_image` is false for blank-image
/// (text-only) samples, which are excluded from the contrastive term.
#[derive(Debug, Clone)]
pub struct AlignSample {
    pub features: Tensor,
    pub caption: TokenSequence,
    pub has_image: bool,
}

/// Per-step scalars of the combined objective.
#[derive(Debug, Clone, Copy)]
pub struct AlignmentLossReport {
    pub gen_loss: f64,
    pub con_loss: f64,
    pub cg_loss: f64,
    pub alpha: f64,
    pub tau: f64,
    /// The log-free positive-fraction reading of the batch matrix.
    pub con_literal: f64,
}

/// The three stage-1 loss terms as live tape nodes; any of them can
/// serve as the backward root depending on the configured objective.
pub struct CgLossTerms {
    pub gen: Var,
    pub con: Var,
    pub cg: Var,
}

/// Combined contrastive + generative loss over a batch.
///
/// Returns the loss terms and the report. With `alpha = 0` the
/// combined loss equals the generative loss exactly. Gradients reach
/// only the projector and the temperature when bound for stage 1.
pub fn cg_loss(
    tape: &Tape,
    vars: &ModelVars,
    batch: &[AlignSample],
    alpha: f64,
    symmetric: bool,
) -> TResult<(CgLossTerms, AlignmentLossReport)> {
    if batch.is_empty() {
        return Err(TensorError::EmptyInput { op: "cg_loss" });
    }
    let tau = vars.tau();
    let mut gen_sum: Option<Var> = None;
    let mut descriptors = Vec::new();
    let mut captions = Vec::new();

    for sample in batch {
        let z = vars.project_features(tape, &sample.features)?;
        let gen_i = generative_alignment_loss(&vars.lm, Some(&z), &sample.caption)?;
        gen_sum = Some(match gen_sum {
            Some(acc) => acc.add(&gen_i)?,
            None => gen_i,
        });
        if sample.has_image {
            descriptors.push(pool_descriptor(&z)?);
            let embeddings = vars.lm.embed_tokens(sample.caption.ids())?;
            captions.push((embeddings, sample.caption.content_positions()));
        }
    }
    let gen = gen_sum.expect("non-empty batch").scale(1.0 / batch.len() as f64);

    let (con, con_literal) = if descriptors.is_empty() {
        (tape.constant(&Tensor::scalar(0.0)), 0.0)
    } else {
        let s = similarity_matrix(&descriptors, &captions, &tau)?;
        let literal = contrastive_literal_value(&s.value());
        let loss = if symmetric {
            let a = contrastive_loss_from_matrix(&s)?;
            let b = contrastive_loss_from_matrix(&s.transpose()?)?;
            a.add(&b)?.scale(0.5)
        } else {
            contrastive_loss_from_matrix(&s)?
        };
        (loss, literal)
    };

    let cg = gen.add(&con.scale(alpha))?;
    let report = AlignmentLossReport {
        gen_loss: gen.item(),
        con_loss: con.item(),
        cg_loss: cg.item(),
        alpha,
        tau: tau.item(),
        con_literal,
    };
    Ok((CgLossTerms { gen, con, cg }, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::init::seeded_rng;
    use crate::model::{ModelConfig, Stage, VlmModel};
    use crate::tensor::fd::{check_grads, numeric_grads, scaled_err};
    use crate::vision::ImageTensor;
    use rand::prelude::*;

    fn vec_leaf(tape: &Tape, data: Vec<f64>) -> Var {
        tape.leaf(&Tensor::vector(data).with_requires_grad(true))
    }

    #[test]
    fn pool_identical_rows_returns_that_row() {
        let tape = Tape::new();
        let row = [0.5, -1.0, 2.0];
        let z = tape.constant(
            &Tensor::new(vec![4, 3], row.iter().cycle().take(12).cloned().collect()).unwrap(),
        );
        let d = pool_descriptor(&z).unwrap().value();
        assert_eq!(d.data(), &row);
    }

    #[test]
    fn pool_is_bit_exact_under_row_permutation() {
        let mut rng = seeded_rng(31);
        let data: Vec<f64> = (0..32).map(|_| rng.random_range(-3.0..3.0)).collect();
        let tape = Tape::new();
        let z = tape.constant(&Tensor::new(vec![4, 8], data.clone()).unwrap());
        let d = pool_descriptor(&z).unwrap().value();

        let order = [3usize, 0, 2, 1];
        let mut permuted = Vec::new();
        for &r in &order {
            permuted.extend_from_slice(&data[r * 8..(r + 1) * 8]);
        }
        let zp = tape.constant(&Tensor::new(vec![4, 8], permuted).unwrap());
        let dp = pool_descriptor(&zp).unwrap().value();
        assert_eq!(d.data(), dp.data());
    }

    #[test]
    fn pool_matches_loop_oracle() {
        let mut rng = seeded_rng(32);
        let data: Vec<f64> = (0..32).map(|_| rng.random_range(-3.0..3.0)).collect();
        let tape = Tape::new();
        let z = tape.constant(&Tensor::new(vec![4, 8], data.clone()).unwrap());
        let d = pool_descriptor(&z).unwrap().value();
        for c in 0..8 {
            let mut s = 0.0;
            for r in 0..4 {
                s += data[r * 8 + c];
            }
            assert!((d.data()[c] - s / 4.0).abs() <= 1e-15);
        }
    }

    #[test]
    fn pool_empty_input_errors() {
        let tape = Tape::new();
        let z = tape.constant(&Tensor::new(vec![0, 3], vec![]).unwrap());
        assert!(matches!(
            pool_descriptor(&z).unwrap_err(),
            TensorError::EmptyInput { .. }
        ));
    }

    #[test]
    fn scaled_cosine_identities() {
        let tape = Tape::new();
        let tau = tape.constant(&Tensor::scalar(7.25));
        let u = vec_leaf(&tape, vec![1.0, -2.0, 0.5]);
        let neg_u = u.neg();
        let same = scaled_cosine(&u, &u, &tau).unwrap().item();
        assert!((same - 7.25).abs() < 1e-12);
        let anti = scaled_cosine(&u, &neg_u, &tau).unwrap().item();
        assert!((anti + 7.25).abs() < 1e-12);

        let a = vec_leaf(&tape, vec![1.0, 0.0]);
        let b = vec_leaf(&tape, vec![0.0, 3.0]);
        let ortho = scaled_cosine(&a, &b, &tau).unwrap().item();
        assert!(ortho.abs() < 1e-12);
    }

    #[test]
    fn scaled_cosine_zero_norm_errors() {
        let tape = Tape::new();
        let tau = tape.constant(&Tensor::scalar(1.0));
        let u = vec_leaf(&tape, vec![0.0, 0.0]);
        let v = vec_leaf(&tape, vec![1.0, 1.0]);
        assert!(matches!(
            scaled_cosine(&u, &v, &tau).unwrap_err(),
            TensorError::DegenerateInput { .. }
        ));
    }

    #[test]
    fn similarity_single_token_equals_scaled_cosine() {
        let tape = Tape::new();
        let tau = tape.constant(&Tensor::scalar(3.0));
        let d = vec_leaf(&tape, vec![0.4, -0.2, 1.0]);
        let e = tape.constant(
            &Tensor::new(vec![1, 3], vec![1.0, 0.3, -0.5]).unwrap(),
        );
        let s = image_sentence_similarity(&d, &e, &[0], &tau).unwrap().item();
        let row = e.gather_rows(&[0]).unwrap().reshape(vec![3]).unwrap();
        let c = scaled_cosine(&d, &row, &tau).unwrap().item();
        assert_eq!(s, c);
    }

    #[test]
    fn similarity_bit_exact_under_token_permutation() {
        let mut rng = seeded_rng(33);
        let tape = Tape::new();
        let tau = tape.constant(&Tensor::scalar(2.0));
        let d = vec_leaf(&tape, (0..6).map(|_| rng.random_range(-1.0..1.0)).collect());
        let e_data: Vec<f64> = (0..5 * 6).map(|_| rng.random_range(-1.0..1.0)).collect();
        let e = tape.constant(&Tensor::new(vec![5, 6], e_data.clone()).unwrap());
        let s1 = image_sentence_similarity(&d, &e, &[0, 1, 2, 3, 4], &tau).unwrap().item();

        let order = [4usize, 2, 0, 3, 1];
        let mut permuted = Vec::new();
        for &r in &order {
            permuted.extend_from_slice(&e_data[r * 6..(r + 1) * 6]);
        }
        let ep = tape.constant(&Tensor::new(vec![5, 6], permuted).unwrap());
        let s2 = image_sentence_similarity(&d, &ep, &[0, 1, 2, 3, 4], &tau).unwrap().item();
        assert_eq!(s1, s2);
    }

    #[test]
    fn similarity_no_content_tokens_errors() {
        let tape = Tape::new();
        let tau = tape.constant(&Tensor::scalar(1.0));
        let d = vec_leaf(&tape, vec![1.0, 1.0]);
        let e = tape.constant(&Tensor::new(vec![2, 2], vec![1.0; 4]).unwrap());
        assert!(matches!(
            image_sentence_similarity(&d, &e, &[], &tau).unwrap_err(),
            TensorError::DegenerateInput { .. }
        ));
    }

    /// Double-loop scalar oracle for the batched similarity matrix.
    fn similarity_oracle(
        descriptors: &[Vec<f64>],
        captions: &[Vec<Vec<f64>>],
        tau: f64,
    ) -> Vec<Vec<f64>> {
        let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
        descriptors
            .iter()
            .map(|d| {
                captions
                    .iter()
                    .map(|tokens| {
                        let mut s = 0.0;
                        for e in tokens {
                            let dot: f64 = d.iter().zip(e).map(|(a, b)| a * b).sum();
                            s += tau * dot / (norm(d) * norm(e));
                        }
                        s / tokens.len() as f64
                    })
                    .collect()
            })
            .collect()
    }

    #[test]
    fn batched_similarity_matches_double_loop_oracle() {
        let mut rng = seeded_rng(34);
        let width = 6;
        let b = 3;
        let tau_v = 4.2;
        let descriptors: Vec<Vec<f64>> = (0..b)
            .map(|_| (0..width).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        let captions: Vec<Vec<Vec<f64>>> = (0..b)
            .map(|i| {
                (0..(i + 2))
                    .map(|_| (0..width).map(|_| rng.random_range(-1.0..1.0)).collect())
                    .collect()
            })
            .collect();

        let tape = Tape::new();
        let tau = tape.constant(&Tensor::scalar(tau_v));
        let d_vars: Vec<Var> = descriptors
            .iter()
            .map(|d| tape.constant(&Tensor::vector(d.clone())))
            .collect();
        let c_vars: Vec<(Var, Vec<usize>)> = captions
            .iter()
            .map(|tokens| {
                let rows = tokens.len();
                let flat: Vec<f64> = tokens.iter().flatten().cloned().collect();
                let e = tape.constant(&Tensor::new(vec![rows, width], flat).unwrap());
                (e, (0..rows).collect())
            })
            .collect();

        let s = similarity_matrix(&d_vars, &c_vars, &tau).unwrap().value();
        let expected = similarity_oracle(&descriptors, &captions, tau_v);
        for i in 0..b {
            for j in 0..b {
                assert!(
                    (s.at(i, j) - expected[i][j]).abs() <= 1e-12,
                    "S[{i}][{j}] = {} vs oracle {}",
                    s.at(i, j),
                    expected[i][j]
                );
            }
        }

        // Scalar-route op agrees with the batched matrix too.
        for i in 0..b {
            for j in 0..b {
                let sij = image_sentence_similarity(&d_vars[i], &c_vars[j].0, &c_vars[j].1, &tau)
                    .unwrap()
                    .item();
                assert!((s.at(i, j) - sij).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn contrastive_b1_is_exactly_zero() {
        let tape = Tape::new();
        let tau = tape.constant(&Tensor::scalar(5.0));
        let d = vec_leaf(&tape, vec![1.0, 2.0, 3.0]);
        let e = tape.constant(&Tensor::new(vec![2, 3], vec![0.5, 0.2, -1.0, 1.0, 1.0, 1.0]).unwrap());
        let loss = contrastive_loss(&[d], &[(e, vec![0, 1])], &tau, false).unwrap();
        assert_eq!(loss.item(), 0.0);
    }

    #[test]
    fn contrastive_uniform_matrix_is_ln_b() {
        // Duplicate pairs: every entry of S equal, softmax uniform.
        let tape = Tape::new();
        let tau = tape.constant(&Tensor::scalar(3.0));
        let d = Tensor::vector(vec![0.3, -0.7, 1.1]);
        let e = Tensor::new(vec![2, 3], vec![0.5, 0.2, -1.0, 0.9, -0.1, 0.4]).unwrap();
        let b = 4;
        let ds: Vec<Var> = (0..b).map(|_| tape.constant(&d)).collect();
        let cs: Vec<(Var, Vec<usize>)> = (0..b)
            .map(|_| (tape.constant(&e), vec![0, 1]))
            .collect();
        let loss = contrastive_loss(&ds, &cs, &tau, false).unwrap().item();
        assert!((loss - (b as f64).ln()).abs() < 1e-9);
    }

    /// Explicit exp/sum InfoNCE oracle over an S matrix.
    fn infonce_oracle(s: &[Vec<f64>]) -> f64 {
        let b = s.len();
        let mut total = 0.0;
        for i in 0..b {
            let denom: f64 = (0..b).map(|j| s[i][j].exp()).sum();
            total -= (s[i][i].exp() / denom).ln();
        }
        total / b as f64
    }

    #[test]
    fn contrastive_matches_loop_oracle_and_gradchecks() {
        let mut rng = seeded_rng(35);
        let width = 5;
        let b = 4;
        let m = 3;
        // Flat parameter layout: b descriptors, b caption matrices, tau.
        let descriptors: Vec<Tensor> = (0..b)
            .map(|_| Tensor::vector((0..width).map(|_| rng.random_range(-1.0..1.0)).collect()))
            .collect();
        let captions: Vec<Tensor> = (0..b)
            .map(|_| {
                Tensor::new(
                    vec![m, width],
                    (0..m * width).map(|_| rng.random_range(-1.0..1.0)).collect(),
                )
                .unwrap()
            })
            .collect();
        let tau0 = 2.5;

        // Value check against the explicit oracle.
        {
            let tape = Tape::new();
            let tau = tape.constant(&Tensor::scalar(tau0));
            let ds: Vec<Var> = descriptors.iter().map(|d| tape.constant(d)).collect();
            let cs: Vec<(Var, Vec<usize>)> = captions
                .iter()
                .map(|c| (tape.constant(c), (0..m).collect()))
                .collect();
            let s = similarity_matrix(&ds, &cs, &tau).unwrap().value();
            let s_rows: Vec<Vec<f64>> =
                (0..b).map(|i| (0..b).map(|j| s.at(i, j)).collect()).collect();
            let loss = contrastive_loss(&ds, &cs, &tau, false).unwrap().item();
            assert!((loss - infonce_oracle(&s_rows)).abs() <= 1e-10);
        }

        // Gradient check with respect to descriptors, embeddings, tau.
        let mut inputs = descriptors.clone();
        inputs.extend(captions.clone());
        inputs.push(Tensor::scalar(tau0));
        let err = check_grads(&inputs, |_, leaves| {
            let ds: Vec<Var> = leaves[..b].to_vec();
            let cs: Vec<(Var, Vec<usize>)> = leaves[b..2 * b]
                .iter()
                .map(|c| (c.clone(), (0..m).collect()))
                .collect();
            contrastive_loss(&ds, &cs, &leaves[2 * b], false).unwrap()
        });
        assert!(err < 1e-4, "contrastive grad err {err}");
    }

    #[test]
    fn batch_permutation_leaves_contrastive_unchanged() {
        let mut rng = seeded_rng(36);
        let width = 5;
        let b = 4;
        let tape = Tape::new();
        let tau = tape.constant(&Tensor::scalar(3.0));
        let ds: Vec<Var> = (0..b)
            .map(|_| vec_leaf(&tape, (0..width).map(|_| rng.random_range(-1.0..1.0)).collect()))
            .collect();
        let cs: Vec<(Var, Vec<usize>)> = (0..b)
            .map(|_| {
                let e = tape.constant(
                    &Tensor::new(
                        vec![2, width],
                        (0..2 * width).map(|_| rng.random_range(-1.0..1.0)).collect(),
                    )
                    .unwrap(),
                );
                (e, vec![0, 1])
            })
            .collect();
        let base = contrastive_loss(&ds, &cs, &tau, false).unwrap().item();

        let order = [2usize, 0, 3, 1];
        let dsp: Vec<Var> = order.iter().map(|&i| ds[i].clone()).collect();
        let csp: Vec<(Var, Vec<usize>)> = order.iter().map(|&i| cs[i].clone()).collect();
        let perm = contrastive_loss(&dsp, &csp, &tau, false).unwrap().item();
        assert!((base - perm).abs() <= 1e-12);
    }

    #[test]
    fn tau_scaling_by_power_of_two_scales_s_bit_exactly() {
        let mut rng = seeded_rng(37);
        let tape = Tape::new();
        let width = 4;
        let ds: Vec<Var> = (0..3)
            .map(|_| vec_leaf(&tape, (0..width).map(|_| rng.random_range(-1.0..1.0)).collect()))
            .collect();
        let cs: Vec<(Var, Vec<usize>)> = (0..3)
            .map(|_| {
                let e = tape.constant(
                    &Tensor::new(
                        vec![2, width],
                        (0..2 * width).map(|_| rng.random_range(-1.0..1.0)).collect(),
                    )
                    .unwrap(),
                );
                (e, vec![0, 1])
            })
            .collect();
        let tau1 = tape.constant(&Tensor::scalar(3.7));
        let tau2 = tape.constant(&Tensor::scalar(7.4));
        let s1 = similarity_matrix(&ds, &cs, &tau1).unwrap().value();
        let s2 = similarity_matrix(&ds, &cs, &tau2).unwrap().value();
        for (a, b) in s1.data().iter().zip(s2.data()) {
            assert_eq!(2.0 * a, *b);
        }
    }

    #[test]
    fn descriptor_scale_invariance() {
        let mut rng = seeded_rng(38);
        let tape = Tape::new();
        let tau = tape.constant(&Tensor::scalar(5.0));
        let data: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
        let e = tape.constant(
            &Tensor::new(vec![3, 4], (0..12).map(|_| rng.random_range(-1.0..1.0)).collect())
                .unwrap(),
        );
        let content = vec![0usize, 1, 2];
        let d1 = vec_leaf(&tape, data.clone());
        let d2 = vec_leaf(&tape, data.iter().map(|v| v * 17.3).collect());
        let s1 = image_sentence_similarity(&d1, &e, &content, &tau).unwrap().item();
        let s2 = image_sentence_similarity(&d2, &e, &content, &tau).unwrap().item();
        assert!((s1 - s2).abs() <= 1e-12);
    }

    // ───────────────────────── full-model losses ───────────────────────────

    fn tiny_model(seed: u64) -> VlmModel {
        let mut config = ModelConfig::default();
        config.lm.width = 16;
        config.lm.blocks = 2;
        config.lm.heads = 2;
        config.lm.max_seq = 64;
        config.encoder.feature_width = 12;
        config.encoder.blocks = 2;
        config.encoder.heads = 2;
        VlmModel::init(seed, config)
    }

    fn sample_for(model: &VlmModel, image: &ImageTensor, text: &str) -> AlignSample {
        AlignSample {
            features: model.encode_image(image).unwrap(),
            caption: TokenSequence::caption(text).unwrap(),
            has_image: !image.is_blank(),
        }
    }

    fn checker_image(h: usize, w: usize, phase: usize) -> ImageTensor {
        let mut img = ImageTensor::blank(h, w);
        for y in 0..h {
            for x in 0..w {
                if (x + y + phase) % 3 == 0 {
                    img.set(phase % 3, y, x, 1.0);
                }
            }
        }
        img
    }

    #[test]
    fn untrained_generative_loss_near_ln_vocab_over_seeds() {
        // Near-uniform output head at init: tied embeddings are small,
        // so logits are near zero and the NLL sits near ln(vocab).
        let expected = 256.0f64.ln();
        for seed in 0..20 {
            let model = tiny_model(seed);
            let tape = Tape::new();
            let vars = model.bind(&tape, Stage::Align);
            let sample = sample_for(&model, &checker_image(28, 28, seed as usize % 3), "a red circle");
            let z = vars.project_features(&tape, &sample.features).unwrap();
            let loss = generative_alignment_loss(&vars.lm, Some(&z), &sample.caption)
                .unwrap()
                .item();
            assert!(
                (loss - expected).abs() < 0.3,
                "seed {seed}: untrained loss {loss} vs ln 256 = {expected}"
            );
        }
    }

    #[test]
    fn gen_loss_with_no_prefix_equals_text_lm_loss_bit_exact() {
        let model = tiny_model(3);
        let caption = TokenSequence::caption("green square").unwrap();

        let tape = Tape::new();
        let vars = model.bind(&tape, Stage::Align);
        let with_empty = {
            let z = tape.constant(&Tensor::new(vec![0, 16], vec![]).unwrap());
            generative_alignment_loss(&vars.lm, Some(&z), &caption).unwrap().item()
        };
        let text_only = generative_alignment_loss(&vars.lm, None, &caption).unwrap().item();
        assert_eq!(with_empty, text_only);
    }

    #[test]
    fn cg_alpha_zero_equals_gen_exactly_and_linearity_holds() {
        let model = tiny_model(5);
        let images: Vec<ImageTensor> = (0..3).map(|i| checker_image(28, 28, i)).collect();
        let texts = ["a red circle", "two blue squares", "a green triangle"];
        let batch: Vec<AlignSample> = images
            .iter()
            .zip(texts)
            .map(|(img, t)| sample_for(&model, img, t))
            .collect();

        let run = |alpha: f64| {
            let tape = Tape::new();
            let vars = model.bind(&tape, Stage::Align);
            let (terms, report) = cg_loss(&tape, &vars, &batch, alpha, false).unwrap();
            (terms.cg.item(), report)
        };

        let (l0, r0) = run(0.0);
        assert_eq!(l0, r0.gen_loss);
        assert_eq!(r0.cg_loss, r0.gen_loss);

        let (_, r1) = run(1.0);
        let (_, r2) = run(2.0);
        assert!((r1.cg_loss - (r1.gen_loss + r1.con_loss)).abs() <= 1e-12);
        assert!(((r2.cg_loss - r1.cg_loss) - r1.con_loss).abs() <= 1e-12);
    }

    #[test]
    fn stage1_gradients_reach_only_projector_and_tau() {
        let model = tiny_model(6);
        let batch = vec![
            sample_for(&model, &checker_image(28, 28, 0), "a red circle"),
            sample_for(&model, &checker_image(28, 28, 1), "a blue square"),
        ];
        let tape = Tape::new();
        let vars = model.bind(&tape, Stage::Align);
        let (terms, _) = cg_loss(&tape, &vars, &batch, 1.0, false).unwrap();
        tape.backward(&terms.cg).unwrap();

        let mut saw_proj_grad = false;
        vars.visit(&mut |name, v| {
            let grad = tape.grad(v);
            if name.starts_with("proj.") || name == "tau.log" {
                let g = grad.expect("trainable parameter must have a gradient");
                let nonzero = g.data().iter().any(|&x| x != 0.0);
                assert!(nonzero, "{name} gradient is all zeros");
                saw_proj_grad = true;
            } else {
                assert!(grad.is_none(), "{name} must stay frozen in stage 1");
            }
        });
        assert!(saw_proj_grad);
    }

    #[test]
    fn blank_image_samples_skip_contrastive_term() {
        let model = tiny_model(7);
        let blank = ImageTensor::blank(28, 28);
        let batch = vec![
            sample_for(&model, &blank, "no image here"),
            sample_for(&model, &blank, "plain text"),
        ];
        let tape = Tape::new();
        let vars = model.bind(&tape, Stage::Align);
        let (terms, report) = cg_loss(&tape, &vars, &batch, 1.0, false).unwrap();
        assert_eq!(report.con_loss, 0.0);
        assert_eq!(report.cg_loss, report.gen_loss);
        assert_eq!(terms.cg.item(), report.gen_loss);
    }

    #[test]
    fn full_cg_loss_gradients_match_finite_differences() {
        // Every projector parameter plus the temperature, against
        // central differences through the whole two-tower graph.
        let model = tiny_model(8);
        let batch = vec![
            sample_for(&model, &checker_image(28, 28, 0), "red dot"),
            sample_for(&model, &checker_image(28, 28, 1), "blue box"),
        ];

        let mut theta: Vec<(String, Tensor)> = Vec::new();
        model.projector.visit(&mut |n, t| theta.push((n.to_string(), t.clone())));
        theta.push(("tau.log".into(), model.log_tau.clone()));
        let tensors: Vec<Tensor> = theta.iter().map(|(_, t)| t.clone()).collect();

        let eval = |replacements: &[Tensor]| -> f64 {
            let mut m = model.clone();
            let mut i = 0;
            m.projector.visit_mut(&mut |_, t| {
                *t = replacements[i].clone();
                i += 1;
            });
            m.log_tau = replacements[i].clone();
            let tape = Tape::new();
            let vars = m.bind(&tape, Stage::Align);
            let (terms, _) = cg_loss(&tape, &vars, &batch, 1.0, false).unwrap();
            terms.cg.item()
        };

        // Analytic gradients from one tape pass.
        let tape = Tape::new();
        let vars = model.bind(&tape, Stage::Align);
        let (terms, _) = cg_loss(&tape, &vars, &batch, 1.0, false).unwrap();
        tape.backward(&terms.cg).unwrap();
        let mut analytic = std::collections::HashMap::new();
        vars.visit(&mut |name, v| {
            if let Some(g) = tape.grad(v) {
                analytic.insert(name.to_string(), g);
            }
        });

        let numeric = numeric_grads(&tensors, |xs| eval(xs));
        let mut worst: f64 = 0.0;
        for ((name, _), num) in theta.iter().zip(&numeric) {
            let ana = analytic.get(name).expect("gradient present");
            for (a, n) in ana.data().iter().zip(num.data()) {
                worst = worst.max(scaled_err(*a, *n));
            }
        }
        assert!(worst < 1e-4, "cg loss grad err {worst}");
    }
}
