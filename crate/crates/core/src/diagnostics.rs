//! Alignment quality probes: patch-token similarity maps, a contrast
//! score over grounded object patches, in-batch retrieval accuracy,
//! and the CSV/PGM report writer.
//!
//! All similarity values here are unscaled cosines — the learnable
//! temperature is excluded so maps stay comparable across checkpoints.

use std::fs;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum DiagnosticsError {
    #[error("zero-norm {what} row {index}")]
    ZeroNormRow { what: &'static str, index: usize },
    #[error("empty {what} index set")]
    EmptyIndexSet { what: &'static str },
    #[error("index sets overlap at patch {index}")]
    OverlappingSets { index: usize },
    #[error("index {index} out of bounds for {what} of size {size}")]
    IndexOutOfBounds { what: &'static str, index: usize, size: usize },
    #[error("similarity matrix must be square, got {rows}x{cols}")]
    NotSquare { rows: usize, cols: usize },
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// Cosine similarities between every projected patch row and every
/// content-token embedding row: an N x M grid in [-1, 1].
#[derive(Debug, Clone)]
pub struct SimilarityMap {
    grid: Tensor,
    pub patch_grid: (usize, usize),
    pub token_labels: Vec<String>,
}

impl SimilarityMap {
    pub fn grid(&self) -> &Tensor {
        &self.grid
    }

    pub fn patches(&self) -> usize {
        self.grid.rows()
    }

    pub fn tokens(&self) -> usize {
        self.grid.cols()
    }
}

/// Unscaled cosine per (patch, content token) pair. Errors on any
/// zero-norm row rather than producing silent zeros.
pub fn similarity_map(
    z: &Tensor,
    embeddings: &Tensor,
    content_positions: &[usize],
    patch_grid: (usize, usize),
    token_labels: Vec<String>,
) -> Result<SimilarityMap, DiagnosticsError> {
    let (n, d) = (z.rows(), z.cols());
    let m = content_positions.len();
    if m == 0 {
        return Err(DiagnosticsError::EmptyIndexSet { what: "content token" });
    }
    let norm = |row: &[f64], what: &'static str, index: usize| -> Result<f64, DiagnosticsError> {
        let v = row.iter().map(|x| x * x).sum::<f64>().sqrt();
        if v == 0.0 {
            Err(DiagnosticsError::ZeroNormRow { what, index })
        } else {
            Ok(v)
        }
    };
    let mut data = vec![0.0; n * m];
    for (col, &pos) in content_positions.iter().enumerate() {
        if pos >= embeddings.rows() {
            return Err(DiagnosticsError::IndexOutOfBounds {
                what: "embedding",
                index: pos,
                size: embeddings.rows(),
            });
        }
        let e_row = &embeddings.data()[pos * d..(pos + 1) * d];
        let e_norm = norm(e_row, "token embedding", pos)?;
        for patch in 0..n {
            let z_row = &z.data()[patch * d..(patch + 1) * d];
            let z_norm = norm(z_row, "patch feature", patch)?;
            let dot: f64 = z_row.iter().zip(e_row).map(|(a, b)| a * b).sum();
            data[patch * m + col] = dot / (z_norm * e_norm);
        }
    }
    Ok(SimilarityMap {
        grid: Tensor::new(vec![n, m], data).expect("counted layout"),
        patch_grid,
        token_labels,
    })
}

/// Mean similarity over object patches minus mean over the remaining
/// patches, for one token column. Positive scores mean the token
/// points at its object rather than at everything.
pub fn contrast_score(
    map: &SimilarityMap,
    token_index: usize,
    object_patches: &[usize],
) -> Result<f64, DiagnosticsError> {
    let n = map.patches();
    let m = map.tokens();
    if token_index >= m {
        return Err(DiagnosticsError::IndexOutOfBounds {
            what: "token column",
            index: token_index,
            size: m,
        });
    }
    if object_patches.is_empty() {
        return Err(DiagnosticsError::EmptyIndexSet { what: "object patch" });
    }
    let mut is_object = vec![false; n];
    for &p in object_patches {
        if p >= n {
            return Err(DiagnosticsError::IndexOutOfBounds {
                what: "patch",
                index: p,
                size: n,
            });
        }
        if is_object[p] {
            return Err(DiagnosticsError::OverlappingSets { index: p });
        }
        is_object[p] = true;
    }
    if object_patches.len() == n {
        return Err(DiagnosticsError::EmptyIndexSet { what: "background patch" });
    }
    let mut object_sum = 0.0;
    let mut rest_sum = 0.0;
    for patch in 0..n {
        let v = map.grid.at(patch, token_index);
        if is_object[patch] {
            object_sum += v;
        } else {
            rest_sum += v;
        }
    }
    let object_mean = object_sum / object_patches.len() as f64;
    let rest_mean = rest_sum / (n - object_patches.len()) as f64;
    Ok(object_mean - rest_mean)
}

/// Fraction of rows (images) whose argmax is the diagonal, and the
/// same over columns (captions). Ties count as incorrect.
pub fn retrieval_accuracy(s: &Tensor) -> Result<(f64, f64), DiagnosticsError> {
    let (rows, cols) = (s.rows(), s.cols());
    if rows != cols {
        return Err(DiagnosticsError::NotSquare { rows, cols });
    }
    let b = rows;
    let mut image_to_text = 0usize;
    let mut text_to_image = 0usize;
    for i in 0..b {
        let diag = s.at(i, i);
        let row_beats = (0..b).all(|j| j == i || s.at(i, j) < diag);
        let col_beats = (0..b).all(|j| j == i || s.at(j, i) < diag);
        if row_beats {
            image_to_text += 1;
        }
        if col_beats {
            text_to_image += 1;
        }
    }
    Ok((image_to_text as f64 / b as f64, text_to_image as f64 / b as f64))
}

/// Per-checkpoint alignment summary.
#[derive(Debug, Clone)]
pub struct AlignmentReport {
    pub step: usize,
    pub image_to_text: f64,
    pub text_to_image: f64,
    /// Mean of S[i][i] minus the mean off-diagonal entry.
    pub mean_margin: f64,
    /// (concept label, mean contrast score) pairs.
    pub concept_contrast: Vec<(String, f64)>,
}

/// Mean diagonal-minus-off-diagonal margin of a square matrix.
pub fn mean_diagonal_margin(s: &Tensor) -> Result<f64, DiagnosticsError> {
    let (rows, cols) = (s.rows(), s.cols());
    if rows != cols {
        return Err(DiagnosticsError::NotSquare { rows, cols });
    }
    let b = rows;
    if b == 1 {
        return Ok(0.0);
    }
    let mut diag = 0.0;
    let mut off = 0.0;
    for i in 0..b {
        for j in 0..b {
            if i == j {
                diag += s.at(i, j);
            } else {
                off += s.at(i, j);
            }
        }
    }
    Ok(diag / b as f64 - off / (b * (b - 1)) as f64)
}

/// Writes `alignment_report.csv` (one row per report) and one
/// `simmap_<id>.pgm` per similarity map into `out_dir`.
pub fn emit_report(
    reports: &[AlignmentReport],
    maps: &[(String, SimilarityMap)],
    out_dir: &Path,
) -> Result<(), DiagnosticsError> {
    fs::create_dir_all(out_dir)
        .map_err(|source| DiagnosticsError::Io { path: out_dir.to_path_buf(), source })?;
    let csv_path = out_dir.join("alignment_report.csv");
    let mut csv = String::from("step,image_to_text,text_to_image,mean_margin,concept,contrast\n");
    for report in reports {
        if report.concept_contrast.is_empty() {
            csv.push_str(&format!(
                "{},{},{},{},,\n",
                report.step, report.image_to_text, report.text_to_image, report.mean_margin
            ));
        }
        for (concept, score) in &report.concept_contrast {
            csv.push_str(&format!(
                "{},{},{},{},{},{}\n",
                report.step,
                report.image_to_text,
                report.text_to_image,
                report.mean_margin,
                concept,
                score
            ));
        }
    }
    fs::write(&csv_path, csv).map_err(|source| DiagnosticsError::Io { path: csv_path, source })?;

    for (id, map) in maps {
        let path = out_dir.join(format!("simmap_{id}.pgm"));
        fs::write(&path, pgm_bytes(map))
            .map_err(|source| DiagnosticsError::Io { path, source })?;
    }
    Ok(())
}

/// 8-bit binary PGM: header "P5 <W> <H> 255", then one byte per cell,
/// cosine mapped linearly with -1 -> 0, 0 -> 127 (floor), +1 -> 255.
pub fn pgm_bytes(map: &SimilarityMap) -> Vec<u8> {
    let (h, w) = (map.patches(), map.tokens());
    let mut out = format!("P5 {w} {h} 255\n").into_bytes();
    for v in map.grid.data() {
        let clamped = v.clamp(-1.0, 1.0);
        out.push(((clamped + 1.0) / 2.0 * 255.0).floor() as u8);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn map_from(grid: Tensor) -> SimilarityMap {
        let tokens = grid.cols();
        SimilarityMap {
            patch_grid: (grid.rows(), 1),
            token_labels: (0..tokens).map(|i| format!("t{i}")).collect(),
            grid,
        }
    }

    #[test]
    fn identical_rows_give_cosine_one() {
        let z = Tensor::new(vec![2, 3], vec![1.0, 2.0, 3.0, -1.0, 0.0, 1.0]).unwrap();
        let e = Tensor::new(vec![1, 3], vec![1.0, 2.0, 3.0]).unwrap();
        let map = similarity_map(&z, &e, &[0], (2, 1), vec!["x".into()]).unwrap();
        assert!((map.grid().at(0, 0) - 1.0).abs() < 1e-12);
        assert!(map.grid().at(1, 0).abs() < 1.0);
    }

    #[test]
    fn map_transposes_with_swapped_arguments() {
        let z = Tensor::new(vec![2, 3], vec![0.5, -1.0, 2.0, 1.0, 1.0, 0.0]).unwrap();
        let e = Tensor::new(vec![3, 3], vec![1.0, 0.0, 0.0, 0.0, 2.0, 0.0, 1.0, 1.0, 1.0]).unwrap();
        let a = similarity_map(&z, &e, &[0, 1, 2], (2, 1), vec![]).unwrap();
        let b = similarity_map(&e, &z, &[0, 1], (3, 1), vec![]).unwrap();
        for i in 0..2 {
            for j in 0..3 {
                assert_eq!(a.grid().at(i, j), b.grid().at(j, i));
            }
        }
    }

    #[test]
    fn map_matches_double_loop_oracle() {
        let z = Tensor::new(vec![3, 4], (0..12).map(|i| (i as f64) * 0.3 - 1.0).collect()).unwrap();
        let e = Tensor::new(vec![4, 4], (0..16).map(|i| ((i * 5) % 7) as f64 - 3.0).collect()).unwrap();
        let content = [1usize, 3];
        let map = similarity_map(&z, &e, &content, (3, 1), vec![]).unwrap();
        for (col, &pos) in content.iter().enumerate() {
            for patch in 0..3 {
                let zr = &z.data()[patch * 4..(patch + 1) * 4];
                let er = &e.data()[pos * 4..(pos + 1) * 4];
                let dot: f64 = zr.iter().zip(er).map(|(a, b)| a * b).sum();
                let nz = zr.iter().map(|v| v * v).sum::<f64>().sqrt();
                let ne = er.iter().map(|v| v * v).sum::<f64>().sqrt();
                assert!((map.grid().at(patch, col) - dot / (nz * ne)).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn zero_norm_row_errors() {
        let z = Tensor::new(vec![2, 2], vec![0.0, 0.0, 1.0, 1.0]).unwrap();
        let e = Tensor::new(vec![1, 2], vec![1.0, 0.0]).unwrap();
        assert!(matches!(
            similarity_map(&z, &e, &[0], (2, 1), vec![]).unwrap_err(),
            DiagnosticsError::ZeroNormRow { .. }
        ));
    }

    #[test]
    fn map_invariant_to_positive_row_rescaling() {
        let z = Tensor::new(vec![2, 3], vec![0.5, -1.0, 2.0, 1.0, 1.0, 0.5]).unwrap();
        let mut z_scaled = z.clone();
        for v in &mut z_scaled.data_mut()[0..3] {
            *v *= 42.0;
        }
        let e = Tensor::new(vec![2, 3], vec![1.0, 0.3, 0.3, 0.0, 1.0, -1.0]).unwrap();
        let a = similarity_map(&z, &e, &[0, 1], (2, 1), vec![]).unwrap();
        let b = similarity_map(&z_scaled, &e, &[0, 1], (2, 1), vec![]).unwrap();
        for (x, y) in a.grid().data().iter().zip(b.grid().data()) {
            assert!((x - y).abs() <= 1e-12);
        }
    }

    #[test]
    fn contrast_uniform_map_is_zero_and_indicator_is_one() {
        let uniform = map_from(Tensor::new(vec![4, 1], vec![0.25; 4]).unwrap());
        assert_eq!(contrast_score(&uniform, 0, &[1]).unwrap(), 0.0);

        let indicator = map_from(Tensor::new(vec![4, 1], vec![1.0, 0.0, 0.0, 0.0]).unwrap());
        assert_eq!(contrast_score(&indicator, 0, &[0]).unwrap(), 1.0);
    }

    #[test]
    fn contrast_hand_computed_means() {
        let map = map_from(Tensor::new(vec![4, 2], vec![
            0.9, 0.1, //
            0.2, 0.8, //
            0.1, 0.3, //
            0.3, 0.1,
        ]).unwrap());
        // Token 0, object patch {0}: 0.9 - mean(0.2, 0.1, 0.3) = 0.7.
        let got = contrast_score(&map, 0, &[0]).unwrap();
        assert!((got - 0.7).abs() <= 1e-12);
        // Token 1, object patches {1, 2}: mean(0.8, 0.3) - mean(0.1, 0.1).
        let got = contrast_score(&map, 1, &[1, 2]).unwrap();
        assert!((got - (0.55 - 0.1)).abs() <= 1e-12);
    }

    #[test]
    fn contrast_invariant_to_column_constant_shift() {
        let grid = Tensor::new(vec![4, 1], vec![0.9, 0.2, 0.1, 0.3]).unwrap();
        let mut shifted = grid.clone();
        for v in shifted.data_mut() {
            *v += 0.25;
        }
        let a = contrast_score(&map_from(grid), 0, &[0]).unwrap();
        let b = contrast_score(&map_from(shifted), 0, &[0]).unwrap();
        assert!((a - b).abs() <= 1e-12);
    }

    #[test]
    fn contrast_empty_sets_error() {
        let map = map_from(Tensor::new(vec![2, 1], vec![0.1, 0.2]).unwrap());
        assert!(matches!(
            contrast_score(&map, 0, &[]).unwrap_err(),
            DiagnosticsError::EmptyIndexSet { .. }
        ));
        assert!(matches!(
            contrast_score(&map, 0, &[0, 1]).unwrap_err(),
            DiagnosticsError::EmptyIndexSet { what: "background patch" }
        ));
    }

    #[test]
    fn retrieval_identity_dominant_is_perfect() {
        let mut data = vec![0.0; 9];
        for i in 0..3 {
            data[i * 3 + i] = 1.0;
        }
        let s = Tensor::new(vec![3, 3], data).unwrap();
        assert_eq!(retrieval_accuracy(&s).unwrap(), (1.0, 1.0));
    }

    #[test]
    fn retrieval_constant_matrix_is_zero_under_tie_rule() {
        let s = Tensor::new(vec![3, 3], vec![0.5; 9]).unwrap();
        assert_eq!(retrieval_accuracy(&s).unwrap(), (0.0, 0.0));
    }

    #[test]
    fn retrieval_matches_brute_force_loop() {
        let data: Vec<f64> = (0..64).map(|i| ((i * 37) % 23) as f64 * 0.1).collect();
        let s = Tensor::new(vec![8, 8], data.clone()).unwrap();
        let (i2t, t2i) = retrieval_accuracy(&s).unwrap();

        let mut hits_row = 0;
        let mut hits_col = 0;
        for i in 0..8 {
            let mut best_j = 0;
            for j in 1..8 {
                if data[i * 8 + j] > data[i * 8 + best_j] {
                    best_j = j;
                }
            }
            let unique = (0..8).filter(|&j| data[i * 8 + j] == data[i * 8 + best_j]).count() == 1;
            if best_j == i && unique {
                hits_row += 1;
            }
            let mut best_r = 0;
            for r in 1..8 {
                if data[r * 8 + i] > data[best_r * 8 + i] {
                    best_r = r;
                }
            }
            let unique = (0..8).filter(|&r| data[r * 8 + i] == data[best_r * 8 + i]).count() == 1;
            if best_r == i && unique {
                hits_col += 1;
            }
        }
        assert_eq!(i2t, hits_row as f64 / 8.0);
        assert_eq!(t2i, hits_col as f64 / 8.0);
    }

    #[test]
    fn retrieval_invariant_under_joint_permutation() {
        let data: Vec<f64> = (0..16).map(|i| ((i * 11) % 13) as f64).collect();
        let s = Tensor::new(vec![4, 4], data.clone()).unwrap();
        let base = retrieval_accuracy(&s).unwrap();

        let order = [2usize, 0, 3, 1];
        let mut permuted = vec![0.0; 16];
        for (ni, &oi) in order.iter().enumerate() {
            for (nj, &oj) in order.iter().enumerate() {
                permuted[ni * 4 + nj] = data[oi * 4 + oj];
            }
        }
        let sp = Tensor::new(vec![4, 4], permuted).unwrap();
        assert_eq!(retrieval_accuracy(&sp).unwrap(), base);
    }

    #[test]
    fn pgm_header_and_linear_mapping() {
        let map = map_from(Tensor::new(vec![1, 3], vec![-1.0, 0.0, 1.0]).unwrap());
        let bytes = pgm_bytes(&map);
        let header_end = bytes.iter().position(|&b| b == b'\n').unwrap();
        assert_eq!(&bytes[..header_end], b"P5 3 1 255");
        assert_eq!(&bytes[header_end + 1..], &[0u8, 127, 255]);
    }
}
