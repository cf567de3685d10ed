use serde::{Deserialize, Serialize};

use crate::error::{CloverError, Result};

/// Looser than the loss-side tolerance: evaluation embeddings often come from f32 models.
pub const EMBED_NORM_TOL: f64 = 1e-5;

/// Scores with text queries as rows and videos as columns.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMatrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl SimilarityMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(CloverError::Shape(format!(
                "{} scores for a {rows}x{cols} matrix",
                data.len()
            )));
        }
        if let Some(k) = data.iter().position(|v| !v.is_finite()) {
            return Err(CloverError::NonFinite(format!(
                "similarity ({}, {}) is {}",
                k / cols,
                k % cols,
                data[k]
            )));
        }
        Ok(SimilarityMatrix { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(CloverError::Shape("ragged similarity rows".into()));
        }
        Self::new(rows.len(), cols, rows.concat())
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn transpose(&self) -> Self {
        let mut data = Vec::with_capacity(self.data.len());
        for j in 0..self.cols {
            data.extend((0..self.rows).map(|i| self.data[i * self.cols + j]));
        }
        SimilarityMatrix {
            rows: self.cols,
            cols: self.rows,
            data,
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Result<Self> {
        Self::new(
            self.rows,
            self.cols,
            self.data.iter().map(|&v| f(v)).collect(),
        )
    }
}

fn check_unit(name: &'static str, rows: &[Vec<f64>]) -> Result<usize> {
    let d = rows.first().map_or(0, Vec::len);
    for (i, r) in rows.iter().enumerate() {
        if r.len() != d {
            return Err(CloverError::Shape(format!(
                "{name} row {i} has {} dims, expected {d}",
                r.len()
            )));
        }
        let norm = r.iter().map(|x| x * x).sum::<f64>().sqrt();
        if (norm - 1.0).abs() > EMBED_NORM_TOL {
            return Err(CloverError::invalid(
                name,
                format!("row {i} has norm {norm}"),
            ));
        }
    }
    Ok(d)
}

/// Pairwise dot products of unit-norm text rows against unit-norm video rows.
pub fn similarity_matrix(text: &[Vec<f64>], video: &[Vec<f64>]) -> Result<SimilarityMatrix> {
    let dt = check_unit("text", text)?;
    let dv = check_unit("video", video)?;
    if !text.is_empty() && !video.is_empty() && dt != dv {
        return Err(CloverError::Shape(format!(
            "text dim {dt} vs video dim {dv}"
        )));
    }
    let data = text
        .iter()
        .flat_map(|t| {
            video
                .iter()
                .map(move |v| t.iter().zip(v).map(|(a, b)| a * b).sum())
        })
        .collect();
    SimilarityMatrix::new(text.len(), video.len(), data)
}

fn check_truth(s: &SimilarityMatrix, truth: &[usize]) -> Result<()> {
    if truth.len() != s.rows {
        return Err(CloverError::Shape(format!(
            "{} ground-truth entries for {} rows",
            truth.len(),
            s.rows
        )));
    }
    if let Some((i, &j)) = truth.iter().enumerate().find(|(_, &j)| j >= s.cols) {
        return Err(CloverError::invalid(
            "ground_truth",
            format!("row {i} points at column {j} of {}", s.cols),
        ));
    }
    if s.rows == 0 {
        return Err(CloverError::invalid("ground_truth", "no queries"));
    }
    Ok(())
}

/// 1-based rank of the ground-truth column per row; equal scores rank by ascending column.
pub fn ranks(s: &SimilarityMatrix, truth: &[usize]) -> Result<Vec<usize>> {
    check_truth(s, truth)?;
    Ok(truth
        .iter()
        .enumerate()
        .map(|(i, &gt)| {
            let row = s.row(i);
            let p = row[gt];
            1 + row
                .iter()
                .enumerate()
                .filter(|&(j, &v)| v > p || (v == p && j < gt))
                .count()
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RetrievalMetrics {
    pub r1: f64,
    pub r5: f64,
    pub r10: f64,
    pub medr: f64,
    pub queries: usize,
}

impl RetrievalMetrics {
    pub fn from_ranks(ranks: &[usize]) -> Self {
        let n = ranks.len();
        let at = |k: usize| ranks.iter().filter(|&&r| r <= k).count() as f64 / n as f64;
        let mut sorted = ranks.to_vec();
        sorted.sort_unstable();
        let medr = if n % 2 == 1 {
            sorted[n / 2] as f64
        } else {
            (sorted[n / 2 - 1] + sorted[n / 2]) as f64 / 2.0
        };
        RetrievalMetrics {
            r1: at(1),
            r5: at(5),
            r10: at(10),
            medr,
            queries: n,
        }
    }
}

pub fn retrieval_metrics(s: &SimilarityMatrix, truth: &[usize]) -> Result<RetrievalMetrics> {
    Ok(RetrievalMetrics::from_ranks(&ranks(s, truth)?))
}

/// Mean positive similarity and mean gap between the positive and the row's negatives.
pub fn similarity_diagnostics(s: &SimilarityMatrix, truth: &[usize]) -> Result<(f64, f64)> {
    check_truth(s, truth)?;
    let (mut pos, mut margin) = (0.0, 0.0);
    for (i, &gt) in truth.iter().enumerate() {
        let row = s.row(i);
        pos += row[gt];
        if s.cols > 1 {
            let neg = (row.iter().sum::<f64>() - row[gt]) / (s.cols - 1) as f64;
            margin += row[gt] - neg;
        }
    }
    let n = s.rows as f64;
    Ok((pos / n, margin / n))
}

pub fn vqa_accuracy(predictions: &[usize], answers: &[usize]) -> Result<f64> {
    if predictions.len() != answers.len() {
        return Err(CloverError::Shape(format!(
            "{} predictions for {} answers",
            predictions.len(),
            answers.len()
        )));
    }
    if answers.is_empty() {
        return Err(CloverError::invalid("answers", "nothing to score"));
    }
    let hits = predictions
        .iter()
        .zip(answers)
        .filter(|(p, a)| p == a)
        .count();
    Ok(hits as f64 / answers.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_pair_scores_one() {
        let s = similarity_matrix(&[vec![0.6, 0.8]], &[vec![0.6, 0.8]]).unwrap();
        assert!((s.data[0] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn dimension_mismatch_is_rejected() {
        assert!(similarity_matrix(&[vec![1.0, 0.0]], &[vec![1.0, 0.0, 0.0]]).is_err());
        assert!(similarity_matrix(&[vec![2.0, 0.0]], &[vec![1.0, 0.0]]).is_err());
    }

    #[test]
    fn transpose_swaps_axes() {
        let s = SimilarityMatrix::from_rows(&[vec![1.0, 2.0, 3.0], vec![4.0, 5.0, 6.0]]).unwrap();
        let t = s.transpose();
        assert_eq!((t.rows, t.cols), (3, 2));
        assert_eq!(t.row(2), &[3.0, 6.0]);
    }
}
