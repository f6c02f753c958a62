//! Dataset-level embeddings, complementary datasets and the 1-D
//! Wasserstein distance between data embeddings.

use crate::clustering::ClusterAssignment;
use crate::{Error, Result};

/// Probability vector summarizing a set of trajectory embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct DataEmbedding {
    pub probs: Vec<f64>,
}

/// Sum, L2-normalize, then softmax with max subtraction.
pub fn data_embedding<V: AsRef<[f64]>>(embeddings: &[V]) -> Result<DataEmbedding> {
    let first = embeddings.first().ok_or(Error::TooFew { need: 1, got: 0 })?;
    let h = first.as_ref().len();
    let mut sum = vec![0.0; h];
    for e in embeddings {
        let e = e.as_ref();
        if e.len() != h {
            return Err(Error::LengthMismatch(h, e.len()));
        }
        sum.iter_mut().zip(e).for_each(|(s, x)| *s += x);
    }
    let norm = sum.iter().map(|x| x * x).sum::<f64>().sqrt();
    if !(norm > 0.0) {
        return Err(Error::ZeroNorm);
    }
    let m = sum.iter().map(|x| x / norm).fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = sum.iter().map(|x| (x / norm - m).exp()).collect();
    let z: f64 = exps.iter().sum();
    Ok(DataEmbedding { probs: exps.into_iter().map(|x| x / z).collect() })
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ComplementarySet {
    /// `None` for the full dataset.
    pub removed_cluster: Option<i64>,
    pub trajectory_indices: Vec<usize>,
}

/// The full set followed by one set per cluster with that cluster removed.
/// Noise points (label −1) stay in every set.
pub fn complementary_sets(assignment: &ClusterAssignment) -> Result<Vec<ComplementarySet>> {
    let n = assignment.labels.len();
    let mut out = vec![ComplementarySet { removed_cluster: None, trajectory_indices: (0..n).collect() }];
    for j in 0..assignment.k as i64 {
        let keep: Vec<usize> = (0..n).filter(|&i| assignment.labels[i] != j).collect();
        if keep.is_empty() {
            return Err(Error::EmptyComplement(j));
        }
        out.push(ComplementarySet { removed_cluster: Some(j), trajectory_indices: keep });
    }
    Ok(out)
}

/// W1 on the support `0..H` with unit spacing: the L1 distance between CDFs.
pub fn wasserstein1(p: &DataEmbedding, q: &DataEmbedding) -> Result<f64> {
    if p.probs.len() != q.probs.len() {
        return Err(Error::LengthMismatch(p.probs.len(), q.probs.len()));
    }
    let (mut cp, mut cq, mut total) = (0.0, 0.0, 0.0);
    for (a, b) in p.probs.iter().zip(&q.probs) {
        cp += a;
        cq += b;
        total += f64::abs(cp - cq);
    }
    Ok(total)
}
