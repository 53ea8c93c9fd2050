//! Centroid pseudo-labels for unlabeled target videos.
//!
//! Initial class centroids are prediction-weighted means of the overall
//! features; samples go to the nearest centroid under cosine distance; the
//! centroids are then recomputed from those assignments and the samples
//! relabeled.

use crate::error::{Error, Result};
use crate::tensorcore::{softmax_row, Tensor};

/// Guard on norms and denominators.
pub const EPS: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct CentroidTable {
    /// 0 for prediction-weighted centroids, 1 after a hard-assignment update.
    pub generation: u8,
    /// `C × d`.
    pub centroids: Tensor,
    /// Samples assigned per class; generation 1 only.
    pub counts: Option<Vec<usize>>,
}

impl CentroidTable {
    pub fn classes(&self) -> usize {
        self.centroids.rows()
    }
}

fn check_rows(features: &Tensor, other: usize, what: &'static str) -> Result<()> {
    if features.shape().len() != 2 || features.rows() != other {
        return Err(Error::ShapeMismatch {
            op: what,
            lhs: features.shape().to_vec(),
            rhs: vec![other],
        });
    }
    Ok(())
}

/// `c_c = Σ_n σ_c(logits_n) f_n / Σ_n σ_c(logits_n)` over all samples.
pub fn init_centroids(features: &Tensor, logits: &Tensor) -> Result<CentroidTable> {
    check_rows(features, logits.rows(), "init_centroids")?;
    let (d, classes) = (features.cols(), logits.cols());
    let mut sums = vec![0.0; classes * d];
    let mut mass = vec![0.0; classes];
    for (f, row) in features.row_iter().zip(logits.row_iter()) {
        let p = softmax_row(row);
        for c in 0..classes {
            mass[c] += p[c];
            for j in 0..d {
                sums[c * d + j] += p[c] * f[j];
            }
        }
    }
    for c in 0..classes {
        let denom = mass[c].max(EPS);
        sums[c * d..(c + 1) * d].iter_mut().for_each(|v| *v /= denom);
    }
    Ok(CentroidTable {
        generation: 0,
        centroids: Tensor::new(vec![classes, d], sums)?,
        counts: None,
    })
}

/// `1 - ⟨a, b⟩ / (‖a‖ ‖b‖)` with both norms floored at [`EPS`].
pub fn cosine_distance(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(EPS);
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt().max(EPS);
    1.0 - dot / (na * nb)
}

/// Nearest centroid per sample; ties go to the lowest class index.
pub fn assign_labels(features: &Tensor, table: &CentroidTable) -> Vec<usize> {
    features
        .row_iter()
        .map(|f| {
            let mut best = 0;
            let mut best_dist = f64::INFINITY;
            for (c, centroid) in table.centroids.row_iter().enumerate() {
                let dist = cosine_distance(f, centroid);
                if dist < best_dist {
                    best = c;
                    best_dist = dist;
                }
            }
            best
        })
        .collect()
}

/// Per-class mean of the assigned features. A class with no samples keeps
/// its centroid from `previous`.
pub fn update_centroids(
    features: &Tensor,
    labels: &[usize],
    previous: &CentroidTable,
) -> Result<CentroidTable> {
    check_rows(features, labels.len(), "update_centroids")?;
    let (classes, d) = (previous.classes(), features.cols());
    let mut sums = vec![0.0; classes * d];
    let mut counts = vec![0usize; classes];
    for (f, &y) in features.row_iter().zip(labels) {
        if y >= classes {
            return Err(Error::InvalidLabel { label: y, classes });
        }
        counts[y] += 1;
        for j in 0..d {
            sums[y * d + j] += f[j];
        }
    }
    for c in 0..classes {
        let block = &mut sums[c * d..(c + 1) * d];
        if counts[c] == 0 {
            block.copy_from_slice(previous.centroids.row(c));
        } else {
            block.iter_mut().for_each(|v| *v /= counts[c] as f64);
        }
    }
    Ok(CentroidTable {
        generation: 1,
        centroids: Tensor::new(vec![classes, d], sums)?,
        counts: Some(counts),
    })
}

/// init → assign, then `rounds` × (update → assign).
pub fn generate_pseudo_labels(features: &Tensor, logits: &Tensor, rounds: usize) -> Result<Vec<usize>> {
    if rounds == 0 {
        return Err(Error::InvalidConfig {
            key: "pl_rounds".into(),
            reason: "must be >= 1".into(),
        });
    }
    let mut table = init_centroids(features, logits)?;
    let mut labels = assign_labels(features, &table);
    for _ in 0..rounds {
        table = update_centroids(features, &labels, &table)?;
        labels = assign_labels(features, &table);
    }
    Ok(labels)
}
