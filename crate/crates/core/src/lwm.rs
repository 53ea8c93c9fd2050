//! Local weight module: per-scale relevance weights from prediction
//! entropy, `w = 1 + confidence`, applied to feature aggregation and to
//! the local predictions.
//!
//! Weights are plain numbers computed from the current logits and enter
//! the graph as constants.

use crate::error::{Error, Result};
use crate::tensorcore::{log_softmax_row, Tensor, Var};
use crate::trn::aggregate_overall;

/// Scaling of the negative entropy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ConfidenceMode {
    /// `-H / log C`, in `[-1, 0]`.
    #[default]
    Normalized,
    /// `-H`, in `[-log C, 0]`.
    Raw,
}

/// What the prediction-site weight multiplies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum WeightTarget {
    #[default]
    Logits,
    Probabilities,
}

/// Where the weights are applied.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Sites {
    pub feature: bool,
    pub prediction: bool,
}

impl Sites {
    pub const BOTH: Sites = Sites {
        feature: true,
        prediction: true,
    };
    pub const NONE: Sites = Sites {
        feature: false,
        prediction: false,
    };
    pub const FEATURE: Sites = Sites {
        feature: true,
        prediction: false,
    };
    pub const PREDICTION: Sites = Sites {
        feature: false,
        prediction: true,
    };

    pub fn any(self) -> bool {
        self.feature || self.prediction
    }
}

/// `Σ_c σ_c log σ_c` of one logit vector, optionally divided by `log C`.
pub fn confidence(logits: &[f64], mode: ConfidenceMode) -> f64 {
    let log_p = log_softmax_row(logits);
    let neg_entropy: f64 = log_p.iter().map(|lp| lp.exp() * lp).sum();
    match mode {
        ConfidenceMode::Raw => neg_entropy,
        ConfidenceMode::Normalized => neg_entropy / (logits.len() as f64).ln(),
    }
}

/// `B × (k-1)` weights from one `B × C` logit matrix per scale.
pub fn local_relevance_weight(local_logits: &[Tensor], mode: ConfidenceMode) -> Result<Tensor> {
    let scales = local_logits.len();
    let batch = local_logits.first().map_or(0, Tensor::rows);
    if scales == 0 || batch == 0 {
        return Err(Error::InvalidShape {
            shape: vec![batch, scales],
            reason: "no local predictions to weight".into(),
        });
    }
    let mut w = Tensor::zeros(&[batch, scales]);
    for (r, logits) in local_logits.iter().enumerate() {
        if logits.rows() != batch {
            return Err(Error::ShapeMismatch {
                op: "local_relevance_weight",
                lhs: vec![batch],
                rhs: logits.shape().to_vec(),
            });
        }
        for (b, row) in logits.row_iter().enumerate() {
            w.data_mut()[b * scales + r] = 1.0 + confidence(row, mode);
        }
    }
    Ok(w)
}

/// Weighted overall feature and weighted local predictions. A site that is
/// switched off passes its input through unweighted.
pub fn apply_weights<'g>(
    lts: &[Var<'g>],
    local_logits: &[Var<'g>],
    weights: &Tensor,
    sites: Sites,
    target: WeightTarget,
) -> Result<(Var<'g>, Vec<Var<'g>>)> {
    let overall = aggregate_overall(lts, sites.feature.then_some(weights))?;
    if !sites.prediction {
        return Ok((overall, local_logits.to_vec()));
    }
    let weighted = local_logits
        .iter()
        .enumerate()
        .map(|(r, p)| {
            let col: Vec<f64> = weights.row_iter().map(|row| row[r]).collect();
            let w = p.graph().constant(Tensor::vector(col))?;
            match target {
                WeightTarget::Logits => p.mul_col(w),
                WeightTarget::Probabilities => p.softmax()?.mul_col(w),
            }
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((overall, weighted))
}
