//! Training objectives: smoothed source cross-entropy, feature consistency
//! over cross-correlation matrices, source prediction consistency,
//! information maximization and pseudo-label cross-entropy.
//!
//! Every batch reduction is the arithmetic mean over videos.

use crate::error::{Error, Result};
use crate::tensorcore::{Tensor, Var};

/// Tradeoff constants and numerical guards for the objectives.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    /// Off-diagonal weight in the feature consistency loss.
    pub lambda: f64,
    pub alpha_local: f64,
    pub alpha_overall: f64,
    pub beta_fc: f64,
    pub beta_pc: f64,
    pub beta_tc: f64,
    pub beta_im: f64,
    pub beta_ce: f64,
    /// Variance guard in feature standardization.
    pub eps_norm: f64,
    /// Label smoothing for source training.
    pub eps_smooth: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda: 5e-3,
            alpha_local: 1.0,
            alpha_overall: 1.0,
            beta_fc: 1.0,
            beta_pc: 1.0,
            beta_tc: 1.0,
            beta_im: 1.0,
            beta_ce: 1.0,
            eps_norm: 1e-5,
            eps_smooth: 0.1,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("lambda", self.lambda),
            ("alpha_local", self.alpha_local),
            ("alpha_overall", self.alpha_overall),
            ("beta_fc", self.beta_fc),
            ("beta_pc", self.beta_pc),
            ("beta_tc", self.beta_tc),
            ("beta_im", self.beta_im),
            ("beta_ce", self.beta_ce),
            ("eps_norm", self.eps_norm),
            ("eps_smooth", self.eps_smooth),
        ];
        for (key, v) in fields {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::InvalidConfig {
                    key: key.into(),
                    reason: format!("must be finite and >= 0, got {v}"),
                });
            }
        }
        if self.eps_norm <= 0.0 {
            return Err(Error::InvalidConfig {
                key: "eps_norm".into(),
                reason: "must be > 0".into(),
            });
        }
        if self.eps_smooth >= 1.0 {
            return Err(Error::InvalidConfig {
                key: "eps_smooth".into(),
                reason: "must be < 1".into(),
            });
        }
        Ok(())
    }
}

/// How the local prediction divergence is evaluated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum LocalKl {
    /// `KL(σ(p_r) ‖ σ(p̄))` between the softmax distributions.
    #[default]
    Standard,
    /// Log-probabilities passed straight into a log-target KL routine,
    /// which evaluates `KL(σ(p̄) ‖ σ(p_r))`.
    Literal,
}

fn check_labels(labels: &[usize], batch: usize, classes: usize) -> Result<()> {
    if labels.len() != batch {
        return Err(Error::ShapeMismatch {
            op: "labels",
            lhs: vec![batch],
            rhs: vec![labels.len()],
        });
    }
    if let Some(&label) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::InvalidLabel { label, classes });
    }
    Ok(())
}

/// Mean cross-entropy against `(1 - ε)·onehot + ε/C`.
pub fn smoothed_cross_entropy<'g>(logits: Var<'g>, labels: &[usize], eps: f64) -> Result<Var<'g>> {
    let shape = logits.shape();
    let (batch, classes) = (shape[0], shape[1]);
    check_labels(labels, batch, classes)?;
    let mut target = Tensor::full(&[batch, classes], eps / classes as f64);
    for (b, &y) in labels.iter().enumerate() {
        target.data_mut()[b * classes + y] += 1.0 - eps;
    }
    let target = logits.graph().constant(target)?;
    logits
        .log_softmax()?
        .mul(target)?
        .sum()?
        .scale(-1.0 / batch as f64)
}

/// Unsmoothed mean cross-entropy against pseudo-labels.
pub fn pseudo_label_cross_entropy<'g>(logits: Var<'g>, pseudo: &[usize]) -> Result<Var<'g>> {
    smoothed_cross_entropy(logits, pseudo, 0.0)
}

/// Standardizes each column over the batch with the population variance.
pub fn normalize_features<'g>(lt: Var<'g>, eps: f64) -> Result<Var<'g>> {
    let mean = lt.mean_axis0()?;
    let inv_std = lt.variance_axis0()?.add_scalar(eps)?.powf(-0.5)?;
    lt.add_row(mean.scale(-1.0)?)?.mul_row(inv_std)
}

/// `(1/B) · norm(lt1)ᵀ · norm(lt2)`, a `d × d` matrix.
pub fn cross_correlation<'g>(lt1: Var<'g>, lt2: Var<'g>, eps: f64) -> Result<Var<'g>> {
    if lt1.shape() != lt2.shape() {
        return Err(Error::ShapeMismatch {
            op: "cross_correlation",
            lhs: lt1.shape(),
            rhs: lt2.shape(),
        });
    }
    correlate(normalize_features(lt1, eps)?, normalize_features(lt2, eps)?)
}

fn correlate<'g>(n1: Var<'g>, n2: Var<'g>) -> Result<Var<'g>> {
    let batch = n1.shape()[0];
    n1.transpose()?.matmul(n2)?.scale(1.0 / batch as f64)
}

/// `Σ_i (1 - C_ii)² + λ Σ_{i≠j} C_ij²`.
pub fn feature_consistency_pair<'g>(c: Var<'g>, lambda: f64) -> Result<Var<'g>> {
    let shape = c.shape();
    if shape.len() != 2 || shape[0] != shape[1] {
        return Err(Error::InvalidShape {
            shape,
            reason: "cross-correlation must be square".into(),
        });
    }
    let d = shape[0];
    let graph = c.graph();
    let mut mask = Tensor::full(&[d, d], lambda);
    for i in 0..d {
        mask.data_mut()[i * d + i] = 1.0;
    }
    let identity = graph.constant(Tensor::identity(d))?;
    c.sub(identity)?.square()?.mul(graph.constant(mask)?)?.sum()
}

/// Number of ordered scale pairs for `k` frames: `(k-1)(k-2)`.
pub fn feature_pair_count(k: usize) -> usize {
    (k - 1) * (k - 2)
}

/// Mean pair loss over all ordered pairs of distinct scales.
pub fn feature_consistency_total<'g>(lts: &[Var<'g>], lambda: f64, eps: f64) -> Result<Var<'g>> {
    if lts.len() < 2 {
        return Err(Error::InvalidShape {
            shape: vec![lts.len()],
            reason: "feature consistency needs at least two scales".into(),
        });
    }
    let normalized = lts
        .iter()
        .map(|lt| normalize_features(*lt, eps))
        .collect::<Result<Vec<_>>>()?;
    let mut total: Option<Var<'g>> = None;
    let mut pairs = 0;
    for (i, a) in normalized.iter().enumerate() {
        for (j, b) in normalized.iter().enumerate() {
            if i == j {
                continue;
            }
            let term = feature_consistency_pair(correlate(*a, *b)?, lambda)?;
            total = Some(match total {
                Some(t) => t.add(term)?,
                None => term,
            });
            pairs += 1;
        }
    }
    total.unwrap().scale(1.0 / pairs as f64)
}

/// Per-scale, average and overall predictions of one batch.
#[derive(Debug, Clone)]
pub struct PredictionSet<'g> {
    /// One `B × C` matrix per scale.
    pub local: Vec<Var<'g>>,
    /// Mean of `local` over scales.
    pub average: Var<'g>,
    /// Prediction from the aggregated overall feature.
    pub overall: Var<'g>,
}

impl<'g> PredictionSet<'g> {
    pub fn new(local: Vec<Var<'g>>, overall: Var<'g>) -> Result<Self> {
        let average = average_logits(&local)?;
        Ok(PredictionSet {
            local,
            average,
            overall,
        })
    }
}

/// Arithmetic mean of per-scale predictions.
pub fn average_logits<'g>(local: &[Var<'g>]) -> Result<Var<'g>> {
    let (first, rest) = local.split_first().ok_or_else(|| Error::InvalidShape {
        shape: vec![],
        reason: "no local predictions".into(),
    })?;
    let mut total = *first;
    for p in rest {
        total = total.add(*p)?;
    }
    total.scale(1.0 / local.len() as f64)
}

/// Mean over batch and scales of the KL divergence between each scale's
/// prediction and the scale-averaged prediction.
pub fn local_prediction_consistency<'g>(local: &[Var<'g>], form: LocalKl) -> Result<Var<'g>> {
    let average = average_logits(local)?;
    local_consistency_against(local, average, form)
}

fn local_consistency_against<'g>(
    local: &[Var<'g>],
    average: Var<'g>,
    form: LocalKl,
) -> Result<Var<'g>> {
    let batch = average.shape()[0];
    let log_avg = average.log_softmax()?;
    let mut total: Option<Var<'g>> = None;
    for p in local {
        let log_p = p.log_softmax()?;
        let kl = match form {
            LocalKl::Standard => log_p.exp()?.mul(log_p.sub(log_avg)?)?.sum()?,
            LocalKl::Literal => log_avg.exp()?.mul(log_avg.sub(log_p)?)?.sum()?,
        };
        total = Some(match total {
            Some(t) => t.add(kl)?,
            None => kl,
        });
    }
    total
        .unwrap()
        .scale(1.0 / (batch * local.len()) as f64)
}

/// Mean over batch of `Σ_c |log σ_c(overall) - log σ_c(average)|`.
pub fn overall_prediction_consistency<'g>(overall: Var<'g>, average: Var<'g>) -> Result<Var<'g>> {
    if overall.shape() != average.shape() {
        return Err(Error::ShapeMismatch {
            op: "overall_prediction_consistency",
            lhs: overall.shape(),
            rhs: average.shape(),
        });
    }
    let batch = overall.shape()[0];
    overall
        .log_softmax()?
        .sub(average.log_softmax()?)?
        .abs()?
        .sum()?
        .scale(1.0 / batch as f64)
}

/// The two prediction-consistency terms of a [`PredictionSet`].
pub fn prediction_consistency_terms<'g>(
    preds: &PredictionSet<'g>,
    form: LocalKl,
) -> Result<(Var<'g>, Var<'g>)> {
    let local = local_consistency_against(&preds.local, preds.average, form)?;
    let overall = overall_prediction_consistency(preds.overall, preds.average)?;
    Ok((local, overall))
}

/// `α_local · local + α_overall · overall`.
pub fn prediction_consistency<'g>(
    local: Var<'g>,
    overall: Var<'g>,
    alpha_local: f64,
    alpha_overall: f64,
) -> Result<Var<'g>> {
    local.scale(alpha_local)?.add(overall.scale(alpha_overall)?)
}

/// `β_fc · fc + β_pc · pc`.
pub fn temporal_consistency<'g>(fc: Var<'g>, pc: Var<'g>, beta_fc: f64, beta_pc: f64) -> Result<Var<'g>> {
    fc.scale(beta_fc)?.add(pc.scale(beta_pc)?)
}

/// Mean per-sample entropy plus `KL(q ‖ uniform)` of the batch-mean
/// prediction `q`.
pub fn information_maximization<'g>(logits: Var<'g>) -> Result<Var<'g>> {
    let shape = logits.shape();
    let (batch, classes) = (shape[0], shape[1]);
    let probs = logits.softmax()?;
    let entropy = probs
        .mul(logits.log_softmax()?)?
        .sum()?
        .scale(-1.0 / batch as f64)?;
    let marginal = probs.mean_axis0()?;
    let diversity = marginal
        .mul(marginal.ln()?.add_scalar((classes as f64).ln())?)?
        .sum()?;
    entropy.add(diversity)
}
