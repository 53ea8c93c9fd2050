//! Source training, source-free target adaptation, evaluation, ablation
//! runs and feature export.

use std::fmt;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::losses::{self, LocalKl, LossWeights, PredictionSet};
use crate::lwm::{self, ConfidenceMode, Sites, WeightTarget};
use crate::pseudolabel::generate_pseudo_labels;
use crate::seed::derive_seed;
use crate::synthdata::{batch_indices, generate_domain_pair, BatchMode, Dataset, DomainSpec};
use crate::tensorcore::{Graph, Tensor, Var};
use crate::trn::{
    aggregate_overall, classify, encode_frames, eval_clips, local_temporal_features, sample_clips, stack_frames,
    BatchStats, BoundModel, ClipIndexSet, Hyperparams, Mode, ModelParams, ParamGroup, VideoSample,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Variant {
    Full,
    Fc,
    Pc,
    PcNoOverall,
    Tc,
    Na,
    AAtF,
    AAtP,
    ShotBaseline,
    SourceOnly,
}

impl Variant {
    pub const ALL: [Variant; 10] = [
        Variant::Full,
        Variant::Fc,
        Variant::Pc,
        Variant::PcNoOverall,
        Variant::Tc,
        Variant::Na,
        Variant::AAtF,
        Variant::AAtP,
        Variant::ShotBaseline,
        Variant::SourceOnly,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::Fc => "fc",
            Variant::Pc => "pc",
            Variant::PcNoOverall => "pc_no_overall",
            Variant::Tc => "tc",
            Variant::Na => "na",
            Variant::AAtF => "a_at_f",
            Variant::AAtP => "a_at_p",
            Variant::ShotBaseline => "shot_baseline",
            Variant::SourceOnly => "source_only",
        }
    }

    /// Where the local weights are applied.
    pub fn sites(self) -> Sites {
        match self {
            Variant::Full | Variant::Fc | Variant::Pc | Variant::PcNoOverall | Variant::Tc => Sites::BOTH,
            Variant::AAtF => Sites::FEATURE,
            Variant::AAtP => Sites::PREDICTION,
            Variant::Na | Variant::ShotBaseline | Variant::SourceOnly => Sites::NONE,
        }
    }

    pub fn uses_pseudo_labels(self) -> bool {
        matches!(
            self,
            Variant::Full | Variant::Na | Variant::AAtF | Variant::AAtP | Variant::ShotBaseline
        )
    }

    /// Coefficients on (fc, pc_local, pc_overall, im, pl_ce) in the total.
    pub fn coefficients(self, w: &LossWeights) -> [f64; 5] {
        let tc = [
            w.beta_tc * w.beta_fc,
            w.beta_tc * w.beta_pc * w.alpha_local,
            w.beta_tc * w.beta_pc * w.alpha_overall,
        ];
        match self {
            Variant::Full | Variant::Na | Variant::AAtF | Variant::AAtP => {
                [tc[0], tc[1], tc[2], w.beta_im, w.beta_ce]
            }
            Variant::Tc => [tc[0], tc[1], tc[2], 0.0, 0.0],
            Variant::Fc => [w.beta_fc, 0.0, 0.0, 0.0, 0.0],
            Variant::Pc => [0.0, w.alpha_local, w.alpha_overall, 0.0, 0.0],
            Variant::PcNoOverall => [0.0, w.alpha_local, 0.0, 0.0, 0.0],
            Variant::ShotBaseline => [0.0, 0.0, 0.0, w.beta_im, w.beta_ce],
            Variant::SourceOnly => [0.0; 5],
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::InvalidConfig {
                key: "variant".into(),
                reason: format!("unknown variant {s:?}"),
            })
    }
}

/// Which head parameters stay fixed during adaptation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum FreezeScope {
    /// Bottleneck, batch norm (including running statistics) and classifier.
    #[default]
    HeadAll,
    /// Only the weight-normalized classifier.
    LastLayerOnly,
}

impl FreezeScope {
    pub fn name(self) -> &'static str {
        match self {
            FreezeScope::HeadAll => "head_all",
            FreezeScope::LastLayerOnly => "last_layer_only",
        }
    }

    pub fn is_frozen(self, group: ParamGroup) -> bool {
        match self {
            FreezeScope::HeadAll => group.in_head(),
            FreezeScope::LastLayerOnly => group == ParamGroup::Classifier,
        }
    }
}

impl FromStr for FreezeScope {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "head_all" => Ok(FreezeScope::HeadAll),
            "last_layer_only" => Ok(FreezeScope::LastLayerOnly),
            _ => Err(Error::InvalidConfig {
                key: "freeze_scope".into(),
                reason: format!("unknown scope {s:?}"),
            }),
        }
    }
}

/// Feature fed to the classifier at evaluation time.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Inference {
    /// Unweighted mean of the local features.
    #[default]
    Plain,
    /// Relevance-weighted mean.
    Weighted,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Optimizer {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub weights: LossWeights,
    pub source_optimizer: Optimizer,
    pub adapt_optimizer: Optimizer,
    pub epochs_source: usize,
    pub epochs_adapt: usize,
    pub batch_size: usize,
    pub variant: Variant,
    pub freeze_scope: FreezeScope,
    pub confidence: ConfidenceMode,
    pub weight_target: WeightTarget,
    pub local_kl: LocalKl,
    pub inference: Inference,
    pub pl_rounds: usize,
    pub seed: u64,
    pub seeds: Vec<u64>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            weights: LossWeights::default(),
            source_optimizer: Optimizer {
                learning_rate: 1e-2,
                momentum: 0.9,
                weight_decay: 1e-3,
            },
            adapt_optimizer: Optimizer {
                learning_rate: 1e-3,
                momentum: 0.9,
                weight_decay: 1e-3,
            },
            epochs_source: 30,
            epochs_adapt: 15,
            batch_size: 32,
            variant: Variant::Full,
            freeze_scope: FreezeScope::HeadAll,
            confidence: ConfidenceMode::Normalized,
            weight_target: WeightTarget::Logits,
            local_kl: LocalKl::Standard,
            inference: Inference::Plain,
            pl_rounds: 1,
            seed: 42,
            seeds: vec![41, 42, 43, 44, 45],
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, reason: &str| {
            Err(Error::InvalidConfig {
                key: key.into(),
                reason: reason.into(),
            })
        };
        self.weights.validate()?;
        if self.epochs_source == 0 {
            return bad("epochs_source", "must be >= 1");
        }
        if self.epochs_adapt == 0 {
            return bad("epochs_adapt", "must be >= 1");
        }
        if self.batch_size < 2 {
            return bad("batch_size", "must be >= 2");
        }
        if self.pl_rounds == 0 {
            return bad("pl_rounds", "must be >= 1");
        }
        for (prefix, opt) in [("source", &self.source_optimizer), ("adapt", &self.adapt_optimizer)] {
            if !(opt.learning_rate >= 0.0 && opt.learning_rate.is_finite()) {
                return bad(&format!("{prefix}_learning_rate"), "must be finite and >= 0");
            }
            if !(0.0..1.0).contains(&opt.momentum) {
                return bad(&format!("{prefix}_momentum"), "must lie in [0, 1)");
            }
            if !(opt.weight_decay >= 0.0 && opt.weight_decay.is_finite()) {
                return bad(&format!("{prefix}_weight_decay"), "must be finite and >= 0");
            }
        }
        Ok(())
    }
}

/// SGD with heavy-ball momentum and L2 weight decay added to the gradient.
struct Sgd {
    opt: Optimizer,
    velocity: Vec<Option<Tensor>>,
}

impl Sgd {
    fn new(opt: Optimizer, slots: usize) -> Self {
        Sgd {
            opt,
            velocity: vec![None; slots],
        }
    }

    /// Updates every slot that has a gradient; slots without one are left
    /// untouched.
    fn step(&mut self, params: &mut ModelParams, grads: Vec<Option<Tensor>>) {
        let Optimizer {
            learning_rate,
            momentum,
            weight_decay,
        } = self.opt;
        for (((_, _, param), grad), velocity) in params.slots_mut().into_iter().zip(grads).zip(&mut self.velocity) {
            let Some(grad) = grad else { continue };
            let v = velocity.get_or_insert_with(|| Tensor::zeros(grad.shape()));
            for ((v, g), p) in v.data_mut().iter_mut().zip(grad.data()).zip(param.data_mut()) {
                *v = momentum * *v + g + weight_decay * *p;
                *p -= learning_rate * *v;
            }
        }
    }
}

/// One row of a metrics file. Losses that a phase does not compute are `None`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct MetricsRow {
    pub epoch: usize,
    pub ce: Option<f64>,
    pub fc: Option<f64>,
    pub pc_local: Option<f64>,
    pub pc_overall: Option<f64>,
    pub im: Option<f64>,
    pub pl_ce: Option<f64>,
    pub total: f64,
    pub accuracy: Option<f64>,
    pub pl_accuracy: Option<f64>,
}

pub const METRICS_HEADER: &str = "epoch,ce,fc,pc_local,pc_overall,im,pl_ce,total,accuracy,pl_accuracy";

fn cell(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

impl MetricsRow {
    pub fn to_csv(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{}",
            self.epoch,
            cell(self.ce),
            cell(self.fc),
            cell(self.pc_local),
            cell(self.pc_overall),
            cell(self.im),
            cell(self.pl_ce),
            self.total,
            cell(self.accuracy),
            cell(self.pl_accuracy)
        )
    }
}

/// Per-epoch metrics plus wall-clock seconds, kept apart so the metrics
/// file stays byte-reproducible.
#[derive(Debug, Clone, Default)]
pub struct RunLog {
    pub rows: Vec<MetricsRow>,
    pub seconds: Vec<f64>,
}

impl RunLog {
    pub fn metrics_csv(&self) -> String {
        let mut out = String::from(METRICS_HEADER);
        out.push('\n');
        for row in &self.rows {
            out.push_str(&row.to_csv());
            out.push('\n');
        }
        out
    }

    pub fn timings_csv(&self) -> String {
        let mut out = String::from("epoch,seconds\n");
        for (row, s) in self.rows.iter().zip(&self.seconds) {
            out.push_str(&format!("{},{s:.3}\n", row.epoch));
        }
        out
    }

    pub fn write(&self, metrics: impl AsRef<Path>, timings: impl AsRef<Path>) -> Result<()> {
        write_text(metrics.as_ref(), &self.metrics_csv())?;
        write_text(timings.as_ref(), &self.timings_csv())
    }
}

pub(crate) fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn check_dims(hp: &Hyperparams, ds: &Dataset) -> Result<()> {
    for (field, expected, found) in [
        ("C", hp.classes, ds.classes),
        ("k", hp.k, ds.frames()),
        ("d_in", hp.d_in, ds.frame_dim()),
    ] {
        if !ds.is_empty() && expected != found {
            return Err(Error::Dimension {
                field: field.into(),
                expected,
                found,
            });
        }
    }
    Ok(())
}

/// Model dimensions for a dataset, keeping the non-data widths of `base`.
pub fn hyperparams_for(ds: &Dataset, base: Hyperparams) -> Hyperparams {
    Hyperparams {
        k: ds.frames(),
        d_in: ds.frame_dim(),
        classes: ds.classes,
        ..base
    }
}

struct Forward<'g> {
    lts: Vec<Var<'g>>,
    local_logits: Vec<Var<'g>>,
    overall: Var<'g>,
    logits: Var<'g>,
    stats: Option<BatchStats>,
}

struct ForwardOptions {
    mode: Mode,
    local_logits: bool,
    lwm: Option<(Sites, ConfidenceMode, WeightTarget)>,
}

fn forward<'g>(
    model: &BoundModel<'g>,
    batch: &[&VideoSample],
    clips: &[ClipIndexSet],
    opts: &ForwardOptions,
) -> Result<Forward<'g>> {
    let graph = model.encoder.hidden.weight.graph();
    let frames = graph.constant(stack_frames(batch, &model.hyperparams)?)?;
    let encodings = encode_frames(model, frames)?;
    let lts = local_temporal_features(model, encodings, clips)?;
    let mut local_logits = Vec::new();
    if opts.local_logits || opts.lwm.is_some() {
        for lt in &lts {
            local_logits.push(classify(&model.head, *lt, opts.mode)?.logits);
        }
    }
    let overall = match opts.lwm {
        Some((sites, confidence, target)) if sites.any() => {
            let values: Vec<Tensor> = local_logits.iter().map(Var::value).collect();
            let w = lwm::local_relevance_weight(&values, confidence)?;
            let (overall, weighted) = lwm::apply_weights(&lts, &local_logits, &w, sites, target)?;
            local_logits = weighted;
            overall
        }
        _ => aggregate_overall(&lts, None)?,
    };
    let out = classify(&model.head, overall, opts.mode)?;
    Ok(Forward {
        lts,
        local_logits,
        overall,
        logits: out.logits,
        stats: out.batch_stats,
    })
}

/// Eval-mode overall features and logits for every video, in order.
struct Inferred {
    features: Tensor,
    logits: Tensor,
    local: Vec<Tensor>,
}

const EVAL_BATCH: usize = 256;

fn infer(model: &ModelParams, ds: &Dataset, lwm: Option<ConfidenceMode>) -> Result<Inferred> {
    check_dims(&model.hyperparams, ds)?;
    let hp = model.hyperparams;
    let opts = ForwardOptions {
        mode: Mode::Eval,
        local_logits: false,
        lwm: lwm.map(|c| (Sites::FEATURE, c, WeightTarget::Logits)),
    };
    let mut features = Vec::with_capacity(ds.len() * hp.d);
    let mut logits = Vec::with_capacity(ds.len() * hp.classes);
    let mut local = vec![Vec::new(); hp.k - 1];
    for idx in batch_indices(ds.len(), EVAL_BATCH, None, BatchMode::Eval)? {
        let batch: Vec<&VideoSample> = idx.iter().map(|&i| &ds.samples[i]).collect();
        let clips: Vec<ClipIndexSet> = batch.iter().map(|v| eval_clips(&v.id, hp.k, hp.m_max)).collect();
        let graph = Graph::new();
        let bound = model.bind(&graph, |_| false)?;
        let f = forward(&bound, &batch, &clips, &opts)?;
        features.extend(f.overall.value().into_data());
        logits.extend(f.logits.value().into_data());
        for (acc, lt) in local.iter_mut().zip(&f.lts) {
            acc.extend(lt.value().into_data());
        }
    }
    let n = ds.len();
    Ok(Inferred {
        features: Tensor::new(vec![n, hp.d], features)?,
        logits: Tensor::new(vec![n, hp.classes], logits)?,
        local: local
            .into_iter()
            .map(|data| Tensor::new(vec![n, hp.d], data))
            .collect::<Result<_>>()?,
    })
}

/// Eval-mode logits of every video.
pub fn predict(model: &ModelParams, ds: &Dataset, inference: Inference) -> Result<Tensor> {
    let lwm = (inference == Inference::Weighted).then_some(ConfidenceMode::Normalized);
    Ok(infer(model, ds, lwm)?.logits)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub accuracy: f64,
    /// `(correct, total)` per class.
    pub per_class: Vec<(usize, usize)>,
}

fn score(predicted: &[usize], labels: &[usize], classes: usize) -> EvalReport {
    let mut per_class = vec![(0, 0); classes];
    for (&p, &y) in predicted.iter().zip(labels) {
        per_class[y].1 += 1;
        if p == y {
            per_class[y].0 += 1;
        }
    }
    let correct: usize = per_class.iter().map(|c| c.0).sum();
    EvalReport {
        accuracy: correct as f64 / labels.len().max(1) as f64,
        per_class,
    }
}

/// Top-1 accuracy of the overall prediction; ties go to the lowest class.
pub fn evaluate(model: &ModelParams, ds: &Dataset, inference: Inference) -> Result<EvalReport> {
    let labels = ds
        .labels()
        .ok_or_else(|| Error::Dataset("evaluation needs a labeled dataset".into()))?;
    let logits = predict(model, ds, inference)?;
    Ok(score(&logits.argmax_rows(), &labels, ds.classes))
}

fn guard<'g>(loss: Var<'g>, epoch: usize, batch: usize) -> Result<f64> {
    let v = loss.item();
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NonFiniteLoss { epoch, batch })
    }
}

fn non_finite_at(e: Error, epoch: usize, batch: usize) -> Error {
    match e {
        Error::NonFinite { .. } => Error::NonFiniteLoss { epoch, batch },
        other => other,
    }
}

pub struct SourceRun {
    /// Parameters from the epoch with the best source accuracy.
    pub model: ModelParams,
    pub best_epoch: usize,
    pub log: RunLog,
}

/// Trains the whole network on labeled source videos with smoothed
/// cross-entropy.
pub fn train_source(source: &Dataset, hp: Hyperparams, cfg: &RunConfig) -> Result<SourceRun> {
    cfg.validate()?;
    let labels = source
        .labels()
        .ok_or_else(|| Error::Dataset("source requires labels".into()))?;
    let mut model = ModelParams::init(hp, cfg.seed);
    check_dims(&hp, source)?;
    let mut sgd = Sgd::new(cfg.source_optimizer, model.slots().len());
    let mut clip_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "source/clips"));
    let opts = ForwardOptions {
        mode: Mode::Train,
        local_logits: false,
        lwm: None,
    };
    let mut log = RunLog::default();
    let mut best: Option<(f64, usize, ModelParams)> = None;
    for epoch in 1..=cfg.epochs_source {
        let start = Instant::now();
        let shuffle = derive_seed(cfg.seed, &format!("source/shuffle/{epoch}"));
        let mut total = 0.0;
        let batches = batch_indices(source.len(), cfg.batch_size, Some(shuffle), BatchMode::Train)?;
        for (b, idx) in batches.iter().enumerate() {
            let batch: Vec<&VideoSample> = idx.iter().map(|&i| &source.samples[i]).collect();
            let batch_labels: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
            let clips: Vec<ClipIndexSet> = batch.iter().map(|_| sample_clips(hp.k, hp.m_max, &mut clip_rng)).collect();
            let graph = Graph::new();
            let (loss, grads, stats) = (|| {
                let bound = model.bind(&graph, |_| true)?;
                let f = forward(&bound, &batch, &clips, &opts)?;
                let loss = losses::smoothed_cross_entropy(f.logits, &batch_labels, cfg.weights.eps_smooth)?;
                let value = guard(loss, epoch, b)?;
                graph.backward(loss)?;
                Ok((value, bound.gradients(), f.stats))
            })()
            .map_err(|e| non_finite_at(e, epoch, b))?;
            sgd.step(&mut model, grads);
            if let Some(stats) = stats {
                model.head.batch_norm.update_running(&stats);
            }
            total += loss;
        }
        let mean = total / batches.len().max(1) as f64;
        let accuracy = evaluate(&model, source, Inference::Plain)?.accuracy;
        log.rows.push(MetricsRow {
            epoch,
            ce: Some(mean),
            total: mean,
            accuracy: Some(accuracy),
            ..MetricsRow::default()
        });
        log.seconds.push(start.elapsed().as_secs_f64());
        if best.as_ref().is_none_or(|(acc, _, _)| accuracy >= *acc) {
            best = Some((accuracy, epoch, model.clone()));
        }
    }
    let (_, best_epoch, model) = best.expect("at least one epoch");
    Ok(SourceRun {
        model,
        best_epoch,
        log,
    })
}

/// Loss values of one adaptation step.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct StepLosses {
    pub fc: f64,
    pub pc_local: f64,
    pub pc_overall: f64,
    pub im: f64,
    pub pl_ce: f64,
    pub total: f64,
}

pub struct AdaptRun {
    pub model: ModelParams,
    pub log: RunLog,
    /// Loss values of every optimization step, in order.
    pub steps: Vec<StepLosses>,
}

/// Pseudo-labels for every target video from eval-mode weighted features.
pub fn pseudo_labels(model: &ModelParams, target: &Dataset, cfg: &RunConfig) -> Result<Vec<usize>> {
    let lwm = cfg.variant.sites().feature.then_some(cfg.confidence);
    let inferred = infer(model, target, lwm)?;
    generate_pseudo_labels(&inferred.features, &inferred.logits, cfg.pl_rounds)
}

fn adaptation_step<'g>(
    graph: &'g Graph,
    model: &ModelParams,
    batch: &[&VideoSample],
    clips: &[ClipIndexSet],
    pseudo: Option<&[usize]>,
    cfg: &RunConfig,
) -> Result<(StepLosses, Vec<Option<Tensor>>, Option<BatchStats>)> {
    let scope = cfg.freeze_scope;
    let coef = cfg.variant.coefficients(&cfg.weights);
    let w = &cfg.weights;
    let bound = model.bind(graph, |g| !scope.is_frozen(g))?;
    let sites = cfg.variant.sites();
    let opts = ForwardOptions {
        mode: Mode::Train,
        local_logits: coef[1] != 0.0 || coef[2] != 0.0,
        lwm: sites.any().then_some((sites, cfg.confidence, cfg.weight_target)),
    };
    let f = forward(&bound, batch, clips, &opts)?;
    let mut terms: Vec<(f64, Var<'g>)> = Vec::new();
    let mut out = StepLosses::default();
    if coef[0] != 0.0 {
        let fc = losses::feature_consistency_total(&f.lts, w.lambda, w.eps_norm)?;
        out.fc = fc.item();
        terms.push((coef[0], fc));
    }
    if coef[1] != 0.0 || coef[2] != 0.0 {
        let set = PredictionSet::new(f.local_logits.clone(), f.logits)?;
        let (local, overall) = losses::prediction_consistency_terms(&set, cfg.local_kl)?;
        out.pc_local = local.item();
        out.pc_overall = overall.item();
        terms.push((coef[1], local));
        terms.push((coef[2], overall));
    }
    if coef[3] != 0.0 {
        let im = losses::information_maximization(f.logits)?;
        out.im = im.item();
        terms.push((coef[3], im));
    }
    if coef[4] != 0.0 {
        let pl = pseudo.ok_or_else(|| Error::InvalidConfig {
            key: "variant".into(),
            reason: "pseudo-label loss without pseudo-labels".into(),
        })?;
        let ce = losses::pseudo_label_cross_entropy(f.logits, pl)?;
        out.pl_ce = ce.item();
        terms.push((coef[4], ce));
    }
    let mut total: Option<Var<'g>> = None;
    for (c, term) in terms {
        if c == 0.0 {
            continue;
        }
        let scaled = term.scale(c)?;
        total = Some(match total {
            Some(t) => t.add(scaled)?,
            None => scaled,
        });
    }
    let total = total.expect("non-empty objective");
    out.total = total.item();
    graph.backward(total)?;
    Ok((out, bound.gradients(), f.stats))
}

/// Source-free adaptation of `source_model` to unlabeled target videos.
/// Target labels, when present, only feed the diagnostic accuracy columns.
pub fn adapt_target(source_model: &ModelParams, target: &Dataset, cfg: &RunConfig) -> Result<AdaptRun> {
    cfg.validate()?;
    check_dims(&source_model.hyperparams, target)?;
    let hp = source_model.hyperparams;
    let mut model = source_model.clone();
    let coef = cfg.variant.coefficients(&cfg.weights);
    let mut log = RunLog::default();
    let mut steps = Vec::new();
    if coef.iter().all(|&c| c == 0.0) {
        return Ok(AdaptRun { model, log, steps });
    }
    let labels = target.labels();
    let mut sgd = Sgd::new(cfg.adapt_optimizer, model.slots().len());
    let mut clip_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "adapt/clips"));
    for epoch in 1..=cfg.epochs_adapt {
        let start = Instant::now();
        let pseudo = if cfg.variant.uses_pseudo_labels() {
            Some(pseudo_labels(&model, target, cfg)?)
        } else {
            None
        };
        let pl_accuracy = match (&pseudo, &labels) {
            (Some(p), Some(y)) => Some(score(p, y, target.classes).accuracy),
            _ => None,
        };
        let shuffle = derive_seed(cfg.seed, &format!("adapt/shuffle/{epoch}"));
        let batches = batch_indices(target.len(), cfg.batch_size, Some(shuffle), BatchMode::Train)?;
        let mut sum = StepLosses::default();
        for (b, idx) in batches.iter().enumerate() {
            let batch: Vec<&VideoSample> = idx.iter().map(|&i| &target.samples[i]).collect();
            let clips: Vec<ClipIndexSet> = batch.iter().map(|_| sample_clips(hp.k, hp.m_max, &mut clip_rng)).collect();
            let batch_pseudo: Option<Vec<usize>> = pseudo.as_ref().map(|p| idx.iter().map(|&i| p[i]).collect());
            let graph = Graph::new();
            let (losses, grads, stats) =
                adaptation_step(&graph, &model, &batch, &clips, batch_pseudo.as_deref(), cfg)
                    .map_err(|e| non_finite_at(e, epoch, b))?;
            if !losses.total.is_finite() {
                return Err(Error::NonFiniteLoss { epoch, batch: b });
            }
            sgd.step(&mut model, grads);
            if let Some(stats) = stats {
                model.head.batch_norm.update_running(&stats);
            }
            sum.fc += losses.fc;
            sum.pc_local += losses.pc_local;
            sum.pc_overall += losses.pc_overall;
            sum.im += losses.im;
            sum.pl_ce += losses.pl_ce;
            sum.total += losses.total;
            steps.push(losses);
        }
        let n = batches.len().max(1) as f64;
        let on = |c: f64, v: f64| (c != 0.0).then_some(v / n);
        let accuracy = match labels {
            Some(_) => Some(evaluate(&model, target, cfg.inference)?.accuracy),
            None => None,
        };
        log.rows.push(MetricsRow {
            epoch,
            ce: None,
            fc: on(coef[0], sum.fc),
            pc_local: on(coef[1], sum.pc_local),
            pc_overall: on(coef[2], sum.pc_overall),
            im: on(coef[3], sum.im),
            pl_ce: on(coef[4], sum.pl_ce),
            total: sum.total / n,
            accuracy,
            pl_accuracy,
        });
        log.seconds.push(start.elapsed().as_secs_f64());
    }
    check_frozen(source_model, &model, cfg.freeze_scope)?;
    Ok(AdaptRun { model, log, steps })
}

/// Errors if any parameter inside `scope` differs bitwise between models.
pub fn check_frozen(before: &ModelParams, after: &ModelParams, scope: FreezeScope) -> Result<()> {
    for ((group, name, a), (_, _, b)) in before.slots().into_iter().zip(after.slots()) {
        if !scope.is_frozen(group) {
            continue;
        }
        let same = a.shape() == b.shape() && a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits());
        if !same {
            return Err(Error::FrozenDrift(name));
        }
    }
    if scope == FreezeScope::HeadAll && before.head.batch_norm != after.head.batch_norm {
        return Err(Error::FrozenDrift("batch_norm running statistics".into()));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Level {
    Local,
    Overall,
}

impl FromStr for Level {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "local" => Ok(Level::Local),
            "overall" => Ok(Level::Overall),
            _ => Err(Error::InvalidConfig {
                key: "level".into(),
                reason: format!("expected local or overall, got {s:?}"),
            }),
        }
    }
}

/// Eval-mode features as CSV: `id,scale,label,f0..f{d-1}`.
pub fn embeddings_csv(model: &ModelParams, ds: &Dataset, level: Level) -> Result<String> {
    let inferred = infer(model, ds, None)?;
    let d = model.hyperparams.d;
    let mut out = String::from("id,scale,label");
    for j in 0..d {
        out.push_str(&format!(",f{j}"));
    }
    out.push('\n');
    let mut row = |id: &str, scale: &str, label: Option<usize>, values: &[f64]| {
        out.push_str(&format!("{id},{scale},{}", label.map(|y| y.to_string()).unwrap_or_default()));
        for v in values {
            out.push(',');
            out.push_str(&v.to_string());
        }
        out.push('\n');
    };
    for (n, s) in ds.samples.iter().enumerate() {
        match level {
            Level::Overall => row(&s.id, "overall", s.label, inferred.features.row(n)),
            Level::Local => {
                for (i, lt) in inferred.local.iter().enumerate() {
                    row(&s.id, &(i + 2).to_string(), s.label, lt.row(n));
                }
            }
        }
    }
    Ok(out)
}

pub fn export_embeddings(model: &ModelParams, ds: &Dataset, level: Level, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let text = embeddings_csv(model, ds, level)?;
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    w.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

/// Target accuracy per variant (rows) and seed (columns).
#[derive(Debug, Clone, PartialEq)]
pub struct AblationTable {
    pub variants: Vec<Variant>,
    pub seeds: Vec<u64>,
    pub accuracy: Vec<Vec<f64>>,
}

impl AblationTable {
    pub fn mean(&self, variant: Variant) -> Option<f64> {
        let i = self.variants.iter().position(|&v| v == variant)?;
        let row = &self.accuracy[i];
        Some(row.iter().sum::<f64>() / row.len() as f64)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("variant");
        for s in &self.seeds {
            out.push_str(&format!(",seed_{s}"));
        }
        out.push_str(",mean\n");
        for (v, row) in self.variants.iter().zip(&self.accuracy) {
            out.push_str(v.name());
            for a in row {
                out.push_str(&format!(",{a}"));
            }
            out.push_str(&format!(",{}\n", self.mean(*v).unwrap_or(f64::NAN)));
        }
        out
    }
}

/// For each seed: generate both domains, train one source model and adapt
/// it once per variant.
pub fn run_ablation(
    spec: &DomainSpec,
    hp: Hyperparams,
    cfg: &RunConfig,
    variants: &[Variant],
    seeds: &[u64],
) -> Result<AblationTable> {
    let mut accuracy = vec![Vec::with_capacity(seeds.len()); variants.len()];
    for &seed in seeds {
        let spec = DomainSpec { seed, ..spec.clone() };
        let (source, target) = generate_domain_pair(&spec)?;
        let cfg = RunConfig { seed, ..cfg.clone() };
        let hp = hyperparams_for(&source, hp);
        let source_model = train_source(&source, hp, &cfg)?.model;
        for (row, &variant) in accuracy.iter_mut().zip(variants) {
            let cfg = RunConfig { variant, ..cfg.clone() };
            let adapted = adapt_target(&source_model, &target.without_labels(), &cfg)?.model;
            row.push(evaluate(&adapted, &target, cfg.inference)?.accuracy);
        }
    }
    Ok(AblationTable {
        variants: variants.to_vec(),
        seeds: seeds.to_vec(),
        accuracy,
    })
}
