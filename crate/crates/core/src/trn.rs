//! Temporal relation network: per-frame encoder, one relation MLP per clip
//! length, mean aggregation into an overall feature, and a
//! bottleneck / batch-norm / weight-normalized classifier head.

use std::path::Path;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed::{derive_seed, fnv1a};
use crate::tensorcore::{Graph, Tensor, Var};

pub const CHECKPOINT_VERSION: u32 = 1;
pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.9;

/// One video: `k` ordered per-frame feature vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct VideoSample {
    pub id: String,
    /// `k × d_in`.
    pub frames: Tensor,
    pub label: Option<usize>,
    pub domain: String,
}

impl VideoSample {
    pub fn new(
        id: impl Into<String>,
        frames: Tensor,
        label: Option<usize>,
        domain: impl Into<String>,
    ) -> Result<Self> {
        if frames.shape().len() != 2 || frames.rows() < 3 {
            return Err(Error::Dataset(format!(
                "a video needs at least 3 frames, got shape {:?}",
                frames.shape()
            )));
        }
        Ok(VideoSample {
            id: id.into(),
            frames,
            label,
            domain: domain.into(),
        })
    }

    pub fn num_frames(&self) -> usize {
        self.frames.rows()
    }

    pub fn frame_dim(&self) -> usize {
        self.frames.cols()
    }
}

/// Frame-index tuples per clip length `r ∈ [2, k]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClipIndexSet {
    k: usize,
    scales: Vec<Vec<Vec<usize>>>,
}

impl ClipIndexSet {
    pub fn new(k: usize, scales: Vec<Vec<Vec<usize>>>) -> Result<Self> {
        let set = ClipIndexSet { k, scales };
        set.validate()?;
        Ok(set)
    }

    pub fn k(&self) -> usize {
        self.k
    }

    /// Clips of length `r`.
    pub fn scale(&self, r: usize) -> &[Vec<usize>] {
        &self.scales[r - 2]
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |reason: String| Err(Error::Dataset(format!("invalid clip set: {reason}")));
        if self.k < 3 || self.scales.len() != self.k - 1 {
            return bad(format!("k={} with {} scales", self.k, self.scales.len()));
        }
        for (i, clips) in self.scales.iter().enumerate() {
            let r = i + 2;
            if clips.is_empty() {
                return bad(format!("scale {r} has no clips"));
            }
            for (n, clip) in clips.iter().enumerate() {
                if clip.len() != r {
                    return bad(format!("clip of length {} at scale {r}", clip.len()));
                }
                if clip.windows(2).any(|w| w[0] >= w[1]) {
                    return bad(format!("clip {clip:?} is not strictly increasing"));
                }
                if let Some(&last) = clip.last() {
                    if last >= self.k {
                        return Err(Error::IndexOutOfRange {
                            what: "clip frame index",
                            index: last,
                            bound: self.k,
                        });
                    }
                }
                if clips[..n].contains(clip) {
                    return bad(format!("duplicate clip {clip:?} at scale {r}"));
                }
            }
        }
        Ok(())
    }
}

/// All strictly increasing `r`-tuples from `0..k`, lexicographic.
pub fn combinations(k: usize, r: usize) -> Vec<Vec<usize>> {
    fn rec(start: usize, k: usize, r: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if cur.len() == r {
            out.push(cur.clone());
            return;
        }
        for i in start..k {
            cur.push(i);
            rec(i + 1, k, r, cur, out);
            cur.pop();
        }
    }
    let mut out = Vec::new();
    rec(0, k, r, &mut Vec::with_capacity(r), &mut out);
    out
}

/// Draws `min(m_max, C(k, r))` distinct clips per scale, uniformly without
/// replacement. Chosen clips are returned in lexicographic order.
pub fn sample_clips<R: Rng + ?Sized>(k: usize, m_max: usize, rng: &mut R) -> ClipIndexSet {
    assert!(k >= 3 && m_max >= 1, "sample_clips needs k >= 3 and m_max >= 1");
    let scales = (2..=k)
        .map(|r| {
            let all = combinations(k, r);
            let take = m_max.min(all.len());
            let mut picked = sample(rng, all.len(), take).into_vec();
            picked.sort_unstable();
            picked.into_iter().map(|i| all[i].clone()).collect()
        })
        .collect();
    ClipIndexSet { k, scales }
}

/// Deterministic evaluation-time clips for a video id.
pub fn eval_clips(id: &str, k: usize, m_max: usize) -> ClipIndexSet {
    let mut rng = ChaCha8Rng::seed_from_u64(fnv1a(id.as_bytes()));
    sample_clips(k, m_max, &mut rng)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Hyperparams {
    pub k: usize,
    pub d_in: usize,
    pub enc_hidden: usize,
    pub d_enc: usize,
    pub rel_hidden: usize,
    pub d: usize,
    pub d_b: usize,
    #[serde(rename = "C")]
    pub classes: usize,
    #[serde(rename = "M_max")]
    pub m_max: usize,
}

impl Default for Hyperparams {
    fn default() -> Self {
        Hyperparams {
            k: 5,
            d_in: 32,
            enc_hidden: 64,
            d_enc: 64,
            rel_hidden: 128,
            d: 64,
            d_b: 64,
            classes: 8,
            m_max: 3,
        }
    }
}

mod nested {
    //! Tensors as nested JSON number lists.
    use super::Tensor;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    #[derive(Serialize, Deserialize)]
    #[serde(untagged)]
    enum Nested {
        Matrix(Vec<Vec<f64>>),
        Vector(Vec<f64>),
    }

    pub fn serialize<S: Serializer>(t: &Tensor, s: S) -> Result<S::Ok, S::Error> {
        if t.shape().len() == 2 {
            Nested::Matrix(t.row_iter().map(<[f64]>::to_vec).collect()).serialize(s)
        } else {
            Nested::Vector(t.data().to_vec()).serialize(s)
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Tensor, D::Error> {
        match Nested::deserialize(d)? {
            Nested::Matrix(rows) => Tensor::from_rows(&rows).map_err(serde::de::Error::custom),
            Nested::Vector(v) if !v.is_empty() => Ok(Tensor::vector(v)),
            Nested::Vector(_) => Err(serde::de::Error::custom("empty parameter array")),
        }
    }
}

/// Affine map `x · weight + bias`, `weight` stored `in × out`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    #[serde(with = "nested")]
    pub weight: Tensor,
    #[serde(with = "nested")]
    pub bias: Tensor,
}

impl Linear {
    fn init<R: Rng>(rng: &mut R, fan_in: usize, fan_out: usize) -> Self {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let mut u = |n: usize| (0..n).map(|_| rng.random_range(-bound..bound)).collect();
        Linear {
            weight: Tensor::new(vec![fan_in, fan_out], u(fan_in * fan_out)).unwrap(),
            bias: Tensor::vector(u(fan_out)),
        }
    }
}

/// Two affine layers with a ReLU between them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub hidden: Linear,
    pub output: Linear,
}

impl Mlp {
    fn init<R: Rng>(rng: &mut R, d_in: usize, d_hidden: usize, d_out: usize) -> Self {
        Mlp {
            hidden: Linear::init(rng, d_in, d_hidden),
            output: Linear::init(rng, d_hidden, d_out),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchNorm {
    #[serde(with = "nested")]
    pub gamma: Tensor,
    #[serde(with = "nested")]
    pub beta: Tensor,
    #[serde(with = "nested")]
    pub running_mean: Tensor,
    #[serde(with = "nested")]
    pub running_var: Tensor,
    pub initialized: bool,
}

impl BatchNorm {
    fn new(d: usize) -> Self {
        BatchNorm {
            gamma: Tensor::full(&[d], 1.0),
            beta: Tensor::zeros(&[d]),
            running_mean: Tensor::zeros(&[d]),
            running_var: Tensor::full(&[d], 1.0),
            initialized: false,
        }
    }

    /// Folds one batch into the running statistics.
    pub fn update_running(&mut self, stats: &BatchStats) {
        let blend = |running: &mut Tensor, batch: &[f64]| {
            for (r, b) in running.data_mut().iter_mut().zip(batch) {
                *r = BN_MOMENTUM * *r + (1.0 - BN_MOMENTUM) * b;
            }
        };
        blend(&mut self.running_mean, &stats.mean);
        blend(&mut self.running_var, &stats.var);
        self.initialized = true;
    }
}

/// Weight-normalized affine map: row `c` of the effective weight is
/// `magnitude[c] · direction[c] / ‖direction[c]‖₂`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightNormLinear {
    /// `C × d_b`.
    #[serde(with = "nested")]
    pub direction: Tensor,
    #[serde(with = "nested")]
    pub magnitude: Tensor,
    #[serde(with = "nested")]
    pub bias: Tensor,
}

impl WeightNormLinear {
    fn init<R: Rng>(rng: &mut R, d_in: usize, classes: usize) -> Self {
        let lin = Linear::init(rng, d_in, classes);
        let direction = lin.weight.transpose();
        let magnitude = Tensor::vector(
            direction
                .row_iter()
                .map(|r| r.iter().map(|v| v * v).sum::<f64>().sqrt())
                .collect(),
        );
        WeightNormLinear {
            direction,
            magnitude,
            bias: lin.bias,
        }
    }

    /// Effective `C × d_b` weight.
    pub fn effective_weight(&self) -> Tensor {
        let mut w = self.direction.clone();
        let cols = w.cols();
        for (c, row) in w.data_mut().chunks_mut(cols).enumerate() {
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            let s = self.magnitude.data()[c] / norm;
            row.iter_mut().for_each(|v| *v *= s);
        }
        w
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Head {
    pub bottleneck: Linear,
    pub batch_norm: BatchNorm,
    pub classifier: WeightNormLinear,
}

/// Which part of the network a parameter tensor belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamGroup {
    Encoder,
    Relation,
    Bottleneck,
    BatchNorm,
    Classifier,
}

impl ParamGroup {
    pub fn in_head(self) -> bool {
        matches!(
            self,
            ParamGroup::Bottleneck | ParamGroup::BatchNorm | ParamGroup::Classifier
        )
    }
}

/// Every learnable tensor of the temporal relation network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub hyperparams: Hyperparams,
    pub rng_seed: u64,
    pub encoder: Mlp,
    /// Index `r - 2` holds the relation MLP for clips of length `r`.
    pub relations: Vec<Mlp>,
    pub head: Head,
}

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    format_version: u32,
    #[serde(flatten)]
    model: ModelParams,
}

/// Expands to the `(group, name, tensor)` list of a model. Used for both
/// shared and mutable access so the two orders cannot diverge.
macro_rules! param_layout {
    ($model:expr) => {{
        let ModelParams {
            encoder,
            relations,
            head,
            ..
        } = $model;
        let mut out = Vec::new();
        let mlps = std::iter::once(("encoder".to_string(), ParamGroup::Encoder, encoder)).chain(
            relations
                .into_iter()
                .enumerate()
                .map(|(i, m)| (format!("relation{}", i + 2), ParamGroup::Relation, m)),
        );
        for (name, group, Mlp { hidden, output }) in mlps {
            let Linear { weight, bias } = hidden;
            out.push((group, format!("{name}.hidden.weight"), weight));
            out.push((group, format!("{name}.hidden.bias"), bias));
            let Linear { weight, bias } = output;
            out.push((group, format!("{name}.output.weight"), weight));
            out.push((group, format!("{name}.output.bias"), bias));
        }
        let Head {
            bottleneck: Linear { weight, bias },
            batch_norm: BatchNorm { gamma, beta, .. },
            classifier: WeightNormLinear {
                direction,
                magnitude,
                bias: class_bias,
            },
        } = head;
        out.push((ParamGroup::Bottleneck, "head.bottleneck.weight".to_string(), weight));
        out.push((ParamGroup::Bottleneck, "head.bottleneck.bias".to_string(), bias));
        out.push((ParamGroup::BatchNorm, "head.batch_norm.gamma".to_string(), gamma));
        out.push((ParamGroup::BatchNorm, "head.batch_norm.beta".to_string(), beta));
        out.push((ParamGroup::Classifier, "head.classifier.direction".to_string(), direction));
        out.push((ParamGroup::Classifier, "head.classifier.magnitude".to_string(), magnitude));
        out.push((ParamGroup::Classifier, "head.classifier.bias".to_string(), class_bias));
        out
    }};
}

impl ModelParams {
    /// Uniform fan-in initialization from a seed.
    pub fn init(hp: Hyperparams, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "model-init"));
        let encoder = Mlp::init(&mut rng, hp.d_in, hp.enc_hidden, hp.d_enc);
        let relations = (2..=hp.k)
            .map(|r| Mlp::init(&mut rng, r * hp.d_enc, hp.rel_hidden, hp.d))
            .collect();
        let head = Head {
            bottleneck: Linear::init(&mut rng, hp.d, hp.d_b),
            batch_norm: BatchNorm::new(hp.d_b),
            classifier: WeightNormLinear::init(&mut rng, hp.d_b, hp.classes),
        };
        ModelParams {
            hyperparams: hp,
            rng_seed: seed,
            encoder,
            relations,
            head,
        }
    }
    /// Learnable tensors in a fixed order, with their group and a dotted name.
    pub fn slots(&self) -> Vec<(ParamGroup, String, &Tensor)> {
        param_layout!(self)
    }

    pub fn slots_mut(&mut self) -> Vec<(ParamGroup, String, &mut Tensor)> {
        param_layout!(self)
    }

    pub fn num_parameters(&self) -> usize {
        self.slots().iter().map(|(_, _, t)| t.len()).sum()
    }

    /// Registers every parameter on `graph`; groups rejected by `trainable`
    /// become constants and never receive gradients.
    pub fn bind<'g>(
        &self,
        graph: &'g Graph,
        trainable: impl Fn(ParamGroup) -> bool,
    ) -> Result<BoundModel<'g>> {
        let slots = self
            .slots()
            .into_iter()
            .map(|(group, _, t)| graph.param(t.clone(), trainable(group)))
            .collect::<Result<Vec<_>>>()?;
        let mut it = slots.iter().copied();
        let mut next = || it.next().expect("slot layout");
        let mut linear = || BoundLinear {
            weight: next(),
            bias: next(),
        };
        let mut mlp = || BoundMlp {
            hidden: linear(),
            output: linear(),
        };
        let encoder = mlp();
        let relations = (0..self.relations.len()).map(|_| mlp()).collect();
        let bottleneck = linear();
        let mut next = || it.next().expect("slot layout");
        let bn = &self.head.batch_norm;
        let head = BoundHead {
            bottleneck,
            gamma: next(),
            beta: next(),
            direction: next(),
            magnitude: next(),
            bias: next(),
            running_mean: bn.running_mean.clone(),
            running_var: bn.running_var.clone(),
            stats_ready: bn.initialized,
            bn_frozen: !trainable(ParamGroup::BatchNorm),
        };
        Ok(BoundModel {
            hyperparams: self.hyperparams,
            encoder,
            relations,
            head,
            slots,
        })
    }

    pub fn to_json(&self) -> Result<String> {
        let ckpt = Checkpoint {
            format_version: CHECKPOINT_VERSION,
            model: self.clone(),
        };
        serde_json::to_string(&ckpt).map_err(|e| Error::Checkpoint(e.to_string()))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let ckpt: Checkpoint =
            serde_json::from_str(text).map_err(|e| Error::Checkpoint(e.to_string()))?;
        if ckpt.format_version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported format_version {}",
                ckpt.format_version
            )));
        }
        ckpt.model.validate()?;
        Ok(ckpt.model)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    /// Checks every tensor shape against the stored hyperparameters.
    pub fn validate(&self) -> Result<()> {
        let hp = self.hyperparams;
        if hp.k < 3 || hp.classes < 2 || hp.m_max < 1 {
            return Err(Error::Checkpoint(format!("invalid hyperparameters {hp:?}")));
        }
        if self.relations.len() != hp.k - 1 {
            return Err(Error::Dimension {
                field: "relations".into(),
                expected: hp.k - 1,
                found: self.relations.len(),
            });
        }
        let reference = ModelParams::init(hp, 0);
        for ((_, name, want), (_, _, got)) in reference.slots().into_iter().zip(self.slots()) {
            if want.shape() != got.shape() {
                return Err(Error::Checkpoint(format!(
                    "{name}: expected shape {:?}, found {:?}",
                    want.shape(),
                    got.shape()
                )));
            }
            got.ensure_finite("checkpoint")?;
        }
        let bn = &self.head.batch_norm;
        for (name, t) in [("running_mean", &bn.running_mean), ("running_var", &bn.running_var)] {
            if t.len() != hp.d_b {
                return Err(Error::Dimension {
                    field: format!("head.batch_norm.{name}"),
                    expected: hp.d_b,
                    found: t.len(),
                });
            }
            t.ensure_finite("checkpoint")?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
pub struct BoundLinear<'g> {
    pub weight: Var<'g>,
    pub bias: Var<'g>,
}

impl<'g> BoundLinear<'g> {
    pub fn forward(&self, x: Var<'g>) -> Result<Var<'g>> {
        x.matmul(self.weight)?.add_row(self.bias)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct BoundMlp<'g> {
    pub hidden: BoundLinear<'g>,
    pub output: BoundLinear<'g>,
}

impl<'g> BoundMlp<'g> {
    pub fn forward(&self, x: Var<'g>) -> Result<Var<'g>> {
        self.output.forward(self.hidden.forward(x)?.relu()?)
    }
}

#[derive(Debug, Clone)]
pub struct BoundHead<'g> {
    pub bottleneck: BoundLinear<'g>,
    pub gamma: Var<'g>,
    pub beta: Var<'g>,
    pub direction: Var<'g>,
    pub magnitude: Var<'g>,
    pub bias: Var<'g>,
    running_mean: Tensor,
    running_var: Tensor,
    stats_ready: bool,
    bn_frozen: bool,
}

/// Graph view of a [`ModelParams`].
#[derive(Debug, Clone)]
pub struct BoundModel<'g> {
    pub hyperparams: Hyperparams,
    pub encoder: BoundMlp<'g>,
    pub relations: Vec<BoundMlp<'g>>,
    pub head: BoundHead<'g>,
    slots: Vec<Var<'g>>,
}

impl<'g> BoundModel<'g> {
    /// Accumulated gradients in [`ModelParams::slots`] order.
    pub fn gradients(&self) -> Vec<Option<Tensor>> {
        self.slots.iter().map(|v| v.graph().grad(*v)).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Batch moments observed by a train-mode batch-norm pass.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

pub struct HeadOutput<'g> {
    pub logits: Var<'g>,
    /// Present when the pass normalized with batch moments; the caller folds
    /// them into the running statistics.
    pub batch_stats: Option<BatchStats>,
}

/// Stacks the frames of a batch into a `(B·k) × d_in` matrix.
pub fn stack_frames(batch: &[&VideoSample], hp: &Hyperparams) -> Result<Tensor> {
    let mut data = Vec::with_capacity(batch.len() * hp.k * hp.d_in);
    for v in batch {
        if v.num_frames() != hp.k {
            return Err(Error::Dimension {
                field: format!("frames of video {}", v.id),
                expected: hp.k,
                found: v.num_frames(),
            });
        }
        if v.frame_dim() != hp.d_in {
            return Err(Error::Dimension {
                field: "d_in".into(),
                expected: hp.d_in,
                found: v.frame_dim(),
            });
        }
        data.extend_from_slice(v.frames.data());
    }
    Tensor::new(vec![batch.len() * hp.k, hp.d_in], data)
}

/// Per-frame encodings, `(B·k) × d_in → (B·k) × d_enc`.
pub fn encode_frames<'g>(model: &BoundModel<'g>, frames: Var<'g>) -> Result<Var<'g>> {
    let shape = frames.shape();
    if shape.len() != 2 || shape[1] != model.hyperparams.d_in {
        return Err(Error::Dimension {
            field: "d_in".into(),
            expected: model.hyperparams.d_in,
            found: *shape.last().unwrap_or(&0),
        });
    }
    model.encoder.forward(frames)
}

/// One `B × d` matrix per clip length `r = 2..=k`, each row the sum of the
/// relation MLP over that video's clips.
pub fn local_temporal_features<'g>(
    model: &BoundModel<'g>,
    encodings: Var<'g>,
    clips: &[ClipIndexSet],
) -> Result<Vec<Var<'g>>> {
    let k = model.hyperparams.k;
    let batch = clips.len();
    let rows = encodings.shape()[0];
    if rows != batch * k {
        return Err(Error::Dimension {
            field: "encoded frames".into(),
            expected: batch * k,
            found: rows,
        });
    }
    for c in clips {
        if c.k() != k {
            return Err(Error::Dimension {
                field: "clip set k".into(),
                expected: k,
                found: c.k(),
            });
        }
    }
    let d = model.hyperparams.d;
    let mut out = Vec::with_capacity(k - 1);
    for r in 2..=k {
        let per_video = clips[0].scale(r).len();
        if let Some(c) = clips.iter().find(|c| c.scale(r).len() != per_video) {
            return Err(Error::Dimension {
                field: format!("clips at scale {r}"),
                expected: per_video,
                found: c.scale(r).len(),
            });
        }
        // Row order is (clip slot m, video b).
        let parts = (0..r)
            .map(|j| {
                let index: Vec<usize> = (0..per_video)
                    .flat_map(|m| {
                        clips
                            .iter()
                            .enumerate()
                            .map(move |(b, c)| b * k + c.scale(r)[m][j])
                    })
                    .collect();
                encodings.gather_rows(&index)
            })
            .collect::<Result<Vec<_>>>()?;
        let related = model.relations[r - 2].forward(Var::concat(&parts)?)?;
        let lt = if per_video == 1 {
            related
        } else {
            related
                .reshape(&[per_video, batch * d])?
                .sum_axis0()?
                .reshape(&[batch, d])?
        };
        out.push(lt);
    }
    Ok(out)
}

/// `(1/(k-1)) Σ_r w_r · lt_r`; unit weights when `weights` is `None`.
/// `weights` is `B × (k-1)` and treated as a constant.
pub fn aggregate_overall<'g>(lts: &[Var<'g>], weights: Option<&Tensor>) -> Result<Var<'g>> {
    let scales = lts.len();
    let first = lts.first().ok_or_else(|| Error::InvalidShape {
        shape: vec![],
        reason: "no local features to aggregate".into(),
    })?;
    let graph = first.graph();
    let mut total: Option<Var<'g>> = None;
    for (r, lt) in lts.iter().enumerate() {
        let term = match weights {
            Some(w) => {
                if w.shape() != [lt.shape()[0], scales] {
                    return Err(Error::ShapeMismatch {
                        op: "aggregate_overall",
                        lhs: w.shape().to_vec(),
                        rhs: vec![lt.shape()[0], scales],
                    });
                }
                let col = w.row_iter().map(|row| row[r]).collect();
                lt.mul_col(graph.constant(Tensor::vector(col))?)?
            }
            None => *lt,
        };
        total = Some(match total {
            Some(t) => t.add(term)?,
            None => term,
        });
    }
    total.unwrap().scale(1.0 / scales as f64)
}

/// Classifier head: bottleneck, batch norm, weight-normalized affine map.
///
/// A head bound with frozen batch-norm parameters always normalizes with the
/// running statistics and reports no batch moments.
pub fn classify<'g>(head: &BoundHead<'g>, features: Var<'g>, mode: Mode) -> Result<HeadOutput<'g>> {
    let graph = features.graph();
    let z = head.bottleneck.forward(features)?;
    let (normalized, batch_stats) = if mode == Mode::Train && !head.bn_frozen {
        let mean = z.mean_axis0()?;
        let var = z.variance_axis0()?;
        let inv_std = var.add_scalar(BN_EPS)?.powf(-0.5)?;
        let normalized = z.add_row(mean.scale(-1.0)?)?.mul_row(inv_std)?;
        let stats = BatchStats {
            mean: mean.value().into_data(),
            var: var.value().into_data(),
        };
        (normalized, Some(stats))
    } else {
        if !head.stats_ready {
            return Err(Error::UninitializedBatchNorm);
        }
        let neg_mean = head.running_mean.data().iter().map(|m| -m).collect();
        let inv_std = head
            .running_var
            .data()
            .iter()
            .map(|v| 1.0 / (v + BN_EPS).sqrt())
            .collect();
        let normalized = z
            .add_row(graph.constant(Tensor::vector(neg_mean))?)?
            .mul_row(graph.constant(Tensor::vector(inv_std))?)?;
        (normalized, None)
    };
    let y = normalized.mul_row(head.gamma)?.add_row(head.beta)?;
    let row_scale = head
        .magnitude
        .mul(head.direction.square()?.sum_axis1()?.powf(-0.5)?)?;
    let weight = head.direction.mul_col(row_scale)?;
    let logits = y.matmul(weight.transpose()?)?.add_row(head.bias)?;
    Ok(HeadOutput {
        logits,
        batch_stats,
    })
}
