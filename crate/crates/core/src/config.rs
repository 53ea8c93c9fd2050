//! `key = value` experiment configuration.
//!
//! Blank lines and lines starting with `#` are ignored. Every key has a
//! default; unknown keys are rejected. Floats are written in Rust's
//! shortest round-trip form so `parse(emit(c)) == c`.

use std::path::Path;

use crate::error::{Error, Result};
use crate::losses::LocalKl;
use crate::lwm::{ConfidenceMode, WeightTarget};
use crate::pipeline::{Inference, RunConfig};
use crate::synthdata::DomainSpec;
use crate::trn::Hyperparams;

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ExperimentConfig {
    pub domain: DomainSpec,
    pub model: Hyperparams,
    pub run: RunConfig,
}

fn invalid(key: &str, value: &str, what: &str) -> Error {
    Error::InvalidConfig {
        key: key.into(),
        reason: format!("{value:?} is not {what}"),
    }
}

fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value.parse().map_err(|_| invalid(key, value, "a number"))
}

fn seed_list(key: &str, value: &str) -> Result<Vec<u64>> {
    value
        .split(',')
        .map(|s| num(key, s.trim()))
        .collect::<Result<Vec<u64>>>()
        .and_then(|v| {
            if v.is_empty() {
                Err(invalid(key, value, "a seed list"))
            } else {
                Ok(v)
            }
        })
}

fn confidence_name(c: ConfidenceMode) -> &'static str {
    match c {
        ConfidenceMode::Normalized => "normalized",
        ConfidenceMode::Raw => "raw",
    }
}

fn target_name(t: WeightTarget) -> &'static str {
    match t {
        WeightTarget::Logits => "logits",
        WeightTarget::Probabilities => "probabilities",
    }
}

fn kl_name(k: LocalKl) -> &'static str {
    match k {
        LocalKl::Standard => "standard",
        LocalKl::Literal => "literal_eq8",
    }
}

fn inference_name(i: Inference) -> &'static str {
    match i {
        Inference::Plain => "plain",
        Inference::Weighted => "weighted",
    }
}

impl ExperimentConfig {
    /// Model dimensions with `k`, `d_in` and `C` taken from the domain.
    pub fn hyperparams(&self) -> Hyperparams {
        Hyperparams {
            k: self.domain.frames,
            d_in: self.domain.frame_dim,
            classes: self.domain.classes,
            ..self.model
        }
    }

    /// Every key with its current value, in file order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let (d, m, r) = (&self.domain, &self.model, &self.run);
        let w = &r.weights;
        let f = |x: f64| format!("{x:?}");
        vec![
            ("C", d.classes.to_string()),
            ("videos_per_class", d.videos_per_class.to_string()),
            ("k", d.frames.to_string()),
            ("d_in", d.frame_dim.to_string()),
            ("shift_severity", f(d.shift_severity)),
            ("noise_std", f(d.noise_std)),
            ("enc_hidden", m.enc_hidden.to_string()),
            ("d_enc", m.d_enc.to_string()),
            ("rel_hidden", m.rel_hidden.to_string()),
            ("d", m.d.to_string()),
            ("d_b", m.d_b.to_string()),
            ("M_max", m.m_max.to_string()),
            ("lambda", f(w.lambda)),
            ("alpha_local", f(w.alpha_local)),
            ("alpha_overall", f(w.alpha_overall)),
            ("beta_fc", f(w.beta_fc)),
            ("beta_pc", f(w.beta_pc)),
            ("beta_tc", f(w.beta_tc)),
            ("beta_im", f(w.beta_im)),
            ("beta_ce", f(w.beta_ce)),
            ("eps_norm", f(w.eps_norm)),
            ("eps_smooth", f(w.eps_smooth)),
            ("source_learning_rate", f(r.source_optimizer.learning_rate)),
            ("source_momentum", f(r.source_optimizer.momentum)),
            ("source_weight_decay", f(r.source_optimizer.weight_decay)),
            ("adapt_learning_rate", f(r.adapt_optimizer.learning_rate)),
            ("adapt_momentum", f(r.adapt_optimizer.momentum)),
            ("adapt_weight_decay", f(r.adapt_optimizer.weight_decay)),
            ("epochs_source", r.epochs_source.to_string()),
            ("epochs_adapt", r.epochs_adapt.to_string()),
            ("batch_size", r.batch_size.to_string()),
            ("variant", r.variant.name().into()),
            ("freeze_scope", r.freeze_scope.name().into()),
            ("confidence_mode", confidence_name(r.confidence).into()),
            ("weight_target", target_name(r.weight_target).into()),
            ("local_kl", kl_name(r.local_kl).into()),
            ("inference", inference_name(r.inference).into()),
            ("pl_rounds", r.pl_rounds.to_string()),
            ("seed", r.seed.to_string()),
            (
                "seeds",
                r.seeds.iter().map(u64::to_string).collect::<Vec<_>>().join(","),
            ),
        ]
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let value = value.trim();
        let (d, m, r) = (&mut self.domain, &mut self.model, &mut self.run);
        let w = &mut r.weights;
        match key {
            "C" => d.classes = num(key, value)?,
            "videos_per_class" => d.videos_per_class = num(key, value)?,
            "k" => d.frames = num(key, value)?,
            "d_in" => d.frame_dim = num(key, value)?,
            "shift_severity" => d.shift_severity = num(key, value)?,
            "noise_std" => d.noise_std = num(key, value)?,
            "enc_hidden" => m.enc_hidden = num(key, value)?,
            "d_enc" => m.d_enc = num(key, value)?,
            "rel_hidden" => m.rel_hidden = num(key, value)?,
            "d" => m.d = num(key, value)?,
            "d_b" => m.d_b = num(key, value)?,
            "M_max" => m.m_max = num(key, value)?,
            "lambda" => w.lambda = num(key, value)?,
            "alpha_local" => w.alpha_local = num(key, value)?,
            "alpha_overall" => w.alpha_overall = num(key, value)?,
            "beta_fc" => w.beta_fc = num(key, value)?,
            "beta_pc" => w.beta_pc = num(key, value)?,
            "beta_tc" => w.beta_tc = num(key, value)?,
            "beta_im" => w.beta_im = num(key, value)?,
            "beta_ce" => w.beta_ce = num(key, value)?,
            "eps_norm" => w.eps_norm = num(key, value)?,
            "eps_smooth" => w.eps_smooth = num(key, value)?,
            "source_learning_rate" => r.source_optimizer.learning_rate = num(key, value)?,
            "source_momentum" => r.source_optimizer.momentum = num(key, value)?,
            "source_weight_decay" => r.source_optimizer.weight_decay = num(key, value)?,
            "adapt_learning_rate" => r.adapt_optimizer.learning_rate = num(key, value)?,
            "adapt_momentum" => r.adapt_optimizer.momentum = num(key, value)?,
            "adapt_weight_decay" => r.adapt_optimizer.weight_decay = num(key, value)?,
            "epochs_source" => r.epochs_source = num(key, value)?,
            "epochs_adapt" => r.epochs_adapt = num(key, value)?,
            "batch_size" => r.batch_size = num(key, value)?,
            "variant" => r.variant = value.parse()?,
            "freeze_scope" => r.freeze_scope = value.parse()?,
            "confidence_mode" => {
                r.confidence = match value {
                    "normalized" => ConfidenceMode::Normalized,
                    "raw" => ConfidenceMode::Raw,
                    _ => return Err(invalid(key, value, "normalized or raw")),
                }
            }
            "weight_target" => {
                r.weight_target = match value {
                    "logits" => WeightTarget::Logits,
                    "probabilities" => WeightTarget::Probabilities,
                    _ => return Err(invalid(key, value, "logits or probabilities")),
                }
            }
            "local_kl" => {
                r.local_kl = match value {
                    "standard" => LocalKl::Standard,
                    "literal_eq8" => LocalKl::Literal,
                    _ => return Err(invalid(key, value, "standard or literal_eq8")),
                }
            }
            "inference" => {
                r.inference = match value {
                    "plain" => Inference::Plain,
                    "weighted" => Inference::Weighted,
                    _ => return Err(invalid(key, value, "plain or weighted")),
                }
            }
            "pl_rounds" => r.pl_rounds = num(key, value)?,
            "seed" => {
                r.seed = num(key, value)?;
                d.seed = r.seed;
            }
            "seeds" => r.seeds = seed_list(key, value)?,
            _ => return Err(Error::UnknownKey(key.into())),
        }
        Ok(())
    }

    /// Applies `key = value` lines on top of the current values.
    pub fn apply_text(&mut self, text: &str, origin: &str) -> Result<()> {
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| Error::Parse {
                path: origin.into(),
                line: i + 1,
                reason: "expected `key = value`".into(),
            })?;
            self.set(key.trim(), value)?;
        }
        Ok(())
    }

    /// Applies a `key=value` override.
    pub fn apply_override(&mut self, item: &str) -> Result<()> {
        let (key, value) = item.split_once('=').ok_or_else(|| Error::InvalidConfig {
            key: item.into(),
            reason: "expected key=value".into(),
        })?;
        self.set(key.trim(), value)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = ExperimentConfig::default();
        cfg.apply_text(text, "<config>")?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = ExperimentConfig::default();
        cfg.apply_text(&text, &path.display().to_string())?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn emit(&self) -> String {
        self.entries()
            .into_iter()
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        self.domain.validate()?;
        self.run.validate()?;
        let m = &self.model;
        for (key, v) in [
            ("enc_hidden", m.enc_hidden),
            ("d_enc", m.d_enc),
            ("rel_hidden", m.rel_hidden),
            ("d", m.d),
            ("d_b", m.d_b),
            ("M_max", m.m_max),
        ] {
            if v == 0 {
                return Err(Error::InvalidConfig {
                    key: key.into(),
                    reason: "must be positive".into(),
                });
            }
        }
        Ok(())
    }
}
