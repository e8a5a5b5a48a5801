//! AdamW, freeze plans, and staged pre-training / fine-tuning.

mod optim;
mod plan;
mod run;
pub(crate) mod step;

pub use optim::{decays, AdamState, AdamW};
pub use plan::FreezePlan;
pub use run::{evaluate, fixed_sample, merge_trainable, run_stage, run_stage_pairs, select_entries, stage_tag, starting_model, StageOutcome, METRICS_HEADER};
pub use step::{coarse_quality, prepare_sample, train_step, CoarseQuality, Sample, StepReport};

use crate::augment::AugmentConfig;
use crate::error::{Error, Result};
use crate::losses::{CoarseNorm, LossWeights};
use crate::matching::MatchParams;
use crate::model::{ForwardOptions, ModelConfig, Phase};
use crate::synthdata::Modality;

/// Component switches A to E; `true` means the component is enabled.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Ablation {
    /// A: data augmentation.
    pub augmentation: bool,
    /// B: generic FFN.
    pub generic_ffn: bool,
    /// C: assistant FFNs.
    pub assistant_ffn: bool,
    /// D: start from a pretrained checkpoint.
    pub use_pretrained: bool,
    /// E: run fine-tuning stages.
    pub finetune: bool,
}

impl Default for Ablation {
    fn default() -> Self {
        Ablation {
            augmentation: true,
            generic_ffn: true,
            assistant_ffn: true,
            use_pretrained: true,
            finetune: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StageConfig {
    pub phase: Phase,
    pub modality_a: Modality,
    pub modality_b: Modality,
    pub steps: usize,
    pub lr: f64,
    pub weights: LossWeights,
    pub tau: f64,
    pub theta: f64,
    pub coarse_norm: CoarseNorm,
    pub model: ModelConfig,
    pub ablation: Ablation,
    pub seed: u64,
    /// Fine-tuning stages train on a seeded tenth of the manifest.
    pub tenth: bool,
    pub eq5_plus_one: bool,
    /// Augmented crop side in pixels.
    pub crop: usize,
    /// Pairs accumulated per optimizer step.
    pub accumulate: usize,
    pub checkpoint_every: usize,
    /// Held-out evaluation period in steps; 0 evaluates only at the end.
    pub eval_every: usize,
    /// Fraction of the selected pairs held out for evaluation.
    pub holdout: f64,
    /// Draw a new augmentation every time a pair is visited; otherwise each pair
    /// keeps one augmentation for the whole stage.
    pub fresh_augment: bool,
}

impl Default for StageConfig {
    fn default() -> Self {
        StageConfig {
            phase: Phase::Pretrain1,
            modality_a: Modality::Opt,
            modality_b: Modality::Opt,
            steps: 100,
            lr: 1e-4,
            weights: LossWeights::default(),
            tau: 0.1,
            theta: 0.2,
            coarse_norm: CoarseNorm::Entries,
            model: ModelConfig::default(),
            ablation: Ablation::default(),
            seed: 0,
            tenth: true,
            eq5_plus_one: true,
            crop: 64,
            accumulate: 1,
            checkpoint_every: 100,
            eval_every: 0,
            holdout: 0.1,
            fresh_augment: true,
        }
    }
}

/// Keys accepted in configuration files.
pub const CONFIG_KEYS: &[&str] = &[
    "stage",
    "modality_a",
    "modality_b",
    "steps",
    "lr",
    "alpha",
    "beta",
    "lambda",
    "n_q",
    "tau",
    "theta",
    "layers",
    "hidden",
    "heads",
    "m_top",
    "seed",
    "ablate_A",
    "ablate_B",
    "ablate_C",
    "ablate_D",
    "ablate_E",
    "tenth",
    "eq5_plus_one",
    "coarse_norm",
    "crop",
    "accumulate",
    "checkpoint_every",
    "eval_every",
    "holdout",
    "fresh_augment",
];

pub fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v.to_ascii_lowercase().as_str() {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(Error::Config(format!("`{key}` expects a boolean, got `{v}`"))),
    }
}

fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    v.parse().map_err(|e| Error::Config(format!("`{key}`: {e}")))
}

impl StageConfig {
    /// Sets one configuration key.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "stage" => self.phase = v.parse()?,
            "modality_a" => self.modality_a = v.parse().map_err(|e: Error| Error::Config(e.to_string()))?,
            "modality_b" => self.modality_b = v.parse().map_err(|e: Error| Error::Config(e.to_string()))?,
            "steps" => self.steps = num(key, v)?,
            "lr" => self.lr = num(key, v)?,
            "alpha" => self.weights.alpha = num(key, v)?,
            "beta" => self.weights.beta = num(key, v)?,
            "lambda" => self.weights.lambda = num(key, v)?,
            "n_q" => self.weights.n_q = num(key, v)?,
            "tau" => self.tau = num(key, v)?,
            "theta" => self.theta = num(key, v)?,
            "layers" => self.model.layers = num(key, v)?,
            "hidden" => {
                let d: usize = num(key, v)?;
                self.model.d = d;
                self.model.d_ffn = 2 * d;
                self.model.d_coarse = d;
                self.model.d_fine = (d / 2).max(1);
            }
            "heads" => self.model.heads = num(key, v)?,
            "m_top" => self.model.m_top = num(key, v)?,
            "seed" => self.seed = num(key, v)?,
            "ablate_A" => self.ablation.augmentation = !parse_bool(key, v)?,
            "ablate_B" => self.ablation.generic_ffn = !parse_bool(key, v)?,
            "ablate_C" => self.ablation.assistant_ffn = !parse_bool(key, v)?,
            "ablate_D" => self.ablation.use_pretrained = !parse_bool(key, v)?,
            "ablate_E" => self.ablation.finetune = !parse_bool(key, v)?,
            "tenth" => self.tenth = parse_bool(key, v)?,
            "eq5_plus_one" => self.eq5_plus_one = parse_bool(key, v)?,
            "coarse_norm" => self.coarse_norm = v.parse()?,
            "crop" => self.crop = num(key, v)?,
            "accumulate" => self.accumulate = num(key, v)?,
            "checkpoint_every" => self.checkpoint_every = num(key, v)?,
            "eval_every" => self.eval_every = num(key, v)?,
            "holdout" => self.holdout = num(key, v)?,
            "fresh_augment" => self.fresh_augment = parse_bool(key, v)?,
            other => return Err(Error::Config(format!("unknown configuration key `{other}`"))),
        }
        Ok(())
    }

    /// Applies `key = value` lines; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (no, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", no + 1)))?;
            self.set(k.trim(), v)?;
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = StageConfig::default();
        cfg.apply_text(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.weights.validate()?;
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if !(self.tau > 0.0) {
            return Err(Error::Config("tau must be positive".into()));
        }
        if self.accumulate == 0 {
            return Err(Error::Config("accumulate must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.holdout) {
            return Err(Error::Config("holdout must lie in [0, 1)".into()));
        }
        if self.crop % 8 != 0 || self.crop == 0 {
            return Err(Error::Config(format!("crop {} must be a positive multiple of 8", self.crop)));
        }
        self.phase
            .check_pair(self.modality_a, self.modality_b)
            .map_err(|e| Error::Config(e.to_string()))
    }

    pub fn augment_config(&self) -> AugmentConfig {
        let mut a = if self.ablation.augmentation {
            AugmentConfig {
                crop_h: self.crop,
                crop_w: self.crop,
                ..Default::default()
            }
        } else {
            AugmentConfig::disabled(self.crop, 8)
        };
        a.eq5_plus_one = self.eq5_plus_one;
        a
    }

    pub fn forward_options(&self) -> ForwardOptions {
        ForwardOptions {
            phase: self.phase,
            generic_ffn: self.ablation.generic_ffn,
            assistant_ffn: self.ablation.assistant_ffn,
        }
    }

    pub fn match_params(&self) -> MatchParams {
        MatchParams {
            tau: self.tau,
            theta: self.theta,
            window: None,
        }
    }

    pub fn plan(&self) -> Result<FreezePlan> {
        FreezePlan::build(self.phase, self.modality_a, self.modality_b, &self.ablation)
    }

    pub fn optimizer(&self) -> AdamW {
        AdamW {
            lr: self.lr,
            ..Default::default()
        }
    }

    pub fn is_finetune(&self) -> bool {
        matches!(self.phase, Phase::FinetuneSame | Phase::FinetuneCross)
    }
}

#[cfg(test)]
mod tests;
