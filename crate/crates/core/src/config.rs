//! Flat run configuration shared by every command.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::groupvae::{VaeSpec, VaeTrainConfig};
use crate::losses::{LossConfig, LossMode, Variant};
use crate::navigator::NavigatorConfig;
use crate::toyworld::{ToyWorld, ToyWorldSpec};
use crate::trainer::{FrozenDirections, TrainConfig};

/// Environment variable that overrides `seed`.
pub const SEED_ENV: &str = "CONTRAFEAT_SEED";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub output_dir: PathBuf,
    pub seed: u64,

    pub world_seed: u64,
    pub z_dim: usize,
    pub n: usize,
    pub k_layers: usize,
    pub image_size: usize,
    pub stages: usize,
    pub extractor_gain: f64,

    pub steps: u64,
    pub batch_size: usize,
    pub m: usize,
    pub k: usize,
    pub lr_navigator: f64,
    pub lr_prototypes: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub clip_norm: f64,
    pub mode: LossMode,
    pub variant: Variant,
    pub lambda: f64,
    pub eps: f64,
    pub length: f64,
    pub sigma: f64,
    /// `"pca"` or a path to a JSON `m x k` coefficient array.
    pub frozen_directions: Option<String>,
    pub freeze_attention: bool,
    pub strength: f64,
    pub pca_samples: usize,
    pub log_every: u64,
    pub checkpoint_every: u64,

    pub eval_samples: usize,
    pub eval_strength: f64,

    pub traverse_steps: usize,
    pub traverse_min: f64,
    pub traverse_max: f64,

    pub mask_samples: usize,

    pub pair_count: usize,
    pub pair_strength: f64,
    pub vae_image_size: usize,
    pub vae_steps: u64,
    pub vae_batch_size: usize,
    pub vae_lr: f64,
    pub vae_likelihood_scale: f64,
    pub vae_group: bool,
    pub metric_samples: usize,
    pub fvm_votes: usize,
    pub mig_bins: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let w = ToyWorldSpec::default();
        let t = TrainConfig::default();
        let v = VaeTrainConfig::default();
        RunConfig {
            output_dir: PathBuf::from("out"),
            seed: t.seed,
            world_seed: w.seed,
            z_dim: w.z_dim,
            n: w.n,
            k_layers: w.k_layers,
            image_size: w.image_size,
            stages: w.stages,
            extractor_gain: w.extractor_gain,
            steps: t.steps,
            batch_size: t.batch_size,
            m: t.m,
            k: t.k,
            lr_navigator: t.lr_navigator,
            lr_prototypes: t.lr_prototypes,
            beta1: t.beta1,
            beta2: t.beta2,
            adam_eps: t.adam_eps,
            clip_norm: t.clip_norm,
            mode: t.loss.mode,
            variant: t.loss.variant,
            lambda: t.loss.lambda,
            eps: t.loss.eps,
            length: t.navigator.length,
            sigma: t.navigator.sigma,
            frozen_directions: None,
            freeze_attention: t.freeze_attention,
            strength: t.strength,
            pca_samples: t.pca_samples,
            log_every: t.log_every,
            checkpoint_every: t.checkpoint_every,
            eval_samples: 200,
            eval_strength: 1.0,
            traverse_steps: 7,
            traverse_min: -2.0,
            traverse_max: 2.0,
            mask_samples: 1000,
            pair_count: 2000,
            pair_strength: 1.0,
            vae_image_size: 16,
            vae_steps: v.steps,
            vae_batch_size: v.batch_size,
            vae_lr: v.lr,
            vae_likelihood_scale: VaeSpec::new(1, 16).likelihood_scale,
            vae_group: v.group,
            metric_samples: 2000,
            fvm_votes: 500,
            mig_bins: 20,
        }
    }
}

impl RunConfig {
    /// Parses a JSON document; unknown keys are an error.
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    /// Applies [`SEED_ENV`] when set.
    pub fn apply_env(&mut self) -> Result<()> {
        if let Ok(v) = std::env::var(SEED_ENV) {
            self.seed = v
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("{SEED_ENV} must be an unsigned integer, got {v:?}")))?;
        }
        Ok(())
    }

    pub fn world_spec(&self) -> ToyWorldSpec {
        ToyWorldSpec {
            seed: self.world_seed,
            z_dim: self.z_dim,
            n: self.n,
            k_layers: self.k_layers,
            image_size: self.image_size,
            stages: self.stages,
            extractor_gain: self.extractor_gain,
        }
    }

    pub fn world(&self) -> Result<ToyWorld> {
        ToyWorld::new(self.world_spec())
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: self.seed,
            steps: self.steps,
            batch_size: self.batch_size,
            m: self.m,
            k: self.k,
            lr_navigator: self.lr_navigator,
            lr_prototypes: self.lr_prototypes,
            beta1: self.beta1,
            beta2: self.beta2,
            adam_eps: self.adam_eps,
            clip_norm: self.clip_norm,
            loss: LossConfig {
                mode: self.mode,
                variant: self.variant,
                lambda: self.lambda,
                eps: self.eps,
            },
            navigator: NavigatorConfig {
                length: self.length,
                sigma: self.sigma,
            },
            frozen_directions: self.frozen_directions.as_deref().map(|s| match s {
                "pca" => FrozenDirections::Pca,
                path => FrozenDirections::File(PathBuf::from(path)),
            }),
            freeze_attention: self.freeze_attention,
            strength: self.strength,
            pca_samples: self.pca_samples,
            log_every: self.log_every,
            checkpoint_every: self.checkpoint_every,
        }
    }

    pub fn vae_spec(&self) -> VaeSpec {
        VaeSpec {
            likelihood_scale: self.vae_likelihood_scale,
            ..VaeSpec::new(self.m, self.vae_image_size)
        }
    }

    pub fn vae_train_config(&self) -> VaeTrainConfig {
        VaeTrainConfig {
            seed: self.seed,
            steps: self.vae_steps,
            batch_size: self.vae_batch_size,
            lr: self.vae_lr,
            group: self.vae_group,
            ..VaeTrainConfig::default()
        }
    }

    /// Checks every section; returns the world it builds along the way.
    pub fn validate(&self) -> Result<ToyWorld> {
        let world = self.world()?;
        self.train_config().validate(&world)?;
        self.vae_spec().validate()?;
        let fail = |msg: &str| Err(Error::Config(msg.into()));
        if self.eval_samples == 0 || self.mask_samples == 0 || self.metric_samples < 2 {
            return fail("eval_samples and mask_samples must be positive, metric_samples at least 2");
        }
        if self.traverse_steps == 0 {
            return fail("traverse_steps must be positive");
        }
        if !(self.traverse_min.is_finite() && self.traverse_max.is_finite() && self.traverse_min <= self.traverse_max) {
            return fail("traverse range must be finite with traverse_min <= traverse_max");
        }
        if !self.eval_strength.is_finite() || !self.pair_strength.is_finite() {
            return fail("strengths must be finite");
        }
        if self.world_spec().image_size % self.vae_image_size != 0 {
            return fail("vae_image_size must divide image_size");
        }
        if self.pair_count == 0 || self.vae_batch_size == 0 || !(self.vae_lr > 0.0) {
            return fail("pair_count, vae_batch_size and vae_lr must be positive");
        }
        if self.fvm_votes == 0 || self.mig_bins < 2 {
            return fail("fvm_votes must be positive and mig_bins at least 2");
        }
        Ok(world)
    }
}
