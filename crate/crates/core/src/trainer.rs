//! Training loop for the navigator (and prototypes for the prototype
//! variant).

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use log::{debug, info, warn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adam::{clip_global_norm, Adam, AdamConfig};
use crate::error::{Error, Result};
use crate::latent::{compute_pca, PcaBasis};
use crate::losses::{total_loss, Batch, LossConfig, Objective, PrototypeBank, Variant};
use crate::navigator::{Freeze, NavigatorConfig, NavigatorParams};
use crate::toyworld::ToyWorld;

/// Where frozen directions come from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FrozenDirections {
    /// The first `m` principal components.
    Pca,
    /// A JSON file holding an `m x k` array of subspace coefficients.
    File(PathBuf),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub seed: u64,
    pub steps: u64,
    pub batch_size: usize,
    /// Number of directions.
    pub m: usize,
    /// PCA subspace size.
    pub k: usize,
    pub lr_navigator: f64,
    pub lr_prototypes: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub clip_norm: f64,
    pub loss: LossConfig,
    pub navigator: NavigatorConfig,
    pub frozen_directions: Option<FrozenDirections>,
    /// Keep attention uniform (the attention ablation).
    pub freeze_attention: bool,
    pub strength: f64,
    pub pca_samples: usize,
    pub log_every: u64,
    /// Checkpoint period when an output directory is given; 0 keeps only
    /// the final checkpoint.
    pub checkpoint_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            seed: 0,
            steps: 10_000,
            batch_size: 8,
            m: 6,
            k: 8,
            lr_navigator: 0.05,
            lr_prototypes: 0.01,
            beta1: 0.0,
            beta2: 0.99,
            adam_eps: 1e-8,
            clip_norm: 10.0,
            loss: LossConfig::default(),
            navigator: NavigatorConfig::default(),
            frozen_directions: None,
            freeze_attention: false,
            strength: 1.0,
            pca_samples: 50_000,
            log_every: 50,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, world: &ToyWorld) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.batch_size == 0 || self.m == 0 || self.k == 0 {
            return fail("batch_size, m and k must be positive".into());
        }
        if self.m < 2 {
            return fail(format!("the orthogonality term needs m >= 2, got m = {}", self.m));
        }
        if self.k > world.n() {
            return fail(format!("k = {} exceeds latent dimension {}", self.k, world.n()));
        }
        if self.pca_samples < 2 {
            return fail("pca_samples must be at least 2".into());
        }
        if self.log_every == 0 {
            return fail("log_every must be positive".into());
        }
        for (name, v) in [
            ("lr_navigator", self.lr_navigator),
            ("lr_prototypes", self.lr_prototypes),
            ("adam_eps", self.adam_eps),
            ("clip_norm", self.clip_norm),
            ("length", self.navigator.length),
            ("sigma", self.navigator.sigma),
        ] {
            if !(v > 0.0) || !v.is_finite() {
                return fail(format!("{name} must be positive, got {v}"));
            }
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return fail("Adam betas must lie in [0, 1)".into());
        }
        if !self.strength.is_finite() {
            return fail("strength must be finite".into());
        }
        if self.frozen_directions == Some(FrozenDirections::Pca) && self.m > self.k {
            return fail(format!("cannot freeze {} principal directions with k = {}", self.m, self.k));
        }
        self.loss.validate()
    }

    pub fn freeze(&self) -> Freeze {
        Freeze {
            directions: self.frozen_directions.is_some(),
            attention: self.freeze_attention,
        }
    }

    pub fn objective(&self) -> Objective {
        Objective {
            loss: self.loss,
            navigator: self.navigator,
            freeze: self.freeze(),
            strength: self.strength,
        }
    }

    fn adam(&self, lr: f64) -> AdamConfig {
        AdamConfig {
            lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.adam_eps,
        }
    }
}

/// Loss terms of one step.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub loss: f64,
    pub cons: f64,
    pub orth: f64,
    pub div: f64,
}

/// Everything needed to continue training bit-exactly.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub config: TrainConfig,
    pub step: u64,
    pub basis: PcaBasis,
    pub params: NavigatorParams,
    pub bank: Option<PrototypeBank>,
    pub adam_v_sub: Adam,
    pub adam_logits: Adam,
    pub adam_prototypes: Option<Adam>,
    pub rng: ChaCha8Rng,
}

/// Samples base codes with a stream separate from the training stream.
pub fn pca_for_world(world: &ToyWorld, samples: usize, seed: u64) -> Result<PcaBasis> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    let codes: Vec<_> = (0..samples).map(|_| world.sample_w0(&mut rng)).collect();
    compute_pca(&codes)
}

fn load_frozen_rows(path: &Path) -> Result<Vec<Vec<f64>>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

impl TrainState {
    pub fn init(config: &TrainConfig, world: &ToyWorld) -> Result<Self> {
        config.validate(world)?;
        let basis = pca_for_world(world, config.pca_samples, config.seed)?;
        Self::init_with_basis(config, world, basis)
    }

    pub fn init_with_basis(config: &TrainConfig, world: &ToyWorld, basis: PcaBasis) -> Result<Self> {
        config.validate(world)?;
        if basis.dim != world.n() {
            return Err(Error::Config("PCA basis dimension differs from the world".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let k_layers = world.k_layers();
        let params = match &config.frozen_directions {
            None => NavigatorParams::init(config.m, config.k, k_layers, &mut rng)?,
            Some(FrozenDirections::Pca) => NavigatorParams::pca_top(config.m, config.k, k_layers)?,
            Some(FrozenDirections::File(path)) => {
                let p = NavigatorParams::from_rows(&load_frozen_rows(path)?, k_layers)?;
                if (p.m, p.k) != (config.m, config.k) {
                    return Err(Error::Config(format!(
                        "frozen directions are {}x{}, config expects {}x{}",
                        p.m, p.k, config.m, config.k
                    )));
                }
                p
            }
        };
        let bank = match config.loss.variant {
            Variant::Pt => Some(PrototypeBank::init(config.m, world.image_size(), &mut rng)),
            Variant::Bi => None,
        };
        Ok(TrainState {
            config: config.clone(),
            step: 0,
            adam_v_sub: Adam::new(config.adam(config.lr_navigator), params.v_sub.len()),
            adam_logits: Adam::new(config.adam(config.lr_navigator), params.att_logits.len()),
            adam_prototypes: bank
                .as_ref()
                .map(|b| Adam::new(config.adam(config.lr_prototypes), b.patterns.len())),
            basis,
            params,
            bank,
            rng,
        })
    }

    fn sample_batch(&mut self, world: &ToyWorld) -> Batch {
        let m = self.config.m;
        let d = self.rng.gen_range(0..m);
        let mut d_other = self.rng.gen_range(0..m - 1);
        if d_other >= d {
            d_other += 1;
        }
        let b = self.config.batch_size;
        let xs = (0..b).map(|_| world.sample_code(&mut self.rng)).collect();
        let ys = match self.config.loss.variant {
            Variant::Bi => (0..b).map(|_| world.sample_code(&mut self.rng)).collect(),
            Variant::Pt => Vec::new(),
        };
        Batch { d, d_other, xs, ys }
    }

    /// One Adam update. Returns the loss before the update.
    pub fn train_step(&mut self, world: &ToyWorld) -> Result<StepRecord> {
        let batch = self.sample_batch(world);
        let objective = self.config.objective();
        let out = total_loss(&batch, &self.params, self.bank.as_ref(), &self.basis, &objective, world)?;
        let record = StepRecord {
            step: self.step,
            loss: out.total,
            cons: out.cons,
            orth: out.orth,
            div: out.div,
        };
        let mut gv = out.grad_v_sub;
        let mut gl = out.grad_att_logits;
        let mut gp = out.grad_prototypes.unwrap_or_default();
        let finite = |v: &[f64]| v.iter().all(|x| x.is_finite());
        if !out.total.is_finite() || !finite(&gv) || !finite(&gl) || !finite(&gp) {
            return Err(Error::NonFinite {
                step: self.step,
                direction: batch.d,
                mode: format!("{}/{}", self.config.loss.variant.name(), self.config.loss.mode.name()),
                detail: format!(
                    "loss {} (cons {}, orth {}, div {})",
                    out.total, out.cons, out.orth, out.div
                ),
            });
        }
        let norm = clip_global_norm(&mut [&mut gv, &mut gl, &mut gp], self.config.clip_norm);
        if norm > self.config.clip_norm {
            debug!("step {}: clipped gradient norm {norm:.3}", self.step);
        }
        let freeze = self.config.freeze();
        if !freeze.directions {
            self.adam_v_sub.step(&mut self.params.v_sub, &gv);
        }
        if !freeze.attention {
            self.adam_logits.step(&mut self.params.att_logits, &gl);
        }
        if let (Some(bank), Some(adam)) = (self.bank.as_mut(), self.adam_prototypes.as_mut()) {
            adam.step(&mut bank.patterns, &gp);
        }
        if !freeze.directions {
            for d in self.params.clamp_rows(&mut self.rng) {
                warn!("step {}: direction {d} collapsed and was re-drawn", self.step);
            }
        }
        self.step += 1;
        Ok(record)
    }
}

/// Per-interval means of a step trace. Windows are aligned to absolute step
/// numbers (`[j * every, (j + 1) * every)`), so a trace split at a window
/// boundary gives the same rows as the whole trace.
pub fn interval_means(trace: &[StepRecord], every: u64) -> Vec<StepRecord> {
    trace
        .chunk_by(|a, b| a.step / every == b.step / every)
        .map(|chunk| {
            let n = chunk.len() as f64;
            let mean = |f: fn(&StepRecord) -> f64| chunk.iter().map(f).sum::<f64>() / n;
            StepRecord {
                step: chunk.last().expect("non-empty chunk").step + 1,
                loss: mean(|r| r.loss),
                cons: mean(|r| r.cons),
                orth: mean(|r| r.orth),
                div: mean(|r| r.div),
            }
        })
        .collect()
}

pub fn write_loss_csv(path: &Path, rows: &[StepRecord], append: bool) -> Result<()> {
    let mut file = fs::OpenOptions::new()
        .create(true)
        .write(true)
        .append(append)
        .truncate(!append)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    let mut text = String::new();
    if !append {
        text.push_str("step,loss,cons,orth,div\n");
    }
    for r in rows {
        text.push_str(&format!("{},{},{},{},{}\n", r.step, r.loss, r.cons, r.orth, r.div));
    }
    file.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
}

/// Runs `steps` more steps, calling `on_checkpoint` every
/// `checkpoint_every` steps. Returns the per-step trace.
pub fn run(
    state: &mut TrainState,
    world: &ToyWorld,
    steps: u64,
    mut on_checkpoint: impl FnMut(&TrainState) -> Result<()>,
) -> Result<Vec<StepRecord>> {
    let mut trace = Vec::with_capacity(steps as usize);
    let every = state.config.checkpoint_every;
    for _ in 0..steps {
        let rec = state.train_step(world)?;
        if (rec.step + 1) % state.config.log_every == 0 {
            let tail = &trace[trace.len().saturating_sub(state.config.log_every as usize - 1)..];
            let mean = (tail.iter().map(|r: &StepRecord| r.loss).sum::<f64>() + rec.loss) / (tail.len() + 1) as f64;
            info!("step {:>6}  loss {mean:.5}", rec.step + 1);
        }
        trace.push(rec);
        if every > 0 && state.step % every == 0 {
            on_checkpoint(state)?;
        }
    }
    Ok(trace)
}

/// Full run from the configuration.
pub fn train(config: &TrainConfig, world: &ToyWorld) -> Result<(TrainState, Vec<StepRecord>)> {
    let mut state = TrainState::init(config, world)?;
    let trace = run(&mut state, world, config.steps, |_| Ok(()))?;
    Ok((state, trace))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::toyworld::ToyWorldSpec;

    fn small_world() -> ToyWorld {
        ToyWorld::new(ToyWorldSpec {
            image_size: 8,
            stages: 1,
            ..ToyWorldSpec::default()
        })
        .unwrap()
    }

    fn small_config() -> TrainConfig {
        TrainConfig {
            steps: 5,
            batch_size: 2,
            pca_samples: 500,
            log_every: 2,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn rejects_single_direction() {
        let w = small_world();
        let cfg = TrainConfig { m: 1, ..small_config() };
        assert!(matches!(TrainState::init(&cfg, &w), Err(Error::Config(_))));
    }

    #[test]
    fn zero_steps_is_initialization() {
        let w = small_world();
        let cfg = TrainConfig { steps: 0, ..small_config() };
        let (state, trace) = train(&cfg, &w).unwrap();
        let fresh = TrainState::init(&cfg, &w).unwrap();
        assert!(trace.is_empty());
        assert_eq!(state.params, fresh.params);
    }

    #[test]
    fn frozen_directions_never_move() {
        let w = small_world();
        let cfg = TrainConfig {
            frozen_directions: Some(FrozenDirections::Pca),
            ..small_config()
        };
        let (state, _) = train(&cfg, &w).unwrap();
        let start = NavigatorParams::pca_top(6, 8, 3).unwrap();
        assert_eq!(state.params.v_sub, start.v_sub);
        assert_ne!(state.params.att_logits, start.att_logits);
    }

    #[test]
    fn frozen_attention_stays_uniform() {
        let w = small_world();
        let cfg = TrainConfig {
            freeze_attention: true,
            ..small_config()
        };
        let (state, _) = train(&cfg, &w).unwrap();
        assert!(state.params.att_logits.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn interval_means_average_chunks() {
        let rec = |step, loss| StepRecord {
            step,
            loss,
            cons: 0.0,
            orth: 0.0,
            div: 0.0,
        };
        let rows = interval_means(&[rec(0, 1.0), rec(1, 3.0), rec(2, 5.0)], 2);
        assert_eq!(rows.len(), 2);
        assert_eq!((rows[0].step, rows[0].loss), (2, 2.0));
        assert_eq!((rows[1].step, rows[1].loss), (3, 5.0));
    }
}
