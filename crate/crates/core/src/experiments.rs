//! Commands behind the command-line tool. Each takes a validated
//! [`RunConfig`], writes its artifacts under `output_dir` and returns the
//! report it wrote.

use std::fs;
use std::path::{Path, PathBuf};

use log::info;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bundle::{load_checkpoint, save_basis, save_checkpoint, save_dataset, save_vae, write_json};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::groupvae::{build_pair_dataset, code_table, encode_means, render_at, train_group_vae};
use crate::latent::{LatentCodeExt, PcaBasis};
use crate::losses::{masked_consistency, masked_orthogonality, FeatureChange, LossConfig, LossMode};
use crate::metrics::{attribute_change_matrix, fvm, mig, FvmConfig, MetricsReport};
use crate::navigator::{apply, modifications, Modification};
use crate::ppm;
use crate::toyworld::{FeatureStack, ToyWorld};
use crate::trainer::{interval_means, pca_for_world, run, write_loss_csv, TrainState};

/// Generator stream of each command, so commands never share draws.
mod stream {
    pub const EVAL: u64 = 2;
    pub const TRAVERSE: u64 = 3;
    pub const MASK: u64 = 4;
    pub const PAIRS: u64 = 5;
    pub const METRICS: u64 = 6;
}

pub fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

pub fn checkpoint_dir(cfg: &RunConfig) -> PathBuf {
    cfg.output_dir.join("checkpoint")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PcaReport {
    pub sample_count: usize,
    pub eigenvalues: Vec<f64>,
    /// Fraction of variance in the first `j + 1` components.
    pub explained_variance: Vec<f64>,
    /// The same fractions for the squared singular values of the mapping.
    pub constructed_explained_variance: Vec<f64>,
}

fn cumulative_fractions(values: &[f64]) -> Vec<f64> {
    let total: f64 = values.iter().sum();
    values
        .iter()
        .scan(0.0, |acc, v| {
            *acc += v;
            Some(*acc / total)
        })
        .collect()
}

pub fn pca_report(basis: &PcaBasis, world: &ToyWorld) -> PcaReport {
    let eig: Vec<f64> = basis.eigenvalues.iter().map(|&v| v as f64).collect();
    let mut spectrum: Vec<f64> = world.singular_values().iter().map(|s| s * s).collect();
    spectrum.resize(world.n(), 0.0);
    PcaReport {
        sample_count: basis.sample_count,
        explained_variance: cumulative_fractions(&eig),
        constructed_explained_variance: cumulative_fractions(&spectrum),
        eigenvalues: eig,
    }
}

/// PCA of sampled base codes, stored as a bundle in `output_dir/pca`.
pub fn cmd_pca(cfg: &RunConfig) -> Result<PcaReport> {
    let world = cfg.validate()?;
    let basis = pca_for_world(&world, cfg.pca_samples, cfg.seed)?;
    let dir = cfg.output_dir.join("pca");
    save_basis(&dir, &basis, world.spec())?;
    let report = pca_report(&basis, &world);
    write_json(&cfg.output_dir.join("pca_report.json"), &report)?;
    info!("top-{} explained variance {:.4}", cfg.k, basis.explained_variance(cfg.k));
    Ok(report)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub steps: u64,
    pub final_loss: Option<f64>,
}

/// Trains from scratch, or continues the checkpoint in `resume` up to
/// `steps` total. The final state goes to `output_dir/checkpoint`, periodic
/// ones to `output_dir/checkpoints/step_<n>`, interval means to
/// `output_dir/loss.csv` (appended when resuming).
pub fn cmd_train(cfg: &RunConfig, resume: Option<&Path>) -> Result<TrainSummary> {
    let world = cfg.validate()?;
    let config = cfg.train_config();
    let mut state = match resume {
        Some(dir) => {
            let (state, spec) = load_checkpoint(dir)?;
            let mut expected = config.clone();
            expected.steps = state.config.steps;
            expected.checkpoint_every = state.config.checkpoint_every;
            expected.log_every = state.config.log_every;
            if spec != *world.spec() || state.config != expected {
                return Err(Error::Config(format!(
                    "checkpoint {} was trained with a different configuration",
                    dir.display()
                )));
            }
            if state.step > config.steps {
                return Err(Error::Config(format!(
                    "checkpoint is at step {} beyond steps = {}",
                    state.step, config.steps
                )));
            }
            TrainState { config: config.clone(), ..state }
        }
        None => TrainState::init(&config, &world)?,
    };
    create_dir(&cfg.output_dir)?;
    let remaining = config.steps - state.step;
    let periodic = cfg.output_dir.join("checkpoints");
    let spec = world.spec().clone();
    let trace = run(&mut state, &world, remaining, |s| {
        save_checkpoint(&periodic.join(format!("step_{}", s.step)), s, &spec)
    })?;
    save_checkpoint(&checkpoint_dir(cfg), &state, &spec)?;
    write_loss_csv(
        &cfg.output_dir.join("loss.csv"),
        &interval_means(&trace, config.log_every),
        resume.is_some(),
    )?;
    Ok(TrainSummary {
        steps: state.step,
        final_loss: trace.last().map(|r| r.loss),
    })
}

/// Navigator modifications of a checkpoint at unit strength, with the world
/// it was trained on.
pub fn checkpoint_modifications(dir: &Path) -> Result<(Vec<Modification>, ToyWorld)> {
    let (state, spec) = load_checkpoint(dir)?;
    let world = ToyWorld::new(spec)?;
    let mods = modifications(&state.params, &state.basis, &state.config.navigator, 1.0)?;
    Ok((mods, world))
}

/// Directions to evaluate: the oracle set of the configured world, or a
/// checkpoint's (default `output_dir/checkpoint`).
pub fn resolve_directions(
    cfg: &RunConfig,
    checkpoint: Option<&Path>,
    oracle: bool,
) -> Result<(Vec<Modification>, ToyWorld)> {
    if oracle {
        let world = cfg.validate()?;
        Ok((world.oracle_modifications(), world))
    } else {
        cfg.validate()?;
        checkpoint_modifications(checkpoint.unwrap_or(&checkpoint_dir(cfg)))
    }
}

/// Attribute-change matrix and its scores.
pub fn evaluate(mods: &[Modification], world: &ToyWorld, cfg: &RunConfig) -> Result<MetricsReport> {
    let mut rng = rng_for(cfg.seed, stream::EVAL);
    let a = attribute_change_matrix(mods, world, cfg.eval_samples, cfg.eval_strength, &mut rng)?;
    MetricsReport::from_matrix(&a)
}

/// Writes `output_dir/metrics.json` (`metrics_oracle.json` for the oracle
/// directions).
pub fn cmd_eval(cfg: &RunConfig, checkpoint: Option<&Path>, oracle: bool) -> Result<MetricsReport> {
    let (mods, world) = resolve_directions(cfg, checkpoint, oracle)?;
    let report = evaluate(&mods, &world, cfg)?;
    create_dir(&cfg.output_dir)?;
    let name = if oracle { "metrics_oracle.json" } else { "metrics.json" };
    write_json(&cfg.output_dir.join(name), &report)?;
    Ok(report)
}

/// Evenly spaced strengths; a single step sits at the middle of the range.
pub fn traverse_strengths(steps: usize, min: f64, max: f64) -> Vec<f64> {
    if steps == 1 {
        return vec![0.5 * (min + max)];
    }
    (0..steps)
        .map(|j| min + (max - min) * j as f64 / (steps - 1) as f64)
        .collect()
}

/// One strip per direction: `steps` renders side by side, as an
/// `image_size x (steps * image_size)` RGB image.
pub fn traverse_strip(world: &ToyWorld, w: &LatentCodeExt, m: &Modification, strengths: &[f64]) -> Result<Vec<f64>> {
    let s = world.image_size();
    let cols = strengths.len();
    let mut grid = vec![0.0; s * s * cols * 3];
    for (j, &c) in strengths.iter().enumerate() {
        let img = world.render(&apply(w, &m.scaled(c))?);
        for y in 0..s {
            let dst = (y * s * cols + j * s) * 3;
            grid[dst..dst + s * 3].copy_from_slice(&img[y * s * 3..(y + 1) * s * 3]);
        }
    }
    Ok(grid)
}

/// Writes `output_dir/traverse/dir_<d>.ppm` for every direction.
pub fn cmd_traverse(cfg: &RunConfig, checkpoint: Option<&Path>, oracle: bool) -> Result<Vec<PathBuf>> {
    let (mods, world) = resolve_directions(cfg, checkpoint, oracle)?;
    let w = world.sample_code(&mut rng_for(cfg.seed, stream::TRAVERSE));
    let strengths = traverse_strengths(cfg.traverse_steps, cfg.traverse_min, cfg.traverse_max);
    let dir = cfg.output_dir.join("traverse");
    create_dir(&dir)?;
    let s = world.image_size();
    mods.iter()
        .enumerate()
        .map(|(d, m)| {
            let path = dir.join(format!("dir_{d}.ppm"));
            ppm::write(&path, s * strengths.len(), s, &traverse_strip(&world, &w, m, &strengths)?)?;
            Ok(path)
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskPairRow {
    pub a: usize,
    pub b: usize,
    /// One value per mode, in the order of [`MaskTable::modes`].
    pub pure: Vec<f64>,
    pub mixed: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskTable {
    pub modes: Vec<LossMode>,
    pub samples: usize,
    /// Means over all unordered factor pairs.
    pub pure: Vec<f64>,
    pub mixed: Vec<f64>,
    pub pairs: Vec<MaskPairRow>,
}

fn change(after: &FeatureStack, before: &FeatureStack) -> FeatureChange {
    FeatureChange {
        stack: after.minus(before),
        direction: 0,
    }
}

fn pair_term(
    cons: (&FeatureChange, &FeatureChange),
    orth: (&FeatureChange, &FeatureChange),
    cfg: &LossConfig,
) -> Result<f64> {
    Ok(masked_consistency(cons.0, cons.1, cfg)?.value + masked_orthogonality(orth.0, orth.1, cfg)?.value)
}

/// Pure and mixed losses with the oracle directions. For factors `a < b`,
/// pure is `cons(x->a, y->a) + orth(x->a, y->b)` and mixed uses the unit
/// directions `(a+b)/sqrt2` and `(a-b)/sqrt2` in place of `a` and `b`. Each
/// unordered pair is scored as the mean of its two orderings on the same
/// codes. Every pair sees the same `samples` code pairs.
pub fn mask_experiment(world: &ToyWorld, modes: &[LossMode], samples: usize, seed: u64) -> Result<MaskTable> {
    let oracle = world.oracle_modifications();
    let p = oracle.len();
    let h = std::f64::consts::FRAC_1_SQRT_2;
    let pairs: Vec<(usize, usize)> = (0..p).flat_map(|a| (a + 1..p).map(move |b| (a, b))).collect();
    let mut mixes = Vec::with_capacity(pairs.len());
    for &(a, b) in &pairs {
        let plus = oracle[a].plus(&oracle[b])?.scaled(h);
        let minus = oracle[a].plus(&oracle[b].scaled(-1.0))?.scaled(h);
        mixes.push((plus, minus));
    }
    let cfgs: Vec<LossConfig> = modes
        .iter()
        .map(|&mode| LossConfig {
            mode,
            ..LossConfig::default()
        })
        .collect();
    let mut pure = vec![vec![0.0; modes.len()]; pairs.len()];
    let mut mixed = vec![vec![0.0; modes.len()]; pairs.len()];
    let mut rng = rng_for(seed, stream::MASK);
    for _ in 0..samples {
        let x = world.sample_code(&mut rng);
        let y = world.sample_code(&mut rng);
        let (fx, fy) = (world.features_of(&x), world.features_of(&y));
        let moved = |w: &LatentCodeExt, base: &FeatureStack, m: &Modification| -> Result<FeatureChange> {
            Ok(change(&world.features_of(&apply(w, m)?), base))
        };
        let xs = oracle.iter().map(|m| moved(&x, &fx, m)).collect::<Result<Vec<_>>>()?;
        let ys = oracle.iter().map(|m| moved(&y, &fy, m)).collect::<Result<Vec<_>>>()?;
        for (i, (&(a, b), (plus, minus))) in pairs.iter().zip(&mixes).enumerate() {
            let xp = moved(&x, &fx, plus)?;
            let yp = moved(&y, &fy, plus)?;
            let yq = moved(&y, &fy, minus)?;
            let yq_neg = moved(&y, &fy, &minus.scaled(-1.0))?;
            for (j, c) in cfgs.iter().enumerate() {
                let ab = pair_term((&xs[a], &ys[a]), (&xs[a], &ys[b]), c)?;
                let ba = pair_term((&xs[b], &ys[b]), (&xs[b], &ys[a]), c)?;
                pure[i][j] += 0.5 * (ab + ba);
                // swapping a and b keeps a+b and flips a-b
                let ab = pair_term((&xp, &yp), (&xp, &yq), c)?;
                let ba = pair_term((&xp, &yp), (&xp, &yq_neg), c)?;
                mixed[i][j] += 0.5 * (ab + ba);
            }
        }
    }
    let n = samples as f64;
    let rows: Vec<MaskPairRow> = pairs
        .iter()
        .zip(pure.iter().zip(&mixed))
        .map(|(&(a, b), (pu, mi))| MaskPairRow {
            a,
            b,
            pure: pu.iter().map(|v| v / n).collect(),
            mixed: mi.iter().map(|v| v / n).collect(),
        })
        .collect();
    let mean = |f: fn(&MaskPairRow) -> &Vec<f64>, j: usize| -> f64 {
        rows.iter().map(|r| f(r)[j]).sum::<f64>() / rows.len() as f64
    };
    Ok(MaskTable {
        modes: modes.to_vec(),
        samples,
        pure: (0..modes.len()).map(|j| mean(|r| &r.pure, j)).collect(),
        mixed: (0..modes.len()).map(|j| mean(|r| &r.mixed, j)).collect(),
        pairs: rows,
    })
}

/// Writes `output_dir/mask_experiment.json` and a `setting,<modes>` CSV.
pub fn cmd_mask_experiment(cfg: &RunConfig) -> Result<MaskTable> {
    let world = cfg.validate()?;
    let table = mask_experiment(&world, &LossMode::ALL, cfg.mask_samples, cfg.seed)?;
    create_dir(&cfg.output_dir)?;
    write_json(&cfg.output_dir.join("mask_experiment.json"), &table)?;
    let header: Vec<&str> = table.modes.iter().map(|m| m.name()).collect();
    let fmt = |v: &[f64]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",");
    let csv = format!(
        "setting,{}\npure,{}\nmixed,{}\n",
        header.join(","),
        fmt(&table.pure),
        fmt(&table.mixed)
    );
    let path = cfg.output_dir.join("mask_experiment.csv");
    fs::write(&path, csv).map_err(|e| Error::io(&path, e))?;
    Ok(table)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistillReport {
    #[serde(rename = "MIG")]
    pub mig: f64,
    #[serde(rename = "FVM")]
    pub fvm: f64,
    pub mig_per_factor: Vec<Option<f64>>,
    pub group: bool,
    pub final_loss: f64,
}

/// Pair dataset, VAE training and both metrics for a set of directions.
/// Writes the dataset, the VAE and the report under `out` when given.
pub fn distill(mods: &[Modification], world: &ToyWorld, cfg: &RunConfig, out: Option<&Path>) -> Result<DistillReport> {
    let mut rng = rng_for(cfg.seed, stream::PAIRS);
    let ds = build_pair_dataset(mods, world, cfg.pair_count, cfg.pair_strength, cfg.vae_image_size, &mut rng)?;
    let spec = cfg.vae_spec();
    let train = cfg.vae_train_config();
    let run = train_group_vae(&ds, &spec, &train)?;
    let params = &run.params;
    let mut rng = rng_for(cfg.seed, stream::METRICS);
    let table = code_table(params, world, cfg.metric_samples, &mut rng)?;
    let mig_report = mig(&table.codes, &table.factors, cfg.mig_bins)?;
    let size = cfg.vae_image_size;
    let mut encode = |codes: &[LatentCodeExt]| -> Vec<Vec<f64>> {
        let images: Vec<Vec<f64>> = codes
            .iter()
            .map(|w| render_at(world, w, size).expect("size validated"))
            .collect();
        encode_means(params, &images)
    };
    let fvm_cfg = FvmConfig {
        train_votes: cfg.fvm_votes,
        eval_votes: cfg.fvm_votes,
        ..FvmConfig::default()
    };
    let fvm_report = fvm(&mut encode, world, &fvm_cfg, &mut rng)?;
    let report = DistillReport {
        mig: mig_report.mig,
        fvm: fvm_report.accuracy,
        mig_per_factor: mig_report.per_factor,
        group: train.group,
        final_loss: run.losses.last().copied().unwrap_or(f64::NAN),
    };
    if let Some(dir) = out {
        save_dataset(&dir.join("dataset"), &ds)?;
        save_vae(&dir.join("vae"), params)?;
        let csv: String = std::iter::once("step,loss\n".to_string())
            .chain(run.losses.iter().enumerate().map(|(i, l)| format!("{},{l}\n", i + 1)))
            .collect();
        let path = dir.join("vae_loss.csv");
        fs::write(&path, csv).map_err(|e| Error::io(&path, e))?;
        write_json(&dir.join("metrics.json"), &report)?;
    }
    Ok(report)
}

/// Distills a checkpoint's (or the oracle's) directions into
/// `output_dir/distill`.
pub fn cmd_distill(cfg: &RunConfig, checkpoint: Option<&Path>, oracle: bool) -> Result<DistillReport> {
    let (mods, world) = resolve_directions(cfg, checkpoint, oracle)?;
    let dir = cfg.output_dir.join("distill");
    create_dir(&dir)?;
    distill(&mods, &world, cfg, Some(&dir))
}
