//! Checks shared by the integration tests and the acceptance runner.

#![allow(dead_code)]

use contrafeat::experiments::{mask_experiment, MaskTable};
use contrafeat::groupvae::{
    build_pair_dataset, code_table, encode_means, render_at, train_group_vae, VaeSpec, VaeTrainConfig,
};
use contrafeat::latent::{compute_pca, PcaBasis};
use contrafeat::losses::{
    diversity, masked_consistency, masked_orthogonality, total_loss, total_loss_at, Batch, FeatureChange,
    LossConfig, LossMode, ParamValues, Variant,
};
use contrafeat::metrics::{attribute_change_matrix, fvm, mig, n_discov, s_disen, AttributeChangeMatrix, FvmConfig};
use contrafeat::navigator::modifications;
use contrafeat::toyworld::{FeatureStack, ToyWorld, ToyWorldSpec};
use contrafeat::trainer::{run, StepRecord, TrainConfig, TrainState};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub const MODES: [LossMode; 3] = [LossMode::Pooled, LossMode::Nofoc, LossMode::L2mask];
pub const VARIANTS: [Variant; 2] = [Variant::Bi, Variant::Pt];

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// 8x8 images with a single extractor stage.
pub fn tiny_world() -> ToyWorld {
    ToyWorld::new(ToyWorldSpec {
        image_size: 8,
        stages: 1,
        ..ToyWorldSpec::default()
    })
    .unwrap()
}

/// Largest entry-wise relative error, with a floor of 1% of the largest
/// reference magnitude so near-zero entries are judged on absolute scale.
pub fn max_rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    let scale = numeric.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / n.abs().max(1e-2 * scale).max(1e-12))
        .fold(0.0, f64::max)
}

/// Central differences of `f` at `x`, one coordinate at a time.
pub fn central_differences(x: &[f64], h: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut p = x.to_vec();
    (0..x.len())
        .map(|i| {
            p[i] = x[i] + h;
            let up = f(&p);
            p[i] = x[i] - h;
            let down = f(&p);
            p[i] = x[i];
            (up - down) / (2.0 * h)
        })
        .collect()
}

#[derive(Debug)]
pub struct GradientCase {
    pub variant: Variant,
    pub mode: LossMode,
    pub v_sub: f64,
    pub att_logits: f64,
    pub prototypes: Option<f64>,
}

impl GradientCase {
    pub fn worst(&self) -> f64 {
        self.v_sub.max(self.att_logits).max(self.prototypes.unwrap_or(0.0))
    }
}

/// Analytic gradients of the 32-bit objective against central differences
/// of the 64-bit objective, on the 8x8 one-stage world.
pub fn gradient_case(variant: Variant, mode: LossMode) -> GradientCase {
    let world = tiny_world();
    let mut cfg = TrainConfig {
        pca_samples: 2000,
        ..TrainConfig::default()
    };
    cfg.loss.variant = variant;
    cfg.loss.mode = mode;
    let mut state = TrainState::init(&cfg, &world).unwrap();
    let mut r = rng(17);
    for l in state.params.att_logits.iter_mut() {
        *l = 0.7 * r.sample::<f32, _>(StandardNormal);
    }
    let batch = Batch {
        d: 1,
        d_other: 4,
        xs: (0..2).map(|_| world.sample_code(&mut r)).collect(),
        ys: match variant {
            Variant::Bi => (0..2).map(|_| world.sample_code(&mut r)).collect(),
            Variant::Pt => Vec::new(),
        },
    };
    let objective = cfg.objective();
    let out = total_loss(&batch, &state.params, state.bank.as_ref(), &state.basis, &objective, &world).unwrap();
    let base = ParamValues::new(&state.params, state.bank.as_ref());
    let loss = |v: &ParamValues| total_loss_at::<f64>(&batch, v, &state.basis, &objective, &world).unwrap().total;
    let h = 1e-5;
    let num_v = central_differences(&base.v_sub, h, |x| loss(&ParamValues { v_sub: x.to_vec(), ..base.clone() }));
    let num_l = central_differences(&base.att_logits, h, |x| {
        loss(&ParamValues {
            att_logits: x.to_vec(),
            ..base.clone()
        })
    });
    let prototypes = base.prototypes.as_ref().map(|p| {
        let num = central_differences(p, h, |x| {
            loss(&ParamValues {
                prototypes: Some(x.to_vec()),
                ..base.clone()
            })
        });
        max_rel_err(out.grad_prototypes.as_ref().unwrap(), &num)
    });
    GradientCase {
        variant,
        mode,
        v_sub: max_rel_err(&out.grad_v_sub, &num_v),
        att_logits: max_rel_err(&out.grad_att_logits, &num_l),
        prototypes,
    }
}

pub fn gradient_suite() -> Vec<GradientCase> {
    VARIANTS
        .iter()
        .flat_map(|&v| MODES.iter().map(move |&m| gradient_case(v, m)))
        .collect()
}

/// One stage of `positions` positions with `channels` channels.
pub fn change(positions: &[&[f64]]) -> FeatureChange {
    let c = positions[0].len();
    FeatureChange {
        stack: FeatureStack {
            shapes: vec![[1, positions.len(), c]],
            maps: vec![positions.iter().flat_map(|p| p.iter().copied()).collect()],
        },
        direction: 0,
    }
}

/// Hand-derived loss values: (name, got, want).
pub fn loss_identities() -> Vec<(&'static str, f64, f64)> {
    let cfg = LossConfig::default();
    let cons = |x: &FeatureChange, y: &FeatureChange| masked_consistency(x, y, &cfg).unwrap().value;
    let orth = |x: &FeatureChange, y: &FeatureChange| masked_orthogonality(x, y, &cfg).unwrap().value;
    let two_stage = FeatureChange {
        stack: FeatureStack {
            shapes: vec![[1, 2, 2], [1, 1, 3]],
            maps: vec![vec![0.3, -1.0, 2.0, 0.5], vec![1.0, 2.0, -0.5]],
        },
        direction: 0,
    };
    let e = |i: usize| -> Vec<f64> { (0..3).map(|j| if i == j { 1.0 } else { 0.0 }).collect() };
    vec![
        (
            "consistency, one live position",
            cons(&change(&[&[3.0, 4.0], &[0.0, 0.0]]), &change(&[&[6.0, 8.0], &[0.0, 0.0]])),
            -1.0,
        ),
        (
            "consistency, half aligned",
            cons(&change(&[&[1.0, 0.0], &[0.0, 1.0]]), &change(&[&[1.0, 0.0], &[1.0, 0.0]])),
            -0.5,
        ),
        (
            "orthogonality, perpendicular",
            orth(&change(&[&[3.0, 4.0], &[0.0, 0.0]]), &change(&[&[-4.0, 3.0], &[0.0, 0.0]])),
            0.0,
        ),
        ("consistency, identical, two stages", cons(&two_stage, &two_stage), -2.0),
        ("orthogonality, identical, two stages", orth(&two_stage, &two_stage), 2.0),
        ("diversity, orthogonal", diversity(&[e(0), e(1)]).unwrap(), 0.0),
        ("diversity, two identical", diversity(&[e(2), e(2)]).unwrap(), 2.0),
        ("diversity, three identical", diversity(&[e(0), e(0), e(0)]).unwrap(), 6.0),
    ]
}

/// Consistency in `[-L, 0]` and orthogonality in `[0, L]` on random changes.
pub fn loss_bounds_hold(trials: usize) -> bool {
    let mut r = rng(3);
    let cfg = LossConfig::default();
    (0..trials).all(|_| {
        let mut random = || FeatureChange {
            stack: FeatureStack {
                shapes: vec![[2, 2, 3], [1, 1, 4]],
                maps: vec![
                    (0..12).map(|_| r.sample::<f64, _>(StandardNormal)).collect(),
                    (0..4).map(|_| r.sample::<f64, _>(StandardNormal)).collect(),
                ],
            },
            direction: 0,
        };
        let (x, y) = (random(), random());
        MODES.iter().all(|&mode| {
            let c = LossConfig { mode, ..cfg };
            let cv = masked_consistency(&x, &y, &c).unwrap().value;
            let ov = masked_orthogonality(&x, &y, &c).unwrap().value;
            (-2.0 - 1e-12..=1e-12).contains(&cv) && (-1e-12..=2.0 + 1e-12).contains(&ov)
        })
    })
}

pub struct PcaChecks {
    pub orthonormality_err: f64,
    pub signs_canonical: bool,
    /// Largest gap between sampled and constructed cumulative explained
    /// variance over the first eight components.
    pub spectrum_err: f64,
    pub top8: f64,
}

/// Explained-variance fractions of the constructed mapping: the spectrum of
/// `M M^T` is the squared singular values of `M`.
pub fn constructed_fractions(world: &ToyWorld) -> Vec<f64> {
    let sq: Vec<f64> = world.singular_values().iter().map(|s| s * s).collect();
    let total: f64 = sq.iter().sum();
    sq.iter()
        .scan(0.0, |acc, v| {
            *acc += v / total;
            Some(*acc)
        })
        .collect()
}

pub fn pca_checks(samples: usize) -> PcaChecks {
    let world = ToyWorld::new(ToyWorldSpec::default()).unwrap();
    let mut r = rng(11);
    let codes: Vec<_> = (0..samples).map(|_| world.sample_w0(&mut r)).collect();
    let basis: PcaBasis = compute_pca(&codes).unwrap();
    let n = basis.dim;
    let mut orthonormality_err: f64 = 0.0;
    for i in 0..n {
        for j in 0..n {
            let dot: f64 = basis.component(i).iter().zip(basis.component(j)).map(|(a, b)| a * b).sum();
            let want = if i == j { 1.0 } else { 0.0 };
            orthonormality_err = orthonormality_err.max((dot - want).abs());
        }
    }
    let signs_canonical = (0..n).all(|j| {
        let c = basis.component(j);
        let big = c.iter().copied().fold(0.0f64, |m, v| if v.abs() > m.abs() { v } else { m });
        big > 0.0
    });
    let want = constructed_fractions(&world);
    let spectrum_err = (1..=8)
        .map(|k| (basis.explained_variance(k) - want[k - 1]).abs())
        .fold(0.0, f64::max);
    PcaChecks {
        orthonormality_err,
        signs_canonical,
        spectrum_err,
        top8: basis.explained_variance(8),
    }
}

pub fn matrix(rows: &[&[f64]]) -> AttributeChangeMatrix {
    let p = rows[0].len();
    AttributeChangeMatrix::from_raw(rows.len(), p, rows.concat(), 1).unwrap()
}

/// Hand matrices: (name, got, want).
pub fn metric_identities() -> Vec<(&'static str, f64, f64)> {
    let id = matrix(&[&[1.0, 0.0, 0.0], &[0.0, 1.0, 0.0], &[0.0, 0.0, 1.0]]);
    let ones = matrix(&[&[1.0, 1.0], &[1.0, 1.0]]);
    let hand = matrix(&[&[1.0, 0.5], &[0.25, 1.0]]);
    let shared = matrix(&[&[1.0, 0.5], &[1.0, 0.25]]);
    let raw = matrix(&[&[2.0, 1.0, 0.0]]);
    vec![
        ("s_disen identity", s_disen(&id).unwrap(), 1.0),
        ("n_discov identity", n_discov(&id) as f64, 3.0),
        ("s_disen all ones", s_disen(&ones).unwrap(), 0.0),
        ("n_discov all ones (ties)", n_discov(&ones) as f64, 2.0),
        ("s_disen hand matrix", s_disen(&hand).unwrap(), 0.625),
        ("n_discov shared column", n_discov(&shared) as f64, 1.0),
        ("row normalization", raw.row(0)[1], 0.5),
    ]
}

/// Row scaling and column permutation leave the scores unchanged.
pub fn metric_invariances(trials: usize) -> bool {
    let mut r = rng(5);
    (0..trials).all(|_| {
        let (m, p) = (4, 5);
        let raw: Vec<f64> = (0..m * p).map(|_| r.gen_range(0.0..3.0)).collect();
        let a = AttributeChangeMatrix::from_raw(m, p, raw.clone(), 1).unwrap();
        let scales: Vec<f64> = (0..m).map(|_| r.gen_range(0.1..10.0)).collect();
        let scaled: Vec<f64> = raw.iter().enumerate().map(|(i, v)| v * scales[i / p]).collect();
        let b = AttributeChangeMatrix::from_raw(m, p, scaled, 1).unwrap();
        let perm = [3, 0, 4, 1, 2];
        let permuted: Vec<f64> = (0..m * p).map(|i| raw[(i / p) * p + perm[i % p]]).collect();
        let c = AttributeChangeMatrix::from_raw(m, p, permuted, 1).unwrap();
        let s = s_disen(&a).unwrap();
        (s - s_disen(&b).unwrap()).abs() < 1e-12
            && (s - s_disen(&c).unwrap()).abs() < 1e-12
            && n_discov(&a) == n_discov(&b)
            && n_discov(&a) == n_discov(&c)
    })
}

/// S_disen and N_discov of the oracle direction set.
pub fn oracle_scores(world: &ToyWorld, samples: usize, seed: u64) -> (f64, usize) {
    let a = attribute_change_matrix(&world.oracle_modifications(), world, samples, 1.0, &mut rng(seed)).unwrap();
    (s_disen(&a).unwrap(), n_discov(&a))
}

/// Mask experiment on world `seed`: (all pure < mixed, l2mask lowest pure).
pub fn mask_ordering(seed: u64, samples: usize) -> (MaskTable, bool, bool) {
    let world = ToyWorld::new(ToyWorldSpec {
        seed,
        ..ToyWorldSpec::default()
    })
    .unwrap();
    let table = mask_experiment(&world, &MODES, samples, seed).unwrap();
    let ordered = table.pure.iter().zip(&table.mixed).all(|(p, m)| p < m);
    let l2 = MODES.iter().position(|&m| m == LossMode::L2mask).unwrap();
    let lowest = (0..MODES.len()).all(|j| j == l2 || table.pure[l2] < table.pure[j]);
    (table, ordered, lowest)
}

/// Default world and training config for seed `seed`.
pub fn seeded_run(seed: u64, freeze_attention: bool) -> (ToyWorld, TrainConfig) {
    let world = ToyWorld::new(ToyWorldSpec {
        seed,
        ..ToyWorldSpec::default()
    })
    .unwrap();
    let cfg = TrainConfig {
        seed,
        freeze_attention,
        ..TrainConfig::default()
    };
    (world, cfg)
}

/// Continues `state` to `steps` total and returns the step trace.
pub fn train_to(state: &mut TrainState, world: &ToyWorld, steps: u64) -> Vec<StepRecord> {
    let todo = steps.saturating_sub(state.step);
    run(state, world, todo, |_| Ok(())).unwrap()
}

/// S_disen and N_discov of a state's directions on `samples` eval codes.
pub fn scores(state: &TrainState, world: &ToyWorld, samples: usize) -> (f64, usize) {
    let mods = modifications(&state.params, &state.basis, &state.config.navigator, 1.0).unwrap();
    let mut r = contrafeat::experiments::rng_for(state.config.seed, 2);
    let a = attribute_change_matrix(&mods, world, samples, 1.0, &mut r).unwrap();
    (s_disen(&a).unwrap(), n_discov(&a))
}

#[derive(Debug)]
pub struct VaeComparison {
    pub group_mig: f64,
    pub plain_mig: f64,
    pub group_fvm: f64,
}

/// Group and plain VAE on the same oracle-direction pair dataset.
pub fn vae_comparison(seed: u64, pairs: usize, steps: u64, fvm_votes: usize) -> VaeComparison {
    let world = ToyWorld::new(ToyWorldSpec::default()).unwrap();
    let size = 16;
    let mut r = rng(seed);
    let ds = build_pair_dataset(&world.oracle_modifications(), &world, pairs, 1.0, size, &mut r).unwrap();
    let spec = VaeSpec::new(6, size);
    let mut out = [(0.0, 0.0); 2];
    for (slot, group) in [true, false].into_iter().enumerate() {
        let cfg = VaeTrainConfig {
            seed,
            steps,
            group,
            ..VaeTrainConfig::default()
        };
        let run = train_group_vae(&ds, &spec, &cfg).unwrap();
        let mut r = rng(seed + 1000);
        let table = code_table(&run.params, &world, 2000, &mut r).unwrap();
        let m = mig(&table.codes, &table.factors, 20).unwrap().mig;
        let f = if group {
            let p = &run.params;
            let mut encode = |codes: &[contrafeat::latent::LatentCodeExt]| -> Vec<Vec<f64>> {
                let images: Vec<Vec<f64>> = codes.iter().map(|w| render_at(&world, w, size).unwrap()).collect();
                encode_means(p, &images)
            };
            let cfg = FvmConfig {
                train_votes: fvm_votes,
                eval_votes: fvm_votes,
                ..FvmConfig::default()
            };
            fvm(&mut encode, &world, &cfg, &mut r).unwrap().accuracy
        } else {
            0.0
        };
        out[slot] = (m, f);
    }
    VaeComparison {
        group_mig: out[0].0,
        plain_mig: out[1].0,
        group_fvm: out[0].1,
    }
}

/// Two identical runs, compared bitwise on loss traces and checkpoints.
pub fn determinism(steps: u64) -> (bool, bool) {
    let world = ToyWorld::new(ToyWorldSpec::default()).unwrap();
    let cfg = TrainConfig {
        steps,
        pca_samples: 5000,
        seed: 3,
        ..TrainConfig::default()
    };
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    let mut traces = Vec::new();
    for dir in &dirs {
        let mut state = TrainState::init(&cfg, &world).unwrap();
        let trace = train_to(&mut state, &world, steps);
        contrafeat::bundle::save_checkpoint(dir.path(), &state, world.spec()).unwrap();
        traces.push(trace);
    }
    let bits = |t: &[StepRecord]| -> Vec<[u64; 4]> {
        t.iter()
            .map(|r| [r.loss.to_bits(), r.cons.to_bits(), r.orth.to_bits(), r.div.to_bits()])
            .collect()
    };
    let same_trace = bits(&traces[0]) == bits(&traces[1]);
    let files = |dir: &std::path::Path| -> Vec<(String, Vec<u8>)> {
        let mut v: Vec<_> = std::fs::read_dir(dir)
            .unwrap()
            .map(|e| {
                let p = e.unwrap().path();
                (p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap())
            })
            .collect();
        v.sort();
        v
    };
    let same_checkpoint = files(dirs[0].path()) == files(dirs[1].path());
    (same_trace, same_checkpoint)
}
