mod common;

use common::*;
use contrafeat::bundle::{load_basis, load_dataset, load_vae, save_basis, save_dataset, save_vae};
use contrafeat::experiments::{mask_experiment, rng_for};
use contrafeat::groupvae::{build_pair_dataset, VaeParams, VaeSpec};
use contrafeat::losses::{feature_change, masked_consistency, masked_orthogonality, LossConfig};
use contrafeat::navigator::Modification;
use contrafeat::trainer::pca_for_world;

/// `cons(x->a, y->a) + orth(x->a, y->b)` from two forward passes per change.
fn ordered_term(x: &[contrafeat::latent::LatentCodeExt], y: &[contrafeat::latent::LatentCodeExt], a: &Modification, b: &Modification, cfg: &LossConfig) -> f64 {
    let world = tiny_world();
    let mut total = 0.0;
    for (x, y) in x.iter().zip(y) {
        let fa = feature_change(x, a, &world).unwrap();
        let ga = feature_change(y, a, &world).unwrap();
        let gb = feature_change(y, b, &world).unwrap();
        total += masked_consistency(&fa, &ga, cfg).unwrap().value + masked_orthogonality(&fa, &gb, cfg).unwrap().value;
    }
    total / x.len() as f64
}

#[test]
fn mask_table_matches_a_direct_computation() {
    let world = tiny_world();
    let samples = 3;
    let table = mask_experiment(&world, &MODES, samples, 7).unwrap();
    let mut r = rng_for(7, 4);
    let (mut xs, mut ys) = (Vec::new(), Vec::new());
    for _ in 0..samples {
        xs.push(world.sample_code(&mut r));
        ys.push(world.sample_code(&mut r));
    }
    let oracle = world.oracle_modifications();
    let h = std::f64::consts::FRAC_1_SQRT_2;
    for row in table.pairs.iter().filter(|r| (r.a, r.b) == (0, 3) || (r.a, r.b) == (2, 5)) {
        let (a, b) = (&oracle[row.a], &oracle[row.b]);
        let plus = a.plus(b).unwrap().scaled(h);
        let minus = a.plus(&b.scaled(-1.0)).unwrap().scaled(h);
        for (j, &mode) in MODES.iter().enumerate() {
            let cfg = LossConfig { mode, ..LossConfig::default() };
            let ab = ordered_term(&xs, &ys, a, b, &cfg);
            let ba = ordered_term(&xs, &ys, b, a, &cfg);
            assert!((row.pure[j] - 0.5 * (ab + ba)).abs() < 1e-9);
            // swapping a and b maps (a+b, a-b) to (a+b, -(a-b))
            let ab = ordered_term(&xs, &ys, &plus, &minus, &cfg);
            let ba = ordered_term(&xs, &ys, &plus, &minus.scaled(-1.0), &cfg);
            assert!((row.mixed[j] - 0.5 * (ab + ba)).abs() < 1e-9);
        }
    }
    // listing b first gives the same pure value; the mixed swap is the
    // (a+b, -(a-b)) ordering already averaged above
    let row = &table.pairs[0];
    let cfg = LossConfig::default();
    let (a, b) = (&oracle[row.b], &oracle[row.a]);
    let swapped = 0.5 * (ordered_term(&xs, &ys, a, b, &cfg) + ordered_term(&xs, &ys, b, a, &cfg));
    let l2 = MODES.iter().position(|&m| m == cfg.mode).unwrap();
    assert!((swapped - row.pure[l2]).abs() < 1e-6);
}

#[test]
fn bundles_round_trip_bitwise() {
    let world = tiny_world();
    let dir = tempfile::tempdir().unwrap();

    let basis = pca_for_world(&world, 300, 0).unwrap();
    save_basis(&dir.path().join("pca"), &basis, world.spec()).unwrap();
    let (back, spec) = load_basis(&dir.path().join("pca")).unwrap();
    assert_eq!(back, basis);
    assert_eq!(&spec, world.spec());

    let params = VaeParams::init(&VaeSpec::new(6, 8), &mut rng(1)).unwrap();
    save_vae(&dir.path().join("vae"), &params).unwrap();
    assert_eq!(load_vae(&dir.path().join("vae")).unwrap(), params);

    let ds = build_pair_dataset(&world.oracle_modifications(), &world, 13, 1.0, 8, &mut rng(2)).unwrap();
    save_dataset(&dir.path().join("ds"), &ds).unwrap();
    assert_eq!(load_dataset(&dir.path().join("ds")).unwrap(), ds);
}
