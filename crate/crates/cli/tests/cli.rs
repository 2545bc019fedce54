use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use contrafeat::bundle::{load_basis, load_checkpoint, Bundle};
use contrafeat::experiments::traverse_strip;
use contrafeat::ppm;
use contrafeat::toyworld::{ToyWorld, ToyWorldSpec};
use serde_json::Value;

const SMALL: &[&str] = &[
    "--image-size",
    "8",
    "--stages",
    "1",
    "--vae-image-size",
    "8",
    "--pca-samples",
    "200",
    "--batch-size",
    "2",
];

fn contrafeat(dir: &Path, args: &[&str]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_contrafeat"));
    // defaults first so a test's own flags win
    cmd.arg(args[0])
        .arg("--output-dir")
        .arg(dir)
        .args(SMALL)
        .args(&args[1..])
        .env_remove("CONTRAFEAT_SEED")
        .env("RUST_LOG", "warn");
    cmd.output().expect("binary runs")
}

fn ok(out: &Output) -> Value {
    assert!(
        out.status.success(),
        "exit {:?}: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    serde_json::from_slice(&out.stdout).unwrap_or(Value::Null)
}

fn small_world() -> ToyWorld {
    ToyWorld::new(ToyWorldSpec {
        image_size: 8,
        stages: 1,
        ..ToyWorldSpec::default()
    })
    .unwrap()
}

#[test]
fn pca_minimal_run_and_reload() {
    let dir = tempfile::tempdir().unwrap();
    let report = ok(&contrafeat(dir.path(), &["pca", "--pca-samples", "2"]));
    assert_eq!(report["sample_count"], 2);
    let (basis, spec) = load_basis(&dir.path().join("pca")).unwrap();
    assert_eq!(spec.image_size, 8);
    assert_eq!(basis.sample_count, 2);
    let text = fs::read_to_string(dir.path().join("pca_report.json")).unwrap();
    assert_eq!(serde_json::from_str::<Value>(&text).unwrap(), report);
}

#[test]
fn pca_explained_variance_follows_the_spectrum() {
    let dir = tempfile::tempdir().unwrap();
    let report = ok(&contrafeat(dir.path(), &["pca", "--pca-samples", "20000"]));
    let got = report["explained_variance"].as_array().unwrap();
    let want = report["constructed_explained_variance"].as_array().unwrap();
    for (g, w) in got.iter().zip(want) {
        assert!((g.as_f64().unwrap() - w.as_f64().unwrap()).abs() < 0.01);
    }
    assert!(got[7].as_f64().unwrap() > 0.99);
}

#[test]
fn variants_and_modes_are_selectable() {
    for (variant, mode) in [("bi", "pooled"), ("pt", "nofoc"), ("pt", "l2mask")] {
        let dir = tempfile::tempdir().unwrap();
        ok(&contrafeat(dir.path(), &["train", "--steps", "2", "--variant", variant, "--mode", mode]));
        let (state, _) = load_checkpoint(&dir.path().join("checkpoint")).unwrap();
        assert_eq!(state.config.loss.variant.name(), variant);
        assert_eq!(state.config.loss.mode.name(), mode);
        assert_eq!(state.bank.is_some(), variant == "pt");
    }
}

#[test]
fn resumed_training_matches_uninterrupted() {
    let full = tempfile::tempdir().unwrap();
    let part = tempfile::tempdir().unwrap();
    let common = ["--log-every", "2", "--checkpoint-every", "4"];
    let args = |steps: &'static str| -> Vec<&str> {
        let mut v = vec!["train", "--steps", steps];
        v.extend(common);
        v
    };
    ok(&contrafeat(full.path(), &args("8")));
    ok(&contrafeat(part.path(), &args("4")));
    let resume = part.path().join("checkpoint");
    let mut resumed = args("8");
    resumed.extend(["--resume", resume.to_str().unwrap()]);
    ok(&contrafeat(part.path(), &resumed));

    let a = Bundle::load(&full.path().join("checkpoint")).unwrap();
    let b = Bundle::load(&part.path().join("checkpoint")).unwrap();
    for (name, arr) in &a.arrays {
        let bits = |v: &[f32]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&arr.data), bits(&b.arrays[name].data), "{name}");
    }
    assert_eq!(
        fs::read(full.path().join("checkpoint/meta.json")).unwrap(),
        fs::read(part.path().join("checkpoint/meta.json")).unwrap()
    );
    assert_eq!(
        fs::read_to_string(full.path().join("loss.csv")).unwrap(),
        fs::read_to_string(part.path().join("loss.csv")).unwrap()
    );
    assert!(full.path().join("checkpoints/step_4/manifest.json").exists());
}

#[test]
fn oracle_eval_scores_perfectly() {
    let dir = tempfile::tempdir().unwrap();
    let report = ok(&contrafeat(dir.path(), &["eval", "--oracle-directions", "--eval-samples", "20"]));
    assert_eq!(report["S_disen"].as_f64().unwrap(), 1.0);
    assert_eq!(report["N_discov"], 6);
    let written: Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("metrics_oracle.json")).unwrap()).unwrap();
    assert_eq!(written, report);
}

#[test]
fn eval_of_trained_checkpoint_writes_metrics() {
    let dir = tempfile::tempdir().unwrap();
    ok(&contrafeat(dir.path(), &["train", "--steps", "2"]));
    let report = ok(&contrafeat(dir.path(), &["eval", "--eval-samples", "5"]));
    assert_eq!(report["A"].as_array().unwrap().len(), 6);
    assert!(dir.path().join("metrics.json").exists());
}

fn read_strip(path: &Path) -> (usize, usize, Vec<u8>) {
    ppm::decode(&fs::read(path).unwrap()).unwrap()
}

fn column(data: &[u8], width: usize, size: usize, j: usize) -> Vec<u8> {
    (0..size)
        .flat_map(|y| data[(y * width + j * size) * 3..(y * width + (j + 1) * size) * 3].to_vec())
        .collect()
}

#[test]
fn traverse_writes_strips_with_unmodified_centre() {
    let dir = tempfile::tempdir().unwrap();
    let out = contrafeat(dir.path(), &["traverse", "--oracle-directions", "--traverse-steps", "5"]);
    ok(&out);
    let world = small_world();
    for d in 0..6 {
        let (w, h, data) = read_strip(&dir.path().join("traverse").join(format!("dir_{d}.ppm")));
        assert_eq!((w, h), (5 * 8, 8));
        // the centre column has strength 0: same bytes as a zero-strength strip
        let mods = world.oracle_modifications();
        let code = world.sample_code(&mut contrafeat::experiments::rng_for(0, 3));
        let plain: Vec<u8> = world.render(&code).iter().map(|&v| ppm::to_byte(v)).collect();
        assert_eq!(column(&data, w, 8, 2), plain);
        let strip = traverse_strip(&world, &code, &mods[d], &[-2.0, -1.0, 0.0, 1.0, 2.0]).unwrap();
        assert_eq!(ppm::decode(&ppm::encode(w, h, &strip).unwrap()).unwrap().2, data);
    }
}

#[test]
fn zero_range_traversal_has_identical_columns_and_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let args = [
        "traverse",
        "--oracle-directions",
        "--traverse-steps",
        "4",
        "--traverse-min",
        "0",
        "--traverse-max",
        "0",
    ];
    ok(&contrafeat(dir.path(), &args));
    let path = dir.path().join("traverse/dir_3.ppm");
    let first = fs::read(&path).unwrap();
    let (w, _, data) = read_strip(&path);
    let c0 = column(&data, w, 8, 0);
    for j in 1..4 {
        assert_eq!(column(&data, w, 8, j), c0);
    }
    ok(&contrafeat(dir.path(), &args));
    assert_eq!(fs::read(&path).unwrap(), first);
}

#[test]
fn mask_experiment_writes_json_and_csv() {
    let dir = tempfile::tempdir().unwrap();
    let report = ok(&contrafeat(dir.path(), &["mask-experiment", "--mask-samples", "3"]));
    assert_eq!(report["pairs"].as_array().unwrap().len(), 15);
    let csv = fs::read_to_string(dir.path().join("mask_experiment.csv")).unwrap();
    assert!(csv.starts_with("setting,pooled,nofoc,l2mask\npure,"));
}

#[test]
fn distill_reports_both_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let args = [
        "distill",
        "--oracle-directions",
        "--pair-count",
        "12",
        "--vae-steps",
        "3",
        "--vae-batch-size",
        "2",
        "--metric-samples",
        "40",
        "--fvm-votes",
        "4",
    ];
    let report = ok(&contrafeat(dir.path(), &args));
    for key in ["MIG", "FVM"] {
        assert!(report[key].is_number(), "{key} missing");
    }
    let written: Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("distill/metrics.json")).unwrap()).unwrap();
    assert_eq!(written, report);
    assert!(dir.path().join("distill/vae/manifest.json").exists());
    assert!(dir.path().join("distill/dataset/images_a.f32").exists());
}

#[test]
fn seed_environment_variable_overrides_config() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    ok(&contrafeat(a.path(), &["train", "--steps", "1", "--seed", "5"]));
    let out = Command::new(env!("CARGO_BIN_EXE_contrafeat"))
        .args(["train", "--output-dir"])
        .arg(b.path())
        .args(SMALL)
        .args(["--steps", "1"])
        .env("CONTRAFEAT_SEED", "5")
        .output()
        .unwrap();
    ok(&out);
    let (sa, _) = load_checkpoint(&a.path().join("checkpoint")).unwrap();
    let (sb, _) = load_checkpoint(&b.path().join("checkpoint")).unwrap();
    assert_eq!(sb.config.seed, 5);
    assert_eq!(sa.params, sb.params);
}

#[test]
fn config_file_is_read_and_unknown_keys_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.json");
    fs::write(&cfg, r#"{"steps": 2, "m": 3}"#).unwrap();
    ok(&contrafeat(dir.path(), &["train", "--config", cfg.to_str().unwrap()]));
    let (state, _) = load_checkpoint(&dir.path().join("checkpoint")).unwrap();
    assert_eq!((state.step, state.params.m), (2, 3));

    fs::write(&cfg, r#"{"steps": 2, "bogus": 1}"#).unwrap();
    let out = contrafeat(dir.path(), &["train", "--config", cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    let out = contrafeat(dir.path(), &["train", "--k", "99"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn missing_checkpoint_exits_4() {
    let dir = tempfile::tempdir().unwrap();
    let out = contrafeat(&dir.path().join("nothing"), &["eval"]);
    assert_eq!(out.status.code(), Some(4));
}

#[test]
fn non_finite_loss_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let out = contrafeat(dir.path(), &["train", "--steps", "2", "--strength", "1e300"]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("step 0"));
}
