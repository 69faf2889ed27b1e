use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::Arc;

use serde_json::Value;
use surrogate_cli::{serve_config, ServeArgs, EXIT_RUNTIME, EXIT_VALIDATION};
use surrogate_core::drag::{run_drag, DragConfig};
use surrogate_core::model::{Checkpoint, GeneratorConfig, Model, TrainingMetadata};
use surrogate_core::patch::{select_patch, PatchOptions};
use surrogate_core::synthdata::{load_manifest, ParameterSpec, ParameterVector, Split};
use surrogate_service::ServiceConfig;

fn surrogate(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_surrogate")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> Value {
    let out = surrogate(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice(&out.stdout).unwrap()
}

fn code(args: &[&str]) -> i32 {
    surrogate(args).status.code().unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out: Vec<_> = walk(dir)
        .into_iter()
        .map(|p| (p.strip_prefix(dir).unwrap().display().to_string(), std::fs::read(&p).unwrap()))
        .collect();
    out.sort();
    out
}

fn walk(dir: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    for e in std::fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        if p.is_dir() {
            out.extend(walk(&p));
        } else {
            out.push(p);
        }
    }
    out
}

fn tiny_checkpoint(path: &Path) -> Arc<Model> {
    let cfg = GeneratorConfig { hidden: 32, base_channels: 8, min_channels: 4, convs_per_block: 1, ..GeneratorConfig::new(3, 1, 16) };
    let model = Model::new(ParameterSpec::synthetic(), &cfg, 5).unwrap();
    Checkpoint::new(model.clone(), TrainingMetadata::default()).save(path).unwrap();
    Arc::new(model)
}

#[test]
fn dataset_build_from_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("synth.cfg");
    std::fs::write(
        &cfg,
        format!(
            "seed = 3\n[dataset]\nout = \"{}\"\nresolution = 16\ntest_count = 2\nsampling = {{ mode = \"random\", count = 10, vary_vis = false }}\n",
            s(&dir.path().join("a"))
        ),
    )
    .unwrap();
    let summary = ok(&["dataset", "build", "--config", s(&cfg)]);
    assert_eq!((summary["train"].as_u64(), summary["test"].as_u64(), summary["seed"].as_u64()), (Some(8), Some(2), Some(3)));
    let m = load_manifest(&dir.path().join("a/manifest.json")).unwrap();
    assert_eq!(m.entries.len(), 10);
    assert_eq!(m.resolution().unwrap(), 16);

    // same seed twice gives identical files; flags override the file
    ok(&["--config", s(&cfg), "dataset", "build", "--out", s(&dir.path().join("b"))]);
    assert_eq!(files(&dir.path().join("a")), files(&dir.path().join("b")));
    ok(&["--config", s(&cfg), "--seed", "4", "dataset", "build", "--out", s(&dir.path().join("c")), "--resolution", "32"]);
    let c = load_manifest(&dir.path().join("c/manifest.json")).unwrap();
    assert_eq!(c.resolution().unwrap(), 32);
    assert_ne!(c.entries[0].sim, m.entries[0].sim);
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let ck = dir.path().join("m.ckpt");
    tiny_checkpoint(&ck);
    let png = dir.path().join("p.png");
    assert_eq!(code(&["dataset", "build", "--bogus"]), EXIT_VALIDATION);
    assert_eq!(code(&["predict", "--checkpoint", "/no/such.ckpt", "--theta", "0,1,2,0", "--out", s(&png)]), EXIT_VALIDATION);
    assert_eq!(code(&["predict", "--checkpoint", s(&ck), "--theta", "60,1,2,0", "--out", s(&png)]), EXIT_VALIDATION);
    assert_eq!(code(&["predict", "--checkpoint", s(&ck), "--theta", "1,2", "--out", s(&png)]), EXIT_VALIDATION);
    assert_eq!(code(&["predict", "--checkpoint", s(&ck), "--theta", "1,2,2,0"]), EXIT_VALIDATION);
    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "[dataset]\ncolour = 1\n").unwrap();
    assert_eq!(code(&["--config", s(&bad), "dataset", "build", "--out", s(dir.path())]), EXIT_VALIDATION);
    std::fs::write(&ck, b"SRGCKPT\0garbage").unwrap();
    assert_eq!(code(&["predict", "--checkpoint", s(&ck), "--theta", "1,2,2,0", "--out", s(&png)]), EXIT_RUNTIME);
    assert_eq!(code(&["--help"]), 0);
}

#[test]
fn predict_matches_generate() {
    let dir = tempfile::tempdir().unwrap();
    let ck = dir.path().join("m.ckpt");
    let model = tiny_checkpoint(&ck);
    let png = dir.path().join("out/p.png");
    let summary = ok(&["predict", "--checkpoint", s(&ck), "--theta", "-7.5,2,1.5,0.1", "--out", s(&png)]);
    assert_eq!(summary["theta"], serde_json::json!([-7.5, 2.0, 1.5, 0.1]));
    let theta = ParameterVector::new(vec![-7.5, 2.0, 1.5], vec![0.1]);
    assert_eq!(std::fs::read(&png).unwrap(), model.generate(&theta).unwrap().to_png_bytes().unwrap());
}

#[test]
fn drag_output_matches_library_run() {
    let dir = tempfile::tempdir().unwrap();
    let ck = dir.path().join("m.ckpt");
    let model = tiny_checkpoint(&ck);
    let out = dir.path().join("cli");
    let summary = ok(&[
        "drag", "--checkpoint", s(&ck), "--theta", "-4,3,2,0.05", "--select", "4,8", "--target", "11,8", "--select", "12,3",
        "--target", "9,12", "--max-iters", "6", "--step-size", "0.05", "--disappearance-threshold", "0.000001", "--free",
        "position", "--free", "spread", "--out", s(&out),
    ]);

    let theta = ParameterVector::new(vec![-4.0, 3.0, 2.0], vec![0.05]);
    let image = model.generate(&theta).unwrap();
    let opts = PatchOptions::default();
    let sels = vec![
        select_patch(&image, [4, 8], &opts).unwrap().with_target([11, 8]),
        select_patch(&image, [12, 3], &opts).unwrap().with_target([9, 12]),
    ];
    let config = DragConfig {
        max_iters: 6,
        step_size: 0.05,
        disappearance_threshold: 1e-6,
        free_mask: vec![true, false, true],
        ..DragConfig::default()
    };
    let session = run_drag(model, theta, sels, config).unwrap();
    let lib = dir.path().join("lib");
    session.export(&lib).unwrap();
    assert_eq!(files(&out), files(&lib));
    assert_eq!(summary["steps"].as_u64().unwrap() as usize, session.step_count());
    assert!(session.trajectory().iter().all(|r| r.theta[1] == 3.0));

    assert_eq!(
        code(&["drag", "--checkpoint", s(&ck), "--theta", "-4,3,2,0.05", "--select", "4,8", "--out", s(&out)]),
        EXIT_VALIDATION
    );
    assert_eq!(
        code(&[
            "drag", "--checkpoint", s(&ck), "--theta", "-4,3,2,0.05", "--select", "4,8", "--target", "5,5", "--free", "offset",
            "--out", s(&out)
        ]),
        EXIT_VALIDATION
    );
}

#[test]
fn overfit_single_sample_evaluates_near_perfect() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    ok(&["dataset", "build", "--out", s(&data), "--resolution", "16", "--grid", "1,1,1,1", "--test-count", "0"]);
    let run = dir.path().join("run");
    let summary = ok(&[
        "train", "--manifest", s(&data.join("manifest.json")), "--out", s(&run), "--epochs", "1500", "--batch-size", "1",
        "--learning-rate", "5e-3", "--schedule", "cosine", "--hidden", "32", "--mapping-depth", "2", "--base-channels", "32",
        "--min-channels", "32", "--convs-per-block", "2",
    ]);
    assert_eq!(summary["epochs"], 1500);
    assert!(run.join("train_log.ndjson").exists());
    let report_path = dir.path().join("eval.json");
    ok(&[
        "evaluate", "--checkpoint", s(&run.join("model.ckpt")), "--manifest", s(&data.join("manifest.json")), "--split", "train",
        "--out", s(&report_path),
    ]);
    let report: Value = serde_json::from_str(&std::fs::read_to_string(&report_path).unwrap()).unwrap();
    assert_eq!(report["count"], 1);
    let psnr = match &report["mean_psnr"] {
        Value::String(t) if t == "inf" => f64::INFINITY,
        v => v.as_f64().unwrap(),
    };
    assert!(psnr >= 40.0, "{psnr}");
    assert!(report["mean_ssim"].as_f64().unwrap() > 0.99);

    // the test split is empty here
    assert_eq!(
        code(&["evaluate", "--checkpoint", s(&run.join("model.ckpt")), "--manifest", s(&data.join("manifest.json"))]),
        EXIT_VALIDATION
    );
}

#[test]
fn training_divergence_is_a_runtime_error() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    ok(&["dataset", "build", "--out", s(&data), "--resolution", "8", "--count", "6", "--test-count", "1"]);
    let out = surrogate(&[
        "train", "--manifest", s(&data.join("manifest.json")), "--out", s(&dir.path().join("run")), "--epochs", "3",
        "--learning-rate", "1e30", "--hidden", "16", "--base-channels", "8", "--min-channels", "8",
    ]);
    assert_eq!(out.status.code(), Some(EXIT_RUNTIME));
    assert!(String::from_utf8_lossy(&out.stderr).contains("diverged"));
    assert!(dir.path().join("run/last_good.ckpt").exists());
}

#[test]
fn latent_diagnostics_report_and_plot() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    ok(&["dataset", "build", "--out", s(&data), "--resolution", "16", "--count", "30", "--test-count", "5"]);
    let ck = dir.path().join("m.ckpt");
    tiny_checkpoint(&ck);
    let (report, plot) = (dir.path().join("latents.json"), dir.path().join("latents.png"));
    let manifest = data.join("manifest.json");
    let args = [
        "--seed", "9", "diagnose", "latents", "--checkpoint", s(&ck), "--manifest", s(&manifest), "--in-range",
        "10", "--out-of-range", "12", "--out", s(&report), "--plot", s(&plot),
    ];
    let summary = ok(&args);
    let labels: Vec<&str> = summary["neighbors"].as_array().unwrap().iter().map(|n| n["label"].as_str().unwrap()).collect();
    assert_eq!(labels, ["test", "in_range", "out_of_range"]);
    let full: Value = serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(full["points"].as_array().unwrap().len(), 25 + 5 + 10 + 12);
    assert_eq!(surrogate_core::image::png_dimensions(&plot).unwrap(), (512, 512));
    let first = std::fs::read(&report).unwrap();
    ok(&args);
    assert_eq!(std::fs::read(&report).unwrap(), first);
    let m = load_manifest(&data.join("manifest.json")).unwrap();
    assert_eq!(m.count(Split::Test), 5);
}

#[test]
fn serve_configuration_precedence() {
    let none = ServeArgs { host: None, port: None, checkpoint_dir: None, idle_timeout_secs: None };
    let file = ServiceConfig { port: 9000, idle_timeout_secs: 60, ..ServiceConfig::default() };
    let env = vec![("SURROGATE_PORT".to_string(), "9100".to_string())];
    let c = serve_config(&none, Some(file.clone()), env.clone()).unwrap();
    assert_eq!((c.port, c.idle_timeout_secs, c.host.as_str()), (9100, 60, "127.0.0.1"));
    let flags = ServeArgs { port: Some(9200), ..none };
    assert_eq!(serve_config(&flags, Some(file), env).unwrap().port, 9200);
}
