//! Shared fixtures for the desk-scale acceptance runs: the cached dataset and
//! trained checkpoints, and the grid-search reference for drag inversion.

use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use surrogate_core::losses::LossWeights;
use surrogate_core::model::{Checkpoint, FeatureMap, GeneratorConfig, Model};
use surrogate_core::patch::PatchSelection;
use surrogate_core::synthdata::{build_dataset, load_manifest, DatasetManifest, DatasetPlan, ParameterSpec, ParameterVector, MANIFEST_FILE};
use surrogate_core::training::{train_with, EpochRecord, LrSchedule, TrainConfig};
use surrogate_core::{drag, Error, Result};

pub const DATASET_SEED: u64 = 7;
pub const TRAIN_EPOCHS: usize = 30;
pub const LEARNING_RATE: f64 = 1e-3;

/// Trained checkpoints are expensive; they live here between runs.
/// `SURROGATE_ACCEPTANCE_CACHE` overrides the location.
pub fn cache_dir() -> PathBuf {
    match std::env::var_os("SURROGATE_ACCEPTANCE_CACHE") {
        Some(p) => PathBuf::from(p),
        None => Path::new(env!("CARGO_MANIFEST_DIR")).join("../../target/acceptance-cache"),
    }
}

/// Default synthetic dataset: 64 px, 2000 train and 200 test images.
pub fn desk_dataset() -> Result<DatasetManifest> {
    let dir = cache_dir().join(format!("desk-s{DATASET_SEED}"));
    let path = dir.join(MANIFEST_FILE);
    if path.exists() {
        return load_manifest(&path);
    }
    build_dataset(&ParameterSpec::synthetic(), &DatasetPlan::desk_default(), &dir, DATASET_SEED)
}

pub fn desk_generator() -> GeneratorConfig {
    GeneratorConfig {
        hidden: 512,
        mapping_depth: 4,
        base_channels: 128,
        min_channels: 16,
        convs_per_block: 1,
        ..GeneratorConfig::new(3, 1, 64)
    }
}

pub fn desk_train_config(weights: LossWeights) -> TrainConfig {
    TrainConfig { epochs: TRAIN_EPOCHS, learning_rate: LEARNING_RATE, schedule: LrSchedule::Cosine, weights, ..Default::default() }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunRecord {
    /// Wall-clock training time of the run that produced the checkpoint.
    pub seconds: f64,
    pub log: Vec<EpochRecord>,
}

pub struct TrainedRun {
    pub checkpoint: Checkpoint,
    pub record: RunRecord,
    pub path: PathBuf,
    pub cached: bool,
}

fn run_key(tag: &str, gen: &GeneratorConfig, cfg: &TrainConfig) -> String {
    format!(
        "{tag}-h{}-d{}-b{}-f{}-c{}-e{}-lr{}-{:?}-bs{}-s{}",
        gen.hidden,
        gen.mapping_depth,
        gen.base_channels,
        gen.min_channels,
        gen.convs_per_block,
        cfg.epochs,
        cfg.learning_rate,
        cfg.schedule,
        cfg.batch_size,
        cfg.seed
    )
    .to_lowercase()
}

fn io(path: &Path, source: std::io::Error) -> Error {
    Error::Io { path: path.to_path_buf(), source }
}

/// Trains on the desk dataset unless a checkpoint for the same settings is
/// already cached.
pub fn trained(tag: &str, manifest: &DatasetManifest, weights: LossWeights) -> Result<TrainedRun> {
    let gen = desk_generator();
    let cfg = desk_train_config(weights);
    let key = run_key(tag, &gen, &cfg);
    let dir = cache_dir();
    let (ckpt_path, record_path) = (dir.join(format!("{key}.ckpt")), dir.join(format!("{key}.json")));
    if ckpt_path.exists() && record_path.exists() {
        let checkpoint = Checkpoint::load(&ckpt_path)?;
        let record = serde_json::from_str(&std::fs::read_to_string(&record_path).map_err(|e| io(&record_path, e))?)?;
        return Ok(TrainedRun { checkpoint, record, path: ckpt_path, cached: true });
    }
    std::fs::create_dir_all(&dir).map_err(|e| io(&dir, e))?;
    let t0 = Instant::now();
    let outcome = train_with(manifest, &gen, &cfg, None, |r| {
        eprintln!("  [{tag}] epoch {} total {:.5} ({:.0}s)", r.epoch, r.total, t0.elapsed().as_secs_f64())
    })?;
    let record = RunRecord { seconds: t0.elapsed().as_secs_f64(), log: outcome.log };
    outcome.checkpoint.save(&ckpt_path)?;
    std::fs::write(&record_path, serde_json::to_string_pretty(&record)?).map_err(|e| io(&record_path, e))?;
    Ok(TrainedRun { checkpoint: outcome.checkpoint, record, path: ckpt_path, cached: false })
}

/// Handle position in the frame generated at `theta`, found by matching the
/// initial feature anywhere in the image.
pub fn located_handle(model: &Model, f0: &FeatureMap, theta: &ParameterVector, layer: &str, sel: &PatchSelection) -> Result<[i64; 2]> {
    let res = model.resolution();
    let f = model.feature_map(theta, layer)?.resized(res, res);
    let mut at_start = sel.clone();
    at_start.seed = sel.initial();
    Ok(drag::track_point(f0, &f, &at_start, res as i64).expect("image has pixels"))
}

#[derive(Clone, Debug)]
pub struct GridOracle {
    /// Value of the free parameter minimizing the handle-to-target distance.
    pub value: f64,
    pub distance: f64,
    /// Extent of the minimizing interval around `value`.
    pub interval: (f64, f64),
}

/// Dense scan of one simulation parameter over its range. Each candidate is
/// scored by the distance between the target and the handle as located in
/// the candidate's frame. Integer pixel positions make the minimum a plateau;
/// the midpoint of the plateau nearest the starting value is reported.
pub fn grid_oracle(model: &Model, theta: &ParameterVector, sel: &PatchSelection, layer: &str, index: usize, points: usize) -> Result<GridOracle> {
    let res = model.resolution();
    let f0 = model.feature_map(theta, layer)?.resized(res, res);
    let def = &model.spec.sim[index];
    let mut scored = Vec::with_capacity(points);
    for k in 0..points {
        let v = def.min + (def.max - def.min) * k as f64 / (points - 1) as f64;
        let mut t = theta.clone();
        t.sim[index] = v;
        let q = located_handle(model, &f0, &t, layer, sel)?;
        let d = (((q[0] - sel.target[0]).pow(2) + (q[1] - sel.target[1]).pow(2)) as f64).sqrt();
        scored.push((v, d));
    }
    let best = scored.iter().map(|s| s.1).fold(f64::INFINITY, f64::min);
    let start = theta.sim[index];
    let nearest = scored
        .iter()
        .enumerate()
        .filter(|(_, s)| s.1 == best)
        .min_by(|a, b| (a.1 .0 - start).abs().total_cmp(&(b.1 .0 - start).abs()))
        .map(|(i, _)| i)
        .expect("non-empty scan");
    let (mut lo, mut hi) = (nearest, nearest);
    while lo > 0 && scored[lo - 1].1 == best {
        lo -= 1;
    }
    while hi + 1 < scored.len() && scored[hi + 1].1 == best {
        hi += 1;
    }
    let (a, b) = (scored[lo].0, scored[hi].0);
    Ok(GridOracle { value: 0.5 * (a + b), distance: best, interval: (a, b) })
}
