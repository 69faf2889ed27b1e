//! Generator training on a dataset manifest and checkpoint evaluation.

mod metrics;

pub use metrics::{gaussian_window, luminance, mse, perceptual_distance, psnr, ssim, SSIM_SIGMA, SSIM_WINDOW};

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::image::RenderedImage;
use crate::losses::{FeatureExtractor, LossBreakdown, LossWeights, Objective, PerceptualConfig};
use crate::model::{BackwardSeed, Checkpoint, Generator, GeneratorConfig, Model, TrainingMetadata};
use crate::nn::Adam;
use crate::synthdata::{DatasetManifest, Split};

pub const TRAIN_LOG_FILE: &str = "train_log.ndjson";
pub const LAST_GOOD_FILE: &str = "last_good.ckpt";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Adam,
}

/// Learning-rate schedule over the whole run.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    #[default]
    Constant,
    /// Half-cosine decay from `learning_rate` to zero at the last step.
    Cosine,
}

impl LrSchedule {
    /// Rate for optimizer step `step` (0-based) of `total`.
    pub fn rate(self, base: f64, step: u64, total: u64) -> f64 {
        match self {
            LrSchedule::Constant => base,
            LrSchedule::Cosine => {
                let t = step as f64 / total.max(1) as f64;
                0.5 * base * (1.0 + (std::f64::consts::PI * t).cos())
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub schedule: LrSchedule,
    pub optimizer: OptimizerKind,
    pub weights: LossWeights,
    pub perceptual: PerceptualConfig,
    pub seed: u64,
    /// Save a checkpoint every this many epochs (0: never during training).
    pub checkpoint_every: usize,
    pub device: String,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            batch_size: 16,
            learning_rate: 2e-4,
            schedule: LrSchedule::Constant,
            optimizer: OptimizerKind::Adam,
            weights: LossWeights::default(),
            perceptual: PerceptualConfig::default(),
            seed: 0,
            checkpoint_every: 0,
            device: "cpu".into(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Argument("epochs and batch size must be positive".into()));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::Argument(format!("learning rate {} must be positive", self.learning_rate)));
        }
        if self.device != "cpu" {
            return Err(Error::Argument(format!("device `{}` is not available; use `cpu`", self.device)));
        }
        self.weights.validate()
    }
}

/// One line of the training log.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Optimizer steps taken so far.
    pub step: u64,
    pub content: f64,
    pub feature: f64,
    pub edge: f64,
    pub total: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub log: Vec<EpochRecord>,
}

/// Generator inputs and target pixels of one split, held in memory.
struct SplitData {
    sim: Vec<f32>,
    vis: Vec<f32>,
    images: Vec<f32>,
    count: usize,
}

fn load_split(manifest: &DatasetManifest, split: Split) -> Result<SplitData> {
    let idx = manifest.indices(split);
    let mut data = SplitData { sim: Vec::new(), vis: Vec::new(), images: Vec::new(), count: idx.len() };
    for &i in &idx {
        let norm = manifest.spec.normalize(&manifest.entries[i].params())?;
        data.sim.extend(norm.sim.iter().map(|&v| v as f32));
        data.vis.extend(norm.vis.iter().map(|&v| v as f32));
        data.images.extend_from_slice(&manifest.load_image(i)?.data);
    }
    Ok(data)
}

fn check_compat(manifest: &DatasetManifest, config: &GeneratorConfig) -> Result<usize> {
    let res = manifest.resolution()?;
    if res != config.resolution || manifest.spec.sim_dim() != config.sim_dim || manifest.spec.vis_dim() != config.vis_dim {
        return Err(Error::Shape(format!(
            "generator ({}+{} params, {}px) does not match dataset ({}+{} params, {}px)",
            config.sim_dim,
            config.vis_dim,
            config.resolution,
            manifest.spec.sim_dim(),
            manifest.spec.vis_dim(),
            res
        )));
    }
    Ok(res)
}

pub fn train(manifest: &DatasetManifest, gen_config: &GeneratorConfig, config: &TrainConfig, out_dir: Option<&Path>) -> Result<TrainOutcome> {
    train_with(manifest, gen_config, config, out_dir, |_| {})
}

/// Trains with a callback after every epoch. Deterministic for a fixed seed.
pub fn train_with(
    manifest: &DatasetManifest,
    gen_config: &GeneratorConfig,
    config: &TrainConfig,
    out_dir: Option<&Path>,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    config.validate()?;
    gen_config.validate()?;
    let res = check_compat(manifest, gen_config)?;
    let data = load_split(manifest, Split::Train)?;
    if data.count == 0 {
        return Err(Error::Schema("manifest has no train entries".into()));
    }
    let extractor = FeatureExtractor::from_config(&config.perceptual)?;
    let objective = Objective { weights: config.weights, extractor };
    let mut model = Model::new(manifest.spec.clone(), gen_config, config.seed)?;
    let mut opt = Adam::<f32>::new(config.learning_rate);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut grads = model.generator.zeros_like();

    let mut log_writer = match out_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            let p = dir.join(TRAIN_LOG_FILE);
            Some((BufWriter::new(File::create(&p).map_err(|e| Error::io(&p, e))?), p))
        }
        None => None,
    };
    let metadata = |epochs: usize, steps: u64, loss: Option<f64>| TrainingMetadata {
        epochs,
        steps,
        seed: config.seed,
        final_loss: loss,
        perceptual: Some(objective.extractor.tag.clone()),
        loss_weights: Some(config.weights),
        dataset: Some(manifest.root.display().to_string()),
    };

    let (sd, vd, n_img) = (gen_config.sim_dim, gen_config.vis_dim, 3 * res * res);
    let mut order: Vec<usize> = (0..data.count).collect();
    let mut last_good: (Generator<f32>, usize) = (model.generator.clone(), 0);
    let mut last_good_path: Option<PathBuf> = None;
    let mut log = Vec::with_capacity(config.epochs);
    let total_steps = (config.epochs * data.count.div_ceil(config.batch_size)) as u64;
    let (mut sim_b, mut vis_b, mut img_b) = (Vec::new(), Vec::new(), Vec::new());

    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        let mut sums = LossBreakdown::default();
        for chunk in order.chunks(config.batch_size) {
            let bsz = chunk.len();
            sim_b.clear();
            vis_b.clear();
            img_b.clear();
            for &i in chunk {
                sim_b.extend_from_slice(&data.sim[i * sd..(i + 1) * sd]);
                vis_b.extend_from_slice(&data.vis[i * vd..(i + 1) * vd]);
                img_b.extend_from_slice(&data.images[i * n_img..(i + 1) * n_img]);
            }
            let pass = model.generator.forward(&sim_b, &vis_b, bsz)?;
            let (br, g_img) = objective.evaluate(&img_b, &pass.image, bsz, res, res, true);
            let g_img = g_img.expect("gradient requested");
            if !br.total.is_finite() || g_img.iter().any(|v| !v.is_finite()) {
                let path = match out_dir {
                    Some(dir) => {
                        let p = dir.join(LAST_GOOD_FILE);
                        let m = Model { generator: last_good.0.clone(), ..model.clone() };
                        Checkpoint::new(m, metadata(last_good.1, opt.steps(), None)).save(&p)?;
                        Some(p)
                    }
                    None => last_good_path.clone(),
                };
                return Err(Error::Diverged { epoch, last_good: path });
            }
            for t in grads.tensors_mut() {
                t.fill(0.0);
            }
            model
                .generator
                .backward(&pass, &BackwardSeed { image: Some(&g_img), levels: Vec::new() }, Some(&mut grads));
            opt.lr = config.schedule.rate(config.learning_rate, opt.steps(), total_steps);
            opt.step(model.generator.tensors_mut(), grads.tensors());
            let w = bsz as f64;
            sums.content += br.content * w;
            sums.feature += br.feature * w;
            sums.edge += br.edge * w;
            sums.total += br.total * w;
        }
        let n = data.count as f64;
        let rec = EpochRecord {
            epoch,
            step: opt.steps(),
            content: sums.content / n,
            feature: sums.feature / n,
            edge: sums.edge / n,
            total: sums.total / n,
        };
        if let Some((w, p)) = log_writer.as_mut() {
            serde_json::to_writer(&mut *w, &rec)?;
            w.write_all(b"\n").and_then(|_| w.flush()).map_err(|e| Error::io(&*p, e))?;
        }
        on_epoch(&rec);
        log.push(rec);
        if model.generator.tensors().iter().all(|t| t.iter().all(|v| v.is_finite())) {
            last_good = (model.generator.clone(), epoch);
        }
        if let Some(dir) = out_dir {
            if config.checkpoint_every > 0 && epoch % config.checkpoint_every == 0 {
                let p = dir.join(format!("epoch_{epoch:04}.ckpt"));
                Checkpoint::new(model.clone(), metadata(epoch, opt.steps(), Some(rec.total))).save(&p)?;
                last_good_path = Some(p);
            }
        }
    }
    let final_loss = log.last().map(|r| r.total);
    Ok(TrainOutcome {
        checkpoint: Checkpoint::new(model, metadata(config.epochs, opt.steps(), final_loss)),
        log,
    })
}

fn ser_psnr<S: Serializer>(v: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
    if v.is_infinite() {
        s.serialize_str("inf")
    } else {
        s.serialize_f64(*v)
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct ImageMetrics {
    pub index: usize,
    #[serde(serialize_with = "ser_psnr")]
    pub psnr: f64,
    pub ssim: f64,
    pub perceptual: f64,
    pub mse: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct MetricsReport {
    pub dataset: String,
    pub checkpoint: String,
    pub split: Split,
    /// Extractor behind the perceptual distance (a learned-metric stand-in).
    pub perceptual_extractor: String,
    pub count: usize,
    #[serde(serialize_with = "ser_psnr")]
    pub mean_psnr: f64,
    pub mean_ssim: f64,
    pub mean_perceptual: f64,
    pub mean_mse: f64,
    pub images: Vec<ImageMetrics>,
}

/// Generates every image of `split` and scores it against the stored target.
pub fn evaluate(checkpoint: &Checkpoint, manifest: &DatasetManifest, split: Split, extractor: &FeatureExtractor<f32>) -> Result<MetricsReport> {
    let model = &checkpoint.model;
    check_compat(manifest, model.config())?;
    let idx = manifest.indices(split);
    if idx.is_empty() {
        return Err(Error::Argument(format!("split `{split:?}` is empty")));
    }
    let mut pairs: Vec<(usize, RenderedImage, RenderedImage)> = Vec::with_capacity(idx.len());
    for chunk in idx.chunks(16) {
        let params: Vec<_> = chunk.iter().map(|&i| manifest.entries[i].params()).collect();
        let pass = model.forward(&params)?;
        for (b, &i) in chunk.iter().enumerate() {
            pairs.push((i, manifest.load_image(i)?, model.image_from(&pass, b)));
        }
    }
    let images = pairs
        .par_iter()
        .map(|(i, target, pred)| {
            Ok(ImageMetrics {
                index: *i,
                psnr: psnr(target, pred)?,
                ssim: ssim(target, pred)?,
                perceptual: perceptual_distance(target, pred, extractor)?,
                mse: mse(target, pred)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let n = images.len() as f64;
    let mean = |f: fn(&ImageMetrics) -> f64| images.iter().map(f).sum::<f64>() / n;
    Ok(MetricsReport {
        dataset: manifest.root.display().to_string(),
        checkpoint: checkpoint.digest_hex()?,
        split,
        perceptual_extractor: extractor.tag.clone(),
        count: images.len(),
        mean_psnr: mean(|m| m.psnr),
        mean_ssim: mean(|m| m.ssim),
        mean_perceptual: mean(|m| m.perceptual),
        mean_mse: mean(|m| m.mse),
        images,
    })
}
