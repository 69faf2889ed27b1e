use std::path::Path;

use surrogate_core::image::RenderedImage;
use surrogate_core::losses::{FeatureExtractor, LossWeights, PerceptualConfig};
use surrogate_core::model::{Checkpoint, GeneratorConfig};
use surrogate_core::synthdata::*;
use surrogate_core::training::*;
use surrogate_core::Error;

fn noisy(w: usize, h: usize, seed: u64) -> RenderedImage {
    let mut s = seed.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(1);
    let mut data = Vec::with_capacity(3 * w * h);
    for i in 0..3 * w * h {
        s ^= s << 13;
        s ^= s >> 7;
        s ^= s << 17;
        let smooth = ((i % w) as f32 / w as f32) * 0.5;
        data.push(smooth + (s % 1000) as f32 / 2000.0);
    }
    RenderedImage::from_planar(w, h, data).unwrap()
}

/// Direct 2-D weighted window sums at every fully covered position.
fn naive_ssim(a: &RenderedImage, b: &RenderedImage) -> f64 {
    let (w, h) = (a.width, a.height);
    let lum = |img: &RenderedImage, x: usize, y: usize| {
        let p = img.pixel(x, y);
        0.299 * p[0] as f64 + 0.587 * p[1] as f64 + 0.114 * p[2] as f64
    };
    let mut g = [0.0f64; 11];
    for (i, v) in g.iter_mut().enumerate() {
        let d = i as f64 - 5.0;
        *v = (-d * d / (2.0 * 1.5 * 1.5)).exp();
    }
    let total: f64 = g.iter().sum::<f64>().powi(2);
    let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
    let mut acc = 0.0;
    let mut n = 0;
    for y0 in 0..=h - 11 {
        for x0 in 0..=w - 11 {
            let (mut mx, mut my, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for j in 0..11 {
                for i in 0..11 {
                    let wt = g[i] * g[j] / total;
                    let (p, q) = (lum(a, x0 + i, y0 + j), lum(b, x0 + i, y0 + j));
                    mx += wt * p;
                    my += wt * q;
                    sxx += wt * p * p;
                    syy += wt * q * q;
                    sxy += wt * p * q;
                }
            }
            let (vx, vy, cov) = (sxx - mx * mx, syy - my * my, sxy - mx * my);
            acc += ((2.0 * mx * my + c1) * (2.0 * cov + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
            n += 1;
        }
    }
    acc / n as f64
}

#[test]
fn ssim_matches_naive_window_oracle() {
    for (w, h, s) in [(11, 11, 1), (17, 13, 2), (24, 24, 3)] {
        let (a, b) = (noisy(w, h, s), noisy(w, h, s + 50));
        let got = ssim(&a, &b).unwrap();
        let want = naive_ssim(&a, &b);
        assert!((got - want).abs() < 1e-6, "{w}×{h}: {got} vs {want}");
        assert!((-1.0..=1.0).contains(&got));
    }
    let a = noisy(16, 16, 9);
    assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
    assert!(matches!(ssim(&noisy(10, 16, 1), &noisy(10, 16, 2)), Err(Error::Shape(_))));
    assert!(matches!(ssim(&noisy(16, 16, 1), &noisy(12, 16, 2)), Err(Error::Shape(_))));
}

#[test]
fn psnr_reference_points() {
    let a = RenderedImage::filled(8, 8, [0.5; 3]);
    let b = RenderedImage::filled(8, 8, [0.6; 3]);
    // f32 storage puts the difference a few ulps away from 0.1
    assert!((mse(&a, &b).unwrap() - 0.01).abs() < 1e-8);
    assert!((psnr(&a, &b).unwrap() - 20.0).abs() < 1e-5);
    let black = RenderedImage::filled(8, 8, [0.0; 3]);
    let white = RenderedImage::filled(8, 8, [1.0; 3]);
    assert_eq!(mse(&black, &white).unwrap(), 1.0);
    assert_eq!(psnr(&black, &white).unwrap(), 0.0);
    assert_eq!(psnr(&a, &a).unwrap(), f64::INFINITY);
    let ext = FeatureExtractor::from_config(&PerceptualConfig::default()).unwrap();
    assert_eq!(perceptual_distance(&a, &a, &ext).unwrap(), 0.0);
    assert!(perceptual_distance(&black, &white, &ext).unwrap() > 0.0);
}

#[test]
fn metrics_json_uses_infinity_sentinel() {
    let m = ImageMetrics { index: 3, psnr: f64::INFINITY, ssim: 1.0, perceptual: 0.0, mse: 0.0 };
    let v = serde_json::to_value(&m).unwrap();
    assert_eq!(v["psnr"], "inf");
    let m = ImageMetrics { psnr: 27.5, ..m };
    assert_eq!(serde_json::to_value(&m).unwrap()["psnr"], 27.5);
}

fn tiny_gen() -> GeneratorConfig {
    GeneratorConfig {
        hidden: 32,
        mapping_depth: 2,
        base_channels: 16,
        min_channels: 8,
        convs_per_block: 1,
        ..GeneratorConfig::new(3, 1, 16)
    }
}

fn tiny_dataset(dir: &Path, count: usize, test: usize) -> DatasetManifest {
    let plan = DatasetPlan {
        resolution: 16,
        sampling: Sampling::Random { count, vary_vis: false },
        test_count: test,
        ..DatasetPlan::desk_default()
    };
    build_dataset(&ParameterSpec::synthetic(), &plan, dir, 11).unwrap()
}

#[test]
fn one_sample_is_memorized() {
    let dir = tempfile::tempdir().unwrap();
    let plan = DatasetPlan {
        resolution: 16,
        sampling: Sampling::Grid { counts: vec![1, 1, 1, 1] },
        test_count: 0,
        ..DatasetPlan::desk_default()
    };
    let m = build_dataset(&ParameterSpec::synthetic(), &plan, dir.path(), 0).unwrap();
    assert_eq!(m.entries.len(), 1);
    let cfg = TrainConfig { epochs: 1500, batch_size: 1, learning_rate: 5e-3, schedule: LrSchedule::Cosine, ..Default::default() };
    let gen = GeneratorConfig { base_channels: 32, min_channels: 32, convs_per_block: 2, ..tiny_gen() };
    let out = train(&m, &gen, &cfg, None).unwrap();
    let pred = out.checkpoint.model.generate(&m.entries[0].params()).unwrap();
    let target = m.load_image(0).unwrap();
    let content = surrogate_core::losses::content_loss(&target, &pred).unwrap();
    assert!(content < 1e-3, "content loss {content}");
}

#[test]
fn cosine_schedule_endpoints() {
    assert_eq!(LrSchedule::Constant.rate(0.1, 7, 10), 0.1);
    assert_eq!(LrSchedule::Cosine.rate(0.1, 0, 10), 0.1);
    assert!((LrSchedule::Cosine.rate(0.1, 5, 10) - 0.05).abs() < 1e-15);
    assert!(LrSchedule::Cosine.rate(0.1, 10, 10).abs() < 1e-15);
}

#[test]
fn training_is_deterministic_and_logged() {
    let dir = tempfile::tempdir().unwrap();
    let m = tiny_dataset(&dir.path().join("data"), 24, 4);
    let cfg = TrainConfig { epochs: 2, batch_size: 8, learning_rate: 1e-3, checkpoint_every: 1, ..Default::default() };
    let (a_dir, b_dir) = (dir.path().join("a"), dir.path().join("b"));
    let a = train(&m, &tiny_gen(), &cfg, Some(&a_dir)).unwrap();
    let b = train(&m, &tiny_gen(), &cfg, Some(&b_dir)).unwrap();
    assert_eq!(a.log, b.log);
    assert_eq!(a.checkpoint.to_bytes().unwrap(), b.checkpoint.to_bytes().unwrap());
    assert_eq!(a.log[0].step, 3);
    assert_eq!(a.log[1].step, 6);

    let text = std::fs::read_to_string(a_dir.join(TRAIN_LOG_FILE)).unwrap();
    let lines: Vec<serde_json::Value> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), 2);
    let keys: Vec<_> = lines[0].as_object().unwrap().keys().cloned().collect();
    assert_eq!(keys.len(), 6);
    for k in ["epoch", "step", "content", "feature", "edge", "total"] {
        assert!(keys.contains(&k.to_string()), "{k}");
    }
    assert_eq!(lines[1]["total"], a.log[1].total);

    let mid = Checkpoint::load(&a_dir.join("epoch_0001.ckpt")).unwrap();
    assert_eq!(mid.metadata.epochs, 1);
    let last = Checkpoint::load(&a_dir.join("epoch_0002.ckpt")).unwrap();
    assert_eq!(last.to_bytes().unwrap().len(), a.checkpoint.to_bytes().unwrap().len());
    assert_eq!(a.checkpoint.metadata.perceptual.as_deref(), Some("fallback-perceptual"));

    let c = train(&m, &tiny_gen(), &TrainConfig { seed: 1, ..cfg }, None).unwrap();
    assert_ne!(a.log[0], c.log[0]);
}

#[test]
fn divergence_keeps_last_good_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let m = tiny_dataset(&dir.path().join("data"), 16, 2);
    let cfg = TrainConfig { epochs: 6, batch_size: 4, learning_rate: 1e30, ..Default::default() };
    let out = dir.path().join("run");
    match train(&m, &tiny_gen(), &cfg, Some(&out)) {
        Err(Error::Diverged { last_good: Some(p), .. }) => {
            assert_eq!(p, out.join(LAST_GOOD_FILE));
            let ck = Checkpoint::load(&p).unwrap();
            assert!(ck.model.generator.tensors().iter().all(|t| t.iter().all(|v| v.is_finite())));
        }
        other => panic!("expected divergence, got {other:?}"),
    }
}

#[test]
fn invalid_configs_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let m = tiny_dataset(dir.path(), 4, 1);
    for cfg in [
        TrainConfig { epochs: 0, ..Default::default() },
        TrainConfig { batch_size: 0, ..Default::default() },
        TrainConfig { learning_rate: 0.0, ..Default::default() },
        TrainConfig { device: "cuda:0".into(), ..Default::default() },
        TrainConfig { weights: LossWeights::new(0.0, 0.0, 0.0), ..Default::default() },
    ] {
        assert!(matches!(train(&m, &tiny_gen(), &cfg, None), Err(Error::Argument(_))), "{cfg:?}");
    }
    let wrong_res = GeneratorConfig { resolution: 32, ..tiny_gen() };
    assert!(matches!(train(&m, &wrong_res, &TrainConfig::default(), None), Err(Error::Shape(_))));
    let cfg: TrainConfig = config_from_json(r#"{"epochs": 3, "weights": {"alpha": 1.0, "beta": 0.5, "gamma": 0.0}}"#);
    assert_eq!(cfg.batch_size, 16);
    assert_eq!(cfg.weights.beta, 0.5);
}

fn config_from_json(json: &str) -> TrainConfig {
    serde_json::from_str(json).unwrap()
}

#[test]
fn evaluation_report() {
    let dir = tempfile::tempdir().unwrap();
    let m = tiny_dataset(dir.path(), 10, 3);
    let cfg = TrainConfig { epochs: 1, batch_size: 4, ..Default::default() };
    let ck = train(&m, &tiny_gen(), &cfg, None).unwrap().checkpoint;
    let ext = FeatureExtractor::from_config(&PerceptualConfig::default()).unwrap();
    let rep = evaluate(&ck, &m, Split::Test, &ext).unwrap();
    assert_eq!(rep.count, 3);
    assert_eq!(rep.perceptual_extractor, "fallback-perceptual");
    assert_eq!(rep.checkpoint, ck.digest_hex().unwrap());
    let idx = m.indices(Split::Test);
    assert_eq!(rep.images.iter().map(|i| i.index).collect::<Vec<_>>(), idx);
    for im in &rep.images {
        assert!(im.psnr > 0.0 && im.psnr.is_finite());
        assert!((-1.0..=1.0).contains(&im.ssim));
        let target = m.load_image(im.index).unwrap();
        let pred = ck.model.generate(&m.entries[im.index].params()).unwrap();
        assert_eq!(im.mse, mse(&target, &pred).unwrap());
    }
    let again = evaluate(&ck, &m, Split::Test, &ext).unwrap();
    assert_eq!(serde_json::to_string(&rep).unwrap(), serde_json::to_string(&again).unwrap());
}
