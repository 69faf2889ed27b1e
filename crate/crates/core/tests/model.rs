use surrogate_core::losses::LossWeights;
use surrogate_core::model::{BackwardSeed, Checkpoint, Generator, GeneratorConfig, Model, TrainingMetadata, CHECKPOINT_VERSION};
use surrogate_core::synthdata::{ParameterSpec, ParameterVector};
use surrogate_core::Error;

fn tiny(resolution: usize) -> GeneratorConfig {
    GeneratorConfig {
        sim_dim: 3,
        vis_dim: 1,
        hidden: 8,
        mapping_depth: 2,
        base_channels: 6,
        min_channels: 3,
        resolution,
        convs_per_block: 2,
    }
}

fn weights(n: usize, seed: u64) -> Vec<f64> {
    (0..n).map(|i| ((i as u64 * 7919 + seed * 104729) % 997) as f64 / 997.0 - 0.5).collect()
}

/// Scalar objective: fixed weighted sums of the image and of level 1.
fn objective(g: &Generator<f64>, sim: &[f64], vis: &[f64], wi: &[f64], wf: &[f64]) -> f64 {
    let pass = g.forward(sim, vis, 2).unwrap();
    let a: f64 = pass.image.iter().zip(wi).map(|(x, w)| x * w).sum();
    let b: f64 = pass.level_output(1).iter().zip(wf).map(|(x, w)| x * w).sum();
    a + b
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / (a.abs() + b.abs()).max(1e-6)
}

#[test]
fn input_and_weight_gradients_match_finite_differences() {
    let g: Generator<f64> = Generator::init(&tiny(16), 3).unwrap();
    let sim = vec![0.2, 0.7, 0.4, 0.9, 0.1, 0.5];
    let vis = vec![0.3, 0.8];
    let pass = g.forward(&sim, &vis, 2).unwrap();
    let wi = weights(pass.image.len(), 1);
    let wf = weights(pass.level_output(1).len(), 2);
    let mut grads = g.zeros_like();
    let seed = BackwardSeed { image: Some(&wi), levels: vec![(1, &wf)] };
    let gin = g.backward(&pass, &seed, Some(&mut grads));

    let h = 1e-6;
    for i in 0..sim.len() {
        let mut p = sim.clone();
        p[i] += h;
        let up = objective(&g, &p, &vis, &wi, &wf);
        p[i] -= 2.0 * h;
        let dn = objective(&g, &p, &vis, &wi, &wf);
        let fd = (up - dn) / (2.0 * h);
        assert!(rel_err(fd, gin.sim[i]) < 1e-5, "sim[{i}]: fd {fd} vs {}", gin.sim[i]);
    }
    for i in 0..vis.len() {
        let mut p = vis.clone();
        p[i] += h;
        let up = objective(&g, &sim, &p, &wi, &wf);
        p[i] -= 2.0 * h;
        let dn = objective(&g, &sim, &p, &wi, &wf);
        let fd = (up - dn) / (2.0 * h);
        assert!(rel_err(fd, gin.vis[i]) < 1e-5, "vis[{i}]: fd {fd} vs {}", gin.vis[i]);
    }

    let names: Vec<String> = g.named_tensors().into_iter().map(|(n, _, _)| n).collect();
    let analytic: Vec<Vec<f64>> = grads.tensors().into_iter().map(<[f64]>::to_vec).collect();
    for (t, name) in names.iter().enumerate() {
        let len = analytic[t].len();
        for &j in &[0, len / 2, len - 1] {
            let mut gp = g.clone();
            gp.tensors_mut()[t][j] += h;
            let up = objective(&gp, &sim, &vis, &wi, &wf);
            gp.tensors_mut()[t][j] -= 2.0 * h;
            let dn = objective(&gp, &sim, &vis, &wi, &wf);
            let fd = (up - dn) / (2.0 * h);
            let an = analytic[t][j];
            assert!(
                rel_err(fd, an) < 1e-4 || (fd - an).abs() < 1e-9,
                "{name}[{j}]: fd {fd} vs analytic {an}"
            );
        }
    }
}

#[test]
fn feature_only_seed_skips_later_levels_but_stays_exact() {
    let g: Generator<f64> = Generator::init(&tiny(16), 5).unwrap();
    let sim = vec![0.5, 0.25, 0.75];
    let vis = vec![0.5];
    let pass = g.forward(&sim, &vis, 1).unwrap();
    let wf = weights(pass.level_output(1).len(), 9);
    let gin = g.backward(&pass, &BackwardSeed { image: None, levels: vec![(1, &wf)] }, None);
    let f = |s: &[f64]| -> f64 {
        let p = g.forward(s, &vis, 1).unwrap();
        p.level_output(1).iter().zip(&wf).map(|(x, w)| x * w).sum()
    };
    for i in 0..3 {
        let mut p = sim.clone();
        p[i] += 1e-6;
        let up = f(&p);
        p[i] -= 2e-6;
        let fd = (up - f(&p)) / 2e-6;
        assert!(rel_err(fd, gin.sim[i]) < 1e-5, "fd {fd} vs {}", gin.sim[i]);
    }
}

#[test]
fn output_side_follows_block_count() {
    for blocks in 1..=5 {
        let res = 4 << blocks;
        let cfg = GeneratorConfig { base_channels: 4, min_channels: 2, hidden: 4, mapping_depth: 1, convs_per_block: 1, ..tiny(res) };
        assert_eq!(cfg.blocks(), blocks);
        let g: Generator<f32> = Generator::init(&cfg, 0).unwrap();
        let pass = g.forward(&[0.5; 3], &[0.5], 1).unwrap();
        assert_eq!(pass.image.len(), 3 * res * res);
        assert!(pass.image.iter().all(|v| (0.0..=1.0).contains(v)));
        assert_eq!(cfg.layer_ids().last().unwrap(), &format!("b{res}"));
    }
    assert!(Generator::<f32>::init(&tiny(48), 0).is_err());
    assert!(Generator::<f32>::init(&tiny(4), 0).is_err());
}

#[test]
fn channel_schedule_halves_to_floor() {
    let cfg = GeneratorConfig::new(3, 1, 64);
    assert_eq!(cfg.channels(), vec![256, 128, 64, 64, 64]);
    assert_eq!(cfg.layer_ids(), vec!["b4", "b8", "b16", "b32", "b64"]);
    assert_eq!(cfg.default_feature_layer(), "b32");
    assert!(cfg.level_of("b7").is_err());
}

#[test]
fn forward_is_deterministic() {
    let g: Generator<f32> = Generator::init(&tiny(32), 11).unwrap();
    let a = g.forward(&[0.1, 0.2, 0.3], &[0.4], 1).unwrap();
    let b = g.forward(&[0.1, 0.2, 0.3], &[0.4], 1).unwrap();
    assert_eq!(a.image, b.image);
    let g2: Generator<f32> = Generator::init(&tiny(32), 11).unwrap();
    assert_eq!(g, g2);
}

#[test]
fn batched_forward_matches_single_samples() {
    let g: Generator<f32> = Generator::init(&tiny(16), 2).unwrap();
    let both = g.forward(&[0.1, 0.2, 0.3, 0.9, 0.8, 0.7], &[0.4, 0.6], 2).unwrap();
    let second = g.forward(&[0.9, 0.8, 0.7], &[0.6], 1).unwrap();
    for (a, b) in both.image_of(1).iter().zip(&second.image) {
        assert!((a - b).abs() < 1e-6);
    }
}

#[test]
fn rejects_non_finite_inputs_and_latents() {
    let g: Generator<f32> = Generator::init(&tiny(8), 0).unwrap();
    assert!(matches!(g.forward(&[f32::NAN, 0.0, 0.0], &[0.0], 1), Err(Error::Data(_))));
    assert!(matches!(g.mapping_forward(&[f32::INFINITY; 8], 1), Err(Error::Data(_))));
    assert!(matches!(g.synthesis_forward(&[0.0; 7], 1), Err(Error::Shape(_))));
}

#[test]
fn staged_forward_equals_full_forward() {
    let g: Generator<f32> = Generator::init(&tiny(16), 4).unwrap();
    let (sim, vis) = ([0.3, 0.6, 0.9], [0.2]);
    let fused = g.param_subnet_forward(&sim, &vis, 1).unwrap();
    let w = g.mapping_forward(&fused, 1).unwrap();
    let (img, feats) = g.synthesis_forward(&w, 1).unwrap();
    let full = g.forward(&sim, &vis, 1).unwrap();
    assert_eq!(img, full.image);
    assert_eq!(w, full.latent());
    assert_eq!(feats.len(), 3);
    assert_eq!(feats[2], full.level_output(2));
}

fn model() -> Model {
    Model::new(ParameterSpec::synthetic(), &tiny(16), 21).unwrap()
}

#[test]
fn model_checks_parameter_ranges() {
    let m = model();
    let bad = ParameterVector::new(vec![40.0, 1.0, 2.0], vec![0.0]);
    match m.generate(&bad) {
        Err(Error::OutOfRange { name, .. }) => assert_eq!(name, "position"),
        other => panic!("expected OutOfRange, got {other:?}"),
    }
    let ok = m.generate(&ParameterSpec::synthetic().midpoint()).unwrap();
    assert_eq!((ok.width, ok.height), (16, 16));
    let f = m.feature_map(&ParameterSpec::synthetic().midpoint(), "b8").unwrap();
    assert_eq!((f.channels, f.height), (3, 8));
    let r = f.resized(16, 16);
    assert_eq!(r.data.len(), 3 * 256);
}

#[test]
fn checkpoint_round_trip_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let ck = Checkpoint::new(
        model(),
        TrainingMetadata { epochs: 3, steps: 42, seed: 7, final_loss: Some(0.125), perceptual: Some("fallback-perceptual".into()), loss_weights: Some(LossWeights::default()), dataset: None },
    );
    let path = dir.path().join("a.ckpt");
    ck.save(&path).unwrap();
    let loaded = Checkpoint::load(&path).unwrap();
    assert_eq!(loaded, ck);
    let p = ParameterSpec::synthetic().midpoint();
    assert_eq!(loaded.model.generate(&p).unwrap(), ck.model.generate(&p).unwrap());
    let again = dir.path().join("b.ckpt");
    loaded.save(&again).unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&again).unwrap());
}

#[test]
fn checkpoint_errors_are_distinct() {
    let bytes = Checkpoint::new(model(), TrainingMetadata::default()).to_bytes().unwrap();

    let mut flipped = bytes.clone();
    let mid = flipped.len() / 2;
    flipped[mid] ^= 0x40;
    assert!(matches!(Checkpoint::from_bytes(&flipped), Err(Error::Corrupt(_))));

    assert!(matches!(Checkpoint::from_bytes(&bytes[..bytes.len() - 100]), Err(Error::Corrupt(_))));
    assert!(matches!(Checkpoint::from_bytes(b"hello"), Err(Error::Corrupt(_))));

    let mut future = bytes.clone();
    future[8..12].copy_from_slice(&(CHECKPOINT_VERSION + 1).to_le_bytes());
    match Checkpoint::from_bytes(&future) {
        Err(Error::IncompatibleVersion { found, expected }) => {
            assert_eq!((found, expected), (CHECKPOINT_VERSION + 1, CHECKPOINT_VERSION))
        }
        other => panic!("expected IncompatibleVersion, got {other:?}"),
    }

    assert!(matches!(Checkpoint::load(std::path::Path::new("/nonexistent/x.ckpt")), Err(Error::NotFound(_))));
}
