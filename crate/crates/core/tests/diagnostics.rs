use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Deserialize;
use surrogate_core::diagnostics::*;
use surrogate_core::model::{GeneratorConfig, LatentVector, Model};
use surrogate_core::synthdata::{ParameterSpec, ParameterVector};
use surrogate_core::Error;

fn group(label: GroupLabel, rows: Vec<Vec<f32>>) -> LatentGroup {
    let params = rows.iter().map(|_| ParameterVector::new(vec![], vec![])).collect();
    LatentGroup { label, vectors: rows.into_iter().map(LatentVector).collect(), params }
}

fn pairwise(p: &[[f64; 2]]) -> Vec<f64> {
    let mut out = Vec::new();
    for i in 0..p.len() {
        for j in i + 1..p.len() {
            out.push(((p[i][0] - p[j][0]).powi(2) + (p[i][1] - p[j][1]).powi(2)).sqrt());
        }
    }
    out
}

/// Points of a plane embedded in `dim` dimensions through two random
/// orthonormal directions.
fn planar(points: &[[f64; 2]], dim: usize, seed: u64) -> Vec<Vec<f32>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut u: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let mut v: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let nu = u.iter().map(|x| x * x).sum::<f64>().sqrt();
    u.iter_mut().for_each(|x| *x /= nu);
    let d: f64 = u.iter().zip(&v).map(|(a, b)| a * b).sum();
    v.iter_mut().zip(&u).for_each(|(x, a)| *x -= d * a);
    let nv = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter_mut().for_each(|x| *x /= nv);
    let offset: Vec<f64> = (0..dim).map(|_| rng.gen_range(-0.5..0.5)).collect();
    points
        .iter()
        .map(|p| (0..dim).map(|k| (offset[k] + p[0] * u[k] + p[1] * v[k]) as f32).collect())
        .collect()
}

#[test]
fn planar_inputs_are_recovered_exactly() {
    for (pts, seed) in [
        (vec![[0.0, 0.0], [3.0, 0.0], [0.0, 4.0]], 1),
        (vec![[1.0, 2.0], [-2.0, 0.5], [0.25, -1.5], [2.0, 2.0], [-1.0, -1.0], [0.5, 0.0]], 2),
    ] {
        let rows = planar(&pts, 512, seed);
        let refs: Vec<&[f32]> = rows.iter().map(|r| r.as_slice()).collect();
        let y = classical_mds(&refs).unwrap();
        // distances of the f32-stored inputs are the reference
        let mut want = Vec::new();
        for i in 0..rows.len() {
            for j in i + 1..rows.len() {
                want.push(rows[i].iter().zip(&rows[j]).map(|(a, b)| (*a as f64 - *b as f64).powi(2)).sum::<f64>().sqrt());
            }
        }
        for (a, b) in pairwise(&y).iter().zip(&want) {
            assert!((a - b).abs() < 1e-6, "{a} vs {b}");
        }
        let report = mds_embed(&[group(GroupLabel::Train, rows)]).unwrap();
        assert!(report.stress < 1e-6);
    }
}

#[derive(Deserialize)]
struct MdsGolden {
    matrix: Vec<Vec<f32>>,
    coords: Vec<[f64; 2]>,
    stress: f64,
}

#[test]
fn pinned_matrix_matches_reference_coordinates() {
    let g: MdsGolden = serde_json::from_str(include_str!("golden/mds_pinned.json")).unwrap();
    assert_eq!((g.matrix.len(), g.matrix[0].len()), (5, 512));
    let report = mds_embed(&[group(GroupLabel::Train, g.matrix.clone())]).unwrap();
    for (p, want) in report.points.iter().zip(&g.coords) {
        for k in 0..2 {
            assert!((p.xy[k] - want[k]).abs() < 1e-6, "{:?} vs {want:?}", p.xy);
        }
    }
    assert!((report.stress - g.stress).abs() < 1e-9);
    assert!(report.points[0].xy[0] >= 0.0);
}

#[test]
fn degenerate_embeddings() {
    let same = group(GroupLabel::Train, vec![vec![0.5; 8]; 4]);
    let report = mds_embed(&[same]).unwrap();
    assert!(report.points.iter().all(|p| p.xy == [0.0, 0.0]));
    assert_eq!(report.stress, 0.0);
    assert!(matches!(mds_embed(&[group(GroupLabel::Train, vec![vec![0.0; 4]; 2])]), Err(Error::Argument(_))));
    let mixed = [group(GroupLabel::Train, vec![vec![0.0; 4]; 2]), group(GroupLabel::Test, vec![vec![0.0; 5]])];
    assert!(matches!(mds_embed(&mixed), Err(Error::Shape(_))));
}

#[test]
fn neighbor_statistics() {
    let train = group(GroupLabel::Train, vec![vec![0.0, 0.0], vec![10.0, 0.0]]);
    let test = group(GroupLabel::Test, vec![vec![10.0, 0.0], vec![1.0, 0.0], vec![0.0, 3.0]]);
    let far = group(GroupLabel::OutOfRange, vec![vec![30.0, 0.0]]);
    let stats = neighbor_stats(&[train.clone(), test.clone(), far.clone()]).unwrap();
    assert_eq!(stats.len(), 2);
    assert_eq!(stats[0].label, GroupLabel::Test);
    assert_eq!(stats[0].count, 3);
    assert!((stats[0].mean - 4.0 / 3.0).abs() < 1e-12);
    assert_eq!(stats[0].median, 1.0);
    assert_eq!(stats[1].mean, 20.0);

    // duplicated train vector sits at distance zero
    let dup = group(GroupLabel::Test, vec![vec![10.0, 0.0]]);
    assert_eq!(neighbor_stats(&[train.clone(), dup]).unwrap()[0].mean, 0.0);

    // group order does not change the statistics of a label
    let reordered = neighbor_stats(&[far.clone(), test.clone(), train.clone()]).unwrap();
    let find = |s: &[NeighborStats], l| s.iter().find(|x| x.label == l).unwrap().clone();
    assert_eq!(find(&stats, GroupLabel::Test), find(&reordered, GroupLabel::Test));
    assert_eq!(find(&stats, GroupLabel::OutOfRange), find(&reordered, GroupLabel::OutOfRange));

    let only = validity_report(&[train.clone()]).unwrap();
    assert!(only.neighbors.is_empty());
    assert!(matches!(validity_report(&[test]), Err(Error::Argument(_))));
    let full = validity_report(&[train, far]).unwrap();
    assert_eq!(full.points.len(), 3);
    assert_eq!(full.neighbors.len(), 1);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn embedding_is_permutation_equivariant(seed in 0u64..10_000, n in 4usize..9) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rows: Vec<Vec<f32>> = (0..n).map(|_| (0..16).map(|_| rng.gen_range(-1.0f32..1.0)).collect()).collect();
        let mut perm: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            perm.swap(i, rng.gen_range(0..=i));
        }
        let a = mds_embed(&[group(GroupLabel::Train, rows.clone())]).unwrap();
        let permuted: Vec<Vec<f32>> = perm.iter().map(|&i| rows[i].clone()).collect();
        let b = mds_embed(&[group(GroupLabel::Train, permuted)]).unwrap();
        // identical up to the sign of each axis
        for axis in 0..2 {
            let same = perm.iter().enumerate().all(|(k, &i)| (b.points[k].xy[axis] - a.points[i].xy[axis]).abs() < 1e-6);
            let flipped = perm.iter().enumerate().all(|(k, &i)| (b.points[k].xy[axis] + a.points[i].xy[axis]).abs() < 1e-6);
            prop_assert!(same || flipped, "axis {}", axis);
        }
        prop_assert!((a.stress - b.stress).abs() < 1e-9);
    }
}

fn model() -> Model {
    let cfg = GeneratorConfig { hidden: 32, base_channels: 8, min_channels: 4, convs_per_block: 1, ..GeneratorConfig::new(3, 1, 8) };
    Model::new(ParameterSpec::synthetic(), &cfg, 4).unwrap()
}

#[test]
fn latent_collection() {
    let m = model();
    let params: Vec<_> = (0..10).map(|i| ParameterVector::new(vec![-18.0 + 4.0 * i as f64, 2.0, 2.0], vec![0.0])).collect();
    let g = collect_latents(&m, &params, GroupLabel::Train).unwrap();
    assert_eq!(g.vectors.len(), 10);
    assert!(g.vectors.iter().all(|v| v.0.len() == 32));
    assert_eq!(g.vectors[3], m.latent(&params[3]).unwrap());
    let again = collect_latents(&m, &params[3..4], GroupLabel::Train).unwrap();
    assert_eq!(again.vectors[0], g.vectors[3]);

    assert!(matches!(collect_latents(&m, &[], GroupLabel::Test), Err(Error::Argument(_))));
    let outside = vec![ParameterVector::new(vec![60.0, 9.0, 0.0], vec![0.0])];
    for label in [GroupLabel::Train, GroupLabel::Test, GroupLabel::InRange] {
        assert!(matches!(collect_latents(&m, &outside, label), Err(Error::OutOfRange { .. })));
    }
    let far = collect_latents(&m, &outside, GroupLabel::OutOfRange).unwrap();
    assert!(far.vectors[0].0.iter().all(|v| v.is_finite()));
    let nan = vec![ParameterVector::new(vec![f64::NAN, 1.0, 1.0], vec![0.0])];
    assert!(collect_latents(&m, &nan, GroupLabel::OutOfRange).is_err());
}

#[test]
fn scatter_plot_marks_points() {
    let report = mds_embed(&[group(GroupLabel::Train, vec![vec![0.0, 0.0], vec![1.0, 0.0], vec![0.0, 1.0]])]).unwrap();
    let img = scatter_plot(&report, 64).unwrap();
    let marked = (0..64).flat_map(|y| (0..64).map(move |x| (x, y))).filter(|&(x, y)| img.pixel(x, y) != [1.0; 3]).count();
    assert!(marked >= 3 * 9, "{marked}");
    assert!(scatter_plot(&report, 4).is_err());
}

#[test]
fn parameter_samplers() {
    let spec = ParameterSpec::synthetic();
    let inside = sample_in_range(&spec, 50, 3);
    assert_eq!(inside.len(), 50);
    assert!(inside.iter().all(|p| spec.check(p).is_ok()));
    assert_eq!(inside, sample_in_range(&spec, 50, 3));

    let outside = sample_out_of_range(&spec, 50, 0.5, 3).unwrap();
    assert_eq!(outside.len(), 50);
    for p in &outside {
        assert!(spec.check(p).is_err());
        for (v, d) in p.sim.iter().zip(&spec.sim) {
            let pad = 0.5 * (d.max - d.min);
            assert!(*v >= d.min - pad && *v <= d.max + pad);
        }
        assert_eq!(p.vis, vec![0.0]);
    }
    assert!(sample_out_of_range(&spec, 1, 0.0, 3).is_err());
}
