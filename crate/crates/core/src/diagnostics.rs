//! Latent-space diagnostics: `w` vectors for labeled parameter groups, a
//! classical MDS embedding, and nearest-train-vector distance statistics.

use nalgebra::{DMatrix, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::RenderedImage;
use crate::model::{LatentVector, Model};
use crate::synthdata::{ParameterSpec, ParameterVector};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GroupLabel {
    Train,
    Test,
    InRange,
    OutOfRange,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatentGroup {
    pub label: GroupLabel,
    pub vectors: Vec<LatentVector>,
    pub params: Vec<ParameterVector>,
}

/// Latents of `params` under `model`. Only the `OutOfRange` label skips the
/// range check.
pub fn collect_latents(model: &Model, params: &[ParameterVector], label: GroupLabel) -> Result<LatentGroup> {
    if params.is_empty() {
        return Err(Error::Argument("no parameter vectors to embed".into()));
    }
    if label != GroupLabel::OutOfRange {
        for p in params {
            model.spec.check(p)?;
        }
    }
    let mut vectors = Vec::with_capacity(params.len());
    for chunk in params.chunks(64) {
        vectors.extend(model.latents_unchecked(chunk)?);
    }
    Ok(LatentGroup { label, vectors, params: params.to_vec() })
}

/// Uniform in-range simulation parameters; visualization parameters at their
/// midpoints.
pub fn sample_in_range(spec: &ParameterSpec, count: usize, seed: u64) -> Vec<ParameterVector> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let vis: Vec<f64> = spec.vis.iter().map(|d| 0.5 * (d.min + d.max)).collect();
    (0..count)
        .map(|_| ParameterVector::new(spec.sim.iter().map(|d| rng.gen_range(d.min..=d.max)).collect(), vis.clone()))
        .collect()
}

/// Simulation parameters drawn from every range widened by `extent` times its
/// span on both sides, keeping only draws with at least one value outside the
/// original range.
pub fn sample_out_of_range(spec: &ParameterSpec, count: usize, extent: f64, seed: u64) -> Result<Vec<ParameterVector>> {
    if !(extent.is_finite() && extent > 0.0) {
        return Err(Error::Argument(format!("extent {extent} must be positive")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let vis: Vec<f64> = spec.vis.iter().map(|d| 0.5 * (d.min + d.max)).collect();
    let mut out = Vec::with_capacity(count);
    while out.len() < count {
        let sim: Vec<f64> = spec
            .sim
            .iter()
            .map(|d| {
                let pad = extent * (d.max - d.min);
                rng.gen_range(d.min - pad..=d.max + pad)
            })
            .collect();
        if sim.iter().zip(&spec.sim).any(|(v, d)| !d.contains(*v)) {
            out.push(ParameterVector::new(sim, vis.clone()));
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmbeddedPoint {
    pub label: GroupLabel,
    /// Position within its group.
    pub index: usize,
    pub xy: [f64; 2],
}

/// Mean and median distance from each vector of a group to its nearest
/// train vector, in the latent space.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NeighborStats {
    pub label: GroupLabel,
    pub count: usize,
    pub mean: f64,
    pub median: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingReport {
    pub points: Vec<EmbeddedPoint>,
    /// Kruskal stress-1 of the 2-D distances against the latent distances.
    pub stress: f64,
    #[serde(default)]
    pub neighbors: Vec<NeighborStats>,
}

fn dist(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| (x as f64 - y as f64).powi(2)).sum::<f64>().sqrt()
}

fn check_dims(groups: &[LatentGroup]) -> Result<usize> {
    let mut dim = None;
    for g in groups {
        if g.vectors.is_empty() {
            return Err(Error::Argument(format!("group {:?} is empty", g.label)));
        }
        for v in &g.vectors {
            match dim {
                None => dim = Some(v.0.len()),
                Some(d) if d != v.0.len() => {
                    return Err(Error::Shape(format!("latent of length {} among length {d}", v.0.len())));
                }
                _ => {}
            }
        }
    }
    Ok(dim.unwrap_or(0))
}

/// Classical (Torgerson) MDS of the rows of `x` into two dimensions.
///
/// Each axis is flipped so that the first point with a non-zero coordinate on
/// it is positive.
pub fn classical_mds(x: &[&[f32]]) -> Result<Vec<[f64; 2]>> {
    let n = x.len();
    if n < 3 {
        return Err(Error::Argument(format!("MDS needs at least 3 vectors, got {n}")));
    }
    let mut b = DMatrix::<f64>::zeros(n, n);
    for i in 0..n {
        for j in i + 1..n {
            let d2 = dist(x[i], x[j]).powi(2);
            b[(i, j)] = d2;
            b[(j, i)] = d2;
        }
    }
    // B = -1/2 · J D² J
    let row_mean: Vec<f64> = (0..n).map(|i| b.row(i).sum() / n as f64).collect();
    let total = row_mean.iter().sum::<f64>() / n as f64;
    for i in 0..n {
        for j in 0..n {
            b[(i, j)] = -0.5 * (b[(i, j)] - row_mean[i] - row_mean[j] + total);
        }
    }
    let eig = SymmetricEigen::new(b);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&p, &q| eig.eigenvalues[q].total_cmp(&eig.eigenvalues[p]).then(p.cmp(&q)));
    let scale = eig.eigenvalues.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1.0);
    let mut coords = vec![[0.0; 2]; n];
    for (axis, &k) in order.iter().take(2).enumerate() {
        let lambda = eig.eigenvalues[k];
        if lambda <= 1e-12 * scale {
            continue;
        }
        let s = lambda.sqrt();
        let col = eig.eigenvectors.column(k);
        let flip = col.iter().find(|v| v.abs() > 1e-9).map_or(false, |v| *v < 0.0);
        for i in 0..n {
            let v = col[i] * s;
            coords[i][axis] = if flip { -v } else { v };
        }
    }
    Ok(coords)
}

fn kruskal_stress(x: &[&[f32]], y: &[[f64; 2]]) -> f64 {
    let (mut num, mut den) = (0.0, 0.0);
    for i in 0..x.len() {
        for j in i + 1..x.len() {
            let d = dist(x[i], x[j]);
            let e = ((y[i][0] - y[j][0]).powi(2) + (y[i][1] - y[j][1]).powi(2)).sqrt();
            num += (d - e).powi(2);
            den += d * d;
        }
    }
    if den == 0.0 {
        0.0
    } else {
        (num / den).sqrt()
    }
}

/// Embeds every vector of every group, in input order.
pub fn mds_embed(groups: &[LatentGroup]) -> Result<EmbeddingReport> {
    check_dims(groups)?;
    let rows: Vec<&[f32]> = groups.iter().flat_map(|g| g.vectors.iter().map(|v| v.0.as_slice())).collect();
    let coords = classical_mds(&rows)?;
    let stress = kruskal_stress(&rows, &coords);
    let points = groups
        .iter()
        .flat_map(|g| (0..g.vectors.len()).map(move |i| (g.label, i)))
        .zip(coords)
        .map(|((label, index), xy)| EmbeddedPoint { label, index, xy })
        .collect();
    Ok(EmbeddingReport { points, stress, neighbors: Vec::new() })
}

/// Nearest-train distance statistics for every non-train group, in order of
/// first appearance. Multiple groups with the same label are pooled.
pub fn neighbor_stats(groups: &[LatentGroup]) -> Result<Vec<NeighborStats>> {
    check_dims(groups)?;
    let train: Vec<&[f32]> = groups
        .iter()
        .filter(|g| g.label == GroupLabel::Train)
        .flat_map(|g| g.vectors.iter().map(|v| v.0.as_slice()))
        .collect();
    if train.is_empty() {
        return Err(Error::Argument("a train group is required".into()));
    }
    let mut labels: Vec<GroupLabel> = Vec::new();
    for g in groups {
        if g.label != GroupLabel::Train && !labels.contains(&g.label) {
            labels.push(g.label);
        }
    }
    Ok(labels
        .into_iter()
        .map(|label| {
            let mut d: Vec<f64> = groups
                .iter()
                .filter(|g| g.label == label)
                .flat_map(|g| &g.vectors)
                .map(|v| train.iter().map(|t| dist(&v.0, t)).fold(f64::INFINITY, f64::min))
                .collect();
            d.sort_by(f64::total_cmp);
            let n = d.len();
            let median = if n % 2 == 1 { d[n / 2] } else { 0.5 * (d[n / 2 - 1] + d[n / 2]) };
            NeighborStats { label, count: n, mean: d.iter().sum::<f64>() / n as f64, median }
        })
        .collect())
}

/// MDS embedding plus nearest-train statistics. With only a train group (and
/// too few vectors to embed) the embedding is empty rather than an error.
pub fn validity_report(groups: &[LatentGroup]) -> Result<EmbeddingReport> {
    let neighbors = neighbor_stats(groups)?;
    let total: usize = groups.iter().map(|g| g.vectors.len()).sum();
    let mut report = if total >= 3 {
        mds_embed(groups)?
    } else {
        EmbeddingReport { points: Vec::new(), stress: 0.0, neighbors: Vec::new() }
    };
    report.neighbors = neighbors;
    Ok(report)
}

pub fn label_color(label: GroupLabel) -> [f32; 3] {
    match label {
        GroupLabel::Train => [0.85, 0.15, 0.15],
        GroupLabel::Test => [0.15, 0.35, 0.85],
        GroupLabel::InRange => [0.15, 0.65, 0.25],
        GroupLabel::OutOfRange => [0.95, 0.6, 0.1],
    }
}

/// Static scatter plot of an embedding on a white `size × size` canvas.
pub fn scatter_plot(report: &EmbeddingReport, size: usize) -> Result<RenderedImage> {
    if size < 16 {
        return Err(Error::Argument(format!("plot size {size} is too small")));
    }
    let mut img = RenderedImage::filled(size, size, [1.0; 3]);
    if report.points.is_empty() {
        return Ok(img);
    }
    let (mut lo, mut hi) = ([f64::INFINITY; 2], [f64::NEG_INFINITY; 2]);
    for p in &report.points {
        for k in 0..2 {
            lo[k] = lo[k].min(p.xy[k]);
            hi[k] = hi[k].max(p.xy[k]);
        }
    }
    let span = (hi[0] - lo[0]).max(hi[1] - lo[1]).max(1e-12);
    let margin = 4.0;
    let usable = size as f64 - 2.0 * margin - 1.0;
    for p in &report.points {
        let cx = margin + (p.xy[0] - lo[0]) / span * usable;
        let cy = margin + (hi[1] - p.xy[1]) / span * usable;
        let color = label_color(p.label);
        for dy in -2i64..=2 {
            for dx in -2i64..=2 {
                if dx * dx + dy * dy > 5 {
                    continue;
                }
                let (x, y) = (cx.round() as i64 + dx, cy.round() as i64 + dy);
                if x >= 0 && y >= 0 && (x as usize) < size && (y as usize) < size {
                    img.set_pixel(x as usize, y as usize, color);
                }
            }
        }
    }
    Ok(img)
}
