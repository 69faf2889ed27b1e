use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{simulate, Colormap, FieldModel, ParameterSpec, ParameterVector};
use crate::error::{Error, Result};
use crate::image::{check_resolution, is_valid_resolution, png_dimensions, RenderedImage};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub sim: Vec<f64>,
    pub vis: Vec<f64>,
    /// Path relative to the manifest's directory.
    pub image: String,
    pub split: Split,
}

impl ManifestEntry {
    pub fn params(&self) -> ParameterVector {
        ParameterVector::new(self.sim.clone(), self.vis.clone())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub spec: ParameterSpec,
    pub entries: Vec<ManifestEntry>,
    /// Directory image paths are resolved against; not serialized.
    #[serde(skip)]
    pub root: PathBuf,
}

impl DatasetManifest {
    pub fn image_path(&self, index: usize) -> PathBuf {
        self.root.join(&self.entries[index].image)
    }

    pub fn indices(&self, split: Split) -> Vec<usize> {
        self.entries
            .iter()
            .enumerate()
            .filter(|(_, e)| e.split == split)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn count(&self, split: Split) -> usize {
        self.entries.iter().filter(|e| e.split == split).count()
    }

    pub fn load_image(&self, index: usize) -> Result<RenderedImage> {
        RenderedImage::load_png(&self.image_path(index))
    }

    /// Image side shared by every entry (read from the first image header).
    pub fn resolution(&self) -> Result<usize> {
        let (w, _) = png_dimensions(&self.image_path(0))?;
        Ok(w)
    }

    fn validate_schema(&self) -> Result<()> {
        self.spec.validate()?;
        if self.entries.is_empty() {
            return Err(Error::Schema("manifest has no entries".into()));
        }
        for (i, e) in self.entries.iter().enumerate() {
            if e.sim.len() != self.spec.sim_dim() || e.vis.len() != self.spec.vis_dim() {
                return Err(Error::Schema(format!(
                    "entry {i}: expected {} sim and {} vis values",
                    self.spec.sim_dim(),
                    self.spec.vis_dim()
                )));
            }
            if e.image.is_empty() {
                return Err(Error::Schema(format!("entry {i}: empty image path")));
            }
        }
        if self.count(Split::Train) == 0 {
            return Err(Error::Schema("train split is empty".into()));
        }
        Ok(())
    }
}

/// How parameter combinations are drawn.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "mode")]
pub enum Sampling {
    /// Uniform grid with one count per parameter (sim first, then vis); a
    /// count of 1 samples the range midpoint.
    Grid { counts: Vec<usize> },
    /// Independent uniform draws; visualization parameters stay at their
    /// midpoints unless `vary_vis` is set.
    Random { count: usize, vary_vis: bool },
}

/// Everything `build_dataset` needs besides the spec, destination and seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetPlan {
    pub resolution: usize,
    pub sampling: Sampling,
    /// Entries assigned to the test split; capped so train keeps at least one.
    pub test_count: usize,
    #[serde(default)]
    pub field: FieldModel,
    #[serde(default)]
    pub colormap: Colormap,
}

impl DatasetPlan {
    /// 64×64 images, 2200 random samples, 2000 train / 200 test.
    pub fn desk_default() -> Self {
        Self {
            resolution: 64,
            sampling: Sampling::Random {
                count: 2200,
                vary_vis: false,
            },
            test_count: 200,
            field: FieldModel::default(),
            colormap: Colormap::default(),
        }
    }
}

fn grid_values(min: f64, max: f64, count: usize) -> Vec<f64> {
    if count == 1 {
        return vec![0.5 * (min + max)];
    }
    (0..count)
        .map(|i| {
            if i + 1 == count {
                max
            } else {
                min + (max - min) * i as f64 / (count - 1) as f64
            }
        })
        .collect()
}

/// Parameter combinations for a sampling plan, in manifest order.
pub fn sample_parameters(spec: &ParameterSpec, sampling: &Sampling, rng: &mut impl Rng) -> Result<Vec<ParameterVector>> {
    match sampling {
        Sampling::Grid { counts } => {
            let defs: Vec<_> = spec.all().collect();
            if counts.len() != defs.len() {
                return Err(Error::Argument(format!(
                    "grid sampling needs {} counts, got {}",
                    defs.len(),
                    counts.len()
                )));
            }
            if let Some(i) = counts.iter().position(|&c| c == 0) {
                return Err(Error::Argument(format!(
                    "degenerate sampling: 0 samples for `{}`",
                    defs[i].name
                )));
            }
            let axes: Vec<Vec<f64>> = defs
                .iter()
                .zip(counts)
                .map(|(d, &c)| grid_values(d.min, d.max, c))
                .collect();
            let total: usize = counts.iter().product();
            let m = spec.sim_dim();
            let mut out = Vec::with_capacity(total);
            for mut flat in 0..total {
                let mut vals = vec![0.0; axes.len()];
                // last parameter varies fastest
                for a in (0..axes.len()).rev() {
                    vals[a] = axes[a][flat % counts[a]];
                    flat /= counts[a];
                }
                out.push(ParameterVector::new(vals[..m].to_vec(), vals[m..].to_vec()));
            }
            Ok(out)
        }
        Sampling::Random { count, vary_vis } => {
            if *count == 0 {
                return Err(Error::Argument("degenerate sampling: 0 samples".into()));
            }
            let mid = spec.midpoint();
            Ok((0..*count)
                .map(|_| {
                    let sim = spec.sim.iter().map(|d| rng.gen_range(d.min..=d.max)).collect();
                    let vis = if *vary_vis {
                        spec.vis.iter().map(|d| rng.gen_range(d.min..=d.max)).collect()
                    } else {
                        mid.vis.clone()
                    };
                    ParameterVector::new(sim, vis)
                })
                .collect())
        }
    }
}

/// Samples, simulates and renders a dataset into `out_dir`, writing PNG
/// images under `images/` and `manifest.json`. Identical arguments produce
/// identical files.
pub fn build_dataset(spec: &ParameterSpec, plan: &DatasetPlan, out_dir: &Path, seed: u64) -> Result<DatasetManifest> {
    spec.validate()?;
    check_resolution(plan.resolution)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params = sample_parameters(spec, &plan.sampling, &mut rng)?;
    let total = params.len();
    let test = plan.test_count.min(total - 1);
    let mut order: Vec<usize> = (0..total).collect();
    order.shuffle(&mut rng);
    let mut splits = vec![Split::Train; total];
    for &i in &order[..test] {
        splits[i] = Split::Test;
    }

    let images_dir = out_dir.join("images");
    fs::create_dir_all(&images_dir).map_err(|e| Error::io(&images_dir, e))?;
    let width = total.to_string().len().max(5);
    let entries = params
        .into_par_iter()
        .zip(splits)
        .enumerate()
        .map(|(i, (p, split))| {
            let img = simulate(spec, &p, plan.resolution, &plan.field, &plan.colormap)?;
            let rel = format!("images/{i:0width$}.png");
            img.save_png(&out_dir.join(&rel))?;
            Ok(ManifestEntry {
                sim: p.sim,
                vis: p.vis,
                image: rel,
                split,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let manifest = DatasetManifest {
        spec: spec.clone(),
        entries,
        root: out_dir.to_path_buf(),
    };
    write_manifest(&manifest, &out_dir.join(MANIFEST_FILE))?;
    Ok(manifest)
}

pub fn write_manifest(manifest: &DatasetManifest, path: &Path) -> Result<()> {
    let json = serde_json::to_string_pretty(manifest)?;
    fs::write(path, json).map_err(|e| Error::io(path, e))
}

/// Reads and validates a manifest; image paths are resolved against the
/// manifest's directory and must all exist with one shared valid resolution.
pub fn load_manifest(path: &Path) -> Result<DatasetManifest> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut manifest: DatasetManifest =
        serde_json::from_str(&text).map_err(|e| Error::Schema(e.to_string()))?;
    manifest.root = path.parent().map(Path::to_path_buf).unwrap_or_default();
    manifest.validate_schema()?;
    let mut resolution = None;
    for i in 0..manifest.entries.len() {
        let p = manifest.image_path(i);
        if !p.is_file() {
            return Err(Error::DanglingImage { index: i, path: p });
        }
        let (w, h) = png_dimensions(&p)?;
        if w != h || !is_valid_resolution(w) {
            return Err(Error::Schema(format!("entry {i}: image is {w}×{h}, not a valid square resolution")));
        }
        match resolution {
            None => resolution = Some(w),
            Some(r) if r != w => {
                return Err(Error::Schema(format!("entry {i}: resolution {w} differs from {r}")));
            }
            _ => {}
        }
    }
    Ok(manifest)
}
