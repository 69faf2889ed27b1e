//! The parameter-conditioned image generator and its checkpoint format.

mod checkpoint;
mod generator;

pub use checkpoint::{Checkpoint, TrainingMetadata, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use generator::{BackwardSeed, ForwardPass, Generator, GeneratorConfig, InputGrads};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::RenderedImage;
use crate::nn::ops::Resize2d;
use crate::synthdata::{NormalizedParams, ParameterSpec, ParameterVector};

/// Intermediate latent `w` of one sample.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatentVector(pub Vec<f32>);

/// Output of one synthesis level for a single sample.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    pub layer_id: String,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    /// `[C, h, w]`.
    pub data: Vec<f32>,
}

impl FeatureMap {
    /// Bilinear resize of every channel to `out_h × out_w`.
    pub fn resized(&self, out_h: usize, out_w: usize) -> FeatureMap {
        let data = if (out_h, out_w) == (self.height, self.width) {
            self.data.clone()
        } else {
            Resize2d::new(self.height, self.width, out_h, out_w).forward(&self.data, self.channels)
        };
        FeatureMap {
            layer_id: self.layer_id.clone(),
            channels: self.channels,
            height: out_h,
            width: out_w,
            data,
        }
    }

    /// Channel vector at integer pixel `(x, y)`.
    pub fn at(&self, x: usize, y: usize) -> Vec<f32> {
        let hw = self.height * self.width;
        (0..self.channels).map(|c| self.data[c * hw + y * self.width + x]).collect()
    }
}

/// A generator bound to the parameter ranges it was trained on.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub spec: ParameterSpec,
    pub generator: Generator<f32>,
}

impl Model {
    pub fn new(spec: ParameterSpec, config: &GeneratorConfig, seed: u64) -> Result<Self> {
        Self::from_parts(spec, Generator::init(config, seed)?)
    }

    pub fn from_parts(spec: ParameterSpec, generator: Generator<f32>) -> Result<Self> {
        spec.validate()?;
        let config = &generator.config;
        if spec.sim_dim() != config.sim_dim || spec.vis_dim() != config.vis_dim {
            return Err(Error::Shape(format!(
                "generator expects {}+{} parameters, spec declares {}+{}",
                config.sim_dim,
                config.vis_dim,
                spec.sim_dim(),
                spec.vis_dim()
            )));
        }
        Ok(Self { spec, generator })
    }

    pub fn config(&self) -> &GeneratorConfig {
        &self.generator.config
    }

    pub fn resolution(&self) -> usize {
        self.generator.config.resolution
    }

    /// Range-checks and normalizes a batch into flat generator inputs.
    pub fn inputs(&self, params: &[ParameterVector]) -> Result<(Vec<f32>, Vec<f32>)> {
        let mut norm = Vec::with_capacity(params.len());
        for p in params {
            self.spec.check(p)?;
            norm.push(self.spec.normalize(p)?);
        }
        Ok(flatten(&norm))
    }

    pub fn forward(&self, params: &[ParameterVector]) -> Result<ForwardPass<f32>> {
        let (sim, vis) = self.inputs(params)?;
        self.generator.forward(&sim, &vis, params.len())
    }

    /// Forward from normalized values without range checks (used by probes).
    pub fn forward_normalized(&self, norm: &[NormalizedParams]) -> Result<ForwardPass<f32>> {
        let (sim, vis) = flatten(norm);
        self.generator.forward(&sim, &vis, norm.len())
    }

    pub fn generate(&self, params: &ParameterVector) -> Result<RenderedImage> {
        let pass = self.forward(std::slice::from_ref(params))?;
        Ok(self.image_from(&pass, 0))
    }

    pub fn generate_batch(&self, params: &[ParameterVector]) -> Result<Vec<RenderedImage>> {
        if params.is_empty() {
            return Ok(Vec::new());
        }
        let pass = self.forward(params)?;
        Ok((0..params.len()).map(|b| self.image_from(&pass, b)).collect())
    }

    pub fn image_from(&self, pass: &ForwardPass<f32>, b: usize) -> RenderedImage {
        let r = self.resolution();
        RenderedImage { width: r, height: r, data: pass.image_of(b).to_vec() }
    }

    pub fn feature_from(&self, pass: &ForwardPass<f32>, level: usize, b: usize) -> FeatureMap {
        let r = self.config().level_resolution(level);
        let c = self.config().channels()[level];
        let n = c * r * r;
        FeatureMap {
            layer_id: self.config().layer_ids()[level].clone(),
            channels: c,
            height: r,
            width: r,
            data: pass.level_output(level)[b * n..(b + 1) * n].to_vec(),
        }
    }

    pub fn feature_map(&self, params: &ParameterVector, layer_id: &str) -> Result<FeatureMap> {
        let level = self.config().level_of(layer_id)?;
        let pass = self.forward(std::slice::from_ref(params))?;
        Ok(self.feature_from(&pass, level, 0))
    }

    pub fn latent(&self, params: &ParameterVector) -> Result<LatentVector> {
        let (sim, vis) = self.inputs(std::slice::from_ref(params))?;
        let fused = self.generator.param_subnet_forward(&sim, &vis, 1)?;
        Ok(LatentVector(self.generator.mapping_forward(&fused, 1)?))
    }

    /// Latents of a batch without range checks; inputs outside `[0, 1]`
    /// extrapolate the learned map.
    pub fn latents_unchecked(&self, params: &[ParameterVector]) -> Result<Vec<LatentVector>> {
        let norm = params.iter().map(|p| self.spec.normalize(p)).collect::<Result<Vec<_>>>()?;
        let (sim, vis) = flatten(&norm);
        let fused = self.generator.param_subnet_forward(&sim, &vis, params.len())?;
        let w = self.generator.mapping_forward(&fused, params.len())?;
        Ok(w.chunks(self.config().hidden).map(|c| LatentVector(c.to_vec())).collect())
    }
}

fn flatten(norm: &[NormalizedParams]) -> (Vec<f32>, Vec<f32>) {
    let sim = norm.iter().flat_map(|n| n.sim.iter().map(|&v| v as f32)).collect();
    let vis = norm.iter().flat_map(|n| n.vis.iter().map(|&v| v as f32)).collect();
    (sim, vis)
}
