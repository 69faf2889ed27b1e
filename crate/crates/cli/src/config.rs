//! TOML configuration file. Every key is optional and every key has a flag
//! that overrides it.

use std::path::{Path, PathBuf};

use serde::Deserialize;
use surrogate_core::drag::DisappearanceWindow;
use surrogate_core::losses::{LossWeights, PerceptualConfig};
use surrogate_core::synthdata::{Colormap, FieldModel, ParameterSpec, Sampling};
use surrogate_core::training::LrSchedule;
use surrogate_service::ServiceConfig;

use crate::CliError;

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub seed: Option<u64>,
    #[serde(default)]
    pub dataset: DatasetFile,
    #[serde(default)]
    pub generator: GeneratorFile,
    #[serde(default)]
    pub train: TrainFile,
    #[serde(default)]
    pub evaluate: EvaluateFile,
    #[serde(default)]
    pub predict: PredictFile,
    #[serde(default)]
    pub drag: DragFile,
    #[serde(default)]
    pub diagnose: DiagnoseFile,
    pub serve: Option<ServiceConfig>,
}

impl FileConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))
    }
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetFile {
    pub out: Option<PathBuf>,
    pub spec: Option<ParameterSpec>,
    pub resolution: Option<usize>,
    pub sampling: Option<Sampling>,
    pub test_count: Option<usize>,
    pub field: Option<FieldModel>,
    pub colormap: Option<Colormap>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorFile {
    pub hidden: Option<usize>,
    pub mapping_depth: Option<usize>,
    pub base_channels: Option<usize>,
    pub min_channels: Option<usize>,
    pub convs_per_block: Option<usize>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainFile {
    pub manifest: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub epochs: Option<usize>,
    pub batch_size: Option<usize>,
    pub learning_rate: Option<f64>,
    pub schedule: Option<LrSchedule>,
    pub weights: Option<LossWeights>,
    pub perceptual: Option<PerceptualConfig>,
    pub checkpoint_every: Option<usize>,
    pub device: Option<String>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvaluateFile {
    pub checkpoint: Option<PathBuf>,
    pub manifest: Option<PathBuf>,
    pub split: Option<String>,
    pub out: Option<PathBuf>,
    pub perceptual: Option<PerceptualConfig>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PredictFile {
    pub checkpoint: Option<PathBuf>,
    pub theta: Option<Vec<f64>>,
    pub out: Option<PathBuf>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DragFile {
    pub checkpoint: Option<PathBuf>,
    pub theta: Option<Vec<f64>>,
    pub select: Option<Vec<[i64; 2]>>,
    pub target: Option<Vec<[i64; 2]>>,
    pub threshold: Option<f64>,
    pub radius: Option<f64>,
    pub max_extent: Option<f64>,
    pub out: Option<PathBuf>,
    pub r_m: Option<usize>,
    pub max_iters: Option<usize>,
    pub step_size: Option<f64>,
    pub disappearance_threshold: Option<f64>,
    pub disappearance_window: Option<DisappearanceWindow>,
    pub feature_layer: Option<String>,
    pub patch_dilation: Option<usize>,
    /// Names of the simulation parameters allowed to change.
    pub free: Option<Vec<String>>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiagnoseFile {
    pub checkpoint: Option<PathBuf>,
    pub manifest: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub plot: Option<PathBuf>,
    pub in_range: Option<usize>,
    pub out_of_range: Option<usize>,
    pub extent: Option<f64>,
}
