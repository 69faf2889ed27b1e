//! Frozen VGG-19 style feature pyramid for the perceptual term.
//!
//! Either loads pretrained weights from a safetensors file with torchvision
//! key names (`features.{i}.weight`, `features.{i}.bias`), or builds a
//! fixed-seed random network with the same topology at 1/16 width.

use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use safetensors::{Dtype, SafeTensors};
use serde::{Deserialize, Serialize};

use super::Reduction;
use crate::error::{Error, Result};
use crate::nn::ops::{maxpool2, maxpool2_backward, relu_backward, relu_inplace};
use crate::nn::{Conv2d, Real};

pub const VGG19_TAG: &str = "vgg19";
pub const FALLBACK_TAG: &str = "fallback-perceptual";
pub const FALLBACK_SEED: u64 = 0x5eed_f00d;

/// Output widths of the 16 convolutions.
const VGG19_WIDTHS: [usize; 16] = [64, 64, 128, 128, 256, 256, 256, 256, 512, 512, 512, 512, 512, 512, 512, 512];
/// Index of each convolution inside torchvision's `features` sequential.
const VGG19_MODULE_INDEX: [usize; 16] = [0, 2, 5, 7, 10, 12, 14, 16, 19, 21, 23, 25, 28, 30, 32, 34];
/// A 2×2 max pool precedes conv depths 3, 5, 9 and 13.
const POOL_BEFORE: [usize; 4] = [3, 5, 9, 13];
const FALLBACK_DIVISOR: usize = 16;

const IMAGENET_MEAN: [f64; 3] = [0.485, 0.456, 0.406];
const IMAGENET_STD: [f64; 3] = [0.229, 0.224, 0.225];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ExtractorSource {
    Vgg19 { path: PathBuf },
    Fallback,
}

/// Extractor choice plus tapped depths (1-based conv index, ReLU output) and
/// their weights.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PerceptualConfig {
    pub source: ExtractorSource,
    pub taps: Vec<usize>,
    pub lambdas: Vec<f64>,
}

impl Default for PerceptualConfig {
    fn default() -> Self {
        Self {
            source: ExtractorSource::Fallback,
            taps: vec![2, 7, 12],
            lambdas: vec![1.0, 1.0, 1.0],
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureExtractor<R> {
    pub tag: String,
    pub taps: Vec<usize>,
    pub lambdas: Vec<f64>,
    convs: Vec<Conv2d<R>>,
}

/// Activations of one extractor forward pass.
#[derive(Clone, Debug)]
pub struct ExtractorPass<R> {
    batch: usize,
    input_hw: (usize, usize),
    /// Post-ReLU output per conv depth.
    acts: Vec<Vec<R>>,
    dims: Vec<(usize, usize)>,
    /// Argmax indices and input length of the pool preceding a depth.
    pools: Vec<Option<(Vec<usize>, usize)>>,
}

impl<R: Real> ExtractorPass<R> {
    /// Features at the given tap depth (`[batch, C, h, w]`).
    pub fn tap(&self, depth: usize) -> &[R] {
        &self.acts[depth - 1]
    }

    pub fn tap_dims(&self, depth: usize) -> (usize, usize) {
        self.dims[depth - 1]
    }
}

fn check_taps(taps: &[usize], lambdas: &[f64]) -> Result<usize> {
    if taps.is_empty() || taps.len() != lambdas.len() {
        return Err(Error::Argument(format!(
            "{} perceptual taps with {} weights",
            taps.len(),
            lambdas.len()
        )));
    }
    if let Some(&t) = taps.iter().find(|&&t| t == 0 || t > VGG19_WIDTHS.len()) {
        return Err(Error::Argument(format!("perceptual tap depth {t} outside 1..=16")));
    }
    if lambdas.iter().any(|l| !l.is_finite() || *l < 0.0) {
        return Err(Error::Argument("perceptual layer weights must be finite and non-negative".into()));
    }
    Ok(*taps.iter().max().unwrap())
}

impl FeatureExtractor<f32> {
    pub fn from_config(config: &PerceptualConfig) -> Result<Self> {
        match &config.source {
            ExtractorSource::Vgg19 { path } => Self::vgg19(path, &config.taps, &config.lambdas),
            ExtractorSource::Fallback => Self::fallback(&config.taps, &config.lambdas),
        }
    }

    /// Random-weight pyramid with the VGG-19 topology at 1/16 width.
    pub fn fallback(taps: &[usize], lambdas: &[f64]) -> Result<Self> {
        let depth = check_taps(taps, lambdas)?;
        let mut rng = ChaCha8Rng::seed_from_u64(FALLBACK_SEED);
        let mut convs = Vec::with_capacity(depth);
        let mut in_ch = 3;
        for &w in &VGG19_WIDTHS[..depth] {
            let out = w / FALLBACK_DIVISOR;
            convs.push(Conv2d::init(in_ch, out, 3, &mut rng));
            in_ch = out;
        }
        Ok(Self {
            tag: FALLBACK_TAG.into(),
            taps: taps.to_vec(),
            lambdas: lambdas.to_vec(),
            convs,
        })
    }

    /// Loads convolution weights from a safetensors file. Channel widths are
    /// read from the file; only the topology is fixed.
    pub fn vgg19(path: &Path, taps: &[usize], lambdas: &[f64]) -> Result<Self> {
        let depth = check_taps(taps, lambdas)?;
        let bytes = match std::fs::read(path) {
            Ok(b) => b,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
                return Err(Error::MissingAsset { path: path.to_path_buf() })
            }
            Err(e) => return Err(Error::io(path, e)),
        };
        let st = SafeTensors::deserialize(&bytes).map_err(|e| Error::Image(format!("{}: {e}", path.display())))?;
        let read = |name: &str, shape_check: &dyn Fn(&[usize]) -> bool| -> Result<(Vec<usize>, Vec<f32>)> {
            let t = st
                .tensor(name)
                .map_err(|_| Error::Schema(format!("{}: missing tensor `{name}`", path.display())))?;
            if t.dtype() != Dtype::F32 || !shape_check(t.shape()) {
                return Err(Error::Schema(format!(
                    "{}: tensor `{name}` has dtype {:?} shape {:?}",
                    path.display(),
                    t.dtype(),
                    t.shape()
                )));
            }
            let data = t.data().chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
            Ok((t.shape().to_vec(), data))
        };
        let mut convs = Vec::with_capacity(depth);
        let mut in_ch = 3;
        for &module in &VGG19_MODULE_INDEX[..depth] {
            let (shape, weight) = read(&format!("features.{module}.weight"), &|s| {
                s.len() == 4 && s[1] == in_ch && s[2] == 3 && s[3] == 3
            })?;
            let out = shape[0];
            let (_, bias) = read(&format!("features.{module}.bias"), &|s| s == [out])?;
            convs.push(Conv2d { in_ch, out_ch: out, kernel: 3, weight, bias });
            in_ch = out;
        }
        Ok(Self {
            tag: VGG19_TAG.into(),
            taps: taps.to_vec(),
            lambdas: lambdas.to_vec(),
            convs,
        })
    }
}

impl<R: Real> FeatureExtractor<R> {
    pub fn cast<S: Real>(&self) -> FeatureExtractor<S> {
        FeatureExtractor {
            tag: self.tag.clone(),
            taps: self.taps.clone(),
            lambdas: self.lambdas.clone(),
            convs: self.convs.iter().map(Conv2d::cast).collect(),
        }
    }

    pub fn depth(&self) -> usize {
        self.convs.len()
    }

    /// Runs `[batch, 3, h, w]` images in `[0, 1]` through the network after
    /// ImageNet mean/std normalization.
    pub fn forward(&self, images: &[R], batch: usize, h: usize, w: usize) -> ExtractorPass<R> {
        let hw = h * w;
        let mut x = images.to_vec();
        for b in 0..batch {
            for c in 0..3 {
                let (m, s) = (R::lit(IMAGENET_MEAN[c]), R::lit(IMAGENET_STD[c]));
                for v in &mut x[(b * 3 + c) * hw..(b * 3 + c + 1) * hw] {
                    *v = (*v - m) / s;
                }
            }
        }
        let (mut ch, mut hh, mut ww) = (3, h, w);
        let mut acts = Vec::with_capacity(self.convs.len());
        let mut dims = Vec::with_capacity(self.convs.len());
        let mut pools = Vec::with_capacity(self.convs.len());
        for (i, conv) in self.convs.iter().enumerate() {
            if POOL_BEFORE.contains(&(i + 1)) {
                let len = x.len();
                let (y, arg) = maxpool2(&x, batch * ch, hh, ww);
                x = y;
                hh /= 2;
                ww /= 2;
                pools.push(Some((arg, len)));
            } else {
                pools.push(None);
            }
            let mut y = conv.forward(&x, batch, hh, ww);
            relu_inplace(&mut y);
            acts.push(y.clone());
            dims.push((hh, ww));
            x = y;
            ch = conv.out_ch;
        }
        ExtractorPass { batch, input_hw: (h, w), acts, dims, pools }
    }

    /// Gradient with respect to the `[0, 1]` input images given gradients at
    /// tap depths.
    pub fn backward(&self, pass: &ExtractorPass<R>, seeds: &[(usize, Vec<R>)]) -> Vec<R> {
        let batch = pass.batch;
        let (h, w) = pass.input_hw;
        let top = seeds.iter().map(|(d, _)| *d).max().unwrap_or(0);
        if top == 0 {
            return vec![R::zero(); batch * 3 * h * w];
        }
        let mut g = vec![R::zero(); pass.acts[top - 1].len()];
        for d in (1..=top).rev() {
            for (sd, sg) in seeds {
                if *sd == d {
                    for (a, b) in g.iter_mut().zip(sg) {
                        *a += *b;
                    }
                }
            }
            relu_backward(&pass.acts[d - 1], &mut g);
            let (hh, ww) = pass.dims[d - 1];
            g = self.convs[d - 1].backward_input(&g, batch, hh, ww);
            if let Some((arg, len)) = &pass.pools[d - 1] {
                g = maxpool2_backward(&g, arg, *len);
            }
        }
        let hw = h * w;
        for b in 0..batch {
            for c in 0..3 {
                let s = R::lit(IMAGENET_STD[c]);
                for v in &mut g[(b * 3 + c) * hw..(b * 3 + c + 1) * hw] {
                    *v /= s;
                }
            }
        }
        g
    }

    /// Per-sample `Σ_j λ_j ‖φ_j(target) − φ_j(pred)‖²` (each norm divided by
    /// the tap size under [`Reduction::Mean`]) and, if requested, its gradient
    /// with respect to `pred`, scaled by `scale`.
    pub fn loss(
        &self,
        target: &[R],
        pred: &[R],
        batch: usize,
        h: usize,
        w: usize,
        lambdas: &[f64],
        reduction: Reduction,
        grad_scale: Option<f64>,
    ) -> (Vec<f64>, Option<Vec<R>>) {
        let ft = self.forward(target, batch, h, w);
        let fp = self.forward(pred, batch, h, w);
        let mut per_sample = vec![0.0; batch];
        let mut seeds = Vec::new();
        for (&d, &lambda) in self.taps.iter().zip(lambdas) {
            let (a, b) = (ft.tap(d), fp.tap(d));
            let n = a.len() / batch;
            let lambda = match reduction {
                Reduction::Sum => lambda,
                Reduction::Mean => lambda / n as f64,
            };
            for (s, total) in per_sample.iter_mut().enumerate() {
                let mut acc = 0.0;
                for i in s * n..(s + 1) * n {
                    let diff = (b[i] - a[i]).f64();
                    acc += diff * diff;
                }
                *total += lambda * acc;
            }
            if let Some(scale) = grad_scale {
                if lambda != 0.0 {
                    let k = R::lit(2.0 * lambda * scale);
                    seeds.push((d, b.iter().zip(a).map(|(&p, &t)| k * (p - t)).collect()));
                }
            }
        }
        let grad = grad_scale.map(|_| self.backward(&fp, &seeds));
        (per_sample, grad)
    }
}
