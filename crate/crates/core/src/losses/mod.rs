//! Training objective: weighted content (L1), perceptual and Sobel edge terms.
//!
//! Losses are defined per image; batch objectives average over samples.

mod perceptual;

pub use perceptual::{
    ExtractorPass, ExtractorSource, FeatureExtractor, PerceptualConfig, FALLBACK_SEED, FALLBACK_TAG, VGG19_TAG,
};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::RenderedImage;
use crate::nn::Real;

pub const LUMA: [f64; 3] = [0.299, 0.587, 0.114];
const SOBEL_X: [[f64; 3]; 3] = [[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]];
const SOBEL_Y: [[f64; 3]; 3] = [[-1.0, -2.0, -1.0], [0.0, 0.0, 0.0], [1.0, 2.0, 1.0]];

/// How the squared-norm terms (perceptual, edge) enter the training objective.
///
/// `Mean` divides each squared norm by its element count, putting it on the
/// same per-value scale as the content term. `Sum` uses the raw norms.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reduction {
    #[default]
    Mean,
    Sum,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    #[serde(default)]
    pub reduction: Reduction,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { alpha: 1.0, beta: 1.0, gamma: 0.01, reduction: Reduction::Mean }
    }
}

impl LossWeights {
    pub fn new(alpha: f64, beta: f64, gamma: f64) -> Self {
        Self { alpha, beta, gamma, reduction: Reduction::Mean }
    }

    pub fn content_only() -> Self {
        Self::new(1.0, 0.0, 0.0)
    }

    pub fn with_reduction(self, reduction: Reduction) -> Self {
        Self { reduction, ..self }
    }

    pub fn validate(&self) -> Result<()> {
        let w = [self.alpha, self.beta, self.gamma];
        if w.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::Argument("loss weights must be finite and non-negative".into()));
        }
        if w.iter().all(|v| *v == 0.0) {
            return Err(Error::Argument("at least one loss weight must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub content: f64,
    pub feature: f64,
    pub edge: f64,
    pub total: f64,
}

impl LossBreakdown {
    fn weighted(content: f64, feature: f64, edge: f64, w: &LossWeights) -> Self {
        Self {
            content,
            feature,
            edge,
            total: w.alpha * content + w.beta * feature + w.gamma * edge,
        }
    }
}

fn check_pair(a: &RenderedImage, b: &RenderedImage) -> Result<()> {
    if !a.same_shape(b) {
        return Err(Error::Shape(format!(
            "{}×{} vs {}×{}",
            a.width, a.height, b.width, b.height
        )));
    }
    Ok(())
}

/// Mean absolute difference over all pixel-channel values.
pub fn content_loss(target: &RenderedImage, pred: &RenderedImage) -> Result<f64> {
    check_pair(target, pred)?;
    Ok(content_term::<f32>(&target.data, &pred.data, None).0)
}

/// Squared L2 distance between Sobel responses of the luminance channel
/// (valid region only).
pub fn edge_loss(target: &RenderedImage, pred: &RenderedImage) -> Result<f64> {
    check_pair(target, pred)?;
    Ok(edge_term::<f32>(&target.data, &pred.data, target.height, target.width, None).0)
}

pub fn perceptual_loss(
    target: &RenderedImage,
    pred: &RenderedImage,
    extractor: &FeatureExtractor<f32>,
    lambdas: &[f64],
) -> Result<f64> {
    check_pair(target, pred)?;
    if lambdas.len() != extractor.taps.len() {
        return Err(Error::Argument(format!(
            "{} layer weights for {} taps",
            lambdas.len(),
            extractor.taps.len()
        )));
    }
    let (v, _) = extractor.loss(&target.data, &pred.data, 1, target.height, target.width, lambdas, Reduction::Sum, None);
    Ok(v[0])
}

pub fn total_loss(
    target: &RenderedImage,
    pred: &RenderedImage,
    weights: &LossWeights,
    extractor: &FeatureExtractor<f32>,
) -> Result<LossBreakdown> {
    check_pair(target, pred)?;
    Ok(Objective { weights: *weights, extractor: extractor.clone() }
        .evaluate(&target.data, &pred.data, 1, target.height, target.width, false)
        .0)
}

/// `(mean |t − p|, gradient · scale)` for one image.
pub fn content_term<R: Real>(target: &[R], pred: &[R], grad_scale: Option<f64>) -> (f64, Option<Vec<R>>) {
    let n = target.len() as f64;
    let sum: f64 = target.iter().zip(pred).map(|(&t, &p)| (p - t).f64().abs()).sum();
    let grad = grad_scale.map(|s| {
        let k = R::lit(s / n);
        target
            .iter()
            .zip(pred)
            .map(|(&t, &p)| {
                if p > t {
                    k
                } else if p < t {
                    -k
                } else {
                    R::zero()
                }
            })
            .collect()
    });
    (sum / n, grad)
}

fn luminance<R: Real>(img: &[R], hw: usize) -> Vec<f64> {
    (0..hw)
        .map(|i| LUMA[0] * img[i].f64() + LUMA[1] * img[hw + i].f64() + LUMA[2] * img[2 * hw + i].f64())
        .collect()
}

fn sobel(lum: &[f64], h: usize, w: usize, k: &[[f64; 3]; 3]) -> Vec<f64> {
    let mut out = Vec::with_capacity((h - 2) * (w - 2));
    for y in 1..h - 1 {
        for x in 1..w - 1 {
            let mut acc = 0.0;
            for (dy, row) in k.iter().enumerate() {
                for (dx, &kv) in row.iter().enumerate() {
                    acc += kv * lum[(y + dy - 1) * w + x + dx - 1];
                }
            }
            out.push(acc);
        }
    }
    out
}

/// Edge term for one `[3, h, w]` image and optionally its gradient · scale.
pub fn edge_term<R: Real>(target: &[R], pred: &[R], h: usize, w: usize, grad_scale: Option<f64>) -> (f64, Option<Vec<R>>) {
    if h < 3 || w < 3 {
        return (0.0, grad_scale.map(|_| vec![R::zero(); pred.len()]));
    }
    let hw = h * w;
    let (lt, lp) = (luminance(target, hw), luminance(pred, hw));
    let mut loss = 0.0;
    let mut g_lum = grad_scale.map(|_| vec![0.0; hw]);
    for k in [&SOBEL_X, &SOBEL_Y] {
        let (et, ep) = (sobel(&lt, h, w, k), sobel(&lp, h, w, k));
        for (i, (a, b)) in et.iter().zip(&ep).enumerate() {
            let d = b - a;
            loss += d * d;
            if let Some(g) = g_lum.as_mut() {
                let (y, x) = (i / (w - 2) + 1, i % (w - 2) + 1);
                for (dy, row) in k.iter().enumerate() {
                    for (dx, &kv) in row.iter().enumerate() {
                        g[(y + dy - 1) * w + x + dx - 1] += 2.0 * d * kv;
                    }
                }
            }
        }
    }
    let grad = g_lum.map(|g| {
        let s = grad_scale.unwrap();
        let mut out = Vec::with_capacity(3 * hw);
        for c in LUMA {
            out.extend(g.iter().map(|&v| R::lit(v * c * s)));
        }
        out
    });
    (loss, grad)
}

/// Weighted objective over a batch of `[3, h, w]` images.
#[derive(Clone, Debug)]
pub struct Objective<R> {
    pub weights: LossWeights,
    pub extractor: FeatureExtractor<R>,
}

impl<R: Real> Objective<R> {
    /// Batch-mean breakdown and, if `with_grad`, the gradient of the batch-mean
    /// total with respect to `pred`.
    pub fn evaluate(&self, target: &[R], pred: &[R], batch: usize, h: usize, w: usize, with_grad: bool) -> (LossBreakdown, Option<Vec<R>>) {
        let n = 3 * h * w;
        let wts = &self.weights;
        let edge_norm = match wts.reduction {
            Reduction::Sum => 1.0,
            Reduction::Mean => 1.0 / (2 * h.saturating_sub(2) * w.saturating_sub(2)).max(1) as f64,
        };
        let inv_b = 1.0 / batch as f64;
        let mut grad = with_grad.then(|| vec![R::zero(); pred.len()]);
        let (mut content, mut edge) = (0.0, 0.0);
        for b in 0..batch {
            let (t, p) = (&target[b * n..(b + 1) * n], &pred[b * n..(b + 1) * n]);
            let gc = (with_grad && wts.alpha > 0.0).then_some(wts.alpha * inv_b);
            let (c, g) = content_term(t, p, gc);
            content += c;
            let ge = (with_grad && wts.gamma > 0.0).then_some(wts.gamma * inv_b * edge_norm);
            let (e, g2) = edge_term(t, p, h, w, ge);
            edge += e * edge_norm;
            if let Some(dst) = grad.as_mut() {
                for src in [g, g2].into_iter().flatten() {
                    for (d, s) in dst[b * n..(b + 1) * n].iter_mut().zip(src) {
                        *d += s;
                    }
                }
            }
        }
        let gf = (with_grad && wts.beta > 0.0).then_some(wts.beta * inv_b);
        let (per_sample, g) = self.extractor.loss(target, pred, batch, h, w, &self.extractor.lambdas, wts.reduction, gf);
        if let (Some(dst), Some(src)) = (grad.as_mut(), g) {
            for (d, s) in dst.iter_mut().zip(src) {
                *d += s;
            }
        }
        let feature: f64 = per_sample.iter().sum();
        (LossBreakdown::weighted(content * inv_b, feature * inv_b, edge * inv_b, wts), grad)
    }
}
