//! Image quality metrics on `[0, 1]` RGB images.

use crate::error::{Error, Result};
use crate::image::RenderedImage;
use crate::losses::{FeatureExtractor, LUMA};

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

fn check(a: &RenderedImage, b: &RenderedImage) -> Result<()> {
    if !a.same_shape(b) {
        return Err(Error::Shape(format!(
            "{}×{} vs {}×{}",
            a.width, a.height, b.width, b.height
        )));
    }
    Ok(())
}

pub fn mse(a: &RenderedImage, b: &RenderedImage) -> Result<f64> {
    check(a, b)?;
    let sum: f64 = a.data.iter().zip(&b.data).map(|(&x, &y)| (x as f64 - y as f64).powi(2)).sum();
    Ok(sum / a.data.len() as f64)
}

/// `10·log10(1 / MSE)`; identical images give `+∞`.
pub fn psnr(a: &RenderedImage, b: &RenderedImage) -> Result<f64> {
    let m = mse(a, b)?;
    Ok(if m == 0.0 { f64::INFINITY } else { 10.0 * (1.0 / m).log10() })
}

/// Normalized 1-D Gaussian taps of the SSIM window.
pub fn gaussian_window() -> [f64; SSIM_WINDOW] {
    let mut g = [0.0; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    for (i, v) in g.iter_mut().enumerate() {
        *v = (-((i as f64 - c).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = g.iter().sum();
    g.iter_mut().for_each(|v| *v /= s);
    g
}

pub fn luminance(img: &RenderedImage) -> Vec<f64> {
    let hw = img.width * img.height;
    (0..hw)
        .map(|i| LUMA[0] * img.data[i] as f64 + LUMA[1] * img.data[hw + i] as f64 + LUMA[2] * img.data[2 * hw + i] as f64)
        .collect()
}

/// Separable Gaussian filter keeping only fully covered ("valid") positions.
fn filter_valid(x: &[f64], h: usize, w: usize, g: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let (oh, ow) = (h + 1 - SSIM_WINDOW, w + 1 - SSIM_WINDOW);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x0 in 0..ow {
            rows[y * ow + x0] = (0..SSIM_WINDOW).map(|k| g[k] * x[y * w + x0 + k]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y0 in 0..oh {
        for x0 in 0..ow {
            out[y0 * ow + x0] = (0..SSIM_WINDOW).map(|k| g[k] * rows[(y0 + k) * ow + x0]).sum();
        }
    }
    out
}

/// Mean structural similarity of the luminance channels with an 11×11
/// Gaussian window (σ = 1.5), K1 = 0.01, K2 = 0.03, data range 1.
pub fn ssim(a: &RenderedImage, b: &RenderedImage) -> Result<f64> {
    check(a, b)?;
    let (h, w) = (a.height, a.width);
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::Shape(format!("SSIM needs at least {SSIM_WINDOW}×{SSIM_WINDOW} pixels")));
    }
    let g = gaussian_window();
    let (x, y) = (luminance(a), luminance(b));
    let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
    let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
    let xy: Vec<f64> = x.iter().zip(&y).map(|(p, q)| p * q).collect();
    let [mx, my, sxx, syy, sxy] = [&x, &y, &xx, &yy, &xy].map(|m| filter_valid(m, h, w, &g));
    let (c1, c2) = (SSIM_K1 * SSIM_K1, SSIM_K2 * SSIM_K2);
    let n = mx.len();
    let total: f64 = (0..n)
        .map(|i| {
            let (ux, uy) = (mx[i], my[i]);
            let vx = sxx[i] - ux * ux;
            let vy = syy[i] - uy * uy;
            let cov = sxy[i] - ux * uy;
            ((2.0 * ux * uy + c1) * (2.0 * cov + c2)) / ((ux * ux + uy * uy + c1) * (vx + vy + c2))
        })
        .sum();
    Ok(total / n as f64)
}

/// Mean over taps of the per-element mean squared feature difference; a
/// learned-metric stand-in built on the perceptual-loss extractor.
pub fn perceptual_distance(a: &RenderedImage, b: &RenderedImage, extractor: &FeatureExtractor<f32>) -> Result<f64> {
    check(a, b)?;
    let fa = extractor.forward(&a.data, 1, a.height, a.width);
    let fb = extractor.forward(&b.data, 1, b.height, b.width);
    let mut acc = 0.0;
    for &d in &extractor.taps {
        let (p, q) = (fa.tap(d), fb.tap(d));
        let s: f64 = p.iter().zip(q).map(|(&u, &v)| (u as f64 - v as f64).powi(2)).sum();
        acc += s / p.len().max(1) as f64;
    }
    Ok(acc / extractor.taps.len() as f64)
}
