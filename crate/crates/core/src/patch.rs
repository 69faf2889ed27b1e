//! Click-to-select structure patches: breadth-first flood fill under an HSV
//! color similarity to the clicked pixel.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::RenderedImage;

/// Weights of the hue, saturation and value distances.
pub const HSV_WEIGHTS: [f64; 3] = [0.5, 0.25, 0.25];

pub type Pixel = [i64; 2];

/// Hue as a fraction of a full turn, saturation and value, all in `[0, 1]`.
pub fn rgb_to_hsv(rgb: [f64; 3]) -> [f64; 3] {
    let [r, g, b] = rgb;
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let delta = max - min;
    let h = if delta == 0.0 {
        0.0
    } else if max == r {
        ((g - b) / delta).rem_euclid(6.0) / 6.0
    } else if max == g {
        ((b - r) / delta + 2.0) / 6.0
    } else {
        ((r - g) / delta + 4.0) / 6.0
    };
    let s = if max == 0.0 { 0.0 } else { delta / max };
    [h, s, max]
}

/// `1 − (0.5·Δh + 0.25·Δs + 0.25·Δv)` where `Δh` is the circular hue distance
/// rescaled to `[0, 1]`.
pub fn hsv_similarity(c1: [f64; 3], c2: [f64; 3]) -> Result<f64> {
    for v in c1.iter().chain(&c2) {
        if !(0.0..=1.0).contains(v) {
            return Err(Error::Data(format!("color channel {v} outside [0, 1]")));
        }
    }
    let (a, b) = (rgb_to_hsv(c1), rgb_to_hsv(c2));
    let dh = (a[0] - b[0]).abs();
    let dh = 2.0 * dh.min(1.0 - dh);
    let dist = HSV_WEIGHTS[0] * dh + HSV_WEIGHTS[1] * (a[1] - b[1]).abs() + HSV_WEIGHTS[2] * (a[2] - b[2]).abs();
    Ok((1.0 - dist).clamp(0.0, 1.0))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PatchOptions {
    /// Minimum similarity to the clicked color.
    pub threshold: f64,
    /// Expansion radius: accepted pixels reach every pixel within this
    /// Euclidean distance.
    pub radius: f64,
    /// Optional cap on the distance of any patch pixel from the click.
    pub max_extent: Option<f64>,
}

impl Default for PatchOptions {
    fn default() -> Self {
        Self { threshold: 0.95, radius: 3.0, max_extent: None }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PatchSelection {
    /// Current handle point `p`.
    pub seed: Pixel,
    pub target: Pixel,
    /// Row-major sorted patch pixels.
    pub pixels: Vec<Pixel>,
    #[serde(default = "yes")]
    pub active: bool,
    /// Handle point at creation; never moves.
    #[serde(default)]
    pub initial_seed: Option<Pixel>,
}

fn yes() -> bool {
    true
}

impl PatchSelection {
    pub fn initial(&self) -> Pixel {
        self.initial_seed.unwrap_or(self.seed)
    }

    pub fn with_target(mut self, target: Pixel) -> Self {
        self.target = target;
        self
    }

    /// Checks membership and bounds against an image size.
    pub fn validate(&self, width: usize, height: usize) -> Result<()> {
        let inside = |p: &Pixel| p[0] >= 0 && p[1] >= 0 && (p[0] as usize) < width && (p[1] as usize) < height;
        if !inside(&self.seed) || !inside(&self.target) {
            return Err(Error::Argument(format!(
                "seed {:?} or target {:?} outside the {width}×{height} image",
                self.seed, self.target
            )));
        }
        if let Some(p) = self.pixels.iter().find(|p| !inside(p)) {
            return Err(Error::Argument(format!("patch pixel {p:?} outside the image")));
        }
        Ok(())
    }
}

/// Flood-fills from `p`. The target is initialised to the seed.
pub fn select_patch(image: &RenderedImage, p: Pixel, opts: &PatchOptions) -> Result<PatchSelection> {
    let (w, h) = (image.width as i64, image.height as i64);
    if p[0] < 0 || p[1] < 0 || p[0] >= w || p[1] >= h {
        return Err(Error::Argument(format!("click {p:?} outside the {w}×{h} image")));
    }
    if !(opts.threshold > 0.0 && opts.threshold <= 1.0) {
        return Err(Error::Argument(format!("similarity threshold {} not in (0, 1]", opts.threshold)));
    }
    if !(opts.radius >= 1.0 && opts.radius.is_finite()) {
        return Err(Error::Argument(format!("radius {} must be at least 1", opts.radius)));
    }
    let color = |q: Pixel| -> [f64; 3] { image.pixel(q[0] as usize, q[1] as usize).map(|v| v as f64) };
    let reference = color(p);
    let reach = opts.radius.floor() as i64;
    let offsets: Vec<(i64, i64)> = (-reach..=reach)
        .flat_map(|dy| (-reach..=reach).map(move |dx| (dx, dy)))
        .filter(|&(dx, dy)| (dx, dy) != (0, 0) && ((dx * dx + dy * dy) as f64) <= opts.radius * opts.radius)
        .collect();

    let mut visited = vec![false; (w * h) as usize];
    let mut accepted = Vec::new();
    let mut queue = VecDeque::from([p]);
    visited[(p[1] * w + p[0]) as usize] = true;
    while let Some(q) = queue.pop_front() {
        accepted.push(q);
        for &(dx, dy) in &offsets {
            let n = [q[0] + dx, q[1] + dy];
            if n[0] < 0 || n[1] < 0 || n[0] >= w || n[1] >= h {
                continue;
            }
            let idx = (n[1] * w + n[0]) as usize;
            if visited[idx] {
                continue;
            }
            if let Some(cap) = opts.max_extent {
                let (ex, ey) = ((n[0] - p[0]) as f64, (n[1] - p[1]) as f64);
                if ex.hypot(ey) > cap {
                    continue;
                }
            }
            if hsv_similarity(color(n), reference)? >= opts.threshold {
                visited[idx] = true;
                queue.push_back(n);
            }
        }
    }
    accepted.sort_by_key(|q| (q[1], q[0]));
    Ok(PatchSelection { seed: p, target: p, pixels: accepted, active: true, initial_seed: Some(p) })
}
