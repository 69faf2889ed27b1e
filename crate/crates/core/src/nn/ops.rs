//! Tensor kernels on planar `[C, H, W]` buffers with their adjoints.

use super::real::Real;

/// Unfold a `[c, h, w]` map into `[c*k*k, h*w]` columns for a stride-1,
/// zero-padded ("same") convolution with an odd kernel `k`.
pub fn im2col<R: Real>(x: &[R], c: usize, h: usize, w: usize, k: usize, cols: &mut [R]) {
    debug_assert_eq!(x.len(), c * h * w);
    debug_assert_eq!(cols.len(), c * k * k * h * w);
    let pad = (k / 2) as isize;
    let hw = h * w;
    for ci in 0..c {
        let plane = &x[ci * hw..(ci + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let dst = &mut cols[row * hw..(row + 1) * hw];
                let dx = kx as isize - pad;
                let dy = ky as isize - pad;
                // valid output columns for this horizontal offset
                let x_lo = (-dx).max(0) as usize;
                let x_hi = ((w as isize - dx).min(w as isize)).max(0) as usize;
                for y in 0..h {
                    let sy = y as isize + dy;
                    let out = &mut dst[y * w..(y + 1) * w];
                    if sy < 0 || sy >= h as isize || x_lo >= x_hi {
                        out.fill(R::zero());
                        continue;
                    }
                    let src = &plane[sy as usize * w..(sy as usize + 1) * w];
                    out[..x_lo].fill(R::zero());
                    let s0 = (x_lo as isize + dx) as usize;
                    out[x_lo..x_hi].copy_from_slice(&src[s0..s0 + (x_hi - x_lo)]);
                    out[x_hi..].fill(R::zero());
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-add columns back into a `[c, h, w]` map.
pub fn col2im<R: Real>(cols: &[R], c: usize, h: usize, w: usize, k: usize, x: &mut [R]) {
    debug_assert_eq!(x.len(), c * h * w);
    debug_assert_eq!(cols.len(), c * k * k * h * w);
    x.fill(R::zero());
    let pad = (k / 2) as isize;
    let hw = h * w;
    for ci in 0..c {
        let plane = &mut x[ci * hw..(ci + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let src = &cols[row * hw..(row + 1) * hw];
                let dx = kx as isize - pad;
                let dy = ky as isize - pad;
                let x_lo = (-dx).max(0) as usize;
                let x_hi = ((w as isize - dx).min(w as isize)).max(0) as usize;
                if x_lo >= x_hi {
                    continue;
                }
                for y in 0..h {
                    let sy = y as isize + dy;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let s0 = (x_lo as isize + dx) as usize;
                    let dst = &mut plane[sy as usize * w + s0..sy as usize * w + s0 + (x_hi - x_lo)];
                    for (d, s) in dst.iter_mut().zip(&src[y * w + x_lo..y * w + x_hi]) {
                        *d += *s;
                    }
                }
            }
        }
    }
}

/// One axis of a bilinear resize with half-pixel centers (`align_corners = false`).
#[derive(Clone, Debug)]
pub struct ResizeAxis {
    pub src: usize,
    pub dst: usize,
    lo: Vec<usize>,
    hi: Vec<usize>,
    frac: Vec<f64>,
}

impl ResizeAxis {
    pub fn new(src: usize, dst: usize) -> Self {
        let scale = src as f64 / dst as f64;
        let mut lo = Vec::with_capacity(dst);
        let mut hi = Vec::with_capacity(dst);
        let mut frac = Vec::with_capacity(dst);
        for i in 0..dst {
            let s = ((i as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (s.floor() as usize).min(src - 1);
            let i1 = (i0 + 1).min(src - 1);
            lo.push(i0);
            hi.push(i1);
            frac.push(s - i0 as f64);
        }
        Self { src, dst, lo, hi, frac }
    }
}

/// Separable bilinear resize of every plane of a `[c, h, w]` map.
#[derive(Clone, Debug)]
pub struct Resize2d {
    pub rows: ResizeAxis,
    pub cols: ResizeAxis,
}

impl Resize2d {
    pub fn new(h: usize, w: usize, out_h: usize, out_w: usize) -> Self {
        Self {
            rows: ResizeAxis::new(h, out_h),
            cols: ResizeAxis::new(w, out_w),
        }
    }

    pub fn forward<R: Real>(&self, x: &[R], c: usize) -> Vec<R> {
        let (h, w) = (self.rows.src, self.cols.src);
        let (oh, ow) = (self.rows.dst, self.cols.dst);
        debug_assert_eq!(x.len(), c * h * w);
        let mut tmp = vec![R::zero(); h * ow];
        let mut out = vec![R::zero(); c * oh * ow];
        for ci in 0..c {
            let plane = &x[ci * h * w..(ci + 1) * h * w];
            for y in 0..h {
                let row = &plane[y * w..(y + 1) * w];
                for j in 0..ow {
                    let f = R::lit(self.cols.frac[j]);
                    tmp[y * ow + j] = row[self.cols.lo[j]] * (R::one() - f) + row[self.cols.hi[j]] * f;
                }
            }
            let dst = &mut out[ci * oh * ow..(ci + 1) * oh * ow];
            for i in 0..oh {
                let f = R::lit(self.rows.frac[i]);
                let (a, b) = (self.rows.lo[i], self.rows.hi[i]);
                for j in 0..ow {
                    dst[i * ow + j] = tmp[a * ow + j] * (R::one() - f) + tmp[b * ow + j] * f;
                }
            }
        }
        out
    }

    /// Adjoint of [`Resize2d::forward`].
    pub fn backward<R: Real>(&self, g: &[R], c: usize) -> Vec<R> {
        let (h, w) = (self.rows.src, self.cols.src);
        let (oh, ow) = (self.rows.dst, self.cols.dst);
        debug_assert_eq!(g.len(), c * oh * ow);
        let mut tmp = vec![R::zero(); h * ow];
        let mut out = vec![R::zero(); c * h * w];
        for ci in 0..c {
            tmp.fill(R::zero());
            let src = &g[ci * oh * ow..(ci + 1) * oh * ow];
            for i in 0..oh {
                let f = R::lit(self.rows.frac[i]);
                let (a, b) = (self.rows.lo[i], self.rows.hi[i]);
                for j in 0..ow {
                    let v = src[i * ow + j];
                    tmp[a * ow + j] += v * (R::one() - f);
                    tmp[b * ow + j] += v * f;
                }
            }
            let dst = &mut out[ci * h * w..(ci + 1) * h * w];
            for y in 0..h {
                for j in 0..ow {
                    let v = tmp[y * ow + j];
                    let f = R::lit(self.cols.frac[j]);
                    dst[y * w + self.cols.lo[j]] += v * (R::one() - f);
                    dst[y * w + self.cols.hi[j]] += v * f;
                }
            }
        }
        out
    }
}

/// Bilinear sample of all channels of a `[c, h, w]` map at a continuous
/// location; `None` when the location lies outside `[0, w-1] × [0, h-1]`.
pub fn bilinear_sample<R: Real>(map: &[R], c: usize, h: usize, w: usize, x: f64, y: f64) -> Option<Vec<R>> {
    let taps = bilinear_taps(h, w, x, y)?;
    let hw = h * w;
    Some(
        (0..c)
            .map(|ci| {
                taps.iter()
                    .map(|&(idx, wt)| map[ci * hw + idx] * R::lit(wt))
                    .fold(R::zero(), |a, b| a + b)
            })
            .collect(),
    )
}

/// The four (flat index, weight) taps of a bilinear sample.
pub fn bilinear_taps(h: usize, w: usize, x: f64, y: f64) -> Option<[(usize, f64); 4]> {
    let eps = 1e-9;
    if !(x.is_finite() && y.is_finite()) || x < -eps || y < -eps || x > (w - 1) as f64 + eps || y > (h - 1) as f64 + eps {
        return None;
    }
    let x = x.clamp(0.0, (w - 1) as f64);
    let y = y.clamp(0.0, (h - 1) as f64);
    let x0 = x.floor() as usize;
    let y0 = y.floor() as usize;
    let x1 = (x0 + 1).min(w - 1);
    let y1 = (y0 + 1).min(h - 1);
    let fx = x - x0 as f64;
    let fy = y - y0 as f64;
    Some([
        (y0 * w + x0, (1.0 - fx) * (1.0 - fy)),
        (y0 * w + x1, fx * (1.0 - fy)),
        (y1 * w + x0, (1.0 - fx) * fy),
        (y1 * w + x1, fx * fy),
    ])
}

/// 2×2 max pool with stride 2 over `[n, h, w]` planes (`h`, `w` even is not
/// required; a trailing odd row/column is dropped). Returns the pooled map and
/// the flat source index of every maximum.
pub fn maxpool2<R: Real>(x: &[R], n: usize, h: usize, w: usize) -> (Vec<R>, Vec<usize>) {
    let (oh, ow) = (h / 2, w / 2);
    let mut y = Vec::with_capacity(n * oh * ow);
    let mut arg = Vec::with_capacity(n * oh * ow);
    for p in 0..n {
        let base = p * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = base + 2 * oy * w + 2 * ox;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let i = base + (2 * oy + dy) * w + 2 * ox + dx;
                    if x[i] > x[best] {
                        best = i;
                    }
                }
                y.push(x[best]);
                arg.push(best);
            }
        }
    }
    (y, arg)
}

pub fn maxpool2_backward<R: Real>(g: &[R], arg: &[usize], input_len: usize) -> Vec<R> {
    let mut gx = vec![R::zero(); input_len];
    for (&gv, &i) in g.iter().zip(arg) {
        gx[i] += gv;
    }
    gx
}

pub const LRELU_SLOPE: f64 = 0.2;
pub const LRELU_GAIN: f64 = std::f64::consts::SQRT_2;

pub fn lrelu_inplace<R: Real>(x: &mut [R]) {
    let slope = R::lit(LRELU_SLOPE);
    let gain = R::lit(LRELU_GAIN);
    for v in x {
        *v = if *v > R::zero() { *v * gain } else { *v * slope * gain };
    }
}

/// Backward of [`lrelu_inplace`] given its output (the sign is preserved).
pub fn lrelu_backward<R: Real>(out: &[R], g: &mut [R]) {
    let slope = R::lit(LRELU_SLOPE);
    let gain = R::lit(LRELU_GAIN);
    for (gv, &o) in g.iter_mut().zip(out) {
        *gv *= if o > R::zero() { gain } else { slope * gain };
    }
}

pub fn relu_inplace<R: Real>(x: &mut [R]) {
    for v in x {
        if *v < R::zero() {
            *v = R::zero();
        }
    }
}

pub fn relu_backward<R: Real>(out: &[R], g: &mut [R]) {
    for (gv, &o) in g.iter_mut().zip(out) {
        if o <= R::zero() {
            *gv = R::zero();
        }
    }
}

pub fn sigmoid<R: Real>(x: R) -> R {
    R::one() / (R::one() + (-x).exp())
}
