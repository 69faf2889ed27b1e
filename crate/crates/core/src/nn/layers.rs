use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use super::ops::{col2im, im2col};
use super::real::{cast_vec, matmul, Real};

/// Epsilon inside the demodulation square root.
pub const DEMOD_EPS: f64 = 1e-8;

fn normal_vec<R: Real>(rng: &mut impl Rng, len: usize, std: f64) -> Vec<R> {
    (0..len)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            R::lit(z * std)
        })
        .collect()
}

/// Fully connected layer `y = x Wᵀ + b` over a batch of row vectors.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear<R> {
    pub in_dim: usize,
    pub out_dim: usize,
    /// `out_dim × in_dim`, row-major.
    pub weight: Vec<R>,
    pub bias: Vec<R>,
}

impl<R: Real> Linear<R> {
    pub fn init(in_dim: usize, out_dim: usize, weight_std: f64, bias: f64, rng: &mut impl Rng) -> Self {
        Self {
            in_dim,
            out_dim,
            weight: normal_vec(rng, in_dim * out_dim, weight_std),
            bias: vec![R::lit(bias); out_dim],
        }
    }

    pub fn zeros(in_dim: usize, out_dim: usize) -> Self {
        Self {
            in_dim,
            out_dim,
            weight: vec![R::zero(); in_dim * out_dim],
            bias: vec![R::zero(); out_dim],
        }
    }

    pub fn forward(&self, x: &[R], batch: usize) -> Vec<R> {
        let mut y = Vec::with_capacity(batch * self.out_dim);
        for _ in 0..batch {
            y.extend_from_slice(&self.bias);
        }
        matmul(batch, self.in_dim, self.out_dim, x, false, &self.weight, true, &mut y, true);
        y
    }

    /// Returns the input gradient and, if `grads` is given, accumulates weight gradients.
    pub fn backward(&self, x: &[R], gy: &[R], batch: usize, grads: Option<&mut Linear<R>>) -> Vec<R> {
        let mut gx = vec![R::zero(); batch * self.in_dim];
        matmul(batch, self.out_dim, self.in_dim, gy, false, &self.weight, false, &mut gx, false);
        if let Some(g) = grads {
            matmul(self.out_dim, batch, self.in_dim, gy, true, x, false, &mut g.weight, true);
            for row in gy.chunks_exact(self.out_dim) {
                for (gb, v) in g.bias.iter_mut().zip(row) {
                    *gb += *v;
                }
            }
        }
        gx
    }

    pub fn cast<S: Real>(&self) -> Linear<S> {
        Linear {
            in_dim: self.in_dim,
            out_dim: self.out_dim,
            weight: cast_vec(&self.weight),
            bias: cast_vec(&self.bias),
        }
    }
}

/// Convolution whose kernel is scaled per input channel by a style vector
/// derived from the latent `w`, then (optionally) renormalized so every
/// output channel has unit L2 weight norm.
///
/// Implemented by scaling activations instead of kernels:
/// `y[o] = d[o] · conv(W, x ⊙ s)[o] + b[o]`, which is algebraically identical
/// to convolving with the modulated/demodulated kernel and lets a batch share
/// one weight tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct ModConv<R> {
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub demodulate: bool,
    /// `out_ch × in_ch × kernel × kernel`.
    pub weight: Vec<R>,
    pub bias: Vec<R>,
    /// Latent → per-input-channel style.
    pub affine: Linear<R>,
}

/// Activations retained by [`ModConv::forward`] for the backward pass.
#[derive(Clone, Debug)]
pub struct ModConvCache<R> {
    pub x: Vec<R>,
    pub styles: Vec<R>,
    pub x_mod: Vec<R>,
    pub demod: Vec<R>,
    pub y_raw: Vec<R>,
}

impl<R: Real> ModConv<R> {
    pub fn init(
        latent_dim: usize,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        demodulate: bool,
        rng: &mut impl Rng,
    ) -> Self {
        let fan_in = (in_ch * kernel * kernel) as f64;
        Self {
            in_ch,
            out_ch,
            kernel,
            demodulate,
            weight: normal_vec(rng, out_ch * in_ch * kernel * kernel, fan_in.sqrt().recip()),
            bias: vec![R::zero(); out_ch],
            affine: Linear::init(latent_dim, in_ch, (latent_dim as f64).sqrt().recip(), 1.0, rng),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            in_ch: self.in_ch,
            out_ch: self.out_ch,
            kernel: self.kernel,
            demodulate: self.demodulate,
            weight: vec![R::zero(); self.weight.len()],
            bias: vec![R::zero(); self.out_ch],
            affine: Linear::zeros(self.affine.in_dim, self.affine.out_dim),
        }
    }

    fn kk(&self) -> usize {
        self.kernel * self.kernel
    }

    /// Per-(out, in) sum of squared kernel taps.
    fn weight_sq(&self) -> Vec<R> {
        self.weight
            .chunks_exact(self.kk())
            .map(|taps| taps.iter().map(|&v| v * v).sum())
            .collect()
    }

    /// Demodulation coefficients `[batch, out_ch]`.
    fn demod_coeffs(&self, styles: &[R], batch: usize) -> Vec<R> {
        if !self.demodulate {
            return vec![R::one(); batch * self.out_ch];
        }
        let wsq = self.weight_sq();
        let s2: Vec<R> = styles.iter().map(|&s| s * s).collect();
        // u = s² · Wsqᵀ
        let mut u = vec![R::lit(DEMOD_EPS); batch * self.out_ch];
        matmul(batch, self.in_ch, self.out_ch, &s2, false, &wsq, true, &mut u, true);
        u.iter().map(|&v| v.sqrt().recip()).collect()
    }

    /// Explicitly modulated (and demodulated) kernel for one style vector.
    pub fn modulated_weights(&self, style: &[R]) -> Vec<R> {
        let d = self.demod_coeffs(style, 1);
        let kk = self.kk();
        let mut out = self.weight.clone();
        for o in 0..self.out_ch {
            for i in 0..self.in_ch {
                let base = (o * self.in_ch + i) * kk;
                for v in &mut out[base..base + kk] {
                    *v *= style[i] * d[o];
                }
            }
        }
        out
    }

    /// Pre-activation output `[batch, out_ch, h, w]` (bias included).
    pub fn forward(&self, x: &[R], latent: &[R], batch: usize, h: usize, w: usize) -> (Vec<R>, ModConvCache<R>) {
        let hw = h * w;
        let styles = self.affine.forward(latent, batch);
        let mut x_mod = x.to_vec();
        for b in 0..batch {
            for i in 0..self.in_ch {
                let s = styles[b * self.in_ch + i];
                for v in &mut x_mod[(b * self.in_ch + i) * hw..(b * self.in_ch + i + 1) * hw] {
                    *v *= s;
                }
            }
        }
        let demod = self.demod_coeffs(&styles, batch);
        let ckk = self.in_ch * self.kk();
        let mut y_raw = vec![R::zero(); batch * self.out_ch * hw];
        let mut cols = if self.kernel == 1 { Vec::new() } else { vec![R::zero(); ckk * hw] };
        for b in 0..batch {
            let xb = &x_mod[b * self.in_ch * hw..(b + 1) * self.in_ch * hw];
            let yb = &mut y_raw[b * self.out_ch * hw..(b + 1) * self.out_ch * hw];
            let colsb: &[R] = if self.kernel == 1 {
                xb
            } else {
                im2col(xb, self.in_ch, h, w, self.kernel, &mut cols);
                &cols
            };
            matmul(self.out_ch, ckk, hw, &self.weight, false, colsb, false, yb, false);
        }
        let mut y = y_raw.clone();
        for b in 0..batch {
            for o in 0..self.out_ch {
                let d = demod[b * self.out_ch + o];
                let bias = self.bias[o];
                for v in &mut y[(b * self.out_ch + o) * hw..(b * self.out_ch + o + 1) * hw] {
                    *v = *v * d + bias;
                }
            }
        }
        let cache = ModConvCache {
            x: x.to_vec(),
            styles,
            x_mod,
            demod,
            y_raw,
        };
        (y, cache)
    }

    /// Backward from the pre-activation gradient. Returns `(grad_x, grad_latent)`.
    #[allow(clippy::too_many_arguments)]
    pub fn backward(
        &self,
        cache: &ModConvCache<R>,
        g_pre: &[R],
        latent: &[R],
        batch: usize,
        h: usize,
        w: usize,
        mut grads: Option<&mut ModConv<R>>,
    ) -> (Vec<R>, Vec<R>) {
        let hw = h * w;
        let (cin, cout, kk) = (self.in_ch, self.out_ch, self.kk());
        let ckk = cin * kk;
        let mut g_styles = vec![R::zero(); batch * cin];

        if let Some(g) = grads.as_deref_mut() {
            for (o, gb) in g.bias.iter_mut().enumerate() {
                for b in 0..batch {
                    *gb += g_pre[(b * cout + o) * hw..(b * cout + o + 1) * hw].iter().copied().sum::<R>();
                }
            }
        }

        let mut g_yraw = g_pre.to_vec();
        for b in 0..batch {
            for o in 0..cout {
                let d = cache.demod[b * cout + o];
                for v in &mut g_yraw[(b * cout + o) * hw..(b * cout + o + 1) * hw] {
                    *v *= d;
                }
            }
        }

        if self.demodulate {
            // d = (Σ_i Wsq[o,i] s_i² + eps)^(-1/2)
            let wsq = self.weight_sq();
            let mut g_u = vec![R::zero(); batch * cout];
            for b in 0..batch {
                for o in 0..cout {
                    let idx = (b * cout + o) * hw;
                    let g_d: R = g_pre[idx..idx + hw]
                        .iter()
                        .zip(&cache.y_raw[idx..idx + hw])
                        .map(|(&a, &c)| a * c)
                        .sum();
                    let d = cache.demod[b * cout + o];
                    g_u[b * cout + o] = -g_d * d * d * d * R::lit(0.5);
                }
            }
            // g_s[b,i] += 2 s_i Σ_o g_u[b,o] Wsq[o,i]
            let mut t = vec![R::zero(); batch * cin];
            matmul(batch, cout, cin, &g_u, false, &wsq, false, &mut t, false);
            for ((gs, tv), &s) in g_styles.iter_mut().zip(&t).zip(&cache.styles) {
                *gs += R::lit(2.0) * s * *tv;
            }
            if let Some(g) = grads.as_deref_mut() {
                // g_Wsq[o,i] = Σ_b g_u[b,o] s_i²
                let s2: Vec<R> = cache.styles.iter().map(|&s| s * s).collect();
                let mut g_wsq = vec![R::zero(); cout * cin];
                matmul(cout, batch, cin, &g_u, true, &s2, false, &mut g_wsq, false);
                for (oi, &gq) in g_wsq.iter().enumerate() {
                    let base = oi * kk;
                    for t in 0..kk {
                        g.weight[base + t] += R::lit(2.0) * gq * self.weight[base + t];
                    }
                }
            }
        }

        let mut g_x = vec![R::zero(); batch * cin * hw];
        let mut cols = if self.kernel == 1 { Vec::new() } else { vec![R::zero(); ckk * hw] };
        let mut g_cols = vec![R::zero(); ckk * hw];
        for b in 0..batch {
            let gy = &g_yraw[b * cout * hw..(b + 1) * cout * hw];
            let xb = &cache.x_mod[b * cin * hw..(b + 1) * cin * hw];
            if let Some(g) = grads.as_deref_mut() {
                let colsb: &[R] = if self.kernel == 1 {
                    xb
                } else {
                    im2col(xb, cin, h, w, self.kernel, &mut cols);
                    &cols
                };
                matmul(cout, hw, ckk, gy, false, colsb, true, &mut g.weight, true);
            }
            matmul(ckk, cout, hw, &self.weight, true, gy, false, &mut g_cols, false);
            let gxb = &mut g_x[b * cin * hw..(b + 1) * cin * hw];
            if self.kernel == 1 {
                gxb.copy_from_slice(&g_cols);
            } else {
                col2im(&g_cols, cin, h, w, self.kernel, gxb);
            }
        }

        // x_mod = x ⊙ s
        for b in 0..batch {
            for i in 0..cin {
                let range = (b * cin + i) * hw..(b * cin + i + 1) * hw;
                let s = cache.styles[b * cin + i];
                let mut acc = R::zero();
                for (gv, &xv) in g_x[range.clone()].iter_mut().zip(&cache.x[range]) {
                    acc += *gv * xv;
                    *gv *= s;
                }
                g_styles[b * cin + i] += acc;
            }
        }

        let g_latent = self
            .affine
            .backward(latent, &g_styles, batch, grads.map(|g| &mut g.affine));
        (g_x, g_latent)
    }

    pub fn cast<S: Real>(&self) -> ModConv<S> {
        ModConv {
            in_ch: self.in_ch,
            out_ch: self.out_ch,
            kernel: self.kernel,
            demodulate: self.demodulate,
            weight: cast_vec(&self.weight),
            bias: cast_vec(&self.bias),
            affine: self.affine.cast(),
        }
    }
}

/// Plain `same`-padded convolution with bias; used by fixed feature extractors,
/// so only the input gradient is provided.
#[derive(Clone, Debug, PartialEq)]
pub struct Conv2d<R> {
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    /// `out_ch × in_ch × kernel × kernel`.
    pub weight: Vec<R>,
    pub bias: Vec<R>,
}

impl<R: Real> Conv2d<R> {
    pub fn init(in_ch: usize, out_ch: usize, kernel: usize, rng: &mut impl Rng) -> Self {
        let fan_in = (in_ch * kernel * kernel) as f64;
        Self {
            in_ch,
            out_ch,
            kernel,
            weight: normal_vec(rng, out_ch * in_ch * kernel * kernel, (2.0 / fan_in).sqrt()),
            bias: vec![R::zero(); out_ch],
        }
    }

    pub fn forward(&self, x: &[R], batch: usize, h: usize, w: usize) -> Vec<R> {
        let hw = h * w;
        let ckk = self.in_ch * self.kernel * self.kernel;
        let mut y = vec![R::zero(); batch * self.out_ch * hw];
        let mut cols = vec![R::zero(); ckk * hw];
        for b in 0..batch {
            let xb = &x[b * self.in_ch * hw..(b + 1) * self.in_ch * hw];
            let yb = &mut y[b * self.out_ch * hw..(b + 1) * self.out_ch * hw];
            for (o, plane) in yb.chunks_exact_mut(hw).enumerate() {
                plane.fill(self.bias[o]);
            }
            im2col(xb, self.in_ch, h, w, self.kernel, &mut cols);
            matmul(self.out_ch, ckk, hw, &self.weight, false, &cols, false, yb, true);
        }
        y
    }

    pub fn backward_input(&self, gy: &[R], batch: usize, h: usize, w: usize) -> Vec<R> {
        let hw = h * w;
        let ckk = self.in_ch * self.kernel * self.kernel;
        let mut gx = vec![R::zero(); batch * self.in_ch * hw];
        let mut cols = vec![R::zero(); ckk * hw];
        for b in 0..batch {
            let gyb = &gy[b * self.out_ch * hw..(b + 1) * self.out_ch * hw];
            matmul(ckk, self.out_ch, hw, &self.weight, true, gyb, false, &mut cols, false);
            col2im(&cols, self.in_ch, h, w, self.kernel, &mut gx[b * self.in_ch * hw..(b + 1) * self.in_ch * hw]);
        }
        gx
    }

    pub fn cast<S: Real>(&self) -> Conv2d<S> {
        Conv2d {
            in_ch: self.in_ch,
            out_ch: self.out_ch,
            kernel: self.kernel,
            weight: cast_vec(&self.weight),
            bias: cast_vec(&self.bias),
        }
    }
}
