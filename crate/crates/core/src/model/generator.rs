//! Param Subnet → Mapping Subnet → Synthesis Subnet, with explicit adjoints.
//!
//! The synthesis path starts from a learned 4×4 constant; every further
//! block upsamples bilinearly by two and applies modulated, demodulated 3×3
//! convolutions driven by the latent `w`. A modulated 1×1 convolution maps
//! the last block to RGB and a sigmoid bounds the result to `[0, 1]`.
//! Nothing on any forward path samples randomness.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::is_valid_resolution;
use crate::nn::ops::{lrelu_backward, lrelu_inplace, relu_backward, relu_inplace, sigmoid, Resize2d};
use crate::nn::real::cast_vec;
use crate::nn::{Linear, ModConv, ModConvCache, Real};

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub sim_dim: usize,
    pub vis_dim: usize,
    pub hidden: usize,
    pub mapping_depth: usize,
    /// Channels of the 4×4 constant; halved per block down to `min_channels`.
    pub base_channels: usize,
    pub min_channels: usize,
    pub resolution: usize,
    pub convs_per_block: usize,
}

impl GeneratorConfig {
    pub fn new(sim_dim: usize, vis_dim: usize, resolution: usize) -> Self {
        Self {
            sim_dim,
            vis_dim,
            hidden: 512,
            mapping_depth: 4,
            base_channels: 256,
            min_channels: 64,
            resolution,
            convs_per_block: 2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.sim_dim == 0 || self.vis_dim == 0 {
            return Err(Error::Argument("sim_dim and vis_dim must be at least 1".into()));
        }
        if !is_valid_resolution(self.resolution) {
            return Err(Error::Argument(format!(
                "resolution {} is not 4·2^b with b ≥ 1",
                self.resolution
            )));
        }
        if self.hidden == 0 || self.mapping_depth == 0 || self.base_channels == 0 || self.min_channels == 0 || self.convs_per_block == 0 {
            return Err(Error::Argument("generator widths and depths must be positive".into()));
        }
        Ok(())
    }

    /// Number of upsampling synthesis blocks after the 4×4 level.
    pub fn blocks(&self) -> usize {
        (self.resolution / 4).trailing_zeros() as usize
    }

    /// Channels per level; level `k` has resolution `4·2^k`.
    pub fn channels(&self) -> Vec<usize> {
        (0..=self.blocks())
            .map(|k| (self.base_channels >> k).max(self.min_channels.min(self.base_channels)))
            .collect()
    }

    pub fn level_resolution(&self, level: usize) -> usize {
        4 << level
    }

    /// Layer ids of the levels, e.g. `b4`, `b8`, …, `b64`.
    pub fn layer_ids(&self) -> Vec<String> {
        (0..=self.blocks()).map(|k| format!("b{}", self.level_resolution(k))).collect()
    }

    pub fn level_of(&self, layer_id: &str) -> Result<usize> {
        self.layer_ids()
            .iter()
            .position(|id| id == layer_id)
            .ok_or_else(|| {
                Error::Argument(format!(
                    "unknown layer `{layer_id}`; available: {}",
                    self.layer_ids().join(", ")
                ))
            })
    }

    /// Block at half the output resolution: the default feature layer for dragging.
    pub fn default_feature_layer(&self) -> String {
        self.layer_ids()[self.blocks().saturating_sub(1)].clone()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Generator<R> {
    pub config: GeneratorConfig,
    pub sim_fc: Linear<R>,
    pub vis_fc: Linear<R>,
    pub fuse_fc: Linear<R>,
    pub mapping: Vec<Linear<R>>,
    /// `base_channels × 4 × 4`.
    pub constant: Vec<R>,
    /// Level 0 holds one conv at 4×4; later levels `convs_per_block` each.
    pub levels: Vec<Vec<ModConv<R>>>,
    pub to_rgb: ModConv<R>,
}

/// Everything a forward pass produced, retained for backward.
#[derive(Clone, Debug)]
pub struct ForwardPass<R> {
    pub batch: usize,
    sim_in: Vec<R>,
    vis_in: Vec<R>,
    sim_h: Vec<R>,
    vis_h: Vec<R>,
    concat: Vec<R>,
    /// Param Subnet output (`batch × hidden`).
    pub fused: Vec<R>,
    mapping_outs: Vec<Vec<R>>,
    conv_caches: Vec<Vec<ModConvCache<R>>>,
    /// Post-activation output of every conv, per level.
    conv_outs: Vec<Vec<Vec<R>>>,
    rgb_cache: ModConvCache<R>,
    /// `[batch, 3, H, W]` in `[0, 1]`.
    pub image: Vec<R>,
}

impl<R: Real> ForwardPass<R> {
    /// Latent `w` (`batch × hidden`).
    pub fn latent(&self) -> &[R] {
        self.mapping_outs.last().expect("mapping depth ≥ 1")
    }

    /// Output of the given level (`[batch, C, r, r]`).
    pub fn level_output(&self, level: usize) -> &[R] {
        self.conv_outs[level].last().expect("level has convs")
    }

    pub fn image_of(&self, b: usize) -> &[R] {
        let n = self.image.len() / self.batch;
        &self.image[b * n..(b + 1) * n]
    }
}

/// Where backpropagation starts: the image and/or level outputs.
#[derive(Clone, Debug, Default)]
pub struct BackwardSeed<'a, R> {
    pub image: Option<&'a [R]>,
    pub levels: Vec<(usize, &'a [R])>,
}

/// Gradients with respect to the normalized inputs.
#[derive(Clone, Debug)]
pub struct InputGrads<R> {
    pub sim: Vec<R>,
    pub vis: Vec<R>,
}

impl<R: Real> Generator<R> {
    pub fn init(config: &GeneratorConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let h = config.hidden;
        let he = |fan_in: usize| (2.0 / fan_in as f64).sqrt();
        let sim_fc = Linear::init(config.sim_dim, h, he(config.sim_dim), 0.0, &mut rng);
        let vis_fc = Linear::init(config.vis_dim, h, he(config.vis_dim), 0.0, &mut rng);
        let fuse_fc = Linear::init(2 * h, h, he(2 * h), 0.0, &mut rng);
        let mapping = (0..config.mapping_depth)
            .map(|_| Linear::init(h, h, he(h), 0.0, &mut rng))
            .collect();
        let ch = config.channels();
        let constant = {
            use rand_distr::{Distribution, StandardNormal};
            (0..ch[0] * 16)
                .map(|_| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    R::lit(z)
                })
                .collect()
        };
        let mut levels = vec![vec![ModConv::init(h, ch[0], ch[0], 3, true, &mut rng)]];
        for k in 1..ch.len() {
            let mut convs = Vec::with_capacity(config.convs_per_block);
            for j in 0..config.convs_per_block {
                let cin = if j == 0 { ch[k - 1] } else { ch[k] };
                convs.push(ModConv::init(h, cin, ch[k], 3, true, &mut rng));
            }
            levels.push(convs);
        }
        let to_rgb = ModConv::init(h, ch[ch.len() - 1], 3, 1, false, &mut rng);
        Ok(Self {
            config: config.clone(),
            sim_fc,
            vis_fc,
            fuse_fc,
            mapping,
            constant,
            levels,
            to_rgb,
        })
    }

    /// Same structure with every tensor zeroed (gradient accumulator).
    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for t in z.tensors_mut() {
            t.fill(R::zero());
        }
        z
    }

    pub fn cast<S: Real>(&self) -> Generator<S> {
        Generator {
            config: self.config.clone(),
            sim_fc: self.sim_fc.cast(),
            vis_fc: self.vis_fc.cast(),
            fuse_fc: self.fuse_fc.cast(),
            mapping: self.mapping.iter().map(Linear::cast).collect(),
            constant: cast_vec(&self.constant),
            levels: self.levels.iter().map(|l| l.iter().map(ModConv::cast).collect()).collect(),
            to_rgb: self.to_rgb.cast(),
        }
    }

    /// Named tensors in a fixed order (checkpoint keys and optimizer order).
    pub fn named_tensors(&self) -> Vec<(String, Vec<usize>, &[R])> {
        fn push_linear<'a, R>(out: &mut Vec<(String, Vec<usize>, &'a [R])>, name: &str, l: &'a Linear<R>) {
            out.push((format!("{name}.weight"), vec![l.out_dim, l.in_dim], &l.weight));
            out.push((format!("{name}.bias"), vec![l.out_dim], &l.bias));
        }
        fn push_conv<'a, R>(out: &mut Vec<(String, Vec<usize>, &'a [R])>, name: &str, c: &'a ModConv<R>) {
            out.push((format!("{name}.weight"), vec![c.out_ch, c.in_ch, c.kernel, c.kernel], &c.weight));
            out.push((format!("{name}.bias"), vec![c.out_ch], &c.bias));
            push_linear(out, &format!("{name}.affine"), &c.affine);
        }
        let mut out: Vec<(String, Vec<usize>, &[R])> = Vec::new();
        push_linear(&mut out, "param.sim", &self.sim_fc);
        push_linear(&mut out, "param.vis", &self.vis_fc);
        push_linear(&mut out, "param.fuse", &self.fuse_fc);
        for (i, l) in self.mapping.iter().enumerate() {
            push_linear(&mut out, &format!("mapping.{i}"), l);
        }
        out.push(("synthesis.const".into(), vec![self.config.channels()[0], 4, 4], &self.constant));
        let ids = self.config.layer_ids();
        for (k, convs) in self.levels.iter().enumerate() {
            for (j, c) in convs.iter().enumerate() {
                push_conv(&mut out, &format!("synthesis.{}.conv{j}", ids[k]), c);
            }
        }
        push_conv(&mut out, "synthesis.to_rgb", &self.to_rgb);
        out
    }

    /// Mutable tensors in the same order as [`Generator::named_tensors`].
    pub fn tensors_mut(&mut self) -> Vec<&mut [R]> {
        fn lin<R>(out: &mut Vec<*mut Vec<R>>, l: &mut Linear<R>) {
            out.push(&mut l.weight);
            out.push(&mut l.bias);
        }
        fn conv<R>(out: &mut Vec<*mut Vec<R>>, c: &mut ModConv<R>) {
            out.push(&mut c.weight);
            out.push(&mut c.bias);
            lin(out, &mut c.affine);
        }
        let mut ptrs: Vec<*mut Vec<R>> = Vec::new();
        lin(&mut ptrs, &mut self.sim_fc);
        lin(&mut ptrs, &mut self.vis_fc);
        lin(&mut ptrs, &mut self.fuse_fc);
        for l in &mut self.mapping {
            lin(&mut ptrs, l);
        }
        ptrs.push(&mut self.constant);
        for convs in &mut self.levels {
            for c in convs {
                conv(&mut ptrs, c);
            }
        }
        conv(&mut ptrs, &mut self.to_rgb);
        // SAFETY: every pointer targets a distinct field of `self`, which stays
        // mutably borrowed for the lifetime of the returned slices.
        ptrs.into_iter().map(|p| unsafe { (*p).as_mut_slice() }).collect()
    }

    pub fn tensors(&self) -> Vec<&[R]> {
        self.named_tensors().into_iter().map(|(_, _, t)| t).collect()
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    /// Param Subnet: two FC+ReLU branches, concatenation, FC+ReLU.
    fn param_subnet(&self, sim: &[R], vis: &[R], batch: usize) -> (Vec<R>, Vec<R>, Vec<R>, Vec<R>) {
        let h = self.config.hidden;
        let mut sim_h = self.sim_fc.forward(sim, batch);
        relu_inplace(&mut sim_h);
        let mut vis_h = self.vis_fc.forward(vis, batch);
        relu_inplace(&mut vis_h);
        let mut concat = Vec::with_capacity(batch * 2 * h);
        for b in 0..batch {
            concat.extend_from_slice(&sim_h[b * h..(b + 1) * h]);
            concat.extend_from_slice(&vis_h[b * h..(b + 1) * h]);
        }
        let mut fused = self.fuse_fc.forward(&concat, batch);
        relu_inplace(&mut fused);
        (sim_h, vis_h, concat, fused)
    }

    pub fn param_subnet_forward(&self, sim: &[R], vis: &[R], batch: usize) -> Result<Vec<R>> {
        self.check_inputs(sim, vis, batch)?;
        Ok(self.param_subnet(sim, vis, batch).3)
    }

    fn mapping_layers(&self, fused: &[R], batch: usize) -> Vec<Vec<R>> {
        let mut outs: Vec<Vec<R>> = Vec::with_capacity(self.mapping.len());
        for layer in &self.mapping {
            let input = outs.last().map(Vec::as_slice).unwrap_or(fused);
            let mut y = layer.forward(input, batch);
            relu_inplace(&mut y);
            outs.push(y);
        }
        outs
    }

    /// Mapping Subnet: `mapping_depth` FC+ReLU layers producing `w`.
    pub fn mapping_forward(&self, fused: &[R], batch: usize) -> Result<Vec<R>> {
        if fused.len() != batch * self.config.hidden {
            return Err(Error::Shape(format!(
                "mapping input has {} values, expected {}",
                fused.len(),
                batch * self.config.hidden
            )));
        }
        if fused.iter().any(|v| !v.is_finite()) {
            return Err(Error::Data("non-finite mapping input".into()));
        }
        Ok(self.mapping_layers(fused, batch).pop().expect("mapping depth ≥ 1"))
    }

    fn check_inputs(&self, sim: &[R], vis: &[R], batch: usize) -> Result<()> {
        if sim.len() != batch * self.config.sim_dim || vis.len() != batch * self.config.vis_dim {
            return Err(Error::Shape(format!(
                "expected {}×{} sim and {}×{} vis inputs, got {} and {}",
                batch,
                self.config.sim_dim,
                batch,
                self.config.vis_dim,
                sim.len(),
                vis.len()
            )));
        }
        Ok(())
    }

    /// Synthesis from latents; returns (conv caches, conv outputs, rgb cache, image).
    #[allow(clippy::type_complexity)]
    fn synthesis(&self, latent: &[R], batch: usize) -> (Vec<Vec<ModConvCache<R>>>, Vec<Vec<Vec<R>>>, ModConvCache<R>, Vec<R>) {
        let ch = self.config.channels();
        let mut x: Vec<R> = Vec::with_capacity(batch * self.constant.len());
        for _ in 0..batch {
            x.extend_from_slice(&self.constant);
        }
        let mut caches = Vec::with_capacity(self.levels.len());
        let mut outs = Vec::with_capacity(self.levels.len());
        for (k, convs) in self.levels.iter().enumerate() {
            let r = self.config.level_resolution(k);
            if k > 0 {
                let up = Resize2d::new(r / 2, r / 2, r, r);
                x = up.forward(&x, batch * ch[k - 1]);
            }
            let mut level_caches = Vec::with_capacity(convs.len());
            let mut level_outs = Vec::with_capacity(convs.len());
            for conv in convs {
                let (mut y, cache) = conv.forward(&x, latent, batch, r, r);
                lrelu_inplace(&mut y);
                level_caches.push(cache);
                level_outs.push(y.clone());
                x = y;
            }
            caches.push(level_caches);
            outs.push(level_outs);
        }
        let res = self.config.resolution;
        let (mut logits, rgb_cache) = self.to_rgb.forward(&x, latent, batch, res, res);
        for v in &mut logits {
            *v = sigmoid(*v);
        }
        (caches, outs, rgb_cache, logits)
    }

    /// Full forward pass from normalized inputs (`batch × sim_dim`, `batch × vis_dim`).
    pub fn forward(&self, sim: &[R], vis: &[R], batch: usize) -> Result<ForwardPass<R>> {
        self.check_inputs(sim, vis, batch)?;
        if sim.iter().chain(vis).any(|v| !v.is_finite()) {
            return Err(Error::Data("non-finite generator input".into()));
        }
        let (sim_h, vis_h, concat, fused) = self.param_subnet(sim, vis, batch);
        let mapping_outs = self.mapping_layers(&fused, batch);
        let latent = mapping_outs.last().expect("mapping depth ≥ 1");
        let (conv_caches, conv_outs, rgb_cache, image) = self.synthesis(latent, batch);
        Ok(ForwardPass {
            batch,
            sim_in: sim.to_vec(),
            vis_in: vis.to_vec(),
            sim_h,
            vis_h,
            concat,
            fused,
            mapping_outs,
            conv_caches,
            conv_outs,
            rgb_cache,
            image,
        })
    }

    /// Synthesis Subnet alone: image `[batch, 3, H, W]` and each level's output.
    pub fn synthesis_forward(&self, latent: &[R], batch: usize) -> Result<(Vec<R>, Vec<Vec<R>>)> {
        if latent.len() != batch * self.config.hidden {
            return Err(Error::Shape(format!(
                "latent has {} values, expected {}",
                latent.len(),
                batch * self.config.hidden
            )));
        }
        if latent.iter().any(|v| !v.is_finite()) {
            return Err(Error::Data("non-finite latent".into()));
        }
        let (_, outs, _, image) = self.synthesis(latent, batch);
        let feats = outs.into_iter().map(|mut l| l.pop().expect("level has convs")).collect();
        Ok((image, feats))
    }

    /// Backpropagates from image and/or level-output gradients to the
    /// normalized inputs, accumulating weight gradients into `grads` if given.
    pub fn backward(&self, pass: &ForwardPass<R>, seed: &BackwardSeed<'_, R>, mut grads: Option<&mut Generator<R>>) -> InputGrads<R> {
        let batch = pass.batch;
        let h = self.config.hidden;
        let ch = self.config.channels();
        let latent = pass.latent();
        let top = self.levels.len() - 1;
        let mut g_lat = vec![R::zero(); batch * h];

        let start_level = if seed.image.is_some() {
            top
        } else {
            match seed.levels.iter().map(|(l, _)| *l).max() {
                Some(l) => l,
                None => {
                    return InputGrads {
                        sim: vec![R::zero(); pass.sim_in.len()],
                        vis: vec![R::zero(); pass.vis_in.len()],
                    }
                }
            }
        };
        let level_len = |k: usize| batch * ch[k] * self.config.level_resolution(k).pow(2);

        let mut g_x: Vec<R> = match seed.image {
            Some(g_img) => {
                let res = self.config.resolution;
                let g_logits: Vec<R> = g_img
                    .iter()
                    .zip(&pass.image)
                    .map(|(&g, &y)| g * y * (R::one() - y))
                    .collect();
                let (gx, gl) = self.to_rgb.backward(
                    &pass.rgb_cache,
                    &g_logits,
                    latent,
                    batch,
                    res,
                    res,
                    grads.as_deref_mut().map(|g| &mut g.to_rgb),
                );
                add_into(&mut g_lat, &gl);
                gx
            }
            None => vec![R::zero(); level_len(start_level)],
        };

        for k in (0..=start_level).rev() {
            for (lvl, g) in &seed.levels {
                if *lvl == k {
                    add_into(&mut g_x, g);
                }
            }
            let r = self.config.level_resolution(k);
            for j in (0..self.levels[k].len()).rev() {
                lrelu_backward(&pass.conv_outs[k][j], &mut g_x);
                let (gx, gl) = self.levels[k][j].backward(
                    &pass.conv_caches[k][j],
                    &g_x,
                    latent,
                    batch,
                    r,
                    r,
                    grads.as_deref_mut().map(|g| &mut g.levels[k][j]),
                );
                add_into(&mut g_lat, &gl);
                g_x = gx;
            }
            if k > 0 {
                let up = Resize2d::new(r / 2, r / 2, r, r);
                g_x = up.backward(&g_x, batch * ch[k - 1]);
            } else if let Some(g) = grads.as_deref_mut() {
                for chunk in g_x.chunks_exact(self.constant.len()) {
                    add_into(&mut g.constant, chunk);
                }
            }
        }

        // Mapping Subnet
        let mut g = g_lat;
        for i in (0..self.mapping.len()).rev() {
            relu_backward(&pass.mapping_outs[i], &mut g);
            let input = if i == 0 { &pass.fused } else { &pass.mapping_outs[i - 1] };
            g = self.mapping[i].backward(input, &g, batch, grads.as_deref_mut().map(|gr| &mut gr.mapping[i]));
        }

        // Param Subnet
        relu_backward(&pass.fused, &mut g);
        let g_concat = self
            .fuse_fc
            .backward(&pass.concat, &g, batch, grads.as_deref_mut().map(|gr| &mut gr.fuse_fc));
        let mut g_sim_h = Vec::with_capacity(batch * h);
        let mut g_vis_h = Vec::with_capacity(batch * h);
        for b in 0..batch {
            g_sim_h.extend_from_slice(&g_concat[b * 2 * h..b * 2 * h + h]);
            g_vis_h.extend_from_slice(&g_concat[b * 2 * h + h..(b + 1) * 2 * h]);
        }
        relu_backward(&pass.sim_h, &mut g_sim_h);
        relu_backward(&pass.vis_h, &mut g_vis_h);
        let sim = self
            .sim_fc
            .backward(&pass.sim_in, &g_sim_h, batch, grads.as_deref_mut().map(|gr| &mut gr.sim_fc));
        let vis = self
            .vis_fc
            .backward(&pass.vis_in, &g_vis_h, batch, grads.map(|gr| &mut gr.vis_fc));
        InputGrads { sim, vis }
    }
}

fn add_into<R: Real>(dst: &mut [R], src: &[R]) {
    debug_assert_eq!(dst.len(), src.len());
    for (d, s) in dst.iter_mut().zip(src) {
        *d += *s;
    }
}
