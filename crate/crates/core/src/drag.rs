//! Drag-based parameter inversion.
//!
//! Each iteration pulls the selected patches' features one small step toward
//! their targets (feature supervision), descends the generator inputs along
//! that loss (parameter inversion), regenerates, and relocates every handle
//! point by nearest-neighbour search in feature space (tracking). The only
//! mutable state is the physical parameter vector: every frame is produced by
//! the generator from it.

use std::io::Write;
use std::path::Path;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::RenderedImage;
use crate::model::{BackwardSeed, FeatureMap, ForwardPass, Generator, Model};
use crate::nn::ops::{bilinear_taps, Resize2d};
use crate::nn::Real;
use crate::patch::{PatchSelection, Pixel};
use crate::synthdata::ParameterVector;

pub const TRAJECTORY_FILE: &str = "trajectory.ndjson";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DisappearanceWindow {
    /// Mean color of the 3×3 neighbourhood (clipped at borders).
    Mean3x3,
    Pixel,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DragConfig {
    /// Tracking radius and reach tolerance, in pixels.
    pub r_m: usize,
    pub disappearance_threshold: f64,
    pub max_iters: usize,
    /// Descent step in normalized parameter space.
    pub step_size: f64,
    /// Which simulation parameters may change; empty means all.
    pub free_mask: Vec<bool>,
    /// Synthesis level used for supervision and tracking; `None` picks the
    /// half-resolution block.
    pub feature_layer: Option<String>,
    pub disappearance_window: DisappearanceWindow,
    /// Grows every patch by this many pixels before supervision.
    pub patch_dilation: usize,
}

impl Default for DragConfig {
    fn default() -> Self {
        Self {
            r_m: 3,
            disappearance_threshold: 0.95,
            max_iters: 200,
            step_size: 2e-3,
            free_mask: Vec::new(),
            feature_layer: None,
            disappearance_window: DisappearanceWindow::Mean3x3,
            patch_dilation: 0,
        }
    }
}

impl DragConfig {
    fn resolved_mask(&self, sim_dim: usize) -> Result<Vec<bool>> {
        let mask = if self.free_mask.is_empty() { vec![true; sim_dim] } else { self.free_mask.clone() };
        if mask.len() != sim_dim {
            return Err(Error::Argument(format!(
                "free mask has {} entries for {sim_dim} simulation parameters",
                mask.len()
            )));
        }
        if !mask.iter().any(|&m| m) {
            return Err(Error::Argument("at least one parameter must be free".into()));
        }
        Ok(mask)
    }

    pub fn validate(&self) -> Result<()> {
        if self.r_m < 1 || self.max_iters < 1 {
            return Err(Error::Argument("r_m and max_iters must be at least 1".into()));
        }
        if !(self.disappearance_threshold > 0.0 && self.disappearance_threshold <= 1.0) {
            return Err(Error::Argument(format!(
                "disappearance threshold {} not in (0, 1]",
                self.disappearance_threshold
            )));
        }
        if !(self.step_size.is_finite() && self.step_size >= 0.0) {
            return Err(Error::Argument(format!("step size {} must be finite and non-negative", self.step_size)));
        }
        Ok(())
    }

    /// Half-width of the tracking search square.
    pub fn search_half_width(&self) -> i64 {
        ((self.r_m / 2) as i64).max(1)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DragStatus {
    Running,
    Reached,
    Disappeared,
    MaxItersExhausted,
    Aborted,
}

impl DragStatus {
    pub fn is_terminal(self) -> bool {
        self != DragStatus::Running
    }
}

/// One line of the exported trajectory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRecord {
    pub step: usize,
    /// Physical values, simulation parameters first.
    pub theta: Vec<f64>,
    pub points: Vec<Pixel>,
    /// Feature-supervision loss minimized by the step that produced this
    /// record (at step 0: the loss at the starting parameters).
    pub loss: f64,
    pub status: DragStatus,
    pub image: String,
}

pub fn frame_name(step: usize) -> String {
    format!("frame_{step:04}.png")
}

/// `(g − p) / ‖g − p‖₁`.
pub fn direction(p: Pixel, g: Pixel) -> Result<[f64; 2]> {
    let d = [(g[0] - p[0]) as f64, (g[1] - p[1]) as f64];
    let l1 = d[0].abs() + d[1].abs();
    if l1 == 0.0 {
        return Err(Error::Argument("handle already at its target".into()));
    }
    Ok([d[0] / l1, d[1] / l1])
}

/// Patch pixels moved with the handle (`q + p − p⁰`), optionally dilated,
/// restricted to the image and sorted row-major.
pub fn supervised_points(sel: &PatchSelection, dilation: usize, width: usize, height: usize) -> Vec<Pixel> {
    let p0 = sel.initial();
    let (sx, sy) = (sel.seed[0] - p0[0], sel.seed[1] - p0[1]);
    let d = dilation as i64;
    let mut pts: Vec<Pixel> = Vec::with_capacity(sel.pixels.len());
    for q in &sel.pixels {
        for dy in -d..=d {
            for dx in -d..=d {
                if dx * dx + dy * dy > d * d {
                    continue;
                }
                let p = [q[0] + sx + dx, q[1] + sy + dy];
                if p[0] >= 0 && p[1] >= 0 && (p[0] as usize) < width && (p[1] as usize) < height {
                    pts.push(p);
                }
            }
        }
    }
    pts.sort_by_key(|p| (p[1], p[0]));
    pts.dedup();
    pts
}

/// `Σ_i Σ_q ‖F(q) − F(q + v_i)‖₁` over active selections whose handle is not
/// at its target. `F(q)` is treated as a constant; out-of-bounds samples are
/// dropped. Returns the gradient with respect to `map` when asked.
pub fn ms_loss<R: Real>(
    map: &[R],
    channels: usize,
    height: usize,
    width: usize,
    selections: &[PatchSelection],
    dilation: usize,
    with_grad: bool,
) -> (f64, Option<Vec<R>>) {
    ms_loss_with_reference(map, map, channels, height, width, selections, dilation, with_grad)
}

/// As [`ms_loss`], but the constant `F(q)` terms are read from `reference`.
#[allow(clippy::too_many_arguments)]
pub fn ms_loss_with_reference<R: Real>(
    map: &[R],
    reference: &[R],
    channels: usize,
    height: usize,
    width: usize,
    selections: &[PatchSelection],
    dilation: usize,
    with_grad: bool,
) -> (f64, Option<Vec<R>>) {
    let hw = height * width;
    let mut loss = 0.0;
    let mut grad = with_grad.then(|| vec![R::zero(); map.len()]);
    for sel in selections.iter().filter(|s| s.active && s.seed != s.target) {
        let v = direction(sel.seed, sel.target).expect("seed differs from target");
        for q in supervised_points(sel, dilation, width, height) {
            let (x, y) = (q[0] as f64 + v[0], q[1] as f64 + v[1]);
            let Some(taps) = bilinear_taps(height, width, x, y) else { continue };
            let qi = q[1] as usize * width + q[0] as usize;
            for c in 0..channels {
                let plane = &map[c * hw..(c + 1) * hw];
                let sampled: f64 = taps.iter().map(|&(i, wt)| plane[i].f64() * wt).sum();
                let diff = sampled - reference[c * hw + qi].f64();
                loss += diff.abs();
                if let Some(g) = grad.as_mut() {
                    let s = if diff > 0.0 {
                        1.0
                    } else if diff < 0.0 {
                        -1.0
                    } else {
                        0.0
                    };
                    for &(i, wt) in &taps {
                        g[c * hw + i] += R::lit(s * wt);
                    }
                }
            }
        }
    }
    (loss, grad)
}

pub fn feature_supervision_loss(map: &FeatureMap, selections: &[PatchSelection], dilation: usize) -> f64 {
    ms_loss(&map.data, map.channels, map.height, map.width, selections, dilation, false).0
}

/// Feature-supervision loss at a forward pass and its gradient with respect
/// to the normalized simulation inputs (batch of one).
pub fn ms_gradient<R: Real>(
    generator: &Generator<R>,
    pass: &ForwardPass<R>,
    level: usize,
    selections: &[PatchSelection],
    dilation: usize,
) -> (f64, Vec<R>) {
    let cfg = &generator.config;
    let (r, out) = (cfg.level_resolution(level), cfg.resolution);
    let c = cfg.channels()[level];
    let resize = Resize2d::new(r, r, out, out);
    let map = resize.forward(pass.level_output(level), c);
    let (loss, g_map) = ms_loss(&map, c, out, out, selections, dilation, true);
    let g_level = resize.backward(&g_map.expect("gradient requested"), c);
    let gin = generator.backward(pass, &BackwardSeed { image: None, levels: vec![(level, &g_level)] }, None);
    (loss, gin.sim)
}

/// Nearest feature match to `F₀(p⁰)` inside the search square around the
/// current handle. Ties: closest to the previous point, then row-major.
/// Returns `None` when the square has no in-image pixel.
pub fn track_point(f0: &FeatureMap, f: &FeatureMap, sel: &PatchSelection, half_width: i64) -> Option<Pixel> {
    let p0 = sel.initial();
    let reference = f0.at(p0[0] as usize, p0[1] as usize);
    let p = sel.seed;
    let mut best: Option<(f64, i64, Pixel)> = None;
    for y in p[1] - half_width..=p[1] + half_width {
        for x in p[0] - half_width..=p[0] + half_width {
            if x < 0 || y < 0 || x as usize >= f.width || y as usize >= f.height {
                continue;
            }
            let cand = f.at(x as usize, y as usize);
            let dist: f64 = cand.iter().zip(&reference).map(|(a, b)| (*a as f64 - *b as f64).abs()).sum();
            let d2 = (x - p[0]).pow(2) + (y - p[1]).pow(2);
            let better = match best {
                None => true,
                Some((bd, bd2, _)) => dist < bd || (dist == bd && d2 < bd2),
            };
            if better {
                best = Some((dist, d2, [x, y]));
            }
        }
    }
    best.map(|(_, _, q)| q)
}

fn window_color(img: &RenderedImage, p: Pixel, window: DisappearanceWindow) -> [f64; 3] {
    let r = match window {
        DisappearanceWindow::Mean3x3 => 1,
        DisappearanceWindow::Pixel => 0,
    };
    let mut acc = [0.0; 3];
    let mut n = 0.0;
    for y in p[1] - r..=p[1] + r {
        for x in p[0] - r..=p[0] + r {
            if x < 0 || y < 0 || x as usize >= img.width || y as usize >= img.height {
                continue;
            }
            let c = img.pixel(x as usize, y as usize);
            for k in 0..3 {
                acc[k] += c[k] as f64;
            }
            n += 1.0;
        }
    }
    acc.map(|v| v / n)
}

/// Squared RGB distance between the handle's current color and its initial color.
pub fn disappearance(i0: &RenderedImage, current: &RenderedImage, sel: &PatchSelection, window: DisappearanceWindow) -> f64 {
    let a = window_color(current, sel.seed, window);
    let b = window_color(i0, sel.initial(), window);
    (0..3).map(|k| (a[k] - b[k]).powi(2)).sum()
}

/// `1 − sqrt(D / 3)`: 1 for identical colors, 0 for black against white.
pub fn color_similarity(d: f64) -> f64 {
    1.0 - (d / 3.0).sqrt()
}

pub struct DragSession {
    model: Arc<Model>,
    config: DragConfig,
    mask: Vec<bool>,
    level: usize,
    theta: ParameterVector,
    theta_initial: ParameterVector,
    image0: RenderedImage,
    feat0: FeatureMap,
    selections: Vec<PatchSelection>,
    /// Selections terminated by the disappearance test.
    vanished: Vec<bool>,
    pass: ForwardPass<f32>,
    feat: FeatureMap,
    image: RenderedImage,
    step: usize,
    status: DragStatus,
    trajectory: Vec<TrajectoryRecord>,
    frames: Vec<RenderedImage>,
}

impl DragSession {
    pub fn new(model: Arc<Model>, theta: ParameterVector, selections: Vec<PatchSelection>, config: DragConfig) -> Result<Self> {
        config.validate()?;
        model.spec.check(&theta)?;
        let mask = config.resolved_mask(model.spec.sim_dim())?;
        let layer = config.feature_layer.clone().unwrap_or_else(|| model.config().default_feature_layer());
        let level = model.config().level_of(&layer)?;
        if selections.is_empty() {
            return Err(Error::Argument("at least one selection is required".into()));
        }
        let res = model.resolution();
        let mut selections = selections;
        for s in &mut selections {
            s.validate(res, res)?;
            if s.initial_seed.is_none() {
                s.initial_seed = Some(s.seed);
            }
            if !s.pixels.contains(&s.seed) {
                s.pixels.push(s.seed);
                s.pixels.sort_by_key(|q| (q[1], q[0]));
            }
        }
        let pass = model.forward(std::slice::from_ref(&theta))?;
        let image = model.image_from(&pass, 0);
        let feat = model.feature_from(&pass, level, 0).resized(res, res);
        let loss = feature_supervision_loss(&feat, &selections, config.patch_dilation);
        let n = selections.len();
        let mut session = Self {
            model,
            config,
            mask,
            level,
            theta_initial: theta.clone(),
            theta,
            image0: image.clone(),
            feat0: feat.clone(),
            selections,
            vanished: vec![false; n],
            pass,
            feat,
            image: image.clone(),
            step: 0,
            status: DragStatus::Running,
            trajectory: Vec::new(),
            frames: vec![image],
        };
        session.status = session.classify();
        session.push_record(loss);
        Ok(session)
    }

    fn reached(&self) -> bool {
        let r = self.config.r_m as f64;
        self.selections
            .iter()
            .filter(|s| s.active)
            .all(|s| (((s.seed[0] - s.target[0]).pow(2) + (s.seed[1] - s.target[1]).pow(2)) as f64).sqrt() <= r)
    }

    fn classify(&self) -> DragStatus {
        if self.selections.iter().all(|s| !s.active) {
            DragStatus::Disappeared
        } else if self.reached() {
            DragStatus::Reached
        } else if self.step >= self.config.max_iters {
            DragStatus::MaxItersExhausted
        } else {
            DragStatus::Running
        }
    }

    fn push_record(&mut self, loss: f64) {
        self.trajectory.push(TrajectoryRecord {
            step: self.step,
            theta: self.theta.values().collect(),
            points: self.selections.iter().map(|s| s.seed).collect(),
            loss,
            status: self.status,
            image: frame_name(self.step),
        });
    }

    /// Loss and gradient with respect to every normalized simulation
    /// parameter at the current state (the mask is not applied).
    pub fn loss_and_gradient(&self) -> (f64, Vec<f64>) {
        let (loss, g) = ms_gradient(&self.model.generator, &self.pass, self.level, &self.selections, self.config.patch_dilation);
        (loss, g.iter().map(|v| *v as f64).collect())
    }

    /// One supervision → inversion → tracking → disappearance iteration.
    pub fn step(&mut self) -> Result<&TrajectoryRecord> {
        if self.status.is_terminal() {
            return Err(Error::Argument(format!("session already finished ({:?})", self.status)));
        }
        let (loss, grad) = self.loss_and_gradient();
        if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            self.status = DragStatus::Aborted;
            self.step += 1;
            self.frames.push(self.image.clone());
            self.push_record(loss);
            return Err(Error::Data(format!("non-finite drag gradient at step {}", self.step)));
        }

        let spec = &self.model.spec;
        for (i, def) in spec.sim.iter().enumerate() {
            if !self.mask[i] {
                continue;
            }
            let t = def.normalize(self.theta.sim[i]);
            let t_new = (t - self.config.step_size * grad[i]).clamp(0.0, 1.0);
            if t_new != t {
                self.theta.sim[i] = def.denormalize(t_new);
            }
        }

        self.pass = self.model.forward(std::slice::from_ref(&self.theta))?;
        self.image = self.model.image_from(&self.pass, 0);
        let res = self.model.resolution();
        self.feat = self.model.feature_from(&self.pass, self.level, 0).resized(res, res);

        let hw = self.config.search_half_width();
        for (k, sel) in self.selections.iter_mut().enumerate() {
            if !sel.active {
                continue;
            }
            match track_point(&self.feat0, &self.feat, sel, hw) {
                Some(p) => sel.seed = p,
                None => sel.active = false,
            }
            if sel.active {
                let d = disappearance(&self.image0, &self.image, sel, self.config.disappearance_window);
                if color_similarity(d) < self.config.disappearance_threshold {
                    sel.active = false;
                    self.vanished[k] = true;
                }
            }
        }
        self.step += 1;
        self.status = self.classify();
        self.frames.push(self.image.clone());
        self.push_record(loss);
        Ok(self.trajectory.last().unwrap())
    }

    /// Iterates until a terminal status, calling `observer` after every step.
    /// Setting `cancel` aborts the session before the next step.
    pub fn run(&mut self, cancel: Option<&AtomicBool>, mut observer: impl FnMut(&TrajectoryRecord, &RenderedImage)) -> Result<DragStatus> {
        while !self.status.is_terminal() {
            if cancel.is_some_and(|c| c.load(Ordering::SeqCst)) {
                self.abort();
                break;
            }
            let result = self.step().map(|_| ());
            if let Err(e) = result {
                if self.status == DragStatus::Aborted {
                    observer(self.trajectory.last().unwrap(), self.frames.last().unwrap());
                }
                return Err(e);
            }
            observer(self.trajectory.last().unwrap(), self.frames.last().unwrap());
        }
        Ok(self.status)
    }

    /// Stops a running session; the last record is re-labelled as aborted.
    pub fn abort(&mut self) {
        if !self.status.is_terminal() {
            self.status = DragStatus::Aborted;
            if let Some(last) = self.trajectory.last_mut() {
                last.status = DragStatus::Aborted;
            }
        }
    }

    pub fn status(&self) -> DragStatus {
        self.status
    }

    pub fn step_count(&self) -> usize {
        self.step
    }

    pub fn theta(&self) -> &ParameterVector {
        &self.theta
    }

    pub fn theta_initial(&self) -> &ParameterVector {
        &self.theta_initial
    }

    pub fn selections(&self) -> &[PatchSelection] {
        &self.selections
    }

    /// Which selections ended through the disappearance test.
    pub fn vanished(&self) -> &[bool] {
        &self.vanished
    }

    pub fn trajectory(&self) -> &[TrajectoryRecord] {
        &self.trajectory
    }

    /// Frame `k` is the generator output at `trajectory()[k].theta`.
    pub fn frames(&self) -> &[RenderedImage] {
        &self.frames
    }

    pub fn current_image(&self) -> &RenderedImage {
        &self.image
    }

    pub fn initial_features(&self) -> &FeatureMap {
        &self.feat0
    }

    pub fn current_features(&self) -> &FeatureMap {
        &self.feat
    }

    pub fn config(&self) -> &DragConfig {
        &self.config
    }

    pub fn model(&self) -> &Arc<Model> {
        &self.model
    }

    /// Writes `trajectory.ndjson` and one PNG per frame into `dir`.
    pub fn export(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(TRAJECTORY_FILE);
        let mut out = Vec::new();
        for rec in &self.trajectory {
            serde_json::to_writer(&mut out, rec)?;
            out.push(b'\n');
        }
        std::fs::File::create(&path)
            .and_then(|mut f| f.write_all(&out))
            .map_err(|e| Error::io(&path, e))?;
        for (rec, frame) in self.trajectory.iter().zip(&self.frames) {
            frame.save_png(&dir.join(&rec.image))?;
        }
        Ok(())
    }
}

/// Runs a drag to completion.
pub fn run_drag(model: Arc<Model>, theta: ParameterVector, selections: Vec<PatchSelection>, config: DragConfig) -> Result<DragSession> {
    let mut session = DragSession::new(model, theta, selections, config)?;
    match session.run(None, |_, _| {}) {
        Ok(_) => Ok(session),
        Err(_) if session.status() == DragStatus::Aborted => Ok(session),
        Err(e) => Err(e),
    }
}
