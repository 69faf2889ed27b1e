//! Analytic stand-in simulation, its colormap renderer, and dataset manifests.
//!
//! The default field family is a background plane plus two isotropic
//! Gaussian bumps. With normalized simulation parameters `(c, a, s)`
//! (position, strength, spread, each mapped affinely from its physical range
//! to `[0, 1]`), the field on pixel coordinates `u = x/R`, `v = y/R` is
//!
//! ```text
//! f(u, v) = b0 + b1·v
//!         + A(a) · exp(-((u - uA(c))² + (v - vA)²) / (2σ(s)²))
//!         + ρ·A(a) · exp(-((u - uB(c))² + (v - vB)²) / (2σ(s)²))
//! uA(c) = lo + (hi - lo)·c,  uB(c) = 1 - uA(c),  A(a) = amp·a,  σ(s) = σ0 + (σ1 - σ0)·s
//! ```
//!
//! The constants live in [`FieldModel`]. Both bumps sit on the center column
//! when `c = 0.5` and the field is the background plane when `a = 0`.

mod dataset;

use serde::{Deserialize, Serialize};

pub use crate::image::RenderedImage;
use crate::error::{Error, Result};
use crate::image::check_resolution;

pub use dataset::{
    build_dataset, load_manifest, write_manifest, DatasetManifest, DatasetPlan, ManifestEntry, Sampling, Split, MANIFEST_FILE,
};

/// One named parameter with its physical range.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamDef {
    pub name: String,
    pub min: f64,
    pub max: f64,
}

impl ParamDef {
    pub fn new(name: impl Into<String>, min: f64, max: f64) -> Self {
        Self { name: name.into(), min, max }
    }

    pub fn normalize(&self, v: f64) -> f64 {
        (v - self.min) / (self.max - self.min)
    }

    /// Physical value for a normalized one, clamped to the declared range when
    /// the normalized value lies in `[0, 1]`.
    pub fn denormalize(&self, t: f64) -> f64 {
        let v = self.min + t * (self.max - self.min);
        if (0.0..=1.0).contains(&t) {
            v.clamp(self.min, self.max)
        } else {
            v
        }
    }

    pub fn contains(&self, v: f64) -> bool {
        v >= self.min && v <= self.max
    }
}

/// Names and physical ranges of the simulation (`sim`) and visualization
/// (`vis`) parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParameterSpec {
    pub sim: Vec<ParamDef>,
    pub vis: Vec<ParamDef>,
}

impl ParameterSpec {
    pub fn new(sim: Vec<ParamDef>, vis: Vec<ParamDef>) -> Result<Self> {
        let spec = Self { sim, vis };
        spec.validate()?;
        Ok(spec)
    }

    /// The three-parameter synthetic family plus one colormap offset.
    pub fn synthetic() -> Self {
        Self {
            sim: vec![
                ParamDef::new("position", -20.0, 20.0),
                ParamDef::new("strength", 0.0, 5.0),
                ParamDef::new("spread", 1.0, 3.0),
            ],
            vis: vec![ParamDef::new("offset", -0.2, 0.2)],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.sim.is_empty() || self.vis.is_empty() {
            return Err(Error::Schema(
                "at least one simulation and one visualization parameter are required".into(),
            ));
        }
        let mut seen = std::collections::HashSet::new();
        for p in self.sim.iter().chain(&self.vis) {
            if !(p.min.is_finite() && p.max.is_finite() && p.min < p.max) {
                return Err(Error::Schema(format!(
                    "parameter `{}` has invalid range [{}, {}]",
                    p.name, p.min, p.max
                )));
            }
            if !seen.insert(p.name.as_str()) {
                return Err(Error::Schema(format!("duplicate parameter name `{}`", p.name)));
            }
        }
        Ok(())
    }

    pub fn sim_dim(&self) -> usize {
        self.sim.len()
    }

    pub fn vis_dim(&self) -> usize {
        self.vis.len()
    }

    pub fn all(&self) -> impl Iterator<Item = &ParamDef> {
        self.sim.iter().chain(&self.vis)
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.all().position(|p| p.name == name)
    }

    fn check_dims(&self, params: &ParameterVector) -> Result<()> {
        if params.sim.len() != self.sim.len() || params.vis.len() != self.vis.len() {
            return Err(Error::Shape(format!(
                "expected {} sim + {} vis values, got {} + {}",
                self.sim.len(),
                self.vis.len(),
                params.sim.len(),
                params.vis.len()
            )));
        }
        Ok(())
    }

    /// Dimension and range check; the error names the first offending parameter.
    pub fn check(&self, params: &ParameterVector) -> Result<()> {
        self.check_dims(params)?;
        for (def, v) in self.all().zip(params.values()) {
            if !v.is_finite() || !def.contains(v) {
                return Err(Error::OutOfRange {
                    name: def.name.clone(),
                    value: v,
                    min: def.min,
                    max: def.max,
                });
            }
        }
        Ok(())
    }

    /// Every out-of-range parameter, for validation messages.
    pub fn violations(&self, params: &ParameterVector) -> Vec<String> {
        self.all()
            .zip(params.values())
            .filter(|(d, v)| !v.is_finite() || !d.contains(*v))
            .map(|(d, _)| d.name.clone())
            .collect()
    }

    /// Affine map of every parameter to `[0, 1]`. Does not range-check, so
    /// out-of-range probes map outside the unit interval.
    pub fn normalize(&self, params: &ParameterVector) -> Result<NormalizedParams> {
        self.check_dims(params)?;
        Ok(NormalizedParams {
            sim: self.sim.iter().zip(&params.sim).map(|(d, &v)| d.normalize(v)).collect(),
            vis: self.vis.iter().zip(&params.vis).map(|(d, &v)| d.normalize(v)).collect(),
        })
    }

    pub fn denormalize(&self, norm: &NormalizedParams) -> ParameterVector {
        ParameterVector {
            sim: self.sim.iter().zip(&norm.sim).map(|(d, &t)| d.denormalize(t)).collect(),
            vis: self.vis.iter().zip(&norm.vis).map(|(d, &t)| d.denormalize(t)).collect(),
        }
    }

    /// The parameter vector at the middle of every range.
    pub fn midpoint(&self) -> ParameterVector {
        ParameterVector {
            sim: self.sim.iter().map(|d| 0.5 * (d.min + d.max)).collect(),
            vis: self.vis.iter().map(|d| 0.5 * (d.min + d.max)).collect(),
        }
    }
}

/// Physical parameter values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParameterVector {
    pub sim: Vec<f64>,
    pub vis: Vec<f64>,
}

impl ParameterVector {
    pub fn new(sim: Vec<f64>, vis: Vec<f64>) -> Self {
        Self { sim, vis }
    }

    pub fn values(&self) -> impl Iterator<Item = f64> + '_ {
        self.sim.iter().chain(&self.vis).copied()
    }

    pub fn len(&self) -> usize {
        self.sim.len() + self.vis.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn get(&self, i: usize) -> f64 {
        if i < self.sim.len() {
            self.sim[i]
        } else {
            self.vis[i - self.sim.len()]
        }
    }

    pub fn set(&mut self, i: usize, v: f64) {
        let m = self.sim.len();
        if i < m {
            self.sim[i] = v;
        } else {
            self.vis[i - m] = v;
        }
    }
}

/// Parameters mapped to `[0, 1]` by their declared ranges.
#[derive(Clone, Debug, PartialEq)]
pub struct NormalizedParams {
    pub sim: Vec<f64>,
    pub vis: Vec<f64>,
}

/// A scalar field sampled on an `R×R` grid over the unit square.
#[derive(Clone, Debug, PartialEq)]
pub struct ScalarField {
    pub size: usize,
    /// Row-major `size × size`.
    pub values: Vec<f64>,
    /// Physical bounding box `[x0, y0, x1, y1]`.
    pub extent: [f64; 4],
}

impl ScalarField {
    pub fn constant(size: usize, value: f64) -> Self {
        Self {
            size,
            values: vec![value; size * size],
            extent: [0.0, 0.0, 1.0, 1.0],
        }
    }

    pub fn at(&self, x: usize, y: usize) -> f64 {
        self.values[y * self.size + x]
    }
}

/// Constants of the analytic field family (see the module docs).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FieldModel {
    pub background: f64,
    pub background_slope: f64,
    pub center_lo: f64,
    pub center_hi: f64,
    pub row_a: f64,
    pub row_b: f64,
    pub amplitude: f64,
    pub ratio_b: f64,
    pub sigma_lo: f64,
    pub sigma_hi: f64,
}

impl Default for FieldModel {
    fn default() -> Self {
        Self {
            background: 0.1,
            background_slope: 0.1,
            center_lo: 0.1,
            center_hi: 0.9,
            row_a: 0.35,
            row_b: 0.65,
            amplitude: 1.0,
            ratio_b: 0.6,
            sigma_lo: 0.04,
            sigma_hi: 0.12,
        }
    }
}

impl FieldModel {
    /// Horizontal center of the primary bump in unit coordinates.
    pub fn center_u(&self, c: f64) -> f64 {
        self.center_lo + (self.center_hi - self.center_lo) * c
    }

    /// Field from normalized `(position, strength, spread)`.
    pub fn evaluate(&self, c: f64, a: f64, s: f64, size: usize) -> ScalarField {
        let ua = self.center_u(c);
        let ub = 1.0 - ua;
        let amp = self.amplitude * a;
        let sigma = self.sigma_lo + (self.sigma_hi - self.sigma_lo) * s;
        let inv = 1.0 / (2.0 * sigma * sigma);
        let mut values = Vec::with_capacity(size * size);
        for y in 0..size {
            let v = y as f64 / size as f64;
            for x in 0..size {
                let u = x as f64 / size as f64;
                let da = (u - ua).powi(2) + (v - self.row_a).powi(2);
                let db = (u - ub).powi(2) + (v - self.row_b).powi(2);
                let f = self.background
                    + self.background_slope * v
                    + amp * (-da * inv).exp()
                    + self.ratio_b * amp * (-db * inv).exp();
                values.push(f);
            }
        }
        ScalarField {
            size,
            values,
            extent: [0.0, 0.0, 1.0, 1.0],
        }
    }
}

/// Evaluates the stand-in simulation for in-range parameters.
pub fn synth_field(spec: &ParameterSpec, params: &ParameterVector, resolution: usize, model: &FieldModel) -> Result<ScalarField> {
    spec.check(params)?;
    check_resolution(resolution)?;
    if spec.sim_dim() != 3 {
        return Err(Error::Argument(format!(
            "the analytic field family takes 3 simulation parameters, spec declares {}",
            spec.sim_dim()
        )));
    }
    let n = spec.normalize(params)?;
    Ok(model.evaluate(n.sim[0], n.sim[1], n.sim[2], resolution))
}

/// Piecewise-linear RGB transfer function over `[0, 1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Colormap {
    /// `(position, rgb)` stops with strictly increasing positions from 0 to 1.
    pub stops: Vec<(f64, [f64; 3])>,
}

impl Default for Colormap {
    fn default() -> Self {
        Self {
            stops: vec![
                (0.0, [0.05, 0.05, 0.35]),
                (0.25, [0.10, 0.45, 0.85]),
                (0.5, [0.30, 0.80, 0.55]),
                (0.75, [0.95, 0.85, 0.25]),
                (1.0, [0.85, 0.15, 0.10]),
            ],
        }
    }
}

impl Colormap {
    pub fn first(&self) -> [f64; 3] {
        self.stops[0].1
    }

    pub fn last(&self) -> [f64; 3] {
        self.stops[self.stops.len() - 1].1
    }

    pub fn map(&self, t: f64) -> [f64; 3] {
        let t = t.clamp(0.0, 1.0);
        let seg = self
            .stops
            .windows(2)
            .position(|w| t <= w[1].0)
            .unwrap_or(self.stops.len() - 2);
        let (t0, c0) = self.stops[seg];
        let (t1, c1) = self.stops[seg + 1];
        let f = (t - t0) / (t1 - t0);
        [0, 1, 2].map(|i| c0[i] + f * (c1[i] - c0[i]))
    }
}

/// Colormaps `field + offset` (the single visualization parameter).
pub fn render(field: &ScalarField, vis: &[f64], colormap: &Colormap) -> Result<RenderedImage> {
    if let Some(v) = field.values.iter().find(|v| !v.is_finite()) {
        return Err(Error::Data(format!("field value {v} is not finite")));
    }
    let offset = vis.first().copied().unwrap_or(0.0);
    let n = field.size;
    let hw = n * n;
    let mut data = vec![0.0f32; 3 * hw];
    for (i, &f) in field.values.iter().enumerate() {
        let rgb = colormap.map(f + offset);
        for c in 0..3 {
            data[c * hw + i] = rgb[c] as f32;
        }
    }
    Ok(RenderedImage {
        width: n,
        height: n,
        data,
    })
}

/// `synth_field` followed by `render`.
pub fn simulate(spec: &ParameterSpec, params: &ParameterVector, resolution: usize, model: &FieldModel, colormap: &Colormap) -> Result<RenderedImage> {
    let field = synth_field(spec, params, resolution, model)?;
    render(&field, &params.vis, colormap)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec() -> ParameterSpec {
        ParameterSpec::synthetic()
    }

    #[test]
    fn zero_amplitude_is_background_plane() {
        let model = FieldModel::default();
        let p = ParameterVector::new(vec![7.0, 0.0, 2.5], vec![0.0]);
        let f = synth_field(&spec(), &p, 16, &model).unwrap();
        for y in 0..16 {
            for x in 0..16 {
                let plane = model.background + model.background_slope * (y as f64 / 16.0);
                assert_eq!(f.at(x, y), plane);
            }
        }
    }

    #[test]
    fn midpoint_position_puts_maximum_on_center_column() {
        let p = ParameterVector::new(vec![0.0, 4.0, 2.0], vec![0.0]);
        for res in [16, 32, 64] {
            let f = synth_field(&spec(), &p, res, &FieldModel::default()).unwrap();
            let (argmax, _) = f
                .values
                .iter()
                .enumerate()
                .fold((0, f64::MIN), |acc, (i, &v)| if v > acc.1 { (i, v) } else { acc });
            assert_eq!(argmax % res, res / 2);
        }
    }

    #[test]
    fn out_of_range_parameter_is_named() {
        let p = ParameterVector::new(vec![0.0, 9.0, 2.0], vec![0.0]);
        match synth_field(&spec(), &p, 16, &FieldModel::default()) {
            Err(Error::OutOfRange { name, .. }) => assert_eq!(name, "strength"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn rejects_bad_resolution() {
        let p = spec().midpoint();
        assert!(matches!(
            synth_field(&spec(), &p, 48, &FieldModel::default()),
            Err(Error::Argument(_))
        ));
    }

    #[test]
    fn constant_fields_hit_colormap_ends() {
        let cm = Colormap::default();
        let lo = render(&ScalarField::constant(8, 0.0), &[0.0], &cm).unwrap();
        let hi = render(&ScalarField::constant(8, 1.0), &[0.0], &cm).unwrap();
        for y in 0..8 {
            for x in 0..8 {
                assert_eq!(lo.pixel(x, y), cm.first().map(|v| v as f32));
                assert_eq!(hi.pixel(x, y), cm.last().map(|v| v as f32));
            }
        }
    }

    #[test]
    fn render_is_monotone_within_each_segment() {
        let cm = Colormap::default();
        for seg in cm.stops.windows(2) {
            let (t0, t1) = (seg[0].0, seg[1].0);
            let ramp: Vec<f64> = (0..=50).map(|i| t0 + (t1 - t0) * i as f64 / 50.0).collect();
            for c in 0..3 {
                let vals: Vec<f64> = ramp.iter().map(|&t| cm.map(t)[c]).collect();
                let up = vals.windows(2).all(|w| w[1] >= w[0]);
                let down = vals.windows(2).all(|w| w[1] <= w[0]);
                assert!(up || down, "channel {c} not monotone on [{t0}, {t1}]");
            }
        }
    }

    #[test]
    fn non_finite_field_is_rejected() {
        let mut f = ScalarField::constant(8, 0.5);
        f.values[3] = f64::NAN;
        assert!(matches!(render(&f, &[0.0], &Colormap::default()), Err(Error::Data(_))));
    }

    #[test]
    fn spec_validation() {
        assert!(ParameterSpec::new(vec![], vec![ParamDef::new("o", 0.0, 1.0)]).is_err());
        assert!(ParameterSpec::new(vec![ParamDef::new("a", 1.0, 1.0)], vec![ParamDef::new("o", 0.0, 1.0)]).is_err());
        assert!(ParameterSpec::new(vec![ParamDef::new("a", 0.0, 1.0)], vec![ParamDef::new("a", 0.0, 1.0)]).is_err());
        assert!(ParameterSpec::new(vec![ParamDef::new("a", 0.0, 1.0)], vec![ParamDef::new("b", 0.0, 1.0)]).is_ok());
    }

    #[test]
    fn denormalize_stays_in_range_at_unit_endpoints() {
        let d = ParamDef::new("x", 0.1, 0.7);
        assert_eq!(d.denormalize(1.0), 0.7);
        assert_eq!(d.denormalize(0.0), 0.1);
        assert!(d.denormalize(1.5) > 0.7);
    }
}
