//! Training objectives with gradients with respect to rendered quantities.
//!
//! Ray losses are summed over the batch. The patch terms average over
//! patches. Each function returns `(value, gradient)` so the trainer can feed
//! the gradient into [`crate::render::render_backward`].

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub color: f64,
    pub depth: f64,
    pub reg: f64,
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if [self.color, self.depth, self.reg].iter().all(|w| *w >= 0.0) {
            Ok(())
        } else {
            Err(Error::ConfigInvalid(format!("loss weights must be nonnegative: {self:?}")))
        }
    }
}

/// Unweighted loss terms; `None` for terms that are not active.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub color: Option<f64>,
    pub depth: Option<f64>,
    pub reg: Option<f64>,
}

pub fn total_loss(parts: &LossParts, weights: &LossWeights) -> f64 {
    weights.color * parts.color.unwrap_or(0.0) + weights.depth * parts.depth.unwrap_or(0.0) + weights.reg * parts.reg.unwrap_or(0.0)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundLConfig {
    /// Width of the Gaussian weight target around the prior depth, meters.
    pub gaussian_sigma: f64,
}

impl Default for BoundLConfig {
    fn default() -> Self {
        BoundLConfig { gaussian_sigma: 0.001 }
    }
}

impl BoundLConfig {
    /// Width at which the targets of samples `spacing` apart sum to about
    /// one, the weight mass of a single opaque surface.
    pub fn unit_mass(spacing: f64) -> Self {
        BoundLConfig {
            gaussian_sigma: spacing / (2.0 * std::f64::consts::PI).sqrt(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.gaussian_sigma > 0.0 {
            Ok(())
        } else {
            Err(Error::ConfigInvalid("gaussian_sigma must be positive".into()))
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GuideKind {
    Depth,
    Rgb,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FilterConfig {
    pub kernel: usize,
    /// Spatial Gaussian sigma, pixels.
    pub sigma_space: f64,
    /// Range Gaussian sigma in guide units (meters or [0, 1] rgb).
    pub sigma_range: f64,
    pub guide: GuideKind,
}

impl Default for FilterConfig {
    fn default() -> Self {
        FilterConfig {
            kernel: 9,
            sigma_space: 75.0,
            sigma_range: 10.0,
            guide: GuideKind::Depth,
        }
    }
}

impl FilterConfig {
    pub fn validate(&self) -> Result<()> {
        if self.kernel < 3 || self.kernel % 2 == 0 {
            return Err(Error::ConfigInvalid(format!("filter kernel {} must be odd and >= 3", self.kernel)));
        }
        if !(self.sigma_space > 0.0 && self.sigma_range > 0.0) {
            return Err(Error::ConfigInvalid("filter sigmas must be positive".into()));
        }
        Ok(())
    }
}

pub fn color_loss(rendered: &[[f64; 3]], truth: &[[f64; 3]]) -> Result<(f64, Vec<[f64; 3]>)> {
    if rendered.len() != truth.len() {
        return Err(Error::CountMismatch(rendered.len(), truth.len()));
    }
    let mut value = 0.0;
    let grad = rendered
        .iter()
        .zip(truth)
        .map(|(r, t)| {
            let d = [r[0] - t[0], r[1] - t[1], r[2] - t[2]];
            value += d[0] * d[0] + d[1] * d[1] + d[2] * d[2];
            [2.0 * d[0], 2.0 * d[1], 2.0 * d[2]]
        })
        .collect();
    Ok((value, grad))
}

pub fn depth_mse_loss(rendered: &[f64], prior: &[f64], mask: &[bool]) -> Result<(f64, Vec<f64>)> {
    if rendered.len() != prior.len() || rendered.len() != mask.len() {
        return Err(Error::CountMismatch(rendered.len(), prior.len().min(mask.len())));
    }
    let mut value = 0.0;
    let grad = (0..rendered.len())
        .map(|i| {
            if !mask[i] {
                return 0.0;
            }
            let d = rendered[i] - prior[i];
            value += d * d;
            2.0 * d
        })
        .collect();
    Ok((value, grad))
}

/// Gaussian weight target centered on the prior depth.
pub fn bound_targets<'a>(t: &'a [f64], prior: f64, cfg: &BoundLConfig) -> impl Iterator<Item = f64> + 'a {
    let s2 = 2.0 * cfg.gaussian_sigma * cfg.gaussian_sigma;
    t.iter().map(move |ti| (-(ti - prior).powi(2) / s2).exp())
}

/// Boundary loss of a single ray and its gradient with respect to the weights.
pub fn bound_loss_ray(t: &[f64], weights: &[f64], prior: f64, cfg: &BoundLConfig) -> (f64, Vec<f64>) {
    let mut value = 0.0;
    let grad = weights
        .iter()
        .zip(bound_targets(t, prior, cfg))
        .map(|(w, g)| {
            let d = w - g;
            value += d * d;
            2.0 * d
        })
        .collect();
    (value, grad)
}

/// Sum of [`bound_loss_ray`] over masked rays; unmasked rays get empty gradients.
pub fn bound_loss(rays: &[(&[f64], &[f64])], prior: &[f64], mask: &[bool], cfg: &BoundLConfig) -> Result<(f64, Vec<Vec<f64>>)> {
    if rays.len() != prior.len() || rays.len() != mask.len() {
        return Err(Error::CountMismatch(rays.len(), prior.len().min(mask.len())));
    }
    let mut value = 0.0;
    let mut grads = Vec::with_capacity(rays.len());
    for (i, (t, w)) in rays.iter().enumerate() {
        if t.len() != w.len() {
            return Err(Error::CountMismatch(t.len(), w.len()));
        }
        if mask[i] {
            let (v, g) = bound_loss_ray(t, w, prior[i], cfg);
            value += v;
            grads.push(g);
        } else {
            grads.push(Vec::new());
        }
    }
    Ok((value, grads))
}

#[derive(Clone, Copy, Debug)]
pub enum Guide<'a> {
    Depth(&'a [f64]),
    Rgb(&'a [[f64; 3]]),
}

impl Guide<'_> {
    fn len(&self) -> usize {
        match self {
            Guide::Depth(d) => d.len(),
            Guide::Rgb(c) => c.len(),
        }
    }

    fn distance_sq(&self, a: usize, b: usize) -> f64 {
        match self {
            Guide::Depth(d) => (d[a] - d[b]).powi(2),
            Guide::Rgb(c) => (0..3).map(|k| (c[a][k] - c[b][k]).powi(2)).sum(),
        }
    }
}

/// Edge-preserving smoothing of a `width x height` depth image.
///
/// Each output is the normalized sum over a `kernel x kernel` window, clipped
/// at the image border, weighted by a spatial Gaussian on pixel distance and
/// a range Gaussian on guide difference. Guiding by the depth itself gives
/// the plain bilateral filter, guiding by rgb the joint bilateral filter.
pub fn bilateral_filter(depth: &[f64], guide: Guide, width: usize, height: usize, cfg: &FilterConfig) -> Result<Vec<f64>> {
    cfg.validate()?;
    if depth.len() != width * height || guide.len() != depth.len() {
        return Err(Error::DimensionMismatch(format!(
            "patch {}x{} with {} depths and {} guide values",
            width,
            height,
            depth.len(),
            guide.len()
        )));
    }
    let r = (cfg.kernel / 2) as isize;
    let inv_s = 1.0 / (2.0 * cfg.sigma_space * cfg.sigma_space);
    let inv_r = 1.0 / (2.0 * cfg.sigma_range * cfg.sigma_range);
    let mut out = vec![0.0; depth.len()];
    for y in 0..height as isize {
        for x in 0..width as isize {
            let q = (y as usize) * width + x as usize;
            let (mut num, mut den) = (0.0, 0.0);
            for ky in (y - r).max(0)..=(y + r).min(height as isize - 1) {
                for kx in (x - r).max(0)..=(x + r).min(width as isize - 1) {
                    let k = (ky as usize) * width + kx as usize;
                    let ds = ((kx - x).pow(2) + (ky - y).pow(2)) as f64;
                    let w = (-ds * inv_s - guide.distance_sq(q, k) * inv_r).exp();
                    num += w * (depth[k] - depth[q]);
                    den += w;
                }
            }
            // Offsets from the center value keep constant regions exact.
            out[q] = depth[q] + num / den;
        }
    }
    Ok(out)
}

/// A square patch of rendered depth and color.
#[derive(Clone, Debug, PartialEq)]
pub struct Patch {
    pub depth: Vec<f64>,
    pub rgb: Vec<[f64; 3]>,
    /// (view index, left, top) in the source image.
    pub origin: (usize, usize, usize),
}

#[derive(Clone, Debug, PartialEq)]
pub struct PatchBatch {
    pub size: usize,
    pub patches: Vec<Patch>,
}

impl PatchBatch {
    fn check(&self) -> Result<()> {
        if self.patches.is_empty() {
            return Err(Error::EmptyBatch);
        }
        let n = self.size * self.size;
        for p in &self.patches {
            if p.depth.len() != n || p.rgb.len() != n {
                return Err(Error::DimensionMismatch(format!(
                    "patch of size {} holds {} depths",
                    self.size,
                    p.depth.len()
                )));
            }
        }
        Ok(())
    }
}

/// Mean over patches of the per-pixel MSE between the rendered depth and
/// its filtered version. The filtered patch is a fixed target.
pub fn patch_reg_loss(batch: &PatchBatch, cfg: &FilterConfig) -> Result<(f64, Vec<Vec<f64>>)> {
    batch.check()?;
    let s = batch.size;
    let scale = 1.0 / (batch.patches.len() * s * s) as f64;
    let mut value = 0.0;
    let mut grads = Vec::with_capacity(batch.patches.len());
    for p in &batch.patches {
        let guide = match cfg.guide {
            GuideKind::Depth => Guide::Depth(&p.depth),
            GuideKind::Rgb => Guide::Rgb(&p.rgb),
        };
        let target = bilateral_filter(&p.depth, guide, s, s, cfg)?;
        let mut g = Vec::with_capacity(s * s);
        for (d, f) in p.depth.iter().zip(&target) {
            value += (d - f).powi(2) * scale;
            g.push(2.0 * (d - f) * scale);
        }
        grads.push(g);
    }
    Ok((value, grads))
}

/// Mean over patches of summed squared differences between horizontally
/// and vertically adjacent depths.
pub fn regnerf_patch_loss(batch: &PatchBatch) -> Result<(f64, Vec<Vec<f64>>)> {
    batch.check()?;
    let s = batch.size;
    if s < 2 {
        return Err(Error::TooSmall(format!("patch size {s}")));
    }
    let scale = 1.0 / batch.patches.len() as f64;
    let mut value = 0.0;
    let mut grads = Vec::with_capacity(batch.patches.len());
    for p in &batch.patches {
        let mut g = vec![0.0; s * s];
        let d = &p.depth;
        for y in 0..s {
            for x in 0..s {
                let a = y * s + x;
                for b in [(x + 1 < s).then_some(a + 1), (y + 1 < s).then_some(a + s)].into_iter().flatten() {
                    let diff = d[a] - d[b];
                    value += diff * diff * scale;
                    g[a] += 2.0 * diff * scale;
                    g[b] -= 2.0 * diff * scale;
                }
            }
        }
        grads.push(g);
    }
    Ok((value, grads))
}
