//! Optimization loop for the voxel field.
//!
//! Every iteration draws a seeded batch of training rays, renders them,
//! evaluates the active losses, reduces the parameter gradient in ray order
//! and takes one Adam step. Patch modes additionally render whole square
//! patches once the photometric phase is over.

use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::camera::{pixel_to_ray, CameraIntrinsics};
use crate::dataset::{Dataset, Split};
use crate::error::{Error, Result};
use crate::field::{adam_step, cosine_lr, init_field, Aabb, AdamConfig, AdamState, Checkpoint, VoxelField};
use crate::geometry::{Pose, Ray};
use crate::losses::{
    bound_loss_ray, color_loss, depth_mse_loss, patch_reg_loss, regnerf_patch_loss, total_loss, BoundLConfig, FilterConfig, GuideKind,
    LossParts, LossWeights, Patch, PatchBatch,
};
use crate::render::{render_backward, trace_ray, RenderUpstream, TracedRay};

/// Rays traced together before their gradients are folded into the total.
const CHUNK: usize = 512;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    RgbOnly,
    DepthMse,
    DepthBoundl,
    PatchBilateral,
    PatchJointBilateral,
    PatchRegnerf,
    BoundlPlusJoint,
}

impl TrainMode {
    pub const ALL: [TrainMode; 7] = [
        TrainMode::RgbOnly,
        TrainMode::DepthMse,
        TrainMode::DepthBoundl,
        TrainMode::PatchBilateral,
        TrainMode::PatchJointBilateral,
        TrainMode::PatchRegnerf,
        TrainMode::BoundlPlusJoint,
    ];

    pub fn name(self) -> &'static str {
        match self {
            TrainMode::RgbOnly => "rgb_only",
            TrainMode::DepthMse => "depth_mse",
            TrainMode::DepthBoundl => "depth_boundl",
            TrainMode::PatchBilateral => "patch_bilateral",
            TrainMode::PatchJointBilateral => "patch_joint_bilateral",
            TrainMode::PatchRegnerf => "patch_regnerf",
            TrainMode::BoundlPlusJoint => "boundl_plus_joint",
        }
    }

    pub fn depth_loss(self) -> Option<DepthLoss> {
        match self {
            TrainMode::DepthMse => Some(DepthLoss::Mse),
            TrainMode::DepthBoundl | TrainMode::BoundlPlusJoint => Some(DepthLoss::Boundary),
            _ => None,
        }
    }

    pub fn patch_loss(self) -> Option<PatchLoss> {
        match self {
            TrainMode::PatchBilateral => Some(PatchLoss::Filter(GuideKind::Depth)),
            TrainMode::PatchJointBilateral | TrainMode::BoundlPlusJoint => Some(PatchLoss::Filter(GuideKind::Rgb)),
            TrainMode::PatchRegnerf => Some(PatchLoss::Smoothness),
            _ => None,
        }
    }

    /// Loss weights used when none are configured.
    pub fn default_weights(self) -> LossWeights {
        match self {
            TrainMode::RgbOnly => LossWeights {
                color: 10.0,
                depth: 0.0,
                reg: 0.0,
            },
            TrainMode::DepthMse | TrainMode::DepthBoundl => LossWeights {
                color: 10.0,
                depth: 10.0,
                reg: 0.0,
            },
            TrainMode::PatchBilateral | TrainMode::PatchJointBilateral | TrainMode::PatchRegnerf => LossWeights {
                color: 1.0,
                depth: 0.0,
                reg: 1e-7,
            },
            TrainMode::BoundlPlusJoint => LossWeights {
                color: 10.0,
                depth: 10.0,
                reg: 1e-7,
            },
        }
    }
}

impl fmt::Display for TrainMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TrainMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        TrainMode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::ConfigInvalid(format!("unknown training mode {s:?}")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DepthLoss {
    Mse,
    Boundary,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PatchLoss {
    Filter(GuideKind),
    Smoothness,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub mode: TrainMode,
    pub iterations: usize,
    pub rays_per_batch: usize,
    pub patches_per_batch: usize,
    pub patch_size: usize,
    pub weights: LossWeights,
    pub boundl: BoundLConfig,
    pub filter: FilterConfig,
    pub lr_start: f64,
    pub lr_end: f64,
    pub seed: u64,
    pub resolution: [usize; 3],
    pub samples_per_ray: usize,
    pub near: f64,
    /// Defaults to the room diagonal.
    pub far: Option<f64>,
    /// Fraction of the room extent added around the room shell.
    pub bbox_margin: f64,
    /// First iteration with patch regularization; defaults to 60% of the run.
    pub phase_switch: Option<usize>,
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::for_mode(TrainMode::RgbOnly)
    }
}

impl TrainConfig {
    pub fn for_mode(mode: TrainMode) -> Self {
        TrainConfig {
            mode,
            iterations: 2000,
            rays_per_batch: 4096,
            patches_per_batch: 4,
            patch_size: 16,
            weights: mode.default_weights(),
            boundl: BoundLConfig::default(),
            filter: FilterConfig {
                guide: match mode.patch_loss() {
                    Some(PatchLoss::Filter(g)) => g,
                    _ => GuideKind::Depth,
                },
                ..FilterConfig::default()
            },
            lr_start: 5e-2,
            lr_end: 5e-3,
            seed: 0,
            resolution: [64; 3],
            samples_per_ray: 128,
            near: 0.05,
            far: None,
            bbox_margin: 0.05,
            phase_switch: None,
            log_every: 100,
        }
    }

    pub fn phase_switch(&self) -> usize {
        self.phase_switch.unwrap_or_else(|| (self.iterations as f64 * 0.6).round() as usize)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::ConfigInvalid(m));
        if self.iterations == 0 || self.rays_per_batch == 0 {
            return bad("iterations and rays_per_batch must be positive".into());
        }
        if self.mode.patch_loss().is_some() && (self.patches_per_batch == 0 || self.patch_size < 2) {
            return bad(format!("{} needs patches_per_batch > 0 and patch_size >= 2", self.mode));
        }
        if self.samples_per_ray < 2 || self.resolution.iter().any(|&n| n < 2) {
            return bad("need >= 2 samples per ray and resolution >= 2".into());
        }
        if !(self.lr_start > 0.0 && self.lr_end > 0.0) {
            return bad("learning rates must be positive".into());
        }
        if self.log_every == 0 {
            return bad("log_every must be positive".into());
        }
        self.weights.validate()?;
        self.boundl.validate()?;
        if self.mode.patch_loss().is_some() {
            self.filter.validate()?;
        }
        Ok(())
    }

    /// Regularization weight in effect at `iteration`.
    pub fn reg_weight(&self, iteration: usize) -> f64 {
        if self.mode.patch_loss().is_some() && iteration >= self.phase_switch() {
            self.weights.reg
        } else {
            0.0
        }
    }
}

/// One training view: camera, color, and optional depth prior (0 = none).
#[derive(Clone, Debug)]
pub struct TrainView {
    pub intrinsics: CameraIntrinsics,
    pub pose: Pose,
    pub rgb: Vec<[f64; 3]>,
    pub prior: Option<Vec<f64>>,
}

#[derive(Clone, Debug)]
pub struct TrainData {
    pub views: Vec<TrainView>,
    /// Room width, depth, height.
    pub room: [f64; 3],
}

impl TrainData {
    pub fn from_dataset(ds: &Dataset) -> Self {
        let views = ds
            .split_indices(Split::Train)
            .into_iter()
            .map(|i| TrainView {
                intrinsics: ds.views[i].intrinsics,
                pose: ds.views[i].pose,
                rgb: ds.views[i].rgb.clone(),
                prior: ds.priors[i].clone(),
            })
            .collect();
        TrainData {
            views,
            room: ds.manifest.meta.room,
        }
    }

    pub fn pixel_count(&self) -> usize {
        self.views.iter().map(|v| v.rgb.len()).sum()
    }

    pub fn has_priors(&self) -> bool {
        !self.views.is_empty() && self.views.iter().all(|v| v.prior.is_some())
    }

    fn locate(&self, mut flat: usize) -> (usize, usize) {
        for (vi, v) in self.views.iter().enumerate() {
            if flat < v.rgb.len() {
                return (vi, flat);
            }
            flat -= v.rgb.len();
        }
        unreachable!("pixel index out of range")
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RayBatch {
    pub rays: Vec<Ray>,
    pub rgb: Vec<[f64; 3]>,
    pub prior: Vec<f64>,
    pub mask: Vec<bool>,
    /// (view, pixel) of each ray.
    pub pixels: Vec<(usize, usize)>,
}

/// Uniform draw over all training pixels.
pub fn sample_ray_batch(data: &TrainData, count: usize, rng: &mut ChaCha8Rng) -> Result<RayBatch> {
    let total = data.pixel_count();
    if total == 0 {
        return Err(Error::EmptyBatch);
    }
    let mut batch = RayBatch {
        rays: Vec::with_capacity(count),
        rgb: Vec::with_capacity(count),
        prior: Vec::with_capacity(count),
        mask: Vec::with_capacity(count),
        pixels: Vec::with_capacity(count),
    };
    for _ in 0..count {
        let (vi, pi) = data.locate(rng.gen_range(0..total));
        let v = &data.views[vi];
        let w = v.intrinsics.width;
        batch.rays.push(pixel_to_ray(&v.intrinsics, &v.pose, pi % w, pi / w)?);
        batch.rgb.push(v.rgb[pi]);
        let d = v.prior.as_ref().map_or(0.0, |p| p[pi]);
        batch.prior.push(d);
        batch.mask.push(d > 0.0);
        batch.pixels.push((vi, pi));
    }
    Ok(batch)
}

/// Top-left corners `(view, x, y)` of `count` patches of side `size`.
pub fn sample_patch_batch(data: &TrainData, count: usize, size: usize, rng: &mut ChaCha8Rng) -> Result<Vec<(usize, usize, usize)>> {
    if data.views.is_empty() {
        return Err(Error::EmptyBatch);
    }
    for v in &data.views {
        if v.intrinsics.width < size || v.intrinsics.height < size {
            return Err(Error::TooSmall(format!(
                "{}x{} image for {size}x{size} patches",
                v.intrinsics.width, v.intrinsics.height
            )));
        }
    }
    Ok((0..count)
        .map(|_| {
            let vi = rng.gen_range(0..data.views.len());
            let intr = &data.views[vi].intrinsics;
            (vi, rng.gen_range(0..=intr.width - size), rng.gen_range(0..=intr.height - size))
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub iteration: usize,
    /// Batch loss terms divided by the number of rays in the batch; the
    /// patch term is already a mean over patches.
    pub color: Option<f64>,
    pub depth: Option<f64>,
    pub reg: Option<f64>,
    /// Weighted sum of the logged terms with the weights in effect.
    pub total: f64,
    pub lr: f64,
    pub reg_weight: f64,
    pub seconds: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub records: Vec<LogRecord>,
}

impl TrainLog {
    /// One JSON object per line.
    pub fn write_jsonl(&self, w: &mut impl Write) -> Result<()> {
        for r in &self.records {
            serde_json::to_writer(&mut *w, r)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_jsonl(&mut f)?;
        f.flush()?;
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub log: TrainLog,
}

/// Field box for a room `[width, depth, height]` under this config.
pub fn field_bbox(room: [f64; 3], cfg: &TrainConfig) -> Aabb {
    Aabb::room(room, cfg.bbox_margin)
}

/// Configured far plane, or the room diagonal.
pub fn far_plane(room: [f64; 3], cfg: &TrainConfig) -> f64 {
    cfg.far.unwrap_or_else(|| room.iter().map(|x| x * x).sum::<f64>().sqrt())
}

struct RayResult {
    traced: TracedRay,
    color: f64,
    depth: f64,
    upstream_color: [f64; 3],
    upstream_depth: f64,
    upstream_weights: Option<Vec<f64>>,
}

/// Called after each iteration's update with the iteration count done so far.
pub type Observer<'a> = &'a mut dyn FnMut(usize, &VoxelField);

pub fn train(data: &TrainData, cfg: &TrainConfig) -> Result<TrainOutcome> {
    train_observed(data, cfg, None)
}

pub fn train_observed(data: &TrainData, cfg: &TrainConfig, mut observer: Option<Observer>) -> Result<TrainOutcome> {
    cfg.validate()?;
    let depth_loss = cfg.mode.depth_loss();
    if depth_loss.is_some() && !data.has_priors() {
        return Err(Error::MissingPriors);
    }
    if data.pixel_count() == 0 {
        return Err(Error::EmptyBatch);
    }
    let bbox = field_bbox(data.room, cfg);
    let far = far_plane(data.room, cfg);
    let n = cfg.samples_per_ray;
    let mut field = init_field(cfg.resolution, bbox, cfg.seed)?;
    let mut adam = AdamState::new(field.params().len(), AdamConfig::default());
    let mut grad = field.zero_gradient();
    // Independent streams so that enabling patches never shifts the ray draws.
    let mut ray_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    ray_rng.set_stream(1);
    let mut patch_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    patch_rng.set_stream(2);
    let mut log = TrainLog::default();
    let start = Instant::now();

    for it in 0..cfg.iterations {
        let lr = cosine_lr(cfg.lr_start, cfg.lr_end, it, cfg.iterations);
        let reg_weight = cfg.reg_weight(it);
        grad.iter_mut().for_each(|g| *g = 0.0);

        let batch = sample_ray_batch(data, cfg.rays_per_batch, &mut ray_rng)?;
        let seeds: Vec<u64> = (0..batch.rays.len()).map(|_| ray_rng.gen()).collect();
        let (mut color_sum, mut depth_sum) = (0.0, 0.0);
        for start_idx in (0..batch.rays.len()).step_by(CHUNK) {
            let end = (start_idx + CHUNK).min(batch.rays.len());
            let results: Vec<RayResult> = (start_idx..end)
                .into_par_iter()
                .map(|i| -> Result<RayResult> {
                    let mut jitter = ChaCha8Rng::seed_from_u64(seeds[i]);
                    let traced = trace_ray(&field, &batch.rays[i], cfg.near, far, n, Some(&mut jitter))?;
                    let (color, cgrad) = color_loss(&[traced.output.color], &[batch.rgb[i]])?;
                    let upstream_color = cgrad[0].map(|g| g * cfg.weights.color);
                    let (mut depth, mut upstream_depth, mut upstream_weights) = (0.0, 0.0, None);
                    match depth_loss {
                        Some(DepthLoss::Mse) => {
                            let (v, g) = depth_mse_loss(&[traced.output.depth], &[batch.prior[i]], &[batch.mask[i]])?;
                            depth = v;
                            upstream_depth = g[0] * cfg.weights.depth;
                        }
                        Some(DepthLoss::Boundary) if batch.mask[i] => {
                            let (v, g) = bound_loss_ray(&traced.samples.t, &traced.weights.weights, batch.prior[i], &cfg.boundl);
                            depth = v;
                            upstream_weights = Some(g.into_iter().map(|x| x * cfg.weights.depth).collect());
                        }
                        _ => {}
                    }
                    Ok(RayResult {
                        traced,
                        color,
                        depth,
                        upstream_color,
                        upstream_depth,
                        upstream_weights,
                    })
                })
                .collect::<Result<_>>()?;
            let sample_grads: Vec<_> = results
                .par_iter()
                .map(|r| {
                    let up = RenderUpstream {
                        color: r.upstream_color,
                        depth: r.upstream_depth,
                        weights: r.upstream_weights.as_deref(),
                    };
                    render_backward(&r.traced.samples, &r.traced.weights, &up)
                })
                .collect();
            for (r, g) in results.iter().zip(&sample_grads) {
                color_sum += r.color;
                depth_sum += r.depth;
                r.traced.accumulate(g, &mut grad);
            }
        }

        let mut reg_value = None;
        if let Some(kind) = cfg.mode.patch_loss() {
            if reg_weight > 0.0 {
                reg_value = Some(patch_step(data, cfg, kind, &field, far, reg_weight, &mut patch_rng, &mut grad)?);
            }
        }

        adam_step(field.params_mut(), &grad, &mut adam, lr)?;

        let done = it + 1;
        if done % cfg.log_every == 0 || done == cfg.iterations {
            let rays = batch.rays.len() as f64;
            let parts = LossParts {
                color: Some(color_sum / rays),
                depth: depth_loss.map(|_| depth_sum / rays),
                reg: reg_value,
            };
            let weights = LossWeights {
                reg: reg_weight,
                ..cfg.weights
            };
            log.records.push(LogRecord {
                iteration: done,
                color: parts.color,
                depth: parts.depth,
                reg: parts.reg,
                total: total_loss(&parts, &weights),
                lr,
                reg_weight,
                seconds: start.elapsed().as_secs_f64(),
            });
        }
        if let Some(obs) = observer.as_mut() {
            obs(done, &field);
        }
    }
    Ok(TrainOutcome {
        checkpoint: Checkpoint {
            field,
            adam,
            iteration: cfg.iterations as u64,
        },
        log,
    })
}

/// Renders a batch of patches, evaluates the patch loss and folds its
/// weighted gradient into `grad`. Returns the unweighted loss.
#[allow(clippy::too_many_arguments)]
fn patch_step(
    data: &TrainData,
    cfg: &TrainConfig,
    kind: PatchLoss,
    field: &VoxelField,
    far: f64,
    reg_weight: f64,
    rng: &mut ChaCha8Rng,
    grad: &mut [f64],
) -> Result<f64> {
    let s = cfg.patch_size;
    let corners = sample_patch_batch(data, cfg.patches_per_batch, s, rng)?;
    let seeds: Vec<u64> = (0..corners.len() * s * s).map(|_| rng.gen()).collect();
    let mut traced: Vec<Vec<TracedRay>> = Vec::with_capacity(corners.len());
    for (pi, &(vi, x0, y0)) in corners.iter().enumerate() {
        let v = &data.views[vi];
        let rays: Vec<TracedRay> = (0..s * s)
            .into_par_iter()
            .map(|k| {
                let ray = pixel_to_ray(&v.intrinsics, &v.pose, x0 + k % s, y0 + k / s)?;
                let mut jitter = ChaCha8Rng::seed_from_u64(seeds[pi * s * s + k]);
                trace_ray(field, &ray, cfg.near, far, cfg.samples_per_ray, Some(&mut jitter))
            })
            .collect::<Result<_>>()?;
        traced.push(rays);
    }
    let batch = PatchBatch {
        size: s,
        patches: traced
            .iter()
            .zip(&corners)
            .map(|(rays, &origin)| Patch {
                depth: rays.iter().map(|r| r.output.depth).collect(),
                rgb: rays.iter().map(|r| r.output.color).collect(),
                origin,
            })
            .collect(),
    };
    let (value, grads) = match kind {
        PatchLoss::Filter(guide) => patch_reg_loss(&batch, &FilterConfig { guide, ..cfg.filter })?,
        PatchLoss::Smoothness => regnerf_patch_loss(&batch)?,
    };
    for (rays, g) in traced.iter().zip(&grads) {
        let sample_grads: Vec<_> = rays
            .par_iter()
            .zip(g)
            .map(|(r, &gd)| {
                let up = RenderUpstream {
                    depth: gd * reg_weight,
                    ..Default::default()
                };
                render_backward(&r.samples, &r.weights, &up)
            })
            .collect();
        for (r, sg) in rays.iter().zip(&sample_grads) {
            r.accumulate(sg, grad);
        }
    }
    Ok(value)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::camera::intrinsics_from_fov;
    use crate::geometry::Vec3;
    use crate::scene::{build_scene, render_view};

    fn tiny_data(with_priors: bool) -> TrainData {
        let scene = build_scene("empty_room", 0).unwrap();
        let intr = intrinsics_from_fov(20, 24, 60.0, 70.0).unwrap();
        let views = (0..4)
            .map(|k| {
                let pose = Pose::from_yaw_pitch(Vec3::new(0.3, -0.2, 1.5), k as f64 * 1.57, -0.1);
                let v = render_view(&scene, &intr, &pose).unwrap();
                TrainView {
                    intrinsics: intr,
                    pose,
                    rgb: v.rgb,
                    prior: with_priors.then(|| v.depth.clone()),
                }
            })
            .collect();
        TrainData {
            views,
            room: [6.0, 8.0, 3.8],
        }
    }

    fn quick(mode: TrainMode) -> TrainConfig {
        TrainConfig {
            iterations: 10,
            rays_per_batch: 64,
            patches_per_batch: 2,
            patch_size: 4,
            resolution: [8, 8, 6],
            samples_per_ray: 24,
            log_every: 2,
            ..TrainConfig::for_mode(mode)
        }
    }

    #[test]
    fn mode_names_round_trip() {
        for m in TrainMode::ALL {
            assert_eq!(m.name().parse::<TrainMode>().unwrap(), m);
            assert_eq!(serde_json::to_string(&m).unwrap(), format!("\"{}\"", m.name()));
        }
        assert!("rgb".parse::<TrainMode>().is_err());
    }

    #[test]
    fn rgb_only_logs_color_only() {
        let out = train(&tiny_data(false), &quick(TrainMode::RgbOnly)).unwrap();
        assert_eq!(out.log.records.len(), 5);
        for r in &out.log.records {
            assert!(r.color.is_some() && r.depth.is_none() && r.reg.is_none());
        }
        let iters: Vec<usize> = out.log.records.iter().map(|r| r.iteration).collect();
        assert_eq!(iters, vec![2, 4, 6, 8, 10]);
    }

    #[test]
    fn depth_modes_need_priors() {
        assert!(matches!(
            train(&tiny_data(false), &quick(TrainMode::DepthBoundl)),
            Err(Error::MissingPriors)
        ));
    }

    #[test]
    fn deterministic_checkpoints() {
        let data = tiny_data(true);
        for mode in [TrainMode::DepthBoundl, TrainMode::PatchJointBilateral] {
            let a = train(&data, &quick(mode)).unwrap();
            let b = train(&data, &quick(mode)).unwrap();
            assert_eq!(a.checkpoint, b.checkpoint);
        }
    }

    #[test]
    fn zero_weights_reduce_to_rgb_only() {
        let data = tiny_data(true);
        let base = train(&data, &quick(TrainMode::RgbOnly)).unwrap();
        for mode in [
            TrainMode::DepthMse,
            TrainMode::DepthBoundl,
            TrainMode::PatchBilateral,
            TrainMode::BoundlPlusJoint,
        ] {
            let cfg = TrainConfig {
                weights: LossWeights {
                    depth: 0.0,
                    reg: 0.0,
                    ..TrainMode::RgbOnly.default_weights()
                },
                ..quick(mode)
            };
            let other = train(&data, &cfg).unwrap();
            assert_eq!(other.checkpoint.field, base.checkpoint.field, "{mode}");
        }
    }

    #[test]
    fn reg_schedule_and_total() {
        let cfg = quick(TrainMode::PatchRegnerf);
        let out = train(&tiny_data(false), &cfg).unwrap();
        assert_eq!(cfg.phase_switch(), 6);
        for r in &out.log.records {
            let active = r.iteration - 1 >= 6;
            assert_eq!(r.reg_weight, if active { cfg.weights.reg } else { 0.0 });
            assert_eq!(r.reg.is_some(), active);
            let parts = LossParts {
                color: r.color,
                depth: r.depth,
                reg: r.reg,
            };
            let w = LossWeights {
                reg: r.reg_weight,
                ..cfg.weights
            };
            assert!((total_loss(&parts, &w) - r.total).abs() < 1e-9);
        }
    }

    #[test]
    fn batch_sampling() {
        let data = tiny_data(true);
        let mut a = ChaCha8Rng::seed_from_u64(1);
        let mut b = ChaCha8Rng::seed_from_u64(1);
        let x = sample_ray_batch(&data, 300, &mut a).unwrap();
        let y = sample_ray_batch(&data, 300, &mut b).unwrap();
        assert_eq!(x, y);
        assert_eq!(x.rays.len(), 300);
        assert!(x.mask.iter().all(|m| *m));

        let corners = sample_patch_batch(&data, 500, 16, &mut a).unwrap();
        for (v, x0, y0) in corners {
            assert!(v < 4 && x0 <= 4 && y0 <= 8);
        }
        assert!(matches!(sample_patch_batch(&data, 1, 2048, &mut a), Err(Error::TooSmall(_))));
    }

    #[test]
    fn log_is_line_delimited() {
        let out = train(&tiny_data(false), &quick(TrainMode::RgbOnly)).unwrap();
        let mut buf = Vec::new();
        out.log.write_jsonl(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), out.log.records.len());
        let first: LogRecord = serde_json::from_str(text.lines().next().unwrap()).unwrap();
        assert_eq!(first, out.log.records[0]);
    }
}
