//! Dense depth priors for floor, ceiling and wall pixels.
//!
//! Floor and ceiling come from known planes: `z = 0` and `z = room_height`
//! when the world frame is calibrated, otherwise from the plane through the
//! camera centers shifted by the camera height. Wall planes are fitted to
//! the seams where wall pixels meet floor or ceiling pixels, each seam pixel
//! pair lifted onto the floor/ceiling plane. Every architectural pixel then
//! gets the Euclidean distance from its ray origin to its plane.
//!
//! Two wall estimators are provided. [`compute_prior_map`] works on one view
//! at a time (one plane per wall component). [`compute_dataset_priors`]
//! pools the seams of every view, which averages out pixel quantization and
//! gives one plane per physical wall.

use std::collections::VecDeque;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::camera::{pixel_to_ray, subpixel_ray, CameraIntrinsics};
use crate::error::{Error, Result};
use crate::geometry::{
    fit_plane_least_squares, parallel_plane_at_distance, plane_from_three_points, ray_plane_intersect, Plane, Pose, Ray, Vec3,
};
use crate::scene::SurfaceClass;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CalibrationMode {
    /// World frame has the floor at z = 0 and +z up.
    Calibrated,
    /// Only camera centers (at a constant height) are known.
    Uncalibrated,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CalibrationInput {
    pub mode: CalibrationMode,
    pub room_height: f64,
    pub camera_height: f64,
    pub camera_positions: Vec<Vec3>,
}

impl CalibrationInput {
    pub fn calibrated(room_height: f64) -> Self {
        CalibrationInput {
            mode: CalibrationMode::Calibrated,
            room_height,
            camera_height: 0.0,
            camera_positions: Vec::new(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.room_height > 0.0) {
            return Err(Error::ConfigInvalid("room height must be positive".into()));
        }
        if self.mode == CalibrationMode::Uncalibrated {
            if !(self.room_height > self.camera_height && self.camera_height > 0.0) {
                return Err(Error::ConfigInvalid(
                    "need room_height > camera_height > 0 without calibration".into(),
                ));
            }
            if self.camera_positions.len() < 3 {
                return Err(Error::ConfigInvalid("need at least three camera positions".into()));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WallFitConfig {
    /// Components whose plane fit has a larger RMS residual are rejected, meters.
    pub max_residual: f64,
    /// Largest allowed |normal . up| for a wall plane.
    pub max_normal_up: f64,
    /// Border point sets thinner than this across the seam direction are
    /// treated as a single seam line, meters.
    pub min_spread: f64,
    /// Inlier band for seam line extraction, meters.
    pub line_tolerance: f64,
    /// Fewest seam samples that make a wall line.
    pub min_line_support: usize,
    /// Samples this close to another wall's line are left out of the
    /// bracket refinement, meters.
    pub corner_margin: f64,
    pub ransac_iterations: usize,
    pub seed: u64,
}

impl Default for WallFitConfig {
    fn default() -> Self {
        WallFitConfig {
            max_residual: 0.02,
            max_normal_up: 0.5,
            min_spread: 0.05,
            line_tolerance: 0.05,
            min_line_support: 8,
            corner_margin: 0.15,
            ransac_iterations: 400,
            seed: 0,
        }
    }
}

/// Floor and ceiling planes with `up` pointing from floor to ceiling.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RoomPlanes {
    pub floor: Plane,
    pub ceiling: Plane,
}

impl RoomPlanes {
    pub fn up(&self) -> Vec3 {
        let n = self.floor.normal();
        if self.ceiling.offset >= self.floor.offset {
            n
        } else {
            -n
        }
    }

    /// Height of `p` above the floor along `up`.
    pub fn height_of(&self, p: &Vec3) -> f64 {
        let s = self.floor.signed_distance(p);
        if self.ceiling.offset >= self.floor.offset {
            s
        } else {
            -s
        }
    }

    pub fn room_height(&self) -> f64 {
        (self.ceiling.offset - self.floor.offset).abs()
    }
}

pub fn estimate_floor_ceiling_planes(calib: &CalibrationInput, sample_floor_ray: Option<&Ray>) -> Result<RoomPlanes> {
    calib.validate()?;
    match calib.mode {
        CalibrationMode::Calibrated => Ok(RoomPlanes {
            floor: Plane::new(Vec3::z(), 0.0),
            ceiling: Plane::new(Vec3::z(), calib.room_height),
        }),
        CalibrationMode::Uncalibrated => {
            let pts = &calib.camera_positions;
            let cam = if pts.len() == 3 {
                plane_from_three_points(&pts[0], &pts[1], &pts[2])?
            } else {
                fit_plane_least_squares(pts).map_err(|_| Error::Collinear)?.0
            };
            let ray = sample_floor_ray.ok_or(Error::AmbiguousFloor(0))?;
            let below = parallel_plane_at_distance(&cam, -calib.camera_height);
            let above = parallel_plane_at_distance(&cam, calib.camera_height);
            let hits = [below, above].map(|p| ray_plane_intersect(ray, &p).is_some());
            let sign = match hits {
                [true, false] => -1.0,
                [false, true] => 1.0,
                [a, b] => return Err(Error::AmbiguousFloor(a as usize + b as usize)),
            };
            Ok(RoomPlanes {
                floor: parallel_plane_at_distance(&cam, sign * calib.camera_height),
                ceiling: parallel_plane_at_distance(&cam, -sign * (calib.room_height - calib.camera_height)),
            })
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Seam {
    Floor,
    Ceiling,
}

/// One wall pixel meeting a floor or ceiling pixel.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BorderSample {
    pub seam: Seam,
    /// Ray through the midpoint of the shared pixel edge, lifted onto the seam plane.
    pub point: Vec3,
    /// Floor/ceiling pixel center lifted onto the seam plane (room side of the wall).
    pub inner: Vec3,
    /// Wall pixel center lifted onto the seam plane (beyond the wall).
    pub outer: Vec3,
}

#[derive(Clone, Debug, PartialEq)]
pub struct WallComponent {
    /// Row-major pixel indices of the 4-connected wall region.
    pub pixels: Vec<usize>,
    pub samples: Vec<BorderSample>,
    /// Too few seam points to define a plane.
    pub discarded: bool,
}

impl WallComponent {
    pub fn points(&self) -> Vec<Vec3> {
        self.samples.iter().map(|s| s.point).collect()
    }

    pub fn seam_points(&self, seam: Seam) -> impl Iterator<Item = &Vec3> {
        self.samples.iter().filter(move |s| s.seam == seam).map(|s| &s.point)
    }
}

const NEIGHBORS: [(isize, isize); 4] = [(1, 0), (-1, 0), (0, 1), (0, -1)];

fn wall_components(seg: &[SurfaceClass], width: usize, height: usize) -> Vec<Vec<usize>> {
    let mut label = vec![usize::MAX; seg.len()];
    let mut comps = Vec::new();
    for start in 0..seg.len() {
        if seg[start] != SurfaceClass::Wall || label[start] != usize::MAX {
            continue;
        }
        let id = comps.len();
        let mut pixels = Vec::new();
        let mut queue = VecDeque::from([start]);
        label[start] = id;
        while let Some(i) = queue.pop_front() {
            pixels.push(i);
            let (x, y) = ((i % width) as isize, (i / width) as isize);
            for (dx, dy) in NEIGHBORS {
                let (nx, ny) = (x + dx, y + dy);
                if nx < 0 || ny < 0 || nx >= width as isize || ny >= height as isize {
                    continue;
                }
                let j = ny as usize * width + nx as usize;
                if seg[j] == SurfaceClass::Wall && label[j] == usize::MAX {
                    label[j] = id;
                    queue.push_back(j);
                }
            }
        }
        pixels.sort_unstable();
        comps.push(pixels);
    }
    comps
}

pub fn extract_wall_borders(seg: &[SurfaceClass], planes: &RoomPlanes, intr: &CameraIntrinsics, pose: &Pose) -> Result<Vec<WallComponent>> {
    let (w, h) = (intr.width, intr.height);
    if seg.len() != w * h {
        return Err(Error::DimensionMismatch(format!(
            "mask has {} pixels, expected {}",
            seg.len(),
            w * h
        )));
    }
    let lift = |u: f64, v: f64, plane: &Plane| {
        let ray = subpixel_ray(intr, pose, u, v);
        ray_plane_intersect(&ray, plane).map(|t| ray.at(t))
    };
    let mut out = Vec::new();
    for pixels in wall_components(seg, w, h) {
        let mut samples = Vec::new();
        for &i in &pixels {
            let (x, y) = ((i % w) as isize, (i / w) as isize);
            for (dx, dy) in NEIGHBORS {
                let (nx, ny) = (x + dx, y + dy);
                if nx < 0 || ny < 0 || nx >= w as isize || ny >= h as isize {
                    continue;
                }
                let j = ny as usize * w + nx as usize;
                let (seam, plane) = match seg[j] {
                    SurfaceClass::Floor => (Seam::Floor, &planes.floor),
                    SurfaceClass::Ceiling => (Seam::Ceiling, &planes.ceiling),
                    _ => continue,
                };
                let (cx, cy) = (x as f64 + 0.5, y as f64 + 0.5);
                let (qx, qy) = (nx as f64 + 0.5, ny as f64 + 0.5);
                let lifted = (
                    lift((cx + qx) / 2.0, (cy + qy) / 2.0, plane),
                    lift(qx, qy, plane),
                    lift(cx, cy, plane),
                );
                if let (Some(point), Some(inner), Some(outer)) = lifted {
                    samples.push(BorderSample { seam, point, inner, outer });
                }
            }
        }
        let discarded = samples.len() < 3;
        out.push(WallComponent {
            pixels,
            samples,
            discarded,
        });
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum WallFitStatus {
    Accepted,
    /// Fewer than three usable seam points.
    Insufficient,
    /// Points lie along a single line (one seam only).
    Degenerate,
    ResidualTooLarge {
        residual: f64,
    },
    NotVertical {
        normal_up: f64,
    },
}

#[derive(Clone, Debug, PartialEq)]
pub struct WallFit {
    pub plane: Option<Plane>,
    pub residual: f64,
    pub status: WallFitStatus,
}

fn second_spread(points: &[Vec3]) -> f64 {
    let n = points.len() as f64;
    let c = points.iter().fold(Vec3::zeros(), |a, p| a + p) / n;
    let mut cov = crate::geometry::Mat3::zeros();
    for p in points {
        let d = p - c;
        cov += d * d.transpose();
    }
    let mut ev: Vec<f64> = nalgebra::SymmetricEigen::new(cov).eigenvalues.iter().copied().collect();
    ev.sort_by(f64::total_cmp);
    (ev[1].max(0.0) / n).sqrt()
}

/// Least-squares wall plane with one outlier-rejection refit.
///
/// The single worst-residual point is dropped and the plane refitted once;
/// the result is rejected when its RMS residual exceeds `max_residual` or
/// its normal is closer to `up` than `max_normal_up`.
pub fn fit_wall_plane(points: &[Vec3], up: &Vec3, cfg: &WallFitConfig) -> WallFit {
    let reject = |status| WallFit {
        plane: None,
        residual: f64::NAN,
        status,
    };
    if points.len() < 3 {
        return reject(WallFitStatus::Insufficient);
    }
    if second_spread(points) < cfg.min_spread {
        return reject(WallFitStatus::Degenerate);
    }
    let Ok((first, _)) = fit_plane_least_squares(points) else {
        return reject(WallFitStatus::Degenerate);
    };
    let (plane, residual) = if points.len() > 3 {
        let worst = points
            .iter()
            .enumerate()
            .max_by(|a, b| first.signed_distance(a.1).abs().total_cmp(&first.signed_distance(b.1).abs()))
            .map(|(i, _)| i)
            .unwrap();
        let kept: Vec<Vec3> = points.iter().enumerate().filter(|&(i, _)| i != worst).map(|(_, p)| *p).collect();
        match fit_plane_least_squares(&kept) {
            Ok(fit) => fit,
            Err(_) => return reject(WallFitStatus::Degenerate),
        }
    } else {
        fit_plane_least_squares(points).unwrap()
    };
    let normal_up = plane.normal().dot(up).abs();
    if normal_up > cfg.max_normal_up {
        return WallFit {
            plane: None,
            residual,
            status: WallFitStatus::NotVertical { normal_up },
        };
    }
    if residual > cfg.max_residual {
        return WallFit {
            plane: None,
            residual,
            status: WallFitStatus::ResidualTooLarge { residual },
        };
    }
    WallFit {
        plane: Some(plane),
        residual,
        status: WallFitStatus::Accepted,
    }
}

pub fn fit_wall_planes(components: &[WallComponent], up: &Vec3, cfg: &WallFitConfig) -> Vec<WallFit> {
    components
        .iter()
        .map(|c| {
            if c.discarded {
                WallFit {
                    plane: None,
                    residual: f64::NAN,
                    status: WallFitStatus::Insufficient,
                }
            } else {
                fit_wall_plane(&c.points(), up, cfg)
            }
        })
        .collect()
}

/// 2D line `n . p = c` in floor coordinates, `n` unit.
#[derive(Clone, Copy, Debug, PartialEq)]
struct Line2 {
    n: [f64; 2],
    c: f64,
}

impl Line2 {
    fn distance(&self, p: &[f64; 2]) -> f64 {
        self.n[0] * p[0] + self.n[1] * p[1] - self.c
    }
}

/// Orthonormal frame spanning the floor plane.
#[derive(Clone, Copy, Debug)]
struct FloorFrame {
    e1: Vec3,
    e2: Vec3,
}

impl FloorFrame {
    fn new(up: &Vec3) -> Self {
        let helper = if up.x.abs() < 0.9 { Vec3::x() } else { Vec3::y() };
        let e1 = up.cross(&helper).normalize();
        let e2 = up.cross(&e1);
        FloorFrame { e1, e2 }
    }

    fn project(&self, p: &Vec3) -> [f64; 2] {
        [p.dot(&self.e1), p.dot(&self.e2)]
    }

    /// Plane perpendicular to the floor through a floor-coordinate line.
    fn wall_plane(&self, line: &Line2) -> Plane {
        Plane::new(self.e1 * line.n[0] + self.e2 * line.n[1], line.c).canonical()
    }
}

fn tls_line(points: &[[f64; 2]]) -> Option<Line2> {
    if points.len() < 2 {
        return None;
    }
    let n = points.len() as f64;
    let (mx, my) = points.iter().fold((0.0, 0.0), |a, p| (a.0 + p[0], a.1 + p[1]));
    let (mx, my) = (mx / n, my / n);
    let (mut sxx, mut sxy, mut syy) = (0.0, 0.0, 0.0);
    for p in points {
        let (dx, dy) = (p[0] - mx, p[1] - my);
        sxx += dx * dx;
        sxy += dx * dy;
        syy += dy * dy;
    }
    // Direction of largest spread; the normal is perpendicular to it.
    let theta = 0.5 * (2.0 * sxy).atan2(sxx - syy);
    let normal = [-theta.sin(), theta.cos()];
    if !(sxx + syy > 0.0) {
        return None;
    }
    Some(Line2 {
        n: normal,
        c: normal[0] * mx + normal[1] * my,
    })
}

/// Sequential RANSAC: repeatedly takes the line with the most inliers
/// within `tol`, refits it, and removes its inliers.
fn extract_lines(points: &[[f64; 2]], cfg: &WallFitConfig, max_lines: usize) -> Vec<(Line2, Vec<usize>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut remaining: Vec<usize> = (0..points.len()).collect();
    let mut lines = Vec::new();
    while lines.len() < max_lines && remaining.len() >= cfg.min_line_support.max(2) {
        let mut best: Option<(Line2, usize)> = None;
        for _ in 0..cfg.ransac_iterations {
            let a = points[remaining[rng.gen_range(0..remaining.len())]];
            let b = points[remaining[rng.gen_range(0..remaining.len())]];
            let (dx, dy) = (b[0] - a[0], b[1] - a[1]);
            let len = dx.hypot(dy);
            if len < 4.0 * cfg.line_tolerance {
                continue;
            }
            let n = [-dy / len, dx / len];
            let line = Line2 {
                n,
                c: n[0] * a[0] + n[1] * a[1],
            };
            let count = remaining
                .iter()
                .filter(|&&i| line.distance(&points[i]).abs() <= cfg.line_tolerance)
                .count();
            if best.is_none_or(|(_, c)| count > c) {
                best = Some((line, count));
            }
        }
        let Some((mut line, count)) = best else { break };
        if count < cfg.min_line_support {
            break;
        }
        let mut inliers: Vec<usize> = Vec::new();
        for _ in 0..3 {
            inliers = remaining
                .iter()
                .copied()
                .filter(|&i| line.distance(&points[i]).abs() <= cfg.line_tolerance)
                .collect();
            let pts: Vec<[f64; 2]> = inliers.iter().map(|&i| points[i]).collect();
            match tls_line(&pts) {
                Some(l) => line = l,
                None => break,
            }
        }
        if inliers.len() < cfg.min_line_support {
            break;
        }
        remaining.retain(|i| !inliers.contains(i));
        lines.push((line, inliers));
    }
    lines
}

/// Tightens a seam line using the fact that every seam sample's
/// room-side point lies in front of the wall and its wall-side point
/// beyond it. For a normal `n + s t` the feasible offsets form an interval
/// whose width is concave in `s`; the widest interval's center is returned.
fn refine_line_with_brackets(line: Line2, brackets: &[([f64; 2], [f64; 2])]) -> Line2 {
    if brackets.len() < 3 {
        return line;
    }
    let mut line = line;
    let gap: f64 = brackets.iter().map(|(i, o)| line.distance(o) - line.distance(i)).sum();
    if gap < 0.0 {
        line = Line2 {
            n: [-line.n[0], -line.n[1]],
            c: -line.c,
        };
    }
    let t = [-line.n[1], line.n[0]];
    let normal_at = |s: f64| [line.n[0] + s * t[0], line.n[1] + s * t[1]];
    let dot = |n: &[f64; 2], p: &[f64; 2]| n[0] * p[0] + n[1] * p[1];
    let mut active: Vec<&([f64; 2], [f64; 2])> = brackets.iter().collect();
    let bounds = |active: &[&([f64; 2], [f64; 2])], s: f64| {
        let n = normal_at(s);
        let mut lo = (f64::NEG_INFINITY, 0);
        let mut hi = (f64::INFINITY, 0);
        for (k, (inner, outer)) in active.iter().enumerate() {
            let a = dot(&n, inner);
            let b = dot(&n, outer);
            if a > lo.0 {
                lo = (a, k);
            }
            if b < hi.0 {
                hi = (b, k);
            }
        }
        (lo, hi)
    };
    let max_trim = (brackets.len() / 100).max(2);
    for _ in 0..=max_trim {
        let (mut a, mut b) = (-0.05, 0.05);
        for _ in 0..200 {
            let m1 = a + (b - a) / 3.0;
            let m2 = b - (b - a) / 3.0;
            let w1 = {
                let (lo, hi) = bounds(&active, m1);
                hi.0 - lo.0
            };
            let w2 = {
                let (lo, hi) = bounds(&active, m2);
                hi.0 - lo.0
            };
            if w1 < w2 {
                a = m1;
            } else {
                b = m2;
            }
        }
        let s = 0.5 * (a + b);
        let (lo, hi) = bounds(&active, s);
        if hi.0 >= lo.0 {
            // Centroid of the feasible (s, c) region.
            let width = |s: f64| {
                let (lo, hi) = bounds(&active, s);
                hi.0 - lo.0
            };
            let edge = |mut inside: f64, mut outside: f64| {
                for _ in 0..100 {
                    let m = 0.5 * (inside + outside);
                    if width(m) >= 0.0 {
                        inside = m;
                    } else {
                        outside = m;
                    }
                }
                inside
            };
            let (s0, s1) = (edge(s, -0.05), edge(s, 0.05));
            const STEPS: usize = 512;
            let (mut area, mut ms, mut mc) = (0.0, 0.0, 0.0);
            for k in 0..STEPS {
                let sk = s0 + (s1 - s0) * (k as f64 + 0.5) / STEPS as f64;
                let (lo, hi) = bounds(&active, sk);
                let wk = (hi.0 - lo.0).max(0.0);
                area += wk;
                ms += wk * sk;
                mc += wk * 0.5 * (lo.0 + hi.0);
            }
            let (sc, cc) = if area > 0.0 {
                (ms / area, mc / area)
            } else {
                (s, 0.5 * (lo.0 + hi.0))
            };
            let n = normal_at(sc);
            let len = n[0].hypot(n[1]);
            return Line2 {
                n: [n[0] / len, n[1] / len],
                c: cc / len,
            };
        }
        // Infeasible: drop the two binding constraints and retry.
        let (i, j) = (lo.1.max(hi.1), lo.1.min(hi.1));
        active.remove(i);
        if i != j {
            active.remove(j);
        }
        if active.len() < 3 {
            break;
        }
    }
    line
}

/// Per-view wall planes of one component: a single least-squares plane when
/// it passes the checks, otherwise vertical planes through the seam lines.
fn component_planes(comp: &WallComponent, frame: &FloorFrame, up: &Vec3, cfg: &WallFitConfig) -> (Vec<Plane>, WallFit) {
    if comp.discarded {
        return (
            Vec::new(),
            WallFit {
                plane: None,
                residual: f64::NAN,
                status: WallFitStatus::Insufficient,
            },
        );
    }
    let fit = fit_wall_plane(&comp.points(), up, cfg);
    if let Some(p) = fit.plane {
        return (vec![p], fit);
    }
    if matches!(fit.status, WallFitStatus::NotVertical { .. }) {
        return (Vec::new(), fit);
    }
    let pts: Vec<[f64; 2]> = comp.samples.iter().map(|s| frame.project(&s.point)).collect();
    let planes = extract_lines(&pts, cfg, 4)
        .into_iter()
        .map(|(line, _)| frame.wall_plane(&line))
        .collect();
    (planes, fit)
}

/// Nearest plane hit (positive `t`) whose point lies between floor and ceiling.
fn nearest_wall_hit(ray: &Ray, planes: &[Plane], room: &RoomPlanes) -> Option<f64> {
    const HEIGHT_TOL: f64 = 0.05;
    let height = room.room_height();
    planes
        .iter()
        .filter_map(|p| ray_plane_intersect(ray, p))
        .filter(|&t| {
            let h = room.height_of(&ray.at(t));
            (-HEIGHT_TOL..=height + HEIGHT_TOL).contains(&h)
        })
        .min_by(f64::total_cmp)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WallRecord {
    pub pixel_count: usize,
    pub sample_count: usize,
    pub planes: Vec<Plane>,
    pub residual: f64,
    pub status: WallFitStatus,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PriorMap {
    pub width: usize,
    pub height: usize,
    /// Euclidean depth in meters, 0 where absent.
    pub depth: Vec<f64>,
    /// Class that produced each prior; `Other` where absent.
    pub source: Vec<SurfaceClass>,
    pub walls: Vec<WallRecord>,
}

impl PriorMap {
    pub fn get(&self, i: usize) -> Option<f64> {
        (self.depth[i] > 0.0).then_some(self.depth[i])
    }

    pub fn covered(&self) -> usize {
        self.depth.iter().filter(|d| **d > 0.0).count()
    }
}

/// Camera geometry and segmentation of a view; depth is never consulted.
#[derive(Clone, Copy, Debug)]
pub struct ViewGeometry<'a> {
    pub seg: &'a [SurfaceClass],
    pub intrinsics: &'a CameraIntrinsics,
    pub pose: &'a Pose,
}

fn first_floor_ray(view: &ViewGeometry) -> Option<Ray> {
    let w = view.intrinsics.width;
    view.seg
        .iter()
        .position(|&c| c == SurfaceClass::Floor)
        .and_then(|i| pixel_to_ray(view.intrinsics, view.pose, i % w, i / w).ok())
}

fn fill_floor_ceiling(view: &ViewGeometry, room: &RoomPlanes, depth: &mut [f64], source: &mut [SurfaceClass]) {
    let w = view.intrinsics.width;
    for (i, &class) in view.seg.iter().enumerate() {
        let plane = match class {
            SurfaceClass::Floor => &room.floor,
            SurfaceClass::Ceiling => &room.ceiling,
            _ => continue,
        };
        let ray = pixel_to_ray(view.intrinsics, view.pose, i % w, i / w).expect("index in bounds");
        if let Some(t) = ray_plane_intersect(&ray, plane) {
            depth[i] = t;
            source[i] = class;
        }
    }
}

/// Priors for one view from its own seams only.
pub fn compute_prior_map(view: &ViewGeometry, calib: &CalibrationInput, cfg: &WallFitConfig) -> Result<PriorMap> {
    let room = estimate_floor_ceiling_planes(calib, first_floor_ray(view).as_ref())?;
    let intr = view.intrinsics;
    let n = intr.pixel_count();
    let mut depth = vec![0.0; n];
    let mut source = vec![SurfaceClass::Other; n];
    fill_floor_ceiling(view, &room, &mut depth, &mut source);

    let up = room.up();
    let frame = FloorFrame::new(&up);
    let comps = extract_wall_borders(view.seg, &room, intr, view.pose)?;
    let mut walls = Vec::with_capacity(comps.len());
    for comp in &comps {
        let (planes, fit) = component_planes(comp, &frame, &up, cfg);
        for &i in &comp.pixels {
            let ray = pixel_to_ray(intr, view.pose, i % intr.width, i / intr.width)?;
            if let Some(t) = nearest_wall_hit(&ray, &planes, &room) {
                depth[i] = t;
                source[i] = SurfaceClass::Wall;
            }
        }
        walls.push(WallRecord {
            pixel_count: comp.pixels.len(),
            sample_count: comp.samples.len(),
            planes,
            residual: fit.residual,
            status: fit.status,
        });
    }
    Ok(PriorMap {
        width: intr.width,
        height: intr.height,
        depth,
        source,
        walls,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetPriors {
    pub room: RoomPlanes,
    /// One plane per wall recovered from the pooled seams.
    pub walls: Vec<Plane>,
    pub maps: Vec<PriorMap>,
}

/// Priors for a whole capture with wall planes shared across views.
///
/// Seam samples of every view are pooled in floor coordinates, walls are
/// extracted as lines by sequential RANSAC, and each line is tightened with
/// the seam brackets. Walls are assumed perpendicular to the floor and the
/// room convex, so a wall pixel takes the nearest wall plane along its ray.
pub fn compute_dataset_priors(views: &[ViewGeometry], calib: &CalibrationInput, cfg: &WallFitConfig) -> Result<DatasetPriors> {
    let floor_ray = views.iter().find_map(first_floor_ray);
    let room = estimate_floor_ceiling_planes(calib, floor_ray.as_ref())?;
    let up = room.up();
    let frame = FloorFrame::new(&up);

    let mut samples: Vec<BorderSample> = Vec::new();
    for view in views {
        for comp in extract_wall_borders(view.seg, &room, view.intrinsics, view.pose)? {
            samples.extend(comp.samples);
        }
    }
    let mids: Vec<[f64; 2]> = samples.iter().map(|s| frame.project(&s.point)).collect();
    let support = cfg.min_line_support.max(samples.len() / 200);
    let line_cfg = WallFitConfig {
        min_line_support: support,
        ..cfg.clone()
    };
    let lines = extract_lines(&mids, &line_cfg, 32);

    let mut walls = Vec::with_capacity(lines.len());
    for (k, (line, inliers)) in lines.iter().enumerate() {
        let brackets: Vec<([f64; 2], [f64; 2])> = inliers
            .iter()
            .filter(|&&i| {
                lines
                    .iter()
                    .enumerate()
                    .all(|(j, (other, _))| j == k || other.distance(&mids[i]).abs() > cfg.corner_margin)
            })
            .map(|&i| (frame.project(&samples[i].inner), frame.project(&samples[i].outer)))
            .collect();
        let refined = refine_line_with_brackets(*line, &brackets);
        walls.push(frame.wall_plane(&refined));
    }

    let maps = views
        .iter()
        .map(|view| {
            let intr = view.intrinsics;
            let n = intr.pixel_count();
            let mut depth = vec![0.0; n];
            let mut source = vec![SurfaceClass::Other; n];
            fill_floor_ceiling(view, &room, &mut depth, &mut source);
            for (i, &class) in view.seg.iter().enumerate() {
                if class != SurfaceClass::Wall {
                    continue;
                }
                let ray = pixel_to_ray(intr, view.pose, i % intr.width, i / intr.width)?;
                if let Some(t) = nearest_wall_hit(&ray, &walls, &room) {
                    depth[i] = t;
                    source[i] = SurfaceClass::Wall;
                }
            }
            Ok(PriorMap {
                width: intr.width,
                height: intr.height,
                depth,
                source,
                walls: Vec::new(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(DatasetPriors { room, walls, maps })
}

/// RMS error of priors against reference depth and the fraction of
/// architectural pixels that received a prior.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PriorAccuracy {
    pub rmse: f64,
    pub max_abs_error: f64,
    pub covered_pixels: usize,
    pub architectural_pixels: usize,
    pub coverage: f64,
}

pub fn prior_accuracy<'a>(maps: impl IntoIterator<Item = (&'a PriorMap, &'a [f64], &'a [SurfaceClass])>) -> PriorAccuracy {
    let (mut sq, mut max_abs, mut covered, mut arch) = (0.0, 0.0f64, 0usize, 0usize);
    for (map, truth, seg) in maps {
        for i in 0..map.depth.len() {
            if seg[i].is_architectural() {
                arch += 1;
            }
            if let Some(d) = map.get(i) {
                let e = d - truth[i];
                sq += e * e;
                max_abs = max_abs.max(e.abs());
                covered += 1;
            }
        }
    }
    PriorAccuracy {
        rmse: if covered > 0 { (sq / covered as f64).sqrt() } else { f64::NAN },
        max_abs_error: max_abs,
        covered_pixels: covered,
        architectural_pixels: arch,
        coverage: if arch > 0 { covered as f64 / arch as f64 } else { 1.0 },
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::camera::intrinsics_from_fov;
    use crate::scene::{build_scene, render_view};
    use approx::assert_abs_diff_eq;
    use rand_distr::{Distribution, Normal};

    fn uncalibrated(positions: Vec<Vec3>) -> CalibrationInput {
        CalibrationInput {
            mode: CalibrationMode::Uncalibrated,
            room_height: 3.8,
            camera_height: 1.5,
            camera_positions: positions,
        }
    }

    #[test]
    fn calibrated_planes() {
        let r = estimate_floor_ceiling_planes(&CalibrationInput::calibrated(3.8), None).unwrap();
        assert_eq!(r.floor, Plane::new(Vec3::z(), 0.0));
        assert_eq!(r.ceiling, Plane::new(Vec3::z(), 3.8));
    }

    #[test]
    fn uncalibrated_planes_match_calibrated() {
        let calib = uncalibrated(vec![Vec3::new(0.0, 0.0, 1.5), Vec3::new(1.0, 0.2, 1.5), Vec3::new(-0.3, 1.1, 1.5)]);
        let down = Ray::new(Vec3::new(0.0, 0.0, 1.5), Vec3::new(0.2, 0.1, -1.0));
        let r = estimate_floor_ceiling_planes(&calib, Some(&down)).unwrap();
        assert_abs_diff_eq!(r.floor.offset, 0.0, epsilon = 1e-9);
        assert_abs_diff_eq!(r.ceiling.offset, 3.8, epsilon = 1e-9);
        assert_abs_diff_eq!((r.floor.normal() - Vec3::z()).norm(), 0.0, epsilon = 1e-9);

        let collinear = uncalibrated(vec![Vec3::new(0.0, 0.0, 1.5), Vec3::new(1.0, 0.0, 1.5), Vec3::new(2.0, 0.0, 1.5)]);
        assert!(matches!(
            estimate_floor_ceiling_planes(&collinear, Some(&down)),
            Err(Error::Collinear)
        ));
        let level = Ray::new(Vec3::new(0.0, 0.0, 1.5), Vec3::x());
        assert!(matches!(
            estimate_floor_ceiling_planes(&calib, Some(&level)),
            Err(Error::AmbiguousFloor(0))
        ));
    }

    fn wall_view(distance: f64) -> (crate::scene::ViewRecord, crate::scene::SceneDescription) {
        let scene = build_scene("empty_room", 0).unwrap();
        let intr = intrinsics_from_fov(64, 96, 40.0, 110.0).unwrap();
        let pose = Pose::from_yaw_pitch(Vec3::new(3.0 - distance, 0.3, 1.5), 0.0, 0.0);
        (render_view(&scene, &intr, &pose).unwrap(), scene)
    }

    #[test]
    fn fronto_parallel_wall_borders() {
        let (view, _) = wall_view(2.0);
        let room = estimate_floor_ceiling_planes(&CalibrationInput::calibrated(3.8), None).unwrap();
        let comps = extract_wall_borders(&view.seg, &room, &view.intrinsics, &view.pose).unwrap();
        assert_eq!(comps.len(), 1);
        let c = &comps[0];
        assert!(!c.discarded);
        assert!(c.seam_points(Seam::Floor).count() > 10);
        assert!(c.seam_points(Seam::Ceiling).count() > 10);
        for p in c.seam_points(Seam::Floor) {
            assert!(p.z.abs() < 1e-6);
        }
        for p in c.seam_points(Seam::Ceiling) {
            assert!((p.z - 3.8).abs() < 1e-6);
        }
        // Lifted seams sit within a pixel footprint of the true wall.
        for s in &c.samples {
            assert!((s.point.x - 3.0).abs() < 0.05, "{:?}", s.point);
            assert!(s.inner.x < 3.0 && s.outer.x > 3.0);
        }
    }

    #[test]
    fn no_wall_pixels_no_components() {
        let room = estimate_floor_ceiling_planes(&CalibrationInput::calibrated(3.8), None).unwrap();
        let intr = intrinsics_from_fov(4, 4, 30.0, 30.0).unwrap();
        let seg = vec![SurfaceClass::Floor; 16];
        let pose = Pose::from_yaw_pitch(Vec3::new(0.0, 0.0, 1.5), 0.0, -1.5);
        assert!(extract_wall_borders(&seg, &room, &intr, &pose).unwrap().is_empty());
    }

    #[test]
    fn occluded_wall_component_is_discarded() {
        let room = estimate_floor_ceiling_planes(&CalibrationInput::calibrated(3.8), None).unwrap();
        let intr = intrinsics_from_fov(6, 6, 30.0, 30.0).unwrap();
        let mut seg = vec![SurfaceClass::Other; 36];
        for i in [14, 15, 20, 21] {
            seg[i] = SurfaceClass::Wall;
        }
        let pose = Pose::from_yaw_pitch(Vec3::new(0.0, 0.0, 1.5), 0.0, 0.0);
        let comps = extract_wall_borders(&seg, &room, &intr, &pose).unwrap();
        assert_eq!(comps.len(), 1);
        assert!(comps[0].discarded);
        let fits = fit_wall_planes(&comps, &Vec3::z(), &WallFitConfig::default());
        assert_eq!(fits[0].status, WallFitStatus::Insufficient);
    }

    fn wall_points(n: usize) -> Vec<Vec3> {
        (0..n)
            .map(|i| {
                let y = (i % 20) as f64 * 0.3 - 3.0;
                let z = if i % 2 == 0 { 0.0 } else { 3.8 };
                Vec3::new(3.0, y, z)
            })
            .collect()
    }

    #[test]
    fn exact_wall_fit() {
        let fit = fit_wall_plane(&wall_points(100), &Vec3::z(), &WallFitConfig::default());
        let p = fit.plane.unwrap();
        assert_eq!(fit.status, WallFitStatus::Accepted);
        assert_abs_diff_eq!(p.normal()[0].abs(), 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(p.offset.abs(), 3.0, epsilon = 1e-9);
        assert!(fit.residual < 1e-6);
    }

    #[test]
    fn single_outlier_is_removed() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut pts = wall_points(200);
        let idx = rng.gen_range(0..pts.len());
        pts[idx].x += 0.5;
        let fit = fit_wall_plane(&pts, &Vec3::z(), &WallFitConfig::default());
        let p = fit.plane.expect("accepted after refit");
        let offset = p.offset * p.normal()[0].signum();
        assert!((offset - 3.0).abs() < 2e-3, "offset {offset}");
    }

    #[test]
    fn horizontal_fit_is_rejected() {
        let pts: Vec<Vec3> = (0..50)
            .map(|i| Vec3::new((i % 7) as f64 * 0.4, (i / 7) as f64 * 0.4, 0.0))
            .collect();
        let fit = fit_wall_plane(&pts, &Vec3::z(), &WallFitConfig::default());
        assert!(fit.plane.is_none());
        assert!(matches!(fit.status, WallFitStatus::NotVertical { .. }));
    }

    #[test]
    fn noisy_wall_residual_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let noise = Normal::new(0.0, 0.1).unwrap();
        let pts: Vec<Vec3> = wall_points(100)
            .into_iter()
            .map(|p| p + Vec3::new(noise.sample(&mut rng), 0.0, 0.0))
            .collect();
        let fit = fit_wall_plane(&pts, &Vec3::z(), &WallFitConfig::default());
        assert!(matches!(fit.status, WallFitStatus::ResidualTooLarge { .. }));
    }

    #[test]
    fn straight_down_floor_prior() {
        let scene = build_scene("empty_room", 0).unwrap();
        let intr = intrinsics_from_fov(5, 5, 30.0, 30.0).unwrap();
        let pose = Pose::from_yaw_pitch(Vec3::new(0.0, 0.0, 1.5), 0.0, -std::f64::consts::FRAC_PI_2);
        let view = render_view(&scene, &intr, &pose).unwrap();
        let geo = ViewGeometry {
            seg: &view.seg,
            intrinsics: &view.intrinsics,
            pose: &view.pose,
        };
        let map = compute_prior_map(&geo, &CalibrationInput::calibrated(3.8), &WallFitConfig::default()).unwrap();
        assert_abs_diff_eq!(map.get(12).unwrap(), 1.5, epsilon = 1e-12);
    }

    #[test]
    fn per_view_wall_prior_close_to_truth() {
        let (view, _) = wall_view(2.0);
        let geo = ViewGeometry {
            seg: &view.seg,
            intrinsics: &view.intrinsics,
            pose: &view.pose,
        };
        let map = compute_prior_map(&geo, &CalibrationInput::calibrated(3.8), &WallFitConfig::default()).unwrap();
        assert_eq!(map.walls.len(), 1);
        assert_eq!(map.walls[0].status, WallFitStatus::Accepted);
        let acc = prior_accuracy([(&map, view.depth.as_slice(), view.seg.as_slice())]);
        assert!(acc.coverage > 0.999);
        // Bounded by the seam's pixel quantization.
        assert!(acc.rmse < 0.02, "{acc:?}");
    }

    #[test]
    fn other_class_never_gets_prior() {
        let scene = build_scene("bedroom_like", 4).unwrap();
        let intr = intrinsics_from_fov(40, 72, 27.0, 40.0).unwrap();
        for yaw in [0.3, 1.9, 3.5] {
            let pose = Pose::from_yaw_pitch(Vec3::new(0.2, 0.5, 1.5), yaw, -0.2);
            let view = render_view(&scene, &intr, &pose).unwrap();
            let geo = ViewGeometry {
                seg: &view.seg,
                intrinsics: &view.intrinsics,
                pose: &view.pose,
            };
            let map = compute_prior_map(&geo, &CalibrationInput::calibrated(3.8), &WallFitConfig::default()).unwrap();
            for (i, c) in view.seg.iter().enumerate() {
                if *c == SurfaceClass::Other {
                    assert!(map.get(i).is_none());
                }
            }
        }
    }

    #[test]
    fn bracket_refinement_recovers_line() {
        // Seam at x = 3 observed through brackets of random width and offset.
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let brackets: Vec<([f64; 2], [f64; 2])> = (0..2000)
            .map(|_| {
                let y = rng.gen_range(-3.0..3.0);
                let len = rng.gen_range(0.005..0.03);
                let before = rng.gen_range(0.0..len);
                ([3.0 - before, y], [3.0 - before + len, y + 0.001])
            })
            .collect();
        let rough = Line2 {
            n: [0.999, 0.0447],
            c: 3.05,
        };
        let l = refine_line_with_brackets(rough, &brackets);
        let plane_offset = l.c / l.n[0];
        assert!((plane_offset - 3.0).abs() < 1e-4, "{l:?}");
        assert!(l.n[1].abs() < 1e-4);
    }
}
