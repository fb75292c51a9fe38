//! Procedural indoor scenes and the analytic ray tracer that produces
//! ground-truth color, Euclidean depth and architectural segmentation.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::camera::{generate_rig_poses, pixel_to_ray, CameraIntrinsics, RigConfig};
use crate::dataset::{write_dataset, DatasetMeta, Split, ViewTag};
use crate::error::{Error, Result};
use crate::geometry::{Pose, Ray, Vec3};

/// Segmentation class ids used throughout the crate.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[repr(u8)]
pub enum SurfaceClass {
    Other = 0,
    Floor = 1,
    Ceiling = 2,
    Wall = 3,
}

impl SurfaceClass {
    pub fn from_id(id: u8) -> Option<Self> {
        match id {
            0 => Some(SurfaceClass::Other),
            1 => Some(SurfaceClass::Floor),
            2 => Some(SurfaceClass::Ceiling),
            3 => Some(SurfaceClass::Wall),
            _ => None,
        }
    }

    pub fn is_architectural(self) -> bool {
        self != SurfaceClass::Other
    }
}

pub type Rgb = [f64; 3];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Pattern {
    Solid(Rgb),
    Checker {
        a: Rgb,
        b: Rgb,
        cell: f64,
    },
    /// Linear blend from `a` at the primitive's bottom to `b` at its top.
    Gradient {
        a: Rgb,
        b: Rgb,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Shape {
    Cuboid { min: [f64; 3], max: [f64; 3] },
    Sphere { center: [f64; 3], radius: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Primitive {
    pub shape: Shape,
    pub pattern: Pattern,
}

impl Primitive {
    pub fn bounds(&self) -> ([f64; 3], [f64; 3]) {
        match &self.shape {
            Shape::Cuboid { min, max } => (*min, *max),
            Shape::Sphere { center, radius } => (
                [center[0] - radius, center[1] - radius, center[2] - radius],
                [center[0] + radius, center[1] + radius, center[2] + radius],
            ),
        }
    }

    pub fn contains(&self, p: &Vec3) -> bool {
        match &self.shape {
            Shape::Cuboid { min, max } => (0..3).all(|k| p[k] >= min[k] && p[k] <= max[k]),
            Shape::Sphere { center, radius } => (p - Vec3::from(*center)).norm() <= *radius,
        }
    }

    fn intersect(&self, ray: &Ray) -> Option<(f64, Vec3)> {
        let o = ray.origin;
        let d = ray.direction();
        match &self.shape {
            Shape::Cuboid { min, max } => {
                let mut t_near = f64::NEG_INFINITY;
                let mut t_far = f64::INFINITY;
                let mut axis = 0;
                for k in 0..3 {
                    if d[k].abs() < 1e-15 {
                        if o[k] < min[k] || o[k] > max[k] {
                            return None;
                        }
                        continue;
                    }
                    let t0 = (min[k] - o[k]) / d[k];
                    let t1 = (max[k] - o[k]) / d[k];
                    let (lo, hi) = if t0 < t1 { (t0, t1) } else { (t1, t0) };
                    if lo > t_near {
                        t_near = lo;
                        axis = k;
                    }
                    t_far = t_far.min(hi);
                }
                if t_near > t_far || t_near <= 1e-12 {
                    return None;
                }
                let mut normal = Vec3::zeros();
                normal[axis] = -d[axis].signum();
                Some((t_near, normal))
            }
            Shape::Sphere { center, radius } => {
                let oc = o - Vec3::from(*center);
                let b = oc.dot(&d);
                let c = oc.norm_squared() - radius * radius;
                let disc = b * b - c;
                if disc < 0.0 {
                    return None;
                }
                let t = -b - disc.sqrt();
                if t <= 1e-12 {
                    return None;
                }
                Some((t, (ray.at(t) - Vec3::from(*center)) / *radius))
            }
        }
    }

    fn albedo(&self, p: &Vec3, normal: &Vec3) -> Rgb {
        match &self.pattern {
            Pattern::Solid(c) => *c,
            Pattern::Checker { a, b, cell } => {
                let parity = match self.shape {
                    Shape::Cuboid { .. } => {
                        // Checker over the two in-face coordinates.
                        let axis = (0..3).max_by(|&i, &j| normal[i].abs().total_cmp(&normal[j].abs())).unwrap();
                        (0..3).filter(|&k| k != axis).map(|k| (p[k] / cell).floor() as i64).sum::<i64>()
                    }
                    Shape::Sphere { .. } => (0..3).map(|k| (p[k] / cell).floor() as i64).sum(),
                };
                if parity.rem_euclid(2) == 0 {
                    *a
                } else {
                    *b
                }
            }
            Pattern::Gradient { a, b } => {
                let (lo, hi) = self.bounds();
                let s = ((p.z - lo[2]) / (hi[2] - lo[2]).max(1e-9)).clamp(0.0, 1.0);
                std::array::from_fn(|k| a[k] + (b[k] - a[k]) * s)
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneDescription {
    pub name: String,
    /// Extent along x, meters.
    pub room_width: f64,
    /// Extent along y, meters.
    pub room_depth: f64,
    pub room_height: f64,
    pub objects: Vec<Primitive>,
    pub wall_albedo: Rgb,
    pub floor_albedo: Rgb,
    pub ceiling_albedo: Rgb,
}

/// Direction toward the fixed light.
const LIGHT: [f64; 3] = [-0.4, -0.25, 0.88];
const AMBIENT: f64 = 0.3;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Hit {
    pub color: Rgb,
    pub depth: f64,
    pub class: SurfaceClass,
}

pub const PRESETS: [&str; 3] = ["empty_room", "bedroom_like", "livingroom_like"];

pub fn build_scene(preset: &str, seed: u64) -> Result<SceneDescription> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scene = match preset {
        "empty_room" => shell("empty_room", [6.0, 8.0, 3.8], &mut rng),
        "bedroom_like" => {
            let mut s = shell("bedroom_like", [6.0, 8.0, 3.8], &mut rng);
            s.objects = bedroom_objects(&mut rng);
            s
        }
        "livingroom_like" => {
            let mut s = shell("livingroom_like", [10.0, 10.0, 3.4], &mut rng);
            s.objects = livingroom_objects(&mut rng);
            s
        }
        other => return Err(Error::UnknownPreset(other.to_string())),
    };
    scene.validate()?;
    Ok(scene)
}

fn jitter_color(rng: &mut ChaCha8Rng, base: Rgb, amount: f64) -> Rgb {
    std::array::from_fn(|k| (base[k] + rng.gen_range(-amount..=amount)).clamp(0.02, 0.98))
}

fn shell(name: &str, dims: [f64; 3], rng: &mut ChaCha8Rng) -> SceneDescription {
    SceneDescription {
        name: name.to_string(),
        room_width: dims[0],
        room_depth: dims[1],
        room_height: dims[2],
        objects: Vec::new(),
        wall_albedo: jitter_color(rng, [0.82, 0.78, 0.70], 0.05),
        floor_albedo: jitter_color(rng, [0.55, 0.40, 0.28], 0.05),
        ceiling_albedo: jitter_color(rng, [0.92, 0.92, 0.90], 0.03),
    }
}

fn cuboid(min: [f64; 3], max: [f64; 3], pattern: Pattern) -> Primitive {
    Primitive {
        shape: Shape::Cuboid { min, max },
        pattern,
    }
}

fn sphere(center: [f64; 3], radius: f64, pattern: Pattern) -> Primitive {
    Primitive {
        shape: Shape::Sphere { center, radius },
        pattern,
    }
}

// Objects stand a couple of millimeters off the floor so they never touch the shell.
const LIFT: f64 = 0.002;

fn checker(rng: &mut ChaCha8Rng, a: Rgb, b: Rgb, cell: f64) -> Pattern {
    Pattern::Checker {
        a: jitter_color(rng, a, 0.05),
        b: jitter_color(rng, b, 0.05),
        cell,
    }
}

fn gradient(rng: &mut ChaCha8Rng, a: Rgb, b: Rgb) -> Pattern {
    Pattern::Gradient {
        a: jitter_color(rng, a, 0.05),
        b: jitter_color(rng, b, 0.05),
    }
}

/// Bedroom on a 6 x 8 m floor: x in [-3, 3], y in [-4, 4].
fn bedroom_objects(rng: &mut ChaCha8Rng) -> Vec<Primitive> {
    let bx = rng.gen_range(-0.4..0.4);
    let mut objs = vec![
        // Bed against the +y wall.
        cuboid(
            [bx - 0.8, 1.9, LIFT],
            [bx + 0.8, 3.95, 0.55],
            checker(rng, [0.85, 0.25, 0.2], [0.95, 0.9, 0.8], 0.25),
        ),
        // Headboard.
        cuboid(
            [bx - 0.85, 3.85, LIFT],
            [bx + 0.85, 3.97, 1.1],
            gradient(rng, [0.35, 0.2, 0.1], [0.7, 0.5, 0.3]),
        ),
        // Nightstands.
        cuboid(
            [bx - 1.35, 3.4, LIFT],
            [bx - 0.9, 3.9, 0.55],
            gradient(rng, [0.2, 0.3, 0.6], [0.6, 0.8, 0.95]),
        ),
        cuboid(
            [bx + 0.9, 3.4, LIFT],
            [bx + 1.35, 3.9, 0.55],
            gradient(rng, [0.2, 0.3, 0.6], [0.6, 0.8, 0.95]),
        ),
    ];
    // Lamp on the left nightstand.
    objs.push(sphere(
        [bx - 1.125, 3.65, 0.72],
        0.16,
        checker(rng, [0.95, 0.85, 0.2], [0.3, 0.3, 0.3], 0.08),
    ));
    // Wardrobe against the -x wall.
    let wy = rng.gen_range(-1.8..-0.6);
    objs.push(cuboid(
        [-2.97, wy - 0.7, LIFT],
        [-2.37, wy + 0.7, 2.1],
        checker(rng, [0.45, 0.3, 0.15], [0.75, 0.6, 0.4], 0.35),
    ));
    // Desk against the +x wall with a ball on it.
    let dy = rng.gen_range(-3.0..-1.8);
    objs.push(cuboid(
        [2.25, dy - 0.6, LIFT],
        [2.95, dy + 0.6, 0.75],
        checker(rng, [0.1, 0.5, 0.3], [0.8, 0.9, 0.6], 0.2),
    ));
    objs.push(sphere(
        [2.6, dy, 0.75 + 0.2 + LIFT],
        0.2,
        checker(rng, [0.9, 0.1, 0.5], [0.2, 0.6, 0.9], 0.1),
    ));
    // Rug-like low box and a floor ball.
    objs.push(cuboid(
        [bx - 1.0, 0.4, LIFT],
        [bx + 1.0, 1.6, 0.03],
        checker(rng, [0.3, 0.5, 0.7], [0.9, 0.8, 0.5], 0.3),
    ));
    objs.push(sphere(
        [rng.gen_range(-2.2..-1.2), rng.gen_range(-3.4..-2.6), 0.3 + LIFT],
        0.3,
        checker(rng, [0.2, 0.8, 0.3], [0.9, 0.9, 0.1], 0.15),
    ));
    objs
}

/// Living room on a 10 x 10 m floor: x, y in [-5, 5].
fn livingroom_objects(rng: &mut ChaCha8Rng) -> Vec<Primitive> {
    let sx = rng.gen_range(-1.0..1.0);
    let mut objs = vec![
        // Sofa against the -y wall: seat and back.
        cuboid(
            [sx - 1.2, -4.95, LIFT],
            [sx + 1.2, -4.05, 0.45],
            checker(rng, [0.25, 0.35, 0.6], [0.5, 0.6, 0.85], 0.3),
        ),
        cuboid(
            [sx - 1.2, -4.97, LIFT],
            [sx + 1.2, -4.7, 0.95],
            gradient(rng, [0.2, 0.25, 0.5], [0.55, 0.65, 0.9]),
        ),
        // Coffee table.
        cuboid(
            [sx - 0.6, -3.4, LIFT],
            [sx + 0.6, -2.8, 0.42],
            checker(rng, [0.6, 0.4, 0.2], [0.9, 0.75, 0.5], 0.2),
        ),
    ];
    // Book shelf against the +x wall.
    let shy = rng.gen_range(-1.5..1.5);
    objs.push(cuboid(
        [4.55, shy - 1.0, LIFT],
        [4.97, shy + 1.0, 2.2],
        checker(rng, [0.8, 0.2, 0.2], [0.2, 0.2, 0.7], 0.18),
    ));
    // TV cabinet against the +y wall with a screen above it.
    objs.push(cuboid(
        [-1.0, 4.5, LIFT],
        [1.0, 4.97, 0.6],
        gradient(rng, [0.15, 0.15, 0.15], [0.5, 0.45, 0.4]),
    ));
    objs.push(cuboid(
        [-0.9, 4.9, 0.9],
        [0.9, 4.97, 1.9],
        checker(rng, [0.05, 0.05, 0.1], [0.3, 0.5, 0.8], 0.25),
    ));
    // Armchairs.
    for (x, y) in [(-3.6, -2.0), (-3.6, 1.5)] {
        let jx = x + rng.gen_range(-0.2..0.2);
        objs.push(cuboid(
            [jx - 0.45, y - 0.45, LIFT],
            [jx + 0.45, y + 0.45, 0.8],
            checker(rng, [0.7, 0.6, 0.2], [0.3, 0.25, 0.1], 0.22),
        ));
    }
    // Plants as stacked spheres.
    for (x, y) in [(4.3, -4.3), (-4.3, 4.3)] {
        objs.push(sphere(
            [x, y, 0.35 + LIFT],
            0.35,
            gradient(rng, [0.35, 0.2, 0.1], [0.55, 0.35, 0.2]),
        ));
        objs.push(sphere([x, y, 1.05], 0.32, checker(rng, [0.1, 0.55, 0.15], [0.3, 0.8, 0.3], 0.12)));
    }
    // Dining table and a ball on it.
    let ty = rng.gen_range(2.0..3.0);
    objs.push(cuboid(
        [1.5, ty - 0.5, LIFT],
        [3.1, ty + 0.5, 0.76],
        checker(rng, [0.9, 0.9, 0.85], [0.5, 0.3, 0.2], 0.25),
    ));
    objs.push(sphere(
        [2.3, ty, 0.76 + 0.15 + LIFT],
        0.15,
        checker(rng, [0.9, 0.5, 0.1], [0.1, 0.1, 0.1], 0.07),
    ));
    objs
}

impl SceneDescription {
    pub fn half_extent(&self) -> [f64; 2] {
        [self.room_width / 2.0, self.room_depth / 2.0]
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.room_width > 0.0 && self.room_depth > 0.0 && self.room_height > 0.0) {
            return Err(Error::ConfigInvalid("room dimensions must be positive".into()));
        }
        let [hx, hy] = self.half_extent();
        for (i, obj) in self.objects.iter().enumerate() {
            let (lo, hi) = obj.bounds();
            let inside = lo[0] > -hx && hi[0] < hx && lo[1] > -hy && hi[1] < hy && lo[2] > 0.0 && hi[2] < self.room_height;
            if !inside {
                return Err(Error::ConfigInvalid(format!("object {i} leaves the room shell")));
            }
        }
        Ok(())
    }

    pub fn contains_strictly(&self, p: &Vec3) -> bool {
        let [hx, hy] = self.half_extent();
        p.x.abs() < hx && p.y.abs() < hy && p.z > 0.0 && p.z < self.room_height
    }

    fn shade(albedo: Rgb, normal: &Vec3) -> Rgb {
        let light = Vec3::from(LIGHT).normalize();
        let factor = (AMBIENT + (1.0 - AMBIENT) * normal.dot(&light).max(0.0)).clamp(0.0, 1.0);
        albedo.map(|c| (c * factor).clamp(0.0, 1.0))
    }

    /// Exit point of the ray through the room shell.
    fn shell_hit(&self, ray: &Ray) -> (f64, SurfaceClass, Vec3) {
        let [hx, hy] = self.half_extent();
        let lo = [-hx, -hy, 0.0];
        let hi = [hx, hy, self.room_height];
        let o = ray.origin;
        let d = ray.direction();
        let mut best = (f64::INFINITY, SurfaceClass::Wall, Vec3::zeros());
        for k in 0..3 {
            if d[k] == 0.0 {
                continue;
            }
            let (bound, sign) = if d[k] > 0.0 { (hi[k], -1.0) } else { (lo[k], 1.0) };
            let t = (bound - o[k]) / d[k];
            if t < best.0 {
                let class = match (k, d[k] > 0.0) {
                    (2, false) => SurfaceClass::Floor,
                    (2, true) => SurfaceClass::Ceiling,
                    _ => SurfaceClass::Wall,
                };
                let mut normal = Vec3::zeros();
                normal[k] = sign;
                best = (t, class, normal);
            }
        }
        best
    }

    pub fn trace_ray(&self, ray: &Ray) -> Result<Hit> {
        if !self.contains_strictly(&ray.origin) {
            return Err(Error::OriginOutsideRoom(ray.origin.into()));
        }
        let (mut depth, mut class, mut normal) = self.shell_hit(ray);
        let mut object = None;
        for (i, obj) in self.objects.iter().enumerate() {
            if let Some((t, n)) = obj.intersect(ray) {
                if t < depth {
                    depth = t;
                    normal = n;
                    class = SurfaceClass::Other;
                    object = Some(i);
                }
            }
        }
        let albedo = match (object, class) {
            (Some(i), _) => self.objects[i].albedo(&ray.at(depth), &normal),
            (None, SurfaceClass::Floor) => self.floor_albedo,
            (None, SurfaceClass::Ceiling) => self.ceiling_albedo,
            (None, _) => self.wall_albedo,
        };
        Ok(Hit {
            color: Self::shade(albedo, &normal),
            depth,
            class,
        })
    }

    /// Whether `p` lies on a shell face of `class` within `tol`. `Other` always passes.
    pub fn on_shell_face(&self, p: &Vec3, class: SurfaceClass, tol: f64) -> bool {
        let [hx, hy] = self.half_extent();
        match class {
            SurfaceClass::Floor => p.z.abs() <= tol,
            SurfaceClass::Ceiling => (p.z - self.room_height).abs() <= tol,
            SurfaceClass::Wall => (p.x.abs() - hx).abs() <= tol || (p.y.abs() - hy).abs() <= tol,
            SurfaceClass::Other => true,
        }
    }
}

/// One rendered camera view with its ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct ViewRecord {
    /// Row-major, values in [0, 1].
    pub rgb: Vec<Rgb>,
    /// Euclidean ray distance, meters.
    pub depth: Vec<f64>,
    pub seg: Vec<SurfaceClass>,
    pub intrinsics: CameraIntrinsics,
    pub pose: Pose,
}

impl ViewRecord {
    pub fn width(&self) -> usize {
        self.intrinsics.width
    }

    pub fn height(&self) -> usize {
        self.intrinsics.height
    }
}

pub fn render_view(scene: &SceneDescription, intrinsics: &CameraIntrinsics, pose: &Pose) -> Result<ViewRecord> {
    intrinsics.validate()?;
    if !scene.contains_strictly(&pose.translation) {
        return Err(Error::OriginOutsideRoom(pose.translation.into()));
    }
    let (w, h) = (intrinsics.width, intrinsics.height);
    let hits: Vec<Hit> = (0..w * h)
        .into_par_iter()
        .map(|i| {
            let ray = pixel_to_ray(intrinsics, pose, i % w, i / w)?;
            scene.trace_ray(&ray)
        })
        .collect::<Result<_>>()?;
    Ok(ViewRecord {
        rgb: hits.iter().map(|h| h.color).collect(),
        depth: hits.iter().map(|h| h.depth).collect(),
        seg: hits.iter().map(|h| h.class).collect(),
        intrinsics: *intrinsics,
        pose: *pose,
    })
}

/// Fraction of stations held out for evaluation.
pub const EVAL_STATION_FRACTION: f64 = 0.25;

/// Deterministic station split: `round(0.25 * n)` held-out stations (at least
/// one when there are two or more stations), chosen by a seeded shuffle.
pub fn eval_stations(station_count: usize, seed: u64) -> Vec<usize> {
    if station_count < 2 {
        return Vec::new();
    }
    let k = ((station_count as f64 * EVAL_STATION_FRACTION).round() as usize).clamp(1, station_count - 1);
    let mut ids: Vec<usize> = (0..station_count).collect();
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_5717_0000_0001));
    let mut held: Vec<usize> = ids[..k].to_vec();
    held.sort_unstable();
    held
}

/// Renders every rig view of `scene` and writes the dataset to `out_dir`.
pub fn generate_dataset(scene: &SceneDescription, scene_seed: u64, rig: &RigConfig, out_dir: &Path) -> Result<Vec<ViewRecord>> {
    let poses = generate_rig_poses(rig, [scene.room_width, scene.room_depth])?;
    let intr = rig.intrinsics()?;
    for rp in &poses {
        if scene.objects.iter().any(|o| o.contains(&rp.pose.translation)) {
            return Err(Error::StationOutsideRoom {
                station: rp.station,
                x: rp.pose.translation.x,
                y: rp.pose.translation.y,
            });
        }
    }
    let held = eval_stations(rig.station_count(), rig.seed);
    let views: Vec<ViewRecord> = poses.iter().map(|rp| render_view(scene, &intr, &rp.pose)).collect::<Result<_>>()?;
    let tags: Vec<ViewTag> = poses
        .iter()
        .map(|rp| ViewTag {
            station: rp.station,
            split: if held.contains(&rp.station) { Split::Eval } else { Split::Train },
        })
        .collect();
    let meta = DatasetMeta {
        scene: scene.name.clone(),
        scene_seed,
        room: [scene.room_width, scene.room_depth, scene.room_height],
        camera_height: rig.camera_height,
        rig_seed: rig.seed,
        depth_scale: crate::dataset::DEFAULT_DEPTH_SCALE,
    };
    write_dataset(&views, &tags, &meta, out_dir)?;
    Ok(views)
}
