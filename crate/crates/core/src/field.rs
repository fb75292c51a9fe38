//! Dense voxel radiance field with trilinear interpolation and Adam.
//!
//! Parameters are stored interleaved per lattice node as
//! `[raw_density, raw_r, raw_g, raw_b]`, node index `x + nx * (y + ny * z)`.
//! Raw values are interpolated first and activated afterwards: softplus for
//! density, sigmoid for color.
//!
//! # Checkpoint layout
//!
//! All values little-endian.
//!
//! | bytes | content |
//! |-------|---------|
//! | 8     | magic `ADVFIELD` |
//! | 4     | format version (u32, currently 1) |
//! | 12    | resolution nx, ny, nz (u32 each) |
//! | 48    | bbox min xyz, max xyz (f64 each) |
//! | 24    | Adam beta1, beta2, epsilon (f64) |
//! | 8     | Adam step count (u64) |
//! | 8     | training iteration (u64) |
//! | 3 x 32 n | params, first moments, second moments (f64, 4 per node) |

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Vec3;

pub const PARAMS_PER_NODE: usize = 4;
pub const INIT_RAW_DENSITY: f64 = -2.0;
pub const INIT_COLOR_RANGE: f64 = 0.1;
/// Color returned outside the field's box.
pub const OUTSIDE_COLOR: [f64; 3] = [0.5; 3];

const MAGIC: &[u8; 8] = b"ADVFIELD";
const CHECKPOINT_VERSION: u32 = 1;

pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// `(softplus(x), sigmoid(x))` sharing one exponential.
fn softplus_with_slope(x: f64) -> (f64, f64) {
    let e = (-x.abs()).exp();
    let slope = if x >= 0.0 { 1.0 / (1.0 + e) } else { e / (1.0 + e) };
    (x.max(0.0) + e.ln_1p(), slope)
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aabb {
    pub min: [f64; 3],
    pub max: [f64; 3],
}

impl Aabb {
    /// Room shell `[-w/2, w/2] x [-d/2, d/2] x [0, h]` grown by `margin`
    /// (fraction of each extent, split evenly between the two sides).
    pub fn room(room: [f64; 3], margin: f64) -> Self {
        let lo = [-room[0] / 2.0, -room[1] / 2.0, 0.0];
        let hi = [room[0] / 2.0, room[1] / 2.0, room[2]];
        let mut b = Aabb { min: lo, max: hi };
        for k in 0..3 {
            let pad = 0.5 * margin * (hi[k] - lo[k]);
            b.min[k] -= pad;
            b.max[k] += pad;
        }
        b
    }

    pub fn contains(&self, p: &Vec3) -> bool {
        (0..3).all(|k| p[k] >= self.min[k] && p[k] <= self.max[k])
    }

    /// Parameter interval `[enter, exit]` where `origin + t * dir` lies in
    /// the box, or `None` when the line misses it.
    pub fn clip(&self, origin: &Vec3, dir: &Vec3) -> Option<(f64, f64)> {
        let (mut lo, mut hi) = (f64::NEG_INFINITY, f64::INFINITY);
        for k in 0..3 {
            if dir[k] == 0.0 {
                if origin[k] < self.min[k] || origin[k] > self.max[k] {
                    return None;
                }
                continue;
            }
            let a = (self.min[k] - origin[k]) / dir[k];
            let b = (self.max[k] - origin[k]) / dir[k];
            lo = lo.max(a.min(b));
            hi = hi.min(a.max(b));
        }
        (lo <= hi).then_some((lo, hi))
    }

    pub fn diagonal(&self) -> f64 {
        (0..3).map(|k| (self.max[k] - self.min[k]).powi(2)).sum::<f64>().sqrt()
    }
}

/// Eight lattice nodes and trilinear weights around a point.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Stencil {
    pub nodes: [usize; 8],
    pub weights: [f64; 8],
}

/// Lower lattice corner and fractional offsets of a point inside the box.
#[derive(Clone, Copy, Debug, PartialEq)]
struct Cell {
    origin: usize,
    frac: [f64; 3],
}

/// A field evaluation that remembers what is needed for its backward pass.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FieldSample {
    pub sigma: f64,
    pub color: [f64; 3],
    cell: Option<Cell>,
    /// d sigma / d interpolated raw density.
    dsigma: f64,
    /// Lattice strides along y and z.
    strides: [usize; 2],
}

#[inline]
fn corner_weights(frac: [f64; 3]) -> [f64; 8] {
    let [fx, fy, fz] = frac;
    let (gx, gy, gz) = (1.0 - fx, 1.0 - fy, 1.0 - fz);
    let (a, b, c, d) = (gx * gy, fx * gy, gx * fy, fx * fy);
    [a * gz, b * gz, c * gz, d * gz, a * fz, b * fz, c * fz, d * fz]
}

#[inline]
fn corner_nodes(origin: usize, strides: [usize; 2]) -> [usize; 8] {
    let [sy, sz] = strides;
    [
        origin,
        origin + 1,
        origin + sy,
        origin + sy + 1,
        origin + sz,
        origin + sz + 1,
        origin + sz + sy,
        origin + sz + sy + 1,
    ]
}

impl FieldSample {
    pub fn stencil(&self) -> Option<Stencil> {
        self.cell.map(|c| Stencil {
            nodes: corner_nodes(c.origin, self.strides),
            weights: corner_weights(c.frac),
        })
    }

    /// Adds this sample's parameter gradient for upstream `(dL/dsigma, dL/dc)`
    /// into `grad` (field parameter layout).
    pub fn accumulate(&self, dl_dsigma: f64, dl_dcolor: [f64; 3], grad: &mut [f64]) {
        let Some(cell) = &self.cell else { return };
        let up = [
            dl_dsigma * self.dsigma,
            dl_dcolor[0] * self.color[0] * (1.0 - self.color[0]),
            dl_dcolor[1] * self.color[1] * (1.0 - self.color[1]),
            dl_dcolor[2] * self.color[2] * (1.0 - self.color[2]),
        ];
        let weights = corner_weights(cell.frac);
        for (node, w) in corner_nodes(cell.origin, self.strides).into_iter().zip(weights) {
            let g = &mut grad[node * PARAMS_PER_NODE..(node + 1) * PARAMS_PER_NODE];
            for k in 0..PARAMS_PER_NODE {
                g[k] += w * up[k];
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct VoxelField {
    resolution: [usize; 3],
    bbox: Aabb,
    /// Lattice cells per meter along each axis.
    scale: [f64; 3],
    params: Vec<f64>,
}

impl VoxelField {
    pub fn new(resolution: [usize; 3], bbox: Aabb, params: Vec<f64>) -> Result<Self> {
        if resolution.iter().any(|&n| n < 2) {
            return Err(Error::ConfigInvalid(format!(
                "field resolution {resolution:?} must be at least 2 per axis"
            )));
        }
        if (0..3).any(|k| !(bbox.max[k] > bbox.min[k])) {
            return Err(Error::ConfigInvalid("empty field bounding box".into()));
        }
        let n = resolution.iter().product::<usize>() * PARAMS_PER_NODE;
        if params.len() != n {
            return Err(Error::ShapeMismatch(format!("{} parameters for {n} slots", params.len())));
        }
        let scale = [0, 1, 2].map(|k| (resolution[k] - 1) as f64 / (bbox.max[k] - bbox.min[k]));
        Ok(VoxelField {
            resolution,
            bbox,
            scale,
            params,
        })
    }

    pub fn constant(resolution: [usize; 3], bbox: Aabb, raw_density: f64, raw_color: [f64; 3]) -> Result<Self> {
        let nodes: usize = resolution.iter().product();
        let mut params = Vec::with_capacity(nodes * PARAMS_PER_NODE);
        for _ in 0..nodes {
            params.extend([raw_density, raw_color[0], raw_color[1], raw_color[2]]);
        }
        Self::new(resolution, bbox, params)
    }

    pub fn resolution(&self) -> [usize; 3] {
        self.resolution
    }

    pub fn bbox(&self) -> &Aabb {
        &self.bbox
    }

    pub fn node_count(&self) -> usize {
        self.resolution.iter().product()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn node_index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.resolution[0] * (y + self.resolution[1] * z)
    }

    /// World position of a lattice node.
    pub fn node_position(&self, x: usize, y: usize, z: usize) -> Vec3 {
        let c = [x, y, z];
        Vec3::from_fn(|k, _| self.bbox.min[k] + (self.bbox.max[k] - self.bbox.min[k]) * c[k] as f64 / (self.resolution[k] - 1) as f64)
    }

    pub fn raw_density(&self, node: usize) -> f64 {
        self.params[node * PARAMS_PER_NODE]
    }

    pub fn set_raw_density(&mut self, node: usize, value: f64) {
        self.params[node * PARAMS_PER_NODE] = value;
    }

    pub fn raw_color(&self, node: usize) -> [f64; 3] {
        let b = node * PARAMS_PER_NODE;
        [self.params[b + 1], self.params[b + 2], self.params[b + 3]]
    }

    pub fn set_raw_color(&mut self, node: usize, value: [f64; 3]) {
        let b = node * PARAMS_PER_NODE;
        self.params[b + 1..b + 4].copy_from_slice(&value);
    }

    pub fn zero_gradient(&self) -> Vec<f64> {
        vec![0.0; self.params.len()]
    }

    fn strides(&self) -> [usize; 2] {
        [self.resolution[0], self.resolution[0] * self.resolution[1]]
    }

    fn cell(&self, p: &Vec3) -> Option<Cell> {
        if !self.bbox.contains(p) {
            return None;
        }
        let mut base = [0usize; 3];
        let mut frac = [0.0; 3];
        for k in 0..3 {
            // Non-negative inside the box, so truncation is floor.
            let u = (p[k] - self.bbox.min[k]) * self.scale[k];
            let i = (u as usize).min(self.resolution[k] - 2);
            base[k] = i;
            frac[k] = u - i as f64;
        }
        let [sy, sz] = self.strides();
        Some(Cell {
            origin: base[0] + sy * base[1] + sz * base[2],
            frac,
        })
    }

    pub fn stencil(&self, p: &Vec3) -> Option<Stencil> {
        self.cell(p).map(|c| Stencil {
            nodes: corner_nodes(c.origin, self.strides()),
            weights: corner_weights(c.frac),
        })
    }

    pub fn sample(&self, p: &Vec3) -> FieldSample {
        let strides = self.strides();
        let Some(cell) = self.cell(p) else {
            return FieldSample {
                sigma: 0.0,
                color: OUTSIDE_COLOR,
                cell: None,
                dsigma: 0.0,
                strides,
            };
        };
        let mut raw = [0.0; 4];
        let weights = corner_weights(cell.frac);
        for (node, w) in corner_nodes(cell.origin, strides).into_iter().zip(weights) {
            let v = &self.params[node * PARAMS_PER_NODE..(node + 1) * PARAMS_PER_NODE];
            for k in 0..4 {
                raw[k] += w * v[k];
            }
        }
        let (sigma, dsigma) = softplus_with_slope(raw[0]);
        FieldSample {
            sigma,
            color: [sigmoid(raw[1]), sigmoid(raw[2]), sigmoid(raw[3])],
            cell: Some(cell),
            dsigma,
            strides,
        }
    }

    /// Density (per meter) and color at a world position.
    pub fn query(&self, p: &Vec3) -> (f64, [f64; 3]) {
        let s = self.sample(p);
        (s.sigma, s.color)
    }

    /// Accumulates the parameter gradient of a query at `p` given upstream
    /// `(dL/dsigma, dL/dc)`. Contributions add across calls.
    pub fn query_gradient(&self, p: &Vec3, dl_dsigma: f64, dl_dcolor: [f64; 3], grad: &mut [f64]) {
        self.sample(p).accumulate(dl_dsigma, dl_dcolor, grad);
    }
}

/// Near-transparent field with small seeded color noise.
pub fn init_field(resolution: [usize; 3], bbox: Aabb, seed: u64) -> Result<VoxelField> {
    if resolution.iter().any(|&n| n < 2) {
        return Err(Error::ConfigInvalid(format!(
            "field resolution {resolution:?} must be at least 2 per axis"
        )));
    }
    let nodes: usize = resolution.iter().product();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = Vec::with_capacity(nodes * PARAMS_PER_NODE);
    for _ in 0..nodes {
        params.push(INIT_RAW_DENSITY);
        for _ in 0..3 {
            params.push(rng.gen_range(-INIT_COLOR_RANGE..=INIT_COLOR_RANGE));
        }
    }
    VoxelField::new(resolution, bbox, params)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.99,
            epsilon: 1e-8,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub step: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl AdamState {
    pub fn new(len: usize, config: AdamConfig) -> Self {
        AdamState {
            config,
            step: 0,
            m: vec![0.0; len],
            v: vec![0.0; len],
        }
    }
}

/// One bias-corrected Adam update. No weight decay, no clipping.
pub fn adam_step(params: &mut [f64], grads: &[f64], state: &mut AdamState, lr: f64) -> Result<()> {
    if grads.len() != params.len() || state.m.len() != params.len() || state.v.len() != params.len() {
        return Err(Error::ShapeMismatch(format!(
            "params {}, grads {}, moments {}/{}",
            params.len(),
            grads.len(),
            state.m.len(),
            state.v.len()
        )));
    }
    let AdamConfig { beta1, beta2, epsilon } = state.config;
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - beta1.powi(t);
    let c2 = 1.0 - beta2.powi(t);
    for (((p, &g), m), v) in params.iter_mut().zip(grads).zip(&mut state.m).zip(&mut state.v) {
        *m = beta1 * *m + (1.0 - beta1) * g;
        *v = beta2 * *v + (1.0 - beta2) * g * g;
        let mh = *m / c1;
        let vh = *v / c2;
        *p -= lr * mh / (vh.sqrt() + epsilon);
    }
    Ok(())
}

/// Cosine decay from `start` at step 0 to `end` at `total`.
pub fn cosine_lr(start: f64, end: f64, step: usize, total: usize) -> f64 {
    if total == 0 {
        return end;
    }
    let x = (step.min(total) as f64) / total as f64;
    end + 0.5 * (start - end) * (1.0 + (std::f64::consts::PI * x).cos())
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub field: VoxelField,
    pub adam: AdamState,
    pub iteration: u64,
}

fn put_f64s(w: &mut impl Write, xs: &[f64]) -> std::io::Result<()> {
    for x in xs {
        w.write_all(&x.to_le_bytes())?;
    }
    Ok(())
}

fn get_u32(r: &mut impl Read) -> std::io::Result<u32> {
    let mut b = [0; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn get_u64(r: &mut impl Read) -> std::io::Result<u64> {
    let mut b = [0; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn get_f64s(r: &mut impl Read, n: usize) -> std::io::Result<Vec<f64>> {
    let mut out = Vec::with_capacity(n);
    let mut b = [0; 8];
    for _ in 0..n {
        r.read_exact(&mut b)?;
        out.push(f64::from_le_bytes(b));
    }
    Ok(out)
}

impl Checkpoint {
    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        let f = &self.field;
        w.write_all(MAGIC)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        for n in f.resolution {
            w.write_all(&(n as u32).to_le_bytes())?;
        }
        put_f64s(w, &f.bbox.min)?;
        put_f64s(w, &f.bbox.max)?;
        let c = self.adam.config;
        put_f64s(w, &[c.beta1, c.beta2, c.epsilon])?;
        w.write_all(&self.adam.step.to_le_bytes())?;
        w.write_all(&self.iteration.to_le_bytes())?;
        put_f64s(w, &f.params)?;
        put_f64s(w, &self.adam.m)?;
        put_f64s(w, &self.adam.v)?;
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(m.to_string());
        let mut magic = [0; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(bad("not a field checkpoint"));
        }
        let version = get_u32(r)?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported checkpoint version {version}")));
        }
        let mut resolution = [0; 3];
        for n in &mut resolution {
            *n = get_u32(r)? as usize;
        }
        let lo = get_f64s(r, 3)?;
        let hi = get_f64s(r, 3)?;
        let bbox = Aabb {
            min: [lo[0], lo[1], lo[2]],
            max: [hi[0], hi[1], hi[2]],
        };
        let c = get_f64s(r, 3)?;
        let config = AdamConfig {
            beta1: c[0],
            beta2: c[1],
            epsilon: c[2],
        };
        let step = get_u64(r)?;
        let iteration = get_u64(r)?;
        let nodes = resolution
            .iter()
            .try_fold(1usize, |a, &n| a.checked_mul(n))
            .ok_or_else(|| bad("resolution overflow"))?;
        if nodes == 0 || nodes > (1 << 30) {
            return Err(bad("implausible resolution"));
        }
        let len = nodes * PARAMS_PER_NODE;
        let params = get_f64s(r, len)?;
        let m = get_f64s(r, len)?;
        let v = get_f64s(r, len)?;
        let mut rest = [0u8; 1];
        if r.read(&mut rest)? != 0 {
            return Err(bad("trailing bytes"));
        }
        Ok(Checkpoint {
            field: VoxelField::new(resolution, bbox, params)?,
            adam: AdamState { config, step, m, v },
            iteration,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::MissingFile(path.to_path_buf()),
            _ => Error::Io(e),
        })?;
        Self::read_from(&mut BufReader::new(file))
    }
}
