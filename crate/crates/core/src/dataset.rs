//! On-disk dataset layout:
//!
//! ```text
//! manifest.json
//! rgb/{view:05}.png     8-bit RGB
//! depth/{view:05}.png   16-bit gray, value = round(depth / depth_scale)
//! seg/{view:05}.png     8-bit gray, class ids {0,1,2,3}
//! prior/{view:05}.png   same encoding as depth, 0 = no prior
//! ```
//!
//! The manifest stores per-view intrinsics and a row-major 4x4
//! camera-to-world matrix (camera x right, y down, z forward).

use std::fs;
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::camera::CameraIntrinsics;
use crate::error::{Error, Result};
use crate::geometry::Pose;
use crate::scene::{SurfaceClass, ViewRecord};

pub const FORMAT_VERSION: u32 = 1;
pub const DEFAULT_DEPTH_SCALE: f64 = 0.001;
const RIGID_TOL: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Eval,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ViewTag {
    pub station: usize,
    pub split: Split,
}

/// Dataset-wide fields of the manifest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub scene: String,
    pub scene_seed: u64,
    /// Width (x), depth (y), height (z) of the room, meters.
    pub room: [f64; 3],
    pub camera_height: f64,
    pub rig_seed: u64,
    pub depth_scale: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ViewEntry {
    pub index: usize,
    pub station: usize,
    pub split: Split,
    pub rgb: String,
    pub depth: String,
    pub seg: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prior: Option<String>,
    pub intrinsics: CameraIntrinsics,
    pub camera_to_world: [[f64; 4]; 4],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub units: String,
    #[serde(flatten)]
    pub meta: DatasetMeta,
    pub views: Vec<ViewEntry>,
}

impl DatasetManifest {
    pub fn room_height(&self) -> f64 {
        self.meta.room[2]
    }
}

/// A dataset loaded into memory.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub views: Vec<ViewRecord>,
    /// Per-view prior depth in meters, 0 where absent; `None` when the view has no prior file.
    pub priors: Vec<Option<Vec<f64>>>,
}

impl Dataset {
    pub fn split_indices(&self, split: Split) -> Vec<usize> {
        self.manifest.views.iter().filter(|v| v.split == split).map(|v| v.index).collect()
    }

    pub fn has_priors(&self) -> bool {
        !self.priors.is_empty() && self.priors.iter().all(Option::is_some)
    }
}

fn view_file(kind: &str, index: usize) -> String {
    format!("{kind}/{index:05}.png")
}

pub fn quantize_depth(depth: f64, scale: f64) -> Result<u16> {
    let q = (depth / scale).round();
    if !(0.0..=65535.0).contains(&q) || !q.is_finite() {
        return Err(Error::DepthOverflow { depth, scale });
    }
    Ok(q as u16)
}

fn write_png(path: &Path, width: usize, height: usize, color: png::ColorType, depth: png::BitDepth, data: &[u8]) -> Result<()> {
    let file = fs::File::create(path)?;
    let mut enc = png::Encoder::new(BufWriter::new(file), width as u32, height as u32);
    enc.set_color(color);
    enc.set_depth(depth);
    let mut writer = enc.write_header()?;
    writer.write_image_data(data)?;
    writer.finish()?;
    Ok(())
}

struct Decoded {
    width: usize,
    height: usize,
    color: png::ColorType,
    depth: png::BitDepth,
    data: Vec<u8>,
}

fn read_png(path: &Path) -> Result<Decoded> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let file = fs::File::open(path)?;
    let decoder = png::Decoder::new(BufReader::new(file));
    let mut reader = decoder.read_info()?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| Error::Png(format!("{}: image too large", path.display())))?;
    let mut data = vec![0; size];
    let info = reader.next_frame(&mut data)?;
    data.truncate(info.buffer_size());
    Ok(Decoded {
        width: info.width as usize,
        height: info.height as usize,
        color: info.color_type,
        depth: info.bit_depth,
        data,
    })
}

pub fn write_rgb_png(path: &Path, width: usize, height: usize, rgb: &[[f64; 3]]) -> Result<()> {
    let bytes: Vec<u8> = rgb
        .iter()
        .flat_map(|c| c.map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8))
        .collect();
    write_png(path, width, height, png::ColorType::Rgb, png::BitDepth::Eight, &bytes)
}

pub fn read_rgb_png(path: &Path) -> Result<(usize, usize, Vec<[f64; 3]>)> {
    let img = read_png(path)?;
    if img.color != png::ColorType::Rgb || img.depth != png::BitDepth::Eight {
        return Err(Error::MalformedManifest(format!("{} is not 8-bit RGB", path.display())));
    }
    let rgb = img
        .data
        .chunks_exact(3)
        .map(|c| [c[0] as f64 / 255.0, c[1] as f64 / 255.0, c[2] as f64 / 255.0])
        .collect();
    Ok((img.width, img.height, rgb))
}

/// Writes a 16-bit depth PNG; zero is reserved for "no value".
pub fn write_depth_png(path: &Path, width: usize, height: usize, depth: &[f64], scale: f64) -> Result<()> {
    let mut bytes = Vec::with_capacity(depth.len() * 2);
    for &d in depth {
        bytes.extend_from_slice(&quantize_depth(d, scale)?.to_be_bytes());
    }
    write_png(path, width, height, png::ColorType::Grayscale, png::BitDepth::Sixteen, &bytes)
}

pub fn read_depth_png(path: &Path, scale: f64) -> Result<(usize, usize, Vec<f64>)> {
    let img = read_png(path)?;
    if img.color != png::ColorType::Grayscale || img.depth != png::BitDepth::Sixteen {
        return Err(Error::MalformedManifest(format!("{} is not 16-bit gray", path.display())));
    }
    let depth = img
        .data
        .chunks_exact(2)
        .map(|c| u16::from_be_bytes([c[0], c[1]]) as f64 * scale)
        .collect();
    Ok((img.width, img.height, depth))
}

fn write_seg_png(path: &Path, width: usize, height: usize, seg: &[SurfaceClass]) -> Result<()> {
    let bytes: Vec<u8> = seg.iter().map(|&c| c as u8).collect();
    write_png(path, width, height, png::ColorType::Grayscale, png::BitDepth::Eight, &bytes)
}

fn read_seg_png(path: &Path) -> Result<(usize, usize, Vec<SurfaceClass>)> {
    let img = read_png(path)?;
    if img.color != png::ColorType::Grayscale || img.depth != png::BitDepth::Eight {
        return Err(Error::MalformedManifest(format!("{} is not 8-bit gray", path.display())));
    }
    let seg = img
        .data
        .iter()
        .map(|&id| SurfaceClass::from_id(id).ok_or_else(|| Error::MalformedManifest(format!("{}: unknown class id {id}", path.display()))))
        .collect::<Result<_>>()?;
    Ok((img.width, img.height, seg))
}

fn write_manifest(dir: &Path, manifest: &DatasetManifest) -> Result<()> {
    let mut text = serde_json::to_string_pretty(manifest)?;
    text.push('\n');
    fs::write(dir.join("manifest.json"), text)?;
    Ok(())
}

pub fn write_dataset(views: &[ViewRecord], tags: &[ViewTag], meta: &DatasetMeta, out_dir: &Path) -> Result<DatasetManifest> {
    if views.len() != tags.len() {
        return Err(Error::CountMismatch(views.len(), tags.len()));
    }
    for kind in ["rgb", "depth", "seg"] {
        fs::create_dir_all(out_dir.join(kind))?;
    }
    let mut entries = Vec::with_capacity(views.len());
    for (index, (view, tag)) in views.iter().zip(tags).enumerate() {
        let (w, h) = (view.width(), view.height());
        if view.rgb.len() != w * h || view.depth.len() != w * h || view.seg.len() != w * h {
            return Err(Error::DimensionMismatch(format!("view {index} arrays disagree with {w}x{h}")));
        }
        let entry = ViewEntry {
            index,
            station: tag.station,
            split: tag.split,
            rgb: view_file("rgb", index),
            depth: view_file("depth", index),
            seg: view_file("seg", index),
            prior: None,
            intrinsics: view.intrinsics,
            camera_to_world: view.pose.to_rows(),
        };
        write_rgb_png(&out_dir.join(&entry.rgb), w, h, &view.rgb)?;
        write_depth_png(&out_dir.join(&entry.depth), w, h, &view.depth, meta.depth_scale)?;
        write_seg_png(&out_dir.join(&entry.seg), w, h, &view.seg)?;
        entries.push(entry);
    }
    let manifest = DatasetManifest {
        format_version: FORMAT_VERSION,
        units: "meters".into(),
        meta: meta.clone(),
        views: entries,
    };
    write_manifest(out_dir, &manifest)?;
    Ok(manifest)
}

/// Adds `prior/` maps (meters, 0 = absent) to an existing dataset and rewrites the manifest.
pub fn write_priors(dir: &Path, manifest: &mut DatasetManifest, priors: &[Vec<f64>]) -> Result<()> {
    if priors.len() != manifest.views.len() {
        return Err(Error::CountMismatch(priors.len(), manifest.views.len()));
    }
    fs::create_dir_all(dir.join("prior"))?;
    for (entry, prior) in manifest.views.iter_mut().zip(priors) {
        let name = view_file("prior", entry.index);
        let intr = entry.intrinsics;
        if prior.len() != intr.pixel_count() {
            return Err(Error::DimensionMismatch(format!("prior for view {}", entry.index)));
        }
        write_depth_png(&dir.join(&name), intr.width, intr.height, prior, manifest.meta.depth_scale)?;
        entry.prior = Some(name);
    }
    write_manifest(dir, manifest)
}

pub fn read_manifest(dir: &Path) -> Result<DatasetManifest> {
    let path = dir.join("manifest.json");
    if !path.exists() {
        return Err(Error::MissingFile(path));
    }
    let text = fs::read_to_string(&path)?;
    let manifest: DatasetManifest = serde_json::from_str(&text).map_err(|e| Error::MalformedManifest(e.to_string()))?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(Error::MalformedManifest(format!(
            "unsupported format version {}",
            manifest.format_version
        )));
    }
    if !(manifest.meta.depth_scale > 0.0) {
        return Err(Error::MalformedManifest("depth_scale must be positive".into()));
    }
    for (i, v) in manifest.views.iter().enumerate() {
        if v.index != i {
            return Err(Error::MalformedManifest(format!("view {i} has index {}", v.index)));
        }
        v.intrinsics
            .validate()
            .map_err(|e| Error::MalformedManifest(format!("view {i}: {e}")))?;
        if Pose::from_rows(&v.camera_to_world, RIGID_TOL).is_none() {
            return Err(Error::NonRigidPose(i));
        }
    }
    Ok(manifest)
}

fn check_dims(path: &str, (w, h): (usize, usize), intr: &CameraIntrinsics) -> Result<()> {
    if (w, h) != (intr.width, intr.height) {
        return Err(Error::MalformedManifest(format!(
            "{path} is {w}x{h}, intrinsics say {}x{}",
            intr.width, intr.height
        )));
    }
    Ok(())
}

pub fn read_dataset(dir: &Path) -> Result<Dataset> {
    let manifest = read_manifest(dir)?;
    let scale = manifest.meta.depth_scale;
    let mut views = Vec::with_capacity(manifest.views.len());
    let mut priors = Vec::with_capacity(manifest.views.len());
    for v in &manifest.views {
        let intr = v.intrinsics;
        let (w, h, rgb) = read_rgb_png(&dir.join(&v.rgb))?;
        check_dims(&v.rgb, (w, h), &intr)?;
        let (w, h, depth) = read_depth_png(&dir.join(&v.depth), scale)?;
        check_dims(&v.depth, (w, h), &intr)?;
        let (w, h, seg) = read_seg_png(&dir.join(&v.seg))?;
        check_dims(&v.seg, (w, h), &intr)?;
        let prior = match &v.prior {
            Some(p) => {
                let (w, h, d) = read_depth_png(&dir.join(p), scale)?;
                check_dims(p, (w, h), &intr)?;
                Some(d)
            }
            None => None,
        };
        let pose = Pose::from_rows(&v.camera_to_world, RIGID_TOL).ok_or(Error::NonRigidPose(v.index))?;
        views.push(ViewRecord {
            rgb,
            depth,
            seg,
            intrinsics: intr,
            pose,
        });
        priors.push(prior);
    }
    Ok(Dataset { manifest, views, priors })
}

/// SHA-256 over the manifest and every referenced file, in manifest order.
pub fn dataset_hash(dir: &Path) -> Result<String> {
    let manifest = read_manifest(dir)?;
    let mut hasher = Sha256::new();
    hasher.update(fs::read(dir.join("manifest.json"))?);
    for v in &manifest.views {
        let files: Vec<&String> = [&v.rgb, &v.depth, &v.seg].into_iter().chain(v.prior.as_ref()).collect();
        for f in files {
            let path: PathBuf = dir.join(f);
            if !path.exists() {
                return Err(Error::MissingFile(path));
            }
            hasher.update(fs::read(path)?);
        }
    }
    Ok(hasher.finalize().iter().map(|b| format!("{b:02x}")).collect())
}
