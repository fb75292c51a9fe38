//! C ABI over the archdepth library.
//!
//! Every function returns an [`AdStatus`]; results come back through out
//! pointers. On failure the message is kept per thread and can be read with
//! [`ad_last_error`]. Datasets and fields are opaque handles that must be
//! released with their `_free` function.

#![allow(clippy::missing_safety_doc)]

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;
use std::slice;

use archdepth::dataset::{read_dataset, read_manifest, write_priors, Dataset};
use archdepth::field::{Checkpoint, VoxelField};
use archdepth::geometry::{ray_plane_intersect, Plane, Ray, Vec3};
use archdepth::train::{train, TrainConfig, TrainData};
use archdepth::Error;

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AdStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    ShapeMismatch = 4,
    Dataset = 5,
    Numeric = 6,
    Panic = 7,
}

/// A dataset loaded from disk.
pub struct AdDataset {
    path: PathBuf,
    inner: Dataset,
}

/// A voxel radiance field with its optimizer state.
pub struct AdField {
    checkpoint: Checkpoint,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> AdStatus {
    match e {
        Error::Io(_) | Error::MissingFile(_) | Error::Png(_) | Error::Checkpoint(_) => AdStatus::Io,
        Error::ShapeMismatch(_) | Error::CountMismatch(..) | Error::DimensionMismatch(_) => AdStatus::ShapeMismatch,
        Error::MalformedManifest(_) | Error::NonRigidPose(_) | Error::MissingPriors | Error::DepthOverflow { .. } => AdStatus::Dataset,
        Error::Collinear | Error::Degenerate | Error::EmptyMask | Error::EmptyBatch => AdStatus::Numeric,
        _ => AdStatus::InvalidArgument,
    }
}

/// Runs `f`, recording any error or panic as the thread's last error.
fn guard(f: impl FnOnce() -> Result<(), (AdStatus, String)>) -> AdStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => AdStatus::Ok,
        Ok(Err((status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic".into());
            AdStatus::Panic
        }
    }
}

fn lib_err(e: Error) -> (AdStatus, String) {
    (status_of(&e), e.to_string())
}

fn null(what: &str) -> (AdStatus, String) {
    (AdStatus::NullPointer, format!("{what} is null"))
}

unsafe fn path_arg(p: *const c_char) -> Result<PathBuf, (AdStatus, String)> {
    if p.is_null() {
        return Err(null("path"));
    }
    let s = CStr::from_ptr(p)
        .to_str()
        .map_err(|_| (AdStatus::InvalidArgument, "path is not UTF-8".to_string()))?;
    Ok(PathBuf::from(s))
}

unsafe fn rgb_arg<'a>(p: *const f64, pixels: usize, what: &str) -> Result<&'a [[f64; 3]], (AdStatus, String)> {
    if p.is_null() {
        return Err(null(what));
    }
    Ok(slice::from_raw_parts(p as *const [f64; 3], pixels))
}

/// Message of the last failed call on this thread, or null. Valid until the
/// next failing call on the same thread.
#[no_mangle]
pub extern "C" fn ad_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// PSNR in dB of two interleaved RGB images of `pixels` pixels, values in [0, 1].
#[no_mangle]
pub unsafe extern "C" fn ad_psnr(a: *const f64, b: *const f64, pixels: usize, out: *mut f64) -> AdStatus {
    guard(|| {
        let (a, b) = (rgb_arg(a, pixels, "a")?, rgb_arg(b, pixels, "b")?);
        if out.is_null() {
            return Err(null("out"));
        }
        *out = archdepth::metrics::psnr(a, b).map_err(lib_err)?;
        Ok(())
    })
}

/// Mean SSIM of two interleaved RGB images, row-major `width` x `height`.
#[no_mangle]
pub unsafe extern "C" fn ad_ssim(a: *const f64, b: *const f64, width: usize, height: usize, out: *mut f64) -> AdStatus {
    guard(|| {
        let n = width
            .checked_mul(height)
            .ok_or((AdStatus::InvalidArgument, "image too large".into()))?;
        let (a, b) = (rgb_arg(a, n, "a")?, rgb_arg(b, n, "b")?);
        if out.is_null() {
            return Err(null("out"));
        }
        *out = archdepth::metrics::ssim(a, b, width, height).map_err(lib_err)?;
        Ok(())
    })
}

/// Distance along the ray to the plane `normal . x = offset`. `hit` is set to
/// 0 when the ray is parallel or the plane is behind it; `t` is then left alone.
#[no_mangle]
pub unsafe extern "C" fn ad_ray_plane_intersect(
    origin: *const f64,
    direction: *const f64,
    normal: *const f64,
    offset: f64,
    t: *mut f64,
    hit: *mut i32,
) -> AdStatus {
    guard(|| {
        if origin.is_null() || direction.is_null() || normal.is_null() || t.is_null() || hit.is_null() {
            return Err(null("argument"));
        }
        let v = |p: *const f64| Vec3::from_column_slice(slice::from_raw_parts(p, 3));
        let (o, d, n) = (v(origin), v(direction), v(normal));
        if !(d.norm() > 0.0 && n.norm() > 0.0) {
            return Err((AdStatus::InvalidArgument, "zero direction or normal".into()));
        }
        match ray_plane_intersect(&Ray::new(o, d), &Plane::new(n, offset)) {
            Some(x) => {
                *t = x;
                *hit = 1;
            }
            None => *hit = 0,
        }
        Ok(())
    })
}

/// Per-sample weights of a ray from densities and spacings, plus the
/// transmittance left after the last sample.
#[no_mangle]
pub unsafe extern "C" fn ad_compute_weights(
    sigma: *const f64,
    delta: *const f64,
    n: usize,
    weights: *mut f64,
    residual: *mut f64,
) -> AdStatus {
    guard(|| {
        if sigma.is_null() || delta.is_null() || weights.is_null() || residual.is_null() {
            return Err(null("argument"));
        }
        let w = archdepth::render::compute_weights(slice::from_raw_parts(sigma, n), slice::from_raw_parts(delta, n));
        slice::from_raw_parts_mut(weights, n).copy_from_slice(&w.weights);
        *residual = w.residual;
        Ok(())
    })
}

/// Loads the dataset in directory `path`.
#[no_mangle]
pub unsafe extern "C" fn ad_dataset_open(path: *const c_char, out: *mut *mut AdDataset) -> AdStatus {
    guard(|| {
        let path = path_arg(path)?;
        if out.is_null() {
            return Err(null("out"));
        }
        let inner = read_dataset(&path).map_err(lib_err)?;
        *out = Box::into_raw(Box::new(AdDataset { path, inner }));
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn ad_dataset_free(ds: *mut AdDataset) {
    if !ds.is_null() {
        drop(Box::from_raw(ds));
    }
}

#[no_mangle]
pub unsafe extern "C" fn ad_dataset_view_count(ds: *const AdDataset, out: *mut usize) -> AdStatus {
    guard(|| {
        let ds = ds.as_ref().ok_or_else(|| null("dataset"))?;
        if out.is_null() {
            return Err(null("out"));
        }
        *out = ds.inner.views.len();
        Ok(())
    })
}

/// Computes wall-plane depth priors, writes them into the dataset directory
/// and reloads it. `rmse` receives the error against the stored reference
/// depth and `coverage` the covered fraction of architectural pixels.
#[no_mangle]
pub unsafe extern "C" fn ad_dataset_compute_priors(ds: *mut AdDataset, rmse: *mut f64, coverage: *mut f64) -> AdStatus {
    guard(|| {
        let ds = ds.as_mut().ok_or_else(|| null("dataset"))?;
        if rmse.is_null() || coverage.is_null() {
            return Err(null("out"));
        }
        let p = archdepth::cli::dataset_priors(&ds.inner).map_err(lib_err)?;
        let acc = archdepth::priors::prior_accuracy(
            p.maps
                .iter()
                .zip(&ds.inner.views)
                .map(|(m, v)| (m, v.depth.as_slice(), v.seg.as_slice())),
        );
        let mut manifest = read_manifest(&ds.path).map_err(lib_err)?;
        write_priors(&ds.path, &mut manifest, &p.maps.iter().map(|m| m.depth.clone()).collect::<Vec<_>>()).map_err(lib_err)?;
        ds.inner = read_dataset(&ds.path).map_err(lib_err)?;
        *rmse = acc.rmse;
        *coverage = acc.coverage;
        Ok(())
    })
}

/// Trains a field on `ds`. `config_json` is a JSON training config (null
/// for defaults); missing keys take their defaults.
#[no_mangle]
pub unsafe extern "C" fn ad_train(ds: *const AdDataset, config_json: *const c_char, out: *mut *mut AdField) -> AdStatus {
    guard(|| {
        let ds = ds.as_ref().ok_or_else(|| null("dataset"))?;
        if out.is_null() {
            return Err(null("out"));
        }
        let cfg: TrainConfig = if config_json.is_null() {
            TrainConfig::default()
        } else {
            let text = CStr::from_ptr(config_json)
                .to_str()
                .map_err(|_| (AdStatus::InvalidArgument, "config is not UTF-8".to_string()))?;
            serde_json::from_str(text).map_err(|e| (AdStatus::InvalidArgument, format!("config: {e}")))?
        };
        let outcome = train(&TrainData::from_dataset(&ds.inner), &cfg).map_err(lib_err)?;
        *out = Box::into_raw(Box::new(AdField {
            checkpoint: outcome.checkpoint,
        }));
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn ad_field_load(path: *const c_char, out: *mut *mut AdField) -> AdStatus {
    guard(|| {
        let path = path_arg(path)?;
        if out.is_null() {
            return Err(null("out"));
        }
        let checkpoint = Checkpoint::load(&path).map_err(lib_err)?;
        *out = Box::into_raw(Box::new(AdField { checkpoint }));
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn ad_field_save(field: *const AdField, path: *const c_char) -> AdStatus {
    guard(|| {
        let f = field.as_ref().ok_or_else(|| null("field"))?;
        let path = path_arg(path)?;
        f.checkpoint.save(&path).map_err(lib_err)
    })
}

#[no_mangle]
pub unsafe extern "C" fn ad_field_free(field: *mut AdField) {
    if !field.is_null() {
        drop(Box::from_raw(field));
    }
}

/// Density and RGB color of the field at world point `xyz`.
#[no_mangle]
pub unsafe extern "C" fn ad_field_query(field: *const AdField, xyz: *const f64, sigma: *mut f64, rgb: *mut f64) -> AdStatus {
    guard(|| {
        let f = field.as_ref().ok_or_else(|| null("field"))?;
        if xyz.is_null() || sigma.is_null() || rgb.is_null() {
            return Err(null("argument"));
        }
        let field: &VoxelField = &f.checkpoint.field;
        let (s, c) = field.query(&Vec3::from_column_slice(slice::from_raw_parts(xyz, 3)));
        *sigma = s;
        slice::from_raw_parts_mut(rgb, 3).copy_from_slice(&c);
        Ok(())
    })
}
