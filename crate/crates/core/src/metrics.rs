//! Image and depth metrics and evaluation reports.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, Split};
use crate::error::{Error, Result};
use crate::field::VoxelField;
use crate::render::{render_image, ImageRender};
use crate::scene::SurfaceClass;

pub const PSNR_CAP: f64 = 100.0;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

pub fn psnr(a: &[[f64; 3]], b: &[[f64; 3]]) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::ShapeMismatch(format!("{} vs {} pixels", a.len(), b.len())));
    }
    let se: f64 = a
        .iter()
        .zip(b)
        .map(|(x, y)| (0..3).map(|k| (x[k] - y[k]).powi(2)).sum::<f64>())
        .sum();
    let mse = se / (3 * a.len()) as f64;
    if mse < 1e-10 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(PSNR_CAP))
}

fn gaussian_window() -> [f64; SSIM_WINDOW] {
    let r = (SSIM_WINDOW / 2) as f64;
    let mut w = [0.0; SSIM_WINDOW];
    for (i, v) in w.iter_mut().enumerate() {
        let d = i as f64 - r;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = w.iter().sum();
    w.map(|v| v / s)
}

/// Valid-region separable filtering of one plane.
fn filter_valid(src: &[f64], width: usize, height: usize, k: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let (ow, oh) = (width - SSIM_WINDOW + 1, height - SSIM_WINDOW + 1);
    let mut rows = vec![0.0; ow * height];
    for y in 0..height {
        for x in 0..ow {
            rows[y * ow + x] = (0..SSIM_WINDOW).map(|i| k[i] * src[y * width + x + i]).sum();
        }
    }
    let mut out = vec![0.0; ow * oh];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..SSIM_WINDOW).map(|i| k[i] * rows[(y + i) * ow + x]).sum();
        }
    }
    out
}

/// Mean SSIM with an 11x11 Gaussian window (sigma 1.5) over valid window
/// positions, averaged across the three channels.
pub fn ssim(a: &[[f64; 3]], b: &[[f64; 3]], width: usize, height: usize) -> Result<f64> {
    if a.len() != b.len() || a.len() != width * height {
        return Err(Error::ShapeMismatch(format!(
            "{} vs {} pixels for {width}x{height}",
            a.len(),
            b.len()
        )));
    }
    if width < SSIM_WINDOW || height < SSIM_WINDOW {
        return Err(Error::TooSmall(format!("{width}x{height} image for SSIM")));
    }
    let k = gaussian_window();
    let mut total = 0.0;
    for c in 0..3 {
        let x: Vec<f64> = a.iter().map(|p| p[c]).collect();
        let y: Vec<f64> = b.iter().map(|p| p[c]).collect();
        let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
        let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
        let xy: Vec<f64> = x.iter().zip(&y).map(|(p, q)| p * q).collect();
        let [mx, my, sxx, syy, sxy] = [&x, &y, &xx, &yy, &xy].map(|p| filter_valid(p, width, height, &k));
        let mut sum = 0.0;
        for i in 0..mx.len() {
            let (ux, uy) = (mx[i], my[i]);
            let vx = sxx[i] - ux * ux;
            let vy = syy[i] - uy * uy;
            let cov = sxy[i] - ux * uy;
            sum += ((2.0 * ux * uy + SSIM_C1) * (2.0 * cov + SSIM_C2)) / ((ux * ux + uy * uy + SSIM_C1) * (vx + vy + SSIM_C2));
        }
        total += sum / mx.len() as f64;
    }
    Ok(total / 3.0)
}

/// Sum of squared errors and count over masked pixels.
pub fn depth_sq_error(rendered: &[f64], truth: &[f64], mask: &[bool]) -> Result<(f64, usize)> {
    if rendered.len() != truth.len() || rendered.len() != mask.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} rendered, {} truth, {} mask",
            rendered.len(),
            truth.len(),
            mask.len()
        )));
    }
    let mut se = 0.0;
    let mut n = 0;
    for i in 0..rendered.len() {
        if mask[i] {
            se += (rendered[i] - truth[i]).powi(2);
            n += 1;
        }
    }
    Ok((se, n))
}

pub fn depth_rmse(rendered: &[f64], truth: &[f64], mask: &[bool]) -> Result<f64> {
    let (se, n) = depth_sq_error(rendered, truth, mask)?;
    if n == 0 {
        return Err(Error::EmptyMask);
    }
    Ok((se / n as f64).sqrt())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ViewMetrics {
    pub view: usize,
    pub psnr: f64,
    pub ssim: f64,
    /// Depth RMSE over architectural pixels with a prior, meters.
    pub depth_rmse: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub views: Vec<ViewMetrics>,
    pub mean_psnr: f64,
    pub mean_ssim: f64,
    /// Pooled over all evaluated pixels.
    pub depth_rmse: Option<f64>,
    pub depth_pixels: usize,
    pub dataset_hash: Option<String>,
    pub config: serde_json::Value,
}

impl EvalReport {
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{:>6}  {:>9}  {:>7}  {:>11}", "view", "PSNR(dB)", "SSIM", "depth RMSE");
        for v in &self.views {
            let d = v.depth_rmse.map_or("n/a".to_string(), |d| format!("{d:.5}"));
            let _ = writeln!(s, "{:>6}  {:>9.3}  {:>7.4}  {:>11}", v.view, v.psnr, v.ssim, d);
        }
        let d = self.depth_rmse.map_or("n/a".to_string(), |d| format!("{d:.5}"));
        let _ = writeln!(s, "{:>6}  {:>9.3}  {:>7.4}  {:>11}", "mean", self.mean_psnr, self.mean_ssim, d);
        if let Some(h) = &self.dataset_hash {
            let _ = writeln!(s, "dataset {h}");
        }
        s
    }
}

/// Pixels counted in depth error: architectural pixels that have a prior
/// (all architectural pixels when the view has no prior map).
pub fn depth_mask(seg: &[SurfaceClass], prior: Option<&[f64]>) -> Vec<bool> {
    seg.iter()
        .enumerate()
        .map(|(i, c)| c.is_architectural() && prior.is_none_or(|p| p[i] > 0.0))
        .collect()
}

/// Scores already-rendered views against the dataset's ground truth.
pub fn evaluate_renders(ds: &Dataset, renders: &[(usize, ImageRender)], config: serde_json::Value) -> Result<EvalReport> {
    let mut views = Vec::with_capacity(renders.len());
    let (mut se, mut n) = (0.0, 0usize);
    for (vi, r) in renders {
        let v = ds.views.get(*vi).ok_or_else(|| Error::ShapeMismatch(format!("no view {vi}")))?;
        let (w, h) = (v.width(), v.height());
        if r.width != w || r.height != h {
            return Err(Error::ShapeMismatch(format!("render {}x{} for view {w}x{h}", r.width, r.height)));
        }
        let mask = depth_mask(&v.seg, ds.priors[*vi].as_deref());
        let (vse, vn) = depth_sq_error(&r.depth, &v.depth, &mask)?;
        se += vse;
        n += vn;
        views.push(ViewMetrics {
            view: *vi,
            psnr: psnr(&r.rgb, &v.rgb)?,
            ssim: ssim(&r.rgb, &v.rgb, w, h)?,
            depth_rmse: (vn > 0).then(|| (vse / vn as f64).sqrt()),
        });
    }
    if views.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let k = views.len() as f64;
    Ok(EvalReport {
        mean_psnr: views.iter().map(|v| v.psnr).sum::<f64>() / k,
        mean_ssim: views.iter().map(|v| v.ssim).sum::<f64>() / k,
        depth_rmse: (n > 0).then(|| (se / n as f64).sqrt()),
        depth_pixels: n,
        views,
        dataset_hash: None,
        config,
    })
}

/// Rendering settings for evaluation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RenderSettings {
    pub near: f64,
    pub far: f64,
    pub samples: usize,
}

pub fn render_split(field: &VoxelField, ds: &Dataset, split: Split, settings: &RenderSettings) -> Result<Vec<(usize, ImageRender)>> {
    ds.split_indices(split)
        .into_iter()
        .map(|i| {
            let v = &ds.views[i];
            Ok((
                i,
                render_image(field, &v.intrinsics, &v.pose, settings.near, settings.far, settings.samples)?,
            ))
        })
        .collect()
}

/// Renders every evaluation view of `ds` and scores it.
pub fn evaluate_field(field: &VoxelField, ds: &Dataset, settings: &RenderSettings, config: serde_json::Value) -> Result<EvalReport> {
    let renders = render_split(field, ds, Split::Eval, settings)?;
    evaluate_renders(ds, &renders, config)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::{prop_assert, proptest};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn noise(n: usize, seed: u64) -> Vec<[f64; 3]> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| [rng.gen(), rng.gen(), rng.gen()]).collect()
    }

    #[test]
    fn psnr_examples() {
        let a = noise(100, 1);
        assert_eq!(psnr(&a, &a).unwrap(), 100.0);
        let a = vec![[0.2; 3]; 50];
        let b = vec![[0.3; 3]; 50];
        assert_abs_diff_eq!(psnr(&a, &b).unwrap(), 20.0, epsilon = 1e-9);
        assert!(matches!(psnr(&a, &b[..3]), Err(Error::ShapeMismatch(_))));
    }

    fn reference_ssim(a: &[[f64; 3]], b: &[[f64; 3]], w: usize, h: usize) -> f64 {
        let mut win = [[0.0; 11]; 11];
        let mut s = 0.0;
        for (i, row) in win.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                let (dy, dx) = (i as f64 - 5.0, j as f64 - 5.0);
                *v = (-(dx * dx + dy * dy) / (2.0 * 1.5 * 1.5)).exp();
                s += *v;
            }
        }
        let mut total = 0.0;
        for c in 0..3 {
            let mut acc = 0.0;
            let mut count = 0;
            for y0 in 0..=h - 11 {
                for x0 in 0..=w - 11 {
                    let (mut mx, mut my) = (0.0, 0.0);
                    for i in 0..11 {
                        for j in 0..11 {
                            let p = (y0 + i) * w + x0 + j;
                            mx += win[i][j] / s * a[p][c];
                            my += win[i][j] / s * b[p][c];
                        }
                    }
                    let (mut vx, mut vy, mut cxy) = (0.0, 0.0, 0.0);
                    for i in 0..11 {
                        for j in 0..11 {
                            let p = (y0 + i) * w + x0 + j;
                            let g = win[i][j] / s;
                            vx += g * (a[p][c] - mx).powi(2);
                            vy += g * (b[p][c] - my).powi(2);
                            cxy += g * (a[p][c] - mx) * (b[p][c] - my);
                        }
                    }
                    acc += ((2.0 * mx * my + 1e-4) * (2.0 * cxy + 9e-4)) / ((mx * mx + my * my + 1e-4) * (vx + vy + 9e-4));
                    count += 1;
                }
            }
            total += acc / count as f64;
        }
        total / 3.0
    }

    #[test]
    fn ssim_matches_direct_reference() {
        let (w, h) = (23, 17);
        let a = noise(w * h, 5);
        let b: Vec<[f64; 3]> = a
            .iter()
            .zip(noise(w * h, 6))
            .map(|(x, n)| [0.7 * x[0] + 0.3 * n[0], 0.9 * x[1] + 0.1 * n[1], 0.5 * x[2] + 0.5 * n[2]])
            .collect();
        assert_abs_diff_eq!(ssim(&a, &b, w, h).unwrap(), reference_ssim(&a, &b, w, h), epsilon = 1e-6);
    }

    #[test]
    fn ssim_examples() {
        let a = noise(16 * 16, 2);
        assert_abs_diff_eq!(ssim(&a, &a, 16, 16).unwrap(), 1.0, epsilon = 1e-12);
        let inv: Vec<[f64; 3]> = a.iter().map(|p| p.map(|v| 1.0 - v)).collect();
        assert!(ssim(&a, &inv, 16, 16).unwrap() < 1.0);
        assert!(matches!(ssim(&a[..100], &a[..100], 10, 10), Err(Error::TooSmall(_))));
    }

    #[test]
    fn depth_rmse_examples() {
        let t = vec![2.0, 3.0, 4.0];
        assert_eq!(depth_rmse(&t, &t, &[true; 3]).unwrap(), 0.0);
        let r: Vec<f64> = t.iter().map(|d| d + 0.003).collect();
        assert_abs_diff_eq!(depth_rmse(&r, &t, &[true; 3]).unwrap(), 0.003, epsilon = 1e-12);
        assert!(matches!(depth_rmse(&r, &t, &[false; 3]), Err(Error::EmptyMask)));
    }

    proptest! {
        #[test]
        fn psnr_symmetric(seed in 0u64..1000) {
            let a = noise(64, seed);
            let b = noise(64, seed + 1);
            prop_assert!(psnr(&a, &b).unwrap() == psnr(&b, &a).unwrap());
            let s = ssim(&a, &b, 8, 8);
            prop_assert!(s.is_err());
            let a = noise(144, seed);
            let b = noise(144, seed + 7);
            let s = ssim(&a, &b, 12, 12).unwrap();
            prop_assert!((-1.0..=1.0).contains(&s));
        }
    }
}
