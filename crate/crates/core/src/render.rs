//! Volume rendering along rays and its exact backward pass.
//!
//! For samples at distances `t_i` with spacings `delta_i`:
//! `alpha_i = 1 - exp(-sigma_i delta_i)`, `T_1 = 1`, `T_{i+1} = T_i (1 - alpha_i)`,
//! `w_i = T_i alpha_i`. Color is `sum w_i c_i` composited over black and
//! depth is `sum w_i t_i`, deliberately not divided by the accumulated weight.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::camera::{pixel_to_ray, CameraIntrinsics};
use crate::error::{Error, Result};
use crate::field::{FieldSample, VoxelField, OUTSIDE_COLOR};
use crate::geometry::{Pose, Ray};

pub const BACKGROUND: [f64; 3] = [0.0; 3];
pub const DEFAULT_SAMPLES: usize = 128;
pub const DEFAULT_NEAR: f64 = 0.05;

/// Sample distances, one per equal-width bin of `[near, far]`: the bin
/// center, or a uniform draw inside the bin when `jitter` is given.
pub fn sample_stratified(near: f64, far: f64, n: usize, jitter: Option<&mut ChaCha8Rng>) -> Result<Vec<f64>> {
    if !(near >= 0.0 && far > near && n >= 2 && far.is_finite()) {
        return Err(Error::InvalidBounds { near, far, n });
    }
    let width = (far - near) / n as f64;
    Ok(match jitter {
        None => (0..n).map(|i| near + (i as f64 + 0.5) * width).collect(),
        Some(rng) => (0..n)
            .map(|i| {
                let u: f64 = rng.gen();
                // Keep the draw strictly inside the bin so t stays increasing.
                near + (i as f64 + u.clamp(1e-9, 1.0 - 1e-9)) * width
            })
            .collect(),
    })
}

/// Spacings between consecutive samples; the last one reaches `far`.
pub fn sample_spacings(t: &[f64], far: f64) -> Vec<f64> {
    let n = t.len();
    (0..n).map(|i| if i + 1 < n { t[i + 1] - t[i] } else { far - t[i] }).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct RaySamples {
    pub t: Vec<f64>,
    pub delta: Vec<f64>,
    pub sigma: Vec<f64>,
    pub color: Vec<[f64; 3]>,
}

impl RaySamples {
    pub fn len(&self) -> usize {
        self.t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Weights {
    pub weights: Vec<f64>,
    /// `T_i` for each sample.
    pub transmittance: Vec<f64>,
    /// Transmittance left after the last sample.
    pub residual: f64,
}

pub fn compute_weights(sigma: &[f64], delta: &[f64]) -> Weights {
    let n = sigma.len();
    let mut weights = Vec::with_capacity(n);
    let mut transmittance = Vec::with_capacity(n);
    let mut t = 1.0;
    for i in 0..n {
        let optical = sigma[i] * delta[i];
        // exp(-0) is exactly 1; empty space is common enough to skip the call.
        let keep = if optical == 0.0 { 1.0 } else { (-optical).exp() };
        transmittance.push(t);
        weights.push(t * (1.0 - keep));
        t *= keep;
    }
    Weights {
        weights,
        transmittance,
        residual: t,
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RenderOutput {
    pub color: [f64; 3],
    pub depth: f64,
    pub accumulation: f64,
    pub weights: Vec<f64>,
}

pub fn render(samples: &RaySamples, weights: &Weights) -> RenderOutput {
    let mut color = [0.0; 3];
    let mut depth = 0.0;
    let mut acc = 0.0;
    for (i, &w) in weights.weights.iter().enumerate() {
        for k in 0..3 {
            color[k] += w * samples.color[i][k];
        }
        depth += w * samples.t[i];
        acc += w;
    }
    for k in 0..3 {
        color[k] += (1.0 - acc) * BACKGROUND[k];
    }
    RenderOutput {
        color,
        depth,
        accumulation: acc,
        weights: weights.weights.clone(),
    }
}

/// Gradients of a loss with respect to each sample's density and color.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleGradients {
    pub sigma: Vec<f64>,
    pub color: Vec<[f64; 3]>,
}

/// Upstream gradient on a rendered ray.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct RenderUpstream<'a> {
    pub color: [f64; 3],
    pub depth: f64,
    /// Direct gradient on each sample weight, if a loss reads the weights.
    pub weights: Option<&'a [f64]>,
}

pub fn render_backward(samples: &RaySamples, weights: &Weights, upstream: &RenderUpstream) -> SampleGradients {
    let n = samples.len();
    let w = &weights.weights;
    let gc = upstream.color;
    // Total gradient on each weight; the background term enters as 1 - sum w.
    let gw: Vec<f64> = (0..n)
        .map(|i| {
            let mut g = upstream.weights.map_or(0.0, |d| d[i]) + upstream.depth * samples.t[i];
            for k in 0..3 {
                g += gc[k] * (samples.color[i][k] - BACKGROUND[k]);
            }
            g
        })
        .collect();
    let mut dsigma = vec![0.0; n];
    // suffix = sum_{i > j} gw_i w_i
    let mut suffix = 0.0;
    for j in (0..n).rev() {
        let t_next = weights.transmittance[j] - w[j];
        dsigma[j] = samples.delta[j] * (gw[j] * t_next - suffix);
        suffix += gw[j] * w[j];
    }
    let dcolor = w.iter().map(|&wi| [gc[0] * wi, gc[1] * wi, gc[2] * wi]).collect();
    SampleGradients {
        sigma: dsigma,
        color: dcolor,
    }
}

/// A ray rendered through a field, keeping what the backward pass needs.
#[derive(Clone, Debug)]
pub struct TracedRay {
    pub samples: RaySamples,
    pub weights: Weights,
    pub output: RenderOutput,
    /// Field evaluations for samples `first..first + field_samples.len()`;
    /// the rest lie outside the field box.
    first: usize,
    field_samples: Vec<FieldSample>,
}

impl TracedRay {
    /// Adds the parameter gradient of this ray into `grad`.
    pub fn backward(&self, upstream: &RenderUpstream, grad: &mut [f64]) {
        let g = render_backward(&self.samples, &self.weights, upstream);
        self.accumulate(&g, grad);
    }

    /// Pushes per-sample gradients down to the field parameters.
    pub fn accumulate(&self, g: &SampleGradients, grad: &mut [f64]) {
        for (i, fs) in (self.first..).zip(&self.field_samples) {
            fs.accumulate(g.sigma[i], g.color[i], grad);
        }
    }
}

/// Slack on the box-clipped interval; points near its ends still go
/// through the field's own inside test.
const CLIP_SLACK: f64 = 1e-6;

pub fn trace_ray(field: &VoxelField, ray: &Ray, near: f64, far: f64, n: usize, jitter: Option<&mut ChaCha8Rng>) -> Result<TracedRay> {
    let t = sample_stratified(near, far, n, jitter)?;
    let delta = sample_spacings(&t, far);
    let (first, last) = match field.bbox().clip(&ray.origin, &ray.direction()) {
        Some((enter, exit)) => (
            t.partition_point(|&ti| ti < enter - CLIP_SLACK),
            t.partition_point(|&ti| ti <= exit + CLIP_SLACK),
        ),
        None => (0, 0),
    };
    let last = last.max(first);
    let field_samples: Vec<FieldSample> = t[first..last].iter().map(|&ti| field.sample(&ray.at(ti))).collect();
    let mut sigma = vec![0.0; n];
    let mut color = vec![OUTSIDE_COLOR; n];
    for (i, fs) in (first..).zip(&field_samples) {
        sigma[i] = fs.sigma;
        color[i] = fs.color;
    }
    let samples = RaySamples { t, delta, sigma, color };
    let weights = compute_weights(&samples.sigma, &samples.delta);
    let output = render(&samples, &weights);
    Ok(TracedRay {
        samples,
        weights,
        output,
        first,
        field_samples,
    })
}

pub fn render_pixel(field: &VoxelField, ray: &Ray, near: f64, far: f64, n: usize, jitter: Option<&mut ChaCha8Rng>) -> Result<RenderOutput> {
    Ok(trace_ray(field, ray, near, far, n, jitter)?.output)
}

/// Rendered color and depth of every pixel of a view, bin-center sampling.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageRender {
    pub width: usize,
    pub height: usize,
    pub rgb: Vec<[f64; 3]>,
    pub depth: Vec<f64>,
}

pub fn render_image(field: &VoxelField, intr: &CameraIntrinsics, pose: &Pose, near: f64, far: f64, n: usize) -> Result<ImageRender> {
    intr.validate()?;
    let w = intr.width;
    let out: Vec<RenderOutput> = (0..intr.pixel_count())
        .into_par_iter()
        .map(|i| {
            let ray = pixel_to_ray(intr, pose, i % w, i / w)?;
            render_pixel(field, &ray, near, far, n, None)
        })
        .collect::<Result<_>>()?;
    Ok(ImageRender {
        width: w,
        height: intr.height,
        rgb: out.iter().map(|o| o.color).collect(),
        depth: out.iter().map(|o| o.depth).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::{init_field, Aabb, VoxelField};
    use crate::geometry::Vec3;
    use approx::assert_abs_diff_eq;
    use proptest::{prop_assert, proptest};
    use rand::SeedableRng;

    fn brute_weights(sigma: &[f64], delta: &[f64]) -> Vec<f64> {
        (0..sigma.len())
            .map(|i| {
                let optical: f64 = (0..i).map(|j| sigma[j] * delta[j]).sum();
                (-optical).exp() * (1.0 - (-sigma[i] * delta[i]).exp())
            })
            .collect()
    }

    fn samples(t: Vec<f64>, far: f64, sigma: Vec<f64>, color: Vec<[f64; 3]>) -> RaySamples {
        let delta = sample_spacings(&t, far);
        RaySamples { t, delta, sigma, color }
    }

    #[test]
    fn stratified_centers_and_jitter() {
        assert_eq!(sample_stratified(0.0, 4.0, 4, None).unwrap(), vec![0.5, 1.5, 2.5, 3.5]);
        let mut r1 = ChaCha8Rng::seed_from_u64(4);
        let mut r2 = ChaCha8Rng::seed_from_u64(4);
        let a = sample_stratified(0.05, 7.0, 64, Some(&mut r1)).unwrap();
        let b = sample_stratified(0.05, 7.0, 64, Some(&mut r2)).unwrap();
        assert_eq!(a, b);
        let w = (7.0 - 0.05) / 64.0;
        for (i, t) in a.iter().enumerate() {
            assert!(*t > 0.05 + i as f64 * w && *t < 0.05 + (i + 1) as f64 * w);
        }
        assert!(matches!(sample_stratified(1.0, 1.0, 4, None), Err(Error::InvalidBounds { .. })));
        assert!(sample_stratified(0.1, 2.0, 1, None).is_err());
    }

    #[test]
    fn hand_weights() {
        let w = compute_weights(&[0.0, std::f64::consts::LN_2, 1e9], &[1.0; 3]);
        assert_abs_diff_eq!(w.transmittance[0], 1.0);
        assert_abs_diff_eq!(w.transmittance[1], 1.0);
        assert_abs_diff_eq!(w.transmittance[2], 0.5, epsilon = 1e-15);
        assert_abs_diff_eq!(w.weights[0], 0.0);
        assert_abs_diff_eq!(w.weights[1], 0.5, epsilon = 1e-15);
        assert_abs_diff_eq!(w.weights[2], 0.5, epsilon = 1e-15);
        assert_eq!(compute_weights(&[0.0; 5], &[0.3; 5]).weights, vec![0.0; 5]);
        let opaque = compute_weights(&[40.0, 1.0, 5.0], &[1.0; 3]);
        assert_abs_diff_eq!(opaque.weights[0], 1.0, epsilon = 1e-15);
        assert!(opaque.weights[1..].iter().all(|&x| x < 1e-15));
    }

    #[test]
    fn render_examples() {
        let s = samples(vec![1.0, 2.0, 3.0], 4.0, vec![0.0; 3], vec![[1.0; 3]; 3]);
        let w = Weights {
            weights: vec![0.0, 0.5, 0.5],
            transmittance: vec![1.0, 1.0, 0.5],
            residual: 0.0,
        };
        let out = render(&s, &w);
        assert_eq!(out.depth, 2.5);
        assert_eq!(out.color, [1.0; 3]);
        let empty = render(&s, &compute_weights(&[0.0; 3], &s.delta));
        assert_eq!((empty.color, empty.depth), ([0.0; 3], 0.0));
        let one = render(
            &samples(vec![2.0], 3.0, vec![0.0], vec![[0.2, 0.4, 0.6]]),
            &Weights {
                weights: vec![1.0],
                transmittance: vec![1.0],
                residual: 0.0,
            },
        );
        assert_eq!((one.color, one.depth), ([0.2, 0.4, 0.6], 2.0));
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..100 {
            let n = 32;
            let mut t = sample_stratified(0.1, 5.0, n, Some(&mut rng)).unwrap();
            t.sort_by(f64::total_cmp);
            let sigma: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..3.0)).collect();
            let color: Vec<[f64; 3]> = (0..n).map(|_| [rng.gen(), rng.gen(), rng.gen()]).collect();
            let s = samples(t, 5.0, sigma, color);
            let gw: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let up = RenderUpstream {
                color: [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)],
                depth: rng.gen_range(-1.0..1.0),
                weights: Some(&gw),
            };
            let loss = |s: &RaySamples| {
                let w = compute_weights(&s.sigma, &s.delta);
                let o = render(s, &w);
                let mut l = up.depth * o.depth;
                for k in 0..3 {
                    l += up.color[k] * o.color[k];
                }
                l + w.weights.iter().zip(&gw).map(|(a, b)| a * b).sum::<f64>()
            };
            let g = render_backward(&s, &compute_weights(&s.sigma, &s.delta), &up);
            let h = 1e-5;
            for j in 0..n {
                let mut p = s.clone();
                p.sigma[j] += h;
                let mut m = s.clone();
                m.sigma[j] -= h;
                let fd = (loss(&p) - loss(&m)) / (2.0 * h);
                let err = (fd - g.sigma[j]).abs();
                assert!(
                    err <= 1e-3 * fd.abs().max(g.sigma[j].abs()) || err < 1e-9,
                    "sigma {j}: {fd} vs {}",
                    g.sigma[j]
                );
                for k in 0..3 {
                    let mut p = s.clone();
                    p.color[j][k] += h;
                    let mut m = s.clone();
                    m.color[j][k] -= h;
                    let fd = (loss(&p) - loss(&m)) / (2.0 * h);
                    let err = (fd - g.color[j][k]).abs();
                    assert!(err <= 1e-3 * fd.abs().max(g.color[j][k].abs()) || err < 1e-9);
                }
            }
        }
    }

    #[test]
    fn backward_zero_and_single_sample() {
        let s = samples(vec![1.0, 2.0], 3.0, vec![0.4, 0.9], vec![[0.3; 3]; 2]);
        let w = compute_weights(&s.sigma, &s.delta);
        let g = render_backward(&s, &w, &RenderUpstream::default());
        assert!(g.sigma.iter().all(|&x| x == 0.0));
        let one = samples(vec![1.0], 2.0, vec![0.7], vec![[0.3; 3]]);
        let w1 = compute_weights(&one.sigma, &one.delta);
        let g1 = render_backward(
            &one,
            &w1,
            &RenderUpstream {
                color: [1.0, 0.0, 0.0],
                ..Default::default()
            },
        );
        assert_eq!(g1.color[0][0], w1.weights[0]);
    }

    fn room_box() -> Aabb {
        Aabb {
            min: [-1.0, -1.0, -1.0],
            max: [5.0, 1.0, 1.0],
        }
    }

    #[test]
    fn opaque_slab_depth() {
        let mut f = VoxelField::constant([61, 3, 3], room_box(), -30.0, [0.0; 3]).unwrap();
        for x in 0..61 {
            let px = f.node_position(x, 0, 0).x;
            if px >= 2.0 {
                for y in 0..3 {
                    for z in 0..3 {
                        let i = f.node_index(x, y, z);
                        f.set_raw_density(i, 60.0);
                    }
                }
            }
        }
        let ray = Ray::new(Vec3::zeros(), Vec3::x());
        let out = render_pixel(&f, &ray, 0.05, 4.5, 256, None).unwrap();
        assert!((1.9..=2.1).contains(&out.depth), "{}", out.depth);
        assert!(out.accumulation > 0.999);
    }

    #[test]
    fn empty_field_is_transparent() {
        let f = init_field([8, 8, 8], room_box(), 0).unwrap();
        let ray = Ray::new(Vec3::zeros(), Vec3::x());
        let out = render_pixel(&f, &ray, 0.05, 2.0, 128, None).unwrap();
        // Constant density integrated from the first sample to far.
        let first = 0.05 + 0.5 * 1.95 / 128.0;
        let closed = 1.0 - (-crate::field::softplus(-2.0) * (2.0 - first)).exp();
        assert_abs_diff_eq!(out.accumulation, closed, epsilon = 1e-12);
        assert!(out.accumulation < 0.25);
        let long = render_pixel(&f, &ray, 0.05, 5.0, 128, None).unwrap();
        assert!(1.0 - long.accumulation > 0.5);
    }

    #[test]
    fn quadrature_refinement() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut f = init_field([6, 4, 4], room_box(), 3).unwrap();
        for x in f.params_mut() {
            *x += rng.gen_range(-0.3..0.3);
        }
        let ray = Ray::new(Vec3::new(0.0, 0.1, -0.2), Vec3::new(1.0, 0.05, 0.1));
        let a = render_pixel(&f, &ray, 0.05, 4.0, 512, None).unwrap();
        let b = render_pixel(&f, &ray, 0.05, 4.0, 1024, None).unwrap();
        for k in 0..3 {
            assert!((a.color[k] - b.color[k]).abs() < 1e-3);
        }
    }

    #[test]
    fn traced_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut f = init_field([5, 4, 4], room_box(), 1).unwrap();
        for x in f.params_mut() {
            *x += rng.gen_range(-1.0..2.0);
        }
        let ray = Ray::new(Vec3::new(-0.5, 0.0, 0.0), Vec3::new(1.0, 0.2, -0.1));
        let up = RenderUpstream {
            color: [0.3, -0.7, 0.2],
            depth: 0.4,
            weights: None,
        };
        let loss = |f: &VoxelField| {
            let o = render_pixel(f, &ray, 0.05, 4.0, 48, None).unwrap();
            up.depth * o.depth + (0..3).map(|k| up.color[k] * o.color[k]).sum::<f64>()
        };
        let traced = trace_ray(&f, &ray, 0.05, 4.0, 48, None).unwrap();
        let mut g = f.zero_gradient();
        traced.backward(&up, &mut g);
        let h = 1e-5;
        let mut checked = 0;
        for i in 0..g.len() {
            if g[i] == 0.0 {
                continue;
            }
            let orig = f.params()[i];
            f.params_mut()[i] = orig + h;
            let lp = loss(&f);
            f.params_mut()[i] = orig - h;
            let lm = loss(&f);
            f.params_mut()[i] = orig;
            let fd = (lp - lm) / (2.0 * h);
            let err = (fd - g[i]).abs();
            assert!(err <= 1e-3 * fd.abs().max(g[i].abs()) || err < 1e-9, "{i}: {fd} vs {}", g[i]);
            checked += 1;
        }
        assert!(checked > 20);
    }

    proptest! {
        #[test]
        fn weights_match_explicit_sum(sigma in proptest::collection::vec(0.0f64..50.0, 1..256),
                                      seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let delta: Vec<f64> = sigma.iter().map(|_| rng.gen_range(1e-4..0.2)).collect();
            let w = compute_weights(&sigma, &delta);
            let b = brute_weights(&sigma, &delta);
            for (x, y) in w.weights.iter().zip(&b) {
                prop_assert!((x - y).abs() < 1e-9);
            }
            let total: f64 = w.weights.iter().sum::<f64>() + w.residual;
            prop_assert!((total - 1.0).abs() < 1e-9);
            prop_assert!(w.weights.iter().all(|&x| (0.0..=1.0).contains(&x)));
        }

        #[test]
        fn zero_density_insertion(sigma in proptest::collection::vec(0.0f64..5.0, 2..64),
                                  at in 0usize..64) {
            let at = at % sigma.len();
            let delta = vec![0.05; sigma.len()];
            let w = compute_weights(&sigma, &delta);
            let mut s2 = sigma.clone();
            let mut d2 = delta.clone();
            s2.insert(at, 0.0);
            d2.insert(at, 0.07);
            let w2 = compute_weights(&s2, &d2);
            let mut kept = w2.weights.clone();
            kept.remove(at);
            prop_assert!(w2.weights[at] == 0.0);
            for (a, b) in w.weights.iter().zip(&kept) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }

        #[test]
        fn denser_sample_never_raises_later_transmittance(
            sigma in proptest::collection::vec(0.0f64..5.0, 2..64), j in 0usize..64, bump in 0.0f64..10.0) {
            let j = j % sigma.len();
            let delta = vec![0.1; sigma.len()];
            let a = compute_weights(&sigma, &delta);
            let mut s2 = sigma.clone();
            s2[j] += bump;
            let b = compute_weights(&s2, &delta);
            for i in j + 1..sigma.len() {
                prop_assert!(b.transmittance[i] <= a.transmittance[i]);
            }
        }
    }
}
