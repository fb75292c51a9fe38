//! Rays, planes and rigid poses, plus the intersection and plane-fitting
//! routines shared by the scene oracle, the capture rig and the depth priors.

use nalgebra::{Matrix3, Matrix4, SymmetricEigen, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Vec3 = Vector3<f64>;
pub type Mat3 = Matrix3<f64>;

/// Rays parallel to a plane within this bound never intersect it.
pub const PARALLEL_EPS: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Ray {
    pub origin: Vec3,
    direction: Vec3,
}

impl Ray {
    /// Builds a ray, normalizing `direction`.
    pub fn new(origin: Vec3, direction: Vec3) -> Self {
        Ray {
            origin,
            direction: direction.normalize(),
        }
    }

    pub fn direction(&self) -> Vec3 {
        self.direction
    }

    pub fn at(&self, t: f64) -> Vec3 {
        self.origin + self.direction * t
    }
}

/// The plane `{ x : normal . x = offset }` with a unit normal.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Plane {
    pub normal: [f64; 3],
    pub offset: f64,
}

impl Plane {
    /// Normalizes `(normal, offset)` jointly so the plane is unchanged.
    pub fn new(normal: Vec3, offset: f64) -> Self {
        let len = normal.norm();
        Plane {
            normal: (normal / len).into(),
            offset: offset / len,
        }
    }

    pub fn normal(&self) -> Vec3 {
        Vec3::from(self.normal)
    }

    pub fn signed_distance(&self, p: &Vec3) -> f64 {
        self.normal().dot(p) - self.offset
    }

    /// Flips the plane so the normal follows the orientation tie-break:
    /// z > 0, else x > 0, else y > 0.
    pub fn canonical(self) -> Self {
        let n = self.normal;
        let key = if n[2].abs() > PARALLEL_EPS {
            n[2]
        } else if n[0].abs() > PARALLEL_EPS {
            n[0]
        } else {
            n[1]
        };
        if key < 0.0 {
            self.flipped()
        } else {
            self
        }
    }

    pub fn flipped(self) -> Self {
        Plane {
            normal: [-self.normal[0], -self.normal[1], -self.normal[2]],
            offset: -self.offset,
        }
    }
}

/// Rigid camera-to-world transform. Camera frame: x right, y down, z forward.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Pose {
    pub rotation: Mat3,
    pub translation: Vec3,
}

impl Pose {
    pub fn identity() -> Self {
        Pose {
            rotation: Mat3::identity(),
            translation: Vec3::zeros(),
        }
    }

    /// Camera at `position` looking along `yaw` (about world +z, from +x)
    /// and `pitch` (up from the horizon), both in radians, with no roll.
    pub fn from_yaw_pitch(position: Vec3, yaw: f64, pitch: f64) -> Self {
        let forward = Vec3::new(pitch.cos() * yaw.cos(), pitch.cos() * yaw.sin(), pitch.sin());
        let right = Vec3::new(yaw.sin(), -yaw.cos(), 0.0);
        let down = forward.cross(&right);
        Pose {
            rotation: Mat3::from_columns(&[right, down, forward]),
            translation: position,
        }
    }

    pub fn to_matrix(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }

    pub fn to_rows(&self) -> [[f64; 4]; 4] {
        let m = self.to_matrix();
        std::array::from_fn(|r| std::array::from_fn(|c| m[(r, c)]))
    }

    /// Reads a 4x4 row-major camera-to-world matrix, rejecting anything
    /// that is not a proper rigid motion within `tol` per entry.
    pub fn from_rows(rows: &[[f64; 4]; 4], tol: f64) -> Option<Self> {
        let rotation = Mat3::from_fn(|r, c| rows[r][c]);
        let translation = Vec3::new(rows[0][3], rows[1][3], rows[2][3]);
        if rows[3] != [0.0, 0.0, 0.0, 1.0] {
            return None;
        }
        let gram = rotation.transpose() * rotation - Mat3::identity();
        if gram.iter().any(|v| v.abs() > tol) || (rotation.determinant() - 1.0).abs() > tol {
            return None;
        }
        Some(Pose { rotation, translation })
    }

    pub fn is_rigid(&self, tol: f64) -> bool {
        Pose::from_rows(&self.to_rows(), tol).is_some()
    }

    pub fn transform_point(&self, p: &Vec3) -> Vec3 {
        self.rotation * p + self.translation
    }

    /// World point into the camera frame.
    pub fn inverse_transform_point(&self, p: &Vec3) -> Vec3 {
        self.rotation.transpose() * (p - self.translation)
    }
}

/// Smallest positive `t` at which `ray` meets `plane`.
pub fn ray_plane_intersect(ray: &Ray, plane: &Plane) -> Option<f64> {
    let n = plane.normal();
    let denom = n.dot(&ray.direction);
    if denom.abs() < PARALLEL_EPS {
        return None;
    }
    let t = (plane.offset - n.dot(&ray.origin)) / denom;
    (t > 0.0).then_some(t)
}

pub fn plane_from_three_points(p1: &Vec3, p2: &Vec3, p3: &Vec3) -> Result<Plane> {
    let cross = (p2 - p1).cross(&(p3 - p1));
    let scale = (p2 - p1).norm().max((p3 - p1).norm()).max((p3 - p2).norm());
    if cross.norm() < 1e-9 * scale || scale == 0.0 {
        return Err(Error::Collinear);
    }
    let normal = cross.normalize();
    let centroid = (p1 + p2 + p3) / 3.0;
    Ok(Plane::new(normal, normal.dot(&centroid)).canonical())
}

/// Total-least-squares plane fit and its RMS point-to-plane residual.
pub fn fit_plane_least_squares(points: &[Vec3]) -> Result<(Plane, f64)> {
    if points.len() < 3 {
        return Err(Error::Degenerate);
    }
    let n = points.len() as f64;
    let centroid = points.iter().fold(Vec3::zeros(), |acc, p| acc + p) / n;
    let mut cov = Mat3::zeros();
    for p in points {
        let d = p - centroid;
        cov += d * d.transpose();
    }
    let eig = SymmetricEigen::new(cov);
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    // Principal spreads as RMS extent along each axis.
    let spread = |i: usize| (eig.eigenvalues[order[i]].max(0.0) / n).sqrt();
    if spread(0) < 1e-9 && spread(1) < 1e-9 {
        return Err(Error::Degenerate);
    }
    let normal: Vec3 = eig.eigenvectors.column(order[0]).into_owned().normalize();
    let plane = Plane::new(normal, normal.dot(&centroid)).canonical();
    let rms = (points.iter().map(|p| plane.signed_distance(p).powi(2)).sum::<f64>() / n).sqrt();
    Ok((plane, rms))
}

pub fn parallel_plane_at_distance(plane: &Plane, signed_distance: f64) -> Plane {
    Plane {
        normal: plane.normal,
        offset: plane.offset + signed_distance,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_distr::{Distribution, Normal};

    fn z0() -> Plane {
        Plane::new(Vec3::z(), 0.0)
    }

    #[test]
    fn straight_drop_hits_floor() {
        let ray = Ray::new(Vec3::new(0.0, 0.0, 1.5), -Vec3::z());
        assert_eq!(ray_plane_intersect(&ray, &z0()), Some(1.5));
    }

    #[test]
    fn oblique_ray_hits_floor() {
        let ray = Ray::new(Vec3::new(0.0, 0.0, 1.5), Vec3::new(1.0, 0.0, -1.0));
        let t = ray_plane_intersect(&ray, &z0()).unwrap();
        assert_abs_diff_eq!(t, 1.5 * 2f64.sqrt(), epsilon = 1e-12);
        assert_abs_diff_eq!(ray.at(t).z, 0.0, epsilon = 1e-12);
    }

    #[test]
    fn parallel_and_backward_rays_miss() {
        let o = Vec3::new(0.0, 0.0, 1.5);
        assert_eq!(ray_plane_intersect(&Ray::new(o, Vec3::x()), &z0()), None);
        assert_eq!(ray_plane_intersect(&Ray::new(o, Vec3::z()), &z0()), None);
    }

    #[test]
    fn three_point_planes() {
        let p = plane_from_three_points(&Vec3::new(0.0, 0.0, 1.5), &Vec3::new(1.0, 0.0, 1.5), &Vec3::new(0.0, 1.0, 1.5)).unwrap();
        assert_abs_diff_eq!(p.normal()[2], 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(p.offset, 1.5, epsilon = 1e-12);

        let err = plane_from_three_points(&Vec3::zeros(), &Vec3::new(1.0, 1.0, 1.0), &Vec3::new(2.0, 2.0, 2.0));
        assert!(matches!(err, Err(Error::Collinear)));

        let pts = [Vec3::zeros(), Vec3::new(1.0, 0.0, 1.0), Vec3::new(0.0, 1.0, 1.0)];
        let p = plane_from_three_points(&pts[0], &pts[1], &pts[2]).unwrap();
        // (1,0,1) x (0,1,1) = (-1,-1,1)
        let expected = Vec3::new(-1.0, -1.0, 1.0).normalize();
        assert_abs_diff_eq!((p.normal() - expected).norm(), 0.0, epsilon = 1e-12);
        for q in &pts {
            assert!(p.signed_distance(q).abs() < 1e-9);
        }
    }

    #[test]
    fn orientation_tie_break() {
        let vertical = plane_from_three_points(&Vec3::new(3.0, 0.0, 0.0), &Vec3::new(3.0, 0.0, 1.0), &Vec3::new(3.0, 1.0, 0.0)).unwrap();
        assert_eq!(vertical.normal, [1.0, 0.0, 0.0]);
        assert_abs_diff_eq!(vertical.offset, 3.0, epsilon = 1e-12);
        let y_wall = Plane::new(-Vec3::y(), 4.0).canonical();
        assert_eq!(y_wall.normal, [0.0, 1.0, 0.0]);
        assert_eq!(y_wall.offset, -4.0);
    }

    #[test]
    fn least_squares_on_exact_plane() {
        let pts: Vec<Vec3> = (0..100)
            .map(|i| Vec3::new((i % 10) as f64 * 0.3 - 1.0, (i / 10) as f64 * 0.2, 2.8))
            .collect();
        let (p, rms) = fit_plane_least_squares(&pts).unwrap();
        assert_abs_diff_eq!(p.normal()[2], 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(p.offset, 2.8, epsilon = 1e-12);
        assert!(rms < 1e-9);
    }

    #[test]
    fn least_squares_with_noise_matches_svd_oracle() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let noise = Normal::new(0.0, 1e-3).unwrap();
        let pts: Vec<Vec3> = (0..400)
            .map(|i| {
                let y = (i % 20) as f64 * 0.2 - 2.0;
                let z = (i / 20) as f64 * 0.15 - 1.425;
                Vec3::new(3.0 + noise.sample(&mut rng), y + noise.sample(&mut rng), z + noise.sample(&mut rng))
            })
            .collect();
        let (mut p, rms) = fit_plane_least_squares(&pts).unwrap();
        // Noise makes the tiny z component decide the orientation; compare with +x.
        if p.normal[0] < 0.0 {
            p = p.flipped();
        }
        assert!((p.offset - 3.0).abs() < 1e-3, "offset {}", p.offset);
        assert!((rms - 1e-3).abs() < 2e-4, "rms {rms}");

        // Independent oracle: SVD of the centered data matrix.
        let n = pts.len();
        let c = pts.iter().fold(Vec3::zeros(), |a, q| a + q) / n as f64;
        let data = nalgebra::DMatrix::from_fn(n, 3, |r, col| pts[r][col] - c[col]);
        let svd = data.svd(false, true);
        let v_t = svd.v_t.unwrap();
        let (imin, _) = svd.singular_values.iter().enumerate().min_by(|a, b| a.1.total_cmp(b.1)).unwrap();
        let mut normal = Vec3::new(v_t[(imin, 0)], v_t[(imin, 1)], v_t[(imin, 2)]);
        if normal.x < 0.0 {
            normal = -normal;
        }
        assert!((normal - p.normal()).norm() < 1e-9);
        assert_abs_diff_eq!(normal.dot(&c), p.offset, epsilon = 1e-9);
        let oracle_rms = svd.singular_values[imin] / (n as f64).sqrt();
        assert_abs_diff_eq!(oracle_rms, rms, epsilon = 1e-9);
    }

    #[test]
    fn collinear_fit_is_degenerate() {
        let pts: Vec<Vec3> = (0..5).map(|i| Vec3::new(i as f64, 2.0 * i as f64, 1.0)).collect();
        assert!(matches!(fit_plane_least_squares(&pts), Err(Error::Degenerate)));
    }

    #[test]
    fn parallel_planes() {
        let cam = Plane::new(Vec3::z(), 1.5);
        assert_eq!(parallel_plane_at_distance(&cam, -1.5).offset, 0.0);
        assert_abs_diff_eq!(parallel_plane_at_distance(&cam, 1.3).offset, 2.8, epsilon = 1e-15);
        assert_eq!(parallel_plane_at_distance(&cam, 0.0), cam);
    }

    #[test]
    fn yaw_pitch_pose_is_rigid() {
        let pose = Pose::from_yaw_pitch(Vec3::new(1.0, 2.0, 1.5), 0.7, 0.4);
        assert!(pose.is_rigid(1e-12));
        let level = Pose::from_yaw_pitch(Vec3::zeros(), 0.0, 0.0);
        // Looking down +x with z up: camera y (down) maps to world -z.
        assert_abs_diff_eq!((level.rotation * Vec3::z() - Vec3::x()).norm(), 0.0, epsilon = 1e-15);
        assert_abs_diff_eq!((level.rotation * Vec3::y() + Vec3::z()).norm(), 0.0, epsilon = 1e-15);
    }

    fn unit_vec() -> impl Strategy<Value = Vec3> {
        (-1.0f64..1.0, -1.0f64..1.0, -1.0f64..1.0)
            .prop_filter("nonzero", |(x, y, z)| x * x + y * y + z * z > 1e-3)
            .prop_map(|(x, y, z)| Vec3::new(x, y, z).normalize())
    }

    proptest! {
        #[test]
        fn intersections_satisfy_plane_equation(
            o in (-5.0f64..5.0, -5.0f64..5.0, -5.0f64..5.0),
            d in unit_vec(),
            n in unit_vec(),
            offset in -5.0f64..5.0,
        ) {
            let ray = Ray::new(Vec3::new(o.0, o.1, o.2), d);
            let plane = Plane::new(n, offset);
            if let Some(t) = ray_plane_intersect(&ray, &plane) {
                prop_assert!(t > 0.0);
                prop_assert!(plane.signed_distance(&ray.at(t)).abs() < 1e-7 * (1.0 + t));
            }
        }

        #[test]
        fn parallel_plane_round_trip(n in unit_vec(), offset in -5.0f64..5.0, a in -8.0f64..8.0) {
            let p = Plane::new(n, offset);
            let back = parallel_plane_at_distance(&parallel_plane_at_distance(&p, a), -a);
            prop_assert_eq!(back.normal, p.normal);
            prop_assert!((back.offset - p.offset).abs() <= 4.0 * f64::EPSILON * (p.offset.abs() + a.abs()));
        }

        #[test]
        fn tls_reproduces_three_point_plane(
            n in unit_vec(),
            offset in -3.0f64..3.0,
            coords in proptest::collection::vec((-2.0f64..2.0, -2.0f64..2.0), 6..20),
        ) {
            let plane = Plane::new(n, offset);
            let normal = plane.normal();
            let helper = if normal.x.abs() < 0.9 { Vec3::x() } else { Vec3::y() };
            let u = normal.cross(&helper).normalize();
            let v = normal.cross(&u);
            let base = normal * plane.offset;
            let pts: Vec<Vec3> = coords.iter().map(|(a, b)| base + u * *a + v * *b).collect();
            if let (Ok(three), Ok((tls, _))) = (
                plane_from_three_points(&pts[0], &pts[1], &pts[2]),
                fit_plane_least_squares(&pts),
            ) {
                // Nearly collinear triples give a poorly conditioned normal.
                let cross = (pts[1] - pts[0]).cross(&(pts[2] - pts[0])).norm();
                prop_assume!(cross > 0.05);
                prop_assert!((three.normal() - tls.normal()).norm() < 1e-6);
                prop_assert!((three.offset - tls.offset).abs() < 1e-6);
            }
        }
    }
}
