//! Pinhole intrinsics, pixel rays and the unstitched 360-degree capture rig.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Pose, Ray, Vec3};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub width: usize,
    pub height: usize,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl CameraIntrinsics {
    pub fn validate(&self) -> Result<()> {
        let ok = self.width > 0
            && self.height > 0
            && self.fx > 0.0
            && self.fy > 0.0
            && self.cx > 0.0
            && self.cx < self.width as f64
            && self.cy > 0.0
            && self.cy < self.height as f64;
        if ok {
            Ok(())
        } else {
            Err(Error::ConfigInvalid(format!("bad intrinsics {self:?}")))
        }
    }

    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }

    /// Camera-frame direction (not normalized) through continuous pixel
    /// coordinates `(u, v)`; pixel centers sit at `+0.5`.
    pub fn camera_direction(&self, u: f64, v: f64) -> Vec3 {
        Vec3::new((u - self.cx) / self.fx, (v - self.cy) / self.fy, 1.0)
    }

    /// Continuous pixel coordinates of a camera-frame point in front of the camera.
    pub fn project_camera(&self, p: &Vec3) -> Option<(f64, f64)> {
        (p.z > 0.0).then(|| (self.fx * p.x / p.z + self.cx, self.fy * p.y / p.z + self.cy))
    }
}

pub fn intrinsics_from_fov(width: usize, height: usize, fov_h: f64, fov_v: f64) -> Result<CameraIntrinsics> {
    for fov in [fov_h, fov_v] {
        if !(fov > 0.0 && fov < 180.0) {
            return Err(Error::InvalidFov(fov));
        }
    }
    let intr = CameraIntrinsics {
        width,
        height,
        fx: (width as f64 / 2.0) / (fov_h.to_radians() / 2.0).tan(),
        fy: (height as f64 / 2.0) / (fov_v.to_radians() / 2.0).tan(),
        cx: width as f64 / 2.0,
        cy: height as f64 / 2.0,
    };
    intr.validate()?;
    Ok(intr)
}

/// World ray through the center of pixel `(px, py)`.
pub fn pixel_to_ray(intr: &CameraIntrinsics, pose: &Pose, px: usize, py: usize) -> Result<Ray> {
    if px >= intr.width || py >= intr.height {
        return Err(Error::OutOfBounds {
            x: px,
            y: py,
            width: intr.width,
            height: intr.height,
        });
    }
    Ok(subpixel_ray(intr, pose, px as f64 + 0.5, py as f64 + 0.5))
}

/// World ray through continuous pixel coordinates (no bounds check).
pub fn subpixel_ray(intr: &CameraIntrinsics, pose: &Pose, u: f64, v: f64) -> Ray {
    Ray::new(pose.translation, pose.rotation * intr.camera_direction(u, v))
}

/// Continuous pixel coordinates of a world point, if it is in front of the camera.
pub fn project(intr: &CameraIntrinsics, pose: &Pose, world: &Vec3) -> Option<(f64, f64)> {
    intr.project_camera(&pose.inverse_transform_point(world))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RigConfig {
    /// Station grid counts along x and y.
    pub stations: [usize; 2],
    /// Grid spacing along x and y in meters.
    pub spacing: [f64; 2],
    pub camera_height: f64,
    pub position_noise_std: f64,
    pub seed: u64,
    pub sweep_count: usize,
    pub sweep_step: f64,
    pub ceiling_view_count: usize,
    pub fov_h: f64,
    pub fov_v: f64,
    pub width: usize,
    pub height: usize,
    /// Angular margin kept between tilted ceiling views and the sweep ring, degrees.
    pub ceiling_tilt_margin: f64,
}

impl Default for RigConfig {
    fn default() -> Self {
        RigConfig {
            stations: [2, 2],
            spacing: [2.0, 2.0],
            camera_height: 1.5,
            position_noise_std: 0.1,
            seed: 0,
            sweep_count: 15,
            sweep_step: 24.0,
            ceiling_view_count: 5,
            fov_h: 27.0,
            fov_v: 40.0,
            width: 160,
            height: 288,
            ceiling_tilt_margin: 5.0,
        }
    }
}

impl RigConfig {
    /// Grid spacing that spreads `stations` evenly over a `width` x `depth` floor.
    pub fn spread_over(mut self, width: f64, depth: f64) -> Self {
        self.spacing = [width / (self.stations[0] as f64 + 1.0), depth / (self.stations[1] as f64 + 1.0)];
        self
    }

    pub fn views_per_station(&self) -> usize {
        self.sweep_count + self.ceiling_view_count
    }

    pub fn station_count(&self) -> usize {
        self.stations[0] * self.stations[1]
    }

    pub fn intrinsics(&self) -> Result<CameraIntrinsics> {
        intrinsics_from_fov(self.width, self.height, self.fov_h, self.fov_v)
    }

    pub fn validate(&self) -> Result<()> {
        let sweep_total = self.sweep_count as f64 * self.sweep_step;
        if self.sweep_count == 0 || (sweep_total - 360.0).abs() > 1e-9 {
            return Err(Error::ConfigInvalid(format!(
                "sweep of {} x {} degrees does not close the circle",
                self.sweep_count, self.sweep_step
            )));
        }
        if self.fov_h < self.sweep_step {
            return Err(Error::ConfigInvalid("sweep leaves horizontal gaps".into()));
        }
        if self.station_count() == 0 || self.camera_height <= 0.0 || self.position_noise_std < 0.0 {
            return Err(Error::ConfigInvalid("bad station layout".into()));
        }
        if self.ceiling_view_count != 0 && self.ceiling_view_count != 5 {
            return Err(Error::ConfigInvalid("ceiling views come as 0 or 5".into()));
        }
        self.intrinsics().map(|_| ())
    }
}

/// A posed camera in the rig.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RigPose {
    pub station: usize,
    pub pose: Pose,
}

/// Station-wise poses: a level sweep of `sweep_count` yaws followed by the
/// ceiling views (straight up, then four tilts toward yaw 0/90/180/270).
/// `room` is the floor extent (width along x, depth along y), centered on the origin.
pub fn generate_rig_poses(rig: &RigConfig, room: [f64; 2]) -> Result<Vec<RigPose>> {
    rig.validate()?;
    const MARGIN: f64 = 0.5;
    let mut rng = ChaCha8Rng::seed_from_u64(rig.seed);
    let noise = Normal::new(0.0, rig.position_noise_std.max(f64::MIN_POSITIVE)).map_err(|e| Error::ConfigInvalid(e.to_string()))?;
    let [nx, ny] = rig.stations;
    let tilt_from_vertical = (90.0 - rig.fov_v / 2.0 - rig.ceiling_tilt_margin).to_radians();
    let mut poses = Vec::with_capacity(rig.station_count() * rig.views_per_station());
    for j in 0..ny {
        for i in 0..nx {
            let station = j * nx + i;
            let gx = (i as f64 - (nx as f64 - 1.0) / 2.0) * rig.spacing[0];
            let gy = (j as f64 - (ny as f64 - 1.0) / 2.0) * rig.spacing[1];
            let (dx, dy) = if rig.position_noise_std > 0.0 {
                (noise.sample(&mut rng), noise.sample(&mut rng))
            } else {
                (0.0, 0.0)
            };
            let (x, y) = (gx + dx, gy + dy);
            if x.abs() > room[0] / 2.0 - MARGIN || y.abs() > room[1] / 2.0 - MARGIN {
                return Err(Error::StationOutsideRoom { station, x, y });
            }
            let position = Vec3::new(x, y, rig.camera_height);
            for k in 0..rig.sweep_count {
                let yaw = (k as f64 * rig.sweep_step).to_radians();
                poses.push(RigPose {
                    station,
                    pose: Pose::from_yaw_pitch(position, yaw, 0.0),
                });
            }
            if rig.ceiling_view_count == 5 {
                poses.push(RigPose {
                    station,
                    pose: Pose::from_yaw_pitch(position, 0.0, std::f64::consts::FRAC_PI_2),
                });
                for k in 0..4 {
                    let yaw = (k as f64 * 90.0).to_radians();
                    poses.push(RigPose {
                        station,
                        pose: Pose::from_yaw_pitch(position, yaw, std::f64::consts::FRAC_PI_2 - tilt_from_vertical),
                    });
                }
            }
        }
    }
    Ok(poses)
}
