//! The calibrated measurement scene: a two-sphere specular eye, pinhole
//! cameras and a planar screen, plus the JSON scene file.

use std::path::Path;

use nalgebra::{Matrix3, Unit};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{
    ray_sphere_roots, rotation_about, Ray, RigidPose, UnitVec3, Vec3, GEOM_EPS,
};

/// World up-axis; eye azimuth turns about it.
pub const WORLD_UP: Vec3 = Vec3::new(0.0, 1.0, 0.0);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Region {
    Cornea,
    Sclera,
}

/// Two-sphere eye: a large sclera sphere with a smaller cornea cap on the
/// optical axis.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EyeModel {
    pub sclera_center: Vec3,
    pub optical_axis: UnitVec3,
    pub sclera_radius: f64,
    pub cornea_radius: f64,
    /// Distance from the sclera center to the cornea center along the axis.
    pub cornea_offset: f64,
    /// Half-angle of the cornea cap at the cornea center, degrees.
    pub cornea_aperture: f64,
}

impl Default for EyeModel {
    fn default() -> Self {
        Self {
            sclera_center: Vec3::zeros(),
            optical_axis: Vec3::z_axis(),
            sclera_radius: 12.0,
            cornea_radius: 7.8,
            cornea_offset: 5.6,
            cornea_aperture: 40.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SurfaceHit {
    pub t: f64,
    pub point: Vec3,
    pub normal: UnitVec3,
    pub region: Region,
}

impl EyeModel {
    pub fn cornea_center(&self) -> Vec3 {
        self.sclera_center + self.optical_axis.as_ref() * self.cornea_offset
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |s: &str| Err(Error::InvalidScene { invariant: s.to_string() });
        let finite = self.sclera_center.iter().all(|c| c.is_finite())
            && [self.sclera_radius, self.cornea_radius, self.cornea_offset, self.cornea_aperture]
                .iter()
                .all(|c| c.is_finite());
        if !finite {
            return fail("eye parameters are finite");
        }
        if (self.optical_axis.norm() - 1.0).abs() > GEOM_EPS {
            return fail("optical_axis is a unit vector");
        }
        if self.cornea_radius <= 0.0 {
            return fail("cornea_radius > 0");
        }
        if self.cornea_radius >= self.sclera_radius {
            return fail("cornea_radius < sclera_radius");
        }
        if self.cornea_offset <= 0.0 {
            return fail("cornea_offset > 0");
        }
        if self.cornea_offset + self.cornea_radius <= self.sclera_radius {
            return fail("cornea_offset + cornea_radius > sclera_radius");
        }
        if !(self.cornea_aperture > 0.0 && self.cornea_aperture < 90.0) {
            return fail("0 < cornea_aperture < 90");
        }
        Ok(())
    }

    /// True when `p` lies inside the cornea cap cone (angle at the cornea
    /// center to the optical axis no larger than the aperture).
    #[inline]
    fn in_cornea_cap(&self, p: &Vec3, cornea_center: &Vec3, cos_aperture: f64) -> bool {
        let w = p - cornea_center;
        w.dot(&self.optical_axis) >= w.norm() * cos_aperture
    }

    /// Nearest intersection of `ray` with the composite cornea/sclera surface.
    pub fn surface_hit(&self, ray: &Ray) -> Option<SurfaceHit> {
        let cc = self.cornea_center();
        let cos_ap = self.cornea_aperture.to_radians().cos();
        let mut best: Option<(f64, Region)> = None;
        let mut consider = |t: f64, region: Region| {
            if t > GEOM_EPS && best.map_or(true, |(bt, _)| t < bt) {
                best = Some((t, region));
            }
        };
        if let Some((t0, t1)) = ray_sphere_roots(ray, &cc, self.cornea_radius) {
            for t in [t0, t1] {
                if self.in_cornea_cap(&ray.at(t), &cc, cos_ap) {
                    consider(t, Region::Cornea);
                }
            }
        }
        if let Some((t0, t1)) = ray_sphere_roots(ray, &self.sclera_center, self.sclera_radius) {
            for t in [t0, t1] {
                if !self.in_cornea_cap(&ray.at(t), &cc, cos_ap) {
                    consider(t, Region::Sclera);
                }
            }
        }
        let (t, region) = best?;
        let point = ray.at(t);
        let center = match region {
            Region::Cornea => cc,
            Region::Sclera => self.sclera_center,
        };
        Some(SurfaceHit { t, point, normal: Unit::new_normalize(point - center), region })
    }

    /// Turns the optical axis about the fixed sclera center: azimuth about the
    /// world up-axis, then elevation about the rotated right-axis (positive
    /// elevation tilts the axis toward up).
    pub fn rotated(&self, azimuth_deg: f64, elevation_deg: f64) -> EyeModel {
        let up = Unit::new_normalize(WORLD_UP);
        let a1 = rotation_about(&up, azimuth_deg) * self.optical_axis.into_inner();
        let right = a1.cross(&WORLD_UP);
        let axis = if right.norm() < GEOM_EPS || elevation_deg == 0.0 {
            a1
        } else {
            rotation_about(&Unit::new_normalize(right), elevation_deg) * a1
        };
        EyeModel { optical_axis: Unit::new_normalize(axis), ..*self }
    }

    /// The same eye with its sclera center moved by `offset`.
    pub fn translated(&self, offset: &Vec3) -> EyeModel {
        EyeModel { sclera_center: self.sclera_center + offset, ..*self }
    }
}

/// Free-function form of [`EyeModel::surface_hit`].
pub fn eye_surface_hit(eye: &EyeModel, ray: &Ray) -> Option<SurfaceHit> {
    eye.surface_hit(ray)
}

/// Free-function form of [`EyeModel::rotated`].
pub fn rotate_eye(eye: &EyeModel, azimuth_deg: f64, elevation_deg: f64) -> EyeModel {
    eye.rotated(azimuth_deg, elevation_deg)
}

/// Pinhole camera; pixel `(i, j)` has its center at integer coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraModel {
    /// Camera-to-world. Local +z is the viewing direction, +x right, +y down.
    pub pose: RigidPose,
    pub focal_length: f64,
    pub principal_point: (f64, f64),
    pub resolution: (usize, usize),
}

impl CameraModel {
    pub fn center(&self) -> Vec3 {
        self.pose.translation
    }

    pub fn width(&self) -> usize {
        self.resolution.0
    }

    pub fn height(&self) -> usize {
        self.resolution.1
    }

    pub fn pixel_ray_at(&self, x: f64, y: f64) -> Ray {
        let local = Vec3::new(
            (x - self.principal_point.0) / self.focal_length,
            (y - self.principal_point.1) / self.focal_length,
            1.0,
        );
        Ray::new(self.pose.translation, Unit::new_normalize(self.pose.transform_vector(&local)))
    }

    pub fn pixel_ray(&self, px: usize, py: usize) -> Ray {
        self.pixel_ray_at(px as f64, py as f64)
    }

    /// Sub-pixel image coordinates of a world point, `None` behind the camera.
    pub fn project(&self, p: &Vec3) -> Option<(f64, f64)> {
        let local = self.pose.inverse_transform_point(p);
        if local.z <= GEOM_EPS {
            return None;
        }
        Some((
            self.focal_length * local.x / local.z + self.principal_point.0,
            self.focal_length * local.y / local.z + self.principal_point.1,
        ))
    }

    fn validate(&self, index: usize) -> Result<()> {
        if !(self.focal_length > 0.0 && self.focal_length.is_finite()) {
            return Err(Error::InvalidScene { invariant: format!("cameras[{index}].focal_length > 0") });
        }
        if self.resolution.0 < 16 || self.resolution.1 < 16 {
            return Err(Error::InvalidScene {
                invariant: format!("cameras[{index}].resolution >= 16x16"),
            });
        }
        Ok(())
    }
}

/// Planar screen. The pose maps screen-local millimeters to world; pixel
/// `(u, v)` sits at local `(u·pitch, v·pitch, 0)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScreenModel {
    pub pose: RigidPose,
    pub resolution: (usize, usize),
    pub pixel_pitch: f64,
}

impl ScreenModel {
    pub fn normal(&self) -> Vec3 {
        self.pose.rotation * Vec3::z()
    }

    pub fn width(&self) -> usize {
        self.resolution.0
    }

    pub fn height(&self) -> usize {
        self.resolution.1
    }

    pub fn contains(&self, u: f64, v: f64) -> bool {
        u >= 0.0 && v >= 0.0 && u < self.resolution.0 as f64 && v < self.resolution.1 as f64
    }

    pub fn pixel_to_world(&self, u: f64, v: f64) -> Vec3 {
        self.pose.transform_point(&Vec3::new(u * self.pixel_pitch, v * self.pixel_pitch, 0.0))
    }

    /// Screen pixel coordinates of a world point (assumed on the plane).
    pub fn world_to_pixel(&self, p: &Vec3) -> (f64, f64) {
        let local = self.pose.inverse_transform_point(p);
        (local.x / self.pixel_pitch, local.y / self.pixel_pitch)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneConfig {
    pub screen: ScreenModel,
    pub cameras: Vec<CameraModel>,
    pub eye: EyeModel,
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.cameras.is_empty() || self.cameras.len() > 2 {
            return Err(Error::InvalidScene { invariant: "1 <= number of cameras <= 2".into() });
        }
        if !(self.screen.pixel_pitch > 0.0) {
            return Err(Error::InvalidScene { invariant: "screen.pixel_pitch > 0".into() });
        }
        for (i, cam) in self.cameras.iter().enumerate() {
            cam.validate(i)?;
        }
        self.eye.validate()
    }

    /// Stereo pipelines need both cameras.
    pub fn require_stereo(&self) -> Result<()> {
        if self.cameras.len() != 2 {
            return Err(Error::InvalidScene {
                invariant: "stereo reconstruction requires exactly 2 cameras".into(),
            });
        }
        Ok(())
    }

    /// The reference VR-headset-scale scene: eye at the origin looking along
    /// +z, a 120×68 mm screen 35 mm in front tilted by 30°, and two 128×128
    /// cameras 50 mm away, below the axis, 15° apart.
    pub fn default_scene() -> Self {
        let eye = EyeModel::default();

        let pitch = 0.2;
        let (sw, sh) = (600usize, 340usize);
        let tilt = Unit::new_normalize(Vec3::x());
        let screen_rot = rotation_about(&tilt, -30.0).into_inner()
            * Matrix3::from_diagonal(&Vec3::new(1.0, -1.0, -1.0));
        let screen_center = Vec3::new(0.0, 0.0, 35.0);
        let corner = screen_center
            - screen_rot.column(0) * (sw as f64 * pitch / 2.0)
            - screen_rot.column(1) * (sh as f64 * pitch / 2.0);
        let screen = ScreenModel {
            pose: RigidPose {
                rotation: nalgebra::Rotation3::from_matrix_unchecked(screen_rot),
                translation: corner,
            },
            resolution: (sw, sh),
            pixel_pitch: pitch,
        };

        let target = Vec3::new(0.0, -3.0, 8.0);
        let below = rotation_about(&tilt, 35.0) * Vec3::new(0.0, 0.0, 50.0);
        let up = Unit::new_normalize(WORLD_UP);
        let cameras = [-7.5, 7.5]
            .iter()
            .map(|&az| {
                let center = rotation_about(&up, az) * below;
                CameraModel {
                    pose: RigidPose::look_at(center, target, WORLD_UP),
                    focal_length: 300.0,
                    principal_point: (63.5, 63.5),
                    resolution: (128, 128),
                }
            })
            .collect();

        Self { screen, cameras, eye }
    }

    /// Scene with only camera `index` (for single-camera methods).
    pub fn single_camera(&self, index: usize) -> SceneConfig {
        SceneConfig { screen: self.screen, cameras: vec![self.cameras[index]], eye: self.eye }
    }

    /// Uniformly scales every length in the scene about the world origin.
    pub fn scaled(&self, factor: f64) -> SceneConfig {
        let mut s = self.clone();
        s.screen.pose = s.screen.pose.scaled(factor);
        s.screen.pixel_pitch *= factor;
        for cam in &mut s.cameras {
            cam.pose = cam.pose.scaled(factor);
        }
        s.eye.sclera_center *= factor;
        s.eye.sclera_radius *= factor;
        s.eye.cornea_radius *= factor;
        s.eye.cornea_offset *= factor;
        s
    }

    pub fn to_json_string(&self) -> String {
        let file = SceneFile::from(self);
        let mut s = serde_json::to_string_pretty(&file).expect("scene serializes");
        s.push('\n');
        s
    }

    pub fn from_json_str(text: &str) -> Result<Self> {
        let file: SceneFile = serde_json::from_str(text).map_err(|e| Error::Parse {
            line: e.line(),
            column: e.column(),
            message: e.to_string(),
        })?;
        let scene = file.into_scene()?;
        scene.validate()?;
        Ok(scene)
    }
}

pub fn load_scene(path: impl AsRef<Path>) -> Result<SceneConfig> {
    let text = std::fs::read_to_string(path)?;
    SceneConfig::from_json_str(&text)
}

pub fn save_scene(config: &SceneConfig, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, config.to_json_string())?;
    Ok(())
}

// ---- file schema -------------------------------------------------------

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PoseFile {
    /// Row-major 3×3 rotation, local-to-world.
    rotation: [[f64; 3]; 3],
    translation: [f64; 3],
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ScreenFile {
    pose: PoseFile,
    resolution: [usize; 2],
    pixel_pitch: f64,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CameraFile {
    pose: PoseFile,
    focal_length: f64,
    principal_point: [f64; 2],
    resolution: [usize; 2],
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct EyeFile {
    sclera_center: [f64; 3],
    optical_axis: [f64; 3],
    sclera_radius: f64,
    cornea_radius: f64,
    cornea_offset: f64,
    cornea_aperture: f64,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SceneFile {
    screen: ScreenFile,
    cameras: Vec<CameraFile>,
    eye: EyeFile,
}

impl From<&RigidPose> for PoseFile {
    fn from(p: &RigidPose) -> Self {
        let m = p.rotation.matrix();
        let row = |r: usize| [m[(r, 0)], m[(r, 1)], m[(r, 2)]];
        PoseFile {
            rotation: [row(0), row(1), row(2)],
            translation: [p.translation.x, p.translation.y, p.translation.z],
        }
    }
}

impl PoseFile {
    fn to_pose(&self) -> Result<RigidPose> {
        let r = &self.rotation;
        let m = Matrix3::new(
            r[0][0], r[0][1], r[0][2], r[1][0], r[1][1], r[1][2], r[2][0], r[2][1], r[2][2],
        );
        RigidPose::from_matrix(m, Vec3::from(self.translation))
    }
}

impl From<&SceneConfig> for SceneFile {
    fn from(s: &SceneConfig) -> Self {
        SceneFile {
            screen: ScreenFile {
                pose: PoseFile::from(&s.screen.pose),
                resolution: [s.screen.resolution.0, s.screen.resolution.1],
                pixel_pitch: s.screen.pixel_pitch,
            },
            cameras: s
                .cameras
                .iter()
                .map(|c| CameraFile {
                    pose: PoseFile::from(&c.pose),
                    focal_length: c.focal_length,
                    principal_point: [c.principal_point.0, c.principal_point.1],
                    resolution: [c.resolution.0, c.resolution.1],
                })
                .collect(),
            eye: EyeFile {
                sclera_center: s.eye.sclera_center.into(),
                optical_axis: s.eye.optical_axis.into_inner().into(),
                sclera_radius: s.eye.sclera_radius,
                cornea_radius: s.eye.cornea_radius,
                cornea_offset: s.eye.cornea_offset,
                cornea_aperture: s.eye.cornea_aperture,
            },
        }
    }
}

impl SceneFile {
    fn into_scene(self) -> Result<SceneConfig> {
        let axis = Vec3::from(self.eye.optical_axis);
        if (axis.norm() - 1.0).abs() > GEOM_EPS {
            return Err(Error::InvalidScene { invariant: "optical_axis is a unit vector".into() });
        }
        let cameras = self
            .cameras
            .iter()
            .map(|c| {
                Ok(CameraModel {
                    pose: c.pose.to_pose()?,
                    focal_length: c.focal_length,
                    principal_point: (c.principal_point[0], c.principal_point[1]),
                    resolution: (c.resolution[0], c.resolution[1]),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(SceneConfig {
            screen: ScreenModel {
                pose: self.screen.pose.to_pose()?,
                resolution: (self.screen.resolution[0], self.screen.resolution[1]),
                pixel_pitch: self.screen.pixel_pitch,
            },
            cameras,
            eye: EyeModel {
                sclera_center: Vec3::from(self.eye.sclera_center),
                // Kept bit-exact for save/load round trips.
                optical_axis: Unit::new_unchecked(axis),
                sclera_radius: self.eye.sclera_radius,
                cornea_radius: self.eye.cornea_radius,
                cornea_offset: self.eye.cornea_offset,
                cornea_aperture: self.eye.cornea_aperture,
            },
        })
    }
}
