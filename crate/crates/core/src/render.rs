//! Forward deflectometry: trace every camera pixel to the eye, reflect it and
//! find the screen point it sees.

use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::error::Result;
use crate::geometry::{intersect_ray_plane, reflect, Ray};
use crate::pattern::PatternSpec;
use crate::rng::substream;
use crate::scene::{CameraModel, EyeModel, SceneConfig, ScreenModel, SurfaceHit};

/// Intensity of pixels that do not see the screen via the eye.
pub const BACKGROUND_INTENSITY: f64 = 0.02;

/// A mirror surface the renderer can trace against.
pub trait SpecularSurface: Sync {
    fn hit(&self, ray: &Ray) -> Option<SurfaceHit>;
}

impl SpecularSurface for EyeModel {
    #[inline]
    fn hit(&self, ray: &Ray) -> Option<SurfaceHit> {
        self.surface_hit(ray)
    }
}

/// Per-pixel screen coordinates observed via the mirror. Invalid pixels carry
/// NaN coordinates.
#[derive(Debug, Clone)]
pub struct CorrespondenceMap {
    pub width: usize,
    pub height: usize,
    pub u: Vec<f64>,
    pub v: Vec<f64>,
    pub valid: Vec<bool>,
}

/// Equality ignores the sentinel coordinates of invalid pixels.
impl PartialEq for CorrespondenceMap {
    fn eq(&self, other: &Self) -> bool {
        self.width == other.width
            && self.height == other.height
            && self.valid == other.valid
            && (0..self.valid.len()).all(|i| {
                !self.valid[i]
                    || (self.u[i].to_bits() == other.u[i].to_bits()
                        && self.v[i].to_bits() == other.v[i].to_bits())
            })
    }
}

impl CorrespondenceMap {
    pub fn invalid(width: usize, height: usize) -> Self {
        let n = width * height;
        Self { width, height, u: vec![f64::NAN; n], v: vec![f64::NAN; n], valid: vec![false; n] }
    }

    #[inline]
    pub fn index(&self, px: usize, py: usize) -> usize {
        py * self.width + px
    }

    pub fn get(&self, px: usize, py: usize) -> Option<(f64, f64)> {
        let i = self.index(px, py);
        self.valid[i].then(|| (self.u[i], self.v[i]))
    }

    pub fn n_valid(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }

    /// Bilinear lookup at sub-pixel `(x, y)`. `None` if any of the four
    /// contributing pixels is invalid or outside the map.
    pub fn sample_bilinear(&self, x: f64, y: f64) -> Option<(f64, f64)> {
        if !(x >= 0.0 && y >= 0.0) {
            return None;
        }
        let x0 = x.floor() as usize;
        let y0 = y.floor() as usize;
        if x0 + 1 >= self.width || y0 + 1 >= self.height {
            // Exactly on the last row/column is still sampleable.
            if x0 < self.width && y0 < self.height && x == x0 as f64 && y == y0 as f64 {
                return self.get(x0, y0);
            }
            return None;
        }
        let fx = x - x0 as f64;
        let fy = y - y0 as f64;
        let i00 = self.index(x0, y0);
        let i10 = i00 + 1;
        let i01 = i00 + self.width;
        let i11 = i01 + 1;
        if !(self.valid[i00] && self.valid[i10] && self.valid[i01] && self.valid[i11]) {
            return None;
        }
        let lerp = |c: &[f64]| {
            (1.0 - fy) * ((1.0 - fx) * c[i00] + fx * c[i10]) + fy * ((1.0 - fx) * c[i01] + fx * c[i11])
        };
        Some((lerp(&self.u), lerp(&self.v)))
    }
}

/// Camera intensity image.
#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl Frame {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), width * height);
        Self { width, height, data }
    }

    #[inline]
    pub fn at(&self, px: usize, py: usize) -> f64 {
        self.data[py * self.width + px]
    }
}

/// Full ground truth for one camera pixel.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TracedPixel {
    pub hit: SurfaceHit,
    /// Screen pixel coordinates, `None` when the reflection misses the panel.
    pub screen_uv: Option<(f64, f64)>,
}

/// Traces one pixel ray. `None` on a surface miss.
pub fn trace_pixel<S: SpecularSurface + ?Sized>(
    surface: &S,
    screen: &ScreenModel,
    camera: &CameraModel,
    px: usize,
    py: usize,
) -> Option<TracedPixel> {
    let ray = camera.pixel_ray(px, py);
    let hit = surface.hit(&ray)?;
    Some(TracedPixel { hit, screen_uv: reflect_to_screen(&ray, &hit, screen) })
}

#[inline]
fn reflect_to_screen(ray: &Ray, hit: &SurfaceHit, screen: &ScreenModel) -> Option<(f64, f64)> {
    // Light cannot arrive at the inside of the shell.
    if ray.dir.dot(&hit.normal) >= 0.0 {
        return None;
    }
    let r = reflect(&ray.dir, &hit.normal);
    let n = screen.normal();
    // The reflected ray must travel toward the displaying side of the panel.
    if r.dot(&n) >= 0.0 {
        return None;
    }
    let reflected = Ray::new(hit.point, r);
    let t = intersect_ray_plane(&reflected, &screen.pose.translation, &n)?;
    let (u, v) = screen.world_to_pixel(&reflected.at(t));
    screen.contains(u, v).then_some((u, v))
}

/// Ground truth for every pixel of camera `cam_index` (row-major).
pub fn render_truth(scene: &SceneConfig, cam_index: usize) -> Vec<Option<TracedPixel>> {
    render_truth_with(&scene.eye, &scene.screen, &scene.cameras[cam_index])
}

pub fn render_truth_with<S: SpecularSurface + ?Sized>(
    surface: &S,
    screen: &ScreenModel,
    camera: &CameraModel,
) -> Vec<Option<TracedPixel>> {
    let (w, h) = camera.resolution;
    (0..w * h)
        .into_par_iter()
        .map(|i| trace_pixel(surface, screen, camera, i % w, i / w))
        .collect()
}

/// Screen–camera correspondence for camera `cam_index`.
pub fn render_correspondence(scene: &SceneConfig, cam_index: usize) -> CorrespondenceMap {
    render_correspondence_with(&scene.eye, &scene.screen, &scene.cameras[cam_index])
}

pub fn render_correspondence_with<S: SpecularSurface + ?Sized>(
    surface: &S,
    screen: &ScreenModel,
    camera: &CameraModel,
) -> CorrespondenceMap {
    let (w, h) = camera.resolution;
    let uv: Vec<Option<(f64, f64)>> = (0..w * h)
        .into_par_iter()
        .map(|i| trace_pixel(surface, screen, camera, i % w, i / w).and_then(|t| t.screen_uv))
        .collect();
    correspondence_from_uv(w, h, &uv)
}

pub(crate) fn correspondence_from_uv(
    width: usize,
    height: usize,
    uv: &[Option<(f64, f64)>],
) -> CorrespondenceMap {
    let mut map = CorrespondenceMap::invalid(width, height);
    for (i, c) in uv.iter().enumerate() {
        if let Some((u, v)) = *c {
            map.u[i] = u;
            map.v[i] = v;
            map.valid[i] = true;
        }
    }
    map
}

/// Additive Gaussian intensity noise.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IntensityNoise {
    pub sigma: f64,
    pub seed: u64,
}

impl IntensityNoise {
    pub const NONE: IntensityNoise = IntensityNoise { sigma: 0.0, seed: 0 };
}

/// Camera image of `pattern` (frame `shift_index`) seen via the eye.
pub fn render_frame(
    scene: &SceneConfig,
    cam_index: usize,
    pattern: &PatternSpec,
    shift_index: usize,
    noise: IntensityNoise,
) -> Result<Frame> {
    let corr = render_correspondence(scene, cam_index);
    frame_from_correspondence(&corr, pattern, shift_index, noise)
}

/// Samples `pattern` through an existing correspondence map.
pub fn frame_from_correspondence(
    corr: &CorrespondenceMap,
    pattern: &PatternSpec,
    shift_index: usize,
    noise: IntensityNoise,
) -> Result<Frame> {
    pattern.validate()?;
    if shift_index >= pattern.n_frames() {
        return Err(crate::Error::InvalidPattern(format!(
            "shift index {shift_index} out of range for {} frame(s)",
            pattern.n_frames()
        )));
    }
    let data: Vec<f64> = (0..corr.width * corr.height)
        .into_par_iter()
        .map(|i| {
            let clean = if corr.valid[i] {
                pattern.sample(corr.u[i], corr.v[i], shift_index)
            } else {
                BACKGROUND_INTENSITY
            };
            if noise.sigma > 0.0 {
                let mut rng = substream(noise.seed, i as u64);
                let n: f64 = StandardNormal.sample(&mut rng);
                (clean + noise.sigma * n).clamp(0.0, 1.0)
            } else {
                clean
            }
        })
        .collect();
    Ok(Frame::new(corr.width, corr.height, data))
}

/// Adds i.i.d. Gaussian noise of `sigma` screen pixels to both coordinates of
/// every valid pixel. Noisy coordinates are clamped onto the panel so valid
/// pixels stay on the screen.
pub fn add_correspondence_noise(
    map: &CorrespondenceMap,
    sigma: f64,
    seed: u64,
    screen: &ScreenModel,
) -> CorrespondenceMap {
    if sigma == 0.0 {
        return map.clone();
    }
    let max_u = screen.width() as f64 - 1e-9;
    let max_v = screen.height() as f64 - 1e-9;
    let noisy: Vec<(f64, f64)> = (0..map.u.len())
        .into_par_iter()
        .map(|i| {
            if !map.valid[i] {
                return (map.u[i], map.v[i]);
            }
            let mut rng = substream(seed, i as u64);
            let du: f64 = StandardNormal.sample(&mut rng);
            let dv: f64 = StandardNormal.sample(&mut rng);
            (
                (map.u[i] + sigma * du).clamp(0.0, max_u),
                (map.v[i] + sigma * dv).clamp(0.0, max_v),
            )
        })
        .collect();
    let mut out = map.clone();
    for (i, (u, v)) in noisy.into_iter().enumerate() {
        out.u[i] = u;
        out.v[i] = v;
    }
    out
}
