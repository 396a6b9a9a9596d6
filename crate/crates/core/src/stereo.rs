//! Stereo resolution of the deflectometric normal–depth ambiguity.
//!
//! Along each camera-1 ray every depth hypothesis implies a surface normal
//! (bisector of the camera and screen directions). The second camera sees the
//! same surface point through its own correspondence; only at the true depth
//! do the two implied normals agree.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::Unit;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geometry::{half_vector_normal, UnitVec3, Vec3};
use crate::render::CorrespondenceMap;
use crate::scene::{CameraModel, SceneConfig};

/// Depth hypotheses along the camera-1 ray, millimeters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DepthSweepParams {
    pub t_min: f64,
    pub t_max: f64,
    pub n_steps: usize,
    /// Parabolic sub-step refinement around the best grid depth.
    pub refine: bool,
}

impl DepthSweepParams {
    /// ±8 mm around a nominal depth: camera-1 distance to the eye center,
    /// minus the sclera radius, plus 2 mm.
    pub fn for_scene(scene: &SceneConfig) -> Self {
        let nominal =
            (scene.cameras[0].center() - scene.eye.sclera_center).norm() - scene.eye.sclera_radius + 2.0;
        Self { t_min: nominal - 8.0, t_max: nominal + 8.0, n_steps: 256, refine: true }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.t_min < self.t_max) || self.t_min <= 0.0 {
            return Err(Error::InvalidConfig("depth sweep needs 0 < t_min < t_max".into()));
        }
        if self.n_steps < 16 {
            return Err(Error::InvalidConfig("depth sweep needs at least 16 steps".into()));
        }
        Ok(())
    }

    pub fn step(&self) -> f64 {
        (self.t_max - self.t_min) / (self.n_steps - 1) as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NormalSample {
    pub point: Vec3,
    pub normal: UnitVec3,
    pub pixel: (usize, usize),
    /// Stereo normal disagreement at the chosen depth, radians.
    pub consistency: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NormalField {
    pub samples: Vec<NormalSample>,
    pub camera: usize,
}

/// Surface normal implied by depth `t` along the ray of `pixel`.
pub fn candidate_normal(
    camera: &CameraModel,
    pixel: (f64, f64),
    t: f64,
    screen_point: &Vec3,
) -> Result<NormalSample> {
    let ray = camera.pixel_ray_at(pixel.0, pixel.1);
    let p = ray.at(t);
    let normal = bisector_at(&camera.center(), &p, screen_point)?;
    Ok(NormalSample {
        point: p,
        normal,
        pixel: (pixel.0.round() as usize, pixel.1.round() as usize),
        consistency: 0.0,
    })
}

#[inline]
fn bisector_at(camera_center: &Vec3, p: &Vec3, screen_point: &Vec3) -> Result<UnitVec3> {
    let to_cam = camera_center - p;
    let to_screen = screen_point - p;
    if to_cam.norm() < 1e-12 || to_screen.norm() < 1e-12 {
        return Err(Error::DegenerateBisector);
    }
    half_vector_normal(&Unit::new_normalize(to_cam), &Unit::new_normalize(to_screen))
}

/// Precomputed per-pixel data for one camera-1 ray.
struct RayContext<'a> {
    scene: &'a SceneConfig,
    corr2: &'a CorrespondenceMap,
    origin: Vec3,
    dir: Vec3,
    screen1: Vec3,
}

impl RayContext<'_> {
    fn new<'a>(
        scene: &'a SceneConfig,
        pixel1: (usize, usize),
        corr1: &CorrespondenceMap,
        corr2: &'a CorrespondenceMap,
    ) -> Option<RayContext<'a>> {
        let (u, v) = corr1.get(pixel1.0, pixel1.1)?;
        let ray = scene.cameras[0].pixel_ray(pixel1.0, pixel1.1);
        Some(RayContext {
            scene,
            corr2,
            origin: ray.origin,
            dir: ray.dir.into_inner(),
            screen1: scene.screen.pixel_to_world(u, v),
        })
    }

    /// Normal from camera 1, normal from camera 2, and their angle.
    fn evaluate(&self, t: f64) -> Option<(Vec3, UnitVec3, f64)> {
        let p = self.origin + self.dir * t;
        let n1 = bisector_at(&self.origin, &p, &self.screen1).ok()?;
        let cam2 = &self.scene.cameras[1];
        let (x2, y2) = cam2.project(&p)?;
        let (u2, v2) = self.corr2.sample_bilinear(x2, y2)?;
        let s2 = self.scene.screen.pixel_to_world(u2, v2);
        let n2 = bisector_at(&cam2.center(), &p, &s2).ok()?;
        let angle = n1.dot(&n2).clamp(-1.0, 1.0).acos();
        Some((p, n1, angle))
    }
}

/// Angle (radians) between the normals the two cameras imply at depth `t`
/// along the camera-1 ray of `pixel1`; `None` when camera 2 has no usable
/// correspondence there.
pub fn stereo_consistency(
    scene: &SceneConfig,
    pixel1: (usize, usize),
    t: f64,
    corr1: &CorrespondenceMap,
    corr2: &CorrespondenceMap,
) -> Option<f64> {
    RayContext::new(scene, pixel1, corr1, corr2)?.evaluate(t).map(|(_, _, a)| a)
}

/// Minimum usable hypotheses for a depth decision.
const MIN_USABLE: usize = 8;

/// Sweeps depth along the camera-1 ray and keeps the most consistent one.
pub fn solve_depth(
    scene: &SceneConfig,
    pixel1: (usize, usize),
    corr1: &CorrespondenceMap,
    corr2: &CorrespondenceMap,
    params: &DepthSweepParams,
) -> Option<NormalSample> {
    let ctx = RayContext::new(scene, pixel1, corr1, corr2)?;
    let step = params.step();
    let scores: Vec<Option<f64>> = (0..params.n_steps)
        .map(|k| ctx.evaluate(params.t_min + step * k as f64).map(|(_, _, a)| a))
        .collect();
    let usable = scores.iter().flatten().count();
    if usable < MIN_USABLE {
        return None;
    }
    let (best_k, _) = scores
        .iter()
        .enumerate()
        .filter_map(|(k, s)| s.map(|s| (k, s)))
        .min_by(|a, b| a.1.total_cmp(&b.1))?;
    let t_grid = params.t_min + step * best_k as f64;
    let (mut p, mut n, mut c) = ctx.evaluate(t_grid)?;

    if params.refine && best_k > 0 && best_k + 1 < params.n_steps {
        if let (Some(fm), Some(f0), Some(fp)) = (scores[best_k - 1], scores[best_k], scores[best_k + 1]) {
            // The angle is V-shaped around a consistent depth; its square is
            // the smooth quantity to fit.
            let (fm, f0, fp) = (fm * fm, f0 * f0, fp * fp);
            let curvature = fm - 2.0 * f0 + fp;
            if curvature > 0.0 {
                let offset = (0.5 * (fm - fp) / curvature).clamp(-1.0, 1.0);
                if let Some((pr, nr, cr)) = ctx.evaluate(t_grid + offset * step) {
                    if cr <= c {
                        (p, n, c) = (pr, nr, cr);
                    }
                }
            }
        }
    }
    Some(NormalSample { point: p, normal: n, pixel: pixel1, consistency: c })
}

/// Samples with fewer survivors than this are reported as an empty field.
pub const MIN_FIELD_SAMPLES: usize = 100;

/// Depth-resolved normals at every `stride`-th valid camera-1 pixel, sorted
/// by pixel index.
pub fn reconstruct_field(
    scene: &SceneConfig,
    corr1: &CorrespondenceMap,
    corr2: &CorrespondenceMap,
    params: &DepthSweepParams,
    stride: usize,
) -> Result<NormalField> {
    scene.require_stereo()?;
    params.validate()?;
    let stride = stride.max(1);
    let (w, h) = (corr1.width, corr1.height);
    let pixels: Vec<(usize, usize)> = (0..h)
        .step_by(stride)
        .flat_map(|py| (0..w).step_by(stride).map(move |px| (px, py)))
        .filter(|&(px, py)| corr1.valid[py * w + px])
        .collect();
    let samples: Vec<NormalSample> = pixels
        .par_iter()
        .map(|&px| solve_depth(scene, px, corr1, corr2, params))
        .collect::<Vec<_>>()
        .into_iter()
        .flatten()
        .collect();
    if samples.len() < MIN_FIELD_SAMPLES {
        return Err(Error::EmptyField(samples.len()));
    }
    Ok(NormalField { samples, camera: 0 })
}

pub const NORMAL_FIELD_HEADER: &str = "px,py,X,Y,Z,nx,ny,nz,consistency";

impl NormalField {
    pub fn to_csv(&self) -> String {
        let mut out = String::with_capacity(64 * (self.samples.len() + 1));
        out.push_str(NORMAL_FIELD_HEADER);
        out.push('\n');
        for s in &self.samples {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{},{}",
                s.pixel.0,
                s.pixel.1,
                s.point.x,
                s.point.y,
                s.point.z,
                s.normal.x,
                s.normal.y,
                s.normal.z,
                s.consistency
            );
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, header)) if header.trim() == NORMAL_FIELD_HEADER => {}
            _ => {
                return Err(Error::Parse {
                    line: 1,
                    column: 1,
                    message: format!("expected header `{NORMAL_FIELD_HEADER}`"),
                })
            }
        }
        let mut samples = Vec::new();
        for (ln, line) in lines {
            if line.trim().is_empty() {
                continue;
            }
            let parse_err = |col: usize, msg: String| Error::Parse { line: ln + 1, column: col, message: msg };
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != 9 {
                return Err(parse_err(1, format!("expected 9 fields, got {}", fields.len())));
            }
            let num = |k: usize| -> Result<f64> {
                fields[k].trim().parse::<f64>().map_err(|e| parse_err(k + 1, e.to_string()))
            };
            let int = |k: usize| -> Result<usize> {
                fields[k].trim().parse::<usize>().map_err(|e| parse_err(k + 1, e.to_string()))
            };
            let normal = Vec3::new(num(5)?, num(6)?, num(7)?);
            if (normal.norm() - 1.0).abs() > 1e-6 {
                return Err(parse_err(6, "normal is not a unit vector".into()));
            }
            samples.push(NormalSample {
                pixel: (int(0)?, int(1)?),
                point: Vec3::new(num(2)?, num(3)?, num(4)?),
                normal: Unit::new_unchecked(normal),
                consistency: num(8)?,
            });
        }
        Ok(NormalField { samples, camera: 0 })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_csv())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_csv(&std::fs::read_to_string(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::angle_between;
    use crate::render::{render_correspondence, render_truth};
    use crate::scene::Region;

    struct Fixture {
        scene: SceneConfig,
        corr1: CorrespondenceMap,
        corr2: CorrespondenceMap,
    }

    fn fixture() -> Fixture {
        let scene = SceneConfig::default_scene();
        let corr1 = render_correspondence(&scene, 0);
        let corr2 = render_correspondence(&scene, 1);
        Fixture { scene, corr1, corr2 }
    }

    #[test]
    fn candidate_normal_at_true_depth_matches_surface() {
        let f = fixture();
        let cam = &f.scene.cameras[0];
        let mut worst = 0.0f64;
        let mut off_by_2mm_large = 0;
        let mut total = 0;
        for (i, t) in render_truth(&f.scene, 0).iter().enumerate() {
            let Some(t) = t else { continue };
            let Some((u, v)) = t.screen_uv else { continue };
            let px = ((i % cam.width()) as f64, (i / cam.width()) as f64);
            let s = f.scene.screen.pixel_to_world(u, v);
            let n = candidate_normal(cam, px, t.hit.t, &s).unwrap();
            worst = worst.max((n.normal.into_inner() - t.hit.normal.into_inner()).norm());
            total += 1;
            let plus = candidate_normal(cam, px, t.hit.t + 2.0, &s).unwrap();
            let minus = candidate_normal(cam, px, t.hit.t - 2.0, &s).unwrap();
            if angle_between(&plus.normal, &t.hit.normal) > 0.5
                && angle_between(&minus.normal, &t.hit.normal) > 0.5
            {
                off_by_2mm_large += 1;
            }
        }
        assert!(worst < 1e-6, "worst normal deviation {worst}");
        // near-retroreflective pixels (screen point almost behind the camera)
        // are insensitive to depth; the bulk of the field is not
        assert!(off_by_2mm_large as f64 >= 0.9 * total as f64, "{off_by_2mm_large}/{total}");
    }

    #[test]
    fn candidate_normal_degenerate_when_collinear() {
        let f = fixture();
        let cam = &f.scene.cameras[0];
        let ray = cam.pixel_ray(64, 64);
        // screen point straight ahead of P along the ray
        let s = ray.at(60.0);
        assert!(matches!(
            candidate_normal(cam, (64.0, 64.0), 40.0, &s),
            Err(Error::DegenerateBisector)
        ));
    }

    #[test]
    fn consistency_small_at_truth_and_unimodal() {
        let f = fixture();
        let mut n = 0;
        let mut good = 0;
        let mut worst_truth = 0.0f64;
        for (i, t) in render_truth(&f.scene, 0).iter().enumerate() {
            let Some(t) = t else { continue };
            if t.screen_uv.is_none() {
                continue;
            }
            let px = (i % 128, i / 128);
            let Some(c0) = stereo_consistency(&f.scene, px, t.hit.t, &f.corr1, &f.corr2) else {
                continue;
            };
            n += 1;
            worst_truth = worst_truth.max(c0);
            let cp = stereo_consistency(&f.scene, px, t.hit.t + 1.0, &f.corr1, &f.corr2);
            let cm = stereo_consistency(&f.scene, px, t.hit.t - 1.0, &f.corr1, &f.corr2);
            if cp.map_or(true, |c| c > c0) && cm.map_or(true, |c| c > c0) {
                good += 1;
            }
        }
        assert!(n > 1000);
        assert!(good as f64 >= 0.95 * n as f64, "{good}/{n}");
        let _ = worst_truth;
    }

    #[test]
    fn consistency_at_truth_is_below_a_milliradian() {
        let f = fixture();
        let mut values = Vec::new();
        for (i, t) in render_truth(&f.scene, 0).iter().enumerate() {
            let Some(t) = t else { continue };
            if t.screen_uv.is_none() {
                continue;
            }
            if let Some(c) = stereo_consistency(&f.scene, (i % 128, i / 128), t.hit.t, &f.corr1, &f.corr2) {
                values.push(c);
            }
        }
        values.sort_by(f64::total_cmp);
        let median = values[values.len() / 2];
        assert!(median < 1e-3, "median consistency at truth {median}");
    }

    #[test]
    fn projection_outside_camera_two_is_unusable() {
        let f = fixture();
        let px = (0..128 * 128).find(|&i| f.corr1.valid[i]).map(|i| (i % 128, i / 128)).unwrap();
        // far behind camera 2's field of view
        assert!(stereo_consistency(&f.scene, px, 500.0, &f.corr1, &f.corr2).is_none());
    }

    #[test]
    fn invalid_second_map_gives_nothing() {
        let f = fixture();
        let empty = CorrespondenceMap::invalid(128, 128);
        let params = DepthSweepParams::for_scene(&f.scene);
        for i in (0..128 * 128).filter(|&i| f.corr1.valid[i]).step_by(37) {
            assert!(solve_depth(&f.scene, (i % 128, i / 128), &f.corr1, &empty, &params).is_none());
        }
        assert!(matches!(
            reconstruct_field(&f.scene, &f.corr1, &empty, &params, 1),
            Err(Error::EmptyField(0))
        ));
    }

    #[test]
    fn stride_subset_is_identical() {
        let f = fixture();
        let params = DepthSweepParams::for_scene(&f.scene);
        let full = reconstruct_field(&f.scene, &f.corr1, &f.corr2, &params, 1).unwrap();
        let coarse = reconstruct_field(&f.scene, &f.corr1, &f.corr2, &params, 4).unwrap();
        assert!(coarse.samples.len() * 8 < full.samples.len() * 1);
        for s in &coarse.samples {
            assert!(s.pixel.0 % 4 == 0 && s.pixel.1 % 4 == 0);
            let m = full.samples.iter().find(|f| f.pixel == s.pixel).unwrap();
            assert_eq!(m, s);
        }
    }

    #[test]
    fn field_covers_both_regions() {
        let f = fixture();
        let params = DepthSweepParams::for_scene(&f.scene);
        let field = reconstruct_field(&f.scene, &f.corr1, &f.corr2, &params, 2).unwrap();
        let truth = render_truth(&f.scene, 0);
        let mut regions = [0usize; 2];
        for s in &field.samples {
            let t = truth[s.pixel.1 * 128 + s.pixel.0].unwrap();
            if (t.hit.point - s.point).norm() < 0.1 {
                match t.hit.region {
                    Region::Cornea => regions[0] += 1,
                    Region::Sclera => regions[1] += 1,
                }
            }
        }
        assert!(regions[0] > 50 && regions[1] > 50, "{regions:?}");
    }

    #[test]
    fn csv_round_trip() {
        let f = fixture();
        let params = DepthSweepParams::for_scene(&f.scene);
        let field = reconstruct_field(&f.scene, &f.corr1, &f.corr2, &params, 4).unwrap();
        let back = NormalField::from_csv(&field.to_csv()).unwrap();
        assert_eq!(back, field);
        assert!(NormalField::from_csv("a,b\n").is_err());
        let bad = format!("{NORMAL_FIELD_HEADER}\n1,2,3\n");
        assert!(matches!(NormalField::from_csv(&bad), Err(Error::Parse { line: 2, .. })));
    }

    /// Ground-truth depth of every camera-1 pixel whose true surface point
    /// camera 2 also observes with a usable correspondence.
    fn stereo_observed(f: &Fixture) -> Vec<((usize, usize), f64, crate::render::TracedPixel)> {
        render_truth(&f.scene, 0)
            .into_iter()
            .enumerate()
            .filter_map(|(i, t)| {
                let t = t?;
                t.screen_uv?;
                let px = (i % 128, i / 128);
                stereo_consistency(&f.scene, px, t.hit.t, &f.corr1, &f.corr2)?;
                Some((px, t.hit.t, t))
            })
            .collect()
    }

    fn depth_errors(f: &Fixture, params: &DepthSweepParams) -> Vec<f64> {
        let c1 = f.scene.cameras[0].center();
        stereo_observed(f)
            .iter()
            .map(|(px, t_true, _)| {
                solve_depth(&f.scene, *px, &f.corr1, &f.corr2, params)
                    .map_or(f64::INFINITY, |s| ((s.point - c1).norm() - t_true).abs())
            })
            .collect()
    }

    #[test]
    fn sweep_lands_within_one_step() {
        let f = fixture();
        let mut params = DepthSweepParams::for_scene(&f.scene);
        params.refine = false;
        let bin = (params.t_max - params.t_min) / params.n_steps as f64;
        let errs = depth_errors(&f, &params);
        let within = errs.iter().filter(|e| **e < bin).count();
        assert!(errs.len() > 3000);
        assert!(within as f64 >= 0.95 * errs.len() as f64, "{within}/{}", errs.len());
    }

    #[test]
    fn refined_depth_median_error() {
        let f = fixture();
        let params = DepthSweepParams::for_scene(&f.scene);
        let mut errs = depth_errors(&f, &params);
        errs.sort_by(f64::total_cmp);
        let median = errs[errs.len() / 2];
        assert!(median < 0.02, "median depth error {median}");
    }

    #[test]
    fn reconstructed_points_lie_on_the_eye() {
        let f = fixture();
        let params = DepthSweepParams::for_scene(&f.scene);
        let field = reconstruct_field(&f.scene, &f.corr1, &f.corr2, &params, 2).unwrap();
        let eye = &f.scene.eye;
        let mut d: Vec<f64> = field
            .samples
            .iter()
            .map(|s| {
                let ds = ((s.point - eye.sclera_center).norm() - eye.sclera_radius).abs();
                let dc = ((s.point - eye.cornea_center()).norm() - eye.cornea_radius).abs();
                ds.min(dc)
            })
            .collect();
        d.sort_by(f64::total_cmp);
        assert!(d[d.len() / 2] < 0.05, "median surface distance {}", d[d.len() / 2]);
    }

    #[test]
    fn camera_two_normal_agrees_within_reported_consistency() {
        let f = fixture();
        let params = DepthSweepParams::for_scene(&f.scene);
        let field = reconstruct_field(&f.scene, &f.corr1, &f.corr2, &params, 3).unwrap();
        let cam2 = &f.scene.cameras[1];
        for s in &field.samples {
            let (x2, y2) = cam2.project(&s.point).unwrap();
            let (u, v) = f.corr2.sample_bilinear(x2, y2).unwrap();
            let n2 = bisector_at(&cam2.center(), &s.point, &f.scene.screen.pixel_to_world(u, v)).unwrap();
            let angle = s.normal.dot(&n2).clamp(-1.0, 1.0).acos();
            assert!(angle <= s.consistency + 1e-9, "{angle} > {}", s.consistency);
        }
    }

    fn median_normal_error(f: &Fixture, sigma: f64, seed: u64) -> f64 {
        use crate::render::add_correspondence_noise;
        let c1 = add_correspondence_noise(&f.corr1, sigma, seed, &f.scene.screen);
        let c2 = add_correspondence_noise(&f.corr2, sigma, seed + 1, &f.scene.screen);
        let params = DepthSweepParams::for_scene(&f.scene);
        let truth = render_truth(&f.scene, 0);
        let field = reconstruct_field(&f.scene, &c1, &c2, &params, 2).unwrap();
        let mut e: Vec<f64> = field
            .samples
            .iter()
            .filter_map(|s| truth[s.pixel.1 * 128 + s.pixel.0].map(|t| angle_between(&t.hit.normal, &s.normal)))
            .collect();
        e.sort_by(f64::total_cmp);
        e[e.len() / 2]
    }

    #[test]
    fn correspondence_noise_normal_error() {
        let f = fixture();
        let e = median_normal_error(&f, 0.5, 11);
        assert!(e < 0.5, "median normal error {e} deg");
    }

    #[test]
    fn normal_error_grows_with_noise() {
        let f = fixture();
        let errs: Vec<f64> = [0.0, 0.25, 0.5, 1.0].iter().map(|&s| median_normal_error(&f, s, 5)).collect();
        for w in errs.windows(2) {
            assert!(w[0] <= w[1], "{errs:?}");
        }
    }
}
