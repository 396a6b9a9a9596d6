//! Gaze from back-traced surface normals.
//!
//! Cornea normals meet at the cornea center and sclera normals at the sclera
//! center; the line through both centers is the optical axis.

use std::fmt;
use std::fmt::Write as _;

use nalgebra::Unit;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{best_fit_axis, least_squares_point, Line3, UnitVec3, Vec3};
use crate::rng::{mix_seed, substream};
use crate::stereo::NormalField;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MethodTag {
    TwoCenter,
    AxisFit,
    Optimize,
}

impl MethodTag {
    pub fn as_str(self) -> &'static str {
        match self {
            MethodTag::TwoCenter => "two-center",
            MethodTag::AxisFit => "axis-fit",
            MethodTag::Optimize => "optimize",
        }
    }
}

impl std::str::FromStr for MethodTag {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "two-center" => Ok(MethodTag::TwoCenter),
            "axis-fit" => Ok(MethodTag::AxisFit),
            "optimize" => Ok(MethodTag::Optimize),
            other => Err(Error::Format(format!("unknown method tag `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GazeEstimate {
    pub direction: UnitVec3,
    pub cornea_center: Vec3,
    pub sclera_center: Vec3,
    pub n_cornea_inliers: usize,
    pub n_sclera_inliers: usize,
    pub rms_cornea: f64,
    pub rms_sclera: f64,
    pub method: MethodTag,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClusterParams {
    pub ransac_iters: usize,
    /// Line-to-center distance for an inlier, millimeters.
    pub inlier_tol: f64,
    pub min_inliers: usize,
    pub rng_seed: u64,
}

impl Default for ClusterParams {
    fn default() -> Self {
        Self { ransac_iters: 500, inlier_tol: 0.3, min_inliers: 50, rng_seed: 0 }
    }
}

impl ClusterParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.inlier_tol > 0.0) {
            return Err(Error::InvalidConfig("inlier_tol must be positive".into()));
        }
        if self.ransac_iters < 10 {
            return Err(Error::InvalidConfig("ransac_iters must be at least 10".into()));
        }
        Ok(())
    }
}

/// Final assignment of a back-traced line.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ClusterLabel {
    A,
    B,
    /// Farther than the polish cutoff from both centers.
    Outlier,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TwoCenterFit {
    pub center_a: Vec3,
    pub center_b: Vec3,
    pub labels: Vec<ClusterLabel>,
    /// Rms line-to-center distance per cluster, millimeters.
    pub residuals: [f64; 2],
}

impl TwoCenterFit {
    pub fn count(&self, label: ClusterLabel) -> usize {
        self.labels.iter().filter(|&&l| l == label).count()
    }
}

/// Lines farther than this multiple of `inlier_tol` from both centers are
/// left out of the final polish.
pub const POLISH_CUTOFF: f64 = 1.0;

/// One undirected line per sample, through the surface point along its normal.
pub fn backtrace_lines(field: &NormalField) -> Vec<Line3> {
    field.samples.iter().map(|s| Line3::new(s.point, s.normal)).collect()
}

fn inliers_of(lines: &[Line3], subset: &[usize], center: &Vec3, tol: f64) -> Vec<usize> {
    subset.iter().copied().filter(|&i| lines[i].distance_to_point(center) <= tol).collect()
}

/// Best RANSAC center within `subset`, refined on its inliers.
fn ransac_center(
    lines: &[Line3],
    subset: &[usize],
    params: &ClusterParams,
    round: u64,
) -> Option<(Vec3, Vec<usize>)> {
    if subset.len() < 3 {
        return None;
    }
    let seed = mix_seed(params.rng_seed, &[round]);
    let candidates: Vec<Option<(usize, Vec3)>> = (0..params.ransac_iters)
        .into_par_iter()
        .map(|it| {
            let mut rng = substream(seed, it as u64);
            let n = subset.len();
            let a = rng.random_range(0..n);
            let mut b = rng.random_range(0..n - 1);
            if b >= a {
                b += 1;
            }
            let mut c = rng.random_range(0..n - 2);
            for x in [a.min(b), a.max(b)] {
                if c >= x {
                    c += 1;
                }
            }
            let sample = [lines[subset[a]], lines[subset[b]], lines[subset[c]]];
            let (center, _) = least_squares_point(&sample).ok()?;
            let count = subset
                .iter()
                .filter(|&&i| lines[i].distance_to_point(&center) <= params.inlier_tol)
                .count();
            Some((count, center))
        })
        .collect();
    let mut best: Option<(usize, Vec3)> = None;
    for cand in candidates.into_iter().flatten() {
        if best.map_or(true, |b| cand.0 > b.0) {
            best = Some(cand);
        }
    }
    let (_, mut center) = best?;
    let mut inliers = inliers_of(lines, subset, &center, params.inlier_tol);
    for _ in 0..3 {
        let member: Vec<Line3> = inliers.iter().map(|&i| lines[i]).collect();
        let Ok((refined, _)) = least_squares_point(&member) else { break };
        let next = inliers_of(lines, subset, &refined, params.inlier_tol);
        center = refined;
        if next == inliers {
            break;
        }
        inliers = next;
    }
    Some((center, inliers))
}

fn rms_to(lines: &[Line3], members: &[usize], center: &Vec3) -> f64 {
    if members.is_empty() {
        return 0.0;
    }
    let ss: f64 = members.iter().map(|&i| lines[i].distance_to_point(center).powi(2)).sum();
    (ss / members.len() as f64).sqrt()
}

/// Sequential RANSAC for the two intersection centers of an eye's normals.
pub fn two_center_cluster(lines: &[Line3], params: &ClusterParams) -> Result<TwoCenterFit> {
    params.validate()?;
    let needed = 2 * params.min_inliers;
    if lines.len() < needed.max(3) {
        return Err(Error::InsufficientLines { needed: needed.max(3), got: lines.len() });
    }
    let all: Vec<usize> = (0..lines.len()).collect();
    let (c_a, in_a) = ransac_center(lines, &all, params, 0)
        .ok_or(Error::SecondCenterNotFound { remaining: 0 })?;
    let mut taken = vec![false; lines.len()];
    for &i in &in_a {
        taken[i] = true;
    }
    let rest: Vec<usize> = all.iter().copied().filter(|&i| !taken[i]).collect();
    if rest.len() < params.min_inliers {
        return Err(Error::SecondCenterNotFound { remaining: rest.len() });
    }
    let (c_b, in_b) = ransac_center(lines, &rest, params, 1)
        .ok_or(Error::SecondCenterNotFound { remaining: rest.len() })?;
    if in_b.len() < params.min_inliers {
        return Err(Error::SecondCenterNotFound { remaining: rest.len() });
    }

    let (mut c_a, mut c_b) = (c_a, c_b);
    let cutoff = POLISH_CUTOFF * params.inlier_tol;
    let mut labels = vec![ClusterLabel::Outlier; lines.len()];
    for _ in 0..5 {
        let next: Vec<ClusterLabel> = lines
            .iter()
            .map(|l| {
                let (da, db) = (l.distance_to_point(&c_a), l.distance_to_point(&c_b));
                if da.min(db) > cutoff {
                    ClusterLabel::Outlier
                } else if da <= db {
                    ClusterLabel::A
                } else {
                    ClusterLabel::B
                }
            })
            .collect();
        let members = |lab: ClusterLabel| -> Vec<Line3> {
            lines.iter().zip(&next).filter(|(_, &l)| l == lab).map(|(l, _)| *l).collect()
        };
        let (ma, mb) = (members(ClusterLabel::A), members(ClusterLabel::B));
        if ma.len() < params.min_inliers || mb.len() < params.min_inliers {
            return Err(Error::SecondCenterNotFound { remaining: ma.len().min(mb.len()) });
        }
        c_a = least_squares_point(&ma)?.0;
        c_b = least_squares_point(&mb)?.0;
        let converged = next == labels;
        labels = next;
        if converged {
            break;
        }
    }
    let idx = |lab: ClusterLabel| -> Vec<usize> {
        labels.iter().enumerate().filter(|(_, &l)| l == lab).map(|(i, _)| i).collect()
    };
    let residuals = [rms_to(lines, &idx(ClusterLabel::A), &c_a), rms_to(lines, &idx(ClusterLabel::B), &c_b)];
    Ok(TwoCenterFit { center_a: c_a, center_b: c_b, labels, residuals })
}

/// Mean distance from the member lines' surface points to `center`.
pub fn cluster_radius(center: &Vec3, lines: &[Line3], labels: &[ClusterLabel], label: ClusterLabel) -> f64 {
    let (sum, n) = lines
        .iter()
        .zip(labels)
        .filter(|(_, &l)| l == label)
        .fold((0.0, 0usize), |(s, n), (l, _)| (s + (l.point - center).norm(), n + 1));
    if n == 0 {
        f64::NAN
    } else {
        sum / n as f64
    }
}

/// Orders the two centers as (cornea, sclera): the cornea cluster has the
/// smaller mean radius.
pub fn identify_cornea(
    c_a: &Vec3,
    c_b: &Vec3,
    lines: &[Line3],
    labels: &[ClusterLabel],
) -> Result<(Vec3, Vec3)> {
    let ra = cluster_radius(c_a, lines, labels, ClusterLabel::A);
    let rb = cluster_radius(c_b, lines, labels, ClusterLabel::B);
    if !(ra.is_finite() && rb.is_finite()) || (ra - rb).abs() < 0.1 * ra.max(rb) {
        return Err(Error::AmbiguousRadii(ra, rb));
    }
    Ok(if ra < rb { (*c_a, *c_b) } else { (*c_b, *c_a) })
}

/// Minimum separation of the two centers, millimeters.
pub const MIN_CENTER_SEPARATION: f64 = 0.5;

/// Outward optical axis through the sclera and cornea centers.
pub fn gaze_from_centers(cornea_center: &Vec3, sclera_center: &Vec3) -> Result<UnitVec3> {
    let d = cornea_center - sclera_center;
    if d.norm() < MIN_CENTER_SEPARATION {
        return Err(Error::CentersTooClose(d.norm()));
    }
    Ok(Unit::new_normalize(d))
}

/// Two-center estimate from back-traced lines.
pub fn gaze_two_center(lines: &[Line3], params: &ClusterParams) -> Result<GazeEstimate> {
    let fit = two_center_cluster(lines, params)?;
    let (cornea, sclera) = identify_cornea(&fit.center_a, &fit.center_b, lines, &fit.labels)?;
    let direction = gaze_from_centers(&cornea, &sclera)?;
    let a_is_cornea = cornea == fit.center_a;
    let (lc, ls) = if a_is_cornea { (ClusterLabel::A, ClusterLabel::B) } else { (ClusterLabel::B, ClusterLabel::A) };
    let (rc, rs) = if a_is_cornea { (fit.residuals[0], fit.residuals[1]) } else { (fit.residuals[1], fit.residuals[0]) };
    Ok(GazeEstimate {
        direction,
        cornea_center: cornea,
        sclera_center: sclera,
        n_cornea_inliers: fit.count(lc),
        n_sclera_inliers: fit.count(ls),
        rms_cornea: rc,
        rms_sclera: rs,
        method: MethodTag::TwoCenter,
    })
}

/// Symmetry-axis estimate: the line all normals of a surface of revolution
/// cross.
pub fn gaze_axis_fit(lines: &[Line3]) -> Result<GazeEstimate> {
    let axis = best_fit_axis(lines)?;
    let mean_surface = lines.iter().fold(Vec3::zeros(), |acc, l| acc + l.point) / lines.len() as f64;
    let d = axis.dir.into_inner();
    let direction = if d.dot(&(mean_surface - axis.point)) >= 0.0 { axis.dir } else { -axis.dir };
    let ss: f64 = lines.iter().map(|l| l.distance_to_line(&axis).powi(2)).sum();
    let rms = (ss / lines.len() as f64).sqrt();
    Ok(GazeEstimate {
        direction,
        cornea_center: axis.point,
        sclera_center: axis.point,
        n_cornea_inliers: lines.len(),
        n_sclera_inliers: lines.len(),
        rms_cornea: rms,
        rms_sclera: rms,
        method: MethodTag::AxisFit,
    })
}

/// Two-center estimate, optionally falling back to the axis fit when the
/// second center cannot be separated.
pub fn estimate_gaze(field: &NormalField, params: &ClusterParams, axis_fallback: bool) -> Result<GazeEstimate> {
    let lines = backtrace_lines(field);
    match gaze_two_center(&lines, params) {
        Err(Error::SecondCenterNotFound { .. } | Error::AmbiguousRadii(..)) if axis_fallback => {
            gaze_axis_fit(&lines)
        }
        other => other,
    }
}

/// Signed angle (degrees) from `g_ref` to `g_a` about `rotation_axis`.
pub fn relative_gaze_angle(g_a: &UnitVec3, g_ref: &UnitVec3, rotation_axis: &UnitVec3) -> f64 {
    let ax = rotation_axis.into_inner();
    let y = g_ref.cross(g_a).dot(&ax);
    let x = g_ref.dot(g_a) - g_ref.dot(&ax) * g_a.dot(&ax);
    y.atan2(x).to_degrees()
}

pub const GAZE_CSV_HEADER: &str =
    "method,dx,dy,dz,cornea_x,cornea_y,cornea_z,sclera_x,sclera_y,sclera_z,n_cornea,n_sclera,rms_cornea,rms_sclera";

impl GazeEstimate {
    pub fn csv_row(&self) -> String {
        let mut s = String::new();
        let (d, c, k) = (self.direction, self.cornea_center, self.sclera_center);
        let _ = write!(
            s,
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            self.method.as_str(),
            d.x,
            d.y,
            d.z,
            c.x,
            c.y,
            c.z,
            k.x,
            k.y,
            k.z,
            self.n_cornea_inliers,
            self.n_sclera_inliers,
            self.rms_cornea,
            self.rms_sclera
        );
        s
    }

    pub fn to_csv(&self) -> String {
        format!("{GAZE_CSV_HEADER}\n{}\n", self.csv_row())
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        if lines.next().map(str::trim) != Some(GAZE_CSV_HEADER) {
            return Err(Error::Parse { line: 1, column: 1, message: "missing gaze header".into() });
        }
        let row = lines.next().ok_or(Error::Parse { line: 2, column: 1, message: "missing row".into() })?;
        let f: Vec<&str> = row.split(',').map(str::trim).collect();
        let err = |col: usize, m: String| Error::Parse { line: 2, column: col, message: m };
        if f.len() != 14 {
            return Err(err(1, format!("expected 14 fields, got {}", f.len())));
        }
        let num = |k: usize| f[k].parse::<f64>().map_err(|e| err(k + 1, e.to_string()));
        let int = |k: usize| f[k].parse::<usize>().map_err(|e| err(k + 1, e.to_string()));
        let d = Vec3::new(num(1)?, num(2)?, num(3)?);
        if (d.norm() - 1.0).abs() > 1e-6 {
            return Err(err(2, "direction is not a unit vector".into()));
        }
        Ok(GazeEstimate {
            method: f[0].parse().map_err(|_| err(1, format!("unknown method `{}`", f[0])))?,
            direction: Unit::new_unchecked(d),
            cornea_center: Vec3::new(num(4)?, num(5)?, num(6)?),
            sclera_center: Vec3::new(num(7)?, num(8)?, num(9)?),
            n_cornea_inliers: int(10)?,
            n_sclera_inliers: int(11)?,
            rms_cornea: num(12)?,
            rms_sclera: num(13)?,
        })
    }
}

impl fmt::Display for GazeEstimate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let (d, c, s) = (self.direction, self.cornea_center, self.sclera_center);
        writeln!(f, "method:        {}", self.method.as_str())?;
        writeln!(f, "direction:     ({:+.6}, {:+.6}, {:+.6})", d.x, d.y, d.z)?;
        writeln!(f, "cornea center: ({:+.4}, {:+.4}, {:+.4}) mm", c.x, c.y, c.z)?;
        writeln!(f, "sclera center: ({:+.4}, {:+.4}, {:+.4}) mm", s.x, s.y, s.z)?;
        writeln!(f, "inliers:       cornea {}, sclera {}", self.n_cornea_inliers, self.n_sclera_inliers)?;
        write!(f, "rms:           cornea {:.4} mm, sclera {:.4} mm", self.rms_cornea, self.rms_sclera)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::angle_between;
    use crate::render::{render_correspondence, render_truth};
    use crate::scene::{Region, SceneConfig};
    use crate::stereo::{reconstruct_field, DepthSweepParams, NormalSample};
    use proptest::prelude::{prop_assert, proptest};
    use rand_distr::{Distribution, StandardNormal};

    fn random_unit(rng: &mut impl Rng) -> UnitVec3 {
        let v = Vec3::new(
            StandardNormal.sample(rng),
            StandardNormal.sample(rng),
            StandardNormal.sample(rng),
        );
        Unit::new_normalize(v)
    }

    fn bundle(center: Vec3, n: usize, seed: u64) -> Vec<Line3> {
        let mut rng = substream(seed, 0);
        (0..n)
            .map(|_| {
                let d = random_unit(&mut rng);
                let s: f64 = rng.random_range(5.0..12.0);
                Line3::new(center + d.into_inner() * s, d)
            })
            .collect()
    }

    fn truth_field(scene: &SceneConfig, only: Option<Region>) -> NormalField {
        let samples = render_truth(scene, 0)
            .into_iter()
            .enumerate()
            .filter_map(|(i, t)| {
                let t = t?;
                t.screen_uv?;
                if only.is_some_and(|r| r != t.hit.region) {
                    return None;
                }
                Some(NormalSample {
                    point: t.hit.point,
                    normal: t.hit.normal,
                    pixel: (i % scene.cameras[0].width(), i / scene.cameras[0].width()),
                    consistency: 0.0,
                })
            })
            .collect();
        NormalField { samples, camera: 0 }
    }

    fn stereo_field(scene: &SceneConfig, stride: usize) -> NormalField {
        let c1 = render_correspondence(scene, 0);
        let c2 = render_correspondence(scene, 1);
        reconstruct_field(scene, &c1, &c2, &DepthSweepParams::for_scene(scene), stride).unwrap()
    }

    #[test]
    fn backtrace_one_line_per_sample() {
        let scene = SceneConfig::default_scene();
        let field = truth_field(&scene, Some(Region::Cornea));
        let lines = backtrace_lines(&field);
        assert_eq!(lines.len(), field.samples.len());
        let c = scene.eye.cornea_center();
        let worst = lines.iter().map(|l| l.distance_to_point(&c)).fold(0.0, f64::max);
        assert!(worst < 1e-3, "{worst}");
    }

    #[test]
    fn exact_bundles_are_separated() {
        let a = Vec3::zeros();
        let b = Vec3::new(0.0, 0.0, 5.6);
        let mut lines = bundle(a, 500, 1);
        lines.extend(bundle(b, 500, 2));
        let fit = two_center_cluster(&lines, &ClusterParams::default()).unwrap();
        let (ca, cb) = if (fit.center_a - a).norm() < (fit.center_b - a).norm() {
            (fit.center_a, fit.center_b)
        } else {
            (fit.center_b, fit.center_a)
        };
        assert!((ca - a).norm() < 1e-6 && (cb - b).norm() < 1e-6);
        let label_a = if ca == fit.center_a { ClusterLabel::A } else { ClusterLabel::B };
        let mislabels = fit
            .labels
            .iter()
            .enumerate()
            .filter(|(i, &l)| (l == label_a) != (*i < 500))
            .count();
        assert_eq!(mislabels, 0);
    }

    #[test]
    fn sign_flips_do_not_matter() {
        let mut lines = bundle(Vec3::zeros(), 200, 3);
        lines.extend(bundle(Vec3::new(1.0, 2.0, 5.0), 200, 4));
        let params = ClusterParams { min_inliers: 20, ..ClusterParams::default() };
        let fit = two_center_cluster(&lines, &params).unwrap();
        let flipped: Vec<Line3> =
            lines.iter().enumerate().map(|(i, l)| if i % 3 == 0 { l.flipped() } else { *l }).collect();
        let fit2 = two_center_cluster(&flipped, &params).unwrap();
        assert!((fit.center_a - fit2.center_a).norm() < 1e-9);
        assert!((fit.center_b - fit2.center_b).norm() < 1e-9);
        assert_eq!(fit.labels, fit2.labels);
    }

    #[test]
    fn deterministic_for_seed() {
        let scene = SceneConfig::default_scene();
        let lines = backtrace_lines(&stereo_field(&scene, 2));
        let p = ClusterParams { rng_seed: 9, ..ClusterParams::default() };
        assert_eq!(two_center_cluster(&lines, &p).unwrap(), two_center_cluster(&lines, &p).unwrap());
    }

    #[test]
    fn cornea_only_has_no_second_center() {
        let scene = SceneConfig::default_scene();
        let lines = backtrace_lines(&truth_field(&scene, Some(Region::Cornea)));
        assert!(matches!(
            two_center_cluster(&lines, &ClusterParams::default()),
            Err(Error::SecondCenterNotFound { .. })
        ));
        assert!(matches!(
            two_center_cluster(&lines[..60], &ClusterParams::default()),
            Err(Error::InsufficientLines { .. })
        ));
    }

    #[test]
    fn identify_by_radius_in_either_order() {
        let a = Vec3::zeros();
        let b = Vec3::new(0.0, 0.0, 5.6);
        let mut rng = substream(5, 0);
        let mut lines = Vec::new();
        let mut labels = Vec::new();
        for (center, r, lab) in [(b, 7.8, ClusterLabel::A), (a, 12.0, ClusterLabel::B)] {
            for _ in 0..100 {
                let d = random_unit(&mut rng);
                lines.push(Line3::new(center + d.into_inner() * r, d));
                labels.push(lab);
            }
        }
        assert_eq!(identify_cornea(&b, &a, &lines, &labels).unwrap(), (b, a));
        let swapped: Vec<ClusterLabel> = labels
            .iter()
            .map(|l| if *l == ClusterLabel::A { ClusterLabel::B } else { ClusterLabel::A })
            .collect();
        assert_eq!(identify_cornea(&a, &b, &lines, &swapped).unwrap(), (b, a));
        let same: Vec<Line3> =
            lines.iter().enumerate().map(|(i, l)| if i < 100 { Line3::new(b + (l.point - b) * 12.0 / 7.8, l.dir) } else { *l }).collect();
        assert!(matches!(identify_cornea(&b, &a, &same, &labels), Err(Error::AmbiguousRadii(..))));
    }

    #[test]
    fn gaze_from_centers_examples() {
        let g = gaze_from_centers(&Vec3::new(0.0, 0.0, 5.6), &Vec3::zeros()).unwrap();
        assert!((g.into_inner() - Vec3::z()).norm() < 1e-15);
        assert!(matches!(
            gaze_from_centers(&Vec3::new(0.1, 0.0, 0.0), &Vec3::zeros()),
            Err(Error::CentersTooClose(_))
        ));
    }

    #[test]
    fn noiseless_eye_reconstruction_recovers_centers_and_axis() {
        let scene = SceneConfig::default_scene();
        let field = stereo_field(&scene, 1);
        let lines = backtrace_lines(&field);
        let est = gaze_two_center(&lines, &ClusterParams::default()).unwrap();
        let e_c = (est.cornea_center - scene.eye.cornea_center()).norm();
        let e_s = (est.sclera_center - scene.eye.sclera_center).norm();
        assert!(e_c < 0.05 && e_s < 0.05, "center errors {e_c} {e_s}");
        let err = angle_between(&est.direction, &scene.eye.optical_axis);
        assert!(err < 0.05, "axis error {err} deg");

        let fit = two_center_cluster(&lines, &ClusterParams::default()).unwrap();
        let ra = cluster_radius(&fit.center_a, &lines, &fit.labels, ClusterLabel::A);
        let rb = cluster_radius(&fit.center_b, &lines, &fit.labels, ClusterLabel::B);
        let (rc, rs) = (ra.min(rb), ra.max(rb));
        assert!((rc - 7.8).abs() < 0.3 && (rs - 12.0).abs() < 0.3, "radii {rc} {rs}");
    }

    #[test]
    fn rotated_eye_end_to_end() {
        let mut scene = SceneConfig::default_scene();
        scene.eye = scene.eye.rotated(4.0, -2.0);
        let est = estimate_gaze(&stereo_field(&scene, 1), &ClusterParams::default(), false).unwrap();
        let err = angle_between(&est.direction, &scene.eye.optical_axis);
        assert!(err < 0.05, "axis error {err} deg");
    }

    #[test]
    fn axis_fit_on_spheroid() {
        // prolate spheroid: every normal crosses the symmetry axis
        let axis = Unit::new_normalize(Vec3::new(0.2, -0.1, 1.0));
        let frame = nalgebra::Rotation3::rotation_between(&Vec3::z(), &axis).unwrap();
        let (a, c) = (6.0, 9.0);
        let center = Vec3::new(1.0, 2.0, -3.0);
        let mut lines = Vec::new();
        for i in 0..30 {
            for j in 0..24 {
                let theta = 0.15 + 0.9 * i as f64 / 29.0;
                let phi = std::f64::consts::TAU * j as f64 / 24.0;
                let local = Vec3::new(a * theta.sin() * phi.cos(), a * theta.sin() * phi.sin(), c * theta.cos());
                let n = Vec3::new(local.x / (a * a), local.y / (a * a), local.z / (c * c));
                lines.push(Line3::new(center + frame * local, Unit::new_normalize(frame * n)));
            }
        }
        let est = gaze_axis_fit(&lines).unwrap();
        assert!(angle_between(&est.direction, &axis) < 0.1);
        assert_eq!(est.method, MethodTag::AxisFit);
    }

    #[test]
    fn axis_fit_agrees_with_two_centers() {
        let scene = SceneConfig::default_scene();
        let lines = backtrace_lines(&stereo_field(&scene, 1));
        let two = gaze_two_center(&lines, &ClusterParams::default()).unwrap();
        let fit = two_center_cluster(&lines, &ClusterParams::default()).unwrap();
        let inliers: Vec<Line3> = lines
            .iter()
            .zip(&fit.labels)
            .filter(|(_, &l)| l != ClusterLabel::Outlier)
            .map(|(l, _)| *l)
            .collect();
        let axis = gaze_axis_fit(&inliers).unwrap();
        let d = angle_between(&axis.direction, &two.direction);
        assert!(d < 0.2, "axis fit vs two-center {d} deg");
    }

    #[test]
    fn sphere_bundle_is_degenerate_for_axis_fit() {
        assert!(matches!(gaze_axis_fit(&bundle(Vec3::zeros(), 300, 8)), Err(Error::DegenerateBundle(_))));
    }

    #[test]
    fn scaling_the_scene_scales_centers() {
        let scene = SceneConfig::default_scene();
        let big = scene.scaled(2.0);
        let p = ClusterParams::default();
        let e1 = estimate_gaze(&truth_field(&scene, None), &p, false).unwrap();
        let p2 = ClusterParams { inlier_tol: 2.0 * p.inlier_tol, ..p };
        let e2 = estimate_gaze(&truth_field(&big, None), &p2, false).unwrap();
        assert!((e2.cornea_center - 2.0 * e1.cornea_center).norm() < 1e-6);
        assert!((e2.sclera_center - 2.0 * e1.sclera_center).norm() < 1e-6);
        assert!(angle_between(&e1.direction, &e2.direction) < 1e-6);
    }

    #[test]
    fn relative_angle_examples() {
        let up = Unit::new_normalize(Vec3::y());
        let g = Unit::new_normalize(Vec3::new(0.1, 0.05, 1.0));
        assert_eq!(relative_gaze_angle(&g, &g, &up), 0.0);
        let g3 = crate::geometry::rotation_about(&up, 3.0) * g;
        assert!((relative_gaze_angle(&g3, &g, &up) - 3.0).abs() < 1e-9);
    }

    proptest! {
        #[test]
        fn relative_angle_is_antisymmetric(
            a in proptest::array::uniform3(-1.0f64..1.0),
            b in proptest::array::uniform3(-1.0f64..1.0),
            k in proptest::array::uniform3(-1.0f64..1.0),
        ) {
            let (a, b, k) = (Vec3::from(a), Vec3::from(b), Vec3::from(k));
            proptest::prop_assume!(a.norm() > 0.1 && b.norm() > 0.1 && k.norm() > 0.1);
            let (a, b, k) = (Unit::new_normalize(a), Unit::new_normalize(b), Unit::new_normalize(k));
            let s = relative_gaze_angle(&a, &b, &k) + relative_gaze_angle(&b, &a, &k);
            prop_assert!(s.abs() < 1e-9 || (s.abs() - 360.0).abs() < 1e-9);
        }
    }

    #[test]
    fn csv_and_text() {
        let scene = SceneConfig::default_scene();
        let est = estimate_gaze(&truth_field(&scene, None), &ClusterParams::default(), false).unwrap();
        assert_eq!(GazeEstimate::from_csv(&est.to_csv()).unwrap(), est);
        let text = est.to_string();
        assert!(text.contains("two-center") && text.contains("cornea center"));
        assert!(GazeEstimate::from_csv("nope\n").is_err());
    }
}
