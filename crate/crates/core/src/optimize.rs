//! Gaze by inverse rendering: adjust a simulated eye until its screen–camera
//! correspondences match the measured ones.

use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::gaze_normals::{GazeEstimate, MethodTag};
use crate::geometry::{intersect_ray_plane, intersect_ray_sphere, reflect, Ray, Vec3};
use crate::pattern::PatternSpec;
use crate::render::{frame_from_correspondence, trace_pixel, CorrespondenceMap, Frame, IntensityNoise};
use crate::scene::{CameraModel, EyeModel, Region, SceneConfig, ScreenModel};
use nalgebra::Unit;

pub const N_PARAMS: usize = 8;

pub const PARAM_NAMES: [&str; N_PARAMS] =
    ["azimuth", "elevation", "tx", "ty", "tz", "cornea_radius", "sclera_radius", "cornea_offset"];

/// Smallest admissible radius, millimeters.
pub const MIN_RADIUS: f64 = 1.0;
/// Minimum gap between sclera and cornea radius, millimeters.
pub const MIN_RADIUS_GAP: f64 = 0.5;
/// Losses at or below this are treated as an exact fit.
pub const LOSS_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamGroup {
    Degrees,
    Millimeters,
}

pub fn param_group(index: usize) -> ParamGroup {
    if index < 2 {
        ParamGroup::Degrees
    } else {
        ParamGroup::Millimeters
    }
}

/// Eye pose and shape relative to the configured nominal eye.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EyeParamVector {
    /// Degrees about the world up-axis.
    pub azimuth: f64,
    /// Degrees toward world up.
    pub elevation: f64,
    /// Offset of the sclera center from nominal, millimeters.
    pub translation: Vec3,
    pub cornea_radius: f64,
    pub sclera_radius: f64,
    pub cornea_offset: f64,
    /// Parameters excluded from descent are `false`.
    pub active: [bool; N_PARAMS],
}

impl EyeParamVector {
    /// Zero pose, nominal shape, shape frozen.
    pub fn nominal(eye: &EyeModel) -> Self {
        Self {
            azimuth: 0.0,
            elevation: 0.0,
            translation: Vec3::zeros(),
            cornea_radius: eye.cornea_radius,
            sclera_radius: eye.sclera_radius,
            cornea_offset: eye.cornea_offset,
            active: [true, true, true, true, true, false, false, false],
        }
    }

    pub fn with_shape_active(mut self, on: bool) -> Self {
        self.active[5..].iter_mut().for_each(|a| *a = on);
        self
    }

    pub fn to_array(&self) -> [f64; N_PARAMS] {
        let t = self.translation;
        [
            self.azimuth,
            self.elevation,
            t.x,
            t.y,
            t.z,
            self.cornea_radius,
            self.sclera_radius,
            self.cornea_offset,
        ]
    }

    pub fn from_array(values: &[f64; N_PARAMS], active: [bool; N_PARAMS]) -> Self {
        Self {
            azimuth: values[0],
            elevation: values[1],
            translation: Vec3::new(values[2], values[3], values[4]),
            cornea_radius: values[5],
            sclera_radius: values[6],
            cornea_offset: values[7],
            active,
        }
    }

    pub fn n_active(&self) -> usize {
        self.active.iter().filter(|&&a| a).count()
    }

    /// Clamps the shape onto the admissible set: radii above 1 mm,
    /// `R_c ≤ R_s − 0.5` and a cornea cap that protrudes from the sclera.
    pub fn projected(&self) -> Self {
        let mut p = *self;
        p.sclera_radius = p.sclera_radius.max(MIN_RADIUS + MIN_RADIUS_GAP + 1e-6);
        p.cornea_radius = p.cornea_radius.clamp(MIN_RADIUS + 1e-6, p.sclera_radius - MIN_RADIUS_GAP);
        p.cornea_offset = p.cornea_offset.max(p.sclera_radius - p.cornea_radius + 1e-6);
        p
    }

    /// The eye these parameters describe.
    pub fn materialize(&self, nominal: &EyeModel) -> Result<EyeModel> {
        let base = EyeModel {
            cornea_radius: self.cornea_radius,
            sclera_radius: self.sclera_radius,
            cornea_offset: self.cornea_offset,
            ..*nominal
        };
        let eye = base.rotated(self.azimuth, self.elevation).translated(&self.translation);
        eye.validate()?;
        Ok(eye)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GradMode {
    FiniteDiff,
    /// Uses an analytic gradient when one exists; none is implemented, so
    /// this resolves to finite differences.
    AnalyticIfAvailable,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossConfig {
    /// Weight of the validity-mismatch fraction, screen px².
    pub lambda: f64,
    /// Pixels this close to a discontinuity are left out, camera px.
    pub boundary_px: usize,
    pub n_min: usize,
    /// Neighbor jump in a measured map that counts as a discontinuity,
    /// screen px.
    pub jump_threshold: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { lambda: 25.0, boundary_px: 2, n_min: 200, jump_threshold: 50.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OptConfig {
    pub max_iters: usize,
    pub step_deg: f64,
    pub step_mm: f64,
    pub step_decay: f64,
    /// Step factor after an accepted proposal, capped at the initial step.
    pub step_growth: f64,
    pub momentum: f64,
    pub grad_mode: GradMode,
    pub fd_step_deg: f64,
    pub fd_step_mm: f64,
    pub rel_tol: f64,
    pub rel_window: usize,
    pub min_step: f64,
    /// Proposals allowed before the first accepted step.
    pub no_descent_window: usize,
    pub loss: LossConfig,
}

impl Default for OptConfig {
    fn default() -> Self {
        Self {
            max_iters: 300,
            step_deg: 0.5,
            step_mm: 0.5,
            step_decay: 0.5,
            step_growth: 1.2,
            momentum: 0.8,
            grad_mode: GradMode::FiniteDiff,
            fd_step_deg: 1e-3,
            fd_step_mm: 1e-3,
            rel_tol: 1e-7,
            rel_window: 10,
            min_step: 1e-5,
            no_descent_window: 50,
            loss: LossConfig::default(),
        }
    }
}

impl OptConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.into()));
        if !(self.step_deg > 0.0 && self.step_mm > 0.0) {
            return bad("initial steps must be positive");
        }
        if !(self.step_decay > 0.0 && self.step_decay < 1.0) {
            return bad("step_decay must lie in (0, 1)");
        }
        if !(self.step_growth >= 1.0) {
            return bad("step_growth must be at least 1");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum must lie in [0, 1)");
        }
        if !(self.fd_step_deg > 0.0 && self.fd_step_mm > 0.0) {
            return bad("finite-difference steps must be positive");
        }
        if self.rel_window == 0 {
            return bad("rel_window must be at least 1");
        }
        if !(self.loss.lambda >= 0.0) || !(self.loss.jump_threshold > 0.0) {
            return bad("lambda must be non-negative and jump_threshold positive");
        }
        Ok(())
    }

    fn step_of(&self, index: usize) -> f64 {
        match param_group(index) {
            ParamGroup::Degrees => self.step_deg,
            ParamGroup::Millimeters => self.step_mm,
        }
    }

    fn fd_of(&self, index: usize) -> f64 {
        match param_group(index) {
            ParamGroup::Degrees => self.fd_step_deg,
            ParamGroup::Millimeters => self.fd_step_mm,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct CameraLoss {
    /// Compared pixels: measured valid, clear of measured discontinuities,
    /// and reflecting onto the screen plane off the sphere of their region.
    pub n_valid: usize,
    /// Measured valid pixels clear of discontinuities that do not reflect
    /// onto the screen plane off the sphere of their region.
    pub n_unmatched: usize,
    /// Pixels valid in exactly one map and clear of every discontinuity.
    pub n_mismatch: usize,
    /// Pixels valid in at least one map.
    pub n_union: usize,
    /// Sum of squared correspondence differences, screen px².
    pub sum_sq: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossReport {
    /// Screen px².
    pub total: f64,
    pub n_valid: usize,
    /// Mean squared correspondence difference, screen px².
    pub data_term: f64,
    /// `λ` times the pooled mismatch fraction, screen px².
    pub mismatch_penalty: f64,
    pub per_camera: Vec<CameraLoss>,
    /// Jointly valid pixels whose simulated surface point is on the cornea
    /// and on the sclera.
    pub n_cornea: usize,
    pub n_sclera: usize,
    pub sum_sq_cornea: f64,
    pub sum_sq_sclera: f64,
}

struct Simulated {
    map: CorrespondenceMap,
    region: Vec<Option<Region>>,
}

fn simulate(eye: &EyeModel, scene: &SceneConfig, camera: &CameraModel) -> Simulated {
    let (w, h) = camera.resolution;
    let traced: Vec<(Option<(f64, f64)>, Option<Region>)> = (0..w * h)
        .into_par_iter()
        .map(|i| match trace_pixel(eye, &scene.screen, camera, i % w, i / w) {
            Some(t) => (t.screen_uv, t.screen_uv.map(|_| t.hit.region)),
            None => (None, None),
        })
        .collect();
    let mut map = CorrespondenceMap::invalid(w, h);
    let mut region = Vec::with_capacity(w * h);
    for (i, (uv, r)) in traced.into_iter().enumerate() {
        if let Some((u, v)) = uv {
            map.u[i] = u;
            map.v[i] = v;
            map.valid[i] = true;
        }
        region.push(r);
    }
    Simulated { map, region }
}

/// Marks pixels within `radius` of a discontinuity. `split(i, j)` reports a
/// discontinuity between 4-neighbors `i` and `j` that are both valid; a
/// validity change is always one.
fn discontinuity_guard(
    width: usize,
    height: usize,
    valid: &[bool],
    split: impl Fn(usize, usize) -> bool,
    radius: usize,
) -> Vec<bool> {
    let mut edge = vec![false; width * height];
    for y in 0..height {
        for x in 0..width {
            let i = y * width + x;
            let mut check = |j: usize| {
                if valid[i] != valid[j] || (valid[i] && split(i, j)) {
                    edge[i] = true;
                    edge[j] = true;
                }
            };
            if x + 1 < width {
                check(i + 1);
            }
            if y + 1 < height {
                check(i + width);
            }
        }
    }
    if radius <= 1 {
        return edge;
    }
    let r = radius - 1;
    let mut rows = vec![false; width * height];
    for y in 0..height {
        for x in 0..width {
            if edge[y * width + x] {
                for xx in x.saturating_sub(r)..=(x + r).min(width - 1) {
                    rows[y * width + xx] = true;
                }
            }
        }
    }
    let mut out = vec![false; width * height];
    for y in 0..height {
        for x in 0..width {
            if rows[y * width + x] {
                for yy in y.saturating_sub(r)..=(y + r).min(height - 1) {
                    out[yy * width + x] = true;
                }
            }
        }
    }
    out
}

fn measured_guard(map: &CorrespondenceMap, cfg: &LossConfig) -> Vec<bool> {
    let thr2 = cfg.jump_threshold * cfg.jump_threshold;
    discontinuity_guard(
        map.width,
        map.height,
        &map.valid,
        |i, j| {
            let du = map.u[i] - map.u[j];
            let dv = map.v[i] - map.v[j];
            du * du + dv * dv > thr2
        },
        cfg.boundary_px,
    )
}

fn simulated_guard(sim: &Simulated, cfg: &LossConfig) -> Vec<bool> {
    discontinuity_guard(
        sim.map.width,
        sim.map.height,
        &sim.map.valid,
        |i, j| sim.region[i] != sim.region[j],
        cfg.boundary_px,
    )
}

fn check_measured(measured: &[CorrespondenceMap], scene: &SceneConfig) -> Result<()> {
    if measured.len() != scene.cameras.len() {
        return Err(Error::InvalidConfig(format!(
            "{} measured map(s) for {} camera(s)",
            measured.len(),
            scene.cameras.len()
        )));
    }
    for (k, (m, cam)) in measured.iter().zip(&scene.cameras).enumerate() {
        if (m.width, m.height) != cam.resolution {
            return Err(Error::InvalidConfig(format!(
                "measured map {k} is {}x{}, camera is {}x{}",
                m.width, m.height, cam.resolution.0, cam.resolution.1
            )));
        }
    }
    Ok(())
}

/// Measured maps with their precomputed discontinuity guards.
struct Measurements<'a> {
    maps: &'a [CorrespondenceMap],
    guards: Vec<Vec<bool>>,
    pieces: Vec<Pieces>,
}

impl<'a> Measurements<'a> {
    fn new(maps: &'a [CorrespondenceMap], scene: &SceneConfig, cfg: &LossConfig) -> Result<Self> {
        check_measured(maps, scene)?;
        Ok(Self {
            maps,
            guards: maps.iter().map(|m| measured_guard(m, cfg)).collect(),
            pieces: maps.iter().map(|m| Pieces::of(m, cfg.jump_threshold)).collect(),
        })
    }
}

const NO_PIECE: u32 = u32::MAX;

/// Connected pieces of a measured map: 4-neighbors join when both are valid
/// and their correspondences differ by at most the jump threshold.
struct Pieces {
    label: Vec<u32>,
    count: usize,
}

impl Pieces {
    fn of(map: &CorrespondenceMap, jump_threshold: f64) -> Self {
        let (w, h) = (map.width, map.height);
        let thr2 = jump_threshold * jump_threshold;
        let joined = |i: usize, j: usize| {
            let du = map.u[i] - map.u[j];
            let dv = map.v[i] - map.v[j];
            map.valid[j] && du * du + dv * dv <= thr2
        };
        let mut label = vec![NO_PIECE; w * h];
        let mut count = 0usize;
        let mut stack = Vec::new();
        for start in 0..w * h {
            if !map.valid[start] || label[start] != NO_PIECE {
                continue;
            }
            label[start] = count as u32;
            stack.push(start);
            while let Some(i) = stack.pop() {
                let (x, y) = (i % w, i / w);
                let mut visit = |j: usize| {
                    if label[j] == NO_PIECE && joined(i, j) {
                        label[j] = count as u32;
                        stack.push(j);
                    }
                };
                if x > 0 {
                    visit(i - 1);
                }
                if x + 1 < w {
                    visit(i + 1);
                }
                if y > 0 {
                    visit(i - w);
                }
                if y + 1 < h {
                    visit(i + w);
                }
            }
            count += 1;
        }
        Self { label, count }
    }

    /// Region of each piece by majority of the simulated labels it overlaps.
    fn regions(&self, sim: &[Option<Region>]) -> Vec<Option<Region>> {
        let mut votes = vec![[0usize; 2]; self.count];
        for (i, &l) in self.label.iter().enumerate() {
            if l == NO_PIECE {
                continue;
            }
            match sim[i] {
                Some(Region::Cornea) => votes[l as usize][0] += 1,
                Some(Region::Sclera) => votes[l as usize][1] += 1,
                None => {}
            }
        }
        votes
            .iter()
            .map(|&[c, s]| match (c, s) {
                (0, 0) => None,
                _ if c >= s => Some(Region::Cornea),
                _ => Some(Region::Sclera),
            })
            .collect()
    }
}

/// Screen-plane point seen via the full sphere `(center, radius)`, ignoring
/// the cornea cap boundary and the panel edges.
fn sphere_to_screen(ray: &Ray, center: &Vec3, radius: f64, screen: &ScreenModel) -> Option<(f64, f64)> {
    let t = intersect_ray_sphere(ray, center, radius)?;
    let point = ray.at(t);
    let normal = Unit::new_normalize(point - center);
    if ray.dir.dot(&normal) >= 0.0 {
        return None;
    }
    let r = reflect(&ray.dir, &normal);
    let n = screen.normal();
    if r.dot(&n) >= 0.0 {
        return None;
    }
    let reflected = Ray::new(point, r);
    let s = intersect_ray_plane(&reflected, &screen.pose.translation, &n)?;
    Some(screen.world_to_pixel(&reflected.at(s)))
}

fn empty_report(n_cameras: usize) -> LossReport {
    LossReport {
        total: 0.0,
        n_valid: 0,
        data_term: 0.0,
        mismatch_penalty: 0.0,
        per_camera: Vec::with_capacity(n_cameras),
        n_cornea: 0,
        n_sclera: 0,
        sum_sq_cornea: 0.0,
        sum_sq_sclera: 0.0,
    }
}

fn loss_with(
    params: &EyeParamVector,
    meas: &Measurements<'_>,
    scene: &SceneConfig,
    cfg: &LossConfig,
) -> Result<LossReport> {
    let eye = params.materialize(&scene.eye)?;
    let cornea_center = eye.cornea_center();
    let mut report = empty_report(scene.cameras.len());
    let (mut sum_sq, mut n_mismatch, mut n_union) = (0.0, 0usize, 0usize);
    for (k, cam) in scene.cameras.iter().enumerate() {
        let m = &meas.maps[k];
        let guard = &meas.guards[k];
        let sim = simulate(&eye, scene, cam);
        let sim_guard = simulated_guard(&sim, cfg);
        let pieces = &meas.pieces[k];
        let piece_region = pieces.regions(&sim.region);
        let w = m.width;
        let residuals: Vec<Option<(Region, f64)>> = (0..m.valid.len())
            .into_par_iter()
            .map(|i| {
                if !m.valid[i] || guard[i] {
                    return None;
                }
                let region = piece_region[pieces.label[i] as usize]?;
                let (center, radius) = match region {
                    Region::Cornea => (cornea_center, eye.cornea_radius),
                    Region::Sclera => (eye.sclera_center, eye.sclera_radius),
                };
                let ray = cam.pixel_ray(i % w, i / w);
                let sq = match sphere_to_screen(&ray, &center, radius, &scene.screen) {
                    Some((u, v)) => (m.u[i] - u).powi(2) + (m.v[i] - v).powi(2),
                    None => f64::NAN,
                };
                Some((region, sq))
            })
            .collect();
        let mut c = CameraLoss::default();
        for (region, sq) in residuals.into_iter().flatten() {
            if sq.is_nan() {
                c.n_unmatched += 1;
                continue;
            }
            c.n_valid += 1;
            c.sum_sq += sq;
            match region {
                Region::Cornea => {
                    report.n_cornea += 1;
                    report.sum_sq_cornea += sq;
                }
                Region::Sclera => {
                    report.n_sclera += 1;
                    report.sum_sq_sclera += sq;
                }
            }
        }
        for i in 0..m.valid.len() {
            let (a, b) = (m.valid[i], sim.map.valid[i]);
            if a || b {
                c.n_union += 1;
                if a != b && !guard[i] && !sim_guard[i] {
                    c.n_mismatch += 1;
                }
            }
        }
        sum_sq += c.sum_sq;
        n_mismatch += c.n_mismatch;
        n_union += c.n_union;
        report.n_valid += c.n_valid;
        report.per_camera.push(c);
    }
    if report.n_valid < cfg.n_min {
        return Err(Error::UnreliableLoss { n_valid: report.n_valid, n_min: cfg.n_min });
    }
    report.data_term = sum_sq / report.n_valid as f64;
    report.mismatch_penalty = cfg.lambda * n_mismatch as f64 / n_union.max(1) as f64;
    report.total = report.data_term + report.mismatch_penalty;
    Ok(report)
}

/// Mean squared difference between measured and simulated correspondences
/// plus a validity-mismatch penalty.
///
/// The measured map is split into pieces at validity boundaries and at
/// jumps; each piece takes the region the simulated eye shows over most of
/// it. A measured pixel is compared with the reflection off the full sphere
/// of its region, so the data term varies smoothly with the parameters when
/// the simulated cap seam or the panel edge moves across it. Pixels near a
/// measured discontinuity are left out. The penalty counts pixels valid in
/// exactly one map and clear of the discontinuities of both.
pub fn correspondence_loss(
    params: &EyeParamVector,
    measured: &[CorrespondenceMap],
    scene: &SceneConfig,
    cfg: &LossConfig,
) -> Result<LossReport> {
    let meas = Measurements::new(measured, scene, cfg)?;
    loss_with(params, &meas, scene, cfg)
}

/// Central differences of the loss. Returns the gradient and the diagonal
/// curvature from the same probes (NaN where `center` is unknown).
fn probe_derivatives(
    params: &EyeParamVector,
    center: Option<f64>,
    meas: &Measurements<'_>,
    scene: &SceneConfig,
    config: &OptConfig,
) -> Result<([f64; N_PARAMS], [f64; N_PARAMS])> {
    let base = params.to_array();
    let active: Vec<usize> = (0..N_PARAMS).filter(|&i| params.active[i]).collect();
    let probes: Vec<(usize, f64)> =
        active.iter().flat_map(|&i| [(i, 1.0), (i, -1.0)]).collect();
    let losses: Vec<(f64, f64)> = probes
        .par_iter()
        .map(|&(i, sign)| {
            let mut v = base;
            v[i] += sign * config.fd_of(i);
            let p = EyeParamVector::from_array(&v, params.active).projected();
            let x = p.to_array()[i];
            loss_with(&p, meas, scene, &config.loss).map(|r| (x, r.total))
        })
        .collect::<Result<_>>()?;
    let mut grad = [0.0; N_PARAMS];
    let mut curv = [f64::NAN; N_PARAMS];
    for (k, &i) in active.iter().enumerate() {
        let ((xp, lp), (xm, lm)) = (losses[2 * k], losses[2 * k + 1]);
        grad[i] = (lp - lm) / (xp - xm);
        if let Some(l0) = center {
            let x0 = base[i];
            curv[i] = 2.0 * ((lp - l0) / (xp - x0) - (l0 - lm) / (x0 - xm)) / (xp - xm);
        }
    }
    Ok((grad, curv))
}

/// Central finite-difference gradient of the loss over the active
/// parameters; frozen entries are zero.
pub fn loss_gradient(
    params: &EyeParamVector,
    measured: &[CorrespondenceMap],
    scene: &SceneConfig,
    config: &OptConfig,
) -> Result<[f64; N_PARAMS]> {
    let meas = Measurements::new(measured, scene, &config.loss)?;
    Ok(probe_derivatives(params, None, &meas, scene, config)?.0)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceRow {
    pub iter: usize,
    /// Loss of the current iterate after this iteration's decision.
    pub loss: f64,
    /// Current angular step, degrees.
    pub step: f64,
    pub params: EyeParamVector,
    pub accepted: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopReason {
    ExactFit,
    Stationary,
    SmallStep,
    SmallChange,
    MaxIters,
}

#[derive(Debug, Clone)]
pub struct OptimizeOutcome {
    pub params: EyeParamVector,
    pub estimate: GazeEstimate,
    pub loss: LossReport,
    pub trace: Vec<TraceRow>,
    pub stop: StopReason,
}

fn estimate_from(params: &EyeParamVector, scene: &SceneConfig, loss: &LossReport) -> Result<GazeEstimate> {
    let eye = params.materialize(&scene.eye)?;
    let rms = |s: f64, n: usize| if n == 0 { 0.0 } else { (s / n as f64).sqrt() };
    Ok(GazeEstimate {
        direction: eye.optical_axis,
        cornea_center: eye.cornea_center(),
        sclera_center: eye.sclera_center,
        n_cornea_inliers: loss.n_cornea,
        n_sclera_inliers: loss.n_sclera,
        rms_cornea: rms(loss.sum_sq_cornea, loss.n_cornea),
        rms_sclera: rms(loss.sum_sq_sclera, loss.n_sclera),
        method: MethodTag::Optimize,
    })
}

/// Momentum descent with step halving on rejection. The gradient is scaled
/// per parameter by the curvature the central-difference probes measure,
/// and each move is capped at the group's initial step.
pub fn optimize_gaze(
    init: &EyeParamVector,
    measured: &[CorrespondenceMap],
    scene: &SceneConfig,
    config: &OptConfig,
) -> Result<OptimizeOutcome> {
    config.validate()?;
    if init.n_active() == 0 {
        return Err(Error::InvalidConfig("no active parameters".into()));
    }
    let meas = Measurements::new(measured, scene, &config.loss)?;
    let mut p = init.projected();
    let mut loss = loss_with(&p, &meas, scene, &config.loss)?;
    let mut scale = 1.0;
    let mut trace =
        vec![TraceRow { iter: 0, loss: loss.total, step: config.step_deg, params: p, accepted: true }];
    let finish = |p: EyeParamVector, loss: LossReport, trace: Vec<TraceRow>, stop| {
        Ok(OptimizeOutcome { estimate: estimate_from(&p, scene, &loss)?, params: p, loss, trace, stop })
    };
    if loss.total <= LOSS_FLOOR {
        return finish(p, loss, trace, StopReason::ExactFit);
    }
    let (mut grad, c0) = probe_derivatives(&p, Some(loss.total), &meas, scene, config)?;
    let mut curvature = [f64::NAN; N_PARAMS];
    update_curvature(&mut curvature, &c0);
    let mut velocity = [0.0; N_PARAMS];
    let mut any_accepted = false;
    let max_step = config.step_deg.max(config.step_mm);
    for iter in 1..=config.max_iters {
        if grad.iter().all(|&g| g == 0.0) {
            return finish(p, loss, trace, StopReason::Stationary);
        }
        let mut y = p.to_array();
        for i in 0..N_PARAMS {
            if p.active[i] {
                let cap = config.step_of(i);
                let newton = if curvature[i].is_finite() {
                    grad[i] / curvature[i]
                } else {
                    cap * grad[i].signum()
                };
                velocity[i] = config.momentum * velocity[i] - newton;
                y[i] += scale * velocity[i].clamp(-cap, cap);
            }
        }
        let q = EyeParamVector::from_array(&y, p.active).projected();
        let trial = loss_with(&q, &meas, scene, &config.loss).ok();
        let accepted = matches!(&trial, Some(t) if t.total < loss.total);
        if let (true, Some(t)) = (accepted, trial) {
            p = q;
            loss = t;
            any_accepted = true;
            scale = (scale * config.step_growth).min(1.0);
            if loss.total > LOSS_FLOOR {
                let (g, c) = probe_derivatives(&p, Some(loss.total), &meas, scene, config)?;
                grad = g;
                update_curvature(&mut curvature, &c);
            }
        } else {
            scale *= config.step_decay;
            velocity = [0.0; N_PARAMS];
        }
        trace.push(TraceRow { iter, loss: loss.total, step: scale * config.step_deg, params: p, accepted });
        if !any_accepted {
            if iter >= config.no_descent_window {
                return Err(Error::NoDescent(iter));
            }
            continue;
        }
        if loss.total <= LOSS_FLOOR {
            return finish(p, loss, trace, StopReason::ExactFit);
        }
        if scale * max_step < config.min_step {
            return finish(p, loss, trace, StopReason::SmallStep);
        }
        if trace.len() > config.rel_window {
            let old = trace[trace.len() - 1 - config.rel_window].loss;
            if old - loss.total < config.rel_tol * old {
                return finish(p, loss, trace, StopReason::SmallChange);
            }
        }
    }
    finish(p, loss, trace, StopReason::MaxIters)
}

/// Keeps the last positive curvature per parameter.
fn update_curvature(curvature: &mut [f64; N_PARAMS], probe: &[f64; N_PARAMS]) {
    for (c, &p) in curvature.iter_mut().zip(probe) {
        if p.is_finite() && p > 0.0 {
            *c = p;
        }
    }
}

fn centroid(map: &CorrespondenceMap) -> Option<(f64, f64)> {
    let (mut sx, mut sy, mut n) = (0.0, 0.0, 0usize);
    for y in 0..map.height {
        for x in 0..map.width {
            if map.valid[map.index(x, y)] {
                sx += x as f64;
                sy += y as f64;
                n += 1;
            }
        }
    }
    (n > 0).then(|| (sx / n as f64, sy / n as f64))
}

/// Starting point: zero rotation, nominal shape (frozen) and a translation
/// from the shift between the measured and the nominal valid-pixel centroid,
/// both back-projected to the nominal eye depth.
pub fn init_guess(measured: &[CorrespondenceMap], scene: &SceneConfig) -> Result<EyeParamVector> {
    check_measured(measured, scene)?;
    if measured.iter().all(|m| m.n_valid() == 0) {
        return Err(Error::EmptyMap);
    }
    let mut params = EyeParamVector::nominal(&scene.eye);
    let (mut sum, mut n) = (Vec3::zeros(), 0usize);
    for (m, cam) in measured.iter().zip(&scene.cameras) {
        let nominal = simulate(&scene.eye, scene, cam).map;
        let (Some(cm), Some(cn)) = (centroid(m), centroid(&nominal)) else { continue };
        let depth = (scene.eye.sclera_center - cam.center()).norm();
        let xm = cam.pixel_ray_at(cm.0, cm.1).at(depth);
        let xn = cam.pixel_ray_at(cn.0, cn.1).at(depth);
        sum += xm - xn;
        n += 1;
    }
    if n > 0 {
        params.translation = (sum / n as f64).map(|c| c.clamp(-3.0, 3.0));
    }
    Ok(params.projected())
}

/// Mean squared intensity difference between `frames` and the eye rendered
/// with `pattern`, over simulated valid pixels clear of discontinuities.
/// Frame `k` belongs to camera `k` and shows pattern frame 0.
pub fn image_loss(
    params: &EyeParamVector,
    frames: &[Frame],
    pattern: &PatternSpec,
    scene: &SceneConfig,
    cfg: &LossConfig,
) -> Result<LossReport> {
    if frames.len() != scene.cameras.len() {
        return Err(Error::InvalidConfig(format!(
            "{} frame(s) for {} camera(s)",
            frames.len(),
            scene.cameras.len()
        )));
    }
    let eye = params.materialize(&scene.eye)?;
    let mut report = empty_report(frames.len());
    let mut sum_sq = 0.0;
    for (frame, cam) in frames.iter().zip(&scene.cameras) {
        if (frame.width, frame.height) != cam.resolution {
            return Err(Error::InvalidConfig("frame size differs from the camera".into()));
        }
        let sim = simulate(&eye, scene, cam);
        let guard = simulated_guard(&sim, cfg);
        let rendered = frame_from_correspondence(&sim.map, pattern, 0, IntensityNoise::NONE)?;
        let mut c = CameraLoss::default();
        for i in 0..frame.data.len() {
            if !sim.map.valid[i] {
                continue;
            }
            c.n_union += 1;
            if guard[i] {
                continue;
            }
            let d = frame.data[i] - rendered.data[i];
            c.n_valid += 1;
            c.sum_sq += d * d;
            match sim.region[i] {
                Some(Region::Cornea) => {
                    report.n_cornea += 1;
                    report.sum_sq_cornea += d * d;
                }
                _ => {
                    report.n_sclera += 1;
                    report.sum_sq_sclera += d * d;
                }
            }
        }
        sum_sq += c.sum_sq;
        report.n_valid += c.n_valid;
        report.per_camera.push(c);
    }
    if report.n_valid < cfg.n_min {
        return Err(Error::UnreliableLoss { n_valid: report.n_valid, n_min: cfg.n_min });
    }
    report.data_term = sum_sq / report.n_valid as f64;
    report.total = report.data_term;
    Ok(report)
}

pub const TRACE_CSV_HEADER: &str = "iter,loss,step,azimuth,elevation,tx,ty,tz";

pub fn trace_to_csv(trace: &[TraceRow]) -> String {
    let mut s = format!("{TRACE_CSV_HEADER}\n");
    for r in trace {
        let p = &r.params;
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{}",
            r.iter, r.loss, r.step, p.azimuth, p.elevation, p.translation.x, p.translation.y, p.translation.z
        );
    }
    s
}

pub fn save_trace(trace: &[TraceRow], path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, trace_to_csv(trace))?;
    Ok(())
}
