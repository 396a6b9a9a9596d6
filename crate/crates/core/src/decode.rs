//! Fringe decoding: single-shot crossed fringes via a 2D Morlet wavelet
//! transform, N-step phase shifting, quality-guided unwrapping and phase to
//! correspondence conversion.

use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::f64::consts::{PI, TAU};
use std::path::Path;

use rayon::prelude::*;
use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

use crate::error::{Error, Result};
use crate::imageio::{artifact_name, read_mask_pgm, read_pfm, write_mask_pgm, write_pfm, FloatImage};
use crate::pattern::{FringeAxis, PatternSpec, PHASE_SHIFT_AMPLITUDE};
use crate::render::{render_frame, CorrespondenceMap, Frame, IntensityNoise};
use crate::rng::mix_seed;
use crate::scene::{SceneConfig, ScreenModel};

#[derive(Debug, Clone, PartialEq)]
pub struct PhaseMap {
    pub width: usize,
    pub height: usize,
    /// Radians; NaN where invalid.
    pub phase: Vec<f64>,
    /// In `[0, 1]`.
    pub quality: Vec<f64>,
    pub valid: Vec<bool>,
    pub wrapped: bool,
}

impl PhaseMap {
    pub fn n_valid(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }

    pub fn get(&self, px: usize, py: usize) -> Option<f64> {
        let i = py * self.width + px;
        self.valid[i].then(|| self.phase[i])
    }

    /// Largest |Δφ| over valid 4-neighbor pairs.
    pub fn max_neighbor_jump(&self) -> f64 {
        let (w, h) = (self.width, self.height);
        let mut worst = 0.0f64;
        for y in 0..h {
            for x in 0..w {
                let i = y * w + x;
                if !self.valid[i] {
                    continue;
                }
                if x + 1 < w && self.valid[i + 1] {
                    worst = worst.max((self.phase[i + 1] - self.phase[i]).abs());
                }
                if y + 1 < h && self.valid[i + w] {
                    worst = worst.max((self.phase[i + w] - self.phase[i]).abs());
                }
            }
        }
        worst
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WaveletParams {
    /// Morlet carrier, unitless.
    pub omega0: f64,
    pub scale_min: f64,
    pub scale_max: f64,
    pub n_scales: usize,
    pub orientation: FringeAxis,
    /// Carrier directions swept symmetrically about `orientation`; 1 keeps the
    /// orientation fixed.
    pub n_angles: usize,
    /// Half-width of the direction sweep, degrees.
    pub angle_span: f64,
}

pub const DEFAULT_OMEGA0: f64 = 5.5;

impl WaveletParams {
    /// Scale sweep covering local fringe periods `[period_min, period_max]`
    /// in camera pixels.
    pub fn for_periods(period_min: f64, period_max: f64, orientation: FringeAxis) -> Self {
        let s = |p: f64| DEFAULT_OMEGA0 * p / TAU;
        Self {
            omega0: DEFAULT_OMEGA0,
            scale_min: s(period_min),
            scale_max: s(period_max),
            n_scales: 16,
            orientation,
            n_angles: 1,
            angle_span: 0.0,
        }
    }

    /// Same scales, with the carrier direction also swept over
    /// `±angle_span` degrees in `n_angles` steps.
    pub fn with_angle_sweep(self, n_angles: usize, angle_span: f64) -> Self {
        Self { n_angles, angle_span, ..self }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0 < self.scale_min && self.scale_min < self.scale_max) {
            return Err(Error::InvalidConfig("wavelet scales need 0 < scale_min < scale_max".into()));
        }
        if self.n_scales < 8 {
            return Err(Error::InvalidConfig("wavelet sweep needs at least 8 scales".into()));
        }
        if self.n_angles == 0 || !(0.0..90.0).contains(&self.angle_span) {
            return Err(Error::InvalidConfig("angle sweep needs n_angles >= 1 and span in [0, 90)".into()));
        }
        if !(self.omega0 > 0.0) {
            return Err(Error::InvalidConfig("omega0 must be positive".into()));
        }
        Ok(())
    }

    pub fn scales(&self) -> Vec<f64> {
        let ratio = self.scale_max / self.scale_min;
        (0..self.n_scales)
            .map(|i| self.scale_min * ratio.powf(i as f64 / (self.n_scales - 1) as f64))
            .collect()
    }

    /// Carrier directions, radians from the x axis.
    pub fn angles(&self) -> Vec<f64> {
        let base = match self.orientation {
            FringeAxis::X => 0.0,
            FringeAxis::Y => std::f64::consts::FRAC_PI_2,
        };
        if self.n_angles == 1 {
            return vec![base];
        }
        let span = self.angle_span.to_radians();
        (0..self.n_angles)
            .map(|i| base - span + 2.0 * span * i as f64 / (self.n_angles - 1) as f64)
            .collect()
    }

    /// Pixels this close to the frame edge are not decoded (envelope
    /// truncated at 4σ of the largest scale).
    pub fn border(&self) -> usize {
        (4.0 * self.scale_max).ceil() as usize
    }
}

impl Default for WaveletParams {
    fn default() -> Self {
        Self::for_periods(12.0, 24.0, FringeAxis::X)
    }
}

/// Minimum ridge quality for a valid wavelet phase.
pub const Q_MIN: f64 = 0.15;
/// Floor on the quality normalization, intensity units; keeps a frame with no
/// carrier at all from normalizing its noise up to full quality.
pub const MIN_RIDGE_MODULUS: f64 = 0.01;
/// Minimum phase-shift modulation, as a fraction of the pattern amplitude.
pub const M_MIN: f64 = 0.05;

#[inline]
fn wrap(phi: f64) -> f64 {
    let w = (phi + PI).rem_euclid(TAU) - PI;
    if w <= -PI {
        w + TAU
    } else {
        w
    }
}

#[inline]
fn angular_frequency(i: usize, n: usize) -> f64 {
    let f = if i <= n / 2 { i as f64 } else { i as f64 - n as f64 };
    TAU * f / n as f64
}

struct Fft2 {
    w: usize,
    h: usize,
    row: std::sync::Arc<dyn Fft<f64>>,
    col: std::sync::Arc<dyn Fft<f64>>,
}

impl Fft2 {
    fn new(w: usize, h: usize, inverse: bool) -> Self {
        let mut planner = FftPlanner::new();
        let (row, col) = if inverse {
            (planner.plan_fft_inverse(w), planner.plan_fft_inverse(h))
        } else {
            (planner.plan_fft_forward(w), planner.plan_fft_forward(h))
        };
        Self { w, h, row, col }
    }

    fn process(&self, buf: &mut [Complex64]) {
        self.row.process(buf);
        let mut t = vec![Complex64::new(0.0, 0.0); buf.len()];
        for y in 0..self.h {
            for x in 0..self.w {
                t[x * self.h + y] = buf[y * self.w + x];
            }
        }
        self.col.process(&mut t);
        for x in 0..self.w {
            for y in 0..self.h {
                buf[y * self.w + x] = t[x * self.h + y];
            }
        }
    }
}

/// Wrapped phase of the fringe along `params.orientation` by the Morlet
/// ridge method: the ridge is the probe (scale, and direction when swept)
/// of largest modulus.
pub fn cwt2_phase(frame: &Frame, params: &WaveletParams) -> Result<PhaseMap> {
    params.validate()?;
    let (w, h) = (frame.width, frame.height);
    let border = params.border();
    let pad = border;
    let (pw, ph) = (w + 2 * pad, h + 2 * pad);
    let mean = frame.data.iter().sum::<f64>() / frame.data.len() as f64;
    let mut spectrum = vec![Complex64::new(0.0, 0.0); pw * ph];
    for y in 0..h {
        for x in 0..w {
            spectrum[(y + pad) * pw + x + pad] = Complex64::new(frame.at(x, y) - mean, 0.0);
        }
    }
    Fft2::new(pw, ph, false).process(&mut spectrum);
    let inverse = Fft2::new(pw, ph, true);
    let norm = 1.0 / (pw * ph) as f64;
    let kx: Vec<f64> = (0..pw).map(|i| angular_frequency(i, pw)).collect();
    let ky: Vec<f64> = (0..ph).map(|i| angular_frequency(i, ph)).collect();
    let omega0 = params.omega0;
    let probes: Vec<(f64, f64, f64)> = params
        .scales()
        .iter()
        .flat_map(|&s| params.angles().into_iter().map(move |a| (s, omega0 * a.cos(), omega0 * a.sin())))
        .collect();

    let per_scale: Vec<Vec<Complex64>> = probes
        .par_iter()
        .map(|&(s, cx, cy)| {
            let mut buf = spectrum.clone();
            for y in 0..ph {
                for x in 0..pw {
                    let (a, b) = (s * kx[x] - cx, s * ky[y] - cy);
                    buf[y * pw + x] *= (-(a * a + b * b) / 2.0).exp() * norm;
                }
            }
            inverse.process(&mut buf);
            let mut out = Vec::with_capacity(w * h);
            for y in 0..h {
                out.extend_from_slice(&buf[(y + pad) * pw + pad..(y + pad) * pw + pad + w]);
            }
            out
        })
        .collect();

    let mut ridge = vec![Complex64::new(0.0, 0.0); w * h];
    for coeffs in &per_scale {
        for (r, c) in ridge.iter_mut().zip(coeffs) {
            if c.norm_sqr() > r.norm_sqr() {
                *r = *c;
            }
        }
    }
    let interior = |x: usize, y: usize| x >= border && y >= border && x + border < w && y + border < h;
    let mut moduli: Vec<f64> = (0..w * h)
        .filter(|&i| interior(i % w, i / w))
        .map(|i| ridge[i].norm())
        .collect();
    let p95 = if moduli.is_empty() {
        0.0
    } else {
        moduli.sort_by(f64::total_cmp);
        moduli[((moduli.len() - 1) as f64 * 0.95).round() as usize]
    };
    let scale = p95.max(MIN_RIDGE_MODULUS);

    let mut map = PhaseMap {
        width: w,
        height: h,
        phase: vec![f64::NAN; w * h],
        quality: vec![0.0; w * h],
        valid: vec![false; w * h],
        wrapped: true,
    };
    for i in 0..w * h {
        if !interior(i % w, i / w) {
            continue;
        }
        let q = (ridge[i].norm() / scale).min(1.0);
        map.quality[i] = q;
        if q >= Q_MIN {
            map.valid[i] = true;
            map.phase[i] = wrap(ridge[i].arg());
        }
    }
    let passing = map.n_valid();
    if (passing as f64) < 0.01 * (w * h) as f64 {
        return Err(Error::NoRidge { passing, total: w * h });
    }
    Ok(map)
}

/// Wrapped phase from `n_shifts` frames of a phase-shift set.
pub fn phase_shift_decode(frames: &[Frame], pattern: &PatternSpec) -> Result<PhaseMap> {
    let PatternSpec::PhaseShiftSet { n_shifts, .. } = *pattern else {
        return Err(Error::InvalidPattern("phase-shift decoding needs a PhaseShiftSet".into()));
    };
    pattern.validate()?;
    if frames.len() != n_shifts {
        return Err(Error::ShiftCountMismatch { expected: n_shifts, got: frames.len() });
    }
    let (w, h) = (frames[0].width, frames[0].height);
    if frames.iter().any(|f| f.width != w || f.height != h) {
        return Err(Error::InvalidPattern("phase-shift frames differ in size".into()));
    }
    let trig: Vec<(f64, f64)> = (0..n_shifts).map(|k| (TAU * k as f64 / n_shifts as f64).sin_cos()).collect();
    let mut map = PhaseMap {
        width: w,
        height: h,
        phase: vec![f64::NAN; w * h],
        quality: vec![0.0; w * h],
        valid: vec![false; w * h],
        wrapped: true,
    };
    for i in 0..w * h {
        let (mut s, mut c) = (0.0, 0.0);
        for (f, &(sin_k, cos_k)) in frames.iter().zip(&trig) {
            s += f.data[i] * sin_k;
            c += f.data[i] * cos_k;
        }
        let modulation = 2.0 / n_shifts as f64 * s.hypot(c);
        let q = (modulation / PHASE_SHIFT_AMPLITUDE).min(1.0);
        map.quality[i] = q;
        if q >= M_MIN {
            map.valid[i] = true;
            map.phase[i] = wrap((-s).atan2(c));
        }
    }
    Ok(map)
}

#[derive(PartialEq)]
struct Queued {
    quality: f64,
    index: usize,
}

impl Eq for Queued {}

impl Ord for Queued {
    fn cmp(&self, other: &Self) -> Ordering {
        self.quality.total_cmp(&other.quality).then_with(|| other.index.cmp(&self.index))
    }
}

impl PartialOrd for Queued {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Quality-guided flood-fill unwrapping from `seed`.
///
/// A pixel whose unwrapped value would differ by π or more from any already
/// unwrapped neighbor is dropped, so the result is continuous across every
/// valid 4-neighbor pair. Pixels not reached from the seed are invalid.
pub fn unwrap2(map: &PhaseMap, seed: (usize, usize)) -> Result<PhaseMap> {
    let (w, h) = (map.width, map.height);
    if seed.0 >= w || seed.1 >= h || !map.valid[seed.1 * w + seed.0] {
        return Err(Error::InvalidSeed(seed.0, seed.1));
    }
    let neighbors = |i: usize| {
        let (x, y) = (i % w, i / w);
        [
            (x > 0).then(|| i - 1),
            (x + 1 < w).then(|| i + 1),
            (y > 0).then(|| i - w),
            (y + 1 < h).then(|| i + w),
        ]
        .into_iter()
        .flatten()
    };
    let mut out = PhaseMap {
        width: w,
        height: h,
        phase: vec![f64::NAN; w * h],
        quality: map.quality.clone(),
        valid: vec![false; w * h],
        wrapped: false,
    };
    let mut visited = vec![false; w * h];
    let mut heap = BinaryHeap::new();
    let s = seed.1 * w + seed.0;
    heap.push(Queued { quality: map.quality[s], index: s });
    while let Some(Queued { index: i, .. }) = heap.pop() {
        if visited[i] {
            continue;
        }
        visited[i] = true;
        let reference = neighbors(i)
            .filter(|&n| out.valid[n])
            .max_by(|&a, &b| map.quality[a].total_cmp(&map.quality[b]).then_with(|| b.cmp(&a)));
        let value = match reference {
            None => map.phase[i],
            Some(n) => {
                let d = map.phase[i] - out.phase[n];
                map.phase[i] - TAU * (d / TAU).round()
            }
        };
        if neighbors(i).any(|n| out.valid[n] && (value - out.phase[n]).abs() >= PI) {
            continue;
        }
        out.phase[i] = value;
        out.valid[i] = true;
        for n in neighbors(i) {
            if map.valid[n] && !visited[n] {
                heap.push(Queued { quality: map.quality[n], index: n });
            }
        }
    }
    for i in 0..w * h {
        if !out.valid[i] {
            out.quality[i] = 0.0;
        }
    }
    Ok(out)
}

/// Known correspondence at one camera pixel, fixing the absolute phase.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Anchor {
    pub pixel: (usize, usize),
    pub u0: f64,
    pub v0: f64,
}

/// `u = (φ_x − φ_x(anchor))·period_x/2π + u0`, likewise for `v`.
pub fn phases_to_correspondence(
    phi_x: &PhaseMap,
    period_x: f64,
    phi_y: &PhaseMap,
    period_y: f64,
    anchor: &Anchor,
) -> Result<CorrespondenceMap> {
    let (w, h) = (phi_x.width, phi_x.height);
    if (phi_y.width, phi_y.height) != (w, h) {
        return Err(Error::InvalidConfig("phase maps differ in size".into()));
    }
    let (ax, ay) = anchor.pixel;
    let (Some(ref_x), Some(ref_y)) = (
        (ax < w && ay < h).then(|| phi_x.get(ax, ay)).flatten(),
        (ax < w && ay < h).then(|| phi_y.get(ax, ay)).flatten(),
    ) else {
        return Err(Error::InvalidAnchor(ax, ay));
    };
    let mut map = CorrespondenceMap::invalid(w, h);
    for i in 0..w * h {
        if phi_x.valid[i] && phi_y.valid[i] {
            map.u[i] = (phi_x.phase[i] - ref_x) * period_x / TAU + anchor.u0;
            map.v[i] = (phi_y.phase[i] - ref_y) * period_y / TAU + anchor.v0;
            map.valid[i] = true;
        }
    }
    Ok(map)
}

/// Correspondence from the two unwrapped phases of a crossed fringe.
pub fn phase_to_correspondence(
    phi_x: &PhaseMap,
    phi_y: &PhaseMap,
    pattern: &PatternSpec,
    anchor: &Anchor,
) -> Result<CorrespondenceMap> {
    let PatternSpec::CrossedFringe { period_x, period_y, .. } = *pattern else {
        return Err(Error::InvalidPattern("expected a crossed fringe pattern".into()));
    };
    phases_to_correspondence(phi_x, period_x, phi_y, period_y, anchor)
}

/// Invalidates pixels whose correspondence lies off the panel.
pub fn clip_to_screen(map: &mut CorrespondenceMap, screen: &ScreenModel) {
    for i in 0..map.u.len() {
        if map.valid[i] && !screen.contains(map.u[i], map.v[i]) {
            map.valid[i] = false;
            map.u[i] = f64::NAN;
            map.v[i] = f64::NAN;
        }
    }
}

/// Anchor at the pixel nearest the centroid of the pixels valid in `truth`
/// and in every decoded map; its correspondence is taken from `truth`.
pub fn simulator_anchor(truth: &CorrespondenceMap, decoded: &[&PhaseMap]) -> Option<Anchor> {
    let w = truth.width;
    let ok = |i: usize| truth.valid[i] && decoded.iter().all(|m| m.valid[i]);
    let idx: Vec<usize> = (0..truth.valid.len()).filter(|&i| ok(i)).collect();
    if idx.is_empty() {
        return None;
    }
    let (sx, sy) = idx.iter().fold((0.0, 0.0), |(a, b), &i| (a + (i % w) as f64, b + (i / w) as f64));
    let (cx, cy) = (sx / idx.len() as f64, sy / idx.len() as f64);
    let best = idx.iter().copied().min_by(|&a, &b| {
        let d = |i: usize| ((i % w) as f64 - cx).powi(2) + ((i / w) as f64 - cy).powi(2);
        d(a).total_cmp(&d(b)).then(a.cmp(&b))
    })?;
    Some(Anchor { pixel: (best % w, best / w), u0: truth.u[best], v0: truth.v[best] })
}

/// Phase-shift acquisition settings for both screen axes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PhaseShiftSetup {
    /// Screen pixels.
    pub period: f64,
    pub n_shifts: usize,
}

impl Default for PhaseShiftSetup {
    fn default() -> Self {
        Self { period: 384.0, n_shifts: 64 }
    }
}

impl PhaseShiftSetup {
    pub fn pattern(&self, direction: FringeAxis) -> PatternSpec {
        PatternSpec::PhaseShiftSet { period: self.period, n_shifts: self.n_shifts, direction }
    }
}

/// Renders every frame of a phase-shift set; shift `k` uses noise seed
/// `mix(seed, k)`.
pub fn render_phase_shift_frames(
    scene: &SceneConfig,
    cam: usize,
    pattern: &PatternSpec,
    noise: IntensityNoise,
) -> Result<Vec<Frame>> {
    (0..pattern.n_frames())
        .map(|k| {
            let n = IntensityNoise { sigma: noise.sigma, seed: mix_seed(noise.seed, &[k as u64]) };
            render_frame(scene, cam, pattern, k, n)
        })
        .collect()
}

/// Wrapped phase maps for both axes, decoded from simulated phase-shift
/// frames.
pub fn simulate_and_decode_phases(
    scene: &SceneConfig,
    cam: usize,
    setup: &PhaseShiftSetup,
    noise: IntensityNoise,
) -> Result<(PhaseMap, PhaseMap)> {
    let mut out = Vec::with_capacity(2);
    for (axis, dir) in [(0u64, FringeAxis::X), (1, FringeAxis::Y)] {
        let pattern = setup.pattern(dir);
        let n = IntensityNoise { sigma: noise.sigma, seed: mix_seed(noise.seed, &[axis]) };
        let frames = render_phase_shift_frames(scene, cam, &pattern, n)?;
        out.push(phase_shift_decode(&frames, &pattern)?);
    }
    let y = out.pop().unwrap();
    let x = out.pop().unwrap();
    Ok((x, y))
}

/// Unwraps both wrapped maps from the anchor and converts them to a
/// correspondence clipped to the screen.
pub fn correspondence_from_wrapped(
    phi_x: &PhaseMap,
    phi_y: &PhaseMap,
    setup: &PhaseShiftSetup,
    anchor: &Anchor,
    screen: &ScreenModel,
) -> Result<CorrespondenceMap> {
    let ux = unwrap2(phi_x, anchor.pixel)?;
    let uy = unwrap2(phi_y, anchor.pixel)?;
    let mut map = phases_to_correspondence(&ux, setup.period, &uy, setup.period, anchor)?;
    clip_to_screen(&mut map, screen);
    Ok(map)
}

/// Phase map as a 3-channel PFM `(phase, quality, wrapped)` plus a mask.
pub fn save_phase(dir: impl AsRef<Path>, cam: usize, kind: &str, map: &PhaseMap) -> Result<()> {
    let dir = dir.as_ref();
    let flag = if map.wrapped { 1.0 } else { 0.0 };
    let mut data = Vec::with_capacity(map.phase.len() * 3);
    for i in 0..map.phase.len() {
        let p = if map.valid[i] { map.phase[i] as f32 } else { f32::NAN };
        data.extend_from_slice(&[p, map.quality[i] as f32, flag]);
    }
    write_pfm(
        dir.join(artifact_name(cam, kind, 0, "pfm")),
        &FloatImage { width: map.width, height: map.height, channels: 3, data },
    )?;
    write_mask_pgm(dir.join(artifact_name(cam, &format!("{kind}mask"), 0, "pgm")), map.width, map.height, &map.valid)
}

pub fn load_phase(dir: impl AsRef<Path>, cam: usize, kind: &str) -> Result<PhaseMap> {
    let dir = dir.as_ref();
    let img = read_pfm(dir.join(artifact_name(cam, kind, 0, "pfm")))?;
    if img.channels != 3 {
        return Err(Error::Format("phase PFM must have 3 channels".into()));
    }
    let (_, _, mask) = read_mask_pgm(dir.join(artifact_name(cam, &format!("{kind}mask"), 0, "pgm")))?;
    let n = img.width * img.height;
    if mask.len() != n {
        return Err(Error::Format("phase mask size differs from phase map".into()));
    }
    let mut map = PhaseMap {
        width: img.width,
        height: img.height,
        phase: vec![f64::NAN; n],
        quality: vec![0.0; n],
        valid: mask,
        wrapped: n > 0 && img.data[2] != 0.0,
    };
    for i in 0..n {
        map.quality[i] = img.data[3 * i + 1] as f64;
        if map.valid[i] {
            map.phase[i] = img.data[3 * i] as f64;
        }
    }
    Ok(map)
}
