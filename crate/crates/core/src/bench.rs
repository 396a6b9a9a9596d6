//! Repeated synthetic measurements over eye rotation positions and the mean
//! relative gaze error per position.

use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use nalgebra::Unit;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::decode::{simulator_anchor, simulate_and_decode_phases, correspondence_from_wrapped, PhaseShiftSetup};
use crate::error::{Error, Result};
use crate::gaze_normals::{estimate_gaze, relative_gaze_angle, ClusterParams, GazeEstimate};
use crate::geometry::{rotation_about, UnitVec3, Vec3};
use crate::optimize::{init_guess, optimize_gaze, OptConfig};
use crate::render::{add_correspondence_noise, render_correspondence, CorrespondenceMap, IntensityNoise};
use crate::rng::mix_seed;
use crate::scene::{EyeModel, SceneConfig, WORLD_UP};
use crate::stereo::{reconstruct_field, DepthSweepParams};

/// Share of failed reps above which a position is aborted.
pub const MAX_FAILURE_FRACTION: f64 = 0.2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BenchMethod {
    StereoNormals,
    Optimize,
}

impl BenchMethod {
    pub fn as_str(self) -> &'static str {
        match self {
            BenchMethod::StereoNormals => "stereo-normals",
            BenchMethod::Optimize => "optimize",
        }
    }

    /// Rotation positions used for this method unless configured otherwise.
    pub fn default_positions(self) -> Vec<f64> {
        match self {
            BenchMethod::StereoNormals => vec![-3.0, 0.0, 3.0, 6.0],
            BenchMethod::Optimize => vec![-4.0, -2.0, 0.0, 2.0, 4.0],
        }
    }
}

impl std::str::FromStr for BenchMethod {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "stereo-normals" => Ok(BenchMethod::StereoNormals),
            "optimize" => Ok(BenchMethod::Optimize),
            other => Err(Error::InvalidConfig(format!("unknown method `{other}`"))),
        }
    }
}

/// Measurement noise: Gaussian on the correspondences (screen px) or on the
/// camera intensities of phase-shift frames that are then decoded.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseModel {
    Correspondence { sigma_c: f64 },
    Intensity { sigma_i: f64 },
}

impl NoiseModel {
    pub const NONE: NoiseModel = NoiseModel::Correspondence { sigma_c: 0.0 };

    pub fn sigma(&self) -> f64 {
        match *self {
            NoiseModel::Correspondence { sigma_c } => sigma_c,
            NoiseModel::Intensity { sigma_i } => sigma_i,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchmarkConfig {
    /// Rotation positions, degrees. Must contain 0.
    pub positions: Vec<f64>,
    pub reps: usize,
    pub noise: NoiseModel,
    pub method: BenchMethod,
    /// Axis through the sclera center about which the eye turns.
    pub rotation_axis: UnitVec3,
    pub master_seed: u64,
    pub cluster: ClusterParams,
    /// Depth sweep; `None` derives it from the scene.
    pub sweep: Option<DepthSweepParams>,
    pub stride: usize,
    pub optimizer: OptConfig,
    /// Camera used by the optimize method.
    pub optimize_camera: usize,
    pub phase_shift: PhaseShiftSetup,
}

impl BenchmarkConfig {
    pub fn new(method: BenchMethod) -> Self {
        Self {
            positions: method.default_positions(),
            reps: 20,
            noise: NoiseModel::NONE,
            method,
            rotation_axis: Unit::new_normalize(WORLD_UP),
            master_seed: 0,
            cluster: ClusterParams::default(),
            sweep: None,
            stride: 1,
            optimizer: OptConfig::default(),
            optimize_camera: 0,
            phase_shift: PhaseShiftSetup::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if !self.positions.contains(&0.0) {
            return bad("positions must include 0".into());
        }
        if self.positions.iter().any(|a| !a.is_finite()) {
            return bad("positions must be finite".into());
        }
        if self.reps == 0 {
            return bad("reps must be at least 1".into());
        }
        let sigma = self.noise.sigma();
        if !(sigma >= 0.0 && sigma.is_finite()) {
            return bad(format!("noise sigma must be finite and non-negative (got {sigma})"));
        }
        if ((self.rotation_axis.norm() - 1.0).abs()) > 1e-9 {
            return bad("rotation_axis must be a unit vector".into());
        }
        self.cluster.validate()?;
        self.optimizer.validate()?;
        if let Some(s) = &self.sweep {
            s.validate()?;
        }
        Ok(())
    }
}

/// `||θ̄_a − θ̄_0| − |a||`, degrees.
pub fn epsilon(theta_a: f64, theta_0: f64, a: f64) -> f64 {
    ((theta_a - theta_0).abs() - a.abs()).abs()
}

/// The nominal eye turned by `angle_deg` about `axis` through its sclera
/// center.
pub fn eye_at_position(eye: &EyeModel, axis: &UnitVec3, angle_deg: f64) -> EyeModel {
    let turned = rotation_about(axis, angle_deg) * eye.optical_axis.into_inner();
    EyeModel { optical_axis: Unit::new_normalize(turned), ..*eye }
}

/// Seed of rep `rep` at position `a`.
pub fn rep_seed(master_seed: u64, a: f64, rep: usize) -> u64 {
    mix_seed(master_seed, &[a.to_bits(), rep as u64])
}

/// Correspondence map of camera `cam` for `scene` under `noise`.
pub fn measure_correspondence(
    scene: &SceneConfig,
    cam: usize,
    noise: &NoiseModel,
    setup: &PhaseShiftSetup,
    seed: u64,
) -> Result<CorrespondenceMap> {
    let truth = render_correspondence(scene, cam);
    match *noise {
        NoiseModel::Correspondence { sigma_c } => {
            Ok(add_correspondence_noise(&truth, sigma_c, seed, &scene.screen))
        }
        NoiseModel::Intensity { sigma_i } => {
            let (px, py) = simulate_and_decode_phases(scene, cam, setup, IntensityNoise { sigma: sigma_i, seed })?;
            let anchor = simulator_anchor(&truth, &[&px, &py]).ok_or(Error::EmptyMap)?;
            correspondence_from_wrapped(&px, &py, setup, &anchor, &scene.screen)
        }
    }
}

/// One end-to-end measurement of the eye at `angle_deg`.
pub fn measure_gaze(
    config: &BenchmarkConfig,
    scene: &SceneConfig,
    angle_deg: f64,
    noise: &NoiseModel,
    seed: u64,
) -> Result<GazeEstimate> {
    let eye = eye_at_position(&scene.eye, &config.rotation_axis, angle_deg);
    let observed = SceneConfig { eye, ..scene.clone() };
    match config.method {
        BenchMethod::StereoNormals => {
            scene.require_stereo()?;
            let c1 = measure_correspondence(&observed, 0, noise, &config.phase_shift, mix_seed(seed, &[0]))?;
            let c2 = measure_correspondence(&observed, 1, noise, &config.phase_shift, mix_seed(seed, &[1]))?;
            let sweep = config.sweep.unwrap_or_else(|| DepthSweepParams::for_scene(scene));
            let field = reconstruct_field(scene, &c1, &c2, &sweep, config.stride)?;
            let cluster = ClusterParams { rng_seed: mix_seed(config.cluster.rng_seed, &[seed]), ..config.cluster };
            estimate_gaze(&field, &cluster, true)
        }
        BenchMethod::Optimize => {
            let cam = config.optimize_camera;
            if cam >= scene.cameras.len() {
                return Err(Error::InvalidConfig(format!("optimize camera {cam} does not exist")));
            }
            let single = scene.single_camera(cam);
            let observed = observed.single_camera(cam);
            let measured =
                vec![measure_correspondence(&observed, 0, noise, &config.phase_shift, mix_seed(seed, &[0]))?];
            let init = init_guess(&measured, &single)?;
            Ok(optimize_gaze(&init, &measured, &single, &config.optimizer)?.estimate)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepRecord {
    pub position: f64,
    pub rep: usize,
    pub seed: u64,
    /// Relative gaze angle to the reference, degrees; `None` on failure.
    pub theta: Option<f64>,
    pub direction: Option<[f64; 3]>,
    pub error: Option<String>,
    #[serde(skip)]
    pub estimate: Option<GazeEstimate>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PositionSummary {
    pub position: f64,
    pub mean_theta: Option<f64>,
    pub std_theta: Option<f64>,
    pub epsilon: Option<f64>,
    pub n_ok: usize,
    pub n_failed: usize,
    pub aborted: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct RuntimeStats {
    pub total_seconds: f64,
    pub mean_rep_seconds: f64,
    pub max_rep_seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkResult {
    pub method: BenchMethod,
    pub master_seed: u64,
    pub noise: NoiseModel,
    pub rotation_axis: [f64; 3],
    pub reps_per_position: usize,
    /// Gaze of the noiseless reference run at position 0.
    pub reference: [f64; 3],
    pub positions: Vec<PositionSummary>,
    pub reps: Vec<RepRecord>,
    pub runtime: RuntimeStats,
}

impl BenchmarkResult {
    pub fn aborted_positions(&self) -> Vec<f64> {
        self.positions.iter().filter(|p| p.aborted).map(|p| p.position).collect()
    }

    /// Largest ε over the positions; `None` if any position has no ε.
    pub fn max_epsilon(&self) -> Option<f64> {
        self.positions.iter().try_fold(0.0f64, |m, p| p.epsilon.map(|e| m.max(e)))
    }

    pub fn mean_epsilon(&self) -> Option<f64> {
        let sum = self.positions.iter().try_fold(0.0, |s, p| p.epsilon.map(|e| s + e))?;
        Some(sum / self.positions.len() as f64)
    }
}

fn to_array(v: &Vec3) -> [f64; 3] {
    [v.x, v.y, v.z]
}

/// Runs every (position, rep) pair and summarizes θ̄, its spread and ε per
/// position. Positions with more than 20% failed reps are aborted and carry
/// no statistics.
pub fn run_benchmark(config: &BenchmarkConfig, scene: &SceneConfig) -> Result<BenchmarkResult> {
    config.validate()?;
    scene.validate()?;
    let start = Instant::now();
    let reference = measure_gaze(config, scene, 0.0, &NoiseModel::NONE, mix_seed(config.master_seed, &[u64::MAX]))?;
    let jobs: Vec<(f64, usize)> =
        config.positions.iter().flat_map(|&a| (0..config.reps).map(move |r| (a, r))).collect();
    let outcomes: Vec<(RepRecord, f64)> = jobs
        .par_iter()
        .map(|&(a, r)| {
            let t0 = Instant::now();
            let seed = rep_seed(config.master_seed, a, r);
            let est = measure_gaze(config, scene, a, &config.noise, seed);
            let record = match est {
                Ok(g) => RepRecord {
                    position: a,
                    rep: r,
                    seed,
                    theta: Some(relative_gaze_angle(&g.direction, &reference.direction, &config.rotation_axis)),
                    direction: Some(to_array(&g.direction)),
                    error: None,
                    estimate: Some(g),
                },
                Err(e) => RepRecord {
                    position: a,
                    rep: r,
                    seed,
                    theta: None,
                    direction: None,
                    error: Some(e.to_string()),
                    estimate: None,
                },
            };
            (record, t0.elapsed().as_secs_f64())
        })
        .collect();
    let (reps, times): (Vec<RepRecord>, Vec<f64>) = outcomes.into_iter().unzip();

    let mut positions: Vec<PositionSummary> = config
        .positions
        .iter()
        .map(|&a| {
            let thetas: Vec<f64> = reps.iter().filter(|r| r.position == a).filter_map(|r| r.theta).collect();
            let n_failed = config.reps - thetas.len();
            let aborted = n_failed as f64 > MAX_FAILURE_FRACTION * config.reps as f64;
            let (mean, std) = if aborted || thetas.is_empty() {
                (None, None)
            } else {
                let m = thetas.iter().sum::<f64>() / thetas.len() as f64;
                let var = thetas.iter().map(|t| (t - m) * (t - m)).sum::<f64>() / thetas.len() as f64;
                (Some(m), Some(var.sqrt()))
            };
            PositionSummary {
                position: a,
                mean_theta: mean,
                std_theta: std,
                epsilon: None,
                n_ok: thetas.len(),
                n_failed,
                aborted,
            }
        })
        .collect();
    let theta_0 = positions.iter().find(|p| p.position == 0.0).and_then(|p| p.mean_theta);
    for p in &mut positions {
        p.epsilon = match (p.mean_theta, theta_0) {
            (Some(m), Some(m0)) => Some(epsilon(m, m0, p.position)),
            _ => None,
        };
    }
    let n = times.len().max(1) as f64;
    Ok(BenchmarkResult {
        method: config.method,
        master_seed: config.master_seed,
        noise: config.noise,
        rotation_axis: to_array(&config.rotation_axis),
        reps_per_position: config.reps,
        reference: to_array(&reference.direction),
        positions,
        reps,
        runtime: RuntimeStats {
            total_seconds: start.elapsed().as_secs_f64(),
            mean_rep_seconds: times.iter().sum::<f64>() / n,
            max_rep_seconds: times.iter().copied().fold(0.0, f64::max),
        },
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Csv,
    Table,
    Json,
}

impl std::str::FromStr for ReportFormat {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(ReportFormat::Csv),
            "table" => Ok(ReportFormat::Table),
            "json" => Ok(ReportFormat::Json),
            other => Err(Error::InvalidConfig(format!("unknown report format `{other}`"))),
        }
    }
}

pub const RESULT_CSV_HEADER: &str =
    "kind,position,rep,seed,theta,mean_theta,std_theta,epsilon,n_ok,n_failed,dx,dy,dz,status";

fn opt(x: Option<f64>) -> String {
    x.map(|v| v.to_string()).unwrap_or_default()
}

fn csv_field(s: &str) -> String {
    s.replace(['\n', '\r'], " ")
}

pub fn report(result: &BenchmarkResult, format: ReportFormat) -> String {
    match format {
        ReportFormat::Csv => to_csv(result),
        ReportFormat::Table => to_table(result),
        ReportFormat::Json => serde_json::to_string_pretty(result).expect("result serializes") + "\n",
    }
}

/// Machine-readable result without timing, so identical inputs give
/// identical files.
pub fn to_csv(result: &BenchmarkResult) -> String {
    let mut s = String::new();
    let [ax, ay, az] = result.rotation_axis;
    let [rx, ry, rz] = result.reference;
    let (noise_kind, sigma) = match result.noise {
        NoiseModel::Correspondence { sigma_c } => ("correspondence", sigma_c),
        NoiseModel::Intensity { sigma_i } => ("intensity", sigma_i),
    };
    let _ = writeln!(s, "# method={}", result.method.as_str());
    let _ = writeln!(s, "# master_seed={}", result.master_seed);
    let _ = writeln!(s, "# noise={noise_kind}:{sigma}");
    let _ = writeln!(s, "# rotation_axis={ax}:{ay}:{az}");
    let _ = writeln!(s, "# reps_per_position={}", result.reps_per_position);
    let _ = writeln!(s, "# reference={rx}:{ry}:{rz}");
    let _ = writeln!(s, "{RESULT_CSV_HEADER}");
    for p in &result.positions {
        let _ = writeln!(
            s,
            "summary,{},,,,{},{},{},{},{},,,,{}",
            p.position,
            opt(p.mean_theta),
            opt(p.std_theta),
            opt(p.epsilon),
            p.n_ok,
            p.n_failed,
            if p.aborted { "aborted" } else { "ok" }
        );
    }
    for r in &result.reps {
        let status = match &r.error {
            None => "ok".to_string(),
            Some(e) => format!("failed: {}", csv_field(e)),
        };
        let [dx, dy, dz] = match r.direction {
            Some([x, y, z]) => [x.to_string(), y.to_string(), z.to_string()],
            None => Default::default(),
        };
        let _ = writeln!(
            s,
            "rep,{},{},{},{},,,,,,{dx},{dy},{dz},{status}",
            r.position,
            r.rep,
            r.seed,
            opt(r.theta)
        );
    }
    s
}

/// Parses [`to_csv`] output. Runtime statistics are not part of the CSV and
/// come back as zero.
pub fn from_csv(text: &str) -> Result<BenchmarkResult> {
    let perr = |line: usize, column: usize, message: String| Error::Parse { line, column, message };
    let mut meta = std::collections::BTreeMap::new();
    let mut positions = Vec::new();
    let mut reps = Vec::new();
    let mut seen_header = false;
    for (ln, raw) in text.lines().enumerate() {
        let ln = ln + 1;
        let line = raw.trim_end();
        if line.is_empty() {
            continue;
        }
        if let Some(m) = line.strip_prefix("# ") {
            let (k, v) = m.split_once('=').ok_or_else(|| perr(ln, 3, "expected key=value".into()))?;
            meta.insert(k.to_string(), v.to_string());
            continue;
        }
        if !seen_header {
            if line != RESULT_CSV_HEADER {
                return Err(perr(ln, 1, "missing result header".into()));
            }
            seen_header = true;
            continue;
        }
        let f: Vec<&str> = line.splitn(14, ',').collect();
        if f.len() != 14 {
            return Err(perr(ln, 1, format!("expected 14 fields, got {}", f.len())));
        }
        let num = |k: usize| -> Result<f64> { f[k].parse().map_err(|e: std::num::ParseFloatError| perr(ln, k + 1, e.to_string())) };
        let onum = |k: usize| -> Result<Option<f64>> { if f[k].is_empty() { Ok(None) } else { num(k).map(Some) } };
        let int = |k: usize| -> Result<usize> { f[k].parse().map_err(|e: std::num::ParseIntError| perr(ln, k + 1, e.to_string())) };
        match f[0] {
            "summary" => positions.push(PositionSummary {
                position: num(1)?,
                mean_theta: onum(5)?,
                std_theta: onum(6)?,
                epsilon: onum(7)?,
                n_ok: int(8)?,
                n_failed: int(9)?,
                aborted: match f[13] {
                    "ok" => false,
                    "aborted" => true,
                    other => return Err(perr(ln, 14, format!("unknown status `{other}`"))),
                },
            }),
            "rep" => {
                let error = match f[13] {
                    "ok" => None,
                    s => Some(s.strip_prefix("failed: ").ok_or_else(|| perr(ln, 14, "bad status".into()))?.to_string()),
                };
                let direction = if f[10].is_empty() { None } else { Some([num(10)?, num(11)?, num(12)?]) };
                reps.push(RepRecord {
                    position: num(1)?,
                    rep: int(2)?,
                    seed: f[3].parse().map_err(|e: std::num::ParseIntError| perr(ln, 4, e.to_string()))?,
                    theta: onum(4)?,
                    direction,
                    error,
                    estimate: None,
                });
            }
            other => return Err(perr(ln, 1, format!("unknown row kind `{other}`"))),
        }
    }
    let get = |k: &str| meta.get(k).ok_or_else(|| perr(1, 1, format!("missing `{k}` metadata")));
    let triple = |k: &str| -> Result<[f64; 3]> {
        let v: Vec<f64> = get(k)?
            .split(':')
            .map(|x| x.parse::<f64>().map_err(|e| perr(1, 1, format!("{k}: {e}"))))
            .collect::<Result<_>>()?;
        v.try_into().map_err(|_| perr(1, 1, format!("{k} needs 3 components")))
    };
    let (kind, sigma) = get("noise")?.split_once(':').ok_or_else(|| perr(1, 1, "bad noise".into()))?;
    let sigma: f64 = sigma.parse().map_err(|e| perr(1, 1, format!("noise: {e}")))?;
    let noise = match kind {
        "correspondence" => NoiseModel::Correspondence { sigma_c: sigma },
        "intensity" => NoiseModel::Intensity { sigma_i: sigma },
        other => return Err(perr(1, 1, format!("unknown noise kind `{other}`"))),
    };
    Ok(BenchmarkResult {
        method: get("method")?.parse()?,
        master_seed: get("master_seed")?.parse().map_err(|e| perr(1, 1, format!("master_seed: {e}")))?,
        noise,
        rotation_axis: triple("rotation_axis")?,
        reps_per_position: get("reps_per_position")?
            .parse()
            .map_err(|e| perr(1, 1, format!("reps_per_position: {e}")))?,
        reference: triple("reference")?,
        positions,
        reps,
        runtime: RuntimeStats::default(),
    })
}

pub fn from_json(text: &str) -> Result<BenchmarkResult> {
    serde_json::from_str(text).map_err(|e| Error::Parse { line: e.line(), column: e.column(), message: e.to_string() })
}

/// Human-readable table: one column per nonzero rotation position.
pub fn to_table(result: &BenchmarkResult) -> String {
    let noise = match result.noise {
        NoiseModel::Correspondence { sigma_c } => format!("sigma_c = {sigma_c} px"),
        NoiseModel::Intensity { sigma_i } => format!("sigma_I = {sigma_i}"),
    };
    let mut s = format!(
        "Evaluation of estimated gaze direction ({}, {noise}, R = {}, seed {})\n",
        result.method.as_str(),
        result.reps_per_position,
        result.master_seed
    );
    let cols: Vec<&PositionSummary> = result.positions.iter().filter(|p| p.position != 0.0).collect();
    let cell = |x: Option<f64>| x.map(|v| format!("{v:.3}°")).unwrap_or_else(|| "aborted".into());
    let label_w = 34;
    let _ = write!(s, "{:<label_w$}", "rotation position a");
    for p in &cols {
        let _ = write!(s, "{:>10}", format!("{}°", p.position));
    }
    s.push('\n');
    let _ = write!(s, "{:<label_w$}", "mean relative gaze θ̄_a − θ̄_0");
    let theta_0 = result.positions.iter().find(|p| p.position == 0.0).and_then(|p| p.mean_theta);
    for p in &cols {
        let _ = write!(s, "{:>10}", cell(p.mean_theta.zip(theta_0).map(|(m, m0)| m - m0)));
    }
    s.push('\n');
    let _ = write!(s, "{:<label_w$}", "mean relative error ε_0°");
    for p in &cols {
        let _ = write!(s, "{:>10}", cell(p.epsilon));
    }
    s.push('\n');
    let _ = write!(s, "{:<label_w$}", "std of θ_a");
    for p in &cols {
        let _ = write!(s, "{:>10}", cell(p.std_theta));
    }
    s.push('\n');
    let failed: usize = result.positions.iter().map(|p| p.n_failed).sum();
    if failed > 0 {
        let _ = writeln!(s, "failed reps: {failed}");
    }
    s
}

/// Writes `result.csv`, `result.json` and `table.txt` into `dir`.
pub fn write_reports(result: &BenchmarkResult, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join("result.csv"), to_csv(result))?;
    std::fs::write(dir.join("result.json"), report(result, ReportFormat::Json))?;
    std::fs::write(dir.join("table.txt"), to_table(result))?;
    Ok(())
}

/// Writes one gaze CSV per successful rep under `dir/reps/`.
pub fn write_rep_artifacts(result: &BenchmarkResult, dir: impl AsRef<Path>) -> Result<()> {
    let reps_dir = dir.as_ref().join("reps");
    std::fs::create_dir_all(&reps_dir)?;
    for r in &result.reps {
        if let Some(g) = &r.estimate {
            std::fs::write(reps_dir.join(format!("pos{}_rep{}.csv", r.position, r.rep)), g.to_csv())?;
        }
    }
    Ok(())
}
