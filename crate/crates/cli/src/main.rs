use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use deflect_gaze::bench::{
    report, run_benchmark, write_rep_artifacts, write_reports, BenchMethod, BenchmarkConfig, NoiseModel,
    ReportFormat,
};
use deflect_gaze::decode::{
    clip_to_screen, cwt2_phase, phase_shift_decode, phases_to_correspondence, save_phase, simulator_anchor, unwrap2,
    PhaseMap, PhaseShiftSetup, WaveletParams,
};
use deflect_gaze::gaze_normals::{estimate_gaze, ClusterParams};
use deflect_gaze::imageio::{frame_path, load_correspondence, read_frame_pgm, save_correspondence, write_frame_pgm};
use deflect_gaze::optimize::{init_guess, optimize_gaze, save_trace, OptConfig, PARAM_NAMES};
use deflect_gaze::pattern::{FringeAxis, PatternSpec};
use deflect_gaze::render::{
    add_correspondence_noise, frame_from_correspondence, render_correspondence, CorrespondenceMap, IntensityNoise,
};
use deflect_gaze::rng::mix_seed;
use deflect_gaze::scene::{load_scene, save_scene, SceneConfig};
use deflect_gaze::stereo::{reconstruct_field, DepthSweepParams, NormalField};
use deflect_gaze::Error;
use serde_json::json;

const THREADS_ENV: &str = "DEFLECT_GAZE_THREADS";
const EXIT_FAILURE: u8 = 1;
const EXIT_CONFIG: u8 = 2;
const EXIT_ABORTED: u8 = 3;

#[derive(Parser)]
#[command(name = "deflect-gaze", version, about = "Deflectometric gaze estimation on a synthetic two-sphere eye")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render correspondences and fringe frames for a posed eye.
    Simulate(SimulateArgs),
    /// Decode fringe frames into phase maps and correspondences.
    Decode(DecodeArgs),
    /// Stereo normal-field reconstruction from two correspondence maps.
    Reconstruct(ReconstructArgs),
    /// Gaze from the back-traced normals of a normal field.
    GazeNormals(GazeNormalsArgs),
    /// Gaze by fitting the rendered eye to measured correspondences.
    GazeOptimize(GazeOptimizeArgs),
    /// Repeated measurements over rotation positions.
    Bench(BenchArgs),
}

#[derive(Args)]
struct SceneArg {
    /// Scene JSON; defaults to the built-in scene.
    #[arg(long)]
    scene: Option<PathBuf>,
}

impl SceneArg {
    fn load(&self, fallback_dir: Option<&Path>) -> anyhow::Result<SceneConfig> {
        if let Some(path) = &self.scene {
            return load_scene(path).with_context(|| format!("loading scene {}", path.display()));
        }
        if let Some(path) = fallback_dir.map(|d| d.join("scene.json")).filter(|p| p.exists()) {
            return load_scene(&path).with_context(|| format!("loading scene {}", path.display()));
        }
        Ok(SceneConfig::default_scene())
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum PatternKind {
    Crossed,
    Phaseshift,
    None,
}

#[derive(Args)]
struct SimulateArgs {
    #[command(flatten)]
    scene: SceneArg,
    #[arg(long)]
    out: PathBuf,
    /// Eye azimuth, degrees.
    #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
    azimuth: f64,
    /// Eye elevation, degrees.
    #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
    elevation: f64,
    #[arg(long, value_enum, default_value = "crossed")]
    pattern: PatternKind,
    /// Crossed-fringe periods, screen px.
    #[arg(long, default_value_t = 16.0)]
    period_x: f64,
    #[arg(long, default_value_t = 22.0)]
    period_y: f64,
    /// Phase-shift period, screen px.
    #[arg(long, default_value_t = PhaseShiftSetup::default().period)]
    shift_period: f64,
    #[arg(long, default_value_t = PhaseShiftSetup::default().n_shifts)]
    shifts: usize,
    /// Correspondence noise, screen px.
    #[arg(long, default_value_t = 0.0)]
    sigma_c: f64,
    /// Intensity noise on the frames.
    #[arg(long, default_value_t = 0.0)]
    sigma_i: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Clone, Copy, ValueEnum)]
enum DecodeMode {
    Cwt,
    Phaseshift,
}

#[derive(Args)]
struct DecodeArgs {
    #[arg(long, value_enum)]
    mode: DecodeMode,
    /// Directory written by `simulate`.
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Wavelet period range, camera px.
    #[arg(long, default_value_t = 8.0)]
    period_min: f64,
    #[arg(long, default_value_t = 32.0)]
    period_max: f64,
    /// Wavelet carrier directions swept about each fringe axis.
    #[arg(long, default_value_t = 13)]
    angles: usize,
    /// Half-width of the direction sweep, degrees.
    #[arg(long, default_value_t = 60.0)]
    angle_span: f64,
}

#[derive(Args)]
struct ReconstructArgs {
    #[command(flatten)]
    scene: SceneArg,
    /// Directory holding the two correspondence maps.
    #[arg(long)]
    measured: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 1)]
    stride: usize,
}

#[derive(Args)]
struct GazeNormalsArgs {
    /// Normal-field CSV.
    #[arg(long)]
    field: PathBuf,
    /// Gaze CSV output.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Fail instead of fitting a single axis when only one center is found.
    #[arg(long)]
    no_fallback: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Clone, Copy, ValueEnum)]
enum Freeze {
    Shape,
    None,
}

#[derive(Args)]
struct GazeOptimizeArgs {
    #[command(flatten)]
    scene: SceneArg,
    #[arg(long)]
    measured: PathBuf,
    #[arg(long, value_enum, default_value = "shape")]
    freeze: Freeze,
    #[arg(long, default_value_t = OptConfig::default().max_iters)]
    max_iters: usize,
    /// Trace CSV output.
    #[arg(long)]
    trace: Option<PathBuf>,
    /// Gaze CSV output.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Use only this camera.
    #[arg(long)]
    camera: Option<usize>,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long, value_parser = parse_method)]
    method: BenchMethod,
    #[command(flatten)]
    scene: SceneArg,
    /// Correspondence noise, screen px.
    #[arg(long, conflicts_with = "sigma_i")]
    sigma_c: Option<f64>,
    /// Intensity noise on decoded phase-shift frames.
    #[arg(long)]
    sigma_i: Option<f64>,
    #[arg(long, default_value_t = 20)]
    reps: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Comma-separated rotation positions, degrees.
    #[arg(long, value_delimiter = ',', allow_negative_numbers = true)]
    positions: Option<Vec<f64>>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Report printed to stdout.
    #[arg(long, value_parser = parse_format, default_value = "table")]
    format: ReportFormat,
}

fn parse_method(s: &str) -> Result<BenchMethod, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_format(s: &str) -> Result<ReportFormat, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Err(e) = configure_threads() {
        eprintln!("error: {e:#}");
        return ExitCode::from(EXIT_CONFIG);
    }
    match run(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code_for(&e))
        }
    }
}

fn configure_threads() -> anyhow::Result<()> {
    let Ok(value) = std::env::var(THREADS_ENV) else { return Ok(()) };
    let n: usize = value.trim().parse().with_context(|| format!("{THREADS_ENV}={value} is not a thread count"))?;
    if n == 0 {
        bail!(Error::InvalidConfig(format!("{THREADS_ENV} must be at least 1")));
    }
    rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    Ok(())
}

fn exit_code_for(e: &anyhow::Error) -> u8 {
    match e.downcast_ref::<Error>() {
        Some(
            Error::InvalidConfig(_)
            | Error::InvalidScene { .. }
            | Error::InvalidPattern(_)
            | Error::Parse { .. },
        ) => EXIT_CONFIG,
        _ => EXIT_FAILURE,
    }
}

fn run(command: Command) -> anyhow::Result<ExitCode> {
    match command {
        Command::Simulate(a) => simulate(a),
        Command::Decode(a) => decode(a),
        Command::Reconstruct(a) => reconstruct(a),
        Command::GazeNormals(a) => gaze_normals(a),
        Command::GazeOptimize(a) => gaze_optimize(a),
        Command::Bench(a) => return bench(a),
    }?;
    Ok(ExitCode::SUCCESS)
}

fn create_dir(dir: &Path) -> anyhow::Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn simulate(a: SimulateArgs) -> anyhow::Result<()> {
    let scene = a.scene.load(None)?;
    if !(a.sigma_c >= 0.0 && a.sigma_i >= 0.0) {
        bail!(Error::InvalidConfig("noise sigmas must be non-negative".into()));
    }
    let mut posed = scene.clone();
    posed.eye = scene.eye.rotated(a.azimuth, a.elevation);
    posed.validate()?;
    let truth_dir = a.out.join("truth");
    create_dir(&truth_dir)?;
    save_scene(&scene, a.out.join("scene.json"))?;
    std::fs::write(
        a.out.join("pose.json"),
        serde_json::to_string_pretty(&json!({ "azimuth": a.azimuth, "elevation": a.elevation }))?,
    )?;

    let crossed = PatternSpec::crossed(a.period_x, a.period_y);
    let setup = PhaseShiftSetup { period: a.shift_period, n_shifts: a.shifts };
    let meta = match a.pattern {
        PatternKind::Crossed => {
            crossed.validate()?;
            json!({ "kind": "crossed", "period_x": a.period_x, "period_y": a.period_y })
        }
        PatternKind::Phaseshift => {
            setup.pattern(FringeAxis::X).validate()?;
            json!({ "kind": "phaseshift", "period": a.shift_period, "n_shifts": a.shifts })
        }
        PatternKind::None => json!({ "kind": "none" }),
    };
    std::fs::write(a.out.join("pattern.json"), serde_json::to_string_pretty(&meta)?)?;

    for cam in 0..posed.cameras.len() {
        let cam_seed = mix_seed(a.seed, &[cam as u64]);
        let truth = render_correspondence(&posed, cam);
        save_correspondence(&truth_dir, cam, &truth)?;
        let noisy = add_correspondence_noise(&truth, a.sigma_c, mix_seed(cam_seed, &[0]), &posed.screen);
        save_correspondence(&a.out, cam, &noisy)?;
        let frame_noise = |k: u64| IntensityNoise { sigma: a.sigma_i, seed: mix_seed(cam_seed, &[1, k]) };
        match a.pattern {
            PatternKind::Crossed => {
                let frame = frame_from_correspondence(&truth, &crossed, 0, frame_noise(0))?;
                write_frame_pgm(frame_path(&a.out, cam, "crossed", 0), &frame)?;
            }
            PatternKind::Phaseshift => {
                for (axis, (dir, kind)) in [(FringeAxis::X, "psx"), (FringeAxis::Y, "psy")].into_iter().enumerate() {
                    let pattern = setup.pattern(dir);
                    for k in 0..pattern.n_frames() {
                        let frame = frame_from_correspondence(&truth, &pattern, k, frame_noise((axis * a.shifts + k) as u64))?;
                        write_frame_pgm(frame_path(&a.out, cam, kind, k), &frame)?;
                    }
                }
            }
            PatternKind::None => {}
        }
        println!("camera {cam}: {} valid pixels", truth.n_valid());
    }
    Ok(())
}

fn meta_f64(meta: &serde_json::Value, key: &str) -> anyhow::Result<f64> {
    meta[key].as_f64().ok_or_else(|| Error::InvalidConfig(format!("pattern.json lacks `{key}`")).into())
}

fn decode(a: DecodeArgs) -> anyhow::Result<()> {
    let scene = load_scene(a.input.join("scene.json")).context("loading scene.json from the input directory")?;
    let meta_path = a.input.join("pattern.json");
    let meta: serde_json::Value = serde_json::from_str(
        &std::fs::read_to_string(&meta_path).with_context(|| format!("reading {}", meta_path.display()))?,
    )?;
    let kind = meta["kind"].as_str().unwrap_or_default();
    create_dir(&a.out)?;
    for cam in 0..scene.cameras.len() {
        let (phi_x, phi_y, period_x, period_y) = match (a.mode, kind) {
            (DecodeMode::Phaseshift, "phaseshift") => {
                let period = meta_f64(&meta, "period")?;
                let n_shifts = meta_f64(&meta, "n_shifts")? as usize;
                let mut maps = Vec::with_capacity(2);
                for (dir, name) in [(FringeAxis::X, "psx"), (FringeAxis::Y, "psy")] {
                    let pattern = PatternSpec::PhaseShiftSet { period, n_shifts, direction: dir };
                    let frames = (0..n_shifts)
                        .map(|k| read_frame_pgm(frame_path(&a.input, cam, name, k)))
                        .collect::<deflect_gaze::Result<Vec<_>>>()?;
                    maps.push(phase_shift_decode(&frames, &pattern)?);
                }
                let phi_y = maps.pop().unwrap();
                (maps.pop().unwrap(), phi_y, period, period)
            }
            (DecodeMode::Cwt, "crossed") => {
                let frame = read_frame_pgm(frame_path(&a.input, cam, "crossed", 0))?;
                let params = |axis| {
                    WaveletParams::for_periods(a.period_min, a.period_max, axis).with_angle_sweep(a.angles, a.angle_span)
                };
                (
                    cwt2_phase(&frame, &params(FringeAxis::X))?,
                    cwt2_phase(&frame, &params(FringeAxis::Y))?,
                    meta_f64(&meta, "period_x")?,
                    meta_f64(&meta, "period_y")?,
                )
            }
            (_, other) => bail!(Error::InvalidConfig(format!(
                "decode mode does not match the simulated pattern `{other}`"
            ))),
        };
        save_phase(&a.out, cam, "phix", &phi_x)?;
        save_phase(&a.out, cam, "phiy", &phi_y)?;
        let truth = load_correspondence(a.input.join("truth"), cam)?;
        let map = anchored_correspondence(&phi_x, &phi_y, period_x, period_y, &truth, &scene)?;
        save_correspondence(&a.out, cam, &map)?;
        println!("camera {cam}: {} decoded pixels", map.n_valid());
    }
    save_scene(&scene, a.out.join("scene.json"))?;
    Ok(())
}

fn anchored_correspondence(
    phi_x: &PhaseMap,
    phi_y: &PhaseMap,
    period_x: f64,
    period_y: f64,
    truth: &CorrespondenceMap,
    scene: &SceneConfig,
) -> anyhow::Result<CorrespondenceMap> {
    let anchor = simulator_anchor(truth, &[phi_x, phi_y]).ok_or(Error::EmptyMap)?;
    let ux = unwrap2(phi_x, anchor.pixel)?;
    let uy = unwrap2(phi_y, anchor.pixel)?;
    let mut map = phases_to_correspondence(&ux, period_x, &uy, period_y, &anchor)?;
    clip_to_screen(&mut map, &scene.screen);
    Ok(map)
}

fn reconstruct(a: ReconstructArgs) -> anyhow::Result<()> {
    let scene = a.scene.load(Some(&a.measured))?;
    scene.require_stereo()?;
    let c0 = load_correspondence(&a.measured, 0)?;
    let c1 = load_correspondence(&a.measured, 1)?;
    let field = reconstruct_field(&scene, &c0, &c1, &DepthSweepParams::for_scene(&scene), a.stride)?;
    field.save(&a.out)?;
    println!("{} normal samples written to {}", field.samples.len(), a.out.display());
    Ok(())
}

fn gaze_normals(a: GazeNormalsArgs) -> anyhow::Result<()> {
    let field = NormalField::load(&a.field)?;
    let params = ClusterParams { rng_seed: a.seed, ..ClusterParams::default() };
    let est = estimate_gaze(&field, &params, !a.no_fallback)?;
    println!("{est}");
    if let Some(out) = &a.out {
        std::fs::write(out, est.to_csv())?;
    }
    Ok(())
}

fn gaze_optimize(a: GazeOptimizeArgs) -> anyhow::Result<()> {
    let full = a.scene.load(Some(&a.measured))?;
    let (scene, cams) = match a.camera {
        Some(c) if c < full.cameras.len() => (full.single_camera(c), vec![c]),
        Some(c) => bail!(Error::InvalidConfig(format!("camera {c} not in scene"))),
        None => (full.clone(), (0..full.cameras.len()).collect()),
    };
    let measured =
        cams.iter().map(|&c| load_correspondence(&a.measured, c)).collect::<deflect_gaze::Result<Vec<_>>>()?;
    let config = OptConfig { max_iters: a.max_iters, ..OptConfig::default() };
    let init = init_guess(&measured, &scene)?.with_shape_active(matches!(a.freeze, Freeze::None));
    let outcome = optimize_gaze(&init, &measured, &scene, &config)?;
    let iters = outcome.trace.last().map_or(0, |r| r.iter);
    println!("stop: {:?} after {iters} iterations, loss {:.6e}", outcome.stop, outcome.loss.total);
    for (name, value) in PARAM_NAMES.iter().zip(outcome.params.to_array()) {
        println!("{name:>14} {value:+.6}");
    }
    println!("{}", outcome.estimate);
    if let Some(path) = &a.trace {
        save_trace(&outcome.trace, path)?;
    }
    if let Some(out) = &a.out {
        std::fs::write(out, outcome.estimate.to_csv())?;
    }
    Ok(())
}

fn bench(a: BenchArgs) -> anyhow::Result<ExitCode> {
    let scene = a.scene.load(None)?;
    let mut config = BenchmarkConfig::new(a.method);
    config.reps = a.reps;
    config.master_seed = a.seed;
    config.noise = match (a.sigma_c, a.sigma_i) {
        (_, Some(sigma_i)) => NoiseModel::Intensity { sigma_i },
        (sigma_c, None) => NoiseModel::Correspondence { sigma_c: sigma_c.unwrap_or(0.0) },
    };
    if let Some(p) = a.positions {
        config.positions = p;
    }
    let result = run_benchmark(&config, &scene)?;
    if let Some(out) = &a.out {
        create_dir(out)?;
        write_reports(&result, out)?;
        write_rep_artifacts(&result, out)?;
    }
    print!("{}", report(&result, a.format));
    let aborted = result.aborted_positions();
    if !aborted.is_empty() {
        eprintln!("aborted positions: {aborted:?}");
        return Ok(ExitCode::from(EXIT_ABORTED));
    }
    Ok(ExitCode::SUCCESS)
}
