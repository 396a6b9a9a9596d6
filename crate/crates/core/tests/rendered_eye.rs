//! Checks on the rendered default eye: swapped camera maps must not give a
//! plausible normal field, and single-shot wavelet phase must agree with
//! N-step phase shifting.

use std::f64::consts::{PI, TAU};

use deflect_gaze::decode::{cwt2_phase, phase_shift_decode, render_phase_shift_frames, WaveletParams};
use deflect_gaze::pattern::{FringeAxis, PatternSpec};
use deflect_gaze::render::{frame_from_correspondence, render_correspondence, IntensityNoise};
use deflect_gaze::scene::SceneConfig;
use deflect_gaze::stereo::{reconstruct_field, DepthSweepParams};
use deflect_gaze::Error;

#[test]
fn swapped_maps_are_not_plausible() {
    let scene = SceneConfig::default_scene();
    let corr1 = render_correspondence(&scene, 0);
    let corr2 = render_correspondence(&scene, 1);
    let params = DepthSweepParams::for_scene(&scene);
    match reconstruct_field(&scene, &corr2, &corr1, &params, 2) {
        Err(Error::EmptyField(_)) => {}
        Ok(field) => {
            let mut c: Vec<f64> = field.samples.iter().map(|s| s.consistency).collect();
            c.sort_by(f64::total_cmp);
            let median = c[c.len() / 2];
            println!("swapped-map median consistency: {median:.4} rad");
            assert!(median > 0.1, "median consistency {median} rad");
        }
        Err(e) => panic!("{e}"),
    }
}

fn wrap(p: f64) -> f64 {
    (p + PI).rem_euclid(TAU) - PI
}

#[test]
fn wavelet_and_phase_shift_agree_on_eye() {
    // four times the default resolution keeps part of the eye clear of the
    // wavelet border
    let mut scene = SceneConfig::default_scene();
    for cam in &mut scene.cameras {
        cam.focal_length *= 4.0;
        cam.resolution = (512, 512);
        cam.principal_point = (255.5, 255.5);
    }
    let pattern = PatternSpec::PhaseShiftSet {
        period: 32.0,
        n_shifts: 8,
        direction: FringeAxis::X,
    };
    let frames = render_phase_shift_frames(&scene, 0, &pattern, IntensityNoise::NONE).unwrap();
    let ps = phase_shift_decode(&frames, &pattern).unwrap();
    let truth = render_correspondence(&scene, 0);
    let single = frame_from_correspondence(&truth, &pattern, 0, IntensityNoise::NONE).unwrap();
    let params = WaveletParams::for_periods(8.0, 32.0, FringeAxis::X).with_angle_sweep(13, 60.0);
    let cwt = cwt2_phase(&single, &params).unwrap();
    let (mut ss, mut n) = (0.0, 0);
    for i in 0..ps.phase.len() {
        if ps.valid[i] && cwt.valid[i] && truth.valid[i] {
            ss += wrap(cwt.phase[i] - ps.phase[i]).powi(2);
            n += 1;
        }
    }
    let rmse = (ss / n as f64).sqrt();
    println!("wavelet vs phase-shift rmse on the eye: {rmse:.3} rad over {n} pixels");
    assert!(n > 5000, "{n}");
    assert!(rmse < 0.1, "rmse {rmse} rad over {n} pixels");
}
