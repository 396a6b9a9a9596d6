//! Benchmark-level properties: determinism under different thread counts,
//! invariance to a sign flip of the rotation axis, and noise monotonicity.

use deflect_gaze::bench::{run_benchmark, to_csv, BenchMethod, BenchmarkConfig, NoiseModel};
use deflect_gaze::scene::SceneConfig;
use nalgebra::Unit;

fn in_pool<T: Send>(threads: usize, f: impl FnOnce() -> T + Send) -> T {
    rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap().install(f)
}

#[test]
fn result_csv_is_identical_across_thread_counts() {
    let scene = SceneConfig::default_scene();
    let mut config = BenchmarkConfig::new(BenchMethod::StereoNormals);
    config.positions = vec![0.0, 3.0];
    config.reps = 3;
    config.noise = NoiseModel::Correspondence { sigma_c: 0.5 };
    config.master_seed = 11;
    let one = in_pool(1, || run_benchmark(&config, &scene).unwrap());
    let three = in_pool(3, || run_benchmark(&config, &scene).unwrap());
    assert_eq!(to_csv(&one), to_csv(&three));
}

#[test]
fn epsilon_is_invariant_to_an_axis_sign_flip() {
    let scene = SceneConfig::default_scene();
    let mut config = BenchmarkConfig::new(BenchMethod::StereoNormals);
    config.positions = vec![-3.0, 0.0, 3.0];
    config.reps = 1;
    let forward = run_benchmark(&config, &scene).unwrap();

    let mut flipped = config.clone();
    flipped.rotation_axis = Unit::new_normalize(-config.rotation_axis.into_inner());
    flipped.positions = vec![3.0, 0.0, -3.0];
    let backward = run_benchmark(&flipped, &scene).unwrap();

    for (f, b) in forward.positions.iter().zip(backward.positions.iter()) {
        assert_eq!(f.position, -b.position);
        let (ef, eb) = (f.epsilon.unwrap(), b.epsilon.unwrap());
        assert!((ef - eb).abs() < 1e-6, "a = {}: {ef} vs {eb}", f.position);
    }
}

#[test]
fn mean_epsilon_does_not_decrease_with_noise() {
    let scene = SceneConfig::default_scene();
    let sigmas = [0.0, 0.25, 0.5];
    let seeds = [1u64, 2, 3];
    let mut means = Vec::new();
    for &sigma_c in &sigmas {
        let mut total = 0.0;
        for &seed in &seeds {
            let mut config = BenchmarkConfig::new(BenchMethod::StereoNormals);
            config.reps = 5;
            config.noise = NoiseModel::Correspondence { sigma_c };
            config.master_seed = seed;
            total += run_benchmark(&config, &scene).unwrap().mean_epsilon().unwrap();
        }
        means.push(total / seeds.len() as f64);
    }
    println!("mean epsilon over seeds for sigma_c {sigmas:?}: {means:?}");
    for w in means.windows(2) {
        assert!(w[1] >= w[0], "{means:?}");
    }
}
