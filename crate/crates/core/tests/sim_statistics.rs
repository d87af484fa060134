use rangefuse_core::sim::{synth_osl, OslStreamSpec, TrajectorySpec};
use rangefuse_core::{OslPose, SimConfig, Vec3};

const RUNS: u64 = 200;

/// Terminal odometry position error in the stream's local frame.
fn terminal_error(config: &SimConfig, poses: &[OslPose]) -> Vec3 {
    let g = config.imu_noise.gravity;
    let start = config.trajectory.ground_truth(0.0, g).unwrap();
    let last = poses.last().unwrap();
    let end = config.trajectory.ground_truth(last.stamp, g).unwrap();
    last.p - start.q.inverse().rotate(&(end.p - start.p))
}

fn translation_only() -> OslStreamSpec {
    OslStreamSpec { sigma: [0.0, 0.0, 0.0, 0.05, 0.05, 0.05], ..OslStreamSpec::default() }
}

fn rms_drift(duration: f64) -> f64 {
    let config = SimConfig { trajectory: TrajectorySpec::lissajous(duration), ..SimConfig::default() };
    let stream = translation_only();
    let sum: f64 = (0..RUNS)
        .map(|seed| terminal_error(&config, &synth_osl(&config, &stream, 0, seed).unwrap()).norm_squared())
        .sum();
    (sum / RUNS as f64).sqrt()
}

#[test]
fn odometry_drift_grows_with_the_square_root_of_time() {
    let ratio = rms_drift(100.0) / rms_drift(25.0);
    assert!((ratio - 2.0).abs() <= 0.5, "drift ratio {ratio}");
}

#[test]
fn odometry_streams_drift_independently() {
    let config = SimConfig { trajectory: TrajectorySpec::lissajous(25.0), ..SimConfig::default() };
    let stream = OslStreamSpec::default();
    let pairs: Vec<(f64, f64)> = (0..RUNS)
        .map(|seed| {
            let a = terminal_error(&config, &synth_osl(&config, &stream, 0, seed).unwrap());
            let b = terminal_error(&config, &synth_osl(&config, &stream, 1, seed).unwrap());
            (a.x, b.x)
        })
        .collect();
    let n = pairs.len() as f64;
    let (ma, mb) = (pairs.iter().map(|p| p.0).sum::<f64>() / n, pairs.iter().map(|p| p.1).sum::<f64>() / n);
    let cov: f64 = pairs.iter().map(|p| (p.0 - ma) * (p.1 - mb)).sum::<f64>() / n;
    let va: f64 = pairs.iter().map(|p| (p.0 - ma).powi(2)).sum::<f64>() / n;
    let vb: f64 = pairs.iter().map(|p| (p.1 - mb).powi(2)).sum::<f64>() / n;
    let corr = cov / (va * vb).sqrt();
    // Sampling spread of a null correlation over 200 runs is about 0.07.
    assert!(corr.abs() < 0.25, "correlation {corr}");
    assert!(va > 0.0 && vb > 0.0);
}
