//! IMU preintegration between two window nodes.
//!
//! Samples are integrated with a zero-order hold: sample `n` holds over
//! `[τₙ, τₙ₊₁)`. Alongside the relative motion `(α, β, γ)` the accumulator
//! carries the bias Jacobians `A^ω, A^a, B^ω, B^a, C^ω` and the 15×15
//! covariance of the error `(δα, δβ, δθ, δb^ω, δb^a)`.
//!
//! Gravity convention: `g = (0, 0, +g)` and a resting accelerometer reads
//! `Rᵀg`, so world acceleration is `R ă − g`.

use nalgebra::{SMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::manifold::{hat, right_jacobian, Mat3, Quat, Vec3};
use crate::state::NavState;

pub type Mat15 = SMatrix<f64, 15, 15>;

/// Re-integrate instead of first-order correcting when the gyro bias moves
/// more than this (rad/s).
pub const REPROPAGATE_GYRO: f64 = 1e-2;
/// Same for the accelerometer bias (m/s²).
pub const REPROPAGATE_ACCEL: f64 = 1e-1;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ImuSample {
    pub stamp: f64,
    pub gyro: Vec3,
    pub accel: Vec3,
}

impl ImuSample {
    pub fn new(stamp: f64, gyro: Vec3, accel: Vec3) -> Self {
        ImuSample { stamp, gyro, accel }
    }

    /// Linear interpolation of the readings at `stamp`.
    pub fn lerp(a: &ImuSample, b: &ImuSample, stamp: f64) -> ImuSample {
        let span = b.stamp - a.stamp;
        let s = if span > 0.0 { (stamp - a.stamp) / span } else { 0.0 };
        ImuSample {
            stamp,
            gyro: a.gyro + (b.gyro - a.gyro) * s,
            accel: a.accel + (b.accel - a.accel) * s,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ImuBias {
    pub gyro: Vec3,
    pub accel: Vec3,
}

/// Continuous-time noise densities and the gravity vector.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ImuNoise {
    /// Gyro white noise, rad/s/√Hz.
    pub sigma_gyro: f64,
    /// Accelerometer white noise, m/s²/√Hz.
    pub sigma_accel: f64,
    /// Gyro bias random walk, rad/s²/√Hz.
    pub sigma_gyro_walk: f64,
    /// Accelerometer bias random walk, m/s³/√Hz.
    pub sigma_accel_walk: f64,
    pub gravity: f64,
}

impl Default for ImuNoise {
    fn default() -> Self {
        ImuNoise {
            sigma_gyro: 1.7e-4,
            sigma_accel: 2.0e-3,
            sigma_gyro_walk: 2.0e-5,
            sigma_accel_walk: 3.0e-3,
            gravity: 9.81,
        }
    }
}

impl ImuNoise {
    pub fn gravity_vector(&self) -> Vec3 {
        Vec3::new(0.0, 0.0, self.gravity)
    }

    pub fn validate(&self) -> Result<()> {
        let all = [
            self.sigma_gyro,
            self.sigma_accel,
            self.sigma_gyro_walk,
            self.sigma_accel_walk,
        ];
        if all.iter().any(|s| !(*s > 0.0)) {
            return Err(Error::Config("IMU noise sigmas must be positive".into()));
        }
        Ok(())
    }
}

/// Preintegrated relative motion between `t_k` and `t_{k+1}`.
#[derive(Debug, Clone, PartialEq)]
pub struct Preintegration {
    pub alpha: Vec3,
    pub beta: Vec3,
    pub gamma: Quat,
    pub jac_alpha_gyro: Mat3,
    pub jac_alpha_accel: Mat3,
    pub jac_beta_gyro: Mat3,
    pub jac_beta_accel: Mat3,
    pub jac_gamma_gyro: Mat3,
    /// Covariance over `(δα, δβ, δθ, δb^ω, δb^a)`.
    pub covariance: Mat15,
    /// Bias linearization point `b̆ₖ`.
    pub bias: ImuBias,
    pub duration: f64,
    pub sample_count: usize,
    pub noise: ImuNoise,
    /// `(sample, Δτ)` pairs, kept for re-integration.
    steps: Vec<(ImuSample, f64)>,
    end_stamp: Option<f64>,
}

impl Preintegration {
    pub fn new(bias: ImuBias, noise: ImuNoise) -> Self {
        Preintegration {
            alpha: Vec3::zeros(),
            beta: Vec3::zeros(),
            gamma: Quat::identity(),
            jac_alpha_gyro: Mat3::zeros(),
            jac_alpha_accel: Mat3::zeros(),
            jac_beta_gyro: Mat3::zeros(),
            jac_beta_accel: Mat3::zeros(),
            jac_gamma_gyro: Mat3::zeros(),
            covariance: Mat15::zeros(),
            bias,
            duration: 0.0,
            sample_count: 0,
            noise,
            steps: Vec::new(),
            end_stamp: None,
        }
    }

    /// Integrates a zero-order-hold segment.
    ///
    /// Sample `n` holds until the stamp of sample `n + 1`; the last sample
    /// only marks the end of the segment.
    pub fn from_segment(segment: &[ImuSample], bias: ImuBias, noise: ImuNoise) -> Result<Self> {
        let mut pre = Preintegration::new(bias, noise);
        for pair in segment.windows(2) {
            pre.integrate_step(&pair[0], pair[1].stamp)?;
        }
        Ok(pre)
    }

    pub fn start_stamp(&self) -> Option<f64> {
        self.steps.first().map(|(s, _)| s.stamp)
    }

    pub fn end_stamp(&self) -> Option<f64> {
        self.end_stamp
    }

    /// Holds `sample` from its stamp until `next_stamp`.
    pub fn integrate_step(&mut self, sample: &ImuSample, next_stamp: f64) -> Result<()> {
        if !(next_stamp > sample.stamp) {
            return Err(Error::NonIncreasingStamp {
                prev: sample.stamp,
                next: next_stamp,
            });
        }
        if let Some(end) = self.end_stamp {
            if sample.stamp < end - 1e-12 {
                return Err(Error::NonIncreasingStamp {
                    prev: end,
                    next: sample.stamp,
                });
            }
        }
        let dtau = next_stamp - sample.stamp;
        let acc = sample.accel - self.bias.accel;
        let rate = sample.gyro - self.bias.gyro;
        let rot = self.gamma.to_rotation();

        // Jacobians and covariance use the pre-update rotation and β.
        self.propagate_bias_jacobians(&rot, &acc, &rate, dtau);
        self.propagate_covariance(&rot, &acc, &rate, dtau);

        self.alpha += self.beta * dtau + rot * acc * (0.5 * dtau * dtau);
        self.beta += rot * acc * dtau;
        self.gamma = (self.gamma * Quat::from_rotation_vector(&(rate * dtau))).normalized();

        self.duration += dtau;
        self.sample_count += 1;
        self.steps.push((*sample, dtau));
        self.end_stamp = Some(next_stamp);
        Ok(())
    }

    fn propagate_bias_jacobians(&mut self, rot: &Mat3, acc: &Vec3, rate: &Vec3, dtau: f64) {
        let dt2 = dtau * dtau;
        let r_acc_c = rot * hat(acc) * self.jac_gamma_gyro;
        self.jac_alpha_gyro += self.jac_beta_gyro * dtau - r_acc_c * (0.5 * dt2);
        self.jac_alpha_accel += self.jac_beta_accel * dtau - rot * (0.5 * dt2);
        self.jac_beta_gyro -= r_acc_c * dtau;
        self.jac_beta_accel -= rot * dtau;
        let step = rate * dtau;
        let step_rot = crate::manifold::exp_so3(&step);
        self.jac_gamma_gyro =
            step_rot.transpose() * self.jac_gamma_gyro - right_jacobian(&step) * dtau;
    }

    fn propagate_covariance(&mut self, rot: &Mat3, acc: &Vec3, rate: &Vec3, dtau: f64) {
        // Error-state order: δα 0, δβ 3, δθ 6, δb^ω 9, δb^a 12.
        let mut f = Mat15::zeros();
        f.fixed_view_mut::<3, 3>(0, 3).copy_from(&Mat3::identity());
        f.fixed_view_mut::<3, 3>(3, 6).copy_from(&(-rot * hat(acc)));
        f.fixed_view_mut::<3, 3>(3, 12).copy_from(&(-rot));
        f.fixed_view_mut::<3, 3>(6, 6).copy_from(&(-hat(rate)));
        f.fixed_view_mut::<3, 3>(6, 9).copy_from(&(-Mat3::identity()));
        let phi = Mat15::identity() + f * dtau;

        // G·diag(σ²)·Gᵀ written out blockwise; noise order (η^ω, η^a, η^bω, η^ba).
        let n = &self.noise;
        let (sg, sa) = (n.sigma_gyro.powi(2), n.sigma_accel.powi(2));
        let (sbg, sba) = (n.sigma_gyro_walk.powi(2), n.sigma_accel_walk.powi(2));
        let mut q = Mat15::zeros();
        q.fixed_view_mut::<3, 3>(3, 3)
            .copy_from(&(rot * rot.transpose() * sa));
        q.fixed_view_mut::<3, 3>(6, 6).copy_from(&(Mat3::identity() * sg));
        q.fixed_view_mut::<3, 3>(9, 9).copy_from(&(Mat3::identity() * sbg));
        q.fixed_view_mut::<3, 3>(12, 12).copy_from(&(Mat3::identity() * sba));

        let p = phi * self.covariance * phi.transpose() + q * dtau;
        self.covariance = (p + p.transpose()) * 0.5;
    }

    /// First-order bias-corrected `(α, β, γ)` at `bias`.
    pub fn corrected(&self, bias: &ImuBias) -> (Vec3, Vec3, Quat) {
        let dbg = bias.gyro - self.bias.gyro;
        let dba = bias.accel - self.bias.accel;
        let alpha = self.alpha + self.jac_alpha_gyro * dbg + self.jac_alpha_accel * dba;
        let beta = self.beta + self.jac_beta_gyro * dbg + self.jac_beta_accel * dba;
        let half = self.jac_gamma_gyro * dbg * 0.5;
        let gamma = (self.gamma * Quat::from_parts_unchecked(1.0, half)).normalized();
        (alpha, beta, gamma)
    }

    /// Whether `bias` is too far from the linearization point for
    /// [`Preintegration::corrected`] to be trusted.
    pub fn needs_repropagation(&self, bias: &ImuBias) -> bool {
        (bias.gyro - self.bias.gyro).norm() > REPROPAGATE_GYRO
            || (bias.accel - self.bias.accel).norm() > REPROPAGATE_ACCEL
    }

    /// Re-integrates the stored samples about a new bias point.
    pub fn repropagate(&self, bias: ImuBias) -> Preintegration {
        let mut pre = Preintegration::new(bias, self.noise);
        for (sample, dtau) in &self.steps {
            pre.integrate_step(sample, sample.stamp + dtau)
                .expect("stored steps are already validated");
        }
        pre
    }

    /// Dead-reckons `from` across this interval.
    ///
    /// The bias correction uses `from`'s biases; the biases themselves are
    /// carried over unchanged.
    pub fn predict(&self, from: &NavState) -> NavState {
        let g = self.noise.gravity_vector();
        let dt = self.duration;
        let (alpha, beta, gamma) = self.corrected(&from.bias());
        let rot = from.q.to_rotation();
        NavState {
            q: (from.q * gamma).normalized(),
            p: from.p + from.v * dt - g * (0.5 * dt * dt) + rot * alpha,
            v: from.v - g * dt + rot * beta,
            bg: from.bg,
            ba: from.ba,
        }
    }

    /// Smallest eigenvalue of the covariance.
    pub fn min_covariance_eigenvalue(&self) -> f64 {
        SymmetricEigen::new(self.covariance).eigenvalues.min()
    }
}

/// Dead-reckons `from` across a zero-order-hold segment of samples.
///
/// Fewer than two samples leave the state unchanged.
pub fn predict_state(from: &NavState, segment: &[ImuSample], noise: &ImuNoise) -> Result<NavState> {
    if segment.len() < 2 {
        return Ok(*from);
    }
    let pre = Preintegration::from_segment(segment, from.bias(), *noise)?;
    Ok(pre.predict(from))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::manifold::{log_so3, yaw_quat};
    use std::f64::consts::PI;

    fn constant_segment(n: usize, dtau: f64, gyro: Vec3, accel: Vec3) -> Vec<ImuSample> {
        (0..=n)
            .map(|i| ImuSample::new(i as f64 * dtau, gyro, accel))
            .collect()
    }

    /// A segment with time-varying readings so every Jacobian block is exercised.
    fn wavy_segment(n: usize, dtau: f64) -> Vec<ImuSample> {
        (0..=n)
            .map(|i| {
                let t = i as f64 * dtau;
                ImuSample::new(
                    t,
                    Vec3::new(0.4 * (3.0 * t).sin(), -0.3 + 0.2 * t, 0.7 * (2.0 * t).cos()),
                    Vec3::new(1.0 + (5.0 * t).sin(), -0.5 * t, 9.81 + 0.3 * (4.0 * t).cos()),
                )
            })
            .collect()
    }

    fn noise() -> ImuNoise {
        ImuNoise::default()
    }

    #[test]
    fn empty_segment_is_identity() {
        let pre = Preintegration::from_segment(&[], ImuBias::default(), noise()).unwrap();
        assert_eq!(pre.alpha, Vec3::zeros());
        assert_eq!(pre.beta, Vec3::zeros());
        assert_eq!(pre.gamma, Quat::identity());
        assert_eq!(pre.jac_alpha_gyro, Mat3::zeros());
        assert_eq!(pre.jac_gamma_gyro, Mat3::zeros());
        assert_eq!(pre.covariance, Mat15::zeros());
        assert_eq!(pre.sample_count, 0);
    }

    #[test]
    fn constant_specific_force_double_integral() {
        let seg = constant_segment(100, 0.01, Vec3::zeros(), Vec3::new(0.0, 0.0, 9.81));
        let pre = Preintegration::from_segment(&seg, ImuBias::default(), noise()).unwrap();
        assert!((pre.gamma.coords() - Quat::identity().coords()).norm() < 1e-12);
        assert!((pre.beta - Vec3::new(0.0, 0.0, 9.81)).norm() < 1e-9);
        assert!((pre.alpha - Vec3::new(0.0, 0.0, 4.905)).norm() < 1e-9);
        assert!((pre.duration - 1.0).abs() < 1e-12);
    }

    #[test]
    fn constant_rate_rotation() {
        let seg = constant_segment(100, 0.01, Vec3::new(0.0, 0.0, PI / 2.0), Vec3::zeros());
        let pre = Preintegration::from_segment(&seg, ImuBias::default(), noise()).unwrap();
        let expect = yaw_quat(PI / 2.0);
        assert!(pre.gamma.angle_to(&expect) < 1e-6);
        assert_eq!(pre.alpha, Vec3::zeros());
        assert_eq!(pre.beta, Vec3::zeros());
    }

    #[test]
    fn rejects_non_increasing_stamps() {
        let mut pre = Preintegration::new(ImuBias::default(), noise());
        let s = ImuSample::new(1.0, Vec3::zeros(), Vec3::zeros());
        assert!(pre.integrate_step(&s, 1.0).is_err());
        pre.integrate_step(&s, 1.1).unwrap();
        let back = ImuSample::new(1.05, Vec3::zeros(), Vec3::zeros());
        assert!(pre.integrate_step(&back, 1.2).is_err());
    }

    #[test]
    fn bias_jacobians_match_reintegration() {
        let seg = wavy_segment(80, 0.0025);
        let b0 = ImuBias {
            gyro: Vec3::new(0.01, -0.02, 0.005),
            accel: Vec3::new(0.05, 0.02, -0.03),
        };
        let base = Preintegration::from_segment(&seg, b0, noise()).unwrap();
        let h = 1e-6;
        for axis in 0..3 {
            let shifted = |dg: f64, da: f64| {
                let mut b = b0;
                b.gyro[axis] += dg;
                b.accel[axis] += da;
                Preintegration::from_segment(&seg, b, noise()).unwrap()
            };
            let rel = |fd: Vec3, an: Vec3| (fd - an).norm() / fd.norm().max(1e-12);

            let (p, m) = (shifted(h, 0.0), shifted(-h, 0.0));
            let fd_a = (p.alpha - m.alpha) / (2.0 * h);
            let fd_b = (p.beta - m.beta) / (2.0 * h);
            let fd_c = (log_so3(&(base.gamma.to_rotation().transpose() * p.gamma.to_rotation()))
                - log_so3(&(base.gamma.to_rotation().transpose() * m.gamma.to_rotation())))
                / (2.0 * h);
            assert!(rel(fd_a, base.jac_alpha_gyro.column(axis).into()) < 1e-4);
            assert!(rel(fd_b, base.jac_beta_gyro.column(axis).into()) < 1e-4);
            assert!(rel(fd_c, base.jac_gamma_gyro.column(axis).into()) < 1e-4);

            let (p, m) = (shifted(0.0, h), shifted(0.0, -h));
            let fd_a = (p.alpha - m.alpha) / (2.0 * h);
            let fd_b = (p.beta - m.beta) / (2.0 * h);
            assert!(rel(fd_a, base.jac_alpha_accel.column(axis).into()) < 1e-4);
            assert!(rel(fd_b, base.jac_beta_accel.column(axis).into()) < 1e-4);
        }
    }

    #[test]
    fn covariance_stays_psd_and_grows() {
        let seg = wavy_segment(200, 0.0025);
        let mut pre = Preintegration::new(ImuBias::default(), noise());
        let mut trace = 0.0;
        for pair in seg.windows(2) {
            pre.integrate_step(&pair[0], pair[1].stamp).unwrap();
            assert_eq!(pre.covariance, pre.covariance.transpose());
            assert!(pre.min_covariance_eigenvalue() >= -1e-12);
            let t = pre.covariance.trace();
            assert!(t >= trace);
            trace = t;
        }
    }

    #[test]
    fn small_bias_change_first_order_matches_reintegration() {
        let seg = wavy_segment(40, 0.0025);
        let pre = Preintegration::from_segment(&seg, ImuBias::default(), noise()).unwrap();
        let nb = ImuBias {
            gyro: Vec3::new(1e-3, 0.0, 0.0),
            accel: Vec3::zeros(),
        };
        assert!(!pre.needs_repropagation(&nb));
        let (a, b, g) = pre.corrected(&nb);
        let re = pre.repropagate(nb);
        assert!((a - re.alpha).norm() < 1e-6);
        assert!((b - re.beta).norm() < 1e-5);
        assert!(g.angle_to(&re.gamma) < 1e-6);

        let (a0, b0, g0) = pre.corrected(&ImuBias::default());
        assert_eq!((a0, b0), (pre.alpha, pre.beta));
        assert!(g0.angle_to(&pre.gamma) < 1e-15);
    }

    #[test]
    fn large_bias_change_needs_reintegration() {
        let seg = wavy_segment(40, 0.0025);
        let pre = Preintegration::from_segment(&seg, ImuBias::default(), noise()).unwrap();
        let nb = ImuBias {
            gyro: Vec3::new(0.5, 0.0, 0.0),
            accel: Vec3::zeros(),
        };
        assert!(pre.needs_repropagation(&nb));
        let (a, _, g) = pre.corrected(&nb);
        let re = pre.repropagate(nb);
        let gap = (a - re.alpha).norm().max(g.angle_to(&re.gamma));
        assert!(gap > 1e-6, "first-order gap {gap}");
    }

    #[test]
    fn hover_is_an_equilibrium() {
        let q = Quat::new(0.95, 0.1, -0.2, 0.2);
        let g = noise().gravity_vector();
        let f = q.to_rotation().transpose() * g;
        let seg = constant_segment(400, 0.0025, Vec3::zeros(), f);
        let from = NavState::new(q, Vec3::new(1.0, 2.0, 3.0), Vec3::zeros());
        let to = predict_state(&from, &seg, &noise()).unwrap();
        assert!((to.p - from.p).norm() < 1e-9);
        assert!(to.v.norm() < 1e-9);
        assert!(to.q.angle_to(&from.q) < 1e-9);
    }

    #[test]
    fn constant_world_acceleration() {
        let q = yaw_quat(0.7);
        let acc_world = Vec3::new(0.5, -0.3, 0.2);
        let g = noise().gravity_vector();
        let f = q.to_rotation().transpose() * (acc_world + g);
        let seg = constant_segment(400, 0.0025, Vec3::zeros(), f);
        let from = NavState::new(q, Vec3::new(1.0, 0.0, 2.0), Vec3::new(0.3, 0.1, 0.0));
        let to = predict_state(&from, &seg, &noise()).unwrap();
        let t = 1.0;
        let p = from.p + from.v * t + acc_world * (0.5 * t * t);
        let v = from.v + acc_world * t;
        assert!((to.p - p).norm() < 1e-6);
        assert!((to.v - v).norm() < 1e-6);
    }

    #[test]
    fn empty_prediction_is_unchanged() {
        let from = NavState::new(yaw_quat(0.2), Vec3::new(1.0, 2.0, 3.0), Vec3::zeros());
        assert_eq!(predict_state(&from, &[], &noise()).unwrap(), from);
    }

    #[test]
    fn split_segments_chain() {
        let seg = wavy_segment(120, 0.0025);
        let from = NavState::new(
            Quat::new(0.9, 0.1, 0.2, -0.1),
            Vec3::new(0.0, 1.0, 2.0),
            Vec3::new(0.5, -0.2, 0.1),
        );
        let whole = predict_state(&from, &seg, &noise()).unwrap();
        for cut in [1, 37, 60, 119] {
            let mid = predict_state(&from, &seg[..=cut], &noise()).unwrap();
            let end = predict_state(&mid, &seg[cut..], &noise()).unwrap();
            assert!((end.p - whole.p).norm() < 1e-9, "{cut}");
            assert!((end.v - whole.v).norm() < 1e-9);
            assert!(end.q.angle_to(&whole.q) < 1e-9);
        }
    }

    #[test]
    fn lerp_midpoint() {
        let a = ImuSample::new(0.0, Vec3::new(1.0, 0.0, 0.0), Vec3::zeros());
        let b = ImuSample::new(0.0025, Vec3::new(3.0, 0.0, 0.0), Vec3::new(0.0, 2.0, 0.0));
        let m = ImuSample::lerp(&a, &b, 0.00125);
        assert!((m.gyro - Vec3::new(2.0, 0.0, 0.0)).norm() < 1e-15);
        assert!((m.accel - Vec3::new(0.0, 1.0, 0.0)).norm() < 1e-15);
    }
}
