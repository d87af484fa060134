//! Residuals and analytic Jacobians of the three factor families.
//!
//! Every factor binds two consecutive window nodes `k` and `k + 1`. Jacobians
//! are taken with respect to the state tangent: rotations are perturbed on the
//! right, `q ∘ E(δθ)`, everything else additively.

use nalgebra::{DMatrix, DVector, Matrix3x1, Matrix6, SMatrix, Vector6};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::manifold::{
    brc3, exp_so3, hat, log_so3, right_jacobian, right_jacobian_inv, Mat3, Quat, Vec3,
};
use crate::preintegration::Preintegration;
use crate::state::{NavState, StateBlock, StateVector, STATE_DIM};

/// Below this predicted antenna-anchor distance a range is dropped.
pub const DEGENERATE_RANGE: f64 = 1e-6;

/// Pose displacement between two nodes reported by an odometry stream.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OslDisplacement {
    pub dq: Quat,
    pub dp: Vec3,
    pub dt: f64,
    /// Per-axis noise densities, rotation first.
    pub sigma: Vector6<f64>,
}

impl OslDisplacement {
    /// Builds the displacement between two absolute odometry poses.
    pub fn between(q0: &Quat, p0: &Vec3, q1: &Quat, p1: &Vec3, dt: f64, sigma: Vector6<f64>) -> Self {
        OslDisplacement {
            dq: (q0.inverse() * *q1).normalized(),
            dp: q0.to_rotation().transpose() * (p1 - p0),
            dt,
            sigma,
        }
    }

    pub fn covariance(&self) -> Matrix6<f64> {
        Matrix6::from_diagonal(&self.sigma.component_mul(&self.sigma)) * self.dt
    }
}

/// One range between a body-mounted antenna and a fixed anchor.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UwbObservation {
    pub range: f64,
    pub anchor: Vec3,
    pub antenna: Vec3,
    /// Offset of the measurement from the start of the step.
    pub dt: f64,
    pub step: f64,
    pub sigma: f64,
}

/// Interpolation coefficients `(s, a, b)` of a range taken `dt` into a step.
pub fn uwb_interp_coeffs(dt: f64, step: f64) -> Result<(f64, f64, f64)> {
    if !(step > 0.0) || dt < 0.0 || dt > step {
        return Err(Error::OffsetOutsideStep { dt, step });
    }
    let s = dt / step;
    let a = -(step * step - dt * dt) / (2.0 * step);
    let b = -(step - dt) * (step - dt) / (2.0 * step);
    Ok((s, a, b))
}

/// `2·vec(q)` after folding `q` onto the `w ≥ 0` hemisphere, with the sign applied.
fn quat_error(q: &Quat) -> (Vec3, f64) {
    let sign = if q.w < 0.0 { -1.0 } else { 1.0 };
    (q.v * (2.0 * sign), sign)
}

pub fn osl_residual(xk: &NavState, xk1: &NavState, obs: &OslDisplacement) -> Vector6<f64> {
    let dq_hat = xk.q.inverse() * xk1.q;
    let (r_rot, _) = quat_error(&(obs.dq.inverse() * dq_hat));
    let r_pos = xk.q.to_rotation().transpose() * (xk1.p - xk.p) - obs.dp;
    let mut r = Vector6::zeros();
    r.fixed_rows_mut::<3>(0).copy_from(&r_rot);
    r.fixed_rows_mut::<3>(3).copy_from(&r_pos);
    r
}

/// Non-zero Jacobian blocks of the odometry residual.
#[derive(Debug, Clone, PartialEq)]
pub struct OslJacobians {
    /// Rotational residual w.r.t. `qₖ`, `qₖ₊₁`.
    pub rot_qk: Mat3,
    pub rot_qk1: Mat3,
    /// Translational residual w.r.t. `qₖ`, `pₖ`, `pₖ₊₁`.
    pub pos_qk: Mat3,
    pub pos_pk: Mat3,
    pub pos_pk1: Mat3,
}

pub fn osl_jacobians(xk: &NavState, xk1: &NavState, obs: &OslDisplacement) -> OslJacobians {
    let err = obs.dq.inverse() * xk.q.inverse() * xk1.q;
    let sign = if err.w < 0.0 { -1.0 } else { 1.0 };
    let rk_t = xk.q.to_rotation().transpose();
    let rot_qk = -brc3(&(obs.dq.right_matrix() * (xk1.q.inverse() * xk.q).left_matrix())) * sign;
    let rot_qk1 = brc3(&err.left_matrix()) * sign;
    OslJacobians {
        rot_qk,
        rot_qk1,
        pos_qk: hat(&(rk_t * (xk1.p - xk.p))),
        pos_pk: -rk_t,
        pos_pk1: rk_t,
    }
}

/// Residual of the preintegrated IMU factor, ordered `(r_γ, r_α, r_β, r_bω, r_ba)`.
pub fn imu_residual(xk: &NavState, xk1: &NavState, pre: &Preintegration) -> SMatrix<f64, 15, 1> {
    let g = pre.noise.gravity_vector();
    let dt = pre.duration;
    let dbg = xk.bg - pre.bias.gyro;
    let dba = xk.ba - pre.bias.accel;
    let gamma_t = pre.gamma * Quat::from_rotation_vector(&(pre.jac_gamma_gyro * dbg));
    let (r_gamma, _) = quat_error(&(gamma_t.inverse() * xk.q.inverse() * xk1.q));
    let rk_t = xk.q.to_rotation().transpose();
    let r_alpha = rk_t * (xk1.p - xk.p - xk.v * dt + g * (0.5 * dt * dt))
        - pre.jac_alpha_gyro * dbg
        - pre.jac_alpha_accel * dba
        - pre.alpha;
    let r_beta =
        rk_t * (xk1.v - xk.v + g * dt) - pre.jac_beta_gyro * dbg - pre.jac_beta_accel * dba - pre.beta;
    let mut r = SMatrix::<f64, 15, 1>::zeros();
    r.fixed_rows_mut::<3>(0).copy_from(&r_gamma);
    r.fixed_rows_mut::<3>(3).copy_from(&r_alpha);
    r.fixed_rows_mut::<3>(6).copy_from(&r_beta);
    r.fixed_rows_mut::<3>(9).copy_from(&(xk1.bg - xk.bg));
    r.fixed_rows_mut::<3>(12).copy_from(&(xk1.ba - xk.ba));
    r
}

/// Full IMU Jacobian: 15 residual rows by the 30-wide tangent of `(xₖ, xₖ₊₁)`.
pub fn imu_jacobians(xk: &NavState, xk1: &NavState, pre: &Preintegration) -> SMatrix<f64, 15, 30> {
    let g = pre.noise.gravity_vector();
    let dt = pre.duration;
    let dbg = xk.bg - pre.bias.gyro;
    let corr = pre.jac_gamma_gyro * dbg;
    let gamma_t = pre.gamma * Quat::from_rotation_vector(&corr);
    let dq_hat = xk.q.inverse() * xk1.q;
    let err = gamma_t.inverse() * dq_hat;
    let sign = if err.w < 0.0 { -1.0 } else { 1.0 };
    let rk_t = xk.q.to_rotation().transpose();

    const RG: usize = 0;
    const RA: usize = 3;
    const RB: usize = 6;
    const RBW: usize = 9;
    const RBA: usize = 12;
    let k = |b: StateBlock| b.offset();
    let k1 = |b: StateBlock| STATE_DIM + b.offset();

    let mut j = SMatrix::<f64, 15, 30>::zeros();
    let mut set = |row: usize, col: usize, m: Mat3| j.fixed_view_mut::<3, 3>(row, col).copy_from(&m);

    set(
        RG,
        k(StateBlock::Rotation),
        -brc3(&(gamma_t.right_matrix() * (xk1.q.inverse() * xk.q).left_matrix())) * sign,
    );
    set(RG, k1(StateBlock::Rotation), brc3(&err.left_matrix()) * sign);
    set(
        RG,
        k(StateBlock::GyroBias),
        -brc3(&err.right_matrix()) * right_jacobian(&corr) * pre.jac_gamma_gyro * sign,
    );

    set(
        RA,
        k(StateBlock::Rotation),
        hat(&(rk_t * (xk1.p - xk.p - xk.v * dt + g * (0.5 * dt * dt)))),
    );
    set(RA, k(StateBlock::Position), -rk_t);
    set(RA, k1(StateBlock::Position), rk_t);
    set(RA, k(StateBlock::Velocity), -rk_t * dt);
    set(RA, k(StateBlock::GyroBias), -pre.jac_alpha_gyro);
    set(RA, k(StateBlock::AccelBias), -pre.jac_alpha_accel);

    set(RB, k(StateBlock::Rotation), hat(&(rk_t * (xk1.v - xk.v + g * dt))));
    set(RB, k(StateBlock::Velocity), -rk_t);
    set(RB, k1(StateBlock::Velocity), rk_t);
    set(RB, k(StateBlock::GyroBias), -pre.jac_beta_gyro);
    set(RB, k(StateBlock::AccelBias), -pre.jac_beta_accel);

    set(RBW, k(StateBlock::GyroBias), -Mat3::identity());
    set(RBW, k1(StateBlock::GyroBias), Mat3::identity());
    set(RBA, k(StateBlock::AccelBias), -Mat3::identity());
    set(RBA, k1(StateBlock::AccelBias), Mat3::identity());
    j
}

/// Preintegration covariance reordered to the residual order `(δθ, δα, δβ, δb^ω, δb^a)`.
pub fn imu_residual_covariance(pre: &Preintegration) -> SMatrix<f64, 15, 15> {
    // Residual block i takes covariance block PERM[i].
    const PERM: [usize; 5] = [2, 0, 1, 3, 4];
    let mut out = SMatrix::<f64, 15, 15>::zeros();
    for (i, &pi) in PERM.iter().enumerate() {
        for (j, &pj) in PERM.iter().enumerate() {
            out.fixed_view_mut::<3, 3>(3 * i, 3 * j)
                .copy_from(&pre.covariance.fixed_view::<3, 3>(3 * pi, 3 * pj));
        }
    }
    out
}

/// Antenna-to-anchor vector `n` at `tₖ + dt`, interpolating rotation
/// geodesically and velocity linearly.
pub fn uwb_predicted_vector(xk: &NavState, xk1: &NavState, obs: &UwbObservation) -> Result<Vec3> {
    let (s, a, b) = uwb_interp_coeffs(obs.dt, obs.step)?;
    let rk = xk.q.to_rotation();
    let phi = log_so3(&(rk.transpose() * xk1.q.to_rotation()));
    Ok(xk1.p + rk * exp_so3(&(phi * s)) * obs.antenna + xk1.v * a + xk.v * b - obs.anchor)
}

pub fn uwb_residual(xk: &NavState, xk1: &NavState, obs: &UwbObservation) -> Result<f64> {
    let n = uwb_predicted_vector(xk, xk1, obs)?;
    let norm = n.norm();
    if norm < DEGENERATE_RANGE {
        return Err(Error::DegenerateRange(norm));
    }
    Ok(norm - obs.range)
}

/// Non-zero Jacobian blocks of the range residual, each a 1×3 row.
#[derive(Debug, Clone, PartialEq)]
pub struct UwbJacobians {
    pub qk: Matrix3x1<f64>,
    pub qk1: Matrix3x1<f64>,
    pub vk: Matrix3x1<f64>,
    pub vk1: Matrix3x1<f64>,
    pub pk1: Matrix3x1<f64>,
}

/// Jacobian rows stored as column vectors (transpose to get `∂r/∂x`).
pub fn uwb_jacobians(xk: &NavState, xk1: &NavState, obs: &UwbObservation) -> Result<UwbJacobians> {
    let (s, a, b) = uwb_interp_coeffs(obs.dt, obs.step)?;
    let rk = xk.q.to_rotation();
    let phi = log_so3(&(rk.transpose() * xk1.q.to_rotation()));
    let interp = rk * exp_so3(&(phi * s));
    let n = xk1.p + interp * obs.antenna + xk1.v * a + xk.v * b - obs.anchor;
    let norm = n.norm();
    if norm < DEGENERATE_RANGE {
        return Err(Error::DegenerateRange(norm));
    }
    let u = n / norm;
    let d_rot = u.transpose() * (-interp * hat(&obs.antenna));
    let h_inv = right_jacobian_inv(&phi);
    let s_bar = s - 1.0;
    let qk1 = d_rot * right_jacobian(&(phi * s)) * h_inv * s;
    let qk = d_rot * right_jacobian(&(phi * s_bar)) * (-h_inv * exp_so3(&phi).transpose()) * s_bar;
    Ok(UwbJacobians {
        qk: qk.transpose(),
        qk1: qk1.transpose(),
        vk: u * b,
        vk1: u * a,
        pk1: u,
    })
}

/// Upper-triangular `W` with `WᵀW = P⁻¹`, the Cholesky factor of the information.
pub fn sqrt_information(cov: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    let info = cov.clone().cholesky()?.inverse();
    let info = (&info + info.transpose()) * 0.5;
    Some(info.cholesky()?.l().transpose())
}

/// A residual-producing constraint between nodes `k` and `k + 1`.
#[derive(Debug, Clone, PartialEq)]
pub enum Factor {
    Osl(OslDisplacement),
    Imu(Box<Preintegration>),
    Uwb(UwbObservation),
}

/// Family tag used for per-family cost reporting.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FactorKind {
    Osl,
    Imu,
    Uwb,
    Prior,
}

/// A linearized factor: raw residual, Jacobian over the 30-wide pair tangent
/// and the square-root information used for whitening.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualBlock {
    pub residual: DVector<f64>,
    pub jacobian: DMatrix<f64>,
    pub weight: DMatrix<f64>,
}

impl ResidualBlock {
    pub fn whitened_residual(&self) -> DVector<f64> {
        &self.weight * &self.residual
    }

    pub fn whitened_jacobian(&self) -> DMatrix<f64> {
        &self.weight * &self.jacobian
    }

    /// `‖W r‖²`.
    pub fn cost(&self) -> f64 {
        self.whitened_residual().norm_squared()
    }
}

impl Factor {
    pub fn kind(&self) -> FactorKind {
        match self {
            Factor::Osl(_) => FactorKind::Osl,
            Factor::Imu(_) => FactorKind::Imu,
            Factor::Uwb(_) => FactorKind::Uwb,
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            Factor::Osl(_) => 6,
            Factor::Imu(_) => 15,
            Factor::Uwb(_) => 1,
        }
    }

    /// Raw residual, or `None` when the factor is unusable at this linearization point.
    pub fn residual(&self, xk: &NavState, xk1: &NavState) -> Option<DVector<f64>> {
        match self {
            Factor::Osl(o) => Some(DVector::from_column_slice(osl_residual(xk, xk1, o).as_slice())),
            Factor::Imu(p) => Some(DVector::from_column_slice(imu_residual(xk, xk1, p).as_slice())),
            Factor::Uwb(u) => uwb_residual(xk, xk1, u).ok().map(|r| DVector::from_element(1, r)),
        }
    }

    pub fn covariance(&self) -> DMatrix<f64> {
        match self {
            Factor::Osl(o) => DMatrix::from_column_slice(6, 6, o.covariance().as_slice()),
            Factor::Imu(p) => DMatrix::from_column_slice(15, 15, imu_residual_covariance(p).as_slice()),
            Factor::Uwb(u) => DMatrix::from_element(1, 1, u.sigma * u.sigma),
        }
    }

    /// Analytic Jacobian over the 30-wide tangent of `(xₖ, xₖ₊₁)`.
    pub fn jacobian(&self, xk: &NavState, xk1: &NavState) -> Option<DMatrix<f64>> {
        let mut j = DMatrix::zeros(self.dim(), 2 * STATE_DIM);
        let k = |b: StateBlock| b.offset();
        let k1 = |b: StateBlock| STATE_DIM + b.offset();
        match self {
            Factor::Osl(o) => {
                let b = osl_jacobians(xk, xk1, o);
                j.fixed_view_mut::<3, 3>(0, k(StateBlock::Rotation)).copy_from(&b.rot_qk);
                j.fixed_view_mut::<3, 3>(0, k1(StateBlock::Rotation)).copy_from(&b.rot_qk1);
                j.fixed_view_mut::<3, 3>(3, k(StateBlock::Rotation)).copy_from(&b.pos_qk);
                j.fixed_view_mut::<3, 3>(3, k(StateBlock::Position)).copy_from(&b.pos_pk);
                j.fixed_view_mut::<3, 3>(3, k1(StateBlock::Position)).copy_from(&b.pos_pk1);
            }
            Factor::Imu(p) => {
                j.copy_from(&imu_jacobians(xk, xk1, p));
            }
            Factor::Uwb(u) => {
                let b = uwb_jacobians(xk, xk1, u).ok()?;
                let rows = [
                    (k(StateBlock::Rotation), b.qk),
                    (k1(StateBlock::Rotation), b.qk1),
                    (k(StateBlock::Velocity), b.vk),
                    (k1(StateBlock::Velocity), b.vk1),
                    (k1(StateBlock::Position), b.pk1),
                ];
                for (col, v) in rows {
                    j.fixed_view_mut::<1, 3>(0, col).copy_from(&v.transpose());
                }
            }
        }
        Some(j)
    }

    /// Residual, Jacobian and whitening at `(xₖ, xₖ₊₁)`.
    pub fn linearize(&self, xk: &NavState, xk1: &NavState) -> Option<ResidualBlock> {
        let residual = self.residual(xk, xk1)?;
        let jacobian = self.jacobian(xk, xk1)?;
        let weight = sqrt_information(&self.covariance())?;
        Some(ResidualBlock {
            residual,
            jacobian,
            weight,
        })
    }
}

/// Central finite-difference Jacobian of a factor's residual under the
/// state retraction, over the 30-wide pair tangent.
pub fn numerical_jacobian(factor: &Factor, xk: &NavState, xk1: &NavState, h: f64) -> Option<DMatrix<f64>> {
    let mut j = DMatrix::zeros(factor.dim(), 2 * STATE_DIM);
    for col in 0..2 * STATE_DIM {
        let mut d = StateVector::zeros();
        d[col % STATE_DIM] = h;
        let eval = |d: &StateVector| {
            if col < STATE_DIM {
                factor.residual(&xk.retract(d), xk1)
            } else {
                factor.residual(xk, &xk1.retract(d))
            }
        };
        let plus = eval(&d)?;
        let minus = eval(&(-d))?;
        j.set_column(col, &((plus - minus) / (2.0 * h)));
    }
    Some(j)
}
