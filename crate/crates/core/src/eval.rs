//! Trajectory alignment and error metrics against ground truth.

use serde::{Deserialize, Serialize};

use crate::dataset::OslPose;
use crate::error::{Error, Result};
use crate::manifold::{yaw_quat, Quat, Vec3};
use crate::state::{NavState, StampedState};

/// Largest stamp difference for an estimate to be paired with ground truth.
pub const MATCH_TOLERANCE: f64 = 0.01;
pub const MIN_MATCHES: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub rmse_pos_m: f64,
    pub rmse_rot_deg: f64,
    pub rmse_vel_mps: f64,
    pub matched_pairs: usize,
    pub duration_s: f64,
}

/// Maps an odometry trajectory from its local frame into the world using the
/// initial ground-truth pose `(q0, p0)`.
pub fn align_osl_to_world(osl: &[OslPose], q0: &Quat, p0: &Vec3) -> Vec<OslPose> {
    let r0 = q0.to_rotation();
    osl.iter()
        .map(|o| OslPose {
            stamp: o.stamp,
            q: (*q0 * o.q).normalized(),
            p: r0 * o.p + p0,
        })
        .collect()
}

/// Odometry poses as states with zero velocity.
pub fn poses_as_states(poses: &[OslPose]) -> Vec<StampedState> {
    poses
        .iter()
        .map(|p| StampedState { stamp: p.stamp, state: NavState::new(p.q, p.p, Vec3::zeros()) })
        .collect()
}

/// For each estimate, the index of the nearest ground-truth stamp within `tol`.
pub fn match_nearest(est: &[StampedState], gt: &[StampedState], tol: f64) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for (i, e) in est.iter().enumerate() {
        let j = gt.partition_point(|g| g.stamp < e.stamp);
        let best = [j.checked_sub(1), Some(j)]
            .into_iter()
            .flatten()
            .filter(|&k| k < gt.len())
            .min_by(|&a, &b| (gt[a].stamp - e.stamp).abs().total_cmp(&(gt[b].stamp - e.stamp).abs()));
        if let Some(k) = best {
            if (gt[k].stamp - e.stamp).abs() <= tol {
                out.push((i, k));
            }
        }
    }
    out
}

/// Per-pair errors: position, rotation vector of `R̄⁻¹R` and velocity.
fn pair_errors(e: &NavState, g: &NavState) -> (Vec3, Vec3, Vec3) {
    (e.p - g.p, (g.q.inverse() * e.q).to_rotation_vector(), e.v - g.v)
}

pub fn rmse(est: &[StampedState], gt: &[StampedState]) -> Result<Metrics> {
    let pairs = match_nearest(est, gt, MATCH_TOLERANCE);
    if pairs.len() < MIN_MATCHES {
        return Err(Error::TooFewMatches(pairs.len()));
    }
    let n = pairs.len() as f64;
    let (mut sp, mut sr, mut sv) = (0.0, 0.0, 0.0);
    for &(i, j) in &pairs {
        let (ep, er, ev) = pair_errors(&est[i].state, &gt[j].state);
        sp += ep.norm_squared();
        sr += er.norm_squared();
        sv += ev.norm_squared();
    }
    Ok(Metrics {
        rmse_pos_m: (sp / n).sqrt(),
        rmse_rot_deg: (sr / n).sqrt().to_degrees(),
        rmse_vel_mps: (sv / n).sqrt(),
        matched_pairs: pairs.len(),
        duration_s: est[pairs[pairs.len() - 1].0].stamp - est[pairs[0].0].stamp,
    })
}

/// Yaw and translation minimizing the matched position error, closed form.
pub fn fit_yaw_translation(est: &[StampedState], gt: &[StampedState]) -> Result<(f64, Vec3)> {
    let pairs = match_nearest(est, gt, MATCH_TOLERANCE);
    if pairs.len() < MIN_MATCHES {
        return Err(Error::TooFewMatches(pairs.len()));
    }
    let n = pairs.len() as f64;
    let ce = pairs.iter().map(|&(i, _)| est[i].state.p).sum::<Vec3>() / n;
    let cg = pairs.iter().map(|&(_, j)| gt[j].state.p).sum::<Vec3>() / n;
    let (mut s_cross, mut s_dot) = (0.0, 0.0);
    for &(i, j) in &pairs {
        let a = est[i].state.p - ce;
        let b = gt[j].state.p - cg;
        s_dot += a.x * b.x + a.y * b.y;
        s_cross += a.x * b.y - a.y * b.x;
    }
    let yaw = s_cross.atan2(s_dot);
    let t = cg - yaw_quat(yaw).rotate(&ce);
    Ok((yaw, t))
}

/// Rotates an estimate about world z by `yaw`, then translates by `t`.
pub fn apply_yaw_translation(est: &[StampedState], yaw: f64, t: &Vec3) -> Vec<StampedState> {
    let rz = yaw_quat(yaw);
    est.iter()
        .map(|s| {
            let mut x = s.state;
            x.q = (rz * x.q).normalized();
            x.p = rz.rotate(&x.p) + t;
            x.v = rz.rotate(&x.v);
            StampedState { stamp: s.stamp, state: x }
        })
        .collect()
}

pub const PLOT_HEADER: &[&str] = &[
    "stamp", "px", "py", "pz", "gt_px", "gt_py", "gt_pz", "ex", "ey", "ez", "erx_deg", "ery_deg", "erz_deg", "evx",
    "evy", "evz",
];

/// Per-axis error series over matched pairs, one row per estimate.
pub fn plot_rows(est: &[StampedState], gt: &[StampedState]) -> Vec<[f64; 16]> {
    match_nearest(est, gt, MATCH_TOLERANCE)
        .into_iter()
        .map(|(i, j)| {
            let (e, g) = (&est[i].state, &gt[j].state);
            let (ep, er, ev) = pair_errors(e, g);
            let er = er.map(f64::to_degrees);
            [
                est[i].stamp, e.p.x, e.p.y, e.p.z, g.p.x, g.p.y, g.p.z, ep.x, ep.y, ep.z, er.x, er.y, er.z, ev.x,
                ev.y, ev.z,
            ]
        })
        .collect()
}
