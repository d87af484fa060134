//! Streaming front end: measurement buffering, step creation, outlier
//! gating, initialization and window scheduling.
//!
//! Window stamps sit on a fixed grid `t₀ + k·Δt` anchored at the first IMU
//! sample, independent of when any sensor fires.

use std::collections::{BTreeMap, HashMap, VecDeque};

use nalgebra::{Matrix3, Matrix6};
use serde::{Deserialize, Serialize};

use crate::anchors::AnchorMap;
use crate::config::EstimatorConfig;
use crate::dataset::{Dataset, OslPose, UwbRecord};
use crate::error::{Error, Result};
use crate::factors::{osl_residual, uwb_residual, Factor, FactorKind, OslDisplacement, UwbObservation};
use crate::manifold::{Quat, Vec3};
use crate::preintegration::{ImuBias, ImuSample, Preintegration};
use crate::solver::{solve, BiasPrior, yaw_grid_initialize, yaw_nudge_explore, Interval, SlidingWindow, SolveReport};
use crate::state::{NavState, StampedState};

#[derive(Debug, Clone, PartialEq)]
pub enum Measurement {
    Imu(ImuSample),
    Osl { stream: String, pose: OslPose },
    Uwb(UwbRecord),
}

impl Measurement {
    pub fn stamp(&self) -> f64 {
        match self {
            Measurement::Imu(s) => s.stamp,
            Measurement::Osl { pose, .. } => pose.stamp,
            Measurement::Uwb(r) => r.stamp,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Rejection {
    Snr,
    Edge,
    Rate,
    Stale,
    UnknownAnchor,
    UnknownAntenna,
    NonFinite,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Admission {
    Accepted,
    Rejected(Rejection),
}

/// Outcome of the innovation gate for one range.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GateDecision {
    pub stamp: f64,
    pub node_id: u32,
    pub antenna_id: String,
    pub anchor_id: u32,
    /// Measured minus predicted range, m.
    pub innovation: f64,
    pub kept: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StepReport {
    pub stamp: f64,
    /// Slid without solving to clear a backlog.
    pub skipped: bool,
    pub uwb_used: usize,
    pub uwb_gated: usize,
    pub osl_used: usize,
    /// Streams that were stale or failed the IMU cross-check.
    pub osl_ignored: usize,
    pub nudged: bool,
    pub solve: Option<SolveReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct InitReport {
    pub stamp: f64,
    pub ranges: usize,
    pub yaw: f64,
    /// Mean whitened cost of the ranges kept after the grid search.
    pub cost_per_range: f64,
    /// Share of startup ranges inside the innovation gate.
    pub inlier_fraction: f64,
    pub accepted: bool,
}

/// Rotation geodesic and translation linear interpolation between two poses.
pub fn interpolate_pose(a: &OslPose, b: &OslPose, stamp: f64) -> OslPose {
    let span = b.stamp - a.stamp;
    let s = if span > 0.0 { (stamp - a.stamp) / span } else { 0.0 };
    let rel = (a.q.inverse() * b.q).to_rotation_vector();
    OslPose {
        stamp,
        q: (a.q * Quat::from_rotation_vector(&(rel * s))).normalized(),
        p: a.p + (b.p - a.p) * s,
    }
}

/// IMU samples spanning exactly `[ta, tb]`, interpolating at both ends.
pub fn imu_segment(samples: &[ImuSample], ta: f64, tb: f64) -> Option<Vec<ImuSample>> {
    let i0 = samples.partition_point(|s| s.stamp <= ta).checked_sub(1)?;
    let i1 = samples.partition_point(|s| s.stamp < tb);
    if i1 >= samples.len() {
        return None;
    }
    let at = |i: usize, t: f64| {
        if samples[i].stamp == t || i + 1 >= samples.len() {
            ImuSample { stamp: t, ..samples[i] }
        } else {
            ImuSample::lerp(&samples[i], &samples[i + 1], t)
        }
    };
    let mut out = vec![at(i0, ta)];
    out.extend(samples[i0 + 1..i1].iter().filter(|s| s.stamp > ta).copied());
    out.push(if samples[i1].stamp == tb { samples[i1] } else { ImuSample::lerp(&samples[i1 - 1], &samples[i1], tb) });
    Some(out)
}

/// Attitude with zero yaw whose gravity direction matches the mean specific force.
pub fn tilt_from_accel(mean_accel: &Vec3) -> Quat {
    let a = mean_accel.normalize();
    let z = Vec3::z();
    let axis = a.cross(&z);
    let angle = a.dot(&z).clamp(-1.0, 1.0).acos();
    if axis.norm() < 1e-12 {
        return Quat::identity();
    }
    Quat::from_rotation_vector(&(axis.normalize() * angle))
}

/// Least-squares position from ranges to known anchors, ignoring antenna offsets.
pub fn multilaterate(ranges: &[(Vec3, f64)]) -> Option<Vec3> {
    if ranges.len() < 3 {
        return None;
    }
    let mut p = ranges.iter().map(|(a, _)| a).sum::<Vec3>() / ranges.len() as f64;
    for _ in 0..30 {
        let mut h = Matrix3::zeros();
        let mut g = Vec3::zeros();
        for (a, d) in ranges {
            let n = p - a;
            let norm = n.norm();
            if norm < 1e-9 {
                continue;
            }
            let u = n / norm;
            h += u * u.transpose();
            g += u * (norm - d);
        }
        let step = (h + Matrix3::identity() * 1e-9).lu().solve(&(-g))?;
        p += step;
        if step.norm() < 1e-10 {
            break;
        }
    }
    p.iter().all(|v| v.is_finite()).then_some(p)
}

#[derive(Debug, Default)]
struct OslBuffer {
    poses: VecDeque<OslPose>,
    /// Smallest positive spacing seen, taken as the nominal period.
    period: Option<f64>,
}

impl OslBuffer {
    fn pose_at(&self, t: f64, stale_factor: f64) -> Option<OslPose> {
        let i = self.poses.partition_point(|p| p.stamp <= t);
        let a = self.poses.get(i.checked_sub(1)?)?;
        if a.stamp == t {
            return Some(*a);
        }
        let b = self.poses.get(i)?;
        let limit = stale_factor * self.period?;
        (b.stamp - a.stamp <= limit).then(|| interpolate_pose(a, b, t))
    }
}

fn insert_sorted<T>(buf: &mut VecDeque<T>, item: T, stamp: impl Fn(&T) -> f64) {
    let t = stamp(&item);
    let i = buf.partition_point(|x| stamp(x) <= t);
    buf.insert(i, item);
}

/// The sliding-window estimator fed one measurement at a time.
#[derive(Debug)]
pub struct Estimator {
    config: EstimatorConfig,
    anchors: AnchorMap,
    antennas: BTreeMap<(u32, String), Vec3>,
    imu: Vec<ImuSample>,
    osl: BTreeMap<String, OslBuffer>,
    uwb: VecDeque<UwbRecord>,
    last_link: HashMap<(u32, String, u32), (f64, f64)>,
    t0_ns: Option<i64>,
    step_ns: i64,
    init_start: usize,
    window: Option<SlidingWindow>,
    newest_index: usize,
    finalized: Vec<StampedState>,
    steps: Vec<StepReport>,
    init_reports: Vec<InitReport>,
    gate_log: Vec<GateDecision>,
    rejections: BTreeMap<Rejection, usize>,
    solves_since_nudge: usize,
}

impl Estimator {
    /// An empty `anchors` map runs without ranging.
    pub fn new(config: EstimatorConfig, anchors: AnchorMap) -> Result<Self> {
        config.validate()?;
        Ok(Estimator {
            antennas: config.antenna_map(),
            step_ns: (config.step_length * 1e9).round() as i64,
            config,
            anchors,
            imu: Vec::new(),
            osl: BTreeMap::new(),
            uwb: VecDeque::new(),
            last_link: HashMap::new(),
            t0_ns: None,
            init_start: 0,
            window: None,
            newest_index: 0,
            finalized: Vec::new(),
            steps: Vec::new(),
            init_reports: Vec::new(),
            gate_log: Vec::new(),
            rejections: BTreeMap::new(),
            solves_since_nudge: 0,
        })
    }

    pub fn config(&self) -> &EstimatorConfig {
        &self.config
    }

    pub fn is_initialized(&self) -> bool {
        self.window.is_some()
    }

    pub fn window(&self) -> Option<&SlidingWindow> {
        self.window.as_ref()
    }

    pub fn steps(&self) -> &[StepReport] {
        &self.steps
    }

    pub fn init_reports(&self) -> &[InitReport] {
        &self.init_reports
    }

    pub fn gate_log(&self) -> &[GateDecision] {
        &self.gate_log
    }

    pub fn rejections(&self) -> &BTreeMap<Rejection, usize> {
        &self.rejections
    }

    /// States that left the window followed by the current window.
    pub fn estimate(&self) -> Vec<StampedState> {
        let mut out = self.finalized.clone();
        if let Some(w) = &self.window {
            out.extend(w.stamps.iter().zip(&w.states).map(|(t, s)| StampedState { stamp: *t, state: *s }));
        }
        out
    }

    fn step_stamp(&self, k: usize) -> f64 {
        (self.t0_ns.unwrap_or(0) + k as i64 * self.step_ns) as f64 / 1e9
    }

    fn processed_until(&self) -> f64 {
        self.window.as_ref().and_then(|w| w.stamps.last().copied()).unwrap_or(f64::NEG_INFINITY)
    }

    fn reject(&mut self, why: Rejection) -> Admission {
        *self.rejections.entry(why).or_default() += 1;
        Admission::Rejected(why)
    }

    /// Validates a measurement and buffers it.
    pub fn admit(&mut self, m: Measurement) -> Admission {
        let t = m.stamp();
        if !t.is_finite() {
            return self.reject(Rejection::NonFinite);
        }
        let tol = self.config.reorder_tolerance;
        match m {
            Measurement::Imu(s) => {
                if !(s.gyro.iter().chain(s.accel.iter()).all(|v| v.is_finite())) {
                    return self.reject(Rejection::NonFinite);
                }
                let latest = self.imu.last().map_or(f64::NEG_INFINITY, |s| s.stamp);
                if t <= self.processed_until() || t < latest - tol || self.imu.iter().rev().any(|x| x.stamp == t) {
                    return self.reject(Rejection::Stale);
                }
                if self.t0_ns.is_none() {
                    self.t0_ns = Some((t * 1e9).round() as i64);
                }
                let i = self.imu.partition_point(|x| x.stamp <= t);
                self.imu.insert(i, s);
            }
            Measurement::Osl { stream, pose } => {
                let buf = self.osl.entry(stream).or_default();
                let latest = buf.poses.back().map_or(f64::NEG_INFINITY, |p| p.stamp);
                if t < latest - tol || buf.poses.iter().any(|p| p.stamp == t) {
                    return self.reject(Rejection::Stale);
                }
                if !(pose.p.iter().all(|v| v.is_finite()) && pose.q.norm().is_finite()) {
                    return self.reject(Rejection::NonFinite);
                }
                insert_sorted(&mut buf.poses, pose, |p| p.stamp);
                let i = buf.poses.iter().position(|p| p.stamp == t).unwrap_or(0);
                for j in [i.checked_sub(1), Some(i)].into_iter().flatten() {
                    if let (Some(a), Some(b)) = (buf.poses.get(j), buf.poses.get(j + 1)) {
                        let gap = b.stamp - a.stamp;
                        if gap > 1e-6 {
                            buf.period = Some(buf.period.map_or(gap, |p| p.min(gap)));
                        }
                    }
                }
            }
            Measurement::Uwb(r) => {
                if !r.range.is_finite() {
                    return self.reject(Rejection::NonFinite);
                }
                if !r.snr_ok {
                    return self.reject(Rejection::Snr);
                }
                if !r.edge_ok {
                    return self.reject(Rejection::Edge);
                }
                let latest = self.uwb.back().map_or(f64::NEG_INFINITY, |r| r.stamp);
                if t <= self.processed_until() || t < latest - tol {
                    return self.reject(Rejection::Stale);
                }
                if !self.anchors.contains_key(&r.anchor_id) {
                    return self.reject(Rejection::UnknownAnchor);
                }
                if !self.antennas.contains_key(&(r.node_id, r.antenna_id.clone())) {
                    return self.reject(Rejection::UnknownAntenna);
                }
                let link = (r.node_id, r.antenna_id.clone(), r.anchor_id);
                if let Some((t_prev, d_prev)) = self.last_link.get(&link) {
                    let dt = (t - t_prev).abs();
                    if dt > 0.0 && (r.range - d_prev).abs() / dt > self.config.rate_of_change_max {
                        return self.reject(Rejection::Rate);
                    }
                }
                self.last_link.insert(link, (t, r.range));
                insert_sorted(&mut self.uwb, r, |x| x.stamp);
            }
        }
        Admission::Accepted
    }

    /// Steps whose end stamp the IMU buffer already covers, less the reorder
    /// tolerance unless `flush`.
    fn ready_steps(&self, flush: bool) -> usize {
        let Some(latest) = self.imu.last().map(|s| s.stamp) else {
            return 0;
        };
        let horizon = if flush { latest } else { latest - self.config.reorder_tolerance };
        let mut n = 0;
        while self.step_stamp(self.newest_index + n + 1) <= horizon {
            n += 1;
        }
        n
    }

    /// Runs initialization and every step the buffered data allows.
    pub fn process(&mut self) -> Result<()> {
        self.process_inner(false)
    }

    /// Processes everything the buffers cover, ignoring the reorder tolerance.
    pub fn finish(&mut self) -> Result<()> {
        self.process_inner(true)
    }

    fn process_inner(&mut self, flush: bool) -> Result<()> {
        if self.window.is_none() && !self.try_initialize(flush)? {
            return Ok(());
        }
        loop {
            let ready = self.ready_steps(flush);
            if ready == 0 {
                return Ok(());
            }
            self.step(ready > self.config.skip_backlog_threshold)?;
        }
    }

    fn uwb_observation(&self, r: &UwbRecord, tk: f64, tk1: f64) -> Option<UwbObservation> {
        Some(UwbObservation {
            range: r.range,
            anchor: *self.anchors.get(&r.anchor_id)?,
            antenna: *self.antennas.get(&(r.node_id, r.antenna_id.clone()))?,
            dt: r.stamp - tk,
            step: tk1 - tk,
            sigma: self.config.uwb_sigma,
        })
    }

    fn osl_displacements(&self, tk: f64, tk1: f64) -> Vec<Option<OslDisplacement>> {
        let sigma = self.config.osl_sigma();
        self.osl
            .values()
            .map(|buf| {
                let a = buf.pose_at(tk, self.config.osl_stale_factor)?;
                let b = buf.pose_at(tk1, self.config.osl_stale_factor)?;
                Some(OslDisplacement::between(&a.q, &a.p, &b.q, &b.p, tk1 - tk, sigma))
            })
            .collect()
    }

    fn segment(&self, ta: f64, tb: f64) -> Result<Vec<ImuSample>> {
        imu_segment(&self.imu, ta, tb)
            .ok_or_else(|| Error::InvalidWindow(format!("IMU data does not cover [{ta}, {tb}]")))
    }

    /// Mahalanobis distance of an odometry displacement from the IMU prediction.
    fn osl_disagreement(&self, xk: &NavState, pred: &NavState, pre: &Preintegration, d: &OslDisplacement) -> f64 {
        let r = osl_residual(xk, pred, d);
        let mut cov: Matrix6<f64> = d.covariance();
        let pc = &pre.covariance;
        let rot: Matrix3<f64> = pc.fixed_view::<3, 3>(6, 6).into_owned();
        let pos: Matrix3<f64> = pc.fixed_view::<3, 3>(0, 0).into_owned();
        let mut extra = Matrix6::zeros();
        extra.fixed_view_mut::<3, 3>(0, 0).copy_from(&rot);
        extra.fixed_view_mut::<3, 3>(3, 3).copy_from(&pos);
        cov += extra;
        match cov.cholesky() {
            Some(c) => r.dot(&c.solve(&r)).sqrt(),
            None => f64::INFINITY,
        }
    }

    fn step(&mut self, skip: bool) -> Result<()> {
        let window = self.window.as_ref().expect("initialized");
        let newest = window.newest().expect("window is never empty");
        let (tk, xk) = (newest.stamp, newest.state);
        let tk1 = self.step_stamp(self.newest_index + 1);
        let pre = Preintegration::from_segment(&self.segment(tk, tk1)?, xk.bias(), self.config.imu)?;
        let pred = pre.predict(&xk);

        let mut factors = vec![Factor::Imu(Box::new(pre.clone()))];
        let (mut osl_used, mut osl_ignored) = (0, 0);
        for d in self.osl_displacements(tk, tk1) {
            match d {
                Some(d)
                    if !self.config.osl_cross_check
                        || self.osl_disagreement(&xk, &pred, &pre, &d) <= self.config.outlier_gate_sigma =>
                {
                    factors.push(Factor::Osl(d));
                    osl_used += 1;
                }
                _ => osl_ignored += 1,
            }
        }

        let (mut uwb_used, mut uwb_gated) = (0, 0);
        let gate = self.config.outlier_gate_sigma * self.config.uwb_sigma;
        let records: Vec<UwbRecord> = self.uwb.iter().filter(|r| r.stamp > tk && r.stamp <= tk1).cloned().collect();
        for r in records {
            let Some(obs) = self.uwb_observation(&r, tk, tk1) else {
                continue;
            };
            let innovation = match uwb_residual(&xk, &pred, &obs) {
                Ok(v) => -v,
                Err(_) => f64::INFINITY,
            };
            let kept = innovation.abs() <= gate;
            self.gate_log.push(GateDecision {
                stamp: r.stamp,
                node_id: r.node_id,
                antenna_id: r.antenna_id.clone(),
                anchor_id: r.anchor_id,
                innovation,
                kept,
            });
            if kept {
                factors.push(Factor::Uwb(obs));
                uwb_used += 1;
            } else {
                uwb_gated += 1;
            }
        }

        let window = self.window.as_mut().expect("initialized");
        let dropped = window.slide(tk1, Interval::new(factors), self.config.solver.window_size)?;
        self.finalized.extend(dropped);
        self.newest_index += 1;
        self.prune(tk1);

        let mut report = StepReport {
            stamp: tk1,
            skipped: skip,
            uwb_used,
            uwb_gated,
            osl_used,
            osl_ignored,
            nudged: false,
            solve: None,
        };
        if !skip {
            let window = self.window.as_mut().expect("initialized");
            let mut solved = solve(window, &self.config.solver)?;
            self.solves_since_nudge += 1;
            let period = self.config.nudge_period;
            if period > 0 && self.solves_since_nudge >= period && window.count(FactorKind::Uwb) > 0 {
                self.solves_since_nudge = 0;
                let explored = yaw_nudge_explore(window, &solved, &self.config.solver);
                report.nudged = explored.final_cost < solved.final_cost;
                solved = explored;
            }
            report.solve = Some(solved);
        }
        self.steps.push(report);
        Ok(())
    }

    /// Drops buffered data no longer needed for steps starting at `t`.
    fn prune(&mut self, t: f64) {
        let keep_from = |n_le: usize| n_le.saturating_sub(1);
        let n = keep_from(self.imu.partition_point(|s| s.stamp <= t));
        self.imu.drain(..n);
        for buf in self.osl.values_mut() {
            let n = keep_from(buf.poses.partition_point(|p| p.stamp <= t));
            buf.poses.drain(..n);
        }
        let n = self.uwb.partition_point(|r| r.stamp <= t);
        self.uwb.drain(..n);
    }

    /// Builds an unsolved window over steps `s..=e` from the buffers.
    fn build_init_window(&self, s: usize, e: usize) -> Result<SlidingWindow> {
        let ts = self.step_stamp(s);
        let te = self.step_stamp(e);
        let span = self.segment(ts, te)?;
        let mean_accel = span.iter().map(|x| x.accel).sum::<Vec3>() / span.len() as f64;
        let ranges: Vec<(Vec3, f64)> = self
            .uwb
            .iter()
            .filter(|r| r.stamp > ts && r.stamp <= te)
            .filter_map(|r| Some((*self.anchors.get(&r.anchor_id)?, r.range)))
            .collect();
        let p0 = multilaterate(&ranges).unwrap_or_default();
        let mut window = SlidingWindow::new(ts, NavState::new(tilt_from_accel(&mean_accel), p0, Vec3::zeros()));
        let [sigma_gyro, sigma_accel] = self.config.init_bias_sigma;
        window.bias_prior = Some(BiasPrior { bias: ImuBias::default(), sigma_gyro, sigma_accel });
        for k in s..e {
            let (tk, tk1) = (self.step_stamp(k), self.step_stamp(k + 1));
            let pre = Preintegration::from_segment(&self.segment(tk, tk1)?, ImuBias::default(), self.config.imu)?;
            let mut factors = vec![Factor::Imu(Box::new(pre))];
            factors.extend(self.osl_displacements(tk, tk1).into_iter().flatten().map(Factor::Osl));
            for r in self.uwb.iter().filter(|r| r.stamp > tk && r.stamp <= tk1) {
                factors.extend(self.uwb_observation(r, tk, tk1).map(Factor::Uwb));
            }
            window.push(tk1, Interval::new(factors))?;
        }
        Ok(window)
    }

    /// Removes ranges beyond the innovation gate from a solved startup window
    /// whose first state sits on step `s`.
    fn trim_init_ranges(&self, window: &mut SlidingWindow, s: usize) -> Vec<GateDecision> {
        let gate = self.config.outlier_gate_sigma * self.config.uwb_sigma;
        let mut decisions = Vec::new();
        for k in 0..window.intervals.len() {
            let (tk, tk1) = (self.step_stamp(s + k), self.step_stamp(s + k + 1));
            let mut records = self
                .uwb
                .iter()
                .filter(|r| r.stamp > tk && r.stamp <= tk1)
                .filter(|r| self.uwb_observation(r, tk, tk1).is_some());
            let (xk, xk1) = (window.states[k], window.states[k + 1]);
            window.intervals[k].factors.retain(|f| {
                let Factor::Uwb(obs) = f else {
                    return true;
                };
                let r = records.next().expect("one record per range factor");
                let innovation = uwb_residual(&xk, &xk1, obs).map_or(f64::INFINITY, |v| -v);
                let kept = innovation.abs() <= gate;
                decisions.push(GateDecision {
                    stamp: r.stamp,
                    node_id: r.node_id,
                    antenna_id: r.antenna_id.clone(),
                    anchor_id: r.anchor_id,
                    innovation,
                    kept,
                });
                kept
            });
        }
        decisions
    }

    /// Attempts initialization on the earliest qualifying span. Returns
    /// whether the estimator is now initialized.
    fn try_initialize(&mut self, flush: bool) -> Result<bool> {
        if self.t0_ns.is_none() {
            return Ok(false);
        }
        let s = self.init_start;
        let ranging = !self.anchors.is_empty();
        let ts = self.step_stamp(s);
        let saved = self.newest_index;
        self.newest_index = s;
        let ready = self.ready_steps(flush);
        self.newest_index = saved;
        let mut e = None;
        for n in 1..=ready {
            let te = self.step_stamp(s + n);
            let ranges = self.uwb.iter().filter(|r| r.stamp > ts && r.stamp <= te).count();
            if te - ts >= self.config.init_min_imu_duration - 1e-9 && (!ranging || ranges >= self.config.init_min_ranges) {
                e = Some((s + n, ranges));
                break;
            }
        }
        let Some((e, n_ranges)) = e else {
            return Ok(false);
        };
        let window = self.build_init_window(s, e)?;
        let (mut window, yaw, cost_per_range, decisions) = if ranging {
            let grid = yaw_grid_initialize(&window, self.config.init_yaw_grid, &self.config.solver)?;
            let mut w = grid.window;
            let decisions = self.trim_init_ranges(&mut w, s);
            let report = if decisions.iter().any(|d| !d.kept) { solve(&mut w, &self.config.solver)? } else { grid.report };
            let uwb_cost = report.cost_by_kind.get(&FactorKind::Uwb).copied().unwrap_or(0.0);
            let n = w.count(FactorKind::Uwb).max(1);
            (w, grid.yaw, uwb_cost / n as f64, decisions)
        } else {
            let mut w = window;
            solve(&mut w, &self.config.solver)?;
            (w, 0.0, 0.0, Vec::new())
        };
        let kept = decisions.iter().filter(|d| d.kept).count();
        let inlier_fraction = if decisions.is_empty() { 1.0 } else { kept as f64 / decisions.len() as f64 };
        let accepted = cost_per_range.is_finite()
            && cost_per_range < self.config.init_cost_threshold
            && inlier_fraction >= self.config.init_min_inlier_fraction;
        self.init_reports.push(InitReport {
            stamp: self.step_stamp(e),
            ranges: n_ranges,
            yaw,
            cost_per_range,
            inlier_fraction,
            accepted,
        });
        if accepted {
            self.gate_log.extend(decisions);
        }
        if !accepted {
            self.init_start = e;
            self.prune(self.step_stamp(e));
            return Ok(false);
        }
        while window.len() > self.config.solver.window_size + 1 {
            self.finalized.extend(window.pop_front());
        }
        self.newest_index = e;
        self.window = Some(window);
        self.prune(self.step_stamp(e));
        Ok(true)
    }

    /// Dead-reckoned states at every buffered IMU stamp after the newest
    /// window state, preceded by that state itself.
    pub fn high_rate(&self) -> Vec<StampedState> {
        let Some(newest) = self.window.as_ref().and_then(|w| w.newest()) else {
            return Vec::new();
        };
        let mut out = vec![newest];
        let Some(last) = self.imu.last() else {
            return out;
        };
        let Some(segment) = imu_segment(&self.imu, newest.stamp, last.stamp) else {
            return out;
        };
        let mut pre = Preintegration::new(newest.state.bias(), self.config.imu);
        for pair in segment.windows(2) {
            if pre.integrate_step(&pair[0], pair[1].stamp).is_err() {
                break;
            }
            out.push(StampedState { stamp: pair[1].stamp, state: pre.predict(&newest.state) });
        }
        out
    }
}

/// Everything a replay produces.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub estimate: Vec<StampedState>,
    pub steps: Vec<StepReport>,
    pub init: Vec<InitReport>,
    pub gate_log: Vec<GateDecision>,
    pub rejections: BTreeMap<Rejection, usize>,
}

/// All records of a dataset merged in stamp order. On equal stamps odometry
/// comes first, then ranges, then IMU.
pub fn merged_measurements(data: &Dataset) -> Vec<Measurement> {
    let mut events: Vec<(f64, u8, Measurement)> = Vec::with_capacity(data.imu.len() + data.uwb.len());
    for (name, poses) in &data.osl {
        events.extend(poses.iter().map(|p| (p.stamp, 0, Measurement::Osl { stream: name.clone(), pose: *p })));
    }
    events.extend(data.uwb.iter().map(|r| (r.stamp, 1, Measurement::Uwb(r.clone()))));
    events.extend(data.imu.iter().map(|s| (s.stamp, 2, Measurement::Imu(*s))));
    events.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    events.into_iter().map(|e| e.2).collect()
}

/// Replays a recorded dataset through a fresh estimator.
pub fn run_dataset(data: &Dataset, config: &EstimatorConfig) -> Result<RunOutput> {
    let mut est = Estimator::new(config.clone(), data.anchors.clone())?;
    for m in merged_measurements(data) {
        let imu = matches!(m, Measurement::Imu(_));
        est.admit(m);
        if imu {
            est.process()?;
        }
    }
    est.finish()?;
    Ok(RunOutput {
        estimate: est.estimate(),
        steps: est.steps,
        init: est.init_reports,
        gate_log: est.gate_log,
        rejections: est.rejections,
    })
}
