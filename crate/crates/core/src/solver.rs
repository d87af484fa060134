//! Levenberg-Marquardt over the sliding window.
//!
//! The decision variable is the stacked tangent of all window states, 15 per
//! state in the order `(δθ, δp, δv, δb^ω, δb^a)`. The normal equations are
//! small enough (at most a few hundred columns) to solve densely.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::factors::{Factor, FactorKind};
use crate::manifold::{brc3, yaw_quat, Mat3, Quat, Vec3};
use crate::preintegration::{ImuBias, Preintegration};
use crate::state::{NavState, StampedState, StateVector, STATE_DIM};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverConfig {
    pub max_iterations: usize,
    /// Stop when `‖Jᵀr‖∞` falls below this.
    pub gradient_tol: f64,
    /// Stop when `‖δ‖` falls below this times `1 + ‖x‖`.
    pub step_tol: f64,
    /// Stop when an accepted step lowers the cost by less than this fraction.
    pub cost_tol: f64,
    pub lm_lambda_init: f64,
    pub lm_lambda_up: f64,
    pub lm_lambda_down: f64,
    /// Number of intervals `M`; the window holds `M + 1` states.
    pub window_size: usize,
    /// Use the first-order quaternion update instead of the exact exponential.
    pub approximate_retraction: bool,
    /// Anchor the oldest state with a weak prior when the window has no ranges.
    pub auto_prior: bool,
    pub prior_sigma_pos: f64,
    pub prior_sigma_rot: f64,
    /// Count near-null directions of `JᵀJ` after solving.
    pub analyze_gauge: bool,
    /// Relative eigenvalue threshold for a direction to count as null.
    pub gauge_rel_tol: f64,
    /// Yaw offsets tried when exploring for a lower minimum, radians.
    pub nudge_offsets: Vec<f64>,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            max_iterations: 20,
            gradient_tol: 1e-10,
            step_tol: 1e-10,
            cost_tol: 1e-10,
            lm_lambda_init: 1e-4,
            lm_lambda_up: 10.0,
            lm_lambda_down: 10.0,
            window_size: 10,
            approximate_retraction: false,
            auto_prior: true,
            prior_sigma_pos: 10.0,
            prior_sigma_rot: 1.0,
            analyze_gauge: false,
            gauge_rel_tol: 1e-10,
            nudge_offsets: vec![-PI / 6.0, PI / 6.0],
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            self.gradient_tol,
            self.step_tol,
            self.cost_tol,
            self.lm_lambda_init,
            self.prior_sigma_pos,
            self.prior_sigma_rot,
        ];
        if positive.iter().any(|v| !(*v > 0.0)) {
            return Err(Error::Config("solver tolerances and sigmas must be positive".into()));
        }
        if !(self.lm_lambda_up > 1.0) || !(self.lm_lambda_down > 1.0) {
            return Err(Error::Config("LM lambda factors must exceed 1".into()));
        }
        if self.window_size < 1 || self.max_iterations < 1 {
            return Err(Error::Config("window_size and max_iterations must be at least 1".into()));
        }
        Ok(())
    }
}

/// Factors between node `k` and `k + 1`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Interval {
    pub factors: Vec<Factor>,
}

impl Interval {
    pub fn new(factors: Vec<Factor>) -> Self {
        Interval { factors }
    }

    pub fn imu(&self) -> Option<&Preintegration> {
        self.factors.iter().find_map(|f| match f {
            Factor::Imu(p) => Some(p.as_ref()),
            _ => None,
        })
    }

    pub fn count(&self, kind: FactorKind) -> usize {
        self.factors.iter().filter(|f| f.kind() == kind).count()
    }
}

/// A weak pose prior on one state, `(δθ, δp)` with diagonal sigmas.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StatePrior {
    pub q: Quat,
    pub p: Vec3,
    pub sigma_rot: f64,
    pub sigma_pos: f64,
}

impl StatePrior {
    fn whitened(&self, x: &NavState) -> (DVector<f64>, DMatrix<f64>) {
        let err = self.q.inverse() * x.q;
        let sign = if err.w < 0.0 { -1.0 } else { 1.0 };
        let mut r = DVector::zeros(6);
        let mut j = DMatrix::zeros(6, STATE_DIM);
        r.fixed_rows_mut::<3>(0).copy_from(&(err.v * (2.0 * sign / self.sigma_rot)));
        r.fixed_rows_mut::<3>(3).copy_from(&((x.p - self.p) / self.sigma_pos));
        j.fixed_view_mut::<3, 3>(0, 0)
            .copy_from(&(brc3(&err.left_matrix()) * (sign / self.sigma_rot)));
        j.fixed_view_mut::<3, 3>(3, 3)
            .copy_from(&(Mat3::identity() / self.sigma_pos));
        (r, j)
    }
}

/// A prior on the IMU biases of one state.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BiasPrior {
    pub bias: ImuBias,
    pub sigma_gyro: f64,
    pub sigma_accel: f64,
}

impl BiasPrior {
    fn whitened(&self, x: &NavState) -> (DVector<f64>, DMatrix<f64>) {
        let mut r = DVector::zeros(6);
        let mut j = DMatrix::zeros(6, STATE_DIM);
        r.fixed_rows_mut::<3>(0).copy_from(&((x.bg - self.bias.gyro) / self.sigma_gyro));
        r.fixed_rows_mut::<3>(3).copy_from(&((x.ba - self.bias.accel) / self.sigma_accel));
        j.fixed_view_mut::<3, 3>(0, 9).copy_from(&(Mat3::identity() / self.sigma_gyro));
        j.fixed_view_mut::<3, 3>(3, 12).copy_from(&(Mat3::identity() / self.sigma_accel));
        (r, j)
    }
}

/// The `M + 1` most recent states and the factors binding consecutive pairs.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SlidingWindow {
    pub stamps: Vec<f64>,
    pub states: Vec<NavState>,
    /// `intervals[k]` binds `states[k]` and `states[k + 1]`.
    pub intervals: Vec<Interval>,
    /// Bias prior on the oldest state, discarded when that state leaves.
    pub bias_prior: Option<BiasPrior>,
}

impl SlidingWindow {
    pub fn new(stamp: f64, state: NavState) -> Self {
        SlidingWindow {
            stamps: vec![stamp],
            states: vec![state],
            intervals: Vec::new(),
            bias_prior: None,
        }
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn newest(&self) -> Option<StampedState> {
        Some(StampedState {
            stamp: *self.stamps.last()?,
            state: *self.states.last()?,
        })
    }

    pub fn oldest(&self) -> Option<StampedState> {
        Some(StampedState {
            stamp: *self.stamps.first()?,
            state: *self.states.first()?,
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.states.is_empty() || self.stamps.len() != self.states.len() {
            return Err(Error::InvalidWindow("stamps and states differ in length".into()));
        }
        if self.intervals.len() + 1 != self.states.len() {
            return Err(Error::InvalidWindow("need one interval per consecutive pair".into()));
        }
        for pair in self.stamps.windows(2) {
            if !(pair[1] > pair[0]) {
                return Err(Error::NonIncreasingStamp {
                    prev: pair[0],
                    next: pair[1],
                });
            }
        }
        if self.states.iter().any(|s| !s.is_finite()) {
            return Err(Error::InvalidWindow("non-finite state".into()));
        }
        Ok(())
    }

    pub fn count(&self, kind: FactorKind) -> usize {
        self.intervals.iter().map(|i| i.count(kind)).sum()
    }

    /// Appends a state at `stamp` bound by `interval`. The new state is
    /// dead-reckoned from the newest one through the interval's IMU factor,
    /// or copied when there is none.
    pub fn push(&mut self, stamp: f64, interval: Interval) -> Result<()> {
        let last = self.newest().ok_or(Error::InvalidWindow("empty window".into()))?;
        if !(stamp > last.stamp) {
            return Err(Error::NonIncreasingStamp {
                prev: last.stamp,
                next: stamp,
            });
        }
        let next = match interval.imu() {
            Some(pre) => pre.predict(&last.state),
            None => last.state,
        };
        self.stamps.push(stamp);
        self.states.push(next);
        self.intervals.push(interval);
        Ok(())
    }

    /// Drops the oldest state and its interval.
    pub fn pop_front(&mut self) -> Option<StampedState> {
        if self.states.len() < 2 {
            return None;
        }
        let dropped = self.oldest();
        self.stamps.remove(0);
        self.states.remove(0);
        self.intervals.remove(0);
        self.bias_prior = None;
        dropped
    }

    /// Appends a state and drops the oldest ones beyond `window_size + 1`.
    /// Returns the dropped states, oldest first.
    pub fn slide(&mut self, stamp: f64, interval: Interval, window_size: usize) -> Result<Vec<StampedState>> {
        self.push(stamp, interval)?;
        let mut dropped = Vec::new();
        while self.states.len() > window_size + 1 {
            dropped.extend(self.pop_front());
        }
        Ok(dropped)
    }

    /// Re-integrates IMU factors whose linearization bias drifted too far from
    /// the current estimate. Returns how many were re-integrated.
    pub fn repropagate_stale_imu(&mut self) -> usize {
        let mut count = 0;
        for (k, interval) in self.intervals.iter_mut().enumerate() {
            let bias = self.states[k].bias();
            for f in interval.factors.iter_mut() {
                if let Factor::Imu(pre) = f {
                    if pre.needs_repropagation(&bias) {
                        **pre = pre.repropagate(bias);
                        count += 1;
                    }
                }
            }
        }
        count
    }

    /// Rotates every state about the world z axis through the oldest position.
    pub fn rotate_yaw(&self, yaw: f64) -> SlidingWindow {
        let rz = yaw_quat(yaw);
        let pivot = self.states.first().map(|s| s.p).unwrap_or_default();
        let mut out = self.clone();
        for s in out.states.iter_mut() {
            s.q = (rz * s.q).normalized();
            s.p = pivot + rz.rotate(&(s.p - pivot));
            s.v = rz.rotate(&s.v);
        }
        out
    }

    fn retract(&self, delta: &DVector<f64>, approximate: bool) -> Vec<NavState> {
        self.states
            .iter()
            .enumerate()
            .map(|(i, s)| {
                let d = StateVector::from_column_slice(&delta.as_slice()[i * STATE_DIM..(i + 1) * STATE_DIM]);
                s.retract_with(&d, approximate)
            })
            .collect()
    }
}

/// Outcome of one window solve.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolveReport {
    pub initial_cost: f64,
    pub final_cost: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Final whitened cost per factor family.
    pub cost_by_kind: BTreeMap<FactorKind, f64>,
    pub residual_dim: usize,
    pub factor_count: usize,
    pub prior_active: bool,
    pub repropagated: usize,
    /// Near-null directions of `JᵀJ` at the solution, when requested.
    pub null_dims: Option<usize>,
}

/// The assembled problem at one linearization point.
#[derive(Debug, Clone)]
pub struct Problem {
    /// Whitened residual blocks: (interval index, kind, whitened residual, whitened 30-wide Jacobian).
    pub blocks: Vec<(usize, FactorKind, DVector<f64>, DMatrix<f64>)>,
    /// Whitened priors on the oldest state: (residual, 15-wide Jacobian).
    pub priors: Vec<(DVector<f64>, DMatrix<f64>)>,
    pub dim: usize,
}

impl Problem {
    pub fn residual_dim(&self) -> usize {
        self.blocks.iter().map(|b| b.2.len()).sum::<usize>() + self.priors.iter().map(|p| p.0.len()).sum::<usize>()
    }

    pub fn cost(&self) -> f64 {
        self.blocks.iter().map(|b| b.2.norm_squared()).sum::<f64>()
            + self.priors.iter().map(|p| p.0.norm_squared()).sum::<f64>()
    }

    pub fn cost_by_kind(&self) -> BTreeMap<FactorKind, f64> {
        let mut out = BTreeMap::new();
        for (_, kind, r, _) in &self.blocks {
            *out.entry(*kind).or_insert(0.0) += r.norm_squared();
        }
        for (r, _) in &self.priors {
            *out.entry(FactorKind::Prior).or_insert(0.0) += r.norm_squared();
        }
        out
    }

    /// `(JᵀJ, Jᵀr)`.
    pub fn normal_equations(&self) -> (DMatrix<f64>, DVector<f64>) {
        let mut h = DMatrix::zeros(self.dim, self.dim);
        let mut g = DVector::zeros(self.dim);
        let w = 2 * STATE_DIM;
        for (k, _, r, j) in &self.blocks {
            let off = k * STATE_DIM;
            let jt = j.transpose();
            let mut hv = h.view_mut((off, off), (w, w));
            hv += &jt * j;
            let mut gv = g.rows_mut(off, w);
            gv += &jt * r;
        }
        for (r, j) in &self.priors {
            let jt = j.transpose();
            let mut hv = h.view_mut((0, 0), (STATE_DIM, STATE_DIM));
            hv += &jt * j;
            let mut gv = g.rows_mut(0, STATE_DIM);
            gv += &jt * r;
        }
        (h, g)
    }

    /// Number of eigenvalues of the Jacobi-scaled `JᵀJ` below `rel` times
    /// the largest. The scaling removes the unit disparity between blocks
    /// (bias random-walk information dwarfs range information) without
    /// changing which directions are unconstrained.
    pub fn null_dims(&self, rel: f64) -> usize {
        let (h, _) = self.normal_equations();
        let scale = h.diagonal().map(|d| if d > 0.0 { 1.0 / d.sqrt() } else { 0.0 });
        let scaled = DMatrix::from_fn(self.dim, self.dim, |i, j| h[(i, j)] * scale[i] * scale[j]);
        let eig = SymmetricEigen::new(scaled).eigenvalues;
        let max = eig.max();
        eig.iter().filter(|e| **e < rel * max).count()
    }
}

/// Linearizes every factor of the window; factors unusable at this point are skipped.
pub fn build_problem(window: &SlidingWindow, prior: Option<&StatePrior>) -> Result<Problem> {
    window.validate()?;
    let mut blocks = Vec::new();
    for (k, interval) in window.intervals.iter().enumerate() {
        let (xk, xk1) = (&window.states[k], &window.states[k + 1]);
        for f in &interval.factors {
            if let Some(b) = f.linearize(xk, xk1) {
                blocks.push((k, f.kind(), b.whitened_residual(), b.whitened_jacobian()));
            }
        }
    }
    let x0 = &window.states[0];
    let priors: Vec<_> = prior
        .map(|p| p.whitened(x0))
        .into_iter()
        .chain(window.bias_prior.map(|b| b.whitened(x0)))
        .collect();
    if blocks.is_empty() && priors.is_empty() {
        return Err(Error::EmptyProblem);
    }
    Ok(Problem {
        blocks,
        priors,
        dim: window.len() * STATE_DIM,
    })
}

fn evaluate_cost(window: &SlidingWindow, prior: Option<&StatePrior>) -> f64 {
    let mut cost = 0.0;
    for (k, interval) in window.intervals.iter().enumerate() {
        let (xk, xk1) = (&window.states[k], &window.states[k + 1]);
        for f in &interval.factors {
            if let (Some(r), Some(_)) = (f.residual(xk, xk1), Some(())) {
                let Some(w) = crate::factors::sqrt_information(&f.covariance()) else {
                    continue;
                };
                cost += (w * r).norm_squared();
            }
        }
    }
    if let Some(p) = prior {
        cost += p.whitened(&window.states[0]).0.norm_squared();
    }
    if let Some(b) = &window.bias_prior {
        cost += b.whitened(&window.states[0]).0.norm_squared();
    }
    cost
}

/// The weak prior used when a window carries no ranges.
pub fn default_prior(window: &SlidingWindow, config: &SolverConfig) -> Option<StatePrior> {
    if !config.auto_prior || window.count(FactorKind::Uwb) > 0 {
        return None;
    }
    let s = window.states.first()?;
    Some(StatePrior {
        q: s.q,
        p: s.p,
        sigma_rot: config.prior_sigma_rot,
        sigma_pos: config.prior_sigma_pos,
    })
}

/// Minimizes the window cost in place.
pub fn solve(window: &mut SlidingWindow, config: &SolverConfig) -> Result<SolveReport> {
    config.validate()?;
    let repropagated = window.repropagate_stale_imu();
    let prior = default_prior(window, config);
    let mut problem = build_problem(window, prior.as_ref())?;
    let initial_cost = problem.cost();
    let mut cost = initial_cost;
    let mut lambda = config.lm_lambda_init;
    let mut converged = false;
    let mut iterations = 0;

    'outer: while iterations < config.max_iterations {
        iterations += 1;
        let (h, g) = problem.normal_equations();
        if g.amax() < config.gradient_tol {
            converged = true;
            break;
        }
        loop {
            let mut a = h.clone();
            for i in 0..problem.dim {
                a[(i, i)] += lambda * h[(i, i)].max(1e-12);
            }
            let Some(chol) = a.cholesky() else {
                lambda *= config.lm_lambda_up;
                if lambda > 1e16 {
                    break 'outer;
                }
                continue;
            };
            let delta = -chol.solve(&g);
            let candidate = SlidingWindow {
                states: window.retract(&delta, config.approximate_retraction),
                ..window.clone()
            };
            let new_cost = evaluate_cost(&candidate, prior.as_ref());
            if new_cost.is_finite() && new_cost <= cost {
                let state_norm: f64 = window
                    .states
                    .iter()
                    .map(|s| s.p.norm_squared() + s.v.norm_squared())
                    .sum::<f64>()
                    .sqrt();
                let small_step = delta.norm() < config.step_tol * (1.0 + state_norm);
                let small_gain = cost - new_cost <= config.cost_tol * cost;
                *window = candidate;
                cost = new_cost;
                lambda = (lambda / config.lm_lambda_down).max(1e-12);
                problem = build_problem(window, prior.as_ref())?;
                if small_step || small_gain {
                    converged = true;
                    break 'outer;
                }
                break;
            }
            lambda *= config.lm_lambda_up;
            if lambda > 1e16 {
                // No descent direction left: the point is a local minimum.
                converged = true;
                break 'outer;
            }
        }
    }

    let null_dims = config.analyze_gauge.then(|| problem.null_dims(config.gauge_rel_tol));
    Ok(SolveReport {
        initial_cost,
        final_cost: problem.cost(),
        iterations,
        converged,
        cost_by_kind: problem.cost_by_kind(),
        residual_dim: problem.residual_dim(),
        factor_count: problem.blocks.len(),
        prior_active: prior.is_some(),
        repropagated,
        null_dims,
    })
}

/// Result of a yaw grid search.
#[derive(Debug, Clone)]
pub struct YawGridResult {
    pub window: SlidingWindow,
    pub report: SolveReport,
    pub yaw: f64,
    /// `(seed yaw, final cost)` for every seed that solved.
    pub costs: Vec<(f64, f64)>,
}

/// Solves from `n_grid` evenly spaced yaw seeds over `[0, 2π)` and keeps the
/// lowest final cost, ties going to the smaller yaw.
///
/// `window` should carry the accelerometer-derived roll and pitch with zero yaw.
pub fn yaw_grid_initialize(window: &SlidingWindow, n_grid: usize, config: &SolverConfig) -> Result<YawGridResult> {
    let n = n_grid.max(1);
    let seeds: Vec<f64> = (0..n).map(|j| 2.0 * PI * j as f64 / n as f64).collect();
    yaw_seed_search(window, &seeds, config)
}

/// As [`yaw_grid_initialize`] over explicit seeds.
pub fn yaw_seed_search(window: &SlidingWindow, seeds: &[f64], config: &SolverConfig) -> Result<YawGridResult> {
    let mut best: Option<YawGridResult> = None;
    let mut costs = Vec::new();
    for &yaw in seeds {
        let mut candidate = window.rotate_yaw(yaw);
        let Ok(report) = solve(&mut candidate, config) else {
            continue;
        };
        if !report.final_cost.is_finite() {
            continue;
        }
        costs.push((yaw, report.final_cost));
        let better = match &best {
            None => true,
            Some(b) => {
                report.final_cost < b.report.final_cost
                    || (report.final_cost == b.report.final_cost && yaw < b.yaw)
            }
        };
        if better {
            best = Some(YawGridResult {
                window: candidate,
                report,
                yaw,
                costs: Vec::new(),
            });
        }
    }
    let mut best = best.ok_or(Error::AllSolvesFailed)?;
    best.costs = costs;
    Ok(best)
}

/// Re-solves from yaw-nudged copies of a converged window and keeps whichever
/// reaches the lowest cost. Returns the report of the kept solution.
pub fn yaw_nudge_explore(window: &mut SlidingWindow, current: &SolveReport, config: &SolverConfig) -> SolveReport {
    let mut best = current.clone();
    for &offset in &config.nudge_offsets {
        let mut candidate = window.rotate_yaw(offset);
        if let Ok(report) = solve(&mut candidate, config) {
            if report.final_cost < best.final_cost {
                *window = candidate;
                best = report;
            }
        }
    }
    best
}
