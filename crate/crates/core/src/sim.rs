//! Synthetic flights: analytic ground truth and the IMU, UWB and odometry
//! streams derived from it.
//!
//! Attitude is level (zero roll and pitch) with a configurable yaw profile,
//! so the body rate is `(0, 0, ψ̇)`. All stamps are whole nanoseconds, which
//! makes them round-trip exactly through 9-decimal text.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::anchors::AnchorMap;
use crate::dataset::{Dataset, OslPose, UwbRecord};
use crate::error::{Error, Result};
use crate::manifold::{yaw_quat, Quat, Vec3};
use crate::preintegration::{ImuNoise, ImuSample};
use crate::state::{NavState, StampedState};

/// Converts whole nanoseconds to seconds.
pub fn stamp_from_ns(ns: i64) -> f64 {
    ns as f64 / 1e9
}

fn v3(a: [f64; 3]) -> Vec3 {
    Vec3::new(a[0], a[1], a[2])
}

/// Quintic rest-to-rest blend on `[0, 1]`: value and first two derivatives in `s`.
fn smoothstep5(s: f64) -> (f64, f64, f64) {
    let s = s.clamp(0.0, 1.0);
    let s2 = s * s;
    let s3 = s2 * s;
    (
        s3 * (10.0 - 15.0 * s + 6.0 * s2),
        30.0 * s2 * (1.0 - 2.0 * s + s2),
        60.0 * s * (1.0 - 3.0 * s + 2.0 * s2),
    )
}

/// Ramp envelope for a start from rest: `(e, ė, ë)` at `t`.
fn envelope(t: f64, ramp: f64) -> (f64, f64, f64) {
    if ramp <= 0.0 || t >= ramp {
        return (1.0, 0.0, 0.0);
    }
    let (e, de, dde) = smoothstep5(t / ramp);
    (e, de / ramp, dde / (ramp * ramp))
}

fn wrap_angle(a: f64) -> f64 {
    let w = (a + PI).rem_euclid(2.0 * PI) - PI;
    if w == -PI {
        PI
    } else {
        w
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Path {
    Static {
        position: [f64; 3],
    },
    Circle {
        center: [f64; 3],
        radius: f64,
        /// Angular rate, rad/s.
        rate: f64,
    },
    /// `center + e(t)·A∘sin(ωt + φ)` with `e` the start-up envelope.
    Lissajous {
        center: [f64; 3],
        amplitude: [f64; 3],
        frequency: [f64; 3],
        phase: [f64; 3],
    },
    /// Rest-to-rest quintic segments through the points, `segment_time` each.
    Waypoints {
        points: Vec<[f64; 3]>,
        segment_time: f64,
    },
}

impl Path {
    /// Serpentine lattice of `n[0] × n[1] × n[2]` points spaced `spacing` apart.
    pub fn lattice(origin: [f64; 3], spacing: f64, n: [usize; 3], segment_time: f64) -> Path {
        let mut points = Vec::new();
        for k in 0..n[2] {
            for jj in 0..n[1] {
                let j = if k % 2 == 0 { jj } else { n[1] - 1 - jj };
                for ii in 0..n[0] {
                    let i = if (jj + k) % 2 == 0 { ii } else { n[0] - 1 - ii };
                    points.push([
                        origin[0] + i as f64 * spacing,
                        origin[1] + j as f64 * spacing,
                        origin[2] + k as f64 * spacing,
                    ]);
                }
            }
        }
        Path::Waypoints { points, segment_time }
    }

    /// Serpentine scan over the x-z plane at fixed `y`.
    pub fn vertical_scan(x_range: [f64; 2], z_range: [f64; 2], y: f64, rows: usize, segment_time: f64) -> Path {
        let mut points = Vec::new();
        for r in 0..rows.max(2) {
            let z = z_range[0] + (z_range[1] - z_range[0]) * r as f64 / (rows.max(2) - 1) as f64;
            let (a, b) = if r % 2 == 0 { (x_range[0], x_range[1]) } else { (x_range[1], x_range[0]) };
            points.push([a, y, z]);
            points.push([b, y, z]);
        }
        Path::Waypoints { points, segment_time }
    }

    /// Position, velocity and acceleration at `t`.
    fn eval(&self, t: f64, ramp: f64) -> (Vec3, Vec3, Vec3) {
        match self {
            Path::Static { position } => (v3(*position), Vec3::zeros(), Vec3::zeros()),
            Path::Circle { center, radius, rate } => {
                let (s, c) = (rate * t).sin_cos();
                (
                    v3(*center) + Vec3::new(c, s, 0.0) * *radius,
                    Vec3::new(-s, c, 0.0) * (radius * rate),
                    Vec3::new(-c, -s, 0.0) * (radius * rate * rate),
                )
            }
            Path::Lissajous { center, amplitude, frequency, phase } => {
                let (e, de, dde) = envelope(t, ramp);
                let mut f = Vec3::zeros();
                let mut df = Vec3::zeros();
                let mut ddf = Vec3::zeros();
                for i in 0..3 {
                    let (s, c) = (frequency[i] * t + phase[i]).sin_cos();
                    f[i] = amplitude[i] * s;
                    df[i] = amplitude[i] * frequency[i] * c;
                    ddf[i] = -amplitude[i] * frequency[i] * frequency[i] * s;
                }
                (
                    v3(*center) + f * e,
                    f * de + df * e,
                    f * dde + df * (2.0 * de) + ddf * e,
                )
            }
            Path::Waypoints { points, segment_time } => {
                let Some((i, tau)) = segment_at(points.len(), *segment_time, t) else {
                    let last = points.last().copied().unwrap_or_default();
                    return (v3(last), Vec3::zeros(), Vec3::zeros());
                };
                let (a, b) = (v3(points[i]), v3(points[i + 1]));
                let (s, ds, dds) = smoothstep5(tau);
                let d = b - a;
                (
                    a + d * s,
                    d * (ds / segment_time),
                    d * (dds / (segment_time * segment_time)),
                )
            }
        }
    }

    /// Time at which the path comes to rest for good, if it does.
    pub fn natural_duration(&self) -> Option<f64> {
        match self {
            Path::Waypoints { points, segment_time } => {
                Some(points.len().saturating_sub(1) as f64 * segment_time)
            }
            _ => None,
        }
    }
}

/// Segment index and normalized time within it, or `None` past the last point.
fn segment_at(n_points: usize, segment_time: f64, t: f64) -> Option<(usize, f64)> {
    if n_points < 2 || segment_time <= 0.0 {
        return None;
    }
    let i = (t / segment_time).floor();
    if i < 0.0 {
        return Some((0, 0.0));
    }
    let i = i as usize;
    if i >= n_points - 1 {
        return None;
    }
    Some((i, t / segment_time - i as f64))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum YawProfile {
    Fixed {
        yaw: f64,
    },
    /// `base + e(t)·amplitude·sin(frequency·t)`.
    Sinusoid {
        base: f64,
        amplitude: f64,
        frequency: f64,
    },
    /// Turn toward the next waypoint over each segment (waypoint paths only).
    FollowPath,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectorySpec {
    pub path: Path,
    pub yaw: YawProfile,
    pub duration: f64,
    /// Envelope length for a start from rest, seconds (0 disables).
    #[serde(default)]
    pub ramp: f64,
}

/// Ground-truth state and noise-free inertial readings at one instant.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GroundTruth {
    pub q: Quat,
    pub p: Vec3,
    pub v: Vec3,
    pub a_world: Vec3,
    /// Body angular rate.
    pub gyro: Vec3,
    /// Specific force `Rᵀ(a + g)`.
    pub accel: Vec3,
}

impl TrajectorySpec {
    pub fn static_hover(position: [f64; 3], yaw: f64, duration: f64) -> Self {
        TrajectorySpec {
            path: Path::Static { position },
            yaw: YawProfile::Fixed { yaw },
            duration,
            ramp: 0.0,
        }
    }

    /// The default test flight: a 3-axis Lissajous inside the anchor box,
    /// gently yawing, starting from rest.
    pub fn lissajous(duration: f64) -> Self {
        TrajectorySpec {
            path: Path::Lissajous {
                center: [0.0, 0.0, 1.5],
                amplitude: [1.8, 1.4, 0.5],
                frequency: [0.35, 0.5, 0.3],
                phase: [0.0, 0.0, 0.0],
            },
            yaw: YawProfile::Sinusoid {
                base: 0.3,
                amplitude: 0.8,
                frequency: 0.25,
            },
            duration,
            ramp: 3.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.duration > 0.0) {
            return Err(Error::Config("trajectory duration must be positive".into()));
        }
        if matches!(self.yaw, YawProfile::FollowPath) && !matches!(self.path, Path::Waypoints { .. }) {
            return Err(Error::Config("follow-path yaw needs a waypoint path".into()));
        }
        if let Path::Waypoints { points, segment_time } = &self.path {
            if points.is_empty() || !(*segment_time > 0.0) {
                return Err(Error::Config("waypoint path needs points and a positive segment time".into()));
            }
        }
        Ok(())
    }

    fn yaw_at(&self, t: f64) -> (f64, f64) {
        match &self.yaw {
            YawProfile::Fixed { yaw } => (*yaw, 0.0),
            YawProfile::Sinusoid { base, amplitude, frequency } => {
                let (e, de, _) = envelope(t, self.ramp);
                let (s, c) = (frequency * t).sin_cos();
                (base + e * amplitude * s, de * amplitude * s + e * amplitude * frequency * c)
            }
            YawProfile::FollowPath => {
                let Path::Waypoints { points, segment_time } = &self.path else {
                    return (0.0, 0.0);
                };
                let headings = path_headings(points);
                match segment_at(points.len(), *segment_time, t) {
                    Some((i, tau)) => {
                        let from = if i == 0 { headings[0] } else { headings[i - 1] };
                        let delta = wrap_angle(headings[i] - from);
                        let (s, ds, _) = smoothstep5(tau);
                        (from + delta * s, delta * ds / segment_time)
                    }
                    None => (headings.last().copied().unwrap_or(0.0), 0.0),
                }
            }
        }
    }

    pub fn ground_truth(&self, t: f64, gravity: f64) -> Result<GroundTruth> {
        if !(0.0..=self.duration).contains(&t) {
            return Err(Error::TimeOutOfRange { t, duration: self.duration });
        }
        let (p, v, a) = self.path.eval(t, self.ramp);
        let (yaw, yaw_rate) = self.yaw_at(t);
        let q = yaw_quat(yaw);
        let g = Vec3::new(0.0, 0.0, gravity);
        Ok(GroundTruth {
            q,
            p,
            v,
            a_world: a,
            gyro: Vec3::new(0.0, 0.0, yaw_rate),
            accel: q.to_rotation().transpose() * (a + g),
        })
    }
}

/// Unwrapped heading of each segment; vertical segments keep the previous heading.
fn path_headings(points: &[[f64; 3]]) -> Vec<f64> {
    let mut out: Vec<f64> = Vec::with_capacity(points.len().saturating_sub(1));
    for w in points.windows(2) {
        let (dx, dy) = (w[1][0] - w[0][0], w[1][1] - w[0][1]);
        let prev = out.last().copied();
        let h = if dx.hypot(dy) > 1e-9 {
            let raw = dy.atan2(dx);
            match prev {
                Some(p) => p + wrap_angle(raw - p),
                None => raw,
            }
        } else {
            prev.unwrap_or(0.0)
        };
        out.push(h);
    }
    if out.is_empty() {
        out.push(0.0);
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnchorSpec {
    pub id: u32,
    pub position: [f64; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AntennaSpec {
    pub node: u32,
    pub antenna: String,
    pub offset: [f64; 3],
}

/// One ranging exchange inside a TDMA slot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RangingEntry {
    pub node: u32,
    pub antenna: String,
    pub anchor: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SensorRig {
    pub anchors: Vec<AnchorSpec>,
    pub antennas: Vec<AntennaSpec>,
    /// Slots in cycle order; every entry of a slot fires at the slot stamp.
    pub schedule: Vec<Vec<RangingEntry>>,
    pub slot_period: f64,
    pub uwb_sigma: f64,
}

impl Default for SensorRig {
    fn default() -> Self {
        let anchors = [
            (100, [3.0, 3.0, 3.0]),
            (101, [3.0, -3.0, 0.5]),
            (102, [-3.0, -3.0, 3.0]),
            (103, [-3.0, 3.0, 0.5]),
        ]
        .into_iter()
        .map(|(id, position)| AnchorSpec { id, position })
        .collect();
        let antennas = [
            (200, "A", [0.25, -0.25, 0.0]),
            (200, "B", [0.25, 0.25, 0.0]),
            (201, "A", [-0.25, 0.25, 0.0]),
            (201, "B", [-0.25, -0.25, 0.0]),
        ]
        .into_iter()
        .map(|(node, antenna, offset)| AntennaSpec {
            node,
            antenna: antenna.to_string(),
            offset,
        })
        .collect();
        SensorRig {
            anchors,
            antennas,
            schedule: default_schedule(),
            slot_period: 0.025,
            uwb_sigma: 0.05,
        }
    }
}

/// Eight slots: node 200 walks anchors 100..103 alternating antennas A and B,
/// node 201 does the same with the anchor sequence shifted by two.
pub fn default_schedule() -> Vec<Vec<RangingEntry>> {
    (0..8)
        .map(|j| {
            let antenna = if j % 2 == 0 { "A" } else { "B" };
            let step = j as u32 / 2;
            vec![
                RangingEntry { node: 200, antenna: antenna.into(), anchor: 100 + step },
                RangingEntry { node: 201, antenna: antenna.into(), anchor: 100 + (step + 2) % 4 },
            ]
        })
        .collect()
}

impl SensorRig {
    pub fn anchor_map(&self) -> AnchorMap {
        self.anchors.iter().map(|a| (a.id, v3(a.position))).collect()
    }

    pub fn antenna_offset(&self, node: u32, antenna: &str) -> Option<Vec3> {
        self.antennas
            .iter()
            .find(|a| a.node == node && a.antenna == antenna)
            .map(|a| v3(a.offset))
    }

    pub fn validate(&self) -> Result<()> {
        if self.schedule.iter().all(|s| s.is_empty()) {
            return Err(Error::Config("ranging schedule is empty".into()));
        }
        if !(self.slot_period > 0.0) || self.uwb_sigma < 0.0 {
            return Err(Error::Config("slot period must be positive and sigma nonnegative".into()));
        }
        let anchors = self.anchor_map();
        for e in self.schedule.iter().flatten() {
            if !anchors.contains_key(&e.anchor) {
                return Err(Error::Config(format!("schedule names unknown anchor {}", e.anchor)));
            }
            if self.antenna_offset(e.node, &e.antenna).is_none() {
                return Err(Error::Config(format!(
                    "schedule names unknown antenna {}.{}",
                    e.node, e.antenna
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OslStreamSpec {
    pub name: String,
    pub rate: f64,
    /// Per-axis noise densities `(rotation, translation)`.
    pub sigma: [f64; 6],
    /// `[start, end)` windows with no output.
    #[serde(default)]
    pub dropouts: Vec<[f64; 2]>,
}

impl Default for OslStreamSpec {
    fn default() -> Self {
        OslStreamSpec {
            name: "vio".into(),
            rate: 10.0,
            sigma: [0.01, 0.01, 0.01, 0.05, 0.05, 0.05],
            dropouts: Vec::new(),
        }
    }
}

/// Range outliers: each matching range in the window gets `bias` added with
/// probability `probability`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutlierSpec {
    #[serde(default)]
    pub anchor: Option<u32>,
    pub bias: f64,
    pub probability: f64,
    #[serde(default)]
    pub start: f64,
    #[serde(default = "far_future")]
    pub end: f64,
}

fn far_future() -> f64 {
    f64::INFINITY
}

/// Silences ranges to one anchor (or all) over a window.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UwbDropoutSpec {
    #[serde(default)]
    pub anchor: Option<u32>,
    pub start: f64,
    pub end: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimConfig {
    pub trajectory: TrajectorySpec,
    pub imu_rate: f64,
    pub imu_noise: ImuNoise,
    pub initial_gyro_bias: [f64; 3],
    pub initial_accel_bias: [f64; 3],
    pub rig: SensorRig,
    pub osl: Vec<OslStreamSpec>,
    pub outliers: Vec<OutlierSpec>,
    pub uwb_dropouts: Vec<UwbDropoutSpec>,
    /// Probability that a range is flagged with a failed quality check.
    pub flag_failure_rate: f64,
    pub groundtruth_rate: f64,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            trajectory: TrajectorySpec::lissajous(120.0),
            imu_rate: 400.0,
            imu_noise: ImuNoise::default(),
            initial_gyro_bias: [0.0; 3],
            initial_accel_bias: [0.0; 3],
            rig: SensorRig::default(),
            osl: vec![OslStreamSpec::default()],
            outliers: Vec::new(),
            uwb_dropouts: Vec::new(),
            flag_failure_rate: 0.0,
            groundtruth_rate: 100.0,
        }
    }
}

impl SimConfig {
    /// Zeroes every noise source, bias and injected fault.
    pub fn noise_free(mut self) -> Self {
        self.imu_noise.sigma_gyro = 0.0;
        self.imu_noise.sigma_accel = 0.0;
        self.imu_noise.sigma_gyro_walk = 0.0;
        self.imu_noise.sigma_accel_walk = 0.0;
        self.initial_gyro_bias = [0.0; 3];
        self.initial_accel_bias = [0.0; 3];
        self.rig.uwb_sigma = 0.0;
        for s in self.osl.iter_mut() {
            s.sigma = [0.0; 6];
        }
        self.outliers.clear();
        self.flag_failure_rate = 0.0;
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.trajectory.validate()?;
        self.rig.validate()?;
        if !(self.imu_rate > 0.0) || !(self.groundtruth_rate > 0.0) {
            return Err(Error::Config("rates must be positive".into()));
        }
        if self.osl.iter().any(|s| !(s.rate > 0.0)) {
            return Err(Error::Config("odometry rates must be positive".into()));
        }
        let mut names: Vec<&str> = self.osl.iter().map(|s| s.name.as_str()).collect();
        names.sort_unstable();
        names.dedup();
        if names.len() != self.osl.len() {
            return Err(Error::Config("odometry stream names must be unique".into()));
        }
        Ok(())
    }
}

/// A simulated dataset plus simulator-side truth not present in the files.
#[derive(Debug, Clone, PartialEq)]
pub struct Simulation {
    pub dataset: Dataset,
    /// Parallel to `dataset.uwb`: whether an outlier bias was injected.
    pub injected_outliers: Vec<bool>,
}

/// Sample instants of a stream at `rate` over `[0, duration]`, in nanoseconds.
fn sample_times(rate: f64, duration: f64) -> Vec<i64> {
    let period_ns = 1e9 / rate;
    let end_ns = (duration * 1e9).round() as i64;
    (0..)
        .map(|n| (n as f64 * period_ns).round() as i64)
        .take_while(|ns| *ns <= end_ns)
        .collect()
}

fn gaussian3(rng: &mut ChaCha8Rng, sigma: f64) -> Vec3 {
    if sigma == 0.0 {
        return Vec3::zeros();
    }
    let mut n = || -> f64 { StandardNormal.sample(rng) };
    Vec3::new(n(), n(), n()) * sigma
}

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// IMU samples with white noise `σ·√rate` and random-walk biases.
pub fn synth_imu(config: &SimConfig, seed: u64) -> Result<Vec<ImuSample>> {
    let mut rng = stream_rng(seed, 1);
    let n = &config.imu_noise;
    let dt = 1.0 / config.imu_rate;
    let mut bg = v3(config.initial_gyro_bias);
    let mut ba = v3(config.initial_accel_bias);
    let mut out = Vec::new();
    for ns in sample_times(config.imu_rate, config.trajectory.duration) {
        let t = stamp_from_ns(ns);
        let gt = config.trajectory.ground_truth(t, n.gravity)?;
        let wg = gaussian3(&mut rng, n.sigma_gyro * config.imu_rate.sqrt());
        let wa = gaussian3(&mut rng, n.sigma_accel * config.imu_rate.sqrt());
        out.push(ImuSample::new(t, gt.gyro + bg + wg, gt.accel + ba + wa));
        bg += gaussian3(&mut rng, n.sigma_gyro_walk * dt.sqrt());
        ba += gaussian3(&mut rng, n.sigma_accel_walk * dt.sqrt());
    }
    Ok(out)
}

/// Ranges following the TDMA schedule. Returns the records and the injected-outlier mask.
pub fn synth_uwb(config: &SimConfig, seed: u64) -> Result<(Vec<UwbRecord>, Vec<bool>)> {
    let mut rng = stream_rng(seed, 2);
    let rig = &config.rig;
    let anchors = rig.anchor_map();
    let schedule: Vec<&Vec<RangingEntry>> = rig.schedule.iter().collect();
    let mut records = Vec::new();
    let mut injected = Vec::new();
    let times = sample_times(1.0 / rig.slot_period, config.trajectory.duration);
    for (slot, ns) in times.into_iter().enumerate() {
        let t = stamp_from_ns(ns);
        let gt = config.trajectory.ground_truth(t, config.imu_noise.gravity)?;
        for entry in schedule[slot % schedule.len()] {
            let anchor = anchors[&entry.anchor];
            let offset = rig
                .antenna_offset(entry.node, &entry.antenna)
                .ok_or_else(|| Error::Config(format!("unknown antenna {}.{}", entry.node, entry.antenna)))?;
            let truth = (gt.p + gt.q.rotate(&offset) - anchor).norm();
            // Draw every random number unconditionally so fault settings do
            // not shift the noise sequence.
            let noise: f64 = StandardNormal.sample(&mut rng);
            let u_outlier: f64 = rng.random();
            let u_flag: f64 = rng.random();
            let dropped = config.uwb_dropouts.iter().any(|d| {
                d.anchor.is_none_or(|a| a == entry.anchor) && t >= d.start && t < d.end
            });
            if dropped {
                continue;
            }
            let outlier = config.outliers.iter().find(|o| {
                o.anchor.is_none_or(|a| a == entry.anchor) && t >= o.start && t < o.end
            });
            let mut range = truth + noise * rig.uwb_sigma;
            let mut is_outlier = false;
            if let Some(o) = outlier {
                if u_outlier < o.probability {
                    range += o.bias;
                    is_outlier = true;
                }
            }
            let flag_ok = u_flag >= config.flag_failure_rate;
            records.push(UwbRecord {
                stamp: t,
                node_id: entry.node,
                antenna_id: entry.antenna.clone(),
                anchor_id: entry.anchor,
                range,
                snr_ok: flag_ok,
                edge_ok: true,
            });
            injected.push(is_outlier);
        }
    }
    Ok((records, injected))
}

/// An odometry stream: true relative motion between consecutive outputs,
/// corrupted by `E(φ)` and `d` with variance `Δt·σ²`, chained from the
/// initial pose (which defines the stream's local frame).
pub fn synth_osl(config: &SimConfig, stream: &OslStreamSpec, stream_index: u64, seed: u64) -> Result<Vec<OslPose>> {
    let mut rng = stream_rng(seed, 16 + stream_index);
    let g = config.imu_noise.gravity;
    let mut out = Vec::new();
    let mut q = Quat::identity();
    let mut p = Vec3::zeros();
    let mut prev: Option<(f64, GroundTruth)> = None;
    for ns in sample_times(stream.rate, config.trajectory.duration) {
        let t = stamp_from_ns(ns);
        let gt = config.trajectory.ground_truth(t, g)?;
        if let Some((t0, g0)) = prev {
            let dt = t - t0;
            let dq = g0.q.inverse() * gt.q;
            let dp = g0.q.to_rotation().transpose() * (gt.p - g0.p);
            let s = stream.sigma;
            let phi = Vec3::new(
                gaussian3(&mut rng, s[0] * dt.sqrt())[0],
                gaussian3(&mut rng, s[1] * dt.sqrt())[0],
                gaussian3(&mut rng, s[2] * dt.sqrt())[0],
            );
            let d = Vec3::new(
                gaussian3(&mut rng, s[3] * dt.sqrt())[0],
                gaussian3(&mut rng, s[4] * dt.sqrt())[0],
                gaussian3(&mut rng, s[5] * dt.sqrt())[0],
            );
            let dq_meas = dq * Quat::from_rotation_vector(&phi);
            p += q.rotate(&(dp + d));
            q = (q * dq_meas).normalized();
        }
        prev = Some((t, gt));
        let silent = stream.dropouts.iter().any(|w| t >= w[0] && t < w[1]);
        if !silent {
            out.push(OslPose { stamp: t, q, p });
        }
    }
    Ok(out)
}

pub fn synth_groundtruth(config: &SimConfig) -> Result<Vec<StampedState>> {
    sample_times(config.groundtruth_rate, config.trajectory.duration)
        .into_iter()
        .map(|ns| {
            let t = stamp_from_ns(ns);
            let gt = config.trajectory.ground_truth(t, config.imu_noise.gravity)?;
            Ok(StampedState {
                stamp: t,
                state: NavState::new(gt.q, gt.p, gt.v),
            })
        })
        .collect()
}

/// Every stream of a simulated flight.
pub fn simulate(config: &SimConfig, seed: u64) -> Result<Simulation> {
    config.validate()?;
    let imu = synth_imu(config, seed)?;
    let (uwb, injected_outliers) = synth_uwb(config, seed)?;
    let mut osl = BTreeMap::new();
    for (i, s) in config.osl.iter().enumerate() {
        osl.insert(s.name.clone(), synth_osl(config, s, i as u64, seed)?);
    }
    Ok(Simulation {
        dataset: Dataset {
            imu,
            osl,
            uwb,
            anchors: config.rig.anchor_map(),
            groundtruth: synth_groundtruth(config)?,
        },
        injected_outliers,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    const G: f64 = 9.81;

    #[test]
    fn static_is_an_equilibrium() {
        let spec = TrajectorySpec::static_hover([1.0, 2.0, 3.0], 0.0, 10.0);
        let gt = spec.ground_truth(4.0, G).unwrap();
        assert_eq!(gt.v, Vec3::zeros());
        assert_eq!(gt.gyro, Vec3::zeros());
        assert!((gt.accel - Vec3::new(0.0, 0.0, G)).norm() < 1e-15);
        assert!(spec.ground_truth(10.5, G).is_err());
        assert!(spec.ground_truth(-0.1, G).is_err());
    }

    #[test]
    fn circle_centripetal_acceleration() {
        let spec = TrajectorySpec {
            path: Path::Circle { center: [0.0, 0.0, 1.0], radius: 2.0, rate: 0.7 },
            yaw: YawProfile::Fixed { yaw: 0.0 },
            duration: 20.0,
            ramp: 0.0,
        };
        for t in [0.0, 1.3, 7.7] {
            let gt = spec.ground_truth(t, G).unwrap();
            assert!((gt.a_world.norm() - 2.0 * 0.49).abs() < 1e-12);
        }
    }

    fn check_derivatives(spec: &TrajectorySpec) {
        let h = 1e-5;
        let mut t = 0.05;
        while t < spec.duration - 0.05 {
            let a = spec.ground_truth(t - h, G).unwrap();
            let b = spec.ground_truth(t + h, G).unwrap();
            let m = spec.ground_truth(t, G).unwrap();
            assert!(((b.p - a.p) / (2.0 * h) - m.v).norm() < 1e-6, "v at {t}");
            assert!(((b.v - a.v) / (2.0 * h) - m.a_world).norm() < 1e-6, "a at {t}");
            let dyaw = wrap_angle(b.q.yaw() - a.q.yaw()) / (2.0 * h);
            assert!((dyaw - m.gyro.z).abs() < 1e-6, "yaw rate at {t}");
            t += 0.37;
        }
    }

    #[test]
    fn analytic_derivatives_match_finite_differences() {
        check_derivatives(&TrajectorySpec::lissajous(20.0));
        let lattice = Path::lattice([-1.0, -1.0, 1.0], 1.0, [3, 2, 2], 2.0);
        let duration = lattice.natural_duration().unwrap();
        check_derivatives(&TrajectorySpec { path: lattice, yaw: YawProfile::FollowPath, duration, ramp: 0.0 });
        let scan = Path::vertical_scan([-2.0, 2.0], [0.5, 2.5], 0.0, 3, 3.0);
        let duration = scan.natural_duration().unwrap();
        check_derivatives(&TrajectorySpec {
            path: scan,
            yaw: YawProfile::Fixed { yaw: -PI / 2.0 },
            duration,
            ramp: 0.0,
        });
    }

    #[test]
    fn lissajous_starts_at_rest() {
        let gt = TrajectorySpec::lissajous(10.0).ground_truth(0.0, G).unwrap();
        assert_eq!(gt.v, Vec3::zeros());
        assert_eq!(gt.a_world, Vec3::zeros());
        assert_eq!(gt.gyro, Vec3::zeros());
    }

    #[test]
    fn follow_path_points_along_segments() {
        let path = Path::Waypoints {
            points: vec![[0.0, 0.0, 1.0], [1.0, 0.0, 1.0], [1.0, 1.0, 1.0], [1.0, 1.0, 2.0]],
            segment_time: 2.0,
        };
        let spec = TrajectorySpec { path, yaw: YawProfile::FollowPath, duration: 6.0, ramp: 0.0 };
        assert!(spec.ground_truth(1.0, G).unwrap().q.yaw().abs() < 1e-12);
        assert!((spec.ground_truth(4.0, G).unwrap().q.yaw() - PI / 2.0).abs() < 1e-12);
        // A vertical segment keeps the heading.
        assert!((spec.ground_truth(5.0, G).unwrap().q.yaw() - PI / 2.0).abs() < 1e-12);
    }

    fn short_config(duration: f64) -> SimConfig {
        SimConfig {
            trajectory: TrajectorySpec::lissajous(duration),
            ..SimConfig::default()
        }
    }

    #[test]
    fn noise_free_streams_equal_truth() {
        let config = short_config(2.0).noise_free();
        let imu = synth_imu(&config, 1).unwrap();
        assert!((imu[1].stamp - 0.0025).abs() < 1e-15);
        for s in &imu {
            let gt = config.trajectory.ground_truth(s.stamp, G).unwrap();
            assert_eq!(s.gyro, gt.gyro);
            assert_eq!(s.accel, gt.accel);
        }
        let (uwb, _) = synth_uwb(&config, 1).unwrap();
        let anchors = config.rig.anchor_map();
        for r in &uwb {
            let gt = config.trajectory.ground_truth(r.stamp, G).unwrap();
            let y = config.rig.antenna_offset(r.node_id, &r.antenna_id).unwrap();
            let d = (gt.p + gt.q.rotate(&y) - anchors[&r.anchor_id]).norm();
            assert_eq!(r.range, d);
        }
        let osl = synth_osl(&config, &config.osl[0], 0, 1).unwrap();
        let g0 = config.trajectory.ground_truth(0.0, G).unwrap();
        for pose in &osl {
            let gt = config.trajectory.ground_truth(pose.stamp, G).unwrap();
            let q_local = g0.q.inverse() * gt.q;
            let p_local = g0.q.to_rotation().transpose() * (gt.p - g0.p);
            assert!(pose.q.angle_to(&q_local) < 1e-9);
            assert!((pose.p - p_local).norm() < 1e-9);
        }
    }

    #[test]
    fn schedule_gives_eight_ranges_per_node_per_cycle() {
        let config = short_config(1.0).noise_free();
        let (uwb, _) = synth_uwb(&config, 3).unwrap();
        let cycle = &uwb[..16];
        for node in [200, 201] {
            let entries: Vec<(String, u32)> = cycle
                .iter()
                .filter(|r| r.node_id == node)
                .map(|r| (r.antenna_id.clone(), r.anchor_id))
                .collect();
            assert_eq!(entries.len(), 8);
            let first_anchor = if node == 200 { 100 } else { 102 };
            assert_eq!(entries[0], ("A".to_string(), first_anchor));
            assert_eq!(entries[1], ("B".to_string(), first_anchor));
            assert_eq!(entries[2].1, 100 + (first_anchor - 100 + 1) % 4);
        }
        // Two simultaneous ranges per 25 ms slot.
        assert_eq!(uwb[0].stamp, uwb[1].stamp);
        assert!((uwb[2].stamp - 0.025).abs() < 1e-15);
    }

    #[test]
    fn gyro_noise_variance() {
        let mut config = SimConfig {
            trajectory: TrajectorySpec::static_hover([0.0, 0.0, 1.0], 0.0, 25.0),
            ..SimConfig::default()
        };
        config.imu_noise.sigma_gyro_walk = 0.0;
        config.imu_noise.sigma_accel_walk = 0.0;
        let imu = synth_imu(&config, 9).unwrap();
        let n = 10_000;
        let xs: Vec<f64> = imu[..n].iter().map(|s| s.gyro.x).collect();
        let mean = xs.iter().sum::<f64>() / n as f64;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        let expect = config.imu_noise.sigma_gyro.powi(2) * config.imu_rate;
        assert!((var / expect - 1.0).abs() < 0.05, "{}", var / expect);
    }

    #[test]
    fn faults_are_injected() {
        let mut config = short_config(5.0);
        config.outliers.push(OutlierSpec {
            anchor: Some(102),
            bias: 1.5,
            probability: 1.0,
            start: 1.0,
            end: 2.0,
        });
        config.uwb_dropouts.push(UwbDropoutSpec { anchor: Some(101), start: 3.0, end: 4.0 });
        config.osl[0].dropouts.push([2.0, 3.0]);
        let sim = simulate(&config, 5).unwrap();
        let d = &sim.dataset;
        for (r, inj) in d.uwb.iter().zip(&sim.injected_outliers) {
            let expect = r.anchor_id == 102 && r.stamp >= 1.0 && r.stamp < 2.0;
            assert_eq!(*inj, expect);
            assert!(!(r.anchor_id == 101 && r.stamp >= 3.0 && r.stamp < 4.0));
        }
        assert!(d.osl["vio"].iter().all(|p| !(p.stamp >= 2.0 && p.stamp < 3.0)));
    }

    #[test]
    fn simulation_is_deterministic() {
        let config = short_config(3.0);
        assert_eq!(simulate(&config, 42).unwrap(), simulate(&config, 42).unwrap());
        assert_ne!(simulate(&config, 42).unwrap(), simulate(&config, 43).unwrap());
    }
}
