//! Estimator configuration as a flat TOML key-value file.

use std::collections::BTreeMap;
use std::path::Path;

use nalgebra::Vector6;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::manifold::Vec3;
use crate::preintegration::ImuNoise;
use crate::sim::{AntennaSpec, SensorRig};
use crate::solver::SolverConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EstimatorConfig {
    /// Target interval between window states, seconds.
    pub step_length: f64,
    /// Drop a range whose innovation exceeds this many σ.
    pub outlier_gate_sigma: f64,
    /// Reject a range changing faster than this on its link, m/s.
    pub rate_of_change_max: f64,
    /// Above this many pending steps, slide without solving.
    pub skip_backlog_threshold: usize,
    /// How late a measurement may arrive, seconds.
    pub reorder_tolerance: f64,
    /// An odometry stream is stale once its bracketing samples are further
    /// apart than this multiple of its nominal period.
    pub osl_stale_factor: f64,
    /// Odometry noise densities `(rotation, translation)` per axis.
    pub osl_sigma: [f64; 6],
    /// Ignore an odometry displacement that disagrees with the IMU prediction.
    pub osl_cross_check: bool,
    pub uwb_sigma: f64,
    pub init_min_ranges: usize,
    pub init_min_imu_duration: f64,
    pub init_yaw_grid: usize,
    /// Mean whitened cost per range accepted at initialization.
    pub init_cost_threshold: f64,
    /// Zero-mean prior on the startup biases `(gyro rad/s, accel m/s²)`,
    /// held until the first startup state leaves the window.
    pub init_bias_sigma: [f64; 2],
    /// Share of startup ranges that must pass the innovation gate.
    pub init_min_inlier_fraction: f64,
    /// Steps between yaw explorations; 0 disables them.
    pub nudge_period: usize,
    pub antennas: Vec<AntennaSpec>,
    #[serde(flatten)]
    pub imu: ImuNoise,
    #[serde(flatten)]
    pub solver: SolverConfig,
}

impl Default for EstimatorConfig {
    fn default() -> Self {
        EstimatorConfig {
            step_length: 0.1,
            outlier_gate_sigma: 5.0,
            rate_of_change_max: 20.0,
            skip_backlog_threshold: 3,
            reorder_tolerance: 0.05,
            osl_stale_factor: 2.0,
            osl_sigma: [0.01, 0.01, 0.01, 0.05, 0.05, 0.05],
            osl_cross_check: true,
            uwb_sigma: 0.05,
            init_min_ranges: 100,
            init_min_imu_duration: 1.0,
            init_yaw_grid: 12,
            init_cost_threshold: 9.0,
            init_bias_sigma: [0.01, 0.1],
            init_min_inlier_fraction: 0.8,
            nudge_period: 20,
            antennas: SensorRig::default().antennas,
            imu: ImuNoise::default(),
            solver: SolverConfig::default(),
        }
    }
}

impl EstimatorConfig {
    pub fn validate(&self) -> Result<()> {
        self.imu.validate()?;
        self.solver.validate()?;
        if !(self.step_length > 0.0) {
            return Err(Error::Config("step_length must be positive".into()));
        }
        let positive = [self.outlier_gate_sigma, self.rate_of_change_max, self.osl_stale_factor, self.uwb_sigma];
        if positive.iter().any(|v| !(*v > 0.0)) || self.osl_sigma.iter().any(|s| !(*s > 0.0)) {
            return Err(Error::Config("gates, rates and sigmas must be positive".into()));
        }
        if !(self.reorder_tolerance >= 0.0) || !(self.init_min_imu_duration >= 0.0) {
            return Err(Error::Config("tolerances and durations must be nonnegative".into()));
        }
        if self.init_bias_sigma.iter().any(|s| !(*s > 0.0)) {
            return Err(Error::Config("init_bias_sigma must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.init_min_inlier_fraction) {
            return Err(Error::Config("init_min_inlier_fraction must lie in [0, 1]".into()));
        }
        if self.init_yaw_grid < 1 {
            return Err(Error::Config("init_yaw_grid must be at least 1".into()));
        }
        Ok(())
    }

    pub fn osl_sigma(&self) -> Vector6<f64> {
        Vector6::from_column_slice(&self.osl_sigma)
    }

    /// `(node, antenna)` to body-frame offset.
    pub fn antenna_map(&self) -> BTreeMap<(u32, String), Vec3> {
        self.antennas
            .iter()
            .map(|a| ((a.node, a.antenna.clone()), Vec3::new(a.offset[0], a.offset[1], a.offset[2])))
            .collect()
    }

    pub fn from_toml_str(text: &str, source: &str) -> Result<Self> {
        let config: EstimatorConfig = parse_toml_strict(text, source)?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
            path: path.display().to_string(),
            msg: e.to_string(),
        })?;
        Self::from_toml_str(&text, &path.display().to_string())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configuration serializes")
    }
}

fn line_of(text: &str, span: Option<std::ops::Range<usize>>) -> u64 {
    span.map_or(0, |s| text[..s.start.min(text.len())].matches('\n').count() as u64 + 1)
}

/// Deserializes TOML, rejecting keys that `T`'s defaults do not name.
pub fn parse_toml_strict<T: DeserializeOwned + Serialize + Default>(text: &str, source: &str) -> Result<T> {
    let table: toml::Table = toml::from_str(text).map_err(|e| Error::Parse {
        path: source.to_string(),
        line: line_of(text, e.span()),
        msg: e.message().to_string(),
    })?;
    let known = toml::Table::try_from(T::default()).expect("defaults serialize");
    if let Some(key) = table.keys().find(|k| !known.contains_key(*k)) {
        let at = text.find(key.as_str()).map(|i| i..i + key.len());
        return Err(Error::Parse {
            path: source.to_string(),
            line: line_of(text, at),
            msg: format!("unknown key `{key}`"),
        });
    }
    toml::from_str(text).map_err(|e| Error::Parse {
        path: source.to_string(),
        line: line_of(text, e.span()),
        msg: e.message().to_string(),
    })
}
