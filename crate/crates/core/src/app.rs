//! File-level entry points behind the command-line tool: simulate, survey,
//! run and eval. Every output is written atomically.

use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::anchors::{self_localize, survey_from_network};
use crate::config::{parse_toml_strict, EstimatorConfig};
use crate::dataset::{read_states, read_survey, write_anchors, write_atomic, write_states, Dataset};
use crate::error::{Error, Result};
use crate::eval::{apply_yaw_translation, fit_yaw_translation, plot_rows, rmse, Metrics, PLOT_HEADER};
use crate::pipeline::{run_dataset, InitReport, RunOutput, StepReport};
use crate::sim::{simulate, SimConfig, Simulation};

pub const CONFIG_FILE: &str = "config.toml";

fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::Io { path: path.display().to_string(), msg: e.to_string() })
}

pub fn load_sim_config(path: &Path) -> Result<SimConfig> {
    let config: SimConfig = parse_toml_strict(&read_text(path)?, &path.display().to_string())?;
    config.validate()?;
    Ok(config)
}

/// Estimator settings matching a simulated rig. Noise terms the simulation
/// switched off keep their defaults so the factors stay well weighted.
pub fn matched_config(sim: &SimConfig) -> EstimatorConfig {
    let mut c = EstimatorConfig { antennas: sim.rig.antennas.clone(), ..EstimatorConfig::default() };
    if sim.rig.uwb_sigma > 0.0 {
        c.uwb_sigma = sim.rig.uwb_sigma;
    }
    if let Some(s) = sim.osl.first().filter(|s| s.sigma.iter().all(|v| *v > 0.0)) {
        c.osl_sigma = s.sigma;
    }
    let n = &sim.imu_noise;
    if [n.sigma_gyro, n.sigma_accel, n.sigma_gyro_walk, n.sigma_accel_walk].iter().all(|v| *v > 0.0) {
        c.imu = *n;
    }
    c
}

/// Simulates a dataset into `out` together with a matching `config.toml`.
pub fn simulate_to_dir(config: &SimConfig, seed: u64, out: &Path) -> Result<Simulation> {
    let sim = simulate(config, seed)?;
    sim.dataset.write_dir(out)?;
    write_atomic(&out.join(CONFIG_FILE), matched_config(config).to_toml().as_bytes())?;
    Ok(sim)
}

/// Reads inter-anchor samples and writes the self-localized anchor file.
/// Without `ids` the three smallest anchor ids in the survey are used.
pub fn survey_to_file(input: &Path, out: &Path, ids: Option<[u32; 3]>, anchor_height: f64) -> Result<()> {
    let samples = read_survey(input)?;
    let ids = match ids {
        Some(ids) => ids,
        None => {
            let mut all: Vec<u32> = samples.iter().flat_map(|s| [s.anchor_i, s.anchor_j]).collect();
            all.sort_unstable();
            all.dedup();
            match all[..] {
                [a, b, c, ..] => [a, b, c],
                _ => {
                    return Err(Error::Parse {
                        path: input.display().to_string(),
                        line: 0,
                        msg: format!("survey names {} anchors, need 3", all.len()),
                    })
                }
            }
        }
    };
    let survey = survey_from_network(&samples, ids, 1, anchor_height)?;
    write_anchors(out, &self_localize(&survey, ids)?)
}

#[derive(Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum LogLine<'a> {
    Init(&'a InitReport),
    Step(&'a StepReport),
}

/// Solve log path next to an estimate file: `est.csv` → `est.solve.jsonl`.
pub fn solve_log_path(est: &Path) -> PathBuf {
    est.with_extension("solve.jsonl")
}

/// Config from `config`, else `config.toml` inside the dataset, else defaults.
pub fn resolve_config(dataset: &Path, config: Option<&Path>) -> Result<EstimatorConfig> {
    match config {
        Some(p) => EstimatorConfig::load(p),
        None => {
            let p = dataset.join(CONFIG_FILE);
            if p.exists() {
                EstimatorConfig::load(&p)
            } else {
                Ok(EstimatorConfig::default())
            }
        }
    }
}

/// Replays a dataset directory, writing the estimate and its solve log.
pub fn run_to_file(dataset: &Path, config: &EstimatorConfig, out: &Path) -> Result<RunOutput> {
    let data = Dataset::read_dir(dataset)?;
    let run = run_dataset(&data, config)?;
    if run.estimate.is_empty() {
        return Err(Error::Config(format!("{}: estimator never initialized", dataset.display())));
    }
    write_states(out, &run.estimate)?;
    let mut log = String::new();
    let lines = run.init.iter().map(LogLine::Init).chain(run.steps.iter().map(LogLine::Step));
    for line in lines {
        log.push_str(&serde_json::to_string(&line).expect("log serializes"));
        log.push('\n');
    }
    write_atomic(&solve_log_path(out), log.as_bytes())?;
    Ok(run)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Alignment {
    None,
    YawTranslation,
}

/// Scores an estimate file against ground truth, writing `report.json` and
/// the per-axis error series.
pub fn eval_to_files(est: &Path, gt: &Path, report: &Path, plot: &Path, align: Alignment) -> Result<Metrics> {
    let mut e = read_states(est)?;
    let g = read_states(gt)?;
    if align == Alignment::YawTranslation {
        let (yaw, t) = fit_yaw_translation(&e, &g)?;
        e = apply_yaw_translation(&e, yaw, &t);
    }
    let metrics = rmse(&e, &g)?;
    let mut json = serde_json::to_string_pretty(&metrics).expect("metrics serialize");
    json.push('\n');
    write_atomic(report, json.as_bytes())?;

    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(PLOT_HEADER).expect("in-memory write");
    for row in plot_rows(&e, &g) {
        let mut rec = vec![format!("{:.9}", row[0])];
        rec.extend(row[1..].iter().map(|v| v.to_string()));
        w.write_record(&rec).expect("in-memory write");
    }
    write_atomic(plot, &w.into_inner().expect("in-memory flush"))?;
    Ok(metrics)
}
