use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use rangefuse_core::app::{
    eval_to_files, load_sim_config, resolve_config, run_to_file, simulate_to_dir, solve_log_path, survey_to_file,
    Alignment,
};
use rangefuse_core::SimConfig;

#[derive(Parser)]
#[command(name = "rangefuse", version, about = "IMU, odometry and UWB range fusion")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Align {
    None,
    YawTrans,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset bundle.
    Simulate {
        /// Simulation spec (TOML); defaults to a 120 s lissajous flight.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Localize three anchors from inter-anchor distance samples.
    Survey {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Anchor ids placed at the origin, on +x and in the -y half plane.
        #[arg(long, value_delimiter = ',', num_args = 3)]
        ids: Option<Vec<u32>>,
        #[arg(long, default_value_t = 1.0)]
        height: f64,
    },
    /// Replay a dataset through the estimator.
    Run {
        #[arg(long)]
        dataset: PathBuf,
        /// Estimator config; defaults to config.toml in the dataset, if any.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score an estimate against ground truth.
    Eval {
        #[arg(long)]
        est: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Per-axis error series; defaults to plotdata.csv next to the report.
        #[arg(long)]
        plot: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = Align::None)]
        align: Align,
    },
}

fn execute(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Simulate { spec, out, seed } => {
            let config = match &spec {
                Some(p) => load_sim_config(p)?,
                None => SimConfig::default(),
            };
            let sim = simulate_to_dir(&config, seed, &out)
                .with_context(|| format!("simulating into {}", out.display()))?;
            println!(
                "wrote {} imu, {} uwb and {} odometry streams to {}",
                sim.dataset.imu.len(),
                sim.dataset.uwb.len(),
                sim.dataset.osl.len(),
                out.display()
            );
        }
        Command::Survey { input, out, ids, height } => {
            let ids = ids.map(|v| [v[0], v[1], v[2]]);
            survey_to_file(&input, &out, ids, height)?;
            println!("wrote {}", out.display());
        }
        Command::Run { dataset, config, out } => {
            let config = resolve_config(&dataset, config.as_deref())?;
            let run = run_to_file(&dataset, &config, &out)?;
            println!(
                "wrote {} states to {} and {}",
                run.estimate.len(),
                out.display(),
                solve_log_path(&out).display()
            );
        }
        Command::Eval { est, gt, out, plot, align } => {
            let plot = plot.unwrap_or_else(|| out.with_file_name("plotdata.csv"));
            let align = match align {
                Align::None => Alignment::None,
                Align::YawTrans => Alignment::YawTranslation,
            };
            let m = eval_to_files(&est, &gt, &out, &plot, align)?;
            println!(
                "pos {:.4} m  rot {:.3} deg  vel {:.4} m/s  over {} pairs",
                m.rmse_pos_m, m.rmse_rot_deg, m.rmse_vel_mps, m.matched_pairs
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
