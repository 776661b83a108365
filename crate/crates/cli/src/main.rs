use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use thiserror::Error;

use srp_slam::config::{ConfigError, RunConfig};
use srp_slam::dataset::DiskDataset;
use srp_slam::eval::{evaluate_loop_deviation, trajectory_error, EvalError};
use srp_slam::io::{read_tum, write_ply, DatasetError};
use srp_slam::pipeline::{
    map_from_trajectory, report_text, run_pipeline, write_outputs, PipelineError, PipelineResult,
};
use srp_slam::sim::{make_dataset, ScenarioOptions, SimDataset, SimError};

#[derive(Parser)]
#[command(name = "srp-slam", version, about = "LiDAR-inertial SLAM with structural plane constraints")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a simulated dataset directory.
    Simulate {
        /// corridor-1f, building-3f-loop or stairwell-only.
        #[arg(long)]
        scenario: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Override the scenario duration (seconds).
        #[arg(long)]
        duration: Option<f64>,
        /// Disable IMU and range noise.
        #[arg(long)]
        noise_free: bool,
    },
    /// Run the full pipeline and write trajectory, map and reports.
    Run {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Loop deviation of a TUM trajectory, plus errors against ground truth.
    Eval {
        trajectory: PathBuf,
        #[arg(long)]
        ground_truth: Option<PathBuf>,
        /// Stamp matching tolerance against ground truth (seconds).
        #[arg(long, default_value_t = 1e-3)]
        max_dt: f64,
    },
    /// Rebuild a voxel-thinned PLY map from a dataset and a body trajectory.
    ExportMap {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        trajectory: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0.05)]
        voxel: f64,
    },
    /// Run the pipeline and print the final pose graph.
    GraphDump {
        #[command(flatten)]
        run: RunArgs,
        /// Write to a file instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args)]
struct RunArgs {
    /// Dataset directory written by `simulate` or a converter.
    #[arg(long, required_unless_present = "scenario", conflicts_with = "scenario")]
    dataset: Option<PathBuf>,
    /// Simulate the scenario in memory instead of reading a dataset.
    #[arg(long)]
    scenario: Option<String>,
    /// Simulate without sensor noise (with --scenario).
    #[arg(long, requires = "scenario")]
    noise_free: bool,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Disable structural plane constraints.
    #[arg(long)]
    no_srp: bool,
    /// LiDAR-only front-end.
    #[arg(long)]
    no_imu: bool,
    #[arg(long)]
    single_thread: bool,
}

#[derive(Debug, Error)]
enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("I/O error on {}: {source}", .path.display())]
    Io { path: PathBuf, source: std::io::Error },
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Dataset(_) | CliError::Sim(_) | CliError::Io { .. } => 3,
            CliError::Pipeline(e) => match e {
                PipelineError::Config(_) => 2,
                PipelineError::Dataset(_) | PipelineError::Io { .. } | PipelineError::NoSweeps => 3,
                PipelineError::Frontend { .. } | PipelineError::Graph { .. } | PipelineError::Eval(_) => 4,
            },
            CliError::Eval(_) => 3,
        }
    }
}

impl RunArgs {
    fn config(&self) -> Result<RunConfig, CliError> {
        let mut config = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        if let Some(seed) = self.seed {
            config.seed = seed;
        }
        config.use_srp &= !self.no_srp;
        config.use_imu &= !self.no_imu;
        config.single_thread |= self.single_thread;
        config.validate()?;
        Ok(config)
    }

    fn execute(&self, config: &RunConfig) -> Result<PipelineResult, CliError> {
        let result = match (&self.dataset, &self.scenario) {
            (Some(dir), _) => run_pipeline(&DiskDataset::open(dir)?, config)?,
            (None, Some(name)) => {
                let options = ScenarioOptions { noise_free: self.noise_free, ..Default::default() };
                run_pipeline(&SimDataset::new(name, config.seed, &options)?, config)?
            }
            (None, None) => unreachable!("clap requires --dataset or --scenario"),
        };
        Ok(result)
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    std::fs::write(path, bytes).map_err(|source| CliError::Io { path: path.to_path_buf(), source })
}

fn execute(command: Command) -> Result<(), CliError> {
    match command {
        Command::Simulate { scenario, out, seed, duration, noise_free } => {
            let data =
                make_dataset(&scenario, seed, &out, &ScenarioOptions { duration, noise_free, range_noise: None })?;
            log::info!("wrote {} sweeps to {}", srp_slam::dataset::DataSource::sweep_count(&data), out.display());
        }
        Command::Run { run, out } => {
            let config = run.config()?;
            let result = run.execute(&config)?;
            write_outputs(&result, &config, &out)?;
            print!("{}", report_text(&result));
        }
        Command::Eval { trajectory, ground_truth, max_dt } => {
            let estimate = read_tum(&trajectory)?;
            println!("{}", evaluate_loop_deviation(&estimate)?);
            if let Some(path) = ground_truth {
                let truth = read_tum(&path)?;
                match trajectory_error(&estimate, &truth, max_dt) {
                    Some(e) => {
                        println!("matched = {}", e.matched);
                        println!("rmse = {:.6}", e.rmse);
                        println!("max_position_error = {:.6}", e.max_position_error);
                        println!("max_angle_error = {:.6}", e.max_angle_error);
                    }
                    None => println!("matched = 0"),
                }
            }
        }
        Command::ExportMap { dataset, trajectory, out, voxel } => {
            let data = DiskDataset::open(&dataset)?;
            let poses = read_tum(&trajectory)?;
            let points = map_from_trajectory(&data, &poses, voxel, 1e-3)?;
            write_ply(&out, &points)?;
            log::info!("wrote {} points to {}", points.len(), out.display());
        }
        Command::GraphDump { run, out } => {
            let config = run.config()?;
            let result = run.execute(&config)?;
            let mut text = Vec::new();
            result.graph.dump(&mut text).expect("writing to memory");
            match out {
                Some(path) => write_file(&path, &text)?,
                None => std::io::stdout()
                    .write_all(&text)
                    .map_err(|source| CliError::Io { path: PathBuf::from("<stdout>"), source })?,
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
