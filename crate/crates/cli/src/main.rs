//! `mdnslam`: batch driver for the simulate → train → detect → reject →
//! optimize → evaluate pipeline.
//!
//! Every stage subcommand reads the artifacts of the previous stages from the
//! output directory, so stages can be rerun and inspected one at a time.
//! Exit codes: 0 success, 2 configuration error, 3 + N failure in stage N.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use mdnslam_core::pipeline::{
    run_pipeline_cached, run_stage, run_sweep, ModelCache, PipelineConfig, PipelineError, Stage, SweepParameter,
    METRICS_JSON,
};

#[derive(Debug, Parser)]
#[command(name = "mdnslam", version, about = "Uncertainty-aware pose-graph SLAM on synthetic worlds")]
struct Cli {
    /// Log progress to stderr (repeat for more detail).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate the synthetic world: ground truth, odometry, observations, proposals.
    Simulate(Common),
    /// Train the odometry regressor and place embedding; write back-end odometry.
    Train(Common),
    /// Embed observations, detect loops and evaluate detection against ground truth.
    Detect(Common),
    /// Filter loop candidates by pairwise geometric consistency.
    Reject(Common),
    /// Build and optimize the pose graph.
    Optimize(Common),
    /// Compute trajectory, uncertainty, detection and rejection metrics.
    Evaluate(Common),
    /// Run all stages in order, or a single stage with --stage.
    Pipeline {
        #[command(flatten)]
        common: Common,
        /// Run only this stage (simulate, train, detect, reject, optimize, evaluate).
        #[arg(long, value_name = "NAME")]
        stage: Option<String>,
    },
    /// One pipeline run per parameter value, consolidated into sweep_<param>.csv.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// Parameter to vary: rho, k or covariance_mode.
        #[arg(long, value_name = "NAME")]
        param: String,
        /// Comma-separated values.
        #[arg(long, value_delimiter = ',', required = true, num_args = 1..)]
        values: Vec<String>,
    },
    /// Print the default configuration as JSON.
    DefaultConfig,
}

#[derive(Debug, Args)]
struct Common {
    /// JSON configuration file; missing fields take their defaults.
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, value_name = "N")]
    seed: Option<u64>,
    /// Overrides the configured output directory.
    #[arg(long, value_name = "DIR")]
    output: Option<PathBuf>,
}

impl Common {
    fn load(&self) -> Result<PipelineConfig, PipelineError> {
        let mut cfg = match &self.config {
            Some(path) => {
                let text = std::fs::read_to_string(path)
                    .map_err(|e| PipelineError::Config(format!("reading {}: {e}", path.display())))?;
                PipelineConfig::from_json(&text)?
            }
            None => PipelineConfig::default(),
        };
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if let Some(dir) = &self.output {
            cfg.output_dir = dir.clone();
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn single_stage(common: &Common, stage: Stage) -> Result<(), PipelineError> {
    let cfg = common.load()?;
    run_stage(&cfg, stage, &mut ModelCache::new())?;
    if stage == Stage::Evaluate {
        println!("{}", cfg.output_dir.join(METRICS_JSON).display());
    }
    Ok(())
}

fn run(cli: Cli) -> Result<(), PipelineError> {
    match cli.command {
        Command::Simulate(c) => single_stage(&c, Stage::Simulate),
        Command::Train(c) => single_stage(&c, Stage::Train),
        Command::Detect(c) => single_stage(&c, Stage::Detect),
        Command::Reject(c) => single_stage(&c, Stage::Reject),
        Command::Optimize(c) => single_stage(&c, Stage::Optimize),
        Command::Evaluate(c) => single_stage(&c, Stage::Evaluate),
        Command::Pipeline { common, stage: Some(name) } => {
            let stage = Stage::from_name(&name)
                .ok_or_else(|| PipelineError::Config(format!("unknown stage {name:?}")))?;
            single_stage(&common, stage)
        }
        Command::Pipeline { common, stage: None } => {
            let cfg = common.load()?;
            let m = run_pipeline_cached(&cfg, &mut ModelCache::new())?;
            println!(
                "ATE {:.4} m (odometry {:.4} m, gain {:.1}%), {} inliers of {} candidates -> {}",
                m.ate_m,
                m.odom_ate_m,
                m.gain_percent,
                m.n_inliers,
                m.n_candidates,
                cfg.output_dir.display()
            );
            Ok(())
        }
        Command::Sweep { common, param, values } => {
            let cfg = common.load()?;
            let parameter = SweepParameter::from_name(&param)
                .ok_or_else(|| PipelineError::Config(format!("unknown sweep parameter {param:?}")))?;
            let rows = run_sweep(&cfg, parameter, &values, &mut ModelCache::new())?;
            for r in &rows {
                match r.ate_m {
                    Some(ate) => println!("{}={}: ATE {ate:.4} m", r.parameter, r.value),
                    None => println!("{}={}: {}", r.parameter, r.value, r.status),
                }
            }
            Ok(())
        }
        Command::DefaultConfig => {
            println!("{}", PipelineConfig::default().to_json());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    env_logger::Builder::new().filter_level(level).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(u8::try_from(e.exit_code()).unwrap_or(1))
        }
    }
}
