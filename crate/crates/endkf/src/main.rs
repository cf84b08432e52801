//! Command-line front end for the twin-experiment harness.
//!
//! Exit codes: 0 on success, 1 for invalid input (bad flags, malformed
//! configs or pose logs), 2 for runtime failures.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use endkf::harness::{measurement_rng, run_bias_demo, run_twin_experiment, Variant};
use endkf::io::{
    load_config, read_mat4_log, read_pose_log, write_filtered, write_pose_log, write_results,
    write_traces,
};
use endkf::models::{bias_injected_measurements, synth_truth, ATT, OBS_ATT, OBS_POS, POS};
use endkf::stats::Versor;

#[derive(Parser)]
#[command(
    name = "endkf",
    version,
    about = "Ensemble directional Kalman filtering experiments for 6-DoF pose tracking"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct CommonArgs {
    /// Experiment configuration (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Override the config's random seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (created if absent).
    #[arg(long, default_value = ".")]
    out: PathBuf,
    /// Override the config's ensemble sizes with a single size.
    #[arg(long)]
    ensemble_size: Option<usize>,
}

#[derive(Copy, Clone, PartialEq, Eq, ValueEnum)]
enum LogFormat {
    /// Decide from the file extension (`.csv` or anything else as mat4).
    Auto,
    /// CSV pose log with header `frame,px,py,pz,qw,qx,qy,qz`.
    PoseCsv,
    /// One 4x4 row-major homogeneous transform per line.
    Mat4,
}

#[derive(Subcommand)]
enum Command {
    /// Synthesize the reference trajectory and one noisy measurement log.
    Simulate {
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Run the full filter comparison over Monte Carlo replications.
    Twin {
        #[command(flatten)]
        common: CommonArgs,
        /// Run only this variant (default: all).
        #[arg(long)]
        variant: Option<String>,
    },
    /// Filter an externally recorded pose log.
    Replay {
        #[command(flatten)]
        common: CommonArgs,
        /// The pose log to filter.
        #[arg(long)]
        log: PathBuf,
        /// Input format of the pose log.
        #[arg(long, value_enum, default_value_t = LogFormat::Auto)]
        format: LogFormat,
    },
    /// Demonstrate measurement-bias estimation with the extended state.
    BiasDemo {
        #[command(flatten)]
        common: CommonArgs,
    },
}

enum CliError {
    /// Malformed input: bad config, unreadable or invalid pose log.
    Input(String),
    /// Failure while running the experiment or writing outputs.
    Runtime(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Input(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Input(m) | CliError::Runtime(m) => m,
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message());
            ExitCode::from(e.code())
        }
    }
}

fn prepare(common: &CommonArgs) -> Result<(endkf::harness::ExperimentConfig, PathBuf), CliError> {
    let mut config = load_config(&common.config).map_err(|e| CliError::Input(e.to_string()))?;
    if let Some(seed) = common.seed {
        config.seed = seed;
    }
    if let Some(n) = common.ensemble_size {
        config.ensemble_sizes = vec![n];
        config
            .validate()
            .map_err(|e| CliError::Input(e.to_string()))?;
    }
    std::fs::create_dir_all(&common.out).map_err(|e| {
        CliError::Runtime(format!(
            "cannot create output directory {}: {e}",
            common.out.display()
        ))
    })?;
    Ok((config, common.out.clone()))
}

fn write_failure(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Runtime(format!("failed writing {}: {e}", path.display()))
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Simulate { common } => {
            let (config, out) = prepare(&common)?;
            let truth = synth_truth(
                &config
                    .truth_params()
                    .map_err(|e| CliError::Input(e.to_string()))?,
            );
            let mut rng = measurement_rng(config.seed, 0);
            let pos_bias = config.bias.as_ref().map_or([0.0; 3], |b| b.pos);
            let att_bias = config.bias_versor().unwrap_or(Versor::IDENTITY);
            let measurements = bias_injected_measurements(
                &truth,
                &config.obs_pos_cov(),
                config.observation.att_kappa,
                &pos_bias,
                &att_bias,
                &mut rng,
            )
            .map_err(|e| CliError::Runtime(e.to_string()))?;
            let truth_path = out.join("truth.csv");
            write_pose_log(&truth_path, &truth, POS, ATT)
                .map_err(|e| write_failure(&truth_path, e))?;
            let meas_path = out.join("measurements.csv");
            write_pose_log(&meas_path, &measurements, OBS_POS, OBS_ATT)
                .map_err(|e| write_failure(&meas_path, e))?;
            println!("wrote {} and {}", truth_path.display(), meas_path.display());
            Ok(())
        }
        Command::Twin { common, variant } => {
            let (config, out) = prepare(&common)?;
            let variants: Vec<Variant> = match variant {
                Some(name) => vec![name.parse().map_err(CliError::Input)?],
                None => Variant::ALL.to_vec(),
            };
            let results = run_twin_experiment(&config, &variants)
                .map_err(|e| CliError::Runtime(e.to_string()))?;
            let results_path = out.join("results.csv");
            write_results(&results_path, &results).map_err(|e| write_failure(&results_path, e))?;
            let traces = write_traces(&out, &results).map_err(|e| write_failure(&out, e))?;
            for v in &results.variants {
                if let Some(s) = v.summary(&results.truth) {
                    println!(
                        "{} n={}: pos_rmse {:.6} vel_rmse {:.6} att_cos {:.6} angvel_cos {:.6} ({} runs)",
                        v.variant.label(),
                        v.ensemble_size,
                        s.pos_rmse.mean,
                        s.vel_rmse.mean,
                        s.att_cos.mean,
                        s.angvel_cos.mean,
                        s.successful_runs,
                    );
                } else {
                    println!(
                        "{} n={}: no successful runs",
                        v.variant.label(),
                        v.ensemble_size
                    );
                }
            }
            println!(
                "wrote {} and {} trace files",
                results_path.display(),
                traces.len()
            );
            Ok(())
        }
        Command::Replay {
            common,
            log,
            format,
        } => {
            let (config, out) = prepare(&common)?;
            let use_csv = match format {
                LogFormat::PoseCsv => true,
                LogFormat::Mat4 => false,
                LogFormat::Auto => log.extension().is_some_and(|e| e == "csv"),
            };
            let parsed = if use_csv {
                read_pose_log(&log)
            } else {
                read_mat4_log(&log)
            };
            let parsed = parsed.map_err(|e| CliError::Input(e.to_string()))?;
            let n = common
                .ensemble_size
                .or_else(|| config.ensemble_sizes.iter().max().copied())
                .expect("validated non-empty sizes");
            let record = endkf::harness::filter_measurement_log(&config, &parsed.measurements, n)
                .map_err(|e| CliError::Runtime(e.to_string()))?;
            let path = out.join("filtered.csv");
            write_filtered(&path, &record).map_err(|e| write_failure(&path, e))?;
            println!(
                "filtered {} frames with n={} into {}",
                parsed.measurements.len(),
                n,
                path.display()
            );
            Ok(())
        }
        Command::BiasDemo { common } => {
            let (config, out) = prepare(&common)?;
            let report = run_bias_demo(&config).map_err(|e| match e {
                endkf::harness::HarnessError::BadConfig(m) => CliError::Input(m),
                other => CliError::Runtime(other.to_string()),
            })?;
            let results_path = out.join("results.csv");
            write_results(&results_path, &report.results)
                .map_err(|e| write_failure(&results_path, e))?;
            write_traces(&out, &report.results).map_err(|e| write_failure(&out, e))?;
            let recovery_path = out.join("bias_recovery.csv");
            let mut text = String::from("coordinate,true_bias,posterior_mean,posterior_std\n");
            for (k, name) in ["x", "y", "z"].iter().enumerate() {
                text.push_str(&format!(
                    "{},{},{},{}\n",
                    name, report.bias_true[k], report.bias_mean[k], report.bias_std[k]
                ));
            }
            std::fs::write(&recovery_path, text).map_err(|e| write_failure(&recovery_path, e))?;
            for k in 0..3 {
                println!(
                    "position bias {}: true {:+.4}, posterior {:+.4} ± {:.4}",
                    ["x", "y", "z"][k],
                    report.bias_true[k],
                    report.bias_mean[k],
                    report.bias_std[k]
                );
            }
            println!(
                "wrote {} and {}",
                results_path.display(),
                recovery_path.display()
            );
            Ok(())
        }
    }
}
