//! `qvpf`: twin experiments, single-method runs, comparisons and scaling
//! sweeps over JSON configs.
//!
//! Exit codes: 0 success, 2 invalid input, 1 runtime failure.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use qvpf_core::pipeline::{self, PipelineConfig, ScalingConfig, ScalingKind};
use qvpf_core::{Error, Result};

#[derive(Parser)]
#[command(
    name = "qvpf",
    version,
    about = "Hybrid quantum-classical data assimilation experiments"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON config file.
    #[arg(long)]
    config: PathBuf,
    /// Seed overriding the one in the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; defaults to the config's `output`, then `./out`.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the twin experiment of a run config and save it.
    Twin(Common),
    /// Run the method of one config.
    Run(Common),
    /// Run a JSON array of configs on their shared twin experiment.
    Compare(Common),
    /// Run a scaling sweep from a config, or from --kind/--grid.
    Scale {
        /// JSON scaling config.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// epsilon_scaling or particle_scaling.
        #[arg(long, value_parser = parse_kind)]
        kind: Option<ScalingKind>,
        /// Comma-separated grid values.
        #[arg(long, value_delimiter = ',')]
        grid: Option<Vec<f64>>,
        #[arg(long)]
        trials: Option<usize>,
    },
}

fn parse_kind(s: &str) -> std::result::Result<ScalingKind, String> {
    serde_json::from_value(serde_json::Value::String(s.to_string()))
        .map_err(|_| format!("unknown sweep kind `{s}` (expected epsilon_scaling or particle_scaling)"))
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.display().to_string(),
        source,
    })
}

fn load_run_config(common: &Common) -> Result<PipelineConfig> {
    let mut config: PipelineConfig = serde_json::from_str(&read(&common.config)?)?;
    if let Some(seed) = common.seed {
        config.seed = seed;
    }
    config.validate()?;
    Ok(config)
}

fn out_dir(flag: &Option<PathBuf>, config: Option<&PathBuf>) -> PathBuf {
    flag.clone()
        .or_else(|| config.cloned())
        .unwrap_or_else(|| PathBuf::from("out"))
}

fn report_written(files: &[PathBuf]) {
    for f in files {
        println!("wrote {}", f.display());
    }
}

fn execute(command: Command) -> Result<()> {
    match command {
        Command::Twin(common) => {
            let config = load_run_config(&common)?;
            let twin = pipeline::twin_for(&config)?;
            report_written(&pipeline::write_twin(
                &twin,
                out_dir(&common.out, config.output.as_ref()),
            )?);
        }
        Command::Run(common) => {
            let config = load_run_config(&common)?;
            let dir = out_dir(&common.out, config.output.as_ref());
            match pipeline::run(&config) {
                Ok(report) => {
                    report_written(&pipeline::write_report(&report, &dir)?);
                    println!(
                        "{}: final rmse {} (free run {})",
                        report.method,
                        report.final_rmse(),
                        report.final_background_rmse()
                    );
                }
                Err(Error::Stage { stage, partial, source }) => {
                    // Keep what the completed stages produced.
                    fs::create_dir_all(&dir).ok();
                    let path = dir.join("partial.json");
                    if fs::write(&path, serde_json::to_string_pretty(&partial)? + "\n").is_ok() {
                        eprintln!("partial diagnostics in {}", path.display());
                    }
                    return Err(Error::Stage { stage, partial, source });
                }
                Err(e) => return Err(e),
            }
        }
        Command::Compare(common) => {
            let mut configs: Vec<PipelineConfig> = serde_json::from_str(&read(&common.config)?)?;
            if let Some(seed) = common.seed {
                configs.iter_mut().for_each(|c| c.seed = seed);
            }
            let table = pipeline::compare_methods(&configs)?;
            let dir = out_dir(&common.out, configs.first().and_then(|c| c.output.as_ref()));
            report_written(&pipeline::write_comparison(&table, dir)?);
            for row in &table.rows {
                match (&row.final_rmse, &row.error) {
                    (_, Some(e)) => println!("{}: failed: {e}", row.method),
                    (Some(r), None) => println!("{}: final rmse {r}", row.method),
                    _ => {}
                }
            }
        }
        Command::Scale {
            config,
            seed,
            out,
            kind,
            grid,
            trials,
        } => {
            let mut sc = match (&config, kind, grid) {
                (Some(path), None, None) => serde_json::from_str::<ScalingConfig>(&read(path)?)?,
                (None, Some(kind), Some(grid)) => ScalingConfig {
                    kind,
                    grid,
                    seed: seed.ok_or_else(|| Error::InvalidArgument("--seed is required without --config".into()))?,
                    trials: None,
                },
                _ => {
                    return Err(Error::InvalidArgument(
                        "scale takes either --config or both --kind and --grid".into(),
                    ))
                }
            };
            if let Some(s) = seed {
                sc.seed = s;
            }
            if trials.is_some() {
                sc.trials = trials;
            }
            let v = sc.violations();
            if !v.is_empty() {
                return Err(Error::Validation(v));
            }
            let report = pipeline::scaling_experiment(&sc)?;
            report_written(&pipeline::write_scaling(&report, out_dir(&out, None))?);
            for s in &report.series {
                println!("{}: slope {} intercept {}", s.name, s.fit.slope, s.fit.intercept);
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_validation() {
                ExitCode::from(2)
            } else {
                ExitCode::FAILURE
            }
        }
    }
}
