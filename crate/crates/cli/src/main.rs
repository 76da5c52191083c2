//! `perspnp`: synthetic dataset generation, PCA model building, PnP pose
//! evaluation, gradient auditing, and the PnP-finetuning benchmark.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error, 3 assertion failure
//! (`grad-check --assert`, `finetune-bench --assert`).

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use perspnp_core::bench::{
    run_finetune_benchmark, run_grad_audit, run_pose_eval, FinetuneConfig,
};
use perspnp_core::metrics::EvalReport;
use perspnp_core::pca;
use perspnp_core::synth::dataset::{read_dataset, read_shapes, write_dataset};
use perspnp_core::synth::{gen_dataset, SceneConfig};

#[derive(Parser)]
#[command(name = "perspnp", version, about, disable_help_subcommand = true)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset directory from a JSON scene config.
    SynthGen {
        /// Scene config (JSON, schema = SceneConfig).
        #[arg(long)]
        config: PathBuf,
        /// Output dataset directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Build a PCA model from a mesh collection directory.
    PcaBuild {
        /// Mesh collection directory (e.g. `<dataset>/shapes`).
        #[arg(long)]
        meshes: PathBuf,
        /// Number of components to keep.
        #[arg(long)]
        k: usize,
        /// Output model file.
        #[arg(long)]
        out: PathBuf,
    },
    /// Solve every sample of a dataset and print the aggregate report.
    Solve {
        #[arg(long)]
        dataset: PathBuf,
        /// Ignore the recorded per-point uncertainties (unit weights).
        #[arg(long)]
        unweighted: bool,
    },
    /// Solve every sample and write the aggregate report to a file.
    Eval {
        #[arg(long)]
        dataset: PathBuf,
        /// Output report (JSON).
        #[arg(long)]
        out: PathBuf,
        /// Also write the report as a CSV row.
        #[arg(long)]
        csv: Option<PathBuf>,
        #[arg(long)]
        unweighted: bool,
    },
    /// Finite-difference audit of every gradient-bearing operation.
    GradCheck {
        #[arg(long)]
        seed: u64,
        /// Instances per operation.
        #[arg(long)]
        n: usize,
        /// Exit 3 if any operation exceeds its threshold.
        #[arg(long, action = clap::ArgAction::SetTrue)]
        assert: bool,
    },
    /// Two-phase finetuning benchmark over a dataset.
    FinetuneBench {
        #[arg(long)]
        dataset: PathBuf,
        /// Benchmark config (JSON, schema = FinetuneConfig).
        #[arg(long)]
        config: PathBuf,
        /// Output result (JSON).
        #[arg(long)]
        out: PathBuf,
        /// Exit 3 unless win rate >= 0.7 and mean ADD decreased.
        #[arg(long, action = clap::ArgAction::SetTrue)]
        assert: bool,
    },
}

enum CliError {
    Data(String),
    Assert(String),
}

impl CliError {
    fn data(e: impl std::fmt::Display) -> Self {
        Self::Data(e.to_string())
    }
}

fn read_json_config<T: serde::de::DeserializeOwned>(path: &PathBuf) -> Result<T, CliError> {
    let bytes = std::fs::read(path)
        .map_err(|e| CliError::Data(format!("cannot read {}: {e}", path.display())))?;
    serde_json::from_slice(&bytes)
        .map_err(|e| CliError::Data(format!("cannot parse {}: {e}", path.display())))
}

fn write_json(path: &PathBuf, value: &impl serde::Serialize) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value).map_err(CliError::data)?;
    text.push('\n');
    std::fs::write(path, text)
        .map_err(|e| CliError::Data(format!("cannot write {}: {e}", path.display())))
}

fn pose_eval_json(report: &EvalReport, solver_failures: usize, weighted: bool) -> serde_json::Value {
    let mut value = serde_json::to_value(report).expect("report serializes");
    let map = value.as_object_mut().expect("report is an object");
    map.insert("solver_failures".into(), solver_failures.into());
    map.insert("weighted".into(), weighted.into());
    value
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::SynthGen { config, out } => {
            let cfg: SceneConfig = read_json_config(&config)?;
            let (model, shapes, samples) = gen_dataset(&cfg).map_err(CliError::data)?;
            write_dataset(&out, &cfg, &model, &shapes, &samples).map_err(CliError::data)?;
            println!(
                "wrote {} samples ({} vertices, k={}) to {}",
                samples.len(),
                cfg.n_vertices,
                cfg.k,
                out.display()
            );
            Ok(())
        }
        Command::PcaBuild { meshes, k, out } => {
            let collection = read_shapes(&meshes).map_err(CliError::data)?;
            let model = pca::build_pca(&collection, k).map_err(CliError::data)?;
            pca::write_model(&model, &out).map_err(CliError::data)?;
            println!(
                "built model from {} meshes: n_vertices={}, k={} -> {}",
                collection.len(),
                model.n_vertices(),
                model.k(),
                out.display()
            );
            Ok(())
        }
        Command::Solve { dataset, unweighted } => {
            let ds = read_dataset(&dataset).map_err(CliError::data)?;
            let outcome = run_pose_eval(&ds, !unweighted).map_err(CliError::data)?;
            let json = pose_eval_json(&outcome.report, outcome.solver_failures, outcome.weighted);
            println!("{}", serde_json::to_string_pretty(&json).map_err(CliError::data)?);
            Ok(())
        }
        Command::Eval {
            dataset,
            out,
            csv,
            unweighted,
        } => {
            let ds = read_dataset(&dataset).map_err(CliError::data)?;
            let outcome = run_pose_eval(&ds, !unweighted).map_err(CliError::data)?;
            let json = pose_eval_json(&outcome.report, outcome.solver_failures, outcome.weighted);
            write_json(&out, &json)?;
            if let Some(csv_path) = csv {
                let text = format!(
                    "{}\n{}\n",
                    EvalReport::csv_header(),
                    outcome.report.to_csv_row()
                );
                std::fs::write(&csv_path, text)
                    .map_err(|e| CliError::Data(format!("cannot write {}: {e}", csv_path.display())))?;
            }
            println!("wrote report to {}", out.display());
            Ok(())
        }
        Command::GradCheck { seed, n, assert } => {
            let report = run_grad_audit(seed, n);
            println!("{}", serde_json::to_string_pretty(&report).map_err(CliError::data)?);
            if assert && !report.all_pass() {
                let failing: Vec<&str> = report
                    .rows
                    .iter()
                    .filter(|r| !r.pass)
                    .map(|r| r.op.as_str())
                    .collect();
                return Err(CliError::Assert(format!(
                    "gradient audit failed for: {}",
                    failing.join(", ")
                )));
            }
            Ok(())
        }
        Command::FinetuneBench {
            dataset,
            config,
            out,
            assert,
        } => {
            let cfg: FinetuneConfig = read_json_config(&config)?;
            let ds = read_dataset(&dataset).map_err(CliError::data)?;
            let result = run_finetune_benchmark(&ds, &cfg).map_err(CliError::data)?;
            write_json(&out, &result)?;
            println!(
                "win_rate={} mean_add_delta={:.6} trials={} -> {}",
                result.win_rate,
                result.mean_add_delta,
                result.trials.len(),
                out.display()
            );
            if assert && !(result.win_rate >= 0.7 && result.mean_add_delta < 0.0) {
                return Err(CliError::Assert(format!(
                    "benchmark below threshold: win_rate={}, mean_add_delta={}",
                    result.win_rate, result.mean_add_delta
                )));
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // clap prints its own help/version output through the error
            let is_help = matches!(
                e.kind(),
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion
            );
            let _ = e.print();
            return if is_help {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(1)
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Data(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(CliError::Assert(msg)) => {
            eprintln!("assertion failed: {msg}");
            ExitCode::from(3)
        }
    }
}
