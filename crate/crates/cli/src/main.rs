//! biaslens: representation-based bias evaluation for layerwise models.
//!
//! Each subcommand fronts one pipeline stage, reading and writing a run
//! directory whose artifacts are tracked by content hash, plus standalone
//! commands for the behavioral baseline metrics and the Spearman correlation
//! harness. Exit codes: 0 success, 2 config error, 3 stage error,
//! 4 provenance mismatch.

mod config;
mod metrics;

use biaslens_core::pipeline::{self, PipelineError, RunDir};
use clap::{Parser, Subcommand, ValueEnum};
use config::LoadedConfig;
use std::path::{Path, PathBuf};

#[derive(Debug)]
pub enum CliError {
    Config(String),
    Stage(String),
    Provenance(String),
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "config error: {m}"),
            CliError::Stage(m) => write!(f, "stage error: {m}"),
            CliError::Provenance(m) => write!(f, "provenance mismatch: {m}"),
        }
    }
}

impl From<PipelineError> for CliError {
    fn from(e: PipelineError) -> Self {
        match e {
            PipelineError::InvalidSpec(m) => CliError::Config(m),
            PipelineError::Provenance(m) => CliError::Provenance(m),
            PipelineError::Stage { .. } => CliError::Stage(e.to_string()),
            PipelineError::Io(io) => CliError::Stage(io.to_string()),
        }
    }
}

impl CliError {
    fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Stage(_) => 3,
            CliError::Provenance(_) => 4,
        }
    }
}

#[derive(Parser)]
#[command(
    name = "biaslens",
    version,
    about = "Representation-based bias evaluation: CAV steering, SAE concept vectors, \
             cosine-asymmetry bias scores, and behavioral baseline metrics"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate probe corpora for every configured concept.
    ProbeGen {
        #[arg(long)]
        config: PathBuf,
    },
    /// Extract per-layer activations for every probe corpus.
    Extract {
        #[arg(long)]
        config: PathBuf,
    },
    /// Train per-layer classifiers and derive CAV stacks.
    CavTrain {
        #[arg(long)]
        config: PathBuf,
        /// Worker threads for per-layer training jobs.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Run concept steering for one prompt id (default: every prompt).
    Steer {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        prompt_id: Option<String>,
        /// Also dump the line-oriented steer trace next to each artifact.
        #[arg(long)]
        trace: bool,
    },
    /// Encode steered activation pairs into concept vectors.
    Concept {
        #[arg(long)]
        config: PathBuf,
    },
    /// Assemble the bias grid from persisted concept vectors.
    BiasGrid {
        #[arg(long)]
        config: PathBuf,
    },
    /// Compute one behavioral metric from a CSV file.
    Metrics {
        #[arg(value_enum)]
        metric: MetricKind,
        /// Input CSV path (schema depends on the metric).
        #[arg(long = "in")]
        input: PathBuf,
        /// Output JSON path.
        #[arg(long)]
        out: PathBuf,
    },
    /// Spearman-correlate two metric series CSVs over shared concepts.
    Correlate {
        #[arg(long)]
        a: PathBuf,
        #[arg(long)]
        b: PathBuf,
        /// Drop entries whose recorded p-value exceeds this threshold.
        #[arg(long)]
        p_threshold: Option<f64>,
    },
    /// Verify a run directory and render its report.
    Report {
        #[arg(long)]
        run: PathBuf,
    },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum MetricKind {
    F1diff,
    Eod,
    If,
    Gf,
    Seat,
    Ppl,
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(cli.command) {
        eprintln!("biaslens: {e}");
        std::process::exit(e.exit_code());
    }
}

/// Sentinel lock file preventing concurrent writers in one run directory.
struct DirLock {
    path: PathBuf,
}

impl DirLock {
    fn acquire(dir: &Path) -> Result<DirLock, CliError> {
        std::fs::create_dir_all(dir)
            .map_err(|e| CliError::Stage(format!("cannot create {dir:?}: {e}")))?;
        let path = dir.join(".biaslens.lock");
        match std::fs::OpenOptions::new()
            .write(true)
            .create_new(true)
            .open(&path)
        {
            Ok(_) => Ok(DirLock { path }),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                Err(CliError::Stage(format!(
                    "run directory is locked by another biaslens process \
                     (stale lock? remove {path:?})"
                )))
            }
            Err(e) => Err(CliError::Stage(format!("cannot lock {dir:?}: {e}"))),
        }
    }
}

impl Drop for DirLock {
    fn drop(&mut self) {
        std::fs::remove_file(&self.path).ok();
    }
}

fn run(command: Command) -> Result<(), CliError> {
    match command {
        Command::ProbeGen { config } => {
            let loaded = LoadedConfig::read(&config)?;
            let run = RunDir::new(&loaded.config.out_dir);
            let _lock = DirLock::acquire(run.root())?;
            pipeline::stage_probe_gen(&loaded.config.pipeline_spec(), &run, &loaded.hash)?;
            // Keep a verbatim copy of the config so `report --run DIR` can
            // work from the directory alone.
            std::fs::write(run.root().join("config.json"), &loaded.raw)
                .map_err(|e| CliError::Stage(e.to_string()))?;
            println!(
                "probe-gen: wrote {} corpora under {}",
                loaded.config.concepts.len(),
                run.probes_dir().display()
            );
            Ok(())
        }
        Command::Extract { config } => {
            let loaded = LoadedConfig::read(&config)?;
            let run = RunDir::new(&loaded.config.out_dir);
            let _lock = DirLock::acquire(run.root())?;
            let model = loaded.config.build_model()?;
            pipeline::stage_extract(
                model.as_ref(),
                &loaded.config.pipeline_spec(),
                &run,
                &loaded.hash,
            )?;
            println!(
                "extract: wrote activation sets for {} concepts",
                loaded.config.concepts.len()
            );
            Ok(())
        }
        Command::CavTrain { config, jobs } => {
            let loaded = LoadedConfig::read(&config)?;
            let run = RunDir::new(&loaded.config.out_dir);
            let _lock = DirLock::acquire(run.root())?;
            pipeline::stage_cav_train(
                &loaded.config.pipeline_spec(),
                &run,
                &loaded.hash,
                jobs.max(1),
            )?;
            println!(
                "cav-train: trained CAV stacks for {} concepts (jobs={})",
                loaded.config.concepts.len(),
                jobs.max(1)
            );
            Ok(())
        }
        Command::Steer {
            config,
            prompt_id,
            trace,
        } => {
            let loaded = LoadedConfig::read(&config)?;
            let run = RunDir::new(&loaded.config.out_dir);
            let _lock = DirLock::acquire(run.root())?;
            let model = loaded.config.build_model()?;
            pipeline::stage_steer(
                model.as_ref(),
                &loaded.config.pipeline_spec(),
                &run,
                &loaded.hash,
                prompt_id.as_deref(),
                trace,
            )?;
            println!("steer: wrote steering traces");
            Ok(())
        }
        Command::Concept { config } => {
            let loaded = LoadedConfig::read(&config)?;
            let run = RunDir::new(&loaded.config.out_dir);
            let _lock = DirLock::acquire(run.root())?;
            let dim = model_dim(&loaded)?;
            let (encoder, _) = loaded.config.build_sae(dim)?;
            pipeline::stage_sae(&encoder, &run, &loaded.hash)?;
            pipeline::stage_concepts(&loaded.config.pipeline_spec(), &run, &loaded.hash)?;
            println!("concept: wrote concept vectors");
            Ok(())
        }
        Command::BiasGrid { config } => {
            let loaded = LoadedConfig::read(&config)?;
            let run = RunDir::new(&loaded.config.out_dir);
            let _lock = DirLock::acquire(run.root())?;
            let grid =
                pipeline::stage_grid(&loaded.config.pipeline_spec(), &run, &loaded.hash)?;
            println!(
                "bias-grid: wrote {} ({} ref pairs x {} targets)",
                run.path(&RunDir::grid_json_rel()).display(),
                grid.ref_pairs.len(),
                grid.targets.len()
            );
            Ok(())
        }
        Command::Metrics { metric, input, out } => metrics::run_metric(metric, &input, &out),
        Command::Correlate { a, b, p_threshold } => metrics::run_correlate(&a, &b, p_threshold),
        Command::Report { run } => {
            let config_path = run.join("config.json");
            if !config_path.exists() {
                return Err(CliError::Provenance(format!(
                    "{} not found; probe-gen stores the config there",
                    config_path.display()
                )));
            }
            let loaded = LoadedConfig::read(&config_path)?;
            let run = RunDir::new(&run);
            let _lock = DirLock::acquire(run.root())?;
            let mask = resolve_report_mask(&loaded)?;
            pipeline::stage_report(
                &loaded.config.pipeline_spec(),
                &run,
                &loaded.hash,
                mask.as_deref(),
            )?;
            println!("report: wrote {}", run.report_dir().display());
            Ok(())
        }
    }
}

/// Hidden dimension of the configured model, connecting to a bridge peer if
/// necessary.
fn model_dim(loaded: &LoadedConfig) -> Result<usize, CliError> {
    match &loaded.config.model {
        config::ModelConfig::Toy { dim, .. } => Ok(*dim),
        config::ModelConfig::Bridge { .. } => {
            let model = loaded.config.build_model()?;
            Ok(model.info().hidden_dim)
        }
    }
}

/// Relevance mask for salience curves: the synthetic SAE's ground truth, or
/// the user-supplied mask file for a file-based SAE.
fn resolve_report_mask(loaded: &LoadedConfig) -> Result<Option<Vec<bool>>, CliError> {
    match &loaded.config.sae {
        config::SaeConfig::Synthetic { .. } => {
            let dim = model_dim(loaded)?;
            Ok(loaded.config.build_sae(dim)?.1)
        }
        config::SaeConfig::File { mask_path, .. } => match mask_path {
            Some(path) => Ok(Some(config::read_mask_file(path)?)),
            None => Ok(None),
        },
    }
}
