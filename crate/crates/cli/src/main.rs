//! `musc`: validate datasets, run the detector, evaluate runs, plot maps and
//! generate synthetic benchmarks.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::Deserialize;

use musc_core::pipeline::{self, ModalitySelection, PipelineConfig, PipelineError};
use musc_core::report::{self, Colormap};
use musc_core::synth_bench::{generate_synthetic_dataset, SynthConfig};
use musc_core::tensor_io::{validate_dataset, DatasetManifest};

const EXIT_VALIDATION: u8 = 2;
const EXIT_RUNTIME: u8 = 3;

#[derive(Parser)]
#[command(name = "musc", version, about = "Training-free multimodal anomaly detection by mutual scoring")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Check a dataset manifest and every file it references.
    Validate {
        /// Dataset directory or dataset.json path.
        dataset: PathBuf,
    },
    /// Score a dataset and write maps, scores and a run summary.
    Run(RunArgs),
    /// Compute metrics of one or more runs against the dataset's ground truth.
    Eval {
        #[arg(long)]
        dataset: PathBuf,
        /// Run directories; several runs are reported as mean and std.
        #[arg(long = "run", required = true, num_args = 1..)]
        runs: Vec<PathBuf>,
        /// Write the CSV here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Render the pixel maps of a run as PNG heatmaps.
    Plot {
        run_dir: PathBuf,
        /// Dataset whose masks are drawn as contours.
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long, default_value = "turbo")]
        colormap: Colormap,
    },
    /// Generate a synthetic multimodal dataset with planted anomalies.
    Synth(SynthArgs),
}

#[derive(Args)]
struct RunArgs {
    /// Dataset directory or dataset.json path.
    dataset: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// TOML file with a [pipeline] table; flags take precedence.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, env = "MUSCORE_WORKERS")]
    workers: Option<usize>,
    #[arg(long)]
    modality: Option<ModalitySelection>,
    #[arg(long)]
    num_groups: Option<usize>,
    #[arg(long)]
    group_size: Option<usize>,
    #[arg(long)]
    k_iter: Option<usize>,
    #[arg(long)]
    curvature_threshold: Option<f64>,
    /// Comma-separated aggregation degrees, e.g. 1,3,5.
    #[arg(long, value_delimiter = ',')]
    degrees: Option<Vec<usize>>,
    #[arg(long)]
    interval_percent: Option<f64>,
    #[arg(long)]
    no_cae: bool,
    #[arg(long)]
    rescon_k: Option<usize>,
    #[arg(long)]
    cloud_stages: Option<usize>,
    #[arg(long)]
    subsets: Option<usize>,
    #[arg(long)]
    subset_seed: Option<u64>,
    #[arg(long)]
    png: bool,
    #[arg(long)]
    cache_dir: Option<PathBuf>,
}

#[derive(Args)]
struct SynthArgs {
    out_dir: PathBuf,
    /// TOML file with a [synth] table; flags take precedence.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    samples: Option<usize>,
    #[arg(long)]
    grid_side: Option<usize>,
    #[arg(long)]
    anomaly_rate: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct ConfigFile {
    #[serde(default)]
    pipeline: Option<PipelineConfig>,
    #[serde(default)]
    synth: Option<SynthConfig>,
    #[serde(default)]
    workers: Option<usize>,
}

fn read_config(path: Option<&Path>) -> Result<ConfigFile> {
    let Some(path) = path else {
        return Ok(ConfigFile::default());
    };
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn effective_run_config(args: &RunArgs, file: &ConfigFile) -> PipelineConfig {
    let mut cfg = file.pipeline.clone().unwrap_or_default();
    macro_rules! set {
        ($($field:ident),*) => {$(
            if let Some(v) = args.$field.clone() {
                cfg.$field = v;
            }
        )*};
    }
    set!(modality, num_groups, group_size, k_iter, curvature_threshold, degrees, interval_percent);
    set!(rescon_k, cloud_stages, subsets, subset_seed);
    if args.no_cae {
        cfg.cae = false;
    }
    if args.png {
        cfg.png = true;
    }
    if args.cache_dir.is_some() {
        cfg.cache_dir = args.cache_dir.clone();
    }
    cfg
}

fn cmd_run(args: &RunArgs) -> Result<()> {
    let file = read_config(args.config.as_deref())?;
    let cfg = effective_run_config(args, &file);
    let workers = args
        .workers
        .or(file.workers)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
    fs::create_dir_all(&args.out).with_context(|| format!("creating {}", args.out.display()))?;
    let summary = pipeline::run(&args.dataset, &cfg, &args.out, workers)?;
    for stage in &summary.stages {
        log::info!("{stage}: {:.3}s", summary.timings.seconds[stage]);
    }
    println!(
        "scored {} samples ({}) into {}",
        summary.num_samples,
        summary.modality,
        args.out.display()
    );
    Ok(())
}

fn cmd_validate(dataset: &Path) -> Result<bool> {
    let manifest = DatasetManifest::load(dataset).with_context(|| format!("loading {}", dataset.display()))?;
    let report = validate_dataset(&manifest);
    for e in &report.entries {
        println!("{}\t{:?}\t{}", e.sample_id, e.kind, e.message);
    }
    if report.is_ok() {
        println!("ok: {} samples", manifest.samples.len());
    }
    Ok(report.is_ok())
}

fn cmd_eval(dataset: &Path, runs: &[PathBuf], out: Option<&Path>) -> Result<()> {
    let manifest = DatasetManifest::load(dataset).with_context(|| format!("loading {}", dataset.display()))?;
    let rows = report::evaluate_runs(runs, &manifest)?;
    let csv = report::metrics_csv(&rows);
    match out {
        Some(p) => fs::write(p, csv).with_context(|| format!("writing {}", p.display()))?,
        None => print!("{csv}"),
    }
    Ok(())
}

fn cmd_plot(run_dir: &Path, dataset: Option<&Path>, colormap: Colormap) -> Result<()> {
    let manifest = dataset.map(DatasetManifest::load).transpose()?;
    let written = report::plot_run(run_dir, manifest.as_ref(), colormap)?;
    println!("wrote {} heatmaps to {}", written.len(), run_dir.join(pipeline::PLOTS_DIR).display());
    Ok(())
}

fn cmd_synth(args: &SynthArgs) -> Result<()> {
    let file = read_config(args.config.as_deref())?;
    let mut cfg = file.synth.unwrap_or_default();
    if let Some(v) = args.samples {
        cfg.num_samples = v;
    }
    if let Some(v) = args.grid_side {
        cfg.grid_side = v;
    }
    if let Some(v) = args.anomaly_rate {
        cfg.anomaly_rate = v;
    }
    if let Some(v) = args.seed {
        cfg.seed = v;
    }
    let (manifest, truth) = generate_synthetic_dataset(&cfg, &args.out_dir)?;
    println!(
        "generated {} samples ({} anomalous) in {}",
        manifest.samples.len(),
        truth.anomalous_count,
        args.out_dir.display()
    );
    Ok(())
}

fn exit_code_for(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<PipelineError>() {
        Some(PipelineError::Validation(report)) => {
            for e in &report.entries {
                eprintln!("{}\t{:?}\t{}", e.sample_id, e.kind, e.message);
            }
            EXIT_VALIDATION
        }
        _ => EXIT_RUNTIME,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Validate { dataset } => match cmd_validate(dataset) {
            Ok(true) => Ok(()),
            Ok(false) => return ExitCode::from(EXIT_VALIDATION),
            Err(e) => Err(e),
        },
        Command::Run(args) => cmd_run(args),
        Command::Eval { dataset, runs, out } => cmd_eval(dataset, runs, out.as_deref()),
        Command::Plot {
            run_dir,
            dataset,
            colormap,
        } => cmd_plot(run_dir, dataset.as_deref(), *colormap),
        Command::Synth(args) => cmd_synth(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code_for(&e))
        }
    }
}
