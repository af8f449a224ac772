//! Command-line driver for the staged editing pipeline.
//!
//! Every command reads one run-config file (or synthesizes the default),
//! works inside the configured output directory, and exits nonzero with a
//! class-specific code on failure: 2 config, 3 data/format, 4 numeric,
//! 5 io.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use neurogate::editor::BaselineMode;
use neurogate::error::Error;
use neurogate::gate::stats;
use neurogate::pipeline::{
    read_run_config, run_pipeline, stage_aggregate, stage_edit, stage_evaluate, stage_gen_data,
    stage_locate, stage_probe, stage_train_base, sweep_alpha, write_run_config, RunConfig,
    StagePaths,
};
use neurogate::probe::read_probe_results;

#[derive(Parser)]
#[command(
    name = "neurogate",
    about = "Neuron-gated privacy editing of a toy vision-language transformer",
    version
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args, Clone)]
struct Common {
    /// Run configuration file; omitted means built-in defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Override the run seed (also reseeds model init and base training).
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Override the output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum BaselineArg {
    Gated,
    #[value(alias = "full_gradient")]
    FullGradient,
    #[value(alias = "gradient_ascent")]
    GradientAscent,
}

impl From<BaselineArg> for BaselineMode {
    fn from(b: BaselineArg) -> Self {
        match b {
            BaselineArg::Gated => BaselineMode::Gated,
            BaselineArg::FullGradient => BaselineMode::FullGradient,
            BaselineArg::GradientAscent => BaselineMode::GradientAscent,
        }
    }
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate the paired corpus, its splits, and the manifest.
    GenData(Common),
    /// Train the base model on the train split.
    TrainBase(Common),
    /// Optimize per-sample scaling vectors over the search band.
    Probe(Common),
    /// Aggregate probes into per-layer gates, taxonomies, and stats CSVs.
    Aggregate(Common),
    /// Pick the search center and radius-search the edit layer.
    LocateLayer(Common),
    /// Run the gated edit at the located layer.
    Edit {
        #[command(flatten)]
        common: Common,
        /// Editing baseline to apply.
        #[arg(long, value_enum)]
        baseline: Option<BaselineArg>,
    },
    /// Score the base and edited models on the held-out splits.
    Evaluate(Common),
    /// Emit frequency-histogram and strong-proportion CSVs from probe
    /// results.
    Stats {
        #[command(flatten)]
        common: Common,
        /// Probe-result file; defaults to the probe stage output.
        #[arg(long)]
        probe_results: Option<PathBuf>,
    },
    /// Run the probe-to-report pipeline once per alpha value.
    SweepAlpha {
        #[command(flatten)]
        common: Common,
        /// Comma-separated alpha values.
        #[arg(long, value_delimiter = ',', default_value = "1.0,1.25,1.5")]
        alphas: Vec<f64>,
    },
    /// Run every stage in order, resuming from digests.
    Pipeline {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum)]
        baseline: Option<BaselineArg>,
    },
}

fn load_config(common: &Common) -> Result<RunConfig, Error> {
    let mut cfg = match &common.config {
        Some(path) => read_run_config(path)?,
        None => {
            let seed = common.seed.unwrap_or(0);
            let out = common
                .out
                .clone()
                .unwrap_or_else(|| PathBuf::from("neurogate_out"));
            RunConfig::default_for(seed, out)
        }
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
        cfg.model.seed = seed;
        cfg.train.seed = seed;
    }
    if let Some(out) = &common.out {
        cfg.out_dir = out.clone();
    }
    cfg.validate()?;
    std::fs::create_dir_all(&cfg.out_dir)?;
    write_run_config(&cfg, &cfg.out_dir.join("run_config.json"))?;
    Ok(cfg)
}

fn describe(stage: &str, ran: bool) {
    if ran {
        println!("{stage}: done");
    } else {
        println!("{stage}: up to date, skipped");
    }
}

fn run(cmd: Cmd) -> Result<(), Error> {
    match cmd {
        Cmd::GenData(common) => {
            let cfg = load_config(&common)?;
            describe("gen-data", stage_gen_data(&cfg)?);
        }
        Cmd::TrainBase(common) => {
            let cfg = load_config(&common)?;
            describe("train-base", stage_train_base(&cfg)?);
        }
        Cmd::Probe(common) => {
            let cfg = load_config(&common)?;
            describe("probe", stage_probe(&cfg)?);
        }
        Cmd::Aggregate(common) => {
            let cfg = load_config(&common)?;
            describe("aggregate", stage_aggregate(&cfg)?);
        }
        Cmd::LocateLayer(common) => {
            let cfg = load_config(&common)?;
            describe("locate-layer", stage_locate(&cfg)?);
        }
        Cmd::Edit { common, baseline } => {
            let mut cfg = load_config(&common)?;
            if let Some(b) = baseline {
                cfg.edit.mode = b.into();
            }
            describe("edit", stage_edit(&cfg)?);
        }
        Cmd::Evaluate(common) => {
            let cfg = load_config(&common)?;
            describe("evaluate", stage_evaluate(&cfg)?);
            let paths = StagePaths::new(&cfg.out_dir);
            let post = neurogate::eval::read_report(&paths.post_report())?;
            println!(
                "rta_sensitive {:.4}  rta_benign {:.4}  eta {:.4}  utility {:.4}  generalization_rta {:.4}",
                post.rta_sensitive,
                post.rta_benign,
                post.eta,
                post.utility_accuracy,
                post.generalization_rta
            );
        }
        Cmd::Stats {
            common,
            probe_results,
        } => {
            let cfg = load_config(&common)?;
            let paths = StagePaths::new(&cfg.out_dir);
            let source = probe_results.unwrap_or_else(|| paths.probe_results());
            let results = read_probe_results(&source)?;
            let stats_dir = cfg.out_dir.join("stats");
            std::fs::create_dir_all(&stats_dir)?;
            let hist = stats::frequency_histogram(&results, cfg.gate_threshold)?;
            stats::write_histogram_csv(&hist, &stats_dir.join("histogram.csv"))?;
            let props = stats::strong_proportions(&results, cfg.gate_threshold)?;
            stats::write_proportions_csv(&props, &stats_dir.join("proportions.csv"))?;
            println!("stats: wrote {}", stats_dir.display());
        }
        Cmd::SweepAlpha { common, alphas } => {
            let cfg = load_config(&common)?;
            let sweep_dir = cfg.out_dir.join("alpha_sweep");
            let csv = sweep_alpha(&cfg, &alphas, &sweep_dir)?;
            println!("sweep-alpha: wrote {}", csv.display());
        }
        Cmd::Pipeline { common, baseline } => {
            let mut cfg = load_config(&common)?;
            if let Some(b) = baseline {
                cfg.edit.mode = b.into();
            }
            let summary = run_pipeline(&cfg)?;
            println!(
                "pipeline: ran {:?}, skipped {:?}",
                summary.stages_run, summary.stages_skipped
            );
            println!(
                "center {}  chosen layer {}",
                summary.center, summary.chosen_layer
            );
            println!(
                "pre : rta_sensitive {:.4}  rta_benign {:.4}  eta {:.4}  utility {:.4}  generalization_rta {:.4}",
                summary.pre.rta_sensitive,
                summary.pre.rta_benign,
                summary.pre.eta,
                summary.pre.utility_accuracy,
                summary.pre.generalization_rta
            );
            println!(
                "post: rta_sensitive {:.4}  rta_benign {:.4}  eta {:.4}  utility {:.4}  generalization_rta {:.4}",
                summary.post.rta_sensitive,
                summary.post.rta_benign,
                summary.post.eta,
                summary.post.utility_accuracy,
                summary.post.generalization_rta
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
