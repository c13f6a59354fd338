//! `gtbow`: synthetic data generation, vocabulary training, database
//! building, retrieval, localization and evaluation from the command line.
//!
//! Exit status is 0 on success, 1 when an operation fails (including a
//! strict localization run with unlocalized queries) and 2 for usage or
//! configuration errors.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

mod commands;
mod config;
mod error;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use gtbow::vocab::VocabularyKind;

use config::{Overrides, Preset, Profile, RunConfig};
use error::CliError;

#[derive(Parser, Debug)]
#[command(
    name = "gtbow",
    version,
    about = "Bag-of-words retrieval and localization for ground texture images"
)]
struct Cli {
    /// TOML run configuration; command-line flags take precedence.
    #[arg(long, global = true, env = "GTBOW_CONFIG")]
    config: Option<PathBuf>,
    /// System profile supplying the retrieval defaults.
    #[arg(long, global = true, env = "GTBOW_PROFILE", value_enum)]
    profile: Option<Profile>,
    /// Benchmark preset for synth, ablate and bench.
    #[arg(long, global = true, env = "GTBOW_PRESET", value_enum)]
    preset: Option<Preset>,
    /// Replaces the benchmark, vocabulary and RANSAC seeds.
    #[arg(long, global = true, env = "GTBOW_SEED")]
    seed: Option<u64>,
    /// Worker threads for parallel stages (0 picks automatically).
    #[arg(long, global = true, env = "GTBOW_THREADS")]
    threads: Option<usize>,
    /// More log output on standard error (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone, Default)]
pub struct AssignArgs {
    /// Words each descriptor is assigned to.
    #[arg(long)]
    pub r: Option<usize>,
    /// Soft-assignment kernel width in bits.
    #[arg(long)]
    pub sigma: Option<f64>,
}

#[derive(Args, Debug, Clone)]
pub struct EvalInputs {
    #[arg(long)]
    pub vocab: PathBuf,
    #[arg(long)]
    pub index: PathBuf,
    /// Posed database features, for relevance ground truth.
    #[arg(long)]
    pub db_features: PathBuf,
    /// Posed query features.
    #[arg(long)]
    pub queries: PathBuf,
    /// Minimum footprint overlap for a database image to count as relevant.
    #[arg(long)]
    pub relevance_threshold: Option<f64>,
    #[command(flatten)]
    pub assign: AssignArgs,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic world and write training, database and query features.
    Synth {
        #[arg(long)]
        out_dir: PathBuf,
        /// Observe without descriptor or orientation noise.
        #[arg(long)]
        noise_free: bool,
        /// Also write JSON twins of the feature files.
        #[arg(long)]
        json: bool,
    },
    /// Train a vocabulary on a feature file.
    TrainVocab {
        #[arg(long)]
        training: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum)]
        kind: Option<KindArg>,
        /// Requested number of flat words.
        #[arg(long)]
        words: Option<usize>,
        /// Tree branching factor.
        #[arg(long)]
        branching: Option<usize>,
        /// Tree depth.
        #[arg(long)]
        depth: Option<usize>,
        /// k-means iterations.
        #[arg(long)]
        iters: Option<usize>,
        /// Number of keypoint size bins.
        #[arg(long)]
        size_bins: Option<usize>,
        /// Use a single size bin.
        #[arg(long, conflicts_with_all = ["size_bins", "percentile_binning", "discrete_levels"])]
        no_size_binning: bool,
        /// Size bin boundaries at quantiles of the training sizes.
        #[arg(long, conflicts_with = "discrete_levels")]
        percentile_binning: bool,
        /// One size bin per discrete keypoint size level.
        #[arg(long)]
        discrete_levels: bool,
    },
    /// Transform database features and build an inverse index.
    BuildDb {
        #[arg(long)]
        vocab: PathBuf,
        #[arg(long)]
        features: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Orientation bins R.
        #[arg(long)]
        orientation_bins: Option<u32>,
        /// Also credit pair weights to neighbouring orientation bins.
        #[arg(long)]
        smear: bool,
        #[command(flatten)]
        assign: AssignArgs,
        /// Recompute idf over the database and write the updated vocabulary.
        #[arg(long, requires = "vocab_out")]
        idf_from_db: bool,
        #[arg(long)]
        vocab_out: Option<PathBuf>,
        /// Write each image's BoW vector as JSON lines.
        #[arg(long)]
        dump_bow: Option<PathBuf>,
    },
    /// Rank database images for each query (JSON lines).
    Query {
        #[arg(long)]
        vocab: PathBuf,
        #[arg(long)]
        index: PathBuf,
        #[arg(long)]
        queries: PathBuf,
        #[arg(long, default_value_t = 10)]
        top: usize,
        #[command(flatten)]
        assign: AssignArgs,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        dump_bow: Option<PathBuf>,
    },
    /// Estimate a pose for each query (JSON lines).
    Localize {
        #[arg(long)]
        vocab: PathBuf,
        #[arg(long)]
        index: PathBuf,
        /// Database features the index was built from, for keypoint positions.
        #[arg(long)]
        db_features: PathBuf,
        #[arg(long)]
        queries: PathBuf,
        #[command(flatten)]
        assign: AssignArgs,
        #[arg(long)]
        top_candidates: Option<usize>,
        #[arg(long)]
        min_inliers: Option<usize>,
        #[arg(long)]
        ransac_iterations: Option<u32>,
        #[arg(long)]
        inlier_tol_px: Option<f64>,
        /// Sample correspondences uniformly instead of by match weight.
        #[arg(long)]
        unweighted: bool,
        /// Exit with status 1 if any query is not localized.
        #[arg(long)]
        strict: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Mean average precision over posed queries.
    EvalMap {
        #[command(flatten)]
        inputs: EvalInputs,
        #[arg(long, default_value_t = 1000)]
        cutoff: usize,
        /// Per-query AP as CSV.
        #[arg(long)]
        per_query: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Recall@N curve as CSV.
    EvalRecall {
        #[command(flatten)]
        inputs: EvalInputs,
        #[arg(long, value_delimiter = ',', default_value = "1,5,10,50,100")]
        n: Vec<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score threshold for a false-positive rejection target.
    EvalThreshold {
        #[command(flatten)]
        inputs: EvalInputs,
        /// Scored results per query.
        #[arg(long, default_value_t = 10)]
        top_k: usize,
        /// Fraction of false-positive scores to reject.
        #[arg(long, default_value_t = 0.99)]
        rejection: f64,
        /// Score lists as CSV.
        #[arg(long)]
        scores_out: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the ablation grid on the benchmark and write mAP per configuration.
    Ablate {
        #[arg(long, default_value_t = 1000)]
        cutoff: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Time transform, insertion and query as the database grows.
    Bench {
        /// Database sizes to time at; defaults to a spread up to the survey size.
        #[arg(long, value_delimiter = ',')]
        sizes: Vec<usize>,
        #[arg(long, default_value_t = 20)]
        probes: usize,
        #[arg(long, default_value_t = 10)]
        top: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Debug, Clone, Copy, clap::ValueEnum)]
pub enum KindArg {
    Akm,
    Hkm,
}

impl From<KindArg> for VocabularyKind {
    fn from(k: KindArg) -> Self {
        match k {
            KindArg::Akm => VocabularyKind::Akm,
            KindArg::Hkm => VocabularyKind::Hkm,
        }
    }
}

fn init_logging(verbose: u8) {
    let default = match verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    let env = env_logger::Env::new().filter_or("GTBOW_LOG", default);
    let _ = env_logger::Builder::from_env(env).format_timestamp(None).try_init();
}

fn setup(cli: &Cli) -> Result<RunConfig, CliError> {
    let cfg = config::load_config(
        cli.config.as_deref(),
        Overrides {
            profile: cli.profile,
            preset: cli.preset,
            seed: cli.seed,
            threads: cli.threads,
        },
    )?;
    if cfg.threads > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.threads)
            .build_global()
            .map_err(|e| CliError::Config(format!("threads: {e}")))?;
    }
    Ok(cfg)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    init_logging(cli.verbose);
    let result = setup(&cli).and_then(|cfg| commands::run(cli.command, cfg));
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("gtbow: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
