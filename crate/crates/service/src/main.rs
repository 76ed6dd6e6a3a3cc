use std::path::PathBuf;

use anyhow::Context;
use clap::{Parser, Subcommand, ValueEnum};
use cogs_core::eval::EvalSuite;
use cogs_core::vq::Domain;
use cogs_service::api::serve;
use cogs_service::commands;
use cogs_service::config::{RunConfig, CONFIG_ENV};
use cogs_service::state::AppState;

#[derive(Parser)]
#[command(name = "cogs", about = "Sketch and style conditioned image synthesis with latent-space refinement")]
struct Cli {
    /// TOML run configuration.
    #[arg(long, global = true, env = CONFIG_ENV)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Corpus construction.
    Data {
        #[command(subcommand)]
        action: DataAction,
    },
    /// Model training.
    Train {
        #[command(subcommand)]
        stage: TrainStage,
    },
    /// Samples one image.
    Generate {
        #[arg(long)]
        sketch: PathBuf,
        #[arg(long)]
        style: PathBuf,
        #[arg(long)]
        class: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        temperature: Option<f64>,
        #[arg(long)]
        top_k: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Nearest indexed images to a query image.
    Retrieve {
        #[arg(long)]
        query: PathBuf,
        #[arg(long)]
        class: String,
        #[arg(long, default_value_t = 5)]
        k: usize,
    },
    /// Filtered samples between a query image and an indexed neighbour.
    Interpolate {
        #[arg(long)]
        query: PathBuf,
        #[arg(long)]
        class: String,
        #[arg(long)]
        neighbor: String,
        #[arg(long, default_value_t = 50)]
        samples: usize,
        #[arg(long, default_value = "interpolants")]
        out: PathBuf,
    },
    /// Runs an evaluation suite on the validation split.
    Eval {
        #[arg(long, value_enum)]
        suite: SuiteArg,
        #[arg(long)]
        out: PathBuf,
    },
    /// Starts the HTTP server.
    Serve {
        #[arg(long)]
        port: Option<u16>,
    },
}

#[derive(Subcommand)]
enum DataAction {
    /// Generates the synthetic corpus.
    Build {
        /// Output root; defaults to `data_dir`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Subcommand)]
enum TrainStage {
    /// Every model in sequence.
    All,
    /// One tokeniser.
    Vq {
        #[arg(long, value_enum)]
        domain: DomainArg,
    },
    /// The conditional transformer, against saved tokenisers.
    Transformer,
    /// The refinement model of one class.
    Vae {
        #[arg(long)]
        class: String,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum DomainArg {
    Sketch,
    Image,
}

#[derive(Clone, Copy, ValueEnum)]
enum SuiteArg {
    Fid,
    Diversity,
    Style,
    Structure,
    Partition,
    Precision,
}

impl From<SuiteArg> for EvalSuite {
    fn from(s: SuiteArg) -> Self {
        match s {
            SuiteArg::Fid => EvalSuite::Fid,
            SuiteArg::Diversity => EvalSuite::Diversity,
            SuiteArg::Style => EvalSuite::Style,
            SuiteArg::Structure => EvalSuite::Structure,
            SuiteArg::Partition => EvalSuite::Partition,
            SuiteArg::Precision => EvalSuite::Precision,
        }
    }
}

fn print(value: &impl serde::Serialize) -> anyhow::Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn main() -> anyhow::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let mut cfg = RunConfig::load(cli.config.as_deref()).context("loading configuration")?;
    match cli.command {
        Command::Data { action: DataAction::Build { out } } => {
            let out = out.unwrap_or_else(|| cfg.data_dir.clone());
            let manifest = commands::build_data(&cfg, &out)?;
            print(&serde_json::json!({ "out": out, "records": manifest.len(), "classes": manifest.class_names }))?;
        }
        Command::Train { stage } => {
            let report = match stage {
                TrainStage::All => commands::train_all(&cfg)?,
                TrainStage::Vq { domain: DomainArg::Sketch } => commands::train_vq_stage(&cfg, Domain::Sketch)?,
                TrainStage::Vq { domain: DomainArg::Image } => commands::train_vq_stage(&cfg, Domain::Image)?,
                TrainStage::Transformer => commands::train_transformer_stage(&cfg)?,
                TrainStage::Vae { class } => commands::train_vae_stage(&cfg, &class)?,
            };
            print(&report)?;
        }
        Command::Generate { sketch, style, class, seed, temperature, top_k, out } => {
            cfg.sampling.temperature = temperature.unwrap_or(cfg.sampling.temperature);
            cfg.sampling.top_k = top_k.unwrap_or(cfg.sampling.top_k);
            cfg.validate()?;
            print(&commands::generate_file(&cfg, &sketch, &style, &class, seed, &out)?)?;
        }
        Command::Retrieve { query, class, k } => print(&commands::retrieve_file(&cfg, &query, &class, k)?)?,
        Command::Interpolate { query, class, neighbor, samples, out } => {
            print(&commands::interpolate_file(&cfg, &query, &class, &neighbor, samples, &out)?)?
        }
        Command::Eval { suite, out } => print(&commands::eval_suite(&cfg, suite.into(), &out)?)?,
        Command::Serve { port } => {
            if let Some(p) = port {
                cfg.server.port = p;
            }
            let state = AppState::load(cfg).context("loading models")?;
            tokio::runtime::Builder::new_multi_thread().enable_all().build()?.block_on(serve(state))?;
        }
    }
    Ok(())
}
