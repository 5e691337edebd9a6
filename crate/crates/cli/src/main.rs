use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use eegvae_cli::impurity_cmd::impurity_files;
use eegvae_cli::report::render_text;
use eegvae_cli::{report, run, ExperimentConfig, Stage};

#[derive(Parser)]
#[command(name = "eegvae", version, about = "Subject-independent EEG representation learning experiments")]
struct Cli {
    /// Experiment configuration (TOML). Defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Run directory for artifacts and reports.
    #[arg(long, global = true, default_value = "runs/default")]
    out: PathBuf,
    /// Master seed, overriding the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for fold-level parallelism.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// Train a single VAE on every subject instead of one per fold.
    #[arg(long, global = true)]
    global_vae: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic corpus.
    Synth,
    /// Discard, resample, filter, epoch and normalize every recording.
    Preprocess,
    /// Train the VAE of every fold.
    TrainVae,
    /// Encode every subject's epochs with each fold's VAE.
    Extract,
    /// Train each pipeline's classifier on every fold.
    TrainClf,
    /// Score held-out subjects and write per-pipeline score tables.
    Evaluate,
    /// Dichotomy impurity of the run's features, or of stand-alone files.
    Impurity {
        /// Feature directory, `features.json`, or CSV with a `label` column.
        #[arg(long)]
        input: Option<PathBuf>,
        /// Second feature set for a first-quartile comparison.
        #[arg(long, requires = "input")]
        compare: Option<PathBuf>,
    },
    /// t-SNE projections and channel-importance topographic maps.
    Visualize,
    /// Summarize a completed run directory.
    Report {
        /// Run directory; defaults to --out.
        run_dir: Option<PathBuf>,
    },
    /// Every stage, in order, with caching.
    Run,
}

fn load_config(cli: &Cli) -> eegvae_cli::Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(j) = cli.jobs {
        cfg.jobs = j;
    }
    if cli.global_vae {
        cfg.global_vae = true;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = (|| -> eegvae_cli::Result<()> {
        let until = match &cli.command {
            Command::Report { run_dir } => {
                let r = report(run_dir.as_ref().unwrap_or(&cli.out))?;
                print!("{}", render_text(&r));
                return Ok(());
            }
            Command::Impurity { input: Some(input), compare } => {
                std::fs::create_dir_all(&cli.out).map_err(|e| eegvae_cli::Error::io(&cli.out, e))?;
                let (r, table) = impurity_files(input, compare.as_deref(), &cli.out)?;
                println!("{}: mean DI {:.4} over {} attributes, {} rows", r.tag, r.mean_di, r.attributes.len(), r.n_rows);
                if let Some(t) = table {
                    print!("{t}");
                }
                return Ok(());
            }
            Command::Synth => Stage::Synth,
            Command::Preprocess => Stage::Preprocess,
            Command::TrainVae => Stage::TrainVae,
            Command::Extract => Stage::Extract,
            Command::TrainClf => Stage::TrainClf,
            Command::Evaluate => Stage::Evaluate,
            Command::Impurity { input: None, .. } => Stage::Impurity,
            Command::Visualize => Stage::Visualize,
            Command::Run => Stage::Report,
        };
        let cfg = load_config(&cli)?;
        if let Some(r) = run(&cfg, &cli.out, until)? {
            print!("{}", render_text(&r));
        } else {
            println!("stages up to {until:?} complete in {}", cli.out.display());
        }
        Ok(())
    })();
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            let mut source = std::error::Error::source(&e);
            while let Some(s) = source {
                eprintln!("  caused by: {s}");
                source = s.source();
            }
            ExitCode::FAILURE
        }
    }
}
