use std::path::{Path, PathBuf};
use std::process::ExitCode;

use articulate::ingest::EnsembleConfig;
use articulate::pipeline::{self, OptimizeOptions};
use articulate::{fixtures, Error, Result};
use clap::{Parser, Subcommand};

/// Articulated shape discovery and fitting from silhouette ensembles.
#[derive(Parser, Debug)]
#[command(name = "articulate", version)]
struct Cli {
    /// Worker threads (default: logical cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Discover a symmetric 3D skeleton from the reference instance.
    Discover {
        ensemble: PathBuf,
        /// Defaults to `<ensemble>/config.json`.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        reference_index: Option<usize>,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Fit cameras, poses and part surfaces to every instance.
    Optimize {
        ensemble: PathBuf,
        /// Defaults to `<out>/skeleton3d.json`.
        #[arg(long)]
        skeleton: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        reference_index: Option<usize>,
        /// Comma-separated stage names to run.
        #[arg(long, value_delimiter = ',')]
        stages: Option<Vec<String>>,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// IOU and keypoint-transfer metrics of a finished run.
    Eval {
        run: PathBuf,
        #[arg(long)]
        keypoints: Option<PathBuf>,
        /// Defaults to the run directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write a synthetic quadruped ensemble with config and keypoints.
    Synth {
        #[arg(long, default_value_t = 3)]
        instances: usize,
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

fn load_config(explicit: Option<&Path>, ensemble: &Path) -> Result<EnsembleConfig> {
    let path = explicit.map_or_else(|| ensemble.join("config.json"), Path::to_path_buf);
    EnsembleConfig::load(&path)
}

fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Validation(format!("--threads: {e}")))?;
    }
    match cli.command {
        Command::Discover {
            ensemble,
            config,
            reference_index,
            out,
        } => {
            let cfg = load_config(config.as_deref(), &ensemble)?;
            let sk = pipeline::discover(&ensemble, &cfg, reference_index, &out)?;
            println!(
                "{}: {} joints, {} bones, {} symmetric pairs",
                out.join(pipeline::SKELETON).display(),
                sk.joints.len(),
                sk.num_bones(),
                sk.sym_pairs.len()
            );
        }
        Command::Optimize {
            ensemble,
            skeleton,
            config,
            seed,
            reference_index,
            stages,
            out,
        } => {
            let cfg = load_config(config.as_deref(), &ensemble)?;
            let skeleton = skeleton.unwrap_or_else(|| out.join(pipeline::SKELETON));
            let opts = OptimizeOptions {
                seed,
                reference: reference_index,
                stages,
            };
            let m = pipeline::optimize(&ensemble, &skeleton, &cfg, &opts, &out)?;
            for s in &m.stages {
                println!("{}: {} steps, loss {:.5} -> {:.5}", s.name, s.steps, s.initial_total, s.final_total);
            }
            println!("{}", out.join(pipeline::MANIFEST).display());
        }
        Command::Eval { run, keypoints, out } => {
            let out = out.unwrap_or_else(|| run.clone());
            let m = pipeline::eval(&run, keypoints.as_deref(), &out)?;
            println!("mean IOU {:.4}", m.mean_iou);
            if let Some(p) = m.pck.as_ref().and_then(|p| p.mean) {
                println!("mean PCK@{} {:.4}", pipeline::PCK_THRESHOLD, p);
            }
            println!("{}", out.join(pipeline::METRICS).display());
        }
        Command::Synth {
            instances,
            size,
            seed,
            out,
        } => {
            if instances == 0 || size < 32 {
                return Err(Error::Validation("synth needs at least one instance of size >= 32".into()));
            }
            fixtures::synthetic_ensemble(instances, size, seed).write(&out)?;
            println!("{}", out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("HILASSIE_LOG", "warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(pipeline::exit_code(&e) as u8)
        }
    }
}
