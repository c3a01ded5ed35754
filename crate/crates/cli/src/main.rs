use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use rspace::autoencoders::Variant;
use rspace::experiment::{self, ExperimentConfig, Layout, EXPERIMENTS};
use rspace::Error;

#[derive(Parser)]
#[command(
    name = "rspace",
    version,
    about = "Autoencoder r-space separability experiments on a synthetic 3D ultrasound phantom"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the phantom sequence and the reference patches.
    GenData {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one autoencoder variant on a patch pool drawn from the phantom.
    Train {
        #[arg(long)]
        model: Variant,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Build the deformation and translation subsets.
    Augment {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Encode a patch archive into a latent CSV.
    Encode {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        patches: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Sample vae codes with this seed instead of using the mean.
        #[arg(long)]
        vae_sample: Option<u64>,
    },
    /// Cluster a latent CSV and write precision and Calinski-Harabasz scores.
    Evaluate {
        #[arg(long)]
        latents: PathBuf,
        #[arg(long, default_value_t = 10)]
        k: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "")]
        variant: String,
        #[arg(long, default_value = "")]
        experiment: String,
    },
    /// Assemble report.json and table1.csv from a run directory.
    Report {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        dir: PathBuf,
    },
    /// Run every stage and write all artifacts into one directory.
    RunAll {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn exit_code(e: &Error) -> u8 {
    match e.root() {
        Error::Config(_) => 2,
        Error::Training(_) => 4,
        _ => 3,
    }
}

fn print_table(report: &experiment::ExperimentReport) {
    print!("{}", experiment::table_csv(report));
}

fn run(cli: Cli) -> rspace::Result<()> {
    match cli.command {
        Command::GenData { config, out } => {
            let cfg = ExperimentConfig::load(config)?;
            experiment::gen_data(&cfg, &out)?;
            println!("wrote {}", out.display());
        }
        Command::Train {
            model,
            config,
            data,
            out,
        } => {
            let cfg = ExperimentConfig::load(config)?;
            let summary = experiment::train_stage(&cfg, model, &data, &out)?;
            let last = summary.epoch_losses.last().copied().unwrap_or(f64::NAN);
            println!(
                "{model}: {} epochs, final loss {last:.6e}, wrote {}",
                summary.epoch_losses.len(),
                out.display()
            );
        }
        Command::Augment { config, data, out } => {
            let cfg = ExperimentConfig::load(config)?;
            experiment::augment_stage(&cfg, &data, &out)?;
            println!("wrote {}", out.display());
        }
        Command::Encode {
            model,
            patches,
            out,
            vae_sample,
        } => {
            experiment::encode_stage(&model, &patches, &out, vae_sample)?;
            println!("wrote {}", out.display());
        }
        Command::Evaluate {
            latents,
            k,
            seed,
            out,
            variant,
            experiment,
        } => {
            let r = experiment::evaluate_stage(&latents, k, seed, &variant, &experiment, &out)?;
            println!(
                "precision {:.4}  ch_ground_truth {}  ch_predicted {}",
                r.precision, r.ch_ground_truth, r.ch_predicted
            );
        }
        Command::Report { config, dir } => {
            let cfg = ExperimentConfig::load(config)?;
            let layout = Layout::new(&dir);
            let report = experiment::assemble_report(&cfg, &layout, 0.0)?;
            experiment::emit_report(&report, &layout)?;
            print_table(&report);
        }
        Command::RunAll { config, out } => {
            let cfg = ExperimentConfig::load(config)?;
            let report = experiment::run_all(&cfg, &out)?;
            print_table(&report);
            eprintln!("{} cells, {:.1} s", report.cells.len(), report.wall_time_s);
            debug_assert_eq!(report.cells.len(), Variant::ALL.len() * EXPERIMENTS.len());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    if let Some(n) = std::env::var("RSPACE_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
    {
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global().ok();
    }
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("rspace: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
