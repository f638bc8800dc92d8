use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use photocount::harness::{self, ExperimentSpec};
use photocount::sampler::load_counts;
use photocount::{Error, Result};

/// Photon-number statistics from low-resolution photon counters.
#[derive(Parser)]
#[command(version, about, long_about = None)]
struct Cli {
    /// TOML experiment file; built-in defaults are used without one
    #[arg(short, long, global = true)]
    config: Option<PathBuf>,

    /// Master seed, overriding the config
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Output directory, overriding the config
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Worker threads (defaults to all cores)
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate one experiment and reconstruct it at every listed M
    Simulate,
    /// Fidelity sweep over state families, means, M and maximum efficiency
    Sweep,
    /// Reconstruct from a counts CSV (columns nu,eta,m,count)
    Reconstruct {
        #[arg(long)]
        counts: PathBuf,
    },
    /// Convert charge spectra listed in a manifest (columns file,eta) to counts
    Ingest {
        #[arg(long)]
        manifest: PathBuf,
    },
    /// Compare EM with direct linear inversion on the same data
    Baseline,
}

fn run(cli: Cli) -> Result<()> {
    let mut spec = match &cli.config {
        Some(path) => ExperimentSpec::load(path)?,
        None => ExperimentSpec::default(),
    };
    if let Some(seed) = cli.seed {
        spec.seed = seed;
    }
    if let Some(out) = cli.out {
        spec.output_dir = out;
    }
    if let Some(threads) = cli.threads {
        if threads == 0 {
            return Err(Error::Config("--threads must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global()
            .map_err(|e| Error::Config(e.to_string()))?;
    }

    match cli.command {
        Command::Simulate => {
            let report = harness::run_single(&spec)?;
            println!("{}", harness::describe_single(&report));
        }
        Command::Reconstruct { counts } => {
            let counts = load_counts(&counts)?;
            let report = harness::reconstruct_counts(&spec, &counts)?;
            println!("{}", harness::describe_single(&report));
        }
        Command::Sweep => {
            let result = harness::run_sweep(&spec)?;
            let failed = result.cells.iter().filter(|c| c.error.is_some()).count();
            for c in &result.cells {
                match &c.error {
                    None => println!(
                        "{} mean={} eta_max={} M={}: G={:.4} +- {:.4}",
                        c.family.name(),
                        c.mean,
                        c.eta_max,
                        c.counting_capability,
                        c.mean_fidelity,
                        c.std_fidelity
                    ),
                    Some(e) => eprintln!(
                        "{} mean={} eta_max={} M={}: failed: {e}",
                        c.family.name(),
                        c.mean,
                        c.eta_max,
                        c.counting_capability
                    ),
                }
            }
            println!("wrote {}", spec.run_dir().display());
            if failed > 0 {
                return Err(Error::PartialFailure {
                    failed,
                    total: result.cells.len(),
                });
            }
        }
        Command::Ingest { manifest } => {
            let report = harness::run_ingest(&spec, &manifest)?;
            for (fit, t) in report.fits.iter().zip(&report.thresholds) {
                println!(
                    "peaks at {:?}, thresholds {:?}, reduced chi2 {:.3}, warnings {:?}",
                    fit.model.centers(),
                    t.values(),
                    fit.reduced_chi_square,
                    fit.warnings
                );
            }
            println!("wrote {}", spec.run_dir().join("counts.csv").display());
        }
        Command::Baseline => {
            let report = harness::run_baseline_comparison(&spec)?;
            for c in &report.comparisons {
                println!(
                    "M={}: EM L1={:.4} G={:.4}; linear L1={:.4}, {} negative entries (mass {:.4}), rank {}, condition {:.3e}",
                    c.counting_capability,
                    c.em_l1,
                    c.em_fidelity,
                    c.baseline_l1,
                    c.negative_entries,
                    c.negativity_mass,
                    c.effective_rank,
                    c.condition_number
                );
            }
            println!("wrote {}", spec.run_dir().display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let usage = e.use_stderr();
            let _ = e.print();
            return if usage { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_validation() {
                ExitCode::from(1)
            } else {
                ExitCode::from(2)
            }
        }
    }
}
