use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use trajbench::cohort::{generate_synthetic_cohort, write_cohort_csv};
use trajbench::experiment::{
    preset, rerender_plots, run_experiment_file, run_grid, GenerateSpec, GridOptions, RunOutcome,
};
use trajbench::fidelity::MarginalKind;
use trajbench::Error;

#[derive(Parser)]
#[command(name = "trajbench", version, about = "Trajectory synthesis benchmark under irregular sampling")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment from a JSON config.
    Run { config: PathBuf },
    /// Run a preset grid of experiments.
    Grid {
        #[arg(long)]
        preset: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 2024)]
        master_seed: u64,
        /// Cohort size for every run, instead of the original cohort sizes.
        #[arg(long)]
        patients: Option<usize>,
        #[arg(long)]
        epochs: Option<usize>,
        /// Worker threads (default: one per core).
        #[arg(long)]
        workers: Option<usize>,
    },
    /// Re-render the plots of an existing run directory.
    Report {
        #[arg(long = "in")]
        input: PathBuf,
    },
    /// Write a synthetic cohort to CSV.
    Gen {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn summarize(name: &str, out: &RunOutcome) {
    let f = &out.report.fidelity;
    let t = &out.report.training;
    println!(
        "{name}: loss {:.4} -> {:.4} over {} epochs",
        t.first_loss(),
        t.final_loss(),
        t.epochs.len()
    );
    for m in &f.marginals {
        let kind = match m.kind {
            MarginalKind::Ks => "KS",
            MarginalKind::Tv => "TV",
        };
        println!("  {kind} {:<20} {:.4}", m.feature, m.value);
    }
    match f.correlation_gap.gap {
        Some(g) => println!(
            "  correlation gap {g:.4} over {} tiles ({} undefined)",
            f.correlation_gap.tiles_compared, f.correlation_gap.tiles_excluded
        ),
        None => println!("  correlation gap undefined (no mutually defined tiles)"),
    }
    println!("  artifacts in {}", out.output_dir.display());
}

fn execute(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::Run { config } => {
            let out = run_experiment_file(&config)?;
            summarize(&config.display().to_string(), &out);
        }
        Command::Grid {
            preset: name,
            out,
            master_seed,
            patients,
            epochs,
            workers,
        } => {
            let opts = GridOptions {
                master_seed,
                patients,
                epochs,
                workers,
            };
            let runs = preset(&name, &out, &opts)?;
            let summary = run_grid(&runs, &out, &opts)?;
            for e in &summary.runs {
                println!(
                    "{:<32} loss {:.4} -> {:.4}  max KS {}  max TV {}  gap {}",
                    e.name,
                    e.first_loss,
                    e.final_loss,
                    fmt_opt(e.max_ks),
                    fmt_opt(e.max_tv),
                    fmt_opt(e.correlation_gap)
                );
            }
        }
        Command::Report { input } => {
            for p in rerender_plots(&input)? {
                println!("{}", p.display());
            }
        }
        Command::Gen { spec, out } => {
            let (gen, seed) = GenerateSpec::load(&spec)?.resolve()?;
            let cohort = generate_synthetic_cohort(&gen, seed).map_err(|e| e.at_stage("cohort"))?;
            write_cohort_csv(&cohort, &out).map_err(|e| e.at_stage("write"))?;
            println!("wrote {} patients to {}", cohort.len(), out.display());
        }
    }
    Ok(())
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".into(), |x| format!("{x:.4}"))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_validation() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
