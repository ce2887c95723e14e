use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use centershift_cli::config::{DatasetSpec, ExperimentSpec};
use centershift_cli::experiment::{ablate, build_datasets, exit_code, prepare_out_dir, run, MeanStd, ModeRow};
use centershift_core::data::write_csv;
use centershift_core::gradcheck::{self, GRADCHECK_TOL};
use centershift_core::methods::{mode_names, Registry};
use centershift_core::{Error, Result};
use clap::{Args, Parser, Subcommand};

/// Shared-center domain adaptation experiments.
#[derive(Parser, Debug)]
#[command(name = "centershift", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train one mode over every configured seed.
    Run {
        #[command(flatten)]
        common: Common,
        /// Override `[train] mode`.
        #[arg(long)]
        mode: Option<String>,
    },
    /// Train several modes on identical data and seeds and tabulate them.
    Ablate {
        #[command(flatten)]
        common: Common,
        /// Comma-separated modes; all of them when omitted.
        #[arg(long, value_delimiter = ',')]
        modes: Vec<String>,
    },
    /// Compare analytic and finite-difference gradients of every loss.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Damage the analytic gradients (negative control).
        #[arg(long, hide = true)]
        perturb: bool,
    },
    /// Write the configured source and target sets as CSV.
    Generate {
        #[command(flatten)]
        common: Common,
    },
    /// List the training modes and their loss terms.
    Modes,
}

#[derive(Args, Debug)]
struct Common {
    /// Experiment file; built-in defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override `[train] seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Override `[output] repeat`.
    #[arg(long)]
    repeat: Option<usize>,
    /// Override `[output] dir`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Write into a non-empty output directory.
    #[arg(long)]
    force: bool,
    /// CSV inputs start with a header line.
    #[arg(long)]
    csv_header: bool,
}

impl Common {
    fn spec(&self) -> Result<ExperimentSpec> {
        let mut spec = match &self.config {
            Some(p) => ExperimentSpec::load(p)?,
            None => ExperimentSpec::default(),
        };
        if let Some(s) = self.seed {
            spec.train.seed = s;
        }
        if let Some(r) = self.repeat {
            spec.output.repeat = r;
        }
        if let Some(o) = &self.out {
            spec.output.dir = o.clone();
        }
        if self.csv_header {
            match &mut spec.dataset {
                DatasetSpec::Csv { header, .. } => *header = true,
                _ => return Err(Error::config("--csv-header needs a csv dataset")),
            }
        }
        Ok(spec)
    }
}

fn pct(m: Option<&MeanStd>) -> String {
    m.map_or_else(|| "n/a".into(), |m| format!("{:.2} ± {:.2}", 100.0 * m.mean, 100.0 * m.std))
}

fn print_table(rows: &[ModeRow]) {
    println!("{:<20} {:>5} {:>18} {:>16}", "mode", "runs", "target acc (%)", "A-distance");
    for r in rows {
        println!(
            "{:<20} {:>5} {:>18} {:>16}",
            r.mode,
            r.runs.len(),
            pct(r.target_accuracy.as_ref()),
            format!("{:.3} ± {:.3}", r.a_distance.mean, r.a_distance.std)
        );
    }
}

fn execute(cli: Cli) -> Result<u8> {
    match cli.command {
        Command::Run { common, mode } => {
            let mut spec = common.spec()?;
            if let Some(m) = mode {
                spec.train.mode = m;
            }
            let out = spec.output.dir.clone();
            let runs = run(&spec, &out, common.force)?;
            let row = ModeRow::summarize(&spec.train.mode, runs);
            print_table(std::slice::from_ref(&row));
            println!("wrote {}", out.display());
            Ok(0)
        }
        Command::Ablate { common, modes } => {
            let spec = common.spec()?;
            let modes = if modes.is_empty() {
                mode_names().into_iter().map(String::from).collect()
            } else {
                modes
            };
            let out = spec.output.dir.clone();
            let rows = ablate(&spec, &modes, &out, common.force)?;
            print_table(&rows);
            println!("wrote {}", out.join("comparison.csv").display());
            Ok(0)
        }
        Command::Gradcheck { seed, perturb } => {
            let start = Instant::now();
            let reports = gradcheck::run_all(seed, perturb)?;
            println!("{:<22} {:<44} {:>9} {:>14}  status", "loss", "with respect to", "instances", "max rel error");
            for r in &reports {
                println!(
                    "{:<22} {:<44} {:>9} {:>14.3e}  {}",
                    r.loss,
                    r.wrt,
                    r.instances,
                    r.max_rel_error,
                    if r.passed() { "ok" } else { "FAIL" }
                );
            }
            let failed: Vec<&str> = reports.iter().filter(|r| !r.passed()).map(|r| r.loss).collect();
            println!("tolerance {GRADCHECK_TOL:e}, {:.2} s", start.elapsed().as_secs_f64());
            if failed.is_empty() {
                Ok(0)
            } else {
                eprintln!("gradient check failed for: {}", failed.join(", "));
                Ok(1)
            }
        }
        Command::Generate { common } => {
            let spec = common.spec()?;
            spec.validate_data_and_output()?;
            let out = spec.output.dir.clone();
            prepare_out_dir(&out, common.force)?;
            let (s, t) = build_datasets(&spec, spec.train.seed)?;
            write_csv(&s, &out.join("source.csv"))?;
            write_csv(&t, &out.join("target.csv"))?;
            println!("wrote {} and {}", out.join("source.csv").display(), out.join("target.csv").display());
            Ok(0)
        }
        Command::Modes => {
            let reg = Registry::builtin();
            println!("{:<20} {:<8} {:<10} {:<7} {:<11} classifier", "mode", "target", "alignment", "domain", "centers");
            for name in reg.names() {
                let d = reg.create(name)?.descriptor();
                let yn = |b: bool| if b { "yes" } else { "no" };
                println!(
                    "{:<20} {:<8} {:<10} {:<7} {:<11} {:?}",
                    d.name,
                    yn(d.terms.target),
                    yn(d.terms.alignment),
                    yn(d.terms.domain),
                    format!("{:?}", d.center_layout),
                    d.classifier
                );
            }
            Ok(0)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
