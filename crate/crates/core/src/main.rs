use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use powderdose::harness::{
    self, artifacts, report::render_fits, report::render_tables, ControllerKind, ExperimentConfig,
};
use powderdose::Error;

#[derive(Parser)]
#[command(
    name = "powderdose",
    version,
    about = "Simulated model-based powder dispensing benchmark"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Experiment config (JSON).
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Artifact directory.
    #[arg(long, env = "POWDERDOSE_OUT_DIR")]
    out: Option<PathBuf>,
    /// `model` or `pid`.
    #[arg(long)]
    controller: Option<String>,
    /// Powder archetype: glass-beads, msg, tio2.
    #[arg(long)]
    powder: Option<String>,
    /// Target mass in mg.
    #[arg(long)]
    target: Option<f64>,
}

#[derive(Subcommand)]
enum Command {
    /// Run one trial and write its trace.
    RunTrial {
        #[command(flatten)]
        common: Common,
        /// Trial index within the condition (selects the random stream).
        #[arg(long, default_value_t = 0)]
        trial: u32,
    },
    /// Run the full experiment matrix.
    RunSuite {
        #[command(flatten)]
        common: Common,
    },
    /// Rebuild tables and fit diagnostics from a suite's artifacts.
    Report {
        #[arg(long, env = "POWDERDOSE_OUT_DIR")]
        out: PathBuf,
    },
    /// Check a config file without running anything.
    ValidateConfig {
        #[arg(long)]
        config: PathBuf,
    },
}

fn load_config(common: &Common) -> Result<ExperimentConfig, Error> {
    let mut cfg = match &common.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &common.out {
        cfg.output_dir = Some(out.clone());
    }
    if let Some(c) = &common.controller {
        let kind = ControllerKind::parse(c)
            .ok_or_else(|| Error::Config(vec![format!("controller: unknown `{c}` (model|pid)")]))?;
        cfg.controller = harness::config::OneOrMany::One(kind);
    }
    if let Some(p) = &common.powder {
        cfg.powder = harness::config::OneOrMany::One(p.clone());
    }
    if let Some(t) = common.target {
        cfg.targets_mg = vec![t];
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::ValidateConfig { config } => {
            let cfg = ExperimentConfig::load(&config)?;
            cfg.validate()?;
            println!(
                "{}: ok ({} conditions)",
                config.display(),
                cfg.conditions()?.len()
            );
        }
        Command::RunTrial { common, trial } => {
            let cfg = load_config(&common)?;
            let cond = cfg.conditions()?.remove(0);
            let rec = harness::run_trial(&cond, cfg.seed, trial)?;
            println!(
                "{}: {} final={:.1} mg target={} mg steps={} time={:.0} s",
                rec.trial_id,
                rec.status.as_str(),
                rec.final_mass_mg,
                cond.target_mg,
                rec.steps,
                rec.sim_time_s
            );
            if let Some(dir) = &cfg.output_dir {
                std::fs::create_dir_all(dir).map_err(|source| Error::Io {
                    path: dir.clone(),
                    source,
                })?;
                let trace = dir.join(format!("{}.csv", rec.trial_id));
                artifacts::write_trace(&trace, &rec.rows)?;
                artifacts::write_json(&dir.join(format!("{}.json", rec.trial_id)), &rec)?;
                println!("trace written to {}", trace.display());
            }
        }
        Command::RunSuite { common } => {
            let cfg = load_config(&common)?;
            let run = harness::run_suite(&cfg)?;
            print!("{}", render_tables(&run.summary.conditions));
            let fits = harness::pooled_fits(run.all_records());
            if !fits.is_empty() {
                print!("{}", render_fits(&fits));
            }
            if let Some(dir) = &cfg.output_dir {
                println!("artifacts written to {}", dir.display());
            }
        }
        Command::Report { out } => {
            let report = harness::report(&out)?;
            print!("{}", report.text);
            if !report.problems.is_empty() {
                return Err(Error::Artifact {
                    path: out,
                    message: format!("{} artifact(s) could not be read", report.problems.len()),
                });
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e @ (Error::Config(_) | Error::UnknownPowder(_) | Error::InvalidInput { .. })) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
