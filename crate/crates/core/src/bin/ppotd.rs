use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use ppotd::metrics::Split;
use ppotd::run::{cmd_eval, cmd_plot, cmd_train, gradcheck_csv, run_gradcheck, run_selftest, selftest_csv, summary_text, RunConfig, OPS};

#[derive(Parser)]
#[command(
    name = "ppotd",
    version,
    about = "Train and evaluate the phrase/object token decoder on synthetic scenes"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train on freshly generated scenes; writes loss.csv, model.ckpt and config.txt.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint on held-out scenes.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 200)]
        scenes: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Finite-difference check of every differentiable op; exits 1 on failure.
    Gradcheck {
        /// Deliberately corrupt the analytic gradient of one op.
        #[arg(long, hide = true)]
        corrupt: Option<String>,
    },
    /// Run the bundled invariant suites; exits 1 on failure.
    Selftest,
    /// Render a recall-curve or loss-trace CSV as SVG.
    Plot {
        #[arg(long)]
        csv: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn load_config(path: &Path) -> ppotd::Result<RunConfig> {
    let mut cfg = RunConfig::load(path)?;
    cfg.apply_seed_override(std::env::var("SEED").ok().as_deref())?;
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> ppotd::Result<bool> {
    match cli.command {
        Command::Train { config, out } => {
            let cfg = load_config(&config)?;
            let every = (cfg.iterations / 20).max(1);
            let trained = cmd_train(&cfg, &out, |row| {
                if row.step % every == 0 || row.step == 1 {
                    eprintln!(
                        "step {:>6}  total {:.4}  phrase {:.4}  object {:.4}  pocl {:.4}",
                        row.step, row.total, row.phrase, row.object, row.pocl
                    );
                }
            })?;
            let last = trained.trace.last().map(|r| r.total).unwrap_or(f64::NAN);
            println!(
                "trained {} steps, final loss {last:.4}, outputs in {}",
                trained.trace.len(),
                out.display()
            );
            Ok(true)
        }
        Command::Eval { ckpt, config, scenes, out } => {
            let cfg = load_config(&config)?;
            let summary = cmd_eval(&cfg, &ckpt, scenes, &out)?;
            print!("{}", summary_text(&summary, scenes));
            let overall = summary.report.ar(Split::Overall).unwrap_or(0.0);
            println!("overall AR {overall:.4}; outputs in {}", out.display());
            Ok(true)
        }
        Command::Gradcheck { corrupt } => {
            if let Some(op) = &corrupt {
                if !OPS.contains(&op.as_str()) {
                    return Err(ppotd::Error::Invalid(format!("no gradient check named {op}")));
                }
            }
            let rows = run_gradcheck(corrupt.as_deref())?;
            print!("{}", gradcheck_csv(&rows));
            let failed: Vec<&str> = rows.iter().filter(|r| !r.passed()).map(|r| r.op).collect();
            if !failed.is_empty() {
                eprintln!("gradient check failed: {}", failed.join(", "));
            }
            Ok(failed.is_empty())
        }
        Command::Selftest => {
            let rows = run_selftest()?;
            print!("{}", selftest_csv(&rows));
            Ok(rows.iter().all(|r| r.passed()))
        }
        Command::Plot { csv, out } => {
            cmd_plot(&csv, &out)?;
            println!("wrote {}", out.display());
            Ok(true)
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
