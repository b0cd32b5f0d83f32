use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use cu_lab::harness::{self, RunConfig};
use cu_lab::{Error, Result};

#[derive(Parser)]
#[command(name = "cu-lab", version, about = "Collaborative-uncertainty experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a dataset into OUT/data.
    GenData(Common),
    /// Train a model into OUT.
    Train(Common),
    /// Evaluate OUT/model.ckpt on the test split.
    Eval(Common),
    /// Run the configured ablation grid into OUT.
    Ablate(Common),
    /// Aggregate every report below OUT into summary and plot CSVs.
    Report(Common),
}

#[derive(Args)]
struct Common {
    /// Run configuration (TOML).
    #[arg(long, conflicts_with = "preset", required_unless_present = "preset")]
    config: Option<PathBuf>,
    /// Built-in configuration instead of a file.
    #[arg(long)]
    preset: Option<String>,
    /// Overrides the configured seed and CU_LAB_SEED.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; defaults to runs/<name>.
    #[arg(long)]
    out: Option<PathBuf>,
}

impl Common {
    fn resolve(&self) -> Result<(RunConfig, PathBuf)> {
        let cfg = match (&self.config, &self.preset) {
            (Some(path), _) => RunConfig::load(path)?,
            (None, Some(name)) => harness::preset(name)?,
            (None, None) => unreachable!("clap requires one of them"),
        };
        let cfg = cfg.with_seed_overrides(self.seed)?;
        let out = self.out.clone().unwrap_or_else(|| Path::new("runs").join(&cfg.run.name));
        Ok((cfg, out))
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData(c) => {
            let (cfg, out) = c.resolve()?;
            let hash = harness::run_gen_data(&cfg, &out)?;
            println!("wrote {} (sha256 {hash})", out.join("data").display());
        }
        Command::Train(c) => {
            let (cfg, out) = c.resolve()?;
            let data = harness::load_data(&cfg)?;
            let (outcome, record) = harness::run_train(&cfg, &data, &out)?;
            let last = outcome.trace.last().map_or(f64::NAN, |r| r.total);
            println!(
                "trained {} steps (final loss {last:.4}, selected step {}) into {}",
                record.steps,
                record.best_step,
                out.display()
            );
            if !record.health.ok {
                eprintln!("note: smoothed loss rose by {:.1}% after warm-up", 100.0 * record.health.worst_rise);
            }
        }
        Command::Eval(c) => {
            let (cfg, out) = c.resolve()?;
            let data = harness::load_data(&cfg)?;
            let report = harness::run_eval(&cfg, &data, &out)?;
            for (k, v) in &report.metrics {
                println!("{k:>14} {v:.6}");
            }
        }
        Command::Ablate(c) => {
            let (cfg, out) = c.resolve()?;
            let grid = cfg
                .ablate
                .grid
                .ok_or_else(|| Error::Config("no [ablate] grid configured".into()))?;
            let report = harness::ablate(&cfg, grid, Some(&out))?;
            println!("{} cells into {}", report.cells.len(), out.display());
            for d in &report.deltas {
                println!("{:>14} {:>10} {:>12} {:+.2}%", d.dataset, d.interaction, d.metric, 100.0 * d.delta);
            }
        }
        Command::Report(c) => {
            let (_, out) = c.resolve()?;
            let n = harness::aggregate(&out)?;
            println!("{n} reports into {} and {}", out.join("summary.csv").display(), out.join("plot.csv").display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_numeric() { 2 } else { 1 })
        }
    }
}
