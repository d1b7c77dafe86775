use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, ValueEnum};
use serde_json::json;
use torus_lab::experiment::{error_json, run, write_artifacts, ExperimentConfig, Stage};
use torus_lab::Error;

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Subcommand {
    CheckPotential,
    Zones,
    NormalForm,
    Chart,
    Kam,
    Scan,
    Fit,
    All,
}

impl From<Subcommand> for Stage {
    fn from(s: Subcommand) -> Self {
        match s {
            Subcommand::CheckPotential => Stage::CheckPotential,
            Subcommand::Zones => Stage::Zones,
            Subcommand::NormalForm => Stage::NormalForm,
            Subcommand::Chart => Stage::Chart,
            Subcommand::Kam => Stage::Kam,
            Subcommand::Scan => Stage::Scan,
            Subcommand::Fit => Stage::Fit,
            Subcommand::All => Stage::All,
        }
    }
}

/// Invariant tori experiments for `|y|^2/2 + eps f(x)`.
#[derive(Debug, Parser)]
#[command(name = "torus-lab", version)]
struct Args {
    #[arg(value_enum)]
    subcommand: Subcommand,
    /// JSON experiment configuration.
    #[arg(long)]
    config: PathBuf,
    /// Output directory.
    #[arg(long, default_value = "torus-lab-out")]
    out: PathBuf,
    /// Worker threads (0: all cores); overrides the configuration.
    #[arg(long)]
    workers: Option<usize>,
    /// Overrides the configuration seed.
    #[arg(long)]
    seed: Option<u64>,
}

fn execute(args: &Args) -> Result<i32, Error> {
    let mut cfg = ExperimentConfig::load(&args.config)?;
    if let Some(w) = args.workers {
        cfg.workers = w;
    }
    if let Some(s) = args.seed {
        cfg = cfg.with_seed(s);
    }
    let out = run(args.subcommand.into(), &cfg)?;
    let written = write_artifacts(&out, &cfg, &args.out)?;
    let names: Vec<String> = written.iter().map(|p| p.display().to_string()).collect();
    println!(
        "{}",
        json!({
            "subcommand": out.stage.name(),
            "exit_code": out.exit_code(),
            "inconclusive": out.inconclusive,
            "artifacts": names,
        })
    );
    Ok(out.exit_code())
}

fn report_error(err: &Error, out_dir: &Path) {
    let v = error_json(err);
    let text = serde_json::to_string_pretty(&v).expect("error report serializes");
    if std::fs::create_dir_all(out_dir).is_ok() {
        let _ = std::fs::write(out_dir.join("error.json"), format!("{text}\n"));
    }
    println!("{}", v);
    eprintln!("torus-lab: {err}");
}

fn main() -> ExitCode {
    let args = Args::parse();
    match execute(&args) {
        Ok(code) => ExitCode::from(code as u8),
        Err(err) => {
            report_error(&err, &args.out);
            ExitCode::from(err.exit_code() as u8)
        }
    }
}
