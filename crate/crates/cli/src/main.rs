//! `audit`: command-line front end for regime-conditional robustness audits.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use regime_audit::dataset::Schema;
use regime_audit::pipeline::{self, RunConfig, SynthSpec};

#[derive(Debug, Parser)]
#[command(name = "audit", version, about = "Regime-conditional adversarial robustness audit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run the full protocol and write the report files.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Overrides `output_dir` from the config.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Generate a synthetic two-regime dataset plus a matching run config.
    Synth {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Re-run the protocol across seeds and summarise RAF stability.
    Replicate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_delimiter = ',', required = true)]
        seeds: Vec<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn output_dir(cfg: &RunConfig, out: Option<PathBuf>) -> Result<PathBuf> {
    match out.or_else(|| cfg.output_dir.clone()) {
        Some(dir) => Ok(dir),
        None => bail!("[config] no output directory: set `output_dir` in the config or pass --out"),
    }
}

fn run(config: &Path, out: Option<PathBuf>) -> Result<()> {
    let cfg = RunConfig::from_file(config)?;
    let dir = output_dir(&cfg, out)?;
    let report = pipeline::run_protocol(&cfg)?;
    for w in &report.warnings {
        log::warn!("{w}");
    }
    pipeline::emit_report(&report, &dir)?;
    let raf = report
        .cross
        .raf
        .factor
        .map(|f| format!("{f:.3}"))
        .unwrap_or_else(|| "undefined".into());
    println!(
        "calm ΔAUROC {:.4}, stress ΔAUROC {:.4}, RAF {raf}",
        report.calm.delta_auroc, report.stress.delta_auroc
    );
    println!("report written to {}", dir.display());
    Ok(())
}

fn synth(spec_path: &Path, out: &Path) -> Result<()> {
    let text =
        std::fs::read_to_string(spec_path).with_context(|| format!("[config] cannot read {}", spec_path.display()))?;
    let spec: SynthSpec =
        serde_json::from_str(&text).with_context(|| format!("[config] invalid synth spec {}", spec_path.display()))?;
    let (data, series) = pipeline::synth_generate(&spec)?;
    pipeline::write_synth(out, &data, &series)?;

    let mut cfg = RunConfig::new("data.csv", "stress.csv", Schema::new(vec![], "y", "t"));
    cfg.regimes = regime_audit::RegimeConfig::new(spec.tau_calm, spec.tau_stress)?;
    cfg.seeds = vec![spec.seed];
    cfg.output_dir = Some("report".into());
    let mut json = serde_json::to_string_pretty(&cfg)?;
    json.push('\n');
    std::fs::write(out.join("config.json"), json).context("[report] cannot write config.json")?;
    println!("{} rows written to {}", data.len(), out.display());
    Ok(())
}

fn replicate(config: &Path, seeds: Vec<u64>, out: Option<PathBuf>) -> Result<()> {
    let mut cfg = RunConfig::from_file(config)?;
    cfg.seeds = seeds;
    let summary = pipeline::replicate(&cfg)?;
    let fmt = |v: Option<f64>| v.map(|x| format!("{x:.3}")).unwrap_or_else(|| "undefined".into());
    for r in &summary.replicates {
        println!(
            "seed {}: calm ΔAUROC {:.4}, stress ΔAUROC {:.4}, RAF {}",
            r.seed,
            r.delta_auroc_calm,
            r.delta_auroc_stress,
            fmt(r.raf)
        );
    }
    println!(
        "RAF mean {} (min {}, max {}), pooled {}",
        fmt(summary.raf_mean),
        fmt(summary.raf_min),
        fmt(summary.raf_max),
        fmt(summary.pooled_raf)
    );
    if let Some(dir) = out.or(cfg.output_dir) {
        std::fs::create_dir_all(&dir).context("[report] cannot create output directory")?;
        let mut json = serde_json::to_string_pretty(&summary)?;
        json.push('\n');
        std::fs::write(dir.join("replicate.json"), json).context("[report] cannot write replicate.json")?;
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run { config, out } => run(&config, out),
        Command::Synth { spec, out } => synth(&spec, &out),
        Command::Replicate { config, seeds, out } => replicate(&config, seeds, out),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
