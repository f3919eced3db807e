use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use formctl::config::{ConfigError, ExperimentConfig};
use formctl::par::Execution;
use formctl::pipeline::{self, Artifacts, PipelineError, GRADIENT_TOLERANCE};
use formctl::simcore::ControllerMode;

/// Neuro-adaptive leader-follower formation control: data generation,
/// imitation training, closed-loop simulation and reproduction.
#[derive(Parser)]
#[command(name = "formctl", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate expert trajectories and write the dataset.
    GenData(Common),
    /// Train one policy per follower from the dataset in the output directory.
    Train(Common),
    /// Run the closed loop and write the CSV log, metrics and plots.
    Simulate {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_parser = parse_mode)]
        mode: Option<ControllerMode>,
    },
    /// Full pipeline followed by the acceptance gates.
    Reproduce(Common),
    /// Backprop against finite differences over a sweep of random networks.
    GradCheck(Common),
}

#[derive(Args, Clone)]
struct Common {
    /// Experiment config; the bundled preset is used when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    trajectories: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Fewer training trajectories, same horizon and gates.
    #[arg(long)]
    fast: bool,
}

fn parse_mode(s: &str) -> Result<ControllerMode, String> {
    s.parse()
}

/// Errors that map to exit status 2.
#[derive(Debug)]
struct UsageError(String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn load_config(c: &Common) -> Result<ExperimentConfig, UsageError> {
    let mut cfg = match &c.config {
        Some(path) => ExperimentConfig::load(path),
        None => Ok(ExperimentConfig::preset()),
    }
    .map_err(|e| UsageError(e.to_string()))?;
    if let Some(seed) = c.seed {
        cfg.seed = seed;
    }
    if c.fast {
        pipeline::fast_variant(&mut cfg);
    }
    if let Some(t) = c.trajectories {
        cfg.generation.trajectories = t;
    }
    if let Some(out) = &c.out {
        cfg.output.dir = out.clone();
    }
    cfg.validate().map_err(|e| UsageError(e.to_string()))?;
    Ok(cfg)
}

fn setup_threads() -> Result<(), UsageError> {
    let Ok(raw) = std::env::var("FORMCTL_THREADS") else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n >= 1)
        .ok_or_else(|| UsageError(format!("FORMCTL_THREADS must be a positive integer, got `{raw}`")))?;
    #[cfg(feature = "parallel")]
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| UsageError(e.to_string()))?;
    #[cfg(not(feature = "parallel"))]
    let _ = n;
    Ok(())
}

fn classify(e: PipelineError) -> anyhow::Error {
    match e {
        PipelineError::Config(c) => UsageError(c.to_string()).into(),
        PipelineError::Stage { stage, source } if matches!(*source, PipelineError::Config(_)) => {
            UsageError(format!("{stage}: {source}")).into()
        }
        other => other.into(),
    }
}

fn run(cli: Cli) -> anyhow::Result<bool> {
    setup_threads()?;
    let exec = Execution::Auto;
    match cli.command {
        Command::GenData(c) => {
            let cfg = load_config(&c)?;
            let out = Artifacts::new(&cfg.output.dir);
            let start = Instant::now();
            let (ds, summaries) = pipeline::gen_data(&cfg, &out, exec).map_err(classify)?;
            println!(
                "wrote {} ({} trajectories, {} records) in {:.1}s",
                out.dataset().display(),
                ds.meta.num_trajectories,
                ds.meta.num_records,
                start.elapsed().as_secs_f64()
            );
            for (i, recs) in ds.records.iter().enumerate() {
                println!("  agent {}: {} records", i + 1, recs.len());
            }
            let worst = summaries.iter().map(|s| s.final_error).fold(0.0, f64::max);
            let mean = summaries.iter().map(|s| s.final_error).sum::<f64>() / summaries.len() as f64;
            println!("expert final error: mean {mean:.3e}, worst {worst:.3e}");
            Ok(true)
        }
        Command::Train(c) => {
            let cfg = load_config(&c)?;
            let out = Artifacts::new(&cfg.output.dir);
            let start = Instant::now();
            let trained = pipeline::train(&cfg, &out, exec).map_err(classify)?;
            for (_, r) in &trained {
                println!(
                    "agent {}: {} samples, loss {:.4e} -> {:.4e} (epoch {}), validation {}",
                    r.agent,
                    r.num_samples,
                    r.report.initial_loss(),
                    r.report.final_loss(),
                    r.report.kept_epoch,
                    r.report
                        .validation_loss
                        .map_or("n/a".into(), |v| format!("{v:.4e}"))
                );
            }
            println!(
                "wrote {} policies to {} in {:.1}s",
                trained.len(),
                out.dir.display(),
                start.elapsed().as_secs_f64()
            );
            Ok(true)
        }
        Command::Simulate { common, mode } => {
            let cfg = load_config(&common)?;
            let mode = mode.unwrap_or(cfg.simulation.mode);
            let out = Artifacts::new(&cfg.output.dir);
            let policies = if mode.needs_policies() {
                Some(pipeline::load_policies(&cfg, &out).map_err(classify)?)
            } else {
                None
            };
            let start = Instant::now();
            let log = pipeline::run(&cfg, mode, policies.as_deref(), exec).map_err(classify)?;
            let m = pipeline::write_run(&log, &out).map_err(classify)?;
            println!(
                "mode {mode}: {} logged steps in {:.1}s, config {}",
                log.len(),
                start.elapsed().as_secs_f64(),
                &m.config_hash[..12]
            );
            if log.offline_expert {
                println!("  (expert: offline teacher with model access)");
            }
            for (i, s) in m.agents.iter().enumerate() {
                println!(
                    "  agent {}: initial {:.3e}, final {:.3e}, peak {:.3e}, settling {}",
                    i + 1,
                    s.initial,
                    s.final_value,
                    s.peak,
                    s.settling_time.map_or("never".into(), |t| format!("{t:.1}s"))
                );
            }
            println!("  locality violations: {}", m.locality_violations);
            let eq = pipeline::equilibrium_error(&cfg, &log).map_err(classify)?;
            println!("  max distance to formation equilibrium: {eq:.3e}");
            println!("wrote {}", out.sim_csv(mode).display());
            Ok(true)
        }
        Command::Reproduce(c) => {
            let cfg = load_config(&c)?;
            let out = Artifacts::new(&cfg.output.dir);
            let start = Instant::now();
            let rep = pipeline::reproduce(&cfg, &out, exec, |stage| {
                eprintln!("[{:6.1}s] {stage}", start.elapsed().as_secs_f64())
            })
            .map_err(classify)?;
            println!("{:<22} {:<6} detail", "gate", "result");
            for g in &rep.gates {
                println!(
                    "{:<22} {:<6} {}",
                    g.name,
                    if g.passed { "PASS" } else { "FAIL" },
                    g.detail
                );
            }
            for g in &rep.diagnostics {
                println!(
                    "{:<22} {:<6} {} (informational)",
                    g.name,
                    if g.passed { "pass" } else { "miss" },
                    g.detail
                );
            }
            let ok = rep.passed();
            println!(
                "verdict: {} ({:.1}s, artifacts in {})",
                if ok { "PASS" } else { "FAIL" },
                start.elapsed().as_secs_f64(),
                out.dir.display()
            );
            Ok(ok)
        }
        Command::GradCheck(c) => {
            let cfg = load_config(&c)?;
            let cases = pipeline::gradient_sweep(cfg.system.n, cfg.system.followers, exec)
                .context("gradient check")?;
            let mut ok = true;
            for g in &cases {
                let pass = g.max_relative_error <= GRADIENT_TOLERANCE;
                ok &= pass;
                println!(
                    "depth {} width {:>2} seed {}: max relative error {:.3e} {}",
                    g.depth,
                    g.width,
                    g.seed,
                    g.max_relative_error,
                    if pass { "ok" } else { "FAIL" }
                );
            }
            println!("verdict: {}", if ok { "PASS" } else { "FAIL" });
            Ok(ok)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<UsageError>().is_some() || e.downcast_ref::<ConfigError>().is_some() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
