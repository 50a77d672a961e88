//! `tiltlab` command-line interface.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde_json::json;
use tiltlab::foellmer::{self, DriftSpec};
use tiltlab::harness::{self, Batches, Quantity, SuiteConfig};
use tiltlab::report::CheckName;
use tiltlab::samplers::Functional;

#[derive(Parser)]
#[command(name = "tiltlab", version, about = "Tilted Gaussian measures and Gaussian functional inequalities")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// Run with this seed instead of the configured list
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Override the sample count of every batch
    #[arg(long, global = true)]
    samples: Option<usize>,
    /// Write the machine-readable output here
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Keep only the measures of this dimension
    #[arg(long, global = true)]
    dim: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Estimate one functional for every measure in a config
    Measure {
        config: PathBuf,
        #[arg(long)]
        functional: String,
    },
    /// Simulate the Föllmer process for every measure with an analytic drift
    Follmer {
        config: PathBuf,
        /// Run the path diagnostics and fail if any of them fails
        #[arg(long)]
        diagnose: bool,
    },
    /// Run the inequality checks
    Check {
        config: PathBuf,
        /// Comma-separated check names
        #[arg(long, value_delimiter = ',')]
        only: Option<Vec<String>>,
    },
    /// Print the table of a saved report
    Report { path: PathBuf },
}

fn load(path: &Path, g: &Global) -> Result<SuiteConfig> {
    let mut c = SuiteConfig::from_file(path).with_context(|| format!("reading {}", path.display()))?;
    if let Some(seed) = g.seed {
        c.seeds = vec![seed];
    }
    if let Some(n) = g.samples {
        if n < 2 {
            bail!("--samples must be at least 2");
        }
        c.samples = n;
        c.gamma_samples = n;
    }
    if let Some(d) = g.dim {
        c.restrict_dim(d);
    }
    if g.out.is_some() {
        c.output = g.out.clone();
    }
    Ok(c)
}

fn write_out(path: Option<&Path>, text: &str) -> Result<()> {
    if let Some(p) = path {
        fs::write(p, text).with_context(|| format!("writing {}", p.display()))?;
    }
    Ok(())
}

fn measure(c: &SuiteConfig, functional: &str) -> Result<bool> {
    let q: Quantity = functional.parse()?;
    let mut rows = Vec::new();
    println!("{:>6}  {:<24} {:<14} {:>14} {:>12}  method", "seed", "measure", "functional", "value", "std_error");
    for &seed in &c.seeds {
        for s in &c.measures {
            let m = &s.measure;
            let base = harness::measure_stream(seed, &m.name);
            let b = Batches::draw(&m.potential, c.samples, c.gamma_samples, &base)?;
            match harness::estimate_quantity(m, q, &b, c.term_source, c.w2_samples) {
                Ok(e) => {
                    println!(
                        "{:>6}  {:<24} {:<14} {:>14.6e} {:>12.3e}  {}",
                        seed,
                        m.name,
                        q.name(),
                        e.value,
                        e.std_error,
                        serde_json::to_value(e.method)?.as_str().unwrap_or("?")
                    );
                    rows.push(json!({"seed": seed, "measure": m.name, "functional": q.name(), "estimate": e}));
                }
                Err(err) => {
                    println!("{:>6}  {:<24} {:<14} not available: {err}", seed, m.name, q.name());
                    rows.push(json!({"seed": seed, "measure": m.name, "functional": q.name(), "error": err.to_string()}));
                }
            }
        }
    }
    write_out(c.output.as_deref(), &(serde_json::to_string_pretty(&rows)? + "\n"))?;
    Ok(true)
}

fn follmer(c: &SuiteConfig, diagnose: bool) -> Result<bool> {
    let mut all_pass = true;
    let mut doc = Vec::new();
    let mut text = String::new();
    for &seed in &c.seeds {
        for s in &c.measures {
            let m = &s.measure;
            if !m.potential.capabilities().analytic_drift {
                println!("{:>6}  {:<24} skipped: no analytic drift", seed, m.name);
                continue;
            }
            let base = harness::measure_stream(seed, &m.name);
            if diagnose {
                let b = Batches::draw(&m.potential, c.samples, c.gamma_samples, &base)?;
                let kl = harness::estimate_functional(m, Functional::Kl, &b, c.term_source)?;
                let (diags, _) = harness::follmer_diagnostics(m, &kl, c, &base.child(3))?;
                for d in &diags {
                    all_pass &= d.pass;
                    println!(
                        "{:>6}  {:<24} {:<18} {:>12.5e} {:>12.5e}  {}",
                        seed,
                        m.name,
                        d.name,
                        d.statistic,
                        d.threshold,
                        if d.pass { "PASS" } else { "FAIL" }
                    );
                }
                doc.push(json!({"seed": seed, "measure": m.name, "diagnostics": diags}));
            } else {
                let spec = DriftSpec::analytic(m.potential.clone())?;
                let ens = foellmer::simulate(&spec, c.follmer_steps, c.follmer_paths, &base.child(3).child(0))?;
                let energy = tiltlab::stats::mean_se(&foellmer::energy_per_path(&ens));
                println!(
                    "{:>6}  {:<24} paths {} steps {}  E∫|v|²dt = {:.6e} ± {:.2e}",
                    seed, m.name, ens.paths, ens.steps, energy.mean, energy.se
                );
                let mut buf = Vec::new();
                ens.write_terminal_text(&mut buf)?;
                text.push_str(&format!("# seed {seed} measure {}\n", m.name));
                text.push_str(std::str::from_utf8(&buf)?);
            }
        }
    }
    if diagnose {
        write_out(c.output.as_deref(), &(serde_json::to_string_pretty(&doc)? + "\n"))?;
    } else {
        write_out(c.output.as_deref(), &text)?;
    }
    Ok(all_pass)
}

fn check(mut c: SuiteConfig, only: Option<Vec<String>>) -> Result<bool> {
    if let Some(names) = only {
        c.checks = names
            .iter()
            .filter(|n| !n.trim().is_empty())
            .map(|n| n.parse::<CheckName>())
            .collect::<tiltlab::Result<_>>()?;
    }
    let report = harness::run_suite(&c)?;
    print!("{}", report.table());
    write_out(c.output.as_deref(), &report.to_json())?;
    Ok(!report.any_fails())
}

fn report(path: &Path) -> Result<bool> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let value: serde_json::Value = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    if value.get("runs").is_none() {
        bail!("{} is not a suite report", path.display());
    }
    print!("{}", harness::render_table(&value));
    Ok(value["summary"]["fails"].as_u64().unwrap_or(0) == 0)
}

fn run(cli: Cli) -> Result<bool> {
    let g = &cli.global;
    match cli.command {
        Command::Measure { config, functional } => measure(&load(&config, g)?, &functional),
        Command::Follmer { config, diagnose } => follmer(&load(&config, g)?, diagnose),
        Command::Check { config, only } => check(load(&config, g)?, only),
        Command::Report { path } => report(&path),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            let _ = std::io::stdout().flush();
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
