//! `agcv` — compositional safety verification of interconnected polynomial
//! systems.
//!
//! ```text
//! agcv [--config PATH] [--seed N] [--verbose] <COMMAND>
//!
//!   verify   <model>                      negotiate contracts; writes <model>.cert and <model>.trace
//!   check    <cert> <model>               re-validate a certificate without solving
//!   simulate <model> [--samples --horizon] integrate the closed loop from random initial states
//!   example  <platooning|rooms> [--n N]   write a built-in model
//!   sweep    <model> --parameter P --values LIST [--node ID]
//! ```
//!
//! Exit codes: 0 verdict True / success, 1 usage or model error, 2 verdict
//! False, 3 certificate check failure.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use agcv_core::contracts::Verdict;
use agcv_core::model::{self, ConfigFile, Model};
use agcv_core::negotiation::{self, Algorithm, NegotiationConfig};
use agcv_core::simulate::{self, SimulationConfig};
use agcv_core::sweep::{self, SweepParameter};
use anyhow::{anyhow, bail, Context, Result};
use clap::{Parser, Subcommand};

/// Exit code for verdict True and successful commands.
const EXIT_OK: u8 = 0;
/// Exit code for usage, I/O and model errors.
const EXIT_USAGE: u8 = 1;
/// Exit code for verdict False.
const EXIT_FALSE: u8 = 2;
/// Exit code for a failed certificate check.
const EXIT_CHECK: u8 = 3;

#[derive(Debug, Parser)]
#[command(name = "agcv", version, about = "Assume-guarantee safety verification with SOS barrier certificates")]
struct Cli {
    /// Configuration file overriding the model's [config] section.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Seed for all randomized steps.
    #[arg(long, global = true, value_name = "U64")]
    seed: Option<u64>,
    /// Print diagnostics to stderr.
    #[arg(long, global = true)]
    verbose: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Negotiate contracts and write `<model>.cert` and `<model>.trace`.
    Verify {
        /// Model file.
        model: PathBuf,
        /// Negotiation procedure: auto, acyclic, homogeneous or general.
        #[arg(long)]
        algorithm: Option<Algorithm>,
    },
    /// Re-validate a certificate against its model without solving.
    Check {
        /// Certificate file.
        certificate: PathBuf,
        /// Model file.
        model: PathBuf,
    },
    /// Simulate the closed loop from random initial states.
    Simulate {
        /// Model file.
        model: PathBuf,
        /// Number of trajectories.
        #[arg(long, default_value_t = 100)]
        samples: usize,
        /// Final time.
        #[arg(long, default_value_t = 20.0)]
        horizon: f64,
        /// Certificate whose barriers are tracked (default `<model>.cert` if present).
        #[arg(long)]
        certificate: Option<PathBuf>,
        /// Plot-data CSV (default `<model>.sim.csv`; a `.summary.csv` is written alongside).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write a built-in example model.
    Example {
        /// `platooning` or `rooms`.
        name: String,
        /// Number of follower vehicles or rooms.
        #[arg(long, default_value_t = 3)]
        n: u32,
        /// Output path (default `<name>.model`; `-` for stdout).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Sweep one parameter of a subsystem's local programs.
    Sweep {
        /// Model file.
        model: PathBuf,
        /// zeta, delta, gain_a or degree.
        #[arg(long)]
        parameter: SweepParameter,
        /// Comma-separated values, or `lo:hi:step`.
        #[arg(long)]
        values: String,
        /// Subsystem (default: largest id).
        #[arg(long)]
        node: Option<u32>,
        /// Output CSV (default stdout).
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match dispatch(&cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(EXIT_USAGE)
        }
    }
}

fn dispatch(cli: &Cli) -> Result<u8> {
    match &cli.command {
        Command::Verify { model, algorithm } => verify(cli, model, *algorithm),
        Command::Check { certificate, model } => check(cli, certificate, model),
        Command::Simulate { model, samples, horizon, certificate, out } => {
            simulate_cmd(cli, model, *samples, *horizon, certificate.as_deref(), out.as_deref())
        }
        Command::Example { name, n, out } => example(name, *n, out.as_deref()),
        Command::Sweep { model, parameter, values, node, out } => {
            sweep_cmd(cli, model, *parameter, values, *node, out.as_deref())
        }
    }
}

/// Loads a model and applies `--config` and `--seed`.
fn load(cli: &Cli, path: &Path) -> Result<Model> {
    let mut m = model::load_model(path)?;
    if let Some(cfg_path) = &cli.config {
        let text = std::fs::read_to_string(cfg_path).with_context(|| format!("reading {}", cfg_path.display()))?;
        let overrides = ConfigFile::parse(&text).with_context(|| format!("in {}", cfg_path.display()))?;
        overrides.apply(&mut m.config, &mut m.sim_tol).map_err(|e| anyhow!("{}: {e}", cfg_path.display()))?;
    }
    if let Some(seed) = cli.seed {
        m.config.seed = seed;
    }
    Ok(m)
}

fn sibling(path: &Path, ext: &str) -> PathBuf {
    path.with_extension(ext)
}

fn verify(cli: &Cli, path: &Path, algorithm: Option<Algorithm>) -> Result<u8> {
    let mut m = load(cli, path)?;
    if let Some(a) = algorithm {
        m.config.algorithm = a;
    }
    let start = Instant::now();
    let cert = negotiation::run(&m.interconnection, &m.config)?;
    for r in &cert.trace {
        println!("{}", model::trace_line(r));
    }
    let effective = ConfigFile::effective(&m.config, m.sim_tol);
    let cert_path = sibling(path, "cert");
    let trace_path = sibling(path, "trace");
    model::write_atomic(
        &cert_path,
        model::certificate_to_text(&cert, &m.interconnection, &m.sha256, &effective).as_bytes(),
    )?;
    model::write_atomic(&trace_path, model::trace_to_text(&cert.trace, &m.sha256).as_bytes())?;
    let verdict = match cert.verdict {
        Verdict::True => "True",
        Verdict::False => "False",
    };
    println!(
        "verdict {verdict} ({} algorithm, {} iteration{})",
        cert.algorithm,
        cert.iterations,
        if cert.iterations == 1 { "" } else { "s" }
    );
    if let Some(r) = &cert.reason {
        let node = r.node.map(|n| format!("subsystem {n}: ")).unwrap_or_default();
        println!("reason: {node}{} ({})", r.program, r.detail);
    }
    if cli.verbose {
        eprintln!(
            "negotiation took {:.2?}; wrote {} and {}",
            start.elapsed(),
            cert_path.display(),
            trace_path.display()
        );
    }
    Ok(if cert.verdict == Verdict::True { EXIT_OK } else { EXIT_FALSE })
}

fn check(cli: &Cli, cert_path: &Path, model_path: &Path) -> Result<u8> {
    let m = load(cli, model_path)?;
    let text = std::fs::read_to_string(cert_path).with_context(|| format!("reading {}", cert_path.display()))?;
    let loaded = model::certificate_from_text(&text, &m.interconnection)
        .with_context(|| format!("in {}", cert_path.display()))?;
    if loaded.model_sha256 != m.sha256 {
        bail!("certificate was produced for a different model (hash {} vs {})", loaded.model_sha256, m.sha256);
    }
    let mut cfg = NegotiationConfig::default();
    let mut sim_tol = m.sim_tol;
    loaded.config.apply(&mut cfg, &mut sim_tol).map_err(|e| anyhow!("embedded configuration: {e}"))?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    match negotiation::check_certificate(&m.interconnection, &loaded.certificate, &cfg) {
        Ok(report) => {
            println!(
                "certificate OK: {} contracts, {} edges, max residual {:e}, min sampled margin {:e}",
                report.contracts_checked, report.edges_checked, report.max_residual, report.min_sample_margin
            );
            Ok(EXIT_OK)
        }
        Err(e) => {
            println!("certificate check FAILED: {e}");
            Ok(EXIT_CHECK)
        }
    }
}

fn simulate_cmd(
    cli: &Cli,
    path: &Path,
    samples: usize,
    horizon: f64,
    certificate: Option<&Path>,
    out: Option<&Path>,
) -> Result<u8> {
    let m = load(cli, path)?;
    let default_cert = sibling(path, "cert");
    let cert_path = certificate.map(Path::to_path_buf).or_else(|| default_cert.exists().then_some(default_cert));
    let mut barriers = BTreeMap::new();
    if let Some(cp) = &cert_path {
        let text = std::fs::read_to_string(cp).with_context(|| format!("reading {}", cp.display()))?;
        let loaded =
            model::certificate_from_text(&text, &m.interconnection).with_context(|| format!("in {}", cp.display()))?;
        if loaded.certificate.verdict == Verdict::True {
            barriers = loaded.certificate.contracts.iter().map(|(&k, c)| (k, c.barrier.clone())).collect();
        }
    }
    let cfg =
        SimulationConfig { samples, horizon, seed: m.config.seed, tol: m.sim_tol, sos: m.config.synthesis.sos.clone() };
    let report = simulate::simulate(&m.interconnection, &barriers, &cfg)?;
    let csv_path = out.map(Path::to_path_buf).unwrap_or_else(|| sibling(path, "sim.csv"));
    let summary_path = csv_path.with_extension("summary.csv");
    model::write_atomic(&csv_path, report.to_csv().as_bytes())?;
    model::write_atomic(&summary_path, report.summary_csv().as_bytes())?;
    println!("trajectories {}", report.trajectories.len());
    println!("violations {}", report.violations());
    println!("min safe-region margin {:e}", report.min_safe_margin());
    if !barriers.is_empty() {
        println!("min barrier value {:e}", report.min_barrier());
    }
    if cli.verbose {
        eprintln!("wrote {} and {}", csv_path.display(), summary_path.display());
    }
    Ok(EXIT_OK)
}

fn example(name: &str, n: u32, out: Option<&Path>) -> Result<u8> {
    let text = model::example_model(name, n)?;
    match out {
        Some(p) if p == Path::new("-") => print!("{text}"),
        Some(p) => model::write_atomic(p, text.as_bytes())?,
        None => model::write_atomic(Path::new(&format!("{name}.model")), text.as_bytes())?,
    }
    Ok(EXIT_OK)
}

/// Parses `a,b,c` or `lo:hi:step` (inclusive of `hi` up to rounding).
fn parse_values(spec: &str) -> Result<Vec<f64>> {
    let spec = spec.trim();
    if spec.is_empty() {
        bail!("empty value list");
    }
    if let [lo, hi, step] = spec.split(':').collect::<Vec<_>>().as_slice() {
        let (lo, hi, step): (f64, f64, f64) = (lo.trim().parse()?, hi.trim().parse()?, step.trim().parse()?);
        if !(step > 0.0) || hi < lo {
            bail!("range {spec} needs lo ≤ hi and a positive step");
        }
        let n = ((hi - lo) / step + 1e-9).floor() as usize;
        return Ok((0..=n).map(|k| lo + k as f64 * step).collect());
    }
    spec.split(',').map(|v| v.trim().parse::<f64>().with_context(|| format!("bad value `{v}`"))).collect()
}

fn sweep_cmd(
    cli: &Cli,
    path: &Path,
    parameter: SweepParameter,
    values: &str,
    node: Option<u32>,
    out: Option<&Path>,
) -> Result<u8> {
    let m = load(cli, path)?;
    let values = parse_values(values)?;
    let node = match node {
        Some(n) => n,
        None => *m.interconnection.subsystems.keys().last().ok_or_else(|| anyhow!("model has no subsystems"))?,
    };
    let rows = sweep::run_sweep(&m.interconnection, node, parameter, &values, &m.config.synthesis)
        .map_err(|f| anyhow!("{f}"))?;
    let csv = sweep::sweep_csv(parameter, &rows, 2.0 * m.config.synthesis.bisection_tol);
    match out {
        Some(p) => model::write_atomic(p, csv.as_bytes())?,
        None => print!("{csv}"),
    }
    Ok(EXIT_OK)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn value_lists_and_ranges() {
        assert_eq!(parse_values("1, 2.5").unwrap(), vec![1.0, 2.5]);
        assert_eq!(parse_values("0:1:0.25").unwrap(), vec![0.0, 0.25, 0.5, 0.75, 1.0]);
        assert_eq!(parse_values("3").unwrap(), vec![3.0]);
        assert!(parse_values("").is_err());
        assert!(parse_values("1:0:1").is_err());
        assert!(parse_values("a,b").is_err());
    }

    #[test]
    fn cli_definition_is_consistent() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
    }
}
