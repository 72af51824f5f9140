//! density.csv, report.json, convergence.log and the echoed run.cfg.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use ringscft::exchange::ExchangeRoute;
use ringscft::hf::HfResult;
use ringscft::scf::{EnergyComponents, ScfReport, SliceExperimentReport};
use serde::Serialize;

use crate::{CliError, RunConfig, RunSummary};

pub const DENSITY_FILE: &str = "density.csv";
pub const REPORT_FILE: &str = "report.json";
pub const LOG_FILE: &str = "convergence.log";
pub const ECHO_FILE: &str = "run.cfg";
pub const SLICE_LOG_FILE: &str = "slices.log";
pub const BETA_SCAN_FILE: &str = "beta_scan.csv";

/// Create `dir` if needed and prove a file can be written there.
pub fn preflight(dir: &Path) -> Result<(), CliError> {
    let fail = |source| CliError::Unwritable {
        path: dir.display().to_string(),
        source,
    };
    fs::create_dir_all(dir).map_err(fail)?;
    let probe = dir.join(".ringscft-write-test");
    fs::write(&probe, b"").map_err(fail)?;
    fs::remove_file(&probe).map_err(fail)
}

fn write(path: &Path, text: &str) -> Result<(), CliError> {
    fs::write(path, text).map_err(|e| CliError::io(path, e))
}

/// 17 significant digits.
fn sig17(v: f64) -> String {
    format!("{v:.16e}")
}

pub fn density_csv(report: &ScfReport, hf: Option<&HfResult>) -> String {
    let grid = report.grid();
    let radial = report.density.radial_density();
    let hf_n = hf.map(|h| h.density_on(grid));
    let mut s = String::from(if hf.is_some() { "r,n,4pi_r2_n,n_hf,4pi_r2_n_hf\n" } else { "r,n,4pi_r2_n\n" });
    for (j, r) in grid.nodes().iter().enumerate() {
        let _ = write!(s, "{},{},{}", sig17(*r), sig17(report.density.values[j]), sig17(radial[j]));
        if let Some(h) = &hf_n {
            let _ = write!(s, ",{},{}", sig17(h[j]), sig17(4.0 * std::f64::consts::PI * r * r * h[j]));
        }
        s.push('\n');
    }
    s
}

pub fn convergence_log(report: &ScfReport) -> String {
    report
        .residual_history
        .iter()
        .zip(&report.energy_history)
        .enumerate()
        .map(|(k, (res, e))| format!("iteration={} residual={} energy={}\n", k + 1, sig17(*res), sig17(*e)))
        .collect()
}

#[derive(Debug, Serialize)]
struct HfSummary {
    energy: f64,
    basis_size: usize,
    converged: bool,
    iterations: usize,
    virial_ratio: f64,
    /// `|E - E_hf| / |E_hf|`.
    relative_difference: f64,
}

#[derive(Debug, Serialize)]
struct SliceSummary {
    converged: bool,
    iterations: usize,
    residual: f64,
    initial_deviation: f64,
    final_deviation: f64,
    relative_deviation: f64,
}

#[derive(Debug, Serialize)]
struct Report<'a> {
    version: &'a str,
    converged: bool,
    iterations: usize,
    residual: f64,
    energy: f64,
    components: EnergyComponents,
    normalization_error: f64,
    shell_radii: Vec<f64>,
    residual_monotone: bool,
    degenerate_levels: bool,
    exchange_route: Option<&'static str>,
    digits_lost: Option<f64>,
    hf: Option<HfSummary>,
    slice_experiment: Option<SliceSummary>,
    config: BTreeMap<&'static str, String>,
}

pub fn report_json(
    report: &ScfReport,
    hf: Option<&HfResult>,
    slices: Option<&SliceExperimentReport>,
    cfg: &RunConfig,
) -> String {
    let r = Report {
        version: env!("CARGO_PKG_VERSION"),
        converged: report.converged,
        iterations: report.iterations,
        residual: report.residual,
        energy: report.energy,
        components: report.components,
        normalization_error: report.density.normalization_error(),
        shell_radii: report.density.shell_radii(),
        residual_monotone: report.residual_monotone,
        degenerate_levels: report.degenerate_levels,
        exchange_route: report.exchange_route.map(|r| match r {
            ExchangeRoute::Literal => "literal",
            ExchangeRoute::Pairwise => "pairwise",
        }),
        digits_lost: report.digits_lost,
        hf: hf.map(|h| HfSummary {
            energy: h.energy,
            basis_size: h.exponents.len(),
            converged: h.converged,
            iterations: h.iterations,
            virial_ratio: h.virial_ratio(),
            relative_difference: ((report.energy - h.energy) / h.energy).abs(),
        }),
        slice_experiment: slices.map(|s| SliceSummary {
            converged: s.converged,
            iterations: s.iterations,
            residual: s.residual,
            initial_deviation: s.deviation_history.first().copied().unwrap_or(0.0),
            final_deviation: s.final_deviation(),
            relative_deviation: s.relative_deviation(),
        }),
        config: cfg.echo().into_iter().collect(),
    };
    let mut s = serde_json::to_string_pretty(&r).expect("report serializes");
    s.push('\n');
    s
}

pub fn slice_log(s: &SliceExperimentReport) -> String {
    s.residual_history
        .iter()
        .zip(&s.deviation_history)
        .enumerate()
        .map(|(k, (res, d))| format!("iteration={} residual={} deviation={}\n", k + 1, sig17(*res), sig17(*d)))
        .collect()
}

pub fn write_outputs(
    dir: &Path,
    report: &ScfReport,
    hf: Option<&HfResult>,
    slices: Option<&SliceExperimentReport>,
    cfg: &RunConfig,
) -> Result<(), CliError> {
    write(&dir.join(DENSITY_FILE), &density_csv(report, hf))?;
    write(&dir.join(LOG_FILE), &convergence_log(report))?;
    write(&dir.join(REPORT_FILE), &report_json(report, hf, slices, cfg))?;
    write(&dir.join(ECHO_FILE), &cfg.echo_text())?;
    if let Some(s) = slices {
        write(&dir.join(SLICE_LOG_FILE), &slice_log(s))?;
    }
    Ok(())
}

pub fn write_beta_scan(dir: &Path, runs: &[RunSummary]) -> Result<(), CliError> {
    let mut s = String::from("beta,energy,converged,iterations\n");
    for r in runs {
        let _ = writeln!(s, "{},{},{},{}", r.beta, sig17(r.energy), r.converged, r.iterations);
    }
    write(&dir.join(BETA_SCAN_FILE), &s)
}
