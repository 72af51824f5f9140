//! Command-line front end: configuration, run orchestration and outputs.

pub mod config;
pub mod hf_cache;
pub mod output;

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use log::info;
use ringscft::hf::{reference_exponents, HfResult};
use ringscft::scf::{run_scf, slice_perturbation_experiment, Mode, ScfConfig, SliceExperimentReport};
use thiserror::Error;

pub use config::{ConfigError, Oracle, RunConfig};

pub const EXIT_CONVERGED: u8 = 0;
pub const EXIT_INPUT: u8 = 1;
pub const EXIT_NOT_CONVERGED: u8 = 2;

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigError),

    #[error("output path {path} is not writable: {source}")]
    Unwritable { path: String, source: std::io::Error },

    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },

    #[error(transparent)]
    Compute(#[from] ringscft::error::Error),
}

impl CliError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.display().to_string(),
            source,
        }
    }

    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Compute(ringscft::error::Error::Divergence { .. }) => EXIT_NOT_CONVERGED,
            _ => EXIT_INPUT,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "ringscft", version, about = "Ring-polymer SCFT for closed-shell atoms")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run the self-consistent field iteration and write outputs.
    Run(RunArgs),
}

#[derive(Debug, Default, Args)]
pub struct RunArgs {
    /// key=value configuration file; flags override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_parser = ["exchange", "naive", "energetic"])]
    pub mode: Option<String>,
    /// Nuclear charge.
    #[arg(long = "Z")]
    pub z: Option<u32>,
    #[arg(long)]
    pub beta: Option<f64>,
    /// Number of even-tempered basis exponents.
    #[arg(long)]
    pub basis: Option<usize>,
    #[arg(long)]
    pub lmax: Option<usize>,
    /// Field residual tolerance.
    #[arg(long)]
    pub tol: Option<f64>,
    /// Extended-precision digits for the cancellation check.
    #[arg(long)]
    pub digits: Option<u32>,
    #[arg(long)]
    pub slices: Option<usize>,
    /// Initial per-slice perturbation amplitude (energetic mode).
    #[arg(long)]
    pub perturb: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, value_parser = ["hf", "none"])]
    pub oracle: Option<String>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Pauli contact strength for energetic mode.
    #[arg(long)]
    pub pauli_strength: Option<f64>,
    #[arg(long)]
    pub mixing: Option<f64>,
    #[arg(long)]
    pub max_iter: Option<usize>,
    /// Use Anderson mixing.
    #[arg(long)]
    pub anderson: bool,
    /// Comma-separated inverse temperatures, one subdirectory each.
    #[arg(long, value_delimiter = ',')]
    pub beta_list: Option<Vec<f64>>,
    #[arg(long)]
    pub cache: Option<PathBuf>,
}

impl RunArgs {
    /// File values (or defaults) with flags applied on top.
    pub fn resolve(&self) -> Result<RunConfig, CliError> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::from_file(p)?,
            None => RunConfig::default(),
        };
        let s = &mut cfg.scf;
        if let Some(m) = &self.mode {
            s.mode = m.parse()?;
        }
        if let Some(z) = self.z {
            s.z = z as f64;
        }
        macro_rules! apply {
            ($($flag:ident => $field:expr),* $(,)?) => {
                $(if let Some(v) = self.$flag.clone() { $field = v; })*
            };
        }
        apply!(
            beta => s.beta,
            basis => s.basis_size,
            lmax => s.l_max,
            tol => s.tolerance,
            digits => s.digits,
            slices => s.slices,
            perturb => s.perturbation,
            seed => s.seed,
            mixing => s.mixing,
            max_iter => s.max_iterations,
            out => cfg.out,
            beta_list => cfg.beta_list,
        );
        if let Some(g) = self.pauli_strength {
            cfg.scf.pauli_strength = Some(g);
        }
        if self.anderson {
            cfg.scf.anderson = true;
        }
        if let Some(o) = &self.oracle {
            cfg.oracle = o.parse().expect("clap restricts oracle values");
        }
        if let Some(c) = &self.cache {
            cfg.cache = Some(c.clone());
        }
        Ok(cfg)
    }
}

/// One finished SCF run.
#[derive(Debug, Clone)]
pub struct RunSummary {
    pub dir: PathBuf,
    pub beta: f64,
    pub converged: bool,
    pub energy: f64,
    pub iterations: usize,
}

#[derive(Debug, Clone)]
pub struct Outcome {
    pub runs: Vec<RunSummary>,
    pub slice_converged: Option<bool>,
}

impl Outcome {
    pub fn exit_code(&self) -> u8 {
        if self.runs.iter().all(|r| r.converged) && self.slice_converged != Some(false) {
            EXIT_CONVERGED
        } else {
            EXIT_NOT_CONVERGED
        }
    }
}

/// Validate, check the output directory, then run and write every output.
pub fn execute(cfg: &RunConfig) -> Result<Outcome, CliError> {
    cfg.validate()?;
    output::preflight(&cfg.out)?;
    if cfg.oracle == Oracle::Hf {
        output::preflight(&cfg.cache_dir())?;
    }
    let hf = match cfg.oracle {
        Oracle::Hf => Some(hf_reference(cfg)?),
        Oracle::None => None,
    };
    let slices = if cfg.scf.perturbation != 0.0 {
        Some(run_slices(cfg)?)
    } else {
        None
    };
    let mut runs = vec![run_one(cfg, &cfg.scf, &cfg.out, hf.as_ref(), slices.as_ref())?];
    if !cfg.beta_list.is_empty() {
        for &beta in &cfg.beta_list {
            let dir = cfg.out.join(format!("beta_{beta}"));
            output::preflight(&dir)?;
            let scf = ScfConfig { beta, ..cfg.scf.clone() };
            runs.push(run_one(cfg, &scf, &dir, hf.as_ref(), None)?);
        }
        output::write_beta_scan(&cfg.out, &runs[1..])?;
    }
    Ok(Outcome {
        runs,
        slice_converged: slices.map(|s| s.converged),
    })
}

fn hf_reference(cfg: &RunConfig) -> Result<HfResult, CliError> {
    let (hf, _) = hf_cache::load_or_run(&cfg.cache_dir(), &reference_exponents(), cfg.scf.z, cfg.scf.n_total())?;
    info!("HF reference energy {:.10}", hf.energy);
    Ok(hf)
}

fn run_slices(cfg: &RunConfig) -> Result<SliceExperimentReport, CliError> {
    debug_assert_eq!(cfg.scf.mode, Mode::Energetic);
    let report = slice_perturbation_experiment(cfg.scf.clone())?;
    info!(
        "slice experiment: deviation {:.3e} -> {:.3e} relative in {} iterations",
        report.deviation_history.first().copied().unwrap_or(0.0),
        report.relative_deviation(),
        report.iterations
    );
    Ok(report)
}

fn run_one(
    cfg: &RunConfig,
    scf: &ScfConfig,
    dir: &Path,
    hf: Option<&HfResult>,
    slices: Option<&SliceExperimentReport>,
) -> Result<RunSummary, CliError> {
    info!("running {} mode at beta {}", scf.mode, scf.beta);
    let report = run_scf(scf.clone())?;
    let run_cfg = RunConfig {
        scf: scf.clone(),
        beta_list: if dir == cfg.out { cfg.beta_list.clone() } else { Vec::new() },
        out: dir.to_path_buf(),
        ..cfg.clone()
    };
    output::write_outputs(dir, &report, hf, slices, &run_cfg)?;
    Ok(RunSummary {
        dir: dir.to_path_buf(),
        beta: scf.beta,
        converged: report.converged,
        energy: report.energy,
        iterations: report.iterations,
    })
}
