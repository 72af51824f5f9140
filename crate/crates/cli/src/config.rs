//! Flat `key=value` run configuration.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use ringscft::scf::{Mode, ScfConfig};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{path}:{line}: unknown key `{key}`")]
    UnknownKey { path: String, line: usize, key: String },

    #[error("{path}:{line}: expected `key=value`, got `{text}`")]
    Syntax { path: String, line: usize, text: String },

    #[error("{path}:{line}: key `{key}` expects {expected}, got `{value}`")]
    Value {
        path: String,
        line: usize,
        key: String,
        expected: &'static str,
        value: String,
    },

    #[error("{path}:{line}: key `{key}` already set on line {first}")]
    Duplicate {
        path: String,
        line: usize,
        key: String,
        first: usize,
    },

    #[error("cannot read config {path}: {source}")]
    Read { path: String, source: std::io::Error },

    #[error("invalid configuration: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Oracle {
    Hf,
    None,
}

impl fmt::Display for Oracle {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Oracle::Hf => "hf",
            Oracle::None => "none",
        })
    }
}

impl FromStr for Oracle {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "hf" => Ok(Oracle::Hf),
            "none" => Ok(Oracle::None),
            other => Err(format!("expected hf or none, got `{other}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub scf: ScfConfig,
    pub out: PathBuf,
    pub oracle: Oracle,
    /// Extra inverse temperatures, each run into its own subdirectory.
    pub beta_list: Vec<f64>,
    /// HF cache directory, `<out>/hf-cache` when unset.
    pub cache: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            scf: ScfConfig::default(),
            out: PathBuf::from("ringscft-out"),
            oracle: Oracle::None,
            beta_list: Vec::new(),
            cache: None,
        }
    }
}

/// Recognized keys, in echo order.
pub const KEYS: &[&str] = &[
    "mode",
    "Z",
    "n_per_spin",
    "spin_channels",
    "beta",
    "basis",
    "lmax",
    "alpha_min",
    "alpha_max",
    "mixing",
    "tol",
    "max_iter",
    "anderson",
    "digits",
    "pauli_strength",
    "slices",
    "perturb",
    "seed",
    "oracle",
    "out",
    "cache",
    "beta_list",
];

fn parse<T: FromStr>(value: &str, expected: &'static str) -> Result<T, &'static str> {
    value.parse().map_err(|_| expected)
}

fn float(value: &str) -> Result<f64, &'static str> {
    parse::<f64>(value, "a float").and_then(|v| if v.is_finite() { Ok(v) } else { Err("a finite float") })
}

fn float_list(value: &str) -> Result<Vec<f64>, &'static str> {
    if value.is_empty() {
        return Ok(Vec::new());
    }
    value.split(',').map(|v| float(v.trim()).map_err(|_| "a comma-separated list of floats")).collect()
}

impl RunConfig {
    /// Set `key` from its text form; on failure returns the expected type.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), &'static str> {
        let s = &mut self.scf;
        match key {
            "mode" => s.mode = parse(value, "one of exchange, naive, energetic")?,
            "Z" => s.z = parse::<u32>(value, "a positive integer")? as f64,
            "n_per_spin" => s.n_per_spin = parse(value, "a non-negative integer")?,
            "spin_channels" => s.spin_channels = parse(value, "a non-negative integer")?,
            "beta" => s.beta = float(value)?,
            "basis" => s.basis_size = parse(value, "a non-negative integer")?,
            "lmax" => s.l_max = parse(value, "a non-negative integer")?,
            "alpha_min" => s.alpha_min = float(value)?,
            "alpha_max" => s.alpha_max = float(value)?,
            "mixing" => s.mixing = float(value)?,
            "tol" => s.tolerance = float(value)?,
            "max_iter" => s.max_iterations = parse(value, "a non-negative integer")?,
            "anderson" => s.anderson = parse(value, "true or false")?,
            "digits" => s.digits = parse(value, "a non-negative integer")?,
            "pauli_strength" => {
                s.pauli_strength = match value {
                    "none" => None,
                    v => Some(float(v).map_err(|_| "a float or none")?),
                }
            }
            "slices" => s.slices = parse(value, "a non-negative integer")?,
            "perturb" => s.perturbation = float(value)?,
            "seed" => s.seed = parse(value, "a non-negative integer")?,
            "oracle" => self.oracle = parse(value, "hf or none")?,
            "out" => self.out = PathBuf::from(value),
            "cache" => self.cache = Some(PathBuf::from(value)),
            "beta_list" => self.beta_list = float_list(value)?,
            _ => return Err("a known key"),
        }
        Ok(())
    }

    /// Key/value pairs that [`RunConfig::parse_str`] reads back to `self`.
    pub fn echo(&self) -> Vec<(&'static str, String)> {
        let s = &self.scf;
        let mut out = vec![
            ("mode", s.mode.to_string()),
            ("Z", format!("{}", s.z)),
            ("n_per_spin", s.n_per_spin.to_string()),
            ("spin_channels", s.spin_channels.to_string()),
            ("beta", format!("{}", s.beta)),
            ("basis", s.basis_size.to_string()),
            ("lmax", s.l_max.to_string()),
            ("alpha_min", format!("{}", s.alpha_min)),
            ("alpha_max", format!("{}", s.alpha_max)),
            ("mixing", format!("{}", s.mixing)),
            ("tol", format!("{}", s.tolerance)),
            ("max_iter", s.max_iterations.to_string()),
            ("anderson", s.anderson.to_string()),
            ("digits", s.digits.to_string()),
            (
                "pauli_strength",
                s.pauli_strength.map_or_else(|| "none".to_string(), |g| format!("{g}")),
            ),
            ("slices", s.slices.to_string()),
            ("perturb", format!("{}", s.perturbation)),
            ("seed", s.seed.to_string()),
            ("oracle", self.oracle.to_string()),
            ("out", self.out.display().to_string()),
        ];
        if let Some(c) = &self.cache {
            out.push(("cache", c.display().to_string()));
        }
        out.push((
            "beta_list",
            self.beta_list.iter().map(|b| format!("{b}")).collect::<Vec<_>>().join(","),
        ));
        out
    }

    pub fn echo_text(&self) -> String {
        self.echo().into_iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }

    /// Parse config text on top of the defaults. `origin` names the source
    /// in error messages.
    pub fn parse_str(text: &str, origin: &str) -> Result<Self, ConfigError> {
        let mut cfg = Self::default();
        let mut seen: Vec<(String, usize)> = Vec::new();
        for (idx, raw) in text.lines().enumerate() {
            let line = idx + 1;
            let trimmed = raw.trim();
            if trimmed.is_empty() || trimmed.starts_with('#') {
                continue;
            }
            let Some((key, value)) = trimmed.split_once('=') else {
                return Err(ConfigError::Syntax {
                    path: origin.to_string(),
                    line,
                    text: trimmed.to_string(),
                });
            };
            let (key, value) = (key.trim(), value.trim());
            if !KEYS.contains(&key) {
                return Err(ConfigError::UnknownKey {
                    path: origin.to_string(),
                    line,
                    key: key.to_string(),
                });
            }
            if let Some((_, first)) = seen.iter().find(|(k, _)| k == key) {
                return Err(ConfigError::Duplicate {
                    path: origin.to_string(),
                    line,
                    key: key.to_string(),
                    first: *first,
                });
            }
            seen.push((key.to_string(), line));
            cfg.set(key, value).map_err(|expected| ConfigError::Value {
                path: origin.to_string(),
                line,
                key: key.to_string(),
                expected,
                value: value.to_string(),
            })?;
        }
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.display().to_string(),
            source,
        })?;
        Self::parse_str(&text, &path.display().to_string())
    }

    pub fn cache_dir(&self) -> PathBuf {
        self.cache.clone().unwrap_or_else(|| self.out.join("hf-cache"))
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.scf.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if self.oracle == Oracle::Hf && self.scf.n_total() % 2 != 0 {
            return Err(ConfigError::Invalid(format!(
                "the HF oracle needs an even electron count, got {}",
                self.scf.n_total()
            )));
        }
        if self.scf.perturbation != 0.0 && self.scf.mode != Mode::Energetic {
            return Err(ConfigError::Invalid("perturb applies to energetic mode only".to_string()));
        }
        if self.beta_list.iter().any(|b| *b <= 0.0) {
            return Err(ConfigError::Invalid("beta_list entries must be positive".to_string()));
        }
        Ok(())
    }
}
