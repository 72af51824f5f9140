//! On-disk cache of RHF reference runs keyed by a hash of the basis.

use std::fs;
use std::path::{Path, PathBuf};

use log::{info, warn};
use ringscft::hf::{run_rhf, HfResult};
use sha2::{Digest, Sha256};

use crate::CliError;

/// Hex SHA-256 of the nuclear charge, electron count and exponents.
pub fn cache_key(exponents: &[f64], z: f64, electrons: usize) -> String {
    let mut h = Sha256::new();
    h.update(format!("rhf-v1 z={z:e} electrons={electrons}\n"));
    for a in exponents {
        h.update(a.to_bits().to_le_bytes());
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

pub fn cache_path(dir: &Path, exponents: &[f64], z: f64, electrons: usize) -> PathBuf {
    dir.join(format!("rhf-{}.json", &cache_key(exponents, z, electrons)[..16]))
}

/// Cached result if present and matching, otherwise a fresh run written to
/// the cache. The flag is true on a cache hit.
pub fn load_or_run(dir: &Path, exponents: &[f64], z: f64, electrons: usize) -> Result<(HfResult, bool), CliError> {
    let path = cache_path(dir, exponents, z, electrons);
    if let Ok(text) = fs::read_to_string(&path) {
        match serde_json::from_str::<HfResult>(&text) {
            Ok(hf) if hf.exponents == exponents && hf.z == z && hf.electrons == electrons => {
                info!("HF reference from cache {}", path.display());
                return Ok((hf, true));
            }
            _ => warn!("ignoring stale HF cache file {}", path.display()),
        }
    }
    let hf = run_rhf(exponents, z, electrons)?;
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    let text = serde_json::to_string_pretty(&hf).expect("HF result serializes");
    fs::write(&path, text).map_err(|e| CliError::io(&path, e))?;
    Ok((hf, false))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn key_depends_on_every_input() {
        let e = [0.5, 2.0, 8.0];
        let k = cache_key(&e, 2.0, 2);
        assert_eq!(k.len(), 64);
        assert_eq!(k, cache_key(&e, 2.0, 2));
        assert_ne!(k, cache_key(&e, 3.0, 2));
        assert_ne!(k, cache_key(&e, 2.0, 4));
        assert_ne!(k, cache_key(&[0.5, 2.0, 8.000000000000001], 2.0, 2));
    }

    #[test]
    fn cached_result_is_bit_identical() {
        let dir = tempfile::tempdir().unwrap();
        let e = [0.3, 1.0, 3.3, 11.0, 36.0];
        let (fresh, hit) = load_or_run(dir.path(), &e, 2.0, 2).unwrap();
        assert!(!hit);
        let (cached, hit) = load_or_run(dir.path(), &e, 2.0, 2).unwrap();
        assert!(hit);
        assert_eq!(fresh, cached);
        fs::write(cache_path(dir.path(), &e, 2.0, 2), "garbage").unwrap();
        let (again, hit) = load_or_run(dir.path(), &e, 2.0, 2).unwrap();
        assert!(!hit);
        assert_eq!(again, fresh);
    }
}
