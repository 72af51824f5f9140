//! Browser bindings for the demo page in `www/`.

use ringscft::basis::{build_basis, EvenTempered};
use ringscft::exchange::{pair_exchange_density, pair_normalization};
use ringscft::propagator::{contour_partition, diagonalize, partition_values, Kernel};
use ringscft::scf::{run_scf, Mode, ScfConfig};
use serde::Serialize;
use wasm_bindgen::prelude::*;

fn js_err(e: impl std::fmt::Display) -> JsValue {
    JsValue::from_str(&e.to_string())
}

fn to_js<T: Serialize>(v: &T) -> Result<JsValue, JsValue> {
    serde_wasm_bindgen::to_value(v).map_err(js_err)
}

/// Keep every `stride`-th node so the page draws a few hundred points.
fn thin<T: Copy>(v: &[T], stride: usize) -> Vec<T> {
    v.iter().step_by(stride.max(1)).copied().collect()
}

#[derive(Serialize)]
pub struct Profile {
    pub mode: String,
    pub r: Vec<f64>,
    pub radial: Vec<f64>,
    pub energy: f64,
    pub iterations: usize,
    pub converged: bool,
    pub shells: Vec<f64>,
}

pub fn scf_profile_native(mode: &str, z: u32, beta: f64, basis: usize) -> Result<Profile, String> {
    let mode: Mode = mode.parse().map_err(|e: ringscft::error::Error| e.to_string())?;
    let cfg = ScfConfig {
        mode,
        z: z as f64,
        beta,
        basis_size: basis,
        pauli_strength: (mode == Mode::Energetic).then_some(1.0),
        ..ScfConfig::default()
    };
    let report = run_scf(cfg).map_err(|e| e.to_string())?;
    Ok(Profile {
        mode: mode.to_string(),
        r: thin(report.grid().nodes(), 2),
        radial: thin(&report.density.radial_density(), 2),
        energy: report.energy,
        iterations: report.iterations,
        converged: report.converged,
        shells: report.density.shell_radii(),
    })
}

/// Self-consistent radial density `4 pi r^2 n` for a four-electron atom in
/// `exchange`, `naive` or `energetic` mode.
#[wasm_bindgen]
pub fn scf_profile(mode: &str, z: u32, beta: f64, basis: usize) -> Result<JsValue, JsValue> {
    to_js(&scf_profile_native(mode, z, beta, basis).map_err(js_err)?)
}

#[derive(Serialize)]
pub struct Propagator {
    pub r: Vec<f64>,
    /// `q(r, r, s) q(r, r, beta - s)` shifted by the ground energy.
    pub product: Vec<f64>,
    /// `Q(beta)` from splitting the contour at `s`.
    pub split_partition: f64,
    /// `Q(beta)` from the level sum.
    pub partition: f64,
}

pub fn propagator_native(z: f64, beta: f64, fraction: f64) -> Result<Propagator, String> {
    if !(0.0..=1.0).contains(&fraction) {
        return Err(format!("split fraction must lie in [0, 1], got {fraction}"));
    }
    let basis = build_basis(40, 0, EvenTempered::default()).map_err(|e| e.to_string())?;
    let grid = basis.grid().map_err(|e| e.to_string())?;
    let spec = diagonalize(&basis, z, None).map_err(|e| e.to_string())?;
    let s = fraction * beta;
    let shift = spec.ground_energy();
    let a = Kernel::new(&spec, s, shift);
    let b = Kernel::new(&spec, beta - s, shift);
    let r: Vec<f64> = grid.nodes().iter().copied().filter(|&r| r < 12.0 / z).collect();
    Ok(Propagator {
        product: r.iter().map(|&x| a.diagonal(x) * b.diagonal(x)).collect(),
        r,
        split_partition: contour_partition(&spec, &grid, s, beta),
        partition: partition_values(&spec, beta).map_err(|e| e.to_string())?.q_beta,
    })
}

/// Hydrogenic propagator diagonal product across a contour split at
/// `fraction * beta`, with both partition function estimates.
#[wasm_bindgen]
pub fn propagator_split(z: f64, beta: f64, fraction: f64) -> Result<JsValue, JsValue> {
    to_js(&propagator_native(z, beta, fraction).map_err(js_err)?)
}

#[derive(Serialize)]
pub struct Hole {
    /// Positions along the axis through the nucleus and the reference electron.
    pub x: Vec<f64>,
    /// Pair density with the first electron held at `reference`.
    pub pair: Vec<f64>,
    /// Same pair density without the exchange term.
    pub uncorrelated: Vec<f64>,
}

pub fn exchange_hole_native(z: f64, beta: f64, reference: f64) -> Result<Hole, String> {
    let basis = build_basis(30, 2, EvenTempered::spanning(1e-2, 1e4, 30).map_err(|e| e.to_string())?)
        .map_err(|e| e.to_string())?;
    let spec = diagonalize(&basis, z, None).map_err(|e| e.to_string())?;
    let pv = partition_values(&spec, beta).map_err(|e| e.to_string())?;
    let kernel = Kernel::new(&spec, beta, pv.shift);
    let norm = pair_normalization(&pv, 2).map_err(|e| e.to_string())?;
    let a = [0.0, 0.0, reference];
    let qa = kernel.between(&a, &a);
    let x: Vec<f64> = (0..=240).map(|k| -6.0 / z + 12.0 / z * k as f64 / 240.0).collect();
    let mut pair = Vec::with_capacity(x.len());
    let mut uncorrelated = Vec::with_capacity(x.len());
    for &xi in &x {
        let b = [0.0, 0.0, xi];
        pair.push(pair_exchange_density(&kernel, &pv, 2, &a, &b).map_err(|e| e.to_string())?);
        uncorrelated.push(norm * qa * kernel.between(&b, &b));
    }
    Ok(Hole { x, pair, uncorrelated })
}

/// Two-fermion pair density along the axis through a reference electron,
/// showing the exchange hole at coincidence.
#[wasm_bindgen]
pub fn exchange_hole(z: f64, beta: f64, reference: f64) -> Result<JsValue, JsValue> {
    to_js(&exchange_hole_native(z, beta, reference).map_err(js_err)?)
}
