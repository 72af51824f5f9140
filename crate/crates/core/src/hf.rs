//! Closed-shell restricted Hartree-Fock for an atom in s-type Gaussians
//! centred on the nucleus.

use std::f64::consts::PI;

use log::{debug, warn};
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::basis::{Channel, EvenTempered, DEFAULT_DEPENDENCE_THRESHOLD};
use crate::error::{invalid, Result};
use crate::grid::RadialGrid;
use crate::propagator::sorted_eigen;

pub const DEFAULT_HF_MIXING: f64 = 0.3;
pub const DEFAULT_HF_TOLERANCE: f64 = 1e-8;
pub const DEFAULT_HF_MAX_ITERATIONS: usize = 1000;
/// Switch from the series to the asymptotic form of `F_0`.
pub const BOYS_SWITCH: f64 = 20.0;

/// Even-tempered set used for reference energies: 30 functions over
/// `[1e-2, 1e5]`.
pub fn reference_exponents() -> Vec<f64> {
    EvenTempered::spanning(1e-2, 1e5, 30).expect("valid range").exponents(30)
}

/// Boys function `F_0(t) = int_0^1 exp(-t u^2) du`.
pub fn boys_f0(t: f64) -> f64 {
    if t < 0.0 {
        return f64::NAN;
    }
    if t < BOYS_SWITCH {
        // F_0(t) = exp(-t) sum_k (2t)^k / (2k+1)!!
        let mut term = 1.0;
        let mut sum = 1.0;
        let mut k = 0.0;
        while term > 1e-17 * sum {
            k += 1.0;
            term *= 2.0 * t / (2.0 * k + 1.0);
            sum += term;
        }
        (-t).exp() * sum
    } else {
        // 1/2 sqrt(pi/t) - exp(-t)/(2t) sum_k (-1)^k (2k-1)!! / (2t)^k
        let mut term = 1.0;
        let mut sum = 1.0;
        let mut k = 0.0;
        loop {
            k += 1.0;
            let next = -term * (2.0 * k - 1.0) / (2.0 * t);
            if next.abs() >= term.abs() || next.abs() < 1e-17 {
                break;
            }
            term = next;
            sum += term;
        }
        0.5 * (PI / t).sqrt() - (-t).exp() / (2.0 * t) * sum
    }
}

/// `(ij|kl)` for s-Gaussians on one centre with pair exponents `p`, `q`.
pub fn eri(p: f64, q: f64) -> f64 {
    2.0 * PI.powf(2.5) / (p * q * (p + q).sqrt()) * boys_f0(0.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HfResult {
    pub exponents: Vec<f64>,
    pub z: f64,
    pub electrons: usize,
    pub energy: f64,
    pub kinetic: f64,
    pub potential: f64,
    pub orbital_energies: Vec<f64>,
    /// Column-major `n x n`.
    pub density_matrix: Vec<f64>,
    /// Column-major `n x n`, S-orthonormal columns.
    pub coefficients: Vec<f64>,
    pub converged: bool,
    pub iterations: usize,
    pub max_density_change: f64,
}

impl HfResult {
    pub fn n(&self) -> usize {
        self.exponents.len()
    }

    pub fn density_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_column_slice(self.n(), self.n(), &self.density_matrix)
    }

    pub fn coefficients(&self) -> DMatrix<f64> {
        DMatrix::from_column_slice(self.n(), self.n(), &self.coefficients)
    }

    /// `-V / T`.
    pub fn virial_ratio(&self) -> f64 {
        -self.potential / self.kinetic
    }

    /// `n(r) = sum_ij P_ij exp(-(a_i + a_j) r^2)` on a grid.
    pub fn density_on(&self, grid: &RadialGrid) -> Vec<f64> {
        let p = self.density_matrix();
        grid.nodes()
            .iter()
            .map(|r| {
                let u: Vec<f64> = self.exponents.iter().map(|a| (-a * r * r).exp()).collect();
                let mut v = 0.0;
                for i in 0..u.len() {
                    for j in 0..u.len() {
                        v += p[(i, j)] * u[i] * u[j];
                    }
                }
                v
            })
            .collect()
    }
}

/// Two-electron integrals over unique exponent pairs.
struct Repulsion {
    n: usize,
    table: DMatrix<f64>,
}

impl Repulsion {
    fn new(exponents: &[f64]) -> Self {
        let n = exponents.len();
        let pairs: Vec<f64> = (0..n)
            .flat_map(|i| (0..=i).map(move |j| (i, j)))
            .map(|(i, j)| exponents[i] + exponents[j])
            .collect();
        let table = DMatrix::from_fn(pairs.len(), pairs.len(), |a, b| eri(pairs[a], pairs[b]));
        Self { n, table }
    }

    fn pair(i: usize, j: usize) -> usize {
        let (a, b) = if i >= j { (i, j) } else { (j, i) };
        a * (a + 1) / 2 + b
    }

    /// `J - K/2` for density matrix `p`.
    fn two_electron(&self, p: &DMatrix<f64>) -> DMatrix<f64> {
        let n = self.n;
        DMatrix::from_fn(n, n, |i, j| {
            let mut v = 0.0;
            for k in 0..n {
                for l in 0..n {
                    v += p[(k, l)] * (self.table[(Self::pair(i, j), Self::pair(k, l))] - 0.5 * self.table[(Self::pair(i, k), Self::pair(j, l))]);
                }
            }
            v
        })
    }
}

/// Roothaan iteration with density mixing `lambda`, converged when the
/// largest density-matrix change drops below `tolerance`.
pub fn run_rhf_with(
    exponents: &[f64],
    z: f64,
    electrons: usize,
    lambda: f64,
    tolerance: f64,
    max_iterations: usize,
) -> Result<HfResult> {
    if electrons == 0 || (electrons % 2 != 0 && electrons != 1) {
        return Err(invalid("electrons", format!("closed shell needs an even positive count, got {electrons}")));
    }
    if !(z > 0.0 && z.is_finite()) {
        return Err(invalid("Z", format!("must be positive, got {z}")));
    }
    if !(lambda > 0.0 && lambda <= 1.0) {
        return Err(invalid("lambda", format!("must lie in (0, 1], got {lambda}")));
    }
    let channel = Channel::new(0, exponents.to_vec(), DEFAULT_DEPENDENCE_THRESHOLD)?;
    // a lone electron has no partner: Fock is the core Hamiltonian
    let occupied = electrons.div_ceil(2);
    let weight = if electrons == 1 { 1.0 } else { 2.0 };
    let x = channel.orthogonalizer(DEFAULT_DEPENDENCE_THRESHOLD).transform;
    if x.ncols() < occupied {
        return Err(invalid("exponents", format!("{} independent functions for {occupied} orbitals", x.ncols())));
    }
    let kinetic = channel.kinetic.clone();
    let nuclear = channel.coulomb(z);
    let core = &kinetic + &nuclear;
    let repulsion = Repulsion::new(&channel.exponents);
    let two_electron = |p: &DMatrix<f64>| {
        if electrons == 1 {
            DMatrix::zeros(p.nrows(), p.ncols())
        } else {
            repulsion.two_electron(p)
        }
    };

    let solve = |fock: &DMatrix<f64>| {
        let (energies, vectors) = sorted_eigen(x.transpose() * fock * &x);
        let c = &x * vectors;
        let occ = c.columns(0, occupied);
        let p = occ * occ.transpose() * weight;
        (energies, c, p)
    };

    let (_, _, mut p) = solve(&core);
    let mut converged = false;
    let mut iterations = 0;
    let mut change = f64::INFINITY;
    for iteration in 1..=max_iterations {
        iterations = iteration;
        let fock = &core + two_electron(&p);
        let (_, _, built) = solve(&fock);
        change = (&built - &p).abs().max();
        debug!("rhf iteration={iteration} change={change:.3e}");
        if change < tolerance {
            p = built;
            converged = true;
            break;
        }
        p = &p * (1.0 - lambda) + built * lambda;
    }
    if !converged {
        warn!("RHF not converged after {iterations} iterations (change {change:.3e})");
    }
    let g = two_electron(&p);
    let fock = &core + &g;
    let (orbital_energies, c, _) = solve(&fock);
    let trace = |a: &DMatrix<f64>| p.component_mul(a).sum();
    let energy = 0.5 * (trace(&core) + trace(&fock));
    let t = trace(&kinetic);
    let exponents = channel.exponents.clone();
    Ok(HfResult {
        exponents,
        z,
        electrons,
        energy,
        kinetic: t,
        potential: energy - t,
        orbital_energies,
        density_matrix: p.as_slice().to_vec(),
        coefficients: c.as_slice().to_vec(),
        converged,
        iterations,
        max_density_change: change,
    })
}

pub fn run_rhf(exponents: &[f64], z: f64, electrons: usize) -> Result<HfResult> {
    run_rhf_with(
        exponents,
        z,
        electrons,
        DEFAULT_HF_MIXING,
        DEFAULT_HF_TOLERANCE,
        DEFAULT_HF_MAX_ITERATIONS,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::GaussLegendre;
    use approx::assert_relative_eq;

    fn even(alpha_min: f64, alpha_max: f64, n: usize) -> Vec<f64> {
        EvenTempered::spanning(alpha_min, alpha_max, n).unwrap().exponents(n)
    }

    #[test]
    fn boys_function_against_quadrature() {
        let gl = GaussLegendre::new(64).unwrap();
        for t in [0.0, 1e-3, 0.5, 3.0, 12.0, 19.9, 20.0, 35.0, 80.0] {
            let exact = 0.5 * gl.integrate(|x| (-t * (0.5 * (x + 1.0)).powi(2)).exp());
            assert_relative_eq!(boys_f0(t), exact, max_relative = 1e-13);
        }
        assert_eq!(boys_f0(0.0), 1.0);
    }

    #[test]
    fn one_electron_energy_is_the_core_eigenvalue() {
        let exps = even(0.05, 1e3, 16);
        let channel = Channel::new(0, exps.clone(), DEFAULT_DEPENDENCE_THRESHOLD).unwrap();
        let x = channel.orthogonalizer(DEFAULT_DEPENDENCE_THRESHOLD).transform;
        let core = &channel.kinetic + channel.coulomb(2.0);
        let (e, _) = sorted_eigen(x.transpose() * core * &x);
        let hf = run_rhf(&exps, 2.0, 1).unwrap();
        assert!(hf.converged);
        assert!((hf.energy - e[0]).abs() < 1e-12 * e[0].abs());
        assert!((hf.energy + 2.0).abs() < 1e-3);
    }

    #[test]
    fn helium_six_exponents_near_the_limit() {
        let small = run_rhf(&even(0.2, 50.0, 6), 2.0, 2).unwrap();
        let large = run_rhf(&reference_exponents(), 2.0, 2).unwrap();
        assert!(small.converged && large.converged);
        assert!((small.energy + 2.86).abs() < 0.01, "{}", small.energy);
        assert!((small.energy - large.energy).abs() < 0.01);
        assert!(small.energy > large.energy);
    }

    #[test]
    fn beryllium_invariants() {
        let hf = run_rhf(&reference_exponents(), 4.0, 4).unwrap();
        assert!(hf.converged);
        assert!((hf.energy + 14.573).abs() < 1e-3, "{}", hf.energy);
        let channel = Channel::new(0, hf.exponents.clone(), DEFAULT_DEPENDENCE_THRESHOLD).unwrap();
        let s = &channel.overlap;
        let p = hf.density_matrix();
        let psp = &p * s * &p;
        assert!((psp - &p * 2.0).abs().max() < 1e-8);
        let c = hf.coefficients().columns(0, 2).into_owned();
        let gram = channel.exact_overlap().gram_deviation(&c);
        assert!(gram.abs().max() < 1e-10);
        let v = hf.virial_ratio();
        assert!((1.95..=2.05).contains(&v), "{v}");
        let grid = RadialGrid::for_exponents(1e-2, 1e5).unwrap();
        let n = grid.volume_integral(&hf.density_on(&grid));
        assert!((n - 4.0).abs() < 1e-8, "{n}");
        assert!(hf.orbital_energies[0] < hf.orbital_energies[1] && hf.orbital_energies[1] < 0.0);
    }

    #[test]
    fn nested_bases_lower_the_energy() {
        let ratio: f64 = 2.2;
        let nested = |n: usize| (0..n).map(|k| 0.03 * ratio.powi(k as i32)).collect::<Vec<_>>();
        let energies: Vec<f64> = [8, 11, 14, 17, 20]
            .iter()
            .map(|&n| run_rhf(&nested(n), 4.0, 4).unwrap().energy)
            .collect();
        for w in energies.windows(2) {
            assert!(w[1] <= w[0] + 1e-10, "{energies:?}");
        }
        assert!(energies.last().unwrap() - (-14.573) < 2e-3);
    }

    #[test]
    fn rejects_open_shells() {
        assert!(run_rhf(&even(0.1, 10.0, 5), 3.0, 3).is_err());
        assert!(run_rhf(&[1.0, 1.0], 2.0, 2).is_err());
    }
}
