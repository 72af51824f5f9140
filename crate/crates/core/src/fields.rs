//! Interaction fields on the radial grid: nuclear Coulomb, Hartree with the
//! Fermi-Amaldi `(N-1)/N` scale, and the optional Pauli contact field.

use std::f64::consts::PI;

use crate::error::{invalid, Result};
use crate::grid::RadialGrid;

/// `(N_tot - 1) / N_tot`.
pub fn fermi_amaldi_factor(n_total: usize) -> Result<f64> {
    if n_total <= 1 {
        return Err(invalid(
            "n_total",
            format!("Fermi-Amaldi scaling needs more than one electron, got {n_total}"),
        ));
    }
    Ok((n_total - 1) as f64 / n_total as f64)
}

/// Electrostatic potential of a spherical charge density,
/// `(1/r) int_0^r 4 pi r'^2 n dr' + int_r^inf 4 pi r' n dr'`.
pub fn coulomb_potential(grid: &RadialGrid, density: &[f64]) -> Vec<f64> {
    let r = grid.nodes();
    let enclosed_integrand: Vec<f64> = r.iter().zip(density).map(|(r, n)| 4.0 * PI * r * r * n).collect();
    let outer_integrand: Vec<f64> = r.iter().zip(density).map(|(r, n)| 4.0 * PI * r * n).collect();
    let enclosed = grid.cumulative(&enclosed_integrand);
    let outer = grid.cumulative(&outer_integrand);
    let outer_total = *outer.last().unwrap_or(&0.0);
    r.iter()
        .zip(enclosed.iter().zip(&outer))
        .map(|(r, (inside, partial))| inside / r + (outer_total - partial))
        .collect()
}

/// Fermi-Amaldi scaled Hartree potential of the total electron density.
pub fn hartree_potential(grid: &RadialGrid, density: &[f64], n_total: usize) -> Result<Vec<f64>> {
    let factor = fermi_amaldi_factor(n_total)?;
    Ok(coulomb_potential(grid, density).into_iter().map(|v| factor * v).collect())
}

/// Local contact field `w_P = g n`, with `g` the contact strength.
pub fn pauli_field(density: &[f64], strength: f64) -> Vec<f64> {
    density.iter().map(|n| strength * n).collect()
}

/// Components of the total field `w = w_ext + w_H + w_P` on a grid. The
/// nuclear term is kept analytic in the Hamiltonian; only the interaction
/// part is projected onto the basis.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldSet {
    pub grid: RadialGrid,
    pub z: f64,
    pub hartree: Vec<f64>,
    /// Contour-independent Pauli field, per spin channel.
    pub pauli: Option<Vec<f64>>,
    /// Pauli field per contour slice `m = 1..=M`.
    pub pauli_slices: Option<Vec<Vec<f64>>>,
    pub fermi_amaldi_factor: f64,
    pub pauli_strength: f64,
}

impl FieldSet {
    /// Hartree-only field set.
    pub fn new(grid: RadialGrid, z: f64, hartree: Vec<f64>, fermi_amaldi_factor: f64) -> Self {
        Self {
            grid,
            z,
            hartree,
            pauli: None,
            pauli_slices: None,
            fermi_amaldi_factor,
            pauli_strength: 0.0,
        }
    }

    /// `-Z/r`.
    pub fn external(&self) -> Vec<f64> {
        self.grid.nodes().iter().map(|r| -self.z / r).collect()
    }

    /// `w_H + w_P`.
    pub fn interaction(&self) -> Vec<f64> {
        match &self.pauli {
            Some(p) => self.hartree.iter().zip(p).map(|(h, p)| h + p).collect(),
            None => self.hartree.clone(),
        }
    }

    pub fn total(&self) -> Vec<f64> {
        self.external().iter().zip(self.interaction()).map(|(e, i)| e + i).collect()
    }

    /// `w_H + w_P(s_m)` for every slice, if slice fields are tracked.
    pub fn slice_interactions(&self) -> Option<Vec<Vec<f64>>> {
        self.pauli_slices.as_ref().map(|slices| {
            slices
                .iter()
                .map(|p| self.hartree.iter().zip(p).map(|(h, p)| h + p).collect())
                .collect()
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn grid() -> RadialGrid {
        RadialGrid::for_exponents(1e-3, 1e5).unwrap()
    }

    fn slater(grid: &RadialGrid, n: f64, z: f64) -> Vec<f64> {
        grid.nodes().iter().map(|r| n * z.powi(3) / PI * (-2.0 * z * r).exp()).collect()
    }

    #[test]
    fn fermi_amaldi_values() {
        assert_eq!(fermi_amaldi_factor(4).unwrap(), 0.75);
        assert_eq!(fermi_amaldi_factor(2).unwrap(), 0.5);
        assert!(fermi_amaldi_factor(1).is_err());
        assert!(fermi_amaldi_factor(0).is_err());
    }

    #[test]
    fn thin_shell_obeys_shell_theorem() {
        use crate::grid::GaussLegendre;
        let g = grid();
        let (a, sigma) = (3.0, 0.25);
        let shape = |r: f64| (-(r - a).powi(2) / (sigma * sigma)).exp();
        // moments of the shell by Gauss-Legendre on [a - 10 sigma, a + 10 sigma]
        let gl = GaussLegendre::new(64).unwrap();
        let half = 10.0 * sigma;
        let moment = |k: i32| half * gl.integrate(|t| 4.0 * PI * (a + half * t).powi(k) * shape(a + half * t));
        let charge = moment(2);
        let inner = moment(1) / charge;
        let n: Vec<f64> = g.nodes().iter().map(|&r| shape(r) / charge).collect();
        let w = coulomb_potential(&g, &n);
        for (r, v) in g.nodes().iter().zip(&w) {
            if *r < a - half {
                assert_relative_eq!(*v, inner, max_relative = 1e-6);
            } else if *r > a + half && *r < 1e3 {
                assert_relative_eq!(*v, 1.0 / r, max_relative = 1e-6);
            }
        }
        let big = hartree_potential(&g, &n, 1_000_000).unwrap();
        assert_relative_eq!(big[0], (1.0 - 1e-6) * inner, max_relative = 1e-6);
    }

    #[test]
    fn hydrogenic_density_has_closed_form_potential() {
        // n = e^{-2r}/pi: V(r) = 1/r - (1 + 1/r) e^{-2r}
        let g = grid();
        let n = slater(&g, 1.0, 1.0);
        let w = coulomb_potential(&g, &n);
        for (r, v) in g.nodes().iter().zip(&w) {
            let exact = if *r < 1e-3 { 1.0 - 2.0 / 3.0 * r * r } else { 1.0 / r - (1.0 + 1.0 / r) * (-2.0 * r).exp() };
            assert!((v - exact).abs() < 1e-7 * exact.max(1e-3), "r={r} {v} {exact}");
        }
    }

    #[test]
    fn zero_density_zero_field_and_linearity() {
        let g = grid();
        assert!(hartree_potential(&g, &vec![0.0; g.len()], 4).unwrap().iter().all(|&v| v == 0.0));
        let a = slater(&g, 2.0, 4.0);
        let b = slater(&g, 2.0, 1.2);
        let sum: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x + y).collect();
        let wa = hartree_potential(&g, &a, 4).unwrap();
        let wb = hartree_potential(&g, &b, 4).unwrap();
        let ws = hartree_potential(&g, &sum, 4).unwrap();
        for ((x, y), s) in wa.iter().zip(&wb).zip(&ws) {
            assert!((x + y - s).abs() <= 1e-12 * s.abs());
        }
    }

    #[test]
    fn monotone_with_monopole_tail() {
        let g = grid();
        let n: Vec<f64> = slater(&g, 2.0, 4.0).iter().zip(slater(&g, 2.0, 1.0)).map(|(a, b)| a + b).collect();
        let w = hartree_potential(&g, &n, 4).unwrap();
        for (j, p) in w.windows(2).enumerate() {
            assert!(p[1] <= p[0] * (1.0 + 1e-13), "j={j} r={} {} {}", g.nodes()[j], p[0], p[1]);
        }
        let r = *g.nodes().last().unwrap();
        assert_relative_eq!(*w.last().unwrap(), 4.0 * 0.75 / r, max_relative = 1e-2);
    }

    #[test]
    fn poisson_equation_holds_on_interior_nodes() {
        // (1/r) d^2(r w)/dr^2 = -4 pi f n, with derivatives in x = ln r by
        // sixth-order central differences
        let g = grid();
        let n: Vec<f64> = slater(&g, 2.0, 4.0).iter().zip(slater(&g, 2.0, 1.0)).map(|(a, b)| a + b).collect();
        let w = hartree_potential(&g, &n, 4).unwrap();
        let r = g.nodes();
        let h = g.log_step();
        let u: Vec<f64> = r.iter().zip(&w).map(|(r, w)| r * w).collect();
        let rhs: Vec<f64> = r.iter().zip(&n).map(|(r, n)| -4.0 * PI * 0.75 * r * n).collect();
        let scale = rhs.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        // below r ~ 1e-5 the difference quotient amplifies rounding in u = r w by 1/(r h^2)
        for j in (3..r.len() - 3).filter(|&j| r[j] >= 1e-5) {
            let d1 = (-u[j - 3] + 9.0 * u[j - 2] - 45.0 * u[j - 1] + 45.0 * u[j + 1] - 9.0 * u[j + 2] + u[j + 3]) / (60.0 * h);
            let d2 = (2.0 * u[j - 3] - 27.0 * u[j - 2] + 270.0 * u[j - 1] - 490.0 * u[j] + 270.0 * u[j + 1] - 27.0 * u[j + 2]
                + 2.0 * u[j + 3])
                / (180.0 * h * h);
            let lhs = (d2 - d1) / (r[j] * r[j]);
            assert!((lhs - rhs[j]).abs() <= 1e-5 * scale, "r={} {lhs} {}", r[j], rhs[j]);
        }
    }

    #[test]
    fn pauli_field_is_linear() {
        let n = vec![0.0, 1.0, 2.5, 4.0];
        assert!(pauli_field(&n, 0.0).iter().all(|&v| v == 0.0));
        assert_eq!(pauli_field(&[3.0; 4], 0.5), vec![1.5; 4]);
        let doubled: Vec<f64> = n.iter().map(|v| 2.0 * v).collect();
        for (a, b) in pauli_field(&doubled, 0.7).iter().zip(pauli_field(&n, 0.7)) {
            assert_eq!(*a, 2.0 * b);
        }
    }

    #[test]
    fn field_set_components_add_up() {
        let g = RadialGrid::logarithmic(0.01, 10.0, 0.1).unwrap();
        let mut f = FieldSet::new(g.clone(), 4.0, vec![0.3; g.len()], 0.75);
        f.pauli = Some(vec![0.1; g.len()]);
        let total = f.total();
        for (j, r) in g.nodes().iter().enumerate() {
            assert_relative_eq!(total[j], -4.0 / r + 0.4, max_relative = 1e-14);
        }
        f.pauli_slices = Some(vec![vec![0.2; g.len()]; 3]);
        assert_eq!(f.slice_interactions().unwrap()[2][0], 0.5);
    }
}
