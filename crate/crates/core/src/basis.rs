//! Radial Gaussian basis sets with analytic one-electron matrix elements.
//!
//! A channel of angular momentum `l` holds radial functions
//! `u_i(r) = r^l exp(-alpha_i r^2)`. The full 3D basis function is
//! `u_i(r) * sqrt(4 pi) Y_lm`, so that for `l = 0` it is the plain Gaussian
//! `exp(-alpha r^2)` and every matrix element carries the same `4 pi`
//! angular factor.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{invalid, Error, Result};
use crate::grid::RadialGrid;
use crate::precision::DoubleDouble;

pub const DEFAULT_ALPHA_MIN: f64 = 1e-3;
pub const DEFAULT_ALPHA_MAX: f64 = 1e5;
pub const DEFAULT_BASIS_SIZE: usize = 75;
/// Normalized-overlap eigenvalues below this are treated as linear dependence.
pub const DEFAULT_DEPENDENCE_THRESHOLD: f64 = 1e-10;

/// Even-tempered exponents `alpha_i = alpha_min * ratio^i`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvenTempered {
    pub alpha_min: f64,
    pub ratio: f64,
}

impl EvenTempered {
    /// Scheme whose `n`-th exponent lands on `alpha_max`.
    pub fn spanning(alpha_min: f64, alpha_max: f64, n: usize) -> Result<Self> {
        if n < 2 {
            return Err(invalid("n_per_channel", format!("need at least 2 functions, got {n}")));
        }
        if !(alpha_min > 0.0 && alpha_max > alpha_min) {
            return Err(invalid("alpha", format!("need 0 < alpha_min < alpha_max, got {alpha_min}, {alpha_max}")));
        }
        Ok(Self {
            alpha_min,
            ratio: (alpha_max / alpha_min).powf(1.0 / (n - 1) as f64),
        })
    }

    pub fn exponents(&self, n: usize) -> Vec<f64> {
        (0..n).map(|i| self.alpha_min * self.ratio.powi(i as i32)).collect()
    }

    fn validate(&self, n: usize) -> Result<()> {
        if !(self.alpha_min > 0.0) {
            return Err(invalid("alpha_min", format!("must be positive, got {}", self.alpha_min)));
        }
        if !(self.ratio > 1.0) {
            return Err(invalid("ratio", format!("must exceed 1, got {}", self.ratio)));
        }
        if n < 2 {
            return Err(invalid("n_per_channel", format!("need at least 2 functions, got {n}")));
        }
        Ok(())
    }
}

impl Default for EvenTempered {
    fn default() -> Self {
        Self::spanning(DEFAULT_ALPHA_MIN, DEFAULT_ALPHA_MAX, DEFAULT_BASIS_SIZE).unwrap()
    }
}

/// `int_0^inf r^n exp(-p r^2) dr = Gamma((n+1)/2) / (2 p^((n+1)/2))`.
fn gaussian_moment(n: usize, p: f64) -> f64 {
    let half = (n + 1) as f64 / 2.0;
    half_integer_gamma(n + 1) / (2.0 * p.powf(half))
}

/// `Gamma(k/2)` for positive integer `k`.
fn half_integer_gamma(k: usize) -> f64 {
    let (mut g, mut x) = if k % 2 == 0 { (1.0, 1.0) } else { (PI.sqrt(), 0.5) };
    let target = k as f64 / 2.0;
    while x < target - 0.25 {
        g *= x;
        x += 1.0;
    }
    g
}

/// One angular-momentum channel.
#[derive(Debug, Clone)]
pub struct Channel {
    pub l: usize,
    pub exponents: Vec<f64>,
    pub overlap: DMatrix<f64>,
    pub kinetic: DMatrix<f64>,
}

impl Channel {
    pub fn new(l: usize, mut exponents: Vec<f64>, threshold: f64) -> Result<Self> {
        if exponents.is_empty() {
            return Err(invalid("exponents", "channel has no functions"));
        }
        if let Some(&bad) = exponents.iter().find(|a| !(**a > 0.0 && a.is_finite())) {
            return Err(invalid("exponents", format!("must be positive and finite, got {bad}")));
        }
        exponents.sort_by(|a, b| a.total_cmp(b));
        let n = exponents.len();
        let lf = l as f64;
        let overlap = DMatrix::from_fn(n, n, |i, j| {
            4.0 * PI * gaussian_moment(2 * l + 2, exponents[i] + exponents[j])
        });
        let kinetic = DMatrix::from_fn(n, n, |i, j| {
            let (a, b) = (exponents[i], exponents[j]);
            let p = a + b;
            let centrifugal = if l == 0 {
                0.0
            } else {
                lf * (2.0 * lf + 1.0) * gaussian_moment(2 * l, p) - 2.0 * lf * p * gaussian_moment(2 * l + 2, p)
            };
            2.0 * PI * (centrifugal + 4.0 * a * b * gaussian_moment(2 * l + 4, p))
        });
        let channel = Self {
            l,
            exponents,
            overlap,
            kinetic,
        };
        channel.check_pairs(threshold)?;
        Ok(channel)
    }

    pub fn len(&self) -> usize {
        self.exponents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.exponents.is_empty()
    }

    /// Angular degeneracy `2l + 1`.
    pub fn degeneracy(&self) -> usize {
        2 * self.l + 1
    }

    fn normalized_overlap(&self) -> DMatrix<f64> {
        let d: Vec<f64> = (0..self.len()).map(|i| self.overlap[(i, i)].sqrt().recip()).collect();
        DMatrix::from_fn(self.len(), self.len(), |i, j| self.overlap[(i, j)] * d[i] * d[j])
    }

    fn check_pairs(&self, threshold: f64) -> Result<()> {
        let s = self.normalized_overlap();
        for i in 0..self.len() {
            for j in i + 1..self.len() {
                let gap = 1.0 - s[(i, j)];
                if gap < threshold {
                    return Err(Error::LinearDependence {
                        l: self.l,
                        first: self.exponents[i],
                        second: self.exponents[j],
                        overlap: gap,
                    });
                }
            }
        }
        Ok(())
    }

    /// Smallest eigenvalue of the unit-diagonal overlap matrix.
    pub fn min_overlap_eigenvalue(&self) -> f64 {
        SymmetricEigen::new(self.normalized_overlap())
            .eigenvalues
            .iter()
            .copied()
            .fold(f64::INFINITY, f64::min)
    }

    /// `u_i(r)` for every basis function.
    pub fn radial_values(&self, r: f64) -> DVector<f64> {
        let rl = r.powi(self.l as i32);
        DVector::from_iterator(self.len(), self.exponents.iter().map(|a| rl * (-a * r * r).exp()))
    }

    /// Basis values on a grid, `grid.len() x n`.
    pub fn values_on(&self, grid: &RadialGrid) -> DMatrix<f64> {
        let rs = grid.nodes();
        DMatrix::from_fn(rs.len(), self.len(), |q, i| {
            let r = rs[q];
            r.powi(self.l as i32) * (-self.exponents[i] * r * r).exp()
        })
    }

    /// `<u_i| -Z/r |u_j>`.
    pub fn coulomb(&self, z: f64) -> DMatrix<f64> {
        let n = self.len();
        DMatrix::from_fn(n, n, |i, j| {
            -4.0 * PI * z * gaussian_moment(2 * self.l + 1, self.exponents[i] + self.exponents[j])
        })
    }

    pub fn orthogonalizer(&self, threshold: f64) -> Orthogonalizer {
        Orthogonalizer::refined(&self.overlap, &self.exact_overlap(), threshold)
    }

    /// Overlap matrix in double-double arithmetic.
    pub fn exact_overlap(&self) -> ExactOverlap {
        let n = self.len();
        let pi = DoubleDouble {
            hi: PI,
            lo: 1.2246467991473532e-16,
        };
        // 4 pi Gamma(l + 3/2) / 2 = 2 pi^{3/2} (2l+1)!! / 2^{l+1}
        let double_factorial: f64 = (0..=self.l).map(|k| (2 * k + 1) as f64).product();
        let prefactor = pi
            .mul(pi.sqrt())
            .mul(DoubleDouble::from_f64(2.0 * double_factorial / 2f64.powi(self.l as i32 + 1)));
        let mut entries = vec![DoubleDouble::ZERO; n * n];
        for i in 0..n {
            for j in i..n {
                let p = DoubleDouble::from_f64(self.exponents[i]).add(DoubleDouble::from_f64(self.exponents[j]));
                let v = prefactor.div(p.powi(self.l as u32 + 1).mul(p.sqrt()));
                entries[i * n + j] = v;
                entries[j * n + i] = v;
            }
        }
        ExactOverlap { n, entries }
    }
}

/// Overlap matrix held to about 32 digits, for checking and restoring
/// orthonormality that plain doubles cannot resolve in near-dependent sets.
#[derive(Debug, Clone)]
pub struct ExactOverlap {
    n: usize,
    entries: Vec<DoubleDouble>,
}

impl ExactOverlap {
    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    /// `X^T S X - I`, accumulated in double-double and rounded at the end.
    pub fn gram_deviation(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let n = self.n;
        let m = x.ncols();
        let mut sx = vec![DoubleDouble::ZERO; n * m];
        for i in 0..n {
            for k in 0..m {
                let mut acc = DoubleDouble::ZERO;
                for j in 0..n {
                    acc = acc.add(self.entries[i * n + j].mul(DoubleDouble::from_f64(x[(j, k)])));
                }
                sx[i * m + k] = acc;
            }
        }
        DMatrix::from_fn(m, m, |k, c| {
            let mut acc = if k == c { DoubleDouble::from_f64(-1.0) } else { DoubleDouble::ZERO };
            for i in 0..n {
                acc = acc.add(sx[i * m + c].mul(DoubleDouble::from_f64(x[(i, k)])));
            }
            acc.to_f64()
        })
    }

    /// `max |X^T S X - I|`.
    pub fn defect(&self, x: &DMatrix<f64>) -> f64 {
        self.gram_deviation(x).abs().max()
    }
}

/// Spectral representation substrate: one [`Channel`] per `l = 0..=l_max`.
#[derive(Debug, Clone)]
pub struct BasisSet {
    pub channels: Vec<Channel>,
    pub dependence_threshold: f64,
}

/// Build an even-tempered basis with the same exponents in every channel.
pub fn build_basis(n_per_channel: usize, l_max: usize, scheme: EvenTempered) -> Result<BasisSet> {
    scheme.validate(n_per_channel)?;
    BasisSet::from_exponents(scheme.exponents(n_per_channel), l_max, DEFAULT_DEPENDENCE_THRESHOLD)
}

impl BasisSet {
    pub fn from_exponents(exponents: Vec<f64>, l_max: usize, threshold: f64) -> Result<Self> {
        if !(threshold > 0.0 && threshold < 1.0) {
            return Err(invalid("dependence_threshold", format!("must lie in (0, 1), got {threshold}")));
        }
        let channels = (0..=l_max)
            .map(|l| Channel::new(l, exponents.clone(), threshold))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            channels,
            dependence_threshold: threshold,
        })
    }

    pub fn l_max(&self) -> usize {
        self.channels.len() - 1
    }

    pub fn exponent_range(&self) -> (f64, f64) {
        self.channels
            .iter()
            .flat_map(|c| c.exponents.iter().copied())
            .fold((f64::INFINITY, 0.0), |(lo, hi), a| (lo.min(a), hi.max(a)))
    }

    /// Radial grid that resolves every function in the set.
    pub fn grid(&self) -> Result<RadialGrid> {
        let (lo, hi) = self.exponent_range();
        RadialGrid::for_exponents(lo, hi)
    }

    /// Analytic nuclear attraction, one matrix per channel.
    pub fn coulomb_matrices(&self, z: f64) -> Result<Vec<DMatrix<f64>>> {
        if !(z >= 1.0) {
            return Err(invalid("Z", format!("nuclear charge must be >= 1, got {z}")));
        }
        Ok(self.channels.iter().map(|c| c.coulomb(z)).collect())
    }

    /// Matrix elements `4 pi sum_q w_q r_q^2 u_i u_j w(r_q)` of a spherical
    /// field tabulated on `grid`.
    pub fn project_field(&self, grid: &RadialGrid, field: &[f64]) -> Result<Vec<DMatrix<f64>>> {
        if field.len() != grid.len() {
            return Err(Error::Shape(format!("field has {} values, grid has {}", field.len(), grid.len())));
        }
        if let Some((r, v)) = grid.nodes().iter().zip(field).find(|(_, v)| !v.is_finite()) {
            return Err(Error::NonFiniteField { radius: *r, value: *v });
        }
        let scaled: Vec<f64> = grid
            .nodes()
            .iter()
            .zip(grid.weights())
            .zip(field)
            .map(|((r, w), f)| 4.0 * PI * w * r * r * f)
            .collect();
        Ok(self
            .channels
            .iter()
            .map(|c| {
                let u = c.values_on(grid);
                let mut weighted = u.clone();
                for (q, s) in scaled.iter().enumerate() {
                    weighted.row_mut(q).scale_mut(*s);
                }
                let m = u.transpose() * weighted;
                symmetrize(m)
            })
            .collect())
    }
}

pub(crate) fn symmetrize(m: DMatrix<f64>) -> DMatrix<f64> {
    let t = m.transpose();
    (m + t) * 0.5
}

/// Canonical orthogonalization `X` with `X^T S X = I`, dropping overlap
/// eigen-directions whose normalized eigenvalue falls below the threshold.
#[derive(Debug, Clone)]
pub struct Orthogonalizer {
    pub transform: DMatrix<f64>,
    pub min_eigenvalue: f64,
    pub dropped: usize,
}

impl Orthogonalizer {
    pub fn canonical(overlap: &DMatrix<f64>, threshold: f64) -> Self {
        let n = overlap.nrows();
        let d: Vec<f64> = (0..n).map(|i| overlap[(i, i)].sqrt().recip()).collect();
        let normalized = DMatrix::from_fn(n, n, |i, j| overlap[(i, j)] * d[i] * d[j]);
        let eig = SymmetricEigen::new(normalized);
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
        let kept: Vec<usize> = order.iter().copied().filter(|&k| eig.eigenvalues[k] > threshold).collect();
        let min_eigenvalue = eig.eigenvalues.iter().copied().fold(f64::INFINITY, f64::min);
        let transform = DMatrix::from_fn(n, kept.len(), |i, c| {
            let k = kept[c];
            d[i] * eig.eigenvectors[(i, k)] / eig.eigenvalues[k].sqrt()
        });
        Self {
            transform,
            min_eigenvalue,
            dropped: n - kept.len(),
        }
    }

    /// Canonical orthogonalization followed by Newton-Schulz sweeps
    /// `X <- X (I - E/2)`, `E = X^T S X - I`, with `E` taken from the
    /// extended-precision overlap. Plain doubles leave `E ~ eps/lambda_min`.
    pub fn refined(overlap: &DMatrix<f64>, exact: &ExactOverlap, threshold: f64) -> Self {
        let mut out = Self::canonical(overlap, threshold);
        for _ in 0..4 {
            let e = symmetrize(exact.gram_deviation(&out.transform));
            if e.abs().max() < 1e-14 {
                break;
            }
            let correction = &out.transform * e * 0.5;
            out.transform -= correction;
        }
        out
    }

    pub fn rank(&self) -> usize {
        self.transform.ncols()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn s_channel(exponents: &[f64]) -> Channel {
        Channel::new(0, exponents.to_vec(), DEFAULT_DEPENDENCE_THRESHOLD).unwrap()
    }

    #[test]
    fn duplicate_exponents_are_rejected_with_the_pair() {
        let err = BasisSet::from_exponents(vec![1.0, 1.0], 0, DEFAULT_DEPENDENCE_THRESHOLD).unwrap_err();
        match err {
            Error::LinearDependence { first, second, .. } => {
                assert_eq!((first, second), (1.0, 1.0));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn single_gaussian_overlap_closed_form() {
        let c = s_channel(&[1.0]);
        // int 4 pi r^2 e^{-2 r^2} dr = pi (pi/2)^{1/2} / 2
        assert_relative_eq!(c.overlap[(0, 0)], PI * (PI / 2.0).sqrt() / 2.0, max_relative = 1e-15);
    }

    #[test]
    fn kinetic_matches_finite_difference_quadrature() {
        // 1/2 int (u_i' u_j' + l(l+1)/r^2 u_i u_j) 4 pi r^2 dr, derivative by
        // central differences on a fine uniform mesh.
        for l in 0..=2usize {
            let c = Channel::new(l, vec![0.3, 1.7], DEFAULT_DEPENDENCE_THRESHOLD).unwrap();
            let u = |a: f64, r: f64| r.powi(l as i32) * (-a * r * r).exp();
            let h = 1e-4;
            let mut acc = 0.0;
            let steps = 120_000;
            for k in 1..steps {
                let r = k as f64 * h;
                let d0 = (u(0.3, r + 1e-6) - u(0.3, r - 1e-6)) / 2e-6;
                let d1 = (u(1.7, r + 1e-6) - u(1.7, r - 1e-6)) / 2e-6;
                let cent = (l * (l + 1)) as f64 / (r * r) * u(0.3, r) * u(1.7, r);
                acc += 0.5 * (d0 * d1 + cent) * 4.0 * PI * r * r * h;
            }
            assert_relative_eq!(c.kinetic[(0, 1)], acc, max_relative = 1e-6);
        }
    }

    #[test]
    fn coulomb_of_unit_gaussian_matches_quadrature() {
        // <e^{-r^2}| -1/r |e^{-r^2}> = -4 pi int r e^{-2 r^2} dr = -pi
        let c = s_channel(&[1.0]);
        assert_relative_eq!(c.coulomb(1.0)[(0, 0)], -PI, max_relative = 1e-15);
        let grid = RadialGrid::for_exponents(1.0, 1.0).unwrap();
        let f: Vec<f64> = grid.nodes().iter().map(|r| -4.0 * PI * r * (-2.0 * r * r).exp()).collect();
        // the inner cut at 1e-6 drops 2 pi r_min^2 ~ 6e-12
        assert_relative_eq!(grid.integrate(&f), -PI, max_relative = 1e-11);
    }

    #[test]
    fn coulomb_is_linear_in_charge_and_attractive() {
        let basis = build_basis(12, 1, EvenTempered::spanning(0.01, 100.0, 12).unwrap()).unwrap();
        let v4 = basis.coulomb_matrices(4.0).unwrap();
        let v8 = basis.coulomb_matrices(8.0).unwrap();
        for (a, b) in v4.iter().zip(&v8) {
            assert_eq!(&(a * 2.0), b);
            assert!((0..a.nrows()).all(|i| a[(i, i)] < 0.0));
        }
        assert!(basis.coulomb_matrices(0.5).is_err());
    }

    #[test]
    fn matrices_are_symmetric() {
        let basis = build_basis(20, 1, EvenTempered::spanning(1e-3, 1e5, 20).unwrap()).unwrap();
        for c in &basis.channels {
            for m in [&c.overlap, &c.kinetic, &c.coulomb(3.0)] {
                let asym = (m - m.transpose()).abs().max();
                assert!(asym <= 1e-13 * m.norm(), "asym {asym:e}");
            }
        }
    }

    #[test]
    fn default_basis_has_75_functions_and_reports_conditioning() {
        let basis = build_basis(75, 0, EvenTempered::default()).unwrap();
        let c = &basis.channels[0];
        assert_eq!(c.len(), 75);
        assert_relative_eq!(c.exponents[74], DEFAULT_ALPHA_MAX, max_relative = 1e-12);
        let x = c.orthogonalizer(basis.dependence_threshold);
        let err = c.exact_overlap().defect(&x.transform);
        assert!(err < 1e-10, "X^T S X deviates by {err:e}");
        assert!(x.min_eigenvalue < basis.dependence_threshold);
        assert!(x.dropped > 0 && x.rank() > 40);
    }

    #[test]
    fn exact_overlap_agrees_with_double_overlap() {
        for l in 0..3 {
            let c = Channel::new(l, vec![0.01, 0.7, 3.0, 900.0], DEFAULT_DEPENDENCE_THRESHOLD).unwrap();
            let exact = c.exact_overlap();
            let id = DMatrix::identity(4, 4);
            // X = I gives S - I
            let dev = exact.gram_deviation(&id) + &id;
            for i in 0..4 {
                for j in 0..4 {
                    assert_relative_eq!(dev[(i, j)], c.overlap[(i, j)], max_relative = 1e-14);
                }
            }
        }
    }

    #[test]
    fn invalid_schemes_rejected() {
        assert!(build_basis(1, 0, EvenTempered { alpha_min: 1.0, ratio: 2.0 }).is_err());
        assert!(build_basis(5, 0, EvenTempered { alpha_min: 0.0, ratio: 2.0 }).is_err());
        assert!(build_basis(5, 0, EvenTempered { alpha_min: 1.0, ratio: 1.0 }).is_err());
    }

    #[test]
    fn field_projection_identities() {
        let basis = build_basis(30, 1, EvenTempered::spanning(1e-3, 1e5, 30).unwrap()).unwrap();
        let grid = basis.grid().unwrap();
        let zero = basis.project_field(&grid, &vec![0.0; grid.len()]).unwrap();
        assert!(zero.iter().all(|m| m.iter().all(|&v| v == 0.0)));

        let c = 0.37;
        let constant = basis.project_field(&grid, &vec![c; grid.len()]).unwrap();
        for (w, ch) in constant.iter().zip(&basis.channels) {
            let rel = (w - &ch.overlap * c).abs().max() / (ch.overlap.abs().max() * c);
            assert!(rel < 1e-10, "rel {rel:e}");
        }

        let coulomb: Vec<f64> = grid.nodes().iter().map(|r| -4.0 / r).collect();
        let projected = basis.project_field(&grid, &coulomb).unwrap();
        let analytic = basis.coulomb_matrices(4.0).unwrap();
        for (p, a) in projected.iter().zip(&analytic) {
            let rel = (p - a).abs().max() / a.abs().max();
            assert!(rel < 1e-8, "rel {rel:e}");
        }

        let mut bad = vec![0.0; grid.len()];
        bad[3] = f64::NAN;
        assert!(matches!(basis.project_field(&grid, &bad), Err(Error::NonFiniteField { .. })));
    }

    #[test]
    fn half_integer_gamma_values() {
        assert_relative_eq!(half_integer_gamma(1), PI.sqrt());
        assert_relative_eq!(half_integer_gamma(2), 1.0);
        assert_relative_eq!(half_integer_gamma(5), 0.75 * PI.sqrt());
        assert_relative_eq!(half_integer_gamma(8), 6.0);
    }
}
