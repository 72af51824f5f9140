//! Spectral solution of the imaginary-time diffusion equation
//! `dq/ds = 1/2 lap q - w q` with a delta initial condition.
//!
//! With `H = T + V_ext + W` diagonalized per channel the propagator is
//! `q(r, r', s) = sum_l (2l+1) P_l(cos g) sum_k exp(-e_lk s) R_lk(r) R_lk(r')`,
//! where `R_lk` are radial eigenfunctions normalized as `4 pi int R^2 r^2 dr = 1`.
//! Every quantity that would overflow at large `beta` is carried with a
//! spectral shift `exp(e_0 s)`; ratios never see it.

use std::f64::consts::{LN_10, PI};

use log::debug;
use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::basis::{symmetrize, BasisSet, Orthogonalizer};
use crate::error::{invalid, Error, Result};
use crate::grid::{legendre_all, RadialGrid};
use crate::precision::{BigReal, ExtContext, DEFAULT_DIGITS};

/// Eigenpairs of one angular-momentum channel.
#[derive(Debug, Clone)]
pub struct ChannelSpectrum {
    pub l: usize,
    pub exponents: Vec<f64>,
    /// Ascending, hartree.
    pub energies: Vec<f64>,
    /// Columns are eigenvectors in the raw basis, `C^T S C = I`.
    pub coefficients: DMatrix<f64>,
}

impl ChannelSpectrum {
    pub fn degeneracy(&self) -> usize {
        2 * self.l + 1
    }

    pub fn len(&self) -> usize {
        self.energies.len()
    }

    pub fn is_empty(&self) -> bool {
        self.energies.is_empty()
    }

    fn basis_values(&self, r: f64) -> DVector<f64> {
        let rl = r.powi(self.l as i32);
        DVector::from_iterator(self.exponents.len(), self.exponents.iter().map(|a| rl * (-a * r * r).exp()))
    }

    /// `R_k(r)` for every eigenstate.
    pub fn radial(&self, r: f64) -> DVector<f64> {
        self.coefficients.tr_mul(&self.basis_values(r))
    }

    /// `R_k(r_q)` on a grid, `grid.len() x states`.
    pub fn radial_on(&self, grid: &RadialGrid) -> DMatrix<f64> {
        let rs = grid.nodes();
        let u = DMatrix::from_fn(rs.len(), self.exponents.len(), |q, i| {
            rs[q].powi(self.l as i32) * (-self.exponents[i] * rs[q] * rs[q]).exp()
        });
        u * &self.coefficients
    }
}

/// One level of the full spectrum with its angular degeneracy.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Level {
    pub channel: usize,
    pub state: usize,
    pub energy: f64,
    pub degeneracy: usize,
}

#[derive(Debug, Clone)]
pub struct Spectrum {
    pub channels: Vec<ChannelSpectrum>,
}

impl Spectrum {
    /// All levels, ascending in energy.
    pub fn levels(&self) -> Vec<Level> {
        let mut levels: Vec<Level> = self
            .channels
            .iter()
            .enumerate()
            .flat_map(|(c, ch)| {
                ch.energies.iter().enumerate().map(move |(k, &e)| Level {
                    channel: c,
                    state: k,
                    energy: e,
                    degeneracy: ch.degeneracy(),
                })
            })
            .collect();
        levels.sort_by(|a, b| a.energy.total_cmp(&b.energy).then(a.channel.cmp(&b.channel)));
        levels
    }

    pub fn ground_energy(&self) -> f64 {
        self.channels
            .iter()
            .filter_map(|c| c.energies.first().copied())
            .fold(f64::INFINITY, f64::min)
    }

    pub fn max_energy(&self) -> f64 {
        self.channels
            .iter()
            .filter_map(|c| c.energies.last().copied())
            .fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn l_max(&self) -> usize {
        self.channels.len() - 1
    }

    /// Shifted propagator at imaginary time `s`.
    pub fn kernel(&self, s: f64) -> Kernel<'_> {
        Kernel::new(self, s, self.ground_energy())
    }

    /// Kernel matrix `C diag(exp(-(e - shift) s)) C^T` in the raw basis.
    pub fn kernel_matrix(&self, channel: usize, s: f64, shift: f64) -> DMatrix<f64> {
        let ch = &self.channels[channel];
        let mut scaled = ch.coefficients.clone();
        for (k, e) in ch.energies.iter().enumerate() {
            scaled.column_mut(k).scale_mut((-(e - shift) * s).exp());
        }
        &scaled * ch.coefficients.transpose()
    }
}

/// Reusable pieces of the generalized eigenproblem: orthogonalizers and the
/// field-free core Hamiltonian `T + V_ext` per channel.
#[derive(Debug, Clone)]
pub struct SpectralSolver {
    pub basis: BasisSet,
    pub orthogonalizers: Vec<Orthogonalizer>,
    pub core: Vec<DMatrix<f64>>,
}

impl SpectralSolver {
    pub fn new(basis: BasisSet, z: f64) -> Result<Self> {
        Self::with_external(basis.clone(), basis.coulomb_matrices(z)?)
    }

    /// Free particle: kinetic energy only.
    pub fn free(basis: BasisSet) -> Self {
        let zero = basis
            .channels
            .iter()
            .map(|c| DMatrix::zeros(c.len(), c.len()))
            .collect();
        Self::with_external(basis, zero).expect("shapes agree by construction")
    }

    fn with_external(basis: BasisSet, external: Vec<DMatrix<f64>>) -> Result<Self> {
        let orthogonalizers: Vec<Orthogonalizer> = basis
            .channels
            .iter()
            .map(|c| c.orthogonalizer(basis.dependence_threshold))
            .collect();
        for (c, o) in basis.channels.iter().zip(&orthogonalizers) {
            if o.dropped > 0 {
                debug!(
                    "channel l={}: dropped {} of {} overlap directions (min eigenvalue {:.3e})",
                    c.l,
                    o.dropped,
                    c.len(),
                    o.min_eigenvalue
                );
            }
        }
        let core = basis
            .channels
            .iter()
            .zip(external)
            .map(|(c, v)| &c.kinetic + v)
            .collect();
        Ok(Self {
            basis,
            orthogonalizers,
            core,
        })
    }

    fn check_field(&self, field: Option<&[DMatrix<f64>]>) -> Result<()> {
        if let Some(w) = field {
            if w.len() != self.core.len() {
                return Err(Error::Shape(format!("{} field matrices for {} channels", w.len(), self.core.len())));
            }
            for (m, c) in w.iter().zip(&self.core) {
                if m.shape() != c.shape() {
                    return Err(Error::Shape(format!("field matrix {:?}, basis {:?}", m.shape(), c.shape())));
                }
            }
        }
        Ok(())
    }

    /// Orthonormal-basis Hamiltonian `X^T (T + V + W) X` per channel.
    pub fn orthonormal_hamiltonians(&self, field: Option<&[DMatrix<f64>]>) -> Result<Vec<DMatrix<f64>>> {
        self.check_field(field)?;
        Ok(self
            .core
            .iter()
            .enumerate()
            .map(|(c, h)| {
                let x = &self.orthogonalizers[c].transform;
                let full = match field {
                    Some(w) => h + &w[c],
                    None => h.clone(),
                };
                symmetrize(x.transpose() * full * x)
            })
            .collect())
    }

    pub fn diagonalize(&self, field: Option<&[DMatrix<f64>]>) -> Result<Spectrum> {
        let hams = self.orthonormal_hamiltonians(field)?;
        let channels = hams
            .into_iter()
            .enumerate()
            .map(|(c, h)| {
                let (energies, vectors) = sorted_eigen(h);
                let coefficients = &self.orthogonalizers[c].transform * vectors;
                ChannelSpectrum {
                    l: self.basis.channels[c].l,
                    exponents: self.basis.channels[c].exponents.clone(),
                    energies,
                    coefficients,
                }
            })
            .collect();
        Ok(Spectrum { channels })
    }
}

pub(crate) fn sorted_eigen(h: DMatrix<f64>) -> (Vec<f64>, DMatrix<f64>) {
    let eig = SymmetricEigen::new(h);
    let n = eig.eigenvalues.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let energies = order.iter().map(|&k| eig.eigenvalues[k]).collect();
    let vectors = DMatrix::from_fn(n, n, |i, j| eig.eigenvectors[(i, order[j])]);
    (energies, vectors)
}

/// Solve `(T + V_ext + W) C = S C diag(e)` for nuclear charge `z`.
pub fn diagonalize(basis: &BasisSet, z: f64, field: Option<&[DMatrix<f64>]>) -> Result<Spectrum> {
    SpectralSolver::new(basis.clone(), z)?.diagonalize(field)
}

/// Unshifted diagonal `q(r, r, s)`; overflows for `s |e_0|` beyond ~700.
pub fn propagator_diagonal(spec: &Spectrum, s: f64, r: f64) -> f64 {
    Kernel::new(spec, s, 0.0).diagonal(r)
}

/// Propagator at fixed imaginary time, scaled by `exp(shift * s)`.
#[derive(Debug, Clone)]
pub struct Kernel<'a> {
    spectrum: &'a Spectrum,
    pub s: f64,
    pub shift: f64,
    weights: Vec<Vec<f64>>,
}

impl<'a> Kernel<'a> {
    pub fn new(spectrum: &'a Spectrum, s: f64, shift: f64) -> Self {
        let weights = spectrum
            .channels
            .iter()
            .map(|c| c.energies.iter().map(|e| (-(e - shift) * s).exp()).collect())
            .collect();
        Self {
            spectrum,
            s,
            shift,
            weights,
        }
    }

    pub fn spectrum(&self) -> &Spectrum {
        self.spectrum
    }

    /// `sum_k exp(-(e_k - shift) s) R_k(r) R_k(r')` for one channel.
    pub fn radial(&self, channel: usize, r: f64, r_prime: f64) -> f64 {
        let ch = &self.spectrum.channels[channel];
        let a = ch.radial(r);
        let b = ch.radial(r_prime);
        self.weights[channel].iter().zip(a.iter().zip(b.iter())).map(|(w, (x, y))| w * x * y).sum()
    }

    pub fn diagonal(&self, r: f64) -> f64 {
        self.spectrum
            .channels
            .iter()
            .enumerate()
            .map(|(c, ch)| {
                let rad = ch.radial(r);
                let sum: f64 = self.weights[c].iter().zip(rad.iter()).map(|(w, v)| w * v * v).sum();
                ch.degeneracy() as f64 * sum
            })
            .sum()
    }

    /// `q(a, b, s)` between two 3D points.
    pub fn between(&self, a: &[f64; 3], b: &[f64; 3]) -> f64 {
        let ra = norm(a);
        let rb = norm(b);
        let cos = if ra == 0.0 || rb == 0.0 {
            1.0
        } else {
            ((a[0] * b[0] + a[1] * b[1] + a[2] * b[2]) / (ra * rb)).clamp(-1.0, 1.0)
        };
        self.at_angle(ra, rb, cos)
    }

    /// `q` between radii `r`, `r'` separated by angle `acos(cos_angle)`.
    pub fn at_angle(&self, r: f64, r_prime: f64, cos_angle: f64) -> f64 {
        let p = legendre_all(self.spectrum.l_max(), cos_angle);
        self.spectrum
            .channels
            .iter()
            .enumerate()
            .map(|(c, ch)| {
                let a = ch.radial(r);
                let b = ch.radial(r_prime);
                let sum: f64 = self.weights[c].iter().zip(a.iter().zip(b.iter())).map(|(w, (x, y))| w * x * y).sum();
                ch.degeneracy() as f64 * p[ch.l] * sum
            })
            .sum()
    }

    /// Diagonal on every grid node.
    pub fn diagonal_on(&self, grid: &RadialGrid) -> Vec<f64> {
        let mut out = vec![0.0; grid.len()];
        for (c, ch) in self.spectrum.channels.iter().enumerate() {
            let rad = ch.radial_on(grid);
            let g = ch.degeneracy() as f64;
            for (q, o) in out.iter_mut().enumerate() {
                let row = rad.row(q);
                *o += g * self.weights[c].iter().zip(row.iter()).map(|(w, v)| w * v * v).sum::<f64>();
            }
        }
        out
    }

    /// Radial kernel matrix `K_l(r_i, r_j)` on a grid for one channel.
    pub fn radial_matrix_on(&self, channel: usize, grid: &RadialGrid) -> DMatrix<f64> {
        let rad = self.spectrum.channels[channel].radial_on(grid);
        let mut scaled = rad.clone();
        for (k, w) in self.weights[channel].iter().enumerate() {
            scaled.column_mut(k).scale_mut(*w);
        }
        scaled * rad.transpose()
    }
}

pub(crate) fn norm(a: &[f64; 3]) -> f64 {
    (a[0] * a[0] + a[1] * a[1] + a[2] * a[2]).sqrt()
}

/// Boltzmann weight of one level within [`PartitionValues`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LevelWeight {
    pub level: Level,
    /// `exp(-(e - e_0) beta)`
    pub weight: f64,
    /// Shifted partition function of every other single-particle state,
    /// summed explicitly: `sum_{L' != L} g x + (g_L - 1) x_L`.
    pub rest: f64,
}

/// `Q(beta)`, `Q(2 beta)` and the pair normalization `Q(beta)^2 - Q(2 beta)`,
/// stored shifted: `Q = exp(-e_0 beta) q_beta`, `Q(2beta) = exp(-2 e_0 beta)
/// q_2beta`, pair norm `= exp(-2 e_0 beta) pair_norm`.
#[derive(Debug, Clone, PartialEq)]
pub struct PartitionValues {
    pub beta: f64,
    pub shift: f64,
    pub q_beta: f64,
    pub q_2beta: f64,
    pub pair_norm: f64,
    /// Whether the sums were accumulated in extended precision.
    pub extended: bool,
    pub levels: Vec<LevelWeight>,
}

impl PartitionValues {
    pub fn ln_q_beta(&self) -> f64 {
        self.q_beta.ln() - self.shift * self.beta
    }

    pub fn ln_q_2beta(&self) -> f64 {
        self.q_2beta.ln() - 2.0 * self.shift * self.beta
    }

    pub fn ln_pair_norm(&self) -> f64 {
        self.pair_norm.ln() - 2.0 * self.shift * self.beta
    }

    /// Decimal digits a literal `Q^2 - Q(2beta)` loses to cancellation.
    pub fn cancellation_digits(&self) -> f64 {
        (2.0 * self.q_beta.ln() - self.pair_norm.ln()) / LN_10
    }

    /// Per-state occupations of the exchange density for `n` particles:
    /// `f_L = n x_L rest_L / pair_norm`, summing (with degeneracy) to `n`.
    pub fn exchange_occupations(&self, n: usize) -> Vec<f64> {
        self.levels
            .iter()
            .map(|lw| n as f64 * lw.weight * lw.rest / self.pair_norm)
            .collect()
    }

    /// Per-state occupations of the exchange-free density.
    pub fn naive_occupations(&self, n: usize) -> Vec<f64> {
        self.levels.iter().map(|lw| n as f64 * lw.weight / self.q_beta).collect()
    }
}

/// `beta * spread` beyond which the shifted sums switch to extended precision.
pub const EXTENDED_TRIGGER: f64 = 600.0 * LN_10;

pub fn partition_values(spec: &Spectrum, beta: f64) -> Result<PartitionValues> {
    if !(beta > 0.0 && beta.is_finite()) {
        return Err(invalid("beta", format!("must be positive, got {beta}")));
    }
    let levels = spec.levels();
    let shift = levels[0].energy;
    let spread = levels.last().unwrap().energy - shift;
    let extended = beta * spread > EXTENDED_TRIGGER;

    let (weights, rests, q_beta, q_2beta, pair_norm) = if extended {
        let ctx = ExtContext::with_digits(DEFAULT_DIGITS);
        let xs: Vec<BigReal> = levels
            .iter()
            .map(|l| ctx.exp(&BigReal::from_f64(-(l.energy - shift)).mul(&BigReal::from_f64(beta), u64::MAX)))
            .collect();
        let gx: Vec<BigReal> = levels
            .iter()
            .zip(&xs)
            .map(|(l, x)| ctx.mul(&BigReal::from_f64(l.degeneracy as f64), x))
            .collect();
        let rests = rest_sums_ext(&ctx, &levels, &xs, &gx);
        let q = ctx.sum(gx.iter().rev());
        let q2 = ctx.sum(gx.iter().zip(&xs).map(|(a, b)| ctx.mul(a, b)).collect::<Vec<_>>().iter().rev());
        let pn = ctx.sum(gx.iter().zip(&rests).map(|(a, b)| ctx.mul(a, b)).collect::<Vec<_>>().iter().rev());
        (
            xs.iter().map(BigReal::to_f64).collect::<Vec<_>>(),
            rests.iter().map(BigReal::to_f64).collect::<Vec<_>>(),
            q.to_f64(),
            q2.to_f64(),
            pn.to_f64(),
        )
    } else {
        let xs: Vec<f64> = levels.iter().map(|l| (-(l.energy - shift) * beta).exp()).collect();
        let rests = rest_sums(&levels, &xs);
        let rev_sum = |f: &dyn Fn(usize) -> f64| (0..levels.len()).rev().map(f).sum::<f64>();
        let g = |i: usize| levels[i].degeneracy as f64;
        let q = rev_sum(&|i| g(i) * xs[i]);
        let q2 = rev_sum(&|i| g(i) * xs[i] * xs[i]);
        let pn = rev_sum(&|i| g(i) * xs[i] * rests[i]);
        (xs, rests, q, q2, pn)
    };

    let levels = levels
        .into_iter()
        .zip(weights.into_iter().zip(rests))
        .map(|(level, (weight, rest))| LevelWeight { level, weight, rest })
        .collect();
    Ok(PartitionValues {
        beta,
        shift,
        q_beta,
        q_2beta,
        pair_norm,
        extended,
        levels,
    })
}

// rest_i = sum_{j<i} g x + sum_{j>i} g x + (g_i - 1) x_i, every piece a sum
// of non-negative terms. Suffix sums run small-to-large.
fn rest_sums(levels: &[Level], xs: &[f64]) -> Vec<f64> {
    let n = xs.len();
    let gx: Vec<f64> = levels.iter().zip(xs).map(|(l, x)| l.degeneracy as f64 * x).collect();
    let mut suffix = vec![0.0; n + 1];
    for i in (0..n).rev() {
        suffix[i] = suffix[i + 1] + gx[i];
    }
    let mut prefix = 0.0;
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        out.push(suffix[i + 1] + prefix + (levels[i].degeneracy as f64 - 1.0) * xs[i]);
        prefix += gx[i];
    }
    out
}

fn rest_sums_ext(ctx: &ExtContext, levels: &[Level], xs: &[BigReal], gx: &[BigReal]) -> Vec<BigReal> {
    let n = xs.len();
    let mut suffix = vec![BigReal::zero(); n + 1];
    for i in (0..n).rev() {
        suffix[i] = ctx.add(&suffix[i + 1], &gx[i]);
    }
    let mut prefix = BigReal::zero();
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let self_pairs = ctx.mul(&BigReal::from_f64(levels[i].degeneracy as f64 - 1.0), &xs[i]);
        out.push(ctx.add(&ctx.add(&suffix[i + 1], &prefix), &self_pairs));
        prefix = ctx.add(&prefix, &gx[i]);
    }
    out
}

/// Unshifted `Q(beta)`, `Q(2beta)` and both evaluations of their pair
/// combination, carried in extended precision.
#[derive(Debug, Clone)]
pub struct ExtendedPartition {
    pub q_beta: BigReal,
    pub q_2beta: BigReal,
    /// `Q(beta)^2 - Q(2beta)` as a literal difference.
    pub literal_pair_norm: BigReal,
    /// The same quantity as a sum of positive pair terms.
    pub pairwise_pair_norm: BigReal,
    /// Decimal digits cancelled in the literal difference.
    pub digits_lost: f64,
    pub working_digits: f64,
}

impl ExtendedPartition {
    /// `literal / pairwise - 1`.
    pub fn relative_discrepancy(&self, ctx: &ExtContext) -> f64 {
        let d = ctx.sub(&self.literal_pair_norm, &self.pairwise_pair_norm);
        ctx.div(&d, &self.pairwise_pair_norm).to_f64()
    }

    /// Significant digits left in the literal difference.
    pub fn retained_digits(&self) -> f64 {
        self.working_digits - self.digits_lost
    }
}

/// Exponent `-e beta` exactly (106-bit product of two doubles).
pub(crate) fn boltzmann_exponent(energy: f64, beta: f64) -> BigReal {
    BigReal::from_f64(-energy).mul(&BigReal::from_f64(beta), u64::MAX)
}

pub fn extended_partition(spec: &Spectrum, beta: f64, ctx: &ExtContext) -> Result<ExtendedPartition> {
    if !(beta > 0.0 && beta.is_finite()) {
        return Err(invalid("beta", format!("must be positive, got {beta}")));
    }
    let levels = spec.levels();
    let xs: Vec<BigReal> = levels.iter().map(|l| ctx.exp(&boltzmann_exponent(l.energy, beta))).collect();
    let gs: Vec<BigReal> = levels.iter().map(|l| BigReal::from_f64(l.degeneracy as f64)).collect();
    let gx: Vec<BigReal> = gs.iter().zip(&xs).map(|(g, x)| ctx.mul(g, x)).collect();
    let q = ctx.sum(gx.iter().rev());
    let q2_terms: Vec<BigReal> = gx.iter().zip(&xs).map(|(a, x)| ctx.mul(a, x)).collect();
    let q2 = ctx.sum(q2_terms.iter().rev());
    let square = ctx.mul(&q, &q);
    let literal = ctx.sub(&square, &q2);
    let rests = rest_sums_ext(ctx, &levels, &xs, &gx);
    let pair_terms: Vec<BigReal> = gx.iter().zip(&rests).map(|(a, b)| ctx.mul(a, b)).collect();
    let pairwise = ctx.sum(pair_terms.iter().rev());
    let digits_lost = if literal.is_zero() {
        f64::INFINITY
    } else {
        square.log10_abs() - literal.log10_abs()
    };
    Ok(ExtendedPartition {
        q_beta: q,
        q_2beta: q2,
        literal_pair_norm: literal,
        pairwise_pair_norm: pairwise,
        digits_lost,
        working_digits: ctx.digits(),
    })
}

/// Working precision that keeps `budget` digits after the cancellation
/// predicted from the shifted sums.
pub fn required_digits(pv: &PartitionValues, budget: u32) -> u32 {
    budget + pv.cancellation_digits().max(0.0).ceil() as u32 + 8
}

/// Contour double integral `int int q(r, r', s) q(r, r', beta - s)`
/// by grid quadrature, shifted by `exp(e_0 beta)`.
pub fn contour_partition(spec: &Spectrum, grid: &RadialGrid, s: f64, beta: f64) -> f64 {
    let shift = spec.ground_energy();
    let first = Kernel::new(spec, s, shift);
    let second = Kernel::new(spec, beta - s, shift);
    let wr2: Vec<f64> = grid
        .nodes()
        .iter()
        .zip(grid.weights())
        .map(|(r, w)| 4.0 * PI * w * r * r)
        .collect();
    let mut total = 0.0;
    for (c, ch) in spec.channels.iter().enumerate() {
        let a = first.radial_matrix_on(c, grid);
        let b = second.radial_matrix_on(c, grid);
        let mut sum = 0.0;
        for i in 0..grid.len() {
            let mut row = 0.0;
            for j in 0..grid.len() {
                row += wr2[j] * a[(i, j)] * b[(i, j)];
            }
            sum += wr2[i] * row;
        }
        total += ch.degeneracy() as f64 * sum;
    }
    total
}

/// Ordered product of per-slice propagators in the orthonormal basis.
#[derive(Debug, Clone)]
pub struct ChannelTransfer {
    pub l: usize,
    pub transform: DMatrix<f64>,
    /// `exp(-ds (H_m - shift))`, slice 1 first.
    pub factors: Vec<DMatrix<f64>>,
}

impl ChannelTransfer {
    pub fn degeneracy(&self) -> usize {
        2 * self.l + 1
    }

    fn dim(&self) -> usize {
        self.transform.ncols()
    }

    /// `E_M ... E_1`.
    pub fn product(&self) -> DMatrix<f64> {
        self.factors
            .iter()
            .fold(DMatrix::identity(self.dim(), self.dim()), |acc, e| e * acc)
    }

    /// `F_m = E_m ... E_1` for `m = 0..=M`.
    pub fn forward_products(&self) -> Vec<DMatrix<f64>> {
        let mut out = vec![DMatrix::identity(self.dim(), self.dim())];
        for e in &self.factors {
            let next = e * out.last().unwrap();
            out.push(next);
        }
        out
    }

    /// `B_m = E_M ... E_{m+1}` for `m = 0..=M`.
    pub fn backward_products(&self) -> Vec<DMatrix<f64>> {
        let m = self.factors.len();
        let mut out = vec![DMatrix::identity(self.dim(), self.dim()); m + 1];
        for k in (0..m).rev() {
            out[k] = &out[k + 1] * &self.factors[k];
        }
        out
    }

    /// Transfer kernel in the raw basis, `X P X^T`.
    pub fn kernel_matrix(&self) -> DMatrix<f64> {
        &self.transform * self.product() * self.transform.transpose()
    }
}

#[derive(Debug, Clone)]
pub struct SliceTransfer {
    pub beta: f64,
    pub shift: f64,
    pub channels: Vec<ChannelTransfer>,
}

impl SliceTransfer {
    pub fn slices(&self) -> usize {
        self.channels[0].factors.len()
    }

    /// Shifted `Q(beta) = sum_l (2l+1) tr(E_M ... E_1)`.
    pub fn partition(&self) -> f64 {
        self.channels
            .iter()
            .map(|c| c.degeneracy() as f64 * c.product().trace())
            .sum()
    }
}

/// Exponentiate each slice exactly and keep them in contour order.
/// `fields_per_slice[m]` holds one field matrix per channel.
pub fn slice_propagate(
    solver: &SpectralSolver,
    fields_per_slice: &[Vec<DMatrix<f64>>],
    beta: f64,
) -> Result<SliceTransfer> {
    if fields_per_slice.is_empty() {
        return Err(invalid("slices", "need at least one slice"));
    }
    if !(beta > 0.0 && beta.is_finite()) {
        return Err(invalid("beta", format!("must be positive, got {beta}")));
    }
    let ds = beta / fields_per_slice.len() as f64;
    let mut eigs = Vec::with_capacity(fields_per_slice.len());
    for field in fields_per_slice {
        for m in field {
            let asym = (m - m.transpose()).abs().max();
            if asym > 1e-10 * m.abs().max().max(1.0) {
                return Err(invalid("fields_per_slice", format!("field matrix not symmetric ({asym:e})")));
            }
        }
        let hams = solver.orthonormal_hamiltonians(Some(field))?;
        eigs.push(hams.into_iter().map(sorted_eigen).collect::<Vec<_>>());
    }
    let shift = eigs
        .iter()
        .flat_map(|slice| slice.iter().filter_map(|(e, _)| e.first().copied()))
        .fold(f64::INFINITY, f64::min);
    let channels = (0..solver.core.len())
        .map(|c| ChannelTransfer {
            l: solver.basis.channels[c].l,
            transform: solver.orthogonalizers[c].transform.clone(),
            factors: eigs
                .iter()
                .map(|slice| {
                    let (e, v) = &slice[c];
                    let mut scaled = v.clone();
                    for (k, ek) in e.iter().enumerate() {
                        scaled.column_mut(k).scale_mut((-(ek - shift) * ds).exp());
                    }
                    scaled * v.transpose()
                })
                .collect(),
        })
        .collect();
    Ok(SliceTransfer { beta, shift, channels })
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::basis::{build_basis, EvenTempered};
    use approx::assert_relative_eq;

    fn basis(n: usize, l_max: usize) -> BasisSet {
        build_basis(n, l_max, EvenTempered::spanning(1e-3, 1e5, n).unwrap()).unwrap()
    }

    #[test]
    fn hydrogen_ground_state() {
        let spec = diagonalize(&basis(75, 0), 1.0, None).unwrap();
        assert!((spec.ground_energy() + 0.5).abs() < 1e-3, "{}", spec.ground_energy());
    }

    #[test]
    fn hydrogenic_scaling_and_p_channel() {
        let spec = diagonalize(&basis(60, 1), 4.0, None).unwrap();
        assert!((spec.channels[0].energies[0] + 8.0).abs() < 1e-3);
        // 2p of Z=4 sits at -Z^2/8
        assert!((spec.channels[1].energies[0] + 2.0).abs() < 1e-3);
    }

    #[test]
    fn eigenvectors_orthonormal_and_residual_small() {
        let b = basis(40, 1);
        let solver = SpectralSolver::new(b.clone(), 3.0).unwrap();
        let spec = solver.diagonalize(None).unwrap();
        for (c, ch) in spec.channels.iter().enumerate() {
            let s = &b.channels[c].overlap;
            let dev = b.channels[c].exact_overlap().defect(&ch.coefficients);
            assert!(dev < 1e-10, "l={} dev={dev:e} min_eig={:e}", ch.l, solver.orthogonalizers[c].min_eigenvalue);
            let h = &solver.core[c];
            let lhs = h * &ch.coefficients;
            let rhs = s * &ch.coefficients * DMatrix::from_diagonal(&DVector::from_vec(ch.energies.clone()));
            assert!((lhs - rhs).norm() < 1e-9 * h.norm());
            assert!(ch.energies.windows(2).all(|w| w[0] <= w[1]));
        }
    }

    #[test]
    fn constant_field_shifts_every_eigenvalue() {
        let b = basis(30, 1);
        let solver = SpectralSolver::new(b.clone(), 2.0).unwrap();
        let plain = solver.diagonalize(None).unwrap();
        let c = 0.25;
        let field: Vec<DMatrix<f64>> = b.channels.iter().map(|ch| &ch.overlap * c).collect();
        let shifted = solver.diagonalize(Some(&field)).unwrap();
        for (p, s) in plain.channels.iter().zip(&shifted.channels) {
            for (a, b) in p.energies.iter().zip(&s.energies).take(10) {
                assert_relative_eq!(b - a, c, epsilon = 1e-8);
            }
        }
    }

    #[test]
    fn free_particle_heat_kernel() {
        // Ratio ~1.46 resolves the continuum; much denser even-tempered sets
        // become over-complete and distort the heat kernel near the origin.
        let spec = SpectralSolver::free(basis(50, 16)).diagonalize(None).unwrap();
        let exact = (2.0 * PI).powf(-1.5);
        for r in [0.0, 0.1, 0.25, 0.5, 1.0] {
            let q = propagator_diagonal(&spec, 1.0, r);
            assert!((q / exact - 1.0).abs() < 1e-3, "r={r} q={q} exact={exact}");
        }
    }

    #[test]
    fn two_level_closed_forms() {
        let delta = 0.7;
        let beta = 3.0;
        let spec = synthetic(&[0.0, delta]);
        let pv = partition_values(&spec, beta).unwrap();
        assert_relative_eq!(pv.q_beta, 1.0 + (-delta * beta).exp(), max_relative = 1e-15);
        assert_relative_eq!(pv.pair_norm, 2.0 * (-delta * beta).exp(), max_relative = 1e-15);

        let degenerate = partition_values(&synthetic(&[0.0, 0.0]), 1.0).unwrap();
        assert_eq!(degenerate.q_beta.powi(2) - degenerate.q_2beta, 2.0);
        assert_eq!(degenerate.pair_norm, 2.0);
        assert!(partition_values(&spec, 0.0).is_err());
        assert!(partition_values(&spec, -1.0).is_err());
    }

    /// Spectrum with given energies in an artificial one-function-per-level
    /// channel set; only the energies matter for partition sums.
    pub(crate) fn synthetic(energies: &[f64]) -> Spectrum {
        let n = energies.len();
        Spectrum {
            channels: vec![ChannelSpectrum {
                l: 0,
                exponents: (0..n).map(|i| 1.0 + i as f64).collect(),
                energies: energies.to_vec(),
                coefficients: DMatrix::identity(n, n),
            }],
        }
    }

    #[test]
    fn trace_identity_and_semigroup() {
        let b = basis(40, 1);
        let grid = b.grid().unwrap();
        let spec = diagonalize(&b, 2.0, None).unwrap();
        let beta = 5.0;
        let pv = partition_values(&spec, beta).unwrap();
        let diag = spec.kernel(beta).diagonal_on(&grid);
        assert_relative_eq!(grid.volume_integral(&diag), pv.q_beta, max_relative = 1e-10);

        let shift = spec.ground_energy();
        let solver = SpectralSolver::new(b.clone(), 2.0).unwrap();
        for c in 0..2 {
            let s = &b.channels[c].overlap;
            // orthonormal representation: kernel V e^{-s(E-shift)} V^T
            let (energies, v) = sorted_eigen(solver.orthonormal_hamiltonians(None).unwrap().swap_remove(c));
            let ortho = |t: f64| {
                let mut scaled = v.clone();
                for (k, e) in energies.iter().enumerate() {
                    scaled.column_mut(k).scale_mut((-(e - shift) * t).exp());
                }
                &scaled * v.transpose()
            };
            let k12 = ortho(3.4);
            let dev = (ortho(1.3) * ortho(2.1) - &k12).abs().max() / k12.abs().max();
            assert!(dev < 1e-12, "orthonormal dev={dev:e}");

            // raw non-orthogonal basis: composition carries the overlap and is
            // limited by eps over the smallest overlap eigenvalue
            let k1 = spec.kernel_matrix(c, 1.3, shift);
            let k2 = spec.kernel_matrix(c, 2.1, shift);
            let raw12 = spec.kernel_matrix(c, 3.4, shift);
            let d = DMatrix::from_diagonal(&s.diagonal().map(f64::sqrt));
            let scaled = |m: &DMatrix<f64>| &d * m * &d;
            let dev = (scaled(&(&k1 * s * &k2)) - scaled(&raw12)).abs().max() / scaled(&raw12).abs().max();
            let bound = 100.0 * f64::EPSILON / solver.orthogonalizers[c].min_eigenvalue;
            assert!(dev < bound, "raw dev={dev:e} bound={bound:e}");
        }
    }

    #[test]
    fn shifted_partition_decreases_with_beta() {
        let spec = diagonalize(&basis(30, 0), 1.0, None).unwrap();
        let qs: Vec<f64> = [0.5, 1.0, 2.0, 4.0, 8.0]
            .iter()
            .map(|&b| partition_values(&spec, b).unwrap().q_beta)
            .collect();
        assert!(qs.windows(2).all(|w| w[1] < w[0]));
    }

    #[test]
    fn contour_partition_is_independent_of_split() {
        let b = basis(30, 1);
        let grid = b.grid().unwrap();
        let spec = diagonalize(&b, 2.0, None).unwrap();
        let beta = 6.0;
        let q = partition_values(&spec, beta).unwrap().q_beta;
        for f in [0.1, 0.3, 0.5, 0.9] {
            assert_relative_eq!(contour_partition(&spec, &grid, f * beta, beta), q, max_relative = 1e-10);
        }
    }

    #[test]
    fn uniform_slices_reproduce_direct_exponential() {
        let b = basis(30, 1);
        let solver = SpectralSolver::new(b.clone(), 2.0).unwrap();
        let grid = b.grid().unwrap();
        let w: Vec<f64> = grid.nodes().iter().map(|r| 0.5 * (-r).exp()).collect();
        let field = b.project_field(&grid, &w).unwrap();
        let spec = solver.diagonalize(Some(&field)).unwrap();
        let beta = 4.0;
        for m in [1usize, 64] {
            let t = slice_propagate(&solver, &vec![field.clone(); m], beta).unwrap();
            for (c, ct) in t.channels.iter().enumerate() {
                // orthonormal-basis representation of exp(-beta (H - shift))
                let x = &solver.orthogonalizers[c].transform;
                let v = x.transpose() * &b.channels[c].overlap * &spec.channels[c].coefficients;
                let mut scaled = v.clone();
                for (k, e) in spec.channels[c].energies.iter().enumerate() {
                    scaled.column_mut(k).scale_mut((-(e - t.shift) * beta).exp());
                }
                let direct = &scaled * v.transpose();
                let sliced = ct.product();
                let err = (&sliced - &direct).abs().max() / direct.abs().max();
                assert!(err < 1e-10, "M={m} err={err:e}");
            }
        }
    }

    #[test]
    fn slice_order_matters_for_noncommuting_fields() {
        let b = BasisSet::from_exponents(vec![0.5, 2.0], 0, 1e-10).unwrap();
        let solver = SpectralSolver::new(b.clone(), 1.0).unwrap();
        let wa = vec![DMatrix::from_row_slice(2, 2, &[0.3, 0.0, 0.0, -0.2])];
        let wb = vec![DMatrix::from_row_slice(2, 2, &[0.0, 0.4, 0.4, 0.1])];
        let beta = 2.0;
        let ab = slice_propagate(&solver, &[wa.clone(), wb.clone()], beta).unwrap();
        let ba = slice_propagate(&solver, &[wb.clone(), wa.clone()], beta).unwrap();
        let p_ab = ab.channels[0].product();
        let p_ba = ba.channels[0].product();
        assert!((&p_ab - &p_ba).abs().max() > 1e-6);

        // independent route: truncated Taylor series with scaling and squaring
        let hams_a = solver.orthonormal_hamiltonians(Some(&wa)).unwrap();
        let hams_b = solver.orthonormal_hamiltonians(Some(&wb)).unwrap();
        let shift = ab.shift;
        let e = |h: &DMatrix<f64>| {
            let n = h.nrows();
            let a = (h - DMatrix::identity(n, n) * shift) * (-beta / 2.0 / 1024.0);
            let mut term = DMatrix::identity(n, n);
            let mut sum = term.clone();
            for k in 1..30 {
                term = &term * &a / k as f64;
                sum += &term;
            }
            (0..10).fold(sum, |acc, _| &acc * &acc)
        };
        let expected = e(&hams_b[0]) * e(&hams_a[0]);
        assert!((&p_ab - &expected).abs().max() < 1e-10 * expected.abs().max());
    }

    #[test]
    fn extended_and_shifted_routes_agree() {
        // beta * spread small enough for plain doubles, large enough to
        // cancel a dozen digits in the literal difference
        let spec = synthetic(&[-2.0, 0.5, 0.9, 1.7, 3.0]);
        let beta = 12.0;
        let pv = partition_values(&spec, beta).unwrap();
        assert!(!pv.extended);
        let ctx = ExtContext::with_digits(required_digits(&pv, 30));
        let ext = extended_partition(&spec, beta, &ctx).unwrap();
        assert!(ext.relative_discrepancy(&ctx).abs() < 1e-25);
        let from_shifted = pv.ln_pair_norm();
        let from_ext = ext.pairwise_pair_norm.log2_abs() * std::f64::consts::LN_2;
        assert_relative_eq!(from_shifted, from_ext, max_relative = 1e-14);
        assert!(ext.digits_lost > 12.0);
    }

    #[test]
    fn huge_spread_engages_extended_sums() {
        let spec = synthetic(&[-8.0, -0.3, 1e5]);
        let pv = partition_values(&spec, 40.0).unwrap();
        assert!(pv.extended);
        assert!(pv.pair_norm > 0.0 && pv.pair_norm.is_finite());
        let direct = 2.0 * (-7.7f64 * 40.0).exp();
        assert_relative_eq!(pv.pair_norm, direct, max_relative = 1e-13);
    }
}
