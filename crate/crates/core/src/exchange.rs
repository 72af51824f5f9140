//! One-, two- and three-particle densities built from the propagator, with
//! and without fermion exchange.
//!
//! All propagators here are shifted by `exp(e_0 s)` and all partition values
//! are the shifted ones from [`PartitionValues`]; the shift cancels in every
//! normalized density.

use std::f64::consts::PI;

use itertools::Itertools;
use log::{info, warn};
use nalgebra::{DMatrix, DVector};

use crate::basis::BasisSet;
use crate::error::{invalid, Error, Result};
use crate::grid::{legendre_all, GaussLegendre, RadialGrid};
use crate::precision::{BigReal, ExtContext};
use crate::propagator::{
    boltzmann_exponent, extended_partition, Kernel, PartitionValues, SliceTransfer, Spectrum,
};

/// Negative values above this fraction of the maximum are truncation noise.
pub const CLAMP_TOLERANCE: f64 = 1e-12;
/// Maxima of the smoothed radial density below this fraction of the largest
/// one are ignored when counting shells.
pub const PEAK_FLOOR: f64 = 1e-4;
/// Angular nodes of the pair tensor grid.
pub const DEFAULT_ANGULAR_NODES: usize = 32;
/// Largest particle count the permutation oracle enumerates.
pub const ORACLE_CAP: usize = 5;

#[derive(Debug, Clone, PartialEq)]
pub struct DensityProfile {
    pub grid: RadialGrid,
    /// `n(r_j)`, bohr^-3.
    pub values: Vec<f64>,
    /// Particle count the profile should integrate to.
    pub particles: f64,
    /// `n(r_j, s_m)` for `m = 0..=M` when slice densities are tracked.
    pub slices: Option<Vec<Vec<f64>>>,
    /// Most negative raw value relative to the maximum, before clamping.
    pub negative_excursion: f64,
}

impl DensityProfile {
    /// Wraps raw values, zeroing negatives within [`CLAMP_TOLERANCE`] of the
    /// maximum. Larger negative values are kept and logged.
    pub fn new(grid: RadialGrid, mut values: Vec<f64>, particles: f64) -> Self {
        let max = values.iter().copied().fold(0.0, f64::max);
        let min = values.iter().copied().fold(0.0, f64::min);
        let negative_excursion = if max > 0.0 { -min / max } else { 0.0 };
        if negative_excursion > CLAMP_TOLERANCE {
            warn!("density dips to {min:e} ({negative_excursion:.2e} of max), beyond clamp tolerance");
        }
        for v in values.iter_mut() {
            if *v < 0.0 && -*v <= CLAMP_TOLERANCE * max {
                *v = 0.0;
            }
        }
        Self {
            grid,
            values,
            particles,
            slices: None,
            negative_excursion,
        }
    }

    pub fn integral(&self) -> f64 {
        self.grid.volume_integral(&self.values)
    }

    /// `|int n / N - 1|`.
    pub fn normalization_error(&self) -> f64 {
        (self.integral() / self.particles - 1.0).abs()
    }

    /// `4 pi r^2 n(r)`.
    pub fn radial_density(&self) -> Vec<f64> {
        self.grid
            .nodes()
            .iter()
            .zip(&self.values)
            .map(|(r, n)| 4.0 * PI * r * r * n)
            .collect()
    }

    /// Profile multiplied by `factor`, e.g. two identical spin channels.
    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            grid: self.grid.clone(),
            values: self.values.iter().map(|v| v * factor).collect(),
            particles: self.particles * factor,
            slices: self
                .slices
                .as_ref()
                .map(|s| s.iter().map(|row| row.iter().map(|v| v * factor).collect()).collect()),
            negative_excursion: self.negative_excursion,
        }
    }

    /// Radii of local maxima of `4 pi r^2 n` after a 3-point moving average,
    /// ignoring maxima below [`PEAK_FLOOR`] of the largest.
    pub fn shell_radii(&self) -> Vec<f64> {
        let radial = self.radial_density();
        let smooth = moving_average3(&radial);
        let top = smooth.iter().copied().fold(0.0, f64::max);
        let r = self.grid.nodes();
        let mut peaks = Vec::new();
        let mut j = 1;
        while j + 1 < smooth.len() {
            if smooth[j] > smooth[j - 1] {
                // walk across a plateau before deciding
                let mut k = j;
                while k + 1 < smooth.len() && smooth[k + 1] == smooth[j] {
                    k += 1;
                }
                if k + 1 < smooth.len() && smooth[k + 1] < smooth[j] && smooth[j] >= PEAK_FLOOR * top {
                    peaks.push(r[(j + k) / 2]);
                }
                j = k + 1;
            } else {
                j += 1;
            }
        }
        peaks
    }

    pub fn shell_count(&self) -> usize {
        self.shell_radii().len()
    }

    /// Largest L2 deviation of any slice density from the slice mean.
    pub fn slice_spread(&self) -> Option<f64> {
        let slices = self.slices.as_ref()?;
        let mean = slice_mean(slices);
        Some(
            slices
                .iter()
                .map(|s| {
                    let d: Vec<f64> = s.iter().zip(&mean).map(|(a, b)| a - b).collect();
                    self.grid.l2_norm(&d)
                })
                .fold(0.0, f64::max),
        )
    }
}

fn moving_average3(v: &[f64]) -> Vec<f64> {
    let n = v.len();
    (0..n)
        .map(|j| {
            let lo = j.saturating_sub(1);
            let hi = (j + 1).min(n - 1);
            v[lo..=hi].iter().sum::<f64>() / (hi - lo + 1) as f64
        })
        .collect()
}

/// Pointwise mean over slices `1..=M` (slice 0 duplicates slice M).
pub fn slice_mean(slices: &[Vec<f64>]) -> Vec<f64> {
    let body = if slices.len() > 1 { &slices[1..] } else { slices };
    // offsets from the first slice keep identical slices exact
    let first = &body[0];
    let k = body.len() as f64;
    let mut offset = vec![0.0; first.len()];
    for s in &body[1..] {
        for ((o, v), f) in offset.iter_mut().zip(s).zip(first) {
            *o += v - f;
        }
    }
    first.iter().zip(offset).map(|(f, o)| f + o / k).collect()
}

/// `sum_L occ_L g_L R_L(r)^2` with occupations indexed like `pv.levels`.
pub fn density_from_occupations(spec: &Spectrum, pv: &PartitionValues, occupations: &[f64], grid: &RadialGrid) -> Vec<f64> {
    let mut per_channel: Vec<Vec<(usize, f64)>> = vec![Vec::new(); spec.channels.len()];
    for (lw, &f) in pv.levels.iter().zip(occupations) {
        if f != 0.0 {
            per_channel[lw.level.channel].push((lw.level.state, f * lw.level.degeneracy as f64));
        }
    }
    let mut out = vec![0.0; grid.len()];
    for (c, states) in per_channel.iter().enumerate() {
        if states.is_empty() {
            continue;
        }
        let rad = spec.channels[c].radial_on(grid);
        for (q, o) in out.iter_mut().enumerate() {
            // small occupations first
            *o += states.iter().rev().map(|&(k, f)| f * rad[(q, k)] * rad[(q, k)]).sum::<f64>();
        }
    }
    out
}

/// `n(r) = N q(r, r, beta) / Q(beta)`.
pub fn naive_density(spec: &Spectrum, pv: &PartitionValues, n: usize, grid: &RadialGrid) -> Result<DensityProfile> {
    if n == 0 {
        return Err(Error::ParticleCount {
            mode: "naive",
            required: "at least 1",
            got: n,
        });
    }
    let occ = pv.naive_occupations(n);
    Ok(DensityProfile::new(grid.clone(), density_from_occupations(spec, pv, &occ, grid), n as f64))
}

fn check_pair(pv: &PartitionValues, n: usize) -> Result<()> {
    if n != 2 {
        return Err(Error::ParticleCount {
            mode: "exchange",
            required: "exactly 2",
            got: n,
        });
    }
    if !(pv.pair_norm > 0.0 && pv.pair_norm.is_finite()) {
        return Err(Error::NonPositivePairNorm(pv.pair_norm));
    }
    Ok(())
}

/// `n(r) = N [q(r,r,beta) Q(beta) - q(r,r,2beta)] / [Q(beta)^2 - Q(2beta)]`
/// as the positive sum `N sum_L g_L x_L rest_L R_L^2 / pair_norm`.
pub fn exchange_density(spec: &Spectrum, pv: &PartitionValues, n: usize, grid: &RadialGrid) -> Result<DensityProfile> {
    check_pair(pv, n)?;
    let occ = pv.exchange_occupations(n);
    Ok(DensityProfile::new(grid.clone(), density_from_occupations(spec, pv, &occ, grid), n as f64))
}

/// The exchange density evaluated as the literal difference in the formula,
/// in `ctx` precision. Meaningful only when `ctx` carries more digits than
/// the difference cancels.
pub fn exchange_density_literal(
    spec: &Spectrum,
    pv: &PartitionValues,
    n: usize,
    grid: &RadialGrid,
    ctx: &ExtContext,
) -> Result<DensityProfile> {
    check_pair(pv, n)?;
    let shift = pv.shift;
    let levels = &pv.levels;
    let x: Vec<BigReal> = levels
        .iter()
        .map(|lw| ctx.exp(&boltzmann_exponent(lw.level.energy - shift, pv.beta)))
        .collect();
    let g: Vec<BigReal> = levels.iter().map(|lw| BigReal::from_f64(lw.level.degeneracy as f64)).collect();
    let gx: Vec<BigReal> = g.iter().zip(&x).map(|(g, x)| ctx.mul(g, x)).collect();
    let gxx: Vec<BigReal> = gx.iter().zip(&x).map(|(a, x)| ctx.mul(a, x)).collect();
    let q = ctx.sum(gx.iter().rev());
    let q2 = ctx.sum(gxx.iter().rev());
    let denom = ctx.sub(&ctx.mul(&q, &q), &q2);
    let scale = ctx.div(&BigReal::from_f64(n as f64), &denom);

    let radial: Vec<DMatrix<f64>> = spec.channels.iter().map(|c| c.radial_on(grid)).collect();
    let values = (0..grid.len())
        .map(|j| {
            let mut q_beta = BigReal::zero();
            let mut q_2beta = BigReal::zero();
            for (i, lw) in levels.iter().enumerate().rev() {
                let v = radial[lw.level.channel][(j, lw.level.state)];
                let v2 = BigReal::from_f64(v).mul(&BigReal::from_f64(v), u64::MAX);
                q_beta = ctx.add(&q_beta, &ctx.mul(&gx[i], &v2));
                q_2beta = ctx.add(&q_2beta, &ctx.mul(&gxx[i], &v2));
            }
            let num = ctx.sub(&ctx.mul(&q_beta, &q), &q_2beta);
            ctx.mul(&num, &scale).to_f64()
        })
        .collect();
    Ok(DensityProfile::new(grid.clone(), values, n as f64))
}

/// Which evaluation produced a monitored exchange density.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExchangeRoute {
    Literal,
    Pairwise,
}

#[derive(Debug, Clone)]
pub struct MonitoredDensity {
    pub profile: DensityProfile,
    pub route: ExchangeRoute,
    /// Digits the literal `Q^2 - Q(2beta)` cancels at this spectrum.
    pub digits_lost: f64,
    /// Digits of the budget left after cancellation.
    pub retained_digits: f64,
}

/// Literal evaluation at a `digits` budget, falling back to the pairwise
/// form when cancellation eats more than half of the budget.
pub fn exchange_density_monitored(
    spec: &Spectrum,
    pv: &PartitionValues,
    n: usize,
    grid: &RadialGrid,
    digits: u32,
) -> Result<MonitoredDensity> {
    check_pair(pv, n)?;
    let ctx = ExtContext::with_digits(digits);
    let ext = extended_partition(spec, pv.beta, &ctx)?;
    let retained = digits as f64 - ext.digits_lost;
    if retained < digits as f64 / 2.0 {
        info!(
            "literal exchange density keeps {retained:.1} of {digits} digits ({:.1} cancelled); using pairwise form",
            ext.digits_lost
        );
        return Ok(MonitoredDensity {
            profile: exchange_density(spec, pv, n, grid)?,
            route: ExchangeRoute::Pairwise,
            digits_lost: ext.digits_lost,
            retained_digits: retained,
        });
    }
    Ok(MonitoredDensity {
        profile: exchange_density_literal(spec, pv, n, grid, &ctx)?,
        route: ExchangeRoute::Literal,
        digits_lost: ext.digits_lost,
        retained_digits: retained,
    })
}

/// `N(N-1) / (2 [Q^2 - Q(2beta)])` in shifted units.
pub fn pair_normalization(pv: &PartitionValues, n: usize) -> Result<f64> {
    check_pair(pv, n)?;
    Ok((n * (n - 1)) as f64 / (2.0 * pv.pair_norm))
}

/// Two-particle exchange density between 3D points:
/// `norm [q(r,r) q(r',r') - q(r,r') q(r',r)]`.
pub fn pair_exchange_density(kernel: &Kernel<'_>, pv: &PartitionValues, n: usize, a: &[f64; 3], b: &[f64; 3]) -> Result<f64> {
    let norm = pair_normalization(pv, n)?;
    Ok(norm * pair_numerator(kernel, a, b))
}

/// `q(a,a) q(b,b) - q(a,b) q(b,a)`.
pub fn pair_numerator(kernel: &Kernel<'_>, a: &[f64; 3], b: &[f64; 3]) -> f64 {
    let qaa = kernel.between(a, a);
    let qbb = kernel.between(b, b);
    let qab = kernel.between(a, b);
    let qba = kernel.between(b, a);
    qaa * qbb - qab * qba
}

/// Spherically reduced pair density on the tensor product of a radial grid
/// with a Gauss-Legendre rule in the inter-particle angle.
#[derive(Debug, Clone)]
pub struct PairDensity {
    pub grid: RadialGrid,
    /// Angle average `1/2 int n(r_i, r_j, mu) dmu`.
    pub values: DMatrix<f64>,
    /// `n(r_i, r_i, mu = 1)`: both particles at the same 3D point.
    pub coincident: Vec<f64>,
    pub normalization: f64,
    pub particles: usize,
}

impl PairDensity {
    /// `int int n d^3r d^3r'`.
    pub fn total(&self) -> f64 {
        let m = self.marginal_unscaled();
        self.grid.volume_integral(&m)
    }

    fn marginal_unscaled(&self) -> Vec<f64> {
        let wr2: Vec<f64> = self
            .grid
            .nodes()
            .iter()
            .zip(self.grid.weights())
            .map(|(r, w)| 4.0 * PI * w * r * r)
            .collect();
        let v = DVector::from_vec(wr2);
        (&self.values * v).iter().copied().collect()
    }

    /// `2/(N-1) int n(r, r') d^3r'`, which reproduces the exchange density.
    pub fn marginal(&self) -> Vec<f64> {
        let f = 2.0 / (self.particles as f64 - 1.0);
        self.marginal_unscaled().into_iter().map(|v| v * f).collect()
    }

    pub fn max_value(&self) -> f64 {
        self.values.abs().max()
    }

    /// Largest `|n(r, r)|` at coincident points relative to the largest value.
    pub fn coincident_ratio(&self) -> f64 {
        self.coincident.iter().fold(0.0f64, |m, v| m.max(v.abs())) / self.max_value()
    }

    pub fn asymmetry(&self) -> f64 {
        (&self.values - self.values.transpose()).abs().max()
    }
}

// One level pair of the angle-averaged determinant; `c` is the average of
// P_l P_l', `x = R_K(r) R_K'(r')`, `y = R_K'(r) R_K(r')`.
fn pair_term(same: bool, ga: f64, gb: f64, c: f64, x: f64, y: f64) -> f64 {
    if same {
        ga * ga * x * y * (1.0 - c)
    } else {
        ga * gb * ((x - c * y).powi(2) + (1.0 - c * c) * y * y)
    }
}

/// Level pairs whose Boltzmann product falls below this fraction of the pair
/// normalization are dropped from the tensor-grid sum.
pub const PAIR_CUTOFF: f64 = 1e-18;

/// Angle-averaged pair density on the radial tensor grid, as the positive
/// level-pair sum of the 2x2 kernel determinant:
/// `sum_{K<=K'} x_K x_K' g g' [(A - a B)^2 + (1 - a^2) B^2]` with
/// `A = R_K(r) R_K'(r')`, `B = A^T` and `a` the angular average of
/// `P_l P_l'` from a Gauss-Legendre rule; same-level terms carry
/// `g^2 R^2 R'^2 (1 - a)`. The literal difference loses every digit once
/// `beta` times the gap is large.
pub fn pair_density_on_grid(
    spec: &Spectrum,
    pv: &PartitionValues,
    n: usize,
    grid: &RadialGrid,
    angular_nodes: usize,
) -> Result<PairDensity> {
    let norm = pair_normalization(pv, n)?;
    let gl = GaussLegendre::new(angular_nodes)?;
    let l_max = spec.l_max();
    let legendre: Vec<Vec<f64>> = gl.nodes.iter().map(|&mu| legendre_all(l_max, mu)).collect();
    let avg = |l: usize, lp: usize| 0.5 * gl.weights.iter().zip(&legendre).map(|(w, p)| w * p[l] * p[lp]).sum::<f64>();
    let radial: Vec<DMatrix<f64>> = spec.channels.iter().map(|c| c.radial_on(grid)).collect();

    let cutoff = PAIR_CUTOFF * pv.pair_norm;
    let kept: Vec<&crate::propagator::LevelWeight> = pv.levels.iter().filter(|lw| lw.weight * pv.levels[0].weight >= cutoff).collect();
    let m = grid.len();
    let mut values = DMatrix::zeros(m, m);
    for (i, a) in kept.iter().enumerate() {
        let ra = radial[a.level.channel].column(a.level.state);
        let la = spec.channels[a.level.channel].l;
        let ga = a.level.degeneracy as f64;
        for b in kept[i..].iter() {
            let xx = a.weight * b.weight;
            if xx < cutoff {
                continue;
            }
            let rb = radial[b.level.channel].column(b.level.state);
            let lb = spec.channels[b.level.channel].l;
            let gb = b.level.degeneracy as f64;
            let c = avg(la, lb).clamp(-1.0, 1.0);
            let same = a.level == b.level;
            for jj in 0..m {
                for ii in 0..=jj {
                    values[(ii, jj)] += xx * pair_term(same, ga, gb, c, ra[ii] * rb[jj], rb[ii] * ra[jj]);
                }
            }
        }
    }
    values.fill_lower_triangle_with_upper_triangle();
    values *= norm;
    // same positive form at mu = 1 and r = r', where P_l(1) = 1
    let coincident = (0..m)
        .map(|q| {
            let mut sum = 0.0;
            for (i, a) in kept.iter().enumerate() {
                let ra = radial[a.level.channel][(q, a.level.state)];
                let ga = a.level.degeneracy as f64;
                for b in kept[i..].iter() {
                    let rb = radial[b.level.channel][(q, b.level.state)];
                    let gb = b.level.degeneracy as f64;
                    sum += a.weight * b.weight * pair_term(a.level == b.level, ga, gb, 1.0, ra * rb, rb * ra);
                }
            }
            norm * sum
        })
        .collect();
    Ok(PairDensity {
        grid: grid.clone(),
        values,
        coincident,
        normalization: norm,
        particles: n,
    })
}

/// The six signed propagator products of the three-particle exchange
/// density, identity first, then the three transpositions, then the two
/// cyclic permutations.
pub fn three_particle_terms(kernel: &Kernel<'_>, r: [&[f64; 3]; 3]) -> [f64; 6] {
    let q = |i: usize, j: usize| kernel.between(r[i], r[j]);
    [
        q(0, 0) * q(1, 1) * q(2, 2),
        -q(0, 1) * q(1, 0) * q(2, 2),
        -q(0, 2) * q(2, 0) * q(1, 1),
        -q(1, 2) * q(2, 1) * q(0, 0),
        q(0, 1) * q(1, 2) * q(2, 0),
        q(0, 2) * q(2, 1) * q(1, 0),
    ]
}

/// Three-particle exchange density, normalized to integrate to one over all
/// three coordinates.
pub fn three_particle_density(kernel: &Kernel<'_>, r: [&[f64; 3]; 3]) -> f64 {
    let raw: f64 = three_particle_terms(kernel, r).iter().sum();
    raw / permutation_integral(kernel, 3, Statistics::Fermion)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Statistics {
    Fermion,
    Boson,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OracleValue {
    /// `sum_sigma (+-1)^sigma prod_k q(r_k, r_sigma(k))`.
    pub raw: f64,
    /// Each permutation with its signed product, lexicographic order.
    pub terms: Vec<(Vec<usize>, f64)>,
    /// `raw` divided by its integral over all coordinates.
    pub normalized: f64,
}

/// Sign of a permutation and its cycle lengths.
fn cycle_structure(perm: &[usize]) -> (i32, Vec<usize>) {
    let mut seen = vec![false; perm.len()];
    let mut cycles = Vec::new();
    let mut sign = 1;
    for start in 0..perm.len() {
        if seen[start] {
            continue;
        }
        let mut len = 0;
        let mut j = start;
        while !seen[j] {
            seen[j] = true;
            j = perm[j];
            len += 1;
        }
        if len % 2 == 0 {
            sign = -sign;
        }
        cycles.push(len);
    }
    (sign, cycles)
}

/// Shifted `Q(k beta) = sum g exp(-k (e - e_0) beta)`.
fn shifted_q_multiple(kernel: &Kernel<'_>, k: usize) -> f64 {
    let spec = kernel.spectrum();
    spec.channels
        .iter()
        .map(|c| {
            c.degeneracy() as f64
                * c.energies
                    .iter()
                    .rev()
                    .map(|e| (-(e - kernel.shift) * kernel.s * k as f64).exp())
                    .sum::<f64>()
        })
        .sum()
}

/// `int raw d^3r_1 ... d^3r_N = sum_sigma (+-1)^sigma prod_cycles Q(len beta)`.
pub fn permutation_integral(kernel: &Kernel<'_>, n: usize, statistics: Statistics) -> f64 {
    let qs: Vec<f64> = (0..=n).map(|k| if k == 0 { 1.0 } else { shifted_q_multiple(kernel, k) }).collect();
    (0..n)
        .permutations(n)
        .map(|p| {
            let (sign, cycles) = cycle_structure(&p);
            let s = if statistics == Statistics::Fermion { sign as f64 } else { 1.0 };
            s * cycles.iter().map(|&l| qs[l]).product::<f64>()
        })
        .sum()
}

/// Brute-force permutation sum over all `N!` orderings.
pub fn permutation_density_oracle(kernel: &Kernel<'_>, positions: &[[f64; 3]], statistics: Statistics) -> Result<OracleValue> {
    let n = positions.len();
    if n == 0 {
        return Err(invalid("positions", "need at least one point"));
    }
    if n > ORACLE_CAP {
        return Err(Error::TooManyParticles { cap: ORACLE_CAP, got: n });
    }
    let q = DMatrix::from_fn(n, n, |i, j| kernel.between(&positions[i], &positions[j]));
    let terms: Vec<(Vec<usize>, f64)> = (0..n)
        .permutations(n)
        .map(|p| {
            let (sign, _) = cycle_structure(&p);
            let s = if statistics == Statistics::Fermion { sign as f64 } else { 1.0 };
            let v = s * (0..n).map(|k| q[(k, p[k])]).product::<f64>();
            (p, v)
        })
        .collect();
    let raw: f64 = terms.iter().map(|(_, v)| v).sum();
    Ok(OracleValue {
        raw,
        terms,
        normalized: raw / permutation_integral(kernel, n, statistics),
    })
}

/// `q(r, r', beta)` between grid radii in the orthonormal representation of
/// a slice transfer: `phi(r) = X^T u(r)` per channel.
fn orthonormal_values(basis: &BasisSet, transfer: &SliceTransfer, grid: &RadialGrid) -> Vec<DMatrix<f64>> {
    basis
        .channels
        .iter()
        .zip(&transfer.channels)
        .map(|(b, t)| b.values_on(grid) * &t.transform)
        .collect()
}

/// Density at every contour point `s_m = m beta / M`, `m = 0..=M`:
/// `n(r, s_m) = N/Q sum_l (2l+1) phi(r)^T F_m B_m phi(r)` with the forward
/// product `F_m = E_m...E_1` and backward product `B_m = E_M...E_{m+1}`.
/// When every slice shares one field the density is evaluated once.
pub fn slice_densities(basis: &BasisSet, transfer: &SliceTransfer, n: usize, grid: &RadialGrid) -> Result<Vec<Vec<f64>>> {
    if n == 0 {
        return Err(Error::ParticleCount {
            mode: "slice",
            required: "at least 1",
            got: n,
        });
    }
    let m_slices = transfer.slices();
    let q = transfer.partition();
    let phis = orthonormal_values(basis, transfer, grid);
    let uniform = transfer
        .channels
        .iter()
        .all(|c| c.factors.windows(2).all(|w| w[0] == w[1]));
    let evaluate = |m: usize, forward: &[Vec<DMatrix<f64>>], backward: &[Vec<DMatrix<f64>>]| -> Vec<f64> {
        let mut out = vec![0.0; grid.len()];
        for (c, ch) in transfer.channels.iter().enumerate() {
            let op = &forward[c][m] * &backward[c][m];
            let phi = &phis[c];
            let prod = phi * op;
            let g = ch.degeneracy() as f64;
            for (j, o) in out.iter_mut().enumerate() {
                *o += g * prod.row(j).dot(&phi.row(j));
            }
        }
        out.iter_mut().for_each(|v| *v *= n as f64 / q);
        out
    };
    let forward: Vec<Vec<DMatrix<f64>>> = transfer.channels.iter().map(|c| c.forward_products()).collect();
    let backward: Vec<Vec<DMatrix<f64>>> = transfer.channels.iter().map(|c| c.backward_products()).collect();
    if uniform {
        let one = evaluate(m_slices, &forward, &backward);
        return Ok(vec![one; m_slices + 1]);
    }
    Ok((0..=m_slices).map(|m| evaluate(m, &forward, &backward)).collect())
}
