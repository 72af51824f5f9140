//! Self-consistent field driver: field -> spectrum -> density -> field.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use log::{debug, info, warn};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::basis::{build_basis, BasisSet, EvenTempered, DEFAULT_ALPHA_MAX, DEFAULT_ALPHA_MIN, DEFAULT_BASIS_SIZE};
use crate::error::{invalid, Error, Result};
use crate::exchange::{exchange_density, exchange_density_monitored, naive_density, slice_densities, slice_mean, DensityProfile, ExchangeRoute};
use crate::fields::{fermi_amaldi_factor, hartree_potential, pauli_field, FieldSet};
use crate::grid::RadialGrid;
use crate::precision::DEFAULT_DIGITS;
use crate::propagator::{partition_values, slice_propagate, PartitionValues, SpectralSolver, Spectrum};

/// Residual above which a run is abandoned as divergent.
pub const DIVERGENCE_LIMIT: f64 = 1e6;
/// Anderson history depth.
pub const ANDERSON_DEPTH: usize = 5;
/// Iterations ignored before residual monotonicity is tracked.
pub const TRANSIENT_ITERATIONS: usize = 20;
/// Gap below which the second and third levels count as degenerate.
pub const DEGENERACY_GAP: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// Two-particle exchange density per spin channel.
    Exchange,
    /// `N q(r,r,beta) / Q(beta)`, no exchange.
    Naive,
    /// Naive density with a local Pauli contact field.
    Energetic,
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Exchange => "exchange",
            Mode::Naive => "naive",
            Mode::Energetic => "energetic",
        })
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "exchange" => Ok(Mode::Exchange),
            "naive" => Ok(Mode::Naive),
            "energetic" => Ok(Mode::Energetic),
            other => Err(invalid("mode", format!("expected exchange, naive or energetic, got `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScfConfig {
    pub z: f64,
    pub n_per_spin: usize,
    /// 2 for a closed shell, 1 for a single spin-polarized channel.
    pub spin_channels: usize,
    pub beta: f64,
    pub basis_size: usize,
    pub l_max: usize,
    pub alpha_min: f64,
    pub alpha_max: f64,
    /// Linear mixing weight of the new field.
    pub mixing: f64,
    pub tolerance: f64,
    pub max_iterations: usize,
    /// Extended-precision budget for the cancellation check on the final
    /// spectrum.
    pub digits: u32,
    pub mode: Mode,
    /// Contact strength of the Pauli field, energetic mode only.
    pub pauli_strength: Option<f64>,
    /// Contour slices of the perturbation experiment.
    pub slices: usize,
    /// Initial per-slice field perturbation amplitude.
    pub perturbation: f64,
    pub seed: u64,
    pub anderson: bool,
}

impl Default for ScfConfig {
    fn default() -> Self {
        Self {
            z: 4.0,
            n_per_spin: 2,
            spin_channels: 2,
            beta: 40.0,
            basis_size: DEFAULT_BASIS_SIZE,
            l_max: 0,
            alpha_min: DEFAULT_ALPHA_MIN,
            alpha_max: DEFAULT_ALPHA_MAX,
            mixing: 0.1,
            tolerance: 1e-7,
            max_iterations: 2000,
            digits: DEFAULT_DIGITS,
            mode: Mode::Exchange,
            pauli_strength: None,
            slices: 16,
            perturbation: 0.0,
            seed: 0,
            anderson: false,
        }
    }
}

impl ScfConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.z >= 1.0 && self.z.is_finite()) {
            return Err(invalid("Z", format!("nuclear charge must be >= 1, got {}", self.z)));
        }
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return Err(invalid("beta", format!("must be positive, got {}", self.beta)));
        }
        if !(self.mixing > 0.0 && self.mixing <= 1.0) {
            return Err(invalid("mixing", format!("must lie in (0, 1], got {}", self.mixing)));
        }
        if !(self.tolerance > 0.0) {
            return Err(invalid("tolerance", format!("must be positive, got {}", self.tolerance)));
        }
        if self.max_iterations == 0 {
            return Err(invalid("max_iterations", "must be at least 1"));
        }
        if !(1..=2).contains(&self.spin_channels) {
            return Err(invalid("spin_channels", format!("must be 1 or 2, got {}", self.spin_channels)));
        }
        if self.n_per_spin == 0 {
            return Err(invalid("n_per_spin", "must be at least 1"));
        }
        if self.mode == Mode::Exchange && self.n_per_spin != 2 {
            return Err(Error::ParticleCount {
                mode: "exchange",
                required: "exactly 2",
                got: self.n_per_spin,
            });
        }
        if self.digits < 16 {
            return Err(invalid("digits", format!("need at least 16, got {}", self.digits)));
        }
        if !(self.perturbation >= 0.0 && self.perturbation.is_finite()) {
            return Err(invalid("perturbation", format!("must be non-negative, got {}", self.perturbation)));
        }
        match (self.mode, self.pauli_strength) {
            (Mode::Energetic, None) => Err(invalid("pauli_strength", "energetic mode needs an explicit contact strength")),
            (Mode::Energetic, Some(g)) if !(g >= 0.0 && g.is_finite()) => {
                Err(invalid("pauli_strength", format!("must be non-negative, got {g}")))
            }
            _ => Ok(()),
        }
    }

    pub fn n_total(&self) -> usize {
        self.n_per_spin * self.spin_channels
    }

    pub fn basis(&self) -> Result<BasisSet> {
        build_basis(
            self.basis_size,
            self.l_max,
            EvenTempered::spanning(self.alpha_min, self.alpha_max, self.basis_size)?,
        )
    }

    fn pauli_strength(&self) -> Option<f64> {
        match self.mode {
            Mode::Energetic => self.pauli_strength,
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnergyComponents {
    /// `sum_spin -d ln Z_spin / d beta`, the occupation-weighted eigenvalue sum.
    pub eigenvalue_sum: f64,
    /// `1/2 int w_H n`.
    pub hartree_double_count: f64,
    /// `1/2 sum_spin int w_P n_spin`.
    pub pauli_double_count: f64,
}

impl EnergyComponents {
    pub fn total(&self) -> f64 {
        self.eigenvalue_sum - self.hartree_double_count - self.pauli_double_count
    }
}

/// Occupation-weighted eigenvalue sum of one spin channel in `mode`.
pub fn eigenvalue_sum(pv: &PartitionValues, mode: Mode, n_per_spin: usize) -> f64 {
    let occ = match mode {
        Mode::Exchange => pv.exchange_occupations(n_per_spin),
        Mode::Naive | Mode::Energetic => pv.naive_occupations(n_per_spin),
    };
    pv.levels
        .iter()
        .zip(&occ)
        .rev()
        .map(|(lw, f)| f * lw.level.degeneracy as f64 * lw.level.energy)
        .sum()
}

/// `E = sum_spin [-d ln Z_spin / d beta] - 1/2 int w_H n - 1/2 sum_spin int w_P n_spin`
/// at the fields that produced `spec`. `n` is the total density.
pub fn compute_energy(
    spec: &Spectrum,
    pv: &PartitionValues,
    fields: &FieldSet,
    n: &DensityProfile,
    config: &ScfConfig,
) -> Result<EnergyComponents> {
    let levels = spec.levels();
    if levels.len() != pv.levels.len() {
        return Err(Error::Shape(format!("{} levels, {} partition weights", levels.len(), pv.levels.len())));
    }
    let grid = &fields.grid;
    let spins = config.spin_channels as f64;
    let eigen = spins * eigenvalue_sum(pv, config.mode, config.n_per_spin);
    let hartree: Vec<f64> = fields.hartree.iter().zip(&n.values).map(|(w, n)| w * n).collect();
    let pauli = match &fields.pauli {
        Some(p) => {
            let v: Vec<f64> = p.iter().zip(&n.values).map(|(w, n)| w * n / spins).collect();
            0.5 * spins * grid.volume_integral(&v)
        }
        None => 0.0,
    };
    Ok(EnergyComponents {
        eigenvalue_sum: eigen,
        hartree_double_count: 0.5 * grid.volume_integral(&hartree),
        pauli_double_count: pauli,
    })
}

/// Spectrum, partition values and densities generated by one field.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub spectrum: Spectrum,
    pub partition: PartitionValues,
    pub spin_density: DensityProfile,
    pub density: DensityProfile,
}

/// Interaction field split by origin, mixed component-wise.
#[derive(Debug, Clone, PartialEq)]
pub struct InteractionField {
    pub hartree: Vec<f64>,
    pub pauli: Option<Vec<f64>>,
}

impl InteractionField {
    pub fn total(&self) -> Vec<f64> {
        match &self.pauli {
            Some(p) => self.hartree.iter().zip(p).map(|(h, p)| h + p).collect(),
            None => self.hartree.clone(),
        }
    }

    fn flatten(&self) -> Vec<f64> {
        let mut v = self.hartree.clone();
        if let Some(p) = &self.pauli {
            v.extend_from_slice(p);
        }
        v
    }

    fn unflatten(&self, v: &[f64]) -> Self {
        let n = self.hartree.len();
        Self {
            hartree: v[..n].to_vec(),
            pauli: self.pauli.as_ref().map(|_| v[n..].to_vec()),
        }
    }
}

/// A configured atom: basis, solver and grid shared by every iteration.
#[derive(Debug, Clone)]
pub struct ScfProblem {
    pub config: ScfConfig,
    pub solver: SpectralSolver,
    pub grid: RadialGrid,
}

impl ScfProblem {
    pub fn new(config: ScfConfig) -> Result<Self> {
        config.validate()?;
        let basis = config.basis()?;
        let grid = basis.grid()?;
        let solver = SpectralSolver::new(basis, config.z)?;
        Ok(Self { config, solver, grid })
    }

    pub fn basis(&self) -> &BasisSet {
        &self.solver.basis
    }

    /// Hydrogenic `N_tot Z^3/pi exp(-2 Z r)`.
    pub fn initial_density(&self) -> Vec<f64> {
        let z = self.config.z;
        let n = self.config.n_total() as f64;
        self.grid.nodes().iter().map(|r| n * z.powi(3) / PI * (-2.0 * z * r).exp()).collect()
    }

    pub fn initial_field(&self) -> Result<InteractionField> {
        self.field_from_density(&self.initial_density())
    }

    /// Fields generated by a total density.
    pub fn field_from_density(&self, total: &[f64]) -> Result<InteractionField> {
        let hartree = if self.config.n_total() > 1 {
            hartree_potential(&self.grid, total, self.config.n_total())?
        } else {
            vec![0.0; self.grid.len()]
        };
        let spins = self.config.spin_channels as f64;
        let pauli = self.config.pauli_strength().map(|g| {
            let spin: Vec<f64> = total.iter().map(|n| n / spins).collect();
            pauli_field(&spin, g)
        });
        Ok(InteractionField { hartree, pauli })
    }

    pub fn evaluate(&self, field: &InteractionField) -> Result<Evaluation> {
        let projected = self.basis().project_field(&self.grid, &field.total())?;
        let spectrum = self.solver.diagonalize(Some(&projected))?;
        let partition = partition_values(&spectrum, self.config.beta)?;
        let n = self.config.n_per_spin;
        let spin_density = match self.config.mode {
            Mode::Exchange => exchange_density(&spectrum, &partition, n, &self.grid)?,
            Mode::Naive | Mode::Energetic => naive_density(&spectrum, &partition, n, &self.grid)?,
        };
        let density = spin_density.scaled(self.config.spin_channels as f64);
        Ok(Evaluation {
            spectrum,
            partition,
            spin_density,
            density,
        })
    }

    pub fn field_set(&self, field: &InteractionField) -> Result<FieldSet> {
        let factor = if self.config.n_total() > 1 { fermi_amaldi_factor(self.config.n_total())? } else { 0.0 };
        let mut set = FieldSet::new(self.grid.clone(), self.config.z, field.hartree.clone(), factor);
        set.pauli = field.pauli.clone();
        set.pauli_strength = self.config.pauli_strength().unwrap_or(0.0);
        Ok(set)
    }

    pub fn energy(&self, field: &InteractionField, eval: &Evaluation) -> Result<EnergyComponents> {
        compute_energy(&eval.spectrum, &eval.partition, &self.field_set(field)?, &eval.density, &self.config)
    }

    /// L2 norm weighted by `4 pi r^2`.
    pub fn norm(&self, values: &[f64]) -> f64 {
        self.grid.l2_norm(values)
    }

    fn difference_norm(&self, a: &InteractionField, b: &InteractionField) -> f64 {
        let d: Vec<f64> = a.total().iter().zip(b.total()).map(|(x, y)| x - y).collect();
        self.norm(&d)
    }
}

#[derive(Debug, Clone)]
pub struct ScfReport {
    pub config: ScfConfig,
    pub converged: bool,
    pub iterations: usize,
    pub residual: f64,
    pub energy: f64,
    pub components: EnergyComponents,
    /// Total density of all spin channels.
    pub density: DensityProfile,
    pub residual_history: Vec<f64>,
    pub energy_history: Vec<f64>,
    /// Residual never rose after the initial transient.
    pub residual_monotone: bool,
    /// Exchange mode with degenerate second and third levels.
    pub degenerate_levels: bool,
    pub field: InteractionField,
    pub spectrum: Spectrum,
    pub partition: PartitionValues,
    /// Route the cancellation monitor picks on the final spectrum.
    pub exchange_route: Option<ExchangeRoute>,
    pub digits_lost: Option<f64>,
}

impl ScfReport {
    pub fn grid(&self) -> &RadialGrid {
        &self.density.grid
    }
}

struct Anderson {
    depth: usize,
    xs: Vec<DVector<f64>>,
    fs: Vec<DVector<f64>>,
    sqrt_weights: DVector<f64>,
}

impl Anderson {
    fn new(depth: usize, sqrt_weights: DVector<f64>) -> Self {
        Self {
            depth,
            xs: Vec::new(),
            fs: Vec::new(),
            sqrt_weights,
        }
    }

    // x + lambda f - (dX + lambda dF) gamma, gamma = argmin |f - dF gamma|_W
    fn step(&mut self, x: DVector<f64>, f: DVector<f64>, lambda: f64) -> DVector<f64> {
        self.xs.push(x.clone());
        self.fs.push(f.clone());
        if self.xs.len() > self.depth + 1 {
            self.xs.remove(0);
            self.fs.remove(0);
        }
        let m = self.xs.len() - 1;
        let simple = &x + &f * lambda;
        if m == 0 {
            return simple;
        }
        let n = x.len();
        let mut df = DMatrix::zeros(n, m);
        let mut dx = DMatrix::zeros(n, m);
        for k in 0..m {
            df.set_column(k, &(&self.fs[k + 1] - &self.fs[k]));
            dx.set_column(k, &(&self.xs[k + 1] - &self.xs[k]));
        }
        let mut weighted = df.clone();
        for mut col in weighted.column_iter_mut() {
            col.component_mul_assign(&self.sqrt_weights);
        }
        let rhs = f.component_mul(&self.sqrt_weights);
        let gamma = match weighted.svd(true, true).solve(&rhs, 1e-12) {
            Ok(g) => g,
            Err(_) => return simple,
        };
        simple - (dx + df * lambda) * gamma
    }
}

fn sqrt_measure(grid: &RadialGrid, copies: usize) -> DVector<f64> {
    let one: Vec<f64> = grid
        .nodes()
        .iter()
        .zip(grid.weights())
        .map(|(r, w)| (4.0 * PI * w * r * r).sqrt())
        .collect();
    DVector::from_iterator(one.len() * copies, (0..copies).flat_map(|_| one.iter().copied()))
}

fn residual_monotone(history: &[f64]) -> bool {
    history.iter().skip(TRANSIENT_ITERATIONS).collect::<Vec<_>>().windows(2).all(|w| w[1] <= w[0])
}

fn degenerate(pv: &PartitionValues, mode: Mode) -> bool {
    if mode != Mode::Exchange || pv.levels.len() < 3 {
        return false;
    }
    pv.levels[1].level.degeneracy > 1 || (pv.levels[2].level.energy - pv.levels[1].level.energy).abs() < DEGENERACY_GAP
}

pub fn run_scf(config: ScfConfig) -> Result<ScfReport> {
    let problem = ScfProblem::new(config)?;
    let start = problem.initial_field()?;
    problem.solve_from(start)
}

impl ScfProblem {
    /// Iterate `w <- (1 - lambda) w + lambda w'` (or Anderson) from `field`.
    pub fn solve_from(&self, mut field: InteractionField) -> Result<ScfReport> {
        let cfg = &self.config;
        let copies = if field.pauli.is_some() { 2 } else { 1 };
        let mut anderson = cfg.anderson.then(|| Anderson::new(ANDERSON_DEPTH, sqrt_measure(&self.grid, copies)));
        let mut residual_history = Vec::new();
        let mut energy_history = Vec::new();
        let mut converged = false;
        let mut eval = self.evaluate(&field)?;
        let mut iterations = 0;
        for iteration in 1..=cfg.max_iterations {
            iterations = iteration;
            let next = self.field_from_density(&eval.density.values)?;
            let residual = self.difference_norm(&next, &field);
            let energy = self.energy(&field, &eval)?.total();
            residual_history.push(residual);
            energy_history.push(energy);
            debug!("iteration={iteration} residual={residual:.6e} energy={energy:.12}");
            if !residual.is_finite() || residual > DIVERGENCE_LIMIT {
                return Err(Error::Divergence { iteration, residual });
            }
            if residual < cfg.tolerance {
                converged = true;
                break;
            }
            let x = DVector::from_vec(field.flatten());
            let fx = DVector::from_vec(next.flatten()) - &x;
            let mixed = match anderson.as_mut() {
                Some(a) => a.step(x, fx, cfg.mixing),
                None => x + fx * cfg.mixing,
            };
            field = field.unflatten(mixed.as_slice());
            eval = self.evaluate(&field)?;
        }
        let components = self.energy(&field, &eval)?;
        let residual = *residual_history.last().unwrap_or(&f64::NAN);
        if converged {
            info!("converged in {iterations} iterations, residual {residual:.3e}, energy {:.10}", components.total());
        } else {
            warn!("not converged after {iterations} iterations, residual {residual:.3e}");
        }
        let (exchange_route, digits_lost) = if cfg.mode == Mode::Exchange {
            let m = exchange_density_monitored(&eval.spectrum, &eval.partition, cfg.n_per_spin, &self.grid, cfg.digits)?;
            (Some(m.route), Some(m.digits_lost))
        } else {
            (None, None)
        };
        let degenerate_levels = degenerate(&eval.partition, cfg.mode);
        if degenerate_levels {
            warn!("second and third levels are degenerate at convergence");
        }
        let monotone = residual_monotone(&residual_history);
        if !monotone {
            info!("residual rose after the first {TRANSIENT_ITERATIONS} iterations");
        }
        Ok(ScfReport {
            config: cfg.clone(),
            converged,
            iterations,
            residual,
            energy: components.total(),
            components,
            density: eval.density,
            residual_history,
            energy_history,
            residual_monotone: monotone,
            degenerate_levels,
            field,
            spectrum: eval.spectrum,
            partition: eval.partition,
            exchange_route,
            digits_lost,
        })
    }

    /// Density change after one more application of the field map at a
    /// converged state.
    pub fn self_consistency_gap(&self, report: &ScfReport) -> Result<f64> {
        let next = self.field_from_density(&report.density.values)?;
        let again = self.evaluate(&next)?;
        let d: Vec<f64> = again.density.values.iter().zip(&report.density.values).map(|(a, b)| a - b).collect();
        Ok(self.norm(&d))
    }
}

#[derive(Debug, Clone)]
pub struct SliceExperimentReport {
    pub converged: bool,
    pub iterations: usize,
    pub residual: f64,
    pub residual_history: Vec<f64>,
    /// `D = max_m |n(., s_m) - mean|` per iteration, spin density.
    pub deviation_history: Vec<f64>,
    /// Slice-mean spin density at the last iterate.
    pub mean_density: DensityProfile,
    /// Spin densities at `s_m`, `m = 0..=M`.
    pub slice_densities: Vec<Vec<f64>>,
}

impl SliceExperimentReport {
    pub fn final_deviation(&self) -> f64 {
        *self.deviation_history.last().unwrap_or(&f64::NAN)
    }

    /// `D(final) / |mean|`.
    pub fn relative_deviation(&self) -> f64 {
        self.final_deviation() / self.mean_density.grid.l2_norm(&self.mean_density.values)
    }
}

/// Energetic-mode SCF with one Pauli field per contour slice,
/// `w_m = w_H[mean] + g n(r, s_m)`, started from slice fields perturbed by
/// `amplitude xi_m exp(-r)` with seeded `xi_m` in `[-1, 1]`.
pub fn slice_perturbation_experiment(config: ScfConfig) -> Result<SliceExperimentReport> {
    if config.mode != Mode::Energetic {
        return Err(invalid("mode", "the slice experiment runs in energetic mode"));
    }
    if config.slices < 8 {
        return Err(invalid("slices", format!("need at least 8, got {}", config.slices)));
    }
    let problem = ScfProblem::new(config)?;
    let cfg = &problem.config;
    let g = cfg.pauli_strength.unwrap_or(0.0);
    let spins = cfg.spin_channels as f64;
    let grid = &problem.grid;
    let m_slices = cfg.slices;

    let base = problem.initial_field()?.total();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut fields: Vec<Vec<f64>> = (0..m_slices)
        .map(|_| {
            let xi: f64 = rng.random_range(-1.0..=1.0);
            base.iter()
                .zip(grid.nodes())
                .map(|(w, r)| w + cfg.perturbation * xi * (-r).exp())
                .collect()
        })
        .collect();

    let mut residual_history = Vec::new();
    let mut deviation_history = Vec::new();
    let mut converged = false;
    let mut iterations = 0;
    let mut slices;
    let mut mean;
    loop {
        let projected = fields
            .iter()
            .map(|w| problem.basis().project_field(grid, w))
            .collect::<Result<Vec<_>>>()?;
        let transfer = slice_propagate(&problem.solver, &projected, cfg.beta)?;
        slices = slice_densities(problem.basis(), &transfer, cfg.n_per_spin, grid)?;
        mean = slice_mean(&slices);
        let deviation = slices
            .iter()
            .map(|s| {
                let d: Vec<f64> = s.iter().zip(&mean).map(|(a, b)| a - b).collect();
                grid.l2_norm(&d)
            })
            .fold(0.0, f64::max);
        deviation_history.push(deviation);
        if iterations == cfg.max_iterations {
            break;
        }
        iterations += 1;

        let total: Vec<f64> = mean.iter().map(|n| spins * n).collect();
        let hartree = if cfg.n_total() > 1 {
            hartree_potential(grid, &total, cfg.n_total())?
        } else {
            vec![0.0; grid.len()]
        };
        let next: Vec<Vec<f64>> = slices[1..]
            .iter()
            .map(|n| hartree.iter().zip(pauli_field(n, g)).map(|(h, p)| h + p).collect())
            .collect();
        let residual = next
            .iter()
            .zip(&fields)
            .map(|(a, b)| {
                let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
                grid.l2_norm(&d)
            })
            .fold(0.0, f64::max);
        residual_history.push(residual);
        debug!("slice iteration={iterations} residual={residual:.6e} deviation={deviation:.6e}");
        if !residual.is_finite() || residual > DIVERGENCE_LIMIT {
            return Err(Error::Divergence {
                iteration: iterations,
                residual,
            });
        }
        if residual < cfg.tolerance {
            converged = true;
            break;
        }
        for (w, n) in fields.iter_mut().zip(&next) {
            for (a, b) in w.iter_mut().zip(n) {
                *a += cfg.mixing * (b - *a);
            }
        }
    }
    let mut mean_density = DensityProfile::new(grid.clone(), mean, cfg.n_per_spin as f64);
    mean_density.slices = Some(slices.clone());
    Ok(SliceExperimentReport {
        converged,
        iterations,
        residual: *residual_history.last().unwrap_or(&f64::NAN),
        residual_history,
        deviation_history,
        mean_density,
        slice_densities: slices,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(mode: Mode) -> ScfConfig {
        ScfConfig {
            z: 2.0,
            basis_size: 30,
            alpha_min: 1e-2,
            alpha_max: 1e4,
            mode,
            tolerance: 1e-8,
            ..ScfConfig::default()
        }
    }

    #[test]
    fn hydrogen_is_a_single_pass() {
        let cfg = ScfConfig {
            z: 1.0,
            n_per_spin: 1,
            spin_channels: 1,
            mode: Mode::Naive,
            ..ScfConfig::default()
        };
        let report = run_scf(cfg).unwrap();
        assert!(report.converged);
        assert_eq!(report.iterations, 1);
        assert_eq!(report.residual, 0.0);
        assert!((report.energy + 0.5).abs() < 1e-3, "{}", report.energy);
        assert_eq!(report.components.hartree_double_count, 0.0);
    }

    #[test]
    fn config_validation() {
        assert!(ScfConfig::default().validate().is_ok());
        let bad = |f: fn(&mut ScfConfig)| {
            let mut c = ScfConfig::default();
            f(&mut c);
            c.validate().is_err()
        };
        assert!(bad(|c| c.beta = 0.0));
        assert!(bad(|c| c.mixing = 0.0));
        assert!(bad(|c| c.mixing = 1.5));
        assert!(bad(|c| c.tolerance = 0.0));
        assert!(bad(|c| c.n_per_spin = 3));
        assert!(bad(|c| c.mode = Mode::Energetic));
        assert!(bad(|c| c.spin_channels = 3));
        assert_eq!("Naive".parse::<Mode>().unwrap(), Mode::Naive);
        assert!("hf".parse::<Mode>().is_err());
    }

    #[test]
    fn helium_like_exchange_converges_self_consistently() {
        let cfg = small(Mode::Exchange);
        let problem = ScfProblem::new(cfg.clone()).unwrap();
        let report = problem.solve_from(problem.initial_field().unwrap()).unwrap();
        assert!(report.converged);
        assert!(report.residual < cfg.tolerance);
        assert!(report.density.normalization_error() < 1e-8);
        assert!(problem.self_consistency_gap(&report).unwrap() < 10.0 * cfg.tolerance);
        assert!(report.exchange_route.is_some() && report.digits_lost.unwrap().is_finite());
        assert!(!report.degenerate_levels);
    }

    #[test]
    fn exchange_energy_reduces_to_two_lowest_levels_at_large_beta() {
        let spec = crate::propagator::tests::synthetic(&[-4.0, -1.0, -0.25, 0.5]);
        let pv = partition_values(&spec, 60.0).unwrap();
        assert!((eigenvalue_sum(&pv, Mode::Exchange, 2) + 5.0).abs() < 1e-12);
        assert!((eigenvalue_sum(&pv, Mode::Naive, 2) + 8.0).abs() < 1e-12);
        let warm = partition_values(&spec, 1.0).unwrap();
        assert!(eigenvalue_sum(&warm, Mode::Exchange, 2) > -5.0);
    }

    #[test]
    fn eigenvalue_sum_is_the_beta_derivative_of_ln_z() {
        let spec = crate::propagator::tests::synthetic(&[-2.0, -0.7, -0.5, -0.1, 0.3]);
        let (beta, h) = (3.0, 1e-4);
        let at = |b: f64| partition_values(&spec, b).unwrap();
        let exchange = -(at(beta + h).ln_pair_norm() - at(beta - h).ln_pair_norm()) / (2.0 * h);
        let naive = -2.0 * (at(beta + h).ln_q_beta() - at(beta - h).ln_q_beta()) / (2.0 * h);
        assert!((eigenvalue_sum(&at(beta), Mode::Exchange, 2) - exchange).abs() < 1e-7);
        assert!((eigenvalue_sum(&at(beta), Mode::Naive, 2) - naive).abs() < 1e-7);
    }

    #[test]
    fn naive_mode_overbinds_exchange_mode() {
        let exchange = run_scf(small(Mode::Exchange)).unwrap();
        let naive = run_scf(small(Mode::Naive)).unwrap();
        assert!(exchange.converged && naive.converged);
        assert!(exchange.energy > naive.energy);
    }

    #[test]
    fn anderson_reaches_the_same_fixed_point_faster() {
        let plain = run_scf(small(Mode::Exchange)).unwrap();
        let accelerated = run_scf(ScfConfig {
            anderson: true,
            ..small(Mode::Exchange)
        })
        .unwrap();
        assert!(accelerated.converged);
        assert!(accelerated.iterations < plain.iterations);
        assert!((accelerated.energy - plain.energy).abs() < 1e-7 * plain.energy.abs());
    }

    #[test]
    fn non_convergence_is_reported() {
        let report = run_scf(ScfConfig {
            max_iterations: 3,
            ..small(Mode::Exchange)
        })
        .unwrap();
        assert!(!report.converged);
        assert_eq!(report.residual_history.len(), 3);
        assert_eq!(report.iterations, 3);
    }

    #[test]
    fn energetic_pauli_field_raises_the_energy() {
        let naive = run_scf(small(Mode::Naive)).unwrap();
        let energetic = run_scf(ScfConfig {
            pauli_strength: Some(0.5),
            ..small(Mode::Energetic)
        })
        .unwrap();
        assert!(energetic.converged);
        assert!(energetic.components.pauli_double_count > 0.0);
        assert!(energetic.energy > naive.energy);
        let zero = run_scf(ScfConfig {
            pauli_strength: Some(0.0),
            ..small(Mode::Energetic)
        })
        .unwrap();
        assert!((zero.energy - naive.energy).abs() < 1e-12 * naive.energy.abs());
    }

    fn slice_config(slices: usize, perturbation: f64) -> ScfConfig {
        ScfConfig {
            pauli_strength: Some(0.5),
            slices,
            perturbation,
            seed: 7,
            ..small(Mode::Energetic)
        }
    }

    #[test]
    fn unperturbed_slices_stay_uniform() {
        let report = slice_perturbation_experiment(ScfConfig {
            max_iterations: 5,
            ..slice_config(8, 0.0)
        })
        .unwrap();
        assert!(report.deviation_history.iter().all(|&d| d == 0.0));
    }

    #[test]
    fn slice_perturbations_die_away_and_refine() {
        let coarse = slice_perturbation_experiment(slice_config(8, 1e-2)).unwrap();
        assert!(coarse.converged);
        assert!(coarse.deviation_history[0] > 0.0);
        assert!(coarse.relative_deviation() < 1e-6);
        let fine = slice_perturbation_experiment(slice_config(64, 1e-2)).unwrap();
        let unsliced = run_scf(slice_config(8, 0.0)).unwrap().density.scaled(0.5);
        for other in [&fine.mean_density, &unsliced] {
            let d: Vec<f64> = coarse.mean_density.values.iter().zip(&other.values).map(|(a, b)| a - b).collect();
            let g = &coarse.mean_density.grid;
            assert!(g.l2_norm(&d) < 1e-6 * g.l2_norm(&other.values));
        }
    }
}
