//! Radial and angular quadrature.
//!
//! The radial grid is a uniform grid in `x = ln r` integrated with the
//! trapezoid rule. For integrands that decay at both ends (anything built from
//! Gaussians times powers of `r`) this converges exponentially in the step.

use std::f64::consts::PI;

use crate::error::{invalid, Result};

/// Step in `ln r` used by [`RadialGrid::for_exponents`].
pub const DEFAULT_LOG_STEP: f64 = 0.04;

#[derive(Debug, Clone, PartialEq)]
pub struct RadialGrid {
    nodes: Vec<f64>,
    weights: Vec<f64>,
    log_step: f64,
}

impl RadialGrid {
    /// Uniform grid in `ln r` covering `[r_min, r_max]`.
    pub fn logarithmic(r_min: f64, r_max: f64, log_step: f64) -> Result<Self> {
        if !(r_min > 0.0 && r_max > r_min) {
            return Err(invalid("r_min/r_max", format!("need 0 < r_min < r_max, got {r_min}, {r_max}")));
        }
        if !(log_step > 0.0 && log_step.is_finite()) {
            return Err(invalid("log_step", format!("must be positive, got {log_step}")));
        }
        let x_min = r_min.ln();
        let x_max = r_max.ln();
        let intervals = ((x_max - x_min) / log_step).ceil() as usize;
        let h = (x_max - x_min) / intervals as f64;
        let nodes: Vec<f64> = (0..=intervals).map(|j| (x_min + j as f64 * h).exp()).collect();
        let weights = nodes.iter().map(|r| h * r).collect();
        Ok(Self {
            nodes,
            weights,
            log_step: h,
        })
    }

    /// Grid resolving `r^2 exp(-alpha r^2)` for every alpha in
    /// `[alpha_min, alpha_max]`.
    pub fn for_exponents(alpha_min: f64, alpha_max: f64) -> Result<Self> {
        Self::for_exponents_with_step(alpha_min, alpha_max, DEFAULT_LOG_STEP)
    }

    pub fn for_exponents_with_step(alpha_min: f64, alpha_max: f64, log_step: f64) -> Result<Self> {
        if !(alpha_min > 0.0 && alpha_max >= alpha_min) {
            return Err(invalid("alpha", format!("need 0 < alpha_min <= alpha_max, got {alpha_min}, {alpha_max}")));
        }
        // Inner cut leaves ~1e-12 of a 1/r-weighted integrand of the tightest
        // function; the outer cut sits at exp(-40) of the most diffuse one.
        let r_min = 1e-6 / alpha_max.sqrt();
        let r_max = (40.0 / alpha_min).sqrt();
        Self::logarithmic(r_min, r_max, log_step)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn log_step(&self) -> f64 {
        self.log_step
    }

    /// `sum_j w_j f(r_j)`, approximating `int_0^inf f(r) dr`.
    pub fn integrate(&self, values: &[f64]) -> f64 {
        debug_assert_eq!(values.len(), self.len());
        self.weights.iter().zip(values).map(|(w, f)| w * f).sum()
    }

    /// `4 pi int r^2 f(r) dr` for a spherically symmetric function.
    pub fn volume_integral(&self, values: &[f64]) -> f64 {
        debug_assert_eq!(values.len(), self.len());
        4.0 * PI
            * self
                .nodes
                .iter()
                .zip(&self.weights)
                .zip(values)
                .map(|((r, w), f)| w * r * r * f)
                .sum::<f64>()
    }

    /// Weighted L2 norm `sqrt(4 pi int r^2 f^2 dr)`.
    pub fn l2_norm(&self, values: &[f64]) -> f64 {
        let sq: Vec<f64> = values.iter().map(|v| v * v).collect();
        self.volume_integral(&sq).sqrt()
    }

    /// Running integral `int_{r_0}^{r_j} f(r) dr` at every node.
    ///
    /// Sixth order in the log step (quintic interpolation per interval in
    /// `x`), dropping to fourth order on the two intervals at each end.
    pub fn cumulative(&self, values: &[f64]) -> Vec<f64> {
        let n = self.len();
        debug_assert_eq!(values.len(), n);
        let h = self.log_step;
        // integrand in x
        let g: Vec<f64> = values.iter().zip(&self.nodes).map(|(f, r)| f * r).collect();
        let mut out = vec![0.0; n];
        if n < 2 {
            return out;
        }
        for i in 0..n - 1 {
            let seg = if n < 4 {
                0.5 * h * (g[i] + g[i + 1])
            } else if n >= 6 && i >= 2 && i + 3 < n {
                h / 1440.0
                    * (11.0 * (g[i - 2] + g[i + 3]) - 93.0 * (g[i - 1] + g[i + 2]) + 802.0 * (g[i] + g[i + 1]))
            } else if i + 3 < n {
                h / 24.0 * (9.0 * g[i] + 19.0 * g[i + 1] - 5.0 * g[i + 2] + g[i + 3])
            } else {
                h / 24.0 * (9.0 * g[i + 1] + 19.0 * g[i] - 5.0 * g[i - 1] + g[i - 2])
            };
            out[i + 1] = out[i] + seg;
        }
        out
    }
}

/// Gauss-Legendre rule on `[-1, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussLegendre {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
}

impl GaussLegendre {
    pub fn new(n: usize) -> Result<Self> {
        if n == 0 {
            return Err(invalid("n", "Gauss-Legendre rule needs at least one node"));
        }
        let mut nodes = vec![0.0; n];
        let mut weights = vec![0.0; n];
        for i in 0..n.div_ceil(2) {
            // Tricomi initial guess, then Newton on P_n.
            let mut x = (PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
            let mut dp = 0.0;
            for _ in 0..100 {
                let (p, d) = legendre_with_derivative(n, x);
                dp = d;
                let dx = p / d;
                x -= dx;
                if dx.abs() < 1e-16 {
                    break;
                }
            }
            let (_, d) = legendre_with_derivative(n, x);
            if d != 0.0 {
                dp = d;
            }
            let w = 2.0 / ((1.0 - x * x) * dp * dp);
            nodes[i] = -x;
            nodes[n - 1 - i] = x;
            weights[i] = w;
            weights[n - 1 - i] = w;
        }
        Ok(Self { nodes, weights })
    }

    pub fn integrate(&self, f: impl Fn(f64) -> f64) -> f64 {
        self.nodes.iter().zip(&self.weights).map(|(&x, &w)| w * f(x)).sum()
    }
}

fn legendre_with_derivative(n: usize, x: f64) -> (f64, f64) {
    let mut p0 = 1.0;
    let mut p1 = x;
    if n == 0 {
        return (1.0, 0.0);
    }
    for k in 2..=n {
        let kf = k as f64;
        let p2 = ((2.0 * kf - 1.0) * x * p1 - (kf - 1.0) * p0) / kf;
        p0 = p1;
        p1 = p2;
    }
    let d = n as f64 * (x * p1 - p0) / (x * x - 1.0);
    (p1, d)
}

/// Legendre polynomials `P_0(x) .. P_lmax(x)`.
pub fn legendre_all(l_max: usize, x: f64) -> Vec<f64> {
    let mut p = Vec::with_capacity(l_max + 1);
    p.push(1.0);
    if l_max >= 1 {
        p.push(x);
    }
    for k in 2..=l_max {
        let kf = k as f64;
        let next = ((2.0 * kf - 1.0) * x * p[k - 1] - (kf - 1.0) * p[k - 2]) / kf;
        p.push(next);
    }
    p
}
