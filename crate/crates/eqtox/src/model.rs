//! Model mathematics: link functions, Gumbel cell probabilities, marginals,
//! correlation, log-likelihoods with analytic gradients, and maximum-deviation
//! functionals.
//!
//! Everything here is a pure function of its inputs; there is no shared state.

use serde::{Deserialize, Serialize};
use statrs::distribution::{Continuous, ContinuousCDF, Normal};

use crate::error::{EqtoxError, Result};

/// Absolute tolerance separating genuine cell-probability infeasibility from round-off.
pub const FEASIBILITY_TOL: f64 = 1e-12;

/// Clamp floor for log terms so optimizers receive finite values (ln of the
/// smallest positive normal f64 is about -708).
const LOG_FLOOR: f64 = -708.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Link {
    Logistic,
    Probit,
}

/// Intercept/slope pair for a univariate binary response curve.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinkParams {
    pub beta: f64,
    pub gamma: f64,
    pub link: Link,
}

impl LinkParams {
    pub fn logistic(beta: f64, gamma: f64) -> Self {
        LinkParams {
            beta,
            gamma,
            link: Link::Logistic,
        }
    }

    pub fn probit(beta: f64, gamma: f64) -> Self {
        LinkParams {
            beta,
            gamma,
            link: Link::Probit,
        }
    }
}

/// The 5-vector (beta_e, gamma_e, beta_t, gamma_t, nu) of the bivariate
/// efficacy-toxicity model. Margins are logistic by construction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GumbelParams {
    pub beta_e: f64,
    pub gamma_e: f64,
    pub beta_t: f64,
    pub gamma_t: f64,
    pub nu: f64,
}

impl GumbelParams {
    pub fn new(beta_e: f64, gamma_e: f64, beta_t: f64, gamma_t: f64, nu: f64) -> Self {
        GumbelParams {
            beta_e,
            gamma_e,
            beta_t,
            gamma_t,
            nu,
        }
    }

    pub fn from_slice(v: &[f64]) -> Self {
        GumbelParams::new(v[0], v[1], v[2], v[3], v[4])
    }

    pub fn to_array(self) -> [f64; 5] {
        [self.beta_e, self.gamma_e, self.beta_t, self.gamma_t, self.nu]
    }

    /// Linear predictor of the efficacy margin.
    pub fn u_eff(&self, d: f64) -> f64 {
        self.beta_e + self.gamma_e * d
    }

    /// Linear predictor of the toxicity margin.
    pub fn u_tox(&self, d: f64) -> f64 {
        self.beta_t + self.gamma_t * d
    }

    pub fn efficacy_margin(&self) -> LinkParams {
        LinkParams::logistic(self.beta_e, self.gamma_e)
    }

    pub fn toxicity_margin(&self) -> LinkParams {
        LinkParams::logistic(self.beta_t, self.gamma_t)
    }

    /// True if every cell probability is inside [0, 1] (up to the feasibility
    /// tolerance) at every dose of the given slice.
    pub fn is_feasible_on(&self, doses: &[f64]) -> bool {
        doses.iter().all(|&d| gumbel_cells(self, d).is_ok())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Endpoint {
    Efficacy,
    Toxicity,
}

/// Dose grid, per-dose sample sizes, and the covariate range they live in.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DoseDesign {
    doses: Vec<f64>,
    sizes: Vec<u64>,
    range: (f64, f64),
}

impl DoseDesign {
    pub fn new(doses: Vec<f64>, sizes: Vec<u64>, range: (f64, f64)) -> Result<Self> {
        if doses.is_empty() || doses.len() != sizes.len() {
            return Err(EqtoxError::invalid(
                "design",
                "doses and sizes must be nonempty and of equal length",
            ));
        }
        if !doses.windows(2).all(|w| w[0] < w[1]) {
            return Err(EqtoxError::invalid("design", "doses must be strictly increasing"));
        }
        if range.0 > doses[0] || range.1 < *doses.last().unwrap() {
            return Err(EqtoxError::invalid("design", "all doses must lie inside the range"));
        }
        if sizes.iter().any(|&n| n == 0) {
            return Err(EqtoxError::invalid("design", "all per-dose sizes must be >= 1"));
        }
        Ok(DoseDesign { doses, sizes, range })
    }

    /// Equal allocation over the doses, range spanning the dose extremes.
    pub fn equal_allocation(doses: Vec<f64>, n_per_dose: u64) -> Result<Self> {
        let range = (doses[0], *doses.last().unwrap());
        let k = doses.len();
        DoseDesign::new(doses, vec![n_per_dose; k], range)
    }

    pub fn doses(&self) -> &[f64] {
        &self.doses
    }

    pub fn sizes(&self) -> &[u64] {
        &self.sizes
    }

    pub fn range(&self) -> (f64, f64) {
        self.range
    }
}

/// Per-dose counts for one group: successes (univariate) or the four
/// (eff, tox) cell counts ordered (z00, z01, z10, z11).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Counts {
    Univariate(Vec<u64>),
    Bivariate(Vec<[u64; 4]>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CountTable {
    design: DoseDesign,
    counts: Counts,
}

impl CountTable {
    pub fn univariate(design: DoseDesign, successes: Vec<u64>) -> Result<Self> {
        if successes.len() != design.doses().len() {
            return Err(EqtoxError::invalid("counts", "one count per dose required"));
        }
        for (i, (&z, &n)) in successes.iter().zip(design.sizes()).enumerate() {
            if z > n {
                return Err(EqtoxError::invalid(
                    "counts",
                    format!("successes {z} exceed size {n} at dose index {i}"),
                ));
            }
        }
        Ok(CountTable {
            design,
            counts: Counts::Univariate(successes),
        })
    }

    pub fn bivariate(design: DoseDesign, cells: Vec<[u64; 4]>) -> Result<Self> {
        if cells.len() != design.doses().len() {
            return Err(EqtoxError::invalid("counts", "one cell quadruple per dose required"));
        }
        for (i, (c, &n)) in cells.iter().zip(design.sizes()).enumerate() {
            if c.iter().sum::<u64>() != n {
                return Err(EqtoxError::invalid(
                    "counts",
                    format!("cells at dose index {i} must sum to {n}"),
                ));
            }
        }
        Ok(CountTable {
            design,
            counts: Counts::Bivariate(cells),
        })
    }

    pub fn design(&self) -> &DoseDesign {
        &self.design
    }

    pub fn counts(&self) -> &Counts {
        &self.counts
    }

    pub fn is_bivariate(&self) -> bool {
        matches!(self.counts, Counts::Bivariate(_))
    }

    pub fn successes(&self) -> Option<&[u64]> {
        match &self.counts {
            Counts::Univariate(z) => Some(z),
            Counts::Bivariate(_) => None,
        }
    }

    pub fn cells(&self) -> Option<&[[u64; 4]]> {
        match &self.counts {
            Counts::Bivariate(c) => Some(c),
            Counts::Univariate(_) => None,
        }
    }

    /// Collapse a bivariate table onto one margin.
    pub fn collapse(&self, endpoint: Endpoint) -> Option<CountTable> {
        let cells = self.cells()?;
        let z = cells
            .iter()
            .map(|c| match endpoint {
                Endpoint::Efficacy => c[2] + c[3],
                Endpoint::Toxicity => c[1] + c[3],
            })
            .collect();
        Some(CountTable {
            design: self.design.clone(),
            counts: Counts::Univariate(z),
        })
    }
}

/// Maximum absolute curve difference over a grid, with the achieving node.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviationResult {
    pub value: f64,
    pub argmax_dose: f64,
    pub grid: Vec<f64>,
}

/// `n` equally spaced nodes over a closed interval, endpoints included.
pub fn dose_grid(range: (f64, f64), n: usize) -> Vec<f64> {
    assert!(n >= 2, "grid needs at least two nodes");
    let (lo, hi) = range;
    let step = (hi - lo) / (n - 1) as f64;
    (0..n)
        .map(|i| if i == n - 1 { hi } else { lo + step * i as f64 })
        .collect()
}

#[inline]
pub fn logistic(u: f64) -> f64 {
    1.0 / (1.0 + (-u).exp())
}

/// ln(1 + e^u) without overflow.
#[inline]
fn softplus(u: f64) -> f64 {
    if u > 0.0 {
        u + (-u).exp().ln_1p()
    } else {
        u.exp().ln_1p()
    }
}

fn std_normal() -> Normal {
    Normal::new(0.0, 1.0).unwrap()
}

/// Response probability eta(d) under a logistic or probit curve.
pub fn link_prob(params: &LinkParams, d: f64) -> f64 {
    let u = params.beta + params.gamma * d;
    match params.link {
        Link::Logistic => logistic(u),
        Link::Probit => std_normal().cdf(u),
    }
}

/// Derivative of the response probability with respect to the linear predictor.
pub fn link_density(params: &LinkParams, d: f64) -> f64 {
    let u = params.beta + params.gamma * d;
    match params.link {
        Link::Logistic => {
            let p = logistic(u);
            p * (1.0 - p)
        }
        Link::Probit => std_normal().pdf(u),
    }
}

/// Shared ingredients of the Gumbel cell probabilities at one dose:
/// the two marginal probabilities and the association correction term.
#[inline]
fn gumbel_parts(theta: &GumbelParams, d: f64) -> (f64, f64, f64) {
    let a = logistic(theta.u_eff(d));
    let b = logistic(theta.u_tox(d));
    // nu * e^{-u1-u2} / ((1+e^{-u1})^2 (1+e^{-u2})^2)
    let c = theta.nu * a * (1.0 - a) * b * (1.0 - b);
    (a, b, c)
}

fn cells_unchecked(theta: &GumbelParams, d: f64) -> [f64; 4] {
    let (a, b, c) = gumbel_parts(theta, d);
    [
        (1.0 - a) * (1.0 - b) + c, // p00
        b * (1.0 - a) - c,         // p01
        a * (1.0 - b) - c,         // p10
        a * b + c,                 // p11
    ]
}

/// The four cell probabilities (p00, p01, p10, p11) of the Gumbel model.
pub fn gumbel_cells(theta: &GumbelParams, d: f64) -> Result<[f64; 4]> {
    let cells = cells_unchecked(theta, d);
    for &p in &cells {
        if !(-FEASIBILITY_TOL..=1.0 + FEASIBILITY_TOL).contains(&p) {
            return Err(EqtoxError::Feasibility { dose: d, value: p });
        }
    }
    Ok(cells)
}

/// Marginal response probabilities (pE, pT); independent of nu.
pub fn gumbel_marginals(theta: &GumbelParams, d: f64) -> (f64, f64) {
    (logistic(theta.u_eff(d)), logistic(theta.u_tox(d)))
}

/// Correlation of the two binary outcomes at dose d, Gumbel association nu.
pub fn gumbel_correlation(theta: &GumbelParams, d: f64) -> f64 {
    let u1 = theta.u_eff(d);
    let u2 = theta.u_tox(d);
    theta.nu
        / (((u1 / 2.0).exp() + (-u1 / 2.0).exp()) * ((u2 / 2.0).exp() + (-u2 / 2.0).exp()))
}

/// Cell probabilities and their gradients with respect to
/// (beta_e, gamma_e, beta_t, gamma_t, nu), row per cell.
pub fn gumbel_cells_grad(theta: &GumbelParams, d: f64) -> ([f64; 4], [[f64; 5]; 4]) {
    let (a, b, c) = gumbel_parts(theta, d);
    let va = a * (1.0 - a);
    let vb = b * (1.0 - b);
    // dc/du1, dc/du2, dc/dnu
    let c_u1 = theta.nu * va * (1.0 - 2.0 * a) * vb;
    let c_u2 = theta.nu * va * vb * (1.0 - 2.0 * b);
    let c_nu = va * vb;

    let cells = [
        (1.0 - a) * (1.0 - b) + c,
        b * (1.0 - a) - c,
        a * (1.0 - b) - c,
        a * b + c,
    ];
    // (d cell / d u1, d cell / d u2, d cell / d nu)
    let wrt_u = [
        [-va * (1.0 - b) + c_u1, -(1.0 - a) * vb + c_u2, c_nu],
        [-va * b - c_u1, (1.0 - a) * vb - c_u2, -c_nu],
        [va * (1.0 - b) - c_u1, -a * vb - c_u2, -c_nu],
        [va * b + c_u1, a * vb + c_u2, c_nu],
    ];
    let mut grads = [[0.0; 5]; 4];
    for (g, w) in grads.iter_mut().zip(wrt_u.iter()) {
        g[0] = w[0];
        g[1] = w[0] * d;
        g[2] = w[1];
        g[3] = w[1] * d;
        g[4] = w[2];
    }
    (cells, grads)
}

/// Log-likelihood value with a flag recording whether any log term was
/// clamped at the floor (instead of propagating -inf).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogLik {
    pub value: f64,
    pub clamped: bool,
}

#[inline]
fn clamped_ln(p: f64, hit: &mut bool) -> f64 {
    let l = p.max(0.0).ln();
    if l < LOG_FLOOR || !l.is_finite() {
        *hit = true;
        LOG_FLOOR
    } else {
        l
    }
}

/// Binomial log-likelihood of a univariate count table under a link curve.
pub fn loglik_univ(params: &LinkParams, data: &CountTable) -> LogLik {
    let z = data.successes().expect("univariate table required");
    let mut clamped = false;
    let mut total = 0.0;
    for ((&d, &n), &zi) in data.design().doses().iter().zip(data.design().sizes()).zip(z) {
        let (log_p, log_q) = match params.link {
            Link::Logistic => {
                let u = params.beta + params.gamma * d;
                // stable: ln p = -softplus(-u), ln(1-p) = -softplus(u)
                let (lp, lq) = (-softplus(-u), -softplus(u));
                (
                    if lp < LOG_FLOOR {
                        clamped = true;
                        LOG_FLOOR
                    } else {
                        lp
                    },
                    if lq < LOG_FLOOR {
                        clamped = true;
                        LOG_FLOOR
                    } else {
                        lq
                    },
                )
            }
            Link::Probit => {
                let p = link_prob(params, d);
                (clamped_ln(p, &mut clamped), clamped_ln(1.0 - p, &mut clamped))
            }
        };
        total += zi as f64 * log_p + (n - zi) as f64 * log_q;
    }
    LogLik {
        value: total,
        clamped,
    }
}

/// Gradient of `loglik_univ` with respect to (beta, gamma).
pub fn loglik_univ_grad(params: &LinkParams, data: &CountTable) -> [f64; 2] {
    let z = data.successes().expect("univariate table required");
    let mut g = [0.0; 2];
    for ((&d, &n), &zi) in data.design().doses().iter().zip(data.design().sizes()).zip(z) {
        let du = match params.link {
            Link::Logistic => {
                let p = link_prob(params, d);
                zi as f64 - n as f64 * p
            }
            Link::Probit => {
                let p = link_prob(params, d).clamp(1e-300, 1.0 - 1e-16);
                let phi = link_density(params, d);
                (zi as f64 / p - (n - zi) as f64 / (1.0 - p)) * phi
            }
        };
        g[0] += du;
        g[1] += du * d;
    }
    g
}

/// Gumbel log-likelihood of a bivariate count table; errors on infeasible cells.
pub fn loglik_gumbel(theta: &GumbelParams, data: &CountTable) -> Result<LogLik> {
    let cells = data.cells().expect("bivariate table required");
    let mut clamped = false;
    let mut total = 0.0;
    for (&d, counts) in data.design().doses().iter().zip(cells) {
        let p = gumbel_cells(theta, d)?;
        for (pi, &ci) in p.iter().zip(counts) {
            if ci > 0 {
                total += ci as f64 * clamped_ln(*pi, &mut clamped);
            }
        }
    }
    Ok(LogLik {
        value: total,
        clamped,
    })
}

/// Gradient of `loglik_gumbel` with respect to the 5 parameters.
pub fn loglik_gumbel_grad(theta: &GumbelParams, data: &CountTable) -> Result<[f64; 5]> {
    let cells = data.cells().expect("bivariate table required");
    let mut g = [0.0; 5];
    for (&d, counts) in data.design().doses().iter().zip(cells) {
        gumbel_cells(theta, d)?;
        let (p, dp) = gumbel_cells_grad(theta, d);
        for q in 0..4 {
            if counts[q] > 0 {
                let w = counts[q] as f64 / p[q].max(1e-300);
                for j in 0..5 {
                    g[j] += w * dp[q][j];
                }
            }
        }
    }
    Ok(g)
}

/// Hard maximum of |A(d) - B(d)| over grid nodes; ties go to the smallest dose.
pub fn max_abs_deviation<A, B>(curve_a: A, curve_b: B, grid: &[f64]) -> DeviationResult
where
    A: Fn(f64) -> f64,
    B: Fn(f64) -> f64,
{
    assert!(!grid.is_empty(), "grid must be nonempty");
    let mut best = f64::NEG_INFINITY;
    let mut at = grid[0];
    for &d in grid {
        let v = (curve_a(d) - curve_b(d)).abs();
        if v > best {
            best = v;
            at = d;
        }
    }
    DeviationResult {
        value: best,
        argmax_dose: at,
        grid: grid.to_vec(),
    }
}

/// Smooth maximum lambda * ln(sum exp(v_i / lambda)), max-shifted against overflow.
pub fn smooth_max(values: &[f64], lambda: f64) -> f64 {
    assert!(!values.is_empty() && lambda > 0.0);
    let m = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let s: f64 = values.iter().map(|&v| ((v - m) / lambda).exp()).sum();
    m + lambda * s.ln()
}

/// Softmax weights exp(v_i/lambda)/sum, the gradient of `smooth_max` in its inputs.
pub fn smooth_max_weights(values: &[f64], lambda: f64) -> Vec<f64> {
    let m = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = values.iter().map(|&v| ((v - m) / lambda).exp()).collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|x| x / s).collect()
}
