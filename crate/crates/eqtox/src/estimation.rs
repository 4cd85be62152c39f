//! Maximum-likelihood fitting and deviation-constrained fitting.
//!
//! Unconstrained fits maximize the binomial or Gumbel log-likelihood per
//! group. Constrained fits maximize the joint likelihood of both groups
//! subject to the smooth maximum of the absolute curve difference over a
//! dose grid equaling the equivalence margin, via an augmented Lagrangian
//! with a quasi-Newton inner solver. All routines are deterministic: a
//! fixed data-driven initialization and a fixed iteration schedule.

use serde::{Deserialize, Serialize};

use crate::error::{EqtoxError, Result};
use crate::model::{
    gumbel_cells_grad, link_density, link_prob, loglik_gumbel, loglik_gumbel_grad, loglik_univ,
    loglik_univ_grad, logistic, smooth_max, smooth_max_weights, CountTable, Endpoint, GumbelParams,
    Link, LinkParams,
};
use crate::optim::{minimize_bfgs, BoxBounds, MinimizeResult};

/// Guard box: |beta|, |gamma| <= 10, |nu| <= 4.
pub const PARAM_BOUND: f64 = 10.0;
pub const NU_BOUND: f64 = 4.0;

/// First-order tolerance for unconstrained convergence reporting.
pub const GRAD_TOL: f64 = 1e-6;

/// Two-stage smooth-max schedule for the deviation constraint.
pub const LAMBDA_STAGES: [f64; 2] = [1e-2, 1e-3];

/// Slack for the per-node cell-probability inequality constraints.
const CELL_SLACK: f64 = 1e-8;

const MAX_ITER_MLE: usize = 400;
const MAX_ITER_INNER: usize = 300;
const MAX_OUTER: usize = 25;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FitResult<P> {
    pub params: P,
    pub loglik: f64,
    pub converged: bool,
    pub gradient_norm: f64,
    /// True when the optimizer terminated on the parameter box boundary,
    /// the signature of complete or quasi-complete separation.
    pub separation: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConstrainedFitResult<P> {
    pub params_a: P,
    pub params_b: P,
    /// |smooth-max deviation - epsilon| at the final smoothing stage.
    pub constraint_residual: f64,
    /// |hard-max deviation - epsilon| on the same grid.
    pub hard_max_gap: f64,
    pub loglik: f64,
    /// Cell-probability feasibility over the grid (trivially true univariate).
    pub feasible: bool,
    pub converged: bool,
}

fn univ_box() -> BoxBounds {
    BoxBounds::symmetric(&[PARAM_BOUND, PARAM_BOUND])
}

fn gumbel_box(fix_nu: Option<f64>) -> BoxBounds {
    match fix_nu {
        Some(nu) => BoxBounds {
            lower: vec![-PARAM_BOUND, -PARAM_BOUND, -PARAM_BOUND, -PARAM_BOUND, nu],
            upper: vec![PARAM_BOUND, PARAM_BOUND, PARAM_BOUND, PARAM_BOUND, nu],
        },
        None => BoxBounds {
            lower: vec![-PARAM_BOUND, -PARAM_BOUND, -PARAM_BOUND, -PARAM_BOUND, -NU_BOUND],
            upper: vec![PARAM_BOUND, PARAM_BOUND, PARAM_BOUND, PARAM_BOUND, NU_BOUND],
        },
    }
}

/// Ordinary least squares of y on (1, d).
fn ols(doses: &[f64], y: &[f64]) -> (f64, f64) {
    let n = doses.len() as f64;
    let mx = doses.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxx: f64 = doses.iter().map(|d| (d - mx) * (d - mx)).sum();
    let sxy: f64 = doses.iter().zip(y).map(|(d, yi)| (d - mx) * (yi - my)).sum();
    let slope = if sxx > 0.0 { sxy / sxx } else { 0.0 };
    (my - slope * mx, slope)
}

/// Empirical-logit starting values with continuity correction (z+0.5)/(n+1).
fn init_univ(data: &CountTable) -> (f64, f64) {
    let z = data.successes().expect("univariate table");
    let logits: Vec<f64> = z
        .iter()
        .zip(data.design().sizes())
        .map(|(&zi, &ni)| {
            let p = (zi as f64 + 0.5) / (ni as f64 + 1.0);
            (p / (1.0 - p)).ln()
        })
        .collect();
    ols(data.design().doses(), &logits)
}

/// Unconstrained MLE of a univariate binary response curve.
pub fn fit_mle_univ(data: &CountTable, link: Link) -> Result<FitResult<LinkParams>> {
    if data.design().doses().len() < 2 {
        return Err(EqtoxError::invalid("data", "need at least 2 distinct doses"));
    }
    let (b0, g0) = init_univ(data);
    let bounds = univ_box();
    let obj = |x: &[f64]| {
        -loglik_univ(
            &LinkParams {
                beta: x[0],
                gamma: x[1],
                link,
            },
            data,
        )
        .value
    };
    let grad = |x: &[f64]| {
        let g = loglik_univ_grad(
            &LinkParams {
                beta: x[0],
                gamma: x[1],
                link,
            },
            data,
        );
        vec![-g[0], -g[1]]
    };
    // run well past GRAD_TOL so saturated designs reach closed-form accuracy
    let r = minimize_bfgs(obj, grad, &[b0, g0], &bounds, 1e-10, MAX_ITER_MLE);
    finish_fit(r, |x| LinkParams {
        beta: x[0],
        gamma: x[1],
        link,
    })
}

fn finish_fit<P, F: Fn(&[f64]) -> P>(r: MinimizeResult, make: F) -> Result<FitResult<P>> {
    let converged = r.grad_norm <= GRAD_TOL;
    if !converged && !r.converged {
        return Err(EqtoxError::NonConvergence {
            iterations: r.iterations,
            residual: r.grad_norm,
        });
    }
    Ok(FitResult {
        params: make(&r.x),
        loglik: -r.value,
        converged,
        gradient_norm: r.grad_norm,
        separation: r.boundary,
    })
}

/// Shrink nu toward 0 until cells are feasible at every design dose.
fn feasible_nu(mut theta: GumbelParams, doses: &[f64]) -> GumbelParams {
    for _ in 0..200 {
        if theta.is_feasible_on(doses) {
            return theta;
        }
        theta.nu *= 0.8;
        if theta.nu.abs() < 1e-6 {
            theta.nu = 0.0;
        }
    }
    theta.nu = 0.0;
    theta
}

fn init_gumbel(data: &CountTable) -> GumbelParams {
    let cells = data.cells().expect("bivariate table");
    let doses = data.design().doses();
    let eff = data.collapse(Endpoint::Efficacy).unwrap();
    let tox = data.collapse(Endpoint::Toxicity).unwrap();
    let (be, ge) = init_univ(&eff);
    let (bt, gt) = init_univ(&tox);
    // nu from per-dose empirical correlations inverted through the
    // association identity corr = nu * sqrt(pE(1-pE) pT(1-pT))
    let mut nu_sum = 0.0;
    let mut nu_n = 0usize;
    for ((&d, c), &n) in doses.iter().zip(cells).zip(data.design().sizes()) {
        let n = n as f64;
        let pe = ((c[2] + c[3]) as f64 + 0.5) / (n + 1.0);
        let pt = ((c[1] + c[3]) as f64 + 0.5) / (n + 1.0);
        let p11 = c[3] as f64 / n;
        let denom = (pe * (1.0 - pe) * pt * (1.0 - pt)).sqrt();
        if denom > 1e-6 {
            let rho = (p11 - pe * pt) / denom;
            nu_sum += rho / denom;
            nu_n += 1;
        }
        let _ = d;
    }
    let nu = if nu_n > 0 {
        (nu_sum / nu_n as f64).clamp(-NU_BOUND, NU_BOUND)
    } else {
        0.0
    };
    let theta = GumbelParams::new(
        be.clamp(-PARAM_BOUND, PARAM_BOUND),
        ge.clamp(-PARAM_BOUND, PARAM_BOUND),
        bt.clamp(-PARAM_BOUND, PARAM_BOUND),
        gt.clamp(-PARAM_BOUND, PARAM_BOUND),
        nu,
    );
    feasible_nu(theta, doses)
}

/// Gumbel objective rejecting iterates that leave the cell-feasible region
/// at the design doses.
fn gumbel_neg_loglik(data: &CountTable) -> impl Fn(&[f64]) -> f64 + '_ {
    move |x: &[f64]| {
        let theta = GumbelParams::from_slice(x);
        match loglik_gumbel(&theta, data) {
            Ok(l) => -l.value,
            Err(_) => f64::INFINITY,
        }
    }
}

fn gumbel_neg_grad(data: &CountTable) -> impl Fn(&[f64]) -> Vec<f64> + '_ {
    move |x: &[f64]| {
        let theta = GumbelParams::from_slice(x);
        let g = loglik_gumbel_grad(&theta, data).expect("gradient requested at feasible point");
        g.iter().map(|gi| -gi).collect()
    }
}

/// Unconstrained MLE of the 5-parameter Gumbel model.
pub fn fit_mle_gumbel(data: &CountTable) -> Result<FitResult<GumbelParams>> {
    fit_mle_gumbel_with(data, None)
}

/// Gumbel MLE with the association parameter optionally held fixed.
pub fn fit_mle_gumbel_with(data: &CountTable, fix_nu: Option<f64>) -> Result<FitResult<GumbelParams>> {
    if data.design().doses().len() < 2 {
        return Err(EqtoxError::invalid("data", "need at least 2 distinct doses"));
    }
    let mut theta0 = init_gumbel(data);
    if let Some(nu) = fix_nu {
        theta0.nu = nu;
        theta0 = feasible_nu(theta0, data.design().doses());
        if theta0.nu != nu {
            return Err(EqtoxError::Feasibility {
                dose: data.design().doses()[0],
                value: f64::NAN,
            });
        }
    }
    let bounds = gumbel_box(fix_nu);
    let r = minimize_bfgs(
        gumbel_neg_loglik(data),
        gumbel_neg_grad(data),
        &theta0.to_array(),
        &bounds,
        1e-8,
        MAX_ITER_MLE,
    );
    let mut fit = finish_fit(r, |x| GumbelParams::from_slice(x))?;
    if fix_nu.is_some() {
        // the pinned nu coordinate sits on its (degenerate) bounds by design
        fit.separation = false;
    }
    Ok(fit)
}

// ---------------------------------------------------------------------------
// Constrained fitting
// ---------------------------------------------------------------------------

/// Per-kind view of the constrained problem: objective, deviation values on
/// the grid, and their gradients in the stacked parameter vector.
struct Problem<'a> {
    data_a: &'a CountTable,
    data_b: &'a CountTable,
    endpoint: Endpoint,
    grid: &'a [f64],
    bivariate: bool,
    link: Link,
}

impl Problem<'_> {
    fn dim(&self) -> usize {
        if self.bivariate {
            10
        } else {
            4
        }
    }

    fn bounds(&self) -> BoxBounds {
        if self.bivariate {
            let b = gumbel_box(None);
            BoxBounds {
                lower: [b.lower.clone(), b.lower].concat(),
                upper: [b.upper.clone(), b.upper].concat(),
            }
        } else {
            let b = univ_box();
            BoxBounds {
                lower: [b.lower.clone(), b.lower].concat(),
                upper: [b.upper.clone(), b.upper].concat(),
            }
        }
    }

    /// Negative joint log-likelihood; +inf when a Gumbel iterate is
    /// cell-infeasible at a design dose.
    fn neg_loglik(&self, x: &[f64]) -> f64 {
        if self.bivariate {
            let ta = GumbelParams::from_slice(&x[..5]);
            let tb = GumbelParams::from_slice(&x[5..]);
            match (loglik_gumbel(&ta, self.data_a), loglik_gumbel(&tb, self.data_b)) {
                (Ok(la), Ok(lb)) => -(la.value + lb.value),
                _ => f64::INFINITY,
            }
        } else {
            let pa = LinkParams {
                beta: x[0],
                gamma: x[1],
                link: self.link,
            };
            let pb = LinkParams {
                beta: x[2],
                gamma: x[3],
                link: self.link,
            };
            -(loglik_univ(&pa, self.data_a).value + loglik_univ(&pb, self.data_b).value)
        }
    }

    fn neg_loglik_grad(&self, x: &[f64]) -> Vec<f64> {
        if self.bivariate {
            let ta = GumbelParams::from_slice(&x[..5]);
            let tb = GumbelParams::from_slice(&x[5..]);
            let ga = loglik_gumbel_grad(&ta, self.data_a).expect("feasible point");
            let gb = loglik_gumbel_grad(&tb, self.data_b).expect("feasible point");
            ga.iter().chain(gb.iter()).map(|g| -g).collect()
        } else {
            let pa = LinkParams {
                beta: x[0],
                gamma: x[1],
                link: self.link,
            };
            let pb = LinkParams {
                beta: x[2],
                gamma: x[3],
                link: self.link,
            };
            let ga = loglik_univ_grad(&pa, self.data_a);
            let gb = loglik_univ_grad(&pb, self.data_b);
            vec![-ga[0], -ga[1], -gb[0], -gb[1]]
        }
    }

    /// Curve value of the constrained endpoint for one group at one dose,
    /// its derivative w.r.t. the linear predictor, and the index of that
    /// group's intercept in the stacked parameter vector.
    fn curve(&self, x: &[f64], group_b: bool, d: f64) -> (f64, f64, usize) {
        if self.bivariate {
            let base = if group_b { 5 } else { 0 };
            let off = match self.endpoint {
                Endpoint::Efficacy => 0,
                Endpoint::Toxicity => 2,
            };
            let u = x[base + off] + x[base + off + 1] * d;
            let p = logistic(u);
            (p, p * (1.0 - p), base + off)
        } else {
            let base = if group_b { 2 } else { 0 };
            let params = LinkParams {
                beta: x[base],
                gamma: x[base + 1],
                link: self.link,
            };
            (link_prob(&params, d), link_density(&params, d), base)
        }
    }

    /// |A(d_i) - B(d_i)| on the grid.
    fn deviations(&self, x: &[f64]) -> Vec<f64> {
        self.grid
            .iter()
            .map(|&d| (self.curve(x, false, d).0 - self.curve(x, true, d).0).abs())
            .collect()
    }

    /// Gradient of the smooth max of the deviations.
    fn smooth_max_grad(&self, x: &[f64], lambda: f64) -> Vec<f64> {
        let vals = self.deviations(x);
        let w = smooth_max_weights(&vals, lambda);
        let mut g = vec![0.0; self.dim()];
        for (&d, &wi) in self.grid.iter().zip(&w) {
            let (pa, da, ia) = self.curve(x, false, d);
            let (pb, db, ib) = self.curve(x, true, d);
            let sign = if pa >= pb { 1.0 } else { -1.0 };
            g[ia] += wi * sign * da;
            g[ia + 1] += wi * sign * da * d;
            g[ib] -= wi * sign * db;
            g[ib + 1] -= wi * sign * db * d;
        }
        g
    }

    /// Cell-probability inequality values g = p_cell - slack (>= 0 wanted),
    /// every grid node, every cell, both groups. Empty for univariate.
    fn ineq_values(&self, x: &[f64]) -> Vec<f64> {
        if !self.bivariate {
            return Vec::new();
        }
        let ta = GumbelParams::from_slice(&x[..5]);
        let tb = GumbelParams::from_slice(&x[5..]);
        let mut out = Vec::with_capacity(self.grid.len() * 8);
        for &d in self.grid {
            let (ca, _) = gumbel_cells_grad(&ta, d);
            let (cb, _) = gumbel_cells_grad(&tb, d);
            for q in 0..4 {
                out.push(ca[q] - CELL_SLACK);
            }
            for q in 0..4 {
                out.push(cb[q] - CELL_SLACK);
            }
        }
        out
    }

    /// Adds the gradient of sum_j w_j g_j(x) for the active inequality
    /// weights `w` into `acc`.
    fn add_ineq_grad(&self, x: &[f64], w: &[f64], acc: &mut [f64]) {
        if !self.bivariate {
            return;
        }
        let ta = GumbelParams::from_slice(&x[..5]);
        let tb = GumbelParams::from_slice(&x[5..]);
        let mut idx = 0;
        for &d in self.grid {
            let (_, ga) = gumbel_cells_grad(&ta, d);
            let (_, gb) = gumbel_cells_grad(&tb, d);
            for q in 0..4 {
                let wi = w[idx];
                if wi != 0.0 {
                    for j in 0..5 {
                        acc[j] += wi * ga[q][j];
                    }
                }
                idx += 1;
            }
            for q in 0..4 {
                let wi = w[idx];
                if wi != 0.0 {
                    for j in 0..5 {
                        acc[5 + j] += wi * gb[q][j];
                    }
                }
                idx += 1;
            }
        }
    }
}

fn hard_max(vals: &[f64]) -> f64 {
    vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
}

/// Augmented-Lagrangian solve of: max joint loglik subject to
/// smooth_max(deviations) = epsilon and (bivariate) cell feasibility on the grid.
fn solve_constrained(
    problem: &Problem<'_>,
    x0: Vec<f64>,
    epsilon: f64,
) -> Result<(Vec<f64>, f64, bool)> {
    let bounds = problem.bounds();
    let n_ineq = problem.ineq_values(&x0).len();
    let mut x = x0;
    let mut lam_eq = 0.0f64;
    let mut lam_in = vec![0.0f64; n_ineq];
    let mut converged = false;

    for &lambda in LAMBDA_STAGES.iter() {
        let mut mu = 10.0f64;
        let mut prev_viol = f64::INFINITY;
        converged = false;
        for _outer in 0..MAX_OUTER {
            let obj = |z: &[f64]| {
                let f = problem.neg_loglik(z);
                if !f.is_finite() {
                    return f64::INFINITY;
                }
                let h = smooth_max(&problem.deviations(z), lambda) - epsilon;
                let mut val = f + lam_eq * h + 0.5 * mu * h * h;
                if n_ineq > 0 {
                    for (gj, &lj) in problem.ineq_values(z).iter().zip(&lam_in) {
                        let t = (lj - mu * gj).max(0.0);
                        val += (t * t - lj * lj) / (2.0 * mu);
                    }
                }
                val
            };
            let grad = |z: &[f64]| {
                let mut g = problem.neg_loglik_grad(z);
                let h = smooth_max(&problem.deviations(z), lambda) - epsilon;
                let hg = problem.smooth_max_grad(z, lambda);
                let w_eq = lam_eq + mu * h;
                for (gi, hgi) in g.iter_mut().zip(&hg) {
                    *gi += w_eq * hgi;
                }
                if n_ineq > 0 {
                    let weights: Vec<f64> = problem
                        .ineq_values(z)
                        .iter()
                        .zip(&lam_in)
                        .map(|(gj, &lj)| -(lj - mu * gj).max(0.0))
                        .collect();
                    problem.add_ineq_grad(z, &weights, &mut g);
                }
                g
            };

            let r = minimize_bfgs(&obj, &grad, &x, &bounds, 1e-7, MAX_ITER_INNER);
            x = r.x;

            let h = smooth_max(&problem.deviations(&x), lambda) - epsilon;
            let ineq = problem.ineq_values(&x);
            let ineq_viol = ineq.iter().cloned().fold(0.0f64, |m, g| m.max(-g.min(0.0)));
            let viol = h.abs().max(ineq_viol);

            lam_eq += mu * h;
            for (lj, gj) in lam_in.iter_mut().zip(&ineq) {
                *lj = (*lj - mu * gj).max(0.0);
            }

            if viol <= 1e-6 {
                converged = true;
                break;
            }
            if viol > prev_viol / 4.0 {
                mu = (mu * 10.0).min(1e10);
            }
            prev_viol = viol;
        }
    }

    let lambda_final = *LAMBDA_STAGES.last().unwrap();
    let residual = (smooth_max(&problem.deviations(&x), lambda_final) - epsilon).abs();
    if residual > 1e-4 {
        return Err(EqtoxError::ConstraintInfeasible { residual });
    }
    Ok((x, residual, converged))
}

fn constrained_result<P>(
    problem: &Problem<'_>,
    x: Vec<f64>,
    residual: f64,
    epsilon: f64,
    converged: bool,
    split: impl Fn(&[f64]) -> (P, P),
) -> ConstrainedFitResult<P> {
    let vals = problem.deviations(&x);
    let hard = hard_max(&vals);
    let feasible = problem.ineq_values(&x).iter().all(|&g| g >= -CELL_SLACK);
    let loglik = -problem.neg_loglik(&x);
    let (params_a, params_b) = split(&x);
    ConstrainedFitResult {
        params_a,
        params_b,
        constraint_residual: residual,
        hard_max_gap: (hard - epsilon).abs(),
        loglik,
        feasible,
        converged,
    }
}

/// Constrained fit of two univariate groups: joint MLE subject to the
/// efficacy-curve deviation equaling `epsilon` on the grid. Starts from the
/// unconstrained MLE pair.
pub fn fit_constrained_univ(
    data_a: &CountTable,
    data_b: &CountTable,
    epsilon: f64,
    grid: &[f64],
    link: Link,
) -> Result<ConstrainedFitResult<LinkParams>> {
    check_epsilon(epsilon)?;
    let fa = fit_mle_univ(data_a, link)?;
    let fb = fit_mle_univ(data_b, link)?;
    let problem = Problem {
        data_a,
        data_b,
        endpoint: Endpoint::Efficacy,
        grid,
        bivariate: false,
        link,
    };
    let x0 = vec![
        fa.params.beta,
        fa.params.gamma,
        fb.params.beta,
        fb.params.gamma,
    ];
    let (x, residual, converged) = solve_constrained(&problem, x0, epsilon)?;
    Ok(constrained_result(
        &problem,
        x,
        residual,
        epsilon,
        converged,
        |z| {
            (
                LinkParams {
                    beta: z[0],
                    gamma: z[1],
                    link,
                },
                LinkParams {
                    beta: z[2],
                    gamma: z[3],
                    link,
                },
            )
        },
    ))
}

/// Constrained fit of two Gumbel groups for one endpoint: all 10 parameters
/// jointly, subject to the endpoint-curve deviation equaling `epsilon` and
/// cell-probability feasibility at every grid node.
pub fn fit_constrained_gumbel(
    data_a: &CountTable,
    data_b: &CountTable,
    endpoint: Endpoint,
    epsilon: f64,
    grid: &[f64],
) -> Result<ConstrainedFitResult<GumbelParams>> {
    check_epsilon(epsilon)?;
    let fa = fit_mle_gumbel(data_a)?;
    let fb = fit_mle_gumbel(data_b)?;
    let problem = Problem {
        data_a,
        data_b,
        endpoint,
        grid,
        bivariate: true,
        link: Link::Logistic,
    };
    let x0 = [fa.params.to_array(), fb.params.to_array()].concat();
    let (x, residual, converged) = solve_constrained(&problem, x0, epsilon)?;
    Ok(constrained_result(
        &problem,
        x,
        residual,
        epsilon,
        converged,
        |z| (GumbelParams::from_slice(&z[..5]), GumbelParams::from_slice(&z[5..])),
    ))
}

fn check_epsilon(epsilon: f64) -> Result<()> {
    if !(0.0..1.0).contains(&epsilon) || epsilon == 0.0 {
        return Err(EqtoxError::invalid("epsilon", "must lie in (0, 1)"));
    }
    Ok(())
}

/// Null-generation parameter choice: the unconstrained pair when the observed
/// deviation already reaches the margin, otherwise the constrained pair.
pub fn select_null_params<P: Clone>(
    unconstrained: (&P, &P),
    constrained: (&P, &P),
    d_hat: f64,
    epsilon: f64,
) -> (P, P) {
    if d_hat >= epsilon {
        (unconstrained.0.clone(), unconstrained.1.clone())
    } else {
        (constrained.0.clone(), constrained.1.clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{dose_grid, max_abs_deviation, DoseDesign};
    use approx::assert_abs_diff_eq;

    fn design7(n: u64) -> DoseDesign {
        DoseDesign::equal_allocation(vec![-3.0, -2.0, -1.0, 0.0, 1.0, 2.0, 3.0], n).unwrap()
    }

    #[test]
    fn saturated_two_dose_closed_form() {
        let design = DoseDesign::new(vec![-1.0, 1.0], vec![10, 10], (-1.0, 1.0)).unwrap();
        let data = CountTable::univariate(design, vec![5, 8]).unwrap();
        let fit = fit_mle_univ(&data, Link::Logistic).unwrap();
        // logit(0.5) = b - g, logit(0.8) = b + g  =>  b = g = logit(0.8)/2
        let expected = (0.8f64 / 0.2).ln() / 2.0;
        assert!(fit.converged);
        assert_abs_diff_eq!(fit.params.beta, expected, epsilon = 1e-8);
        assert_abs_diff_eq!(fit.params.gamma, expected, epsilon = 1e-8);
    }

    #[test]
    fn flat_response_gives_zero_slope() {
        let data = CountTable::univariate(design7(10), vec![5; 7]).unwrap();
        let fit = fit_mle_univ(&data, Link::Logistic).unwrap();
        assert_abs_diff_eq!(fit.params.beta, 0.0, epsilon = 1e-7);
        assert_abs_diff_eq!(fit.params.gamma, 0.0, epsilon = 1e-7);
    }

    #[test]
    fn probit_fit_recovers_expected_frequencies() {
        // exact-frequency data from a probit curve
        let truth = LinkParams::probit(0.2, 0.7);
        let design = design7(10_000);
        let z: Vec<u64> = design
            .doses()
            .iter()
            .map(|&d| (link_prob(&truth, d) * 10_000.0).round() as u64)
            .collect();
        let data = CountTable::univariate(design, z).unwrap();
        let fit = fit_mle_univ(&data, Link::Probit).unwrap();
        assert!((fit.params.beta - 0.2).abs() < 0.01);
        assert!((fit.params.gamma - 0.7).abs() < 0.01);
    }

    #[test]
    fn separation_is_flagged() {
        // perfectly separated outcomes drive gamma to the box boundary
        let data = CountTable::univariate(design7(20), vec![0, 0, 0, 0, 20, 20, 20]).unwrap();
        let fit = fit_mle_univ(&data, Link::Logistic).unwrap();
        assert!(fit.separation);
    }

    #[test]
    fn gumbel_consistency_on_exact_frequencies() {
        let truth = GumbelParams::new(0.0, 1.0, 0.0, 0.5, 1.0);
        let design = design7(100_000);
        let cells: Vec<[u64; 4]> = design
            .doses()
            .iter()
            .map(|&d| {
                let p = crate::model::gumbel_cells(&truth, d).unwrap();
                let n = 100_000f64;
                let mut c = [
                    (p[0] * n).round() as u64,
                    (p[1] * n).round() as u64,
                    (p[2] * n).round() as u64,
                    0,
                ];
                c[3] = 100_000 - c[0] - c[1] - c[2];
                c
            })
            .collect();
        let data = CountTable::bivariate(design, cells).unwrap();
        let fit = fit_mle_gumbel(&data).unwrap();
        let t = fit.params.to_array();
        let want = truth.to_array();
        for (got, exp) in t.iter().zip(want.iter()) {
            assert!(
                (got - exp).abs() < 0.02,
                "estimate {got} far from truth {exp}"
            );
        }
    }

    #[test]
    fn gumbel_nu_zero_matches_univariate_margin() {
        let truth = GumbelParams::new(0.3, 0.9, -0.5, 0.6, 0.0);
        let design = design7(500);
        let cells: Vec<[u64; 4]> = design
            .doses()
            .iter()
            .map(|&d| {
                let p = crate::model::gumbel_cells(&truth, d).unwrap();
                let n = 500f64;
                let mut c = [
                    (p[0] * n).round() as u64,
                    (p[1] * n).round() as u64,
                    (p[2] * n).round() as u64,
                    0,
                ];
                let s = c[0] + c[1] + c[2];
                c[3] = 500 - s;
                c
            })
            .collect();
        let data = CountTable::bivariate(design, cells).unwrap();
        let joint = fit_mle_gumbel_with(&data, Some(0.0)).unwrap();
        let eff = fit_mle_univ(&data.collapse(Endpoint::Efficacy).unwrap(), Link::Logistic).unwrap();
        assert!((joint.params.beta_e - eff.params.beta).abs() < 1e-4);
        assert!((joint.params.gamma_e - eff.params.gamma).abs() < 1e-4);
    }

    #[test]
    fn uniform_table_has_no_effect_or_association() {
        let data = CountTable::bivariate(design7(40), vec![[10, 10, 10, 10]; 7]).unwrap();
        let fit = fit_mle_gumbel(&data).unwrap();
        let t = fit.params.to_array();
        for v in t {
            assert!(v.abs() < 1e-5, "expected 0, got {v}");
        }
    }

    #[test]
    fn constrained_fit_activates_margin() {
        // identical groups: unconstrained deviation 0, constraint pushes to 0.2
        let truth = LinkParams::logistic(0.0, 1.0);
        let design = design7(50);
        let z: Vec<u64> = design
            .doses()
            .iter()
            .map(|&d| (link_prob(&truth, d) * 50.0).round() as u64)
            .collect();
        let data = CountTable::univariate(design, z).unwrap();
        let grid = dose_grid((-3.0, 3.0), 201);
        let fit = fit_constrained_univ(&data, &data, 0.2, &grid, Link::Logistic).unwrap();
        assert!(fit.constraint_residual <= 1e-5, "residual {}", fit.constraint_residual);
        assert!(fit.hard_max_gap <= 0.01, "gap {}", fit.hard_max_gap);
        let dev = max_abs_deviation(
            |d| link_prob(&fit.params_a, d),
            |d| link_prob(&fit.params_b, d),
            &grid,
        );
        assert!((dev.value - 0.2).abs() <= 0.01);

        // restricted optimum cannot beat the unconstrained sum
        let fa = fit_mle_univ(&data, Link::Logistic).unwrap();
        assert!(fit.loglik <= 2.0 * fa.loglik + 1e-8);
    }

    #[test]
    fn constrained_fit_dominates_boundary_lattice() {
        // oracle check: no boundary point on a coarse lattice beats the
        // optimizer. Lattice over (beta_a, gamma_a, beta_b); gamma_b is
        // bisected onto the constraint surface (hard-max deviation = eps).
        let eps = 0.2;
        let design = design7(40);
        let za: Vec<u64> = design
            .doses()
            .iter()
            .map(|&d| (link_prob(&LinkParams::logistic(0.0, 1.0), d) * 40.0).round() as u64)
            .collect();
        let zb: Vec<u64> = design
            .doses()
            .iter()
            .map(|&d| (link_prob(&LinkParams::logistic(0.3, 1.3), d) * 40.0).round() as u64)
            .collect();
        let data_a = CountTable::univariate(design.clone(), za).unwrap();
        let data_b = CountTable::univariate(design, zb).unwrap();
        let grid = dose_grid((-3.0, 3.0), 201);
        let fit = fit_constrained_univ(&data_a, &data_b, eps, &grid, Link::Logistic).unwrap();

        let deviation = |a: &LinkParams, b: &LinkParams| {
            max_abs_deviation(|d| link_prob(a, d), |d| link_prob(b, d), &grid).value
        };
        let lattice = [-0.4, -0.2, 0.0, 0.2, 0.4];
        let mut checked = 0;
        for &ba in &lattice {
            for &ga in &[0.6, 0.8, 1.0, 1.2, 1.4] {
                for &bb in &lattice {
                    let pa = LinkParams::logistic(ba, ga);
                    // bracket a gamma_b where the deviation crosses eps
                    let mut lo = None;
                    let mut hi = None;
                    let mut g = 0.2;
                    while g <= 3.0 {
                        let d = deviation(&pa, &LinkParams::logistic(bb, g));
                        if d < eps {
                            lo = Some(g);
                        } else if lo.is_some() {
                            hi = Some(g);
                            break;
                        }
                        g += 0.2;
                    }
                    let (Some(mut lo), Some(mut hi)) = (lo, hi) else {
                        continue;
                    };
                    for _ in 0..50 {
                        let mid = 0.5 * (lo + hi);
                        if deviation(&pa, &LinkParams::logistic(bb, mid)) < eps {
                            lo = mid;
                        } else {
                            hi = mid;
                        }
                    }
                    let pb = LinkParams::logistic(bb, 0.5 * (lo + hi));
                    let ll = loglik_univ(&pa, &data_a).value + loglik_univ(&pb, &data_b).value;
                    assert!(
                        ll <= fit.loglik + 1e-3,
                        "boundary point ({ba}, {ga}, {bb}, {}) beats the optimizer: \
                         {ll} > {}",
                        pb.gamma,
                        fit.loglik
                    );
                    checked += 1;
                }
            }
        }
        assert!(checked > 50, "only {checked} lattice points reached the boundary");
    }

    #[test]
    fn select_null_branches() {
        let a = LinkParams::logistic(0.0, 1.0);
        let b = LinkParams::logistic(0.5, 1.5);
        let ca = LinkParams::logistic(0.1, 1.1);
        let cb = LinkParams::logistic(0.4, 1.4);
        let (u, _) = select_null_params((&a, &b), (&ca, &cb), 0.25, 0.2);
        assert_eq!(u, a);
        let (c, _) = select_null_params((&a, &b), (&ca, &cb), 0.05, 0.2);
        assert_eq!(c, ca);
        let (e, _) = select_null_params((&a, &b), (&ca, &cb), 0.2, 0.2);
        assert_eq!(e, a); // boundary tie follows the >= branch
    }
}
