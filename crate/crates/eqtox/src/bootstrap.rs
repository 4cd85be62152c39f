//! Parametric bootstrap equivalence tests.
//!
//! The univariate test fits both groups, projects the fitted pair onto the
//! null boundary when the observed deviation is inside the margin, regenerates
//! data from the null parameters, refits, and compares the observed statistic
//! against the empirical alpha-quantile of the bootstrap replicates. The
//! bivariate test runs one such loop per endpoint and rejects globally only
//! when both endpoints reject (intersection-union, no multiplicity
//! adjustment).
//!
//! Replicates are independent rayon tasks; each owns its RNG stream keyed by
//! the replicate index, so reports are bit-identical for any worker count.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datagen::{sample_gumbel, sample_univ, RngStream};
use crate::error::{EqtoxError, Result};
use crate::estimation::{
    fit_constrained_gumbel, fit_constrained_univ, fit_mle_gumbel, fit_mle_univ, select_null_params,
};
use crate::model::{
    dose_grid, link_prob, max_abs_deviation, CountTable, Endpoint, GumbelParams, Link, LinkParams,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestConfig {
    /// Equivalence margin for the efficacy endpoint.
    pub epsilon_eff: f64,
    /// Equivalence margin for the toxicity endpoint (bivariate only).
    pub epsilon_tox: Option<f64>,
    pub alpha: f64,
    pub n_boot: usize,
    /// Number of evaluation grid nodes over the dose range.
    pub grid_points: usize,
    pub seed: u64,
    pub link: Link,
}

impl TestConfig {
    pub fn univariate(epsilon: f64, alpha: f64, n_boot: usize, seed: u64) -> Self {
        TestConfig {
            epsilon_eff: epsilon,
            epsilon_tox: None,
            alpha,
            n_boot,
            grid_points: 201,
            seed,
            link: Link::Logistic,
        }
    }

    pub fn bivariate(epsilon: (f64, f64), alpha: f64, n_boot: usize, seed: u64) -> Self {
        TestConfig {
            epsilon_eff: epsilon.0,
            epsilon_tox: Some(epsilon.1),
            alpha,
            n_boot,
            grid_points: 201,
            seed,
            link: Link::Logistic,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, eps) in [("epsilon_eff", Some(self.epsilon_eff)), ("epsilon_tox", self.epsilon_tox)] {
            if let Some(e) = eps {
                if !(e > 0.0 && e < 1.0) {
                    return Err(EqtoxError::invalid("config", format!("{name} must be in (0,1)")));
                }
            }
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(EqtoxError::invalid("config", "alpha must be in (0,1)"));
        }
        if self.n_boot < 1 {
            return Err(EqtoxError::invalid("config", "n_boot must be >= 1"));
        }
        if self.grid_points < 2 {
            return Err(EqtoxError::invalid("config", "grid must have >= 2 nodes"));
        }
        Ok(())
    }

    /// True when floor(n_boot * alpha) = 0 and the quantile degenerates.
    pub fn quantile_underpowered(&self) -> bool {
        (self.n_boot as f64 * self.alpha).floor() < 1.0
    }
}

/// Fitted parameter pair for the two groups.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum GroupParams {
    Univariate { a: LinkParams, b: LinkParams },
    Bivariate { a: GumbelParams, b: GumbelParams },
}

/// One endpoint's bootstrap outcome.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EndpointResult {
    pub epsilon: f64,
    /// Observed maximum deviation d-hat.
    pub statistic: f64,
    pub argmax_dose: f64,
    /// Empirical alpha-quantile of the replicates; None when
    /// floor(n * alpha) = 0 (the -inf sentinel).
    pub quantile: Option<f64>,
    pub quantile_warning: bool,
    pub p_value: f64,
    pub reject: bool,
    /// Sorted surviving bootstrap replicates.
    pub replicates: Vec<f64>,
    /// Non-converged refits dropped from the replicate sample.
    pub dropped: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EquivalenceReport {
    pub fits: GroupParams,
    /// Parameters used to generate efficacy-endpoint bootstrap data.
    pub null_fits_efficacy: GroupParams,
    /// Parameters used to generate toxicity-endpoint bootstrap data.
    pub null_fits_toxicity: Option<GroupParams>,
    pub efficacy: EndpointResult,
    pub toxicity: Option<EndpointResult>,
    /// Univariate: the efficacy decision. Bivariate: both endpoints reject.
    pub reject_global: bool,
}

/// floor(n * alpha)-th order statistic (1-based) of an ascending sample;
/// -inf sentinel when the index is zero.
pub fn bootstrap_quantile(replicates: &[f64], alpha: f64) -> f64 {
    assert!(!replicates.is_empty());
    let k = (replicates.len() as f64 * alpha).floor() as usize;
    if k == 0 {
        f64::NEG_INFINITY
    } else {
        replicates[k - 1]
    }
}

/// Closed empirical distribution function: fraction of replicates <= statistic.
pub fn p_value(replicates: &[f64], statistic: f64) -> f64 {
    let count = replicates.iter().filter(|&&r| r <= statistic).count();
    count as f64 / replicates.len() as f64
}

fn shared_grid(data_a: &CountTable, data_b: &CountTable, grid_points: usize) -> Vec<f64> {
    let ra = data_a.design().range();
    let rb = data_b.design().range();
    dose_grid((ra.0.min(rb.0), ra.1.max(rb.1)), grid_points)
}

fn endpoint_result(
    epsilon: f64,
    statistic: f64,
    argmax_dose: f64,
    mut replicates: Vec<f64>,
    dropped: usize,
    alpha: f64,
    underpowered: bool,
) -> EndpointResult {
    replicates.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let q = bootstrap_quantile(&replicates, alpha);
    let reject = statistic < q;
    EndpointResult {
        epsilon,
        statistic,
        argmax_dose,
        quantile: if q.is_finite() { Some(q) } else { None },
        quantile_warning: underpowered || !q.is_finite(),
        p_value: p_value(&replicates, statistic),
        reject,
        replicates,
        dropped,
    }
}

/// Univariate equivalence test (parametric bootstrap on the efficacy curve).
pub fn test_univ(
    data_a: &CountTable,
    data_b: &CountTable,
    config: &TestConfig,
) -> Result<EquivalenceReport> {
    config.validate()?;
    let grid = shared_grid(data_a, data_b, config.grid_points);
    let link = config.link;
    let eps = config.epsilon_eff;

    let fit_a = fit_mle_univ(data_a, link)?;
    let fit_b = fit_mle_univ(data_b, link)?;
    let dev = max_abs_deviation(
        |d| link_prob(&fit_a.params, d),
        |d| link_prob(&fit_b.params, d),
        &grid,
    );

    let (null_a, null_b) = if dev.value < eps {
        let con = fit_constrained_univ(data_a, data_b, eps, &grid, link)?;
        select_null_params(
            (&fit_a.params, &fit_b.params),
            (&con.params_a, &con.params_b),
            dev.value,
            eps,
        )
    } else {
        (fit_a.params, fit_b.params)
    };

    let outcomes: Vec<Option<f64>> = (0..config.n_boot)
        .into_par_iter()
        .map(|i| {
            let boot_a = sample_univ(
                &null_a,
                data_a.design(),
                RngStream::new(config.seed, 2 * i as u64),
            );
            let boot_b = sample_univ(
                &null_b,
                data_b.design(),
                RngStream::new(config.seed, 2 * i as u64 + 1),
            );
            let ra = fit_mle_univ(&boot_a, link).ok()?;
            let rb = fit_mle_univ(&boot_b, link).ok()?;
            Some(
                max_abs_deviation(
                    |d| link_prob(&ra.params, d),
                    |d| link_prob(&rb.params, d),
                    &grid,
                )
                .value,
            )
        })
        .collect();
    let dropped = outcomes.iter().filter(|o| o.is_none()).count();
    let replicates: Vec<f64> = outcomes.into_iter().flatten().collect();
    if replicates.is_empty() {
        return Err(EqtoxError::NonConvergence {
            iterations: config.n_boot,
            residual: f64::NAN,
        });
    }

    let efficacy = endpoint_result(
        eps,
        dev.value,
        dev.argmax_dose,
        replicates,
        dropped,
        config.alpha,
        config.quantile_underpowered(),
    );
    let reject_global = efficacy.reject;
    Ok(EquivalenceReport {
        fits: GroupParams::Univariate {
            a: fit_a.params,
            b: fit_b.params,
        },
        null_fits_efficacy: GroupParams::Univariate {
            a: null_a,
            b: null_b,
        },
        null_fits_toxicity: None,
        efficacy,
        toxicity: None,
        reject_global,
    })
}

fn margin_curve(theta: &GumbelParams, endpoint: Endpoint) -> LinkParams {
    match endpoint {
        Endpoint::Efficacy => theta.efficacy_margin(),
        Endpoint::Toxicity => theta.toxicity_margin(),
    }
}

fn gumbel_endpoint_loop(
    data_a: &CountTable,
    data_b: &CountTable,
    endpoint: Endpoint,
    epsilon: f64,
    fits: (&GumbelParams, &GumbelParams),
    statistic: f64,
    argmax_dose: f64,
    grid: &[f64],
    config: &TestConfig,
    stream_offset: u64,
) -> Result<(GroupParams, EndpointResult)> {
    let (null_a, null_b) = if statistic < epsilon {
        let con = fit_constrained_gumbel(data_a, data_b, endpoint, epsilon, grid)?;
        select_null_params(fits, (&con.params_a, &con.params_b), statistic, epsilon)
    } else {
        (*fits.0, *fits.1)
    };

    let outcomes: Vec<Option<f64>> = (0..config.n_boot)
        .into_par_iter()
        .map(|i| {
            let sa = RngStream::new(config.seed, stream_offset + 2 * i as u64);
            let sb = RngStream::new(config.seed, stream_offset + 2 * i as u64 + 1);
            let boot_a = sample_gumbel(&null_a, data_a.design(), sa).ok()?;
            let boot_b = sample_gumbel(&null_b, data_b.design(), sb).ok()?;
            let ra = fit_mle_gumbel(&boot_a).ok()?;
            let rb = fit_mle_gumbel(&boot_b).ok()?;
            let ca = margin_curve(&ra.params, endpoint);
            let cb = margin_curve(&rb.params, endpoint);
            Some(max_abs_deviation(|d| link_prob(&ca, d), |d| link_prob(&cb, d), grid).value)
        })
        .collect();
    let dropped = outcomes.iter().filter(|o| o.is_none()).count();
    let replicates: Vec<f64> = outcomes.into_iter().flatten().collect();
    if replicates.is_empty() {
        return Err(EqtoxError::NonConvergence {
            iterations: config.n_boot,
            residual: f64::NAN,
        });
    }

    Ok((
        GroupParams::Bivariate {
            a: null_a,
            b: null_b,
        },
        endpoint_result(
            epsilon,
            statistic,
            argmax_dose,
            replicates,
            dropped,
            config.alpha,
            config.quantile_underpowered(),
        ),
    ))
}

/// Bivariate efficacy-toxicity equivalence test: two endpoint bootstrap
/// loops, global rejection only when both endpoints reject.
pub fn test_bivariate(
    data_a: &CountTable,
    data_b: &CountTable,
    config: &TestConfig,
) -> Result<EquivalenceReport> {
    config.validate()?;
    let eps_t = config
        .epsilon_tox
        .ok_or_else(|| EqtoxError::invalid("config", "bivariate test needs epsilon_tox"))?;
    let grid = shared_grid(data_a, data_b, config.grid_points);

    let fit_a = fit_mle_gumbel(data_a)?;
    let fit_b = fit_mle_gumbel(data_b)?;

    let dev_e = max_abs_deviation(
        |d| link_prob(&fit_a.params.efficacy_margin(), d),
        |d| link_prob(&fit_b.params.efficacy_margin(), d),
        &grid,
    );
    let dev_t = max_abs_deviation(
        |d| link_prob(&fit_a.params.toxicity_margin(), d),
        |d| link_prob(&fit_b.params.toxicity_margin(), d),
        &grid,
    );

    // disjoint stream ranges per endpoint
    let tox_offset = 2 * config.n_boot as u64;
    let (null_e, efficacy) = gumbel_endpoint_loop(
        data_a,
        data_b,
        Endpoint::Efficacy,
        config.epsilon_eff,
        (&fit_a.params, &fit_b.params),
        dev_e.value,
        dev_e.argmax_dose,
        &grid,
        config,
        0,
    )?;
    let (null_t, toxicity) = gumbel_endpoint_loop(
        data_a,
        data_b,
        Endpoint::Toxicity,
        eps_t,
        (&fit_a.params, &fit_b.params),
        dev_t.value,
        dev_t.argmax_dose,
        &grid,
        config,
        tox_offset,
    )?;

    let reject_global = efficacy.reject && toxicity.reject;
    Ok(EquivalenceReport {
        fits: GroupParams::Bivariate {
            a: fit_a.params,
            b: fit_b.params,
        },
        null_fits_efficacy: null_e,
        null_fits_toxicity: Some(null_t),
        efficacy,
        toxicity: Some(toxicity),
        reject_global,
    })
}
