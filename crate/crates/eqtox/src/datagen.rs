//! Seeded generation of univariate Bernoulli and bivariate correlated binary
//! trial data.
//!
//! Streams are (seed, stream_id) pairs over a counter-based ChaCha generator:
//! the output is fully determined by the pair and distinct stream ids give
//! independent streams, so bootstrap replicates and simulation replications
//! can be scheduled over any number of workers without changing results.

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Binomial, Distribution};
use serde::{Deserialize, Serialize};

use crate::error::{EqtoxError, Result};
use crate::model::{gumbel_cells, link_prob, CountTable, DoseDesign, GumbelParams, LinkParams};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngStream {
    pub seed: u64,
    pub stream_id: u64,
}

impl RngStream {
    pub fn new(seed: u64, stream_id: u64) -> Self {
        RngStream { seed, stream_id }
    }

    pub fn rng(&self) -> ChaCha12Rng {
        let mut rng = ChaCha12Rng::seed_from_u64(self.seed);
        rng.set_stream(self.stream_id);
        rng
    }
}

/// Marginal probabilities plus a target correlation for one joint Bernoulli pair.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct JointBernoulliSpec {
    pub p_eff: f64,
    pub p_tox: f64,
    pub rho: f64,
}

/// Attainable correlation range for a Bernoulli pair with the given margins.
pub fn frechet_bounds(p_eff: f64, p_tox: f64) -> (f64, f64) {
    let (p1, p2) = (p_eff, p_tox);
    let (q1, q2) = (1.0 - p1, 1.0 - p2);
    let lower = (-(p1 * p2 / (q1 * q2)).sqrt()).max(-(q1 * q2 / (p1 * p2)).sqrt());
    let upper = (p1 * q2 / (q1 * p2)).sqrt().min((q1 * p2 / (p1 * q2)).sqrt());
    (lower, upper)
}

/// Cell probabilities from margins and correlation:
/// p11 = pE pT + rho sqrt(pE qE pT qT), the rest by marginal subtraction.
pub fn joint_cells_from_marginals(spec: &JointBernoulliSpec) -> Result<[f64; 4]> {
    let (lower, upper) = frechet_bounds(spec.p_eff, spec.p_tox);
    if spec.rho < lower - 1e-12 || spec.rho > upper + 1e-12 {
        return Err(EqtoxError::InfeasibleCorrelation {
            rho: spec.rho,
            lower,
            upper,
        });
    }
    let (pe, pt) = (spec.p_eff, spec.p_tox);
    let p11 = pe * pt + spec.rho * (pe * (1.0 - pe) * pt * (1.0 - pt)).sqrt();
    let p10 = pe - p11;
    let p01 = pt - p11;
    let p00 = 1.0 - pe - pt + p11;
    Ok([p00.max(0.0), p01.max(0.0), p10.max(0.0), p11.max(0.0)])
}

fn draw_binomial(rng: &mut ChaCha12Rng, n: u64, p: f64) -> u64 {
    if p <= 0.0 {
        return 0;
    }
    if p >= 1.0 {
        return n;
    }
    Binomial::new(n, p).unwrap().sample(rng)
}

/// Per-dose binomial counts under a link curve. Deterministic given the stream.
pub fn sample_univ(params: &LinkParams, design: &DoseDesign, stream: RngStream) -> CountTable {
    let mut rng = stream.rng();
    let z: Vec<u64> = design
        .doses()
        .iter()
        .zip(design.sizes())
        .map(|(&d, &n)| draw_binomial(&mut rng, n, link_prob(params, d)))
        .collect();
    CountTable::univariate(design.clone(), z).expect("binomial counts within size")
}

/// Multinomial cell counts by sequential conditional binomials.
fn draw_multinomial(rng: &mut ChaCha12Rng, n: u64, probs: &[f64; 4]) -> [u64; 4] {
    let mut out = [0u64; 4];
    let mut remaining = n;
    let mut mass = 1.0;
    for q in 0..3 {
        if remaining == 0 || mass <= 0.0 {
            break;
        }
        let p = (probs[q] / mass).clamp(0.0, 1.0);
        let c = draw_binomial(rng, remaining, p);
        out[q] = c;
        remaining -= c;
        mass -= probs[q];
    }
    out[3] = remaining;
    out
}

/// Per-dose multinomial cell counts under the Gumbel model.
pub fn sample_gumbel(
    theta: &GumbelParams,
    design: &DoseDesign,
    stream: RngStream,
) -> Result<CountTable> {
    let mut rng = stream.rng();
    let mut cells = Vec::with_capacity(design.doses().len());
    for (&d, &n) in design.doses().iter().zip(design.sizes()) {
        let p = gumbel_cells(theta, d)?;
        cells.push(draw_multinomial(&mut rng, n, &p));
    }
    Ok(CountTable::bivariate(design.clone(), cells).expect("cells sum to n"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{gumbel_correlation, gumbel_marginals};
    use approx::assert_abs_diff_eq;

    fn design7(n: u64) -> DoseDesign {
        DoseDesign::equal_allocation(vec![-3.0, -2.0, -1.0, 0.0, 1.0, 2.0, 3.0], n).unwrap()
    }

    #[test]
    fn degenerate_probabilities() {
        let design = design7(25);
        let all = sample_univ(&LinkParams::logistic(1e4, 0.0), &design, RngStream::new(1, 0));
        assert_eq!(all.successes().unwrap(), design.sizes());
        let none = sample_univ(&LinkParams::logistic(-1e4, 0.0), &design, RngStream::new(1, 0));
        assert!(none.successes().unwrap().iter().all(|&z| z == 0));
    }

    #[test]
    fn univ_frequencies_near_truth() {
        let params = LinkParams::logistic(0.0, 1.0);
        let design = design7(100_000);
        let data = sample_univ(&params, &design, RngStream::new(42, 7));
        for ((&d, &n), &z) in design.doses().iter().zip(design.sizes()).zip(data.successes().unwrap()) {
            let p_hat = z as f64 / n as f64;
            assert!(
                (p_hat - link_prob(&params, d)).abs() < 0.005,
                "dose {d}: {p_hat}"
            );
        }
    }

    #[test]
    fn determinism_across_calls() {
        let params = LinkParams::logistic(0.2, 0.8);
        let design = design7(50);
        let a = sample_univ(&params, &design, RngStream::new(9, 3));
        let b = sample_univ(&params, &design, RngStream::new(9, 3));
        assert_eq!(a, b);
        let c = sample_univ(&params, &design, RngStream::new(9, 4));
        assert_ne!(a, c);
    }

    #[test]
    fn frechet_examples() {
        let (lo, hi) = frechet_bounds(0.5, 0.5);
        assert_abs_diff_eq!(lo, -1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(hi, 1.0, epsilon = 1e-12);
        let (_, hi) = frechet_bounds(0.9, 0.1);
        assert_abs_diff_eq!(hi, 1.0 / 9.0, epsilon = 1e-12);
        for &(pe, pt) in &[(0.2, 0.7), (0.01, 0.99), (0.4, 0.4)] {
            let (lo, hi) = frechet_bounds(pe, pt);
            assert!(lo <= 0.0 && 0.0 <= hi);
        }
    }

    #[test]
    fn joint_cells_examples() {
        let indep = JointBernoulliSpec {
            p_eff: 0.3,
            p_tox: 0.6,
            rho: 0.0,
        };
        let c = joint_cells_from_marginals(&indep).unwrap();
        assert_abs_diff_eq!(c[3], 0.18, epsilon = 1e-15);

        let comonotone = JointBernoulliSpec {
            p_eff: 0.5,
            p_tox: 0.5,
            rho: 1.0,
        };
        let c = joint_cells_from_marginals(&comonotone).unwrap();
        assert_abs_diff_eq!(c[0], 0.5, epsilon = 1e-12);
        assert_abs_diff_eq!(c[1], 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(c[2], 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(c[3], 0.5, epsilon = 1e-12);

        // agreement with the Gumbel model's own cells
        let theta = GumbelParams::new(0.0, 1.0, 0.0, 0.5, 1.0);
        let (pe, pt) = gumbel_marginals(&theta, 0.0);
        let spec = JointBernoulliSpec {
            p_eff: pe,
            p_tox: pt,
            rho: gumbel_correlation(&theta, 0.0),
        };
        let c = joint_cells_from_marginals(&spec).unwrap();
        let g = gumbel_cells(&theta, 0.0).unwrap();
        for (a, b) in c.iter().zip(g.iter()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-12);
        }
    }

    #[test]
    fn infeasible_correlation_rejected() {
        let spec = JointBernoulliSpec {
            p_eff: 0.9,
            p_tox: 0.1,
            rho: 0.5,
        };
        assert!(matches!(
            joint_cells_from_marginals(&spec),
            Err(EqtoxError::InfeasibleCorrelation { .. })
        ));
    }

    #[test]
    fn gumbel_sampling_matches_cells() {
        let theta = GumbelParams::new(0.0, 1.0, 0.0, 0.5, 1.0);
        let design = DoseDesign::equal_allocation(vec![-1.0, 0.0, 1.0], 100_000).unwrap();
        let data = sample_gumbel(&theta, &design, RngStream::new(11, 0)).unwrap();
        let idx0 = 1; // dose 0
        let counts = data.cells().unwrap()[idx0];
        let expected = [0.3125, 0.1875, 0.1875, 0.3125];
        for (c, e) in counts.iter().zip(expected.iter()) {
            assert!((*c as f64 / 100_000.0 - e).abs() < 0.01);
        }
        // empirical correlation near the model correlation
        for (i, &d) in design.doses().iter().enumerate() {
            let c = data.cells().unwrap()[i];
            let n = 100_000f64;
            let pe = (c[2] + c[3]) as f64 / n;
            let pt = (c[1] + c[3]) as f64 / n;
            let rho = (c[3] as f64 / n - pe * pt) / (pe * (1.0 - pe) * pt * (1.0 - pt)).sqrt();
            assert!((rho - gumbel_correlation(&theta, d)).abs() < 0.02);
        }
    }

    #[test]
    fn nu_zero_margin_matches_univariate_sampler_distribution() {
        // with nu = 0 the efficacy margin is Binomial(n, pE); compare moments
        let theta = GumbelParams::new(0.0, 1.0, 0.0, 0.5, 0.0);
        let design = design7(50_000);
        let data = sample_gumbel(&theta, &design, RngStream::new(5, 2)).unwrap();
        let eff = data.collapse(crate::model::Endpoint::Efficacy).unwrap();
        for ((&d, &n), &z) in design
            .doses()
            .iter()
            .zip(design.sizes())
            .zip(eff.successes().unwrap())
        {
            let p = link_prob(&theta.efficacy_margin(), d);
            assert!((z as f64 / n as f64 - p).abs() < 0.01);
        }
    }
}
