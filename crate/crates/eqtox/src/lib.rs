//! Equivalence testing for binary dose-response curves.
//!
//! Two binary endpoints (efficacy and, optionally, toxicity) are observed at
//! a handful of doses in two groups. The question is whether the groups'
//! dose-response curves differ by less than a prespecified margin everywhere
//! on the dose range. This crate provides:
//!
//! * logistic/probit marginal models and a Gumbel-type bivariate model for
//!   correlated efficacy-toxicity responses ([`model`]),
//! * maximum-likelihood and constrained (boundary-of-the-null) fitting
//!   ([`estimation`]),
//! * parametric-bootstrap equivalence tests, univariate and
//!   intersection-union bivariate ([`bootstrap`]),
//! * reproducible data generation ([`datagen`]) and a simulation harness for
//!   operating characteristics ([`sim`]),
//! * CSV/JSON ingestion and reporting ([`io`]).
//!
//! All randomness flows through explicit (seed, stream) pairs, so results are
//! bit-identical across runs and worker counts.

pub mod bootstrap;
pub mod datagen;
pub mod error;
pub mod estimation;
pub mod io;
pub mod model;
pub mod optim;
pub mod sim;

pub use bootstrap::{test_bivariate, test_univ, EquivalenceReport, GroupParams, TestConfig};
pub use error::{EqtoxError, Result};
pub use model::{CountTable, DoseDesign, GumbelParams, Link, LinkParams};
