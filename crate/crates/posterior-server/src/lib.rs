//! Distributed Bayesian learning with stochastic natural-gradient expectation
//! propagation (SNEP) and an asynchronous posterior server.
//!
//! A master node (the *posterior server*) holds the natural parameters of a
//! Gaussian exponential-family approximation to a global posterior. Worker
//! nodes each own a disjoint shard of the data, run an MCMC sampler against a
//! local *tilted* distribution, and refine a local likelihood approximation by
//! natural-gradient descent on the mean parameters. Workers exchange delta
//! messages with the server asynchronously and in a non-blocking fashion.
//!
//! The crate is organised as a library with one thin CLI binary:
//!
//! - [`expfam`] — exponential-family algebra for diagonal and full-covariance
//!   Gaussians (parameter conversions, log-partition, KL, sampling).
//! - [`models`] — likelihood models and data: Bayesian logistic regression
//!   with a synthetic-data generator, and a conjugate Gaussian linear model
//!   with closed-form posterior used as an exactness oracle.
//! - [`snep`] — the SNEP update machinery: cavity/tilted construction, the
//!   stochastic natural-gradient inner update, outer auxiliary updates, the
//!   damped-EP baseline, and dual-objective diagnostics.
//! - [`samplers`] — MCMC kernels: adaptive preconditioned SGLD, a MALA
//!   reference kernel, an exact Gaussian kernel for conjugate tests, and the
//!   post-communication state shift.
//! - [`runtime`] — the posterior-server protocol: worker/server loops, the
//!   SMS baseline, a deterministic in-process scheduler, a threaded executor,
//!   and the wire codec.
//! - [`harness`] — experiment orchestration: config files, metrics, trace
//!   files, and the long-run MALA reference posterior.
//!
//! Runnable demonstrations of each capability live in the crate's `examples/`
//! directory; `cargo run --example conjugate_exactness` is a good entry point.

pub mod expfam;
pub mod harness;
mod linalg;
pub mod models;
pub mod runtime;
pub mod samplers;
pub mod snep;

pub use expfam::{Family, MeanParams, NaturalParams, SuffStats};
pub use models::{Dataset, ModelKind, ModelSpec};
pub use snep::{LikelihoodSite, SnepConfig, TiltedTarget};
