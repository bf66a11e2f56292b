//! MCMC kernels targeting tilted distributions.
//!
//! Three kernels share the [`SamplerState`] position/preconditioner state:
//!
//! - [`sgld_step`] — stochastic gradient Langevin dynamics with an
//!   Adam-style diagonal preconditioner and capped injected noise, the
//!   workhorse kernel for minibatched likelihoods;
//! - [`mala_step`] — Metropolis-adjusted Langevin with full-data densities,
//!   exact by detailed balance, used for reference runs;
//! - [`exact_gaussian_step`] — i.i.d. draws from the closed-form tilted
//!   Gaussian of the conjugate linear model, used by oracle tests.
//!
//! [`shift_state`] remaps a sampler position when the worker's target changes
//! after a server exchange, so that the chain resumes at the same relative
//! location under the new Gaussian approximation and no burn-in is needed.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::expfam::{standard_normal, ExpFamError, NaturalParams};
use crate::models::{self, ModelKind};
use crate::snep::{SnepError, TiltedTarget};

#[derive(Debug, Error)]
pub enum SamplerError {
    #[error("non-finite log density at the current state")]
    NonFiniteDensity,
    #[error("kernel requires the {expected} model")]
    UnsupportedModel { expected: &'static str },
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error(transparent)]
    ExpFam(#[from] ExpFamError),
    #[error(transparent)]
    Snep(#[from] SnepError),
    #[error(transparent)]
    Model(#[from] crate::models::ModelError),
}

/// Debiasing rule for the preconditioner running average.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Debias {
    /// Adam-style `1 − β^t`; the running average is unbiased at every step.
    PerIteration,
    /// The constant `1 − β²` (kept for comparison; it does not debias).
    Quadratic,
}

/// Adaptive-SGLD settings.
#[derive(Debug, Clone)]
pub struct SgldConfig {
    /// Global step scale ε.
    pub eps: f64,
    /// Preconditioner averaging rate β.
    pub beta_precond: f64,
    /// Numerical-stability offset δ in κ = ε/(√M + δ).
    pub delta: f64,
    /// Cap on the standard deviation of the injected noise, applied
    /// per dimension: std_j = min(√(2κ_j), noise_cap). Use infinity for
    /// uncapped Langevin noise; 0 disables injected noise entirely.
    pub noise_cap: f64,
    pub minibatch_size: usize,
    pub debias: Debias,
}

impl Default for SgldConfig {
    fn default() -> Self {
        SgldConfig {
            eps: 1e-3,
            beta_precond: 0.999,
            delta: 1e-8,
            noise_cap: 1e-3,
            minibatch_size: 100,
            debias: Debias::PerIteration,
        }
    }
}

impl SgldConfig {
    pub fn validate(&self) -> Result<(), SamplerError> {
        let ok = self.eps > 0.0
            && self.beta_precond > 0.0
            && self.beta_precond < 1.0
            && self.delta > 0.0
            && self.noise_cap >= 0.0
            && self.minibatch_size > 0;
        if ok {
            Ok(())
        } else {
            Err(SamplerError::Snep(SnepError::InvalidConfig(
                "invalid SGLD settings".into(),
            )))
        }
    }
}

/// Epoch-shuffled minibatch schedule over the positions of a shard.
#[derive(Debug, Clone, Default)]
struct BatchSchedule {
    order: Vec<u32>,
    cursor: usize,
}

impl BatchSchedule {
    /// Next minibatch as dataset indices, or `None` when the batch covers the
    /// whole shard. Batches are drawn without replacement within an
    /// epoch-shuffled pass; a fresh epoch starts whenever fewer than a full
    /// batch remains.
    fn next(&mut self, shard: &[u32], batch_size: usize, rng: &mut ChaCha8Rng) -> Option<Vec<u32>> {
        if batch_size >= shard.len() || shard.is_empty() {
            return None;
        }
        if self.order.len() != shard.len() {
            self.order = (0..shard.len() as u32).collect();
            self.cursor = self.order.len(); // force a shuffle on first use
        }
        if self.cursor + batch_size > self.order.len() {
            self.order.shuffle(rng);
            self.cursor = 0;
        }
        let picks = &self.order[self.cursor..self.cursor + batch_size];
        let batch = picks.iter().map(|&p| shard[p as usize]).collect();
        self.cursor += batch_size;
        Some(batch)
    }
}

/// MCMC position plus preconditioner accumulator and step counter.
#[derive(Debug, Clone)]
pub struct SamplerState {
    pub x: Vec<f64>,
    /// Running average of squared drift, v_t ≥ 0 elementwise.
    pub v: Vec<f64>,
    /// Kernel steps taken; increments by exactly 1 per step.
    pub t: u64,
    pub rng: ChaCha8Rng,
    batch: BatchSchedule,
}

impl SamplerState {
    pub fn new(x: Vec<f64>, rng: ChaCha8Rng) -> Self {
        let d = x.len();
        SamplerState {
            x,
            v: vec![0.0; d],
            t: 0,
            rng,
            batch: BatchSchedule::default(),
        }
    }

    pub fn dim(&self) -> usize {
        self.x.len()
    }
}

/// Whether an SGLD step was taken or aborted.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SgldOutcome {
    Stepped,
    /// The drift estimate was non-finite; position, preconditioner and step
    /// counter are unchanged (the seed stream has advanced).
    AbortedNonFinite,
}

/// Preconditioner recursion: `v ← βv + (1−β)g∘g`, debiased mass
/// `M = v/(1−β^t)`, stepsizes `κ = ε/(√M + δ)`. Advances the step counter.
pub fn precond_update(
    state: &mut SamplerState,
    g: &[f64],
    cfg: &SgldConfig,
) -> Result<(Vec<f64>, Vec<f64>), SamplerError> {
    if g.len() != state.dim() {
        return Err(SamplerError::DimensionMismatch {
            expected: state.dim(),
            got: g.len(),
        });
    }
    let beta = cfg.beta_precond;
    for (v, &gi) in state.v.iter_mut().zip(g) {
        *v = beta * *v + (1.0 - beta) * gi * gi;
    }
    state.t += 1;
    let debias = match cfg.debias {
        Debias::PerIteration => 1.0 - beta.powi(state.t.min(i32::MAX as u64) as i32),
        Debias::Quadratic => 1.0 - beta * beta,
    };
    let m: Vec<f64> = state.v.iter().map(|&v| v / debias).collect();
    let kappa: Vec<f64> = m.iter().map(|&mi| cfg.eps / (mi.sqrt() + cfg.delta)).collect();
    Ok((m, kappa))
}

/// One adaptive-SGLD update against a tilted target.
///
/// The drift is `∇s(x)ᵀbase + tilt_power·(|S|/|B|)·Σ_{c∈B}∇log p(y_c|x)` for
/// a minibatch drawn from the epoch-shuffled shard, preconditioned per
/// dimension by κ from [`precond_update`], plus Gaussian noise with standard
/// deviation `min(√(2κ_j), noise_cap)`.
pub fn sgld_step(
    state: &mut SamplerState,
    target: &TiltedTarget,
    cfg: &SgldConfig,
) -> Result<SgldOutcome, SamplerError> {
    let shard = target.shard();
    let batch = state
        .batch
        .next(shard, cfg.minibatch_size, &mut state.rng);
    let g = target.drift(&state.x, batch.as_deref())?;
    if g.iter().any(|v| !v.is_finite()) {
        return Ok(SgldOutcome::AbortedNonFinite);
    }
    let (_, kappa) = precond_update(state, &g, cfg)?;
    for j in 0..state.x.len() {
        let std = (2.0 * kappa[j]).sqrt().min(cfg.noise_cap);
        let noise = if std > 0.0 {
            std * standard_normal(&mut state.rng)
        } else {
            0.0
        };
        state.x[j] += kappa[j] * g[j] + noise;
    }
    Ok(SgldOutcome::Stepped)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MalaOutcome {
    Accepted,
    Rejected,
}

/// One Metropolis-adjusted Langevin step with full-data gradients.
///
/// Proposal `x* ~ N(x + τ∇logπ(x), 2τI)` with exact accept/reject, so the
/// kernel satisfies detailed balance for the tilted density.
pub fn mala_step(
    state: &mut SamplerState,
    target: &TiltedTarget,
    step: f64,
) -> Result<MalaOutcome, SamplerError> {
    let (f_cur, g_cur) = target.logp_grad(&state.x)?;
    if !f_cur.is_finite() {
        return Err(SamplerError::NonFiniteDensity);
    }
    let d = state.x.len();
    let sd = (2.0 * step).sqrt();
    let mut proposal = vec![0.0; d];
    for j in 0..d {
        proposal[j] = state.x[j] + step * g_cur[j] + sd * standard_normal(&mut state.rng);
    }
    let (f_prop, g_prop) = target.logp_grad(&proposal)?;
    state.t += 1;
    let accept_logprob = if f_prop.is_finite() {
        // log q(x|x*) − log q(x*|x) with q(y|z) = N(y; z + τ∇logπ(z), 2τI).
        let mut correction = 0.0;
        for j in 0..d {
            let fwd = proposal[j] - state.x[j] - step * g_cur[j];
            let bwd = state.x[j] - proposal[j] - step * g_prop[j];
            correction += (fwd * fwd - bwd * bwd) / (4.0 * step);
        }
        f_prop - f_cur + correction
    } else {
        f64::NEG_INFINITY
    };
    let u: f64 = state.rng.gen_range(f64::MIN_POSITIVE..1.0);
    if u.ln() < accept_logprob {
        state.x = proposal;
        Ok(MalaOutcome::Accepted)
    } else {
        Ok(MalaOutcome::Rejected)
    }
}

/// One exact i.i.d. draw from the tilted Gaussian of the conjugate linear
/// model.
pub fn exact_gaussian_step(
    state: &mut SamplerState,
    target: &TiltedTarget,
) -> Result<(), SamplerError> {
    if target.model.kind != ModelKind::LinearGaussian {
        return Err(SamplerError::UnsupportedModel {
            expected: "linear-gaussian",
        });
    }
    let factor = models::LinearShardFactor::compute(&target.model, &target.data, target.shard())?;
    let combined = models::embed_full(&target.base).add(&factor.natural().scale(target.tilt_power))?;
    if !combined.in_natural_domain() {
        return Err(SamplerError::Model(
            crate::models::ModelError::InvalidCombinedPrecision,
        ));
    }
    state.x = combined.sample_exact(&mut state.rng)?;
    state.t += 1;
    Ok(())
}

/// Affine remap of an MCMC position when the Gaussian approximation changes:
/// `x_new = μ_new + Σ_new^{1/2} Σ_old^{−1/2} (x_old − μ_old)` with diagonal
/// or Cholesky square roots.
pub fn shift_state(
    x_old: &[f64],
    old: &NaturalParams,
    new: &NaturalParams,
) -> Result<Vec<f64>, SamplerError> {
    if x_old.len() != old.dim() || old.dim() != new.dim() {
        return Err(SamplerError::DimensionMismatch {
            expected: old.dim(),
            got: x_old.len(),
        });
    }
    let old_m = old.gaussian_moments()?;
    let new_m = new.gaussian_moments()?;
    let centered: Vec<f64> = x_old.iter().zip(&old_m.mean).map(|(&x, &m)| x - m).collect();
    let z = old_m.cov.apply_inverse(&centered);
    let mut x = new_m.cov.apply(&z);
    for (xi, &mi) in x.iter_mut().zip(&new_m.mean) {
        *xi += mi;
    }
    Ok(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::expfam::Family;
    use crate::models::{DataGenerator, ModelSpec};
    use crate::snep::TiltedTarget;
    use rand::SeedableRng;
    use std::sync::Arc;

    /// A target with no data: the pure Gaussian carrier.
    fn carrier_target(theta: NaturalParams) -> TiltedTarget {
        let d = theta.dim();
        let mut data = DataGenerator::new(ModelKind::LinearGaussian, 0, d, 0).generate();
        data.assign_shards(1, 0);
        TiltedTarget::from_parts(
            theta,
            1.0,
            Arc::new(ModelSpec::linear(d, Family::Diag, 10.0, 1.0)),
            Arc::new(data),
            0,
        )
        .unwrap()
    }

    fn standard_normal_target() -> TiltedTarget {
        carrier_target(NaturalParams::diag(vec![0.0], vec![-1.0]).unwrap())
    }

    #[test]
    fn precond_first_step_matches_hand_evaluation() {
        let mut state = SamplerState::new(vec![0.0], ChaCha8Rng::seed_from_u64(0));
        let cfg = SgldConfig::default();
        let (m, kappa) = precond_update(&mut state, &[2.0], &cfg).unwrap();
        assert!((state.v[0] - 0.004).abs() < 1e-15);
        assert!((m[0] - 4.0).abs() < 1e-12);
        assert!((kappa[0] - cfg.eps / (2.0 + cfg.delta)).abs() < 1e-15);
        assert_eq!(state.t, 1);
    }

    #[test]
    fn precond_zero_gradient_degenerate() {
        let mut state = SamplerState::new(vec![0.0], ChaCha8Rng::seed_from_u64(0));
        let cfg = SgldConfig::default();
        let (m, kappa) = precond_update(&mut state, &[0.0], &cfg).unwrap();
        assert_eq!(m[0], 0.0);
        assert!((kappa[0] - cfg.eps / cfg.delta).abs() < 1e-12);
    }

    #[test]
    fn precond_constant_gradient_limit() {
        // With constant g the debiased mass is g² at every step, so κ
        // converges to ε/(|g|+δ) immediately.
        let mut state = SamplerState::new(vec![0.0], ChaCha8Rng::seed_from_u64(0));
        let cfg = SgldConfig::default();
        for _ in 0..50 {
            let (m, kappa) = precond_update(&mut state, &[3.0], &cfg).unwrap();
            assert!((m[0] - 9.0).abs() < 1e-9);
            assert!((kappa[0] - cfg.eps / (3.0 + cfg.delta)).abs() < 1e-12);
        }
    }

    #[test]
    fn precond_instant_adaptation_as_beta_vanishes() {
        let mut state = SamplerState::new(vec![0.0], ChaCha8Rng::seed_from_u64(0));
        let cfg = SgldConfig {
            beta_precond: 1e-12,
            ..SgldConfig::default()
        };
        let (_, _) = precond_update(&mut state, &[5.0], &cfg).unwrap();
        let (m, _) = precond_update(&mut state, &[2.0], &cfg).unwrap();
        assert!((m[0] - 4.0).abs() < 1e-10);
    }

    #[test]
    fn sgld_plain_gradient_step() {
        // Noise off, first step on the standard-normal carrier from x=1: the
        // debiased mass is g² = 1, so κ = ε/(1+δ) and x' ≈ 1 − ε.
        let target = standard_normal_target();
        let cfg = SgldConfig {
            eps: 0.1,
            noise_cap: 0.0,
            ..SgldConfig::default()
        };
        let mut state = SamplerState::new(vec![1.0], ChaCha8Rng::seed_from_u64(0));
        let out = sgld_step(&mut state, &target, &cfg).unwrap();
        assert_eq!(out, SgldOutcome::Stepped);
        assert!((state.x[0] - 0.9).abs() < 1e-6, "{}", state.x[0]);
    }

    #[test]
    fn sgld_deterministic_trajectories() {
        let target = standard_normal_target();
        let cfg = SgldConfig::default();
        let run = || {
            let mut state = SamplerState::new(vec![0.3], ChaCha8Rng::seed_from_u64(77));
            let mut xs = Vec::new();
            for _ in 0..200 {
                sgld_step(&mut state, &target, &cfg).unwrap();
                xs.push(state.x[0]);
            }
            xs
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn sgld_reduces_to_unadjusted_langevin() {
        // noise_cap = ∞ and the preconditioner at its fixed point M = I:
        // the update must be exactly x + κg + N(0, 2κ).
        let target = standard_normal_target();
        let cfg = SgldConfig {
            eps: 1e-3,
            noise_cap: f64::INFINITY,
            ..SgldConfig::default()
        };
        let mut state = SamplerState::new(vec![1.0], ChaCha8Rng::seed_from_u64(5));
        state.v = vec![1.0];
        state.t = 10_000_000; // β^t underflows; debias factor is exactly 1
        let mut replica = state.rng.clone();
        let x0 = state.x[0];
        sgld_step(&mut state, &target, &cfg).unwrap();
        let g = -x0;
        let kappa = cfg.eps / (1.0_f64.sqrt() + cfg.delta);
        let expect = x0 + kappa * g + (2.0 * kappa).sqrt() * standard_normal(&mut replica);
        assert_eq!(state.x[0], expect);
    }

    #[test]
    fn mala_acceptance_tends_to_one_as_step_vanishes() {
        let target = standard_normal_target();
        let mut state = SamplerState::new(vec![0.5], ChaCha8Rng::seed_from_u64(3));
        let mut accepted = 0;
        let n = 2000;
        for _ in 0..n {
            if mala_step(&mut state, &target, 1e-6).unwrap() == MalaOutcome::Accepted {
                accepted += 1;
            }
        }
        assert!(accepted as f64 / n as f64 >= 0.99);
    }

    #[test]
    fn mala_rejects_hopeless_proposals() {
        // An enormous step proposes far into the tail where the density
        // underflows; every proposal must be rejected.
        let target = standard_normal_target();
        let mut state = SamplerState::new(vec![0.0], ChaCha8Rng::seed_from_u64(4));
        for _ in 0..100 {
            let out = mala_step(&mut state, &target, 1e8).unwrap();
            assert_eq!(out, MalaOutcome::Rejected);
            assert_eq!(state.x[0], 0.0);
        }
    }

    #[test]
    fn mala_rough_moments() {
        let target = standard_normal_target();
        let mut state = SamplerState::new(vec![0.0], ChaCha8Rng::seed_from_u64(11));
        let mut sum = 0.0;
        let mut sumsq = 0.0;
        let n = 20_000;
        for _ in 0..n {
            mala_step(&mut state, &target, 0.5).unwrap();
            sum += state.x[0];
            sumsq += state.x[0] * state.x[0];
        }
        let mean = sum / n as f64;
        let var = sumsq / n as f64 - mean * mean;
        assert!(mean.abs() < 0.05, "mean {mean}");
        assert!((var - 1.0).abs() < 0.1, "var {var}");
    }

    #[test]
    fn exact_gaussian_step_degenerate_and_deterministic() {
        let theta = NaturalParams::from_gaussian_diag(&[4.0], &[1e-12]).unwrap();
        let target = carrier_target(theta);
        let mut state = SamplerState::new(vec![0.0], ChaCha8Rng::seed_from_u64(2));
        exact_gaussian_step(&mut state, &target).unwrap();
        assert!((state.x[0] - 4.0).abs() < 1e-5);
        assert_eq!(state.t, 1);

        let mut a = SamplerState::new(vec![0.0], ChaCha8Rng::seed_from_u64(9));
        let mut b = SamplerState::new(vec![0.0], ChaCha8Rng::seed_from_u64(9));
        exact_gaussian_step(&mut a, &target).unwrap();
        exact_gaussian_step(&mut b, &target).unwrap();
        assert_eq!(a.x, b.x);
    }

    #[test]
    fn exact_gaussian_step_requires_linear_model() {
        let mut data = DataGenerator::new(ModelKind::Logistic, 4, 1, 0).generate();
        data.assign_shards(1, 0);
        let target = TiltedTarget::from_parts(
            NaturalParams::diag(vec![0.0], vec![-1.0]).unwrap(),
            1.0,
            Arc::new(ModelSpec::logistic(1, Family::Diag, 10.0)),
            Arc::new(data),
            0,
        )
        .unwrap();
        let mut state = SamplerState::new(vec![0.0], ChaCha8Rng::seed_from_u64(2));
        assert!(matches!(
            exact_gaussian_step(&mut state, &target),
            Err(SamplerError::UnsupportedModel { .. })
        ));
    }

    #[test]
    fn shift_identity_and_affine_example() {
        let old = NaturalParams::from_gaussian_diag(&[0.0], &[1.0]).unwrap();
        let x = shift_state(&[1.3], &old, &old).unwrap();
        assert!((x[0] - 1.3).abs() < 1e-14);

        let new = NaturalParams::from_gaussian_diag(&[2.0], &[4.0]).unwrap();
        let x = shift_state(&[1.0], &old, &new).unwrap();
        assert!((x[0] - 4.0).abs() < 1e-12);
    }

    #[test]
    fn shift_round_trip_is_identity() {
        use crate::expfam::Family;
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        for _ in 0..50 {
            let d = 4;
            let old = NaturalParams::isotropic(Family::Full, d, 0.3, 2.0);
            let new = {
                let mut m = vec![0.0; d * d];
                for i in 0..d {
                    for j in 0..d {
                        m[i * d + j] = if i == j { -2.0 } else { -0.4 };
                    }
                }
                NaturalParams::full(vec![1.0; d], m).unwrap()
            };
            let x: Vec<f64> = (0..d).map(|_| standard_normal(&mut rng) * 2.0).collect();
            let there = shift_state(&x, &old, &new).unwrap();
            let back = shift_state(&there, &new, &old).unwrap();
            for (a, b) in x.iter().zip(&back) {
                assert!((a - b).abs() < 1e-9);
            }
        }
    }
}
