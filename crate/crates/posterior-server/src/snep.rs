//! The SNEP update machinery.
//!
//! Each worker maintains a likelihood-approximation site: mean parameters γ,
//! the matching natural parameters λ = ∇A*(γ), the copy λ_old recorded at the
//! last exchange with the posterior server, an auxiliary parameter θ', and a
//! power β. The inner loop performs stochastic natural-gradient descent on
//! the dual objective by stepping γ towards the moments of the local tilted
//! distribution, which in natural-gradient form is simply
//!
//! ```text
//! γ ← γ + ε·(s(x) − ∇A(θ_posterior))
//! ```
//!
//! The outer loop periodically re-pins θ' to the current posterior. A damped
//! EP update is provided as the SMS baseline: the same fixed points, but the
//! step is taken in natural-parameter space, which is less tolerant of Monte
//! Carlo noise.

use std::sync::Arc;

use thiserror::Error;

use crate::expfam::{suff_stats, ExpFamError, Family, MeanParams, NaturalParams};
use crate::models::{self, Dataset, ModelError, ModelKind, ModelSpec};

/// Variance of the near-flat factor N(0, v·I) used to initialise sites. The
/// zero factor has no mean-parameter image, so initialisation uses the
/// closest well-defined choice; the initial posterior is then ≈ the prior.
pub const SITE_INIT_VARIANCE: f64 = 1e4;

#[derive(Debug, Error)]
pub enum SnepError {
    #[error("tilted base lies outside the natural domain")]
    TiltedInvalid,
    #[error("site has no mean-parameter image (non-normalisable factor)")]
    GammaUnavailable,
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    ExpFam(#[from] ExpFamError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Step-size schedule for the inner loop.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum StepSchedule {
    Constant,
    /// ε_t = ε₀ / (1 + t/t₀).
    InverseT { t0: f64 },
}

/// How per-site powers β_i are resolved.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum BetaMode {
    Fixed(f64),
    /// β = 1/n_workers ("power SNEP").
    OneOverWorkers,
}

/// SNEP hyperparameters.
#[derive(Debug, Clone)]
pub struct SnepConfig {
    pub eps: f64,
    pub schedule: StepSchedule,
    pub n_outer: u64,
    pub n_sync: u64,
    pub min_variance: f64,
    pub beta_mode: BetaMode,
    /// MCMC sub-steps per inner iteration; their statistics are averaged.
    pub samples_per_iter: usize,
    /// Variance of the initial near-flat factors N(0, v·I). Wide factors keep
    /// the initial posterior close to the prior but take longer to drain in
    /// mean coordinates once cavities tighten.
    pub site_init_variance: f64,
}

impl Default for SnepConfig {
    fn default() -> Self {
        SnepConfig {
            eps: 0.02,
            schedule: StepSchedule::Constant,
            n_outer: 10,
            n_sync: 10,
            min_variance: 0.01,
            beta_mode: BetaMode::Fixed(1.0),
            samples_per_iter: 1,
            site_init_variance: SITE_INIT_VARIANCE,
        }
    }
}

impl SnepConfig {
    pub fn validate(&self) -> Result<(), SnepError> {
        if !(self.eps >= 0.0) {
            return Err(SnepError::InvalidConfig("eps must be >= 0".into()));
        }
        if self.n_outer == 0 || self.n_sync == 0 {
            return Err(SnepError::InvalidConfig(
                "n_outer and n_sync must be positive".into(),
            ));
        }
        if !(self.min_variance > 0.0) {
            return Err(SnepError::InvalidConfig("min_variance must be > 0".into()));
        }
        if let BetaMode::Fixed(b) = self.beta_mode {
            if !(b > 0.0) {
                return Err(SnepError::InvalidConfig("beta must be > 0".into()));
            }
        }
        if self.samples_per_iter == 0 {
            return Err(SnepError::InvalidConfig(
                "samples_per_iter must be positive".into(),
            ));
        }
        if !(self.site_init_variance > 0.0) {
            return Err(SnepError::InvalidConfig(
                "site_init_variance must be > 0".into(),
            ));
        }
        if let StepSchedule::InverseT { t0 } = self.schedule {
            if !(t0 > 0.0) {
                return Err(SnepError::InvalidConfig("t0 must be > 0".into()));
            }
        }
        Ok(())
    }

    /// Step size at worker iteration `t` (1-based).
    pub fn step_size(&self, t: u64) -> f64 {
        match self.schedule {
            StepSchedule::Constant => self.eps,
            StepSchedule::InverseT { t0 } => self.eps / (1.0 + t as f64 / t0),
        }
    }

    /// Per-site power for an experiment with `n_workers` workers.
    pub fn resolve_beta(&self, n_workers: usize) -> f64 {
        match self.beta_mode {
            BetaMode::Fixed(b) => b,
            BetaMode::OneOverWorkers => 1.0 / n_workers as f64,
        }
    }
}

/// One worker's likelihood-approximation state.
///
/// `lambda` always equals `∇A*(gamma)` when `gamma` is present. `gamma` is
/// absent exactly when a damped-EP update stored a non-normalisable factor
/// (negative-precision coordinates), which has no mean-parameter image.
#[derive(Debug, Clone)]
pub struct LikelihoodSite {
    pub worker_id: usize,
    gamma: Option<MeanParams>,
    lambda: NaturalParams,
    lambda_old: NaturalParams,
    theta_aux: NaturalParams,
    beta: f64,
}

impl LikelihoodSite {
    /// Build a site from an initial factor and auxiliary parameter.
    pub fn new(
        worker_id: usize,
        lambda: NaturalParams,
        theta_aux: NaturalParams,
        beta: f64,
    ) -> Result<Self, SnepError> {
        if !(beta > 0.0) {
            return Err(SnepError::InvalidConfig("beta must be > 0".into()));
        }
        if !theta_aux.in_natural_domain() {
            return Err(SnepError::InvalidConfig(
                "auxiliary parameter outside the natural domain".into(),
            ));
        }
        let gamma = if lambda.in_natural_domain() {
            Some(lambda.to_mean()?)
        } else {
            None
        };
        Ok(LikelihoodSite {
            worker_id,
            gamma,
            lambda_old: lambda.clone(),
            lambda,
            theta_aux,
            beta,
        })
    }

    /// The near-flat initial factor N(0, [`SITE_INIT_VARIANCE`]·I).
    pub fn initial_lambda(family: Family, dim: usize) -> NaturalParams {
        Self::initial_lambda_with(family, dim, SITE_INIT_VARIANCE)
    }

    /// The initial factor N(0, v·I) for a configured variance.
    pub fn initial_lambda_with(family: Family, dim: usize, v: f64) -> NaturalParams {
        NaturalParams::isotropic(family, dim, 0.0, v)
    }

    pub fn gamma(&self) -> Option<&MeanParams> {
        self.gamma.as_ref()
    }

    pub fn lambda(&self) -> &NaturalParams {
        &self.lambda
    }

    pub fn lambda_old(&self) -> &NaturalParams {
        &self.lambda_old
    }

    pub fn theta_aux(&self) -> &NaturalParams {
        &self.theta_aux
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    /// Record the current factor as the exchange baseline (λ_old ← λ).
    pub fn record_exchange(&mut self) {
        self.lambda_old = self.lambda.clone();
    }

    /// Natural parameters of the tilted base θ' − β⁻¹λ.
    pub fn tilted_base(&self) -> Result<NaturalParams, SnepError> {
        Ok(self.theta_aux.sub(&self.lambda.scale(1.0 / self.beta))?)
    }
}

/// The sampler's target: a valid Gaussian carrier plus the worker's true
/// likelihood raised to the power `tilt_power`.
#[derive(Debug, Clone)]
pub struct TiltedTarget {
    pub base: NaturalParams,
    pub tilt_power: f64,
    pub model: Arc<ModelSpec>,
    pub data: Arc<Dataset>,
    pub worker: usize,
}

impl TiltedTarget {
    /// Build a target from explicit parts; errors if the base is invalid.
    pub fn from_parts(
        base: NaturalParams,
        tilt_power: f64,
        model: Arc<ModelSpec>,
        data: Arc<Dataset>,
        worker: usize,
    ) -> Result<Self, SnepError> {
        if !base.in_natural_domain() {
            return Err(SnepError::TiltedInvalid);
        }
        if !(tilt_power >= 0.0) {
            return Err(SnepError::InvalidConfig("tilt_power must be >= 0".into()));
        }
        Ok(TiltedTarget {
            base,
            tilt_power,
            model,
            data,
            worker,
        })
    }

    pub fn shard(&self) -> &[u32] {
        self.data.shard_indices(self.worker)
    }

    /// Unnormalised log density and gradient using the full shard.
    pub fn logp_grad(&self, x: &[f64]) -> Result<(f64, Vec<f64>), SnepError> {
        let s = suff_stats(x, self.base.family());
        let carrier = s.into_mean_coords().pair(&self.base)?;
        let mut grad = self.base.carrier_gradient(x)?;
        let mut value = carrier;
        if self.tilt_power > 0.0 && !self.shard().is_empty() {
            let (lv, lg) = models::loglik_and_grad(&self.model, &self.data, self.shard(), x, None)?;
            value += self.tilt_power * lv;
            for (g, l) in grad.iter_mut().zip(lg) {
                *g += self.tilt_power * l;
            }
        }
        Ok((value, grad))
    }

    /// Stochastic drift: `∇s(x)ᵀbase + tilt_power·(|S|/|B|)·Σ_{c∈B} ∇log p(y_c|x)`.
    pub fn drift(&self, x: &[f64], batch: Option<&[u32]>) -> Result<Vec<f64>, SnepError> {
        let mut g = self.base.carrier_gradient(x)?;
        if self.tilt_power > 0.0 && !self.shard().is_empty() {
            let (_, lg) = models::loglik_and_grad(&self.model, &self.data, self.shard(), x, batch)?;
            for (gi, li) in g.iter_mut().zip(lg) {
                *gi += self.tilt_power * li;
            }
        }
        Ok(g)
    }
}

/// The sampler target of a SNEP site: base θ' − β⁻¹λ with tilt power β⁻¹.
pub fn tilted_target(
    site: &LikelihoodSite,
    model: Arc<ModelSpec>,
    data: Arc<Dataset>,
) -> Result<TiltedTarget, SnepError> {
    TiltedTarget::from_parts(
        site.tilted_base()?,
        1.0 / site.beta(),
        model,
        data,
        site.worker_id,
    )
}

/// Cavity θ_posterior − λ. The flag reports whether the result lies in the
/// natural domain; it is returned either way and callers decide.
pub fn cavity(
    theta_posterior: &NaturalParams,
    lambda: &NaturalParams,
) -> Result<(NaturalParams, bool), SnepError> {
    let c = theta_posterior.sub(lambda)?;
    let ok = c.in_natural_domain();
    Ok((c, ok))
}

/// Outcome of an inner (natural-gradient) update.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InnerOutcome {
    Applied { clamped: bool },
    /// The proposed γ left the mean domain; the site is unchanged.
    Rejected,
}

/// Stochastic natural-gradient inner update
/// `γ ← γ + ε·(stat − ∇A(θ_posterior))`, with λ resynchronised and the
/// variance floor applied.
///
/// `stat` is the sufficient-statistics estimate in mean coordinates (a single
/// `s(x)` or an average over the kernel's sub-steps).
pub fn inner_update(
    site: &LikelihoodSite,
    stat: &MeanParams,
    theta_posterior: &NaturalParams,
    eps: f64,
    min_variance: f64,
) -> Result<(LikelihoodSite, InnerOutcome), SnepError> {
    let gamma = site.gamma.as_ref().ok_or(SnepError::GammaUnavailable)?;
    let post_mean = theta_posterior.to_mean()?;
    let proposed = gamma.add(&stat.sub(&post_mean)?.scale(eps))?;
    if !proposed.in_mean_domain() {
        return Ok((site.clone(), InnerOutcome::Rejected));
    }
    // Proposals on the numerical boundary of the mean domain can pass the
    // membership check yet fail to convert (the implied covariance is too
    // ill-conditioned to factor); those are rejected like domain exits.
    let resynced = (|| {
        let lambda = proposed.to_natural().ok()?;
        let clamped = lambda.validate_and_clamp(min_variance);
        let was_clamped = clamped != lambda;
        let gamma_new = if was_clamped {
            clamped.to_mean().ok()?
        } else {
            proposed.clone()
        };
        Some((clamped, gamma_new, was_clamped))
    })();
    let Some((lambda, gamma_new, was_clamped)) = resynced else {
        return Ok((site.clone(), InnerOutcome::Rejected));
    };
    let mut next = site.clone();
    next.gamma = Some(gamma_new);
    next.lambda = lambda;
    Ok((next, InnerOutcome::Applied { clamped: was_clamped }))
}

/// Outcome of an outer (auxiliary) update.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OuterOutcome {
    Applied,
    /// cavity + λ fell outside the natural domain; θ' is unchanged.
    SkippedInvalid,
}

/// Outer update θ' ← cavity + λ.
pub fn outer_update(
    site: &LikelihoodSite,
    cavity_theta: &NaturalParams,
) -> Result<(LikelihoodSite, OuterOutcome), SnepError> {
    let aux = cavity_theta.add(&site.lambda)?;
    if !aux.in_natural_domain() {
        return Ok((site.clone(), OuterOutcome::SkippedInvalid));
    }
    let mut next = site.clone();
    next.theta_aux = aux;
    Ok((next, OuterOutcome::Applied))
}

/// Outcome of a damped-EP update.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DampedOutcome {
    Applied,
    /// The implied global posterior left the natural domain; discarded.
    Discarded,
}

/// Damped EP update `λ ← αλ + (1−α)(∇A*(tilted_mean) − cavity)`.
///
/// The update is discarded (site unchanged) if the implied global posterior
/// `cavity + λ_new` leaves the natural domain. The stored factor itself may
/// be non-normalisable, in which case γ becomes unavailable.
pub fn damped_ep_update(
    site: &LikelihoodSite,
    tilted_mean: &MeanParams,
    cavity_theta: &NaturalParams,
    alpha: f64,
) -> Result<(LikelihoodSite, DampedOutcome), SnepError> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(SnepError::InvalidConfig("alpha must lie in [0, 1]".into()));
    }
    let target = tilted_mean.to_natural()?.sub(cavity_theta)?;
    let lambda_new = site.lambda.scale(alpha).add(&target.scale(1.0 - alpha))?;
    let implied_posterior = cavity_theta.add(&lambda_new)?;
    if !implied_posterior.in_natural_domain() {
        return Ok((site.clone(), DampedOutcome::Discarded));
    }
    let mut next = site.clone();
    // γ is unavailable for non-normalisable (or numerically unconvertible)
    // factors.
    next.gamma = lambda_new.to_mean().ok();
    next.lambda = lambda_new;
    Ok((next, DampedOutcome::Applied))
}

/// Rolled single-loop update: the inner step with θ' pinned to the posterior.
///
/// `γ ← γ + ε·(exact_tilted_mean − ∇A(θ_posterior))`, followed by re-pinning
/// `θ' ← cavity + λ_new`. No variance floor is applied; intended for models
/// with exact tilted moments.
pub fn rolled_update_exact(
    site: &LikelihoodSite,
    cavity_theta: &NaturalParams,
    theta_posterior: &NaturalParams,
    exact_tilted_mean: &MeanParams,
    eps: f64,
) -> Result<(LikelihoodSite, InnerOutcome), SnepError> {
    let gamma = site.gamma.as_ref().ok_or(SnepError::GammaUnavailable)?;
    let post_mean = theta_posterior.to_mean()?;
    let proposed = gamma.add(&exact_tilted_mean.sub(&post_mean)?.scale(eps))?;
    if !proposed.in_mean_domain() {
        return Ok((site.clone(), InnerOutcome::Rejected));
    }
    let Ok(lambda) = proposed.to_natural() else {
        return Ok((site.clone(), InnerOutcome::Rejected));
    };
    let mut next = site.clone();
    let aux = cavity_theta.add(&lambda)?;
    if aux.in_natural_domain() {
        next.theta_aux = aux;
    }
    next.gamma = Some(proposed);
    next.lambda = lambda;
    Ok((next, InnerOutcome::Applied { clamped: false }))
}

/// Dual objective of the conjugate linear model and its per-site gradients.
///
/// Returns `L = A(θ₀ + Σλ_j) + Σ β_i(A_i(θ'_i − β_i⁻¹λ_i, β_i⁻¹) − A(θ'_i))`
/// with every local log-partition evaluated by the Gaussian product closed
/// form, and the gradients `∇A(θ_posterior) − tilted_mean_i`.
pub fn dual_objective_conjugate(
    theta0: &NaturalParams,
    sites: &[LikelihoodSite],
    model: &ModelSpec,
    data: &Dataset,
) -> Result<(f64, Vec<MeanParams>), SnepError> {
    if model.kind != ModelKind::LinearGaussian {
        return Err(SnepError::Model(ModelError::UnsupportedModel {
            expected: "linear-gaussian",
        }));
    }
    let mut theta_posterior = theta0.clone();
    for site in sites {
        theta_posterior = theta_posterior.add(&site.lambda)?;
    }
    let mut value = theta_posterior.log_partition()?;
    let post_mean = theta_posterior.to_mean()?;
    let mut grads = Vec::with_capacity(sites.len());
    for site in sites {
        let beta = site.beta();
        let base = site.tilted_base()?;
        if !base.in_natural_domain() {
            return Err(SnepError::TiltedInvalid);
        }
        let shard = data.shard_indices(site.worker_id);
        let tilted_a = models::linear_tilted_log_partition(model, data, shard, &base, 1.0 / beta)?;
        value += beta * (tilted_a - site.theta_aux.log_partition()?);
        let tilted_mean =
            models::exact_tilted_moments_linear(model, data, shard, &base, 1.0 / beta)?;
        grads.push(post_mean.sub(&tilted_mean)?);
    }
    Ok((value, grads))
}

/// Maximum moment mismatch `max_i ‖tilted_mean_i − ∇A(θ_posterior)‖_∞`; zero
/// exactly at an EP/SNEP fixed point.
pub fn fixed_point_residual(
    theta_posterior: &NaturalParams,
    tilted_means: &[MeanParams],
) -> Result<f64, SnepError> {
    let post_mean = theta_posterior.to_mean()?;
    let mut worst = 0.0_f64;
    for tm in tilted_means {
        worst = worst.max(tm.max_abs_diff(&post_mean)?);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{generate_linear_data, LinearShardFactor};

    fn diag(t1: f64, t2: f64) -> NaturalParams {
        NaturalParams::diag(vec![t1], vec![t2]).unwrap()
    }

    fn site_1d(lambda: NaturalParams, aux: NaturalParams, beta: f64) -> LikelihoodSite {
        LikelihoodSite::new(0, lambda, aux, beta).unwrap()
    }

    #[test]
    fn cavity_examples() {
        let (c, ok) = cavity(&diag(3.0, -2.0), &diag(1.0, -0.5)).unwrap();
        assert_eq!(c, diag(2.0, -1.5));
        assert!(ok);
        let post = diag(1.2, -0.7);
        let (c, ok) = cavity(&post, &NaturalParams::zero(Family::Diag, 1)).unwrap();
        assert_eq!(c, post);
        assert!(ok);
        let (c, ok) = cavity(&diag(0.0, -1.0), &diag(0.0, -2.0)).unwrap();
        assert_eq!(c, diag(0.0, 1.0));
        assert!(!ok);
    }

    #[test]
    fn tilted_base_arithmetic() {
        let s = site_1d(diag(1.0, -1.0), diag(2.0, -3.0), 1.0);
        assert_eq!(s.tilted_base().unwrap(), diag(1.0, -2.0));
        let s = site_1d(diag(0.0, -0.25), diag(0.0, -2.0), 0.25);
        assert_eq!(s.tilted_base().unwrap(), diag(0.0, -1.0));
        // tilt power is β⁻¹.
        assert!((1.0 / s.beta() - 4.0).abs() < 1e-15);
    }

    #[test]
    fn tilted_target_rejects_invalid_base() {
        let s = site_1d(diag(0.0, -2.0), diag(0.0, -1.0), 1.0);
        let model = Arc::new(ModelSpec::linear(1, Family::Diag, 10.0, 1.0));
        let mut d = generate_linear_data(4, 1, 0, 1.0);
        d.assign_shards(1, 0);
        let err = tilted_target(&s, model, Arc::new(d)).unwrap_err();
        assert!(matches!(err, SnepError::TiltedInvalid));
    }

    #[test]
    fn inner_update_zero_step_and_fixed_point() {
        let post = diag(0.5, -2.0);
        let site = site_1d(diag(0.1, -0.2), diag(1.0, -1.0), 1.0);
        let stat = MeanParams::diag(vec![1.0], vec![0.9]).unwrap();
        let (s2, out) = inner_update(&site, &stat, &post, 0.0, 0.01).unwrap();
        assert_eq!(out, InnerOutcome::Applied { clamped: false });
        assert_eq!(s2.lambda(), site.lambda());
        assert_eq!(s2.gamma().unwrap(), site.gamma().unwrap());

        // stat equal to the posterior mean leaves γ unchanged.
        let post_mean = post.to_mean().unwrap();
        let (s3, _) = inner_update(&site, &post_mean, &post, 0.3, 0.01).unwrap();
        assert!(s3.gamma().unwrap().max_abs_diff(site.gamma().unwrap()).unwrap() < 1e-15);
    }

    #[test]
    fn inner_update_arithmetic() {
        // γ=(0,0.5), stat=(1,0.5), posterior mean (0,0.5), ε=0.1 → γ'=(0.1,0.5).
        let lambda = MeanParams::diag(vec![0.0], vec![0.5]).unwrap().to_natural().unwrap();
        let site = site_1d(lambda, diag(0.0, -1.0), 1.0);
        let post = diag(0.0, -1.0); // mean (0, 0.5)
        let stat = MeanParams::diag(vec![1.0], vec![0.5]).unwrap();
        let (s2, _) = inner_update(&site, &stat, &post, 0.1, 1e-9).unwrap();
        let g = s2.gamma().unwrap();
        assert!((g.first_order()[0] - 0.1).abs() < 1e-15);
        assert!((g.second_order()[0] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn inner_update_rejects_mean_domain_exit() {
        let site = site_1d(diag(0.0, -1.0), diag(0.0, -1.0), 1.0);
        let post = diag(0.0, -1.0);
        // A statistic far below the current second moment drives σ² negative.
        let stat = MeanParams::diag(vec![0.0], vec![-100.0]).unwrap();
        let (s2, out) = inner_update(&site, &stat, &post, 1.0, 0.01).unwrap();
        assert_eq!(out, InnerOutcome::Rejected);
        assert_eq!(s2.lambda(), site.lambda());
    }

    #[test]
    fn inner_update_applies_variance_floor() {
        let site = site_1d(diag(0.0, -1.0), diag(0.0, -1.0), 1.0);
        let post = diag(0.0, -1.0);
        // Tiny variance statistic: γ collapses, λ precision explodes, clamp fires.
        let gamma = site.gamma().unwrap();
        let tight = MeanParams::diag(
            vec![gamma.first_order()[0]],
            vec![0.5 * gamma.first_order()[0].powi(2) + 1e-6],
        )
        .unwrap();
        let (s2, out) = inner_update(&site, &tight, &post, 1.0, 0.01).unwrap();
        assert_eq!(out, InnerOutcome::Applied { clamped: true });
        assert!(s2.lambda().second_order()[0] >= -100.0 - 1e-12);
        // λ and γ stay synchronised after clamping.
        let resync = s2.gamma().unwrap().to_natural().unwrap();
        assert!((resync.second_order()[0] - s2.lambda().second_order()[0]).abs() < 1e-10);
    }

    #[test]
    fn outer_update_examples() {
        let site = site_1d(diag(1.0, -0.5), diag(0.0, -1.0), 1.0);
        let (s2, out) = outer_update(&site, &diag(2.0, -1.5)).unwrap();
        assert_eq!(out, OuterOutcome::Applied);
        assert_eq!(s2.theta_aux(), &diag(3.0, -2.0));

        let zero = LikelihoodSite::new(
            0,
            NaturalParams::zero(Family::Diag, 1),
            diag(0.0, -1.0),
            1.0,
        )
        .unwrap();
        let (s3, _) = outer_update(&zero, &diag(2.0, -1.5)).unwrap();
        assert_eq!(s3.theta_aux(), &diag(2.0, -1.5));

        let bad = site_1d(diag(0.0, 2.0), diag(0.0, -1.0), 1.0);
        let (s4, out) = outer_update(&bad, &diag(0.0, -1.0)).unwrap();
        assert_eq!(out, OuterOutcome::SkippedInvalid);
        assert_eq!(s4.theta_aux(), bad.theta_aux());
    }

    #[test]
    fn damped_update_examples() {
        let cav = diag(0.0, -1.0);
        let site = site_1d(diag(0.0, -1.0), diag(0.0, -2.0), 1.0);
        // α = 1 is the full-damping diagnostic: no change.
        let tilted = diag(2.0, -4.0).to_mean().unwrap();
        let (s2, out) = damped_ep_update(&site, &tilted, &cav, 1.0).unwrap();
        assert_eq!(out, DampedOutcome::Applied);
        assert_eq!(s2.lambda(), site.lambda());
        // α = 0.5 with target (2,−3): λ' = (1,−2).
        let (s3, _) = damped_ep_update(&site, &tilted, &cav, 0.5).unwrap();
        assert!((s3.lambda().first_order()[0] - 1.0).abs() < 1e-12);
        assert!((s3.lambda().second_order()[0] + 2.0).abs() < 1e-12);
    }

    #[test]
    fn damped_update_conjugate_one_step() {
        // With exact tilted moments and α = 0, one update recovers the exact
        // likelihood factor of the shard.
        let model = ModelSpec::linear(1, Family::Diag, 1.0, 1.0);
        let mut data = generate_linear_data(8, 1, 3, 1.0);
        data.assign_shards(1, 3);
        let shard: Vec<u32> = data.shard_indices(0).to_vec();
        let cav = model.prior.clone();
        let site = site_1d(
            LikelihoodSite::initial_lambda(Family::Diag, 1),
            cav.clone(),
            1.0,
        );
        let tilted = models::exact_tilted_moments_linear(&model, &data, &shard, &cav, 1.0).unwrap();
        let (s2, out) = damped_ep_update(&site, &tilted, &cav, 0.0).unwrap();
        assert_eq!(out, DampedOutcome::Applied);
        let exact = LinearShardFactor::compute(&model, &data, &shard).unwrap();
        assert!((s2.lambda().first_order()[0] - exact.zty_over_s2[0]).abs() < 1e-9);
        assert!((s2.lambda().second_order()[0] + exact.ztz_over_s2[0]).abs() < 1e-9);
    }

    #[test]
    fn damped_update_discards_invalid_posterior() {
        // A non-normalisable stored factor exceeding the cavity precision: the
        // damped combination of (cavity + λ) and the tilted naturals leaves
        // the natural domain, so the update must be discarded.
        let cav = diag(0.0, -1.0);
        let site = site_1d(diag(0.0, 1.5), diag(0.0, -2.0), 1.0);
        assert!(site.gamma().is_none());
        let tilted = diag(0.0, -0.4).to_mean().unwrap();
        let (s2, out) = damped_ep_update(&site, &tilted, &cav, 0.5).unwrap();
        assert_eq!(out, DampedOutcome::Discarded);
        assert_eq!(s2.lambda(), site.lambda());
    }

    #[test]
    fn rolled_update_degenerate_cases() {
        let model = ModelSpec::linear(1, Family::Diag, 1.0, 1.0);
        let mut data = generate_linear_data(6, 1, 4, 1.0);
        data.assign_shards(1, 4);
        let cav = model.prior.clone();
        let site = site_1d(
            LikelihoodSite::initial_lambda(Family::Diag, 1),
            cav.clone(),
            1.0,
        );
        let post = cav.add(site.lambda()).unwrap();
        let post_mean = post.to_mean().unwrap();
        let (s2, _) = rolled_update_exact(&site, &cav, &post, &post_mean, 0.5).unwrap();
        assert!(s2.gamma().unwrap().max_abs_diff(site.gamma().unwrap()).unwrap() < 1e-12);
        let other = MeanParams::diag(vec![1.0], vec![1.0]).unwrap();
        let (s3, _) = rolled_update_exact(&site, &cav, &post, &other, 0.0).unwrap();
        assert!(s3.gamma().unwrap().max_abs_diff(site.gamma().unwrap()).unwrap() < 1e-15);
    }

    #[test]
    fn rolled_update_converges_to_exact_factor() {
        let model = ModelSpec::linear(1, Family::Diag, 1.0, 1.0);
        let mut data = generate_linear_data(12, 1, 5, 1.0);
        data.assign_shards(1, 5);
        let shard: Vec<u32> = data.shard_indices(0).to_vec();
        let theta0 = model.prior.clone();
        let mut site = site_1d(
            LikelihoodSite::initial_lambda(Family::Diag, 1),
            theta0.add(&LikelihoodSite::initial_lambda(Family::Diag, 1)).unwrap(),
            1.0,
        );
        // The near-flat initial factor is far from the fixed point in mean
        // coordinates, so the drain takes tens of thousands of iterations.
        let factor = LinearShardFactor::compute(&model, &data, &shard).unwrap();
        for iter in 0..200_000u64 {
            let post = theta0.add(site.lambda()).unwrap();
            let (cav, _) = cavity(&post, site.lambda()).unwrap();
            let base = site.tilted_base().unwrap();
            let tilted = factor.tilted_moments(&base, 1.0).unwrap();
            let (next, out) = rolled_update_exact(&site, &cav, &post, &tilted, 0.5).unwrap();
            assert!(matches!(out, InnerOutcome::Applied { .. }));
            let moved = next
                .gamma()
                .unwrap()
                .max_abs_diff(site.gamma().unwrap())
                .unwrap();
            site = next;
            if moved < 1e-13 && iter > 10 {
                break;
            }
        }
        let exact = LinearShardFactor::compute(&model, &data, &shard).unwrap();
        assert!(
            (site.lambda().first_order()[0] - exact.zty_over_s2[0]).abs() < 1e-8,
            "first order {} vs {}",
            site.lambda().first_order()[0],
            exact.zty_over_s2[0]
        );
        assert!((site.lambda().second_order()[0] + exact.ztz_over_s2[0]).abs() < 1e-8);

        // At the converged fixed point the dual gradients vanish.
        let (_, grads) =
            dual_objective_conjugate(&theta0, std::slice::from_ref(&site), &model, &data).unwrap();
        let post = theta0.add(site.lambda()).unwrap();
        let tilted = models::exact_tilted_moments_linear(
            &model,
            &data,
            &shard,
            &site.tilted_base().unwrap(),
            1.0,
        )
        .unwrap();
        assert!(fixed_point_residual(&post, &[tilted]).unwrap() < 1e-8);
        for g in grads {
            assert!(g.first_order()[0].abs() < 1e-8);
            assert!(g.second_order()[0].abs() < 1e-8);
        }
    }

    #[test]
    fn dual_objective_zero_sites() {
        let model = ModelSpec::linear(1, Family::Diag, 2.0, 1.0);
        let data = generate_linear_data(4, 1, 6, 1.0);
        let theta0 = model.prior.clone();
        let (value, grads) = dual_objective_conjugate(&theta0, &[], &model, &data).unwrap();
        assert_eq!(grads.len(), 0);
        assert!((value - theta0.log_partition().unwrap()).abs() < 1e-12);
    }

    #[test]
    fn residual_examples() {
        let post = diag(0.0, -1.0); // mean (0, 0.5)
        let pm = post.to_mean().unwrap();
        assert_eq!(fixed_point_residual(&post, &[pm.clone(), pm.clone()]).unwrap(), 0.0);
        let tm = MeanParams::diag(vec![1.0], vec![1.0]).unwrap();
        assert_eq!(fixed_point_residual(&post, &[tm]).unwrap(), 1.0);
    }

    #[test]
    fn natural_gradient_matches_fisher_preconditioned_euclidean() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(21);
        for _ in 0..100 {
            let d = rng.gen_range(1..=4);
            let gamma = {
                let m1: Vec<f64> = (0..d).map(|_| rng.gen_range(-2.0..2.0)).collect();
                let m2: Vec<f64> = m1
                    .iter()
                    .map(|&u| 0.5 * (u * u + rng.gen_range(0.05..5.0)))
                    .collect();
                MeanParams::diag(m1, m2).unwrap()
            };
            let post = NaturalParams::diag(
                (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect(),
                (0..d).map(|_| -rng.gen_range(0.2..3.0)).collect(),
            )
            .unwrap();
            let tilted = {
                let m1: Vec<f64> = (0..d).map(|_| rng.gen_range(-2.0..2.0)).collect();
                let m2: Vec<f64> = m1
                    .iter()
                    .map(|&u| 0.5 * (u * u + rng.gen_range(0.05..5.0)))
                    .collect();
                MeanParams::diag(m1, m2).unwrap()
            };
            let site = LikelihoodSite::new(
                0,
                gamma.to_natural().unwrap(),
                NaturalParams::isotropic(Family::Diag, d, 0.0, 1.0),
                1.0,
            )
            .unwrap();
            let eps = 1e-3;
            let (next, out) = inner_update(&site, &tilted, &post, eps, 1e-12).unwrap();
            assert!(matches!(out, InnerOutcome::Applied { .. }));

            // Euclidean gradient of the dual in γ (per-dimension 2×2 Fisher
            // blocks), then preconditioned by the inverse Fisher metric.
            let post_mean = post.to_mean().unwrap();
            for j in 0..d {
                let u = gamma.first_order()[j];
                let var = 2.0 * gamma.second_order()[j] - u * u;
                let g11 = (var + 2.0 * u * u) / (var * var);
                let g12 = -2.0 * u / (var * var);
                let g22 = 2.0 / (var * var);
                let d1 = post_mean.first_order()[j] - tilted.first_order()[j];
                let d2 = post_mean.second_order()[j] - tilted.second_order()[j];
                let e1 = g11 * d1 + g12 * d2;
                let e2 = g12 * d1 + g22 * d2;
                let det = g11 * g22 - g12 * g12;
                let n1 = (g22 * e1 - g12 * e2) / det;
                let n2 = (-g12 * e1 + g11 * e2) / det;
                // inner_update steps by −ε·(fisher⁻¹·euclidean).
                let step1 = (next.gamma().unwrap().first_order()[j] - gamma.first_order()[j]) / eps;
                let step2 =
                    (next.gamma().unwrap().second_order()[j] - gamma.second_order()[j]) / eps;
                assert!((step1 + n1).abs() <= 1e-8 * n1.abs().max(1.0), "{step1} {n1}");
                assert!((step2 + n2).abs() <= 1e-8 * n2.abs().max(1.0), "{step2} {n2}");
            }
        }
    }
}
