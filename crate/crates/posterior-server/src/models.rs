//! Likelihood models and data.
//!
//! Two models are provided: Bayesian logistic regression with a synthetic
//! data generator, and a conjugate Gaussian linear model whose posterior and
//! tilted moments have closed forms. The linear model exists to serve as an
//! exactness oracle for the inference machinery; the logistic model is the
//! benchmark problem.
//!
//! Datasets are immutable after generation. Each worker reads only its shard,
//! identified through [`Dataset::shard_indices`].

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::expfam::{Family, MeanParams, NaturalParams};
use crate::linalg;

/// Logits are clamped to this magnitude before exponentiation.
pub const LOGIT_CLAMP: f64 = 35.0;

const DATASET_MAGIC: &[u8; 4] = b"PSDS";
const DATASET_VERSION: u8 = 1;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("operation requires the {expected} model")]
    UnsupportedModel { expected: &'static str },
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("combined precision is not positive definite")]
    InvalidCombinedPrecision,
    #[error("posterior is not representable in the diagonal family")]
    NonDiagonalPosterior,
    #[error(transparent)]
    ExpFam(#[from] crate::expfam::ExpFamError),
    #[error("dataset file: {0}")]
    BadDatasetFile(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Which likelihood the experiment uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelKind {
    Logistic,
    LinearGaussian,
}

impl ModelKind {
    fn code(self) -> u8 {
        match self {
            ModelKind::Logistic => 1,
            ModelKind::LinearGaussian => 2,
        }
    }

    fn from_code(c: u8) -> Option<Self> {
        match c {
            1 => Some(ModelKind::Logistic),
            2 => Some(ModelKind::LinearGaussian),
            _ => None,
        }
    }
}

/// Model definition: likelihood kind, parameter dimension, prior θ₀ and (for
/// the linear model) the observation noise variance.
#[derive(Debug, Clone)]
pub struct ModelSpec {
    pub kind: ModelKind,
    pub dim: usize,
    pub prior: NaturalParams,
    pub noise_variance: f64,
}

impl ModelSpec {
    /// Logistic regression with prior N(0, prior_variance·I).
    pub fn logistic(dim: usize, family: Family, prior_variance: f64) -> Self {
        ModelSpec {
            kind: ModelKind::Logistic,
            dim,
            prior: NaturalParams::isotropic(family, dim, 0.0, prior_variance),
            noise_variance: 1.0,
        }
    }

    /// Gaussian linear model with prior N(0, prior_variance·I).
    pub fn linear(dim: usize, family: Family, prior_variance: f64, noise_variance: f64) -> Self {
        assert!(noise_variance > 0.0);
        ModelSpec {
            kind: ModelKind::LinearGaussian,
            dim,
            prior: NaturalParams::isotropic(family, dim, 0.0, prior_variance),
            noise_variance,
        }
    }

    pub fn family(&self) -> Family {
        self.prior.family()
    }
}

/// Generator metadata recorded alongside a synthetic dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetMeta {
    pub seed: u64,
    pub mu: Vec<f64>,
    /// Row-major d×d mixing matrix; covariate covariance is P Pᵀ.
    pub p: Vec<f64>,
    pub x_star: Vec<f64>,
    pub noise_variance: f64,
}

/// An immutable dataset plus its shard assignment.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub kind: ModelKind,
    pub n: usize,
    pub dim: usize,
    covariates: Vec<f64>,
    responses: Vec<f64>,
    /// Data index → owning worker. Empty until [`Dataset::assign_shards`].
    pub shard_assignment: Vec<usize>,
    shards: Vec<Vec<u32>>,
    pub meta: DatasetMeta,
}

impl Dataset {
    pub fn covariate(&self, c: usize) -> &[f64] {
        &self.covariates[c * self.dim..(c + 1) * self.dim]
    }

    pub fn response(&self, c: usize) -> f64 {
        self.responses[c]
    }

    pub fn responses(&self) -> &[f64] {
        &self.responses
    }

    pub fn n_workers(&self) -> usize {
        self.shards.len()
    }

    pub fn shard_indices(&self, worker: usize) -> &[u32] {
        &self.shards[worker]
    }

    /// Partition the data into contiguous equal-size blocks of a seeded
    /// shuffle of the indices. Shards are disjoint and cover everything.
    pub fn assign_shards(&mut self, n_workers: usize, seed: u64) {
        assert!(n_workers >= 1);
        let mut order: Vec<u32> = (0..self.n as u32).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(0x53_48_52_44); // shard-assignment stream
        order.shuffle(&mut rng);
        let base = self.n / n_workers;
        let extra = self.n % n_workers;
        let mut shards = Vec::with_capacity(n_workers);
        let mut assignment = vec![0usize; self.n];
        let mut at = 0usize;
        for w in 0..n_workers {
            let len = base + if w < extra { 1 } else { 0 };
            let shard: Vec<u32> = order[at..at + len].to_vec();
            for &c in &shard {
                assignment[c as usize] = w;
            }
            shards.push(shard);
            at += len;
        }
        self.shards = shards;
        self.shard_assignment = assignment;
    }
}

/// Synthetic-data generator: covariates z_c ~ N(μ, PPᵀ) with μ ~ U[0,1]^d and
/// P ~ U[−1,1]^{d×d}, generating weights x* ~ N(0, prior_variance·I).
///
/// The overrides replace the drawn μ/P/x* without changing the draw sequence,
/// so overridden and plain datasets share all other randomness.
#[derive(Debug, Clone)]
pub struct DataGenerator {
    pub kind: ModelKind,
    pub n: usize,
    pub dim: usize,
    pub seed: u64,
    pub prior_variance: f64,
    pub noise_variance: f64,
    pub x_star_override: Option<Vec<f64>>,
    pub p_override: Option<Vec<f64>>,
}

impl DataGenerator {
    pub fn new(kind: ModelKind, n: usize, dim: usize, seed: u64) -> Self {
        DataGenerator {
            kind,
            n,
            dim,
            seed,
            prior_variance: 10.0,
            noise_variance: 1.0,
            x_star_override: None,
            p_override: None,
        }
    }

    pub fn generate(&self) -> Dataset {
        let d = self.dim;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let mu: Vec<f64> = (0..d).map(|_| rng.gen_range(0.0..1.0)).collect();
        let mut p: Vec<f64> = (0..d * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut x_star: Vec<f64> = (0..d)
            .map(|_| crate::expfam::standard_normal(&mut rng) * self.prior_variance.sqrt())
            .collect();
        if let Some(ovr) = &self.p_override {
            assert_eq!(ovr.len(), d * d);
            p = ovr.clone();
        }
        if let Some(ovr) = &self.x_star_override {
            assert_eq!(ovr.len(), d);
            x_star = ovr.clone();
        }
        let mut covariates = Vec::with_capacity(self.n * d);
        let mut responses = Vec::with_capacity(self.n);
        for _ in 0..self.n {
            let w: Vec<f64> = (0..d)
                .map(|_| crate::expfam::standard_normal(&mut rng))
                .collect();
            let mut z = mu.clone();
            for i in 0..d {
                for j in 0..d {
                    z[i] += p[i * d + j] * w[j];
                }
            }
            let t = linalg::dot(&z, &x_star);
            let y = match self.kind {
                ModelKind::Logistic => {
                    let prob = sigmoid(t);
                    if rng.gen::<f64>() < prob {
                        1.0
                    } else {
                        0.0
                    }
                }
                ModelKind::LinearGaussian => {
                    t + crate::expfam::standard_normal(&mut rng) * self.noise_variance.sqrt()
                }
            };
            covariates.extend_from_slice(&z);
            responses.push(y);
        }
        Dataset {
            kind: self.kind,
            n: self.n,
            dim: d,
            covariates,
            responses,
            shard_assignment: Vec::new(),
            shards: Vec::new(),
            meta: DatasetMeta {
                seed: self.seed,
                mu,
                p,
                x_star,
                noise_variance: self.noise_variance,
            },
        }
    }
}

/// Logistic dataset with the default recipe.
pub fn generate_logistic_data(n_points: usize, dim: usize, seed: u64) -> Dataset {
    DataGenerator::new(ModelKind::Logistic, n_points, dim, seed).generate()
}

/// Linear-Gaussian dataset with the same covariate recipe.
pub fn generate_linear_data(n_points: usize, dim: usize, seed: u64, noise_variance: f64) -> Dataset {
    let mut g = DataGenerator::new(ModelKind::LinearGaussian, n_points, dim, seed);
    g.noise_variance = noise_variance;
    g.generate()
}

/// Logistic function with clamped input.
pub fn sigmoid(t: f64) -> f64 {
    let t = t.clamp(-LOGIT_CLAMP, LOGIT_CLAMP);
    1.0 / (1.0 + (-t).exp())
}

/// log σ(t), computed in log1p form.
fn log_sigmoid(t: f64) -> f64 {
    let t = t.clamp(-LOGIT_CLAMP, LOGIT_CLAMP);
    if t >= 0.0 {
        -(-t).exp().ln_1p()
    } else {
        t - t.exp().ln_1p()
    }
}

/// Shard log likelihood and gradient at `x`.
///
/// `batch` selects a minibatch by dataset index (must come from the shard);
/// both value and gradient are then scaled by `|S|/|B|`, making them unbiased
/// estimates of the full-shard quantities. `None` means the full shard.
pub fn loglik_and_grad(
    model: &ModelSpec,
    data: &Dataset,
    shard: &[u32],
    x: &[f64],
    batch: Option<&[u32]>,
) -> Result<(f64, Vec<f64>), ModelError> {
    if x.len() != model.dim {
        return Err(ModelError::DimensionMismatch {
            expected: model.dim,
            got: x.len(),
        });
    }
    let (indices, scale) = match batch {
        Some(b) => (b, shard.len() as f64 / b.len() as f64),
        None => (shard, 1.0),
    };
    let mut value = 0.0;
    let mut grad = vec![0.0; model.dim];
    match model.kind {
        ModelKind::Logistic => {
            for &c in indices {
                let z = data.covariate(c as usize);
                let y = data.response(c as usize);
                let t = linalg::dot(z, x);
                value += y * log_sigmoid(t) + (1.0 - y) * log_sigmoid(-t);
                let r = y - sigmoid(t);
                for (g, &zj) in grad.iter_mut().zip(z) {
                    *g += r * zj;
                }
            }
        }
        ModelKind::LinearGaussian => {
            let s2 = model.noise_variance;
            let ln_norm = 0.5 * (2.0 * std::f64::consts::PI * s2).ln();
            for &c in indices {
                let z = data.covariate(c as usize);
                let y = data.response(c as usize);
                let r = y - linalg::dot(z, x);
                value += -0.5 * r * r / s2 - ln_norm;
                for (g, &zj) in grad.iter_mut().zip(z) {
                    *g += r * zj / s2;
                }
            }
        }
    }
    if scale != 1.0 {
        value *= scale;
        for g in &mut grad {
            *g *= scale;
        }
    }
    Ok((value, grad))
}

/// σ(z_cᵀx) for every covariate row.
pub fn predict_probs(x: &[f64], data: &Dataset) -> Vec<f64> {
    (0..data.n)
        .map(|c| sigmoid(linalg::dot(data.covariate(c), x)))
        .collect()
}

/// Hessian of the shard log likelihood at `x`, row-major d×d.
/// Logistic: `−Σ σ'(t_c) z_c z_cᵀ`; linear: `−ZᵀZ/σ²`.
pub fn loglik_hessian(
    model: &ModelSpec,
    data: &Dataset,
    shard: &[u32],
    x: &[f64],
) -> Result<Vec<f64>, ModelError> {
    if x.len() != model.dim {
        return Err(ModelError::DimensionMismatch {
            expected: model.dim,
            got: x.len(),
        });
    }
    let d = model.dim;
    let mut h = vec![0.0; d * d];
    for &c in shard {
        let z = data.covariate(c as usize);
        let w = match model.kind {
            ModelKind::Logistic => {
                let p = sigmoid(linalg::dot(z, x));
                p * (1.0 - p)
            }
            ModelKind::LinearGaussian => 1.0 / model.noise_variance,
        };
        for i in 0..d {
            for j in 0..d {
                h[i * d + j] -= w * z[i] * z[j];
            }
        }
    }
    Ok(h)
}

/// Likelihood statistics of a shard of the linear model: the natural-parameter
/// contribution `(Zᵀy/σ², −ZᵀZ/σ²)` per unit power, and the x-independent
/// log-density constant.
pub struct LinearShardFactor {
    pub zty_over_s2: Vec<f64>,
    /// Row-major d×d, already divided by σ².
    pub ztz_over_s2: Vec<f64>,
    /// `−Σ y²/(2σ²) − (|S|/2)·ln(2πσ²)`.
    pub log_const: f64,
}

impl LinearShardFactor {
    pub fn compute(model: &ModelSpec, data: &Dataset, shard: &[u32]) -> Result<Self, ModelError> {
        if model.kind != ModelKind::LinearGaussian {
            return Err(ModelError::UnsupportedModel {
                expected: "linear-gaussian",
            });
        }
        let d = model.dim;
        let s2 = model.noise_variance;
        let mut zty = vec![0.0; d];
        let mut ztz = vec![0.0; d * d];
        let mut yty = 0.0;
        for &c in shard {
            let z = data.covariate(c as usize);
            let y = data.response(c as usize);
            yty += y * y;
            for i in 0..d {
                zty[i] += z[i] * y;
                for j in 0..d {
                    ztz[i * d + j] += z[i] * z[j];
                }
            }
        }
        for v in &mut zty {
            *v /= s2;
        }
        for v in &mut ztz {
            *v /= s2;
        }
        let log_const = -0.5 * yty / s2
            - 0.5 * shard.len() as f64 * (2.0 * std::f64::consts::PI * s2).ln();
        Ok(LinearShardFactor {
            zty_over_s2: zty,
            ztz_over_s2: ztz,
            log_const,
        })
    }

    /// The factor as full-family natural parameters at unit power.
    pub fn natural(&self) -> NaturalParams {
        let neg: Vec<f64> = self.ztz_over_s2.iter().map(|&v| -v).collect();
        NaturalParams::full(self.zty_over_s2.clone(), neg).expect("symmetric by construction")
    }

    /// Mean parameters of `exp(baseᵀs(x) + tilt_power·ℓ(x))` normalised, in
    /// the base's family.
    pub fn tilted_moments(
        &self,
        base: &NaturalParams,
        tilt_power: f64,
    ) -> Result<MeanParams, ModelError> {
        let combined = embed_full(base).add(&self.natural().scale(tilt_power))?;
        if !combined.in_natural_domain() {
            return Err(ModelError::InvalidCombinedPrecision);
        }
        let full_mean = combined.to_mean()?;
        match base.family() {
            Family::Full => Ok(full_mean),
            Family::Diag => {
                let d = base.dim();
                let m2 = full_mean.second_order();
                let diag: Vec<f64> = (0..d).map(|j| m2[j * d + j]).collect();
                Ok(MeanParams::diag(full_mean.first_order().to_vec(), diag)?)
            }
        }
    }

    /// `log ∫ exp(θᵀs(x) + η·ℓ(x)) dx` by the Gaussian product closed form.
    pub fn tilted_log_partition(&self, theta: &NaturalParams, eta: f64) -> Result<f64, ModelError> {
        let combined = embed_full(theta).add(&self.natural().scale(eta))?;
        if !combined.in_natural_domain() {
            return Err(ModelError::InvalidCombinedPrecision);
        }
        Ok(combined.log_partition()? + eta * self.log_const)
    }
}

/// Embed a diagonal-family natural parameter into the full family.
pub fn embed_full(theta: &NaturalParams) -> NaturalParams {
    match theta.family() {
        Family::Full => theta.clone(),
        Family::Diag => {
            let d = theta.dim();
            let mut m = vec![0.0; d * d];
            for j in 0..d {
                m[j * d + j] = theta.second_order()[j];
            }
            NaturalParams::full(theta.first_order().to_vec(), m).expect("diagonal is symmetric")
        }
    }
}

/// Exact posterior of the linear model over all data, in the prior's family.
///
/// Precision is `prior_precision + σ⁻²ZᵀZ` and the first-order block is
/// `prior_first + σ⁻²Zᵀy`. A diagonal-family prior requires the posterior
/// precision to be diagonal (e.g. d = 1 or an orthogonal design).
pub fn exact_linear_posterior(model: &ModelSpec, data: &Dataset) -> Result<NaturalParams, ModelError> {
    if model.kind != ModelKind::LinearGaussian {
        return Err(ModelError::UnsupportedModel {
            expected: "linear-gaussian",
        });
    }
    let d = model.dim;
    let all: Vec<u32> = (0..data.n as u32).collect();
    let factor = LinearShardFactor::compute(model, data, &all)?;
    let full_post = embed_full(&model.prior).add(&factor.natural())?;
    match model.family() {
        Family::Full => Ok(full_post),
        Family::Diag => {
            let m = full_post.second_order();
            let scale = m.iter().fold(0.0_f64, |a, &v| a.max(v.abs())).max(1.0);
            for i in 0..d {
                for j in 0..d {
                    if i != j && m[i * d + j].abs() > 1e-12 * scale {
                        return Err(ModelError::NonDiagonalPosterior);
                    }
                }
            }
            let diag: Vec<f64> = (0..d).map(|j| m[j * d + j]).collect();
            Ok(NaturalParams::diag(full_post.first_order().to_vec(), diag)?)
        }
    }
}

/// Mean parameters of the normalised tilted density
/// `exp(baseᵀs(x) + tilt_power·ℓ_shard(x))` for the linear model, in the
/// base's family.
pub fn exact_tilted_moments_linear(
    model: &ModelSpec,
    data: &Dataset,
    shard: &[u32],
    base: &NaturalParams,
    tilt_power: f64,
) -> Result<MeanParams, ModelError> {
    if model.kind != ModelKind::LinearGaussian {
        return Err(ModelError::UnsupportedModel {
            expected: "linear-gaussian",
        });
    }
    LinearShardFactor::compute(model, data, shard)?.tilted_moments(base, tilt_power)
}

/// Log-partition `A_i(theta, eta)` of the locally extended linear family:
/// `log ∫ exp(θᵀs(x) + η·ℓ_shard(x)) dx`, via the Gaussian product closed form.
pub fn linear_tilted_log_partition(
    model: &ModelSpec,
    data: &Dataset,
    shard: &[u32],
    theta: &NaturalParams,
    eta: f64,
) -> Result<f64, ModelError> {
    LinearShardFactor::compute(model, data, shard)?.tilted_log_partition(theta, eta)
}

fn write_f64s(w: &mut impl Write, vals: &[f64]) -> std::io::Result<()> {
    for v in vals {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn read_f64s(r: &mut impl Read, n: usize) -> Result<Vec<f64>, ModelError> {
    let mut buf = vec![0u8; n * 8];
    r.read_exact(&mut buf)
        .map_err(|_| ModelError::BadDatasetFile("truncated float block".into()))?;
    Ok(buf
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect())
}

/// Persist a dataset in the flat binary format.
pub fn save_dataset(data: &Dataset, path: &Path) -> Result<(), ModelError> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(DATASET_MAGIC)?;
    w.write_all(&[DATASET_VERSION, data.kind.code()])?;
    w.write_all(&(data.n as u64).to_le_bytes())?;
    w.write_all(&(data.dim as u64).to_le_bytes())?;
    w.write_all(&data.meta.seed.to_le_bytes())?;
    write_f64s(&mut w, &data.covariates)?;
    write_f64s(&mut w, &data.responses)?;
    write_f64s(&mut w, &data.meta.mu)?;
    write_f64s(&mut w, &data.meta.p)?;
    write_f64s(&mut w, &data.meta.x_star)?;
    write_f64s(&mut w, &[data.meta.noise_variance])?;
    w.flush()?;
    Ok(())
}

/// Load a dataset persisted by [`save_dataset`]. Shards are not stored; call
/// [`Dataset::assign_shards`] after loading.
pub fn load_dataset(path: &Path) -> Result<Dataset, ModelError> {
    let mut r = BufReader::new(File::open(path)?);
    let mut head = [0u8; 6];
    r.read_exact(&mut head)
        .map_err(|_| ModelError::BadDatasetFile("truncated header".into()))?;
    if &head[..4] != DATASET_MAGIC {
        return Err(ModelError::BadDatasetFile("bad magic".into()));
    }
    if head[4] != DATASET_VERSION {
        return Err(ModelError::BadDatasetFile(format!(
            "unsupported version {}",
            head[4]
        )));
    }
    let kind = ModelKind::from_code(head[5])
        .ok_or_else(|| ModelError::BadDatasetFile(format!("unknown kind {}", head[5])))?;
    let mut u64buf = [0u8; 8];
    let mut read_u64 = |r: &mut BufReader<File>| -> Result<u64, ModelError> {
        r.read_exact(&mut u64buf)
            .map_err(|_| ModelError::BadDatasetFile("truncated header".into()))?;
        Ok(u64::from_le_bytes(u64buf))
    };
    let n = read_u64(&mut r)? as usize;
    let d = read_u64(&mut r)? as usize;
    let seed = read_u64(&mut r)?;
    let covariates = read_f64s(&mut r, n * d)?;
    let responses = read_f64s(&mut r, n)?;
    let mu = read_f64s(&mut r, d)?;
    let p = read_f64s(&mut r, d * d)?;
    let x_star = read_f64s(&mut r, d)?;
    let noise_variance = read_f64s(&mut r, 1)?[0];
    Ok(Dataset {
        kind,
        n,
        dim: d,
        covariates,
        responses,
        shard_assignment: Vec::new(),
        shards: Vec::new(),
        meta: DatasetMeta {
            seed,
            mu,
            p,
            x_star,
            noise_variance,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_point_dataset(z: Vec<f64>, y: f64, kind: ModelKind) -> Dataset {
        let d = z.len();
        Dataset {
            kind,
            n: 1,
            dim: d,
            covariates: z,
            responses: vec![y],
            shard_assignment: vec![0],
            shards: vec![vec![0]],
            meta: DatasetMeta {
                seed: 0,
                mu: vec![0.0; d],
                p: vec![0.0; d * d],
                x_star: vec![0.0; d],
                noise_variance: 1.0,
            },
        }
    }

    #[test]
    fn logistic_loglik_at_origin() {
        let model = ModelSpec::logistic(2, Family::Diag, 10.0);
        let data = one_point_dataset(vec![3.0, -1.0], 1.0, ModelKind::Logistic);
        let (v, g) = loglik_and_grad(&model, &data, &[0], &[0.0, 0.0], None).unwrap();
        assert!((v + std::f64::consts::LN_2).abs() < 1e-12);
        assert!((g[0] - 1.5).abs() < 1e-12);
        assert!((g[1] + 0.5).abs() < 1e-12);
    }

    #[test]
    fn minibatch_full_equals_full() {
        let data = generate_logistic_data(20, 3, 5);
        let model = ModelSpec::logistic(3, Family::Diag, 10.0);
        let shard: Vec<u32> = (0..20).collect();
        let x = [0.3, -0.2, 0.1];
        let a = loglik_and_grad(&model, &data, &shard, &x, None).unwrap();
        let b = loglik_and_grad(&model, &data, &shard, &x, Some(&shard)).unwrap();
        assert_eq!(a.0, b.0);
        assert_eq!(a.1, b.1);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for kind in [ModelKind::Logistic, ModelKind::LinearGaussian] {
            let data = match kind {
                ModelKind::Logistic => generate_logistic_data(15, 3, 2),
                ModelKind::LinearGaussian => generate_linear_data(15, 3, 2, 0.7),
            };
            let model = match kind {
                ModelKind::Logistic => ModelSpec::logistic(3, Family::Diag, 10.0),
                ModelKind::LinearGaussian => ModelSpec::linear(3, Family::Diag, 10.0, 0.7),
            };
            let shard: Vec<u32> = (0..15).collect();
            for _ in 0..10 {
                let x: Vec<f64> = (0..3).map(|_| rng.gen_range(-0.5..0.5)).collect();
                let (_, g) = loglik_and_grad(&model, &data, &shard, &x, None).unwrap();
                for j in 0..3 {
                    let h = 1e-6;
                    let mut xp = x.clone();
                    let mut xm = x.clone();
                    xp[j] += h;
                    xm[j] -= h;
                    let vp = loglik_and_grad(&model, &data, &shard, &xp, None).unwrap().0;
                    let vm = loglik_and_grad(&model, &data, &shard, &xm, None).unwrap().0;
                    let fd = (vp - vm) / (2.0 * h);
                    let tol = 1e-5 * g[j].abs().max(1.0);
                    assert!((fd - g[j]).abs() < tol, "{kind:?} coord {j}: {fd} vs {}", g[j]);
                }
            }
        }
    }

    #[test]
    fn minibatch_enumeration_is_unbiased() {
        // A 10-point shard: averaging the scaled gradient over every possible
        // minibatch of each size must reproduce the full-shard gradient.
        let data = generate_logistic_data(10, 2, 9);
        let model = ModelSpec::logistic(2, Family::Diag, 10.0);
        let shard: Vec<u32> = (0..10).collect();
        let x = [0.12, -0.4];
        let (fv, fg) = loglik_and_grad(&model, &data, &shard, &x, None).unwrap();
        for b in 1..=10usize {
            let mut count = 0usize;
            let mut avg_v = 0.0;
            let mut avg_g = vec![0.0; 2];
            for mask in 0u32..1024 {
                if mask.count_ones() as usize != b {
                    continue;
                }
                let batch: Vec<u32> = (0..10).filter(|i| mask >> i & 1 == 1).collect();
                let (v, g) = loglik_and_grad(&model, &data, &shard, &x, Some(&batch)).unwrap();
                avg_v += v;
                for j in 0..2 {
                    avg_g[j] += g[j];
                }
                count += 1;
            }
            avg_v /= count as f64;
            for j in 0..2 {
                avg_g[j] /= count as f64;
                assert!((avg_g[j] - fg[j]).abs() < 1e-12 * fg[j].abs().max(1.0));
            }
            assert!((avg_v - fv).abs() < 1e-12 * fv.abs().max(1.0));
        }
    }

    #[test]
    fn exact_posterior_textbook_case() {
        // Prior N(0,1), one observation y=2 at z=1, σ²=1 → posterior N(1, ½).
        let model = ModelSpec::linear(1, Family::Diag, 1.0, 1.0);
        let data = one_point_dataset(vec![1.0], 2.0, ModelKind::LinearGaussian);
        let post = exact_linear_posterior(&model, &data).unwrap();
        assert!((post.first_order()[0] - 2.0).abs() < 1e-12);
        assert!((post.second_order()[0] + 2.0).abs() < 1e-12);
        let mu = post.to_mean().unwrap();
        assert!((mu.first_order()[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn exact_posterior_empty_data_is_prior() {
        let model = ModelSpec::linear(2, Family::Full, 10.0, 1.0);
        let data = Dataset {
            kind: ModelKind::LinearGaussian,
            n: 0,
            dim: 2,
            covariates: vec![],
            responses: vec![],
            shard_assignment: vec![],
            shards: vec![],
            meta: DatasetMeta {
                seed: 0,
                mu: vec![0.0; 2],
                p: vec![0.0; 4],
                x_star: vec![0.0; 2],
                noise_variance: 1.0,
            },
        };
        let post = exact_linear_posterior(&model, &data).unwrap();
        assert_eq!(post, embed_full(&model.prior));
    }

    #[test]
    fn posterior_precision_gain_is_psd() {
        use rand::Rng;
        let data = generate_linear_data(30, 3, 4, 1.0);
        let model = ModelSpec::linear(3, Family::Full, 10.0, 1.0);
        let post = exact_linear_posterior(&model, &data).unwrap();
        let gain = model
            .prior
            .sub(&post)
            .map(|diff| diff.second_order().to_vec())
            .unwrap();
        // gain = Θ₂_prior − Θ₂_post = σ⁻²ZᵀZ ⪰ 0.
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..50 {
            let x: Vec<f64> = (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let q = linalg::dot(&x, &linalg::matvec(&gain, 3, &x));
            assert!(q >= -1e-10);
        }
    }

    #[test]
    fn tilted_moments_degenerate_cases() {
        let model = ModelSpec::linear(2, Family::Diag, 10.0, 1.0);
        let data = generate_linear_data(12, 2, 6, 1.0);
        let shard: Vec<u32> = (0..12).collect();
        let base = NaturalParams::isotropic(Family::Diag, 2, 0.5, 2.0);
        let no_tilt = exact_tilted_moments_linear(&model, &data, &shard, &base, 0.0).unwrap();
        let plain = base.to_mean().unwrap();
        assert!(no_tilt.max_abs_diff(&plain).unwrap() < 1e-12);
        let empty = exact_tilted_moments_linear(&model, &data, &[], &base, 1.0).unwrap();
        assert!(empty.max_abs_diff(&plain).unwrap() < 1e-12);
    }

    #[test]
    fn predict_examples() {
        let data = generate_logistic_data(5, 2, 3);
        let probs = predict_probs(&[0.0, 0.0], &data);
        assert!(probs.iter().all(|&p| p == 0.5));
        assert!(sigmoid(1e9) > 1.0 - 1e-12);
        let x = [1.4, -0.3];
        let neg_x = [-1.4, 0.3];
        let p = predict_probs(&x, &data);
        let q = predict_probs(&neg_x, &data);
        for (a, b) in p.iter().zip(&q) {
            assert!((a + b - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn generator_is_reproducible_and_honors_overrides() {
        let a = generate_logistic_data(50, 3, 77);
        let b = generate_logistic_data(50, 3, 77);
        assert_eq!(a.covariates, b.covariates);
        assert_eq!(a.responses, b.responses);
        assert_eq!(a.meta, b.meta);

        let mut g = DataGenerator::new(ModelKind::Logistic, 10, 1, 5);
        g.p_override = Some(vec![0.0]);
        let d = g.generate();
        for c in 0..10 {
            assert_eq!(d.covariate(c)[0], d.meta.mu[0]);
        }
    }

    #[test]
    fn shard_assignment_partitions() {
        let mut d = generate_logistic_data(23, 2, 1);
        d.assign_shards(4, 1);
        let mut seen = vec![false; 23];
        for w in 0..4 {
            for &c in d.shard_indices(w) {
                assert!(!seen[c as usize]);
                seen[c as usize] = true;
                assert_eq!(d.shard_assignment[c as usize], w);
            }
        }
        assert!(seen.iter().all(|&s| s));
        let sizes: Vec<usize> = (0..4).map(|w| d.shard_indices(w).len()).collect();
        assert_eq!(sizes.iter().sum::<usize>(), 23);
        assert!(sizes.iter().all(|&s| s == 5 || s == 6));
    }

    #[test]
    fn dataset_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("data.psds");
        let d = generate_linear_data(17, 3, 99, 0.5);
        save_dataset(&d, &path).unwrap();
        let back = load_dataset(&path).unwrap();
        assert_eq!(back.kind, d.kind);
        assert_eq!(back.n, d.n);
        assert_eq!(back.dim, d.dim);
        assert_eq!(back.covariates, d.covariates);
        assert_eq!(back.responses, d.responses);
        assert_eq!(back.meta, d.meta);
    }
}
