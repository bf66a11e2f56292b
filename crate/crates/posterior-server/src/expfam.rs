//! Exponential-family algebra for diagonal and full-covariance Gaussians.
//!
//! A family member has density `exp(θᵀs(x) − A(θ))` with sufficient
//! statistics `s(x) = [x, ½x∘x]` (diagonal) or `[x, ½xxᵀ]` (full). For the
//! diagonal family the natural parameters of `N(u, σ²)` are
//! `θ₁ = u/σ²`, `θ₂ = −1/σ²` and the mean parameters are
//! `μ₁ = u`, `μ₂ = ½(u² + σ²)`.
//!
//! [`NaturalParams`] and [`MeanParams`] are dual coordinates linked by
//! [`NaturalParams::to_mean`] (`∇A`) and [`MeanParams::to_natural`] (`∇A*`).
//! Values of `NaturalParams` are also used for *likelihood factors*, which
//! are unnormalised and may lie outside the natural domain (non-negative
//! second-order coordinates); only combined parameters (cavities, posteriors,
//! tilted bases) are required to be valid.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::linalg;

/// Maximum relative asymmetry tolerated when constructing a full matrix.
const SYMMETRY_TOL: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ExpFamError {
    /// Second-order natural coefficients are not negative (definite).
    #[error("natural parameters outside the natural domain")]
    InvalidNaturalDomain,
    /// Implied covariance `2μ₂ − μ₁μ₁ᵀ` is not positive (definite).
    #[error("mean parameters outside the mean domain")]
    InvalidMeanDomain,
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("family mismatch between operands")]
    FamilyMismatch,
    #[error("second-order block is not symmetric")]
    NotSymmetric,
    #[error("non-finite value encountered")]
    NonFinite,
}

/// The base exponential family in use.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Family {
    /// Diagonal-covariance Gaussian; second-order block is a length-D vector.
    Diag,
    /// Full-covariance Gaussian; second-order block is a symmetric D×D matrix.
    Full,
}

/// Second-order coordinate block shared by all parameter vectors.
#[derive(Debug, Clone, PartialEq)]
pub enum SecondOrder {
    Diag(Vec<f64>),
    /// Row-major symmetric D×D matrix.
    Full(Vec<f64>),
}

impl SecondOrder {
    fn len_ok(&self, d: usize) -> bool {
        match self {
            SecondOrder::Diag(v) => v.len() == d,
            SecondOrder::Full(m) => m.len() == d * d,
        }
    }

    fn family(&self) -> Family {
        match self {
            SecondOrder::Diag(_) => Family::Diag,
            SecondOrder::Full(_) => Family::Full,
        }
    }

    fn entries(&self) -> &[f64] {
        match self {
            SecondOrder::Diag(v) => v,
            SecondOrder::Full(m) => m,
        }
    }

    fn zip_with(&self, other: &SecondOrder, f: impl Fn(f64, f64) -> f64) -> SecondOrder {
        match (self, other) {
            (SecondOrder::Diag(a), SecondOrder::Diag(b)) => {
                SecondOrder::Diag(a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect())
            }
            (SecondOrder::Full(a), SecondOrder::Full(b)) => {
                SecondOrder::Full(a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect())
            }
            _ => unreachable!("family checked by caller"),
        }
    }

    fn map(&self, f: impl Fn(f64) -> f64) -> SecondOrder {
        match self {
            SecondOrder::Diag(v) => SecondOrder::Diag(v.iter().map(|&x| f(x)).collect()),
            SecondOrder::Full(m) => SecondOrder::Full(m.iter().map(|&x| f(x)).collect()),
        }
    }
}

/// Shared shape checks and componentwise arithmetic for parameter vectors.
#[derive(Debug, Clone, PartialEq)]
struct Coords {
    first: Vec<f64>,
    second: SecondOrder,
}

impl Coords {
    fn new(first: Vec<f64>, second: SecondOrder) -> Result<Self, ExpFamError> {
        let d = first.len();
        if !second.len_ok(d) {
            return Err(ExpFamError::DimensionMismatch {
                expected: match second.family() {
                    Family::Diag => d,
                    Family::Full => d * d,
                },
                got: second.entries().len(),
            });
        }
        if let SecondOrder::Full(m) = &second {
            let scale = m.iter().fold(0.0_f64, |a, &v| a.max(v.abs())).max(1e-300);
            if linalg::symmetry_defect(m, d) > SYMMETRY_TOL * scale {
                return Err(ExpFamError::NotSymmetric);
            }
            // Symmetrise exactly so later algebra cannot drift.
            let mut sym = m.clone();
            for i in 0..d {
                for j in 0..i {
                    let v = 0.5 * (sym[i * d + j] + sym[j * d + i]);
                    sym[i * d + j] = v;
                    sym[j * d + i] = v;
                }
            }
            return Ok(Coords {
                first,
                second: SecondOrder::Full(sym),
            });
        }
        Ok(Coords { first, second })
    }

    fn dim(&self) -> usize {
        self.first.len()
    }

    fn check_compatible(&self, other: &Coords) -> Result<(), ExpFamError> {
        if self.second.family() != other.second.family() {
            return Err(ExpFamError::FamilyMismatch);
        }
        if self.dim() != other.dim() {
            return Err(ExpFamError::DimensionMismatch {
                expected: self.dim(),
                got: other.dim(),
            });
        }
        Ok(())
    }

    fn zip_with(&self, other: &Coords, f: impl Fn(f64, f64) -> f64) -> Result<Coords, ExpFamError> {
        self.check_compatible(other)?;
        Ok(Coords {
            first: self
                .first
                .iter()
                .zip(&other.first)
                .map(|(&x, &y)| f(x, y))
                .collect(),
            second: self.second.zip_with(&other.second, f),
        })
    }

    fn scale(&self, c: f64) -> Coords {
        Coords {
            first: self.first.iter().map(|&x| c * x).collect(),
            second: self.second.map(|x| c * x),
        }
    }

    /// Duality pairing θᵀμ summed over every stored coordinate.
    fn pair(&self, other: &Coords) -> Result<f64, ExpFamError> {
        self.check_compatible(other)?;
        Ok(linalg::dot(&self.first, &other.first)
            + linalg::dot(self.second.entries(), other.second.entries()))
    }

    fn max_abs_diff(&self, other: &Coords) -> Result<f64, ExpFamError> {
        self.check_compatible(other)?;
        let f = self
            .first
            .iter()
            .zip(&other.first)
            .fold(0.0_f64, |m, (&a, &b)| m.max((a - b).abs()));
        let s = self
            .second
            .entries()
            .iter()
            .zip(other.second.entries())
            .fold(0.0_f64, |m, (&a, &b)| m.max((a - b).abs()));
        Ok(f.max(s))
    }

    fn is_finite(&self) -> bool {
        self.first.iter().all(|v| v.is_finite())
            && self.second.entries().iter().all(|v| v.is_finite())
    }
}

/// Natural parameters θ of a Gaussian exponential-family member (or of an
/// unnormalised likelihood factor).
#[derive(Debug, Clone, PartialEq)]
pub struct NaturalParams(Coords);

/// Mean parameters μ = E[s(x)].
#[derive(Debug, Clone, PartialEq)]
pub struct MeanParams(Coords);

/// Sufficient statistics s(x) = [x, ½x∘x] (diag) or [x, ½xxᵀ] (full).
#[derive(Debug, Clone, PartialEq)]
pub struct SuffStats(Coords);

/// Cholesky factor of the covariance implied by a valid natural parameter.
#[derive(Debug, Clone)]
pub enum CovFactor {
    /// Per-dimension standard deviations.
    DiagStd(Vec<f64>),
    /// Lower-triangular Cholesky factor of Σ, row-major.
    Chol(Vec<f64>),
}

impl CovFactor {
    /// Apply the factor: returns `F z` with `F Fᵀ = Σ`.
    pub fn apply(&self, z: &[f64]) -> Vec<f64> {
        match self {
            CovFactor::DiagStd(s) => s.iter().zip(z).map(|(&a, &b)| a * b).collect(),
            CovFactor::Chol(l) => linalg::lower_matvec(l, z.len(), z),
        }
    }

    /// Apply the inverse factor: returns `F⁻¹ v`.
    pub fn apply_inverse(&self, v: &[f64]) -> Vec<f64> {
        match self {
            CovFactor::DiagStd(s) => s.iter().zip(v).map(|(&a, &b)| b / a).collect(),
            CovFactor::Chol(l) => linalg::solve_lower(l, v.len(), v),
        }
    }
}

/// Mean vector and covariance factor of a valid Gaussian natural parameter.
#[derive(Debug, Clone)]
pub struct GaussianMoments {
    pub mean: Vec<f64>,
    pub cov: CovFactor,
}

impl NaturalParams {
    pub fn diag(first: Vec<f64>, second: Vec<f64>) -> Result<Self, ExpFamError> {
        Coords::new(first, SecondOrder::Diag(second)).map(NaturalParams)
    }

    /// Full family; `second` is a row-major D×D symmetric matrix.
    pub fn full(first: Vec<f64>, second: Vec<f64>) -> Result<Self, ExpFamError> {
        Coords::new(first, SecondOrder::Full(second)).map(NaturalParams)
    }

    /// The zero factor (identity under factor products).
    pub fn zero(family: Family, dim: usize) -> Self {
        let second = match family {
            Family::Diag => SecondOrder::Diag(vec![0.0; dim]),
            Family::Full => SecondOrder::Full(vec![0.0; dim * dim]),
        };
        NaturalParams(Coords {
            first: vec![0.0; dim],
            second,
        })
    }

    /// Natural parameters of N(u, diag(σ²)).
    pub fn from_gaussian_diag(means: &[f64], variances: &[f64]) -> Result<Self, ExpFamError> {
        if means.len() != variances.len() {
            return Err(ExpFamError::DimensionMismatch {
                expected: means.len(),
                got: variances.len(),
            });
        }
        if variances.iter().any(|&v| v <= 0.0) {
            return Err(ExpFamError::InvalidNaturalDomain);
        }
        let first = means.iter().zip(variances).map(|(&u, &v)| u / v).collect();
        let second = variances.iter().map(|&v| -1.0 / v).collect();
        NaturalParams::diag(first, second)
    }

    /// Isotropic Gaussian N(mean·1, var·I) in the requested family.
    pub fn isotropic(family: Family, dim: usize, mean: f64, var: f64) -> Self {
        match family {
            Family::Diag => {
                NaturalParams::from_gaussian_diag(&vec![mean; dim], &vec![var; dim]).unwrap()
            }
            Family::Full => {
                let mut m = vec![0.0; dim * dim];
                for i in 0..dim {
                    m[i * dim + i] = -1.0 / var;
                }
                NaturalParams::full(vec![mean / var; dim], m).unwrap()
            }
        }
    }

    pub fn family(&self) -> Family {
        self.0.second.family()
    }

    pub fn dim(&self) -> usize {
        self.0.dim()
    }

    pub fn first_order(&self) -> &[f64] {
        &self.0.first
    }

    /// Raw second-order coordinates: length D (diag) or D² row-major (full).
    pub fn second_order(&self) -> &[f64] {
        self.0.second.entries()
    }

    /// Whether θ lies in the natural domain (normalisable Gaussian).
    pub fn in_natural_domain(&self) -> bool {
        if !self.0.is_finite() {
            return false;
        }
        match &self.0.second {
            SecondOrder::Diag(t2) => t2.iter().all(|&t| t < 0.0),
            SecondOrder::Full(m) => {
                let d = self.dim();
                let neg: Vec<f64> = m.iter().map(|&v| -v).collect();
                linalg::cholesky(&neg, d).is_some()
            }
        }
    }

    /// Componentwise sum θ + ρ (factor product).
    pub fn add(&self, other: &NaturalParams) -> Result<NaturalParams, ExpFamError> {
        self.0.zip_with(&other.0, |a, b| a + b).map(NaturalParams)
    }

    /// Componentwise difference θ − ρ (factor removal).
    pub fn sub(&self, other: &NaturalParams) -> Result<NaturalParams, ExpFamError> {
        self.0.zip_with(&other.0, |a, b| a - b).map(NaturalParams)
    }

    pub fn scale(&self, c: f64) -> NaturalParams {
        NaturalParams(self.0.scale(c))
    }

    /// Mean parameters ∇A(θ).
    pub fn to_mean(&self) -> Result<MeanParams, ExpFamError> {
        match &self.0.second {
            SecondOrder::Diag(t2) => {
                let t1 = &self.0.first;
                let mut first = Vec::with_capacity(self.dim());
                let mut second = Vec::with_capacity(self.dim());
                for (&a, &b) in t1.iter().zip(t2) {
                    if !(b < 0.0) || !a.is_finite() {
                        return Err(ExpFamError::InvalidNaturalDomain);
                    }
                    let u = -a / b;
                    first.push(u);
                    second.push(0.5 * (a * a / (b * b) - 1.0 / b));
                }
                Ok(MeanParams(Coords {
                    first,
                    second: SecondOrder::Diag(second),
                }))
            }
            SecondOrder::Full(m) => {
                let d = self.dim();
                let prec: Vec<f64> = m.iter().map(|&v| -v).collect();
                let l = linalg::cholesky(&prec, d).ok_or(ExpFamError::InvalidNaturalDomain)?;
                let sigma = linalg::chol_inverse(&l, d);
                let mean = linalg::chol_solve(&l, d, &self.0.first);
                let mut m2 = vec![0.0; d * d];
                for i in 0..d {
                    for j in 0..d {
                        m2[i * d + j] = 0.5 * (sigma[i * d + j] + mean[i] * mean[j]);
                    }
                }
                Ok(MeanParams(Coords {
                    first: mean,
                    second: SecondOrder::Full(m2),
                }))
            }
        }
    }

    /// Log-partition function A(θ).
    pub fn log_partition(&self) -> Result<f64, ExpFamError> {
        const LN_2PI: f64 = 1.8378770664093453;
        match &self.0.second {
            SecondOrder::Diag(t2) => {
                let mut a = 0.0;
                for (&t1, &t2) in self.0.first.iter().zip(t2) {
                    if !(t2 < 0.0) {
                        return Err(ExpFamError::InvalidNaturalDomain);
                    }
                    let var = -1.0 / t2;
                    a += 0.5 * (-t1 * t1 / t2 + (LN_2PI + var.ln()));
                }
                Ok(a)
            }
            SecondOrder::Full(m) => {
                let d = self.dim();
                let prec: Vec<f64> = m.iter().map(|&v| -v).collect();
                let l = linalg::cholesky(&prec, d).ok_or(ExpFamError::InvalidNaturalDomain)?;
                let mean = linalg::chol_solve(&l, d, &self.0.first);
                let logdet_sigma = -linalg::chol_logdet(&l, d);
                Ok(0.5 * (linalg::dot(&self.0.first, &mean) + d as f64 * LN_2PI + logdet_sigma))
            }
        }
    }

    /// Differential entropy −A*(∇A(θ)).
    pub fn entropy(&self) -> Result<f64, ExpFamError> {
        Ok(-self.to_mean()?.neg_entropy()?)
    }

    /// Gradient at `x` of the log density of the unnormalised carrier
    /// exp(θᵀs(x)): `θ₁ + θ₂∘x` (diag) or `θ₁ + Θ₂x` (full).
    pub fn carrier_gradient(&self, x: &[f64]) -> Result<Vec<f64>, ExpFamError> {
        if x.len() != self.dim() {
            return Err(ExpFamError::DimensionMismatch {
                expected: self.dim(),
                got: x.len(),
            });
        }
        match &self.0.second {
            SecondOrder::Diag(t2) => Ok(self
                .0
                .first
                .iter()
                .zip(t2)
                .zip(x)
                .map(|((&a, &b), &xi)| a + b * xi)
                .collect()),
            SecondOrder::Full(m) => {
                let mut g = linalg::matvec(m, self.dim(), x);
                for (gi, &a) in g.iter_mut().zip(&self.0.first) {
                    *gi += a;
                }
                Ok(g)
            }
        }
    }

    /// Floor the per-dimension variance implied by a likelihood factor.
    ///
    /// Diagonal family: coordinates with second-order coefficient below
    /// `−1/min_variance` (implied variance under the floor) are clamped to
    /// the floor with the first-order coefficient rescaled so the implied
    /// mean `u = −θ₁/θ₂` is preserved. Non-negative coefficients pass through
    /// unchanged: factors need not be normalisable.
    ///
    /// Full family: when any diagonal precision entry exceeds
    /// `1/min_variance`, the entire factor is raised to the power
    /// `(1/min_variance)/max_j(−Θ₂_jj) < 1` (both blocks scaled), which caps
    /// every diagonal precision at the floor, keeps the second-order block's
    /// definiteness, and preserves the implied mean exactly.
    pub fn validate_and_clamp(&self, min_variance: f64) -> NaturalParams {
        assert!(min_variance > 0.0, "min_variance must be positive");
        let cap = -1.0 / min_variance;
        match &self.0.second {
            SecondOrder::Diag(t2) => {
                let mut first = self.0.first.clone();
                let mut second = t2.clone();
                for j in 0..self.dim() {
                    if second[j] < cap {
                        let u = -first[j] / second[j];
                        first[j] = -u * cap;
                        second[j] = cap;
                    }
                }
                NaturalParams(Coords {
                    first,
                    second: SecondOrder::Diag(second),
                })
            }
            SecondOrder::Full(m) => {
                let d = self.dim();
                let max_prec = (0..d).fold(0.0_f64, |a, j| a.max(-m[j * d + j]));
                if max_prec <= 1.0 / min_variance {
                    return self.clone();
                }
                self.scale((1.0 / min_variance) / max_prec)
            }
        }
    }

    /// Mean vector and covariance factor; errors outside the natural domain.
    pub fn gaussian_moments(&self) -> Result<GaussianMoments, ExpFamError> {
        match &self.0.second {
            SecondOrder::Diag(t2) => {
                let mut mean = Vec::with_capacity(self.dim());
                let mut std = Vec::with_capacity(self.dim());
                for (&a, &b) in self.0.first.iter().zip(t2) {
                    if !(b < 0.0) {
                        return Err(ExpFamError::InvalidNaturalDomain);
                    }
                    mean.push(-a / b);
                    std.push((-1.0 / b).sqrt());
                }
                Ok(GaussianMoments {
                    mean,
                    cov: CovFactor::DiagStd(std),
                })
            }
            SecondOrder::Full(m) => {
                let d = self.dim();
                let prec: Vec<f64> = m.iter().map(|&v| -v).collect();
                let lp = linalg::cholesky(&prec, d).ok_or(ExpFamError::InvalidNaturalDomain)?;
                let mean = linalg::chol_solve(&lp, d, &self.0.first);
                let sigma = linalg::chol_inverse(&lp, d);
                let ls = linalg::cholesky(&sigma, d).ok_or(ExpFamError::InvalidNaturalDomain)?;
                Ok(GaussianMoments {
                    mean,
                    cov: CovFactor::Chol(ls),
                })
            }
        }
    }

    /// One exact draw from p_θ; reproducible given the stream state.
    pub fn sample_exact(&self, rng: &mut ChaCha8Rng) -> Result<Vec<f64>, ExpFamError> {
        let moments = self.gaussian_moments()?;
        let z: Vec<f64> = (0..self.dim()).map(|_| standard_normal(rng)).collect();
        let mut x = moments.cov.apply(&z);
        for (xi, &mi) in x.iter_mut().zip(&moments.mean) {
            *xi += mi;
        }
        Ok(x)
    }

    /// Canonical flat encoding: diag → `[θ₁.., θ₂..]` (2D values); full →
    /// `[θ₁.., lower triangle of Θ₂ row-major]` (D + D(D+1)/2 values).
    pub fn to_flat(&self) -> Vec<f64> {
        let d = self.dim();
        let mut out = self.0.first.clone();
        match &self.0.second {
            SecondOrder::Diag(t2) => out.extend_from_slice(t2),
            SecondOrder::Full(m) => {
                for i in 0..d {
                    for j in 0..=i {
                        out.push(m[i * d + j]);
                    }
                }
            }
        }
        out
    }

    /// Number of values in the flat encoding.
    pub fn flat_len(family: Family, dim: usize) -> usize {
        match family {
            Family::Diag => 2 * dim,
            Family::Full => dim + dim * (dim + 1) / 2,
        }
    }

    /// Decode the canonical flat encoding.
    pub fn from_flat(family: Family, dim: usize, flat: &[f64]) -> Result<Self, ExpFamError> {
        let want = Self::flat_len(family, dim);
        if flat.len() != want {
            return Err(ExpFamError::DimensionMismatch {
                expected: want,
                got: flat.len(),
            });
        }
        let first = flat[..dim].to_vec();
        match family {
            Family::Diag => NaturalParams::diag(first, flat[dim..].to_vec()),
            Family::Full => {
                let mut m = vec![0.0; dim * dim];
                let mut k = dim;
                for i in 0..dim {
                    for j in 0..=i {
                        m[i * dim + j] = flat[k];
                        m[j * dim + i] = flat[k];
                        k += 1;
                    }
                }
                NaturalParams::full(first, m)
            }
        }
    }
}

impl MeanParams {
    pub fn diag(first: Vec<f64>, second: Vec<f64>) -> Result<Self, ExpFamError> {
        Coords::new(first, SecondOrder::Diag(second)).map(MeanParams)
    }

    pub fn full(first: Vec<f64>, second: Vec<f64>) -> Result<Self, ExpFamError> {
        Coords::new(first, SecondOrder::Full(second)).map(MeanParams)
    }

    pub fn family(&self) -> Family {
        self.0.second.family()
    }

    pub fn dim(&self) -> usize {
        self.0.dim()
    }

    pub fn first_order(&self) -> &[f64] {
        &self.0.first
    }

    pub fn second_order(&self) -> &[f64] {
        self.0.second.entries()
    }

    /// Whether μ lies in the interior of the mean domain.
    pub fn in_mean_domain(&self) -> bool {
        if !self.0.is_finite() {
            return false;
        }
        match &self.0.second {
            SecondOrder::Diag(m2) => self
                .0
                .first
                .iter()
                .zip(m2)
                .all(|(&m1, &m2)| 2.0 * m2 - m1 * m1 > 0.0),
            SecondOrder::Full(m2) => {
                let d = self.dim();
                let mut s = vec![0.0; d * d];
                for i in 0..d {
                    for j in 0..d {
                        s[i * d + j] = 2.0 * m2[i * d + j] - self.0.first[i] * self.0.first[j];
                    }
                }
                linalg::cholesky(&s, d).is_some()
            }
        }
    }

    /// Natural parameters ∇A*(μ); exact inverse of [`NaturalParams::to_mean`].
    pub fn to_natural(&self) -> Result<NaturalParams, ExpFamError> {
        match &self.0.second {
            SecondOrder::Diag(m2) => {
                let mut first = Vec::with_capacity(self.dim());
                let mut second = Vec::with_capacity(self.dim());
                for (&a, &b) in self.0.first.iter().zip(m2) {
                    let var = 2.0 * b - a * a;
                    if !(var > 0.0) || !a.is_finite() {
                        return Err(ExpFamError::InvalidMeanDomain);
                    }
                    first.push(a / var);
                    second.push(-1.0 / var);
                }
                Ok(NaturalParams(Coords {
                    first,
                    second: SecondOrder::Diag(second),
                }))
            }
            SecondOrder::Full(m2) => {
                let d = self.dim();
                let mut sigma = vec![0.0; d * d];
                for i in 0..d {
                    for j in 0..d {
                        sigma[i * d + j] = 2.0 * m2[i * d + j] - self.0.first[i] * self.0.first[j];
                    }
                }
                let l = linalg::cholesky(&sigma, d).ok_or(ExpFamError::InvalidMeanDomain)?;
                let first = linalg::chol_solve(&l, d, &self.0.first);
                let prec = linalg::chol_inverse(&l, d);
                let theta2: Vec<f64> = prec.iter().map(|&v| -v).collect();
                Ok(NaturalParams(Coords {
                    first,
                    second: SecondOrder::Full(theta2),
                }))
            }
        }
    }

    /// Convex conjugate A*(μ) (the negative entropy).
    pub fn neg_entropy(&self) -> Result<f64, ExpFamError> {
        const LN_2PI: f64 = 1.8378770664093453;
        match &self.0.second {
            SecondOrder::Diag(m2) => {
                let mut a = 0.0;
                for (&m1, &m2) in self.0.first.iter().zip(m2) {
                    let var = 2.0 * m2 - m1 * m1;
                    if !(var > 0.0) {
                        return Err(ExpFamError::InvalidMeanDomain);
                    }
                    a += -0.5 * (1.0 + LN_2PI + var.ln());
                }
                Ok(a)
            }
            SecondOrder::Full(m2) => {
                let d = self.dim();
                let mut sigma = vec![0.0; d * d];
                for i in 0..d {
                    for j in 0..d {
                        sigma[i * d + j] = 2.0 * m2[i * d + j] - self.0.first[i] * self.0.first[j];
                    }
                }
                let l = linalg::cholesky(&sigma, d).ok_or(ExpFamError::InvalidMeanDomain)?;
                Ok(-0.5 * (d as f64 * (1.0 + LN_2PI) + linalg::chol_logdet(&l, d)))
            }
        }
    }

    pub fn add(&self, other: &MeanParams) -> Result<MeanParams, ExpFamError> {
        self.0.zip_with(&other.0, |a, b| a + b).map(MeanParams)
    }

    pub fn sub(&self, other: &MeanParams) -> Result<MeanParams, ExpFamError> {
        self.0.zip_with(&other.0, |a, b| a - b).map(MeanParams)
    }

    pub fn scale(&self, c: f64) -> MeanParams {
        MeanParams(self.0.scale(c))
    }

    /// `self + eps·(other − self)` shorthand is not provided; compose `add`,
    /// `sub` and `scale` instead.
    pub fn max_abs_diff(&self, other: &MeanParams) -> Result<f64, ExpFamError> {
        self.0.max_abs_diff(&other.0)
    }

    /// Duality pairing θᵀμ over all stored coordinates.
    pub fn pair(&self, theta: &NaturalParams) -> Result<f64, ExpFamError> {
        self.0.pair(&theta.0)
    }
}

impl SuffStats {
    pub fn family(&self) -> Family {
        self.0.second.family()
    }

    pub fn dim(&self) -> usize {
        self.0.dim()
    }

    pub fn first_order(&self) -> &[f64] {
        &self.0.first
    }

    pub fn second_order(&self) -> &[f64] {
        self.0.second.entries()
    }

    /// Reinterpret the statistics vector in mean-parameter coordinates.
    ///
    /// A single-point statistic sits on the boundary of the mean domain; the
    /// result is meant for coordinate arithmetic (averages, update steps),
    /// not for conversion back to natural parameters.
    pub fn into_mean_coords(self) -> MeanParams {
        MeanParams(self.0)
    }

    /// Average a non-empty batch of statistics in mean coordinates.
    pub fn average(stats: &[SuffStats]) -> MeanParams {
        assert!(!stats.is_empty(), "cannot average an empty batch");
        let mut acc = stats[0].0.clone();
        for s in &stats[1..] {
            acc = acc.zip_with(&s.0, |a, b| a + b).expect("uniform batch");
        }
        MeanParams(acc.scale(1.0 / stats.len() as f64))
    }
}

/// Sufficient statistics of `x` in the given family.
pub fn suff_stats(x: &[f64], family: Family) -> SuffStats {
    let d = x.len();
    let second = match family {
        Family::Diag => SecondOrder::Diag(x.iter().map(|&v| 0.5 * v * v).collect()),
        Family::Full => {
            let mut m = vec![0.0; d * d];
            for i in 0..d {
                for j in 0..d {
                    m[i * d + j] = 0.5 * x[i] * x[j];
                }
            }
            SecondOrder::Full(m)
        }
    };
    SuffStats(Coords {
        first: x.to_vec(),
        second,
    })
}

/// KL divergence KL(p‖q) = μ_pᵀ(θ_p − θ_q) − A(θ_p) + A(θ_q).
pub fn kl(p: &NaturalParams, q: &NaturalParams) -> Result<f64, ExpFamError> {
    let mu_p = p.to_mean()?;
    let diff = p.sub(q)?;
    Ok(mu_p.pair(&diff)? - p.log_partition()? + q.log_partition()?)
}

/// One standard-normal draw via Box-Muller, deterministic per stream.
pub(crate) fn standard_normal(rng: &mut ChaCha8Rng) -> f64 {
    // Box-Muller keeps the draw count per sample fixed, which makes
    // trajectories bitwise reproducible across runs.
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen::<f64>();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}
