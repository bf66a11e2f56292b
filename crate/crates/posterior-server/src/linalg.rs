//! Dense symmetric linear algebra for small matrices (D ≤ 50).
//!
//! Everything here works on row-major `&[f64]` buffers of length `d*d`.
//! Positive-definiteness checks go through an unpivoted Cholesky whose pivot
//! tolerance is scaled to the matrix diagonal.

/// Relative pivot tolerance for positive-definiteness checks.
pub const PD_PIVOT_TOL: f64 = 1e-12;

/// Lower-triangular Cholesky factor of a symmetric matrix, or `None` if any
/// pivot falls below `PD_PIVOT_TOL` relative to the largest diagonal entry.
pub fn cholesky(a: &[f64], d: usize) -> Option<Vec<f64>> {
    debug_assert_eq!(a.len(), d * d);
    let scale = a.iter().step_by(d + 1).fold(0.0_f64, |m, &v| m.max(v.abs()));
    let tol = PD_PIVOT_TOL * scale;
    let mut l = vec![0.0; d * d];
    for i in 0..d {
        for j in 0..=i {
            let mut s = a[i * d + j];
            for k in 0..j {
                s -= l[i * d + k] * l[j * d + k];
            }
            if i == j {
                if s <= tol {
                    return None;
                }
                l[i * d + i] = s.sqrt();
            } else {
                l[i * d + j] = s / l[j * d + j];
            }
        }
    }
    Some(l)
}

/// Solve L y = b for lower-triangular L.
pub fn solve_lower(l: &[f64], d: usize, b: &[f64]) -> Vec<f64> {
    let mut y = vec![0.0; d];
    for i in 0..d {
        let mut s = b[i];
        for k in 0..i {
            s -= l[i * d + k] * y[k];
        }
        y[i] = s / l[i * d + i];
    }
    y
}

/// Solve Lᵀ x = y for lower-triangular L.
pub fn solve_lower_transpose(l: &[f64], d: usize, y: &[f64]) -> Vec<f64> {
    let mut x = vec![0.0; d];
    for i in (0..d).rev() {
        let mut s = y[i];
        for k in i + 1..d {
            s -= l[k * d + i] * x[k];
        }
        x[i] = s / l[i * d + i];
    }
    x
}

/// Solve A x = b given the Cholesky factor L of A.
pub fn chol_solve(l: &[f64], d: usize, b: &[f64]) -> Vec<f64> {
    solve_lower_transpose(l, d, &solve_lower(l, d, b))
}

/// Inverse of A from its Cholesky factor, symmetrised.
pub fn chol_inverse(l: &[f64], d: usize) -> Vec<f64> {
    let mut inv = vec![0.0; d * d];
    let mut e = vec![0.0; d];
    for j in 0..d {
        e[j] = 1.0;
        let col = chol_solve(l, d, &e);
        e[j] = 0.0;
        for i in 0..d {
            inv[i * d + j] = col[i];
        }
    }
    for i in 0..d {
        for j in 0..i {
            let v = 0.5 * (inv[i * d + j] + inv[j * d + i]);
            inv[i * d + j] = v;
            inv[j * d + i] = v;
        }
    }
    inv
}

/// log det A from its Cholesky factor.
pub fn chol_logdet(l: &[f64], d: usize) -> f64 {
    (0..d).map(|i| l[i * d + i].ln()).sum::<f64>() * 2.0
}

/// Matrix-vector product A x.
pub fn matvec(a: &[f64], d: usize, x: &[f64]) -> Vec<f64> {
    (0..d)
        .map(|i| (0..d).map(|j| a[i * d + j] * x[j]).sum())
        .collect()
}

/// Lower-triangular matrix-vector product L x.
pub fn lower_matvec(l: &[f64], d: usize, x: &[f64]) -> Vec<f64> {
    (0..d)
        .map(|i| (0..=i).map(|j| l[i * d + j] * x[j]).sum())
        .collect()
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Maximum symmetry defect max|A − Aᵀ|.
pub fn symmetry_defect(a: &[f64], d: usize) -> f64 {
    let mut m = 0.0_f64;
    for i in 0..d {
        for j in 0..i {
            m = m.max((a[i * d + j] - a[j * d + i]).abs());
        }
    }
    m
}
