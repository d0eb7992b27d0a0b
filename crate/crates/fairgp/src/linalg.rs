//! Shared dense linear-algebra helpers.
//!
//! Thin wrappers around the LAPACK-backed routines plus a few hand-rolled
//! iterative methods. The wrappers impose the conventions the rest of the
//! crate relies on for reproducibility: eigenvalues sorted descending,
//! deterministic sign choices for eigenvectors and singular vectors, and
//! seeded, allocation-predictable iteration.

use ndarray::prelude::*;
use ndarray_linalg::{Eigh, JobSvd, SVD, SVDDC, UPLO};

use crate::error::{Error, Result};

// ---------------------------------------------------------------------------
// Validation helpers
// ---------------------------------------------------------------------------

/// Errors if any entry of `v` is NaN or infinite.
pub fn ensure_finite_1d(v: &Array1<f64>, what: &str) -> Result<()> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(what.to_string()))
    }
}

/// Errors if any entry of `m` is NaN or infinite.
pub fn ensure_finite_2d(m: &Array2<f64>, what: &str) -> Result<()> {
    if m.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(what.to_string()))
    }
}

/// Largest absolute entry, 0 for an empty array.
pub fn max_abs(m: &Array2<f64>) -> f64 {
    m.iter().fold(0.0_f64, |acc, &x| acc.max(x.abs()))
}

// ---------------------------------------------------------------------------
// Centering
// ---------------------------------------------------------------------------

/// Subtracts the mean from a vector in place.
pub fn center_vec_mut(v: &mut Array1<f64>) {
    if v.is_empty() {
        return;
    }
    let mean = v.sum() / v.len() as f64;
    v.mapv_inplace(|x| x - mean);
}

/// Subtracts each column's mean, i.e. applies the centering projector from
/// the left without materializing it.
pub fn center_columns_mut(m: &mut Array2<f64>) {
    let n = m.nrows();
    if n == 0 {
        return;
    }
    for mut col in m.columns_mut() {
        let mean = col.sum() / n as f64;
        col.mapv_inplace(|x| x - mean);
    }
}

// ---------------------------------------------------------------------------
// Deterministic sign conventions
// ---------------------------------------------------------------------------

/// Index of the entry with the largest absolute value; the first such index
/// wins on ties so the choice is deterministic.
fn argmax_abs(col: &ArrayView1<f64>) -> usize {
    let mut best = 0;
    let mut best_val = f64::NEG_INFINITY;
    for (i, &x) in col.iter().enumerate() {
        let a = x.abs();
        if a > best_val {
            best_val = a;
            best = i;
        }
    }
    best
}

/// Flips each column so its largest-magnitude entry is positive.
pub fn fix_column_signs(m: &mut Array2<f64>) {
    for mut col in m.columns_mut() {
        if col.is_empty() {
            continue;
        }
        let idx = argmax_abs(&col.view());
        if col[idx] < 0.0 {
            col.mapv_inplace(|x| -x);
        }
    }
}

/// Flips column `j` of `u` and row `j` of `vt` together so each left singular
/// vector has its largest-magnitude entry positive. Keeping the pair in sync
/// preserves the factorization.
fn align_svd_signs(u: &mut Array2<f64>, vt: &mut Array2<f64>) {
    let k = u.ncols().min(vt.nrows());
    for j in 0..k {
        let col = u.column(j);
        if col.is_empty() {
            continue;
        }
        let idx = argmax_abs(&col);
        if col[idx] < 0.0 {
            u.column_mut(j).mapv_inplace(|x| -x);
            vt.row_mut(j).mapv_inplace(|x| -x);
        }
    }
}

// ---------------------------------------------------------------------------
// LAPACK wrappers
// ---------------------------------------------------------------------------

/// Symmetric eigendecomposition with eigenvalues sorted descending and a
/// deterministic sign per eigenvector. The input is assumed symmetric; only
/// its lower triangle is read.
pub fn eigh_desc(a: &Array2<f64>) -> Result<(Array1<f64>, Array2<f64>)> {
    let (vals, vecs) = a.eigh(UPLO::Lower)?;
    let vals: Array1<f64> = vals.slice(s![..;-1]).to_owned();
    let mut vecs: Array2<f64> = vecs.slice(s![.., ..;-1]).to_owned();
    fix_column_signs(&mut vecs);
    ensure_finite_1d(&vals, "eigenvalues")?;
    Ok((vals, vecs))
}

/// Thin singular value decomposition `A = U diag(s) Vt` with the sign of each
/// left singular vector fixed deterministically. `U` is `r x k`, `Vt` is
/// `k x c` with `k = min(r, c)`; singular values come back descending.
pub fn svd_thin(a: &Array2<f64>) -> Result<(Array2<f64>, Array1<f64>, Array2<f64>)> {
    let (u, s, vt) = a.svddc(JobSvd::Some)?;
    let mut u = u.ok_or_else(|| Error::Numerical("svd did not return U".into()))?;
    let mut vt = vt.ok_or_else(|| Error::Numerical("svd did not return Vt".into()))?;
    align_svd_signs(&mut u, &mut vt);
    Ok((u, s, vt))
}

/// Singular values only.
pub fn singular_values(a: &Array2<f64>) -> Result<Array1<f64>> {
    let (_, s, _) = a.svddc(JobSvd::None)?;
    Ok(s)
}

/// Full left factor of the SVD: returns square `U` (`r x r`) and the
/// singular values. The trailing columns of `U` form an orthonormal basis of
/// the orthogonal complement of the column space, which is what the fair
/// subspace construction needs. All column signs are fixed deterministically
/// (the right factor is discarded, so no pairing constraint applies).
pub fn svd_full_u(a: &Array2<f64>) -> Result<(Array2<f64>, Array1<f64>)> {
    let (u, s, _) = a.svd(true, false)?;
    let mut u = u.ok_or_else(|| Error::Numerical("svd did not return U".into()))?;
    fix_column_signs(&mut u);
    Ok((u, s))
}

// ---------------------------------------------------------------------------
// Triangular solves
// ---------------------------------------------------------------------------

/// Forward substitution with a lower-triangular matrix.
fn solve_lower(l: &Array2<f64>, b: &Array1<f64>) -> Array1<f64> {
    let n = l.nrows();
    let mut x = b.clone();
    for i in 0..n {
        let mut v = x[i];
        for j in 0..i {
            v -= l[(i, j)] * x[j];
        }
        x[i] = v / l[(i, i)];
    }
    x
}

/// Back substitution with the transpose of a lower-triangular matrix.
fn solve_lower_transpose(l: &Array2<f64>, b: &Array1<f64>) -> Array1<f64> {
    let n = l.nrows();
    let mut x = b.clone();
    for i in (0..n).rev() {
        let mut v = x[i];
        for j in i + 1..n {
            v -= l[(j, i)] * x[j];
        }
        x[i] = v / l[(i, i)];
    }
    x
}

/// Solves `A x = b` given the lower Cholesky factor `L` of `A = L L'`.
pub fn chol_solve_vec(l: &Array2<f64>, b: &Array1<f64>) -> Array1<f64> {
    solve_lower_transpose(l, &solve_lower(l, b))
}

/// Solves `A X = B` column by column given the lower Cholesky factor of `A`.
pub fn chol_solve_mat(l: &Array2<f64>, b: &Array2<f64>) -> Array2<f64> {
    let mut out = Array2::zeros(b.raw_dim());
    for (j, col) in b.columns().into_iter().enumerate() {
        out.column_mut(j).assign(&chol_solve_vec(l, &col.to_owned()));
    }
    out
}

// ---------------------------------------------------------------------------
// Iterative methods
// ---------------------------------------------------------------------------

/// Conjugate gradients for a symmetric positive definite operator given as a
/// matrix-free closure. Returns the solution and the iteration count.
///
/// Converges when the residual norm drops below `rel_tol * ||b||`. Errors if
/// the operator reveals itself as not positive definite or the iteration
/// budget is exhausted.
pub fn cg_solve<F>(
    apply: F,
    b: &Array1<f64>,
    rel_tol: f64,
    max_iters: usize,
) -> Result<(Array1<f64>, usize)>
where
    F: Fn(&Array1<f64>) -> Array1<f64>,
{
    let n = b.len();
    let norm_b = b.dot(b).sqrt();
    if norm_b == 0.0 {
        return Ok((Array1::zeros(n), 0));
    }
    let tol = rel_tol * norm_b;

    let mut x: Array1<f64> = Array1::zeros(n);
    let mut r = b.clone();
    let mut p = r.clone();
    let mut rs = r.dot(&r);

    for iter in 0..max_iters {
        let ap = apply(&p);
        let p_ap = p.dot(&ap);
        if !p_ap.is_finite() || p_ap <= 0.0 {
            return Err(Error::Numerical(format!(
                "conjugate gradients: operator not positive definite (p'Ap = {p_ap:e} at iteration {iter})"
            )));
        }
        let alpha = rs / p_ap;
        x.scaled_add(alpha, &p);
        r.scaled_add(-alpha, &ap);
        let rs_new = r.dot(&r);
        if rs_new.sqrt() <= tol {
            return Ok((x, iter + 1));
        }
        let beta = rs_new / rs;
        p = &r + &(p * beta);
        rs = rs_new;
    }
    Err(Error::Numerical(format!(
        "conjugate gradients did not converge in {max_iters} iterations (residual {:.3e}, target {:.3e})",
        rs.sqrt(),
        tol
    )))
}

/// Spectral norm of a symmetric matrix by power iteration.
///
/// Deterministic: starts from a fixed ramp vector (which cannot be exactly
/// orthogonal to the dominant eigenvector of a generic matrix) and iterates
/// until the norm estimate stabilizes.
pub fn sym_spectral_norm(a: &Array2<f64>) -> f64 {
    let n = a.nrows();
    if n == 0 {
        return 0.0;
    }
    let mut x: Array1<f64> = Array1::from_iter((0..n).map(|i| 1.0 + 1e-3 * i as f64));
    let norm0 = x.dot(&x).sqrt();
    x.mapv_inplace(|v| v / norm0);

    let mut estimate = 0.0_f64;
    for _ in 0..300 {
        let y = a.dot(&x);
        let ny = y.dot(&y).sqrt();
        if ny == 0.0 || !ny.is_finite() {
            return 0.0;
        }
        let next = ny;
        x = y / ny;
        if (next - estimate).abs() <= 1e-13 * next.max(1.0) {
            return next;
        }
        estimate = next;
    }
    estimate
}

// ---------------------------------------------------------------------------
// Small statistics helpers
// ---------------------------------------------------------------------------

/// Least-squares slope of `ln(y)` against `ln(x)`.
///
/// All inputs must be strictly positive; used for runtime- and rate-scaling
/// checks where both axes live on a log scale.
pub fn loglog_slope(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() != ys.len() {
        return Err(Error::DimensionMismatch(format!(
            "loglog_slope: {} x values vs {} y values",
            xs.len(),
            ys.len()
        )));
    }
    if xs.len() < 2 {
        return Err(Error::InvalidArgument(
            "loglog_slope needs at least two points".into(),
        ));
    }
    if xs.iter().chain(ys.iter()).any(|&v| !(v > 0.0) || !v.is_finite()) {
        return Err(Error::InvalidArgument(
            "loglog_slope needs strictly positive finite inputs".into(),
        ));
    }
    let lx: Vec<f64> = xs.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|v| v.ln()).collect();
    let mx = lx.iter().sum::<f64>() / lx.len() as f64;
    let my = ly.iter().sum::<f64>() / ly.len() as f64;
    let mut num = 0.0;
    let mut den = 0.0;
    for (a, b) in lx.iter().zip(ly.iter()) {
        num += (a - mx) * (b - my);
        den += (a - mx) * (a - mx);
    }
    if den == 0.0 {
        return Err(Error::InvalidArgument(
            "loglog_slope: all x values identical".into(),
        ));
    }
    Ok(num / den)
}

/// Mean and sample standard deviation (n-1 denominator) of a slice.
pub fn mean_sd(v: &[f64]) -> (f64, f64) {
    let n = v.len();
    if n == 0 {
        return (0.0, 0.0);
    }
    let mean = v.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let ss: f64 = v.iter().map(|x| (x - mean) * (x - mean)).sum();
    (mean, (ss / (n - 1) as f64).sqrt())
}
