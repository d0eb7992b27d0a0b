//! Kernel functions, Gram matrices, and centering.
//!
//! Two kernel families are supported: a radial basis function kernel and a
//! linear kernel, each with a variance scale. Gram construction goes through
//! a pairwise squared-distance (or inner-product) matrix so the result is
//! exactly symmetric by construction, and centering is applied as a rank-one
//! update rather than a dense projector product.

use ndarray::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;

// ---------------------------------------------------------------------------
// Kernel specification
// ---------------------------------------------------------------------------

/// Kernel family plus hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum KernelSpec {
    /// `variance * exp(-||x - z||^2 / (2 * lengthscale^2))`
    Rbf { lengthscale: f64, variance: f64 },
    /// `variance * <x, z>`
    Linear { variance: f64 },
}

impl KernelSpec {
    /// Checks hyperparameter positivity and finiteness.
    pub fn validate(&self) -> Result<()> {
        match *self {
            KernelSpec::Rbf {
                lengthscale,
                variance,
            } => {
                if !(lengthscale > 0.0) || !lengthscale.is_finite() {
                    return Err(Error::InvalidArgument(format!(
                        "rbf lengthscale must be a positive finite number, got {lengthscale}"
                    )));
                }
                if !(variance > 0.0) || !variance.is_finite() {
                    return Err(Error::InvalidArgument(format!(
                        "kernel variance must be a positive finite number, got {variance}"
                    )));
                }
            }
            KernelSpec::Linear { variance } => {
                if !(variance > 0.0) || !variance.is_finite() {
                    return Err(Error::InvalidArgument(format!(
                        "kernel variance must be a positive finite number, got {variance}"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Evaluates the kernel on a single pair of feature vectors.
pub fn eval(spec: &KernelSpec, x: &ArrayView1<f64>, z: &ArrayView1<f64>) -> Result<f64> {
    spec.validate()?;
    if x.len() != z.len() {
        return Err(Error::DimensionMismatch(format!(
            "kernel eval: feature dimensions {} vs {}",
            x.len(),
            z.len()
        )));
    }
    Ok(match *spec {
        KernelSpec::Rbf {
            lengthscale,
            variance,
        } => {
            let mut d2 = 0.0;
            for (a, b) in x.iter().zip(z.iter()) {
                let d = a - b;
                d2 += d * d;
            }
            variance * (-d2 / (2.0 * lengthscale * lengthscale)).exp()
        }
        KernelSpec::Linear { variance } => variance * x.dot(z),
    })
}

// ---------------------------------------------------------------------------
// KernelMatrix
// ---------------------------------------------------------------------------

/// A validated symmetric kernel (Gram) matrix.
///
/// Construction enforces squareness, finiteness, and symmetry; positive
/// semidefiniteness is a property of the generating kernel and is checked in
/// the test suites rather than on every construction (an eigendecomposition
/// per construction would dominate the cost of everything else).
#[derive(Clone, Debug)]
pub struct KernelMatrix {
    k: Array2<f64>,
}

impl KernelMatrix {
    /// Wraps an existing symmetric matrix, validating its invariants.
    pub fn new(k: Array2<f64>) -> Result<Self> {
        if k.nrows() != k.ncols() {
            return Err(Error::DimensionMismatch(format!(
                "kernel matrix must be square, got {}x{}",
                k.nrows(),
                k.ncols()
            )));
        }
        linalg::ensure_finite_2d(&k, "kernel matrix")?;
        let scale = linalg::max_abs(&k).max(1.0);
        let mut asym = 0.0_f64;
        for i in 0..k.nrows() {
            for j in (i + 1)..k.ncols() {
                asym = asym.max((k[(i, j)] - k[(j, i)]).abs());
            }
        }
        if asym > 1e-12 * scale {
            return Err(Error::InvalidArgument(format!(
                "kernel matrix not symmetric: max asymmetry {asym:.3e} exceeds tolerance"
            )));
        }
        Ok(KernelMatrix { k })
    }

    /// Number of points the matrix was built from.
    pub fn n(&self) -> usize {
        self.k.nrows()
    }

    /// Borrow the underlying matrix.
    pub fn as_array(&self) -> &Array2<f64> {
        &self.k
    }

    /// Consume and return the underlying matrix.
    pub fn into_array(self) -> Array2<f64> {
        self.k
    }

    /// The submatrix `K[idx, idx]`. With `idx` a permutation this reorders
    /// the points; with a subset it restricts to a principal submatrix.
    /// Either way symmetry is preserved exactly.
    pub fn principal_submatrix(&self, idx: &[usize]) -> Result<KernelMatrix> {
        let n = self.n();
        if let Some(&bad) = idx.iter().find(|&&i| i >= n) {
            return Err(Error::InvalidArgument(format!(
                "submatrix index {bad} out of range for n = {n}"
            )));
        }
        let m = idx.len();
        let mut out = Array2::zeros((m, m));
        for (a, &i) in idx.iter().enumerate() {
            for (b, &j) in idx.iter().enumerate() {
                out[(a, b)] = self.k[(i, j)];
            }
        }
        Ok(KernelMatrix { k: out })
    }
}

// ---------------------------------------------------------------------------
// Gram construction
// ---------------------------------------------------------------------------

/// Pairwise Gram matrix of the rows of `x`.
pub fn gram(spec: &KernelSpec, x: &Array2<f64>) -> Result<KernelMatrix> {
    spec.validate()?;
    let n = x.nrows();
    if n == 0 {
        return Err(Error::InvalidArgument("gram needs at least one row".into()));
    }
    linalg::ensure_finite_2d(x, "gram input data")?;

    // Inner-product matrix, symmetrized to remove accumulation-order noise.
    let mut xxt = x.dot(&x.t());
    for i in 0..n {
        for j in (i + 1)..n {
            let avg = 0.5 * (xxt[(i, j)] + xxt[(j, i)]);
            xxt[(i, j)] = avg;
            xxt[(j, i)] = avg;
        }
    }

    let k = match *spec {
        KernelSpec::Linear { variance } => xxt.mapv(|v| variance * v),
        KernelSpec::Rbf {
            lengthscale,
            variance,
        } => {
            let sq: Vec<f64> = (0..n).map(|i| xxt[(i, i)]).collect();
            let denom = 2.0 * lengthscale * lengthscale;
            let mut k = xxt;
            for i in 0..n {
                for j in 0..n {
                    if i == j {
                        k[(i, j)] = variance;
                    } else {
                        let d2 = (sq[i] + sq[j] - 2.0 * k[(i, j)]).max(0.0);
                        k[(i, j)] = variance * (-d2 / denom).exp();
                    }
                }
            }
            k
        }
    };
    KernelMatrix::new(k)
}

/// Kernel evaluations between test rows `z` and training rows `x`:
/// entry `(i, j)` is the kernel of `z_i` and `x_j`.
pub fn cross_gram(spec: &KernelSpec, z: &Array2<f64>, x: &Array2<f64>) -> Result<Array2<f64>> {
    spec.validate()?;
    if z.ncols() != x.ncols() {
        return Err(Error::DimensionMismatch(format!(
            "cross_gram: feature dimensions {} vs {}",
            z.ncols(),
            x.ncols()
        )));
    }
    linalg::ensure_finite_2d(z, "cross_gram test data")?;
    linalg::ensure_finite_2d(x, "cross_gram train data")?;

    let zx = z.dot(&x.t());
    Ok(match *spec {
        KernelSpec::Linear { variance } => zx.mapv(|v| variance * v),
        KernelSpec::Rbf {
            lengthscale,
            variance,
        } => {
            let sq_z: Vec<f64> = z.rows().into_iter().map(|r| r.dot(&r)).collect();
            let sq_x: Vec<f64> = x.rows().into_iter().map(|r| r.dot(&r)).collect();
            let denom = 2.0 * lengthscale * lengthscale;
            let mut out = zx;
            for i in 0..out.nrows() {
                for j in 0..out.ncols() {
                    let d2 = (sq_z[i] + sq_x[j] - 2.0 * out[(i, j)]).max(0.0);
                    out[(i, j)] = variance * (-d2 / denom).exp();
                }
            }
            out
        }
    })
}

/// `K` minus its column means: each column of the result sums to zero. This
/// is the centering projector applied from the left, done as a rank-one
/// update instead of a dense matrix product.
pub fn center_columns(k: &KernelMatrix) -> Array2<f64> {
    let mut out = k.as_array().clone();
    linalg::center_columns_mut(&mut out);
    out
}

/// Median pairwise Euclidean distance between rows, the standard neutral
/// bandwidth choice when none is given. For large inputs the median is taken
/// over a deterministic prefix of the rows to bound the cost.
pub fn median_heuristic_lengthscale(x: &Array2<f64>) -> Result<f64> {
    linalg::ensure_finite_2d(x, "median heuristic input")?;
    let cap = 1024usize;
    let n = x.nrows().min(cap);
    if n < 2 {
        return Err(Error::InvalidArgument(
            "median heuristic needs at least two rows".into(),
        ));
    }
    let mut dists = Vec::with_capacity(n * (n - 1) / 2);
    for i in 0..n {
        for j in (i + 1)..n {
            let mut d2 = 0.0;
            for (a, b) in x.row(i).iter().zip(x.row(j).iter()) {
                let d = a - b;
                d2 += d * d;
            }
            let d = d2.sqrt();
            if d > 0.0 {
                dists.push(d);
            }
        }
    }
    if dists.is_empty() {
        return Err(Error::DegenerateBasis(
            "median heuristic: all rows identical".into(),
        ));
    }
    dists.sort_by(|a, b| a.partial_cmp(b).expect("distances are finite"));
    Ok(dists[dists.len() / 2])
}
