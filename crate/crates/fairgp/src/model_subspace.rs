//! Trade-off model subspace between fairness and predictiveness.
//!
//! Given a fair coefficient basis F and a predictive coefficient basis G,
//! both orthonormal in the kernel metric, this module interpolates between
//! them with a single knob `eps` in [0, 1]. The construction rotates each
//! predictive direction toward the fair subspace just far enough that its
//! cosine with the fair subspace reaches `max(sigma_i, eps)`, where the
//! sigma_i are the singular values of F' K G (the cosines of the principal
//! angles between the two subspaces). `eps = 0` returns the predictive
//! subspace unchanged; `eps = 1` lands entirely inside the fair subspace.
//! The resulting basis keeps exact kernel-metric orthonormality, and its
//! distance to either endpoint is a closed-form function of `eps` and the
//! smallest cosine, which `projection_gaps` evaluates and
//! `empirical_projection_gap` measures on actual bases.

use ndarray::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernel::KernelMatrix;
use crate::linalg::{eigh_desc, ensure_finite_2d, max_abs, singular_values, svd_thin};

/// Treat a cosine this close to 1 as exactly 1 when computing the rotation
/// weight, whose formula divides by 1 - sigma^2.
const UNIT_COSINE_TOL: f64 = 1e-10;

/// Relative eigenvalue cutoff below which directions of a candidate basis
/// are considered numerically dependent and dropped.
const RANK_CUTOFF_REL: f64 = 1e-6;

// ---------------------------------------------------------------------------
// Kernel-metric orthonormalization
// ---------------------------------------------------------------------------

/// Coefficient basis whose feature-space functions are orthonormal in the
/// kernel metric: `coeffs' K coeffs = I`.
#[derive(Clone, Debug)]
pub struct OrthonormalBasis {
    pub coeffs: Array2<f64>,
    /// Eigenvalues of the input Gram `B' K B` that survived the rank cutoff,
    /// in descending order; the scaling that orthonormalized each column.
    pub eigvals: Array1<f64>,
}

impl OrthonormalBasis {
    pub fn dim(&self) -> usize {
        self.coeffs.ncols()
    }
}

/// Orthonormalizes the span of `B` in the kernel metric by eigendecomposing
/// `B' K B`, dropping near-null directions, and rescaling the survivors.
pub fn orthonormalize(k: &KernelMatrix, b: &Array2<f64>) -> Result<OrthonormalBasis> {
    let n = k.n();
    if b.nrows() != n {
        return Err(Error::DimensionMismatch(format!(
            "orthonormalize: kernel is {n}x{n} but basis has {} rows",
            b.nrows()
        )));
    }
    if b.ncols() == 0 {
        return Err(Error::DegenerateBasis(
            "orthonormalize: basis has no columns".into(),
        ));
    }
    ensure_finite_2d(b, "basis")?;

    let kb = k.as_array().dot(b);
    let g_raw = b.t().dot(&kb);
    let g = (&g_raw + &g_raw.t()) * 0.5;
    let (lam, v) = eigh_desc(&g)?;
    let lam_max = lam[0].max(0.0);
    let cutoff = RANK_CUTOFF_REL * lam_max;
    let kept = lam.iter().take_while(|&&l| l > cutoff && l > 0.0).count();
    if kept == 0 {
        return Err(Error::DegenerateBasis(
            "orthonormalize: all directions fall below the rank cutoff".into(),
        ));
    }
    let mut scaled = v.slice(s![.., 0..kept]).to_owned();
    for (i, mut col) in scaled.columns_mut().into_iter().enumerate() {
        let inv = 1.0 / lam[i].sqrt();
        col.mapv_inplace(|x| x * inv);
    }
    let coeffs = b.dot(&scaled);
    Ok(OrthonormalBasis {
        coeffs,
        eigvals: lam.slice(s![0..kept]).to_owned(),
    })
}

// ---------------------------------------------------------------------------
// Trade-off basis
// ---------------------------------------------------------------------------

/// Kernel-orthonormal basis of the trade-off subspace at a given `eps`,
/// together with the principal cosines it was built from.
#[derive(Clone, Debug)]
pub struct ModelBasis {
    /// Coefficient columns, `n x d`, kernel-orthonormal.
    pub e: Array2<f64>,
    /// Principal cosines between the fair and predictive subspaces,
    /// descending, clipped to [0, 1].
    pub sigma: Array1<f64>,
    /// Achieved cosines with the fair subspace: `gamma_i = max(sigma_i, eps)`.
    pub gamma: Array1<f64>,
    /// The trade-off level this basis was built at.
    pub epsilon: f64,
}

impl ModelBasis {
    /// Smallest principal cosine between the fair and predictive subspaces.
    pub fn sigma_min(&self) -> f64 {
        self.sigma[self.sigma.len() - 1]
    }
}

/// Builds the trade-off basis at level `eps` from a fair basis and a
/// predictive basis (both kernel-orthonormal). Each predictive direction is
/// rotated toward its paired fair direction within their common plane:
///
/// ```text
/// E_i = (gamma_i - rho_i * sigma_i) * F u_i  +  rho_i * G v_i
/// ```
///
/// with `gamma_i = max(sigma_i, eps)` and
/// `rho_i = sqrt((1 - gamma_i^2) / (1 - sigma_i^2))` (zero when the pair is
/// already aligned). The weights are chosen so the result stays
/// kernel-orthonormal and its cosines with the fair subspace are exactly the
/// `gamma_i`.
pub fn model_basis(
    k: &KernelMatrix,
    fair: &OrthonormalBasis,
    predictive: &OrthonormalBasis,
    eps: f64,
) -> Result<ModelBasis> {
    if !(0.0..=1.0).contains(&eps) || !eps.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "trade-off level must lie in [0, 1], got {eps}"
        )));
    }
    let n = k.n();
    if fair.coeffs.nrows() != n || predictive.coeffs.nrows() != n {
        return Err(Error::DimensionMismatch(
            "model_basis: basis row counts must match the kernel size".into(),
        ));
    }
    let r = fair.dim();
    let d = predictive.dim();
    if d > r {
        return Err(Error::InvalidArgument(format!(
            "predictive dimension d = {d} exceeds fair dimension r = {r}; \
             each predictive direction needs a fair partner"
        )));
    }

    let a = fair.coeffs.t().dot(&k.as_array().dot(&predictive.coeffs));
    let (u, sig_raw, vt) = svd_thin(&a)?;
    let sigma = sig_raw.mapv(|s| s.clamp(0.0, 1.0));

    let fu = fair.coeffs.dot(&u);
    let gv = predictive.coeffs.dot(&vt.t());
    let mut e = Array2::zeros((n, d));
    let mut gamma = Array1::zeros(d);
    for i in 0..d {
        let s = sigma[i];
        let g = s.max(eps);
        let rho = if s >= 1.0 - UNIT_COSINE_TOL {
            0.0
        } else {
            ((1.0 - g * g) / (1.0 - s * s)).sqrt()
        };
        let w_fair = g - rho * s;
        let mut col = e.column_mut(i);
        col.assign(&(&fu.column(i) * w_fair + &gv.column(i) * rho));
        gamma[i] = g;
    }
    ensure_finite_2d(&e, "trade-off basis")?;
    Ok(ModelBasis {
        e,
        sigma,
        gamma,
        epsilon: eps,
    })
}

// ---------------------------------------------------------------------------
// Gap formulas and measurement
// ---------------------------------------------------------------------------

/// Closed-form projection distances of the trade-off subspace to its two
/// endpoints.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProjectionGaps {
    /// Distance to the fair subspace: largest sine of a principal angle.
    pub fair_gap: f64,
    /// Distance to the predictive subspace.
    pub pred_gap: f64,
}

/// Evaluates the closed-form gaps for a given smallest principal cosine and
/// trade-off level. Inputs are clamped to [0, 1].
pub fn projection_gaps(sigma_min: f64, eps: f64) -> ProjectionGaps {
    let s = sigma_min.clamp(0.0, 1.0);
    let e = eps.clamp(0.0, 1.0);
    let worst_cos = e.max(s);
    let fair_gap = (1.0 - worst_cos * worst_cos).max(0.0).sqrt();
    let pred_gap = (e * (1.0 - s * s).sqrt() - s * (1.0 - e * e).sqrt()).max(0.0);
    ProjectionGaps { fair_gap, pred_gap }
}

/// Measures the projection distance between the spans of two
/// kernel-orthonormal bases: the largest sine over the min(d1, d2) principal
/// angles, read off the singular values of `A' K B`.
pub fn empirical_projection_gap(
    k: &KernelMatrix,
    basis_a: &Array2<f64>,
    basis_b: &Array2<f64>,
) -> Result<f64> {
    let n = k.n();
    for (name, b) in [("first", basis_a), ("second", basis_b)] {
        if b.nrows() != n {
            return Err(Error::DimensionMismatch(format!(
                "empirical_projection_gap: {name} basis has {} rows for a {n}x{n} kernel",
                b.nrows()
            )));
        }
        if b.ncols() == 0 {
            return Err(Error::InvalidArgument(format!(
                "empirical_projection_gap: {name} basis has no columns"
            )));
        }
        let gram = b.t().dot(&k.as_array().dot(b));
        let mut dev = gram;
        for i in 0..dev.nrows() {
            dev[(i, i)] -= 1.0;
        }
        if max_abs(&dev) > 1e-6 {
            return Err(Error::InvalidArgument(format!(
                "empirical_projection_gap: {name} basis is not kernel-orthonormal \
                 (deviation {:.3e})",
                max_abs(&dev)
            )));
        }
    }
    let cross = basis_a.t().dot(&k.as_array().dot(basis_b));
    let sig = singular_values(&cross)?;
    let smallest = sig[sig.len() - 1].clamp(0.0, 1.0);
    Ok((1.0 - smallest * smallest).max(0.0).sqrt())
}
