//! Gaussian process regression over the trade-off subspace.
//!
//! The prior is a zero-mean GP whose covariance is `Pi(x) Lambda Pi(x')'`,
//! where `Pi(z) = (kappa(z, X) - 1 * colmeans(K)) E` maps a point to its
//! coordinates on the trade-off basis and `Lambda` is a positive diagonal
//! matrix of per-direction scales. Every sample path and every posterior
//! mean is, by construction, a function in the span of the basis, so
//! whatever structural guarantees the basis carries (for instance living
//! inside the fair subspace at full trade-off) transfer to the predictions.
//!
//! Because the covariance has rank at most `d` (the basis size), all solves
//! go through the d-by-d capacitance matrix `S = Pi'Pi + noise * Lambda^-1`
//! instead of the n-by-n training covariance; fitting and prediction cost
//! `O(n d^2)` after the feature map.

use std::f64::consts::PI;
use std::sync::OnceLock;

use ndarray::prelude::*;
use ndarray_linalg::{Cholesky, Solve, UPLO};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernel::{cross_gram, gram, KernelSpec};
use crate::linalg::{chol_solve_mat, chol_solve_vec, ensure_finite_1d, ensure_finite_2d};

/// Smallest allowed noise variance, as a fraction of the target variance.
const NOISE_FLOOR_REL: f64 = 1e-8;

/// Largest move of any single log hyperparameter in one line-search
/// candidate, keeping exponentials representable however wild the gradient.
const MAX_LOG_STEP: f64 = 50.0;

// ---------------------------------------------------------------------------
// Model type
// ---------------------------------------------------------------------------

/// Prior mean choice.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MeanMode {
    /// Zero-mean prior.
    #[default]
    Zero,
    /// Mean linear in the subspace features, `Pi(x) * beta`, with `beta`
    /// profiled out by generalized least squares during fitting. A mean
    /// linear in the raw inputs is deliberately not offered: it would leave
    /// the subspace and void its guarantees.
    LinearInFeatures,
}

/// A (possibly fitted) GP over a fixed trade-off basis.
///
/// All numeric fields serialize through JSON with shortest-round-trip float
/// formatting, so a dump/load cycle reproduces the model bit for bit.
#[derive(Debug, Serialize, Deserialize)]
pub struct FgpModel {
    pub spec: KernelSpec,
    pub x_train: Array2<f64>,
    /// Column means of the training kernel matrix (the centering offset of
    /// the feature map), length n.
    pub train_col_means: Array1<f64>,
    /// Trade-off basis coefficients, n x d.
    pub e: Array2<f64>,
    /// Log of the diagonal prior scales, length d.
    pub log_lambda: Array1<f64>,
    /// Log of the observation noise variance.
    pub log_noise: f64,
    pub mean_mode: MeanMode,
    /// Mean coefficients when `mean_mode` is linear; set by `fit`.
    pub beta: Option<Array1<f64>>,
    /// Cached solve of the training covariance against the residual
    /// targets; set by `fit`, required by `predict`.
    pub alpha: Option<Array1<f64>>,
    #[serde(skip, default)]
    cache: OnceLock<Workspace>,
}

impl Clone for FgpModel {
    fn clone(&self) -> Self {
        FgpModel {
            spec: self.spec.clone(),
            x_train: self.x_train.clone(),
            train_col_means: self.train_col_means.clone(),
            e: self.e.clone(),
            log_lambda: self.log_lambda.clone(),
            log_noise: self.log_noise,
            mean_mode: self.mean_mode,
            beta: self.beta.clone(),
            alpha: self.alpha.clone(),
            cache: OnceLock::new(),
        }
    }
}

impl FgpModel {
    /// Assembles an unfitted model, computing the feature-map centering
    /// offsets from the training kernel matrix.
    pub fn new(
        spec: KernelSpec,
        x_train: Array2<f64>,
        e: Array2<f64>,
        log_lambda: Array1<f64>,
        log_noise: f64,
        mean_mode: MeanMode,
    ) -> Result<Self> {
        spec.validate()?;
        let n = x_train.nrows();
        if n == 0 {
            return Err(Error::InvalidArgument("empty training set".into()));
        }
        if e.nrows() != n {
            return Err(Error::DimensionMismatch(format!(
                "basis has {} rows but training set has {n}",
                e.nrows()
            )));
        }
        if e.ncols() == 0 {
            return Err(Error::InvalidArgument("basis has no columns".into()));
        }
        if log_lambda.len() != e.ncols() {
            return Err(Error::DimensionMismatch(format!(
                "{} prior scales for a {}-column basis",
                log_lambda.len(),
                e.ncols()
            )));
        }
        ensure_finite_2d(&x_train, "training inputs")?;
        ensure_finite_2d(&e, "basis")?;
        ensure_finite_1d(&log_lambda, "log prior scales")?;
        if !log_noise.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "log noise must be finite, got {log_noise}"
            )));
        }
        let k = gram(&spec, &x_train)?;
        let n_f = n as f64;
        let train_col_means = k
            .as_array()
            .sum_axis(Axis(0))
            .mapv(|v| v / n_f);
        Ok(FgpModel {
            spec,
            x_train,
            train_col_means,
            e,
            log_lambda,
            log_noise,
            mean_mode,
            beta: None,
            alpha: None,
            cache: OnceLock::new(),
        })
    }

    pub fn n_train(&self) -> usize {
        self.x_train.nrows()
    }

    pub fn dim(&self) -> usize {
        self.e.ncols()
    }

    /// The cached capacitance factorization for this model's own
    /// hyperparameters, built on first use.
    fn workspace(&self) -> Result<&Workspace> {
        if let Some(ws) = self.cache.get() {
            return Ok(ws);
        }
        let pi = features(self, &self.x_train)?;
        let ws = Workspace::build(pi, &self.log_lambda, self.log_noise)?;
        Ok(self.cache.get_or_init(|| ws))
    }

    /// Prior mean at precomputed features.
    fn mean_at(&self, pi: &Array2<f64>) -> Array1<f64> {
        match (&self.mean_mode, &self.beta) {
            (MeanMode::LinearInFeatures, Some(beta)) => pi.dot(beta),
            _ => Array1::zeros(pi.nrows()),
        }
    }
}

// ---------------------------------------------------------------------------
// Feature map
// ---------------------------------------------------------------------------

/// Maps points to their coordinates on the trade-off basis:
/// `(kappa(Z, X) - 1 * colmeans(K)) E`, a t x d matrix.
pub fn features(model: &FgpModel, z: &Array2<f64>) -> Result<Array2<f64>> {
    if z.ncols() != model.x_train.ncols() {
        return Err(Error::DimensionMismatch(format!(
            "query points have {} features but the model was trained on {}",
            z.ncols(),
            model.x_train.ncols()
        )));
    }
    let mut cross = cross_gram(&model.spec, z, &model.x_train)?;
    for mut row in cross.rows_mut() {
        row -= &model.train_col_means;
    }
    Ok(cross.dot(&model.e))
}

// ---------------------------------------------------------------------------
// Capacitance workspace
// ---------------------------------------------------------------------------

/// Factored form of the training covariance
/// `C = Pi Lambda Pi' + s2 I`, stored through the d x d capacitance
/// `S = Pi'Pi + s2 Lambda^-1` so that
/// `C^-1 v = (v - Pi S^-1 Pi' v) / s2` and
/// `logdet C = (n - d) log s2 + sum(log lambda) + logdet S`.
#[derive(Debug)]
struct Workspace {
    pi: Array2<f64>,
    lambda: Array1<f64>,
    s2: f64,
    /// Lower Cholesky factor of the capacitance.
    l: Array2<f64>,
    /// `S^-1 B`.
    s_inv_b: Array2<f64>,
    logdet_c: f64,
}

impl Workspace {
    fn build(pi: Array2<f64>, log_lambda: &Array1<f64>, log_noise: f64) -> Result<Self> {
        let (n, d) = pi.dim();
        let lambda = log_lambda.mapv(f64::exp);
        let s2 = log_noise.exp();
        if !(s2 > 0.0) || !s2.is_finite() || lambda.iter().any(|&l| !(l > 0.0) || !l.is_finite()) {
            return Err(Error::InvalidArgument(
                "hyperparameters must stay finite and positive".into(),
            ));
        }
        ensure_finite_2d(&pi, "subspace features")?;
        let b = pi.t().dot(&pi);
        let mut s_mat = b.clone();
        for j in 0..d {
            s_mat[(j, j)] += s2 / lambda[j];
        }
        let l = s_mat.cholesky(UPLO::Lower).map_err(|e| {
            Error::Numerical(format!("capacitance matrix not positive definite: {e}"))
        })?;
        let logdet_s: f64 = (0..d).map(|j| l[(j, j)].ln()).sum::<f64>() * 2.0;
        let logdet_c =
            (n as f64 - d as f64) * log_noise + log_lambda.sum() + logdet_s;
        let s_inv_b = chol_solve_mat(&l, &b);
        Ok(Workspace {
            pi,
            lambda,
            s2,
            l,
            s_inv_b,
            logdet_c,
        })
    }

    /// `C^-1 v` through the capacitance.
    fn apply_cinv(&self, v: &Array1<f64>) -> Array1<f64> {
        let ptv = self.pi.t().dot(v);
        let sol = chol_solve_vec(&self.l, &ptv);
        let mut out = v - &self.pi.dot(&sol);
        out.mapv_inplace(|x| x / self.s2);
        out
    }

    /// `T = Pi' C^-1 Pi`, evaluated as
    /// `Lambda^-1 - s2 Lambda^-1 S^-1 Lambda^-1`.
    ///
    /// The textbook form `(B - B S^-1 B) / s2` is exact algebraically but
    /// divides rounding noise by `s2`; once the noise variance shrinks far
    /// below the feature scale the result is pure noise, which stalls the
    /// optimizer. The rewrite (substitute `B = S - s2 Lambda^-1`) keeps every
    /// term well conditioned for any `s2`.
    fn t_matrix(&self) -> Array2<f64> {
        let d = self.lambda.len();
        let mut lambda_inv = Array2::<f64>::zeros((d, d));
        for j in 0..d {
            lambda_inv[(j, j)] = 1.0 / self.lambda[j];
        }
        let mut t = chol_solve_mat(&self.l, &lambda_inv);
        for i in 0..d {
            for j in 0..d {
                t[(i, j)] *= -self.s2 / self.lambda[i];
            }
            t[(i, i)] += 1.0 / self.lambda[i];
        }
        t
    }

    /// Mean coefficients by generalized least squares:
    /// `beta = T^-1 Pi' C^-1 y`.
    fn gls_beta(&self, y: &Array1<f64>) -> Result<Array1<f64>> {
        let rhs = self.pi.t().dot(&self.apply_cinv(y));
        let t = self.t_matrix();
        t.solve(&rhs)
            .map_err(|e| Error::Numerical(format!("mean regression system is singular: {e}")))
    }

    fn lml(&self, resid: &Array1<f64>) -> f64 {
        let n = self.pi.nrows() as f64;
        let alpha = self.apply_cinv(resid);
        -0.5 * resid.dot(&alpha) - 0.5 * self.logdet_c - 0.5 * n * (2.0 * PI).ln()
    }

    /// Gradient of the evidence in (log scales, log noise) at a fixed
    /// residual vector.
    fn lml_gradient(&self, resid: &Array1<f64>) -> (Array1<f64>, f64) {
        let n = self.pi.nrows() as f64;
        let d = self.pi.ncols();
        let alpha = self.apply_cinv(resid);
        let w = self.pi.t().dot(&alpha);
        let t = self.t_matrix();
        let mut grad_lambda = Array1::zeros(d);
        for j in 0..d {
            grad_lambda[j] = 0.5 * self.lambda[j] * (w[j] * w[j] - t[(j, j)]);
        }
        let tr_s_inv_b: f64 = (0..d).map(|j| self.s_inv_b[(j, j)]).sum();
        let tr_cinv = (n - tr_s_inv_b) / self.s2;
        let grad_noise = 0.5 * self.s2 * (alpha.dot(&alpha) - tr_cinv);
        (grad_lambda, grad_noise)
    }
}

// ---------------------------------------------------------------------------
// Evidence and gradient (public surface)
// ---------------------------------------------------------------------------

fn residual_targets(model: &FgpModel, pi: &Array2<f64>, y: &Array1<f64>) -> Result<Array1<f64>> {
    if y.len() != model.n_train() {
        return Err(Error::DimensionMismatch(format!(
            "target vector has {} entries for {} training points",
            y.len(),
            model.n_train()
        )));
    }
    ensure_finite_1d(y, "targets")?;
    Ok(y - &model.mean_at(pi))
}

/// Log marginal likelihood of `y` under the model's current
/// hyperparameters (and stored mean coefficients, if any).
pub fn log_marginal_likelihood(model: &FgpModel, y: &Array1<f64>) -> Result<f64> {
    let ws = model.workspace()?;
    let resid = residual_targets(model, &ws.pi, y)?;
    Ok(ws.lml(&resid))
}

/// Analytic gradient of the evidence with respect to the log prior scales
/// (first) and the log noise variance (second), holding any mean
/// coefficients fixed.
pub fn lml_gradient(model: &FgpModel, y: &Array1<f64>) -> Result<(Array1<f64>, f64)> {
    let ws = model.workspace()?;
    let resid = residual_targets(model, &ws.pi, y)?;
    Ok(ws.lml_gradient(&resid))
}

// ---------------------------------------------------------------------------
// Fitting
// ---------------------------------------------------------------------------

/// Optimizer settings for hyperparameter fitting.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FitConfig {
    /// Maximum gradient-ascent iterations.
    pub max_iters: usize,
    /// Stop when the relative evidence improvement of an accepted step
    /// falls below this.
    pub convergence_tol: f64,
    /// Initial value for every log prior scale.
    pub init_log_lambda: f64,
    /// Initial log noise variance; defaults to one tenth of the target
    /// variance when absent.
    pub init_log_noise: Option<f64>,
    /// Initial gradient step size.
    pub init_step: f64,
    /// Smallest backtracking step before the search gives up.
    pub min_step: f64,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            max_iters: 200,
            convergence_tol: 1e-8,
            init_log_lambda: 0.0,
            init_log_noise: None,
            init_step: 0.1,
            min_step: 1e-6,
        }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_iters < 1 {
            return Err(Error::InvalidArgument("max_iters must be at least 1".into()));
        }
        if !(self.convergence_tol > 0.0) {
            return Err(Error::InvalidArgument(
                "convergence_tol must be positive".into(),
            ));
        }
        if !(self.init_step > 0.0) || !(self.min_step > 0.0) || self.min_step > self.init_step {
            return Err(Error::InvalidArgument(
                "step sizes must satisfy 0 < min_step <= init_step".into(),
            ));
        }
        if !self.init_log_lambda.is_finite()
            || self.init_log_noise.is_some_and(|v| !v.is_finite())
        {
            return Err(Error::InvalidArgument(
                "initial hyperparameters must be finite".into(),
            ));
        }
        Ok(())
    }
}

/// A fitted model together with its optimization trace.
#[derive(Clone, Debug)]
pub struct FitOutcome {
    pub model: FgpModel,
    /// Evidence at initialization followed by every accepted step;
    /// non-decreasing by construction.
    pub lml_trace: Vec<f64>,
    pub converged: bool,
    pub iterations: usize,
}

/// One candidate evaluation: evidence and (for the linear mean) the mean
/// coefficients profiled out at these hyperparameters.
fn evaluate(
    pi: &Array2<f64>,
    y: &Array1<f64>,
    log_lambda: &Array1<f64>,
    log_noise: f64,
    mean_mode: MeanMode,
) -> Result<(f64, Option<Array1<f64>>, Workspace)> {
    let ws = Workspace::build(pi.clone(), log_lambda, log_noise)?;
    let beta = match mean_mode {
        MeanMode::Zero => None,
        MeanMode::LinearInFeatures => Some(ws.gls_beta(y)?),
    };
    let resid = match &beta {
        Some(b) => y - &ws.pi.dot(b),
        None => y.clone(),
    };
    let f = ws.lml(&resid);
    Ok((f, beta, ws))
}

/// Fits the diagonal prior scales and the noise variance by gradient ascent
/// on the evidence with a backtracking line search. Accepted steps never
/// decrease the evidence; the returned model carries the best iterate and a
/// cached posterior solve.
pub fn fit(
    spec: &KernelSpec,
    x_train: &Array2<f64>,
    y: &Array1<f64>,
    e: &Array2<f64>,
    mean_mode: MeanMode,
    config: &FitConfig,
) -> Result<FitOutcome> {
    config.validate()?;
    let n = x_train.nrows();
    if n < 2 {
        return Err(Error::InvalidArgument(format!(
            "fitting needs at least 2 training points, got {n}"
        )));
    }
    let mut model = FgpModel::new(
        spec.clone(),
        x_train.to_owned(),
        e.to_owned(),
        Array1::from_elem(e.ncols(), config.init_log_lambda),
        0.0,
        mean_mode,
    )?;
    if y.len() != n {
        return Err(Error::DimensionMismatch(format!(
            "target vector has {} entries for {n} training points",
            y.len()
        )));
    }
    ensure_finite_1d(y, "targets")?;

    // Scale-aware noise initialization and floor.
    let y_mean = y.sum() / n as f64;
    let y_var = y.iter().map(|&v| (v - y_mean) * (v - y_mean)).sum::<f64>() / n as f64;
    let var_scale = y_var.max(1e-12);
    let floor_log_noise = (NOISE_FLOOR_REL * var_scale).ln();
    let init_log_noise = config
        .init_log_noise
        .unwrap_or_else(|| (0.1 * var_scale).ln())
        .max(floor_log_noise);

    let pi = features(&model, x_train)?;
    let d = model.dim();
    let mut log_lambda = Array1::from_elem(d, config.init_log_lambda);
    let mut log_noise = init_log_noise;

    let (mut f_cur, mut beta, _) = evaluate(&pi, y, &log_lambda, log_noise, mean_mode)
        .map_err(|err| Error::Numerical(format!("evidence undefined at initialization: {err}")))?;
    if !f_cur.is_finite() {
        return Err(Error::Numerical(format!(
            "evidence non-finite at initialization ({f_cur})"
        )));
    }
    let mut trace = vec![f_cur];
    let mut step = config.init_step;
    let mut converged = false;
    let mut iterations = 0usize;

    for _ in 0..config.max_iters {
        iterations += 1;
        let ws = Workspace::build(pi.clone(), &log_lambda, log_noise)?;
        let resid = match &beta {
            Some(b) => y - &ws.pi.dot(b),
            None => y.clone(),
        };
        let (g_lambda, g_noise) = ws.lml_gradient(&resid);
        let grad_norm = (g_lambda.dot(&g_lambda) + g_noise * g_noise).sqrt();
        if grad_norm <= 1e-12 * (1.0 + f_cur.abs()) {
            converged = true;
            break;
        }

        let mut local = step;
        let mut accepted = None;
        while local >= config.min_step {
            // Cap every coordinate's move so a blown-up gradient (prior
            // scales racing to zero once the noise floor is reached) still
            // proposes candidates whose exponentials are representable.
            let cand_lambda =
                &log_lambda + &g_lambda.mapv(|g| (local * g).clamp(-MAX_LOG_STEP, MAX_LOG_STEP));
            let cand_noise = (log_noise + (local * g_noise).clamp(-MAX_LOG_STEP, MAX_LOG_STEP))
                .max(floor_log_noise);
            match evaluate(&pi, y, &cand_lambda, cand_noise, mean_mode) {
                Ok((f_new, beta_new, _)) if f_new.is_finite() && f_new > f_cur => {
                    accepted = Some((cand_lambda, cand_noise, f_new, beta_new));
                    break;
                }
                _ => local *= 0.5,
            }
        }
        let Some((new_lambda, new_noise, f_new, beta_new)) = accepted else {
            break; // line search exhausted: we are at a numerical optimum
        };
        let rel_gain = (f_new - f_cur) / (1.0 + f_new.abs());
        log_lambda = new_lambda;
        log_noise = new_noise;
        f_cur = f_new;
        beta = beta_new;
        trace.push(f_cur);
        step = (local * 1.5).min(10.0);
        if rel_gain <= config.convergence_tol {
            converged = true;
            break;
        }
    }

    // Final model with the cached posterior solve.
    model.log_lambda = log_lambda;
    model.log_noise = log_noise;
    let ws = Workspace::build(pi, &model.log_lambda, model.log_noise)?;
    let resid = match &beta {
        Some(b) => y - &ws.pi.dot(b),
        None => y.clone(),
    };
    model.alpha = Some(ws.apply_cinv(&resid));
    model.beta = beta;
    let _ = model.cache.set(ws);

    Ok(FitOutcome {
        model,
        lml_trace: trace,
        converged,
        iterations,
    })
}

// ---------------------------------------------------------------------------
// Prediction and sampling
// ---------------------------------------------------------------------------

/// Posterior mean and variance at the query points, plus the number of
/// points whose pre-noise variance had to be clipped at zero.
pub fn predict_with_diagnostics(
    model: &FgpModel,
    z: &Array2<f64>,
) -> Result<(Array1<f64>, Array1<f64>, usize)> {
    let alpha = model
        .alpha
        .as_ref()
        .ok_or_else(|| Error::NotFitted)?;
    let ws = model.workspace()?;
    let pi_z = features(model, z)?;

    // mean = prior mean + Pi(z) Lambda Pi' alpha
    let u = &ws.pi.t().dot(alpha) * &ws.lambda;
    let mean = model.mean_at(&pi_z) + pi_z.dot(&u);

    // var_pre = pi' (Lambda - Lambda T Lambda) pi with T = Pi' C^-1 Pi.
    let t = ws.t_matrix();
    let d = model.dim();
    let mut quad = Array2::zeros((d, d));
    for i in 0..d {
        for j in 0..d {
            quad[(i, j)] = -ws.lambda[i] * t[(i, j)] * ws.lambda[j];
        }
    }
    for i in 0..d {
        quad[(i, i)] += ws.lambda[i];
    }
    let mut clipped = 0usize;
    let mut var = Array1::zeros(z.nrows());
    let pz_quad = pi_z.dot(&quad);
    for i in 0..z.nrows() {
        let v = pz_quad.row(i).dot(&pi_z.row(i));
        if v < 0.0 {
            clipped += 1;
        }
        var[i] = v.max(0.0) + ws.s2;
    }
    Ok((mean, var, clipped))
}

/// Posterior mean and variance at the query points.
pub fn predict(model: &FgpModel, z: &Array2<f64>) -> Result<(Array1<f64>, Array1<f64>)> {
    let (mean, var, _) = predict_with_diagnostics(model, z)?;
    Ok((mean, var))
}

/// One prior sample path evaluated at the query points: draws the
/// per-direction weights from the diagonal prior and combines the feature
/// map, so the sample is a genuine function in the basis span.
pub fn sample_prior(model: &FgpModel, z: &Array2<f64>, seed: u64) -> Result<Array1<f64>> {
    let pi_z = features(model, z)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = model.dim();
    let mut w = Array1::zeros(d);
    for j in 0..d {
        let g: f64 = rng.sample(StandardNormal);
        w[j] = (0.5 * model.log_lambda[j]).exp() * g;
    }
    Ok(pi_z.dot(&w))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernel::center_columns;
    use approx::assert_abs_diff_eq;
    use ndarray_linalg::Eigh;

    fn randn(rng: &mut ChaCha8Rng, n: usize, p: usize) -> Array2<f64> {
        Array2::from_shape_fn((n, p), |_| rng.sample(StandardNormal))
    }

    fn rbf() -> KernelSpec {
        KernelSpec::Rbf {
            lengthscale: 1.2,
            variance: 1.0,
        }
    }

    /// Random model with a kernel-orthonormal basis of the leading label
    /// directions, plus targets correlated with the inputs.
    fn random_model(
        seed: u64,
        n: usize,
        d: usize,
        log_lambda: f64,
        log_noise: f64,
    ) -> (FgpModel, Array1<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = randn(&mut rng, n, 3);
        let k = gram(&rbf(), &x).unwrap();
        let b = randn(&mut rng, n, d);
        let onb = crate::model_subspace::orthonormalize(&k, &b).unwrap();
        assert_eq!(onb.dim(), d);
        let noise: Array1<f64> = Array1::from_shape_fn(n, |_| rng.sample(StandardNormal));
        let y = x.column(0).mapv(|v| (1.5 * v).sin()) + 0.3 * &noise;
        let lam = Array1::from_elem(d, log_lambda);
        let model = FgpModel::new(rbf(), x, onb.coeffs, lam, log_noise, MeanMode::Zero).unwrap();
        (model, y)
    }

    /// Dense reference: explicit covariance, LU solve, eigenvalue log-det.
    /// No capacitance trick anywhere.
    fn dense_lml(model: &FgpModel, y: &Array1<f64>) -> f64 {
        let pi = features(model, &model.x_train).unwrap();
        let n = pi.nrows();
        let lambda = model.log_lambda.mapv(f64::exp);
        let s2 = model.log_noise.exp();
        let mut c = pi.dot(&Array2::from_diag(&lambda)).dot(&pi.t());
        for i in 0..n {
            c[(i, i)] += s2;
        }
        let alpha = c.solve(y).unwrap();
        let (eigs, _) = c.eigh(UPLO::Lower).unwrap();
        let logdet: f64 = eigs.iter().map(|&v| v.ln()).sum();
        -0.5 * y.dot(&alpha) - 0.5 * logdet - 0.5 * n as f64 * (2.0 * PI).ln()
    }

    // -- feature map ----------------------------------------------------------

    #[test]
    fn training_features_match_centered_kernel_product() {
        let (model, _) = random_model(1, 20, 3, 0.0, -1.0);
        let pi = features(&model, &model.x_train).unwrap();
        let k = gram(&model.spec, &model.x_train).unwrap();
        let direct = center_columns(&k).dot(&model.e);
        for (a, b) in pi.iter().zip(direct.iter()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-10);
        }
    }

    #[test]
    fn null_basis_gives_zero_features() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = randn(&mut rng, 8, 2);
        let model = FgpModel::new(
            rbf(),
            x.clone(),
            Array2::zeros((8, 2)),
            Array1::zeros(2),
            0.0,
            MeanMode::Zero,
        )
        .unwrap();
        let pi = features(&model, &x).unwrap();
        assert!(pi.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn hand_computed_single_point_feature() {
        // Linear kernel on scalar inputs 1 and 2: K = [[1,2],[2,4]], column
        // means (1.5, 3). Query z = 3 has cross row (3, 6), centered
        // (1.5, 3); with basis column (1, 1) the feature is 4.5.
        let x = arr2(&[[1.0], [2.0]]);
        let model = FgpModel::new(
            KernelSpec::Linear { variance: 1.0 },
            x,
            arr2(&[[1.0], [1.0]]),
            Array1::zeros(1),
            0.0,
            MeanMode::Zero,
        )
        .unwrap();
        let pi = features(&model, &arr2(&[[3.0]])).unwrap();
        assert_abs_diff_eq!(pi[(0, 0)], 4.5, epsilon = 1e-12);
    }

    #[test]
    fn features_reject_wrong_dimension() {
        let (model, _) = random_model(3, 10, 2, 0.0, -1.0);
        assert!(features(&model, &Array2::zeros((4, 7))).is_err());
    }

    // -- evidence ---------------------------------------------------------------

    #[test]
    fn single_point_standard_normal_evidence() {
        let model = FgpModel::new(
            KernelSpec::Linear { variance: 1.0 },
            arr2(&[[1.0]]),
            arr2(&[[0.7]]),
            Array1::zeros(1),
            0.0,
            MeanMode::Zero,
        )
        .unwrap();
        let lml = log_marginal_likelihood(&model, &arr1(&[0.0])).unwrap();
        assert_abs_diff_eq!(lml, -0.5 * (2.0 * PI).ln(), epsilon = 1e-12);
    }

    #[test]
    fn vanishing_prior_scales_give_iid_evidence() {
        let (mut model, y) = random_model(4, 15, 3, 0.0, -0.7);
        model.log_lambda.fill(-40.0);
        model.cache = OnceLock::new();
        let lml = log_marginal_likelihood(&model, &y).unwrap();
        let s2 = model.log_noise.exp();
        let n = y.len() as f64;
        let iid = -0.5 * y.dot(&y) / s2 - 0.5 * n * (2.0 * PI * s2).ln();
        assert_abs_diff_eq!(lml, iid, epsilon = 1e-8);
    }

    #[test]
    fn evidence_matches_dense_reference() {
        let (model, y) = random_model(5, 20, 4, 0.3, -1.2);
        let fast = log_marginal_likelihood(&model, &y).unwrap();
        let dense = dense_lml(&model, &y);
        assert_abs_diff_eq!(fast, dense, epsilon = 1e-8);
    }

    // -- gradient -----------------------------------------------------------------

    fn finite_difference_gradient(
        model: &FgpModel,
        y: &Array1<f64>,
        h: f64,
    ) -> (Array1<f64>, f64) {
        let d = model.dim();
        let mut g_lambda = Array1::zeros(d);
        for j in 0..d {
            let mut up = model.clone();
            up.log_lambda[j] += h;
            let mut down = model.clone();
            down.log_lambda[j] -= h;
            g_lambda[j] = (log_marginal_likelihood(&up, y).unwrap()
                - log_marginal_likelihood(&down, y).unwrap())
                / (2.0 * h);
        }
        let mut up = model.clone();
        up.log_noise += h;
        let mut down = model.clone();
        down.log_noise -= h;
        let g_noise = (log_marginal_likelihood(&up, y).unwrap()
            - log_marginal_likelihood(&down, y).unwrap())
            / (2.0 * h);
        (g_lambda, g_noise)
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let (model, y) = random_model(6, 15, 3, 0.4, -0.9);
        let (g_lambda, g_noise) = lml_gradient(&model, &y).unwrap();
        let (fd_lambda, fd_noise) = finite_difference_gradient(&model, &y, 1e-5);
        for j in 0..3 {
            let denom = fd_lambda[j].abs().max(1e-8);
            assert!(
                (g_lambda[j] - fd_lambda[j]).abs() / denom <= 1e-5,
                "scale gradient {j}: analytic {} vs numeric {}",
                g_lambda[j],
                fd_lambda[j]
            );
        }
        let denom = fd_noise.abs().max(1e-8);
        assert!(
            (g_noise - fd_noise).abs() / denom <= 1e-5,
            "noise gradient: analytic {g_noise} vs numeric {fd_noise}"
        );
    }

    #[test]
    fn zero_features_have_zero_scale_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = randn(&mut rng, 10, 2);
        let model = FgpModel::new(
            rbf(),
            x,
            Array2::zeros((10, 2)),
            Array1::zeros(2),
            -0.5,
            MeanMode::Zero,
        )
        .unwrap();
        let y = Array1::from_shape_fn(10, |_| rng.sample(StandardNormal));
        let (g_lambda, _) = lml_gradient(&model, &y).unwrap();
        // Zero up to the rounding floor of the capacitance solve.
        assert!(g_lambda.iter().all(|&v| v.abs() <= 1e-12));
    }

    // -- fit ------------------------------------------------------------------------

    #[test]
    fn fit_trace_is_monotone_and_improves() {
        let (model, y) = random_model(8, 60, 3, 0.0, 0.0);
        let outcome = fit(
            &model.spec,
            &model.x_train,
            &y,
            &model.e,
            MeanMode::Zero,
            &FitConfig::default(),
        )
        .unwrap();
        let trace = &outcome.lml_trace;
        assert!(trace.len() >= 2, "optimizer never accepted a step");
        for w in trace.windows(2) {
            assert!(w[1] >= w[0], "evidence decreased: {} -> {}", w[0], w[1]);
        }
        assert!(trace[trace.len() - 1] > trace[0]);
        assert!(outcome.model.alpha.is_some());
    }

    #[test]
    fn fit_on_null_targets_drives_noise_to_floor() {
        let (model, _) = random_model(9, 30, 2, 0.0, 0.0);
        let y = Array1::zeros(30);
        let outcome = fit(
            &model.spec,
            &model.x_train,
            &y,
            &model.e,
            MeanMode::Zero,
            &FitConfig {
                max_iters: 400,
                ..FitConfig::default()
            },
        )
        .unwrap();
        let floor = (NOISE_FLOOR_REL * 1e-12_f64).ln();
        assert!(outcome.model.log_noise >= floor);
        // Evidence approaches the iid value at the final noise level. The
        // iid value is the supremum (scales at exactly zero), approached as
        // the scales shrink, so allow a short asymptotic tail.
        let s2 = outcome.model.log_noise.exp();
        let iid = -0.5 * 30.0 * (2.0 * PI * s2).ln();
        let lml = outcome.lml_trace[outcome.lml_trace.len() - 1];
        assert!(
            lml <= iid + 1e-9 && iid - lml <= 1e-2,
            "lml {lml} vs iid {iid} at log_noise {} (floor {floor}), λ {:?}, {} iters, converged {}",
            outcome.model.log_noise,
            outcome.model.log_lambda,
            outcome.iterations,
            outcome.converged,
        );
    }

    #[test]
    fn fit_matches_or_beats_generating_hyperparameters() {
        // Data drawn from the prior itself: the optimizer must reach at
        // least the evidence of the generator's own hyperparameters.
        let (model, _) = random_model(10, 300, 3, 0.0, 0.0);
        let true_log_lambda = arr1(&[0.5, -0.3, 0.2]);
        let true_log_noise = (0.05_f64).ln();
        let mut gen_model = model.clone();
        gen_model.log_lambda = true_log_lambda;
        gen_model.log_noise = true_log_noise;
        gen_model.cache = OnceLock::new();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let pi = features(&gen_model, &gen_model.x_train).unwrap();
        let mut w = Array1::zeros(3);
        for j in 0..3 {
            let g: f64 = rng.sample(StandardNormal);
            w[j] = (0.5 * gen_model.log_lambda[j]).exp() * g;
        }
        let noise: Array1<f64> = Array1::from_shape_fn(300, |_| rng.sample(StandardNormal));
        let y = pi.dot(&w) + (0.5 * true_log_noise).exp() * &noise;

        let lml_true = log_marginal_likelihood(&gen_model, &y).unwrap();
        let outcome = fit(
            &gen_model.spec,
            &gen_model.x_train,
            &y,
            &gen_model.e,
            MeanMode::Zero,
            &FitConfig {
                max_iters: 500,
                ..FitConfig::default()
            },
        )
        .unwrap();
        let lml_fit = *outcome.lml_trace.last().unwrap();
        assert!(
            lml_fit >= lml_true - 1e-3,
            "fit evidence {lml_fit} below generator evidence {lml_true}"
        );
    }

    #[test]
    fn linear_mean_recovers_strong_offset() {
        let (model, _) = random_model(12, 80, 2, 0.0, 0.0);
        let pi = features(&model, &model.x_train).unwrap();
        let beta_true = arr1(&[3.0, -2.0]);
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let noise: Array1<f64> = Array1::from_shape_fn(80, |_| rng.sample(StandardNormal));
        let y = pi.dot(&beta_true) + 0.05 * &noise;
        let outcome = fit(
            &model.spec,
            &model.x_train,
            &y,
            &model.e,
            MeanMode::LinearInFeatures,
            &FitConfig::default(),
        )
        .unwrap();
        let beta = outcome.model.beta.as_ref().unwrap();
        for j in 0..2 {
            assert_abs_diff_eq!(beta[j], beta_true[j], epsilon = 0.2);
        }
        // The profiled mean must not break the ascent property.
        for w in outcome.lml_trace.windows(2) {
            assert!(w[1] >= w[0]);
        }
    }

    // -- prediction -------------------------------------------------------------------

    /// Dense posterior reference with explicit covariance solves.
    fn dense_posterior(
        model: &FgpModel,
        y: &Array1<f64>,
        z: &Array2<f64>,
    ) -> (Array1<f64>, Array1<f64>) {
        let pi_train = features(model, &model.x_train).unwrap();
        let pi_z = features(model, z).unwrap();
        let lambda = Array2::from_diag(&model.log_lambda.mapv(f64::exp));
        let s2 = model.log_noise.exp();
        let n = pi_train.nrows();
        let mut c = pi_train.dot(&lambda).dot(&pi_train.t());
        for i in 0..n {
            c[(i, i)] += s2;
        }
        let alpha = c.solve(y).unwrap();
        let cross = pi_z.dot(&lambda).dot(&pi_train.t()); // t×n
        let mean = cross.dot(&alpha);
        let mut var = Array1::zeros(z.nrows());
        for i in 0..z.nrows() {
            let prior = pi_z.row(i).dot(&lambda.dot(&pi_z.row(i).to_owned()));
            let k_i = cross.row(i).to_owned();
            let sol = c.solve(&k_i).unwrap();
            var[i] = (prior - k_i.dot(&sol)).max(0.0) + s2;
        }
        (mean, var)
    }

    #[test]
    fn posterior_matches_dense_reference() {
        let (model, y) = random_model(14, 25, 3, 0.2, -1.0);
        let outcome = fit(
            &model.spec,
            &model.x_train,
            &y,
            &model.e,
            MeanMode::Zero,
            &FitConfig {
                max_iters: 30,
                ..FitConfig::default()
            },
        )
        .unwrap();
        let fitted = &outcome.model;
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let z = randn(&mut rng, 7, 3);
        let (mean, var) = predict(fitted, &z).unwrap();
        let (dmean, dvar) = dense_posterior(fitted, &y, &z);
        for i in 0..7 {
            assert_abs_diff_eq!(mean[i], dmean[i], epsilon = 1e-8);
            assert_abs_diff_eq!(var[i], dvar[i], epsilon = 1e-8);
        }
    }

    #[test]
    fn near_noiseless_model_interpolates_representable_targets() {
        let (model, _) = random_model(16, 20, 3, 0.0, 0.0);
        let pi = features(&model, &model.x_train).unwrap();
        let c = arr1(&[1.0, -0.5, 2.0]);
        let y = pi.dot(&c); // exactly representable signal
        let outcome = fit(
            &model.spec,
            &model.x_train,
            &y,
            &model.e,
            MeanMode::Zero,
            &FitConfig {
                max_iters: 60,
                init_log_noise: Some((1e-9_f64).ln()),
                ..FitConfig::default()
            },
        )
        .unwrap();
        let (mean, _) = predict(&outcome.model, &model.x_train).unwrap();
        for i in 0..20 {
            assert_abs_diff_eq!(mean[i], y[i], epsilon = 1e-3);
        }
    }

    #[test]
    fn vanishing_prior_predicts_zero_with_noise_variance() {
        let (model, y) = random_model(17, 15, 2, 0.0, -0.4);
        let mut degenerate = model.clone();
        degenerate.log_lambda.fill(-45.0);
        let ws_pi = features(&degenerate, &degenerate.x_train).unwrap();
        let lam = degenerate.log_lambda.mapv(f64::exp);
        let s2 = degenerate.log_noise.exp();
        // Manually condition: alpha ≈ y / s2 in the vanishing-prior limit.
        let ws = Workspace::build(ws_pi, &degenerate.log_lambda, degenerate.log_noise).unwrap();
        degenerate.alpha = Some(ws.apply_cinv(&y));
        let mut rng = ChaCha8Rng::seed_from_u64(18);
        let z = randn(&mut rng, 5, 3);
        let (mean, var) = predict(&degenerate, &z).unwrap();
        for i in 0..5 {
            assert_abs_diff_eq!(mean[i], 0.0, epsilon = 1e-10);
            assert_abs_diff_eq!(var[i], s2, epsilon = 1e-10);
        }
        let _ = lam;
    }

    #[test]
    fn predict_requires_fit() {
        let (model, _) = random_model(19, 10, 2, 0.0, -1.0);
        let err = predict(&model, &model.x_train).unwrap_err();
        assert!(matches!(err, Error::NotFitted));
    }

    // -- sampling ---------------------------------------------------------------------

    #[test]
    fn prior_samples_are_deterministic_and_span_constrained() {
        let (model, _) = random_model(20, 18, 3, 0.3, -1.0);
        let s1 = sample_prior(&model, &model.x_train, 99).unwrap();
        let s2 = sample_prior(&model, &model.x_train, 99).unwrap();
        assert_eq!(s1, s2);
        let s3 = sample_prior(&model, &model.x_train, 100).unwrap();
        assert!(s1 != s3);

        // The sample lies in the column space of the training features.
        let pi = features(&model, &model.x_train).unwrap();
        let gram = pi.t().dot(&pi);
        let rhs = pi.t().dot(&s1);
        let coef = gram.solve(&rhs).unwrap();
        let resid = &s1 - &pi.dot(&coef);
        assert!(resid.dot(&resid).sqrt() <= 1e-10);
    }

    #[test]
    fn sample_covariance_matches_prior_covariance() {
        let (model, _) = random_model(21, 15, 2, 0.4, -1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let z = randn(&mut rng, 3, 3);
        let pi_z = features(&model, &z).unwrap();
        let lambda = Array2::from_diag(&model.log_lambda.mapv(f64::exp));
        let want = pi_z.dot(&lambda).dot(&pi_z.t());

        let reps = 10_000;
        let mut acc = Array2::<f64>::zeros((3, 3));
        for seed in 0..reps {
            let s = sample_prior(&model, &z, seed).unwrap();
            for i in 0..3 {
                for j in 0..3 {
                    acc[(i, j)] += s[i] * s[j];
                }
            }
        }
        acc.mapv_inplace(|v| v / reps as f64);
        let num = (&acc - &want).mapv(|v| v * v).sum().sqrt();
        let den = want.mapv(|v| v * v).sum().sqrt();
        assert!(
            num / den <= 0.05,
            "sample covariance off by {:.1}% relative",
            100.0 * num / den
        );
    }

    // -- serialization -------------------------------------------------------------------

    #[test]
    fn serialization_round_trip_is_bit_stable() {
        let (model, y) = random_model(23, 20, 3, 0.1, -0.8);
        let outcome = fit(
            &model.spec,
            &model.x_train,
            &y,
            &model.e,
            MeanMode::Zero,
            &FitConfig {
                max_iters: 15,
                ..FitConfig::default()
            },
        )
        .unwrap();
        let fitted = outcome.model;
        let json1 = serde_json::to_string(&fitted).unwrap();
        let back: FgpModel = serde_json::from_str(&json1).unwrap();
        assert_eq!(fitted.x_train, back.x_train);
        assert_eq!(fitted.train_col_means, back.train_col_means);
        assert_eq!(fitted.e, back.e);
        assert_eq!(fitted.log_lambda, back.log_lambda);
        assert!(fitted.log_noise == back.log_noise);
        assert_eq!(fitted.alpha, back.alpha);
        let json2 = serde_json::to_string(&back).unwrap();
        assert_eq!(json1, json2);

        // And the reloaded model predicts identically.
        let (m1, v1) = predict(&fitted, &fitted.x_train).unwrap();
        let (m2, v2) = predict(&back, &back.x_train).unwrap();
        assert_eq!(m1, m2);
        assert_eq!(v1, v2);
    }
}
