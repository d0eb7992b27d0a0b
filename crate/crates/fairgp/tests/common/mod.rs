//! Shared helpers for the integration suites.
//!
//! The numeric checks here are deliberately independent of the library's
//! factored code paths: posteriors are computed through a dense n x n
//! inverse, marginal likelihoods through an eigendecomposition, subspace
//! angles straight from cross-Gram singular values. Where tests time wall
//! clocks they grab `timing_lock` so parallel test scheduling cannot distort
//! the measurements.

#![allow(dead_code)]

use std::f64::consts::PI;
use std::path::Path;
use std::process::Output;
use std::sync::{Mutex, MutexGuard, OnceLock};

use fairgp::cli::{
    DatasetConfig, ExperimentConfig, FitSection, KernelConfig, RunConfig, SubspaceConfig,
    TimingMode, TradeoffConfig,
};
use fairgp::fgp::{features, FgpModel};
use fairgp::{
    fair_nullspace, gram, orthonormalize, protected_sdr_union, sdr_subspace, FairBasis,
    FairnessCriterion, KernelMatrix, KernelSpec, OrthonormalBasis,
};
use ndarray::{s, Array1, Array2};
use ndarray_linalg::{Eigh, Inverse, SVD, UPLO};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// Serializes the wall-clock-sensitive tests.
pub fn timing_lock() -> MutexGuard<'static, ()> {
    static LOCK: OnceLock<Mutex<()>> = OnceLock::new();
    LOCK.get_or_init(|| Mutex::new(()))
        .lock()
        .unwrap_or_else(|poison| poison.into_inner())
}

// ---------------------------------------------------------------------------
// Random draws
// ---------------------------------------------------------------------------

pub fn randn(rng: &mut ChaCha8Rng, n: usize, p: usize) -> Array2<f64> {
    Array2::from_shape_fn((n, p), |_| rng.sample::<f64, _>(StandardNormal))
}

pub fn randn_vec(rng: &mut ChaCha8Rng, n: usize) -> Array1<f64> {
    Array1::from_shape_fn(n, |_| rng.sample::<f64, _>(StandardNormal))
}

// ---------------------------------------------------------------------------
// Dense matrix oracles
// ---------------------------------------------------------------------------

/// Largest absolute deviation of a square matrix from the identity.
pub fn max_dev_from_identity(a: &Array2<f64>) -> f64 {
    let mut worst = 0.0f64;
    for ((i, j), &v) in a.indexed_iter() {
        let target = if i == j { 1.0 } else { 0.0 };
        worst = worst.max((v - target).abs());
    }
    worst
}

pub fn max_abs(a: &Array2<f64>) -> f64 {
    a.iter().fold(0.0f64, |m, &v| m.max(v.abs()))
}

/// Singular values in LAPACK (non-increasing) order, via a direct dense SVD.
pub fn sing_vals(a: &Array2<f64>) -> Array1<f64> {
    let (_, sv, _) = a.svd(false, false).expect("dense svd");
    sv
}

/// One-sided projection distance between the spans of two kernel-orthonormal
/// coefficient bases: the largest sine over the min-dimension principal
/// angles, read straight off the cross-Gram singular values.
pub fn subspace_gap(k: &Array2<f64>, a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    let cross = a.t().dot(&k.dot(b));
    let sv = sing_vals(&cross);
    let c_min = sv.iter().fold(f64::INFINITY, |m, &v| m.min(v)).clamp(0.0, 1.0);
    (1.0 - c_min * c_min).max(0.0).sqrt()
}

/// Posterior mean and observation variance computed the expensive way: the
/// full n x n training covariance is formed and inverted densely. Zero prior
/// mean only.
pub fn dense_posterior(
    model: &FgpModel,
    y: &Array1<f64>,
    z: &Array2<f64>,
) -> (Array1<f64>, Array1<f64>) {
    assert!(
        model.beta.is_none(),
        "dense oracle covers the zero-mean model only"
    );
    let pi_x = features(model, &model.x_train).expect("train features");
    let pi_z = features(model, z).expect("query features");
    let lambda = model.log_lambda.mapv(f64::exp);
    let s2 = model.log_noise.exp();
    let n = pi_x.nrows();

    let mut c = (&pi_x * &lambda).dot(&pi_x.t());
    for i in 0..n {
        c[(i, i)] += s2;
    }
    let c_inv = c.inv().expect("dense covariance inverse");

    let cross = (&pi_z * &lambda).dot(&pi_x.t());
    let mean = cross.dot(&c_inv.dot(y));

    let prior = (&pi_z * &lambda).dot(&pi_z.t());
    let reduction = cross.dot(&c_inv).dot(&cross.t());
    let var = Array1::from_shape_fn(z.nrows(), |i| {
        (prior[(i, i)] - reduction[(i, i)]).max(0.0) + s2
    });
    (mean, var)
}

/// Log marginal likelihood through a dense eigendecomposition of the full
/// training covariance. Zero prior mean only.
pub fn dense_lml(model: &FgpModel, y: &Array1<f64>) -> f64 {
    assert!(model.beta.is_none());
    let pi_x = features(model, &model.x_train).expect("train features");
    let lambda = model.log_lambda.mapv(f64::exp);
    let s2 = model.log_noise.exp();
    let n = pi_x.nrows();

    let mut c = (&pi_x * &lambda).dot(&pi_x.t());
    for i in 0..n {
        c[(i, i)] += s2;
    }
    let (evals, evecs) = c.eigh(UPLO::Lower).expect("dense eigh");
    let yt = evecs.t().dot(y);
    let logdet: f64 = evals.iter().map(|&e| e.ln()).sum();
    let quad: f64 = yt
        .iter()
        .zip(evals.iter())
        .map(|(&a, &e)| a * a / e)
        .sum();
    -0.5 * quad - 0.5 * logdet - 0.5 * n as f64 * (2.0 * PI).ln()
}

/// Least-squares slope of log(y) against log(x).
pub fn fit_loglog_slope(xs: &[f64], ys: &[f64]) -> f64 {
    assert_eq!(xs.len(), ys.len());
    let n = xs.len() as f64;
    let lx: Vec<f64> = xs.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|v| v.ln()).collect();
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let cov: f64 = lx.iter().zip(&ly).map(|(a, b)| (a - mx) * (b - my)).sum();
    let var: f64 = lx.iter().map(|a| (a - mx) * (a - mx)).sum();
    cov / var
}

// ---------------------------------------------------------------------------
// Subspace instances for the identity suite
// ---------------------------------------------------------------------------

pub struct Instance {
    pub k: KernelMatrix,
    pub fair: FairBasis,
    pub f: OrthonormalBasis,
    pub g: OrthonormalBasis,
}

/// A small random regression instance with one protected attribute driving
/// part of the features, prepared up to the fair and predictive bases.
pub fn random_instance(seed: u64, n: usize) -> Instance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let prot = randn_vec(&mut rng, n);
    let hidden = randn_vec(&mut rng, n);
    let mut x = randn(&mut rng, n, 4);
    for i in 0..n {
        x[(i, 0)] += 0.8 * prot[i];
        x[(i, 1)] += 0.6 * hidden[i];
    }
    let noise = randn_vec(&mut rng, n);
    let y = Array1::from_shape_fn(n, |i| hidden[i] + 0.4 * x[(i, 2)] + 0.3 * noise[i]);
    let s_mat = prot.clone().insert_axis(ndarray::Axis(1));

    let ls = fairgp::kernel::median_heuristic_lengthscale(&x).expect("median lengthscale");
    let spec = KernelSpec::Rbf {
        lengthscale: ls,
        variance: 1.0,
    };
    let k = gram(&spec, &x).expect("gram");
    let w = protected_sdr_union(&k, &y, &s_mat, FairnessCriterion::StatisticalParity, 2, 1e-3)
        .expect("protected union");
    let fair = fair_nullspace(&k, &w).expect("fair nullspace");
    let f = orthonormalize(&k, &fair.q).expect("fair basis");
    let sdr = sdr_subspace(&k, &y, 3, 5, 1e-3).expect("target sdr");
    let g_cols = sdr.w.slice(s![.., ..3]).to_owned();
    let g = orthonormalize(&k, &g_cols).expect("predictive basis");
    Instance { k, fair, f, g }
}

// ---------------------------------------------------------------------------
// Experiment configs and the binary
// ---------------------------------------------------------------------------

/// In-code experiment config against the built-in planted generator.
pub fn planted_config(n: usize, binary: bool, seed: u64) -> ExperimentConfig {
    ExperimentConfig {
        dataset: DatasetConfig {
            source: format!("synthetic://planted?n={n}&binary={binary}"),
            test_fraction: 0.3,
            schema: None,
        },
        kernel: KernelConfig::default(),
        subspace: SubspaceConfig::default(),
        tradeoff: TradeoffConfig {
            eps: None,
            eps_grid: None,
        },
        fit: FitSection::default(),
        run: RunConfig {
            seed,
            timing_mode: TimingMode::Zeroed,
            ..RunConfig::default()
        },
    }
}

/// Runs the compiled experiment binary with the given arguments.
pub fn run_bin(args: &[&str]) -> Output {
    std::process::Command::new(env!("CARGO_BIN_EXE_fairgp"))
        .args(args)
        .output()
        .expect("spawn experiment binary")
}

/// Reads a rendered trade-off table back as header fields plus numeric rows.
pub fn read_table(path: &Path) -> (Vec<String>, Vec<Vec<f64>>) {
    let text = std::fs::read_to_string(path).expect("read table");
    let mut lines = text.lines();
    let header: Vec<String> = lines
        .next()
        .expect("table has a header")
        .split(',')
        .map(str::to_owned)
        .collect();
    let rows = lines
        .map(|line| {
            line.split(',')
                .map(|f| f.parse::<f64>().expect("numeric field"))
                .collect()
        })
        .collect();
    (header, rows)
}
