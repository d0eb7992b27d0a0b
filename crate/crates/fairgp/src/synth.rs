//! Built-in synthetic dataset with a planted protected signal.
//!
//! The generator draws a scalar protected attribute `s` and an independent
//! latent `u`, then builds three feature columns that are noisy functions of
//! `s` (linear, quadratic, and sinusoidal) and three that expose `u`. The
//! target mixes a protected component with an `s`-independent component, so
//! the protected signal is predictive but removable: a model barred from the
//! `s`-driven directions can still explain the `u` part of the target.

use ndarray::prelude::*;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::data::{ColumnKind, Dataset, TargetKind};

/// Weight of the protected component in the target.
const PROTECTED_WEIGHT: f64 = 0.45;
/// Weight of the independent component in the target.
const INDEPENDENT_WEIGHT: f64 = 0.9;
/// Observation noise level on the target.
const TARGET_NOISE: f64 = 0.5;
/// Noise level on the s-driven feature columns.
const FEATURE_NOISE: f64 = 0.05;

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

struct Planted {
    x: Array2<f64>,
    s: Array1<f64>,
    score: Array1<f64>,
    noise: Array1<f64>,
}

/// Draws the shared structure once; the binary and continuous variants only
/// differ in how the score becomes a target.
fn draw(n: usize, seed: u64) -> Planted {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x = Array2::zeros((n, 6));
    let mut s = Array1::zeros(n);
    let mut score = Array1::zeros(n);
    let mut noise = Array1::zeros(n);
    for i in 0..n {
        let si = normal(&mut rng);
        let u1 = normal(&mut rng);
        let u2 = normal(&mut rng);
        let u3 = normal(&mut rng);
        s[i] = si;
        x[(i, 0)] = si + FEATURE_NOISE * normal(&mut rng);
        x[(i, 1)] = 0.8 * si * si - 0.8 + FEATURE_NOISE * normal(&mut rng);
        x[(i, 2)] = (1.5 * si).sin() + FEATURE_NOISE * normal(&mut rng);
        x[(i, 3)] = u1;
        x[(i, 4)] = u2;
        x[(i, 5)] = u3;
        score[i] = PROTECTED_WEIGHT * si
            + INDEPENDENT_WEIGHT * (u1 + 0.5 * (2.0 * u2).tanh());
        noise[i] = normal(&mut rng);
    }
    Planted { x, s, score, noise }
}

fn assemble(p: Planted, y: Array1<f64>, target_kind: TargetKind) -> Dataset {
    Dataset {
        x: p.x,
        s: p.s.insert_axis(Axis(1)),
        y,
        feature_names: (0..6).map(|j| format!("x{j}")).collect(),
        protected_names: vec!["s".into()],
        protected_kinds: vec![ColumnKind::Continuous],
        target_name: "y".into(),
        target_kind,
    }
}

/// Continuous-target variant: the target is the planted score plus noise.
pub fn planted(n: usize, seed: u64) -> Dataset {
    let p = draw(n, seed);
    let y = &p.score + &(TARGET_NOISE * &p.noise);
    assemble(p, y, TargetKind::Continuous)
}

/// Binary-target variant: the same noisy score, thresholded at zero.
pub fn planted_binary(n: usize, seed: u64) -> Dataset {
    let p = draw(n, seed);
    let y = Array1::from_shape_fn(p.score.len(), |i| {
        ((p.score[i] + TARGET_NOISE * p.noise[i]) > 0.0) as u8 as f64
    });
    assemble(p, y, TargetKind::Binary)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::abs_corr;

    #[test]
    fn deterministic_per_seed() {
        let a = planted(100, 42);
        let b = planted(100, 42);
        assert_eq!(a, b);
        let c = planted(100, 43);
        assert!(a.x != c.x);
    }

    #[test]
    fn shapes_and_kinds() {
        let ds = planted(50, 1);
        assert_eq!(ds.x.dim(), (50, 6));
        assert_eq!(ds.s.dim(), (50, 1));
        assert_eq!(ds.y.len(), 50);
        assert_eq!(ds.target_kind, TargetKind::Continuous);
        let db = planted_binary(50, 1);
        assert_eq!(db.target_kind, TargetKind::Binary);
        assert!(db.y.iter().all(|&v| v == 0.0 || v == 1.0));
    }

    #[test]
    fn binary_variant_thresholds_the_same_draw() {
        let ds = planted(200, 9);
        let db = planted_binary(200, 9);
        assert_eq!(ds.x, db.x);
        assert_eq!(ds.s, db.s);
        for i in 0..200 {
            assert_eq!(db.y[i], (ds.y[i] > 0.0) as u8 as f64);
        }
    }

    #[test]
    fn planted_correlations_have_the_designed_structure() {
        let ds = planted(4000, 7);
        let s = ds.s.column(0);
        // First feature tracks s almost perfectly; u-features do not.
        let c0 = abs_corr(&ds.x.column(0), &s).unwrap();
        assert!(c0.value > 0.99, "x0 vs s: {}", c0.value);
        for j in 3..6 {
            let cj = abs_corr(&ds.x.column(j), &s).unwrap();
            assert!(cj.value < 0.05, "x{j} vs s: {}", cj.value);
        }
        // Target correlates with s (planted) and with u1 (independent part).
        let cy = abs_corr(&ds.y.view(), &s).unwrap();
        assert!(cy.value > 0.2 && cy.value < 0.6, "y vs s: {}", cy.value);
        let cu = abs_corr(&ds.y.view(), &ds.x.column(3)).unwrap();
        assert!(cu.value > 0.5, "y vs u1: {}", cu.value);
    }

    #[test]
    fn binary_classes_are_roughly_balanced() {
        let db = planted_binary(2000, 3);
        let pos = db.y.iter().filter(|&&v| v == 1.0).count();
        assert!(pos > 700 && pos < 1300, "positives: {pos}");
    }
}
