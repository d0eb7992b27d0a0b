//! Fair kernel subspace learning and fair Gaussian process regression.
//!
//! The library builds predictors whose sample paths live in a subspace of an
//! RKHS chosen to balance two goals: tracking the target, and being
//! statistically unrelated to protected attributes. The pieces compose in a
//! fixed order:
//!
//! 1. [`kernel`] evaluates kernels and Gram matrices;
//! 2. [`sdr`] estimates sliced-regression subspaces that capture how a
//!    target depends on the inputs;
//! 3. [`fair_subspace`] turns per-attribute SDR bases into the subspace of
//!    functions uncorrelated with every protected attribute (optionally
//!    class-conditionally);
//! 4. [`model_subspace`] blends the fair and predictive subspaces into one
//!    basis whose principal angles to the fair subspace are controlled by a
//!    single level `eps` in `[0, 1]`;
//! 5. [`fgp`] fits a Gaussian process whose prior is supported on that
//!    basis, with evidence-gradient hyperparameter tuning;
//! 6. [`metrics`] scores predictions for accuracy and fairness;
//! 7. [`data`] and [`synth`] supply datasets; [`cli`] wires everything into
//!    a config-driven experiment runner.
//!
//! Everything is deterministic for fixed seeds: fixed-seed RNGs, ordered
//! reductions, and a pure-Rust matrix multiply make repeated runs reproduce
//! byte-identical outputs.

pub mod cli;
pub mod data;
pub mod error;
pub mod fair_subspace;
pub mod fgp;
pub mod kernel;
pub mod linalg;
pub mod metrics;
pub mod model_subspace;
pub mod sdr;
pub mod synth;

pub use error::{Error, Result};
pub use fair_subspace::{fair_nullspace, protected_sdr_union, FairBasis, FairnessCriterion};
pub use fgp::{fit, predict, FgpModel, FitConfig, FitOutcome, MeanMode};
pub use kernel::{gram, KernelMatrix, KernelSpec};
pub use metrics::{eval_report, EvalReport};
pub use model_subspace::{model_basis, orthonormalize, ModelBasis, OrthonormalBasis};
pub use sdr::{sdr_subspace, SdrResult};
