//! Fairness and accuracy scores.
//!
//! Fairness is measured as the absolute Pearson correlation between the
//! prediction and each protected attribute, either marginally (statistical
//! parity), on the positive class (equality of opportunity), or as the worst
//! case over both classes (equalized odds). Correlation generalizes cleanly
//! to regression targets, which is why it is used uniformly instead of
//! discrete group-gap statistics.

use ndarray::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

// ---------------------------------------------------------------------------
// Correlation
// ---------------------------------------------------------------------------

/// An absolute-correlation score in [0, 1]. A constant input makes the
/// correlation undefined; by convention the score is then 0 with the
/// `degenerate` flag raised, so a constant (fair but useless) predictor is
/// never reported as a fairness violation, yet cannot silently game the
/// metric either.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorrScore {
    pub value: f64,
    pub degenerate: bool,
}

/// Absolute Pearson correlation of two equal-length vectors.
pub fn abs_corr(a: &ArrayView1<f64>, b: &ArrayView1<f64>) -> Result<CorrScore> {
    let n = a.len();
    if n != b.len() {
        return Err(Error::DimensionMismatch(format!(
            "abs_corr: {n} entries vs {}",
            b.len()
        )));
    }
    if n < 2 {
        return Err(Error::InvalidArgument(
            "abs_corr needs at least 2 entries".into(),
        ));
    }
    for &v in a.iter().chain(b.iter()) {
        if !v.is_finite() {
            return Err(Error::NonFinite("abs_corr input".into()));
        }
    }
    // Constancy detected on exact range, not on rounded variance.
    let constant = |v: &ArrayView1<f64>| {
        let first = v[0];
        v.iter().all(|&x| x == first)
    };
    if constant(a) || constant(b) {
        return Ok(CorrScore {
            value: 0.0,
            degenerate: true,
        });
    }
    let n_f = n as f64;
    let ma = a.sum() / n_f;
    let mb = b.sum() / n_f;
    let mut cov = 0.0;
    let mut va = 0.0;
    let mut vb = 0.0;
    for i in 0..n {
        let da = a[i] - ma;
        let db = b[i] - mb;
        cov += da * db;
        va += da * da;
        vb += db * db;
    }
    let denom = (va * vb).sqrt();
    if denom == 0.0 {
        return Ok(CorrScore {
            value: 0.0,
            degenerate: true,
        });
    }
    Ok(CorrScore {
        value: (cov / denom).abs().clamp(0.0, 1.0),
        degenerate: false,
    })
}

// ---------------------------------------------------------------------------
// Group-fairness scores
// ---------------------------------------------------------------------------

fn check_rows(yhat: &Array1<f64>, s: &Array2<f64>) -> Result<()> {
    if yhat.len() != s.nrows() {
        return Err(Error::DimensionMismatch(format!(
            "{} predictions vs {} protected rows",
            yhat.len(),
            s.nrows()
        )));
    }
    if s.ncols() == 0 {
        return Err(Error::InvalidArgument(
            "no protected attributes to score".into(),
        ));
    }
    Ok(())
}

/// Statistical-parity score per protected column: absolute correlation of
/// the prediction with the attribute over all rows.
pub fn sp_score(yhat: &Array1<f64>, s: &Array2<f64>) -> Result<Vec<CorrScore>> {
    check_rows(yhat, s)?;
    s.columns()
        .into_iter()
        .map(|col| abs_corr(&yhat.view(), &col))
        .collect()
}

/// Rows of one class of a binary label vector, named for error messages.
fn class_rows(y: &Array1<f64>, class: f64, name: &str) -> Result<Vec<usize>> {
    for (i, &v) in y.iter().enumerate() {
        if v != 0.0 && v != 1.0 {
            return Err(Error::InvalidArgument(format!(
                "labels must be binary in {{0, 1}}, found {v} at row {i}"
            )));
        }
    }
    let rows: Vec<usize> = y
        .iter()
        .enumerate()
        .filter(|(_, &v)| v == class)
        .map(|(i, _)| i)
        .collect();
    if rows.is_empty() {
        return Err(Error::EmptyClass(format!("{name} class is empty")));
    }
    if rows.len() < 2 {
        return Err(Error::EmptyClass(format!(
            "{name} class has a single row; scores need at least 2"
        )));
    }
    Ok(rows)
}

fn scores_on_rows(yhat: &Array1<f64>, s: &Array2<f64>, rows: &[usize]) -> Result<Vec<CorrScore>> {
    let sub_yhat = Array1::from_iter(rows.iter().map(|&i| yhat[i]));
    let mut out = Vec::with_capacity(s.ncols());
    for col in s.columns() {
        let sub_col = Array1::from_iter(rows.iter().map(|&i| col[i]));
        out.push(abs_corr(&sub_yhat.view(), &sub_col.view())?);
    }
    Ok(out)
}

/// Equality-of-opportunity score per protected column: correlation
/// restricted to the positive class.
pub fn eop_score(yhat: &Array1<f64>, s: &Array2<f64>, y: &Array1<f64>) -> Result<Vec<CorrScore>> {
    check_rows(yhat, s)?;
    if y.len() != yhat.len() {
        return Err(Error::DimensionMismatch(
            "label vector length differs from predictions".into(),
        ));
    }
    let pos = class_rows(y, 1.0, "positive")?;
    scores_on_rows(yhat, s, &pos)
}

/// Equalized-odds score per protected column: the worse of the two
/// class-conditional correlations.
pub fn eo_score(yhat: &Array1<f64>, s: &Array2<f64>, y: &Array1<f64>) -> Result<Vec<CorrScore>> {
    check_rows(yhat, s)?;
    if y.len() != yhat.len() {
        return Err(Error::DimensionMismatch(
            "label vector length differs from predictions".into(),
        ));
    }
    let pos = class_rows(y, 1.0, "positive")?;
    let neg = class_rows(y, 0.0, "negative")?;
    let on_pos = scores_on_rows(yhat, s, &pos)?;
    let on_neg = scores_on_rows(yhat, s, &neg)?;
    Ok(on_pos
        .into_iter()
        .zip(on_neg)
        .map(|(p, q)| {
            if p.value >= q.value {
                CorrScore {
                    value: p.value,
                    degenerate: p.degenerate && q.degenerate,
                }
            } else {
                CorrScore {
                    value: q.value,
                    degenerate: p.degenerate && q.degenerate,
                }
            }
        })
        .collect())
}

// ---------------------------------------------------------------------------
// Accuracy
// ---------------------------------------------------------------------------

/// Root mean squared error.
pub fn rmse(yhat: &Array1<f64>, y: &Array1<f64>) -> Result<f64> {
    if yhat.len() != y.len() {
        return Err(Error::DimensionMismatch(format!(
            "rmse: {} predictions vs {} targets",
            yhat.len(),
            y.len()
        )));
    }
    if yhat.is_empty() {
        return Err(Error::InvalidArgument("rmse of empty vectors".into()));
    }
    let sum: f64 = yhat
        .iter()
        .zip(y.iter())
        .map(|(&a, &b)| (a - b) * (a - b))
        .sum();
    Ok((sum / yhat.len() as f64).sqrt())
}

/// Fraction of label disagreements.
pub fn misclassification(yhat_labels: &Array1<f64>, y: &Array1<f64>) -> Result<f64> {
    if yhat_labels.len() != y.len() {
        return Err(Error::DimensionMismatch(format!(
            "misclassification: {} predictions vs {} targets",
            yhat_labels.len(),
            y.len()
        )));
    }
    if yhat_labels.is_empty() {
        return Err(Error::InvalidArgument(
            "misclassification of empty vectors".into(),
        ));
    }
    let wrong = yhat_labels
        .iter()
        .zip(y.iter())
        .filter(|(a, b)| a != b)
        .count();
    Ok(wrong as f64 / y.len() as f64)
}

/// Thresholds continuous scores at 0.5 into {0, 1} labels.
pub fn threshold_labels(yhat: &Array1<f64>) -> Array1<f64> {
    yhat.mapv(|v| if v >= 0.5 { 1.0 } else { 0.0 })
}

// ---------------------------------------------------------------------------
// Combined report
// ---------------------------------------------------------------------------

/// Fairness and accuracy summary of one prediction vector on a test set.
/// The class-conditional scores are present only for binary targets.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EvalReport {
    pub sp: Vec<CorrScore>,
    pub eop: Option<Vec<CorrScore>>,
    pub eo: Option<Vec<CorrScore>>,
    /// Misclassification rate for binary targets, RMSE otherwise.
    pub error: f64,
    pub n_test: usize,
}

/// Builds the full report. For binary targets the error is the
/// misclassification rate of the thresholded predictions, and fairness is
/// scored on the continuous predictions unless `score_on_labels` asks for
/// the thresholded ones.
pub fn eval_report(
    yhat: &Array1<f64>,
    s: &Array2<f64>,
    y: &Array1<f64>,
    binary_target: bool,
    score_on_labels: bool,
) -> Result<EvalReport> {
    check_rows(yhat, s)?;
    if y.len() != yhat.len() {
        return Err(Error::DimensionMismatch(
            "label vector length differs from predictions".into(),
        ));
    }
    if binary_target {
        let labels = threshold_labels(yhat);
        let scored = if score_on_labels { &labels } else { yhat };
        Ok(EvalReport {
            sp: sp_score(scored, s)?,
            eop: Some(eop_score(scored, s, y)?),
            eo: Some(eo_score(scored, s, y)?),
            error: misclassification(&labels, y)?,
            n_test: y.len(),
        })
    } else {
        Ok(EvalReport {
            sp: sp_score(yhat, s)?,
            eop: None,
            eo: None,
            error: rmse(yhat, y)?,
            n_test: y.len(),
        })
    }
}
