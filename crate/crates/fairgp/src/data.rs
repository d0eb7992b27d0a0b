//! Dataset ingestion, encoding, and splitting.
//!
//! CSV files come in with a header row; a schema names the target, the
//! protected attributes, and the features, and says which of them are
//! categorical. Loading encodes categoricals (one-hot for features, integer
//! codes for protected attributes), drops rows with missing cells in any
//! used column, and reports the drop count. Splitting is seeded and, for
//! binary targets, stratified; standardization statistics come from the
//! train split only and are applied unchanged to the test split.

use std::collections::BTreeMap;
use std::io::Read;
use std::path::Path;

use ndarray::prelude::*;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Cells treated as missing (after trimming whitespace, case-insensitive).
const MISSING_TOKENS: [&str; 3] = ["", "na", "?"];

// ---------------------------------------------------------------------------
// Schema
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetKind {
    Binary,
    Continuous,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ColumnKind {
    Categorical,
    Continuous,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProtectedColumn {
    pub name: String,
    pub kind: ColumnKind,
}

/// Which CSV columns play which role. Protected columns never enter the
/// feature matrix; they are carried separately so the model cannot see them.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSchema {
    pub target_column: String,
    pub target_kind: TargetKind,
    pub protected_columns: Vec<ProtectedColumn>,
    pub feature_columns: Vec<String>,
    #[serde(default)]
    pub categorical_feature_columns: Vec<String>,
}

impl DatasetSchema {
    pub fn validate(&self) -> Result<()> {
        if self.feature_columns.is_empty() {
            return Err(Error::Config("schema lists no feature columns".into()));
        }
        if self.protected_columns.is_empty() {
            return Err(Error::Config("schema lists no protected columns".into()));
        }
        let mut seen = std::collections::BTreeSet::new();
        let protected_names: Vec<&str> =
            self.protected_columns.iter().map(|p| p.name.as_str()).collect();
        for name in self
            .feature_columns
            .iter()
            .map(String::as_str)
            .chain(protected_names.iter().copied())
            .chain(std::iter::once(self.target_column.as_str()))
        {
            if !seen.insert(name) {
                return Err(Error::Config(format!(
                    "column '{name}' appears in more than one schema role"
                )));
            }
        }
        for cat in &self.categorical_feature_columns {
            if !self.feature_columns.contains(cat) {
                return Err(Error::Config(format!(
                    "categorical feature '{cat}' is not listed among feature columns"
                )));
            }
        }
        Ok(())
    }

    fn is_categorical_feature(&self, name: &str) -> bool {
        self.categorical_feature_columns.iter().any(|c| c == name)
    }
}

// ---------------------------------------------------------------------------
// Dataset
// ---------------------------------------------------------------------------

/// Encoded dataset: feature matrix, protected matrix, and target, with the
/// post-encoding column names for reporting.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub x: Array2<f64>,
    pub s: Array2<f64>,
    pub y: Array1<f64>,
    pub feature_names: Vec<String>,
    pub protected_names: Vec<String>,
    pub protected_kinds: Vec<ColumnKind>,
    pub target_name: String,
    pub target_kind: TargetKind,
}

impl Dataset {
    pub fn n(&self) -> usize {
        self.y.len()
    }

    fn take_rows(&self, rows: &[usize]) -> Dataset {
        let x = Array2::from_shape_fn((rows.len(), self.x.ncols()), |(i, j)| {
            self.x[(rows[i], j)]
        });
        let s = Array2::from_shape_fn((rows.len(), self.s.ncols()), |(i, j)| {
            self.s[(rows[i], j)]
        });
        let y = Array1::from_iter(rows.iter().map(|&i| self.y[i]));
        Dataset {
            x,
            s,
            y,
            feature_names: self.feature_names.clone(),
            protected_names: self.protected_names.clone(),
            protected_kinds: self.protected_kinds.clone(),
            target_name: self.target_name.clone(),
            target_kind: self.target_kind,
        }
    }
}

/// A loaded dataset plus ingestion accounting.
#[derive(Clone, Debug)]
pub struct LoadReport {
    pub dataset: Dataset,
    pub rows_read: usize,
    pub rows_dropped: usize,
}

// ---------------------------------------------------------------------------
// CSV loading
// ---------------------------------------------------------------------------

fn is_missing(cell: &str) -> bool {
    let t = cell.trim().to_ascii_lowercase();
    MISSING_TOKENS.contains(&t.as_str())
}

fn parse_number(cell: &str, row: usize, column: &str) -> Result<f64> {
    let t = cell.trim();
    t.parse::<f64>()
        .ok()
        .filter(|v| v.is_finite())
        .ok_or_else(|| {
            Error::Dataset(format!(
                "row {row}, column '{column}': cannot parse '{t}' as a finite number"
            ))
        })
}

/// Loads and encodes a CSV with a header row from any reader.
pub fn load_csv_from_reader<R: Read>(reader: R, schema: &DatasetSchema) -> Result<LoadReport> {
    schema.validate()?;
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(false)
        .from_reader(reader);

    let headers = rdr
        .headers()
        .map_err(|e| Error::Dataset(format!("cannot read CSV header: {e}")))?
        .clone();
    let col_index = |name: &str| -> Result<usize> {
        headers
            .iter()
            .position(|h| h.trim() == name)
            .ok_or_else(|| Error::Dataset(format!("column '{name}' not found in CSV header")))
    };

    let target_idx = col_index(&schema.target_column)?;
    let feature_idx: Vec<usize> = schema
        .feature_columns
        .iter()
        .map(|c| col_index(c))
        .collect::<Result<_>>()?;
    let protected_idx: Vec<usize> = schema
        .protected_columns
        .iter()
        .map(|p| col_index(&p.name))
        .collect::<Result<_>>()?;

    // First pass: keep raw cells of used columns for complete rows.
    let mut rows_read = 0usize;
    let mut rows_dropped = 0usize;
    let mut kept: Vec<(Vec<String>, Vec<String>, String)> = Vec::new();
    for (line, record) in rdr.records().enumerate() {
        let record =
            record.map_err(|e| Error::Dataset(format!("row {}: malformed CSV: {e}", line + 1)))?;
        rows_read += 1;
        let used: Vec<&str> = feature_idx
            .iter()
            .chain(protected_idx.iter())
            .chain(std::iter::once(&target_idx))
            .map(|&i| record.get(i).unwrap_or(""))
            .collect();
        if used.iter().any(|c| is_missing(c)) {
            rows_dropped += 1;
            continue;
        }
        let feats: Vec<String> = feature_idx
            .iter()
            .map(|&i| record.get(i).unwrap_or("").to_string())
            .collect();
        let prots: Vec<String> = protected_idx
            .iter()
            .map(|&i| record.get(i).unwrap_or("").to_string())
            .collect();
        let target = record.get(target_idx).unwrap_or("").to_string();
        kept.push((feats, prots, target));
    }
    if kept.is_empty() {
        return Err(Error::Dataset(
            "no usable rows after dropping incomplete ones".into(),
        ));
    }
    let n = kept.len();

    // Categorical level maps, sorted for determinism.
    let mut feature_levels: Vec<Option<BTreeMap<String, usize>>> =
        vec![None; schema.feature_columns.len()];
    for (j, name) in schema.feature_columns.iter().enumerate() {
        if schema.is_categorical_feature(name) {
            let mut levels = BTreeMap::new();
            for row in &kept {
                let level = row.0[j].trim().to_string();
                let next = levels.len();
                levels.entry(level).or_insert(next);
            }
            // Re-index in sorted key order.
            let sorted: BTreeMap<String, usize> = levels
                .keys()
                .cloned()
                .enumerate()
                .map(|(i, k)| (k, i))
                .collect();
            feature_levels[j] = Some(sorted);
        }
    }
    let mut protected_levels: Vec<Option<BTreeMap<String, usize>>> =
        vec![None; schema.protected_columns.len()];
    for (j, pcol) in schema.protected_columns.iter().enumerate() {
        if pcol.kind == ColumnKind::Categorical {
            let mut levels = BTreeMap::new();
            for row in &kept {
                let level = row.1[j].trim().to_string();
                let next = levels.len();
                levels.entry(level).or_insert(next);
            }
            let sorted: BTreeMap<String, usize> = levels
                .keys()
                .cloned()
                .enumerate()
                .map(|(i, k)| (k, i))
                .collect();
            protected_levels[j] = Some(sorted);
        }
    }

    // Encoded feature layout: continuous columns keep one slot, categorical
    // columns expand to one indicator per level.
    let mut feature_names = Vec::new();
    let mut slot_of_feature: Vec<usize> = Vec::new();
    for (j, name) in schema.feature_columns.iter().enumerate() {
        slot_of_feature.push(feature_names.len());
        match &feature_levels[j] {
            Some(levels) => {
                for level in levels.keys() {
                    feature_names.push(format!("{name}={level}"));
                }
            }
            None => feature_names.push(name.clone()),
        }
    }
    let p_enc = feature_names.len();

    let mut x = Array2::zeros((n, p_enc));
    let mut s = Array2::zeros((n, schema.protected_columns.len()));
    let mut y = Array1::zeros(n);
    for (i, (feats, prots, target)) in kept.iter().enumerate() {
        for (j, name) in schema.feature_columns.iter().enumerate() {
            let base = slot_of_feature[j];
            match &feature_levels[j] {
                Some(levels) => {
                    let code = levels[feats[j].trim()];
                    x[(i, base + code)] = 1.0;
                }
                None => {
                    x[(i, base)] = parse_number(&feats[j], i + 1, name)?;
                }
            }
        }
        for (j, pcol) in schema.protected_columns.iter().enumerate() {
            s[(i, j)] = match &protected_levels[j] {
                Some(levels) => levels[prots[j].trim()] as f64,
                None => parse_number(&prots[j], i + 1, &pcol.name)?,
            };
        }
        y[i] = parse_number(target, i + 1, &schema.target_column)?;
        if schema.target_kind == TargetKind::Binary && y[i] != 0.0 && y[i] != 1.0 {
            return Err(Error::Dataset(format!(
                "row {}, column '{}': binary target must be 0 or 1, got {}",
                i + 1,
                schema.target_column,
                y[i]
            )));
        }
    }

    Ok(LoadReport {
        dataset: Dataset {
            x,
            s,
            y,
            feature_names,
            protected_names: schema
                .protected_columns
                .iter()
                .map(|p| p.name.clone())
                .collect(),
            protected_kinds: schema.protected_columns.iter().map(|p| p.kind).collect(),
            target_name: schema.target_column.clone(),
            target_kind: schema.target_kind,
        },
        rows_read,
        rows_dropped,
    })
}

/// Loads and encodes a CSV file.
pub fn load_csv(path: &Path, schema: &DatasetSchema) -> Result<LoadReport> {
    let file = std::fs::File::open(path).map_err(|e| {
        Error::Dataset(format!("cannot open dataset '{}': {e}", path.display()))
    })?;
    load_csv_from_reader(std::io::BufReader::new(file), schema)
}

// ---------------------------------------------------------------------------
// Splitting and standardization
// ---------------------------------------------------------------------------

/// Per-column affine standardization computed on the train split. Columns
/// that are constant on the train split are centered but not rescaled.
fn standardize_pair(train: &mut Array2<f64>, test: &mut Array2<f64>) {
    let n = train.nrows() as f64;
    for j in 0..train.ncols() {
        let col = train.column(j);
        let mean = col.sum() / n;
        let var = col.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let sd = var.sqrt();
        let scale = if sd > 1e-12 { sd } else { 1.0 };
        train
            .column_mut(j)
            .mapv_inplace(|v| (v - mean) / scale);
        test.column_mut(j).mapv_inplace(|v| (v - mean) / scale);
    }
}

/// Seeded train/test split. Binary targets are stratified so both classes
/// appear on both sides; feature standardization (and standardization of
/// continuous protected columns) uses train statistics only. Scores are
/// affine-invariant, so standardizing the protected columns changes no
/// reported number; it only keeps downstream numerics well scaled.
pub fn split(ds: &Dataset, test_fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    let n = ds.n();
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "test fraction must lie strictly between 0 and 1, got {test_fraction}"
        )));
    }
    if n < 4 {
        return Err(Error::InvalidArgument(format!(
            "need at least 4 rows to split, got {n}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut test_rows: Vec<usize> = Vec::new();
    match ds.target_kind {
        TargetKind::Binary => {
            for class in [0.0, 1.0] {
                let mut rows: Vec<usize> = (0..n).filter(|&i| ds.y[i] == class).collect();
                if rows.len() < 2 {
                    return Err(Error::EmptyClass(format!(
                        "class {class} has {} rows; stratified splitting needs at least 2",
                        rows.len()
                    )));
                }
                rows.shuffle(&mut rng);
                let want = (test_fraction * rows.len() as f64).round() as usize;
                let take = want.clamp(1, rows.len() - 1);
                test_rows.extend_from_slice(&rows[..take]);
            }
        }
        TargetKind::Continuous => {
            let mut rows: Vec<usize> = (0..n).collect();
            rows.shuffle(&mut rng);
            let want = (test_fraction * n as f64).round() as usize;
            let take = want.clamp(1, n - 1);
            test_rows.extend_from_slice(&rows[..take]);
        }
    }
    test_rows.sort_unstable();
    let in_test: Vec<bool> = {
        let mut mask = vec![false; n];
        for &i in &test_rows {
            mask[i] = true;
        }
        mask
    };
    let train_rows: Vec<usize> = (0..n).filter(|&i| !in_test[i]).collect();

    let mut train = ds.take_rows(&train_rows);
    let mut test = ds.take_rows(&test_rows);
    standardize_pair(&mut train.x, &mut test.x);

    // Continuous protected columns get the same treatment, column by column.
    for (j, kind) in ds.protected_kinds.iter().enumerate() {
        if *kind == ColumnKind::Continuous {
            let nt = train.s.nrows() as f64;
            let col = train.s.column(j);
            let mean = col.sum() / nt;
            let var = col.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / nt;
            let sd = var.sqrt();
            let scale = if sd > 1e-12 { sd } else { 1.0 };
            train.s.column_mut(j).mapv_inplace(|v| (v - mean) / scale);
            test.s.column_mut(j).mapv_inplace(|v| (v - mean) / scale);
        }
    }
    Ok((train, test))
}
