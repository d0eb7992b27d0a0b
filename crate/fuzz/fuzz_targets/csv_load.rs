//! Fuzzes the CSV ingestion path against a fixed schema: header resolution,
//! field parsing, missing-value handling, and categorical encoding must
//! return errors on malformed input instead of panicking.

#![no_main]

use libfuzzer_sys::fuzz_target;

use fairgp::data::{load_csv_from_reader, ColumnKind, DatasetSchema, ProtectedColumn, TargetKind};

fn schema() -> DatasetSchema {
    DatasetSchema {
        target_column: "y".into(),
        target_kind: TargetKind::Continuous,
        protected_columns: vec![
            ProtectedColumn {
                name: "s".into(),
                kind: ColumnKind::Continuous,
            },
            ProtectedColumn {
                name: "g".into(),
                kind: ColumnKind::Categorical,
            },
        ],
        feature_columns: vec!["a".into(), "b".into(), "c".into()],
        categorical_feature_columns: vec!["c".into()],
    }
}

fuzz_target!(|data: &[u8]| {
    let _ = load_csv_from_reader(data, &schema());
});
