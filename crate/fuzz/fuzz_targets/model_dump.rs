//! Fuzzes the model-dump reader: JSON deserialization into the model
//! structure plus the format-version check. Malformed dumps must come back
//! as errors, never panics.

#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    let _ = fairgp::cli::parse_model_dump(text);
});
