//! Fuzzes the experiment-config pipeline: TOML deserialization followed by
//! structural validation. Both must reject garbage with an error, never a
//! panic.

#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(cfg) = toml::from_str::<fairgp::cli::ExperimentConfig>(text) {
        let _ = cfg.validate();
    }
});
