//! Fuzzes the trade-off grid flag parser.

#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    let _ = fairgp::cli::parse_eps_grid(text);
});
