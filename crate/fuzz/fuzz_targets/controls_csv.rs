#![no_main]

use libfuzzer_sys::fuzz_target;
use polysweep::io::{expand_controls, parse_controls_csv};

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(rows) = parse_controls_csv(text) {
        if let Some(dim) = rows.first().map(|r| r.len()) {
            let _ = expand_controls(&rows, 16, dim);
        }
    }
});
