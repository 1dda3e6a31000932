#![no_main]

use libfuzzer_sys::fuzz_target;
use polysweep::io::{certificate_to_json, parse_certificate_json};

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(cert) = parse_certificate_json(text) {
        let again = parse_certificate_json(&certificate_to_json(&cert).to_string());
        assert!(again.is_ok());
    }
});
