#![no_main]

use libfuzzer_sys::fuzz_target;
use polysweep::io::parse_solution_json;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        let _ = parse_solution_json(text);
    }
});
