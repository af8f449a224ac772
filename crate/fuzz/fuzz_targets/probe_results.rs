#![no_main]

use libfuzzer_sys::fuzz_target;
use neurogate::probe::parse_probe_results;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        let _ = parse_probe_results(text);
    }
});
