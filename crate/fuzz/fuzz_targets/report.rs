#![no_main]

use libfuzzer_sys::fuzz_target;
use neurogate::eval::parse_report;

fuzz_target!(|data: &[u8]| {
    let _ = parse_report(data);
});
