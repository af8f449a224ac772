#![no_main]

use libfuzzer_sys::fuzz_target;
use neurogate::pipeline::parse_run_config;

fuzz_target!(|data: &[u8]| {
    if let Ok(cfg) = parse_run_config(data) {
        let bytes = serde_json::to_vec(&cfg).unwrap();
        let again = parse_run_config(&bytes).unwrap();
        assert_eq!(cfg, again);
    }
});
