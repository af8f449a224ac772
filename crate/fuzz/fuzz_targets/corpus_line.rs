#![no_main]

use libfuzzer_sys::fuzz_target;
use neurogate::synth::validate_corpus_line;

fuzz_target!(|data: &[u8]| {
    if let Ok(line) = std::str::from_utf8(data) {
        if let Ok(sample) = validate_corpus_line(line) {
            let reserialized = serde_json::to_string(&sample).unwrap();
            let again = validate_corpus_line(&reserialized).unwrap();
            assert_eq!(sample, again);
        }
    }
});
