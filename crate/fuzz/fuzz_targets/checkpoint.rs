#![no_main]

use libfuzzer_sys::fuzz_target;
use neurogate::model::{decode_checkpoint, encode_checkpoint};

fuzz_target!(|data: &[u8]| {
    if let Ok(model) = decode_checkpoint(data) {
        // anything accepted must round-trip bit-exactly
        let bytes = encode_checkpoint(&model).unwrap();
        let again = decode_checkpoint(&bytes).unwrap();
        assert_eq!(bytes, encode_checkpoint(&again).unwrap());
    }
});
