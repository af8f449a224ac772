#![no_main]

use libfuzzer_sys::fuzz_target;
use neurogate::gate::parse_gate_file;

fuzz_target!(|data: &[u8]| {
    if let Ok((gate, digest)) = parse_gate_file(data) {
        // accepted gates re-serialize to an equal gate
        let file = neurogate::gate::GateFile::from_gate(&gate, digest);
        let bytes = serde_json::to_vec(&file).unwrap();
        let (again, _) = parse_gate_file(&bytes).unwrap();
        assert_eq!(gate, again);
    }
});
