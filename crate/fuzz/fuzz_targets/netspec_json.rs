#![no_main]

use libfuzzer_sys::fuzz_target;
use sbnet::backbone::NetSpec;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(spec) = NetSpec::from_json(text) {
        let again = NetSpec::from_json(&spec.to_json()).expect("serialized spec parses");
        assert_eq!(again, spec);
        let _ = spec.stages();
    }
});
