#![no_main]

use libfuzzer_sys::fuzz_target;
use sbnet::cli::{apply_override, RunConfig};

// One `KEY=VALUE` assignment per line, applied in order to the default config.
fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    let mut value = serde_json::to_value(RunConfig::default()).expect("default config serializes");
    for line in text.lines() {
        if apply_override(&mut value, line).is_err() {
            return;
        }
    }
    let _ = serde_json::from_value::<RunConfig>(value);
});
