#![no_main]

use bos_core::synthworld::WorldConfig;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(w) = WorldConfig::from_json(text) {
        assert_eq!(
            WorldConfig::from_json(&w.to_json().expect("serializes")).expect("round trip"),
            w
        );
    }
});
