#![no_main]

use bos_core::matching::StabilityOptions;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    let _ = StabilityOptions::from_json(text);
});
