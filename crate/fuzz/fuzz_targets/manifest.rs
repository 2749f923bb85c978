#![no_main]

use bos_core::dumps::SampleSetManifest;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(m) = SampleSetManifest::from_json(text) {
        let again =
            SampleSetManifest::from_json(&m.to_json().expect("serializes")).expect("round trip");
        assert_eq!(again, m);
    }
});
