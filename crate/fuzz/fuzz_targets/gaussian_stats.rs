#![no_main]

use bos_core::baselines::{fd_score, GaussianStats};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(s) = GaussianStats::from_json(text) {
        if s.dimension <= 64 {
            if let Ok(fd) = fd_score(&s, &s) {
                assert!(fd >= 0.0);
            }
        }
    }
});
