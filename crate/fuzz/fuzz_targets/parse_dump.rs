#![no_main]

use bos_core::dumps::{dump_to_bytes, parse_dump_bytes, DumpSchema};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let schema = DumpSchema {
        num_classes: Some(3),
        feature_dim: Some(8),
    };
    for schema in [DumpSchema::default(), schema] {
        if let Ok(records) = parse_dump_bytes(data, &schema) {
            let bytes = dump_to_bytes(&records, &schema).expect("parsed records serialize");
            assert_eq!(
                parse_dump_bytes(&bytes, &schema).expect("round trip"),
                records
            );
        }
    }
});
