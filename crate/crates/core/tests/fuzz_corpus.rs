//! Replays the checked-in fuzz corpus through the parsers with the same
//! round-trip properties the fuzz targets assert.

use std::path::PathBuf;

use bos_core::baselines::{fd_score, GaussianStats};
use bos_core::dumps::{dump_to_bytes, parse_dump_bytes, DumpSchema, SampleSetManifest};
use bos_core::matching::StabilityOptions;
use bos_core::synthworld::WorldConfig;

fn seeds(target: &str) -> Vec<(PathBuf, Vec<u8>)> {
    let dir = PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("../../fuzz/corpus")
        .join(target);
    let mut out: Vec<_> = std::fs::read_dir(&dir)
        .unwrap()
        .map(|e| {
            let p = e.unwrap().path();
            let bytes = std::fs::read(&p).unwrap();
            (p, bytes)
        })
        .collect();
    out.sort();
    assert!(!out.is_empty(), "no seeds in {}", dir.display());
    out
}

#[test]
fn parse_dump_seeds() {
    let mut parsed = 0;
    for (path, data) in seeds("parse_dump") {
        let schema = DumpSchema::default();
        if let Ok(records) = parse_dump_bytes(&data, &schema) {
            parsed += 1;
            let bytes = dump_to_bytes(&records, &schema).unwrap();
            assert_eq!(
                parse_dump_bytes(&bytes, &schema).unwrap(),
                records,
                "{}",
                path.display()
            );
        }
    }
    assert!(parsed >= 2);
}

#[test]
fn manifest_seeds() {
    for (path, data) in seeds("manifest") {
        let m = SampleSetManifest::from_json(std::str::from_utf8(&data).unwrap()).unwrap();
        assert_eq!(
            SampleSetManifest::from_json(&m.to_json().unwrap()).unwrap(),
            m,
            "{}",
            path.display()
        );
    }
}

#[test]
fn gaussian_stats_seeds() {
    for (_, data) in seeds("gaussian_stats") {
        let s = GaussianStats::from_json(std::str::from_utf8(&data).unwrap()).unwrap();
        assert!(fd_score(&s, &s).unwrap().abs() <= 1e-6);
    }
}

#[test]
fn world_config_seeds() {
    for (_, data) in seeds("world_config") {
        let w = WorldConfig::from_json(std::str::from_utf8(&data).unwrap()).unwrap();
        assert_eq!(WorldConfig::from_json(&w.to_json().unwrap()).unwrap(), w);
    }
}

#[test]
fn stability_options_seeds() {
    for (_, data) in seeds("stability_options") {
        StabilityOptions::from_json(std::str::from_utf8(&data).unwrap()).unwrap();
    }
}
