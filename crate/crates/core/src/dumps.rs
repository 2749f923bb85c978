//! Detection dumps: the exchange format between a detector runtime and this
//! crate.
//!
//! A dump is UTF-8 text with one JSON object per line, one line per image:
//!
//! ```text
//! {"image_id":"000001","original":[[x1,y1,x2,y2,score,class_id,[p0,p1,..]]],"perturbed":[...],"ground_truth":[[x1,y1,x2,y2,class_id]],"feature":[f0,f1,..]}
//! ```
//!
//! `original` and `perturbed` hold the detections of the unperturbed and the
//! perturbed inference pass. The trailing class-probability array of a
//! detection is optional. `ground_truth` and `feature` are omitted when
//! absent; an empty `ground_truth` array means a labeled image without
//! objects. Blank lines are ignored.
//!
//! A sample set is described by a [`SampleSetManifest`], stored as a JSON
//! document next to its dump files.

use std::collections::HashSet;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::ser::SerializeSeq;
use serde::{Deserialize, Serialize, Serializer};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::geometry::BBox;

/// Allowed deviation of a probability vector's sum from 1.
pub const PROB_SUM_TOLERANCE: f64 = 1e-4;

/// Backbone stages a dropout layer may follow.
pub const MAX_STAGE: u8 = 3;

#[derive(Debug, Clone, PartialEq)]
pub struct DetectionRecord {
    pub bbox: BBox,
    /// Confidence in `[0, 1]`. Authoritative for ranking even when `probs`
    /// disagrees.
    pub score: f64,
    pub class_id: u32,
    pub probs: Option<Vec<f64>>,
}

impl DetectionRecord {
    pub fn new(bbox: BBox, score: f64, class_id: u32) -> Self {
        Self {
            bbox,
            score,
            class_id,
            probs: None,
        }
    }

    pub fn with_probs(mut self, probs: Vec<f64>) -> Self {
        self.probs = Some(probs);
        self
    }

    fn validate(&self, field: &str, schema: &DumpSchema) -> Result<()> {
        if !(self.score.is_finite() && (0.0..=1.0).contains(&self.score)) {
            return Err(Error::validation(
                format!("{field}.score"),
                format!("score out of range: {}", self.score),
            ));
        }
        if let Some(k) = schema.num_classes {
            if self.class_id as usize >= k {
                return Err(Error::validation(
                    format!("{field}.class_id"),
                    format!("class {} not below declared class count {k}", self.class_id),
                ));
            }
        }
        if let Some(probs) = &self.probs {
            let pfield = format!("{field}.probs");
            if probs.is_empty() {
                return Err(Error::validation(pfield, "empty probability vector"));
            }
            if let Some(k) = schema.num_classes {
                if probs.len() != k {
                    return Err(Error::validation(
                        pfield,
                        format!("length {} does not match class count {k}", probs.len()),
                    ));
                }
            }
            if probs.iter().any(|p| !p.is_finite() || *p < 0.0) {
                return Err(Error::validation(
                    pfield,
                    "entries must be finite and non-negative",
                ));
            }
            let sum: f64 = probs.iter().sum();
            if (sum - 1.0).abs() > PROB_SUM_TOLERANCE {
                return Err(Error::validation(
                    pfield,
                    format!("sums to {sum}, expected 1"),
                ));
            }
        }
        Ok(())
    }

    fn from_value(v: &Value, field: &str) -> Result<Self> {
        let items = v
            .as_array()
            .ok_or_else(|| Error::validation(field, "detection must be an array"))?;
        if items.len() != 6 && items.len() != 7 {
            return Err(Error::validation(
                field,
                format!("expected 6 or 7 elements, found {}", items.len()),
            ));
        }
        let bbox = bbox_from_values(&items[..4], field)?;
        let score = number(&items[4], &format!("{field}.score"))?;
        let class_id = class_id(&items[5], &format!("{field}.class_id"))?;
        let probs = match items.get(6) {
            None | Some(Value::Null) => None,
            Some(p) => Some(number_vec(p, &format!("{field}.probs"))?),
        };
        Ok(Self {
            bbox,
            score,
            class_id,
            probs,
        })
    }
}

impl Serialize for DetectionRecord {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        let len = if self.probs.is_some() { 7 } else { 6 };
        let mut seq = serializer.serialize_seq(Some(len))?;
        for c in self.bbox.to_array() {
            seq.serialize_element(&c)?;
        }
        seq.serialize_element(&self.score)?;
        seq.serialize_element(&self.class_id)?;
        if let Some(p) = &self.probs {
            seq.serialize_element(p)?;
        }
        seq.end()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GroundTruthBox {
    pub bbox: BBox,
    pub class_id: u32,
}

impl GroundTruthBox {
    pub fn new(bbox: BBox, class_id: u32) -> Self {
        Self { bbox, class_id }
    }

    fn from_value(v: &Value, field: &str) -> Result<Self> {
        let items = v
            .as_array()
            .ok_or_else(|| Error::validation(field, "ground-truth box must be an array"))?;
        if items.len() != 5 {
            return Err(Error::validation(
                field,
                format!("expected 5 elements, found {}", items.len()),
            ));
        }
        Ok(Self {
            bbox: bbox_from_values(&items[..4], field)?,
            class_id: class_id(&items[4], &format!("{field}.class_id"))?,
        })
    }
}

impl Serialize for GroundTruthBox {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        let mut seq = serializer.serialize_seq(Some(5))?;
        for c in self.bbox.to_array() {
            seq.serialize_element(&c)?;
        }
        seq.serialize_element(&self.class_id)?;
        seq.end()
    }
}

/// One image: detections of both passes plus optional labels and a pooled
/// backbone feature.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ImageRecord {
    pub image_id: String,
    pub original: Vec<DetectionRecord>,
    pub perturbed: Vec<DetectionRecord>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ground_truth: Option<Vec<GroundTruthBox>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub feature: Option<Vec<f64>>,
}

impl ImageRecord {
    pub fn new(image_id: impl Into<String>) -> Self {
        Self {
            image_id: image_id.into(),
            original: Vec::new(),
            perturbed: Vec::new(),
            ground_truth: None,
            feature: None,
        }
    }

    pub fn validate(&self, schema: &DumpSchema) -> Result<()> {
        if self.image_id.is_empty() {
            return Err(Error::validation("image_id", "must be non-empty"));
        }
        for (i, d) in self.original.iter().enumerate() {
            d.validate(&format!("original[{i}]"), schema)?;
        }
        for (i, d) in self.perturbed.iter().enumerate() {
            d.validate(&format!("perturbed[{i}]"), schema)?;
        }
        if let (Some(gt), Some(k)) = (&self.ground_truth, schema.num_classes) {
            for (i, g) in gt.iter().enumerate() {
                if g.class_id as usize >= k {
                    return Err(Error::validation(
                        format!("ground_truth[{i}].class_id"),
                        format!("class {} not below declared class count {k}", g.class_id),
                    ));
                }
            }
        }
        if let Some(f) = &self.feature {
            if f.iter().any(|v| !v.is_finite()) {
                return Err(Error::validation("feature", "entries must be finite"));
            }
            if let Some(d) = schema.feature_dim {
                if f.len() != d {
                    return Err(Error::validation(
                        "feature",
                        format!("length {} does not match declared dimension {d}", f.len()),
                    ));
                }
            }
        }
        Ok(())
    }

    fn from_value(v: Value) -> Result<Self> {
        let Value::Object(mut map) = v else {
            return Err(Error::validation("record", "expected a JSON object"));
        };
        let image_id = match map.remove("image_id") {
            Some(Value::String(s)) => s,
            Some(_) => return Err(Error::validation("image_id", "must be a string")),
            None => return Err(Error::validation("image_id", "missing")),
        };
        let dets = |map: &mut serde_json::Map<String, Value>, key: &str| -> Result<Vec<_>> {
            match map.remove(key) {
                None | Some(Value::Null) => Ok(Vec::new()),
                Some(Value::Array(items)) => items
                    .iter()
                    .enumerate()
                    .map(|(i, d)| DetectionRecord::from_value(d, &format!("{key}[{i}]")))
                    .collect(),
                Some(_) => Err(Error::validation(key, "must be an array")),
            }
        };
        let original = dets(&mut map, "original")?;
        let perturbed = dets(&mut map, "perturbed")?;
        let ground_truth = match map.remove("ground_truth") {
            None | Some(Value::Null) => None,
            Some(Value::Array(items)) => Some(
                items
                    .iter()
                    .enumerate()
                    .map(|(i, g)| GroundTruthBox::from_value(g, &format!("ground_truth[{i}]")))
                    .collect::<Result<Vec<_>>>()?,
            ),
            Some(_) => return Err(Error::validation("ground_truth", "must be an array")),
        };
        let feature = match map.remove("feature") {
            None | Some(Value::Null) => None,
            Some(f) => Some(number_vec(&f, "feature")?),
        };
        if let Some(key) = map.keys().next() {
            return Err(Error::validation(key.as_str(), "unknown key"));
        }
        Ok(Self {
            image_id,
            original,
            perturbed,
            ground_truth,
            feature,
        })
    }
}

/// Dump-wide constraints declared by the manifest.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct DumpSchema {
    pub num_classes: Option<usize>,
    pub feature_dim: Option<usize>,
}

fn number(v: &Value, field: &str) -> Result<f64> {
    v.as_f64()
        .filter(|x| x.is_finite())
        .ok_or_else(|| Error::validation(field, "expected a finite number"))
}

fn number_vec(v: &Value, field: &str) -> Result<Vec<f64>> {
    v.as_array()
        .ok_or_else(|| Error::validation(field, "expected an array of numbers"))?
        .iter()
        .enumerate()
        .map(|(i, x)| number(x, &format!("{field}[{i}]")))
        .collect()
}

fn class_id(v: &Value, field: &str) -> Result<u32> {
    if let Some(c) = v.as_u64() {
        return u32::try_from(c).map_err(|_| Error::validation(field, "class id too large"));
    }
    match v.as_f64() {
        Some(f) if f >= 0.0 && f.fract() == 0.0 && f <= u32::MAX as f64 => Ok(f as u32),
        _ => Err(Error::validation(field, "expected a non-negative integer")),
    }
}

fn bbox_from_values(items: &[Value], field: &str) -> Result<BBox> {
    let c: Vec<f64> = items
        .iter()
        .enumerate()
        .map(|(i, x)| number(x, &format!("{field}.bbox[{i}]")))
        .collect::<Result<_>>()?;
    BBox::new(c[0], c[1], c[2], c[3]).map_err(|e| match e {
        Error::Validation { message, .. } => Error::validation(format!("{field}.bbox"), message),
        other => other,
    })
}

/// Parses one dump line into a validated record.
pub fn parse_record(line: &str, schema: &DumpSchema) -> Result<ImageRecord> {
    let value: Value = serde_json::from_str(line).map_err(|e| Error::Malformed {
        line: 0,
        message: e.to_string(),
    })?;
    let record = ImageRecord::from_value(value)?;
    record.validate(schema)?;
    Ok(record)
}

/// Reads and validates every record of a dump, preserving order.
pub fn parse_dump<R: BufRead>(reader: R, schema: &DumpSchema) -> Result<Vec<ImageRecord>> {
    let mut records = Vec::new();
    let mut seen = HashSet::new();
    for (idx, line) in reader.lines().enumerate() {
        let lineno = idx + 1;
        let line = line.map_err(|e| Error::Malformed {
            line: lineno,
            message: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let record = parse_record(&line, schema).map_err(|e| match e {
            Error::Malformed { message, .. } => Error::Malformed {
                line: lineno,
                message,
            },
            other => other.at_line(lineno),
        })?;
        if !seen.insert(record.image_id.clone()) {
            return Err(Error::validation(
                "image_id",
                format!("duplicate image id {:?}", record.image_id),
            )
            .at_line(lineno));
        }
        records.push(record);
    }
    Ok(records)
}

/// Parses a dump held in memory.
pub fn parse_dump_bytes(bytes: &[u8], schema: &DumpSchema) -> Result<Vec<ImageRecord>> {
    parse_dump(bytes, schema)
}

pub fn parse_dump_file(path: &Path, schema: &DumpSchema) -> Result<Vec<ImageRecord>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    parse_dump(BufReader::new(file), schema)
}

/// Writes records one per line. Output bytes depend only on the records.
pub fn write_dump<W: Write>(
    records: &[ImageRecord],
    mut writer: W,
    schema: &DumpSchema,
) -> Result<()> {
    for r in records {
        r.validate(schema)?;
        serde_json::to_writer(&mut writer, r)?;
        writer
            .write_all(b"\n")
            .map_err(|e| Error::io("<dump writer>", e))?;
    }
    writer.flush().map_err(|e| Error::io("<dump writer>", e))
}

pub fn dump_to_bytes(records: &[ImageRecord], schema: &DumpSchema) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    write_dump(records, &mut buf, schema)?;
    Ok(buf)
}

pub fn write_dump_file(records: &[ImageRecord], path: &Path, schema: &DumpSchema) -> Result<()> {
    let bytes = dump_to_bytes(records, schema)?;
    write_atomic(path, &bytes)
}

/// Writes `bytes` to a sibling temporary file and renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty());
    if let Some(dir) = dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let name = path
        .file_name()
        .ok_or_else(|| Error::InvalidInput(format!("{} has no file name", path.display())))?;
    let mut tmp_name = std::ffi::OsString::from(".");
    tmp_name.push(name);
    tmp_name.push(format!(".tmp{}", std::process::id()));
    let tmp = path.with_file_name(tmp_name);
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| {
        let _ = fs::remove_file(&tmp);
        Error::io(path, e)
    })
}

/// MC-dropout settings of the perturbed pass.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PerturbConfig {
    /// Dropout rate ε.
    pub rate: f64,
    /// Backbone stages followed by a dropout layer, a subset of `0..=3`.
    pub positions: Vec<u8>,
    #[serde(default = "default_passes")]
    pub passes: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

fn default_passes() -> u32 {
    1
}

impl PerturbConfig {
    pub fn new(rate: f64, positions: Vec<u8>) -> Self {
        Self {
            rate,
            positions,
            passes: 1,
            seed: None,
        }
    }

    /// Invariant violations, empty when valid.
    pub fn findings(&self) -> Vec<Finding> {
        let mut out = Vec::new();
        if !(self.rate.is_finite() && (0.0..=1.0).contains(&self.rate)) {
            out.push(Finding::new(
                "perturb_config.rate",
                format!("{} outside [0, 1]", self.rate),
            ));
        }
        let mut seen = HashSet::new();
        for &p in &self.positions {
            if p > MAX_STAGE {
                out.push(Finding::new(
                    "perturb_config.positions",
                    format!("stage {p} outside 0..={MAX_STAGE}"),
                ));
            }
            if !seen.insert(p) {
                out.push(Finding::new(
                    "perturb_config.positions",
                    format!("stage {p} repeated"),
                ));
            }
        }
        if self.passes == 0 {
            out.push(Finding::new(
                "perturb_config.passes",
                "at least one perturbed pass",
            ));
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransformStep {
    pub name: String,
    pub magnitude: f64,
}

/// Whether a set is a regression training sample or a held-out test set.
#[derive(
    Debug, Clone, Copy, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize,
)]
#[serde(rename_all = "lowercase")]
pub enum SetRole {
    #[default]
    Train,
    Test,
}

impl SetRole {
    pub fn as_str(&self) -> &'static str {
        match self {
            SetRole::Train => "train",
            SetRole::Test => "test",
        }
    }
}

impl std::str::FromStr for SetRole {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(SetRole::Train),
            "test" => Ok(SetRole::Test),
            other => Err(Error::validation("role", format!("unknown role {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleSetManifest {
    pub set_id: String,
    /// Seed dataset the set was derived from.
    pub source_name: String,
    pub detector_id: String,
    #[serde(default)]
    pub role: SetRole,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub perturb_config: Option<PerturbConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub transform_log: Option<Vec<TransformStep>>,
    pub image_count: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub num_classes: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub feature_dim: Option<usize>,
    /// Dump files, relative to the manifest's directory unless absolute.
    pub dump_paths: Vec<PathBuf>,
}

impl SampleSetManifest {
    pub fn schema(&self) -> DumpSchema {
        DumpSchema {
            num_classes: self.num_classes,
            feature_dim: self.feature_dim,
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn resolve(&self, base_dir: &Path) -> Vec<PathBuf> {
        self.dump_paths
            .iter()
            .map(|p| {
                if p.is_absolute() {
                    p.clone()
                } else {
                    base_dir.join(p)
                }
            })
            .collect()
    }

    /// Loads all records of the set, in dump order.
    pub fn load_records(&self, base_dir: &Path) -> Result<Vec<ImageRecord>> {
        let schema = self.schema();
        let mut out = Vec::with_capacity(self.image_count);
        let mut seen = HashSet::new();
        for path in self.resolve(base_dir) {
            for r in parse_dump_file(&path, &schema)? {
                if !seen.insert(r.image_id.clone()) {
                    return Err(Error::validation(
                        "image_id",
                        format!(
                            "{:?} appears in more than one dump of set {}",
                            r.image_id, self.set_id
                        ),
                    ));
                }
                out.push(r);
            }
        }
        Ok(out)
    }
}

/// A single invariant violation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Finding {
    pub field: String,
    pub message: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub line: Option<usize>,
}

impl Finding {
    pub fn new(field: impl Into<String>, message: impl Into<String>) -> Self {
        Self {
            field: field.into(),
            message: message.into(),
            path: None,
            line: None,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub set_id: String,
    pub findings: Vec<Finding>,
}

impl ValidationReport {
    pub fn is_clean(&self) -> bool {
        self.findings.is_empty()
    }
}

/// Checks a manifest and every dump it references. Problems, including
/// missing files, are collected rather than returned as errors.
pub fn validate_manifest(manifest: &SampleSetManifest, base_dir: &Path) -> ValidationReport {
    let mut findings = Vec::new();
    if manifest.set_id.is_empty() {
        findings.push(Finding::new("set_id", "must be non-empty"));
    }
    if manifest.source_name.is_empty() {
        findings.push(Finding::new("source_name", "must be non-empty"));
    }
    if let Some(pc) = &manifest.perturb_config {
        findings.extend(pc.findings());
    }
    if let Some(log) = &manifest.transform_log {
        for (i, t) in log.iter().enumerate() {
            if t.name.is_empty() || !t.magnitude.is_finite() {
                findings.push(Finding::new(
                    format!("transform_log[{i}]"),
                    "needs a name and a finite magnitude",
                ));
            }
        }
    }
    if manifest.num_classes == Some(0) {
        findings.push(Finding::new("num_classes", "must be positive"));
    }
    if manifest.dump_paths.is_empty() {
        findings.push(Finding::new("dump_paths", "no dump files listed"));
    }

    let schema = manifest.schema();
    let mut seen = HashSet::new();
    let mut reachable = 0usize;
    for path in manifest.resolve(base_dir) {
        let file = match fs::File::open(&path) {
            Ok(f) => f,
            Err(e) => {
                let mut f = Finding::new("dump_paths", format!("cannot open: {e}"));
                f.path = Some(path.clone());
                findings.push(f);
                continue;
            }
        };
        for (idx, line) in BufReader::new(file).lines().enumerate() {
            let lineno = idx + 1;
            let mut located = |field: String, message: String| {
                let mut f = Finding::new(field, message);
                f.path = Some(path.clone());
                f.line = Some(lineno);
                findings.push(f);
            };
            let line = match line {
                Ok(l) => l,
                Err(e) => {
                    located("record".into(), e.to_string());
                    break;
                }
            };
            if line.trim().is_empty() {
                continue;
            }
            match parse_record(&line, &schema) {
                Ok(r) => {
                    reachable += 1;
                    if !seen.insert(r.image_id.clone()) {
                        located(
                            "image_id".into(),
                            format!("duplicate image id {:?}", r.image_id),
                        );
                    }
                }
                Err(Error::Validation { field, message }) => {
                    reachable += 1;
                    located(field, message);
                }
                Err(e) => {
                    reachable += 1;
                    located("record".into(), e.to_string());
                }
            }
        }
    }
    if reachable != manifest.image_count {
        findings.push(Finding::new(
            "image_count",
            format!(
                "manifest declares {} images, dumps contain {reachable}",
                manifest.image_count
            ),
        ));
    }
    ValidationReport {
        set_id: manifest.set_id.clone(),
        findings,
    }
}
