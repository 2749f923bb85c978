use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use bos_core::autoeval::{
    cap_images, correlation, fit_regressor, loo_evaluate, measure, predict_map, LinearModel,
    MeasurementSpec, MetaSample, TargetMetric,
};
use bos_core::baselines::{
    collect_features, confidence_measure, gaussian_stats, learn_threshold, linear_r2,
    GaussianStats, ThresholdSample,
};
use bos_core::detmetrics::{coco_thresholds, evaluate_detections, PassSelector};
use bos_core::dumps::{validate_manifest, write_atomic, ImageRecord, SampleSetManifest, SetRole};
use bos_core::matching::MeasureKind;
use bos_core::synthworld::{
    default_sources, gen_meta_set, write_meta_set, WorldConfig, MANIFEST_SUFFIX,
};
use bos_core::Error;
use serde::Serialize;

use crate::tables::{cell, ScoreRow, ScoreTable, MAP_COLUMNS};
use crate::{read_text, CliError, Command, RunConfig};

/// Result of a command that ran to completion.
#[derive(Debug, Default)]
pub struct Outcome {
    /// Artifacts written, in order.
    pub written: Vec<PathBuf>,
    /// Human-readable lines for stdout.
    pub messages: Vec<String>,
    /// Set when the inputs failed validation (exit status 1).
    pub validation_failed: bool,
}

impl Outcome {
    pub fn exit_code(&self) -> i32 {
        i32::from(self.validation_failed)
    }
}

pub fn execute(config: &RunConfig) -> Result<Outcome, CliError> {
    let out = Output::new(&config.out_dir)?;
    match &config.command {
        Command::Validate(a) => validate(&discover(&a.inputs)?, out),
        Command::Score(a) => {
            let mut spec = MeasurementSpec {
                kinds: a.kinds.clone(),
                taus: a.taus.iter().copied().collect(),
                stability: a.stability.resolve()?,
                aggregation: a.aggregation.into(),
                class_id: a.class_id,
                test_cap: Some(a.max_images),
                ..Default::default()
            };
            if let Some(p) = &a.fd_reference {
                spec.fd_reference = Some(GaussianStats::load(p)?);
            } else if spec.kinds.contains(&MeasureKind::Fd) {
                return Err(CliError::Usage("--kind fd needs --fd-reference".into()));
            }
            score(&discover(&a.input.inputs)?, &spec, out)
        }
        Command::Map(a) => map(&discover(&a.input.inputs)?, a.class_id, a.max_images, out),
        Command::Fit(a) => {
            let target = parse_target(&a.target)?;
            let scores = ScoreTable::load(&a.scores)?;
            let maps = ScoreTable::load(&a.maps)?;
            let samples = meta_samples(&scores, &maps, &a.features, target)?;
            let train: Vec<MetaSample> = samples
                .into_iter()
                .filter(|s| s.role == SetRole::Train)
                .collect();
            let model = fit_regressor(&train, &a.features, target)?;
            let mut out = out;
            out.write("model.json", pretty_json(&model)?.as_bytes())?;
            out.message(format!("fit on {} sets: R² {}", model.n_train, model.r2));
            Ok(out.finish())
        }
        Command::Predict(a) => {
            let model: LinearModel =
                serde_json::from_str(&read_text(&a.model)?).map_err(Error::from)?;
            predict(&model, &ScoreTable::load(&a.scores)?, out)
        }
        Command::Loo(a) => {
            let target = parse_target(&a.target)?;
            let maps = ScoreTable::load(&a.maps)?;
            let runs = a
                .scores
                .iter()
                .map(|p| meta_samples(&ScoreTable::load(p)?, &maps, &a.features, target))
                .collect::<Result<Vec<_>, _>>()?;
            let report = loo_evaluate(&runs, &a.features, target)?;
            let mut out = out;
            out.write("loo.csv", report.to_csv().as_bytes())?;
            out.write("loo.json", pretty_json(&report)?.as_bytes())?;
            out.message(format!(
                "average RMSE {} ± {} over {} run(s)",
                report.average_rmse,
                report.average_rmse_std,
                runs.len()
            ));
            Ok(out.finish())
        }
        Command::Synth(a) => {
            let mut world = match &a.config {
                Some(p) => WorldConfig::from_json(&read_text(p)?)?,
                None => WorldConfig::default(),
            };
            world.seed = a.seed;
            if let Some(n) = a.sources {
                world.num_sources = n;
            }
            if let Some(n) = a.sets_per_source {
                world.sets_per_source = n;
            }
            if let Some(n) = a.images_per_set {
                world.images_per_set = n;
            }
            if a.uncoupled {
                world.coupled = false;
            }
            world.validate()?;
            let sets = gen_meta_set(&world, &default_sources(&world))?;
            let mut out = out;
            let manifests = write_meta_set(&world, &sets, &out.dir)?;
            out.message(format!(
                "{} sample sets written to {}",
                manifests.len(),
                out.dir.display()
            ));
            out.written.extend(manifests);
            Ok(out.finish())
        }
        Command::Report(a) => report(
            &ScoreTable::load(&a.scores)?,
            &ScoreTable::load(&a.maps)?,
            out,
        ),
        Command::Stats(a) => {
            let mut features = Vec::new();
            for path in discover(&a.inputs)? {
                let (_, records) = load_set(&path)?;
                features.extend(collect_features(&records)?);
            }
            let stats = gaussian_stats(&features)?;
            let mut out = out;
            out.write("reference_stats.json", stats.to_json()?.as_bytes())?;
            out.message(format!(
                "{} feature vectors of dimension {}",
                stats.count, stats.dimension
            ));
            Ok(out.finish())
        }
        Command::Tune(a) => {
            if !matches!(a.kind, MeasureKind::Ps | MeasureKind::Es | MeasureKind::Atc) {
                return Err(CliError::Usage(format!("{} has no threshold", a.kind)));
            }
            let opts = a.stability.resolve()?;
            let spec = MeasurementSpec::default();
            let mut samples = Vec::new();
            for path in discover(&a.input.inputs)? {
                let (m, records) = load_set(&path)?;
                if m.role != SetRole::Train || records.iter().any(|r| r.ground_truth.is_none()) {
                    continue;
                }
                let measures = a
                    .candidates
                    .iter()
                    .map(|&tau| {
                        confidence_measure(&records, a.kind, tau, &opts, a.aggregation.into())
                            .map(|s| s.value)
                    })
                    .collect::<Result<Vec<_>, _>>();
                let Ok(measures) = measures else { continue };
                let map = bos_core::autoeval::measure_target(&records, &spec)?;
                samples.push(ThresholdSample { measures, map });
            }
            let tau = learn_threshold(&a.candidates, &samples)?;
            let maps: Vec<f64> = samples.iter().map(|s| s.map).collect();
            let r2: Vec<f64> = (0..a.candidates.len())
                .map(|k| {
                    linear_r2(
                        &samples.iter().map(|s| s.measures[k]).collect::<Vec<_>>(),
                        &maps,
                    )
                })
                .collect();
            let result = TuneResult {
                kind: a.kind.as_str(),
                tau,
                candidates: a.candidates.clone(),
                r2,
                sets: samples.len(),
            };
            let mut out = out;
            out.write("threshold.json", pretty_json(&result)?.as_bytes())?;
            out.message(format!("{} threshold {tau}", a.kind));
            Ok(out.finish())
        }
    }
}

#[derive(Serialize)]
struct TuneResult {
    kind: &'static str,
    tau: f64,
    candidates: Vec<f64>,
    r2: Vec<f64>,
    sets: usize,
}

struct Output {
    dir: PathBuf,
    written: Vec<PathBuf>,
    messages: Vec<String>,
}

impl Output {
    fn new(dir: &Path) -> Result<Self, CliError> {
        std::fs::create_dir_all(dir).map_err(|e| Error::Io {
            path: dir.to_path_buf(),
            source: e,
        })?;
        Ok(Self {
            dir: dir.to_path_buf(),
            written: Vec::new(),
            messages: Vec::new(),
        })
    }

    fn write(&mut self, name: &str, bytes: &[u8]) -> Result<(), CliError> {
        let path = self.dir.join(name);
        write_atomic(&path, bytes)?;
        self.written.push(path);
        Ok(())
    }

    fn message(&mut self, m: String) {
        self.messages.push(m);
    }

    fn finish(self) -> Outcome {
        Outcome {
            written: self.written,
            messages: self.messages,
            validation_failed: false,
        }
    }
}

fn pretty_json<T: Serialize>(v: &T) -> Result<String, CliError> {
    let mut s = serde_json::to_string_pretty(v).map_err(Error::from)?;
    s.push('\n');
    Ok(s)
}

fn parse_target(s: &str) -> Result<TargetMetric, CliError> {
    Ok(s.parse()?)
}

/// Manifest paths named directly, plus `*.manifest.json` files inside
/// named directories, each directory's files in name order.
pub(crate) fn discover(inputs: &[PathBuf]) -> Result<Vec<PathBuf>, CliError> {
    let mut out = Vec::new();
    for p in inputs {
        if p.is_dir() {
            let entries = std::fs::read_dir(p).map_err(|e| Error::Io {
                path: p.clone(),
                source: e,
            })?;
            let mut found: Vec<PathBuf> = entries
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|f| {
                    f.file_name()
                        .and_then(|n| n.to_str())
                        .is_some_and(|n| n.ends_with(MANIFEST_SUFFIX))
                })
                .collect();
            found.sort();
            if found.is_empty() {
                return Err(CliError::Usage(format!(
                    "no *{MANIFEST_SUFFIX} files in {}",
                    p.display()
                )));
            }
            out.extend(found);
        } else {
            out.push(p.clone());
        }
    }
    Ok(out)
}

fn base_dir(manifest_path: &Path) -> &Path {
    manifest_path.parent().unwrap_or(Path::new("."))
}

fn load_set(path: &Path) -> Result<(SampleSetManifest, Vec<ImageRecord>), CliError> {
    let m = SampleSetManifest::load(path)?;
    let records = m.load_records(base_dir(path))?;
    Ok((m, records))
}

fn capped(m: &SampleSetManifest, records: Vec<ImageRecord>, cap: usize) -> Vec<ImageRecord> {
    if m.role == SetRole::Test && records.len() > cap {
        cap_images(&records, cap)
    } else {
        records
    }
}

fn validate(paths: &[PathBuf], mut out: Output) -> Result<Outcome, CliError> {
    let mut reports = Vec::new();
    for path in paths {
        let report = match SampleSetManifest::load(path) {
            Ok(m) => validate_manifest(&m, base_dir(path)),
            Err(e) => bos_core::dumps::ValidationReport {
                set_id: path.display().to_string(),
                findings: vec![bos_core::dumps::Finding {
                    field: "manifest".into(),
                    message: e.to_string(),
                    path: Some(path.clone()),
                    line: None,
                }],
            },
        };
        for f in &report.findings {
            let location = match (&f.path, f.line) {
                (Some(p), Some(l)) => format!("{}:{l}: ", p.display()),
                (Some(p), None) => format!("{}: ", p.display()),
                _ => String::new(),
            };
            out.message(format!(
                "{}: {location}{}: {}",
                report.set_id, f.field, f.message
            ));
        }
        reports.push(report);
    }
    let bad = reports.iter().filter(|r| !r.is_clean()).count();
    out.message(format!(
        "{} of {} sample sets valid",
        reports.len() - bad,
        reports.len()
    ));
    out.write("validation.json", pretty_json(&reports)?.as_bytes())?;
    let mut outcome = out.finish();
    outcome.validation_failed = bad > 0;
    Ok(outcome)
}

fn defined(r: bos_core::Result<f64>) -> Result<Option<f64>, CliError> {
    match r {
        Ok(v) => Ok(Some(v)),
        Err(Error::Undefined(_) | Error::MeasureUndefined(_) | Error::NoBoxes) => Ok(None),
        Err(e) => Err(e.into()),
    }
}

fn score(paths: &[PathBuf], spec: &MeasurementSpec, mut out: Output) -> Result<Outcome, CliError> {
    let mut table = ScoreTable {
        columns: spec.feature_labels(),
        rows: Vec::new(),
    };
    for path in paths {
        let (m, records) = load_set(path)?;
        let records = capped(&m, records, spec.test_cap.unwrap_or(usize::MAX));
        let values = spec
            .kinds
            .iter()
            .map(|&k| defined(measure(&records, k, spec)))
            .collect::<Result<Vec<_>, _>>()?;
        table.rows.push(ScoreRow {
            set_id: m.set_id,
            source_name: m.source_name,
            role: m.role,
            images: records.len(),
            values,
        });
    }
    out.message(format!("scored {} sample sets", table.rows.len()));
    out.write("scores.csv", &table.to_csv()?)?;
    Ok(out.finish())
}

fn map(
    paths: &[PathBuf],
    class_id: Option<u32>,
    cap: usize,
    mut out: Output,
) -> Result<Outcome, CliError> {
    let mut table = ScoreTable {
        columns: MAP_COLUMNS.iter().map(|s| s.to_string()).collect(),
        rows: Vec::new(),
    };
    for path in paths {
        let (m, records) = load_set(path)?;
        let records = capped(&m, records, cap);
        let labeled = !records.is_empty() && records.iter().all(|r| r.ground_truth.is_some());
        let values = if labeled {
            let rep = evaluate_detections(&records, PassSelector::Original, &coco_thresholds())?;
            match class_id {
                None if rep.ap.is_empty() => vec![None; 3],
                None => vec![Some(rep.map_all), rep.map50, rep.map75],
                Some(c) => vec![
                    rep.per_class.get(&c).copied(),
                    rep.ap_at(c, 0.5),
                    rep.ap_at(c, 0.75),
                ],
            }
        } else {
            vec![None; 3]
        };
        table.rows.push(ScoreRow {
            set_id: m.set_id,
            source_name: m.source_name,
            role: m.role,
            images: records.len(),
            values,
        });
    }
    out.message(format!("evaluated {} sample sets", table.rows.len()));
    out.write("maps.csv", &table.to_csv()?)?;
    Ok(out.finish())
}

fn target_column(target: TargetMetric) -> &'static str {
    match target {
        TargetMetric::Map => "map",
        TargetMetric::Map50 => "map50",
        TargetMetric::Map75 => "map75",
    }
}

/// Joins score rows with map rows by set id.
fn meta_samples(
    scores: &ScoreTable,
    maps: &ScoreTable,
    features: &[String],
    target: TargetMetric,
) -> Result<Vec<MetaSample>, CliError> {
    let cols = features
        .iter()
        .map(|f| {
            scores
                .column(f)
                .ok_or_else(|| CliError::Usage(format!("score file has no column {f:?}")))
        })
        .collect::<Result<Vec<_>, _>>()?;
    let tcol = maps.column(target_column(target)).ok_or_else(|| {
        CliError::Usage(format!(
            "map file has no column {:?}",
            target_column(target)
        ))
    })?;
    let truth: BTreeMap<&str, Option<f64>> = maps
        .rows
        .iter()
        .map(|r| (r.set_id.as_str(), r.values[tcol]))
        .collect();
    Ok(scores
        .rows
        .iter()
        .map(|r| MetaSample {
            set_id: r.set_id.clone(),
            source_name: r.source_name.clone(),
            role: r.role,
            features: cols
                .iter()
                .map(|&c| r.values[c].unwrap_or(f64::NAN))
                .collect(),
            target_map: truth.get(r.set_id.as_str()).copied().flatten(),
        })
        .collect())
}

fn predict(model: &LinearModel, scores: &ScoreTable, mut out: Output) -> Result<Outcome, CliError> {
    let cols = model
        .feature_kinds
        .iter()
        .map(|f| {
            scores
                .column(f)
                .ok_or_else(|| CliError::Usage(format!("score file has no column {f:?}")))
        })
        .collect::<Result<Vec<_>, _>>()?;
    let mut w = String::from("set_id,source_name,role,estimated_map\n");
    let mut n = 0;
    for r in &scores.rows {
        let x: Option<Vec<f64>> = cols.iter().map(|&c| r.values[c]).collect();
        let est = match x {
            Some(x) => {
                n += 1;
                Some(predict_map(model, &x)?)
            }
            None => None,
        };
        let mut rec = csv::Writer::from_writer(Vec::new());
        rec.write_record([
            r.set_id.as_str(),
            r.source_name.as_str(),
            r.role.as_str(),
            &cell(est),
        ])
        .map_err(|e| CliError::Usage(e.to_string()))?;
        w.push_str(&String::from_utf8_lossy(
            &rec.into_inner()
                .map_err(|e| CliError::Usage(e.to_string()))?,
        ));
    }
    out.message(format!(
        "estimated {n} of {} sample sets",
        scores.rows.len()
    ));
    out.write("predictions.csv", w.as_bytes())?;
    Ok(out.finish())
}

fn report(scores: &ScoreTable, maps: &ScoreTable, mut out: Output) -> Result<Outcome, CliError> {
    let by_id: BTreeMap<&str, &ScoreRow> =
        maps.rows.iter().map(|r| (r.set_id.as_str(), r)).collect();
    let mut columns = scores.columns.clone();
    columns.extend(maps.columns.iter().cloned());
    let rows: Vec<ScoreRow> = scores
        .rows
        .iter()
        .map(|r| {
            let mut row = r.clone();
            match by_id.get(r.set_id.as_str()) {
                Some(m) => row.values.extend(m.values.iter().copied()),
                None => row
                    .values
                    .extend(std::iter::repeat_n(None, maps.columns.len())),
            }
            row
        })
        .collect();
    let joined = ScoreTable { columns, rows };

    // Correlations over train-role sets, or over everything if there are none.
    let any_train = joined.rows.iter().any(|r| r.role == SetRole::Train);
    let pool: Vec<&ScoreRow> = joined
        .rows
        .iter()
        .filter(|r| !any_train || r.role == SetRole::Train)
        .collect();
    let mut summary = String::from("measure,target,n,r2,spearman_rho\n");
    for (si, s) in scores.columns.iter().enumerate() {
        for (mi, m) in maps.columns.iter().enumerate() {
            let mj = scores.columns.len() + mi;
            let (x, y): (Vec<f64>, Vec<f64>) = pool
                .iter()
                .filter_map(|r| Some((r.values[si]?, r.values[mj]?)))
                .unzip();
            let (r2, rho) = match correlation(&x, &y) {
                Ok(c) => (Some(c.r2), c.spearman_rho),
                Err(_) => (None, None),
            };
            summary.push_str(&format!("{s},{m},{},{},{}\n", x.len(), cell(r2), cell(rho)));
        }
    }
    out.write("report.csv", &joined.to_csv()?)?;
    out.write("report_summary.csv", summary.as_bytes())?;
    out.message(summary.trim_end().to_string());
    Ok(out.finish())
}
