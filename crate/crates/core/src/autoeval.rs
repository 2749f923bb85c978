//! Label-free mAP estimation: least-squares regression from dataset-level
//! measurements to mAP, the leave-one-source-out protocol, error and
//! correlation diagnostics, and the greedy search over perturbation settings.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::baselines::{self, Aggregation, GaussianStats};
use crate::detmetrics::{coco_thresholds, evaluate_detections, PassSelector};
use crate::dumps::{ImageRecord, PerturbConfig, SetRole};
use crate::error::{Error, Result};
use crate::matching::{self, MeasureKind, StabilityOptions};

/// One labeled (or to-be-estimated) sample set seen by the regressor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetaSample {
    pub set_id: String,
    pub source_name: String,
    #[serde(default)]
    pub role: SetRole,
    /// Measurement values; NaN marks an undefined measurement.
    pub features: Vec<f64>,
    pub target_map: Option<f64>,
}

impl MetaSample {
    pub fn is_valid(&self) -> bool {
        !self.features.is_empty() && self.features.iter().all(|v| v.is_finite())
    }
}

/// Regression target.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TargetMetric {
    #[default]
    Map,
    Map50,
    Map75,
}

impl TargetMetric {
    pub fn as_str(&self) -> &'static str {
        match self {
            TargetMetric::Map => "map",
            TargetMetric::Map50 => "map50",
            TargetMetric::Map75 => "map75",
        }
    }
}

impl std::str::FromStr for TargetMetric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "map" => Ok(TargetMetric::Map),
            "map50" => Ok(TargetMetric::Map50),
            "map75" => Ok(TargetMetric::Map75),
            other => Err(Error::validation(
                "target",
                format!("unknown target {other:?}"),
            )),
        }
    }
}

/// `mAP ≈ w0 + w1 x1 + ... + wd xd`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearModel {
    /// Intercept first, then one slope per feature.
    pub weights: Vec<f64>,
    pub feature_kinds: Vec<String>,
    pub target: TargetMetric,
    /// Coefficient of determination on the training samples.
    pub r2: f64,
    pub residual_rmse: f64,
    pub n_train: usize,
}

impl LinearModel {
    pub fn raw_prediction(&self, features: &[f64]) -> Result<f64> {
        if features.len() + 1 != self.weights.len() {
            return Err(Error::DimensionMismatch {
                expected: self.weights.len() - 1,
                actual: features.len(),
            });
        }
        Ok(self.weights[0]
            + self.weights[1..]
                .iter()
                .zip(features)
                .map(|(w, x)| w * x)
                .sum::<f64>())
    }
}

/// Relative singular-value cutoff below which the design matrix is treated
/// as rank-deficient.
const RANK_TOL: f64 = 1e-10;

/// Ordinary least squares over samples with a target and finite features.
pub fn fit_regressor(
    samples: &[MetaSample],
    feature_kinds: &[String],
    target: TargetMetric,
) -> Result<LinearModel> {
    let usable: Vec<&MetaSample> = samples
        .iter()
        .filter(|s| s.is_valid() && s.target_map.is_some_and(f64::is_finite))
        .collect();
    let d = usable
        .first()
        .map(|s| s.features.len())
        .unwrap_or(feature_kinds.len());
    if d == 0 {
        return Err(Error::InvalidInput("no features to regress on".into()));
    }
    if let Some(s) = usable.iter().find(|s| s.features.len() != d) {
        return Err(Error::DimensionMismatch {
            expected: d,
            actual: s.features.len(),
        });
    }
    if usable.len() < d + 2 {
        return Err(Error::InvalidInput(format!(
            "{} usable samples, need at least {} for {d} feature(s)",
            usable.len(),
            d + 2
        )));
    }
    let n = usable.len();
    let x = DMatrix::from_fn(n, d + 1, |i, j| {
        if j == 0 {
            1.0
        } else {
            usable[i].features[j - 1]
        }
    });
    let y = DVector::from_iterator(n, usable.iter().map(|s| s.target_map.unwrap()));

    let svd = x.clone().svd(true, true);
    let smax = svd.singular_values.max();
    let smin = svd.singular_values.min();
    if smax.is_nan() || smax <= 0.0 || smin <= RANK_TOL * smax {
        return Err(Error::RankDeficient(format!(
            "singular values span {smin:e}..{smax:e}"
        )));
    }
    let w = svd
        .solve(&y, RANK_TOL * smax)
        .map_err(|e| Error::RankDeficient(e.to_string()))?;

    let fitted = &x * &w;
    let mean_y = y.mean();
    let ss_res: f64 = (&y - &fitted).iter().map(|r| r * r).sum();
    let ss_tot: f64 = y.iter().map(|v| (v - mean_y) * (v - mean_y)).sum();
    let r2 = if ss_tot > 0.0 {
        1.0 - ss_res / ss_tot
    } else {
        1.0
    };
    Ok(LinearModel {
        weights: w.iter().copied().collect(),
        feature_kinds: if feature_kinds.len() == d {
            feature_kinds.to_vec()
        } else {
            (0..d).map(|i| format!("x{i}")).collect()
        },
        target,
        r2,
        residual_rmse: (ss_res / n as f64).sqrt(),
        n_train: n,
    })
}

/// Model output clamped to `[0, 1]`.
pub fn predict_map(model: &LinearModel, features: &[f64]) -> Result<f64> {
    Ok(model.raw_prediction(features)?.clamp(0.0, 1.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EstimateReport {
    pub rmse: f64,
    /// `1 - SS_res / SS_tot`; undefined for constant truths.
    pub r2: Option<f64>,
    pub spearman_rho: Option<f64>,
}

pub fn rmse(estimates: &[f64], truths: &[f64]) -> f64 {
    let n = estimates.len() as f64;
    (estimates
        .iter()
        .zip(truths)
        .map(|(e, t)| (e - t) * (e - t))
        .sum::<f64>()
        / n)
        .sqrt()
}

/// Ranks starting at 1, ties sharing their average rank.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut start = 0;
    while start < idx.len() {
        let mut end = start + 1;
        while end < idx.len() && values[idx[end]] == values[idx[start]] {
            end += 1;
        }
        let rank = (start + end + 1) as f64 / 2.0;
        for &i in &idx[start..end] {
            ranks[i] = rank;
        }
        start = end;
    }
    ranks
}

fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    (sxx > 0.0 && syy > 0.0).then(|| (sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// Spearman's rank correlation with average ranks for ties.
pub fn spearman(x: &[f64], y: &[f64]) -> Option<f64> {
    pearson(&average_ranks(x), &average_ranks(y))
}

pub fn evaluate_estimates(estimates: &[f64], truths: &[f64]) -> Result<EstimateReport> {
    if estimates.len() != truths.len() {
        return Err(Error::DimensionMismatch {
            expected: truths.len(),
            actual: estimates.len(),
        });
    }
    if estimates.len() < 2 {
        return Err(Error::InvalidInput("need at least two estimates".into()));
    }
    let mean_t = truths.iter().sum::<f64>() / truths.len() as f64;
    let ss_tot: f64 = truths.iter().map(|t| (t - mean_t) * (t - mean_t)).sum();
    let ss_res: f64 = estimates
        .iter()
        .zip(truths)
        .map(|(e, t)| (e - t) * (e - t))
        .sum();
    Ok(EstimateReport {
        rmse: rmse(estimates, truths),
        r2: (ss_tot > 0.0).then(|| 1.0 - ss_res / ss_tot),
        spearman_rho: spearman(estimates, truths),
    })
}

/// Strength of the relation between a measurement and mAP across sets.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Correlation {
    /// R² of the least-squares line.
    pub r2: f64,
    pub spearman_rho: Option<f64>,
    pub n: usize,
}

pub fn correlation(x: &[f64], y: &[f64]) -> Result<Correlation> {
    if x.len() != y.len() {
        return Err(Error::DimensionMismatch {
            expected: y.len(),
            actual: x.len(),
        });
    }
    if x.len() < 2 {
        return Err(Error::InvalidInput("need at least two points".into()));
    }
    Ok(Correlation {
        r2: baselines::linear_r2(x, y),
        spearman_rho: spearman(x, y),
        n: x.len(),
    })
}

/// What to measure on a sample set and which mAP to regress onto.
#[derive(Debug, Clone, PartialEq)]
pub struct MeasurementSpec {
    pub kinds: Vec<MeasureKind>,
    /// Thresholds for PS/ES/ATC; missing entries use the defaults.
    pub taus: BTreeMap<MeasureKind, f64>,
    pub stability: StabilityOptions,
    pub aggregation: Aggregation,
    pub fd_reference: Option<GaussianStats>,
    pub target: TargetMetric,
    /// Per-class scoring: restrict measurements and target to one class.
    pub class_id: Option<u32>,
    /// Cap on images of held-out test sets (first images by id).
    pub test_cap: Option<usize>,
}

pub const DEFAULT_TEST_CAP: usize = 5000;

impl Default for MeasurementSpec {
    fn default() -> Self {
        Self {
            kinds: vec![MeasureKind::Bos],
            taus: BTreeMap::new(),
            stability: StabilityOptions::default(),
            aggregation: Aggregation::default(),
            fd_reference: None,
            target: TargetMetric::Map,
            class_id: None,
            test_cap: Some(DEFAULT_TEST_CAP),
        }
    }
}

impl MeasurementSpec {
    pub fn feature_labels(&self) -> Vec<String> {
        self.kinds.iter().map(|k| k.as_str().to_string()).collect()
    }

    fn stability(&self) -> StabilityOptions {
        match self.class_id {
            Some(c) => self.stability.for_class(c),
            None => self.stability.clone(),
        }
    }

    pub fn tau(&self, kind: MeasureKind) -> f64 {
        self.taus
            .get(&kind)
            .copied()
            .or_else(|| baselines::default_tau(kind))
            .unwrap_or(0.0)
    }
}

/// A single measurement on a set of records.
pub fn measure(records: &[ImageRecord], kind: MeasureKind, spec: &MeasurementSpec) -> Result<f64> {
    let opts = spec.stability();
    let score = match kind {
        MeasureKind::Bos => matching::bos(records, &opts)?,
        MeasureKind::Cs => matching::cs_score(records, &opts)?,
        MeasureKind::Fd => {
            let reference = spec
                .fd_reference
                .as_ref()
                .ok_or_else(|| Error::InvalidInput("FD needs reference statistics".into()))?;
            baselines::fd_measure(records, reference)?
        }
        k => baselines::confidence_measure(records, k, spec.tau(k), &opts, spec.aggregation)?,
    };
    Ok(score.value)
}

/// Ground-truth target of a labeled set.
pub fn measure_target(records: &[ImageRecord], spec: &MeasurementSpec) -> Result<f64> {
    let report = evaluate_detections(records, PassSelector::Original, &coco_thresholds())?;
    let value = match spec.class_id {
        None => match spec.target {
            TargetMetric::Map => Some(report.map_all),
            TargetMetric::Map50 => report.map50,
            TargetMetric::Map75 => report.map75,
        },
        Some(c) => match spec.target {
            TargetMetric::Map => report.per_class.get(&c).copied(),
            TargetMetric::Map50 => report.ap_at(c, 0.5),
            TargetMetric::Map75 => report.ap_at(c, 0.75),
        },
    };
    value.ok_or_else(|| Error::Undefined(format!("{} target", spec.target.as_str())))
}

/// Keeps the first `cap` images in id order.
pub fn cap_images(records: &[ImageRecord], cap: usize) -> Vec<ImageRecord> {
    let mut sorted: Vec<&ImageRecord> = records.iter().collect();
    sorted.sort_by(|a, b| a.image_id.cmp(&b.image_id));
    sorted.into_iter().take(cap).cloned().collect()
}

/// Measures a sample set. Undefined measurements become NaN; a missing
/// target (unlabeled set) becomes `None`.
pub fn build_meta_sample(
    set_id: &str,
    source_name: &str,
    role: SetRole,
    records: &[ImageRecord],
    spec: &MeasurementSpec,
) -> Result<MetaSample> {
    let capped;
    let records = match (role, spec.test_cap) {
        (SetRole::Test, Some(cap)) if records.len() > cap => {
            capped = cap_images(records, cap);
            &capped[..]
        }
        _ => records,
    };
    let mut features = Vec::with_capacity(spec.kinds.len());
    for &k in &spec.kinds {
        match measure(records, k, spec) {
            Ok(v) => features.push(v),
            Err(Error::Undefined(_) | Error::MeasureUndefined(_)) => features.push(f64::NAN),
            Err(e) => return Err(e),
        }
    }
    let labeled = records.iter().all(|r| r.ground_truth.is_some()) && !records.is_empty();
    let target_map = if labeled {
        Some(measure_target(records, spec)?)
    } else {
        None
    };
    Ok(MetaSample {
        set_id: set_id.into(),
        source_name: source_name.into(),
        role,
        features,
        target_map,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LooRow {
    pub source_name: String,
    /// Mean ground-truth mAP of the held-out test points.
    pub ground_truth_map: Option<f64>,
    pub estimated_map: Option<f64>,
    pub rmse_mean: Option<f64>,
    pub rmse_std: Option<f64>,
    pub runs: usize,
    /// Sources whose samples trained this row's regressors.
    pub train_sources: Vec<String>,
    pub skipped: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LooReport {
    pub feature_kinds: Vec<String>,
    pub target: TargetMetric,
    pub rows: Vec<LooRow>,
    /// Mean of `rmse_mean` over non-skipped rows.
    pub average_rmse: f64,
    /// Standard deviation over runs of the per-run average RMSE.
    pub average_rmse_std: f64,
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

impl LooReport {
    /// One column per held-out source plus the average.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("metric");
        for r in &self.rows {
            out.push(',');
            out.push_str(&csv_field(&r.source_name));
        }
        out.push_str(",average\n");
        let mut line = |name: &str, f: &dyn Fn(&LooRow) -> Option<f64>, avg: Option<f64>| {
            out.push_str(name);
            for r in &self.rows {
                out.push(',');
                out.push_str(&fmt_opt(f(r)));
            }
            let _ = writeln!(out, ",{}", fmt_opt(avg));
        };
        line("ground_truth_map", &|r| r.ground_truth_map, None);
        line("estimated_map", &|r| r.estimated_map, None);
        line("rmse_mean", &|r| r.rmse_mean, Some(self.average_rmse));
        line("rmse_std", &|r| r.rmse_std, Some(self.average_rmse_std));
        out
    }
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (mean, 0.0);
    }
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Leave-one-source-out evaluation.
///
/// `runs` holds one complete meta-set per repetition (e.g. one per dropout
/// seed). For each run and each source, the regressor is fit on the
/// training-role samples of every other source and applied to the held-out
/// source's test-role samples; a source without test-role samples is
/// evaluated on its own training sets instead. The per-run error of a source
/// is the RMSE over its test points.
pub fn loo_evaluate(
    runs: &[Vec<MetaSample>],
    feature_kinds: &[String],
    target: TargetMetric,
) -> Result<LooReport> {
    if runs.is_empty() {
        return Err(Error::InvalidInput("no measurement runs".into()));
    }
    let sources: BTreeSet<&str> = runs
        .iter()
        .flatten()
        .map(|s| s.source_name.as_str())
        .collect();
    if sources.len() < 2 {
        return Err(Error::InvalidInput(
            "leave-one-out needs at least two sources".into(),
        ));
    }

    let mut rows = Vec::with_capacity(sources.len());
    let mut run_errors: Vec<Vec<f64>> = vec![Vec::new(); runs.len()];
    for &held_out in &sources {
        let mut errors = Vec::new();
        let mut truths = Vec::new();
        let mut estimates = Vec::new();
        let mut train_sources = BTreeSet::new();
        let mut skip_reason = None;
        for (run_idx, run) in runs.iter().enumerate() {
            let train: Vec<MetaSample> = run
                .iter()
                .filter(|s| s.source_name != held_out && s.role == SetRole::Train)
                .cloned()
                .collect();
            if train.iter().any(|s| s.source_name == held_out) {
                return Err(Error::InvalidInput(format!(
                    "held-out source {held_out} leaked into training"
                )));
            }
            let mine: Vec<&MetaSample> = run.iter().filter(|s| s.source_name == held_out).collect();
            let tests: Vec<&MetaSample> = if mine.iter().any(|s| s.role == SetRole::Test) {
                mine.into_iter()
                    .filter(|s| s.role == SetRole::Test)
                    .collect()
            } else {
                mine
            };
            let tests: Vec<&MetaSample> = tests
                .into_iter()
                .filter(|s| s.is_valid() && s.target_map.is_some())
                .collect();
            if tests.is_empty() {
                skip_reason = Some("no valid measurement on held-out source".to_string());
                continue;
            }
            let model = match fit_regressor(&train, feature_kinds, target) {
                Ok(m) => m,
                Err(e) => {
                    skip_reason = Some(format!("regression failed: {e}"));
                    continue;
                }
            };
            train_sources.extend(train.iter().map(|s| s.source_name.clone()));
            let est: Vec<f64> = tests
                .iter()
                .map(|s| predict_map(&model, &s.features))
                .collect::<Result<_>>()?;
            let tru: Vec<f64> = tests.iter().map(|s| s.target_map.unwrap()).collect();
            let err = rmse(&est, &tru);
            errors.push(err);
            run_errors[run_idx].push(err);
            truths.push(tru.iter().sum::<f64>() / tru.len() as f64);
            estimates.push(est.iter().sum::<f64>() / est.len() as f64);
        }
        let row = if errors.is_empty() {
            LooRow {
                source_name: held_out.to_string(),
                ground_truth_map: None,
                estimated_map: None,
                rmse_mean: None,
                rmse_std: None,
                runs: 0,
                train_sources: Vec::new(),
                skipped: skip_reason.or_else(|| Some("no runs".into())),
            }
        } else {
            let (m, s) = mean_std(&errors);
            LooRow {
                source_name: held_out.to_string(),
                ground_truth_map: Some(mean_std(&truths).0),
                estimated_map: Some(mean_std(&estimates).0),
                rmse_mean: Some(m),
                rmse_std: Some(s),
                runs: errors.len(),
                train_sources: train_sources.into_iter().collect(),
                skipped: None,
            }
        };
        rows.push(row);
    }

    let valid: Vec<f64> = rows.iter().filter_map(|r| r.rmse_mean).collect();
    if valid.is_empty() {
        return Err(Error::Undefined("leave-one-out RMSE".into()));
    }
    let per_run: Vec<f64> = run_errors
        .iter()
        .filter(|e| !e.is_empty())
        .map(|e| e.iter().sum::<f64>() / e.len() as f64)
        .collect();
    Ok(LooReport {
        feature_kinds: feature_kinds.to_vec(),
        target,
        average_rmse: valid.iter().sum::<f64>() / valid.len() as f64,
        average_rmse_std: mean_std(&per_run).1,
        rows,
    })
}

/// One leave-one-out report per class, from per-class meta-sets.
pub fn loo_evaluate_per_class(
    runs_by_class: &BTreeMap<u32, Vec<Vec<MetaSample>>>,
    feature_kinds: &[String],
    target: TargetMetric,
) -> BTreeMap<u32, Result<LooReport>> {
    runs_by_class
        .iter()
        .map(|(&c, runs)| (c, loo_evaluate(runs, feature_kinds, target)))
        .collect()
}

/// Dropout rates `0, step, 2 step, ..., 1`.
pub fn rate_grid(step: f64) -> Vec<f64> {
    let n = (1.0 / step).round() as usize;
    (0..=n)
        .map(|k| ((k as f64 * step) * 1e9).round() / 1e9)
        .collect()
}

/// The 15 non-empty subsets of backbone stages `{0, 1, 2, 3}`, by size then
/// lexicographically.
pub fn stage_subsets() -> Vec<Vec<u8>> {
    let mut out: Vec<Vec<u8>> = (1u8..16)
        .map(|mask| (0..4).filter(|b| mask & (1 << b) != 0).collect())
        .collect();
    out.sort_by(|a, b| a.len().cmp(&b.len()).then_with(|| a.cmp(b)));
    out
}

/// Full grid of `rates x positions`.
pub fn grid_candidates(rates: &[f64], positions: &[Vec<u8>]) -> Vec<PerturbConfig> {
    positions
        .iter()
        .flat_map(|p| rates.iter().map(move |&r| PerturbConfig::new(r, p.clone())))
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct PerturbSearch {
    pub best: PerturbConfig,
    pub best_r2: f64,
    /// Every evaluated configuration with its score, `None` where the scorer
    /// failed.
    pub evaluated: Vec<(PerturbConfig, Option<f64>)>,
}

/// Greedy two-phase search maximizing training R².
///
/// Phase one sweeps the dropout rate over candidates sharing the first
/// candidate's positions; phase two sweeps positions over candidates with the
/// best rate. Ties keep the earlier evaluated configuration.
pub fn search_perturb_config<F>(
    candidates: &[PerturbConfig],
    mut scorer: F,
) -> Result<PerturbSearch>
where
    F: FnMut(&PerturbConfig) -> Result<f64>,
{
    let first = candidates
        .first()
        .ok_or_else(|| Error::InvalidInput("no perturbation candidates".into()))?;
    let same_rate = |a: f64, b: f64| (a - b).abs() < 1e-9;
    let mut evaluated: Vec<(PerturbConfig, Option<f64>)> = Vec::new();
    let mut best: Option<(usize, f64)> = None;
    let mut consider = |cfg: &PerturbConfig,
                        evaluated: &mut Vec<(PerturbConfig, Option<f64>)>,
                        best: &mut Option<(usize, f64)>| {
        if evaluated
            .iter()
            .any(|(c, _)| same_rate(c.rate, cfg.rate) && c.positions == cfg.positions)
        {
            return;
        }
        let score = scorer(cfg).ok().filter(|s| s.is_finite());
        evaluated.push((cfg.clone(), score));
        if let Some(s) = score {
            if best.is_none_or(|(_, b)| s > b) {
                *best = Some((evaluated.len() - 1, s));
            }
        }
    };

    let mut phase1: Vec<&PerturbConfig> = candidates
        .iter()
        .filter(|c| c.positions == first.positions)
        .collect();
    phase1.sort_by(|a, b| a.rate.total_cmp(&b.rate));
    for cfg in phase1 {
        consider(cfg, &mut evaluated, &mut best);
    }
    let best_rate = best.map(|(i, _)| evaluated[i].0.rate);
    let phase2: Vec<&PerturbConfig> = match best_rate {
        Some(r) => candidates.iter().filter(|c| same_rate(c.rate, r)).collect(),
        // Every rate failed with the first positions; try all positions.
        None => candidates.iter().collect(),
    };
    for cfg in phase2 {
        consider(cfg, &mut evaluated, &mut best);
    }
    let (idx, score) =
        best.ok_or_else(|| Error::InvalidInput("scorer failed on every candidate".into()))?;
    Ok(PerturbSearch {
        best: evaluated[idx].0.clone(),
        best_r2: score,
        evaluated,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(src: &str, x: &[f64], y: f64) -> MetaSample {
        MetaSample {
            set_id: format!("{src}-{x:?}"),
            source_name: src.into(),
            role: SetRole::Train,
            features: x.to_vec(),
            target_map: Some(y),
        }
    }

    fn labels(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("f{i}")).collect()
    }

    #[test]
    fn exact_line_fit() {
        let s = [
            sample("a", &[0.2], 0.2),
            sample("a", &[0.6], 0.6),
            sample("a", &[0.9], 0.9),
        ];
        let m = fit_regressor(&s, &labels(1), TargetMetric::Map).unwrap();
        assert!(m.weights[0].abs() < 1e-12);
        assert!((m.weights[1] - 1.0).abs() < 1e-12);
        assert!((m.r2 - 1.0).abs() < 1e-12);
        assert!(m.residual_rmse < 1e-12);
    }

    #[test]
    fn degenerate_fits() {
        let s = [
            sample("a", &[0.5], 0.2),
            sample("a", &[0.5], 0.6),
            sample("a", &[0.5], 0.9),
        ];
        assert!(matches!(
            fit_regressor(&s, &labels(1), TargetMetric::Map),
            Err(Error::RankDeficient(_))
        ));
        let s = [sample("a", &[0.1], 0.2), sample("a", &[0.5], 0.6)];
        assert!(fit_regressor(&s, &labels(1), TargetMetric::Map).is_err());
    }

    #[test]
    fn prediction_examples() {
        let identity = LinearModel {
            weights: vec![0.0, 1.0],
            feature_kinds: labels(1),
            target: TargetMetric::Map,
            r2: 1.0,
            residual_rmse: 0.0,
            n_train: 3,
        };
        assert_eq!(predict_map(&identity, &[0.42]).unwrap(), 0.42);
        let steep = LinearModel {
            weights: vec![0.0, 2.0],
            ..identity.clone()
        };
        assert_eq!(predict_map(&steep, &[0.9]).unwrap(), 1.0);
        assert!(predict_map(&identity, &[0.1, 0.2]).is_err());

        let s = [
            sample("a", &[0.3], 0.15),
            sample("a", &[0.7], 0.35),
            sample("a", &[0.5], 0.25),
        ];
        let m = fit_regressor(&s, &labels(1), TargetMetric::Map).unwrap();
        assert!((predict_map(&m, &[0.5]).unwrap() - 0.25).abs() < 1e-12);
    }

    #[test]
    fn estimate_report_examples() {
        let t = [0.1, 0.4, 0.3, 0.8];
        let r = evaluate_estimates(&t, &t).unwrap();
        assert_eq!(r.rmse, 0.0);
        assert_eq!(r.r2, Some(1.0));
        assert!((r.spearman_rho.unwrap() - 1.0).abs() < 1e-12);
        let r = evaluate_estimates(&[0.1, 0.1], &[0.3, 0.3]).unwrap();
        assert!((r.rmse - 0.2).abs() < 1e-12);
        assert_eq!(r.r2, None);
        let mono: Vec<f64> = t.iter().map(|v: &f64| v.exp() * 3.0).collect();
        assert!((evaluate_estimates(&mono, &t).unwrap().spearman_rho.unwrap() - 1.0).abs() < 1e-12);
        assert!(evaluate_estimates(&[0.1], &[0.1, 0.2]).is_err());
    }

    #[test]
    fn ranks_with_ties() {
        assert_eq!(
            average_ranks(&[3.0, 1.0, 3.0, 2.0]),
            vec![3.5, 1.0, 3.5, 2.0]
        );
    }

    #[test]
    fn perfect_meta_set_gives_zero_rmse() {
        let mut meta = Vec::new();
        for s in 0..10 {
            for k in 0..5 {
                let x = 0.1 + 0.08 * s as f64 + 0.01 * k as f64;
                meta.push(sample(&format!("src{s}"), &[x], 0.5 * x + 0.1));
            }
        }
        let report = loo_evaluate(&[meta], &labels(1), TargetMetric::Map).unwrap();
        assert_eq!(report.rows.len(), 10);
        for row in &report.rows {
            assert!(row.rmse_mean.unwrap() < 1e-12);
            assert!(!row.train_sources.contains(&row.source_name));
            assert_eq!(row.train_sources.len(), 9);
        }
        assert!(report.average_rmse < 1e-12);
        let csv = report.to_csv();
        assert!(csv.starts_with("metric,src0,src1"));
        assert_eq!(csv.lines().count(), 5);
    }

    #[test]
    fn test_role_samples_are_held_out_points() {
        let mut meta = Vec::new();
        for s in 0..3 {
            for k in 0..4 {
                let x = 0.2 * s as f64 + 0.05 * k as f64;
                meta.push(sample(&format!("s{s}"), &[x], x));
            }
            let mut t = sample(&format!("s{s}"), &[0.5], 0.9);
            t.role = SetRole::Test;
            meta.push(t);
        }
        let r = loo_evaluate(&[meta], &labels(1), TargetMetric::Map).unwrap();
        for row in &r.rows {
            assert!((row.rmse_mean.unwrap() - 0.4).abs() < 1e-9);
            assert_eq!(row.ground_truth_map, Some(0.9));
        }
    }

    #[test]
    fn undefined_source_row_is_skipped() {
        let mut meta = Vec::new();
        for s in 0..3 {
            for k in 0..4 {
                let x = 0.2 * s as f64 + 0.05 * k as f64;
                let v = if s == 1 { f64::NAN } else { x };
                meta.push(sample(&format!("s{s}"), &[v], x));
            }
        }
        let r = loo_evaluate(&[meta], &labels(1), TargetMetric::Map).unwrap();
        assert!(r.rows[1].skipped.is_some());
        assert!(r.rows[1].rmse_mean.is_none());
        assert!(r.rows[0].skipped.is_none());
    }

    #[test]
    fn repeated_runs_report_spread() {
        let make = |bias: f64| {
            let mut meta = Vec::new();
            for s in 0..3 {
                for k in 0..4 {
                    let x = 0.2 * s as f64 + 0.05 * k as f64;
                    meta.push(sample(&format!("s{s}"), &[x], x));
                }
                let mut t = sample(&format!("s{s}"), &[0.3], 0.3 + bias);
                t.role = SetRole::Test;
                meta.push(t);
            }
            meta
        };
        let r = loo_evaluate(&[make(0.1), make(0.3)], &labels(1), TargetMetric::Map).unwrap();
        let row = &r.rows[0];
        assert_eq!(row.runs, 2);
        assert!((row.rmse_mean.unwrap() - 0.2).abs() < 1e-9);
        assert!((row.rmse_std.unwrap() - 0.2f64.hypot(0.0) / 2f64.sqrt()).abs() < 1e-9);
    }

    #[test]
    fn grids() {
        let g = rate_grid(0.05);
        assert_eq!(g.len(), 21);
        assert_eq!(g[3], 0.15);
        let s = stage_subsets();
        assert_eq!(s.len(), 15);
        assert_eq!(s[0], vec![0]);
        assert_eq!(s[14], vec![0, 1, 2, 3]);
    }

    #[test]
    fn search_single_and_unimodal() {
        let one = vec![PerturbConfig::new(0.3, vec![2])];
        assert_eq!(
            search_perturb_config(&one, |_| Ok(0.1)).unwrap().best,
            one[0]
        );

        let cands = grid_candidates(&rate_grid(0.05), &stage_subsets());
        let res = search_perturb_config(&cands, |c| {
            let pos_bonus = if c.positions == vec![1, 2] { 0.05 } else { 0.0 };
            Ok(0.9 - (c.rate - 0.15).powi(2) + pos_bonus)
        })
        .unwrap();
        assert_eq!(res.best.rate, 0.15);
        assert_eq!(res.best.positions, vec![1, 2]);
        // 21 rates then 14 remaining position sets.
        assert_eq!(res.evaluated.len(), 21 + 14);

        let err = search_perturb_config(&cands, |_| Err(Error::InvalidInput("boom".into())));
        assert!(err.is_err());
    }
}
