//! Reference measurements compared against BoS: confidence-based scores
//! (PS, ES, AC, ATC) and the Fréchet distance between Gaussian summaries of
//! backbone features.

use std::path::Path;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::dumps::{write_atomic, ImageRecord};
use crate::error::{Error, Result};
use crate::matching::{DatasetScore, MeasureKind, StabilityOptions};

pub const DEFAULT_PS_TAU: f64 = 0.95;
pub const DEFAULT_ATC_TAU: f64 = 0.4;
pub const DEFAULT_ES_TAU: f64 = 0.3;

/// Default threshold of a confidence measure; `None` for measures without one.
pub fn default_tau(kind: MeasureKind) -> Option<f64> {
    match kind {
        MeasureKind::Ps => Some(DEFAULT_PS_TAU),
        MeasureKind::Atc => Some(DEFAULT_ATC_TAU),
        MeasureKind::Es => Some(DEFAULT_ES_TAU),
        _ => None,
    }
}

/// How box-level criteria are aggregated to a set-level value.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    /// Pool all boxes of the set.
    #[default]
    PooledBoxes,
    /// Average per-image values over images with at least one box.
    PerImage,
}

/// Entropy of `probs` divided by `ln K`; zero for a single class.
pub fn normalized_entropy(probs: &[f64]) -> f64 {
    if probs.len() <= 1 {
        return 0.0;
    }
    let h: f64 = probs
        .iter()
        .filter(|&&p| p > 0.0)
        .map(|&p| -p * p.ln())
        .sum();
    (h / (probs.len() as f64).ln()).clamp(0.0, 1.0)
}

/// PS, ES, AC or ATC over the original-pass boxes that survive
/// `opts.score_threshold` (and `opts.class_filter`).
pub fn confidence_measure(
    records: &[ImageRecord],
    kind: MeasureKind,
    tau: f64,
    opts: &StabilityOptions,
    aggregation: Aggregation,
) -> Result<DatasetScore> {
    if !matches!(
        kind,
        MeasureKind::Ps | MeasureKind::Es | MeasureKind::Ac | MeasureKind::Atc
    ) {
        return Err(Error::InvalidInput(format!(
            "{kind} is not a confidence measure"
        )));
    }
    let mut per_image: Vec<(f64, usize)> = Vec::with_capacity(records.len());
    let mut sorted: Vec<&ImageRecord> = records.iter().collect();
    sorted.sort_by(|a, b| a.image_id.cmp(&b.image_id));
    for r in sorted {
        let mut sum = 0.0;
        let mut n = 0usize;
        for d in r.original.iter().filter(|d| opts.keeps(d)) {
            let v = match kind {
                MeasureKind::Ac => d.score,
                MeasureKind::Ps | MeasureKind::Atc => f64::from(u8::from(d.score >= tau)),
                MeasureKind::Es => {
                    let probs = d.probs.as_deref().ok_or_else(|| {
                        Error::MeasureUndefined(format!(
                            "ES needs class probabilities (image {:?})",
                            r.image_id
                        ))
                    })?;
                    f64::from(u8::from(normalized_entropy(probs) <= tau))
                }
                _ => unreachable!(),
            };
            sum += v;
            n += 1;
        }
        per_image.push((sum, n));
    }
    let valid = per_image.iter().filter(|(_, n)| *n > 0).count();
    let total: usize = per_image.iter().map(|(_, n)| n).sum();
    if total == 0 {
        return Err(Error::MeasureUndefined(format!(
            "{kind}: no boxes retained"
        )));
    }
    let value = match aggregation {
        Aggregation::PooledBoxes => per_image.iter().map(|(s, _)| s).sum::<f64>() / total as f64,
        Aggregation::PerImage => {
            per_image
                .iter()
                .filter(|(_, n)| *n > 0)
                .map(|(s, n)| s / *n as f64)
                .sum::<f64>()
                / valid as f64
        }
    };
    Ok(DatasetScore {
        kind,
        value,
        valid_images: valid,
        skipped_images: records.len() - valid,
    })
}

/// Training data for threshold search: the measure evaluated at every
/// candidate threshold on one labeled sample set, with that set's mAP.
#[derive(Debug, Clone, PartialEq)]
pub struct ThresholdSample {
    pub measures: Vec<f64>,
    pub map: f64,
}

/// Squared Pearson correlation, i.e. the R² of a one-feature least-squares
/// line. Zero when either side is constant.
pub fn linear_r2(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx <= 0.0 || syy <= 0.0 {
        return 0.0;
    }
    (sxy * sxy / (sxx * syy)).clamp(0.0, 1.0)
}

/// Picks the candidate whose measure has the highest R² against mAP over the
/// training sets. Ties go to the smallest candidate.
pub fn learn_threshold(candidates: &[f64], samples: &[ThresholdSample]) -> Result<f64> {
    if candidates.is_empty() {
        return Err(Error::InvalidInput("no threshold candidates".into()));
    }
    if samples.len() < 2 {
        return Err(Error::InvalidInput(
            "need at least two training samples".into(),
        ));
    }
    if let Some(s) = samples
        .iter()
        .find(|s| s.measures.len() != candidates.len())
    {
        return Err(Error::DimensionMismatch {
            expected: candidates.len(),
            actual: s.measures.len(),
        });
    }
    let maps: Vec<f64> = samples.iter().map(|s| s.map).collect();
    let mut best: Option<(f64, f64)> = None;
    for (k, &tau) in candidates.iter().enumerate() {
        let xs: Vec<f64> = samples.iter().map(|s| s.measures[k]).collect();
        let r2 = linear_r2(&xs, &maps);
        let better = match best {
            None => true,
            Some((bt, br)) => r2 > br || (r2 == br && tau < bt),
        };
        if better {
            best = Some((tau, r2));
        }
    }
    Ok(best.expect("candidates non-empty").0)
}

/// Mean and covariance of a feature distribution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GaussianStats {
    pub dimension: usize,
    pub count: usize,
    pub mean: Vec<f64>,
    /// Row-major `dimension x dimension`.
    pub covariance: Vec<Vec<f64>>,
}

impl GaussianStats {
    pub fn validate(&self) -> Result<()> {
        let d = self.dimension;
        if d == 0 {
            return Err(Error::validation("dimension", "must be positive"));
        }
        if self.mean.len() != d {
            return Err(Error::validation(
                "mean",
                format!("length {} != dimension {d}", self.mean.len()),
            ));
        }
        if self.covariance.len() != d || self.covariance.iter().any(|r| r.len() != d) {
            return Err(Error::validation(
                "covariance",
                format!("must be {d} x {d}"),
            ));
        }
        let finite = self
            .mean
            .iter()
            .chain(self.covariance.iter().flatten())
            .all(|v| v.is_finite());
        if !finite {
            return Err(Error::validation("covariance", "entries must be finite"));
        }
        for i in 0..d {
            for j in 0..i {
                let (a, b) = (self.covariance[i][j], self.covariance[j][i]);
                if (a - b).abs() > 1e-9 * (1.0 + a.abs().max(b.abs())) {
                    return Err(Error::validation(
                        "covariance",
                        format!("not symmetric at ({i}, {j})"),
                    ));
                }
            }
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let s: Self = serde_json::from_str(text)?;
        s.validate()?;
        Ok(s)
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_json()?.as_bytes())
    }

    fn cov_matrix(&self) -> DMatrix<f64> {
        let d = self.dimension;
        DMatrix::from_fn(d, d, |i, j| {
            0.5 * (self.covariance[i][j] + self.covariance[j][i])
        })
    }
}

/// Sample mean and unbiased covariance (Welford updates).
pub fn gaussian_stats(features: &[Vec<f64>]) -> Result<GaussianStats> {
    if features.len() < 2 {
        return Err(Error::InvalidInput(
            "need at least two feature vectors".into(),
        ));
    }
    let d = features[0].len();
    if d == 0 {
        return Err(Error::validation("feature", "empty feature vector"));
    }
    let mut mean = vec![0.0; d];
    let mut m2 = vec![vec![0.0; d]; d];
    let mut delta = vec![0.0; d];
    for (k, f) in features.iter().enumerate() {
        if f.len() != d {
            return Err(Error::DimensionMismatch {
                expected: d,
                actual: f.len(),
            });
        }
        let n = (k + 1) as f64;
        for i in 0..d {
            delta[i] = f[i] - mean[i];
            mean[i] += delta[i] / n;
        }
        for i in 0..d {
            let after = f[i] - mean[i];
            for j in 0..d {
                m2[i][j] += delta[j] * after;
            }
        }
    }
    let denom = (features.len() - 1) as f64;
    let mut covariance = vec![vec![0.0; d]; d];
    for i in 0..d {
        for j in 0..=i {
            let c = 0.5 * (m2[i][j] + m2[j][i]) / denom;
            covariance[i][j] = c;
            covariance[j][i] = c;
        }
    }
    Ok(GaussianStats {
        dimension: d,
        count: features.len(),
        mean,
        covariance,
    })
}

/// Per-image feature vectors of a set, in image-id order.
pub fn collect_features(records: &[ImageRecord]) -> Result<Vec<Vec<f64>>> {
    let mut sorted: Vec<&ImageRecord> = records.iter().collect();
    sorted.sort_by(|a, b| a.image_id.cmp(&b.image_id));
    sorted
        .into_iter()
        .map(|r| {
            r.feature.clone().ok_or_else(|| {
                Error::MeasureUndefined(format!(
                    "FD needs a feature vector (image {:?})",
                    r.image_id
                ))
            })
        })
        .collect()
}

/// Relative tolerance for negative eigenvalues treated as rounding noise.
const PSD_TOL: f64 = 1e-8;

/// Eigen-decomposition of a symmetric matrix with tiny negative eigenvalues
/// clamped to zero; larger negative eigenvalues are an error.
fn psd_eigen(m: DMatrix<f64>) -> Result<SymmetricEigen<f64, nalgebra::Dyn>> {
    let mut eig = SymmetricEigen::new(m);
    let scale = eig.eigenvalues.iter().fold(1.0f64, |a, v| a.max(v.abs()));
    for v in eig.eigenvalues.iter_mut() {
        if *v < 0.0 {
            if *v < -PSD_TOL * scale {
                return Err(Error::NotPsd(*v));
            }
            *v = 0.0;
        }
    }
    Ok(eig)
}

fn psd_sqrt(m: DMatrix<f64>) -> Result<DMatrix<f64>> {
    let eig = psd_eigen(m)?;
    let roots = DVector::from_iterator(
        eig.eigenvalues.len(),
        eig.eigenvalues.iter().map(|v| v.sqrt()),
    );
    Ok(&eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose())
}

/// Fréchet distance between two Gaussians:
/// `|mu1 - mu2|^2 + tr(S1 + S2 - 2 (S1 S2)^(1/2))`.
///
/// The trace of `(S1 S2)^(1/2)` is taken from the symmetric PSD matrix
/// `S1^(1/2) S2 S1^(1/2)`, which has the same eigenvalues as `S1 S2`.
pub fn fd_score(test: &GaussianStats, reference: &GaussianStats) -> Result<f64> {
    test.validate()?;
    reference.validate()?;
    if test.dimension != reference.dimension {
        return Err(Error::DimensionMismatch {
            expected: reference.dimension,
            actual: test.dimension,
        });
    }
    let s1 = test.cov_matrix();
    let s2 = reference.cov_matrix();
    psd_eigen(s2.clone())?;
    let root1 = psd_sqrt(s1.clone())?;
    let middle = &root1 * &s2 * &root1;
    let middle = (&middle + middle.transpose()) * 0.5;
    let cross = psd_eigen(middle)?;
    let tr_cross: f64 = cross.eigenvalues.iter().map(|v| v.sqrt()).sum();

    let mean_term: f64 = test
        .mean
        .iter()
        .zip(&reference.mean)
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    Ok((mean_term + s1.trace() + s2.trace() - 2.0 * tr_cross).max(0.0))
}

/// FD between a set's image features and persisted reference statistics.
pub fn fd_measure(records: &[ImageRecord], reference: &GaussianStats) -> Result<DatasetScore> {
    let features = collect_features(records)?;
    let stats = gaussian_stats(&features)?;
    Ok(DatasetScore {
        kind: MeasureKind::Fd,
        value: fd_score(&stats, reference)?,
        valid_images: records.len(),
        skipped_images: 0,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dumps::DetectionRecord;
    use crate::geometry::BBox;

    fn rec(id: &str, scores: &[f64]) -> ImageRecord {
        let mut r = ImageRecord::new(id);
        r.original = scores
            .iter()
            .map(|&s| DetectionRecord::new(BBox::new(0.0, 0.0, 1.0, 1.0).unwrap(), s, 0))
            .collect();
        r
    }

    fn no_filter() -> StabilityOptions {
        StabilityOptions {
            score_threshold: 0.0,
            ..Default::default()
        }
    }

    #[test]
    fn confidence_examples() {
        let opts = no_filter();
        let ac = confidence_measure(
            &[rec("a", &[0.8, 0.6])],
            MeasureKind::Ac,
            0.0,
            &opts,
            Aggregation::PooledBoxes,
        );
        assert!((ac.unwrap().value - 0.7).abs() < 1e-12);
        let atc = confidence_measure(
            &[rec("a", &[0.3, 0.5, 0.9])],
            MeasureKind::Atc,
            0.4,
            &opts,
            Aggregation::PooledBoxes,
        );
        assert!((atc.unwrap().value - 2.0 / 3.0).abs() < 1e-12);
        let ps = confidence_measure(
            &[rec("a", &[0.3, 0.5, 0.9])],
            MeasureKind::Ps,
            0.4,
            &opts,
            Aggregation::PooledBoxes,
        );
        assert!((ps.unwrap().value - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn es_uniform_probs_is_zero() {
        let mut r = rec("a", &[0.5, 0.5]);
        for d in &mut r.original {
            d.probs = Some(vec![0.25; 4]);
        }
        let es = confidence_measure(
            &[r],
            MeasureKind::Es,
            0.3,
            &no_filter(),
            Aggregation::PooledBoxes,
        )
        .unwrap();
        assert_eq!(es.value, 0.0);
        let missing = confidence_measure(
            &[rec("a", &[0.5])],
            MeasureKind::Es,
            0.3,
            &no_filter(),
            Aggregation::PooledBoxes,
        );
        assert!(matches!(missing, Err(Error::MeasureUndefined(_))));
    }

    #[test]
    fn pooled_vs_per_image() {
        let recs = [rec("a", &[1.0]), rec("b", &[0.0, 0.0, 0.0]), rec("c", &[])];
        let pooled = confidence_measure(
            &recs,
            MeasureKind::Ac,
            0.0,
            &no_filter(),
            Aggregation::PooledBoxes,
        )
        .unwrap();
        let per = confidence_measure(
            &recs,
            MeasureKind::Ac,
            0.0,
            &no_filter(),
            Aggregation::PerImage,
        )
        .unwrap();
        assert!((pooled.value - 0.25).abs() < 1e-12);
        assert!((per.value - 0.5).abs() < 1e-12);
        assert_eq!((per.valid_images, per.skipped_images), (2, 1));
    }

    #[test]
    fn no_retained_boxes_is_undefined() {
        let r = confidence_measure(
            &[rec("a", &[0.1])],
            MeasureKind::Ac,
            0.0,
            &StabilityOptions::default(),
            Aggregation::PooledBoxes,
        );
        assert!(matches!(r, Err(Error::MeasureUndefined(_))));
    }

    #[test]
    fn threshold_search() {
        assert_eq!(
            learn_threshold(
                &[0.7],
                &[
                    ThresholdSample {
                        measures: vec![0.1],
                        map: 0.2
                    },
                    ThresholdSample {
                        measures: vec![0.3],
                        map: 0.5
                    }
                ]
            )
            .unwrap(),
            0.7
        );
        assert!(learn_threshold(&[], &[]).is_err());
        // All-equal R² ties resolve to the smallest candidate.
        let flat = vec![
            ThresholdSample {
                measures: vec![0.5, 0.5],
                map: 0.1,
            },
            ThresholdSample {
                measures: vec![0.5, 0.5],
                map: 0.2,
            },
        ];
        assert_eq!(learn_threshold(&[0.9, 0.2], &flat).unwrap(), 0.2);
    }

    #[test]
    fn stats_basics() {
        let s = gaussian_stats(&[vec![0.0, 0.0], vec![2.0, 0.0]]).unwrap();
        assert_eq!(s.mean, vec![1.0, 0.0]);
        assert!((s.covariance[0][0] - 2.0).abs() < 1e-12);
        let same = gaussian_stats(&vec![vec![1.5, -2.0]; 5]).unwrap();
        assert!(same.covariance.iter().flatten().all(|&c| c == 0.0));
        assert!(gaussian_stats(&[vec![1.0], vec![1.0, 2.0]]).is_err());
        assert!(gaussian_stats(&[vec![1.0]]).is_err());
    }

    fn stats(mean: Vec<f64>, cov: Vec<Vec<f64>>) -> GaussianStats {
        GaussianStats {
            dimension: mean.len(),
            count: 10,
            mean,
            covariance: cov,
        }
    }

    #[test]
    fn fd_closed_forms() {
        let a = stats(vec![0.0], vec![vec![1.0]]);
        let b = stats(vec![1.0], vec![vec![1.0]]);
        assert!((fd_score(&a, &b).unwrap() - 1.0).abs() < 1e-9);
        // (mu1-mu2)^2 + (sigma1-sigma2)^2 with sigma 1 and 3.
        let c = stats(vec![0.0], vec![vec![9.0]]);
        assert!((fd_score(&a, &c).unwrap() - 4.0).abs() < 1e-9);
        assert!(fd_score(&a, &a).unwrap().abs() < 1e-9);
    }

    #[test]
    fn fd_rejects_bad_inputs() {
        let a = stats(vec![0.0, 0.0], vec![vec![1.0, 0.0], vec![0.0, 1.0]]);
        let neg = stats(vec![0.0, 0.0], vec![vec![1.0, 0.0], vec![0.0, -1.0]]);
        assert!(matches!(fd_score(&neg, &a), Err(Error::NotPsd(_))));
        let asym = stats(vec![0.0, 0.0], vec![vec![1.0, 0.5], vec![0.0, 1.0]]);
        assert!(fd_score(&asym, &a).is_err());
        let one = stats(vec![0.0], vec![vec![1.0]]);
        assert!(matches!(
            fd_score(&one, &a),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn stats_json_round_trip() {
        let s = gaussian_stats(&[vec![0.0, 1.0], vec![2.0, 0.5], vec![-1.0, 0.25]]).unwrap();
        assert_eq!(GaussianStats::from_json(&s.to_json().unwrap()).unwrap(), s);
        assert!(GaussianStats::from_json(
            r#"{"dimension":2,"count":1,"mean":[0],"covariance":[[1]]}"#
        )
        .is_err());
    }
}
