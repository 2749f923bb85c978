//! Ground-truth mAP: per-class, per-IoU-threshold average precision with
//! 101-point interpolation, averaged over classes present in the labels.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dumps::{DetectionRecord, ImageRecord};
use crate::error::{Error, Result};
use crate::geometry::iou;

/// IoU thresholds 0.50, 0.55, ..., 0.95.
pub fn coco_thresholds() -> Vec<f64> {
    (0..10).map(|i| (50 + 5 * i) as f64 / 100.0).collect()
}

/// Which inference pass is evaluated.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PassSelector {
    #[default]
    Original,
    Perturbed,
}

impl PassSelector {
    pub fn select<'a>(&self, r: &'a ImageRecord) -> &'a [DetectionRecord] {
        match self {
            PassSelector::Original => &r.original,
            PassSelector::Perturbed => &r.perturbed,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MatchDecision {
    pub image: usize,
    pub detection: usize,
    pub ground_truth: Option<usize>,
    pub confidence: f64,
}

impl MatchDecision {
    pub fn is_true_positive(&self) -> bool {
        self.ground_truth.is_some()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MapReport {
    pub thresholds: Vec<f64>,
    /// AP per class, one entry per threshold. Only classes with ground truth.
    pub ap: BTreeMap<u32, Vec<f64>>,
    pub map_all: f64,
    pub map50: Option<f64>,
    pub map75: Option<f64>,
    /// AP per class averaged over thresholds.
    pub per_class: BTreeMap<u32, f64>,
}

impl MapReport {
    pub fn ap_at(&self, class_id: u32, threshold: f64) -> Option<f64> {
        let t = self.threshold_index(threshold)?;
        self.ap.get(&class_id).map(|v| v[t])
    }

    fn threshold_index(&self, threshold: f64) -> Option<usize> {
        self.thresholds
            .iter()
            .position(|t| (t - threshold).abs() < 1e-12)
    }

    /// Mean AP over classes at one threshold.
    pub fn map_at(&self, threshold: f64) -> Option<f64> {
        let t = self.threshold_index(threshold)?;
        if self.ap.is_empty() {
            return None;
        }
        Some(self.ap.values().map(|v| v[t]).sum::<f64>() / self.ap.len() as f64)
    }
}

/// 101-point interpolated AP: mean over recall levels `r = 0, 0.01, ..., 1`
/// of the best precision achieved at recall `>= r`.
pub fn average_precision(pr_points: &[(f64, f64)]) -> f64 {
    if pr_points.is_empty() {
        return 0.0;
    }
    // Suffix maxima of precision, scanning recall from high to low.
    let mut envelope: Vec<(f64, f64)> = Vec::with_capacity(pr_points.len());
    let mut best = 0.0f64;
    for &(r, p) in pr_points.iter().rev() {
        best = best.max(p);
        envelope.push((r, best));
    }
    envelope.reverse();
    let mut sum = 0.0;
    let mut k = 0usize;
    for step in 0..=100 {
        let level = step as f64 / 100.0;
        while k < envelope.len() && envelope[k].0 < level - 1e-12 {
            k += 1;
        }
        if k == envelope.len() {
            break;
        }
        sum += envelope[k].1;
    }
    sum / 101.0
}

/// Greedy matching of one class at one threshold. Detections are visited by
/// descending confidence (ties by image order, then box order); each takes
/// the unconsumed same-class ground truth with highest IoU at or above the
/// threshold.
pub fn match_class(
    records: &[ImageRecord],
    pass: PassSelector,
    class_id: u32,
    threshold: f64,
) -> (Vec<MatchDecision>, usize) {
    let mut order: Vec<(usize, usize, f64)> = Vec::new();
    let mut n_gt = 0usize;
    let mut consumed: Vec<Vec<bool>> = Vec::with_capacity(records.len());
    for (i, r) in records.iter().enumerate() {
        let gt = r.ground_truth.as_deref().unwrap_or(&[]);
        n_gt += gt.iter().filter(|g| g.class_id == class_id).count();
        consumed.push(vec![false; gt.len()]);
        for (d, det) in pass.select(r).iter().enumerate() {
            if det.class_id == class_id {
                order.push((i, d, det.score));
            }
        }
    }
    order.sort_by(|a, b| {
        b.2.partial_cmp(&a.2)
            .unwrap_or(Ordering::Equal)
            .then_with(|| records[a.0].image_id.cmp(&records[b.0].image_id))
            .then(a.1.cmp(&b.1))
    });

    let decisions = order
        .into_iter()
        .map(|(i, d, score)| {
            let det = &pass.select(&records[i])[d];
            let gt = records[i].ground_truth.as_deref().unwrap_or(&[]);
            let mut best: Option<(usize, f64)> = None;
            for (g, gbox) in gt.iter().enumerate() {
                if gbox.class_id != class_id || consumed[i][g] {
                    continue;
                }
                let o = iou(&det.bbox, &gbox.bbox);
                if o >= threshold && best.is_none_or(|(_, b)| o > b) {
                    best = Some((g, o));
                }
            }
            if let Some((g, _)) = best {
                consumed[i][g] = true;
            }
            MatchDecision {
                image: i,
                detection: d,
                ground_truth: best.map(|(g, _)| g),
                confidence: score,
            }
        })
        .collect();
    (decisions, n_gt)
}

/// Precision/recall after each detection in ranked order.
pub fn pr_curve(decisions: &[MatchDecision], n_gt: usize) -> Vec<(f64, f64)> {
    if n_gt == 0 {
        return Vec::new();
    }
    let mut tp = 0usize;
    decisions
        .iter()
        .enumerate()
        .map(|(k, d)| {
            if d.is_true_positive() {
                tp += 1;
            }
            (tp as f64 / n_gt as f64, tp as f64 / (k + 1) as f64)
        })
        .collect()
}

pub fn evaluate_detections(
    records: &[ImageRecord],
    pass: PassSelector,
    thresholds: &[f64],
) -> Result<MapReport> {
    if thresholds.is_empty() {
        return Err(Error::InvalidInput("no IoU thresholds".into()));
    }
    if let Some(t) = thresholds
        .iter()
        .find(|t| !(t.is_finite() && **t > 0.0 && **t <= 1.0))
    {
        return Err(Error::validation(
            "thresholds",
            format!("{t} outside (0, 1]"),
        ));
    }
    let mut classes = BTreeSet::new();
    for r in records {
        let gt = r.ground_truth.as_ref().ok_or_else(|| {
            Error::validation(
                "ground_truth",
                format!("image {:?} has no ground truth", r.image_id),
            )
        })?;
        classes.extend(gt.iter().map(|g| g.class_id));
    }

    let jobs: Vec<(u32, usize)> = classes
        .iter()
        .flat_map(|&c| (0..thresholds.len()).map(move |t| (c, t)))
        .collect();
    let values: Vec<f64> = jobs
        .par_iter()
        .map(|&(c, t)| {
            let (decisions, n_gt) = match_class(records, pass, c, thresholds[t]);
            average_precision(&pr_curve(&decisions, n_gt))
        })
        .collect();

    let mut ap: BTreeMap<u32, Vec<f64>> = BTreeMap::new();
    for (&(c, _), v) in jobs.iter().zip(values) {
        ap.entry(c).or_default().push(v);
    }
    let per_class: BTreeMap<u32, f64> = ap
        .iter()
        .map(|(&c, v)| (c, v.iter().sum::<f64>() / v.len() as f64))
        .collect();
    let map_all = if per_class.is_empty() {
        0.0
    } else {
        per_class.values().sum::<f64>() / per_class.len() as f64
    };
    let mut report = MapReport {
        thresholds: thresholds.to_vec(),
        ap,
        map_all,
        map50: None,
        map75: None,
        per_class,
    };
    report.map50 = report.map_at(0.5);
    report.map75 = report.map_at(0.75);
    Ok(report)
}
