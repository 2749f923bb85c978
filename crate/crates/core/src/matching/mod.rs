//! Pairing of original and perturbed detections and the stability scores
//! built on it.
//!
//! Per image, the smaller of the two (filtered) detection sets is matched
//! into the larger one by the assignment minimizing the summed GIoU loss.
//! The overlap of matched pairs is the image's stability; the box stability
//! score (BoS) of a set is the mean stability over images where it is
//! defined. The confidence stability score (CS) reuses the same matching
//! and measures confidence change instead of geometry.

mod hungarian;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use hungarian::{solve as solve_assignment, CostMatrix};

use crate::dumps::{DetectionRecord, ImageRecord};
use crate::error::{Error, Result};
use crate::geometry::{giou, giou_loss, iou, BBox};

/// Injective pairing of `smaller` into `larger`.
#[derive(Debug, Clone, PartialEq)]
pub struct Assignment {
    /// `(index in smaller, index in larger)`, ordered by the first index.
    pub pairs: Vec<(usize, usize)>,
    /// Sum of the GIoU losses of the pairs.
    pub total_cost: f64,
}

/// Minimum total GIoU-loss matching of every box in `smaller` to a distinct
/// box in `larger`.
pub fn match_pairs(smaller: &[BBox], larger: &[BBox]) -> Result<Assignment> {
    if smaller.is_empty() {
        return Err(Error::NoBoxes);
    }
    if smaller.len() > larger.len() {
        return Err(Error::InvalidInput(format!(
            "smaller set has {} boxes, larger has {}",
            smaller.len(),
            larger.len()
        )));
    }
    let cost = CostMatrix::from_fn(smaller.len(), larger.len(), |i, j| {
        giou_loss(&smaller[i], &larger[j])
    });
    let cols = hungarian::solve(&cost);
    let pairs: Vec<(usize, usize)> = cols.into_iter().enumerate().collect();
    let total_cost = pairs.iter().map(|&(i, j)| cost.get(i, j)).sum();
    Ok(Assignment { pairs, total_cost })
}

/// How a matched pair is turned into a score in `[0, 1]`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairScore {
    #[default]
    Iou,
    /// `(giou + 1) / 2`.
    RescaledGiou,
}

impl PairScore {
    pub fn score(&self, a: &BBox, b: &BBox) -> f64 {
        match self {
            PairScore::Iou => iou(a, b),
            PairScore::RescaledGiou => (giou(a, b) + 1.0) / 2.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StabilityOptions {
    /// Detections scoring below this are dropped from both passes.
    pub score_threshold: f64,
    /// Match only boxes sharing a class id.
    pub classwise: bool,
    pub pair_score: PairScore,
    /// Multiply stability by `n_matched / max(n_ori, n_per)`.
    pub count_penalty: bool,
    /// Restrict to a single class (per-class scoring).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub class_filter: Option<u32>,
}

impl Default for StabilityOptions {
    fn default() -> Self {
        Self {
            score_threshold: 0.3,
            classwise: true,
            pair_score: PairScore::Iou,
            count_penalty: false,
            class_filter: None,
        }
    }
}

impl StabilityOptions {
    pub fn from_json(text: &str) -> Result<Self> {
        let opts: Self = serde_json::from_str(text)?;
        opts.validate()?;
        Ok(opts)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.score_threshold.is_finite() && (0.0..=1.0).contains(&self.score_threshold)) {
            return Err(Error::validation(
                "score_threshold",
                format!("{} outside [0, 1]", self.score_threshold),
            ));
        }
        Ok(())
    }

    pub fn for_class(&self, class_id: u32) -> Self {
        Self {
            class_filter: Some(class_id),
            ..self.clone()
        }
    }

    pub(crate) fn keeps(&self, d: &DetectionRecord) -> bool {
        d.score >= self.score_threshold && self.class_filter.is_none_or(|c| c == d.class_id)
    }
}

/// A matched pair, indexed into the unfiltered detection lists.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MatchedPair {
    pub original: usize,
    pub perturbed: usize,
    pub score: f64,
    pub giou_loss: f64,
    pub confidence_delta: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImageStability {
    pub image_id: String,
    pub n_ori: usize,
    pub n_per: usize,
    /// Number of pairs; `min(n_ori, n_per)`, summed per class when matching
    /// class-wise.
    pub n_matched: usize,
    pub pairs: Vec<MatchedPair>,
    pub stability: Option<f64>,
    /// Mean GIoU loss over the pairs.
    pub matching_loss: Option<f64>,
}

impl ImageStability {
    pub fn pair_scores(&self) -> impl Iterator<Item = f64> + '_ {
        self.pairs.iter().map(|p| p.score)
    }

    /// `1 - mean |s_orig - s_pert|` over the pairs.
    pub fn confidence_stability(&self) -> Option<f64> {
        if self.pairs.is_empty() {
            return None;
        }
        let dev =
            self.pairs.iter().map(|p| p.confidence_delta).sum::<f64>() / self.pairs.len() as f64;
        Some(1.0 - dev)
    }
}

fn match_group(
    original: &[DetectionRecord],
    perturbed: &[DetectionRecord],
    ori_idx: &[usize],
    per_idx: &[usize],
    pair_score: PairScore,
    out: &mut Vec<MatchedPair>,
) {
    if ori_idx.is_empty() || per_idx.is_empty() {
        return;
    }
    let ori_boxes: Vec<BBox> = ori_idx.iter().map(|&i| original[i].bbox).collect();
    let per_boxes: Vec<BBox> = per_idx.iter().map(|&i| perturbed[i].bbox).collect();
    // Ties in size keep the original pass as the smaller side.
    let ori_is_smaller = ori_boxes.len() <= per_boxes.len();
    let assignment = if ori_is_smaller {
        match_pairs(&ori_boxes, &per_boxes)
    } else {
        match_pairs(&per_boxes, &ori_boxes)
    }
    .expect("both groups non-empty");
    for (s, l) in assignment.pairs {
        let (a, b) = if ori_is_smaller { (s, l) } else { (l, s) };
        let o = &original[ori_idx[a]];
        let p = &perturbed[per_idx[b]];
        out.push(MatchedPair {
            original: ori_idx[a],
            perturbed: per_idx[b],
            score: pair_score.score(&o.bbox, &p.bbox),
            giou_loss: giou_loss(&o.bbox, &p.bbox),
            confidence_delta: (o.score - p.score).abs(),
        });
    }
}

/// Stability of one image. Undefined (not an error) when no pair can be
/// formed after filtering.
pub fn image_stability(record: &ImageRecord, opts: &StabilityOptions) -> ImageStability {
    let ori: Vec<usize> = (0..record.original.len())
        .filter(|&i| opts.keeps(&record.original[i]))
        .collect();
    let per: Vec<usize> = (0..record.perturbed.len())
        .filter(|&i| opts.keeps(&record.perturbed[i]))
        .collect();

    let mut pairs = Vec::new();
    if opts.classwise {
        let mut groups: BTreeMap<u32, (Vec<usize>, Vec<usize>)> = BTreeMap::new();
        for &i in &ori {
            groups
                .entry(record.original[i].class_id)
                .or_default()
                .0
                .push(i);
        }
        for &i in &per {
            groups
                .entry(record.perturbed[i].class_id)
                .or_default()
                .1
                .push(i);
        }
        for (o, p) in groups.values() {
            match_group(
                &record.original,
                &record.perturbed,
                o,
                p,
                opts.pair_score,
                &mut pairs,
            );
        }
    } else {
        match_group(
            &record.original,
            &record.perturbed,
            &ori,
            &per,
            opts.pair_score,
            &mut pairs,
        );
    }

    let n_matched = pairs.len();
    let (stability, matching_loss) = if n_matched == 0 {
        (None, None)
    } else {
        let n = n_matched as f64;
        let mut s = pairs.iter().map(|p| p.score).sum::<f64>() / n;
        if opts.count_penalty {
            s *= n / ori.len().max(per.len()) as f64;
        }
        let loss = pairs.iter().map(|p| p.giou_loss).sum::<f64>() / n;
        (Some(s.clamp(0.0, 1.0)), Some(loss))
    };
    ImageStability {
        image_id: record.image_id.clone(),
        n_ori: ori.len(),
        n_per: per.len(),
        n_matched,
        pairs,
        stability,
        matching_loss,
    }
}

/// Per-image stabilities, computed in parallel and returned sorted by
/// image id.
pub fn dataset_stability(records: &[ImageRecord], opts: &StabilityOptions) -> Vec<ImageStability> {
    let mut out: Vec<ImageStability> = records
        .par_iter()
        .map(|r| image_stability(r, opts))
        .collect();
    out.sort_by(|a, b| a.image_id.cmp(&b.image_id));
    out
}

/// Dataset-level measurement kinds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MeasureKind {
    /// Box stability score.
    Bos,
    /// Confidence stability score.
    Cs,
    /// Prediction score: fraction of boxes with confidence above a threshold.
    Ps,
    /// Entropy score: fraction of boxes with low normalized entropy.
    Es,
    /// Average confidence.
    Ac,
    /// Averaged thresholded confidence.
    Atc,
    /// Fréchet distance to reference feature statistics.
    Fd,
}

impl MeasureKind {
    pub const ALL: [MeasureKind; 7] = [
        MeasureKind::Bos,
        MeasureKind::Cs,
        MeasureKind::Ps,
        MeasureKind::Es,
        MeasureKind::Ac,
        MeasureKind::Atc,
        MeasureKind::Fd,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            MeasureKind::Bos => "bos",
            MeasureKind::Cs => "cs",
            MeasureKind::Ps => "ps",
            MeasureKind::Es => "es",
            MeasureKind::Ac => "ac",
            MeasureKind::Atc => "atc",
            MeasureKind::Fd => "fd",
        }
    }
}

impl fmt::Display for MeasureKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for MeasureKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        MeasureKind::ALL
            .into_iter()
            .find(|k| k.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::validation("kind", format!("unknown measure {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DatasetScore {
    pub kind: MeasureKind,
    pub value: f64,
    pub valid_images: usize,
    pub skipped_images: usize,
}

fn mean_of_defined(
    kind: MeasureKind,
    values: impl Iterator<Item = Option<f64>>,
) -> Result<DatasetScore> {
    let mut sum = 0.0;
    let mut valid = 0usize;
    let mut skipped = 0usize;
    for v in values {
        match v {
            Some(x) => {
                sum += x;
                valid += 1;
            }
            None => skipped += 1,
        }
    }
    if valid + skipped == 0 {
        return Err(Error::InvalidInput("no images to score".into()));
    }
    if valid == 0 {
        return Err(Error::Undefined(kind.as_str().to_uppercase()));
    }
    Ok(DatasetScore {
        kind,
        value: (sum / valid as f64).clamp(0.0, 1.0),
        valid_images: valid,
        skipped_images: skipped,
    })
}

fn sorted_by_id(stabilities: &[ImageStability]) -> Vec<&ImageStability> {
    let mut v: Vec<&ImageStability> = stabilities.iter().collect();
    v.sort_by(|a, b| a.image_id.cmp(&b.image_id));
    v
}

/// Mean stability over images where it is defined.
pub fn bos_score(stabilities: &[ImageStability]) -> Result<DatasetScore> {
    mean_of_defined(
        MeasureKind::Bos,
        sorted_by_id(stabilities).into_iter().map(|s| s.stability),
    )
}

/// Mean per-image confidence stability over images with at least one pair.
pub fn cs_from_stabilities(stabilities: &[ImageStability]) -> Result<DatasetScore> {
    mean_of_defined(
        MeasureKind::Cs,
        sorted_by_id(stabilities)
            .into_iter()
            .map(|s| s.confidence_stability()),
    )
}

pub fn bos(records: &[ImageRecord], opts: &StabilityOptions) -> Result<DatasetScore> {
    bos_score(&dataset_stability(records, opts))
}

pub fn cs_score(records: &[ImageRecord], opts: &StabilityOptions) -> Result<DatasetScore> {
    cs_from_stabilities(&dataset_stability(records, opts))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bb(x1: f64, y1: f64, x2: f64, y2: f64) -> BBox {
        BBox::new(x1, y1, x2, y2).unwrap()
    }

    fn det(b: BBox, score: f64, class_id: u32) -> DetectionRecord {
        DetectionRecord::new(b, score, class_id)
    }

    #[test]
    fn single_pair() {
        let a = bb(0.0, 0.0, 2.0, 2.0);
        let b = bb(1.0, 1.0, 3.0, 3.0);
        let m = match_pairs(&[a], &[b]).unwrap();
        assert_eq!(m.pairs, vec![(0, 0)]);
        assert!((m.total_cost - giou_loss(&a, &b)).abs() < 1e-15);
    }

    #[test]
    fn crossed_pairs() {
        let a = bb(0.0, 0.0, 1.0, 1.0);
        let b = bb(10.0, 10.0, 11.0, 11.0);
        let m = match_pairs(&[a, b], &[b, a]).unwrap();
        assert_eq!(m.pairs, vec![(0, 1), (1, 0)]);
        assert_eq!(m.total_cost, 0.0);
    }

    #[test]
    fn empty_or_inverted_inputs() {
        assert!(matches!(
            match_pairs(&[], &[bb(0.0, 0.0, 1.0, 1.0)]),
            Err(Error::NoBoxes)
        ));
        let a = bb(0.0, 0.0, 1.0, 1.0);
        assert!(match_pairs(&[a, a], &[a]).is_err());
    }

    #[test]
    fn duplicate_boxes_pair_in_order() {
        let a = bb(0.0, 0.0, 1.0, 1.0);
        let m = match_pairs(&[a, a], &[a, a, a]).unwrap();
        assert_eq!(m.pairs, vec![(0, 0), (1, 1)]);
    }

    fn record(ori: Vec<DetectionRecord>, per: Vec<DetectionRecord>) -> ImageRecord {
        let mut r = ImageRecord::new("img");
        r.original = ori;
        r.perturbed = per;
        r
    }

    #[test]
    fn identical_passes_are_fully_stable() {
        let dets = vec![
            det(bb(0.0, 0.0, 4.0, 4.0), 0.9, 0),
            det(bb(5.0, 5.0, 9.0, 8.0), 0.8, 1),
        ];
        let s = image_stability(&record(dets.clone(), dets), &StabilityOptions::default());
        assert_eq!(s.stability, Some(1.0));
        assert_eq!(s.matching_loss, Some(0.0));
        assert_eq!(s.n_matched, 2);
    }

    #[test]
    fn overlap_example() {
        let s = image_stability(
            &record(
                vec![det(bb(0.0, 0.0, 2.0, 2.0), 0.9, 0)],
                vec![det(bb(1.0, 1.0, 3.0, 3.0), 0.9, 0)],
            ),
            &StabilityOptions::default(),
        );
        assert!((s.stability.unwrap() - 1.0 / 7.0).abs() < 1e-12);
    }

    #[test]
    fn filtered_empty_pass_is_undefined() {
        let s = image_stability(
            &record(
                vec![det(bb(0.0, 0.0, 2.0, 2.0), 0.1, 0)],
                vec![det(bb(0.0, 0.0, 2.0, 2.0), 0.9, 0)],
            ),
            &StabilityOptions::default(),
        );
        assert_eq!(s.n_ori, 0);
        assert_eq!(s.stability, None);
        assert!(matches!(bos_score(&[s]), Err(Error::Undefined(_))));
    }

    #[test]
    fn classwise_matching_separates_classes() {
        let a = bb(0.0, 0.0, 2.0, 2.0);
        let b = bb(0.0, 0.0, 2.0, 1.0);
        let r = record(vec![det(a, 0.9, 0)], vec![det(a, 0.9, 1), det(b, 0.9, 0)]);
        let s = image_stability(&r, &StabilityOptions::default());
        assert_eq!(s.pairs[0].perturbed, 1);
        assert!((s.stability.unwrap() - 0.5).abs() < 1e-12);
        let flat = StabilityOptions {
            classwise: false,
            ..Default::default()
        };
        assert_eq!(image_stability(&r, &flat).stability, Some(1.0));
        // No common class leaves nothing to match.
        let r = record(vec![det(a, 0.9, 0)], vec![det(a, 0.9, 1)]);
        assert_eq!(
            image_stability(&r, &StabilityOptions::default()).stability,
            None
        );
    }

    #[test]
    fn count_penalty_and_rescaled_giou() {
        let a = bb(0.0, 0.0, 2.0, 2.0);
        let r = record(
            vec![det(a, 0.9, 0)],
            vec![det(a, 0.9, 0), det(bb(5.0, 5.0, 6.0, 6.0), 0.9, 0)],
        );
        let penal = StabilityOptions {
            count_penalty: true,
            ..Default::default()
        };
        assert_eq!(image_stability(&r, &penal).stability, Some(0.5));
        let r = record(
            vec![det(bb(0.0, 0.0, 1.0, 1.0), 0.9, 0)],
            vec![det(bb(2.0, 0.0, 3.0, 1.0), 0.9, 0)],
        );
        let opts = StabilityOptions {
            pair_score: PairScore::RescaledGiou,
            ..Default::default()
        };
        let s = image_stability(&r, &opts).stability.unwrap();
        assert!((s - (1.0 - 1.0 / 3.0) / 2.0).abs() < 1e-12);
    }

    fn with_stability(id: &str, s: Option<f64>) -> ImageStability {
        ImageStability {
            image_id: id.into(),
            n_ori: 1,
            n_per: 1,
            n_matched: s.map_or(0, |_| 1),
            pairs: Vec::new(),
            stability: s,
            matching_loss: None,
        }
    }

    #[test]
    fn bos_mean_over_defined_images() {
        let v = [
            with_stability("a", Some(1.0)),
            with_stability("b", Some(0.5)),
            with_stability("c", None),
        ];
        let s = bos_score(&v).unwrap();
        assert_eq!(s.value, 0.75);
        assert_eq!((s.valid_images, s.skipped_images), (2, 1));
        let all = [
            with_stability("a", Some(1.0)),
            with_stability("b", Some(1.0)),
        ];
        assert_eq!(bos_score(&all).unwrap().value, 1.0);
        assert!(bos_score(&[]).is_err());
    }

    #[test]
    fn cs_examples() {
        let a = bb(0.0, 0.0, 2.0, 2.0);
        let b = bb(10.0, 0.0, 12.0, 2.0);
        let r = record(
            vec![det(a, 0.9, 0), det(b, 0.8, 0)],
            vec![det(a, 0.7, 0), det(b, 0.4, 0)],
        );
        let s = cs_score(std::slice::from_ref(&r), &StabilityOptions::default()).unwrap();
        assert!((s.value - 0.7).abs() < 1e-12);
        let same = record(r.original.clone(), r.original.clone());
        assert_eq!(
            cs_score(&[same], &StabilityOptions::default())
                .unwrap()
                .value,
            1.0
        );
    }

    #[test]
    fn options_json() {
        let o =
            StabilityOptions::from_json(r#"{"score_threshold":0.5,"pair_score":"rescaled_giou"}"#)
                .unwrap();
        assert_eq!(o.score_threshold, 0.5);
        assert!(o.classwise);
        assert!(StabilityOptions::from_json(r#"{"score_threshold":2}"#).is_err());
        assert!(StabilityOptions::from_json(r#"{"bogus":1}"#).is_err());
    }
}
