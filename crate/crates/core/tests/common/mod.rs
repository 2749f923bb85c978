//! Slow, obviously-correct reference implementations used by the tests.
#![allow(dead_code, clippy::needless_range_loop)]

use bos_core::dumps::{DetectionRecord, GroundTruthBox, ImageRecord};
use bos_core::geometry::{iou, BBox};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_box(rng: &mut ChaCha8Rng, extent: f64) -> BBox {
    let x1 = rng.random_range(0.0..extent);
    let y1 = rng.random_range(0.0..extent);
    let w = rng.random_range(0.0..extent / 2.0);
    let h = rng.random_range(0.0..extent / 2.0);
    BBox::new(x1, y1, x1 + w, y1 + h).unwrap()
}

/// Boxes on a coarse integer grid, so that overlaps and exact ties are common.
pub fn grid_box(rng: &mut ChaCha8Rng) -> BBox {
    let x1 = rng.random_range(0..6) as f64;
    let y1 = rng.random_range(0..6) as f64;
    let w = rng.random_range(1..5) as f64;
    let h = rng.random_range(1..5) as f64;
    BBox::new(x1, y1, x1 + w, y1 + h).unwrap()
}

/// Minimum total cost over all injections of rows into columns.
pub fn brute_force_min(cost: &[Vec<f64>]) -> f64 {
    fn go(cost: &[Vec<f64>], row: usize, used: &mut Vec<bool>, acc: f64, best: &mut f64) {
        if row == cost.len() {
            *best = best.min(acc);
            return;
        }
        for j in 0..used.len() {
            if !used[j] {
                used[j] = true;
                go(cost, row + 1, used, acc + cost[row][j], best);
                used[j] = false;
            }
        }
    }
    let m = cost.first().map_or(0, Vec::len);
    let mut best = f64::INFINITY;
    go(cost, 0, &mut vec![false; m], 0.0, &mut best);
    best
}

/// Random detection/ground-truth fixture with at most `max_images` images
/// and at most `max_boxes` boxes per list.
pub fn micro_fixture(
    rng: &mut ChaCha8Rng,
    max_images: usize,
    max_boxes: usize,
    classes: u32,
) -> Vec<ImageRecord> {
    let n_images = rng.random_range(1..=max_images);
    (0..n_images)
        .map(|i| {
            let mut r = ImageRecord::new(format!("img{i}"));
            let n_gt = rng.random_range(0..=max_boxes);
            let gt: Vec<GroundTruthBox> = (0..n_gt)
                .map(|_| GroundTruthBox::new(grid_box(rng), rng.random_range(0..classes)))
                .collect();
            let n_det = rng.random_range(0..=max_boxes);
            r.original = (0..n_det)
                .map(|_| {
                    // Coarse scores so that confidence ties occur.
                    let score = rng.random_range(0..=10) as f64 / 10.0;
                    DetectionRecord::new(grid_box(rng), score, rng.random_range(0..classes))
                })
                .collect();
            r.perturbed = r.original.clone();
            r.ground_truth = Some(gt);
            r
        })
        .collect()
}

/// AP by definition: for each class and threshold, rank detections by
/// descending score (ties by image, then box), match greedily to the
/// best unconsumed ground truth, and average over 101 recall levels the
/// best precision attained at any rank with recall at least that level.
/// Returns `(class, per-threshold AP)` for classes with ground truth.
pub fn exhaustive_ap(records: &[ImageRecord], thresholds: &[f64]) -> Vec<(u32, Vec<f64>)> {
    let mut classes: Vec<u32> = records
        .iter()
        .flat_map(|r| r.ground_truth.as_ref().unwrap().iter().map(|g| g.class_id))
        .collect();
    classes.sort_unstable();
    classes.dedup();
    let mut out = Vec::new();
    for &c in &classes {
        let n_gt = records
            .iter()
            .map(|r| {
                r.ground_truth
                    .as_ref()
                    .unwrap()
                    .iter()
                    .filter(|g| g.class_id == c)
                    .count()
            })
            .sum::<usize>();
        let mut aps = Vec::new();
        for &t in thresholds {
            let mut dets: Vec<(usize, usize)> = Vec::new();
            for (i, r) in records.iter().enumerate() {
                for (d, det) in r.original.iter().enumerate() {
                    if det.class_id == c {
                        dets.push((i, d));
                    }
                }
            }
            // Stable sort keeps (image, box) order among equal scores.
            dets.sort_by(|a, b| {
                let sa = records[a.0].original[a.1].score;
                let sb = records[b.0].original[b.1].score;
                sb.partial_cmp(&sa).unwrap()
            });
            let mut used: Vec<Vec<bool>> = records
                .iter()
                .map(|r| vec![false; r.ground_truth.as_ref().unwrap().len()])
                .collect();
            let mut hits = Vec::new();
            for &(i, d) in &dets {
                let b = records[i].original[d].bbox;
                let gt = records[i].ground_truth.as_ref().unwrap();
                let mut best: Option<(usize, f64)> = None;
                for (g, gb) in gt.iter().enumerate() {
                    if gb.class_id != c || used[i][g] {
                        continue;
                    }
                    let v = iou(&b, &gb.bbox);
                    if v >= t && best.is_none_or(|(_, bv)| v > bv) {
                        best = Some((g, v));
                    }
                }
                if let Some((g, _)) = best {
                    used[i][g] = true;
                }
                hits.push(best.is_some());
            }
            let mut sum = 0.0;
            for level in 0..=100usize {
                let mut best_p = 0.0f64;
                for k in 1..=hits.len() {
                    let tp = hits[..k].iter().filter(|&&h| h).count();
                    if tp * 100 >= level * n_gt {
                        best_p = best_p.max(tp as f64 / k as f64);
                    }
                }
                sum += best_p;
            }
            aps.push(sum / 101.0);
        }
        out.push((c, aps));
    }
    out
}

/// Least squares through the normal equations `XᵀX w = Xᵀy`, solved by
/// Gaussian elimination with partial pivoting. `x` rows exclude the
/// intercept column, which is prepended here.
pub fn normal_equations(x: &[Vec<f64>], y: &[f64]) -> Vec<f64> {
    let p = x[0].len() + 1;
    let row = |i: usize| -> Vec<f64> { std::iter::once(1.0).chain(x[i].iter().copied()).collect() };
    let mut a = vec![vec![0.0; p + 1]; p];
    for i in 0..x.len() {
        let r = row(i);
        for j in 0..p {
            for k in 0..p {
                a[j][k] += r[j] * r[k];
            }
            a[j][p] += r[j] * y[i];
        }
    }
    for col in 0..p {
        let piv = (col..p)
            .max_by(|&i, &j| a[i][col].abs().partial_cmp(&a[j][col].abs()).unwrap())
            .unwrap();
        a.swap(col, piv);
        for r in 0..p {
            if r != col {
                let f = a[r][col] / a[col][col];
                for k in col..=p {
                    a[r][k] -= f * a[col][k];
                }
            }
        }
    }
    (0..p).map(|j| a[j][p] / a[j][j]).collect()
}

/// Mean and unbiased covariance computed in two passes.
pub fn two_pass_stats(v: &[Vec<f64>]) -> (Vec<f64>, Vec<Vec<f64>>) {
    let n = v.len() as f64;
    let d = v[0].len();
    let mean: Vec<f64> = (0..d)
        .map(|j| v.iter().map(|r| r[j]).sum::<f64>() / n)
        .collect();
    let cov = (0..d)
        .map(|a| {
            (0..d)
                .map(|b| {
                    v.iter()
                        .map(|r| (r[a] - mean[a]) * (r[b] - mean[b]))
                        .sum::<f64>()
                        / (n - 1.0)
                })
                .collect()
        })
        .collect();
    (mean, cov)
}
