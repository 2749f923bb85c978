//! Seeded simulator of a detector on labeled scenes, producing two-pass dumps
//! with controllable difficulty so the whole estimation loop can be exercised
//! without a real detector.
//!
//! Each source has a base difficulty `d` in `[0, 1]` that drives localization
//! noise, misses and false positives. In coupled mode the perturbed pass
//! jitters boxes in proportion to the localization noise, so harder sources
//! are both less accurate and less stable. Sources also differ in confidence
//! calibration (a per-source offset) and in where their backbone features
//! sit.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::baselines::{gaussian_stats, GaussianStats};
use crate::dumps::{
    write_atomic, write_dump_file, DetectionRecord, GroundTruthBox, ImageRecord, PerturbConfig,
    SampleSetManifest, SetRole, TransformStep,
};
use crate::error::{Error, Result};
use crate::geometry::{iou, BBox};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorldConfig {
    pub image_width: f64,
    pub image_height: f64,
    pub min_objects: usize,
    pub max_objects: usize,
    pub num_classes: usize,
    pub images_per_set: usize,
    pub sets_per_source: usize,
    pub num_sources: usize,
    /// Images in each source's held-out test set; 0 disables test sets.
    pub test_images_per_source: usize,
    pub feature_dim: usize,
    /// `κ = coupling · σ` in coupled mode.
    pub coupling: f64,
    pub coupled: bool,
    pub seed: u64,
    pub detector_id: String,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            image_width: 640.0,
            image_height: 480.0,
            min_objects: 2,
            max_objects: 8,
            num_classes: 3,
            images_per_set: 40,
            sets_per_source: 50,
            num_sources: 9,
            test_images_per_source: 200,
            feature_dim: 8,
            coupling: 1.0,
            coupled: true,
            seed: 0,
            detector_id: "synthetic-retinanet".into(),
        }
    }
}

impl WorldConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = |name: &str, v: f64| {
            if v.is_finite() && v > 0.0 {
                Ok(())
            } else {
                Err(Error::validation(name, "must be positive"))
            }
        };
        positive("image_width", self.image_width)?;
        positive("image_height", self.image_height)?;
        for (name, v) in [
            ("min_objects", self.min_objects),
            ("num_classes", self.num_classes),
            ("images_per_set", self.images_per_set),
            ("sets_per_source", self.sets_per_source),
            ("num_sources", self.num_sources),
            ("feature_dim", self.feature_dim),
        ] {
            if v == 0 {
                return Err(Error::validation(name, "must be at least 1"));
            }
        }
        if self.max_objects < self.min_objects {
            return Err(Error::validation("max_objects", "below min_objects"));
        }
        if !(self.coupling.is_finite() && self.coupling >= 0.0) {
            return Err(Error::validation("coupling", "must be non-negative"));
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let c: Self = serde_json::from_str(text)?;
        c.validate()?;
        Ok(c)
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }
}

/// Detector behavior on one sample set.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct DifficultyProfile {
    /// Std of per-corner localization noise, pixels.
    pub loc_noise: f64,
    pub miss_prob: f64,
    /// Expected false positives per image.
    pub fp_rate: f64,
    /// Std of additive confidence noise.
    pub conf_noise: f64,
    /// Perturbed-pass instability κ: std of the re-jitter, pixels.
    pub jitter: f64,
    /// Std of the perturbed-pass confidence change.
    pub conf_jitter: f64,
    /// Calibration offset added to every confidence.
    pub conf_shift: f64,
}

impl DifficultyProfile {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("miss_prob", self.miss_prob)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::validation(name, "must lie in [0, 1]"));
            }
        }
        for (name, v) in [
            ("loc_noise", self.loc_noise),
            ("fp_rate", self.fp_rate),
            ("conf_noise", self.conf_noise),
            ("jitter", self.jitter),
            ("conf_jitter", self.conf_jitter),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::validation(name, "must be non-negative"));
            }
        }
        if !self.conf_shift.is_finite() {
            return Err(Error::validation("conf_shift", "must be finite"));
        }
        Ok(())
    }
}

/// Confidence lost per unit of `1 - IoU` with the true box.
const CONF_LOC_SLOPE: f64 = 0.8;

/// A seed dataset of the synthetic world.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SourceSpec {
    pub name: String,
    pub difficulty: f64,
    pub conf_shift: f64,
    /// Unit direction of this domain's feature shift.
    pub feature_direction: Vec<f64>,
    /// Instability used in uncoupled mode.
    pub free_jitter: f64,
    /// How strongly perturbation moves this domain's confidences.
    pub conf_sensitivity: f64,
}

/// Profile of a set with difficulty `d`.
pub fn profile_for(world: &WorldConfig, source: &SourceSpec, d: f64) -> DifficultyProfile {
    let d = d.clamp(0.0, 1.0);
    let loc_noise = 1.0 + 14.0 * d;
    let jitter = if world.coupled {
        world.coupling * loc_noise
    } else {
        source.free_jitter
    };
    DifficultyProfile {
        loc_noise,
        miss_prob: 0.02 + 0.25 * d,
        fp_rate: 0.3 + 2.0 * d,
        conf_noise: 0.05,
        jitter,
        conf_jitter: 0.01 * jitter * source.conf_sensitivity,
        conf_shift: source.conf_shift,
    }
}

fn mix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Independent stream for a tuple of indices under a base seed.
pub fn derive_seed(seed: u64, parts: &[u64]) -> u64 {
    parts.iter().fold(mix(seed), |acc, &p| mix(acc ^ mix(p)))
}

fn rng_for(seed: u64, parts: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, parts))
}

fn normal(rng: &mut ChaCha8Rng, std: f64) -> f64 {
    if std <= 0.0 {
        return 0.0;
    }
    Normal::new(0.0, std).expect("positive std").sample(rng)
}

/// Default sources: difficulties spread evenly over `[0, 1]` with a seeded
/// offset, random calibration shifts and feature directions.
pub fn default_sources(world: &WorldConfig) -> Vec<SourceSpec> {
    let n = world.num_sources;
    (0..n)
        .map(|s| {
            let mut rng = rng_for(world.seed, &[1, s as u64]);
            let difficulty = ((s as f64 + rng.random_range(0.2..0.8)) / n as f64).clamp(0.0, 1.0);
            let conf_shift = rng.random_range(-0.12..0.12);
            let mut dir: Vec<f64> = (0..world.feature_dim)
                .map(|_| normal(&mut rng, 1.0))
                .collect();
            let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
            dir.iter_mut().for_each(|v| *v /= norm);
            SourceSpec {
                name: format!("source{s:02}"),
                difficulty,
                conf_shift,
                feature_direction: dir,
                free_jitter: rng.random_range(1.0..15.0),
                conf_sensitivity: rng.random_range(0.3..1.7),
            }
        })
        .collect()
}

fn class_probs(score: f64, class_id: u32, k: usize) -> Vec<f64> {
    if k == 1 {
        return vec![1.0];
    }
    let top = score.max(1.0 / k as f64);
    let rest = (1.0 - top) / (k - 1) as f64;
    (0..k)
        .map(|c| if c == class_id as usize { top } else { rest })
        .collect()
}

fn clip_box(world: &WorldConfig, x1: f64, y1: f64, x2: f64, y2: f64) -> BBox {
    let cx = |v: f64| v.clamp(0.0, world.image_width);
    let cy = |v: f64| v.clamp(0.0, world.image_height);
    BBox::from_corners(cx(x1), cy(y1), cx(x2), cy(y2)).expect("clipped corners are finite")
}

fn random_box(world: &WorldConfig, rng: &mut ChaCha8Rng) -> BBox {
    let w = rng.random_range(20.0..(180.0f64).min(world.image_width).max(20.5));
    let h = rng.random_range(20.0..(180.0f64).min(world.image_height).max(20.5));
    let x = rng.random_range(0.0..(world.image_width - w).max(1e-9));
    let y = rng.random_range(0.0..(world.image_height - h).max(1e-9));
    clip_box(world, x, y, x + w, y + h)
}

/// Random labeled scene.
pub fn simulate_ground_truth(world: &WorldConfig, seed: u64) -> Vec<GroundTruthBox> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.random_range(world.min_objects..=world.max_objects);
    (0..n)
        .map(|_| {
            let b = random_box(world, &mut rng);
            GroundTruthBox::new(b, rng.random_range(0..world.num_classes as u32))
        })
        .collect()
}

/// Unperturbed detector output on a labeled scene.
pub fn simulate_detection(
    gt: &[GroundTruthBox],
    profile: &DifficultyProfile,
    world: &WorldConfig,
    seed: u64,
) -> Vec<DetectionRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let k = world.num_classes;
    let mut out = Vec::with_capacity(gt.len() + 2);
    for g in gt {
        if rng.random::<f64>() < profile.miss_prob {
            continue;
        }
        let b = g.bbox;
        let s = profile.loc_noise;
        let pred = clip_box(
            world,
            b.x1() + normal(&mut rng, s),
            b.y1() + normal(&mut rng, s),
            b.x2() + normal(&mut rng, s),
            b.y2() + normal(&mut rng, s),
        );
        let loc_err = 1.0 - iou(&pred, &b);
        let score = (1.0 - CONF_LOC_SLOPE * loc_err
            + normal(&mut rng, profile.conf_noise)
            + profile.conf_shift)
            .clamp(0.0, 1.0);
        out.push(
            DetectionRecord::new(pred, score, g.class_id)
                .with_probs(class_probs(score, g.class_id, k)),
        );
    }
    let n_fp = if profile.fp_rate > 0.0 {
        Poisson::new(profile.fp_rate)
            .expect("positive rate")
            .sample(&mut rng) as usize
    } else {
        0
    };
    for _ in 0..n_fp {
        let b = random_box(world, &mut rng);
        let class_id = rng.random_range(0..k as u32);
        let score = (rng.random_range(0.05..0.6) + profile.conf_shift).clamp(0.0, 1.0);
        out.push(
            DetectionRecord::new(b, score, class_id).with_probs(class_probs(score, class_id, k)),
        );
    }
    out
}

/// Second, perturbed pass derived from the first: box corners re-jittered
/// with std `κ`, confidences shifted with std `conf_jitter`, and boxes
/// dropped or duplicated with probability `min(0.01 κ, 0.25)` each.
pub fn perturb_pass(
    original: &[DetectionRecord],
    profile: &DifficultyProfile,
    world: &WorldConfig,
    seed: u64,
) -> Vec<DetectionRecord> {
    let kappa = profile.jitter;
    if kappa <= 0.0 {
        return original.to_vec();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scale = kappa;
    let p_change = (0.01 * kappa).min(0.25);
    let mut out = Vec::with_capacity(original.len());
    let jittered = |d: &DetectionRecord, rng: &mut ChaCha8Rng| {
        let b = d.bbox;
        let bbox = clip_box(
            world,
            b.x1() + normal(rng, scale),
            b.y1() + normal(rng, scale),
            b.x2() + normal(rng, scale),
            b.y2() + normal(rng, scale),
        );
        let score = (d.score + normal(rng, profile.conf_jitter)).clamp(0.0, 1.0);
        DetectionRecord::new(bbox, score, d.class_id).with_probs(class_probs(
            score,
            d.class_id,
            world.num_classes,
        ))
    };
    for d in original {
        let u: f64 = rng.random();
        if u < p_change {
            continue;
        }
        out.push(jittered(d, &mut rng));
        if u > 1.0 - p_change {
            out.push(jittered(d, &mut rng));
        }
    }
    out
}

fn feature_vector(
    world: &WorldConfig,
    source: Option<&SourceSpec>,
    d: f64,
    rng: &mut ChaCha8Rng,
) -> Vec<f64> {
    (0..world.feature_dim)
        .map(|i| {
            let shift = source.map_or(0.0, |s| 3.0 * d * s.feature_direction[i]);
            shift + normal(rng, 1.0 + 0.5 * d)
        })
        .collect()
}

/// One image of a set: scene, both passes and a pooled feature.
pub fn simulate_image(
    world: &WorldConfig,
    source: &SourceSpec,
    profile: &DifficultyProfile,
    d: f64,
    image_id: String,
    seed: u64,
) -> ImageRecord {
    let gt = simulate_ground_truth(world, derive_seed(seed, &[0]));
    let original = simulate_detection(&gt, profile, world, derive_seed(seed, &[1]));
    let perturbed = perturb_pass(&original, profile, world, derive_seed(seed, &[2]));
    let mut frng = rng_for(seed, &[3]);
    ImageRecord {
        image_id,
        original,
        perturbed,
        ground_truth: Some(gt),
        feature: Some(feature_vector(world, Some(source), d, &mut frng)),
    }
}

/// Synthetic analogue of image transformations applied to a seed set.
const TRANSFORMS: [&str; 7] = [
    "sharpness",
    "equalize",
    "color_temperature",
    "solarize",
    "autocontrast",
    "brightness",
    "rotate",
];

/// A generated sample set held in memory.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneratedSet {
    pub manifest: SampleSetManifest,
    pub records: Vec<ImageRecord>,
    pub difficulty: f64,
    pub profile: DifficultyProfile,
}

fn dump_name(set_id: &str) -> String {
    format!("{set_id}.jsonl")
}

#[allow(clippy::too_many_arguments)]
fn make_set(
    world: &WorldConfig,
    source: &SourceSpec,
    set_id: String,
    role: SetRole,
    n_images: usize,
    d: f64,
    transform_log: Option<Vec<TransformStep>>,
    seed: u64,
) -> GeneratedSet {
    let profile = profile_for(world, source, d);
    let records = (0..n_images)
        .map(|i| {
            simulate_image(
                world,
                source,
                &profile,
                d,
                format!("{set_id}-{i:05}"),
                derive_seed(seed, &[i as u64]),
            )
        })
        .collect();
    let mut perturb = PerturbConfig::new(0.15, vec![1, 2]);
    perturb.seed = Some(seed);
    let manifest = SampleSetManifest {
        set_id: set_id.clone(),
        source_name: source.name.clone(),
        detector_id: world.detector_id.clone(),
        role,
        perturb_config: Some(perturb),
        transform_log,
        image_count: n_images,
        num_classes: Some(world.num_classes),
        feature_dim: Some(world.feature_dim),
        dump_paths: vec![PathBuf::from(dump_name(&set_id))],
    };
    GeneratedSet {
        manifest,
        records,
        difficulty: d,
        profile,
    }
}

/// All sample sets of every source, followed by each source's test set.
/// Output order and content depend only on `(world, sources)`.
pub fn gen_meta_set(world: &WorldConfig, sources: &[SourceSpec]) -> Result<Vec<GeneratedSet>> {
    world.validate()?;
    if let Some(s) = sources
        .iter()
        .find(|s| s.feature_direction.len() != world.feature_dim)
    {
        return Err(Error::DimensionMismatch {
            expected: world.feature_dim,
            actual: s.feature_direction.len(),
        });
    }
    let mut jobs: Vec<(usize, Option<usize>)> = Vec::new();
    for s in 0..sources.len() {
        jobs.extend((0..world.sets_per_source).map(|k| (s, Some(k))));
        if world.test_images_per_source > 0 {
            jobs.push((s, None));
        }
    }
    let sets = jobs
        .par_iter()
        .map(|&(s, k)| {
            let source = &sources[s];
            match k {
                Some(k) => {
                    let seed = derive_seed(world.seed, &[2, s as u64, k as u64]);
                    let mut rng = ChaCha8Rng::seed_from_u64(seed);
                    let mut picked: Vec<usize> = (0..TRANSFORMS.len()).collect();
                    for i in 0..3 {
                        let j = rng.random_range(i..picked.len());
                        picked.swap(i, j);
                    }
                    let log: Vec<TransformStep> = picked[..3]
                        .iter()
                        .map(|&t| TransformStep {
                            name: TRANSFORMS[t].into(),
                            magnitude: rng.random_range(-1.0..1.0),
                        })
                        .collect();
                    let delta: f64 = 0.06 * log.iter().map(|t| t.magnitude).sum::<f64>();
                    let d = (source.difficulty + delta).clamp(0.0, 1.0);
                    make_set(
                        world,
                        source,
                        format!("{}-set{k:03}", source.name),
                        SetRole::Train,
                        world.images_per_set,
                        d,
                        Some(log),
                        seed,
                    )
                }
                None => make_set(
                    world,
                    source,
                    format!("{}-test", source.name),
                    SetRole::Test,
                    world.test_images_per_source,
                    source.difficulty,
                    None,
                    derive_seed(world.seed, &[3, s as u64]),
                ),
            }
        })
        .collect();
    Ok(sets)
}

/// Feature statistics of the clean training domain, for FD.
pub fn reference_stats(world: &WorldConfig, n: usize) -> Result<GaussianStats> {
    let mut rng = rng_for(world.seed, &[4]);
    let feats: Vec<Vec<f64>> = (0..n)
        .map(|_| feature_vector(world, None, 0.0, &mut rng))
        .collect();
    gaussian_stats(&feats)
}

pub const REFERENCE_STATS_FILE: &str = "reference_stats.json";
pub const WORLD_CONFIG_FILE: &str = "world.json";
pub const MANIFEST_SUFFIX: &str = ".manifest.json";

/// Writes each set as `<set_id>.jsonl` plus `<set_id>.manifest.json`, the
/// reference statistics and the world config. Returns the manifest paths.
pub fn write_meta_set(
    world: &WorldConfig,
    sets: &[GeneratedSet],
    out_dir: &Path,
) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut manifests = Vec::with_capacity(sets.len());
    for set in sets {
        let m = &set.manifest;
        write_dump_file(
            &set.records,
            &out_dir.join(dump_name(&m.set_id)),
            &m.schema(),
        )?;
        let path = out_dir.join(format!("{}{MANIFEST_SUFFIX}", m.set_id));
        write_atomic(&path, m.to_json()?.as_bytes())?;
        manifests.push(path);
    }
    reference_stats(world, 2000)?.save(&out_dir.join(REFERENCE_STATS_FILE))?;
    write_atomic(
        &out_dir.join(WORLD_CONFIG_FILE),
        world.to_json()?.as_bytes(),
    )?;
    Ok(manifests)
}
