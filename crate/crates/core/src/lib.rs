//! Label-free detector evaluation from box stability.
//!
//! A detector is run twice over an unlabeled test set: once as trained and
//! once with its backbone features perturbed (MC dropout). Boxes from the two
//! passes are paired by a minimum-cost bipartite matching under the GIoU loss,
//! and the mean overlap of matched pairs (the box stability score, BoS) is
//! regressed against mAP measured on labeled sample sets. The fitted regressor
//! then estimates mAP on sets that have no labels.
//!
//! Modules, bottom-up:
//!
//! - [`geometry`]: boxes, IoU and generalized IoU.
//! - [`dumps`]: the line-delimited detection dump format and manifests.
//! - [`matching`]: Hungarian assignment, per-image stability, BoS and CS scores.
//! - [`detmetrics`]: ground-truth mAP evaluation.
//! - [`baselines`]: confidence measures (PS/ES/AC/ATC) and Fréchet distance.
//! - [`autoeval`]: regression, leave-one-out protocol, correlation diagnostics,
//!   perturbation-config search.
//! - [`synthworld`]: a seeded simulator producing labeled two-pass dumps.

pub mod autoeval;
pub mod baselines;
pub mod detmetrics;
pub mod dumps;
pub mod error;
pub mod geometry;
pub mod matching;
pub mod synthworld;

pub use error::{Error, Result};
pub use geometry::BBox;
