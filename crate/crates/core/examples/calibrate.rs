//! Correlation and leave-one-out error of each measure on the default
//! synthetic world, for the seeds given on the command line.
//!
//! cargo run --release -p bos-core --example calibrate -- 0 1 2

use bos_core::autoeval::{
    build_meta_sample, correlation, loo_evaluate, MeasurementSpec, MetaSample, TargetMetric,
};
use bos_core::dumps::SetRole;
use bos_core::matching::MeasureKind;
use bos_core::synthworld::{default_sources, gen_meta_set, WorldConfig};

fn main() -> bos_core::Result<()> {
    let seeds: Vec<u64> = std::env::args()
        .skip(1)
        .map(|s| s.parse().expect("seed"))
        .collect();
    let kinds = [
        MeasureKind::Bos,
        MeasureKind::Cs,
        MeasureKind::Ac,
        MeasureKind::Atc,
        MeasureKind::Ps,
        MeasureKind::Es,
    ];
    for seed in if seeds.is_empty() { vec![0] } else { seeds } {
        let world = WorldConfig {
            seed,
            ..Default::default()
        };
        let sets = gen_meta_set(&world, &default_sources(&world))?;
        let spec = MeasurementSpec {
            kinds: kinds.to_vec(),
            ..Default::default()
        };
        let meta = sets
            .iter()
            .map(|s| {
                build_meta_sample(
                    &s.manifest.set_id,
                    &s.manifest.source_name,
                    s.manifest.role,
                    &s.records,
                    &spec,
                )
            })
            .collect::<bos_core::Result<Vec<_>>>()?;
        let train: Vec<&MetaSample> = meta.iter().filter(|m| m.role == SetRole::Train).collect();
        let maps: Vec<f64> = train
            .iter()
            .map(|m| m.target_map.unwrap_or(f64::NAN))
            .collect();
        for (k, kind) in kinds.iter().enumerate() {
            let x: Vec<f64> = train.iter().map(|m| m.features[k]).collect();
            let c = correlation(&x, &maps)?;
            let one: Vec<MetaSample> = meta
                .iter()
                .map(|m| MetaSample {
                    features: vec![m.features[k]],
                    ..m.clone()
                })
                .collect();
            let loo = loo_evaluate(&[one], &[kind.to_string()], TargetMetric::Map)?;
            println!(
                "seed {seed} {kind:>3}: R² {:.3}  ρ {:.3}  LOO RMSE {:.4}",
                c.r2,
                c.spearman_rho.unwrap_or(f64::NAN),
                loo.average_rmse
            );
        }
    }
    Ok(())
}
