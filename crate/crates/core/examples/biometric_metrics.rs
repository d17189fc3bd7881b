//! Identification (CMC, Rank-1/5) and verification (ROC, EER) on a toy
//! gallery of noisy prototypes, with both metrics and score aggregations.
//!
//! cargo run --release --example biometric_metrics -- [out-dir]

use std::path::PathBuf;

use gaitflow::recognizer::{
    evaluate_identification, evaluate_verification, write_cmc_csv, write_roc_csv, Aggregation, Gallery, Metric, Sample,
};
use gaitflow::streams::substream;
use rand::Rng;

fn main() -> gaitflow::Result<()> {
    let out = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "target/biometric_metrics".into()));
    std::fs::create_dir_all(&out).map_err(|e| gaitflow::GaitError::io(&out, e))?;
    let mut rng = substream(8, "example", &[]);
    let protos: Vec<Vec<f64>> = (0..10).map(|_| (0..16).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
    let mut noisy = |s: usize, sigma: f64| Sample::new(s, protos[s].iter().map(|v| v + rng.random_range(-sigma..sigma)).collect());
    let gallery: Vec<Sample> = (0..40).map(|i| noisy(i % 10, 0.4)).collect();
    let probes: Vec<Sample> = (0..60).map(|i| noisy(i % 10, 0.9)).collect();

    for metric in [Metric::L1, Metric::L2] {
        let id = evaluate_identification(&Gallery::new(gallery.clone(), metric)?, &probes)?;
        for agg in [Aggregation::PerPair, Aggregation::MinOverSubject] {
            let ver = evaluate_verification(&gallery, &probes, metric, agg)?;
            println!(
                "{metric} {agg:?}: rank1 {:.3} rank5 {:.3} eer {:.3} ({} genuine, {} impostor)",
                id.rank1, id.rank5, ver.eer, ver.genuine, ver.impostor
            );
            if metric == Metric::L1 && agg == Aggregation::PerPair {
                write_cmc_csv(&out.join("cmc.csv"), &id.cmc)?;
                write_roc_csv(&out.join("roc.csv"), &ver.roc)?;
            }
        }
    }
    println!("wrote {}", out.display());
    Ok(())
}
