//! Fuse per-frame part features into video descriptors (avg and concat),
//! fit PCA on a gallery and project a probe.
//!
//! cargo run --release --example descriptors_pca

use gaitflow::descriptors::{fuse_avg, fuse_concat, FrameFeature, PcaModel};
use gaitflow::posepatch::Part;
use gaitflow::streams::substream;
use rand::Rng;

fn video(rng: &mut impl Rng, subject: f32, parts: &[Part], pairs: usize) -> Vec<FrameFeature> {
    (0..pairs)
        .flat_map(|t| {
            parts
                .iter()
                .map(|&part| FrameFeature {
                    part,
                    pair_index: t,
                    vector: (0..8).map(|k| subject * (k as f32 + part.index() as f32).sin() + rng.random_range(-0.3..0.3)).collect(),
                })
                .collect::<Vec<_>>()
        })
        .collect()
}

fn main() -> gaitflow::Result<()> {
    let mut rng = substream(4, "example", &[]);
    let parts = Part::ALL.to_vec();
    let feats = video(&mut rng, 1.0, &parts, 31);
    println!("{} frame features -> avg {} dims, concat {} dims", feats.len(), fuse_avg(&feats)?.len(), fuse_concat(&feats, &parts)?.len());

    let gallery: Vec<Vec<f64>> = (0..12)
        .map(|i| fuse_concat(&video(&mut rng, 1.0 + (i % 4) as f32, &parts, 31), &parts))
        .collect::<gaitflow::Result<_>>()?;
    let pca = PcaModel::fit(&gallery, 5)?;
    let total: f64 = pca.eigenvalues.iter().sum();
    let kept: f64 = pca.eigenvalues[..5].iter().sum();
    println!("pca {} -> {} dims keeps {:.1}% of gallery variance", pca.input_dim(), pca.dim(), 100.0 * kept / total);
    let probe = fuse_concat(&video(&mut rng, 2.0, &parts, 31), &parts)?;
    let z = pca.project_raw(&probe)?;
    println!("probe coordinates {:?}", z.iter().map(|v| format!("{v:.3}")).collect::<Vec<_>>());
    Ok(())
}
