//! Render one synthetic walker under each condition and save the first
//! frame, its silhouette and the keypoint sidecar.
//!
//! cargo run --release --example synth_walkers -- [out-dir]

use std::path::PathBuf;

use gaitflow::optflow::save_frame_pgm;
use gaitflow::posepatch::format_keypoints;
use gaitflow::streams::substream;
use gaitflow::synthwalk::{generate, sample_identities, Condition, IdentityRanges, Scene};

fn main() -> gaitflow::Result<()> {
    let out = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "target/synth_walkers".into()));
    std::fs::create_dir_all(&out).map_err(|e| gaitflow::GaitError::io(&out, e))?;
    let scene = Scene::textured(64, 96, 7)?;
    let ids = sample_identities(3, &IdentityRanges::default(), &mut substream(7, "identities", &[]))?;
    for (label, id) in ids.iter().enumerate() {
        println!("subject {label}: stride {:.3} cycles/frame, height {:.1} px, speed {:.2} px/frame", id.stride_freq, id.height, id.speed);
        for (k, cond) in [Condition::Normal, Condition::PerturbedA, Condition::PerturbedB].into_iter().enumerate() {
            let v = generate(label, id, cond, 32, &scene, &mut substream(7, "video", &[label as u64, k as u64]))?;
            let stem = format!("s{label}_{}", cond.name());
            save_frame_pgm(&v.frames[0], &out.join(format!("{stem}.pgm")))?;
            save_frame_pgm(&v.masks[0].to_frame()?, &out.join(format!("{stem}_mask.pgm")))?;
            std::fs::write(out.join(format!("{stem}.keypoints.txt")), format_keypoints(&v.keypoints[..1]))
                .map_err(|e| gaitflow::GaitError::io(&out, e))?;
            println!("  {:<12} foreground {:>4} px in frame 0", cond.name(), v.masks[0].count());
        }
    }
    println!("wrote {}", out.display());
    Ok(())
}
