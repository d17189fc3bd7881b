//! Five body-part boxes from keypoints, a random training box and the
//! deterministic test box, cropped from the encoded flow to 48x48 patches.
//!
//! cargo run --release --example part_patches -- [out-dir]

use std::path::PathBuf;

use gaitflow::optflow::{encode_flow, farneback_flow, FlowConfig};
use gaitflow::posepatch::{build_part_boxes, center_test_box, crop_resize, sample_augmented_box, Patch, PATCH_SIDE};
use gaitflow::streams::substream;
use gaitflow::synthwalk::{generate, sample_identities, Condition, IdentityRanges, Scene};
use gaitflow::GaitError;

fn save(patch: &Patch, path: &std::path::Path) -> gaitflow::Result<()> {
    let n = PATCH_SIDE * PATCH_SIDE;
    let rgb: Vec<u8> = (0..n)
        .flat_map(|i| (0..3).map(move |c| (patch.data[c * n + i] * 255.0).round() as u8))
        .collect();
    image::RgbImage::from_raw(PATCH_SIDE as u32, PATCH_SIDE as u32, rgb)
        .expect("patch buffer")
        .save(path)
        .map_err(|e| GaitError::format(path, e.to_string()))
}

fn main() -> gaitflow::Result<()> {
    let out = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "target/part_patches".into()));
    std::fs::create_dir_all(&out).map_err(|e| GaitError::io(&out, e))?;
    let scene = Scene::textured(64, 96, 5)?;
    let id = &sample_identities(1, &IdentityRanges::default(), &mut substream(5, "identities", &[]))?[0];
    let v = generate(0, id, Condition::Normal, 32, &scene, &mut substream(5, "video", &[]))?;
    let (w, h) = (v.frames[0].width(), v.frames[0].height());
    let t = 12;
    let flow = encode_flow(farneback_flow(&v.frames[t], &v.frames[t + 1], &FlowConfig::default())?, 4.0)?;

    let mut rng = substream(5, "augment", &[0, 0]);
    for raw in build_part_boxes(&v.keypoints[t], w, h, 0.25)? {
        let train = sample_augmented_box(&raw, w, h, &mut rng);
        let test = center_test_box(&raw, w, h);
        let b = |s: &gaitflow::posepatch::PatchSpec| format!("({:.1},{:.1}) {:.1}x{:.1}", s.bbox.x0, s.bbox.y0, s.bbox.w, s.bbox.h);
        println!("{:<10} raw {}  train {}  test {}", raw.part.name(), b(&raw), b(&train), b(&test));
        save(&crop_resize(&flow, &test, t)?, &out.join(format!("{}.png", raw.part.name())))?;
    }
    println!("wrote {}", out.display());
    Ok(())
}
