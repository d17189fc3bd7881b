//! Dense flow between two consecutive walker frames, its byte encoding and
//! a PNG of the encoded map.
//!
//! cargo run --release --example flow_encoding -- [out.png]

use gaitflow::optflow::{encode_flow, encode_vector, export_encoded, farneback_flow, FlowConfig};
use gaitflow::streams::substream;
use gaitflow::synthwalk::{generate, sample_identities, Condition, IdentityRanges, Scene};

fn main() -> gaitflow::Result<()> {
    let out = std::env::args().nth(1).unwrap_or_else(|| "target/flow_encoding.png".into());
    let scene = Scene::textured(64, 96, 3)?;
    let id = &sample_identities(1, &IdentityRanges::default(), &mut substream(3, "identities", &[]))?[0];
    let video = generate(0, id, Condition::Normal, 32, &scene, &mut substream(3, "video", &[]))?;

    let flow = farneback_flow(&video.frames[10], &video.frames[11], &FlowConfig::default())?;
    let moving = flow.u.iter().zip(&flow.v).filter(|(u, v)| u.hypot(**v) > 0.5).count();
    let peak = flow.u.iter().zip(&flow.v).map(|(u, v)| u.hypot(*v)).fold(0f32, f32::max);
    println!("{} of {} pixels move more than 0.5 px, peak {peak:.2} px", moving, flow.u.len());

    for (u, v) in [(0.0, 0.0), (16.0, 0.0), (-21.0, 3.0)] {
        println!("encode({u:>5}, {v:>4}) at clip 16 -> {:?}", encode_vector(u, v, 16.0));
    }
    let encoded = encode_flow(flow, 4.0)?;
    export_encoded(&encoded, out.as_ref())?;
    println!("wrote {out}");
    Ok(())
}
