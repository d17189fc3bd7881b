//! Layer-by-layer shapes and parameter counts of the two network families,
//! plus one progressive-widening step on a VGG-like net.
//!
//! cargo run --release --example architectures

use gaitflow::nets::{widen_dense, NetworkSpec, INPUT_CHANNELS};
use gaitflow::posepatch::PATCH_SIDE;
use gaitflow::streams::substream;
use gaitflow::tensornet::ParamStore;

fn describe(name: &str, spec: &NetworkSpec) -> gaitflow::Result<()> {
    let net = spec.build(5e-4)?;
    let input = [1, INPUT_CHANNELS, PATCH_SIDE, PATCH_SIDE];
    println!("{name}: {} parameters, feature width {}", net.param_count(), spec.feature_width());
    for (layer, shape) in net.layers().iter().zip(net.trace_shapes(&input)?) {
        println!("  {:<12} {:<10} -> {shape:?}", layer.id().unwrap_or(""), layer.kind_name());
    }
    Ok(())
}

fn main() -> gaitflow::Result<()> {
    describe("vgg-like (1024 wide, 155 classes)", &NetworkSpec::vgg(155, 1024))?;
    describe("wide resnet (155 classes)", &NetworkSpec::wrn(155))?;
    describe("tiny wide resnet", &NetworkSpec::tiny_wrn(10))?;

    let spec = NetworkSpec::tiny_vgg(4, 16);
    let params: ParamStore<f32> = spec.build(5e-4)?.init_params(1);
    let (wide, _, _) = widen_dense(&spec, &params, None, &mut substream(1, "widen", &[0]))?;
    println!("widening tiny vgg: {} -> {} units", spec.dense_width, wide.dense_width);
    Ok(())
}
