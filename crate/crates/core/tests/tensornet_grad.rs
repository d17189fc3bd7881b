mod common;

use common::gradcases::run;

fn check(name: &str) {
    let r = run(name);
    assert!(r.passed(), "{name}: max rel {:.3e} at {}", r.max_rel, r.worst);
}

#[test]
fn conv3x3_bias() {
    check("conv3x3_bias");
}

#[test]
fn conv3x3_stride2() {
    check("conv3x3_stride2");
}

#[test]
fn conv1x1_projection() {
    check("conv1x1_projection");
}

#[test]
fn batchnorm() {
    check("batchnorm");
}

#[test]
fn relu() {
    check("relu");
}

#[test]
fn maxpool() {
    check("maxpool");
}

#[test]
fn avgpool() {
    check("avgpool");
}

#[test]
fn dense() {
    check("dense");
}

#[test]
fn dropout() {
    check("dropout");
}

#[test]
fn residual() {
    check("residual");
}

#[test]
fn softmax_ce_l2() {
    check("softmax_ce_l2");
}

#[test]
fn miniature_wrn() {
    check("miniature_wrn");
}

#[test]
fn miniature_vgg() {
    check("miniature_vgg");
}
