//! Named gradient-check cases shared by the layer tests and the acceptance
//! suite.

use gaitflow::nets::NetworkSpec;
use gaitflow::tensornet::{LayerSpec, Network, ResidualSpec};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::gradcheck::{check_network, normal_tensor, GradCheck, Objective};

fn conv(id: &str, cin: usize, f: usize, k: usize, stride: usize, bias: bool) -> LayerSpec {
    LayerSpec::Conv2d { id: id.into(), in_channels: cin, filters: f, kernel: (k, k), stride, pad: k / 2, bias }
}

fn bn(id: &str, c: usize) -> LayerSpec {
    LayerSpec::BatchNorm { id: id.into(), channels: c }
}

fn single(layer: LayerSpec, shape: &[usize]) -> GradCheck {
    let net = Network::new(vec![layer], 1, vec![]).unwrap();
    let x = normal_tensor(shape, &mut ChaCha8Rng::seed_from_u64(17));
    check_network(&net, &x, Objective::Projection, 5, 40)
}

fn residual(id: &str, cin: usize, w: usize, stride: usize) -> LayerSpec {
    let shortcut = (cin != w || stride != 1).then(|| Box::new(conv(&format!("{id}p"), cin, w, 1, stride, false)));
    LayerSpec::Residual(ResidualSpec {
        id: id.into(),
        pre: vec![bn(&format!("{id}b1"), cin), LayerSpec::Relu],
        body: vec![
            conv(&format!("{id}c1"), cin, w, 3, stride, false),
            bn(&format!("{id}b2"), w),
            LayerSpec::Relu,
            conv(&format!("{id}c2"), w, w, 3, 1, false),
        ],
        shortcut,
    })
}

fn worse(a: GradCheck, b: GradCheck) -> GradCheck {
    if a.max_rel >= b.max_rel { GradCheck { checked: a.checked + b.checked, ..a } } else { GradCheck { checked: a.checked + b.checked, ..b } }
}

pub fn run(name: &str) -> GradCheck {
    match name {
        "conv3x3_bias" => single(conv("c", 3, 4, 3, 1, true), &[2, 3, 7, 6]),
        "conv3x3_stride2" => single(conv("c", 2, 3, 3, 2, false), &[2, 2, 9, 8]),
        "conv1x1_projection" => single(conv("c", 3, 5, 1, 2, false), &[2, 3, 6, 6]),
        "batchnorm" => single(bn("b", 3), &[3, 3, 4, 5]),
        "relu" => single(LayerSpec::Relu, &[2, 3, 4, 4]),
        "maxpool" => single(LayerSpec::MaxPool2, &[2, 2, 6, 7]),
        "avgpool" => single(LayerSpec::AvgPoolGlobal, &[2, 3, 5, 4]),
        "dense" => single(LayerSpec::Dense { id: "d".into(), inputs: 12, units: 5, l2_coeff: 0.0 }, &[3, 3, 2, 2]),
        "dropout" => single(LayerSpec::Dropout { p: 0.4 }, &[4, 10]),
        "residual" => worse(
            single(residual("r", 3, 3, 1), &[2, 3, 6, 6]),
            single(residual("s", 3, 4, 2), &[2, 3, 6, 6]),
        ),
        "softmax_ce_l2" => {
            let net = Network::new(
                vec![
                    conv("c1", 2, 3, 3, 1, true),
                    LayerSpec::Relu,
                    conv("c2", 3, 3, 3, 1, true),
                    LayerSpec::Relu,
                    LayerSpec::Dense { id: "d".into(), inputs: 3 * 25, units: 4, l2_coeff: 0.01 },
                    LayerSpec::Softmax,
                ],
                4,
                vec![],
            )
            .unwrap();
            let x = normal_tensor(&[3, 2, 5, 5], &mut ChaCha8Rng::seed_from_u64(3));
            check_network(&net, &x, Objective::CrossEntropy(&[0, 3, 1]), 8, 30)
        }
        "miniature_wrn" => {
            let net = NetworkSpec::tiny_wrn(3).build(5e-4).unwrap();
            let x = normal_tensor(&[2, 3, 48, 48], &mut ChaCha8Rng::seed_from_u64(4));
            check_network(&net, &x, Objective::CrossEntropy(&[2, 0]), 21, 6)
        }
        "miniature_vgg" => {
            let net = NetworkSpec::tiny_vgg(3, 16).build(5e-4).unwrap();
            let x = normal_tensor(&[2, 3, 48, 48], &mut ChaCha8Rng::seed_from_u64(5));
            check_network(&net, &x, Objective::CrossEntropy(&[1, 2]), 22, 6)
        }
        other => panic!("unknown gradient case {other}"),
    }
}

pub const CASES: &[&str] = &[
    "conv3x3_bias",
    "conv3x3_stride2",
    "conv1x1_projection",
    "batchnorm",
    "relu",
    "maxpool",
    "avgpool",
    "dense",
    "dropout",
    "residual",
    "softmax_ce_l2",
    "miniature_wrn",
    "miniature_vgg",
];
