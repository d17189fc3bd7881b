//! Central finite-difference checks in f64.

use gaitflow::tensornet::ops::softmax_crossentropy;
use gaitflow::tensornet::{Network, ParamStore, Tensor};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub const STEP: f64 = 1e-5;
pub const MAX_REL: f64 = 1e-4;

#[derive(Debug, Clone)]
pub struct GradCheck {
    pub max_rel: f64,
    pub checked: usize,
    pub worst: String,
}

impl GradCheck {
    fn new() -> Self {
        GradCheck { max_rel: 0.0, checked: 0, worst: String::new() }
    }

    fn record(&mut self, what: String, analytic: f64, numeric: f64) {
        let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6);
        self.checked += 1;
        if rel > self.max_rel {
            self.max_rel = rel;
            self.worst = format!("{what}: analytic {analytic:.9e} numeric {numeric:.9e}");
        }
    }

    pub fn passed(&self) -> bool {
        self.max_rel < MAX_REL && self.checked > 0
    }
}

pub fn normal_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()).unwrap()
}

/// What the scalar loss is built from.
pub enum Objective<'a> {
    /// `sum(r * output)` for a fixed random `r`.
    Projection,
    /// Mean cross-entropy of the logits plus the network's L2 penalty.
    CrossEntropy(&'a [usize]),
}

struct Harness<'a> {
    net: &'a Network,
    objective: Objective<'a>,
    proj: Option<Tensor<f64>>,
    dropout_seed: u64,
}

impl Harness<'_> {
    fn loss(&mut self, params: &mut ParamStore<f64>, x: &Tensor<f64>) -> (f64, Option<(Tensor<f64>, gaitflow::tensornet::Tape<f64>)>) {
        let mut rng = ChaCha8Rng::seed_from_u64(self.dropout_seed);
        let (y, tape) = self.net.forward_train(params, x.clone(), &mut rng).unwrap();
        match self.objective {
            Objective::Projection => {
                let r = self.proj.get_or_insert_with(|| {
                    normal_tensor(y.shape(), &mut ChaCha8Rng::seed_from_u64(self.dropout_seed ^ 0x5eed))
                });
                let l = y.data().iter().zip(r.data()).map(|(a, b)| a * b).sum();
                (l, Some((r.clone(), tape)))
            }
            Objective::CrossEntropy(labels) => {
                let ce = softmax_crossentropy(&y, labels).unwrap();
                let l = ce.loss + self.net.l2_penalty(params).unwrap();
                (l, Some((ce.grad_logits, tape)))
            }
        }
    }
}

/// Compares back-propagated gradients of the input and of up to
/// `per_tensor` sampled entries of every trainable tensor.
pub fn check_network(
    net: &Network,
    x: &Tensor<f64>,
    objective: Objective,
    seed: u64,
    per_tensor: usize,
) -> GradCheck {
    let mut params: ParamStore<f64> = net.init_params(seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
    // Non-trivial BN affine terms and biases so their gradients are exercised.
    let ids: Vec<(String, String)> = params
        .iter()
        .filter(|(_, r, _)| !r.starts_with("running_"))
        .map(|(l, r, _)| (l.to_string(), r.to_string()))
        .collect();
    for (l, r) in &ids {
        if r == "bias" || r == "beta" || r == "gamma" {
            let t = params.get_mut(l, r).unwrap();
            for v in t.data_mut() {
                *v += 0.3 * rng.sample::<f64, _>(StandardNormal);
            }
        }
    }
    let mut h = Harness { net, objective, proj: None, dropout_seed: seed.wrapping_add(2) };

    let (_, tape) = h.loss(&mut params, x);
    let (gy, tape) = tape.unwrap();
    let mut grads = params.zeros_like_trainable();
    let gx = net.backward(&params, tape, gy, &mut grads).unwrap();
    if matches!(h.objective, Objective::CrossEntropy(_)) {
        net.add_l2_grad(&params, &mut grads).unwrap();
    }

    let mut report = GradCheck::new();
    let mut xp = x.clone();
    for i in sample(&mut rng, x.len(), per_tensor.min(x.len())) {
        let orig = xp.data()[i];
        xp.data_mut()[i] = orig + STEP;
        let up = h.loss(&mut params, &xp).0;
        xp.data_mut()[i] = orig - STEP;
        let down = h.loss(&mut params, &xp).0;
        xp.data_mut()[i] = orig;
        report.record(format!("input[{i}]"), gx.data()[i], (up - down) / (2.0 * STEP));
    }
    for (l, r) in &ids {
        let len = params.get(l, r).unwrap().len();
        for i in sample(&mut rng, len, per_tensor.min(len)) {
            let orig = params.get(l, r).unwrap().data()[i];
            params.get_mut(l, r).unwrap().data_mut()[i] = orig + STEP;
            let up = h.loss(&mut params, x).0;
            params.get_mut(l, r).unwrap().data_mut()[i] = orig - STEP;
            let down = h.loss(&mut params, x).0;
            params.get_mut(l, r).unwrap().data_mut()[i] = orig;
            let analytic = grads.get(l, r).unwrap().data()[i];
            report.record(format!("{l}/{r}[{i}]"), analytic, (up - down) / (2.0 * STEP));
        }
    }
    report
}
