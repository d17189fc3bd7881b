use rand::RngCore;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::ops::{self, BatchNormCache, Mode};
use super::params::{is_buffer_role, ParamStore};
use super::tensor::{Real, Tensor};
use crate::error::{dim_err, input_err, Result};

/// One layer of a network description.
#[derive(Debug, Clone, PartialEq)]
pub enum LayerSpec {
    Conv2d {
        id: String,
        in_channels: usize,
        filters: usize,
        kernel: (usize, usize),
        stride: usize,
        pad: usize,
        bias: bool,
    },
    BatchNorm {
        id: String,
        channels: usize,
    },
    Relu,
    MaxPool2,
    AvgPoolGlobal,
    /// Fully connected layer; `l2_coeff` weights the squared-norm penalty on
    /// its weight matrix.
    Dense {
        id: String,
        inputs: usize,
        units: usize,
        l2_coeff: f64,
    },
    Dropout {
        p: f64,
    },
    Softmax,
    Residual(ResidualSpec),
}

/// Pre-activation residual block: `out = body(pre(x)) + shortcut`, where the
/// shortcut is `x` itself or a 1x1 projection of `pre(x)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualSpec {
    pub id: String,
    pub pre: Vec<LayerSpec>,
    pub body: Vec<LayerSpec>,
    pub shortcut: Option<Box<LayerSpec>>,
}

impl LayerSpec {
    pub fn id(&self) -> Option<&str> {
        match self {
            LayerSpec::Conv2d { id, .. } | LayerSpec::BatchNorm { id, .. } | LayerSpec::Dense { id, .. } => Some(id),
            LayerSpec::Residual(r) => Some(&r.id),
            _ => None,
        }
    }

    pub fn kind_name(&self) -> &'static str {
        match self {
            LayerSpec::Conv2d { .. } => "conv2d",
            LayerSpec::BatchNorm { .. } => "batchnorm",
            LayerSpec::Relu => "relu",
            LayerSpec::MaxPool2 => "maxpool",
            LayerSpec::AvgPoolGlobal => "avgpool",
            LayerSpec::Dense { .. } => "dense",
            LayerSpec::Dropout { .. } => "dropout",
            LayerSpec::Softmax => "softmax",
            LayerSpec::Residual(_) => "residual-block",
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            LayerSpec::Conv2d { kernel, .. } if *kernel != (3, 3) && *kernel != (1, 1) => {
                Err(input_err!("conv kernel {kernel:?} must be 3x3 or a 1x1 projection"))
            }
            LayerSpec::Dropout { p } if !(0.0..=1.0).contains(p) => Err(input_err!("dropout p={p} outside [0,1]")),
            LayerSpec::Dense { l2_coeff, .. } if *l2_coeff < 0.0 => Err(input_err!("negative l2 coefficient")),
            LayerSpec::Residual(r) => {
                for l in r.pre.iter().chain(&r.body).chain(r.shortcut.as_deref()) {
                    l.validate()?;
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }

    /// Output shape for an input shape (batch axis included).
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        let four = |s: &[usize]| -> Result<(usize, usize, usize, usize)> {
            match *s {
                [n, c, h, w] => Ok((n, c, h, w)),
                _ => Err(dim_err!("{} expects a 4-D input, got {s:?}", self.kind_name())),
            }
        };
        match self {
            LayerSpec::Conv2d {
                in_channels,
                filters,
                kernel,
                stride,
                pad,
                ..
            } => {
                let (n, c, h, w) = four(input)?;
                if c != *in_channels {
                    return Err(dim_err!("conv expects {in_channels} channels, got {c}"));
                }
                let oh = (h + 2 * pad).checked_sub(kernel.0).ok_or_else(|| dim_err!("input too small"))? / stride + 1;
                let ow = (w + 2 * pad).checked_sub(kernel.1).ok_or_else(|| dim_err!("input too small"))? / stride + 1;
                Ok(vec![n, *filters, oh, ow])
            }
            LayerSpec::BatchNorm { channels, .. } => {
                let (_, c, _, _) = four(input)?;
                if c != *channels {
                    return Err(dim_err!("batchnorm expects {channels} channels, got {c}"));
                }
                Ok(input.to_vec())
            }
            LayerSpec::Relu | LayerSpec::Dropout { .. } | LayerSpec::Softmax => Ok(input.to_vec()),
            LayerSpec::MaxPool2 => {
                let (n, c, h, w) = four(input)?;
                Ok(vec![n, c, h / 2, w / 2])
            }
            LayerSpec::AvgPoolGlobal => {
                let (n, c, _, _) = four(input)?;
                Ok(vec![n, c])
            }
            LayerSpec::Dense { inputs, units, .. } => {
                let f: usize = input[1..].iter().product();
                if f != *inputs {
                    return Err(dim_err!("dense expects {inputs} features, got {f}"));
                }
                Ok(vec![input[0], *units])
            }
            LayerSpec::Residual(r) => {
                let mut a = input.to_vec();
                for l in &r.pre {
                    a = l.output_shape(&a)?;
                }
                let mut y = a.clone();
                for l in &r.body {
                    y = l.output_shape(&y)?;
                }
                let s = match &r.shortcut {
                    Some(sc) => sc.output_shape(&a)?,
                    None => input.to_vec(),
                };
                if s != y {
                    return Err(dim_err!("residual {} branch {y:?} vs shortcut {s:?}", r.id));
                }
                Ok(y)
            }
        }
    }

    pub fn param_count(&self) -> usize {
        match self {
            LayerSpec::Conv2d {
                in_channels,
                filters,
                kernel,
                bias,
                ..
            } => filters * in_channels * kernel.0 * kernel.1 + if *bias { *filters } else { 0 },
            LayerSpec::BatchNorm { channels, .. } => 2 * channels,
            LayerSpec::Dense { inputs, units, .. } => inputs * units + units,
            LayerSpec::Residual(r) => r
                .pre
                .iter()
                .chain(&r.body)
                .chain(r.shortcut.as_deref())
                .map(LayerSpec::param_count)
                .sum(),
            _ => 0,
        }
    }

    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a LayerSpec)) {
        f(self);
        if let LayerSpec::Residual(r) = self {
            for l in r.pre.iter().chain(&r.body).chain(r.shortcut.as_deref()) {
                l.visit(f);
            }
        }
    }
}

#[derive(Debug, Clone)]
enum Cache<T> {
    Conv { input: Tensor<T> },
    BatchNorm(BatchNormCache<T>),
    Relu { output: Tensor<T> },
    MaxPool { argmax: Vec<usize>, in_shape: Vec<usize> },
    AvgPool { in_shape: Vec<usize> },
    Dense { input: Tensor<T> },
    Dropout { mask: Vec<T> },
    None,
    Residual {
        pre: Vec<Cache<T>>,
        body: Vec<Cache<T>>,
        shortcut: Option<Box<Cache<T>>>,
    },
}

/// Activations recorded by a training forward pass, consumed by backward.
#[derive(Debug)]
pub struct Tape<T> {
    caches: Vec<Cache<T>>,
}

struct StatUpdate<T> {
    layer: String,
    mean: Vec<T>,
    var: Vec<T>,
}

struct Pass<'a, T> {
    params: &'a ParamStore<T>,
    mode: Mode,
    rng: &'a mut dyn RngCore,
    record: bool,
    stats: Vec<StatUpdate<T>>,
}

impl<T: Real> Pass<'_, T> {
    fn run_seq(&mut self, layers: &[LayerSpec], mut x: Tensor<T>, caches: &mut Vec<Cache<T>>) -> Result<Tensor<T>> {
        for l in layers {
            x = self.run(l, x, caches)?;
        }
        Ok(x)
    }

    fn run(&mut self, layer: &LayerSpec, x: Tensor<T>, caches: &mut Vec<Cache<T>>) -> Result<Tensor<T>> {
        let p = self.params;
        let (y, cache) = match layer {
            LayerSpec::Conv2d { id, stride, pad, bias, .. } => {
                let w = p.get(id, "weight")?;
                let b = if *bias { Some(p.get(id, "bias")?.data()) } else { None };
                let y = ops::conv2d_forward(&x, w, b, *stride, *pad)?;
                (y, Cache::Conv { input: x })
            }
            LayerSpec::BatchNorm { id, .. } => {
                let gamma = p.get(id, "gamma")?.data();
                let beta = p.get(id, "beta")?.data();
                let mut mean = p.get(id, "running_mean")?.data().to_vec();
                let mut var = p.get(id, "running_var")?.data().to_vec();
                let (y, c) = ops::batchnorm_forward(&x, gamma, beta, &mut mean, &mut var, self.mode)?;
                if self.mode == Mode::Train {
                    self.stats.push(StatUpdate {
                        layer: id.clone(),
                        mean,
                        var,
                    });
                }
                match c {
                    Some(c) => (y, Cache::BatchNorm(c)),
                    None => (y, Cache::None),
                }
            }
            LayerSpec::Relu => {
                let y = ops::relu_forward(&x);
                let c = if self.record { Cache::Relu { output: y.clone() } } else { Cache::None };
                (y, c)
            }
            LayerSpec::MaxPool2 => {
                let (y, argmax) = ops::maxpool2_forward(&x)?;
                (
                    y,
                    Cache::MaxPool {
                        argmax,
                        in_shape: x.shape().to_vec(),
                    },
                )
            }
            LayerSpec::AvgPoolGlobal => {
                let y = ops::avgpool_global_forward(&x)?;
                (
                    y,
                    Cache::AvgPool {
                        in_shape: x.shape().to_vec(),
                    },
                )
            }
            LayerSpec::Dense { id, .. } => {
                let w = p.get(id, "weight")?;
                let b = p.get(id, "bias")?.data();
                let y = ops::dense_forward(&x, w, b)?;
                (y, Cache::Dense { input: x })
            }
            LayerSpec::Dropout { p: prob } => {
                let (y, mask) = ops::dropout_forward(&x, *prob, self.mode, self.rng)?;
                (y, Cache::Dropout { mask })
            }
            LayerSpec::Softmax => (ops::softmax(&x)?, Cache::None),
            LayerSpec::Residual(r) => {
                let mut pre_c = Vec::new();
                let a = self.run_seq(&r.pre, x.clone(), &mut pre_c)?;
                let mut body_c = Vec::new();
                let mut y = self.run_seq(&r.body, a.clone(), &mut body_c)?;
                let mut sc_c = None;
                match &r.shortcut {
                    Some(sc) => {
                        let mut c = Vec::new();
                        let s = self.run(sc, a, &mut c)?;
                        sc_c = c.pop().map(Box::new);
                        y.add_assign(&s)?;
                    }
                    None => y.add_assign(&x)?,
                }
                (
                    y,
                    Cache::Residual {
                        pre: pre_c,
                        body: body_c,
                        shortcut: sc_c,
                    },
                )
            }
        };
        if self.record {
            caches.push(cache);
        }
        Ok(y)
    }
}

fn backward_seq<T: Real>(
    layers: &[LayerSpec],
    caches: Vec<Cache<T>>,
    params: &ParamStore<T>,
    mut g: Tensor<T>,
    grads: &mut ParamStore<T>,
) -> Result<Tensor<T>> {
    if layers.len() != caches.len() {
        return Err(dim_err!("tape has {} entries for {} layers", caches.len(), layers.len()));
    }
    for (l, c) in layers.iter().zip(caches).rev() {
        g = backward_one(l, c, params, g, grads)?;
    }
    Ok(g)
}

fn backward_one<T: Real>(
    layer: &LayerSpec,
    cache: Cache<T>,
    params: &ParamStore<T>,
    g: Tensor<T>,
    grads: &mut ParamStore<T>,
) -> Result<Tensor<T>> {
    match (layer, cache) {
        (LayerSpec::Conv2d { id, stride, pad, bias, .. }, Cache::Conv { input }) => {
            let w = params.get(id, "weight")?;
            let cg = ops::conv2d_backward(&g, &input, w, *stride, *pad)?;
            grads.accumulate(id, "weight", &cg.grad_weights)?;
            if *bias {
                grads.accumulate_slice(id, "bias", &cg.grad_bias)?;
            }
            Ok(cg.grad_input)
        }
        (LayerSpec::BatchNorm { id, .. }, Cache::BatchNorm(c)) => {
            let gamma = params.get(id, "gamma")?.data();
            let (gx, gg, gb) = ops::batchnorm_backward(&g, &c, gamma)?;
            grads.accumulate_slice(id, "gamma", &gg)?;
            grads.accumulate_slice(id, "beta", &gb)?;
            Ok(gx)
        }
        (LayerSpec::Relu, Cache::Relu { output }) => ops::relu_backward(&g, &output),
        (LayerSpec::MaxPool2, Cache::MaxPool { argmax, in_shape }) => ops::maxpool2_backward(&g, &argmax, &in_shape),
        (LayerSpec::AvgPoolGlobal, Cache::AvgPool { in_shape }) => ops::avgpool_global_backward(&g, &in_shape),
        (LayerSpec::Dense { id, .. }, Cache::Dense { input }) => {
            let w = params.get(id, "weight")?;
            let (gx, gw, gb) = ops::dense_backward(&g, &input, w)?;
            grads.accumulate(id, "weight", &gw)?;
            grads.accumulate_slice(id, "bias", &gb)?;
            Ok(gx)
        }
        (LayerSpec::Dropout { .. }, Cache::Dropout { mask }) => Ok(ops::dropout_backward(&g, &mask)),
        (LayerSpec::Residual(r), Cache::Residual { pre, body, shortcut }) => {
            let mut ga = backward_seq(&r.body, body, params, g.clone(), grads)?;
            match (&r.shortcut, shortcut) {
                (Some(sc), Some(c)) => {
                    let gs = backward_one(sc, *c, params, g, grads)?;
                    ga.add_assign(&gs)?;
                    backward_seq(&r.pre, pre, params, ga, grads)
                }
                (None, None) => {
                    let mut gx = backward_seq(&r.pre, pre, params, ga, grads)?;
                    gx.add_assign(&g)?;
                    Ok(gx)
                }
                _ => Err(dim_err!("residual {} shortcut cache mismatch", r.id)),
            }
        }
        (l, _) => Err(dim_err!("tape entry does not match layer {}", l.kind_name())),
    }
}

/// A sequential network description. Parameters live in a separate
/// [`ParamStore`] so one description can be shared across threads.
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    layers: Vec<LayerSpec>,
    /// Number of leading layers whose output is the descriptor.
    feature_layers: usize,
    /// Named block boundaries: (name, exclusive end index into `layers`).
    blocks: Vec<(String, usize)>,
}

impl Network {
    pub fn new(layers: Vec<LayerSpec>, feature_layers: usize, blocks: Vec<(String, usize)>) -> Result<Self> {
        if feature_layers > layers.len() {
            return Err(input_err!("feature cut {feature_layers} beyond {} layers", layers.len()));
        }
        for l in &layers {
            l.validate()?;
        }
        Ok(Network {
            layers,
            feature_layers,
            blocks,
        })
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn feature_layers(&self) -> usize {
        self.feature_layers
    }

    /// Layers up to, but excluding, a terminal softmax.
    fn logit_layers(&self) -> &[LayerSpec] {
        match self.layers.last() {
            Some(LayerSpec::Softmax) => &self.layers[..self.layers.len() - 1],
            _ => &self.layers,
        }
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(LayerSpec::param_count).sum()
    }

    /// Shapes after each layer for a given input shape.
    pub fn trace_shapes(&self, input: &[usize]) -> Result<Vec<Vec<usize>>> {
        let mut s = input.to_vec();
        let mut out = Vec::with_capacity(self.layers.len());
        for l in &self.layers {
            s = l.output_shape(&s)?;
            out.push(s.clone());
        }
        Ok(out)
    }

    pub fn shape_after_block(&self, block: &str, input: &[usize]) -> Result<Vec<usize>> {
        let end = self
            .blocks
            .iter()
            .find(|(n, _)| n == block)
            .map(|(_, e)| *e)
            .ok_or_else(|| input_err!("no block named {block}"))?;
        let shapes = self.trace_shapes(input)?;
        Ok(if end == 0 { input.to_vec() } else { shapes[end - 1].clone() })
    }

    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        Ok(self.trace_shapes(input)?.pop().unwrap_or_else(|| input.to_vec()))
    }

    /// Every parametrized layer id, depth first.
    pub fn param_layer_ids(&self) -> Vec<&str> {
        let mut ids = Vec::new();
        for l in &self.layers {
            l.visit(&mut |s| {
                if matches!(s, LayerSpec::Conv2d { .. } | LayerSpec::BatchNorm { .. } | LayerSpec::Dense { .. }) {
                    ids.push(s.id().unwrap());
                }
            });
        }
        ids
    }

    /// Dense layer ids with their L2 coefficients.
    pub fn dense_layers(&self) -> Vec<(&str, f64)> {
        let mut out = Vec::new();
        for l in &self.layers {
            l.visit(&mut |s| {
                if let LayerSpec::Dense { id, l2_coeff, .. } = s {
                    out.push((id.as_str(), *l2_coeff));
                }
            });
        }
        out
    }

    /// Fresh parameters: He-scaled normal weights, zero biases, unit BN scale.
    pub fn init_params<T: Real>(&self, seed: u64) -> ParamStore<T> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new(seed);
        for l in &self.layers {
            l.visit(&mut |s| init_layer(s, &mut rng, &mut store));
        }
        store
    }

    /// Checks that every parametrized layer has its entry with the right shapes.
    pub fn check_params<T: Real>(&self, params: &ParamStore<T>) -> Result<()> {
        let mut expected = ParamStore::<T>::new(0);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for l in &self.layers {
            l.visit(&mut |s| init_layer(s, &mut rng, &mut expected));
        }
        if expected.layer_ids().count() != params.layer_ids().count() {
            return Err(input_err!(
                "parameter store has {} layers, network needs {}",
                params.layer_ids().count(),
                expected.layer_ids().count()
            ));
        }
        for (l, r, t) in expected.iter() {
            let got = params.get(l, r)?;
            if got.shape() != t.shape() {
                return Err(dim_err!("{l}/{r} has shape {:?}, expected {:?}", got.shape(), t.shape()));
            }
        }
        Ok(())
    }

    fn pass<'a, T: Real>(
        &self,
        layers: &[LayerSpec],
        params: &'a ParamStore<T>,
        x: Tensor<T>,
        mode: Mode,
        rng: &'a mut dyn RngCore,
        record: bool,
    ) -> Result<(Tensor<T>, Vec<Cache<T>>, Vec<StatUpdate<T>>)> {
        let mut pass = Pass {
            params,
            mode,
            rng,
            record,
            stats: Vec::new(),
        };
        let mut caches = Vec::new();
        let y = pass.run_seq(layers, x, &mut caches)?;
        Ok((y, caches, pass.stats))
    }

    /// Training-mode forward pass to the logits. Batch-norm running
    /// statistics in `params` are updated.
    pub fn forward_train<T: Real>(
        &self,
        params: &mut ParamStore<T>,
        x: Tensor<T>,
        rng: &mut dyn RngCore,
    ) -> Result<(Tensor<T>, Tape<T>)> {
        let (y, caches, stats) = self.pass(self.logit_layers(), params, x, Mode::Train, rng, true)?;
        for s in stats {
            params.get_mut(&s.layer, "running_mean")?.data_mut().copy_from_slice(&s.mean);
            params.get_mut(&s.layer, "running_var")?.data_mut().copy_from_slice(&s.var);
        }
        Ok((y, Tape { caches }))
    }

    /// Back-propagates `grad_logits`, accumulating into `grads`. Returns the
    /// gradient with respect to the network input.
    pub fn backward<T: Real>(
        &self,
        params: &ParamStore<T>,
        tape: Tape<T>,
        grad_logits: Tensor<T>,
        grads: &mut ParamStore<T>,
    ) -> Result<Tensor<T>> {
        backward_seq(self.logit_layers(), tape.caches, params, grad_logits, grads)
    }

    /// Eval-mode logits.
    pub fn logits<T: Real>(&self, params: &ParamStore<T>, x: Tensor<T>) -> Result<Tensor<T>> {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        Ok(self.pass(self.logit_layers(), params, x, Mode::Eval, &mut rng, false)?.0)
    }

    /// Eval-mode class probabilities.
    pub fn predict<T: Real>(&self, params: &ParamStore<T>, x: Tensor<T>) -> Result<Tensor<T>> {
        ops::softmax(&self.logits(params, x)?)
    }

    /// Eval-mode output of the last hidden layer, shaped (N, features).
    pub fn features<T: Real>(&self, params: &ParamStore<T>, x: Tensor<T>) -> Result<Tensor<T>> {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (y, _, _) = self.pass(&self.layers[..self.feature_layers], params, x, Mode::Eval, &mut rng, false)?;
        let (n, f) = (y.batch(), y.item_len());
        y.reshape(&[n, f])
    }

    /// Sum over dense layers of `l2_coeff * ||W||^2`.
    pub fn l2_penalty<T: Real>(&self, params: &ParamStore<T>) -> Result<f64> {
        let mut total = 0.0;
        for (id, c) in self.dense_layers() {
            if c > 0.0 {
                total += c * params.get(id, "weight")?.sum_squares().as_f64();
            }
        }
        Ok(total)
    }

    /// Adds the gradient of [`Network::l2_penalty`] into `grads`.
    pub fn add_l2_grad<T: Real>(&self, params: &ParamStore<T>, grads: &mut ParamStore<T>) -> Result<()> {
        for (id, c) in self.dense_layers() {
            if c > 0.0 {
                let two_c = T::from_f64c(2.0 * c);
                let w = params.get(id, "weight")?;
                let g = grads.get_mut(id, "weight")?;
                for (gv, &wv) in g.data_mut().iter_mut().zip(w.data()) {
                    *gv += two_c * wv;
                }
            }
        }
        Ok(())
    }
}

pub(crate) fn he_normal<T: Real>(shape: &[usize], fan_in: usize, rng: &mut ChaCha8Rng) -> Tensor<T> {
    let std = (2.0 / fan_in as f64).sqrt();
    let normal = Normal::new(0.0, std).expect("positive std");
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| T::from_f64c(normal.sample(rng))).collect();
    Tensor::from_vec(shape, data).expect("shape matches")
}

fn init_layer<T: Real>(layer: &LayerSpec, rng: &mut ChaCha8Rng, store: &mut ParamStore<T>) {
    match layer {
        LayerSpec::Conv2d {
            id,
            in_channels,
            filters,
            kernel,
            bias,
            ..
        } => {
            let fan_in = in_channels * kernel.0 * kernel.1;
            store.insert(id, "weight", he_normal(&[*filters, *in_channels, kernel.0, kernel.1], fan_in, rng));
            if *bias {
                store.insert(id, "bias", Tensor::zeros(&[*filters]));
            }
        }
        LayerSpec::BatchNorm { id, channels } => {
            store.insert(id, "gamma", Tensor::full(&[*channels], T::one()));
            store.insert(id, "beta", Tensor::zeros(&[*channels]));
            store.insert(id, "running_mean", Tensor::zeros(&[*channels]));
            store.insert(id, "running_var", Tensor::full(&[*channels], T::one()));
        }
        LayerSpec::Dense { id, inputs, units, .. } => {
            store.insert(id, "weight", he_normal(&[*units, *inputs], *inputs, rng));
            store.insert(id, "bias", Tensor::zeros(&[*units]));
        }
        _ => {}
    }
}

/// True when `role` of `layer` is updated by the optimizer.
pub fn is_trainable(role: &str) -> bool {
    !is_buffer_role(role)
}
