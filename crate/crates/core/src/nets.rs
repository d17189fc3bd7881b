//! The two patch classifiers, their optimizer and the training loop.

use std::fmt;
use std::path::Path;
use std::sync::mpsc::sync_channel;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{input_err, GaitError, Result};
use crate::posepatch::PATCH_SIDE;
use crate::streams::substream;
use crate::tensornet::network::he_normal;
use crate::tensornet::ops::softmax_crossentropy;
use crate::tensornet::{LayerSpec, Network, ParamStore, Real, ResidualSpec, Tensor};

pub const INPUT_CHANNELS: usize = 3;
pub const CHECKPOINT_PARAMS: &str = "params.bin";
pub const CHECKPOINT_MANIFEST: &str = "checkpoint.toml";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Architecture {
    VggLike,
    WideResnet,
}

impl fmt::Display for Architecture {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Architecture::VggLike => "vgg-like",
            Architecture::WideResnet => "wide-resnet",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkSpec {
    pub architecture: Architecture,
    pub classes: usize,
    /// VGG: filters of the first conv block; later blocks use 2x, 4x, 8x.
    pub base_filters: usize,
    /// VGG: current width of both hidden dense layers.
    pub dense_width: usize,
    /// VGG: widening stops once this width is reached.
    pub max_dense_width: usize,
    pub dropout: f64,
    /// WRN: stem filters; group widths are stem * widen * (1, 2, 4).
    pub stem_filters: usize,
    pub widen_factor: usize,
    pub blocks_per_group: usize,
}

impl Default for NetworkSpec {
    fn default() -> Self {
        NetworkSpec::wrn(2)
    }
}

impl NetworkSpec {
    pub fn vgg(classes: usize, dense_width: usize) -> Self {
        NetworkSpec {
            architecture: Architecture::VggLike,
            classes,
            base_filters: 64,
            dense_width,
            max_dense_width: 4096,
            dropout: 0.5,
            stem_filters: 16,
            widen_factor: 4,
            blocks_per_group: 3,
        }
    }

    pub fn wrn(classes: usize) -> Self {
        NetworkSpec {
            architecture: Architecture::WideResnet,
            ..NetworkSpec::vgg(classes, 1024)
        }
    }

    /// 8 stem filters, widen factor 1, one block per group.
    pub fn tiny_wrn(classes: usize) -> Self {
        NetworkSpec {
            stem_filters: 8,
            widen_factor: 1,
            blocks_per_group: 1,
            ..NetworkSpec::wrn(classes)
        }
    }

    /// 8 base filters and narrow dense layers.
    pub fn tiny_vgg(classes: usize, dense_width: usize) -> Self {
        NetworkSpec {
            base_filters: 8,
            max_dense_width: 4 * dense_width,
            ..NetworkSpec::vgg(classes, dense_width)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(GaitError::Config(format!("need at least 2 classes, got {}", self.classes)));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(GaitError::Config(format!("dropout {} outside [0,1)", self.dropout)));
        }
        match self.architecture {
            Architecture::VggLike => {
                if self.base_filters == 0 || self.dense_width == 0 {
                    return Err(GaitError::Config("VGG filters and dense width must be positive".into()));
                }
                if self.dense_width > self.max_dense_width {
                    return Err(GaitError::Config(format!(
                        "dense width {} above maximum {}",
                        self.dense_width, self.max_dense_width
                    )));
                }
            }
            Architecture::WideResnet => {
                if self.stem_filters == 0 || self.widen_factor == 0 || self.blocks_per_group == 0 {
                    return Err(GaitError::Config("WRN filters, widen factor and blocks must be positive".into()));
                }
            }
        }
        Ok(())
    }

    /// Length of the descriptor taken from the last hidden layer.
    pub fn feature_width(&self) -> usize {
        match self.architecture {
            Architecture::VggLike => self.dense_width,
            Architecture::WideResnet => 4 * self.stem_filters * self.widen_factor,
        }
    }

    pub fn build(&self, l2_coeff: f64) -> Result<Network> {
        match self.architecture {
            Architecture::VggLike => build_vgg(self, l2_coeff),
            Architecture::WideResnet => build_wrn(self, l2_coeff),
        }
    }
}

fn conv(id: String, in_channels: usize, filters: usize, kernel: usize, stride: usize, bias: bool) -> LayerSpec {
    LayerSpec::Conv2d {
        id,
        in_channels,
        filters,
        kernel: (kernel, kernel),
        stride,
        pad: kernel / 2,
        bias,
    }
}

fn bn(id: String, channels: usize) -> LayerSpec {
    LayerSpec::BatchNorm { id, channels }
}

pub fn build_vgg(spec: &NetworkSpec, l2_coeff: f64) -> Result<Network> {
    if spec.architecture != Architecture::VggLike {
        return Err(input_err!("build_vgg called with {}", spec.architecture));
    }
    spec.validate()?;
    let b = spec.base_filters;
    let groups = [(b, 2), (2 * b, 2), (4 * b, 3), (8 * b, 3)];
    let mut layers = Vec::new();
    let mut blocks = Vec::new();
    let mut c_in = INPUT_CHANNELS;
    for (g, &(filters, convs)) in groups.iter().enumerate() {
        for k in 0..convs {
            layers.push(conv(format!("b{}_conv{}", g + 1, k + 1), c_in, filters, 3, 1, true));
            layers.push(LayerSpec::Relu);
            c_in = filters;
        }
        layers.push(LayerSpec::MaxPool2);
        blocks.push((format!("B{}", g + 1), layers.len()));
    }
    let side = PATCH_SIDE / 16;
    let w = spec.dense_width;
    let dense = |id: &str, inputs, units| LayerSpec::Dense {
        id: id.into(),
        inputs,
        units,
        l2_coeff,
    };
    layers.push(dense("fc1", c_in * side * side, w));
    layers.push(LayerSpec::Relu);
    layers.push(LayerSpec::Dropout { p: spec.dropout });
    layers.push(dense("fc2", w, w));
    layers.push(LayerSpec::Relu);
    let features = layers.len();
    layers.push(LayerSpec::Dropout { p: spec.dropout });
    blocks.push(("B5".into(), layers.len()));
    layers.push(dense("out", w, spec.classes));
    layers.push(LayerSpec::Softmax);
    blocks.push(("B6".into(), layers.len()));
    Network::new(layers, features, blocks)
}

pub fn build_wrn(spec: &NetworkSpec, l2_coeff: f64) -> Result<Network> {
    if spec.architecture != Architecture::WideResnet {
        return Err(input_err!("build_wrn called with {}", spec.architecture));
    }
    spec.validate()?;
    let s = spec.stem_filters;
    let mut layers = vec![
        conv("stem".into(), INPUT_CHANNELS, s, 3, 1, false),
        bn("stem_bn".into(), s),
        LayerSpec::Relu,
    ];
    let mut blocks = vec![("B1".to_string(), layers.len())];
    let mut c_in = s;
    for (g, mult) in [1, 2, 4].into_iter().enumerate() {
        let width = s * spec.widen_factor * mult;
        let name = format!("B{}", g + 2);
        for k in 0..spec.blocks_per_group {
            let stride = if k == 0 && g > 0 { 2 } else { 1 };
            let id = format!("{}_{}", name.to_lowercase(), k + 1);
            let shortcut = (c_in != width || stride != 1)
                .then(|| Box::new(conv(format!("{id}_proj"), c_in, width, 1, stride, false)));
            layers.push(LayerSpec::Residual(ResidualSpec {
                id: id.clone(),
                pre: vec![bn(format!("{id}_bn1"), c_in), LayerSpec::Relu],
                body: vec![
                    conv(format!("{id}_conv1"), c_in, width, 3, stride, false),
                    bn(format!("{id}_bn2"), width),
                    LayerSpec::Relu,
                    conv(format!("{id}_conv2"), width, width, 3, 1, false),
                ],
                shortcut,
            }));
            c_in = width;
        }
        blocks.push((name, layers.len()));
    }
    layers.push(bn("head_bn".into(), c_in));
    layers.push(LayerSpec::Relu);
    layers.push(LayerSpec::AvgPoolGlobal);
    let features = layers.len();
    blocks.push(("pool".into(), features));
    layers.push(LayerSpec::Dense {
        id: "out".into(),
        inputs: c_in,
        units: spec.classes,
        l2_coeff,
    });
    layers.push(LayerSpec::Softmax);
    blocks.push(("out".into(), layers.len()));
    Network::new(layers, features, blocks)
}

/// Nesterov momentum in the form that stores the look-ahead point:
/// `v <- mu v - lr g;  p <- p + mu v - lr g`.
#[derive(Debug, Clone)]
pub struct Nesterov<T: Real> {
    pub lr: f64,
    pub momentum: f64,
    pub velocity: ParamStore<T>,
}

impl<T: Real> Nesterov<T> {
    pub fn new(params: &ParamStore<T>, lr: f64, momentum: f64) -> Self {
        Nesterov {
            lr,
            momentum,
            velocity: params.zeros_like_trainable(),
        }
    }

    pub fn step(&mut self, params: &mut ParamStore<T>, grads: &ParamStore<T>) -> Result<()> {
        let mu = T::from_f64c(self.momentum);
        let lr = T::from_f64c(self.lr);
        for (layer, role, v) in self.velocity.iter_mut() {
            let g = grads.get(layer, role)?;
            let p = params.get_mut(layer, role)?;
            for ((pv, vv), &gv) in p.data_mut().iter_mut().zip(v.data_mut()).zip(g.data()) {
                *vv = mu * *vv - lr * gv;
                *pv += mu * *vv - lr * gv;
            }
        }
        Ok(())
    }
}

/// Copies `old` (rows x cols) into the top-left block of `new`.
fn embed<T: Real>(new: &mut Tensor<T>, old: &Tensor<T>) {
    let cols_new = new.shape().get(1).copied().unwrap_or(1);
    let cols_old = old.shape().get(1).copied().unwrap_or(1);
    for (r, row) in old.data().chunks(cols_old).enumerate() {
        new.data_mut()[r * cols_new..r * cols_new + cols_old].copy_from_slice(row);
    }
}

/// Doubles both hidden dense layers of a VGG network. Old weights occupy the
/// leading block; new weights are He-normal, new biases zero. Optimizer
/// velocities are padded with zeros.
pub fn widen_dense<T: Real>(
    spec: &NetworkSpec,
    params: &ParamStore<T>,
    velocity: Option<&ParamStore<T>>,
    rng: &mut ChaCha8Rng,
) -> Result<(NetworkSpec, ParamStore<T>, Option<ParamStore<T>>)> {
    if spec.architecture != Architecture::VggLike {
        return Err(GaitError::UnsupportedArchitecture(format!(
            "dense widening applies to vgg-like networks, not {}",
            spec.architecture
        )));
    }
    let w = spec.dense_width;
    if 2 * w > spec.max_dense_width {
        return Err(GaitError::Config(format!(
            "width {w} cannot double within maximum {}",
            spec.max_dense_width
        )));
    }
    let wide = NetworkSpec {
        dense_width: 2 * w,
        ..spec.clone()
    };
    let flat = params.get("fc1", "weight")?.shape()[1];
    let shapes: [(&str, [usize; 2]); 3] = [("fc1", [2 * w, flat]), ("fc2", [2 * w, 2 * w]), ("out", [spec.classes, 2 * w])];

    let mut out = params.clone();
    for (id, shape) in shapes {
        let mut wt = he_normal::<T>(&shape, shape[1], rng);
        // The leading block is overwritten, so only fresh entries keep the draw.
        embed(&mut wt, params.get(id, "weight")?);
        out.insert(id, "weight", wt);
        let mut b = Tensor::zeros(&[shape[0]]);
        embed(&mut b, params.get(id, "bias")?);
        out.insert(id, "bias", b);
    }
    let vel = match velocity {
        None => None,
        Some(v) => {
            let mut nv = v.clone();
            for (id, shape) in shapes {
                let mut wt = Tensor::zeros(&shape);
                embed(&mut wt, v.get(id, "weight")?);
                nv.insert(id, "weight", wt);
                let mut b = Tensor::zeros(&[shape[0]]);
                embed(&mut b, v.get(id, "bias")?);
                nv.insert(id, "bias", b);
            }
            Some(nv)
        }
    };
    Ok((wide, out, vel))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub l2_coeff: f64,
    pub batch_size: usize,
    pub plateau_patience: usize,
    pub lr_decay_factor: f64,
    pub max_decays: usize,
    pub max_epochs: usize,
    /// Batches per epoch; `None` means one pass worth of training items.
    pub batches_per_epoch: Option<usize>,
    /// Smallest validation-accuracy gain that counts as progress.
    pub min_improvement: f64,
    pub val_fraction: f64,
    pub max_val_items: usize,
    pub queue_depth: usize,
    /// Set by the caller; the pipeline derives it from its top-level seed.
    #[serde(skip)]
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.1,
            momentum: 0.9,
            l2_coeff: 5e-4,
            batch_size: 64,
            plateau_patience: 5,
            lr_decay_factor: 10.0,
            max_decays: 3,
            max_epochs: 100,
            batches_per_epoch: None,
            min_improvement: 0.001,
            val_fraction: 0.1,
            max_val_items: 2000,
            queue_depth: 4,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(GaitError::Config(m));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning rate {} must be positive", self.learning_rate));
        }
        if !(self.lr_decay_factor > 1.0) {
            return bad(format!("decay factor {} must exceed 1", self.lr_decay_factor));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum {} outside [0,1)", self.momentum));
        }
        if self.l2_coeff < 0.0 {
            return bad(format!("negative l2 coefficient {}", self.l2_coeff));
        }
        if self.batch_size == 0 || self.max_epochs == 0 || self.queue_depth == 0 {
            return bad("batch size, epochs and queue depth must be positive".into());
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return bad(format!("validation fraction {} outside [0,1)", self.val_fraction));
        }
        Ok(())
    }
}

/// Training items grouped by class, rendered on demand. `render(item, rng)`
/// returns a flattened 3x48x48 patch: augmented when an rng is given,
/// centred otherwise.
pub struct TrainSet<'a> {
    pub by_class: Vec<Vec<usize>>,
    pub render: &'a (dyn Fn(usize, Option<&mut ChaCha8Rng>) -> Result<Vec<f32>> + Sync),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScheduleEvent {
    DecayLr,
    Widen,
    Stop,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub train_acc: f64,
    pub val_acc: f64,
    pub width: Option<usize>,
    pub event: Option<ScheduleEvent>,
}

impl fmt::Display for EpochRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "epoch={} lr={} train_loss={:.6} train_acc={:.4} val_acc={:.4}",
            self.epoch, self.lr, self.train_loss, self.train_acc, self.val_acc
        )?;
        if let Some(w) = self.width {
            write!(f, " width={w}")?;
        }
        if let Some(e) = self.event {
            let name = match e {
                ScheduleEvent::DecayLr => "decay-lr",
                ScheduleEvent::Widen => "widen",
                ScheduleEvent::Stop => "stop",
            };
            write!(f, " event={name}")?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub spec: NetworkSpec,
    pub network: Network,
    pub params: ParamStore<f32>,
    pub log: Vec<EpochRecord>,
}

impl TrainOutcome {
    pub fn log_text(&self) -> String {
        self.log.iter().map(|r| format!("{r}\n")).collect()
    }
}

struct Batch {
    index: usize,
    x: Tensor<f32>,
    labels: Vec<usize>,
}

fn split_validation(set: &TrainSet, cfg: &TrainConfig) -> (Vec<Vec<usize>>, Vec<(usize, usize)>) {
    let mut rng = substream(cfg.seed, "validation", &[]);
    let classes = set.by_class.len();
    let per_class_cap = cfg.max_val_items.div_ceil(classes.max(1));
    let mut train = Vec::with_capacity(classes);
    let mut val = Vec::new();
    for (c, items) in set.by_class.iter().enumerate() {
        let mut items = items.clone();
        // Fisher-Yates with the validation stream keeps the split seed-stable.
        for i in (1..items.len()).rev() {
            let j = rng.random_range(0..=i);
            items.swap(i, j);
        }
        let n_val = ((items.len() as f64 * cfg.val_fraction).floor() as usize)
            .min(per_class_cap)
            .min(items.len().saturating_sub(1));
        val.extend(items[..n_val].iter().map(|&i| (i, c)));
        train.push(items[n_val..].to_vec());
    }
    (train, val)
}

fn render_batch(
    set: &TrainSet,
    train: &[Vec<usize>],
    batch_size: usize,
    seed: u64,
    epoch: usize,
    index: usize,
) -> Result<Batch> {
    let mut rng = substream(seed, "augment", &[epoch as u64, index as u64]);
    let item_len = INPUT_CHANNELS * PATCH_SIDE * PATCH_SIDE;
    let mut data = Vec::with_capacity(batch_size * item_len);
    let mut labels = Vec::with_capacity(batch_size);
    for _ in 0..batch_size {
        let c = rng.random_range(0..train.len());
        let item = train[c][rng.random_range(0..train[c].len())];
        let patch = (set.render)(item, Some(&mut rng))?;
        if patch.len() != item_len {
            return Err(input_err!("rendered patch has {} values, expected {item_len}", patch.len()));
        }
        data.extend_from_slice(&patch);
        labels.push(c);
    }
    let x = Tensor::from_vec(&[batch_size, INPUT_CHANNELS, PATCH_SIDE, PATCH_SIDE], data)?;
    Ok(Batch { index, x, labels })
}

/// Eval-mode accuracy on centred patches.
pub fn accuracy(
    net: &Network,
    params: &ParamStore<f32>,
    set: &TrainSet,
    items: &[(usize, usize)],
    chunk: usize,
) -> Result<f64> {
    if items.is_empty() {
        return Ok(0.0);
    }
    let mut correct = 0usize;
    for part in items.chunks(chunk.max(1)) {
        let mut data = Vec::new();
        for &(item, _) in part {
            data.extend((set.render)(item, None)?);
        }
        let x = Tensor::from_vec(&[part.len(), INPUT_CHANNELS, PATCH_SIDE, PATCH_SIDE], data)?;
        let logits = net.logits(params, x)?;
        correct += argmax_rows(&logits).zip(part).filter(|(p, &(_, c))| *p == c).count();
    }
    Ok(correct as f64 / items.len() as f64)
}

fn argmax_rows<T: Real>(logits: &Tensor<T>) -> impl Iterator<Item = usize> + '_ {
    let k = logits.shape()[1];
    logits.data().chunks(k).map(|row| {
        row.iter()
            .enumerate()
            .fold((0, T::neg_infinity()), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) })
            .0
    })
}

fn batch_stats(x: &Tensor<f32>) -> String {
    let n = x.len().max(1) as f64;
    let mean = x.data().iter().map(|&v| v as f64).sum::<f64>() / n;
    let var = x.data().iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
    format!("input mean {mean:.4} std {:.4}", var.sqrt())
}

/// Trains from scratch. LR decays by `lr_decay_factor` on a validation
/// plateau (WRN), or the dense layers double (VGG); the run stops on a
/// plateau once neither is possible, or at `max_epochs`.
pub fn train(spec: &NetworkSpec, set: &TrainSet, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    spec.validate()?;
    if set.by_class.len() != spec.classes {
        return Err(input_err!("{} classes in data, network has {}", set.by_class.len(), spec.classes));
    }
    if let Some(c) = set.by_class.iter().position(|v| v.is_empty()) {
        return Err(input_err!("class {c} has no training items"));
    }
    let (train_items, val_items) = split_validation(set, cfg);
    let n_train: usize = train_items.iter().map(Vec::len).sum();
    let batches = cfg.batches_per_epoch.unwrap_or_else(|| n_train.div_ceil(cfg.batch_size)).max(1);

    let mut spec = spec.clone();
    let mut net = spec.build(cfg.l2_coeff)?;
    let mut params: ParamStore<f32> = net.init_params(crate::streams::derive_seed(cfg.seed, "init", &[]));
    let mut opt = Nesterov::new(&params, cfg.learning_rate, cfg.momentum);
    let mut grads = params.zeros_like_trainable();
    let mut log = Vec::new();
    let mut best = f64::NEG_INFINITY;
    let mut stale = 0usize;
    let mut decays = 0usize;
    let mut widenings = 0u64;

    for epoch in 0..cfg.max_epochs {
        let mut loss_sum = 0.0;
        let mut correct = 0usize;
        let mut seen = 0usize;
        std::thread::scope(|scope| -> Result<()> {
            let (tx, rx) = sync_channel::<Result<Batch>>(cfg.queue_depth);
            let train_items = &train_items;
            scope.spawn(move || {
                for b in 0..batches {
                    let batch = render_batch(set, train_items, cfg.batch_size, cfg.seed, epoch, b);
                    let failed = batch.is_err();
                    if tx.send(batch).is_err() || failed {
                        break;
                    }
                }
            });
            for batch in rx {
                let batch = batch?;
                let mut drop_rng = substream(cfg.seed, "dropout", &[epoch as u64, batch.index as u64]);
                let stats = batch_stats(&batch.x);
                let (logits, tape) = net.forward_train(&mut params, batch.x, &mut drop_rng)?;
                let ce = softmax_crossentropy(&logits, &batch.labels)?;
                let loss = ce.loss as f64 + net.l2_penalty(&params)?;
                if !loss.is_finite() {
                    return Err(GaitError::Numeric(format!(
                        "non-finite loss at epoch {epoch} batch {} (lr {}, {stats})",
                        batch.index, opt.lr
                    )));
                }
                correct += argmax_rows(&logits).zip(&batch.labels).filter(|(p, &y)| *p == y).count();
                seen += batch.labels.len();
                loss_sum += loss;
                grads.zero_();
                net.backward(&params, tape, ce.grad_logits, &mut grads)?;
                net.add_l2_grad(&params, &mut grads)?;
                opt.step(&mut params, &grads)?;
            }
            Ok(())
        })?;

        let val_acc = accuracy(&net, &params, set, &val_items, 256)?;
        let mut record = EpochRecord {
            epoch,
            lr: opt.lr,
            train_loss: loss_sum / batches as f64,
            train_acc: correct as f64 / seen.max(1) as f64,
            val_acc,
            width: (spec.architecture == Architecture::VggLike).then_some(spec.dense_width),
            event: None,
        };
        if val_acc >= best + cfg.min_improvement {
            best = val_acc;
            stale = 0;
        } else {
            stale += 1;
        }
        if stale >= cfg.plateau_patience {
            stale = 0;
            record.event = Some(match spec.architecture {
                Architecture::WideResnet if decays < cfg.max_decays => {
                    decays += 1;
                    opt.lr /= cfg.lr_decay_factor;
                    ScheduleEvent::DecayLr
                }
                Architecture::VggLike if 2 * spec.dense_width <= spec.max_dense_width => {
                    let mut rng = substream(cfg.seed, "widen", &[widenings]);
                    widenings += 1;
                    let (wide, p, v) = widen_dense(&spec, &params, Some(&opt.velocity), &mut rng)?;
                    spec = wide;
                    net = spec.build(cfg.l2_coeff)?;
                    params = p;
                    opt.velocity = v.expect("velocity was supplied");
                    grads = params.zeros_like_trainable();
                    ScheduleEvent::Widen
                }
                _ => ScheduleEvent::Stop,
            });
        }
        log::info!("{record}");
        let stop = record.event == Some(ScheduleEvent::Stop);
        log.push(record);
        if stop {
            break;
        }
    }
    Ok(TrainOutcome {
        spec,
        network: net,
        params,
        log,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointManifest {
    pub architecture: Architecture,
    pub width: usize,
    pub classes: usize,
    pub seed: u64,
    pub network: NetworkSpec,
}

pub struct Checkpoint {
    pub manifest: CheckpointManifest,
    pub network: Network,
    pub params: ParamStore<f32>,
}

impl Checkpoint {
    pub fn new(spec: &NetworkSpec, params: ParamStore<f32>, seed: u64) -> Result<Self> {
        let network = spec.build(0.0)?;
        network.check_params(&params)?;
        Ok(Checkpoint {
            manifest: CheckpointManifest {
                architecture: spec.architecture,
                width: spec.feature_width(),
                classes: spec.classes,
                seed,
                network: spec.clone(),
            },
            network,
            params,
        })
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| GaitError::io(dir, e))?;
        self.params.save(&dir.join(CHECKPOINT_PARAMS))?;
        let text = toml::to_string(&self.manifest).map_err(|e| GaitError::Config(e.to_string()))?;
        let path = dir.join(CHECKPOINT_MANIFEST);
        std::fs::write(&path, text).map_err(|e| GaitError::io(&path, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(CHECKPOINT_MANIFEST);
        let text = std::fs::read_to_string(&path).map_err(|e| GaitError::io(&path, e))?;
        let manifest: CheckpointManifest =
            toml::from_str(&text).map_err(|e| GaitError::format(&path, e.to_string()))?;
        let params = ParamStore::load(&dir.join(CHECKPOINT_PARAMS))?;
        let ck = Checkpoint::new(&manifest.network, params, manifest.seed)?;
        if ck.manifest != manifest {
            return Err(GaitError::format(&path, "manifest fields disagree with network description"));
        }
        Ok(ck)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::Matrix2;
    use rand::SeedableRng;

    fn input(n: usize) -> [usize; 4] {
        [n, INPUT_CHANNELS, PATCH_SIDE, PATCH_SIDE]
    }

    #[test]
    fn vgg_shapes() {
        let net = build_vgg(&NetworkSpec::vgg(155, 4096), 5e-4).unwrap();
        assert_eq!(net.shape_after_block("B4", &input(1)).unwrap(), vec![1, 512, 3, 3]);
        assert_eq!(net.output_shape(&input(2)).unwrap(), vec![2, 155]);
        let out = net.layers().iter().rev().find_map(|l| match l {
            LayerSpec::Dense { inputs, units, .. } => Some((*inputs, *units)),
            _ => None,
        });
        assert_eq!(out, Some((4096, 155)));
        let small = build_vgg(&NetworkSpec::vgg(155, 1024), 5e-4).unwrap();
        assert!(small.param_count() < net.param_count());
    }

    #[test]
    fn wrn_shapes() {
        let net = build_wrn(&NetworkSpec::wrn(155), 5e-4).unwrap();
        let sides: Vec<usize> = ["B1", "B2", "B3", "B4"]
            .iter()
            .map(|b| net.shape_after_block(b, &input(1)).unwrap()[2])
            .collect();
        assert_eq!(sides, vec![48, 48, 24, 12]);
        assert_eq!(net.shape_after_block("B4", &input(1)).unwrap(), vec![1, 256, 12, 12]);
        assert_eq!(net.shape_after_block("pool", &input(1)).unwrap(), vec![1, 256]);
        assert_eq!(NetworkSpec::wrn(155).feature_width(), 256);
        let blocks = net.layers().iter().filter(|l| matches!(l, LayerSpec::Residual(_))).count();
        assert_eq!(blocks, 9);
    }

    #[test]
    fn zero_input_gives_uniform_softmax() {
        let spec = NetworkSpec::tiny_wrn(5);
        let net = spec.build(0.0).unwrap();
        let params: ParamStore<f32> = net.init_params(3);
        let p = net.predict(&params, Tensor::zeros(&input(2))).unwrap();
        for v in p.data() {
            assert!((v - 0.2).abs() < 1e-6);
        }
    }

    #[test]
    fn probabilities_sum_to_one() {
        for spec in [NetworkSpec::tiny_wrn(4), NetworkSpec::tiny_vgg(4, 16)] {
            let net = spec.build(0.0).unwrap();
            let params: ParamStore<f32> = net.init_params(1);
            let mut rng = ChaCha8Rng::seed_from_u64(2);
            let x: Vec<f32> = (0..2 * 6912).map(|_| rng.random()).collect();
            let p = net.predict(&params, Tensor::from_vec(&input(2), x).unwrap()).unwrap();
            for row in p.data().chunks(4) {
                assert!((row.iter().sum::<f32>() - 1.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn widen_preserves_core() {
        let spec = NetworkSpec {
            base_filters: 2,
            ..NetworkSpec::vgg(3, 1024)
        };
        let net = spec.build(0.0).unwrap();
        let params: ParamStore<f32> = net.init_params(7);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (wide, wp, _) = widen_dense(&spec, &params, None, &mut rng).unwrap();
        assert_eq!(wide.dense_width, 2048);
        let old = params.get("fc2", "weight").unwrap();
        let new = wp.get("fc2", "weight").unwrap();
        assert_eq!(new.shape(), [2048, 2048]);
        for r in 0..1024 {
            assert_eq!(&new.data()[r * 2048..r * 2048 + 1024], &old.data()[r * 1024..(r + 1) * 1024]);
        }
        let wnet = wide.build(0.0).unwrap();
        wnet.check_params(&wp).unwrap();
        let x = Tensor::full(&input(1), 0.5f32);
        let a = net.logits(&params, x.clone()).unwrap();
        let b = wnet.logits(&wp, x).unwrap();
        assert_ne!(a.data(), b.data());
    }

    #[test]
    fn widen_rejects_wrn_and_full_width() {
        let spec = NetworkSpec::tiny_wrn(3);
        let params: ParamStore<f32> = spec.build(0.0).unwrap().init_params(0);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let err = widen_dense(&spec, &params, None, &mut rng).unwrap_err();
        assert!(matches!(err, GaitError::UnsupportedArchitecture(_)));

        let spec = NetworkSpec {
            base_filters: 1,
            ..NetworkSpec::vgg(3, 4096)
        };
        let params: ParamStore<f32> = spec.build(0.0).unwrap().init_params(0);
        assert!(widen_dense(&spec, &params, None, &mut rng).is_err());
    }

    /// Look-ahead Nesterov on f(x) = a/2 x^2 as a linear map on (theta, v).
    #[test]
    fn nesterov_matches_closed_form() {
        let (a, lr, mu, x0) = (3.0f64, 0.05, 0.9, 2.0);
        let mut params = ParamStore::<f64>::new(0);
        params.insert("q", "weight", Tensor::full(&[1], x0));
        let mut opt = Nesterov::new(&params, lr, mu);
        let m = Matrix2::new(1.0 - lr * a, mu * (1.0 - lr * a), -lr * a, mu * (1.0 - lr * a));
        for t in 1..=40 {
            let x = params.get("q", "weight").unwrap().data()[0];
            let mut g = params.zeros_like_trainable();
            g.insert("q", "weight", Tensor::full(&[1], a * x));
            opt.step(&mut params, &g).unwrap();
            let state = m.pow(t as u32) * nalgebra::Vector2::new(x0, 0.0);
            let lookahead = state[0] + mu * state[1];
            let got = params.get("q", "weight").unwrap().data()[0];
            assert!((got - lookahead).abs() < 1e-12, "step {t}: {got} vs {lookahead}");
        }
    }

    #[test]
    fn loss_decreases_on_fixed_batch() {
        let spec = NetworkSpec::tiny_wrn(3);
        let net = spec.build(5e-4).unwrap();
        let mut params: ParamStore<f32> = net.init_params(11);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x: Vec<f32> = (0..6 * 6912).map(|_| rng.random()).collect();
        let x = Tensor::from_vec(&input(6), x).unwrap();
        let labels = vec![0, 1, 2, 0, 1, 2];
        let mut opt = Nesterov::new(&params, 0.01, 0.9);
        let mut grads = params.zeros_like_trainable();
        let mut losses = Vec::new();
        for _ in 0..6 {
            let (logits, tape) = net.forward_train(&mut params, x.clone(), &mut rng).unwrap();
            let ce = softmax_crossentropy(&logits, &labels).unwrap();
            losses.push(ce.loss as f64 + net.l2_penalty(&params).unwrap());
            grads.zero_();
            net.backward(&params, tape, ce.grad_logits, &mut grads).unwrap();
            net.add_l2_grad(&params, &mut grads).unwrap();
            opt.step(&mut params, &grads).unwrap();
        }
        for w in losses.windows(2) {
            assert!(w[1] < w[0], "{losses:?}");
        }
    }

    fn toy_set(classes: usize) -> (Vec<Vec<usize>>, impl Fn(usize, Option<&mut ChaCha8Rng>) -> Result<Vec<f32>> + Sync) {
        let by_class = (0..classes).map(|c| (0..20).map(|i| c * 20 + i).collect()).collect();
        let render = move |item: usize, rng: Option<&mut ChaCha8Rng>| {
            let c = item / 20;
            let jitter = rng.map(|r| r.random::<f32>() * 0.1).unwrap_or(0.05);
            Ok((0..6912)
                .map(|k| {
                    let ch = k / 2304;
                    if ch == c % 3 { 0.6 + jitter } else { 0.2 }
                })
                .collect())
        };
        (by_class, render)
    }

    #[test]
    fn tiny_wrn_learns_two_classes() {
        let (by_class, render) = toy_set(2);
        let set = TrainSet { by_class, render: &render };
        let cfg = TrainConfig {
            learning_rate: 0.05,
            batch_size: 8,
            batches_per_epoch: Some(4),
            max_epochs: 10,
            seed: 9,
            ..TrainConfig::default()
        };
        let out = train(&NetworkSpec::tiny_wrn(2), &set, &cfg).unwrap();
        let last = out.log.last().unwrap();
        assert_eq!(last.train_acc, 1.0, "{}", out.log_text());
        assert_eq!(last.val_acc, 1.0);
        let again = train(&NetworkSpec::tiny_wrn(2), &set, &cfg).unwrap();
        assert_eq!(out.log, again.log);
        assert_eq!(out.params, again.params);
    }

    #[test]
    fn schedule_decays_and_widens() {
        let (by_class, render) = toy_set(2);
        let set = TrainSet { by_class, render: &render };
        let cfg = TrainConfig {
            learning_rate: 0.01,
            batch_size: 4,
            batches_per_epoch: Some(1),
            max_epochs: 20,
            plateau_patience: 1,
            min_improvement: 2.0,
            max_decays: 2,
            ..TrainConfig::default()
        };
        let out = train(&NetworkSpec::tiny_wrn(2), &set, &cfg).unwrap();
        let lrs: Vec<f64> = out.log.iter().map(|r| r.lr).collect();
        assert_eq!(lrs.len(), 4);
        assert_eq!(lrs[0], lrs[1]);
        assert_eq!(lrs[1] / lrs[2], 10.0);
        assert!((lrs[2] / lrs[3] - 10.0).abs() < 1e-12);
        assert_eq!(out.log.last().unwrap().event, Some(ScheduleEvent::Stop));

        let spec = NetworkSpec {
            base_filters: 2,
            dropout: 0.0,
            ..NetworkSpec::tiny_vgg(2, 8)
        };
        let out = train(&spec, &set, &cfg).unwrap();
        let widths: Vec<usize> = out.log.iter().filter_map(|r| r.width).collect();
        assert_eq!(widths, vec![8, 8, 16, 32]);
        assert_eq!(out.spec.dense_width, 32);
        out.network.check_params(&out.params).unwrap();
    }

    #[test]
    fn checkpoint_round_trip() {
        let spec = NetworkSpec::tiny_wrn(3);
        let params: ParamStore<f32> = spec.build(0.0).unwrap().init_params(4);
        let ck = Checkpoint::new(&spec, params.clone(), 4).unwrap();
        let dir = tempfile::tempdir().unwrap();
        ck.save(dir.path()).unwrap();
        let back = Checkpoint::load(dir.path()).unwrap();
        assert_eq!(back.params, params);
        assert_eq!(back.manifest.width, 32);
        assert_eq!(back.manifest.architecture, Architecture::WideResnet);
    }
}
