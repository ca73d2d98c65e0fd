//! The trunk/head CNN and its baseline regularizer variants.
//!
//! Trunk φ: conv5x5(C_in→32) → [BN] → ReLU → maxpool2 → conv5x5(32→50) → [BN]
//! → ReLU → maxpool2, giving 50×4×4 features for 28×28 inputs and 50×5×5 for
//! 32×32 inputs. Head ψ: flatten → [dropout] → linear(50·s²→128) → ReLU →
//! linear(128→10).

use std::fmt;
use std::str::FromStr;

use rand::distr::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{BatchStats, Tape, Tensor, Var};

pub const NUM_CLASSES: usize = 10;
pub const FEATURE_CHANNELS: usize = 50;
pub const HIDDEN_WIDTH: usize = 128;
const CONV1_CHANNELS: usize = 32;
const KERNEL: usize = 5;
const BN_EPS: f64 = 1e-5;
const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum DatasetKind {
    Mnist,
    FashionMnist,
    Cifar10,
}

impl DatasetKind {
    pub fn channels(self) -> usize {
        match self {
            DatasetKind::Mnist | DatasetKind::FashionMnist => 1,
            DatasetKind::Cifar10 => 3,
        }
    }

    /// Input height (= width).
    pub fn image_side(self) -> usize {
        match self {
            DatasetKind::Mnist | DatasetKind::FashionMnist => 28,
            DatasetKind::Cifar10 => 32,
        }
    }

    /// Spatial side of the feature map φ(x).
    pub fn feature_side(self) -> usize {
        ((self.image_side() - KERNEL).div_ceil(2) - KERNEL).div_ceil(2)
    }

    pub fn image_shape(self) -> [usize; 3] {
        [self.channels(), self.image_side(), self.image_side()]
    }

    pub fn name(self) -> &'static str {
        match self {
            DatasetKind::Mnist => "mnist",
            DatasetKind::FashionMnist => "fashion-mnist",
            DatasetKind::Cifar10 => "cifar10",
        }
    }

    pub(crate) fn tag(self) -> u8 {
        match self {
            DatasetKind::Mnist => 0,
            DatasetKind::FashionMnist => 1,
            DatasetKind::Cifar10 => 2,
        }
    }

    pub(crate) fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(DatasetKind::Mnist),
            1 => Some(DatasetKind::FashionMnist),
            2 => Some(DatasetKind::Cifar10),
            _ => None,
        }
    }
}

impl fmt::Display for DatasetKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for DatasetKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "mnist" => Ok(DatasetKind::Mnist),
            "fashion-mnist" | "fashionmnist" | "fashion_mnist" => Ok(DatasetKind::FashionMnist),
            "cifar10" | "cifar-10" => Ok(DatasetKind::Cifar10),
            other => Err(Error::InvalidArgument(format!("unknown dataset kind '{other}'"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Regularizer {
    Bare,
    BatchNorm,
    Dropout { rate: f64 },
    WeightDecay { coefficient: f64 },
}

impl Regularizer {
    pub const DEFAULT_DROPOUT_RATE: f64 = 0.5;
    pub const DEFAULT_WEIGHT_DECAY: f64 = 5e-4;

    /// Short label used in reports: Bare, BN, DO, WD.
    pub fn label(&self) -> &'static str {
        match self {
            Regularizer::Bare => "Bare",
            Regularizer::BatchNorm => "BN",
            Regularizer::Dropout { .. } => "DO",
            Regularizer::WeightDecay { .. } => "WD",
        }
    }

    pub fn key(&self) -> &'static str {
        match self {
            Regularizer::Bare => "bare",
            Regularizer::BatchNorm => "batchnorm",
            Regularizer::Dropout { .. } => "dropout",
            Regularizer::WeightDecay { .. } => "weight_decay",
        }
    }

    pub(crate) fn tag(&self) -> (u8, f64) {
        match *self {
            Regularizer::Bare => (0, 0.0),
            Regularizer::BatchNorm => (1, 0.0),
            Regularizer::Dropout { rate } => (2, rate),
            Regularizer::WeightDecay { coefficient } => (3, coefficient),
        }
    }

    pub(crate) fn from_tag(tag: u8, value: f64) -> Option<Self> {
        match tag {
            0 => Some(Regularizer::Bare),
            1 => Some(Regularizer::BatchNorm),
            2 => Some(Regularizer::Dropout { rate: value }),
            3 => Some(Regularizer::WeightDecay { coefficient: value }),
            _ => None,
        }
    }

    /// Parses `bare`, `batchnorm`, `dropout`, `weight_decay` with default strengths.
    pub fn from_key(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "bare" => Ok(Regularizer::Bare),
            "batchnorm" | "bn" => Ok(Regularizer::BatchNorm),
            "dropout" | "do" => Ok(Regularizer::Dropout {
                rate: Self::DEFAULT_DROPOUT_RATE,
            }),
            "weight_decay" | "wd" => Ok(Regularizer::WeightDecay {
                coefficient: Self::DEFAULT_WEIGHT_DECAY,
            }),
            other => Err(Error::InvalidArgument(format!("unknown regularizer '{other}'"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Side {
    /// Θ_r: parameters of φ.
    Trunk,
    /// Θ_c: parameters of ψ.
    Head,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    Weight,
    Bias,
    NormScale,
    NormShift,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub side: Side,
    pub kind: ParamKind,
    pub value: Tensor,
}

/// Non-trainable state (batch-norm running statistics).
#[derive(Clone, Debug, PartialEq)]
pub struct Buffer {
    pub name: String,
    pub value: Tensor,
}

/// Seed for parameter initialization.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct InitSeed(pub u64);

/// Vars for one forward pass; `params[i]` corresponds to `model.params()[i]`.
#[derive(Clone, Debug)]
pub struct ForwardOutput {
    pub features: Var,
    pub logits: Var,
    pub params: Vec<Var>,
}

#[derive(Clone, Debug)]
pub struct Model {
    dataset: DatasetKind,
    regularizer: Regularizer,
    mode: Mode,
    params: Vec<Param>,
    buffers: Vec<Buffer>,
    dropout_rng: ChaCha8Rng,
}

fn uniform_tensor(shape: &[usize], fan_in: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
    Tensor::from_fn(shape, |_| dist.sample(rng))
}

impl Model {
    /// Builds the network with fan-in uniform initialization driven only by
    /// `seed`. Convolution and linear weights are drawn in the same order for
    /// every regularizer, so all variants sharing a seed start from identical
    /// weights.
    pub fn build(dataset: DatasetKind, regularizer: Regularizer, seed: InitSeed) -> Result<Model> {
        match regularizer {
            Regularizer::Dropout { rate } if !(0.0..1.0).contains(&rate) => {
                return Err(Error::InvalidArgument(format!("dropout rate {rate} outside [0, 1)")));
            }
            Regularizer::WeightDecay { coefficient } if !(coefficient >= 0.0 && coefficient.is_finite()) => {
                return Err(Error::InvalidArgument(format!("weight decay {coefficient} must be >= 0")));
            }
            _ => {}
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed.0);
        let c_in = dataset.channels();
        let s = dataset.feature_side();
        let feat = FEATURE_CHANNELS * s * s;
        let bn = regularizer == Regularizer::BatchNorm;

        let mut params = Vec::new();
        let mut buffers = Vec::new();
        let mut push = |name: &str, side, kind, value| {
            params.push(Param {
                name: name.to_string(),
                side,
                kind,
                value,
            })
        };

        let conv1_w = uniform_tensor(&[CONV1_CHANNELS, c_in, KERNEL, KERNEL], c_in * KERNEL * KERNEL, &mut rng);
        let conv1_b = uniform_tensor(&[CONV1_CHANNELS], c_in * KERNEL * KERNEL, &mut rng);
        let conv2_w = uniform_tensor(
            &[FEATURE_CHANNELS, CONV1_CHANNELS, KERNEL, KERNEL],
            CONV1_CHANNELS * KERNEL * KERNEL,
            &mut rng,
        );
        let conv2_b = uniform_tensor(&[FEATURE_CHANNELS], CONV1_CHANNELS * KERNEL * KERNEL, &mut rng);
        let fc1_w = uniform_tensor(&[feat, HIDDEN_WIDTH], feat, &mut rng);
        let fc1_b = uniform_tensor(&[HIDDEN_WIDTH], feat, &mut rng);
        let fc2_w = uniform_tensor(&[HIDDEN_WIDTH, NUM_CLASSES], HIDDEN_WIDTH, &mut rng);
        let fc2_b = uniform_tensor(&[NUM_CLASSES], HIDDEN_WIDTH, &mut rng);

        push("trunk.conv1.weight", Side::Trunk, ParamKind::Weight, conv1_w);
        push("trunk.conv1.bias", Side::Trunk, ParamKind::Bias, conv1_b);
        if bn {
            push("trunk.bn1.weight", Side::Trunk, ParamKind::NormScale, Tensor::full(&[CONV1_CHANNELS], 1.0));
            push("trunk.bn1.bias", Side::Trunk, ParamKind::NormShift, Tensor::zeros(&[CONV1_CHANNELS]));
        }
        push("trunk.conv2.weight", Side::Trunk, ParamKind::Weight, conv2_w);
        push("trunk.conv2.bias", Side::Trunk, ParamKind::Bias, conv2_b);
        if bn {
            push("trunk.bn2.weight", Side::Trunk, ParamKind::NormScale, Tensor::full(&[FEATURE_CHANNELS], 1.0));
            push("trunk.bn2.bias", Side::Trunk, ParamKind::NormShift, Tensor::zeros(&[FEATURE_CHANNELS]));
        }
        push("head.fc1.weight", Side::Head, ParamKind::Weight, fc1_w);
        push("head.fc1.bias", Side::Head, ParamKind::Bias, fc1_b);
        push("head.fc2.weight", Side::Head, ParamKind::Weight, fc2_w);
        push("head.fc2.bias", Side::Head, ParamKind::Bias, fc2_b);

        if bn {
            for (layer, c) in [("bn1", CONV1_CHANNELS), ("bn2", FEATURE_CHANNELS)] {
                buffers.push(Buffer {
                    name: format!("trunk.{layer}.running_mean"),
                    value: Tensor::zeros(&[c]),
                });
                buffers.push(Buffer {
                    name: format!("trunk.{layer}.running_var"),
                    value: Tensor::full(&[c], 1.0),
                });
            }
        }

        Ok(Model {
            dataset,
            regularizer,
            mode: Mode::Train,
            params,
            buffers,
            dropout_rng: ChaCha8Rng::seed_from_u64(0),
        })
    }

    pub fn dataset(&self) -> DatasetKind {
        self.dataset
    }

    pub fn regularizer(&self) -> Regularizer {
        self.regularizer
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn set_mode(&mut self, mode: Mode) {
        self.mode = mode;
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    pub fn param(&self, name: &str) -> Option<&Param> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn buffers(&self) -> &[Buffer] {
        &self.buffers
    }

    pub fn buffers_mut(&mut self) -> &mut [Buffer] {
        &mut self.buffers
    }

    pub fn num_parameters(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Restarts the dropout mask stream.
    pub fn reseed_dropout(&mut self, seed: u64) {
        self.dropout_rng = ChaCha8Rng::seed_from_u64(seed);
    }

    pub fn dropout_rng(&self) -> &ChaCha8Rng {
        &self.dropout_rng
    }

    pub fn set_dropout_rng(&mut self, rng: ChaCha8Rng) {
        self.dropout_rng = rng;
    }

    fn index_of(&self, name: &str) -> usize {
        self.params
            .iter()
            .position(|p| p.name == name)
            .unwrap_or_else(|| panic!("model has no parameter {name}"))
    }

    fn buffer(&self, name: &str) -> &[f64] {
        self.buffers
            .iter()
            .find(|b| b.name == name)
            .unwrap_or_else(|| panic!("model has no buffer {name}"))
            .value
            .data()
    }

    fn check_batch(&self, images: &Tensor) -> Result<()> {
        let [c, h, w] = self.dataset.image_shape();
        let s = images.shape();
        if s.len() != 4 || s[1] != c || s[2] != h || s[3] != w {
            return Err(Error::shape(
                "forward",
                format!("{} batch must be [N,{c},{h},{w}], got {s:?}", self.dataset),
            ));
        }
        Ok(())
    }

    fn push_params(&self, tape: &mut Tape) -> Vec<Var> {
        self.params.iter().map(|p| tape.leaf(p.value.clone(), true)).collect()
    }

    /// Forward pass in the model's current mode. Train mode draws dropout
    /// masks from the model's stream and updates batch-norm running statistics.
    pub fn forward(&mut self, tape: &mut Tape, images: &Tensor) -> Result<ForwardOutput> {
        self.check_batch(images)?;
        let train = self.mode == Mode::Train;
        if train && self.regularizer == Regularizer::BatchNorm && images.shape()[0] < 2 {
            return Err(Error::InvalidArgument(
                "batch norm in train mode needs a batch of at least 2 samples".into(),
            ));
        }
        let params = self.push_params(tape);
        let x = tape.leaf(images.clone(), false);
        let (features, stats) = trunk_pass(self, tape, &params, x, train)?;
        let mut flat = tape.flatten(features)?;
        if let (true, Regularizer::Dropout { rate }) = (train, self.regularizer) {
            flat = tape.dropout(flat, rate, &mut self.dropout_rng)?;
        }
        let logits = head_pass(self, tape, &params, flat)?;
        for (layer, s) in stats {
            self.update_running(layer, &s);
        }
        Ok(ForwardOutput {
            features,
            logits,
            params,
        })
    }

    /// Eval-mode forward that leaves the model untouched.
    pub fn infer(&self, tape: &mut Tape, images: &Tensor) -> Result<ForwardOutput> {
        self.check_batch(images)?;
        let params = self.push_params(tape);
        let x = tape.leaf(images.clone(), false);
        let (features, _) = trunk_pass(self, tape, &params, x, false)?;
        let flat = tape.flatten(features)?;
        let logits = head_pass(self, tape, &params, flat)?;
        Ok(ForwardOutput {
            features,
            logits,
            params,
        })
    }

    /// Eval-mode φ(x) as a plain tensor `[N, 50, s, s]`.
    pub fn features(&self, images: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::inference();
        let out = self.infer(&mut tape, images)?;
        Ok(tape.value(out.features).clone())
    }

    /// Eval-mode ψ over given features `[N, 50, s, s]`.
    pub fn head_logits(&self, features: &Tensor) -> Result<Tensor> {
        let s = self.dataset.feature_side();
        let fs = features.shape();
        if fs.len() != 4 || fs[1] != FEATURE_CHANNELS || fs[2] != s || fs[3] != s {
            return Err(Error::shape(
                "head",
                format!("features must be [N,{FEATURE_CHANNELS},{s},{s}], got {fs:?}"),
            ));
        }
        let mut tape = Tape::inference();
        let params = self.push_params(&mut tape);
        let f = tape.leaf(features.clone(), false);
        let flat = tape.flatten(f)?;
        let logits = head_pass(self, &mut tape, &params, flat)?;
        Ok(tape.value(logits).clone())
    }

    fn update_running(&mut self, layer: &str, stats: &BatchStats) {
        let unbias = stats.count as f64 / (stats.count as f64 - 1.0);
        for (suffix, fresh) in [("running_mean", &stats.mean), ("running_var", &stats.var)] {
            let name = format!("trunk.{layer}.{suffix}");
            let is_var = suffix == "running_var";
            let buf = self
                .buffers
                .iter_mut()
                .find(|b| b.name == name)
                .expect("batch-norm buffer exists");
            for (r, &v) in buf.value.data_mut().iter_mut().zip(fresh) {
                let v = if is_var { v * unbias } else { v };
                *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * v;
            }
        }
    }

    /// `coefficient · ½ Σ ||W||²` over convolution kernels and linear weights
    /// (biases and normalization parameters excluded).
    pub fn weight_decay_penalty(&self, tape: &mut Tape, params: &[Var], coefficient: f64) -> Result<Var> {
        let mut total: Option<Var> = None;
        for (p, &v) in self.params.iter().zip(params) {
            if p.kind != ParamKind::Weight {
                continue;
            }
            let term = tape.half_sum_squares(v)?;
            total = Some(match total {
                Some(t) => tape.add(t, term)?,
                None => term,
            });
        }
        let total = total.expect("model always has weight tensors");
        tape.scale(total, coefficient)
    }

    /// Plain-value version of [`Model::weight_decay_penalty`].
    pub fn weight_decay_value(&self, coefficient: f64) -> f64 {
        let sum: f64 = self
            .params
            .iter()
            .filter(|p| p.kind == ParamKind::Weight)
            .flat_map(|p| p.value.data())
            .map(|v| v * v)
            .sum();
        coefficient * 0.5 * sum
    }
}

fn trunk_pass(
    model: &Model,
    tape: &mut Tape,
    params: &[Var],
    x: Var,
    train: bool,
) -> Result<(Var, Vec<(&'static str, BatchStats)>)> {
    let bn = model.regularizer == Regularizer::BatchNorm;
    let p = |name: &str| params[model.index_of(name)];
    let mut stats = Vec::new();
    let mut h = x;
    for (conv, norm) in [("conv1", "bn1"), ("conv2", "bn2")] {
        h = tape.conv2d(h, p(&format!("trunk.{conv}.weight")), p(&format!("trunk.{conv}.bias")), 1, 0)?;
        if bn {
            let gamma = p(&format!("trunk.{norm}.weight"));
            let beta = p(&format!("trunk.{norm}.bias"));
            h = if train {
                let (out, s) = tape.batch_norm_train(h, gamma, beta, BN_EPS)?;
                stats.push((norm, s));
                out
            } else {
                tape.batch_norm_eval(
                    h,
                    gamma,
                    beta,
                    model.buffer(&format!("trunk.{norm}.running_mean")),
                    model.buffer(&format!("trunk.{norm}.running_var")),
                    BN_EPS,
                )?
            };
        }
        h = tape.relu(h)?;
        h = tape.maxpool2(h)?;
    }
    Ok((h, stats))
}

fn head_pass(model: &Model, tape: &mut Tape, params: &[Var], flat: Var) -> Result<Var> {
    let p = |name: &str| params[model.index_of(name)];
    let h = tape.linear(flat, p("head.fc1.weight"), p("head.fc1.bias"))?;
    let h = tape.relu(h)?;
    tape.linear(h, p("head.fc2.weight"), p("head.fc2.bias"))
}
