use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};

use rand::Rng;

use super::kernels::{self, ConvGeometry};
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d {
        input: Var,
        weight: Var,
        bias: Var,
        geometry: ConvGeometry,
        cols: Vec<f64>,
    },
    MaxPool2 {
        input: Var,
        argmax: Vec<usize>,
    },
    Relu {
        input: Var,
    },
    Reshape {
        input: Var,
    },
    Linear {
        input: Var,
        weight: Var,
        bias: Var,
    },
    SoftmaxCrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
    BatchNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        x_hat: Vec<f64>,
        inv_std: Vec<f64>,
        batch_stats: bool,
    },
    /// Elementwise product with a constant mask (dropout, channel ablation).
    Mask {
        input: Var,
        mask: Vec<f64>,
    },
    RowNormMean {
        input: Var,
        norms: Vec<f64>,
    },
    RowSquaredNormMean {
        input: Var,
    },
    HalfSumSquares {
        input: Var,
    },
    Sum {
        input: Var,
    },
    Square {
        input: Var,
    },
    Add {
        lhs: Var,
        rhs: Var,
    },
    Scale {
        input: Var,
        factor: f64,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Batch statistics computed by a train-mode batch norm, for running averages.
#[derive(Clone, Debug)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Biased (population) variance over the batch.
    pub var: Vec<f64>,
    /// Elements per channel that the statistics were computed over.
    pub count: usize,
}

/// Ordered record of executed primitives. Nodes are appended in execution
/// order, so the node list is already topologically sorted.
#[derive(Debug)]
pub struct Tape {
    nodes: Vec<Node>,
    recording: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        super::heap::retain_freed_memory();
        Tape {
            nodes: Vec::new(),
            recording: true,
        }
    }

    /// A tape that keeps no backward caches; every node has `requires_grad == false`.
    pub fn inference() -> Self {
        super::heap::retain_freed_memory();
        Tape {
            nodes: Vec::new(),
            recording: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        let requires_grad = requires_grad && self.recording;
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    fn shape(&self, var: Var) -> &[usize] {
        self.nodes[var.0].value.shape()
    }

    fn push(&mut self, op_name: &'static str, value: Tensor, op: Op, inputs: &[Var]) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::NonFinite { op: op_name });
        }
        let requires_grad = self.recording && inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        // Caches are useless without a backward pass.
        let op = if requires_grad { op } else { strip_cache(op) };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// 2-D cross-correlation (no kernel flip) over `[N, C, H, W]`.
    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Var, stride: usize, padding: usize) -> Result<Var> {
        let xs = self.shape(input).to_vec();
        let ws = self.shape(weight).to_vec();
        let bs = self.shape(bias).to_vec();
        if xs.len() != 4 {
            return Err(Error::shape("conv2d", format!("input must be [N,C,H,W], got {xs:?}")));
        }
        if ws.len() != 4 || ws[2] != ws[3] {
            return Err(Error::shape("conv2d", format!("weight must be [C_out,C_in,k,k], got {ws:?}")));
        }
        if ws[1] != xs[1] {
            return Err(Error::shape(
                "conv2d",
                format!("C_in: input has {} channels, weight expects {}", xs[1], ws[1]),
            ));
        }
        if bs != [ws[0]] {
            return Err(Error::shape("conv2d", format!("C_out: bias {bs:?} vs {} filters", ws[0])));
        }
        if stride == 0 {
            return Err(Error::shape("conv2d", "stride must be >= 1"));
        }
        let k = ws[2];
        if k > xs[2] + 2 * padding {
            return Err(Error::shape("conv2d", format!("H: kernel {k} exceeds padded height {}", xs[2] + 2 * padding)));
        }
        if k > xs[3] + 2 * padding {
            return Err(Error::shape("conv2d", format!("W: kernel {k} exceeds padded width {}", xs[3] + 2 * padding)));
        }
        let geometry = ConvGeometry {
            batch: xs[0],
            in_channels: xs[1],
            height: xs[2],
            width: xs[3],
            out_channels: ws[0],
            kernel: k,
            stride,
            padding,
        };
        let (out, cols) = kernels::conv2d_forward(
            self.value(input).data(),
            self.value(weight).data(),
            self.value(bias).data(),
            &geometry,
        );
        let value = Tensor::new(
            vec![xs[0], ws[0], geometry.out_height(), geometry.out_width()],
            out,
        )?;
        self.push(
            "conv2d",
            value,
            Op::Conv2d {
                input,
                weight,
                bias,
                geometry,
                cols,
            },
            &[input, weight, bias],
        )
    }

    pub fn maxpool2(&mut self, input: Var) -> Result<Var> {
        let xs = self.shape(input).to_vec();
        if xs.len() != 4 {
            return Err(Error::shape("maxpool2", format!("input must be [N,C,H,W], got {xs:?}")));
        }
        if !xs[2].is_multiple_of(2) || !xs[3].is_multiple_of(2) {
            return Err(Error::shape("maxpool2", format!("spatial dims must be even, got {}x{}", xs[2], xs[3])));
        }
        let (out, argmax) = kernels::maxpool2_forward(self.value(input).data(), xs[0] * xs[1], xs[2], xs[3]);
        let value = Tensor::new(vec![xs[0], xs[1], xs[2] / 2, xs[3] / 2], out)?;
        self.push("maxpool2", value, Op::MaxPool2 { input, argmax }, &[input])
    }

    pub fn relu(&mut self, input: Var) -> Result<Var> {
        let x = self.value(input);
        let data = x.data().iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect();
        let value = Tensor::new(x.shape().to_vec(), data)?;
        self.push("relu", value, Op::Relu { input }, &[input])
    }

    pub fn reshape(&mut self, input: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(input).clone().reshape(shape)?;
        self.push("reshape", value, Op::Reshape { input }, &[input])
    }

    /// `[N, ...] -> [N, D]`.
    pub fn flatten(&mut self, input: Var) -> Result<Var> {
        let xs = self.shape(input);
        let n = xs[0];
        let d = xs[1..].iter().product::<usize>().max(1);
        self.reshape(input, &[n, d])
    }

    /// `[N, D] · [D, M] + bias[M]`.
    pub fn linear(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let xs = self.shape(input).to_vec();
        let ws = self.shape(weight).to_vec();
        let bs = self.shape(bias).to_vec();
        if xs.len() != 2 || ws.len() != 2 {
            return Err(Error::shape("linear", format!("expected [N,D] x [D,M], got {xs:?} x {ws:?}")));
        }
        if xs[1] != ws[0] {
            return Err(Error::shape("linear", format!("D: input has {} features, weight expects {}", xs[1], ws[0])));
        }
        if bs != [ws[1]] {
            return Err(Error::shape("linear", format!("M: bias {bs:?} vs {} outputs", ws[1])));
        }
        let out = kernels::linear_forward(
            self.value(input).data(),
            self.value(weight).data(),
            self.value(bias).data(),
            xs[0],
            xs[1],
            ws[1],
        );
        let value = Tensor::new(vec![xs[0], ws[1]], out)?;
        self.push("linear", value, Op::Linear { input, weight, bias }, &[input, weight, bias])
    }

    /// Mean over rows of `-log softmax(logits)[label]`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let zs = self.shape(logits).to_vec();
        if zs.len() != 2 || zs[0] != labels.len() {
            return Err(Error::shape(
                "softmax_cross_entropy",
                format!("logits {zs:?} vs {} labels", labels.len()),
            ));
        }
        if let Some((i, &l)) = labels.iter().enumerate().find(|(_, &l)| l >= zs[1]) {
            return Err(Error::InvalidArgument(format!(
                "label {l} at position {i} outside [0, {})",
                zs[1]
            )));
        }
        let (loss, probs) = kernels::softmax_cross_entropy(self.value(logits).data(), labels, zs[1]);
        self.push(
            "softmax_cross_entropy",
            Tensor::scalar(loss),
            Op::SoftmaxCrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            &[logits],
        )
    }

    fn check_bn(&self, input: Var, gamma: Var, beta: Var) -> Result<(usize, usize, usize)> {
        let xs = self.shape(input);
        if xs.len() < 2 {
            return Err(Error::shape("batch_norm", format!("input must be [N,C,...], got {xs:?}")));
        }
        let (n, c) = (xs[0], xs[1]);
        let p = xs[2..].iter().product::<usize>();
        for (name, v) in [("gamma", gamma), ("beta", beta)] {
            if self.shape(v) != [c] {
                return Err(Error::shape("batch_norm", format!("C: {name} {:?} vs {c} channels", self.shape(v))));
            }
        }
        Ok((n, c, p))
    }

    /// Normalizes with the batch's own per-channel statistics.
    pub fn batch_norm_train(&mut self, input: Var, gamma: Var, beta: Var, eps: f64) -> Result<(Var, BatchStats)> {
        let (n, c, p) = self.check_bn(input, gamma, beta)?;
        if n * p < 2 {
            return Err(Error::InvalidArgument(
                "batch_norm in train mode needs at least 2 values per channel".into(),
            ));
        }
        let x = self.value(input).data();
        let (mean, var) = kernels::channel_mean_var(x, n, c, p);
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let (out, x_hat) = kernels::channel_affine(
            x,
            &mean,
            &inv_std,
            self.value(gamma).data(),
            self.value(beta).data(),
            n,
            c,
            p,
        );
        let value = Tensor::new(self.shape(input).to_vec(), out)?;
        let var_out = self.push(
            "batch_norm",
            value,
            Op::BatchNorm {
                input,
                gamma,
                beta,
                x_hat,
                inv_std,
                batch_stats: true,
            },
            &[input, gamma, beta],
        )?;
        Ok((var_out, BatchStats { mean, var, count: n * p }))
    }

    /// Normalizes with fixed (running) statistics.
    pub fn batch_norm_eval(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        running_mean: &[f64],
        running_var: &[f64],
        eps: f64,
    ) -> Result<Var> {
        let (n, c, p) = self.check_bn(input, gamma, beta)?;
        if running_mean.len() != c || running_var.len() != c {
            return Err(Error::shape("batch_norm", "running statistics length differs from channel count"));
        }
        let inv_std: Vec<f64> = running_var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let (out, x_hat) = kernels::channel_affine(
            self.value(input).data(),
            running_mean,
            &inv_std,
            self.value(gamma).data(),
            self.value(beta).data(),
            n,
            c,
            p,
        );
        let value = Tensor::new(self.shape(input).to_vec(), out)?;
        self.push(
            "batch_norm",
            value,
            Op::BatchNorm {
                input,
                gamma,
                beta,
                x_hat,
                inv_std,
                batch_stats: false,
            },
            &[input, gamma, beta],
        )
    }

    /// Inverted dropout: zeroes each entry with probability `rate` and scales
    /// survivors by `1 / (1 - rate)`.
    pub fn dropout<R: Rng + ?Sized>(&mut self, input: Var, rate: f64, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::InvalidArgument(format!("dropout rate {rate} outside [0, 1)")));
        }
        let keep = 1.0 - rate;
        let scale = 1.0 / keep;
        let len = self.value(input).len();
        let mask: Vec<f64> = (0..len)
            .map(|_| if rng.random::<f64>() < keep { scale } else { 0.0 })
            .collect();
        self.apply_mask("dropout", input, mask)
    }

    /// Zeroes whole channels (axis 1) where `keep[c]` is false.
    pub fn channel_mask(&mut self, input: Var, keep: &[bool]) -> Result<Var> {
        let xs = self.shape(input).to_vec();
        if xs.len() < 2 || xs[1] != keep.len() {
            return Err(Error::shape("channel_mask", format!("C: input {xs:?} vs mask of {}", keep.len())));
        }
        let p: usize = xs[2..].iter().product();
        let mut mask = Vec::with_capacity(self.value(input).len());
        for _ in 0..xs[0] {
            for &k in keep {
                mask.extend(std::iter::repeat_n(if k { 1.0 } else { 0.0 }, p));
            }
        }
        self.apply_mask("channel_mask", input, mask)
    }

    /// Elementwise product with a constant mask of the same length.
    pub fn mask(&mut self, input: Var, mask: Vec<f64>) -> Result<Var> {
        if mask.len() != self.value(input).len() {
            return Err(Error::shape(
                "mask",
                format!("mask of {} values for tensor of {}", mask.len(), self.value(input).len()),
            ));
        }
        self.apply_mask("mask", input, mask)
    }

    fn apply_mask(&mut self, name: &'static str, input: Var, mask: Vec<f64>) -> Result<Var> {
        let x = self.value(input);
        let data = x.data().iter().zip(&mask).map(|(a, m)| a * m).collect();
        let value = Tensor::new(x.shape().to_vec(), data)?;
        self.push(name, value, Op::Mask { input, mask }, &[input])
    }

    /// Mean over samples of `sqrt(sum_j x_ij^2 + eps)`.
    pub fn row_norm_mean(&mut self, input: Var, eps: f64) -> Result<Var> {
        let x = self.value(input);
        let n = x.shape()[0];
        let d = x.len() / n;
        let norms: Vec<f64> = x
            .data()
            .chunks_exact(d)
            .map(|row| (row.iter().map(|v| v * v).sum::<f64>() + eps).sqrt())
            .collect();
        let mean = norms.iter().sum::<f64>() / n as f64;
        self.push("row_norm_mean", Tensor::scalar(mean), Op::RowNormMean { input, norms }, &[input])
    }

    /// Mean over samples of `sum_j x_ij^2`.
    pub fn row_squared_norm_mean(&mut self, input: Var) -> Result<Var> {
        let x = self.value(input);
        let n = x.shape()[0];
        let total = x.data().iter().map(|v| v * v).sum::<f64>() / n as f64;
        self.push(
            "row_squared_norm_mean",
            Tensor::scalar(total),
            Op::RowSquaredNormMean { input },
            &[input],
        )
    }

    /// `0.5 * sum(x^2)`.
    pub fn half_sum_squares(&mut self, input: Var) -> Result<Var> {
        let total = 0.5 * self.value(input).data().iter().map(|v| v * v).sum::<f64>();
        self.push("half_sum_squares", Tensor::scalar(total), Op::HalfSumSquares { input }, &[input])
    }

    pub fn sum(&mut self, input: Var) -> Result<Var> {
        let total = self.value(input).data().iter().sum::<f64>();
        self.push("sum", Tensor::scalar(total), Op::Sum { input }, &[input])
    }

    pub fn square(&mut self, input: Var) -> Result<Var> {
        let x = self.value(input);
        let value = Tensor::new(x.shape().to_vec(), x.data().iter().map(|v| v * v).collect())?;
        self.push("square", value, Op::Square { input }, &[input])
    }

    pub fn add(&mut self, lhs: Var, rhs: Var) -> Result<Var> {
        let (a, b) = (self.value(lhs), self.value(rhs));
        if a.shape() != b.shape() {
            return Err(Error::shape("add", format!("{:?} vs {:?}", a.shape(), b.shape())));
        }
        let data = a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect();
        let value = Tensor::new(a.shape().to_vec(), data)?;
        self.push("add", value, Op::Add { lhs, rhs }, &[lhs, rhs])
    }

    pub fn scale(&mut self, input: Var, factor: f64) -> Result<Var> {
        let x = self.value(input);
        let value = Tensor::new(x.shape().to_vec(), x.data().iter().map(|v| v * factor).collect())?;
        self.push("scale", value, Op::Scale { input, factor }, &[input])
    }

    /// Hash of every piecewise-linear branch decision on the tape (relu signs,
    /// maxpool winners). Two forward passes with equal signatures lie on the
    /// same smooth piece of the network function.
    pub fn kink_signature(&self) -> u64 {
        let mut h = DefaultHasher::new();
        for node in &self.nodes {
            match &node.op {
                Op::Relu { input } => {
                    for &v in self.nodes[input.0].value.data() {
                        (v > 0.0).hash(&mut h);
                    }
                }
                Op::MaxPool2 { argmax, .. } => argmax.hash(&mut h),
                _ => {}
            }
        }
        h.finish()
    }

    /// Reverse sweep from a scalar `loss`. Consumes the tape.
    pub fn backward(self, loss: Var) -> Result<Gradients> {
        let loss_shape = self.shape(loss).to_vec();
        if self.value(loss).len() != 1 {
            return Err(Error::NonScalarLoss(loss_shape));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[loss.0].requires_grad {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            let needs = |v: &Var| self.nodes[v.0].requires_grad;
            match &node.op {
                Op::Leaf => {
                    grads[idx] = Some(g);
                    continue;
                }
                Op::Conv2d {
                    input,
                    weight,
                    bias,
                    geometry,
                    cols,
                } => {
                    let cg = kernels::conv2d_backward(
                        &g,
                        cols,
                        self.value(*weight).data(),
                        geometry,
                        needs(input),
                    );
                    if let Some(gi) = cg.input {
                        accumulate(&mut grads, *input, gi);
                    }
                    if needs(weight) {
                        accumulate(&mut grads, *weight, cg.weight);
                    }
                    if needs(bias) {
                        accumulate(&mut grads, *bias, cg.bias);
                    }
                }
                Op::MaxPool2 { input, argmax } => {
                    let gi = kernels::maxpool2_backward(&g, argmax, self.value(*input).len());
                    accumulate(&mut grads, *input, gi);
                }
                Op::Relu { input } => {
                    let x = self.value(*input).data();
                    let gi = g.iter().zip(x).map(|(&gv, &xv)| if xv > 0.0 { gv } else { 0.0 }).collect();
                    accumulate(&mut grads, *input, gi);
                }
                Op::Reshape { input } => accumulate(&mut grads, *input, g),
                Op::Linear { input, weight, bias } => {
                    let xs = self.shape(*input);
                    let (n, d) = (xs[0], xs[1]);
                    let m = self.shape(*weight)[1];
                    let lg = kernels::linear_backward(
                        &g,
                        self.value(*input).data(),
                        self.value(*weight).data(),
                        n,
                        d,
                        m,
                        needs(input),
                    );
                    if let Some(gi) = lg.input {
                        accumulate(&mut grads, *input, gi);
                    }
                    if needs(weight) {
                        accumulate(&mut grads, *weight, lg.weight);
                    }
                    if needs(bias) {
                        accumulate(&mut grads, *bias, lg.bias);
                    }
                }
                Op::SoftmaxCrossEntropy { logits, labels, probs } => {
                    let k = self.shape(*logits)[1];
                    let n = labels.len() as f64;
                    let scale = g[0] / n;
                    let mut gi: Vec<f64> = probs.iter().map(|p| p * scale).collect();
                    for (i, &l) in labels.iter().enumerate() {
                        gi[i * k + l] -= scale;
                    }
                    accumulate(&mut grads, *logits, gi);
                }
                Op::BatchNorm {
                    input,
                    gamma,
                    beta,
                    x_hat,
                    inv_std,
                    batch_stats,
                } => {
                    let xs = self.shape(*input);
                    let (n, c) = (xs[0], xs[1]);
                    let p: usize = xs[2..].iter().product();
                    let gamma_v = self.value(*gamma).data();
                    let mut dgamma = vec![0.0; c];
                    let mut dbeta = vec![0.0; c];
                    for i in 0..n {
                        for ch in 0..c {
                            let off = (i * c + ch) * p;
                            for j in off..off + p {
                                dgamma[ch] += g[j] * x_hat[j];
                                dbeta[ch] += g[j];
                            }
                        }
                    }
                    if needs(input) {
                        let mut gi = vec![0.0; g.len()];
                        let m = (n * p) as f64;
                        for i in 0..n {
                            for ch in 0..c {
                                let off = (i * c + ch) * p;
                                let k = gamma_v[ch] * inv_std[ch];
                                for j in off..off + p {
                                    gi[j] = if *batch_stats {
                                        // d x_hat = g * gamma; sums over the channel are dbeta, dgamma.
                                        k * (g[j] - dbeta[ch] / m - x_hat[j] * dgamma[ch] / m)
                                    } else {
                                        k * g[j]
                                    };
                                }
                            }
                        }
                        accumulate(&mut grads, *input, gi);
                    }
                    if needs(gamma) {
                        accumulate(&mut grads, *gamma, dgamma);
                    }
                    if needs(beta) {
                        accumulate(&mut grads, *beta, dbeta);
                    }
                }
                Op::Mask { input, mask } => {
                    let gi = g.iter().zip(mask).map(|(a, m)| a * m).collect();
                    accumulate(&mut grads, *input, gi);
                }
                Op::RowNormMean { input, norms } => {
                    let x = self.value(*input).data();
                    let n = norms.len();
                    let d = x.len() / n;
                    let mut gi = vec![0.0; x.len()];
                    for (i, &norm) in norms.iter().enumerate() {
                        let s = g[0] / (n as f64 * norm);
                        for j in i * d..(i + 1) * d {
                            gi[j] = s * x[j];
                        }
                    }
                    accumulate(&mut grads, *input, gi);
                }
                Op::RowSquaredNormMean { input } => {
                    let x = self.value(*input);
                    let s = 2.0 * g[0] / x.shape()[0] as f64;
                    let gi = x.data().iter().map(|v| s * v).collect();
                    accumulate(&mut grads, *input, gi);
                }
                Op::HalfSumSquares { input } => {
                    let gi = self.value(*input).data().iter().map(|v| g[0] * v).collect();
                    accumulate(&mut grads, *input, gi);
                }
                Op::Sum { input } => {
                    let gi = vec![g[0]; self.value(*input).len()];
                    accumulate(&mut grads, *input, gi);
                }
                Op::Square { input } => {
                    let x = self.value(*input).data();
                    let gi = g.iter().zip(x).map(|(a, v)| 2.0 * a * v).collect();
                    accumulate(&mut grads, *input, gi);
                }
                Op::Add { lhs, rhs } => {
                    if needs(rhs) {
                        accumulate(&mut grads, *rhs, g.clone());
                    }
                    if needs(lhs) {
                        accumulate(&mut grads, *lhs, g);
                    }
                }
                Op::Scale { input, factor } => {
                    let gi = g.iter().map(|a| a * factor).collect();
                    accumulate(&mut grads, *input, gi);
                }
            }
        }

        // Only leaves keep their gradient; interior buffers were consumed above.
        Ok(Gradients { grads })
    }
}

fn strip_cache(op: Op) -> Op {
    match op {
        Op::Conv2d {
            input,
            weight,
            bias,
            geometry,
            ..
        } => Op::Conv2d {
            input,
            weight,
            bias,
            geometry,
            cols: Vec::new(),
        },
        Op::BatchNorm {
            input,
            gamma,
            beta,
            batch_stats,
            ..
        } => Op::BatchNorm {
            input,
            gamma,
            beta,
            x_hat: Vec::new(),
            inv_std: Vec::new(),
            batch_stats,
        },
        Op::SoftmaxCrossEntropy { logits, labels, .. } => Op::SoftmaxCrossEntropy {
            logits,
            labels,
            probs: Vec::new(),
        },
        other => other,
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], var: Var, g: Vec<f64>) {
    match &mut grads[var.0] {
        Some(existing) => existing.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
        slot @ None => *slot = Some(g),
    }
}

/// Gradients of leaves with respect to the loss passed to [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// `None` when `var` did not require a gradient or does not reach the loss.
    pub fn get(&self, var: Var) -> Option<&[f64]> {
        self.grads.get(var.0).and_then(|g| g.as_deref())
    }
}
