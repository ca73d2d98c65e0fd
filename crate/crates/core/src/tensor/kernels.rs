//! Forward and backward kernels over raw row-major buffers.
//!
//! Shapes are validated by the tape before these are called.

use super::gemm::{matmul, MatRef};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeometry {
    pub fn out_height(&self) -> usize {
        (self.height + 2 * self.padding - self.kernel) / self.stride + 1
    }

    pub fn out_width(&self) -> usize {
        (self.width + 2 * self.padding - self.kernel) / self.stride + 1
    }

    fn patch_len(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    fn positions(&self) -> usize {
        self.out_height() * self.out_width()
    }
}

/// Unfolds `input` into a `[C*k*k, N*H'*W']` matrix.
pub fn im2col(input: &[f64], g: &ConvGeometry) -> Vec<f64> {
    let (ho, wo) = (g.out_height(), g.out_width());
    let p = ho * wo;
    let cols_n = g.batch * p;
    let k = g.kernel;
    let mut cols = vec![0.0; g.patch_len() * cols_n];
    for c in 0..g.in_channels {
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let row_buf = &mut cols[row * cols_n..(row + 1) * cols_n];
                for n in 0..g.batch {
                    let plane = &input[(n * g.in_channels + c) * g.height * g.width..][..g.height * g.width];
                    for oh in 0..ho {
                        let ih = (oh * g.stride + ki) as isize - g.padding as isize;
                        let dst = &mut row_buf[n * p + oh * wo..n * p + (oh + 1) * wo];
                        if ih < 0 || ih >= g.height as isize {
                            continue;
                        }
                        let src_row = &plane[ih as usize * g.width..(ih as usize + 1) * g.width];
                        if g.stride == 1 && g.padding == 0 {
                            dst.copy_from_slice(&src_row[kj..kj + wo]);
                        } else {
                            for (ow, d) in dst.iter_mut().enumerate() {
                                let iw = (ow * g.stride + kj) as isize - g.padding as isize;
                                if iw >= 0 && iw < g.width as isize {
                                    *d = src_row[iw as usize];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Folds a `[C*k*k, N*H'*W']` gradient back onto the input layout.
pub fn col2im(cols: &[f64], g: &ConvGeometry) -> Vec<f64> {
    let (ho, wo) = (g.out_height(), g.out_width());
    let p = ho * wo;
    let cols_n = g.batch * p;
    let k = g.kernel;
    let mut input = vec![0.0; g.batch * g.in_channels * g.height * g.width];
    for c in 0..g.in_channels {
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let row_buf = &cols[row * cols_n..(row + 1) * cols_n];
                for n in 0..g.batch {
                    let base = (n * g.in_channels + c) * g.height * g.width;
                    for oh in 0..ho {
                        let ih = (oh * g.stride + ki) as isize - g.padding as isize;
                        if ih < 0 || ih >= g.height as isize {
                            continue;
                        }
                        let src = &row_buf[n * p + oh * wo..n * p + (oh + 1) * wo];
                        let dst_row = &mut input[base + ih as usize * g.width..][..g.width];
                        for (ow, &v) in src.iter().enumerate() {
                            let iw = (ow * g.stride + kj) as isize - g.padding as isize;
                            if iw >= 0 && iw < g.width as isize {
                                dst_row[iw as usize] += v;
                            }
                        }
                    }
                }
            }
        }
    }
    input
}

/// Returns the `[N, O, H', W']` output and the unfolded input (kept for backward).
pub fn conv2d_forward(input: &[f64], weight: &[f64], bias: &[f64], g: &ConvGeometry) -> (Vec<f64>, Vec<f64>) {
    let cols = im2col(input, g);
    let p = g.positions();
    let cols_n = g.batch * p;
    let mut out2 = vec![0.0; g.out_channels * cols_n];
    matmul(
        MatRef::new(weight, g.out_channels, g.patch_len()),
        MatRef::new(&cols, g.patch_len(), cols_n),
        &mut out2,
        0.0,
    );
    let mut out = vec![0.0; g.batch * g.out_channels * p];
    for o in 0..g.out_channels {
        let b = bias[o];
        for n in 0..g.batch {
            let src = &out2[o * cols_n + n * p..o * cols_n + (n + 1) * p];
            let dst = &mut out[(n * g.out_channels + o) * p..][..p];
            for (d, &s) in dst.iter_mut().zip(src) {
                *d = s + b;
            }
        }
    }
    (out, cols)
}

pub struct ConvGrads {
    pub input: Option<Vec<f64>>,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

pub fn conv2d_backward(
    grad_out: &[f64],
    cols: &[f64],
    weight: &[f64],
    g: &ConvGeometry,
    need_input: bool,
) -> ConvGrads {
    let p = g.positions();
    let cols_n = g.batch * p;
    let mut dout2 = vec![0.0; g.out_channels * cols_n];
    let mut bias = vec![0.0; g.out_channels];
    for n in 0..g.batch {
        for o in 0..g.out_channels {
            let src = &grad_out[(n * g.out_channels + o) * p..][..p];
            dout2[o * cols_n + n * p..o * cols_n + (n + 1) * p].copy_from_slice(src);
            bias[o] += src.iter().sum::<f64>();
        }
    }
    let mut dweight = vec![0.0; g.out_channels * g.patch_len()];
    matmul(
        MatRef::new(&dout2, g.out_channels, cols_n),
        MatRef::new(cols, g.patch_len(), cols_n).t(),
        &mut dweight,
        0.0,
    );
    let input = need_input.then(|| {
        let mut dcols = vec![0.0; g.patch_len() * cols_n];
        matmul(
            MatRef::new(weight, g.out_channels, g.patch_len()).t(),
            MatRef::new(&dout2, g.out_channels, cols_n),
            &mut dcols,
            0.0,
        );
        col2im(&dcols, g)
    });
    ConvGrads {
        input,
        weight: dweight,
        bias,
    }
}

/// 2x2/2 max pooling over `[planes, h, w]`. Ties go to the first cell in
/// row-major scan order. Returns the output and the flat input index of each
/// window's winner.
pub fn maxpool2_forward(input: &[f64], planes: usize, h: usize, w: usize) -> (Vec<f64>, Vec<usize>) {
    let (ho, wo) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(planes * ho * wo);
    let mut argmax = Vec::with_capacity(planes * ho * wo);
    for pl in 0..planes {
        let base = pl * h * w;
        for oh in 0..ho {
            for ow in 0..wo {
                let top = base + 2 * oh * w + 2 * ow;
                let window = [top, top + 1, top + w, top + w + 1];
                let mut best = window[0];
                for &idx in &window[1..] {
                    if input[idx] > input[best] {
                        best = idx;
                    }
                }
                out.push(input[best]);
                argmax.push(best);
            }
        }
    }
    (out, argmax)
}

pub fn maxpool2_backward(grad_out: &[f64], argmax: &[usize], input_len: usize) -> Vec<f64> {
    let mut grad = vec![0.0; input_len];
    for (&g, &idx) in grad_out.iter().zip(argmax) {
        grad[idx] += g;
    }
    grad
}

/// `[N, D] · [D, M] + bias`.
pub fn linear_forward(input: &[f64], weight: &[f64], bias: &[f64], n: usize, d: usize, m: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(n * m);
    for _ in 0..n {
        out.extend_from_slice(bias);
    }
    matmul(MatRef::new(input, n, d), MatRef::new(weight, d, m), &mut out, 1.0);
    out
}

pub struct LinearGrads {
    pub input: Option<Vec<f64>>,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

pub fn linear_backward(
    grad_out: &[f64],
    input: &[f64],
    weight: &[f64],
    n: usize,
    d: usize,
    m: usize,
    need_input: bool,
) -> LinearGrads {
    let mut dweight = vec![0.0; d * m];
    matmul(MatRef::new(input, n, d).t(), MatRef::new(grad_out, n, m), &mut dweight, 0.0);
    let mut dbias = vec![0.0; m];
    for row in grad_out.chunks_exact(m) {
        for (b, &g) in dbias.iter_mut().zip(row) {
            *b += g;
        }
    }
    let input = need_input.then(|| {
        let mut dinput = vec![0.0; n * d];
        matmul(MatRef::new(grad_out, n, m), MatRef::new(weight, d, m).t(), &mut dinput, 0.0);
        dinput
    });
    LinearGrads {
        input,
        weight: dweight,
        bias: dbias,
    }
}

/// Mean cross-entropy over rows of `[N, K]` logits. Returns the loss and the
/// row-wise softmax probabilities.
pub fn softmax_cross_entropy(logits: &[f64], labels: &[usize], k: usize) -> (f64, Vec<f64>) {
    let n = labels.len();
    let mut probs = vec![0.0; n * k];
    let mut total = 0.0;
    for (i, (row, &label)) in logits.chunks_exact(k).zip(labels).enumerate() {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let dst = &mut probs[i * k..(i + 1) * k];
        let mut sum = 0.0;
        for (p, &z) in dst.iter_mut().zip(row) {
            *p = (z - max).exp();
            sum += *p;
        }
        for p in dst.iter_mut() {
            *p /= sum;
        }
        total += sum.ln() - (row[label] - max);
    }
    (total / n as f64, probs)
}

/// Per-channel statistics over `[N, C, P]` (P = spatial positions).
pub fn channel_mean_var(input: &[f64], n: usize, c: usize, p: usize) -> (Vec<f64>, Vec<f64>) {
    let m = (n * p) as f64;
    let mut mean = vec![0.0; c];
    let mut var = vec![0.0; c];
    for ch in 0..c {
        let mut s = 0.0;
        for i in 0..n {
            s += input[(i * c + ch) * p..][..p].iter().sum::<f64>();
        }
        let mu = s / m;
        let mut v = 0.0;
        for i in 0..n {
            v += input[(i * c + ch) * p..][..p].iter().map(|x| (x - mu) * (x - mu)).sum::<f64>();
        }
        mean[ch] = mu;
        var[ch] = v / m;
    }
    (mean, var)
}

/// `y = gamma * (x - mean) * inv_std + beta` per channel. Returns `y` and `x_hat`.
#[allow(clippy::too_many_arguments)]
pub fn channel_affine(
    input: &[f64],
    mean: &[f64],
    inv_std: &[f64],
    gamma: &[f64],
    beta: &[f64],
    n: usize,
    c: usize,
    p: usize,
) -> (Vec<f64>, Vec<f64>) {
    let mut out = vec![0.0; input.len()];
    let mut x_hat = vec![0.0; input.len()];
    for i in 0..n {
        for ch in 0..c {
            let off = (i * c + ch) * p;
            for j in off..off + p {
                let h = (input[j] - mean[ch]) * inv_std[ch];
                x_hat[j] = h;
                out[j] = gamma[ch] * h + beta[ch];
            }
        }
    }
    (out, x_hat)
}
