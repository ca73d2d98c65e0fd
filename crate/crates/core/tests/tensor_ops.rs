use al2lab::{Tape, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

// Direct quadruple loop, stride 1, no padding.
fn conv_oracle(x: &Tensor, w: &Tensor, b: &Tensor) -> Vec<f64> {
    let (n, c, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (co, k) = (w.shape()[0], w.shape()[2]);
    let (oh, ow) = (h - k + 1, wd - k + 1);
    let xd = |i: usize, ch: usize, r: usize, col: usize| x.data()[((i * c + ch) * h + r) * wd + col];
    let wv = |o: usize, ch: usize, r: usize, col: usize| w.data()[((o * c + ch) * k + r) * k + col];
    let mut out = vec![0.0; n * co * oh * ow];
    for i in 0..n {
        for o in 0..co {
            for r in 0..oh {
                for col in 0..ow {
                    let mut acc = b.data()[o];
                    for ch in 0..c {
                        for kr in 0..k {
                            for kc in 0..k {
                                acc += xd(i, ch, r + kr, col + kc) * wv(o, ch, kr, kc);
                            }
                        }
                    }
                    out[((i * co + o) * oh + r) * ow + col] = acc;
                }
            }
        }
    }
    out
}

fn conv_value(x: &Tensor, w: &Tensor, b: &Tensor) -> Tensor {
    let mut tape = Tape::inference();
    let (xv, wv, bv) = (tape.leaf(x.clone(), false), tape.leaf(w.clone(), false), tape.leaf(b.clone(), false));
    let y = tape.conv2d(xv, wv, bv, 1, 0).unwrap();
    tape.value(y).clone()
}

#[test]
fn conv_matches_loop_oracle() {
    let x = random(&[1, 2, 5, 5], 1);
    let w = random(&[3, 2, 3, 3], 2);
    let b = random(&[3], 3);
    let y = conv_value(&x, &w, &b);
    assert_eq!(y.shape(), &[1, 3, 3, 3]);
    for (a, e) in y.data().iter().zip(conv_oracle(&x, &w, &b)) {
        assert!((a - e).abs() < 1e-12, "{a} vs {e}");
    }

    let x = random(&[2, 3, 9, 7], 4);
    let w = random(&[4, 3, 5, 5], 5);
    let b = random(&[4], 6);
    let y = conv_value(&x, &w, &b);
    for (a, e) in y.data().iter().zip(conv_oracle(&x, &w, &b)) {
        assert!((a - e).abs() < 1e-12);
    }
}

#[test]
fn conv_trivial_kernels() {
    let x = random(&[2, 1, 4, 4], 7);
    // 1x1 identity kernel with zero bias reproduces the input.
    let y = conv_value(&x, &Tensor::full(&[1, 1, 1, 1], 1.0), &Tensor::zeros(&[1]));
    assert_eq!(y.data(), x.data());
    // All-ones 2x2 kernel sums each window.
    let y = conv_value(&x, &Tensor::full(&[1, 1, 2, 2], 1.0), &Tensor::full(&[1], 0.5));
    let at = |i: usize, r: usize, c: usize| x.data()[i * 16 + r * 4 + c];
    for i in 0..2 {
        for r in 0..3 {
            for c in 0..3 {
                let e = at(i, r, c) + at(i, r + 1, c) + at(i, r, c + 1) + at(i, r + 1, c + 1) + 0.5;
                assert!((y.data()[i * 9 + r * 3 + c] - e).abs() < 1e-14);
            }
        }
    }
}

#[test]
fn conv_rejects_channel_mismatch() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::zeros(&[1, 2, 5, 5]), false);
    let w = tape.leaf(Tensor::zeros(&[3, 1, 3, 3]), true);
    let b = tape.leaf(Tensor::zeros(&[3]), true);
    let err = tape.conv2d(x, w, b, 1, 0).unwrap_err().to_string();
    assert!(err.contains("C_in"), "{err}");
}

#[test]
fn maxpool_matches_loop_oracle() {
    let x = random(&[2, 3, 8, 8], 11);
    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone(), true);
    let y = tape.maxpool2(xv).unwrap();
    assert_eq!(tape.value(y).shape(), &[2, 3, 4, 4]);
    let got = tape.value(y).data().to_vec();
    for plane in 0..6 {
        for r in 0..4 {
            for c in 0..4 {
                let base = plane * 64;
                let e = [(0, 0), (0, 1), (1, 0), (1, 1)]
                    .iter()
                    .map(|(dr, dc)| x.data()[base + (2 * r + dr) * 8 + 2 * c + dc])
                    .fold(f64::NEG_INFINITY, f64::max);
                assert_eq!(got[plane * 16 + r * 4 + c], e);
            }
        }
    }
    let s = tape.sum(y).unwrap();
    let g = tape.backward(s).unwrap();
    let gx = g.get(xv).unwrap();
    // Exactly one unit gradient per window.
    assert_eq!(gx.iter().filter(|&&v| v == 1.0).count(), 2 * 3 * 16);
    assert_eq!(gx.iter().filter(|&&v| v == 0.0).count(), 2 * 3 * 64 - 2 * 3 * 16);
}

#[test]
fn maxpool_tie_routes_to_one_input() {
    let mut tape = Tape::new();
    let xv = tape.leaf(Tensor::full(&[1, 1, 2, 2], 3.0), true);
    let y = tape.maxpool2(xv).unwrap();
    assert_eq!(tape.value(y).data(), &[3.0]);
    let s = tape.sum(y).unwrap();
    let g = tape.backward(s).unwrap();
    let gx = g.get(xv).unwrap();
    assert_eq!(gx.iter().sum::<f64>(), 1.0);
    assert_eq!(gx.iter().filter(|&&v| v == 1.0).count(), 1);
}

#[test]
fn relu_forward_and_backward() {
    let mut tape = Tape::new();
    let xv = tape.leaf(Tensor::new(vec![4], vec![-2.0, -0.5, 0.5, 3.0]).unwrap(), true);
    let y = tape.relu(xv).unwrap();
    assert_eq!(tape.value(y).data(), &[0.0, 0.0, 0.5, 3.0]);
    let s = tape.sum(y).unwrap();
    let g = tape.backward(s).unwrap();
    assert_eq!(g.get(xv).unwrap(), &[0.0, 0.0, 1.0, 1.0]);
}

#[test]
fn linear_identity_and_matmul_oracle() {
    let x = random(&[3, 4], 21);
    let mut eye = vec![0.0; 16];
    for i in 0..4 {
        eye[i * 5] = 1.0;
    }
    let mut tape = Tape::inference();
    let xv = tape.leaf(x.clone(), false);
    let wv = tape.leaf(Tensor::new(vec![4, 4], eye).unwrap(), false);
    let bv = tape.leaf(Tensor::zeros(&[4]), false);
    let y = tape.linear(xv, wv, bv).unwrap();
    assert_eq!(tape.value(y).data(), x.data());

    let w = random(&[4, 5], 22);
    let b = random(&[5], 23);
    let wv = tape.leaf(w.clone(), false);
    let bv = tape.leaf(b.clone(), false);
    let y = tape.linear(xv, wv, bv).unwrap();
    for i in 0..3 {
        for j in 0..5 {
            let e: f64 = b.data()[j] + (0..4).map(|k| x.data()[i * 4 + k] * w.data()[k * 5 + j]).sum::<f64>();
            assert!((tape.value(y).data()[i * 5 + j] - e).abs() < 1e-14);
        }
    }
}

fn ce(logits: Tensor, labels: &[usize]) -> f64 {
    let mut tape = Tape::inference();
    let l = tape.leaf(logits, false);
    let loss = tape.softmax_cross_entropy(l, labels).unwrap();
    tape.value(loss).item()
}

#[test]
fn cross_entropy_values() {
    assert!((ce(Tensor::zeros(&[2, 10]), &[3, 7]) - 10f64.ln()).abs() < 1e-12);

    let mut big = vec![0.0; 10];
    big[4] = 1000.0;
    let loss = ce(Tensor::new(vec![1, 10], big.clone()).unwrap(), &[4]);
    assert!(loss.is_finite() && loss.abs() < 1e-12);
    let loss = ce(Tensor::new(vec![1, 10], big).unwrap(), &[0]);
    assert!((loss - 1000.0).abs() < 1e-9);

    let logits = random(&[5, 10], 31);
    let labels = [0, 9, 3, 3, 6];
    let direct: f64 = logits
        .data()
        .chunks(10)
        .zip(labels)
        .map(|(row, y)| row.iter().map(|v| v.exp()).sum::<f64>().ln() - row[y])
        .sum::<f64>()
        / 5.0;
    assert!((ce(logits, &labels) - direct).abs() < 1e-12);
}

#[test]
fn cross_entropy_gradient_is_softmax_minus_onehot() {
    let logits = random(&[3, 10], 32);
    let labels = [1, 2, 8];
    let mut tape = Tape::new();
    let l = tape.leaf(logits.clone(), true);
    let loss = tape.softmax_cross_entropy(l, &labels).unwrap();
    let g = tape.backward(loss).unwrap();
    let gl = g.get(l).unwrap();
    for (i, row) in logits.data().chunks(10).enumerate() {
        let z: f64 = row.iter().map(|v| v.exp()).sum();
        for j in 0..10 {
            let e = (row[j].exp() / z - if j == labels[i] { 1.0 } else { 0.0 }) / 3.0;
            assert!((gl[i * 10 + j] - e).abs() < 1e-14);
        }
    }
}

#[test]
fn backward_of_sum_and_sum_of_squares() {
    let x = random(&[2, 3], 41);
    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone(), true);
    let s = tape.sum(xv).unwrap();
    assert_eq!(tape.backward(s).unwrap().get(xv).unwrap(), &[1.0; 6]);

    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone(), true);
    let sq = tape.square(xv).unwrap();
    let s = tape.sum(sq).unwrap();
    let g = tape.backward(s).unwrap();
    for (gi, xi) in g.get(xv).unwrap().iter().zip(x.data()) {
        assert_eq!(*gi, 2.0 * xi);
    }
}

#[test]
fn backward_rejects_non_scalar_loss() {
    let mut tape = Tape::new();
    let xv = tape.leaf(Tensor::zeros(&[2]), true);
    let y = tape.relu(xv).unwrap();
    assert!(tape.backward(y).is_err());
}

fn small_net_grads(x: &Tensor, w: &Tensor, b: &Tensor, scale: f64) -> Vec<f64> {
    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone(), false);
    let wv = tape.leaf(w.clone(), true);
    let bv = tape.leaf(b.clone(), true);
    let c = tape.conv2d(xv, wv, bv, 1, 0).unwrap();
    let r = tape.relu(c).unwrap();
    let p = tape.maxpool2(r).unwrap();
    let f = tape.flatten(p).unwrap();
    let s = tape.sum(f).unwrap();
    let sq = tape.square(f).unwrap();
    let q = tape.sum(sq).unwrap();
    let q = tape.scale(q, 0.25).unwrap();
    let loss = tape.add(s, q).unwrap();
    let loss = tape.scale(loss, scale).unwrap();
    let g = tape.backward(loss).unwrap();
    let mut out = g.get(wv).unwrap().to_vec();
    out.extend_from_slice(g.get(bv).unwrap());
    out
}

#[test]
fn backward_is_linear_in_the_loss() {
    let x = random(&[2, 2, 6, 6], 51);
    let w = random(&[3, 2, 3, 3], 52);
    let b = random(&[3], 53);
    let g1 = small_net_grads(&x, &w, &b, 1.0);
    let g3 = small_net_grads(&x, &w, &b, -2.5);
    for (a, c) in g1.iter().zip(&g3) {
        assert!((-2.5 * a - c).abs() < 1e-12);
    }
}

#[test]
fn forward_and_backward_are_deterministic() {
    let x = random(&[2, 2, 6, 6], 61);
    let w = random(&[3, 2, 3, 3], 62);
    let b = random(&[3], 63);
    let a = small_net_grads(&x, &w, &b, 1.0);
    let c = small_net_grads(&x, &w, &b, 1.0);
    assert_eq!(a.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), c.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
}

#[test]
fn non_finite_values_are_reported() {
    let mut tape = Tape::new();
    let xv = tape.leaf(Tensor::full(&[2], 1e300), true);
    let err = tape.square(xv).unwrap_err();
    assert!(matches!(err, al2lab::Error::NonFinite { .. }), "{err}");
}

#[test]
fn batch_norm_train_normalizes_channels() {
    let x = random(&[4, 3, 2, 2], 71);
    let mut tape = Tape::new();
    let xv = tape.leaf(x, true);
    let g = tape.leaf(Tensor::full(&[3], 1.0), true);
    let b = tape.leaf(Tensor::zeros(&[3]), true);
    let (y, stats) = tape.batch_norm_train(xv, g, b, 1e-5).unwrap();
    assert_eq!(stats.count, 16);
    let yd = tape.value(y).data();
    for c in 0..3 {
        let vals: Vec<f64> = (0..4).flat_map(|n| (0..4).map(move |p| (n, p))).map(|(n, p)| yd[(n * 3 + c) * 4 + p]).collect();
        let mean = vals.iter().sum::<f64>() / 16.0;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 16.0;
        assert!(mean.abs() < 1e-12);
        assert!((var - 1.0).abs() < 1e-3);
    }
}

// Composite scalar function of a single leaf, built from a sequence of op codes.
fn composite(ops: &[u8], x: &Tensor) -> (f64, Vec<f64>, u64) {
    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone(), true);
    let mut v = xv;
    for &op in ops {
        v = match op % 4 {
            0 => tape.relu(v).unwrap(),
            1 => tape.scale(v, 0.7).unwrap(),
            2 => {
                let sq = tape.square(v).unwrap();
                tape.add(v, sq).unwrap()
            }
            _ => tape.maxpool2(v).unwrap(),
        };
    }
    let f = tape.flatten(v).unwrap();
    let lr = tape.row_norm_mean(f, 1e-12).unwrap();
    let s = tape.sum(f).unwrap();
    let loss = tape.add(lr, s).unwrap();
    let value = tape.value(loss).item();
    let sig = tape.kink_signature();
    let g = tape.backward(loss).unwrap().get(xv).unwrap().to_vec();
    (value, g, sig)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn composite_gradients_match_finite_differences(
        ops in proptest::collection::vec(0u8..4, 1..5),
        seed in 0u64..1000,
    ) {
        // Keep at most two pools so the spatial side stays >= 1.
        let mut pools = 0;
        let ops: Vec<u8> = ops.into_iter().filter(|&o| if o % 4 == 3 { pools += 1; pools <= 2 } else { true }).collect();
        let x = random(&[2, 2, 4, 4], seed);
        let (_, grad, sig) = composite(&ops, &x);
        let h = 1e-6;
        for i in (0..x.len()).step_by(5) {
            let mut plus = x.clone();
            plus.data_mut()[i] += h;
            let mut minus = x.clone();
            minus.data_mut()[i] -= h;
            let (fp, _, sp) = composite(&ops, &plus);
            let (fm, _, sm) = composite(&ops, &minus);
            if sp != sig || sm != sig {
                continue;
            }
            let numeric = (fp - fm) / (2.0 * h);
            let err = (grad[i] - numeric).abs() / grad[i].abs().max(numeric.abs()).max(1e-6);
            prop_assert!(err < 1e-5, "coord {} analytic {} numeric {}", i, grad[i], numeric);
        }
    }
}
