//! Forward-path tests for the tensor primitives against independent oracles:
//! brute-force convolution/pooling, naive matrix products, and direct
//! statistic computation. Oracles here never call into the engine's kernels.

use fairsearch::tensor::{Conv2dSpec, PoolKind, Tape, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

/// Textbook seven-loop convolution used as the oracle.
#[allow(clippy::too_many_arguments)]
fn naive_conv2d(
    x: &Tensor<f64>,
    w: &Tensor<f64>,
    stride: usize,
    padding: usize,
    dilation: usize,
    groups: usize,
) -> Tensor<f64> {
    let [n, ic, h, wi] = [x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]];
    let [oc, icg, kh, kw] = [w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]];
    let oh = (h + 2 * padding - dilation * (kh - 1) - 1) / stride + 1;
    let ow = (wi + 2 * padding - dilation * (kw - 1) - 1) / stride + 1;
    let ocg = oc / groups;
    let mut out = vec![0.0; n * oc * oh * ow];
    for ni in 0..n {
        for oci in 0..oc {
            let g = oci / ocg;
            for ohi in 0..oh {
                for owi in 0..ow {
                    let mut acc = 0.0;
                    for icgi in 0..icg {
                        let ici = g * icg + icgi;
                        for khi in 0..kh {
                            for kwi in 0..kw {
                                let ih = ohi as isize * stride as isize
                                    + khi as isize * dilation as isize
                                    - padding as isize;
                                let iw = owi as isize * stride as isize
                                    + kwi as isize * dilation as isize
                                    - padding as isize;
                                if ih < 0 || ih >= h as isize || iw < 0 || iw >= wi as isize {
                                    continue;
                                }
                                let xv = x.data()
                                    [((ni * ic + ici) * h + ih as usize) * wi + iw as usize];
                                let wv = w.data()[((oci * icg + icgi) * kh + khi) * kw + kwi];
                                acc += xv * wv;
                            }
                        }
                    }
                    out[((ni * oc + oci) * oh + ohi) * ow + owi] = acc;
                }
            }
        }
    }
    Tensor::new(vec![n, oc, oh, ow], out).unwrap()
}

fn engine_conv2d(
    x: &Tensor<f64>,
    w: &Tensor<f64>,
    stride: usize,
    padding: usize,
    dilation: usize,
    groups: usize,
) -> Tensor<f64> {
    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone(), false);
    let wv = tape.leaf(w.clone(), false);
    let out = tape
        .conv2d(
            xv,
            wv,
            Conv2dSpec {
                stride,
                padding,
                dilation,
                groups,
            },
        )
        .unwrap();
    tape.value(out)
}

fn assert_close(a: &[f64], b: &[f64], tol: f64, what: &str) {
    assert_eq!(a.len(), b.len(), "{what}: length");
    for (i, (x, y)) in a.iter().zip(b.iter()).enumerate() {
        assert!(
            (x - y).abs() <= tol,
            "{what}[{i}]: {x} vs {y} (diff {})",
            (x - y).abs()
        );
    }
}

#[test]
fn conv_identity_kernel_returns_input() {
    let x = Tensor::<f64>::from_f64_slice(vec![1, 1, 3, 3], &[1., 2., 3., 4., 5., 6., 7., 8., 9.]).unwrap();
    let w = Tensor::from_f64_slice(vec![1, 1, 1, 1], &[1.0]).unwrap();
    let out = engine_conv2d(&x, &w, 1, 0, 1, 1);
    assert_eq!(out.data(), x.data());
    assert_eq!(out.shape(), x.shape());
}

#[test]
fn conv_all_ones_padded_matches_hand_unrolled_values() {
    let x = Tensor::<f64>::full(vec![1, 1, 3, 3], 1.0);
    let w = Tensor::<f64>::full(vec![1, 1, 3, 3], 1.0);
    let out = engine_conv2d(&x, &w, 1, 1, 1, 1);
    // Hand-unrolled dot products: corners see a 2x2 patch, the center 3x3.
    let expected = [4., 6., 4., 6., 9., 6., 4., 6., 4.];
    assert_close(out.data(), &expected, 0.0, "padded ones conv");
    let oracle = naive_conv2d(&x, &w, 1, 1, 1, 1);
    assert_close(out.data(), oracle.data(), 0.0, "vs oracle");
}

#[test]
fn dilated_conv_covers_the_dilated_footprint() {
    let mut rng = ChaCha20Rng::seed_from_u64(11);
    let x = Tensor::<f64>::randn(vec![1, 1, 5, 5], 1.0, &mut rng);
    let w = Tensor::<f64>::randn(vec![1, 1, 3, 3], 1.0, &mut rng);
    let out = engine_conv2d(&x, &w, 1, 0, 2, 1);
    assert_eq!(out.shape(), &[1, 1, 1, 1]);
    // Dot product over input positions (0,2,4) x (0,2,4).
    let mut acc = 0.0;
    for (ki, ih) in [0usize, 2, 4].iter().enumerate() {
        for (kj, iw) in [0usize, 2, 4].iter().enumerate() {
            acc += x.data()[ih * 5 + iw] * w.data()[ki * 3 + kj];
        }
    }
    assert!((out.data()[0] - acc).abs() < 1e-12);
}

#[test]
fn conv_matches_oracle_on_random_configs() {
    let mut rng = ChaCha20Rng::seed_from_u64(3);
    let cases = [
        // (n, ic, h, w, oc, k, stride, padding, dilation, groups)
        (2, 3, 7, 7, 4, 3, 1, 1, 1, 1),
        (1, 4, 8, 8, 4, 3, 2, 1, 1, 1),
        (2, 4, 6, 6, 4, 3, 1, 2, 2, 1),
        (1, 6, 5, 5, 6, 3, 1, 1, 1, 6), // depthwise
        (1, 4, 6, 6, 8, 5, 2, 2, 1, 2),
        (1, 2, 9, 9, 2, 5, 1, 4, 2, 1),
    ];
    for &(n, ic, h, w, oc, k, s, p, d, g) in &cases {
        let x = Tensor::<f64>::randn(vec![n, ic, h, w], 1.0, &mut rng);
        let wt = Tensor::<f64>::randn(vec![oc, ic / g, k, k], 1.0, &mut rng);
        let got = engine_conv2d(&x, &wt, s, p, d, g);
        let want = naive_conv2d(&x, &wt, s, p, d, g);
        assert_eq!(got.shape(), want.shape());
        assert_close(got.data(), want.data(), 1e-12, "conv vs oracle");
    }
}

#[test]
fn conv_rejects_group_mismatch_naming_dimension() {
    let x = Tensor::<f64>::zeros(vec![1, 3, 4, 4]);
    let w = Tensor::<f64>::zeros(vec![2, 1, 3, 3]);
    let mut tape = Tape::new();
    let xv = tape.leaf(x, false);
    let wv = tape.leaf(w, false);
    let err = tape
        .conv2d(
            xv,
            wv,
            Conv2dSpec {
                stride: 1,
                padding: 1,
                dilation: 1,
                groups: 2,
            },
        )
        .unwrap_err();
    assert!(err.to_string().contains("in_c=3"), "got: {err}");
}

#[test]
fn conv_rejects_too_small_output() {
    let x = Tensor::<f64>::zeros(vec![1, 1, 2, 2]);
    let w = Tensor::<f64>::zeros(vec![1, 1, 3, 3]);
    let mut tape = Tape::new();
    let xv = tape.leaf(x, false);
    let wv = tape.leaf(w, false);
    let err = tape.conv2d(xv, wv, Conv2dSpec::default()).unwrap_err();
    assert!(err.to_string().contains("kernel extent"), "got: {err}");
}

/// Brute-force pooling oracle with the fixed `k*k` divisor for avg.
fn naive_pool(
    x: &Tensor<f64>,
    kind: PoolKind,
    k: usize,
    stride: usize,
    padding: usize,
) -> Tensor<f64> {
    let [n, c, h, w] = [x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]];
    let oh = (h + 2 * padding - k) / stride + 1;
    let ow = (w + 2 * padding - k) / stride + 1;
    let mut out = vec![0.0; n * c * oh * ow];
    for nc in 0..n * c {
        for ohi in 0..oh {
            for owi in 0..ow {
                let mut mx = f64::NEG_INFINITY;
                let mut sum = 0.0;
                for khi in 0..k {
                    for kwi in 0..k {
                        let ih = ohi as isize * stride as isize + khi as isize - padding as isize;
                        let iw = owi as isize * stride as isize + kwi as isize - padding as isize;
                        if ih < 0 || ih >= h as isize || iw < 0 || iw >= w as isize {
                            continue;
                        }
                        let v = x.data()[nc * h * w + ih as usize * w + iw as usize];
                        sum += v;
                        if v > mx {
                            mx = v;
                        }
                    }
                }
                out[nc * oh * ow + ohi * ow + owi] = match kind {
                    PoolKind::Max => mx,
                    PoolKind::Avg => sum / (k * k) as f64,
                };
            }
        }
    }
    Tensor::new(vec![n, c, oh, ow], out).unwrap()
}

fn engine_pool(
    x: &Tensor<f64>,
    kind: PoolKind,
    k: usize,
    stride: usize,
    padding: usize,
) -> Tensor<f64> {
    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone(), false);
    let out = tape.pool2d(xv, kind, k, stride, padding).unwrap();
    tape.value(out)
}

#[test]
fn avg_pool_of_constant_is_constant_without_padding() {
    let x = Tensor::<f64>::full(vec![2, 3, 5, 5], 2.5);
    let out = engine_pool(&x, PoolKind::Avg, 3, 1, 0);
    for &v in out.data() {
        assert!((v - 2.5).abs() < 1e-15);
    }
}

#[test]
fn max_pool_window3_finds_global_max() {
    let x = Tensor::<f64>::from_f64_slice(vec![1, 1, 3, 3], &[1., 2., 3., 4., 5., 6., 7., 8., 9.]).unwrap();
    let out = engine_pool(&x, PoolKind::Max, 3, 1, 0);
    assert_eq!(out.shape(), &[1, 1, 1, 1]);
    assert_eq!(out.data()[0], 9.0);
}

#[test]
fn avg_pool_padded_uses_fixed_divisor_nine() {
    let x = Tensor::<f64>::from_f64_slice(vec![1, 1, 3, 3], &[1., 2., 3., 4., 5., 6., 7., 8., 9.]).unwrap();
    let out = engine_pool(&x, PoolKind::Avg, 3, 1, 1);
    // Center window sums the whole input: 45/9 = 5.
    assert!((out.data()[4] - 5.0).abs() < 1e-15);
    // Top-left window sees only (1,2,4,5); padded zeros count in the divisor.
    assert!((out.data()[0] - (1. + 2. + 4. + 5.) / 9.0).abs() < 1e-15);
    let oracle = naive_pool(&x, PoolKind::Avg, 3, 1, 1);
    assert_close(out.data(), oracle.data(), 1e-15, "avg pool vs oracle");
}

#[test]
fn pools_match_oracle_on_random_inputs() {
    let mut rng = ChaCha20Rng::seed_from_u64(5);
    for &(stride, padding) in &[(1usize, 0usize), (1, 1), (2, 1)] {
        let x = Tensor::<f64>::randn(vec![2, 3, 7, 7], 1.0, &mut rng);
        for kind in [PoolKind::Max, PoolKind::Avg] {
            let got = engine_pool(&x, kind, 3, stride, padding);
            let want = naive_pool(&x, kind, 3, stride, padding);
            assert_eq!(got.shape(), want.shape());
            assert_close(got.data(), want.data(), 1e-12, "pool vs oracle");
        }
    }
}

#[test]
fn pool_rejects_zero_stride() {
    let x = Tensor::<f64>::zeros(vec![1, 1, 4, 4]);
    let mut tape = Tape::new();
    let xv = tape.leaf(x, false);
    assert!(tape.pool2d(xv, PoolKind::Max, 3, 0, 1).is_err());
    assert!(tape.pool2d(xv, PoolKind::Max, 0, 1, 0).is_err());
}

#[test]
fn batch_norm_is_identity_on_standardized_input() {
    // Input already zero-mean unit-variance per channel.
    let vals = [-1.0, 1.0, -1.0, 1.0, -1.0, 1.0, -1.0, 1.0];
    let x = Tensor::from_f64_slice(vec![2, 1, 2, 2], &vals).unwrap();
    let gamma = Tensor::<f64>::full(vec![1], 1.0);
    let beta = Tensor::<f64>::full(vec![1], 0.0);
    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone(), false);
    let gv = tape.leaf(gamma, false);
    let bv = tape.leaf(beta, false);
    let out = tape.batch_norm(xv, gv, bv, 1e-12).unwrap();
    assert_close(tape.data(out), x.data(), 1e-6, "bn fixed point");
}

#[test]
fn batch_norm_zero_gamma_yields_beta() {
    let mut rng = ChaCha20Rng::seed_from_u64(9);
    let x = Tensor::<f64>::randn(vec![2, 3, 4, 4], 1.0, &mut rng);
    let gamma = Tensor::<f64>::full(vec![3], 0.0);
    let beta = Tensor::<f64>::from_f64_slice(vec![3], &[0.5, -1.0, 2.0]).unwrap();
    let mut tape = Tape::new();
    let xv = tape.leaf(x, false);
    let gv = tape.leaf(gamma, false);
    let bv = tape.leaf(beta, false);
    let out = tape.batch_norm(xv, gv, bv, 1e-5).unwrap();
    let data = tape.data(out);
    for ni in 0..2 {
        for (ci, &b) in [0.5, -1.0, 2.0].iter().enumerate() {
            for i in 0..16 {
                assert_eq!(data[(ni * 3 + ci) * 16 + i], b);
            }
        }
    }
}

#[test]
fn batch_norm_output_mean_is_numerically_zero() {
    let mut rng = ChaCha20Rng::seed_from_u64(13);
    let x = Tensor::<f64>::randn(vec![4, 2, 3, 3], 3.0, &mut rng).map(|v| v + 7.0);
    let gamma = Tensor::<f64>::full(vec![2], 1.0);
    let beta = Tensor::<f64>::full(vec![2], 0.0);
    let mut tape = Tape::new();
    let xv = tape.leaf(x, false);
    let gv = tape.leaf(gamma, false);
    let bv = tape.leaf(beta, false);
    let out = tape.batch_norm(xv, gv, bv, 1e-10).unwrap();
    let data = tape.data(out);
    // Direct statistic computation per channel.
    for ci in 0..2 {
        let mut mean = 0.0;
        for ni in 0..4 {
            for i in 0..9 {
                mean += data[(ni * 2 + ci) * 9 + i];
            }
        }
        mean /= 36.0;
        assert!(mean.abs() <= 1e-10, "channel {ci} mean {mean}");
    }
}

#[test]
fn linear_identity_weight_is_identity() {
    let x = Tensor::<f64>::from_f64_slice(vec![2, 3], &[1., 2., 3., 4., 5., 6.]).unwrap();
    let w = Tensor::<f64>::eye(3);
    let b = Tensor::<f64>::full(vec![3], 0.0);
    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone(), false);
    let wv = tape.leaf(w, false);
    let bv = tape.leaf(b, false);
    let out = tape.linear(xv, wv, Some(bv)).unwrap();
    assert_eq!(tape.data(out), x.data());
}

#[test]
fn linear_zero_input_returns_bias_rows() {
    let x = Tensor::<f64>::zeros(vec![3, 4]);
    let mut rng = ChaCha20Rng::seed_from_u64(17);
    let w = Tensor::<f64>::randn(vec![4, 2], 1.0, &mut rng);
    let b = Tensor::<f64>::from_f64_slice(vec![2], &[0.25, -0.75]).unwrap();
    let mut tape = Tape::new();
    let xv = tape.leaf(x, false);
    let wv = tape.leaf(w, false);
    let bv = tape.leaf(b, false);
    let out = tape.linear(xv, wv, Some(bv)).unwrap();
    for row in 0..3 {
        assert_eq!(&tape.data(out)[row * 2..row * 2 + 2], &[0.25, -0.75]);
    }
}

#[test]
fn linear_matches_naive_triple_loop() {
    let mut rng = ChaCha20Rng::seed_from_u64(19);
    let x = Tensor::<f64>::randn(vec![3, 4], 1.0, &mut rng);
    let w = Tensor::<f64>::randn(vec![4, 2], 1.0, &mut rng);
    let mut want = vec![0.0; 3 * 2];
    for n in 0..3 {
        for k in 0..2 {
            let mut acc = 0.0;
            for d in 0..4 {
                acc += x.data()[n * 4 + d] * w.data()[d * 2 + k];
            }
            want[n * 2 + k] = acc;
        }
    }
    let mut tape = Tape::new();
    let xv = tape.leaf(x, false);
    let wv = tape.leaf(w, false);
    let out = tape.linear(xv, wv, None).unwrap();
    assert_close(tape.data(out), &want, 1e-14, "linear vs naive matmul");
}

#[test]
fn linear_rejects_inner_dim_mismatch() {
    let x = Tensor::<f64>::zeros(vec![2, 3]);
    let w = Tensor::<f64>::zeros(vec![4, 2]);
    let mut tape = Tape::new();
    let xv = tape.leaf(x, false);
    let wv = tape.leaf(w, false);
    let err = tape.linear(xv, wv, None).unwrap_err();
    assert!(err.to_string().contains("inner dims"), "got: {err}");
}

#[test]
fn softmax_of_equal_logits_is_uniform() {
    let x = Tensor::<f64>::from_f64_slice(vec![1, 3], &[0.0, 0.0, 0.0]).unwrap();
    let mut tape = Tape::new();
    let xv = tape.leaf(x, false);
    let out = tape.softmax_lastdim(xv);
    for &v in tape.data(out) {
        assert!((v - 1.0 / 3.0).abs() < 1e-15);
    }
}

#[test]
fn softmax_is_shift_invariant_and_rows_sum_to_one() {
    let mut rng = ChaCha20Rng::seed_from_u64(23);
    let x = Tensor::<f64>::randn(vec![4, 8], 2.0, &mut rng);
    let shifted = x.map(|v| v + 123.456);
    let mut tape = Tape::new();
    let a = tape.leaf(x, false);
    let b = tape.leaf(shifted, false);
    let sa = tape.softmax_lastdim(a);
    let sb = tape.softmax_lastdim(b);
    assert_close(tape.data(sa), tape.data(sb), 1e-12, "shift invariance");
    for r in 0..4 {
        let sum: f64 = tape.data(sa)[r * 8..(r + 1) * 8].iter().sum();
        assert!((sum - 1.0).abs() <= 1e-12, "row {r} sums to {sum}");
    }
}

#[test]
fn sigmoid_at_zero_is_half() {
    let x = Tensor::<f64>::from_f64_slice(vec![1], &[0.0]).unwrap();
    let mut tape = Tape::new();
    let xv = tape.leaf(x, false);
    let out = tape.sigmoid(xv);
    assert_eq!(tape.data(out)[0], 0.5);
}

#[test]
fn relu_clamps_negatives() {
    let x = Tensor::<f64>::from_f64_slice(vec![4], &[-2.0, -0.5, 0.0, 3.0]).unwrap();
    let mut tape = Tape::new();
    let xv = tape.leaf(x, false);
    let out = tape.relu(xv);
    assert_eq!(tape.data(out), &[0.0, 0.0, 0.0, 3.0]);
}

#[test]
fn forward_is_deterministic_bitwise() {
    let mut rng = ChaCha20Rng::seed_from_u64(29);
    let x = Tensor::<f64>::randn(vec![2, 3, 6, 6], 1.0, &mut rng);
    let w = Tensor::<f64>::randn(vec![4, 3, 3, 3], 0.5, &mut rng);
    let a = engine_conv2d(&x, &w, 1, 1, 1, 1);
    let b = engine_conv2d(&x, &w, 1, 1, 1, 1);
    assert_eq!(a.data(), b.data());
}

#[test]
fn forward_outputs_stay_finite_on_finite_inputs() {
    let mut rng = ChaCha20Rng::seed_from_u64(31);
    let x = Tensor::<f64>::randn(vec![2, 2, 6, 6], 10.0, &mut rng);
    let w = Tensor::<f64>::randn(vec![2, 2, 3, 3], 10.0, &mut rng);
    let conv = engine_conv2d(&x, &w, 1, 1, 1, 1);
    conv.check_finite("conv output").unwrap();
    let pooled = engine_pool(&conv, PoolKind::Max, 3, 1, 1);
    pooled.check_finite("pool output").unwrap();
}
