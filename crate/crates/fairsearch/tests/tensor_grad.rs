//! Gradient tests: every primitive's analytic backward rule against 64-bit
//! central differences, plus accumulation and composite-network checks.

use fairsearch::tensor::{
    grad_check_many, Conv2dSpec, GradCheckOptions, PoolKind, Tape, Tensor, Var,
};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

const TOL: f64 = 1e-4;

fn opts(seed: u64) -> GradCheckOptions {
    GradCheckOptions {
        h: 1e-5,
        max_coords: None,
        seed,
    }
}

/// Random tensor with entries kept away from zero so relu/max-pool ties and
/// kinks are not straddled by the finite-difference step.
fn randn_nudged(shape: Vec<usize>, rng: &mut ChaCha20Rng) -> Tensor<f64> {
    Tensor::<f64>::randn(shape, 1.0, rng).map(|v| {
        if v.abs() < 1e-2 {
            v + 0.05 * v.signum() + if v == 0.0 { 0.05 } else { 0.0 }
        } else {
            v
        }
    })
}

#[test]
fn grad_sum_of_squares_is_2x() {
    let mut rng = ChaCha20Rng::seed_from_u64(1);
    let x = Tensor::<f64>::randn(vec![2, 5], 1.0, &mut rng);
    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone(), true);
    let sq = tape.square(xv);
    let root = tape.sum_all(sq);
    let grads = tape.backward(root).unwrap();
    let g = grads.grad(xv).unwrap();
    for (gi, xi) in g.iter().zip(x.data().iter()) {
        assert!((gi - 2.0 * xi).abs() < 1e-12);
    }
}

#[test]
fn grad_of_linear_map_is_column_sums() {
    // f(x) = sum(A x) for constant A: gradient is the column sums of A.
    let mut rng = ChaCha20Rng::seed_from_u64(2);
    let a = Tensor::<f64>::randn(vec![3, 4], 1.0, &mut rng);
    let x = Tensor::<f64>::randn(vec![4, 1], 1.0, &mut rng);
    // Express A x as linear(x^T-as-batch? no): use x as [1,4] times A^T [4,3].
    // Simpler: treat x as the input batch [1,4] and weight [4,3] = A^T.
    let mut at = vec![0.0; 12];
    for i in 0..3 {
        for j in 0..4 {
            at[j * 3 + i] = a.data()[i * 4 + j];
        }
    }
    let w = Tensor::new(vec![4, 3], at).unwrap();
    let xrow = Tensor::new(vec![1, 4], x.data().to_vec()).unwrap();
    let mut tape = Tape::new();
    let xv = tape.leaf(xrow, true);
    let wv = tape.leaf(w, false);
    let out = tape.linear(xv, wv, None).unwrap();
    let root = tape.sum_all(out);
    let grads = tape.backward(root).unwrap();
    let g = grads.grad(xv).unwrap();
    for j in 0..4 {
        let col_sum: f64 = (0..3).map(|i| a.data()[i * 4 + j]).sum();
        assert!((g[j] - col_sum).abs() < 1e-12);
    }
}

#[test]
fn gradient_accumulates_for_repeated_consumers() {
    // f(x) = g(x) + g(x) must have exactly twice the gradient of g(x).
    let mut rng = ChaCha20Rng::seed_from_u64(3);
    let x = Tensor::<f64>::randn(vec![6], 1.0, &mut rng);

    let single = {
        let mut tape = Tape::new();
        let xv = tape.leaf(x.clone(), true);
        let sq = tape.square(xv);
        let root = tape.sum_all(sq);
        let grads = tape.backward(root).unwrap();
        grads.grad(xv).unwrap().to_vec()
    };
    let doubled = {
        let mut tape = Tape::new();
        let xv = tape.leaf(x.clone(), true);
        let g1 = tape.square(xv);
        let s1 = tape.sum_all(g1);
        let g2 = tape.square(xv);
        let s2 = tape.sum_all(g2);
        let root = tape.add(s1, s2).unwrap();
        let grads = tape.backward(root).unwrap();
        grads.grad(xv).unwrap().to_vec()
    };
    for (d, s) in doubled.iter().zip(single.iter()) {
        assert_eq!(*d, 2.0 * s);
    }
}

#[test]
fn backward_rejects_non_scalar_root() {
    let mut tape = Tape::new();
    let xv = tape.leaf(Tensor::<f64>::zeros(vec![2, 2]), true);
    let err = tape.backward(xv).unwrap_err();
    assert!(err.to_string().contains("scalar"));
}

#[test]
fn grad_conv2d_all_variants() {
    for seed in 0..5u64 {
        let mut rng = ChaCha20Rng::seed_from_u64(100 + seed);
        for &(spec, ic, oc, hw, k) in &[
            (Conv2dSpec { stride: 1, padding: 1, dilation: 1, groups: 1 }, 2usize, 3usize, 5usize, 3usize),
            (Conv2dSpec { stride: 2, padding: 1, dilation: 1, groups: 1 }, 2, 2, 6, 3),
            (Conv2dSpec { stride: 1, padding: 2, dilation: 2, groups: 1 }, 2, 2, 6, 3),
            (Conv2dSpec { stride: 1, padding: 1, dilation: 1, groups: 2 }, 4, 4, 5, 3),
        ] {
            let x = Tensor::<f64>::randn(vec![2, ic, hw, hw], 1.0, &mut rng);
            let w = Tensor::<f64>::randn(vec![oc, ic / spec.groups, k, k], 0.5, &mut rng);
            let err = grad_check_many(
                |tape, vars: &[Var]| {
                    let out = tape.conv2d(vars[0], vars[1], spec)?;
                    let sq = tape.square(out);
                    Ok(tape.sum_all(sq))
                },
                &[x, w],
                opts(seed),
            )
            .unwrap();
            assert!(err <= TOL, "conv2d {spec:?} seed {seed}: rel err {err}");
        }
    }
}

#[test]
fn grad_pools() {
    for seed in 0..5u64 {
        let mut rng = ChaCha20Rng::seed_from_u64(200 + seed);
        let x = randn_nudged(vec![2, 2, 6, 6], &mut rng);
        for kind in [PoolKind::Max, PoolKind::Avg] {
            for &(stride, padding) in &[(1usize, 1usize), (2, 1)] {
                let err = grad_check_many(
                    |tape, vars: &[Var]| {
                        let out = tape.pool2d(vars[0], kind, 3, stride, padding)?;
                        let sq = tape.square(out);
                        Ok(tape.sum_all(sq))
                    },
                    std::slice::from_ref(&x),
                    opts(seed),
                )
                .unwrap();
                assert!(err <= TOL, "pool {kind:?} s{stride} p{padding}: {err}");
            }
        }
    }
}

#[test]
fn max_pool_tie_routes_gradient_to_first_position() {
    // Two equal maxima in one window: the gradient must go to the first in
    // row-major scan order.
    let x = Tensor::<f64>::from_f64_slice(vec![1, 1, 3, 3], &[0., 0., 0., 0., 7., 7., 0., 0., 0.]).unwrap();
    let mut tape = Tape::new();
    let xv = tape.leaf(x, true);
    let out = tape.pool2d(xv, PoolKind::Max, 3, 1, 0).unwrap();
    let root = tape.sum_all(out);
    let grads = tape.backward(root).unwrap();
    let g = grads.grad(xv).unwrap();
    assert_eq!(g[4], 1.0, "first-encountered max takes the gradient");
    assert_eq!(g[5], 0.0);
}

#[test]
fn grad_batch_norm_through_statistics() {
    for seed in 0..5u64 {
        let mut rng = ChaCha20Rng::seed_from_u64(300 + seed);
        let x = Tensor::<f64>::randn(vec![3, 2, 4, 4], 1.0, &mut rng).map(|v| v * 2.0 + 1.0);
        let gamma = Tensor::<f64>::randn(vec![2], 0.5, &mut rng).map(|v| v + 1.0);
        let beta = Tensor::<f64>::randn(vec![2], 0.5, &mut rng);
        let err = grad_check_many(
            |tape, vars: &[Var]| {
                let out = tape.batch_norm(vars[0], vars[1], vars[2], 1e-5)?;
                let sq = tape.square(out);
                Ok(tape.sum_all(sq))
            },
            &[x, gamma, beta],
            opts(seed),
        )
        .unwrap();
        assert!(err <= TOL, "batch_norm seed {seed}: rel err {err}");
    }
}

#[test]
fn grad_linear_and_bias() {
    for seed in 0..5u64 {
        let mut rng = ChaCha20Rng::seed_from_u64(400 + seed);
        let x = Tensor::<f64>::randn(vec![3, 4], 1.0, &mut rng);
        let w = Tensor::<f64>::randn(vec![4, 2], 1.0, &mut rng);
        let b = Tensor::<f64>::randn(vec![2], 1.0, &mut rng);
        let err = grad_check_many(
            |tape, vars: &[Var]| {
                let out = tape.linear(vars[0], vars[1], Some(vars[2]))?;
                let sq = tape.square(out);
                Ok(tape.sum_all(sq))
            },
            &[x, w, b],
            opts(seed),
        )
        .unwrap();
        assert!(err <= TOL, "linear seed {seed}: rel err {err}");
    }
}

#[test]
fn grad_activations_and_elementwise() {
    for seed in 0..5u64 {
        let mut rng = ChaCha20Rng::seed_from_u64(500 + seed);
        let x = randn_nudged(vec![3, 5], &mut rng);
        let y = randn_nudged(vec![3, 5], &mut rng);

        let relu_err = grad_check_many(
            |tape, vars: &[Var]| {
                let r = tape.relu(vars[0]);
                let sq = tape.square(r);
                Ok(tape.sum_all(sq))
            },
            std::slice::from_ref(&x),
            opts(seed),
        )
        .unwrap();
        assert!(relu_err <= TOL, "relu: {relu_err}");

        let sig_err = grad_check_many(
            |tape, vars: &[Var]| {
                let s = tape.sigmoid(vars[0]);
                let sq = tape.square(s);
                Ok(tape.sum_all(sq))
            },
            std::slice::from_ref(&x),
            opts(seed),
        )
        .unwrap();
        assert!(sig_err <= TOL, "sigmoid: {sig_err}");

        let softmax_err = grad_check_many(
            |tape, vars: &[Var]| {
                let s = tape.softmax_lastdim(vars[0]);
                let sq = tape.square(s);
                Ok(tape.sum_all(sq))
            },
            std::slice::from_ref(&x),
            opts(seed),
        )
        .unwrap();
        assert!(softmax_err <= TOL, "softmax: {softmax_err}");

        let mix_err = grad_check_many(
            |tape, vars: &[Var]| {
                let m = tape.mul(vars[0], vars[1])?;
                let d = tape.div(m, vars[1])?;
                let a = tape.abs(d);
                let sq = tape.square(a);
                let s = tape.sum_all(sq);
                let sc = tape.scale(s, 0.5);
                Ok(tape.add_scalar(sc, 1.0))
            },
            &[x.clone(), y.clone()],
            opts(seed),
        )
        .unwrap();
        assert!(mix_err <= TOL, "elementwise mix: {mix_err}");

        let sqrt_err = grad_check_many(
            |tape, vars: &[Var]| {
                let sq = tape.square(vars[0]);
                let one = tape.add_scalar(sq, 1.0);
                let r = tape.sqrt(one)?;
                Ok(tape.sum_all(r))
            },
            std::slice::from_ref(&x),
            opts(seed),
        )
        .unwrap();
        assert!(sqrt_err <= TOL, "sqrt: {sqrt_err}");
    }
}

#[test]
fn grad_reductions_and_glue() {
    for seed in 0..5u64 {
        let mut rng = ChaCha20Rng::seed_from_u64(600 + seed);
        let m = Tensor::<f64>::randn(vec![4, 3], 1.0, &mut rng);
        let r = Tensor::<f64>::randn(vec![3], 1.0, &mut rng);
        let err = grad_check_many(
            |tape, vars: &[Var]| {
                let centered = tape.sub_row_broadcast(vars[0], vars[1])?;
                let mu = tape.mean_axis0(centered)?;
                let s = tape.sum_axis0(centered)?;
                let both = tape.add(mu, s)?;
                let row = tape.row(vars[0], 1)?;
                let plus = tape.add(both, row)?;
                let sq = tape.square(plus);
                Ok(tape.mean_all(sq))
            },
            &[m, r],
            opts(seed),
        )
        .unwrap();
        assert!(err <= TOL, "reductions: {err}");

        let u = Tensor::<f64>::randn(vec![3], 1.0, &mut rng);
        let v = Tensor::<f64>::randn(vec![4], 1.0, &mut rng);
        let outer_err = grad_check_many(
            |tape, vars: &[Var]| {
                let o = tape.outer(vars[0], vars[1])?;
                let sq = tape.square(o);
                Ok(tape.sum_all(sq))
            },
            &[u, v],
            opts(seed),
        )
        .unwrap();
        assert!(outer_err <= TOL, "outer: {outer_err}");

        let a = Tensor::<f64>::randn(vec![5, 3], 1.0, &mut rng);
        let b = Tensor::<f64>::randn(vec![5, 2], 1.0, &mut rng);
        let mm_err = grad_check_many(
            |tape, vars: &[Var]| {
                let c = tape.matmul_ta(vars[0], vars[1])?;
                let sq = tape.square(c);
                Ok(tape.sum_all(sq))
            },
            &[a, b],
            opts(seed),
        )
        .unwrap();
        assert!(mm_err <= TOL, "matmul_ta: {mm_err}");
    }
}

#[test]
fn grad_weighted_sum_concat_offset() {
    for seed in 0..5u64 {
        let mut rng = ChaCha20Rng::seed_from_u64(700 + seed);
        let x0 = Tensor::<f64>::randn(vec![2, 2, 4, 4], 1.0, &mut rng);
        let x1 = Tensor::<f64>::randn(vec![2, 2, 4, 4], 1.0, &mut rng);
        let gates = Tensor::<f64>::randn(vec![2], 1.0, &mut rng);
        let err = grad_check_many(
            |tape, vars: &[Var]| {
                let ws = tape.weighted_sum(&[vars[0], vars[1]], vars[2])?;
                let cat = tape.concat_channels(&[ws, vars[0]])?;
                let off = tape.offset2d(cat, 1, 1)?;
                let gap = tape.mean_spatial(off)?;
                let sq = tape.square(gap);
                Ok(tape.sum_all(sq))
            },
            &[x0, x1, gates],
            opts(seed),
        )
        .unwrap();
        assert!(err <= TOL, "weighted_sum/concat/offset: {err}");
    }
}

#[test]
fn grad_cross_entropy() {
    for seed in 0..5u64 {
        let mut rng = ChaCha20Rng::seed_from_u64(800 + seed);
        let logits = Tensor::<f64>::randn(vec![4, 5], 2.0, &mut rng);
        let labels = vec![0usize, 3, 2, 4];
        let err = grad_check_many(
            |tape, vars: &[Var]| tape.cross_entropy(vars[0], &labels),
            std::slice::from_ref(&logits),
            opts(seed),
        )
        .unwrap();
        assert!(err <= TOL, "cross_entropy: {err}");
    }
}

#[test]
fn grad_composite_conv_bn_relu_pool_linear() {
    // The spec's composite pipeline: conv -> bn -> relu -> pool -> linear.
    for seed in 0..3u64 {
        let mut rng = ChaCha20Rng::seed_from_u64(900 + seed);
        let x = Tensor::<f64>::randn(vec![2, 2, 6, 6], 1.0, &mut rng);
        let w = Tensor::<f64>::randn(vec![3, 2, 3, 3], 0.5, &mut rng);
        let gamma = Tensor::<f64>::randn(vec![3], 0.3, &mut rng).map(|v| v + 1.0);
        let beta = Tensor::<f64>::randn(vec![3], 0.3, &mut rng);
        let lw = Tensor::<f64>::randn(vec![3, 4], 0.5, &mut rng);
        let err = grad_check_many(
            |tape, vars: &[Var]| {
                let conv = tape.conv2d(vars[0], vars[1], Conv2dSpec { stride: 1, padding: 1, dilation: 1, groups: 1 })?;
                let bn = tape.batch_norm(conv, vars[2], vars[3], 1e-5)?;
                let act = tape.relu(bn);
                let pool = tape.pool2d(act, PoolKind::Avg, 3, 1, 1)?;
                let gap = tape.mean_spatial(pool)?;
                let logits = tape.linear(gap, vars[4], None)?;
                let sq = tape.square(logits);
                Ok(tape.sum_all(sq))
            },
            &[x, w, gamma, beta, lw],
            opts(seed),
        )
        .unwrap();
        assert!(err <= TOL, "composite seed {seed}: rel err {err}");
    }
}
