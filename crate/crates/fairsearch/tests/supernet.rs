//! Supernet and child-network behavior: shape propagation, gating
//! invariances, alpha gradient flow, and supernet/child consistency.

use fairsearch::genotype::Genotype;
use fairsearch::search_space::{
    discretize, ArchParams, CellKind, DiscretizeRule, Gating, OperationKind,
};
use fairsearch::supernet::{build_supernet, derive_child, ArchVars, Head, Network, ParamStore};
use fairsearch::tensor::{Tape, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

fn tiny_cfg() -> fairsearch::supernet::SupernetConfig {
    fairsearch::supernet::SupernetConfig {
        num_cells: 2,
        init_channels: 2,
        num_classes: 3,
        image_size: 8,
        embed_dim: 4,
        batch_norm: true,
        ops: OperationKind::ALL.to_vec(),
    }
}

fn forward_logits(
    net: &Network,
    store: &ParamStore<f64>,
    arch: &ArchParams,
    images: &Tensor<f64>,
    gating: Gating,
) -> Vec<f64> {
    let mut tape = Tape::new();
    let binding = store.bind(&mut tape, false);
    let av = ArchVars {
        normal: tape.leaf(arch.matrix_tensor(CellKind::Normal), false),
        reduce: tape.leaf(arch.matrix_tensor(CellKind::Reduce), false),
    };
    let img = tape.leaf(images.clone(), false);
    let logits = net
        .forward(&mut tape, &binding, img, Some((&av, gating)), Head::Classifier)
        .unwrap();
    tape.data(logits).to_vec()
}

#[test]
fn forward_shapes_match_config() {
    // batch 4, 3x16x16 input, init_channels 8, 8 cells, 10 classes -> [4,10]
    let cfg = fairsearch::supernet::SupernetConfig {
        num_cells: 8,
        init_channels: 8,
        num_classes: 10,
        image_size: 16,
        embed_dim: 8,
        batch_norm: true,
        ops: OperationKind::ALL.to_vec(),
    };
    let (net, store) = build_supernet::<f64>(&cfg, 1).unwrap();
    let arch = ArchParams::zeros(&cfg.ops).unwrap();
    let mut rng = ChaCha20Rng::seed_from_u64(2);
    let images = Tensor::<f64>::randn(vec![4, 3, 16, 16], 1.0, &mut rng);

    let mut tape = Tape::new();
    let binding = store.bind(&mut tape, false);
    let av = ArchVars {
        normal: tape.leaf(arch.matrix_tensor(CellKind::Normal), false),
        reduce: tape.leaf(arch.matrix_tensor(CellKind::Reduce), false),
    };
    let img = tape.leaf(images, false);
    let logits = net
        .forward(&mut tape, &binding, img, Some((&av, Gating::Softmax)), Head::Classifier)
        .unwrap();
    assert_eq!(tape.shape(logits), &[4, 10]);
    tape.value(logits).check_finite("logits").unwrap();
}

#[test]
fn projection_head_shape_and_determinism() {
    let cfg = tiny_cfg();
    let (net, store) = build_supernet::<f64>(&cfg, 3).unwrap();
    let arch = ArchParams::zeros(&cfg.ops).unwrap();
    let mut rng = ChaCha20Rng::seed_from_u64(4);
    let images = Tensor::<f64>::randn(vec![2, 3, 8, 8], 1.0, &mut rng);

    let run = || {
        let mut tape = Tape::new();
        let binding = store.bind(&mut tape, false);
        let av = ArchVars {
            normal: tape.leaf(arch.matrix_tensor(CellKind::Normal), false),
            reduce: tape.leaf(arch.matrix_tensor(CellKind::Reduce), false),
        };
        let img = tape.leaf(images.clone(), false);
        let emb = net
            .forward(&mut tape, &binding, img, Some((&av, Gating::Sigmoid)), Head::Projector)
            .unwrap();
        tape.data(emb).to_vec()
    };
    let e1 = run();
    let e2 = run();
    assert_eq!(e1.len(), 2 * cfg.embed_dim);
    assert_eq!(e1, e2, "identical inputs give identical embeddings");
}

#[test]
fn alpha_shift_leaves_softmax_logits_identical() {
    let cfg = tiny_cfg();
    let (net, store) = build_supernet::<f64>(&cfg, 5).unwrap();
    let mut arch = ArchParams::zeros(&cfg.ops).unwrap();
    let mut rng = ChaCha20Rng::seed_from_u64(6);
    for v in arch
        .alpha_normal
        .iter_mut()
        .chain(arch.alpha_reduce.iter_mut())
    {
        *v = Tensor::<f64>::randn(vec![1], 0.5, &mut rng).data()[0];
    }
    let images = Tensor::<f64>::randn(vec![2, 3, 8, 8], 1.0, &mut rng);
    let base = forward_logits(&net, &store, &arch, &images, Gating::Softmax);

    let mut shifted = arch.clone();
    for v in shifted
        .alpha_normal
        .iter_mut()
        .chain(shifted.alpha_reduce.iter_mut())
    {
        *v += 9.75;
    }
    let moved = forward_logits(&net, &store, &shifted, &images, Gating::Softmax);
    for (a, b) in base.iter().zip(moved.iter()) {
        assert!((a - b).abs() <= 1e-9, "{a} vs {b}");
    }
}

#[test]
fn zero_images_with_zero_bias_give_equal_logits() {
    // Stem bn of a zero image is zero (beta starts at 0), every feature stays
    // symmetric across classes, so logits are all equal.
    let cfg = tiny_cfg();
    let (net, store) = build_supernet::<f64>(&cfg, 7).unwrap();
    let arch = ArchParams::zeros(&cfg.ops).unwrap();
    let images = Tensor::<f64>::zeros(vec![2, 3, 8, 8]);
    let logits = forward_logits(&net, &store, &arch, &images, Gating::Softmax);
    for &v in &logits {
        assert!(
            (v - logits[0]).abs() < 1e-9,
            "logits not symmetric: {logits:?}"
        );
    }
}

#[test]
fn alpha_gradient_matches_finite_differences_on_tiny_supernet() {
    let cfg = fairsearch::supernet::SupernetConfig {
        num_cells: 1,
        init_channels: 2,
        num_classes: 2,
        image_size: 4,
        embed_dim: 2,
        batch_norm: true,
        ops: vec![
            OperationKind::None,
            OperationKind::MaxPool3x3,
            OperationKind::AvgPool3x3,
            OperationKind::SkipConnect,
            OperationKind::SepConv3x3,
        ],
    };
    let (net, store) = build_supernet::<f64>(&cfg, 8).unwrap();
    let mut rng = ChaCha20Rng::seed_from_u64(9);
    let images = Tensor::<f64>::randn(vec![2, 3, 4, 4], 1.0, &mut rng);
    let labels = vec![0usize, 1];
    let k = cfg.ops.len();

    let loss_for = |arch: &ArchParams| -> f64 {
        let mut tape = Tape::new();
        let binding = store.bind(&mut tape, false);
        let av = ArchVars {
            normal: tape.leaf(arch.matrix_tensor(CellKind::Normal), false),
            reduce: tape.leaf(arch.matrix_tensor(CellKind::Reduce), false),
        };
        let img = tape.leaf(images.clone(), false);
        let logits = net
            .forward(&mut tape, &binding, img, Some((&av, Gating::Softmax)), Head::Classifier)
            .unwrap();
        let loss = tape.cross_entropy(logits, &labels).unwrap();
        tape.scalar_value(loss)
    };

    // Analytic alpha gradient.
    let mut arch = ArchParams::zeros(&cfg.ops).unwrap();
    for v in arch
        .alpha_normal
        .iter_mut()
        .chain(arch.alpha_reduce.iter_mut())
    {
        *v = Tensor::<f64>::randn(vec![1], 0.3, &mut rng).data()[0];
    }
    let mut tape = Tape::new();
    let binding = store.bind(&mut tape, false);
    let normal = tape.leaf(arch.matrix_tensor(CellKind::Normal), true);
    let reduce = tape.leaf(arch.matrix_tensor(CellKind::Reduce), true);
    let av = ArchVars { normal, reduce };
    let img = tape.leaf(images.clone(), false);
    let logits = net
        .forward(&mut tape, &binding, img, Some((&av, Gating::Softmax)), Head::Classifier)
        .unwrap();
    let loss = tape.cross_entropy(logits, &labels).unwrap();
    let grads = tape.backward(loss).unwrap();
    // num_cells=1 puts the only cell at a reduction position.
    let analytic = grads.grad(reduce).unwrap().to_vec();

    let h = 1e-5;
    let mut checked = 0;
    for idx in [0usize, k + 1, 3 * k + 2, 7 * k + 4, 13 * k + 3] {
        let mut plus = arch.clone();
        plus.alpha_reduce[idx] += h;
        let mut minus = arch.clone();
        minus.alpha_reduce[idx] -= h;
        let numeric = (loss_for(&plus) - loss_for(&minus)) / (2.0 * h);
        let a = analytic[idx];
        let rel = (a - numeric).abs() / 1.0f64.max(a.abs()).max(numeric.abs());
        assert!(rel <= 1e-4, "alpha[{idx}]: analytic {a} vs numeric {numeric}");
        checked += 1;
    }
    assert_eq!(checked, 5);

    // With >= 2 distinct op outputs per edge the alpha gradient is nonzero
    // for generic inputs.
    assert!(analytic.iter().any(|&g| g.abs() > 1e-12));
}

#[test]
fn empty_genotype_child_outputs_classifier_bias() {
    let cfg = tiny_cfg();
    let arch = ArchParams::zeros(&cfg.ops).unwrap();
    let genotype = discretize(&arch, Gating::Softmax, DiscretizeRule::SoftmaxArgmax, "h");
    assert_eq!(genotype.num_retained(CellKind::Normal), 0);

    let (child, store) = derive_child::<f64>(&genotype, &cfg, 11).unwrap();
    let mut rng = ChaCha20Rng::seed_from_u64(12);
    let images = Tensor::<f64>::randn(vec![2, 3, 8, 8], 1.0, &mut rng);
    let mut tape = Tape::new();
    let binding = store.bind(&mut tape, false);
    let img = tape.leaf(images, false);
    let logits = child
        .forward(&mut tape, &binding, img, None, Head::Classifier)
        .unwrap();
    // All cell outputs are zero, so logits equal the (zero-initialized)
    // classifier bias rows.
    for &v in tape.data(logits) {
        assert_eq!(v, 0.0);
    }
}

#[test]
fn skip_only_child_concatenates_projected_inputs() {
    // One cell, all edges skip_connect: each intermediate node receives the
    // sum of the (projected) input features it connects to.
    let cfg = fairsearch::supernet::SupernetConfig {
        num_cells: 1,
        init_channels: 2,
        num_classes: 2,
        image_size: 8,
        embed_dim: 2,
        batch_norm: false,
        ops: OperationKind::ALL.to_vec(),
    };
    let arch = ArchParams::zeros(&cfg.ops).unwrap();
    let mut g = discretize(&arch, Gating::Softmax, DiscretizeRule::SoftmaxArgmax, "h");
    for e in g.reduce.iter_mut() {
        e.op = OperationKind::SkipConnect;
    }
    for e in g.normal.iter_mut() {
        e.op = OperationKind::SkipConnect;
    }
    let (child, store) = derive_child::<f64>(&g, &cfg, 13).unwrap();
    let mut rng = ChaCha20Rng::seed_from_u64(14);
    let images = Tensor::<f64>::randn(vec![1, 3, 8, 8], 1.0, &mut rng);
    let mut tape = Tape::new();
    let binding = store.bind(&mut tape, false);
    let img = tape.leaf(images, false);
    let feats = child
        .forward(&mut tape, &binding, img, None, Head::Classifier)
        .unwrap();
    tape.value(feats).check_finite("skip-only child").unwrap();
}

#[test]
fn child_has_fewer_parameters_than_supernet() {
    let cfg = tiny_cfg();
    let (_, sup_store) = build_supernet::<f64>(&cfg, 15).unwrap();
    let mut arch = ArchParams::zeros(&cfg.ops).unwrap();
    // Mixed genotype: some convs, some pools, some absent.
    for e in 0..14 {
        arch.alpha_normal[e * 8 + (e % 8)] = 5.0;
        arch.alpha_reduce[e * 8 + ((e + 3) % 8)] = 5.0;
    }
    let g = discretize(&arch, Gating::Softmax, DiscretizeRule::SoftmaxArgmax, "h");
    let (_, child_store) = derive_child::<f64>(&g, &cfg, 15).unwrap();
    assert!(
        child_store.num_scalars() < sup_store.num_scalars(),
        "child {} !< supernet {}",
        child_store.num_scalars(),
        sup_store.num_scalars()
    );
}

#[test]
fn child_matches_supernet_at_extreme_alphas_without_bn() {
    // Softmax gating, winning alpha +50 and others -50, bn-free config: the
    // supernet forward matches the discrete child within 1e-6.
    let cfg = fairsearch::supernet::SupernetConfig {
        num_cells: 2,
        init_channels: 2,
        num_classes: 3,
        image_size: 8,
        embed_dim: 2,
        batch_norm: false,
        ops: OperationKind::ALL.to_vec(),
    };
    let mut arch = ArchParams::zeros(&cfg.ops).unwrap();
    let winners_normal: Vec<usize> = (0..14).map(|e| [4, 3, 1, 2, 5, 6, 7][e % 7]).collect();
    let winners_reduce: Vec<usize> = (0..14).map(|e| [3, 4, 2, 1, 6, 5, 7][e % 7]).collect();
    for e in 0..14 {
        for o in 0..8 {
            arch.alpha_normal[e * 8 + o] = if o == winners_normal[e] { 50.0 } else { -50.0 };
            arch.alpha_reduce[e * 8 + o] = if o == winners_reduce[e] { 50.0 } else { -50.0 };
        }
    }
    let genotype = discretize(&arch, Gating::Softmax, DiscretizeRule::SoftmaxArgmax, "h");

    let seed = 77;
    let (sup, sup_store) = build_supernet::<f64>(&cfg, seed).unwrap();
    let (child, child_store) = derive_child::<f64>(&genotype, &cfg, seed).unwrap();

    let mut rng = ChaCha20Rng::seed_from_u64(16);
    let images = Tensor::<f64>::randn(vec![2, 3, 8, 8], 0.5, &mut rng);

    let sup_logits = forward_logits(&sup, &sup_store, &arch, &images, Gating::Softmax);

    let mut tape = Tape::new();
    let binding = child_store.bind(&mut tape, false);
    let img = tape.leaf(images, false);
    let logits = child
        .forward(&mut tape, &binding, img, None, Head::Classifier)
        .unwrap();
    let child_logits = tape.data(logits);

    for (s, c) in sup_logits.iter().zip(child_logits.iter()) {
        assert!((s - c).abs() <= 1e-6, "supernet {s} vs child {c}");
    }
}

#[test]
fn genotype_with_op_outside_candidate_set_is_rejected() {
    let cfg = fairsearch::supernet::SupernetConfig {
        ops: vec![OperationKind::None, OperationKind::AvgPool3x3],
        ..tiny_cfg()
    };
    let full = ArchParams::zeros(&OperationKind::ALL).unwrap();
    let mut g: Genotype = discretize(&full, Gating::Softmax, DiscretizeRule::SoftmaxArgmax, "h");
    g.normal[0].op = OperationKind::SepConv5x5;
    let err = derive_child::<f64>(&g, &cfg, 1).map(|_| ()).unwrap_err();
    assert!(err.to_string().contains("sep_conv_5x5"), "got: {err}");
}
