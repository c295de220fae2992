//! Dataset pipeline properties: subsampling counts and determinism, split
//! partition invariants, epoch-level batch determinism, and binary
//! round-trips.

use std::sync::Arc;

use fairsearch::data::{
    class_counts, generate_synthetic, load_records, split_search_streams, subsample_longtailed,
    write_records, AugmentConfig, ImbalanceProfile, ProfileKind,
};
use proptest::prelude::*;

fn exp_profile(mu: f64, base: usize, c: usize) -> ImbalanceProfile {
    ImbalanceProfile {
        kind: ProfileKind::Exponential,
        mu,
        base_count: base,
        num_classes: c,
    }
}

#[test]
fn balance_profile_keeps_counts_equal() {
    let full = generate_synthetic(3, 50, 8, 1).unwrap();
    let lt = subsample_longtailed(&full, &ImbalanceProfile::balance(40, 3), 2).unwrap();
    assert_eq!(lt.per_class_counts(), vec![40, 40, 40]);
}

#[test]
fn subsampling_is_seed_deterministic() {
    let full = generate_synthetic(3, 60, 8, 3).unwrap();
    let profile = exp_profile(0.1, 50, 3);
    let a = subsample_longtailed(&full, &profile, 7).unwrap();
    let b = subsample_longtailed(&full, &profile, 7).unwrap();
    assert_eq!(a, b);
    let c = subsample_longtailed(&full, &profile, 8).unwrap();
    assert_ne!(a, c, "different seeds must pick different samples");
}

#[test]
fn subsampling_rejects_insufficient_source() {
    let full = generate_synthetic(3, 10, 8, 3).unwrap();
    let profile = exp_profile(0.5, 20, 3);
    let err = subsample_longtailed(&full, &profile, 1).map(|_| ()).unwrap_err();
    assert!(err.to_string().contains("wants 20"), "got: {err}");
}

#[test]
fn split_is_a_partition_preserving_class_shares() {
    let full = generate_synthetic(2, 50, 8, 4).unwrap();
    let train = Arc::new(full);
    let streams = split_search_streams(Arc::clone(&train), 0.5, 5).unwrap();
    let mut union: Vec<usize> = streams
        .weight
        .indices()
        .iter()
        .chain(streams.arch.indices().iter())
        .copied()
        .collect();
    union.sort_unstable();
    let expected: Vec<usize> = (0..train.len()).collect();
    assert_eq!(union, expected, "union covers every index exactly once");

    // 50 per class at fraction 0.5: 25 per class on each side.
    for stream in [&streams.weight, &streams.arch] {
        let mut counts = vec![0usize; 2];
        for &i in stream.indices() {
            counts[train.label(i)] += 1;
        }
        assert_eq!(counts, vec![25, 25]);
    }
}

#[test]
fn singleton_class_goes_to_weight_stream() {
    // Build a dataset where class 1 has a single sample.
    let full = generate_synthetic(2, 9, 8, 6).unwrap();
    let profile = ImbalanceProfile {
        kind: ProfileKind::Step,
        mu: 0.112, // floor(9 * 0.112) = 1
        base_count: 9,
        num_classes: 2,
    };
    assert_eq!(class_counts(&profile).unwrap(), vec![9, 1]);
    let lt = Arc::new(subsample_longtailed(&full, &profile, 1).unwrap());
    let streams = split_search_streams(Arc::clone(&lt), 0.5, 2).unwrap();
    let weight_has_class1 = streams.weight.indices().iter().any(|&i| lt.label(i) == 1);
    let arch_has_class1 = streams.arch.indices().iter().any(|&i| lt.label(i) == 1);
    assert!(weight_has_class1);
    assert!(!arch_has_class1);
}

#[test]
fn epoch_batches_are_pure_functions_of_seed_and_epoch() {
    let full = Arc::new(generate_synthetic(3, 20, 8, 7).unwrap());
    let s1 = split_search_streams(Arc::clone(&full), 0.5, 11).unwrap();
    let s2 = split_search_streams(Arc::clone(&full), 0.5, 11).unwrap();
    assert_eq!(
        s1.weight.epoch_batches(3, 8),
        s2.weight.epoch_batches(3, 8)
    );
    assert_ne!(
        s1.weight.epoch_batches(0, 8),
        s1.weight.epoch_batches(1, 8),
        "different epochs reshuffle"
    );

    // Batch content (augmented pairs) is a pure function of (seed, epoch).
    let stats = full.channel_stats();
    let cfg = AugmentConfig::default();
    let batch = &s1.weight.epoch_batches(2, 8)[0];
    let (a1, b1) = s1.weight.augmented_pair::<f64>(batch, &stats, &cfg, 2);
    let (a2, b2) = s2.weight.augmented_pair::<f64>(batch, &stats, &cfg, 2);
    assert_eq!(a1.data(), a2.data());
    assert_eq!(b1.data(), b2.data());
}

#[test]
fn label_access_is_counted() {
    let full = Arc::new(generate_synthetic(2, 10, 8, 8).unwrap());
    let streams = split_search_streams(Arc::clone(&full), 0.5, 1).unwrap();
    assert_eq!(streams.label_reads(), 0);
    let batch = streams.weight.epoch_batches(0, 4)[0].clone();
    let _ = streams.weight.images::<f64>(&batch, &full.channel_stats());
    assert_eq!(streams.label_reads(), 0, "image access reads no labels");
    let _ = streams.weight.labels(&batch);
    assert_eq!(streams.label_reads(), 1);
    let _ = streams.arch.labels(&batch);
    assert_eq!(streams.label_reads(), 2, "counter is shared by the pair");
}

#[test]
fn record_round_trip_is_bit_exact() {
    let ds = generate_synthetic(4, 12, 8, 9).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("synth.bin");
    write_records(&ds, &path).unwrap();
    let back = load_records(&path, 8, 4).unwrap();
    assert_eq!(back.len(), ds.len());
    assert_eq!(back.labels_raw(), ds.labels_raw());
    for i in 0..ds.len() {
        assert_eq!(back.image_bytes(i), ds.image_bytes(i));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn subsample_then_split_partitions_cleanly(
        mu in 0.05f64..1.0,
        seed in 0u64..1000,
        fraction in 0.2f64..0.8,
    ) {
        let full = generate_synthetic(3, 30, 8, 123).unwrap();
        let profile = exp_profile(mu, 25, 3);
        let lt = Arc::new(subsample_longtailed(&full, &profile, seed).unwrap());
        let counts = class_counts(&profile).unwrap();
        prop_assert_eq!(lt.per_class_counts(), counts);

        let streams = split_search_streams(Arc::clone(&lt), fraction, seed).unwrap();
        let mut union: Vec<usize> = streams.weight.indices().iter()
            .chain(streams.arch.indices().iter()).copied().collect();
        let total = union.len();
        union.sort_unstable();
        union.dedup();
        prop_assert_eq!(union.len(), total, "no duplicates");
        prop_assert_eq!(total, lt.len(), "no index lost");
    }

    #[test]
    fn class_counts_nonincreasing(mu in 0.01f64..1.0, c in 2usize..12, base in 10usize..2000) {
        let counts = class_counts(&exp_profile(mu, base, c)).unwrap();
        for w in counts.windows(2) {
            prop_assert!(w[0] >= w[1]);
        }
        prop_assert_eq!(counts[0], base);
    }
}
