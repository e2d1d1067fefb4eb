use std::collections::BTreeMap;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_distr::{Distribution, Normal};
use rand_pcg::Pcg64Mcg;
use wuglab::probelab::*;

/// 32 kinds, 2-3 rows each (80 rows), label = kind % 10. With `signal`,
/// each label owns a direction in feature space.
fn synthetic(signal: bool, d: usize, seed: u64) -> ProbeDataset {
    let mut rng = Pcg64Mcg::seed_from_u64(seed);
    let noise = Normal::new(0.0, 1.0).unwrap();
    let mut f = Vec::new();
    let mut labels = Vec::new();
    let mut groups = Vec::new();
    for row in 0..80 {
        let kind = row % 32;
        let label = kind % 10;
        let mut v: Vec<f64> = (0..d).map(|_| noise.sample(&mut rng) * 0.3).collect();
        if signal {
            v[label] += 3.0;
        }
        f.push(v);
        labels.push(label);
        groups.push(kind);
    }
    ProbeDataset::new(f, labels, groups, 10).unwrap()
}

#[test]
fn folds_keep_groups_together_and_cover_all() {
    let ds = synthetic(true, 12, 1);
    let mut fold_of = BTreeMap::new();
    for (&g, &f) in ds.groups.iter().zip(&ds.folds) {
        assert_eq!(*fold_of.entry(g).or_insert(f), f);
    }
    for k in 0..N_FOLDS {
        let n = ds.folds.iter().filter(|&&f| f == k).count();
        assert!((20..=33).contains(&n), "fold {k} has {n} rows");
    }
}

#[test]
fn probe_decodes_structured_features_and_beats_permutations() {
    let ds = synthetic(true, 16, 2);
    let fit = train_probe(&ds, PROBE_L2).unwrap();
    assert!(fit.accuracy >= 0.95, "{fit:?}");
    let maps = label_permutations(&ds, N_SHUFFLES, 11);
    let pc = permutation_test(&ds, &maps, PROBE_L2).unwrap();
    assert!(pc.p_value < 0.01);
    assert!((0.0..0.25).contains(&pc.baseline), "{}", pc.baseline);
    assert_eq!(pc.shuffled.len(), N_SHUFFLES);
}

#[test]
fn noise_features_are_not_significant() {
    let ds = synthetic(false, 16, 3);
    let maps = label_permutations(&ds, N_SHUFFLES, 12);
    let pc = permutation_test(&ds, &maps, PROBE_L2).unwrap();
    assert!(pc.p_value > 0.05, "{pc:?}");
}

#[test]
fn identity_permutation_reproduces_true_accuracy() {
    let ds = synthetic(true, 10, 4);
    let id = ds.group_labels();
    let pc = permutation_test(&ds, &[id], PROBE_L2).unwrap();
    assert_eq!(pc.shuffled[0], pc.true_accuracy);
}

#[test]
fn permutations_shuffle_kind_labels_only() {
    let ds = synthetic(true, 10, 5);
    for m in label_permutations(&ds, 5, 1) {
        let mut orig: Vec<usize> = ds.group_labels().into_values().collect();
        let mut perm: Vec<usize> = m.values().copied().collect();
        orig.sort();
        perm.sort();
        assert_eq!(orig, perm);
        let r = ds.relabel(&m);
        for (g, l) in r.groups.iter().zip(&r.labels) {
            assert_eq!(m[g], *l);
        }
        for f in 0..N_FOLDS {
            let hist = |labels: &[usize]| {
                let mut h: Vec<usize> = (0..labels.len())
                    .filter(|&i| ds.folds[i] == f)
                    .map(|i| labels[i])
                    .collect();
                h.sort();
                h
            };
            assert_eq!(hist(&ds.labels), hist(&r.labels));
        }
    }
}

#[test]
fn single_class_is_trivially_decoded() {
    let mut rng = Pcg64Mcg::seed_from_u64(9);
    let f: Vec<Vec<f64>> = (0..30)
        .map(|_| (0..5).map(|_| rng.random::<f64>()).collect())
        .collect();
    let ds = ProbeDataset::new(f, vec![0; 30], (0..30).map(|i| i / 2).collect(), 10).unwrap();
    assert_eq!(train_probe(&ds, PROBE_L2).unwrap().accuracy, 1.0);
    assert!(train_probe(&ds, 0.0).is_err());
}

#[test]
fn cosine_basics() {
    assert!((cosine(&[1.0, 2.0], &[1.0, 2.0]).unwrap() - 1.0).abs() < 1e-12);
    assert_eq!(cosine(&[1.0, 0.0], &[0.0, 3.0]), Some(0.0));
    assert_eq!(cosine(&[0.0, 0.0], &[1.0, 0.0]), None);
}

#[test]
fn cosine_analysis_groups_and_zero_exclusion() {
    let e = |i: usize| -> Vec<f32> { (0..4).map(|j| if j == i { 1.0 } else { 0.0 }).collect() };
    let trained = vec![vec![e(0)], vec![e(1)], vec![e(2)]];
    let novel = vec![
        vec![vec![1.0, 1.0, 1.0, 1.0]],
        vec![vec![2.0, 2.0, 2.0, 2.0]],
        vec![vec![0.0; 4]],
    ];
    let rows = cosine_analysis(&trained, &novel).unwrap();
    assert_eq!(rows.len(), 1);
    let r = &rows[0];
    assert!(r.within_trained.abs() < 1e-12);
    assert!((r.within_novel - 1.0).abs() < 1e-12);
    assert!((r.cross - 0.5).abs() < 1e-12);
    assert_eq!(r.n_zero_excluded, 1);
    assert!(cosine_analysis(&trained[..1].to_vec(), &novel).is_err());
}

#[test]
fn swap_mapping_is_injective_and_seeded() {
    let m = random_swap_mapping(&[100, 101, 102], &[1, 2, 3, 4, 5], 3).unwrap();
    let mut vals: Vec<u32> = m.values().copied().collect();
    vals.sort();
    vals.dedup();
    assert_eq!(vals.len(), 3);
    assert_eq!(
        m,
        random_swap_mapping(&[100, 101, 102], &[1, 2, 3, 4, 5], 3).unwrap()
    );
    assert!(random_swap_mapping(&[1, 2], &[3], 0).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn cosine_is_symmetric_and_bounded(
        a in prop::collection::vec(-5.0f32..5.0, 6),
        b in prop::collection::vec(-5.0f32..5.0, 6),
    ) {
        let (x, y) = (cosine(&a, &b), cosine(&b, &a));
        prop_assert_eq!(x, y);
        if let Some(c) = x {
            prop_assert!((-1.0..=1.0).contains(&c));
        }
    }
}
