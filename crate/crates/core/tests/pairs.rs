use std::collections::HashSet;

use proptest::prelude::*;

use pkrank::audio::{AudioClip, SystemSet};
use pkrank::pairs::{build_pairs, split_validation, PairSet, Split};

const SWEEP: [f64; 7] = [0.0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.7];

fn labeled(mos: Vec<Vec<f64>>) -> SystemSet {
    let (k, m) = (mos.len(), mos[0].len());
    let clip = AudioClip::new(vec![0.0; 4], 16_000).unwrap();
    SystemSet::new(
        (0..k).map(|s| format!("s{s}")).collect(),
        (0..m).map(|u| format!("u{u}")).collect(),
        vec![vec![clip; m]; k],
        Some(mos),
        None,
        None,
    )
    .unwrap()
}

fn mos_table() -> impl Strategy<Value = Vec<Vec<f64>>> {
    (2usize..6, 1usize..8).prop_flat_map(|(k, m)| {
        // quarter-point steps make gaps land exactly on the sweep values
        prop::collection::vec(prop::collection::vec((4u32..=20).prop_map(|q| f64::from(q) / 4.0), m), k)
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn surviving_pairs_shrink_with_delta(mos in mos_table()) {
        let set = labeled(mos);
        let counts: Vec<usize> = SWEEP.iter().map(|&d| build_pairs(&set, d).unwrap().len()).collect();
        for w in counts.windows(2) {
            prop_assert!(w[0] >= w[1], "{counts:?}");
        }
    }

    #[test]
    fn pairs_come_in_mirrored_couples(mos in mos_table(), di in 0usize..SWEEP.len()) {
        let set = labeled(mos.clone());
        let delta = SWEEP[di];
        let pairs = build_pairs(&set, delta).unwrap();
        prop_assert_eq!(pairs.len() % 2, 0);
        let keys: HashSet<(String, String, String)> = pairs
            .pairs
            .iter()
            .map(|p| (p.utterance_id.clone(), p.system_a.clone(), p.system_b.clone()))
            .collect();
        prop_assert_eq!(keys.len(), pairs.len());
        for p in &pairs.pairs {
            prop_assert!((p.mos_a - p.mos_b).abs() > delta);
            prop_assert_eq!(p.target, u8::from(p.mos_a > p.mos_b));
            prop_assert!(keys.contains(&(p.utterance_id.clone(), p.system_b.clone(), p.system_a.clone())));
        }
    }

    #[test]
    fn validation_split_partitions_utterances(m in 2usize..30, seed in any::<u64>(), frac in 0.0f64..1.0) {
        let n_val = 1 + ((m - 1) as f64 * frac) as usize % (m - 1);
        let set = labeled(vec![vec![3.0; m], vec![2.0; m]]);
        let (train, val) = split_validation(&set, n_val, seed).unwrap();
        prop_assert_eq!(val.num_utterances(), n_val);
        let mut all: Vec<String> = train.utterance_ids().to_vec();
        all.extend(val.utterance_ids().iter().cloned());
        all.sort();
        let mut expected = set.utterance_ids().to_vec();
        expected.sort();
        prop_assert_eq!(all, expected);
    }
}

#[test]
fn manifest_round_trips() {
    let set = labeled(vec![vec![4.5, 2.0, 3.0], vec![1.0, 2.0, 3.5], vec![3.0, 4.0, 1.5]]);
    let pairs = build_pairs(&set, 0.3).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("pairs.csv");
    pairs.write_manifest(&path).unwrap();
    let back = PairSet::read_manifest(&path, 0.3, Split::Train).unwrap();
    assert_eq!(back, pairs);
}

#[test]
fn unlabeled_sets_cannot_be_paired() {
    let clip = AudioClip::new(vec![0.0; 4], 16_000).unwrap();
    let set = SystemSet::new(
        vec!["a".into(), "b".into()],
        vec!["u".into()],
        vec![vec![clip.clone()], vec![clip]],
        None,
        None,
        None,
    )
    .unwrap();
    assert!(matches!(build_pairs(&set, 0.3), Err(pkrank::Error::Label(_))));
    assert!(matches!(build_pairs(&labeled(vec![vec![3.0], vec![2.0]]), -0.1), Err(pkrank::Error::Config(_))));
}
