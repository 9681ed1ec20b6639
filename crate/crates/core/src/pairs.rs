//! Training pairs: every ordered homologous permutation whose MOS gap
//! exceeds the cleaning threshold.

use std::collections::HashSet;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::audio::SystemSet;
use crate::error::{Error, Result};
use crate::seed::SeedSplitter;

/// MOS difference threshold used unless configured otherwise.
pub const DEFAULT_DELTA: f64 = 0.3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledPair {
    pub utterance_id: String,
    pub system_a: String,
    pub system_b: String,
    pub mos_a: f64,
    pub mos_b: f64,
    /// 1 when the first clip has the higher MOS.
    pub target: u8,
}

impl LabeledPair {
    pub fn target_f64(&self) -> f64 {
        f64::from(self.target)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Validation,
    Test,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairSet {
    pub pairs: Vec<LabeledPair>,
    pub delta: f64,
    pub split: Split,
}

impl PairSet {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn with_split(mut self, split: Split) -> Self {
        self.split = split;
        self
    }

    /// Writes `utterance_id,system_a,system_b,mos_a,mos_b,target`.
    pub fn write_manifest(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let err = |e: csv::Error| Error::Data(format!("{}: {e}", path.display()));
        let mut w = csv::Writer::from_path(path).map_err(err)?;
        for p in &self.pairs {
            w.serialize(p).map_err(err)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    /// Reads a manifest, re-checking labels against the cleaning rule.
    pub fn read_manifest(path: impl AsRef<Path>, delta: f64, split: Split) -> Result<PairSet> {
        let path = path.as_ref();
        let mut r = csv::Reader::from_path(path)
            .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
        let mut pairs = Vec::new();
        let mut seen = HashSet::new();
        for row in r.deserialize() {
            let p: LabeledPair =
                row.map_err(|e| Error::Label(format!("{}: {e}", path.display())))?;
            if p.system_a == p.system_b {
                return Err(Error::Label(format!("pair compares {} with itself", p.system_a)));
            }
            let expected = u8::from(p.mos_a > p.mos_b);
            if p.target != expected || (p.mos_a - p.mos_b).abs() <= delta {
                return Err(Error::Label(format!(
                    "pair ({}, {}, {}) violates labeling or delta={delta}",
                    p.utterance_id, p.system_a, p.system_b
                )));
            }
            if !seen.insert((p.utterance_id.clone(), p.system_a.clone(), p.system_b.clone())) {
                return Err(Error::Label(format!(
                    "duplicate pair ({}, {}, {})",
                    p.utterance_id, p.system_a, p.system_b
                )));
            }
            pairs.push(p);
        }
        Ok(PairSet { pairs, delta, split })
    }
}

/// Emits both orderings of every system pair per utterance with
/// `|mos_a - mos_b| > delta`. Exact ties are always dropped.
pub fn build_pairs(set: &SystemSet, delta: f64) -> Result<PairSet> {
    if !(delta >= 0.0) || !delta.is_finite() {
        return Err(Error::Config(format!("delta must be finite and >= 0, got {delta}")));
    }
    let mos = set
        .mos()
        .ok_or_else(|| Error::Label("system set has no MOS labels".into()))?;
    let systems = set.system_ids();
    let mut pairs = Vec::new();
    for (i, utt) in set.utterance_ids().iter().enumerate() {
        for a in 0..systems.len() {
            for b in a + 1..systems.len() {
                let (ma, mb) = (mos[a][i], mos[b][i]);
                if (ma - mb).abs() <= delta || ma == mb {
                    continue;
                }
                for (x, y, mx, my) in [(a, b, ma, mb), (b, a, mb, ma)] {
                    pairs.push(LabeledPair {
                        utterance_id: utt.clone(),
                        system_a: systems[x].clone(),
                        system_b: systems[y].clone(),
                        mos_a: mx,
                        mos_b: my,
                        target: u8::from(mx > my),
                    });
                }
            }
        }
    }
    Ok(PairSet {
        pairs,
        delta,
        split: Split::Train,
    })
}

/// Utterance-level split into `(train, validation)`; validation gets
/// `n_val_utts` utterances drawn by `seed`. Both halves keep the original
/// utterance order.
pub fn split_validation(
    set: &SystemSet,
    n_val_utts: usize,
    seed: u64,
) -> Result<(SystemSet, SystemSet)> {
    let m = set.num_utterances();
    if n_val_utts == 0 || n_val_utts >= m {
        return Err(Error::Config(format!(
            "validation size {n_val_utts} must be in 1..{m}"
        )));
    }
    let mut order: Vec<usize> = (0..m).collect();
    order.shuffle(&mut SeedSplitter::new(seed).rng("split"));
    let mut val: Vec<usize> = order[..n_val_utts].to_vec();
    let mut train: Vec<usize> = order[n_val_utts..].to_vec();
    val.sort_unstable();
    train.sort_unstable();
    Ok((set.select_utterances(&train)?, set.select_utterances(&val)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::audio::AudioClip;
    use proptest::prelude::*;

    fn set_with_mos(mos: Vec<Vec<f64>>) -> SystemSet {
        let k = mos.len();
        let m = mos[0].len();
        let clip = AudioClip::new(vec![0.0; 8], 16_000).unwrap();
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

    #[test]
    fn delta_filter_example() {
        // A=4.0, B=3.8, C=3.0 with delta 0.3: |A-B| = 0.2 is dropped
        let set = set_with_mos(vec![vec![4.0], vec![3.8], vec![3.0]]);
        let pairs = build_pairs(&set, 0.3).unwrap();
        assert_eq!(pairs.len(), 4);
        let kept: HashSet<(String, String)> = pairs
            .pairs
            .iter()
            .map(|p| (p.system_a.clone(), p.system_b.clone()))
            .collect();
        for (a, b) in [("s0", "s2"), ("s2", "s0"), ("s1", "s2"), ("s2", "s1")] {
            assert!(kept.contains(&(a.to_string(), b.to_string())));
        }
        let ac = pairs.pairs.iter().find(|p| p.system_a == "s0").unwrap();
        assert_eq!(ac.target, 1);
    }

    #[test]
    fn zero_delta_emits_all_permutations() {
        let set = set_with_mos(vec![vec![1.0, 2.0], vec![2.0, 3.0], vec![3.0, 4.0], vec![4.5, 1.5]]);
        assert_eq!(build_pairs(&set, 0.0).unwrap().len(), 2 * 4 * 3);
    }

    #[test]
    fn ties_dropped_at_zero_delta() {
        let set = set_with_mos(vec![vec![3.0], vec![3.0]]);
        assert!(build_pairs(&set, 0.0).unwrap().is_empty());
    }

    #[test]
    fn huge_delta_empties_set() {
        let set = set_with_mos(vec![vec![1.0], vec![5.0]]);
        assert!(build_pairs(&set, 4.5).unwrap().is_empty());
    }

    #[test]
    fn missing_mos_is_label_error() {
        let set = set_with_mos(vec![vec![1.0]]).with_mos(None).unwrap();
        assert!(matches!(build_pairs(&set, 0.3), Err(Error::Label(_))));
    }

    #[test]
    fn split_partitions_utterances() {
        let m = 300;
        let set = set_with_mos(vec![vec![3.0; m]]);
        let (train, val) = split_validation(&set, 8, 11).unwrap();
        assert_eq!((train.num_utterances(), val.num_utterances()), (292, 8));
        let t: HashSet<_> = train.utterance_ids().iter().collect();
        let v: HashSet<_> = val.utterance_ids().iter().collect();
        assert!(t.is_disjoint(&v));
        assert_eq!(t.len() + v.len(), m);
        let (train2, val2) = split_validation(&set, 8, 11).unwrap();
        assert_eq!(train2.utterance_ids(), train.utterance_ids());
        assert_eq!(val2.utterance_ids(), val.utterance_ids());
        assert!(split_validation(&set, 300, 1).is_err());
    }

    #[test]
    fn manifest_round_trip() {
        let set = set_with_mos(vec![vec![4.0, 2.0], vec![3.0, 2.5], vec![1.0, 4.9]]);
        let pairs = build_pairs(&set, 0.3).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("pairs.csv");
        pairs.write_manifest(&path).unwrap();
        let header = std::fs::read_to_string(&path).unwrap();
        assert!(header.starts_with("utterance_id,system_a,system_b,mos_a,mos_b,target\n"));
        assert_eq!(PairSet::read_manifest(&path, 0.3, Split::Train).unwrap(), pairs);
        assert!(PairSet::read_manifest(&path, 1.5, Split::Train).is_err());
    }

    proptest! {
        #[test]
        fn cleaning_invariants(
            mos in prop::collection::vec(prop::collection::vec(1.0f64..5.0, 3), 2..6),
            d1 in 0.0f64..2.0,
            d2 in 0.0f64..2.0,
        ) {
            let set = set_with_mos(mos);
            let (lo, hi) = if d1 <= d2 { (d1, d2) } else { (d2, d1) };
            let p_lo = build_pairs(&set, lo).unwrap();
            let p_hi = build_pairs(&set, hi).unwrap();
            prop_assert!(p_lo.len() >= p_hi.len());
            for p in &p_hi.pairs {
                prop_assert!((p.mos_a - p.mos_b).abs() > hi);
                let rev = p_hi.pairs.iter().find(|q| {
                    q.utterance_id == p.utterance_id && q.system_a == p.system_b && q.system_b == p.system_a
                }).unwrap();
                prop_assert_eq!(p.target, 1 - rev.target);
            }
            let unique: HashSet<_> = p_lo.pairs.iter()
                .map(|p| (&p.utterance_id, &p.system_a, &p.system_b)).collect();
            prop_assert_eq!(unique.len(), p_lo.len());
        }
    }
}
