//! Balanced positive/negative training pairs drawn from the gallery train set.
//!
//! Both generators walk the train samples in split order and, for each anchor
//! `x`, emit `z` rounds of one negative and one positive pair. Partners are
//! drawn uniformly with replacement, so repeated pairs (and `(x, x)` positives
//! for single-sample identities) can occur.
//!
//! * [`pair_p1`] runs the `z` rounds once for every other known identity:
//!   `n * 2(k - 1) * z` pairs.
//! * [`pair_p2`] runs `z` rounds per anchor, each drawing the negative partner
//!   from a uniformly chosen other identity: `n * 2 * z` pairs.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{FeatureStore, ProtocolSplit};
use crate::error::{Error, Result};
use crate::rng::{self, SeededRng};
use crate::siamese::PairLabel;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Pair {
    pub a: usize,
    pub b: usize,
    pub label: PairLabel,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PairAlgorithm {
    P1,
    P2,
}

impl std::str::FromStr for PairAlgorithm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "P1" | "p1" => Ok(PairAlgorithm::P1),
            "P2" | "p2" => Ok(PairAlgorithm::P2),
            _ => Err(Error::InvalidArgument(format!(
                "unknown pairing algorithm {s:?} (expected P1 or P2)"
            ))),
        }
    }
}

impl std::fmt::Display for PairAlgorithm {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            PairAlgorithm::P1 => "P1",
            PairAlgorithm::P2 => "P2",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairSet {
    pub pairs: Vec<Pair>,
    pub z: usize,
    pub algorithm: PairAlgorithm,
    pub seed: u64,
}

impl PairSet {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn count(&self, label: PairLabel) -> usize {
        self.pairs.iter().filter(|p| p.label == label).count()
    }

    /// One `a,b,label` line per pair (label 0 = same, 1 = different).
    pub fn to_text(&self) -> String {
        let mut out = String::with_capacity(self.pairs.len() * 12);
        for p in &self.pairs {
            writeln!(out, "{},{},{}", p.a, p.b, p.label.as_u8()).unwrap();
        }
        out
    }

    pub fn parse_pairs(text: &str) -> Result<Vec<Pair>> {
        text.lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty())
            .map(|(i, line)| {
                let bad = || Error::parse(i + 1, format!("expected `a,b,label`, found {line:?}"));
                let mut f = line.trim().split(',');
                let (Some(a), Some(b), Some(l), None) = (f.next(), f.next(), f.next(), f.next())
                else {
                    return Err(bad());
                };
                Ok(Pair {
                    a: a.parse().map_err(|_| bad())?,
                    b: b.parse().map_err(|_| bad())?,
                    label: l
                        .parse()
                        .ok()
                        .and_then(PairLabel::from_u8)
                        .ok_or_else(bad)?,
                })
            })
            .collect()
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }
}

/// Train samples of each known identity plus the identity group of every
/// train sample.
struct Gallery {
    groups: Vec<Vec<usize>>,
    anchors: Vec<(usize, usize)>,
}

impl Gallery {
    fn new(split: &ProtocolSplit, store: &FeatureStore) -> Result<Self> {
        let groups = split.train_by_identity(store);
        if groups.len() < 2 {
            return Err(Error::TooFewIdentities(groups.len()));
        }
        if let Some(pos) = groups.iter().position(Vec::is_empty) {
            return Err(Error::InvalidArgument(format!(
                "known identity {:?} has no train samples",
                store.identities()[split.known_ids[pos]].name
            )));
        }
        for (pos, g) in groups.iter().enumerate() {
            if g.len() == 1 {
                log::warn!(
                    "identity {:?} has a single train sample; its positive pairs are self-pairs",
                    store.identities()[split.known_ids[pos]].name
                );
            }
        }
        let anchors = split
            .train
            .iter()
            .map(|&s| {
                let id = store.identity_of(s);
                (s, split.known_ids.binary_search(&id).unwrap())
            })
            .collect();
        Ok(Gallery { groups, anchors })
    }

    fn draw(&self, rng: &mut SeededRng, group: usize) -> usize {
        let g = &self.groups[group];
        g[rng.gen_range(0..g.len())]
    }
}

fn push_round(pairs: &mut Vec<Pair>, x: usize, negative: usize, positive: usize) {
    pairs.push(Pair {
        a: x,
        b: negative,
        label: PairLabel::Different,
    });
    pairs.push(Pair {
        a: x,
        b: positive,
        label: PairLabel::Same,
    });
}

/// Every train sample against `z` random samples of each other known
/// identity, balanced by as many same-identity pairs.
pub fn pair_p1(
    split: &ProtocolSplit,
    store: &FeatureStore,
    z: usize,
    rng_seed: u64,
) -> Result<PairSet> {
    let gallery = Gallery::new(split, store)?;
    let k = gallery.groups.len();
    let mut rng = rng::seeded(rng_seed);
    let mut pairs = Vec::with_capacity(gallery.anchors.len() * 2 * (k - 1) * z);
    for &(x, own) in &gallery.anchors {
        for other in (0..k).filter(|&i| i != own) {
            for _ in 0..z {
                let neg = gallery.draw(&mut rng, other);
                let pos = gallery.draw(&mut rng, own);
                push_round(&mut pairs, x, neg, pos);
            }
        }
    }
    Ok(PairSet {
        pairs,
        z,
        algorithm: PairAlgorithm::P1,
        seed: rng_seed,
    })
}

/// Every train sample against `z` random samples of randomly chosen other
/// known identities, balanced by as many same-identity pairs.
pub fn pair_p2(
    split: &ProtocolSplit,
    store: &FeatureStore,
    z: usize,
    rng_seed: u64,
) -> Result<PairSet> {
    let gallery = Gallery::new(split, store)?;
    let k = gallery.groups.len();
    let mut rng = rng::seeded(rng_seed);
    let mut pairs = Vec::with_capacity(gallery.anchors.len() * 2 * z);
    for &(x, own) in &gallery.anchors {
        for _ in 0..z {
            // uniform over the k - 1 other identities
            let mut other = rng.gen_range(0..k - 1);
            if other >= own {
                other += 1;
            }
            let neg = gallery.draw(&mut rng, other);
            let pos = gallery.draw(&mut rng, own);
            push_round(&mut pairs, x, neg, pos);
        }
    }
    Ok(PairSet {
        pairs,
        z,
        algorithm: PairAlgorithm::P2,
        seed: rng_seed,
    })
}

pub fn make_pairs(
    algorithm: PairAlgorithm,
    split: &ProtocolSplit,
    store: &FeatureStore,
    z: usize,
    rng_seed: u64,
) -> Result<PairSet> {
    match algorithm {
        PairAlgorithm::P1 => pair_p1(split, store, z, rng_seed),
        PairAlgorithm::P2 => pair_p2(split, store, z, rng_seed),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{make_split, SplitSpec};
    use proptest::prelude::*;
    use std::collections::HashMap;

    /// `counts[i]` samples for identity i; all identities known, `train` takes
    /// every sample but the last of each identity.
    fn gallery_split(counts: &[usize]) -> (FeatureStore, ProtocolSplit) {
        let mut store = FeatureStore::new(1).unwrap();
        for (id, &n) in counts.iter().enumerate() {
            for j in 0..n + 1 {
                store.push(format!("g{id}"), vec![j as f64]).unwrap();
            }
        }
        let mut train = Vec::new();
        let mut test_known = Vec::new();
        for ident in store.identities() {
            let (t, rest) = ident.samples.split_at(ident.samples.len() - 1);
            train.extend_from_slice(t);
            test_known.extend_from_slice(rest);
        }
        let split = ProtocolSplit {
            known_ids: (0..counts.len()).collect(),
            unknown_ids: vec![],
            train,
            test_known,
            test_unknown: vec![],
            seed: 0,
        };
        (store, split)
    }

    fn check_labels(store: &FeatureStore, set: &PairSet) {
        for p in &set.pairs {
            let same = store.identity_of(p.a) == store.identity_of(p.b);
            assert_eq!(same, p.label == PairLabel::Same, "{p:?}");
        }
    }

    #[test]
    fn p1_count_ten_samples_five_ids() {
        let (store, split) = gallery_split(&[2; 5]);
        let set = pair_p1(&split, &store, 2, 1).unwrap();
        assert_eq!(set.len(), 160);
        assert_eq!(set.count(PairLabel::Same), 80);
        assert_eq!(set.count(PairLabel::Different), 80);
        check_labels(&store, &set);
    }

    #[test]
    fn p1_single_samples_force_self_pairs() {
        let (store, split) = gallery_split(&[1, 1]);
        let set = pair_p1(&split, &store, 1, 4).unwrap();
        assert_eq!(set.len(), 4);
        for p in set.pairs.iter().filter(|p| p.label == PairLabel::Same) {
            assert_eq!(p.a, p.b);
        }
        check_labels(&store, &set);
    }

    #[test]
    fn p2_count_and_zero_z() {
        let (store, split) = gallery_split(&[2; 5]);
        let set = pair_p2(&split, &store, 2, 1).unwrap();
        assert_eq!(set.len(), 40);
        assert_eq!(set.count(PairLabel::Same), 20);
        check_labels(&store, &set);
        assert!(pair_p2(&split, &store, 0, 1).unwrap().is_empty());
        assert!(pair_p1(&split, &store, 0, 1).unwrap().is_empty());
    }

    #[test]
    fn one_identity_cannot_make_negatives() {
        let (store, split) = gallery_split(&[3]);
        assert!(matches!(
            pair_p1(&split, &store, 1, 0),
            Err(Error::TooFewIdentities(1))
        ));
        assert!(matches!(
            pair_p2(&split, &store, 1, 0),
            Err(Error::TooFewIdentities(1))
        ));
    }

    #[test]
    fn p2_negative_identities_are_uniform() {
        // k = 5; count the identity of every negative partner of anchor 0
        // across 1000 seeds and run a chi-square goodness-of-fit test against
        // the uniform distribution over the 4 other identities.
        let (store, split) = gallery_split(&[3; 5]);
        let anchor = split.train[0];
        let own = store.identity_of(anchor);
        let mut counts: HashMap<usize, usize> = HashMap::new();
        for seed in 0..1000 {
            let set = pair_p2(&split, &store, 1, seed).unwrap();
            let neg = set
                .pairs
                .iter()
                .find(|p| p.a == anchor && p.label == PairLabel::Different)
                .unwrap();
            *counts.entry(store.identity_of(neg.b)).or_default() += 1;
        }
        assert!(!counts.contains_key(&own));
        assert_eq!(counts.len(), 4);
        let expected = 1000.0 / 4.0;
        let chi2: f64 = counts
            .values()
            .map(|&c| (c as f64 - expected).powi(2) / expected)
            .sum();
        // 3 degrees of freedom, p = 0.001
        assert!(chi2 < 16.266, "chi2 {chi2}, counts {counts:?}");
    }

    #[test]
    fn pairs_only_use_train_samples() {
        let store = crate::dataset::generate_synthetic(6, 5, 2, 1.0, 3).unwrap();
        let split = make_split(&store, &SplitSpec::absolute(4).unwrap(), 0.5, 8).unwrap();
        for algo in [PairAlgorithm::P1, PairAlgorithm::P2] {
            let set = make_pairs(algo, &split, &store, 3, 2).unwrap();
            for p in &set.pairs {
                assert!(split.train.contains(&p.a) && split.train.contains(&p.b));
            }
        }
    }

    #[test]
    fn text_round_trip() {
        let (store, split) = gallery_split(&[2, 3]);
        let set = pair_p1(&split, &store, 2, 9).unwrap();
        assert_eq!(PairSet::parse_pairs(&set.to_text()).unwrap(), set.pairs);
        assert!(PairSet::parse_pairs("1,2\n").is_err());
        assert!(PairSet::parse_pairs("1,2,3\n").is_err());
    }

    #[test]
    fn algorithm_names_parse() {
        assert_eq!("P1".parse::<PairAlgorithm>().unwrap(), PairAlgorithm::P1);
        assert_eq!("p2".parse::<PairAlgorithm>().unwrap(), PairAlgorithm::P2);
        assert!("P3".parse::<PairAlgorithm>().is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn counts_balance_and_anchor_coverage(
            counts in proptest::collection::vec(1usize..5, 2..7),
            z in 0usize..4,
            seed in any::<u64>(),
        ) {
            let (store, split) = gallery_split(&counts);
            let n = split.train.len();
            let k = counts.len();
            for algo in [PairAlgorithm::P1, PairAlgorithm::P2] {
                let set = make_pairs(algo, &split, &store, z, seed).unwrap();
                let per_anchor = match algo {
                    PairAlgorithm::P1 => 2 * (k - 1) * z,
                    PairAlgorithm::P2 => 2 * z,
                };
                prop_assert_eq!(set.len(), n * per_anchor);
                prop_assert_eq!(set.count(PairLabel::Same), set.count(PairLabel::Different));
                let mut seen: HashMap<usize, usize> = HashMap::new();
                for p in &set.pairs {
                    *seen.entry(p.a).or_default() += 1;
                }
                for &x in &split.train {
                    prop_assert_eq!(seen.get(&x).copied().unwrap_or(0), per_anchor);
                }
                check_labels(&store, &set);
                prop_assert_eq!(&make_pairs(algo, &split, &store, z, seed).unwrap(), &set);
            }
        }
    }
}
