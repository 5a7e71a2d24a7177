//! Open-set decision: a probe's score is its smallest learned distance to any
//! gallery train sample; it is accepted as Known when the score is at most the
//! threshold.
//!
//! Gallery embeddings are computed once. This gives the same numbers as
//! evaluating the pairwise distance for every (probe, gallery sample) pair,
//! since that distance is the norm of a difference of per-input embeddings.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{FeatureStore, ProtocolSplit};
use crate::error::{Error, Result};
use crate::siamese::{euclidean, SiameseNet};

#[derive(Debug, Clone, PartialEq)]
pub struct GalleryEntry {
    pub identity: String,
    /// Index of the sample in the store the gallery was built from.
    pub sample_index: usize,
    pub embedding: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GalleryIndex {
    entries: Vec<GalleryEntry>,
}

impl GalleryIndex {
    pub fn from_entries(entries: Vec<GalleryEntry>) -> Result<Self> {
        let Some(first) = entries.first() else {
            return Err(Error::Empty("gallery"));
        };
        let len = first.embedding.len();
        if let Some(bad) = entries.iter().find(|e| e.embedding.len() != len) {
            return Err(Error::DimensionMismatch {
                expected: len,
                actual: bad.embedding.len(),
            });
        }
        Ok(GalleryIndex { entries })
    }

    pub fn entries(&self) -> &[GalleryEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Minimum distance from an already embedded probe. Ties keep the earliest
    /// entry.
    pub fn nearest(&self, embedding: &[f64]) -> Result<ProbeScore> {
        let len = self.entries[0].embedding.len();
        if embedding.len() != len {
            return Err(Error::DimensionMismatch {
                expected: len,
                actual: embedding.len(),
            });
        }
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for (i, e) in self.entries.iter().enumerate() {
            let d = euclidean(embedding, &e.embedding);
            if d < best_d {
                best = i;
                best_d = d;
            }
        }
        let entry = &self.entries[best];
        Ok(ProbeScore {
            score: best_d,
            nearest_identity: entry.identity.clone(),
            nearest_index: entry.sample_index,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeScore {
    pub score: f64,
    pub nearest_identity: String,
    pub nearest_index: usize,
}

/// Embeds every train sample of `split`.
pub fn build_gallery(
    net: &SiameseNet,
    split: &ProtocolSplit,
    store: &FeatureStore,
) -> Result<GalleryIndex> {
    gallery_from_samples(net, store, &split.train)
}

/// Embeds the given samples of `store`.
pub fn gallery_from_samples(
    net: &SiameseNet,
    store: &FeatureStore,
    samples: &[usize],
) -> Result<GalleryIndex> {
    if samples.is_empty() {
        return Err(Error::Empty("gallery train set"));
    }
    let entries = samples
        .iter()
        .map(|&s| {
            Ok(GalleryEntry {
                identity: store.identity_name(s).to_owned(),
                sample_index: s,
                embedding: net.forward(store.vector(s))?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    GalleryIndex::from_entries(entries)
}

pub fn score_probe(index: &GalleryIndex, net: &SiameseNet, probe: &[f64]) -> Result<ProbeScore> {
    index.nearest(&net.forward(probe)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Decision {
    Known,
    Unknown,
}

/// Known iff `score <= threshold`.
pub fn decide(score: f64, threshold: f64) -> Decision {
    if score <= threshold {
        Decision::Known
    } else {
        Decision::Unknown
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum ThresholdPolicy {
    /// Minimize `|FPR - FNR|`.
    EqualError,
    /// Largest threshold whose false positive rate is at most the target.
    TargetFpr(f64),
}

/// Chooses a decision threshold from labeled scores.
///
/// Candidates are the midpoints between adjacent distinct pooled scores, plus
/// a lower sentinel just below the smallest score (accept nothing) and the
/// largest score itself (accept everything). FPR is the fraction of unknown
/// scores `<= t`; FNR the fraction of known scores `> t`. Equal-error ties
/// go to the smallest candidate.
pub fn calibrate_threshold(known: &[f64], unknown: &[f64], policy: ThresholdPolicy) -> Result<f64> {
    if known.is_empty() {
        return Err(Error::Empty("known score list"));
    }
    if unknown.is_empty() {
        return Err(Error::Empty("unknown score list"));
    }
    check_scores(known)?;
    check_scores(unknown)?;
    let candidates = threshold_candidates(known, unknown);
    let rate = |scores: &[f64], t: f64| {
        scores.iter().filter(|&&s| s <= t).count() as f64 / scores.len() as f64
    };
    match policy {
        ThresholdPolicy::EqualError => {
            let mut best = candidates[0];
            let mut best_gap = f64::INFINITY;
            for &t in &candidates {
                let gap = (rate(unknown, t) - (1.0 - rate(known, t))).abs();
                if gap < best_gap {
                    best = t;
                    best_gap = gap;
                }
            }
            Ok(best)
        }
        ThresholdPolicy::TargetFpr(alpha) => {
            if !(0.0..=1.0).contains(&alpha) {
                return Err(Error::InvalidArgument(format!(
                    "target FPR must be in [0, 1], got {alpha}"
                )));
            }
            // the lower sentinel always has FPR 0
            Ok(candidates
                .iter()
                .rev()
                .copied()
                .find(|&t| rate(unknown, t) <= alpha)
                .unwrap_or(candidates[0]))
        }
    }
}

fn threshold_candidates(known: &[f64], unknown: &[f64]) -> Vec<f64> {
    let mut pooled: Vec<f64> = known.iter().chain(unknown).copied().collect();
    pooled.sort_by(f64::total_cmp);
    pooled.dedup();
    let mut out = Vec::with_capacity(pooled.len() + 1);
    out.push(next_below(pooled[0]));
    out.extend(pooled.windows(2).map(|w| w[0] + (w[1] - w[0]) / 2.0));
    out.push(pooled[pooled.len() - 1]);
    out
}

fn next_below(x: f64) -> f64 {
    if x == 0.0 {
        -f64::from_bits(1)
    } else if x > 0.0 {
        f64::from_bits(x.to_bits() - 1)
    } else {
        f64::from_bits(x.to_bits() + 1)
    }
}

pub(crate) fn check_scores(scores: &[f64]) -> Result<()> {
    match scores.iter().find(|s| s.is_nan()) {
        Some(_) => Err(Error::InvalidArgument("scores must not be NaN".into())),
        None => Ok(()),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Truth {
    Known,
    Unknown,
}

impl Truth {
    pub fn as_str(self) -> &'static str {
        match self {
            Truth::Known => "known",
            Truth::Unknown => "unknown",
        }
    }
}

/// One line of a scores file: `probe_id,truth,score,nearest_identity`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRecord {
    pub probe_id: String,
    pub truth: Truth,
    pub score: f64,
    pub nearest_identity: String,
}

/// Scores every known and unknown test probe of a split. Probe ids are store
/// sample indices.
pub fn score_split(
    index: &GalleryIndex,
    net: &SiameseNet,
    split: &ProtocolSplit,
    store: &FeatureStore,
) -> Result<Vec<ScoreRecord>> {
    let probes: Vec<(usize, Truth)> = split
        .test_known
        .iter()
        .map(|&s| (s, Truth::Known))
        .chain(split.test_unknown.iter().map(|&s| (s, Truth::Unknown)))
        .collect();
    probes
        .par_iter()
        .map(|&(s, truth)| {
            let ps = score_probe(index, net, store.vector(s))?;
            Ok(ScoreRecord {
                probe_id: s.to_string(),
                truth,
                score: ps.score,
                nearest_identity: ps.nearest_identity,
            })
        })
        .collect()
}

/// Splits records into (known scores, unknown scores).
pub fn partition_scores(records: &[ScoreRecord]) -> (Vec<f64>, Vec<f64>) {
    let mut known = Vec::new();
    let mut unknown = Vec::new();
    for r in records {
        match r.truth {
            Truth::Known => known.push(r.score),
            Truth::Unknown => unknown.push(r.score),
        }
    }
    (known, unknown)
}

pub fn scores_to_text(records: &[ScoreRecord]) -> String {
    let mut out = String::with_capacity(records.len() * 40);
    for r in records {
        writeln!(
            out,
            "{},{},{},{}",
            r.probe_id,
            r.truth.as_str(),
            r.score,
            r.nearest_identity
        )
        .unwrap();
    }
    out
}

pub fn parse_scores(text: &str) -> Result<Vec<ScoreRecord>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let err = |m: &str| Error::parse(i + 1, format!("{m}: {line:?}"));
        let fields: Vec<&str> = line.split(',').collect();
        let [probe_id, truth, score, nearest] = fields[..] else {
            return Err(err("expected `probe_id,truth,score,nearest_identity`"));
        };
        let truth = match truth {
            "known" => Truth::Known,
            "unknown" => Truth::Unknown,
            _ => return Err(err("truth must be `known` or `unknown`")),
        };
        let score: f64 = score.parse().map_err(|_| err("bad score"))?;
        if score.is_nan() {
            return Err(err("score is NaN"));
        }
        out.push(ScoreRecord {
            probe_id: probe_id.to_owned(),
            truth,
            score,
            nearest_identity: nearest.to_owned(),
        });
    }
    Ok(out)
}

pub fn write_scores(records: &[ScoreRecord], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, scores_to_text(records)).map_err(|e| Error::io(path, e))
}

pub fn read_scores(path: impl AsRef<Path>) -> Result<Vec<ScoreRecord>> {
    let path = path.as_ref();
    parse_scores(&fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
}
