//! ROC / AUC for distance scores and aggregation across trials.
//!
//! Scores are distances, so a probe is accepted as known at threshold `t`
//! when `score <= t`. TPR is the accepted fraction of known probes and FPR
//! the accepted fraction of unknown probes.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::recognition::check_scores;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    pub fpr: f64,
    pub tpr: f64,
    pub threshold: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RocReport {
    pub points: Vec<RocPoint>,
    pub auc: f64,
}

impl Default for RocReport {
    fn default() -> Self {
        RocReport {
            points: Vec::new(),
            auc: f64::NAN,
        }
    }
}

impl RocReport {
    /// `# auc <value>` followed by a `fpr,tpr,threshold` header and one line
    /// per point. The first point carries a `-inf` threshold.
    pub fn to_text(&self) -> String {
        let mut out = String::with_capacity(self.points.len() * 32 + 32);
        writeln!(out, "# auc {}", self.auc).unwrap();
        out.push_str("fpr,tpr,threshold\n");
        for p in &self.points {
            writeln!(out, "{},{},{}", p.fpr, p.tpr, p.threshold).unwrap();
        }
        out
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }
}

fn check_lists(known: &[f64], unknown: &[f64]) -> Result<()> {
    if known.is_empty() {
        return Err(Error::Empty("known score list"));
    }
    if unknown.is_empty() {
        return Err(Error::Empty("unknown score list"));
    }
    check_scores(known)?;
    check_scores(unknown)
}

/// Step ROC over every distinct score, starting from `(0, 0)`; AUC by the
/// trapezoid rule. Equal scores flip together, so ties produce diagonal
/// segments.
pub fn roc(known_scores: &[f64], unknown_scores: &[f64]) -> Result<RocReport> {
    check_lists(known_scores, unknown_scores)?;
    let mut known = known_scores.to_vec();
    let mut unknown = unknown_scores.to_vec();
    known.sort_by(f64::total_cmp);
    unknown.sort_by(f64::total_cmp);
    let (nk, nu) = (known.len() as f64, unknown.len() as f64);

    let mut points = vec![RocPoint {
        fpr: 0.0,
        tpr: 0.0,
        threshold: f64::NEG_INFINITY,
    }];
    let (mut i, mut j) = (0, 0);
    while i < known.len() || j < unknown.len() {
        let t = match (known.get(i), unknown.get(j)) {
            (Some(&k), Some(&u)) => k.min(u),
            (Some(&k), None) => k,
            (None, Some(&u)) => u,
            (None, None) => unreachable!(),
        };
        while i < known.len() && known[i] <= t {
            i += 1;
        }
        while j < unknown.len() && unknown[j] <= t {
            j += 1;
        }
        points.push(RocPoint {
            fpr: j as f64 / nu,
            tpr: i as f64 / nk,
            threshold: t,
        });
    }
    let auc = trapezoid(&points);
    Ok(RocReport { points, auc })
}

fn trapezoid(points: &[RocPoint]) -> f64 {
    points
        .windows(2)
        .map(|w| (w[1].fpr - w[0].fpr) * (w[0].tpr + w[1].tpr) / 2.0)
        .sum()
}

/// Mann-Whitney form of the AUC: the fraction of (known, unknown) pairs with
/// the known score strictly smaller, ties counting one half.
pub fn auc_mw(known_scores: &[f64], unknown_scores: &[f64]) -> Result<f64> {
    check_lists(known_scores, unknown_scores)?;
    let mut wins = 0.0;
    for &k in known_scores {
        for &u in unknown_scores {
            if k < u {
                wins += 1.0;
            } else if k == u {
                wins += 0.5;
            }
        }
    }
    Ok(wins / (known_scores.len() as f64 * unknown_scores.len() as f64))
}

/// AUC statistics over repeated trials. `std` is the sample standard
/// deviation (n - 1 denominator), 0 for a single trial.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialAggregate {
    pub aucs: Vec<f64>,
    pub mean: f64,
    pub std: f64,
}

pub fn aggregate(aucs: &[f64]) -> Result<TrialAggregate> {
    if aucs.is_empty() {
        return Err(Error::Empty("AUC list"));
    }
    // Welford
    let (mut mean, mut m2) = (0.0, 0.0);
    for (i, &x) in aucs.iter().enumerate() {
        let delta = x - mean;
        mean += delta / (i + 1) as f64;
        m2 += delta * (x - mean);
    }
    let std = if aucs.len() > 1 {
        (m2 / (aucs.len() - 1) as f64).sqrt()
    } else {
        0.0
    };
    Ok(TrialAggregate {
        aucs: aucs.to_vec(),
        mean,
        std,
    })
}
