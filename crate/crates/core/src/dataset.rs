//! Labeled feature vectors, the feature-file format, synthetic stores and
//! open-set protocol splits.
//!
//! Feature file format (text, UTF-8):
//!
//! ```text
//! # comment lines start with '#'
//! dim 3
//! alice,1,0,0
//! bob,0,1,0
//! ```
//!
//! The first non-comment line is the `dim <D>` header. Every other nonempty,
//! non-comment line is `<identity>,<v1>,...,<vD>`. Values are written with
//! Rust's shortest round-trip formatting, so write/read is lossless.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

/// Default feature dimensionality (VGG-Face descriptor length).
pub const DEFAULT_FEATURE_DIM: usize = 2622;

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub identity: String,
    pub vector: Vec<f64>,
}

/// One identity and the positions of its samples in the store, in file order.
#[derive(Debug, Clone, PartialEq)]
pub struct Identity {
    pub name: String,
    pub samples: Vec<usize>,
}

/// Labeled feature vectors grouped by identity.
///
/// Identities are kept in order of first appearance so that anything derived
/// from a store (splits, pairs) does not depend on hash ordering.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureStore {
    dim: usize,
    samples: Vec<Sample>,
    identities: Vec<Identity>,
    sample_identity: Vec<usize>,
    by_name: HashMap<String, usize>,
}

impl FeatureStore {
    pub fn new(dim: usize) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidArgument(
                "feature dim must be positive".into(),
            ));
        }
        Ok(FeatureStore {
            dim,
            samples: Vec::new(),
            identities: Vec::new(),
            sample_identity: Vec::new(),
            by_name: HashMap::new(),
        })
    }

    /// Builds a store from `(identity, vector)` pairs, checking every vector.
    pub fn from_samples<I, S>(dim: usize, samples: I) -> Result<Self>
    where
        I: IntoIterator<Item = (S, Vec<f64>)>,
        S: Into<String>,
    {
        let mut store = FeatureStore::new(dim)?;
        for (identity, vector) in samples {
            store.push(identity, vector)?;
        }
        Ok(store)
    }

    /// Appends a sample and returns its index.
    pub fn push(&mut self, identity: impl Into<String>, vector: Vec<f64>) -> Result<usize> {
        let identity = identity.into();
        if vector.len() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                actual: vector.len(),
            });
        }
        if let Some(pos) = vector.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "non-finite value {} at position {}",
                vector[pos],
                pos + 1
            )));
        }
        if identity.is_empty() || identity.contains(',') || identity.contains('\n') {
            return Err(Error::InvalidArgument(format!(
                "identity {identity:?} must be nonempty and contain no comma or newline"
            )));
        }
        let index = self.samples.len();
        let id_pos = match self.by_name.get(&identity) {
            Some(&pos) => pos,
            None => {
                let pos = self.identities.len();
                self.by_name.insert(identity.clone(), pos);
                self.identities.push(Identity {
                    name: identity.clone(),
                    samples: Vec::new(),
                });
                pos
            }
        };
        self.identities[id_pos].samples.push(index);
        self.sample_identity.push(id_pos);
        self.samples.push(Sample { identity, vector });
        Ok(index)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn sample(&self, index: usize) -> &Sample {
        &self.samples[index]
    }

    pub fn vector(&self, index: usize) -> &[f64] {
        &self.samples[index].vector
    }

    pub fn identities(&self) -> &[Identity] {
        &self.identities
    }

    pub fn identity_count(&self) -> usize {
        self.identities.len()
    }

    /// Position (in [`identities`](Self::identities)) of the identity owning `index`.
    pub fn identity_of(&self, index: usize) -> usize {
        self.sample_identity[index]
    }

    pub fn identity_name(&self, index: usize) -> &str {
        &self.samples[index].identity
    }

    pub fn find_identity(&self, name: &str) -> Option<&Identity> {
        self.by_name.get(name).map(|&pos| &self.identities[pos])
    }

    /// Serializes the store in the text feature-file format.
    pub fn to_text(&self) -> String {
        let mut out = String::with_capacity(self.samples.len() * (self.dim * 8 + 16));
        writeln!(out, "dim {}", self.dim).unwrap();
        for sample in &self.samples {
            out.push_str(&sample.identity);
            for v in &sample.vector {
                write!(out, ",{v}").unwrap();
            }
            out.push('\n');
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut store: Option<FeatureStore> = None;
        for (i, raw) in text.lines().enumerate() {
            let line_no = i + 1;
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some(store) = store.as_mut() else {
                store = Some(parse_header(line, line_no)?);
                continue;
            };
            let mut fields = line.split(',');
            let identity = fields.next().unwrap_or_default().trim();
            if identity.is_empty() {
                return Err(Error::parse(line_no, "missing identity"));
            }
            let vector = fields
                .enumerate()
                .map(|(col, f)| {
                    let v: f64 = f.trim().parse().map_err(|_| {
                        Error::parse(
                            line_no,
                            format!("value {} ({:?}) is not a number", col + 1, f),
                        )
                    })?;
                    if v.is_finite() {
                        Ok(v)
                    } else {
                        Err(Error::parse(
                            line_no,
                            format!("value {} is not finite", col + 1),
                        ))
                    }
                })
                .collect::<Result<Vec<f64>>>()?;
            if vector.len() != store.dim {
                return Err(Error::parse(
                    line_no,
                    format!(
                        "row has {} values, header says dim {}",
                        vector.len(),
                        store.dim
                    ),
                ));
            }
            store
                .push(identity, vector)
                .map_err(|e| Error::parse(line_no, e.to_string()))?;
        }
        store.ok_or_else(|| Error::parse(1, "missing `dim <D>` header"))
    }

    /// Pairwise Euclidean distances between samples in the raw feature space.
    pub fn raw_distance(&self, a: usize, b: usize) -> f64 {
        crate::siamese::euclidean(self.vector(a), self.vector(b))
    }
}

fn parse_header(line: &str, line_no: usize) -> Result<FeatureStore> {
    let mut parts = line.split_whitespace();
    match (parts.next(), parts.next(), parts.next()) {
        (Some("dim"), Some(d), None) => {
            let dim: usize = d
                .parse()
                .map_err(|_| Error::parse(line_no, format!("bad dim {d:?}")))?;
            FeatureStore::new(dim).map_err(|e| Error::parse(line_no, e.to_string()))
        }
        _ => Err(Error::parse(
            line_no,
            format!("expected `dim <D>` header, found {line:?}"),
        )),
    }
}

pub fn load_features(path: impl AsRef<Path>) -> Result<FeatureStore> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    FeatureStore::parse(&text)
}

pub fn write_features(store: &FeatureStore, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, store.to_text()).map_err(|e| Error::io(path, e))
}

/// Parameters for [`generate_synthetic`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub identities: usize,
    pub samples_per_id: usize,
    pub dim: usize,
    pub spread: f64,
    pub seed: u64,
}

/// Draws `k` Gaussian clusters. Centers are standard normal in every
/// coordinate; samples are `center + spread * N(0, I)`. Identities are named
/// `id000`, `id001`, ...
pub fn generate_synthetic(
    k: usize,
    samples_per_id: usize,
    dim: usize,
    spread: f64,
    rng_seed: u64,
) -> Result<FeatureStore> {
    if k == 0 || samples_per_id == 0 || dim == 0 {
        return Err(Error::InvalidArgument(
            "identities, samples_per_id and dim must all be positive".into(),
        ));
    }
    if !(spread >= 0.0 && spread.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "spread must be a finite nonnegative number, got {spread}"
        )));
    }
    let mut rng = rng::seeded(rng_seed);
    let mut store = FeatureStore::new(dim)?;
    let width = (k - 1).to_string().len().max(3);
    for id in 0..k {
        let center: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
        let name = format!("id{id:0width$}");
        for _ in 0..samples_per_id {
            let vector = center
                .iter()
                .map(|c| {
                    let noise: f64 = StandardNormal.sample(&mut rng);
                    c + spread * noise
                })
                .collect();
            store.push(name.clone(), vector)?;
        }
    }
    Ok(store)
}

impl SyntheticSpec {
    pub fn generate(&self) -> Result<FeatureStore> {
        generate_synthetic(
            self.identities,
            self.samples_per_id,
            self.dim,
            self.spread,
            self.seed,
        )
    }
}

/// How many identities become known (enrolled).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KnownCount {
    /// Fraction of all identities in the store, in (0, 1].
    Percentage(f64),
    /// Absolute number of identities.
    Absolute(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub known: KnownCount,
    pub min_samples_per_known: usize,
}

impl SplitSpec {
    pub fn percentage(value: f64) -> Result<Self> {
        SplitSpec {
            known: KnownCount::Percentage(value),
            min_samples_per_known: 2,
        }
        .validated()
    }

    pub fn absolute(value: usize) -> Result<Self> {
        SplitSpec {
            known: KnownCount::Absolute(value),
            min_samples_per_known: 2,
        }
        .validated()
    }

    pub fn with_min_samples(mut self, min: usize) -> Result<Self> {
        self.min_samples_per_known = min;
        self.validated()
    }

    pub fn validated(self) -> Result<Self> {
        match self.known {
            KnownCount::Percentage(p) if !(p > 0.0 && p <= 1.0) => {
                return Err(Error::InvalidArgument(format!(
                    "percentage must be in (0, 1], got {p}"
                )))
            }
            KnownCount::Absolute(0) => {
                return Err(Error::InvalidArgument(
                    "absolute known count must be at least 1".into(),
                ))
            }
            _ => {}
        }
        if self.min_samples_per_known == 0 {
            return Err(Error::InvalidArgument(
                "min_samples_per_known must be at least 1".into(),
            ));
        }
        Ok(self)
    }

    /// Number of known identities for a store with `total` identities.
    /// Percentages round half up.
    pub fn known_count(&self, total: usize) -> usize {
        match self.known {
            KnownCount::Absolute(n) => n,
            // The epsilon keeps products like 0.15 * 10 = 1.4999999999999998
            // on the intended side of the half.
            KnownCount::Percentage(p) => (p * total as f64 + 0.5 + 1e-9).floor() as usize,
        }
    }
}

/// Known/unknown identity partition plus the train/test sample split.
///
/// Identity lists hold positions into [`FeatureStore::identities`], in store
/// order; sample lists hold store sample indices.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProtocolSplit {
    pub known_ids: Vec<usize>,
    pub unknown_ids: Vec<usize>,
    pub train: Vec<usize>,
    pub test_known: Vec<usize>,
    pub test_unknown: Vec<usize>,
    pub seed: u64,
}

impl ProtocolSplit {
    pub fn is_known(&self, identity: usize) -> bool {
        self.known_ids.binary_search(&identity).is_ok()
    }

    /// Train samples grouped per known identity, in `known_ids` order.
    pub fn train_by_identity(&self, store: &FeatureStore) -> Vec<Vec<usize>> {
        let mut groups = vec![Vec::new(); self.known_ids.len()];
        for &s in &self.train {
            let id = store.identity_of(s);
            let pos = self
                .known_ids
                .binary_search(&id)
                .expect("train sample belongs to a known identity");
            groups[pos].push(s);
        }
        groups
    }
}

/// Splits a store into known/unknown identities and train/test samples.
///
/// Known identities are drawn uniformly among those with at least
/// `spec.min_samples_per_known` samples. Each known identity's samples are
/// shuffled; the first `max(1, floor(n * train_fraction))` (capped at `n - 1`)
/// go to train and the rest to `test_known`. Every sample of every other
/// identity goes to `test_unknown`.
pub fn make_split(
    store: &FeatureStore,
    spec: &SplitSpec,
    train_fraction: f64,
    rng_seed: u64,
) -> Result<ProtocolSplit> {
    let spec = spec.validated()?;
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "train_fraction must be in (0, 1), got {train_fraction}"
        )));
    }
    let total = store.identity_count();
    let requested = spec.known_count(total);
    if requested == 0 {
        return Err(Error::InvalidArgument(format!(
            "{:?} of {total} identities selects no known identity",
            spec.known
        )));
    }
    let mut eligible: Vec<usize> = store
        .identities()
        .iter()
        .enumerate()
        .filter(|(_, id)| id.samples.len() >= spec.min_samples_per_known)
        .map(|(pos, _)| pos)
        .collect();
    if eligible.len() < requested {
        return Err(Error::NotEnoughIdentities {
            requested,
            eligible: eligible.len(),
            min_samples: spec.min_samples_per_known,
        });
    }

    let mut rng = rng::seeded(rng_seed);
    eligible.shuffle(&mut rng);
    let mut known_ids = eligible[..requested].to_vec();
    known_ids.sort_unstable();

    let mut train = Vec::new();
    let mut test_known = Vec::new();
    for &id in &known_ids {
        let identity = &store.identities()[id];
        let n = identity.samples.len();
        if n < 2 {
            return Err(Error::IdentityTooSmall {
                identity: identity.name.clone(),
                samples: n,
            });
        }
        let mut samples = identity.samples.clone();
        samples.shuffle(&mut rng);
        let n_train = ((n as f64 * train_fraction).floor() as usize).clamp(1, n - 1);
        train.extend_from_slice(&samples[..n_train]);
        test_known.extend_from_slice(&samples[n_train..]);
    }

    let unknown_ids: Vec<usize> = (0..total)
        .filter(|id| known_ids.binary_search(id).is_err())
        .collect();
    let test_unknown = unknown_ids
        .iter()
        .flat_map(|&id| store.identities()[id].samples.iter().copied())
        .collect();

    Ok(ProtocolSplit {
        known_ids,
        unknown_ids,
        train,
        test_known,
        test_unknown,
        seed: rng_seed,
    })
}

/// Zero-mean Gaussian noise helper shared by tests and benches.
pub fn gaussian_vector(dim: usize, std_dev: f64, seed: u64) -> Vec<f64> {
    let mut rng = rng::seeded(seed);
    let normal = Normal::new(0.0, std_dev).expect("std_dev must be finite and nonnegative");
    (0..dim).map(|_| normal.sample(&mut rng)).collect()
}
