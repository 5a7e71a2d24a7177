//! End-to-end protocol runner: split, pair, train, build the gallery, score
//! every test probe and compute the ROC, repeated per protocol point.
//!
//! # Seeds
//!
//! Trial `r` of protocol point `p` uses
//! `trial_seed = mix_seed(mix_seed(master_seed, p), r)` and every stage draws
//! from its own child stream `mix_seed(trial_seed, tag)`:
//!
//! | stage            | tag |
//! |------------------|-----|
//! | split            | 1   |
//! | pair generation  | 2   |
//! | network init     | 3   |
//! | training shuffle | 4   |
//!
//! where `mix_seed(s, t) = splitmix64(splitmix64(s) ^ t)`. Trials share no
//! generator state, so they can run in any order or in parallel.
//!
//! # Config file (TOML)
//!
//! ```toml
//! master_seed = 42
//! repetitions = 10
//! output_dir = "out"
//!
//! [features]
//! path = "features.txt"        # or a [features.synthetic] table
//!
//! [protocol]
//! mode = "absolute"            # or "percentage"
//! points = [5, 10, 15, 20]
//! train_fraction = 0.5
//! min_samples_per_known = 2
//!
//! [pairing]
//! algorithm = "P1"
//! z = 2
//!
//! [network]
//! hidden = [2048, 2048, 2048]
//!
//! [train]
//! margin = 1.0
//! learning_rate = 0.01
//! epochs = 50
//! batch_size = 32
//! ```

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{
    load_features, make_split, FeatureStore, KnownCount, SplitSpec, SyntheticSpec,
};
use crate::error::{Error, Result};
use crate::metrics::{aggregate, roc, RocReport, TrialAggregate};
use crate::pairing::{make_pairs, PairAlgorithm};
use crate::recognition::{build_gallery, partition_scores, score_split, write_scores, ScoreRecord};
use crate::rng::mix_seed;
use crate::siamese::{init_net, train, TrainConfig};

pub const SPLIT_STREAM: u64 = 1;
pub const PAIR_STREAM: u64 = 2;
pub const INIT_STREAM: u64 = 3;
pub const TRAIN_STREAM: u64 = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureSource {
    Path(PathBuf),
    Synthetic(SyntheticSpec),
}

impl FeatureSource {
    pub fn load(&self) -> Result<FeatureStore> {
        match self {
            FeatureSource::Path(p) => load_features(p),
            FeatureSource::Synthetic(spec) => spec.generate(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProtocolMode {
    Percentage,
    Absolute,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProtocolConfig {
    pub mode: ProtocolMode,
    /// Fractions in (0, 1] for percentage mode, identity counts for absolute mode.
    pub points: Vec<f64>,
    #[serde(default = "default_train_fraction")]
    pub train_fraction: f64,
    #[serde(default = "default_min_samples")]
    pub min_samples_per_known: usize,
}

fn default_train_fraction() -> f64 {
    0.5
}

fn default_min_samples() -> usize {
    2
}

impl ProtocolConfig {
    /// 10%, 50% and 90% of identities known.
    pub fn ep1() -> Self {
        ProtocolConfig {
            mode: ProtocolMode::Percentage,
            points: vec![0.1, 0.5, 0.9],
            train_fraction: 0.5,
            min_samples_per_known: 2,
        }
    }

    /// 5, 10, 15 and 20 identities known.
    pub fn ep2() -> Self {
        ProtocolConfig {
            mode: ProtocolMode::Absolute,
            points: vec![5.0, 10.0, 15.0, 20.0],
            train_fraction: 0.5,
            min_samples_per_known: 2,
        }
    }

    pub fn split_specs(&self) -> Result<Vec<SplitSpec>> {
        if self.points.is_empty() {
            return Err(Error::Config("protocol.points is empty".into()));
        }
        self.points
            .iter()
            .map(|&v| {
                let known = match self.mode {
                    ProtocolMode::Percentage => KnownCount::Percentage(v),
                    ProtocolMode::Absolute => {
                        if !(v >= 1.0 && v.fract() == 0.0 && v <= u32::MAX as f64) {
                            return Err(Error::Config(format!(
                                "absolute protocol points must be positive integers, got {v}"
                            )));
                        }
                        KnownCount::Absolute(v as usize)
                    }
                };
                SplitSpec {
                    known,
                    min_samples_per_known: self.min_samples_per_known,
                }
                .validated()
                .map_err(|e| Error::Config(e.to_string()))
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PairingConfig {
    pub algorithm: PairAlgorithm,
    pub z: usize,
}

impl Default for PairingConfig {
    fn default() -> Self {
        PairingConfig {
            algorithm: PairAlgorithm::P1,
            z: 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkConfig {
    /// Widths after the input layer; the input width is the feature dim.
    pub hidden: Vec<usize>,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig {
            hidden: crate::siamese::DEFAULT_LAYER_DIMS[1..].to_vec(),
        }
    }
}

impl NetworkConfig {
    pub fn layer_dims(&self, input: usize) -> Vec<usize> {
        std::iter::once(input)
            .chain(self.hidden.iter().copied())
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub master_seed: u64,
    #[serde(default = "default_repetitions")]
    pub repetitions: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
    pub features: FeatureSource,
    pub protocol: ProtocolConfig,
    #[serde(default)]
    pub pairing: PairingConfig,
    #[serde(default)]
    pub network: NetworkConfig,
    #[serde(default)]
    pub train: TrainConfig,
}

fn default_repetitions() -> usize {
    10
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig =
            toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml(&text)?;
        // relative feature paths are relative to the config file
        if let (FeatureSource::Path(p), Some(dir)) = (&mut cfg.features, path.parent()) {
            if p.is_relative() {
                *p = dir.join(&*p);
            }
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes to TOML")
    }

    pub fn validate(&self) -> Result<()> {
        if self.repetitions == 0 {
            return Err(Error::Config("repetitions must be at least 1".into()));
        }
        if self.network.hidden.is_empty() || self.network.hidden.contains(&0) {
            return Err(Error::Config(format!(
                "network.hidden must list positive widths, got {:?}",
                self.network.hidden
            )));
        }
        let f = self.protocol.train_fraction;
        if !(f > 0.0 && f < 1.0) {
            return Err(Error::Config(format!(
                "protocol.train_fraction must be in (0, 1), got {f}"
            )));
        }
        self.train
            .validate()
            .map_err(|e| Error::Config(e.to_string()))?;
        self.protocol.split_specs()?;
        Ok(())
    }
}

pub fn trial_seed(master_seed: u64, point: usize, repetition: usize) -> u64 {
    mix_seed(mix_seed(master_seed, point as u64), repetition as u64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialResult {
    pub point: usize,
    pub repetition: usize,
    pub seed: u64,
    pub known_identities: usize,
    pub gallery_size: usize,
    pub pairs: usize,
    pub auc: f64,
    pub final_loss: f64,
    #[serde(skip)]
    pub roc: RocReport,
    #[serde(skip)]
    pub scores: Vec<ScoreRecord>,
}

/// Runs one trial from an explicit trial seed.
pub fn run_trial(
    cfg: &ExperimentConfig,
    store: &FeatureStore,
    spec: &SplitSpec,
    seed: u64,
) -> Result<TrialResult> {
    let split = make_split(
        store,
        spec,
        cfg.protocol.train_fraction,
        mix_seed(seed, SPLIT_STREAM),
    )?;
    // no unknown probes means no ROC; fail before paying for training
    if split.test_unknown.is_empty() {
        return Err(Error::Empty(
            "unknown probe set (every identity is enrolled)",
        ));
    }
    let pairs = make_pairs(
        cfg.pairing.algorithm,
        &split,
        store,
        cfg.pairing.z,
        mix_seed(seed, PAIR_STREAM),
    )?;
    let net = init_net(
        &cfg.network.layer_dims(store.dim()),
        mix_seed(seed, INIT_STREAM),
    )?;
    let train_cfg = TrainConfig {
        rng_seed: mix_seed(seed, TRAIN_STREAM),
        ..cfg.train
    };
    let (net, history) = train(&net, &pairs, store, &train_cfg)?;
    let gallery = build_gallery(&net, &split, store)?;
    let scores = score_split(&gallery, &net, &split, store)?;
    let (known, unknown) = partition_scores(&scores);
    let roc = roc(&known, &unknown)?;
    Ok(TrialResult {
        point: 0,
        repetition: 0,
        seed,
        known_identities: split.known_ids.len(),
        gallery_size: gallery.len(),
        pairs: pairs.len(),
        auc: roc.auc,
        final_loss: history.epoch_loss.last().copied().unwrap_or(f64::NAN),
        roc,
        scores,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PointResult {
    pub label: String,
    pub spec: SplitSpec,
    pub aggregate: TrialAggregate,
    pub trials: Vec<TrialResult>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub config: ExperimentConfig,
    pub points: Vec<PointResult>,
}

fn point_label(spec: &SplitSpec) -> String {
    match spec.known {
        KnownCount::Percentage(p) => format!("{}%", (p * 100.0 * 1e6).round() / 1e6),
        KnownCount::Absolute(n) => n.to_string(),
    }
}

pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentReport> {
    cfg.validate()?;
    let store = cfg.features.load()?;
    run_on_store(cfg, &store)
}

/// Like [`run_experiment`] with the features already loaded.
pub fn run_on_store(cfg: &ExperimentConfig, store: &FeatureStore) -> Result<ExperimentReport> {
    cfg.validate()?;
    let specs = cfg.protocol.split_specs()?;
    let jobs: Vec<(usize, usize)> = (0..specs.len())
        .flat_map(|p| (0..cfg.repetitions).map(move |r| (p, r)))
        .collect();
    let results: Vec<Result<TrialResult>> = jobs
        .par_iter()
        .map(|&(p, r)| {
            let seed = trial_seed(cfg.master_seed, p, r);
            log::info!(
                "point {} trial {r}: seed {seed:#018x}",
                point_label(&specs[p])
            );
            run_trial(cfg, store, &specs[p], seed)
                .map(|t| TrialResult {
                    point: p,
                    repetition: r,
                    ..t
                })
                .map_err(|e| Error::Trial {
                    point: p,
                    trial: r,
                    source: Box::new(e),
                })
        })
        .collect();

    let mut points: Vec<PointResult> = specs
        .iter()
        .map(|spec| PointResult {
            label: point_label(spec),
            spec: *spec,
            aggregate: TrialAggregate {
                aucs: vec![],
                mean: f64::NAN,
                std: f64::NAN,
            },
            trials: Vec::with_capacity(cfg.repetitions),
        })
        .collect();
    for result in results {
        let trial = result?;
        points[trial.point].trials.push(trial);
    }
    for point in &mut points {
        let aucs: Vec<f64> = point.trials.iter().map(|t| t.auc).collect();
        point.aggregate = aggregate(&aucs)?;
    }
    Ok(ExperimentReport {
        config: cfg.clone(),
        points,
    })
}

pub fn roc_file_name(point: usize, repetition: usize) -> String {
    format!("roc/point{point}_trial{repetition}.txt")
}

pub fn scores_file_name(point: usize, repetition: usize) -> String {
    format!("scores/point{point}_trial{repetition}.txt")
}

#[derive(Serialize)]
struct TrialJson<'a> {
    #[serde(flatten)]
    trial: &'a TrialResult,
    roc_path: String,
    scores_path: String,
}

#[derive(Serialize)]
struct PointJson<'a> {
    label: &'a str,
    spec: &'a SplitSpec,
    mean_auc: f64,
    std_auc: f64,
    aucs: &'a [f64],
    trials: Vec<TrialJson<'a>>,
}

#[derive(Serialize)]
struct ReportJson<'a> {
    std_convention: &'static str,
    config: &'a ExperimentConfig,
    points: Vec<PointJson<'a>>,
}

impl ExperimentReport {
    /// Human-readable table, AUCs to three decimals.
    pub fn summary(&self) -> String {
        let cfg = &self.config;
        let mut out = String::new();
        writeln!(
            out,
            "# pairing {} z={} | repetitions {} | master_seed {}",
            cfg.pairing.algorithm, cfg.pairing.z, cfg.repetitions, cfg.master_seed
        )
        .unwrap();
        writeln!(out, "# mean AUC +/- sample standard deviation (n-1)").unwrap();
        writeln!(out, "{:<10} {:>7} {:>15}", "known", "gallery", "AUC").unwrap();
        for p in &self.points {
            let gallery = p.trials.first().map_or(0, |t| t.known_identities);
            writeln!(
                out,
                "{:<10} {:>7} {:>15}",
                p.label,
                gallery,
                format!("{:.3} ± {:.3}", p.aggregate.mean, p.aggregate.std)
            )
            .unwrap();
        }
        out
    }

    pub fn to_json(&self) -> String {
        let json = ReportJson {
            std_convention: "sample (n-1)",
            config: &self.config,
            points: self
                .points
                .iter()
                .enumerate()
                .map(|(pi, p)| PointJson {
                    label: &p.label,
                    spec: &p.spec,
                    mean_auc: p.aggregate.mean,
                    std_auc: p.aggregate.std,
                    aucs: &p.aggregate.aucs,
                    trials: p
                        .trials
                        .iter()
                        .map(|t| TrialJson {
                            trial: t,
                            roc_path: roc_file_name(pi, t.repetition),
                            scores_path: scores_file_name(pi, t.repetition),
                        })
                        .collect(),
                })
                .collect(),
        };
        serde_json::to_string_pretty(&json).expect("report serializes to JSON")
    }

    /// Writes `report.json`, `summary.txt`, `config.toml` and per-trial ROC
    /// and score files under `dir`.
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        for sub in ["roc", "scores"] {
            let d = dir.join(sub);
            fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
        }
        let write = |name: &str, contents: String| {
            let path = dir.join(name);
            fs::write(&path, contents).map_err(|e| Error::io(&path, e))
        };
        for (pi, p) in self.points.iter().enumerate() {
            for t in &p.trials {
                t.roc.write(dir.join(roc_file_name(pi, t.repetition)))?;
                write_scores(&t.scores, dir.join(scores_file_name(pi, t.repetition)))?;
            }
        }
        write("config.toml", self.config.to_toml())?;
        write("summary.txt", self.summary())?;
        write("report.json", self.to_json())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_config() -> ExperimentConfig {
        ExperimentConfig {
            master_seed: 5,
            repetitions: 2,
            output_dir: None,
            features: FeatureSource::Synthetic(SyntheticSpec {
                identities: 8,
                samples_per_id: 4,
                dim: 6,
                spread: 0.1,
                seed: 1,
            }),
            protocol: ProtocolConfig {
                mode: ProtocolMode::Absolute,
                points: vec![2.0, 3.0],
                train_fraction: 0.5,
                min_samples_per_known: 2,
            },
            pairing: PairingConfig::default(),
            network: NetworkConfig { hidden: vec![8, 4] },
            train: TrainConfig {
                epochs: 3,
                batch_size: 8,
                ..TrainConfig::default()
            },
        }
    }

    #[test]
    fn trial_seeds_are_distinct() {
        let mut seeds: Vec<u64> = (0..4)
            .flat_map(|p| (0..10).map(move |r| trial_seed(42, p, r)))
            .collect();
        seeds.sort_unstable();
        seeds.dedup();
        assert_eq!(seeds.len(), 40);
    }

    #[test]
    fn structure_and_determinism() {
        let cfg = small_config();
        let a = run_experiment(&cfg).unwrap();
        assert_eq!(a.points.len(), 2);
        for (pi, p) in a.points.iter().enumerate() {
            assert_eq!(p.trials.len(), 2);
            assert_eq!(p.aggregate.aucs.len(), 2);
            for (r, t) in p.trials.iter().enumerate() {
                assert_eq!((t.point, t.repetition), (pi, r));
                assert_eq!(t.seed, trial_seed(5, pi, r));
            }
        }
        assert_eq!(a.points[0].trials[0].known_identities, 2);
        let b = run_experiment(&cfg).unwrap();
        for (pa, pb) in a.points.iter().zip(&b.points) {
            let ba: Vec<u64> = pa.aggregate.aucs.iter().map(|x| x.to_bits()).collect();
            let bb: Vec<u64> = pb.aggregate.aucs.iter().map(|x| x.to_bits()).collect();
            assert_eq!(ba, bb);
        }
    }

    #[test]
    fn single_trial_reproduces_from_recorded_seed() {
        let cfg = small_config();
        let report = run_experiment(&cfg).unwrap();
        let store = cfg.features.load().unwrap();
        let specs = cfg.protocol.split_specs().unwrap();
        let t = &report.points[1].trials[1];
        let again = run_trial(&cfg, &store, &specs[1], t.seed).unwrap();
        assert_eq!(again.auc.to_bits(), t.auc.to_bits());
        assert_eq!(again.scores, t.scores);
    }

    #[test]
    fn errors_carry_point_and_trial() {
        let mut cfg = small_config();
        cfg.protocol.points = vec![2.0, 9.0];
        match run_experiment(&cfg).unwrap_err() {
            Error::Trial {
                point,
                trial,
                source,
            } => {
                assert_eq!((point, trial), (1, 0));
                assert!(matches!(*source, Error::NotEnoughIdentities { .. }));
            }
            other => panic!("unexpected {other:?}"),
        }
        // every identity known: no unknown probes, so AUC is undefined
        let mut cfg = small_config();
        cfg.protocol = ProtocolConfig {
            mode: ProtocolMode::Percentage,
            points: vec![1.0],
            ..cfg.protocol
        };
        let err = run_experiment(&cfg).unwrap_err();
        assert!(
            matches!(err, Error::Trial { ref source, .. } if matches!(**source, Error::Empty(_))),
            "{err}"
        );
    }

    #[test]
    fn config_validation() {
        let mut cfg = small_config();
        cfg.repetitions = 0;
        assert!(cfg.validate().is_err());
        let mut cfg = small_config();
        cfg.protocol.points = vec![2.5];
        assert!(cfg.validate().is_err());
        let mut cfg = small_config();
        cfg.protocol.mode = ProtocolMode::Percentage;
        cfg.protocol.points = vec![1.5];
        assert!(cfg.validate().is_err());
        let mut cfg = small_config();
        cfg.network.hidden = vec![];
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn toml_round_trip_and_defaults() {
        let cfg = small_config();
        assert_eq!(ExperimentConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
        let minimal = r#"
            master_seed = 1
            [features]
            path = "f.txt"
            [protocol]
            mode = "percentage"
            points = [0.1, 0.5, 0.9]
        "#;
        let cfg = ExperimentConfig::from_toml(minimal).unwrap();
        assert_eq!(cfg.repetitions, 10);
        assert_eq!(cfg.protocol, ProtocolConfig::ep1());
        assert_eq!(cfg.pairing, PairingConfig::default());
        assert_eq!(cfg.network.hidden, vec![2048, 2048, 2048]);
        assert_eq!(cfg.train, TrainConfig::default());
        assert!(ExperimentConfig::from_toml("master_seed = 1\nbogus = 2\n").is_err());
    }

    #[test]
    fn report_files() {
        let cfg = small_config();
        let report = run_experiment(&cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        report.write(dir.path()).unwrap();
        for name in [
            "report.json",
            "summary.txt",
            "config.toml",
            "roc/point1_trial1.txt",
            "scores/point0_trial0.txt",
        ] {
            assert!(dir.path().join(name).is_file(), "{name}");
        }
        let json: serde_json::Value =
            serde_json::from_str(&fs::read_to_string(dir.path().join("report.json")).unwrap())
                .unwrap();
        assert_eq!(json["points"][0]["trials"].as_array().unwrap().len(), 2);
        assert_eq!(
            json["points"][1]["trials"][1]["roc_path"],
            "roc/point1_trial1.txt"
        );
        assert_eq!(
            json["points"][0]["mean_auc"].as_f64().unwrap(),
            report.points[0].aggregate.mean
        );
        let echoed = ExperimentConfig::load(dir.path().join("config.toml")).unwrap();
        assert_eq!(echoed, cfg);
        let summary = report.summary();
        assert!(
            summary.contains(&format!("{:.3} ± ", report.points[0].aggregate.mean)),
            "{summary}"
        );
    }
}
