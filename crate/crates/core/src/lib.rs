//! Open-set enrollment detection for small galleries.
//!
//! A shared-weight fully connected network is trained with contrastive loss
//! on same/different pairs drawn from the gallery's training samples. A probe
//! is then scored by its minimum embedding distance to those samples and
//! accepted as enrolled when the score falls under a threshold. Evaluation
//! sweeps the threshold (ROC / AUC) over repeated random known/unknown splits.
//!
//! Modules follow the pipeline: [`dataset`] → [`pairing`] → [`siamese`] →
//! [`recognition`] → [`metrics`], with [`experiment`] wiring them together.

pub mod dataset;
pub mod error;
pub mod experiment;
pub mod metrics;
pub mod pairing;
pub mod recognition;
pub mod rng;
pub mod siamese;

pub use dataset::{
    generate_synthetic, load_features, make_split, write_features, FeatureStore, KnownCount,
    ProtocolSplit, SplitSpec, SyntheticSpec,
};
pub use error::{Error, Result};
pub use experiment::{run_experiment, run_trial, trial_seed, ExperimentConfig, ExperimentReport};
pub use metrics::{aggregate, auc_mw, roc, RocPoint, RocReport, TrialAggregate};
pub use pairing::{make_pairs, pair_p1, pair_p2, Pair, PairAlgorithm, PairSet};
pub use recognition::{
    build_gallery, calibrate_threshold, decide, score_probe, Decision, GalleryIndex, ProbeScore,
    ScoreRecord, ThresholdPolicy, Truth,
};
pub use siamese::{
    contrastive_loss, init_net, load_net, save_net, train, Gradients, PairLabel, SiameseNet,
    TrainConfig, TrainHistory,
};
