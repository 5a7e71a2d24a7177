use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{Gradients, SiameseNet};
use crate::dataset::FeatureStore;
use crate::error::{Error, Result};
use crate::pairing::PairSet;
use crate::rng;

/// Minibatch gradient-descent settings.
///
/// `rng_seed` drives the per-epoch pair shuffle. The experiment runner derives
/// it per trial, so it is not read from config files.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub margin: f64,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    #[serde(skip)]
    pub rng_seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            margin: 1.0,
            learning_rate: 0.01,
            epochs: 50,
            batch_size: 32,
            rng_seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.margin > 0.0 && self.margin.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "margin must be positive, got {}",
                self.margin
            )));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "learning_rate must be finite and nonnegative, got {}",
                self.learning_rate
            )));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::InvalidArgument(
                "epochs and batch_size must be positive".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    /// Mean pair loss of each epoch, measured before each batch's update.
    pub epoch_loss: Vec<f64>,
}

/// Trains a copy of `net` on `pairs` with plain minibatch gradient descent.
///
/// Each epoch shuffles the pair order, walks it in batches of
/// `cfg.batch_size` (the last batch may be short) and steps by
/// `learning_rate` times the mean gradient of the batch.
pub fn train(
    net: &SiameseNet,
    pairs: &PairSet,
    store: &FeatureStore,
    cfg: &TrainConfig,
) -> Result<(SiameseNet, TrainHistory)> {
    cfg.validate()?;
    if pairs.is_empty() {
        return Err(Error::Empty("pair set"));
    }
    if store.dim() != net.input_dim() {
        return Err(Error::DimensionMismatch {
            expected: net.input_dim(),
            actual: store.dim(),
        });
    }
    if let Some(bad) = pairs
        .pairs
        .iter()
        .find(|p| p.a >= store.len() || p.b >= store.len())
    {
        return Err(Error::InvalidArgument(format!(
            "pair ({}, {}) indexes outside a store of {} samples",
            bad.a,
            bad.b,
            store.len()
        )));
    }

    let mut net = net.clone();
    let mut rng = rng::seeded(cfg.rng_seed);
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    let mut grads = Gradients::zeros_like(&net);
    let mut history = TrainHistory::default();

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for (batch_no, batch) in order.chunks(cfg.batch_size).enumerate() {
            grads.fill_zero();
            let mut batch_loss = 0.0;
            for &i in batch {
                let p = &pairs.pairs[i];
                let loss = net.accumulate_gradients(
                    store.vector(p.a),
                    store.vector(p.b),
                    p.label,
                    cfg.margin,
                    &mut grads,
                )?;
                batch_loss += loss;
            }
            if !batch_loss.is_finite() {
                return Err(Error::NonFiniteLoss {
                    epoch,
                    batch: batch_no,
                    loss: batch_loss,
                });
            }
            epoch_loss += batch_loss;
            if cfg.learning_rate != 0.0 {
                net.apply_gradients(&grads, cfg.learning_rate / batch.len() as f64);
            }
        }
        let mean = epoch_loss / pairs.len() as f64;
        log::debug!("epoch {epoch}: mean loss {mean:.6}");
        history.epoch_loss.push(mean);
    }
    Ok((net, history))
}
