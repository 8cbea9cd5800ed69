use log::{debug, info};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::adam::{adam_step, AdamState};
use super::network::CorrNetParams;
use super::pipeline::{batch_grad, mean_loss, PipelineOptions, PreparedPair};
use crate::error::{Error, Result};
use crate::features::InputMode;

/// Random stream ids derived from the training seed.
pub const STREAM_SPLIT: u64 = 1;
pub const STREAM_INIT: u64 = 2;
pub const STREAM_SHUFFLE: u64 = 3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Epochs without validation improvement tolerated before decaying.
    pub lr_patience: usize,
    pub lr_decay: f64,
    pub val_fraction: f64,
    pub seed: u64,
    pub components: usize,
    pub input_mode: InputMode,
    pub pipeline: PipelineOptions,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 32,
            lr: 1e-3,
            lr_patience: 10,
            lr_decay: 0.5,
            val_fraction: 0.1,
            seed: 0,
            components: 16,
            input_mode: InputMode::default(),
            pipeline: PipelineOptions::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.epochs == 0 || self.batch_size == 0 || self.components == 0 {
            return bad("epochs, batch_size and components must be at least 1");
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return bad("lr must be positive");
        }
        if !(self.lr_decay > 0.0 && self.lr_decay < 1.0) {
            return bad("lr_decay must lie in (0, 1)");
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return bad("val_fraction must lie in (0, 1)");
        }
        if let InputMode::InvariantFeatures { k: 0 } = self.input_mode {
            return bad("neighbour count must be at least 1");
        }
        Ok(())
    }
}

pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub lr: f64,
    pub skipped: usize,
}

#[derive(Clone, Debug)]
pub struct TrainReport {
    /// Parameters with the lowest validation loss.
    pub params: CorrNetParams,
    pub history: Vec<EpochStats>,
    pub best_epoch: usize,
}

/// Shuffled `(train, validation)` index sets; validation holds
/// `round(val_fraction · n)` pairs, at least one.
pub fn split_indices(n: usize, val_fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if n < 2 {
        return Err(Error::Config(format!("need at least 2 pairs to form train and validation splits, have {n}")));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut stream_rng(seed, STREAM_SPLIT));
    let n_val = ((n as f64 * val_fraction).round() as usize).clamp(1, n - 1);
    let val = idx[..n_val].to_vec();
    let train = idx[n_val..].to_vec();
    Ok((train, val))
}

/// Builds network inputs for raw pairs under the configured input mode.
pub fn prepare_pairs(
    cfg: &TrainConfig,
    pairs: impl IntoIterator<Item = (crate::geom3d::PointCloud, crate::geom3d::PointCloud, crate::geom3d::RigidTransform)>,
) -> Result<Vec<PreparedPair>> {
    let mode = cfg.input_mode;
    pairs
        .into_iter()
        .map(|(s, t, gt)| {
            Ok(PreparedPair {
                source_features: mode.compute(&s)?,
                target_features: mode.compute(&t)?,
                source: s,
                target: t,
                t_gt: gt,
            })
        })
        .collect()
}

/// Adam with plateau-based learning-rate decay; returns the parameters with
/// the best validation loss.
pub fn train(pairs: &[PreparedPair], cfg: &TrainConfig) -> Result<TrainReport> {
    cfg.validate()?;
    let (train_idx, val_idx) = split_indices(pairs.len(), cfg.val_fraction, cfg.seed)?;
    let mut params = CorrNetParams::init(cfg.input_mode, cfg.components, &mut stream_rng(cfg.seed, STREAM_INIT))?;
    for p in pairs {
        if p.source_features.dim() != params.input_dim() || p.target_features.dim() != params.input_dim() {
            return Err(Error::DimensionMismatch { expected: params.input_dim(), got: p.source_features.dim() });
        }
    }
    let val: Vec<&PreparedPair> = val_idx.iter().map(|&i| &pairs[i]).collect();
    let mut order = train_idx.clone();
    let mut shuffle_rng = stream_rng(cfg.seed, STREAM_SHUFFLE);
    let mut adam = AdamState::new(params.len());
    let mut lr = cfg.lr;
    let mut best = (f64::INFINITY, params.clone(), 0usize);
    let mut bad_epochs = 0;
    let mut history = Vec::with_capacity(cfg.epochs);

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut loss_sum = 0.0;
        let mut used = 0;
        let mut skipped = 0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&PreparedPair> = chunk.iter().map(|&i| &pairs[i]).collect();
            let g = batch_grad(&params, &batch, &cfg.pipeline)?;
            skipped += g.skipped;
            if g.used == 0 {
                continue;
            }
            loss_sum += g.loss * g.used as f64;
            used += g.used;
            adam_step(&mut adam, params.values_mut(), &g.grad, lr)?;
        }
        let train_loss = if used > 0 { loss_sum / used as f64 } else { f64::NAN };
        let val_loss = mean_loss(&params, &val, &cfg.pipeline)?.unwrap_or(f64::INFINITY);
        if val_loss < best.0 {
            best = (val_loss, params.clone(), epoch);
            bad_epochs = 0;
        } else {
            bad_epochs += 1;
            if bad_epochs > cfg.lr_patience {
                lr *= cfg.lr_decay;
                bad_epochs = 0;
                debug!("learning rate decayed to {lr:e}");
            }
        }
        info!("epoch {epoch}: train {train_loss:.6} val {val_loss:.6} lr {lr:e}");
        history.push(EpochStats { epoch, train_loss, val_loss, lr, skipped });
    }
    if best.2 == 0 {
        best.1 = params;
    }
    Ok(TrainReport { params: best.1, history, best_epoch: best.2 })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_follow_schedule() {
        let c = TrainConfig::default();
        assert_eq!((c.epochs, c.batch_size, c.lr, c.lr_patience, c.lr_decay), (100, 32, 1e-3, 10, 0.5));
        assert!(c.validate().is_ok());
    }

    #[test]
    fn split_is_disjoint_and_seeded() {
        let (t, v) = split_indices(50, 0.1, 3).unwrap();
        assert_eq!(v.len(), 5);
        assert_eq!(t.len(), 45);
        let mut all: Vec<usize> = t.iter().chain(&v).copied().collect();
        all.sort();
        assert_eq!(all, (0..50).collect::<Vec<_>>());
        assert_eq!(split_indices(50, 0.1, 3).unwrap(), (t, v));
        assert!(split_indices(1, 0.1, 3).is_err());
    }

    #[test]
    fn invalid_configs() {
        let mut c = TrainConfig { epochs: 0, ..Default::default() };
        assert!(c.validate().is_err());
        c = TrainConfig { lr_decay: 1.0, ..Default::default() };
        assert!(c.validate().is_err());
    }
}
