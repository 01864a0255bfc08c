//! Mini-batch Adam training with early stopping, shared by both latent models.

use ndarray::ArrayView2;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::dataset::{DatasetSplit, RatingTriple, RatingsDataset};
use crate::error::{Error, Result};
use crate::nn::{AdamState, LossKind};
use crate::rng::{self, StageRng};

/// A set of rating triples plus the feature matrix their item indices point into.
#[derive(Clone, Copy, Debug)]
pub struct Batch<'a> {
    pub triples: &'a [RatingTriple],
    pub features: ArrayView2<'a, f64>,
}

impl<'a> Batch<'a> {
    pub fn new(triples: &'a [RatingTriple], features: ArrayView2<'a, f64>) -> Self {
        Batch { triples, features }
    }

    pub fn len(&self) -> usize {
        self.triples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.triples.is_empty()
    }

    /// Feature rows of the batch's items, one row per triple.
    pub fn item_features(&self) -> ndarray::Array2<f64> {
        let idx: Vec<usize> = self.triples.iter().map(|t| t.item).collect();
        self.features.select(ndarray::Axis(0), &idx)
    }

    pub fn validate(&self, num_users: usize, feature_dim: usize) -> Result<()> {
        if self.triples.is_empty() {
            return Err(Error::invalid("empty batch"));
        }
        crate::error::check_dim("batch feature width", feature_dim, self.features.ncols())?;
        for t in self.triples {
            if t.user >= num_users {
                return Err(Error::invalid(format!("unknown user {}", t.user)));
            }
            if t.item >= self.features.nrows() {
                return Err(Error::invalid(format!("unknown item {}", t.item)));
            }
        }
        Ok(())
    }
}

/// Scalars shared by both models' training loops.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub latent_dim: usize,
    /// Weight of the reconstruction term.
    pub lambda_recon: f64,
    /// Weight of the Frobenius-norm regularizer.
    pub lambda_reg: f64,
    /// Use squared Frobenius norms instead of plain norms.
    pub squared_frobenius: bool,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub rating_loss: LossKind,
    pub reconstruction_loss: LossKind,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            latent_dim: 8,
            lambda_recon: 1.0,
            lambda_reg: 1e-3,
            squared_frobenius: false,
            learning_rate: 1e-3,
            batch_size: 64,
            max_epochs: 40,
            patience: 3,
            rating_loss: LossKind::CrossEntropy,
            reconstruction_loss: LossKind::CrossEntropy,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.latent_dim == 0 {
            return Err(Error::invalid("latent_dim must be at least 1"));
        }
        if self.batch_size == 0 || self.patience == 0 {
            return Err(Error::invalid("batch_size and patience must be at least 1"));
        }
        if !(self.lambda_recon >= 0.0 && self.lambda_reg >= 0.0) {
            return Err(Error::invalid("loss weights must be non-negative"));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::invalid("learning_rate must be finite and non-negative"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 0 is the untrained model.
    pub epoch: usize,
    /// Mean per-datum training objective.
    pub train_loss: f64,
    pub validation_rating_loss: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingHistory {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub stopped_early: bool,
}

impl TrainingHistory {
    pub fn initial_train_loss(&self) -> Option<f64> {
        self.epochs.first().map(|e| e.train_loss)
    }

    pub fn best(&self) -> Option<&EpochRecord> {
        self.epochs.iter().find(|e| e.epoch == self.best_epoch)
    }
}

/// What the generic loop needs from a model.
pub(crate) trait Trainable: Clone {
    type Grads;

    /// Mean per-datum objective over the batch (plus regularizers) and its gradient.
    fn objective(&self, batch: &Batch<'_>, noise: &mut StageRng) -> Result<(f64, Self::Grads)>;

    fn apply(&mut self, grads: &Self::Grads, opt: &mut AdamState) -> Result<()>;

    /// Deterministic mean rating loss, used for early stopping.
    fn rating_loss(&self, batch: &Batch<'_>, kind: LossKind) -> Result<f64>;
}

fn gather(ds: &RatingsDataset, idx: &[usize]) -> Vec<RatingTriple> {
    idx.iter().map(|&i| ds.triples()[i]).collect()
}

fn mean_objective<T: Trainable>(model: &T, triples: &[RatingTriple], ds: &RatingsDataset, cfg: &TrainConfig, noise: &mut StageRng) -> Result<f64> {
    let mut total = 0.0;
    for chunk in triples.chunks(cfg.batch_size.max(1)) {
        let (loss, _) = model.objective(&Batch::new(chunk, ds.features().view()), noise)?;
        total += loss * chunk.len() as f64;
    }
    Ok(total / triples.len().max(1) as f64)
}

pub(crate) fn fit<T: Trainable>(
    mut model: T,
    ds: &RatingsDataset,
    split: &DatasetSplit,
    cfg: &TrainConfig,
) -> Result<(T, TrainingHistory)> {
    cfg.validate()?;
    if split.train.is_empty() {
        return Err(Error::invalid("training split is empty"));
    }
    let mut batch_rng = rng::substream(cfg.seed, rng::BATCHING);
    let mut noise_rng = rng::substream(cfg.seed, rng::NOISE);
    let mut eval_rng = rng::substream(cfg.seed, rng::EVAL);
    let train = gather(ds, &split.train);
    let validation = gather(ds, &split.validation);
    let features = ds.features().view();

    let val_loss = |m: &T| -> Result<f64> {
        if validation.is_empty() {
            m.rating_loss(&Batch::new(&train, features), cfg.rating_loss)
        } else {
            m.rating_loss(&Batch::new(&validation, features), cfg.rating_loss)
        }
    };

    let mut history = TrainingHistory::default();
    let initial = mean_objective(&model, &train, ds, cfg, &mut eval_rng)?;
    let mut best_val = val_loss(&model)?;
    history.epochs.push(EpochRecord {
        epoch: 0,
        train_loss: initial,
        validation_rating_loss: best_val,
    });
    let mut best = model.clone();
    let mut opt = AdamState::new(cfg.learning_rate);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut batch = Vec::with_capacity(cfg.batch_size);
    let mut since_best = 0;

    for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut batch_rng);
        let mut total = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            batch.clear();
            batch.extend(chunk.iter().map(|&k| train[k]));
            let step = model
                .objective(&Batch::new(&batch, features), &mut noise_rng)
                .and_then(|(loss, grads)| {
                    if !loss.is_finite() {
                        return Err(Error::NonFinite("training objective".into()));
                    }
                    model.apply(&grads, &mut opt)?;
                    Ok(loss)
                });
            match step {
                Ok(loss) => total += loss * chunk.len() as f64,
                Err(e) => {
                    return Err(Error::Diverged {
                        epoch,
                        reason: e.to_string(),
                        history: Box::new(history),
                    })
                }
            }
        }
        let train_loss = total / train.len() as f64;
        let val = val_loss(&model)?;
        if !val.is_finite() {
            return Err(Error::Diverged {
                epoch,
                reason: "validation loss is not finite".into(),
                history: Box::new(history),
            });
        }
        history.epochs.push(EpochRecord {
            epoch,
            train_loss,
            validation_rating_loss: val,
        });
        log::debug!("epoch {epoch}: train {train_loss:.5} validation {val:.5}");
        if val < best_val {
            best_val = val;
            best = model.clone();
            history.best_epoch = epoch;
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.patience {
                history.stopped_early = true;
                break;
            }
        }
    }
    Ok((best, history))
}
