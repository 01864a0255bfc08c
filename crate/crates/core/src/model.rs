//! What the sampler, coverage and evaluation stages need from a trained model.

use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::error::{Error, Result};
use crate::linear_model::{LinearModel, LM_MAGIC};
use crate::nn::{clamp_prob, sigmoid};
use crate::rng::StageRng;
use crate::train::TrainConfig;
use crate::vae_model::{CollabVae, VaeTrainConfig, VAE_MAGIC};

/// `sigmoid(user . item)`, kept inside the probability floor.
pub fn predicted_rating(user: ArrayView1<'_, f64>, item: ArrayView1<'_, f64>) -> f64 {
    clamp_prob(sigmoid(user.dot(&item)))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Lm,
    Vae,
}

impl std::str::FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lm" | "linear" => Ok(ModelKind::Lm),
            "vae" => Ok(ModelKind::Vae),
            other => Err(Error::invalid(format!("unknown model kind {other:?}, expected lm or vae"))),
        }
    }
}

impl std::fmt::Display for ModelKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ModelKind::Lm => "lm",
            ModelKind::Vae => "vae",
        })
    }
}

pub trait LatentModel {
    fn kind(&self) -> ModelKind;
    fn feature_dim(&self) -> usize;
    fn latent_dim(&self) -> usize;
    fn user_embeddings(&self) -> ArrayView2<'_, f64>;

    /// Deterministic item latents, one row per feature row.
    fn encode_batch(&self, x: ArrayView2<'_, f64>) -> Result<Array2<f64>>;

    /// One random latent for an item: a posterior draw for the VAE, the
    /// encoding plus small Gaussian jitter for the linear model.
    fn sample_latent(&self, x: ArrayView1<'_, f64>, rng: &mut StageRng) -> Result<Array1<f64>>;

    fn decode_batch(&self, z: ArrayView2<'_, f64>) -> Result<Array2<f64>>;

    fn num_users(&self) -> usize {
        self.user_embeddings().nrows()
    }

    fn predict_rating(&self, user: usize, z: ArrayView1<'_, f64>) -> Result<f64> {
        if user >= self.num_users() {
            return Err(Error::invalid(format!("unknown user {user}")));
        }
        crate::error::check_dim("item latent", self.latent_dim(), z.len())?;
        Ok(predicted_rating(self.user_embeddings().row(user), z))
    }
}

/// Either trained model, as loaded from a checkpoint.
#[derive(Clone, Debug, PartialEq)]
pub enum TrainedModel {
    Lm { model: LinearModel, config: Option<TrainConfig> },
    Vae { model: CollabVae, config: Option<VaeTrainConfig> },
}

impl TrainedModel {
    pub fn as_latent(&self) -> &dyn LatentModel {
        match self {
            TrainedModel::Lm { model, .. } => model,
            TrainedModel::Vae { model, .. } => model,
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        match self {
            TrainedModel::Lm { model, config } => model.to_bytes(config.as_ref()),
            TrainedModel::Vae { model, config } => model.to_bytes(config.as_ref()),
        }
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        match checkpoint::peek_magic(bytes) {
            Some(LM_MAGIC) => {
                let (model, config) = LinearModel::from_bytes(bytes)?;
                Ok(TrainedModel::Lm { model, config })
            }
            Some(VAE_MAGIC) => {
                let (model, config) = CollabVae::from_bytes(bytes)?;
                Ok(TrainedModel::Vae { model, config })
            }
            other => Err(Error::Checkpoint(format!("unrecognized checkpoint magic {other:?}"))),
        }
    }

    /// Writes the checkpoint and returns its sha256.
    pub fn save(&self, path: &Path) -> Result<String> {
        let bytes = self.to_bytes()?;
        if let Some(dir) = path.parent() {
            if !dir.as_os_str().is_empty() {
                fs::create_dir_all(dir)?;
            }
        }
        fs::write(path, &bytes)?;
        Ok(checkpoint::sha256_hex(&bytes))
    }

    /// Reads a checkpoint, returning it with its sha256.
    pub fn load(path: &Path) -> Result<(Self, String)> {
        let bytes = checkpoint::read_file(path)?;
        Ok((TrainedModel::from_bytes(&bytes)?, checkpoint::sha256_hex(&bytes)))
    }
}

impl LatentModel for TrainedModel {
    fn kind(&self) -> ModelKind {
        self.as_latent().kind()
    }
    fn feature_dim(&self) -> usize {
        self.as_latent().feature_dim()
    }
    fn latent_dim(&self) -> usize {
        self.as_latent().latent_dim()
    }
    fn user_embeddings(&self) -> ArrayView2<'_, f64> {
        self.as_latent().user_embeddings()
    }
    fn encode_batch(&self, x: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        self.as_latent().encode_batch(x)
    }
    fn sample_latent(&self, x: ArrayView1<'_, f64>, rng: &mut StageRng) -> Result<Array1<f64>> {
        self.as_latent().sample_latent(x, rng)
    }
    fn decode_batch(&self, z: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        self.as_latent().decode_batch(z)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::LossKind;
    use ndarray::array;

    #[test]
    fn rating_form() {
        assert_eq!(predicted_rating(array![0.0, 0.0].view(), array![3.0, 1.0].view()), 0.5);
        let r = predicted_rating(array![1.0e3].view(), array![1.0e3].view());
        assert!(r < 1.0);
    }

    #[test]
    fn dispatches_on_magic() {
        let lm = LinearModel::init(3, 4, 2, LossKind::CrossEntropy, 1).unwrap();
        let t = TrainedModel::Lm { model: lm, config: None };
        let back = TrainedModel::from_bytes(&t.to_bytes().unwrap()).unwrap();
        assert_eq!(back, t);
        assert_eq!(back.kind(), ModelKind::Lm);
        assert!(TrainedModel::from_bytes(b"MCNIP-XX-1\nabc").is_err());
    }

    #[test]
    fn missing_checkpoint_is_missing_input() {
        let err = TrainedModel::load(Path::new("/nonexistent/model.ckpt")).unwrap_err();
        assert_eq!(err.exit_code(), 4);
    }
}
