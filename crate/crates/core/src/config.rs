//! Run configuration: one TOML file with a section per stage.
//!
//! ```toml
//! seed = 3
//! output_dir = "runs/vae"
//!
//! [synth]
//! num_groups = 4
//! items_per_group = 20
//!
//! [train]
//! model = "vae"
//! hidden = [14]
//!
//! [sample]
//! candidates = 200000
//!
//! [cover]
//! k = 4
//! tau = 0.7
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::ModelKind;
use crate::sampler::Provenance;
use crate::synth::SyntheticSpec;
use crate::vae_model::VaeTrainConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainSection {
    pub model: ModelKind,
    /// Train, validation and test fractions.
    pub split: [f64; 3],
    /// Linear-model settings are the shared subset of these.
    #[serde(flatten)]
    pub vae: VaeTrainConfig,
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection {
            model: ModelKind::Vae,
            split: [0.8, 0.1, 0.1],
            vae: VaeTrainConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SampleSection {
    pub sampler: Provenance,
    pub candidates: usize,
    /// Mixture size; `None` means `min(10, number of items)`.
    pub n_components: Option<usize>,
    pub max_iters: usize,
    pub tol: f64,
    /// Softmax temperature of the rating-weighted sampler.
    pub gamma: f64,
}

impl Default for SampleSection {
    fn default() -> Self {
        SampleSection {
            sampler: Provenance::Gmm,
            candidates: 200_000,
            n_components: None,
            max_iters: 200,
            tol: 1e-6,
            gamma: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CoverSection {
    pub k: usize,
    pub tau: f64,
    /// Above this many bytes the rating matrix is computed on the fly.
    pub memory_budget_mb: usize,
}

impl Default for CoverSection {
    fn default() -> Self {
        CoverSection {
            k: 4,
            tau: 0.7,
            memory_budget_mb: 512,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalSection {
    /// CSV ledger that receives one row per run.
    pub ledger: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    /// Root seed; every stage derives its own stream from it.
    pub seed: u64,
    pub output_dir: PathBuf,
    /// Worker threads; `None` uses every core.
    pub threads: Option<usize>,
    pub synth: SyntheticSpec,
    pub train: TrainSection,
    pub sample: SampleSection,
    pub cover: CoverSection,
    pub eval: EvalSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            output_dir: PathBuf::from("mcnip-run"),
            threads: None,
            synth: SyntheticSpec::default(),
            train: TrainSection::default(),
            sample: SampleSection::default(),
            cover: CoverSection::default(),
            eval: EvalSection::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingInput(path.to_path_buf()));
        }
        RunConfig::from_toml(&fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Copies the root seed into every stage that carries its own.
    pub fn resolved(&self) -> RunConfig {
        let mut c = self.clone();
        c.synth.seed = c.seed;
        c.train.vae.base.seed = c.seed;
        c
    }

    pub fn validate(&self) -> Result<()> {
        self.synth.validate()?;
        self.train.vae.validate()?;
        if self.sample.candidates == 0 {
            return Err(Error::invalid("sample.candidates must be at least 1"));
        }
        if self.cover.k == 0 || self.cover.k > self.sample.candidates {
            return Err(Error::invalid("cover.k must lie in 1..=sample.candidates"));
        }
        if !(0.0..=1.0).contains(&self.cover.tau) {
            return Err(Error::invalid("cover.tau must lie in [0, 1]"));
        }
        if self.threads == Some(0) {
            return Err(Error::invalid("threads must be at least 1"));
        }
        Ok(())
    }

    /// sha256 of the resolved configuration, excluding where outputs go.
    pub fn hash(&self) -> String {
        let mut c = self.resolved();
        c.output_dir = PathBuf::new();
        c.eval.ledger = None;
        c.threads = None;
        let text = serde_json::to_string(&c).expect("config serializes");
        Sha256::digest(text.as_bytes()).iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml() {
        let c = RunConfig::default();
        assert_eq!(RunConfig::from_toml(&c.to_toml().unwrap()).unwrap(), c);
    }

    #[test]
    fn sections_parse() {
        let c = RunConfig::from_toml(
            "seed = 3\n[synth]\nnum_groups = 2\n[train]\nmodel = \"lm\"\nlatent_dim = 4\nhidden = [10]\n[cover]\nk = 2\n",
        )
        .unwrap();
        assert_eq!(c.seed, 3);
        assert_eq!(c.synth.num_groups, 2);
        assert_eq!(c.synth.items_per_group, 20);
        assert_eq!(c.train.model, ModelKind::Lm);
        assert_eq!(c.train.vae.base.latent_dim, 4);
        assert_eq!(c.train.vae.hidden, vec![10]);
        assert_eq!(c.train.vae.base.batch_size, 64);
        assert_eq!(c.cover.k, 2);
        assert_eq!(c.resolved().synth.seed, 3);
    }

    #[test]
    fn bad_toml_is_a_config_error() {
        let err = RunConfig::from_toml("seed = \"x\"").unwrap_err();
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn hash_ignores_output_location() {
        let a = RunConfig::default();
        let b = RunConfig {
            output_dir: "elsewhere".into(),
            ..RunConfig::default()
        };
        assert_eq!(a.hash(), b.hash());
        let c = RunConfig { seed: 1, ..RunConfig::default() };
        assert_ne!(a.hash(), c.hash());
    }
}
