//! Python bindings: run configurations, synthetic data, model training and
//! loading, candidate sampling, coverage and evaluation.
//!
//! Matrices cross the boundary as lists of rows; reports come back as dicts.

use std::path::PathBuf;

use mcnip_core::config::RunConfig;
use mcnip_core::coverage::{greedy_cover, CoverageProblem, CoverageSolution};
use mcnip_core::dataset::split_dataset;
use mcnip_core::eval::linear_assignment as assign;
use mcnip_core::model::{LatentModel, TrainedModel};
use mcnip_core::pipeline::{self, load_data_dir};
use mcnip_core::sampler::CandidateSet;
use mcnip_core::synth::{generate_synthetic, SyntheticDataset};
use mcnip_core::vae_model::kl_to_standard_normal as kl;
use ndarray::{Array1, Array2};
use pyo3::create_exception;
use pyo3::exceptions::PyException;
use pyo3::prelude::*;
use serde::Serialize;

create_exception!(mcnip, McnipError, PyException, "Raised for every failure inside the library.");

fn err(e: mcnip_core::Error) -> PyErr {
    McnipError::new_err(format!("{e} (exit code {})", e.exit_code()))
}

fn matrix(rows: Vec<Vec<f64>>) -> PyResult<Array2<f64>> {
    let n = rows.len();
    let d = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != d) {
        return Err(McnipError::new_err("rows have different lengths"));
    }
    Array2::from_shape_vec((n, d), rows.into_iter().flatten().collect()).map_err(|e| McnipError::new_err(e.to_string()))
}

fn rows(a: &Array2<f64>) -> Vec<Vec<f64>> {
    a.rows().into_iter().map(|r| r.to_vec()).collect()
}

fn to_py<'py, T: Serialize>(py: Python<'py>, value: &T) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(value).map_err(|e| McnipError::new_err(e.to_string()))?;
    py.import("json")?.call_method1("loads", (text,))
}

fn config(toml: Option<&str>) -> PyResult<RunConfig> {
    let c = match toml {
        Some(t) => RunConfig::from_toml(t).map_err(err)?,
        None => RunConfig::default(),
    };
    c.validate().map_err(err)?;
    Ok(c.resolved())
}

/// Default run configuration as TOML text.
#[pyfunction]
fn default_config() -> PyResult<String> {
    RunConfig::default().to_toml().map_err(err)
}

/// Synthetic ratings with known ideal items.
#[pyclass(name = "SyntheticData", module = "mcnip")]
struct PySynthetic {
    inner: SyntheticDataset,
}

#[pymethods]
impl PySynthetic {
    /// Generates from the `[synth]` section of a TOML config (defaults when omitted).
    #[new]
    #[pyo3(signature = (config=None))]
    fn new(config: Option<&str>) -> PyResult<Self> {
        let c = self::config(config)?;
        Ok(PySynthetic {
            inner: generate_synthetic(&c.synth).map_err(err)?,
        })
    }

    #[getter]
    fn num_users(&self) -> usize {
        self.inner.base.num_users()
    }

    #[getter]
    fn num_items(&self) -> usize {
        self.inner.base.num_items()
    }

    #[getter]
    fn features(&self) -> Vec<Vec<f64>> {
        rows(self.inner.base.features())
    }

    #[getter]
    fn ideal_items(&self) -> Vec<Vec<f64>> {
        rows(&self.inner.ideal_items)
    }

    /// (user, item, rating) triples with dense indices.
    #[getter]
    fn ratings(&self) -> Vec<(usize, usize, f64)> {
        self.inner.base.triples().iter().map(|t| (t.user, t.item, t.rating)).collect()
    }

    #[getter]
    fn group_of_user(&self) -> Vec<usize> {
        self.inner.group_of_user.clone()
    }

    /// Noise-free rating of `user` for an item with features `x`.
    fn true_rating(&self, user: usize, x: Vec<f64>) -> PyResult<f64> {
        self.inner.true_rating(user, Array1::from(x).view()).map_err(err)
    }

    fn save(&self, dir: PathBuf) -> PyResult<()> {
        std::fs::create_dir_all(&dir)?;
        self.inner.save(&dir).map_err(err)
    }
}

/// A trained linear model or variational autoencoder.
#[pyclass(name = "Model", module = "mcnip")]
struct PyModel {
    inner: TrainedModel,
}

#[pymethods]
impl PyModel {
    /// Trains on a ratings directory using the `[train]` section of a TOML config.
    /// Returns the model and its per-epoch history.
    #[staticmethod]
    #[pyo3(signature = (data_dir, config=None))]
    fn train<'py>(py: Python<'py>, data_dir: PathBuf, config: Option<&str>) -> PyResult<(Self, Bound<'py, PyAny>)> {
        let c = self::config(config)?;
        let data = load_data_dir(&data_dir).map_err(err)?;
        let [a, b, t] = c.train.split;
        let split = split_dataset(&data.dataset, (a, b, t), c.seed).map_err(err)?;
        let (model, history) = py
            .detach(|| pipeline::train_model(&c.train, &data.dataset, &split))
            .map_err(err)?;
        Ok((PyModel { inner: model }, to_py(py, &history)?))
    }

    /// Loads a checkpoint; returns the model and the file's sha256.
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<(Self, String)> {
        let (inner, sum) = TrainedModel::load(&path).map_err(err)?;
        Ok((PyModel { inner }, sum))
    }

    /// Writes a checkpoint and returns its sha256.
    fn save(&self, path: PathBuf) -> PyResult<String> {
        self.inner.save(&path).map_err(err)
    }

    #[getter]
    fn kind(&self) -> String {
        self.inner.kind().to_string()
    }

    #[getter]
    fn latent_dim(&self) -> usize {
        self.inner.latent_dim()
    }

    #[getter]
    fn feature_dim(&self) -> usize {
        self.inner.feature_dim()
    }

    #[getter]
    fn num_users(&self) -> usize {
        self.inner.num_users()
    }

    /// Deterministic latents (posterior means for the autoencoder).
    fn encode(&self, features: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
        Ok(rows(&self.inner.encode_batch(matrix(features)?.view()).map_err(err)?))
    }

    fn decode(&self, latents: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
        Ok(rows(&self.inner.decode_batch(matrix(latents)?.view()).map_err(err)?))
    }

    fn predict_rating(&self, user: usize, latent: Vec<f64>) -> PyResult<f64> {
        self.inner.predict_rating(user, Array1::from(latent).view()).map_err(err)
    }
}

/// Candidate latents drawn per the `[sample]` section; rows of a list.
#[pyfunction]
#[pyo3(signature = (model, data_dir, config=None))]
fn sample_candidates(py: Python<'_>, model: &PyModel, data_dir: PathBuf, config: Option<&str>) -> PyResult<Vec<Vec<f64>>> {
    let c = self::config(config)?;
    let data = load_data_dir(&data_dir).map_err(err)?;
    let cands = py
        .detach(|| pipeline::draw_candidates(&c.sample, &model.inner, &data.dataset, c.seed))
        .map_err(err)?;
    Ok(rows(&cands.latents))
}

fn solution_dict<'py>(py: Python<'py>, sol: &CoverageSolution) -> PyResult<Bound<'py, PyAny>> {
    let text = sol.to_json().map_err(err)?;
    py.import("json")?.call_method1("loads", (text,))
}

/// Greedy cover over an explicit users x candidates rating matrix.
#[pyfunction]
fn greedy_cover_matrix<'py>(py: Python<'py>, ratings: Vec<Vec<f64>>, tau: f64, k: usize) -> PyResult<Bound<'py, PyAny>> {
    let p = CoverageProblem::new(matrix(ratings)?, tau, k).map_err(err)?;
    solution_dict(py, &greedy_cover(&p))
}

/// Greedy cover of a model's users by candidate latents.
#[pyfunction]
fn cover<'py>(py: Python<'py>, model: &PyModel, candidates: Vec<Vec<f64>>, tau: f64, k: usize) -> PyResult<Bound<'py, PyAny>> {
    let set = CandidateSet {
        latents: matrix(candidates)?,
        provenance: mcnip_core::sampler::Provenance::Prior,
        seed: 0,
    };
    let section = mcnip_core::config::CoverSection { k, tau, ..Default::default() };
    let sol = py.detach(|| pipeline::solve_cover(&section, &model.inner, &set)).map_err(err)?;
    solution_dict(py, &sol)
}

/// Minimum-cost perfect matching: column assigned to each row.
#[pyfunction]
fn linear_assignment(cost: Vec<Vec<f64>>) -> PyResult<Vec<usize>> {
    assign(matrix(cost)?.view()).map_err(err)
}

#[pyfunction]
fn kl_to_standard_normal(mu: Vec<f64>, log_sigma: Vec<f64>) -> PyResult<f64> {
    kl(Array1::from(mu).view(), Array1::from(log_sigma).view()).map_err(err)
}

/// Runs every stage in memory on fresh synthetic data and returns the report.
#[pyfunction]
#[pyo3(signature = (config=None))]
fn run_synthetic<'py>(py: Python<'py>, config: Option<&str>) -> PyResult<Bound<'py, PyAny>> {
    let c = self::config(config)?;
    let run = py.detach(|| pipeline::run_synthetic(&c)).map_err(err)?;
    to_py(py, &run.report)
}

#[pymodule]
fn mcnip(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("McnipError", m.py().get_type::<McnipError>())?;
    m.add("__version__", pipeline::VERSION)?;
    m.add_class::<PySynthetic>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(default_config, m)?)?;
    m.add_function(wrap_pyfunction!(sample_candidates, m)?)?;
    m.add_function(wrap_pyfunction!(greedy_cover_matrix, m)?)?;
    m.add_function(wrap_pyfunction!(cover, m)?)?;
    m.add_function(wrap_pyfunction!(linear_assignment, m)?)?;
    m.add_function(wrap_pyfunction!(kl_to_standard_normal, m)?)?;
    m.add_function(wrap_pyfunction!(run_synthetic, m)?)?;
    Ok(())
}
