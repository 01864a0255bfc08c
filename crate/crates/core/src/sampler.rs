//! Candidate latent items: a diagonal Gaussian mixture fitted to the latents
//! of observed items, the standard-normal prior, or posterior draws around
//! items chosen by a softmax of their rating sums.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::dataset::RatingsDataset;
use crate::error::{check_dim, Error, Result};
use crate::model::LatentModel;
use crate::rng::{self, StageRng};

pub const VAR_FLOOR: f64 = 1e-6;
/// Components whose responsibility mass falls below this are re-seeded.
pub const COLLAPSE_MASS: f64 = 1e-12;
pub const DEFAULT_MAX_COMPONENTS: usize = 10;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GmmModel {
    weights: Array1<f64>,
    means: Array2<f64>,
    variances: Array2<f64>,
}

impl GmmModel {
    pub fn new(weights: Array1<f64>, means: Array2<f64>, variances: Array2<f64>) -> Result<Self> {
        let k = weights.len();
        if k == 0 {
            return Err(Error::invalid("a mixture needs at least one component"));
        }
        check_dim("mixture means", k, means.nrows())?;
        check_dim("mixture variance rows", k, variances.nrows())?;
        check_dim("mixture variance width", means.ncols(), variances.ncols())?;
        if weights.iter().any(|&w| !(w >= 0.0)) || (weights.sum() - 1.0).abs() > 1e-9 {
            return Err(Error::invalid("mixture weights must be a probability vector"));
        }
        if variances.iter().any(|&v| !(v >= VAR_FLOOR) || !v.is_finite()) || means.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid(format!("mixture variances must be finite and at least {VAR_FLOOR}")));
        }
        Ok(GmmModel { weights, means, variances })
    }

    pub fn n_components(&self) -> usize {
        self.weights.len()
    }

    pub fn dim(&self) -> usize {
        self.means.ncols()
    }

    pub fn weights(&self) -> &Array1<f64> {
        &self.weights
    }

    pub fn means(&self) -> &Array2<f64> {
        &self.means
    }

    pub fn variances(&self) -> &Array2<f64> {
        &self.variances
    }

    /// Per-point log joint `log pi_k + log N(x | mu_k, diag(var_k))`, `N x K`.
    fn log_joint(&self, x: ArrayView2<'_, f64>) -> Array2<f64> {
        let half_log_2pi = 0.5 * (2.0 * std::f64::consts::PI).ln();
        let consts: Vec<f64> = (0..self.n_components())
            .map(|k| {
                self.weights[k].ln()
                    - self.variances.row(k).iter().map(|v| 0.5 * v.ln() + half_log_2pi).sum::<f64>()
            })
            .collect();
        Array2::from_shape_fn((x.nrows(), self.n_components()), |(i, k)| {
            let mut q = 0.0;
            for j in 0..x.ncols() {
                let d = x[[i, j]] - self.means[[k, j]];
                q += d * d / self.variances[[k, j]];
            }
            consts[k] - 0.5 * q
        })
    }

    /// Mean log-likelihood per point.
    pub fn mean_log_likelihood(&self, x: ArrayView2<'_, f64>) -> Result<f64> {
        check_dim("mixture input width", self.dim(), x.ncols())?;
        let lj = self.log_joint(x);
        Ok(lj.rows().into_iter().map(|r| log_sum_exp(r.iter().copied())).sum::<f64>() / x.nrows().max(1) as f64)
    }
}

fn log_sum_exp(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let m = values.clone().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + values.map(|v| (v - m).exp()).sum::<f64>().ln()
}

#[derive(Clone, Debug, PartialEq)]
pub struct GmmFit {
    pub model: GmmModel,
    /// Mean log-likelihood of the data under the parameters entering each EM iteration.
    pub log_likelihood: Vec<f64>,
    pub converged: bool,
    /// How many times a collapsed component was re-seeded.
    pub reseeded: usize,
}

pub fn default_n_components(n_points: usize) -> usize {
    DEFAULT_MAX_COMPONENTS.min(n_points).max(1)
}

/// k-means++ style seeding: first center uniform, then proportional to
/// squared distance from the nearest chosen center.
fn seed_means(x: ArrayView2<'_, f64>, k: usize, rng: &mut StageRng) -> Array2<f64> {
    let n = x.nrows();
    let mut centers = vec![rng.random_range(0..n)];
    let mut d2: Vec<f64> = vec![f64::INFINITY; n];
    while centers.len() < k {
        let last = x.row(*centers.last().expect("non-empty"));
        for i in 0..n {
            let d: f64 = x.row(i).iter().zip(last.iter()).map(|(a, b)| (a - b).powi(2)).sum();
            d2[i] = d2[i].min(d);
        }
        let next = match WeightedIndex::new(&d2) {
            Ok(w) => w.sample(rng),
            // every point coincides with a center
            Err(_) => rng.random_range(0..n),
        };
        centers.push(next);
    }
    x.select(Axis(0), &centers)
}

fn column_variances(x: ArrayView2<'_, f64>) -> Array1<f64> {
    let mean = x.mean_axis(Axis(0)).expect("non-empty");
    let mut var = Array1::zeros(x.ncols());
    for row in x.rows() {
        for j in 0..x.ncols() {
            var[j] += (row[j] - mean[j]).powi(2);
        }
    }
    (var / x.nrows() as f64).mapv(|v: f64| v.max(VAR_FLOOR))
}

/// Expectation-maximization for a diagonal-covariance mixture.
pub fn fit_gmm(latents: ArrayView2<'_, f64>, n_components: usize, seed: u64, max_iters: usize, tol: f64) -> Result<GmmFit> {
    let (n, d) = latents.dim();
    if n_components == 0 {
        return Err(Error::invalid("n_components must be at least 1"));
    }
    if n < n_components {
        return Err(Error::invalid(format!("{n} points cannot support {n_components} mixture components")));
    }
    if d == 0 || latents.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("mixture input".into()));
    }
    let mut rng = rng::substream(seed, rng::GMM);
    let k = n_components;
    let global_var = column_variances(latents);
    let mut model = GmmModel {
        weights: Array1::from_elem(k, 1.0 / k as f64),
        means: seed_means(latents, k, &mut rng),
        variances: Array2::from_shape_fn((k, d), |(_, j)| global_var[j]),
    };
    let mut history = Vec::new();
    let mut converged = false;
    let mut reseeded = 0;

    for _ in 0..max_iters.max(1) {
        // E-step
        let mut resp = model.log_joint(latents);
        let mut ll = 0.0;
        for mut row in resp.rows_mut() {
            let lse = log_sum_exp(row.iter().copied());
            ll += lse;
            row.mapv_inplace(|v| (v - lse).exp());
        }
        ll /= n as f64;
        if let Some(&prev) = history.last() {
            if ll - prev < tol {
                history.push(ll);
                converged = true;
                break;
            }
        }
        history.push(ll);

        // M-step
        let mass = resp.sum_axis(Axis(0));
        for c in 0..k {
            if mass[c] < COLLAPSE_MASS {
                let i = rng.random_range(0..n);
                log::warn!("mixture component {c} collapsed; re-seeding at point {i}");
                reseeded += 1;
                model.means.row_mut(c).assign(&latents.row(i));
                model.variances.row_mut(c).assign(&global_var);
                model.weights[c] = 1.0 / n as f64;
                continue;
            }
            let r = resp.column(c);
            let mean = r.dot(&latents) / mass[c];
            let mut var = Array1::zeros(d);
            for (i, row) in latents.rows().into_iter().enumerate() {
                for j in 0..d {
                    var[j] += r[i] * (row[j] - mean[j]).powi(2);
                }
            }
            model.variances.row_mut(c).assign(&(var / mass[c]).mapv(|v: f64| v.max(VAR_FLOOR)));
            model.means.row_mut(c).assign(&mean);
            model.weights[c] = mass[c] / n as f64;
        }
        let total = model.weights.sum();
        model.weights /= total;
    }
    Ok(GmmFit {
        model,
        log_likelihood: history,
        converged,
        reseeded,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Gmm,
    Prior,
    RatingWeighted,
}

impl std::str::FromStr for Provenance {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gmm" => Ok(Provenance::Gmm),
            "prior" => Ok(Provenance::Prior),
            "rating_weighted" | "rating-weighted" => Ok(Provenance::RatingWeighted),
            other => Err(Error::invalid(format!(
                "unknown sampler {other:?}, expected gmm, prior or rating_weighted"
            ))),
        }
    }
}

impl std::fmt::Display for Provenance {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Provenance::Gmm => "gmm",
            Provenance::Prior => "prior",
            Provenance::RatingWeighted => "rating_weighted",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CandidateSet {
    /// `T x d_z`
    pub latents: Array2<f64>,
    pub provenance: Provenance,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CandidateMeta {
    pub provenance: Provenance,
    pub seed: u64,
    pub count: usize,
    pub latent_dim: usize,
    pub model_checksum: Option<String>,
}

impl CandidateSet {
    pub fn len(&self) -> usize {
        self.latents.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.latents.nrows() == 0
    }

    pub fn latent_dim(&self) -> usize {
        self.latents.ncols()
    }

    pub fn meta_path(csv: &Path) -> PathBuf {
        csv.with_extension("json")
    }

    /// Writes `candidate_id,z0,...` rows to `path` and metadata next to it.
    pub fn save(&self, path: &Path, model_checksum: Option<&str>) -> Result<()> {
        let mut out = String::from("candidate_id");
        for j in 0..self.latent_dim() {
            write!(out, ",z{j}").expect("string write");
        }
        out.push('\n');
        for (t, row) in self.latents.rows().into_iter().enumerate() {
            write!(out, "{t}").expect("string write");
            for v in row {
                write!(out, ",{v}").expect("string write");
            }
            out.push('\n');
        }
        fs::write(path, out)?;
        let meta = CandidateMeta {
            provenance: self.provenance,
            seed: self.seed,
            count: self.len(),
            latent_dim: self.latent_dim(),
            model_checksum: model_checksum.map(str::to_owned),
        };
        fs::write(Self::meta_path(path), serde_json::to_string_pretty(&meta)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<(Self, CandidateMeta)> {
        let meta_path = Self::meta_path(path);
        for p in [path, meta_path.as_path()] {
            if !p.exists() {
                return Err(Error::MissingInput(p.to_path_buf()));
            }
        }
        let meta: CandidateMeta = serde_json::from_str(&fs::read_to_string(&meta_path)?)?;
        let mut reader = csv::Reader::from_path(path)?;
        let mut data = Vec::with_capacity(meta.count * meta.latent_dim);
        let mut rows = 0;
        for (line, rec) in reader.records().enumerate() {
            let rec = rec?;
            let parse_err = |message: String| Error::Parse {
                path: path.display().to_string(),
                line: line as u64 + 2,
                message,
            };
            if rec.len() != meta.latent_dim + 1 {
                return Err(parse_err(format!("expected {} fields, found {}", meta.latent_dim + 1, rec.len())));
            }
            let id: usize = rec[0].parse().map_err(|_| parse_err(format!("bad candidate id {:?}", &rec[0])))?;
            if id != rows {
                return Err(parse_err(format!("candidate ids must be 0..T in order, found {id}")));
            }
            for field in rec.iter().skip(1) {
                let v: f64 = field.parse().map_err(|_| parse_err(format!("bad number {field:?}")))?;
                data.push(v);
            }
            rows += 1;
        }
        check_dim("candidate count", meta.count, rows)?;
        let latents = Array2::from_shape_vec((rows, meta.latent_dim), data).map_err(|e| Error::invalid(e.to_string()))?;
        Ok((
            CandidateSet {
                latents,
                provenance: meta.provenance,
                seed: meta.seed,
            },
            meta,
        ))
    }
}

/// `count` i.i.d. draws from the mixture.
pub fn sample_candidates(gmm: &GmmModel, count: usize, seed: u64) -> Result<CandidateSet> {
    if count == 0 {
        return Err(Error::invalid("candidate count must be at least 1"));
    }
    let mut rng = rng::substream(seed, rng::SAMPLING);
    let pick = WeightedIndex::new(gmm.weights.iter().copied()).map_err(|e| Error::invalid(e.to_string()))?;
    let std = gmm.variances.mapv(f64::sqrt);
    let d = gmm.dim();
    let mut latents = Array2::zeros((count, d));
    for mut row in latents.rows_mut() {
        let c = pick.sample(&mut rng);
        for j in 0..d {
            let e: f64 = rng.sample(StandardNormal);
            row[j] = gmm.means[[c, j]] + std[[c, j]] * e;
        }
    }
    Ok(CandidateSet {
        latents,
        provenance: Provenance::Gmm,
        seed,
    })
}

/// `count` standard-normal latents.
pub fn sample_prior(latent_dim: usize, count: usize, seed: u64) -> Result<CandidateSet> {
    if count == 0 || latent_dim == 0 {
        return Err(Error::invalid("candidate count and latent dimension must be at least 1"));
    }
    let mut rng = rng::substream(seed, rng::SAMPLING);
    Ok(CandidateSet {
        latents: crate::nn::standard_normal_matrix(count, latent_dim, &mut rng),
        provenance: Provenance::Prior,
        seed,
    })
}

/// Softmax of `gamma * rating_sum` over items, computed with the maximum subtracted.
pub fn rating_weights(rating_sums: &[f64], gamma: f64) -> Result<Vec<f64>> {
    if !gamma.is_finite() {
        return Err(Error::invalid("gamma must be finite"));
    }
    if rating_sums.is_empty() {
        return Err(Error::invalid("no items to weight"));
    }
    let logits: Vec<f64> = rating_sums.iter().map(|s| gamma * s).collect();
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
    let z: f64 = e.iter().sum();
    Ok(e.into_iter().map(|v| v / z).collect())
}

/// Picks observed items with probability [`rating_weights`] and draws a latent
/// for each pick from the model.
pub fn sample_rating_weighted(
    model: &dyn LatentModel,
    ds: &RatingsDataset,
    count: usize,
    gamma: f64,
    seed: u64,
) -> Result<CandidateSet> {
    if count == 0 {
        return Err(Error::invalid("candidate count must be at least 1"));
    }
    check_dim("model feature width", ds.feature_dim(), model.feature_dim())?;
    let alpha = rating_weights(&ds.item_rating_sums(), gamma)?;
    let pick = WeightedIndex::new(&alpha).map_err(|e| Error::invalid(e.to_string()))?;
    let mut rng = rng::substream(seed, rng::SAMPLING);
    let mut latents = Array2::zeros((count, model.latent_dim()));
    for mut row in latents.rows_mut() {
        let item = pick.sample(&mut rng);
        row.assign(&model.sample_latent(ds.item_features(item), &mut rng)?);
    }
    Ok(CandidateSet {
        latents,
        provenance: Provenance::RatingWeighted,
        seed,
    })
}
