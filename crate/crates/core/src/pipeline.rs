//! Stage functions and the end-to-end run: synthesize, train, sample, cover,
//! evaluate.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::checkpoint::sha256_hex;
use crate::config::{CoverSection, RunConfig, SampleSection, TrainSection};
use crate::coverage::{build_rating_matrix, greedy_cover, CoverageProblem, CoverageSolution, LatentRatings};
use crate::dataset::{load_dataset_dir, rescale_ratings, split_dataset, DatasetSplit, RatingTriple, RatingsDataset};
use crate::error::{Error, Result};
use crate::eval::{
    append_ledger_row, coverage_report, nearest_existing_rmse, rating_rmse_heldout, rmse_to_ideal, EvalReport, LedgerRow,
};
use crate::linear_model::lm_train;
use crate::model::{LatentModel, ModelKind, TrainedModel};
use crate::sampler::{
    default_n_components, fit_gmm, sample_candidates, sample_prior, sample_rating_weighted, CandidateSet, Provenance,
};
use crate::synth::{generate_synthetic, SyntheticDataset, GROUPS_FILE};
use crate::train::TrainingHistory;
use crate::vae_model::vae_train;

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

pub const DATA_DIR: &str = "data";
pub const MODEL_FILE: &str = "model.ckpt";
pub const HISTORY_FILE: &str = "history.json";
pub const CANDIDATES_FILE: &str = "candidates.csv";
pub const SOLUTION_FILE: &str = "solution.json";
pub const REPORT_FILE: &str = "report.json";
pub const RUN_META_FILE: &str = "run_meta.json";
pub const AGGREGATE_FILE: &str = "aggregate.json";

/// Provenance stamped into every output.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OutputMeta {
    pub config_hash: String,
    pub seed: u64,
    pub version: String,
}

impl OutputMeta {
    pub fn new(config_hash: impl Into<String>, seed: u64) -> Self {
        OutputMeta {
            config_hash: config_hash.into(),
            seed,
            version: VERSION.to_string(),
        }
    }
}

/// Writes `value` as pretty JSON with an added top-level `meta` object.
pub fn write_json_with_meta<T: Serialize>(path: &Path, value: &T, meta: &OutputMeta) -> Result<()> {
    let mut v = serde_json::to_value(value)?;
    match v.as_object_mut() {
        Some(obj) => {
            obj.insert("meta".into(), serde_json::to_value(meta)?);
        }
        None => {
            v = serde_json::json!({ "meta": meta, "value": v });
        }
    }
    fs::write(path, serde_json::to_string_pretty(&v)? + "\n")?;
    Ok(())
}

/// Per-run manifest: metadata plus the sha256 of every file written.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunMeta {
    #[serde(flatten)]
    pub meta: OutputMeta,
    pub files: BTreeMap<String, String>,
}

impl RunMeta {
    pub fn record(&mut self, dir: &Path, name: &str) -> Result<()> {
        let bytes = fs::read(dir.join(name))?;
        self.files.insert(name.to_string(), sha256_hex(&bytes));
        Ok(())
    }

    /// Reads the manifest in `dir`, keeping its file checksums but stamping it
    /// with `meta`. Starts empty when there is none.
    pub fn load_or_new(dir: &Path, meta: OutputMeta) -> Result<Self> {
        let path = dir.join(RUN_META_FILE);
        let files = if path.exists() {
            serde_json::from_str::<RunMeta>(&fs::read_to_string(&path)?)?.files
        } else {
            BTreeMap::new()
        };
        Ok(RunMeta { meta, files })
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::write(dir.join(RUN_META_FILE), serde_json::to_string_pretty(self)? + "\n")?;
        Ok(())
    }
}

/// A ratings directory, with ground truth attached when it holds synthetic data.
#[derive(Clone, Debug)]
pub struct LoadedData {
    pub dataset: RatingsDataset,
    pub truth: Option<SyntheticDataset>,
}

/// Loads `dir`, rescaling ratings onto [0, 1] when they lie outside it.
pub fn load_data_dir(dir: &Path) -> Result<LoadedData> {
    let mut ds = load_dataset_dir(dir)?;
    if !ds.ratings_in_unit_interval() {
        log::info!("rescaling ratings from {:?} onto [0, 1]", ds.rating_scale());
        ds = rescale_ratings(ds)?;
    }
    let truth = if dir.join(GROUPS_FILE).exists() {
        Some(SyntheticDataset::load_ground_truth(ds.clone(), dir)?)
    } else {
        None
    };
    Ok(LoadedData { dataset: ds, truth })
}

pub fn split_for(cfg: &RunConfig, ds: &RatingsDataset) -> Result<DatasetSplit> {
    let [a, b, c] = cfg.train.split;
    split_dataset(ds, (a, b, c), cfg.seed)
}

pub fn train_model(cfg: &TrainSection, ds: &RatingsDataset, split: &DatasetSplit) -> Result<(TrainedModel, TrainingHistory)> {
    match cfg.model {
        ModelKind::Lm => {
            let (model, h) = lm_train(ds, split, &cfg.vae.base)?;
            Ok((TrainedModel::Lm { model, config: Some(cfg.vae.base.clone()) }, h))
        }
        ModelKind::Vae => {
            let (model, h) = vae_train(ds, split, &cfg.vae)?;
            Ok((TrainedModel::Vae { model, config: Some(cfg.vae.clone()) }, h))
        }
    }
}

/// Candidate latents per the configured sampler. The mixture is fitted to the
/// deterministic latents of every observed item.
pub fn draw_candidates(cfg: &SampleSection, model: &dyn LatentModel, ds: &RatingsDataset, seed: u64) -> Result<CandidateSet> {
    match cfg.sampler {
        Provenance::Gmm => {
            let latents = model.encode_batch(ds.features().view())?;
            let k = cfg.n_components.unwrap_or_else(|| default_n_components(latents.nrows()));
            let fit = fit_gmm(latents.view(), k, seed, cfg.max_iters, cfg.tol)?;
            log::info!(
                "mixture: {k} components, {} EM iterations, mean log-likelihood {:.4}",
                fit.log_likelihood.len(),
                fit.log_likelihood.last().copied().unwrap_or(f64::NAN)
            );
            sample_candidates(&fit.model, cfg.candidates, seed)
        }
        Provenance::Prior => sample_prior(model.latent_dim(), cfg.candidates, seed),
        Provenance::RatingWeighted => sample_rating_weighted(model, ds, cfg.candidates, cfg.gamma, seed),
    }
}

/// Greedy cover over all users, materializing the rating matrix only when it
/// fits in the memory budget.
pub fn solve_cover(cfg: &CoverSection, model: &dyn LatentModel, candidates: &CandidateSet) -> Result<CoverageSolution> {
    let bytes = model.num_users() as u128 * candidates.len() as u128 * 8;
    if bytes <= cfg.memory_budget_mb as u128 * (1 << 20) {
        let ratings = build_rating_matrix(model, candidates)?;
        Ok(greedy_cover(&CoverageProblem::new(ratings, cfg.tau, cfg.k)?))
    } else {
        let source = LatentRatings::new(model.user_embeddings(), candidates.latents.view())?;
        Ok(greedy_cover(&CoverageProblem::new(source, cfg.tau, cfg.k)?))
    }
}

/// Decoded features of the selected candidates, in selection order.
pub fn decode_selected(model: &dyn LatentModel, candidates: &CandidateSet, sol: &CoverageSolution) -> Result<Array2<f64>> {
    model.decode_batch(candidates.latents.select(Axis(0), &sol.selected).view())
}

pub fn evaluate(
    model: &dyn LatentModel,
    ds: &RatingsDataset,
    truth: Option<&SyntheticDataset>,
    heldout: &[RatingTriple],
    decoded: &Array2<f64>,
    sol: &CoverageSolution,
) -> Result<EvalReport> {
    let cov = coverage_report(sol, truth, decoded.view())?;
    let (rmse_ideal, nearest, table) = match truth {
        Some(sd) => {
            let m = rmse_to_ideal(decoded.view(), sd.ideal_items.view())?;
            let n = nearest_existing_rmse(sd.ideal_items.view(), ds.features().view())?;
            (Some(m.mean_rmse), Some(n), m.pairs)
        }
        None => (None, None, Vec::new()),
    };
    let heldout_rmse = if heldout.is_empty() {
        None
    } else {
        Some(rating_rmse_heldout(model, ds.features().view(), heldout)?)
    };
    Ok(EvalReport {
        rmse_to_ideal: rmse_ideal,
        nearest_existing_rmse: nearest,
        predicted_coverage: cov.predicted,
        real_coverage: cov.real,
        rating_rmse_heldout: heldout_rmse,
        per_item_table: table,
    })
}

pub fn heldout_triples(ds: &RatingsDataset, split: &DatasetSplit) -> Vec<RatingTriple> {
    split.test.iter().map(|&i| ds.triples()[i]).collect()
}

/// Everything one synthetic run produces, kept in memory.
#[derive(Clone, Debug)]
pub struct RunArtifacts {
    pub data: SyntheticDataset,
    pub split: DatasetSplit,
    pub model: TrainedModel,
    pub history: TrainingHistory,
    pub candidates: CandidateSet,
    pub solution: CoverageSolution,
    pub decoded: Array2<f64>,
    pub report: EvalReport,
}

/// Runs every stage on a freshly generated synthetic dataset without touching disk.
pub fn run_synthetic(cfg: &RunConfig) -> Result<RunArtifacts> {
    cfg.validate()?;
    let cfg = cfg.resolved();
    let data = generate_synthetic(&cfg.synth)?;
    let ds = &data.base;
    let split = split_for(&cfg, ds)?;
    let (model, history) = train_model(&cfg.train, ds, &split)?;
    let candidates = draw_candidates(&cfg.sample, &model, ds, cfg.seed)?;
    let solution = solve_cover(&cfg.cover, &model, &candidates)?;
    let decoded = decode_selected(&model, &candidates, &solution)?;
    let heldout = heldout_triples(ds, &split);
    let report = evaluate(&model, ds, Some(&data), &heldout, &decoded, &solution)?;
    Ok(RunArtifacts {
        data,
        split,
        model,
        history,
        candidates,
        solution,
        decoded,
        report,
    })
}

/// Writes a run's artifacts to `dir` and returns its manifest.
pub fn write_run(cfg: &RunConfig, run: &RunArtifacts, dir: &Path) -> Result<RunMeta> {
    let cfg = cfg.resolved();
    fs::create_dir_all(dir.join(DATA_DIR))?;
    let meta = OutputMeta::new(cfg.hash(), cfg.seed);
    let mut manifest = RunMeta {
        meta: meta.clone(),
        files: BTreeMap::new(),
    };
    run.data.save(&dir.join(DATA_DIR))?;
    let mut names: Vec<String> = Vec::new();
    for entry in fs::read_dir(dir.join(DATA_DIR))? {
        names.push(format!("{DATA_DIR}/{}", entry?.file_name().to_string_lossy()));
    }
    let checksum = run.model.save(&dir.join(MODEL_FILE))?;
    write_json_with_meta(&dir.join(HISTORY_FILE), &run.history, &meta)?;
    run.candidates.save(&dir.join(CANDIDATES_FILE), Some(&checksum))?;
    write_json_with_meta(&dir.join(SOLUTION_FILE), &serde_json::from_str::<serde_json::Value>(&run.solution.to_json()?)?, &meta)?;
    write_json_with_meta(&dir.join(REPORT_FILE), &run.report, &meta)?;
    names.sort();
    names.extend(
        [MODEL_FILE, HISTORY_FILE, CANDIDATES_FILE, "candidates.json", SOLUTION_FILE, REPORT_FILE]
            .iter()
            .map(|s| s.to_string()),
    );
    for n in &names {
        manifest.record(dir, n)?;
    }
    manifest.save(dir)?;
    Ok(manifest)
}

pub fn ledger_row(cfg: &RunConfig, report: &EvalReport) -> LedgerRow {
    let cfg = cfg.resolved();
    LedgerRow {
        model: cfg.train.model.to_string(),
        groups: cfg.synth.num_groups,
        items_per_group: cfg.synth.items_per_group,
        seed: cfg.seed,
        k: cfg.cover.k,
        tau: cfg.cover.tau,
        candidates: cfg.sample.candidates,
        rmse_to_ideal: report.rmse_to_ideal,
        nearest_existing_rmse: report.nearest_existing_rmse,
        predicted_coverage: report.predicted_coverage,
        real_coverage: report.real_coverage,
        rating_rmse_heldout: report.rating_rmse_heldout,
        config_hash: cfg.hash(),
    }
}

pub fn median(values: &[f64]) -> Option<f64> {
    let mut v: Vec<f64> = values.iter().copied().filter(|x| x.is_finite()).collect();
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) })
}

/// Medians of each metric across repeated runs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub runs: usize,
    pub seeds: Vec<u64>,
    pub rmse_to_ideal: Option<f64>,
    pub nearest_existing_rmse: Option<f64>,
    pub predicted_coverage: Option<f64>,
    pub real_coverage: Option<f64>,
    pub rating_rmse_heldout: Option<f64>,
}

pub fn aggregate(seeds: &[u64], reports: &[EvalReport]) -> Aggregate {
    let col = |f: &dyn Fn(&EvalReport) -> Option<f64>| median(&reports.iter().filter_map(f).collect::<Vec<_>>());
    Aggregate {
        runs: reports.len(),
        seeds: seeds.to_vec(),
        rmse_to_ideal: col(&|r| r.rmse_to_ideal),
        nearest_existing_rmse: col(&|r| r.nearest_existing_rmse),
        predicted_coverage: col(&|r| Some(r.predicted_coverage)),
        real_coverage: col(&|r| r.real_coverage),
        rating_rmse_heldout: col(&|r| r.rating_rmse_heldout),
    }
}

#[derive(Clone, Debug)]
pub struct PipelineSummary {
    pub reports: Vec<EvalReport>,
    pub aggregate: Aggregate,
    pub run_dirs: Vec<PathBuf>,
}

/// Full pipeline, `repeats` times with seeds `seed, seed + 1, ...`. Each run
/// writes into its own `seed-<s>` directory under the output directory and
/// appends a ledger row; the medians go to `aggregate.json`.
pub fn run_pipeline(cfg: &RunConfig, repeats: usize) -> Result<PipelineSummary> {
    if repeats == 0 {
        return Err(Error::invalid("repeats must be at least 1"));
    }
    cfg.validate()?;
    let root = cfg.output_dir.clone();
    fs::create_dir_all(&root)?;
    let ledger = cfg.eval.ledger.clone().unwrap_or_else(|| root.join("ledger.csv"));
    let mut reports = Vec::new();
    let mut seeds = Vec::new();
    let mut dirs = Vec::new();
    for r in 0..repeats {
        let run_cfg = RunConfig {
            seed: cfg.seed + r as u64,
            ..cfg.clone()
        };
        let dir = if repeats == 1 { root.clone() } else { root.join(format!("seed-{}", run_cfg.seed)) };
        log::info!("run {}/{repeats}: seed {}", r + 1, run_cfg.seed);
        let run = run_synthetic(&run_cfg)?;
        write_run(&run_cfg, &run, &dir)?;
        append_ledger_row(&ledger, &ledger_row(&run_cfg, &run.report))?;
        seeds.push(run_cfg.seed);
        reports.push(run.report);
        dirs.push(dir);
    }
    let agg = aggregate(&seeds, &reports);
    write_json_with_meta(&root.join(AGGREGATE_FILE), &agg, &OutputMeta::new(cfg.hash(), cfg.seed))?;
    Ok(PipelineSummary {
        reports,
        aggregate: agg,
        run_dirs: dirs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn medians() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), Some(2.0));
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), Some(2.5));
        assert_eq!(median(&[]), None);
    }

    #[test]
    fn meta_is_embedded() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.json");
        write_json_with_meta(&path, &EvalReport::default(), &OutputMeta::new("h", 7)).unwrap();
        let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(&path).unwrap()).unwrap();
        assert_eq!(v["meta"]["seed"], 7);
        assert_eq!(v["meta"]["config_hash"], "h");
        let back: EvalReport = serde_json::from_value(v).unwrap();
        assert_eq!(back, EvalReport::default());
    }
}
