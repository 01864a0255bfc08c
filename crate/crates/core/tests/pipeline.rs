use std::fs;

use mcnip_core::config::RunConfig;
use mcnip_core::dataset::{load_dataset_dir, split_dataset};
use mcnip_core::model::{LatentModel, ModelKind, TrainedModel};
use mcnip_core::nn::LossKind;
use mcnip_core::pipeline::{run_pipeline, run_synthetic, write_run, RunMeta, RUN_META_FILE};
use mcnip_core::sampler::CandidateSet;
use mcnip_core::synth::{generate_synthetic, SyntheticDataset, SyntheticSpec};
use mcnip_core::vae_model::{vae_train, VaeTrainConfig};
use mcnip_core::coverage::CoverageSolution;

fn small_config(model: ModelKind) -> RunConfig {
    let mut c = RunConfig::default();
    c.seed = 5;
    c.synth.num_users = 300;
    c.synth.num_groups = 2;
    c.synth.items_per_group = 6;
    c.synth.feature_dim = 8;
    c.synth.ratings_per_user = 6;
    c.train.model = model;
    c.train.vae.base.latent_dim = 3;
    c.train.vae.base.max_epochs = 4;
    c.train.vae.hidden = vec![6];
    c.sample.candidates = 500;
    c.cover.k = 2;
    c
}

#[test]
fn in_memory_run_is_deterministic() {
    for kind in [ModelKind::Lm, ModelKind::Vae] {
        let c = small_config(kind);
        let a = run_synthetic(&c).unwrap();
        let b = run_synthetic(&c).unwrap();
        assert_eq!(a.solution, b.solution);
        assert_eq!(a.report, b.report);
        assert_eq!(a.decoded.nrows(), 2);
        assert_eq!(a.report.per_item_table.len(), 2);
        assert!(a.report.rmse_to_ideal.unwrap() >= 0.0);
        assert!((0.0..=1.0).contains(&a.report.predicted_coverage));
    }
}

#[test]
fn written_run_reloads() {
    let dir = tempfile::tempdir().unwrap();
    let c = small_config(ModelKind::Vae);
    let run = run_synthetic(&c).unwrap();
    let meta = write_run(&c, &run, dir.path()).unwrap();
    let on_disk: RunMeta = serde_json::from_str(&fs::read_to_string(dir.path().join(RUN_META_FILE)).unwrap()).unwrap();
    assert_eq!(on_disk, meta);
    assert_eq!(meta.meta.config_hash, c.hash());
    assert!(meta.files.contains_key("model.ckpt"));

    let (model, checksum) = TrainedModel::load(&dir.path().join("model.ckpt")).unwrap();
    assert_eq!(meta.files["model.ckpt"], checksum);
    assert_eq!(model.to_bytes().unwrap(), run.model.to_bytes().unwrap());

    let (cands, cmeta) = CandidateSet::load(&dir.path().join("candidates.csv")).unwrap();
    assert_eq!(cands.latents, run.candidates.latents);
    assert_eq!(cmeta.model_checksum.as_deref(), Some(checksum.as_str()));

    let sol = CoverageSolution::load(&dir.path().join("solution.json")).unwrap();
    assert_eq!(sol, run.solution);

    let data = load_dataset_dir(&dir.path().join("data")).unwrap();
    let truth = SyntheticDataset::load_ground_truth(data, &dir.path().join("data")).unwrap();
    assert_eq!(truth.ideal_items, run.data.ideal_items);
}

#[test]
fn repeats_write_ledger_and_aggregate() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = small_config(ModelKind::Lm);
    c.output_dir = dir.path().join("out");
    let summary = run_pipeline(&c, 3).unwrap();
    assert_eq!(summary.reports.len(), 3);
    assert_eq!(summary.aggregate.seeds, vec![5, 6, 7]);
    let ledger = mcnip_core::eval::read_ledger(&c.output_dir.join("ledger.csv")).unwrap();
    assert_eq!(ledger.len(), 3);
    assert!(c.output_dir.join("seed-6").join(RUN_META_FILE).exists());
    assert!(c.output_dir.join("aggregate.json").exists());
    let mut r: Vec<f64> = summary.reports.iter().map(|r| r.rmse_to_ideal.unwrap()).collect();
    r.sort_by(f64::total_cmp);
    assert_eq!(summary.aggregate.rmse_to_ideal, Some(r[1]));
}

fn synthetic(groups: usize, per_group: usize, users: usize) -> SyntheticDataset {
    generate_synthetic(&SyntheticSpec {
        num_users: users,
        num_groups: groups,
        items_per_group: per_group,
        seed: 2,
        ..SyntheticSpec::default()
    })
    .unwrap()
}

#[test]
fn vae_training_loss_decreases() {
    let data = synthetic(4, 20, 1000);
    let split = split_dataset(&data.base, (0.8, 0.1, 0.1), 2).unwrap();
    let mut cfg = VaeTrainConfig { hidden: vec![14], ..VaeTrainConfig::default() };
    cfg.base.max_epochs = 8;
    cfg.base.seed = 2;
    let (_, h) = vae_train(&data.base, &split, &cfg).unwrap();
    assert!(h.best_epoch >= 1);
    assert!(h.epochs[h.best_epoch].train_loss < h.epochs[1].train_loss || h.best_epoch == 1);
    assert!(h.epochs[1].train_loss < h.epochs[0].train_loss);
}

#[test]
fn autoencoder_limit_beats_constant_predictor() {
    let data = synthetic(2, 10, 400);
    let split = split_dataset(&data.base, (0.8, 0.1, 0.1), 3).unwrap();
    let mut cfg = VaeTrainConfig {
        hidden: vec![10],
        kl_weight: 0.0,
        ..VaeTrainConfig::default()
    };
    cfg.base.max_epochs = 30;
    cfg.base.patience = 30;
    cfg.base.learning_rate = 1e-2;
    cfg.base.seed = 3;
    let (model, _) = vae_train(&data.base, &split, &cfg).unwrap();
    let x = data.base.features();
    let decoded = model.decode_batch(model.encode_batch(x.view()).unwrap().view()).unwrap();
    let n = x.len() as f64;
    let ce = |pred: &dyn Fn(usize, usize) -> f64| {
        let mut s = 0.0;
        for ((i, j), &v) in x.indexed_iter() {
            s += LossKind::CrossEntropy.on_output(v, pred(i, j)).0;
        }
        s / n
    };
    let baseline = ce(&|_, _| 0.5);
    let learned = ce(&|i, j| decoded[[i, j]]);
    assert!(learned < baseline, "learned {learned} vs baseline {baseline}");
}
