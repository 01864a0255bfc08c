//! `mcnip`: synthesize data, train a latent model, sample candidate items,
//! pick the ones that cover the most users and evaluate them.
//!
//! Every stage reads and writes inside the output directory (`--out`, or
//! `output_dir` in the config file). Flags override the config file.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use mcnip_core::config::RunConfig;
use mcnip_core::coverage::CoverageSolution;
use mcnip_core::eval::append_ledger_row;
use mcnip_core::model::{LatentModel, ModelKind, TrainedModel};
use mcnip_core::nn::LossKind;
use mcnip_core::pipeline::{
    decode_selected, draw_candidates, evaluate, heldout_triples, ledger_row, load_data_dir, run_pipeline, solve_cover,
    split_for, train_model, write_json_with_meta, OutputMeta, RunMeta, CANDIDATES_FILE, DATA_DIR, HISTORY_FILE,
    MODEL_FILE, REPORT_FILE, SOLUTION_FILE,
};
use mcnip_core::sampler::{CandidateSet, Provenance};
use mcnip_core::synth::generate_synthetic;
use mcnip_core::{Error, Result};

#[derive(Parser)]
#[command(name = "mcnip", version, about = "Design new items that cover as many users as possible")]
struct Cli {
    /// TOML run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, short = 'o', global = true)]
    out: Option<PathBuf>,
    /// Worker threads.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// -v for progress, -vv for per-epoch losses.
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset with known ideal items.
    Synth(SynthFlags),
    /// Train a latent model on a ratings directory.
    Train {
        #[command(flatten)]
        train: TrainFlags,
        /// Ratings directory (default: <out>/data).
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Draw candidate latent items from a trained model.
    Sample {
        #[command(flatten)]
        sample: SampleFlags,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Checkpoint (default: <out>/model.ckpt).
        #[arg(long)]
        model: Option<PathBuf>,
    },
    /// Greedily pick K candidates covering the most users.
    Cover {
        #[command(flatten)]
        cover: CoverFlags,
        #[arg(long)]
        model: Option<PathBuf>,
        /// Candidate CSV (default: <out>/candidates.csv).
        #[arg(long)]
        candidates: Option<PathBuf>,
    },
    /// Score a coverage solution.
    Eval {
        #[command(flatten)]
        eval: EvalFlags,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        candidates: Option<PathBuf>,
        /// Solution JSON (default: <out>/solution.json).
        #[arg(long)]
        solution: Option<PathBuf>,
    },
    /// Every stage on fresh synthetic data.
    Pipeline {
        #[command(flatten)]
        synth: SynthFlags,
        #[command(flatten)]
        train: TrainFlags,
        #[command(flatten)]
        sample: SampleFlags,
        #[command(flatten)]
        cover: CoverFlags,
        #[command(flatten)]
        eval: EvalFlags,
        /// Runs with seeds seed, seed+1, ...; medians go to aggregate.json.
        #[arg(long, default_value_t = 1)]
        repeats: usize,
    },
}

#[derive(Args, Clone, Debug, Default)]
struct SynthFlags {
    #[arg(long)]
    users: Option<usize>,
    #[arg(long)]
    groups: Option<usize>,
    #[arg(long)]
    items_per_group: Option<usize>,
    #[arg(long)]
    feature_dim: Option<usize>,
    #[arg(long)]
    ratings_per_user: Option<usize>,
}

impl SynthFlags {
    fn apply(&self, c: &mut RunConfig) {
        let s = &mut c.synth;
        set(&mut s.num_users, self.users);
        set(&mut s.num_groups, self.groups);
        set(&mut s.items_per_group, self.items_per_group);
        set(&mut s.feature_dim, self.feature_dim);
        set(&mut s.ratings_per_user, self.ratings_per_user);
    }
}

#[derive(Args, Clone, Debug, Default)]
struct TrainFlags {
    /// lm or vae.
    #[arg(long = "model")]
    model_kind: Option<ModelKind>,
    /// Latent dimension.
    #[arg(long)]
    latent: Option<usize>,
    /// Hidden layer widths, comma separated.
    #[arg(long, value_delimiter = ',')]
    hidden: Option<Vec<usize>>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    patience: Option<usize>,
    #[arg(long)]
    lambda_recon: Option<f64>,
    #[arg(long)]
    lambda_reg: Option<f64>,
    /// Regularize with squared Frobenius norms.
    #[arg(long)]
    squared_frobenius: bool,
    /// cross_entropy or squared.
    #[arg(long)]
    rating_loss: Option<LossKind>,
    #[arg(long)]
    reconstruction_loss: Option<LossKind>,
    #[arg(long)]
    kl_weight: Option<f64>,
    #[arg(long)]
    rating_weight: Option<f64>,
    #[arg(long)]
    mc_samples: Option<usize>,
}

impl TrainFlags {
    fn apply(&self, c: &mut RunConfig) {
        let t = &mut c.train;
        set(&mut t.model, self.model_kind);
        let v = &mut t.vae;
        set(&mut v.hidden, self.hidden.clone());
        set(&mut v.kl_weight, self.kl_weight);
        set(&mut v.rating_weight, self.rating_weight);
        set(&mut v.mc_samples, self.mc_samples);
        let b = &mut v.base;
        set(&mut b.latent_dim, self.latent);
        set(&mut b.learning_rate, self.lr);
        set(&mut b.batch_size, self.batch_size);
        set(&mut b.max_epochs, self.epochs);
        set(&mut b.patience, self.patience);
        set(&mut b.lambda_recon, self.lambda_recon);
        set(&mut b.lambda_reg, self.lambda_reg);
        set(&mut b.rating_loss, self.rating_loss);
        set(&mut b.reconstruction_loss, self.reconstruction_loss);
        b.squared_frobenius |= self.squared_frobenius;
    }
}

#[derive(Args, Clone, Debug, Default)]
struct SampleFlags {
    /// gmm, prior or rating_weighted.
    #[arg(long)]
    sampler: Option<Provenance>,
    /// How many candidates to draw.
    #[arg(long = "candidates")]
    candidates_count: Option<usize>,
    /// Mixture components.
    #[arg(long)]
    components: Option<usize>,
    /// Temperature of the rating-weighted sampler.
    #[arg(long)]
    gamma: Option<f64>,
}

impl SampleFlags {
    fn apply(&self, c: &mut RunConfig) {
        let s = &mut c.sample;
        set(&mut s.sampler, self.sampler);
        set(&mut s.candidates, self.candidates_count);
        if self.components.is_some() {
            s.n_components = self.components;
        }
        set(&mut s.gamma, self.gamma);
    }
}

#[derive(Args, Clone, Debug, Default)]
struct CoverFlags {
    /// Number of items to pick.
    #[arg(long = "K", short = 'k')]
    k: Option<usize>,
    /// A user is covered by ratings strictly above this.
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long)]
    memory_budget_mb: Option<usize>,
}

impl CoverFlags {
    fn apply(&self, c: &mut RunConfig) {
        set(&mut c.cover.k, self.k);
        set(&mut c.cover.tau, self.tau);
        set(&mut c.cover.memory_budget_mb, self.memory_budget_mb);
    }
}

#[derive(Args, Clone, Debug, Default)]
struct EvalFlags {
    /// CSV ledger receiving one row per evaluated run.
    #[arg(long)]
    ledger: Option<PathBuf>,
}

impl EvalFlags {
    fn apply(&self, c: &mut RunConfig) {
        if self.ledger.is_some() {
            c.eval.ledger = self.ledger.clone();
        }
    }
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

fn build_config(cli: &Cli) -> Result<RunConfig> {
    let mut c = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    set(&mut c.seed, cli.seed);
    set(&mut c.output_dir, cli.out.clone());
    if cli.threads.is_some() {
        c.threads = cli.threads;
    }
    match &cli.command {
        Command::Synth(s) => s.apply(&mut c),
        Command::Train { train, .. } => train.apply(&mut c),
        Command::Sample { sample, .. } => sample.apply(&mut c),
        Command::Cover { cover, .. } => cover.apply(&mut c),
        Command::Eval { eval, .. } => eval.apply(&mut c),
        Command::Pipeline {
            synth,
            train,
            sample,
            cover,
            eval,
            ..
        } => {
            synth.apply(&mut c);
            train.apply(&mut c);
            sample.apply(&mut c);
            cover.apply(&mut c);
            eval.apply(&mut c);
        }
    }
    c.validate()?;
    Ok(c.resolved())
}

struct Stage {
    cfg: RunConfig,
    out: PathBuf,
    meta: OutputMeta,
}

impl Stage {
    fn new(cfg: RunConfig) -> Result<Self> {
        let out = cfg.output_dir.clone();
        std::fs::create_dir_all(&out)?;
        let meta = OutputMeta::new(cfg.hash(), cfg.seed);
        Ok(Stage { cfg, out, meta })
    }

    fn path(&self, explicit: &Option<PathBuf>, default: &str) -> PathBuf {
        explicit.clone().unwrap_or_else(|| self.out.join(default))
    }

    /// Adds the checksums of `names` (relative to the output directory) to the manifest.
    fn record(&self, names: &[String]) -> Result<()> {
        let mut manifest = RunMeta::load_or_new(&self.out, self.meta.clone())?;
        for n in names {
            if self.out.join(n).exists() {
                manifest.record(&self.out, n)?;
            }
        }
        manifest.save(&self.out)
    }

    fn load_model(&self, explicit: &Option<PathBuf>) -> Result<(TrainedModel, String)> {
        TrainedModel::load(&self.path(explicit, MODEL_FILE))
    }
}

fn cmd_synth(st: &Stage) -> Result<()> {
    let data = generate_synthetic(&st.cfg.synth)?;
    let dir = st.out.join(DATA_DIR);
    std::fs::create_dir_all(&dir)?;
    data.save(&dir)?;
    let mut names = Vec::new();
    for entry in std::fs::read_dir(&dir)? {
        names.push(format!("{DATA_DIR}/{}", entry?.file_name().to_string_lossy()));
    }
    names.sort();
    st.record(&names)?;
    let ds = &data.base;
    println!(
        "synthesized {} users, {} items ({} groups), {} ratings into {}",
        ds.num_users(),
        ds.num_items(),
        st.cfg.synth.num_groups,
        ds.triples().len(),
        dir.display()
    );
    Ok(())
}

fn cmd_train(st: &Stage, data: &Option<PathBuf>) -> Result<()> {
    let loaded = load_data_dir(&st.path(data, DATA_DIR))?;
    let split = split_for(&st.cfg, &loaded.dataset)?;
    let history_path = st.out.join(HISTORY_FILE);
    let (model, history) = match train_model(&st.cfg.train, &loaded.dataset, &split) {
        Ok(r) => r,
        Err(Error::Diverged { epoch, reason, history }) => {
            write_json_with_meta(&history_path, &history, &st.meta)?;
            eprintln!("partial history written to {}", history_path.display());
            return Err(Error::Diverged { epoch, reason, history });
        }
        Err(e) => return Err(e),
    };
    model.save(&st.out.join(MODEL_FILE))?;
    write_json_with_meta(&history_path, &history, &st.meta)?;
    st.record(&[MODEL_FILE.into(), HISTORY_FILE.into()])?;
    let best = &history.epochs[history.best_epoch];
    println!(
        "trained {} model (latent dim {}) for {} epochs; best epoch {} with validation rating loss {:.6}",
        model.kind(),
        model.latent_dim(),
        history.epochs.len() - 1,
        history.best_epoch,
        best.validation_rating_loss
    );
    Ok(())
}

fn cmd_sample(st: &Stage, data: &Option<PathBuf>, model: &Option<PathBuf>) -> Result<()> {
    let loaded = load_data_dir(&st.path(data, DATA_DIR))?;
    let (model, checksum) = st.load_model(model)?;
    let cands = draw_candidates(&st.cfg.sample, &model, &loaded.dataset, st.cfg.seed)?;
    let path = st.out.join(CANDIDATES_FILE);
    cands.save(&path, Some(&checksum))?;
    let meta_name = CandidateSet::meta_path(&path)
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    st.record(&[CANDIDATES_FILE.into(), meta_name])?;
    println!("sampled {} candidates ({}) in {} latent dimensions", cands.len(), cands.provenance, cands.latent_dim());
    Ok(())
}

fn load_candidates(st: &Stage, explicit: &Option<PathBuf>, checksum: &str) -> Result<CandidateSet> {
    let (cands, meta) = CandidateSet::load(&st.path(explicit, CANDIDATES_FILE))?;
    if let Some(expected) = &meta.model_checksum {
        if expected != checksum {
            return Err(Error::Integrity("candidates were sampled from a different model checkpoint".into()));
        }
    }
    Ok(cands)
}

fn cmd_cover(st: &Stage, model: &Option<PathBuf>, candidates: &Option<PathBuf>) -> Result<()> {
    let (model, checksum) = st.load_model(model)?;
    let cands = load_candidates(st, candidates, &checksum)?;
    let sol = solve_cover(&st.cfg.cover, &model, &cands)?;
    let value: serde_json::Value = serde_json::from_str(&sol.to_json()?)?;
    write_json_with_meta(&st.out.join(SOLUTION_FILE), &value, &st.meta)?;
    st.record(&[SOLUTION_FILE.into()])?;
    println!(
        "selected candidates {:?}: objective {:.4}, coverage {:.4} (K={}, tau={})",
        sol.selected, sol.objective, sol.coverage_proportion, sol.k, sol.tau
    );
    Ok(())
}

fn cmd_eval(
    st: &Stage,
    data: &Option<PathBuf>,
    model: &Option<PathBuf>,
    candidates: &Option<PathBuf>,
    solution: &Option<PathBuf>,
) -> Result<()> {
    let loaded = load_data_dir(&st.path(data, DATA_DIR))?;
    let (model, checksum) = st.load_model(model)?;
    let cands = load_candidates(st, candidates, &checksum)?;
    let sol = CoverageSolution::load(&st.path(solution, SOLUTION_FILE))?;
    let split = split_for(&st.cfg, &loaded.dataset)?;
    let decoded = decode_selected(&model, &cands, &sol)?;
    let heldout = heldout_triples(&loaded.dataset, &split);
    let report = evaluate(&model, &loaded.dataset, loaded.truth.as_ref(), &heldout, &decoded, &sol)?;
    write_json_with_meta(&st.out.join(REPORT_FILE), &report, &st.meta)?;
    st.record(&[REPORT_FILE.into()])?;
    if let Some(ledger) = &st.cfg.eval.ledger {
        append_ledger_row(ledger, &ledger_row(&st.cfg, &report))?;
    }
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(())
}

fn cmd_pipeline(st: &Stage, repeats: usize) -> Result<()> {
    let summary = run_pipeline(&st.cfg, repeats)?;
    println!("{}", serde_json::to_string_pretty(&summary.aggregate)?);
    Ok(())
}

fn run(cli: &Cli) -> Result<()> {
    let cfg = build_config(cli)?;
    if let Some(n) = cfg.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Config(e.to_string()))?;
    }
    let st = Stage::new(cfg)?;
    match &cli.command {
        Command::Synth(_) => cmd_synth(&st),
        Command::Train { data, .. } => cmd_train(&st, data),
        Command::Sample { data, model, .. } => cmd_sample(&st, data, model),
        Command::Cover { model, candidates, .. } => cmd_cover(&st, model, candidates),
        Command::Eval {
            data,
            model,
            candidates,
            solution,
            ..
        } => cmd_eval(&st, data, model, candidates, solution),
        Command::Pipeline { repeats, .. } => cmd_pipeline(&st, *repeats),
    }
}

fn init_logging(verbose: u8) {
    let level = match verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    init_logging(cli.verbose);
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
