//! Collaborative variational autoencoder.
//!
//! A Gaussian inference network maps item features to `(mu, log_sigma)`, a
//! decoder maps latents back to features, and user embeddings are free
//! parameters scored against item latents with `sigmoid(z_u . z)`. Training
//! minimizes the negative reparameterized evidence lower bound.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::dataset::{DatasetSplit, RatingTriple, RatingsDataset};
use crate::error::{check_dim, Error, Result};
use crate::linear_model::{batch_users, frobenius, rating_loss_with};
use crate::model::{LatentModel, ModelKind};
use crate::nn::{adam_step, init_mlp_with, standard_normal_matrix, Activation, AdamState, GradientBundle, LossKind, Mlp, MlpShape};
use crate::rng::{self, StageRng};
use crate::train::{fit, Batch, TrainConfig, Trainable, TrainingHistory};

pub const VAE_MAGIC: &str = "MCNIP-VAE-1";

/// `log_sigma` is clamped to `[-LOG_SIGMA_BOUND, LOG_SIGMA_BOUND]`.
pub const LOG_SIGMA_BOUND: f64 = 6.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VaeTrainConfig {
    #[serde(flatten)]
    pub base: TrainConfig,
    /// Monte-Carlo samples per datum.
    pub mc_samples: usize,
    pub kl_weight: f64,
    pub rating_weight: f64,
    /// Hidden widths of the encoder trunk; the decoder mirrors them.
    pub hidden: Vec<usize>,
}

impl Default for VaeTrainConfig {
    fn default() -> Self {
        VaeTrainConfig {
            base: TrainConfig::default(),
            mc_samples: 1,
            kl_weight: 1.0,
            rating_weight: 1.0,
            hidden: vec![14],
        }
    }
}

impl VaeTrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.base.validate()?;
        if self.mc_samples == 0 {
            return Err(Error::invalid("mc_samples must be at least 1"));
        }
        if !(self.kl_weight >= 0.0 && self.rating_weight >= 0.0) {
            return Err(Error::invalid("kl_weight and rating_weight must be non-negative"));
        }
        if self.hidden.is_empty() || self.hidden.contains(&0) {
            return Err(Error::invalid("hidden must list at least one positive width"));
        }
        Ok(())
    }
}

/// Per-datum evidence lower bound terms.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ElboTerms {
    pub rating_ll: f64,
    pub recon_ll: f64,
    pub kl: f64,
}

impl ElboTerms {
    pub fn elbo(&self) -> f64 {
        self.rating_ll + self.recon_ll - self.kl
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CollabVae {
    trunk: Mlp,
    head_mu: Mlp,
    head_logsigma: Mlp,
    decoder: Mlp,
    /// `M x d_z`
    users: Array2<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct VaeGradients {
    pub trunk: GradientBundle,
    pub head_mu: GradientBundle,
    pub head_logsigma: GradientBundle,
    pub decoder: GradientBundle,
    pub users: Vec<(usize, Array1<f64>)>,
}

impl VaeGradients {
    /// All gradients in parameter order, with untouched user rows as zeros.
    pub fn flatten_dense(&self, num_users: usize, latent_dim: usize) -> Vec<f64> {
        let mut users = Array2::zeros((num_users, latent_dim));
        for (u, g) in &self.users {
            users.row_mut(*u).assign(g);
        }
        let mut out = self.trunk.flatten();
        out.extend(self.head_mu.flatten());
        out.extend(self.head_logsigma.flatten());
        out.extend(self.decoder.flatten());
        out.extend(users.iter());
        out
    }
}

fn is_affine(net: &Mlp) -> bool {
    net.layers().len() == 1 && net.layers()[0].activation == Activation::Identity
}

impl CollabVae {
    pub fn new(trunk: Mlp, head_mu: Mlp, head_logsigma: Mlp, decoder: Mlp, users: Array2<f64>) -> Result<Self> {
        if !is_affine(&head_mu) || !is_affine(&head_logsigma) {
            return Err(Error::invalid("encoder heads must be single affine layers"));
        }
        let d_z = head_mu.output_dim();
        check_dim("mu head input", trunk.output_dim(), head_mu.input_dim())?;
        check_dim("log-sigma head input", trunk.output_dim(), head_logsigma.input_dim())?;
        check_dim("log-sigma head output", d_z, head_logsigma.output_dim())?;
        check_dim("decoder input", d_z, decoder.input_dim())?;
        check_dim("decoder output", trunk.input_dim(), decoder.output_dim())?;
        check_dim("user embedding width", d_z, users.ncols())?;
        if users.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("user embedding".into()));
        }
        Ok(CollabVae {
            trunk,
            head_mu,
            head_logsigma,
            decoder,
            users: users.as_standard_layout().into_owned(),
        })
    }

    /// Random initialization. The trunk and decoder hidden layers use ReLU;
    /// the decoder output is a sigmoid for cross-entropy reconstruction.
    pub fn init(
        num_users: usize,
        feature_dim: usize,
        latent_dim: usize,
        hidden: &[usize],
        reconstruction: LossKind,
        seed: u64,
    ) -> Result<Self> {
        if hidden.is_empty() {
            return Err(Error::invalid("the encoder needs at least one hidden layer"));
        }
        let mut rng = rng::substream(seed, rng::INIT);
        let mut dims = vec![feature_dim];
        dims.extend_from_slice(hidden);
        let trunk = init_mlp_with(&dims, &vec![Activation::Relu; hidden.len()], &mut rng)?;
        let last = *hidden.last().expect("non-empty");
        let head_mu = init_mlp_with(&[last, latent_dim], &[Activation::Identity], &mut rng)?;
        let head_logsigma = init_mlp_with(&[last, latent_dim], &[Activation::Identity], &mut rng)?;
        let mut dec_dims = vec![latent_dim];
        dec_dims.extend(hidden.iter().rev());
        dec_dims.push(feature_dim);
        let mut dec_acts = vec![Activation::Relu; hidden.len()];
        dec_acts.push(reconstruction.output_activation());
        let decoder = init_mlp_with(&dec_dims, &dec_acts, &mut rng)?;
        let normal = Normal::new(0.0, 0.1).expect("positive std");
        let users = Array2::from_shape_simple_fn((num_users, latent_dim), || normal.sample(&mut rng));
        CollabVae::new(trunk, head_mu, head_logsigma, decoder, users)
    }

    pub fn trunk(&self) -> &Mlp {
        &self.trunk
    }

    pub fn head_mu(&self) -> &Mlp {
        &self.head_mu
    }

    pub fn head_logsigma(&self) -> &Mlp {
        &self.head_logsigma
    }

    pub fn decoder(&self) -> &Mlp {
        &self.decoder
    }

    pub fn users(&self) -> &Array2<f64> {
        &self.users
    }

    pub fn feature_dim(&self) -> usize {
        self.trunk.input_dim()
    }

    pub fn latent_dim(&self) -> usize {
        self.head_mu.output_dim()
    }

    pub fn num_users(&self) -> usize {
        self.users.nrows()
    }

    pub fn param_count(&self) -> usize {
        self.trunk.param_count()
            + self.head_mu.param_count()
            + self.head_logsigma.param_count()
            + self.decoder.param_count()
            + self.users.len()
    }

    fn param_slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = self.trunk.param_slices_mut();
        out.extend(self.head_mu.param_slices_mut());
        out.extend(self.head_logsigma.param_slices_mut());
        out.extend(self.decoder.param_slices_mut());
        out.push(self.users.as_slice_mut().expect("standard layout"));
        out
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = self.trunk.flatten();
        out.extend(self.head_mu.flatten());
        out.extend(self.head_logsigma.flatten());
        out.extend(self.decoder.flatten());
        out.extend(self.users.iter());
        out
    }

    pub fn load_flat(&mut self, flat: &[f64]) -> Result<()> {
        check_dim("vae parameter count", self.param_count(), flat.len())?;
        let mut offset = 0;
        for slice in self.param_slices_mut() {
            slice.copy_from_slice(&flat[offset..offset + slice.len()]);
            offset += slice.len();
        }
        Ok(())
    }

    /// Posterior means and clamped log standard deviations, one row per input row.
    pub fn encode_distribution(&self, x: ArrayView2<'_, f64>) -> Result<(Array2<f64>, Array2<f64>)> {
        let h = self.trunk.predict_batch(x)?;
        let mu = self.head_mu.predict_batch(h.view())?;
        let ls = self.head_logsigma.predict_batch(h.view())?.mapv(clamp_log_sigma);
        Ok((mu, ls))
    }

    pub fn to_bytes(&self, config: Option<&VaeTrainConfig>) -> Result<Vec<u8>> {
        let header = VaeHeader {
            trunk: self.trunk.shape(),
            head_mu: self.head_mu.shape(),
            head_logsigma: self.head_logsigma.shape(),
            decoder: self.decoder.shape(),
            num_users: self.num_users(),
            config: config.cloned(),
        };
        checkpoint::encode(VAE_MAGIC, &header, &self.flatten())
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<(Self, Option<VaeTrainConfig>)> {
        let (h, params): (VaeHeader, Vec<f64>) = checkpoint::decode(VAE_MAGIC, bytes)?;
        let d_z = h.head_mu.dims.last().copied().unwrap_or(0);
        let mut m = CollabVae::new(
            h.trunk.zeros()?,
            h.head_mu.zeros()?,
            h.head_logsigma.zeros()?,
            h.decoder.zeros()?,
            Array2::zeros((h.num_users, d_z)),
        )
        .map_err(|e| Error::Checkpoint(format!("inconsistent architecture: {e}")))?;
        m.load_flat(&params)
            .map_err(|e| Error::Checkpoint(e.to_string()))?;
        if params.iter().any(|v| !v.is_finite()) {
            return Err(Error::Checkpoint("non-finite parameter".into()));
        }
        Ok((m, h.config))
    }
}

#[derive(Serialize, Deserialize)]
struct VaeHeader {
    trunk: MlpShape,
    head_mu: MlpShape,
    head_logsigma: MlpShape,
    decoder: MlpShape,
    num_users: usize,
    config: Option<VaeTrainConfig>,
}

fn clamp_log_sigma(v: f64) -> f64 {
    v.clamp(-LOG_SIGMA_BOUND, LOG_SIGMA_BOUND)
}

impl LatentModel for CollabVae {
    fn kind(&self) -> ModelKind {
        ModelKind::Vae
    }

    fn feature_dim(&self) -> usize {
        CollabVae::feature_dim(self)
    }

    fn latent_dim(&self) -> usize {
        CollabVae::latent_dim(self)
    }

    fn user_embeddings(&self) -> ArrayView2<'_, f64> {
        self.users.view()
    }

    fn encode_batch(&self, x: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        Ok(self.encode_distribution(x)?.0)
    }

    fn sample_latent(&self, x: ArrayView1<'_, f64>, rng: &mut StageRng) -> Result<Array1<f64>> {
        let (mu, ls) = vae_encode(self, x)?;
        let eps = Array1::from_shape_simple_fn(mu.len(), || rng.sample(StandardNormal));
        reparameterize(mu.view(), ls.view(), eps.view())
    }

    fn decode_batch(&self, z: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        check_dim("decoder input", self.latent_dim(), z.ncols())?;
        self.decoder.predict_batch(z)
    }
}

pub fn vae_encode(m: &CollabVae, x: ArrayView1<'_, f64>) -> Result<(Array1<f64>, Array1<f64>)> {
    check_dim("vae_encode input", m.feature_dim(), x.len())?;
    let h = m.trunk.predict(x)?;
    let mu = m.head_mu.predict(h.view())?;
    let ls = m.head_logsigma.predict(h.view())?.mapv(clamp_log_sigma);
    Ok((mu, ls))
}

/// `mu + exp(log_sigma) * eps`.
pub fn reparameterize(mu: ArrayView1<'_, f64>, log_sigma: ArrayView1<'_, f64>, eps: ArrayView1<'_, f64>) -> Result<Array1<f64>> {
    check_dim("log_sigma length", mu.len(), log_sigma.len())?;
    check_dim("eps length", mu.len(), eps.len())?;
    let mut z = mu.to_owned();
    for j in 0..z.len() {
        z[j] += log_sigma[j].exp() * eps[j];
    }
    Ok(z)
}

/// KL divergence from `N(mu, diag(exp(log_sigma))^2)` to `N(0, I)`.
pub fn kl_to_standard_normal(mu: ArrayView1<'_, f64>, log_sigma: ArrayView1<'_, f64>) -> Result<f64> {
    check_dim("log_sigma length", mu.len(), log_sigma.len())?;
    Ok(mu
        .iter()
        .zip(log_sigma)
        .map(|(&m, &ls)| 0.5 * (m * m + (2.0 * ls).exp() - 1.0 - 2.0 * ls))
        .sum())
}

pub fn vae_generate(m: &CollabVae, z: ArrayView1<'_, f64>) -> Result<Array1<f64>> {
    check_dim("vae_generate latent", m.latent_dim(), z.len())?;
    m.decoder.predict(z)
}

fn add_bundle(acc: &mut GradientBundle, g: &GradientBundle) {
    for (a, b) in acc.layers.iter_mut().zip(&g.layers) {
        a.weight += &b.weight;
        a.bias += &b.bias;
    }
}

fn regularize_weights(net: &Mlp, grads: &mut GradientBundle, cfg: &TrainConfig) -> f64 {
    let mut total = 0.0;
    for (layer, g) in net.layers().iter().zip(grads.layers.iter_mut()) {
        let (r, dr) = frobenius(layer.weight.view(), cfg.squared_frobenius);
        total += r;
        g.weight.scaled_add(cfg.lambda_reg, &dr);
    }
    total
}

/// Weighted negative ELBO averaged over a batch, for frozen noise `eps`
/// (one `batch x d_z` matrix per Monte-Carlo sample), plus the Frobenius
/// regularizer on the network weights and the batch's user embeddings when
/// `regularize` is set. Returns the loss, the mean ELBO terms, and gradients.
fn objective(
    m: &CollabVae,
    batch: &Batch<'_>,
    eps: &[Array2<f64>],
    cfg: &VaeTrainConfig,
    regularize: bool,
) -> Result<(f64, ElboTerms, VaeGradients)> {
    batch.validate(m.num_users(), m.feature_dim())?;
    if eps.is_empty() {
        return Err(Error::invalid("at least one noise draw is needed"));
    }
    let b = batch.len();
    let d_z = m.latent_dim();
    for e in eps {
        if e.dim() != (b, d_z) {
            return Err(Error::DimensionMismatch {
                context: "noise draw rows x latent width",
                expected: b * d_z,
                actual: e.len(),
            });
        }
    }
    let base = &cfg.base;
    let w = 1.0 / b as f64;
    let wl = w / eps.len() as f64;

    let x = batch.item_features();
    let (h, trunk_cache) = m.trunk.forward_batch(x.view())?;
    let (mu, mu_cache) = m.head_mu.forward_batch(h.view())?;
    let (raw, ls_cache) = m.head_logsigma.forward_batch(h.view())?;
    let ls = raw.mapv(clamp_log_sigma);
    let sigma = ls.mapv(f64::exp);
    let (distinct, slot) = batch_users(batch);
    let u = m.users.select(Axis(0), &distinct);

    let mut d_mu = Array2::zeros((b, d_z));
    let mut d_ls = Array2::zeros((b, d_z));
    let mut decoder = GradientBundle::zeros_like(&m.decoder);
    let mut user_grads: Vec<Array1<f64>> = vec![Array1::zeros(d_z); distinct.len()];
    let (mut rating_ll, mut recon_ll) = (0.0, 0.0);

    for e in eps {
        let z = &mu + &(&sigma * e);
        let (out, dec_cache) = m.decoder.forward_batch(z.view())?;
        let mut d_out = Array2::zeros(out.raw_dim());
        for ((d, &o), &xv) in d_out.iter_mut().zip(&out).zip(&x) {
            let (l, g) = base.reconstruction_loss.on_output(xv, o);
            recon_ll -= l;
            *d = wl * base.lambda_recon * g;
        }
        let dec = m.decoder.backward(&dec_cache, d_out.view())?;
        add_bundle(&mut decoder, &dec);
        let mut d_z = dec.input.expect("input gradient");
        for (k, t) in batch.triples.iter().enumerate() {
            let urow = u.row(slot[k]);
            let s = urow.dot(&z.row(k));
            let (l, gs) = base.rating_loss.on_logit(t.rating, s);
            rating_ll -= l;
            let c = wl * cfg.rating_weight * gs;
            d_z.row_mut(k).scaled_add(c, &urow);
            user_grads[slot[k]].scaled_add(c, &z.row(k));
        }
        d_mu += &d_z;
        d_ls += &(&d_z * e * &sigma);
    }

    let mut kl = 0.0;
    for k in 0..b {
        for j in 0..d_z {
            let (m_, l_, s_) = (mu[[k, j]], ls[[k, j]], sigma[[k, j]]);
            kl += 0.5 * (m_ * m_ + s_ * s_ - 1.0 - 2.0 * l_);
            d_mu[[k, j]] += w * cfg.kl_weight * m_;
            d_ls[[k, j]] += w * cfg.kl_weight * (s_ * s_ - 1.0);
        }
    }
    // the clamp passes gradient only inside its range
    d_ls.zip_mut_with(&raw, |d, &r| {
        if !(-LOG_SIGMA_BOUND..=LOG_SIGMA_BOUND).contains(&r) {
            *d = 0.0;
        }
    });

    let terms = ElboTerms {
        rating_ll: rating_ll * wl,
        recon_ll: recon_ll * wl,
        kl: kl * w,
    };
    for (name, v) in [
        ("rating log-likelihood", terms.rating_ll),
        ("reconstruction log-likelihood", terms.recon_ll),
        ("KL divergence", terms.kl),
    ] {
        if !v.is_finite() {
            let t = batch.triples[0];
            return Err(Error::NonFinite(format!(
                "{name} in batch starting at (user {}, item {})",
                t.user, t.item
            )));
        }
    }

    let mut head_mu = m.head_mu.backward(&mu_cache, d_mu.view())?;
    let mut head_logsigma = m.head_logsigma.backward(&ls_cache, d_ls.view())?;
    let d_h = head_mu.input.take().expect("input gradient") + head_logsigma.input.take().expect("input gradient");
    let mut trunk = m.trunk.backward(&trunk_cache, d_h.view())?;
    trunk.input = None;
    decoder.input = None;

    let mut loss = -cfg.rating_weight * terms.rating_ll - base.lambda_recon * terms.recon_ll + cfg.kl_weight * terms.kl;
    if regularize && base.lambda_reg > 0.0 {
        let mut r = regularize_weights(&m.trunk, &mut trunk, base);
        r += regularize_weights(&m.head_mu, &mut head_mu, base);
        r += regularize_weights(&m.head_logsigma, &mut head_logsigma, base);
        r += regularize_weights(&m.decoder, &mut decoder, base);
        let (ru, gu) = frobenius(u.view(), base.squared_frobenius);
        r += ru;
        for (row, g) in user_grads.iter_mut().zip(gu.rows()) {
            row.scaled_add(base.lambda_reg, &g);
        }
        loss += base.lambda_reg * r;
    }
    Ok((
        loss,
        terms,
        VaeGradients {
            trunk,
            head_mu,
            head_logsigma,
            decoder,
            users: distinct.into_iter().zip(user_grads).collect(),
        },
    ))
}

/// ELBO terms of one rating triple for frozen noise draws (one vector per
/// Monte-Carlo sample), with gradients of the weighted negative ELBO
/// `-rating_weight * rating_ll - lambda_recon * recon_ll + kl_weight * kl`.
pub fn vae_elbo_datum(
    m: &CollabVae,
    datum: &RatingTriple,
    features: ArrayView2<'_, f64>,
    eps: &[Array1<f64>],
    cfg: &VaeTrainConfig,
) -> Result<(ElboTerms, VaeGradients)> {
    let eps: Vec<Array2<f64>> = eps.iter().map(|e| e.clone().insert_axis(Axis(0))).collect();
    let triples = [*datum];
    let (_, terms, grads) = objective(m, &Batch::new(&triples, features), &eps, cfg, false)?;
    Ok((terms, grads))
}

/// Batch training objective for frozen noise, as minimized by [`vae_train`].
pub fn vae_loss(m: &CollabVae, batch: &Batch<'_>, eps: &[Array2<f64>], cfg: &VaeTrainConfig) -> Result<(f64, VaeGradients)> {
    let (loss, _, grads) = objective(m, batch, eps, cfg, true)?;
    Ok((loss, grads))
}

#[derive(Clone)]
struct VaeFit<'c> {
    model: CollabVae,
    cfg: &'c VaeTrainConfig,
}

impl Trainable for VaeFit<'_> {
    type Grads = VaeGradients;

    fn objective(&self, batch: &Batch<'_>, noise: &mut StageRng) -> Result<(f64, VaeGradients)> {
        let d_z = self.model.latent_dim();
        let eps: Vec<Array2<f64>> = (0..self.cfg.mc_samples)
            .map(|_| standard_normal_matrix(batch.len(), d_z, noise))
            .collect();
        vae_loss(&self.model, batch, &eps, self.cfg)
    }

    fn apply(&mut self, grads: &VaeGradients, opt: &mut AdamState) -> Result<()> {
        let mut users = Array2::zeros(self.model.users.raw_dim());
        for (u, g) in &grads.users {
            users.row_mut(*u).assign(g);
        }
        let mut g = grads.trunk.slices();
        g.extend(grads.head_mu.slices());
        g.extend(grads.head_logsigma.slices());
        g.extend(grads.decoder.slices());
        g.push(users.as_slice().expect("standard layout"));
        adam_step(&mut self.model.param_slices_mut(), &g, opt)
    }

    fn rating_loss(&self, batch: &Batch<'_>, kind: LossKind) -> Result<f64> {
        let z = self.model.encode_batch(batch.item_features().view())?;
        Ok(rating_loss_with(&self.model.users, &z, batch, kind))
    }
}

/// Trains a collaborative VAE with Adam and early stopping on the validation
/// rating loss (computed from posterior means); returns the best snapshot.
pub fn vae_train(ds: &RatingsDataset, split: &DatasetSplit, cfg: &VaeTrainConfig) -> Result<(CollabVae, TrainingHistory)> {
    cfg.validate()?;
    if !ds.ratings_in_unit_interval() {
        return Err(Error::invalid("ratings must be rescaled to [0, 1] before training"));
    }
    if cfg.base.reconstruction_loss == LossKind::CrossEntropy && !ds.features_in_unit_interval() {
        return Err(Error::invalid("cross-entropy reconstruction needs features in [0, 1]"));
    }
    let init = CollabVae::init(
        ds.num_users(),
        ds.feature_dim(),
        cfg.base.latent_dim,
        &cfg.hidden,
        cfg.base.reconstruction_loss,
        cfg.base.seed,
    )?;
    let (fitted, history) = fit(VaeFit { model: init, cfg }, ds, split, &cfg.base)?;
    Ok((fitted.model, history))
}
