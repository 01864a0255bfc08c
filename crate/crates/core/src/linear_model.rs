//! Collaborative linear model: linear encoder and decoder matrices over item
//! features, with free user embeddings in the same latent space.
//!
//! Item latent `z = M_enc x`, reconstruction `x~ = M_dec z` (passed through a
//! sigmoid when the reconstruction loss is cross-entropy), predicted rating
//! `sigmoid(z_u . z)`.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::dataset::{DatasetSplit, RatingsDataset};
use crate::error::{check_dim, Error, Result};
use crate::model::{predicted_rating, LatentModel, ModelKind};
use crate::nn::{adam_step, sigmoid, standard, AdamState, LossKind};
use crate::rng::{self, StageRng};
use crate::train::{fit, Batch, TrainConfig, Trainable, TrainingHistory};

pub const LM_MAGIC: &str = "MCNIP-LM-1";

/// Standard deviation of the noise added to encodings when drawing random
/// latents from the linear model.
pub const LM_SAMPLE_JITTER: f64 = 0.05;

pub type LmTrainConfig = TrainConfig;

#[derive(Clone, Debug, PartialEq)]
pub struct LinearModel {
    /// `d_z x d_x`
    encoder: Array2<f64>,
    /// `d_x x d_z`
    decoder: Array2<f64>,
    /// `M x d_z`
    users: Array2<f64>,
    reconstruction: LossKind,
}

/// Gradient of [`lm_loss`]. Only users present in the batch get a row.
#[derive(Clone, Debug, PartialEq)]
pub struct LmGradients {
    pub encoder: Array2<f64>,
    pub decoder: Array2<f64>,
    pub users: Vec<(usize, Array1<f64>)>,
}

impl LmGradients {
    /// Same layout as [`LinearModel::flatten`]; users outside the batch get zeros.
    pub fn flatten_dense(&self, num_users: usize) -> Vec<f64> {
        let mut users = Array2::zeros((num_users, self.encoder.nrows()));
        for (u, g) in &self.users {
            users.row_mut(*u).assign(g);
        }
        let mut out: Vec<f64> = self.encoder.iter().copied().collect();
        out.extend(self.decoder.iter());
        out.extend(users.iter());
        out
    }
}

impl LinearModel {
    pub fn new(
        encoder: Array2<f64>,
        decoder: Array2<f64>,
        users: Array2<f64>,
        reconstruction: LossKind,
    ) -> Result<Self> {
        let (d_z, d_x) = encoder.dim();
        if d_z == 0 {
            return Err(Error::invalid("latent dimension must be at least 1"));
        }
        check_dim("decoder rows", d_x, decoder.nrows())?;
        check_dim("decoder columns", d_z, decoder.ncols())?;
        check_dim("user embedding width", d_z, users.ncols())?;
        if encoder.iter().chain(decoder.iter()).chain(users.iter()).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("linear model parameter".into()));
        }
        Ok(LinearModel {
            encoder: encoder.as_standard_layout().into_owned(),
            decoder: decoder.as_standard_layout().into_owned(),
            users: users.as_standard_layout().into_owned(),
            reconstruction,
        })
    }

    /// Gaussian initialization: encoder `N(0, 1/d_x)`, decoder `N(0, 1/d_z)`,
    /// user embeddings `N(0, 0.1^2)`.
    pub fn init(num_users: usize, feature_dim: usize, latent_dim: usize, reconstruction: LossKind, seed: u64) -> Result<Self> {
        if latent_dim == 0 || feature_dim == 0 {
            return Err(Error::invalid("dimensions must be at least 1"));
        }
        let mut rng = rng::substream(seed, rng::INIT);
        let gaussian = |rows: usize, cols: usize, std: f64, rng: &mut StageRng| {
            let n = Normal::new(0.0, std).expect("positive std");
            Array2::from_shape_simple_fn((rows, cols), || n.sample(rng))
        };
        let encoder = gaussian(latent_dim, feature_dim, (1.0 / feature_dim as f64).sqrt(), &mut rng);
        let decoder = gaussian(feature_dim, latent_dim, (1.0 / latent_dim as f64).sqrt(), &mut rng);
        let users = gaussian(num_users, latent_dim, 0.1, &mut rng);
        LinearModel::new(encoder, decoder, users, reconstruction)
    }

    pub fn encoder(&self) -> &Array2<f64> {
        &self.encoder
    }

    pub fn decoder(&self) -> &Array2<f64> {
        &self.decoder
    }

    pub fn users(&self) -> &Array2<f64> {
        &self.users
    }

    pub fn reconstruction(&self) -> LossKind {
        self.reconstruction
    }

    pub fn feature_dim(&self) -> usize {
        self.encoder.ncols()
    }

    pub fn latent_dim(&self) -> usize {
        self.encoder.nrows()
    }

    pub fn num_users(&self) -> usize {
        self.users.nrows()
    }

    pub fn param_count(&self) -> usize {
        self.encoder.len() + self.decoder.len() + self.users.len()
    }

    fn param_slices_mut(&mut self) -> [&mut [f64]; 3] {
        [
            self.encoder.as_slice_mut().expect("standard layout"),
            self.decoder.as_slice_mut().expect("standard layout"),
            self.users.as_slice_mut().expect("standard layout"),
        ]
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        out.extend(self.encoder.iter());
        out.extend(self.decoder.iter());
        out.extend(self.users.iter());
        out
    }

    pub fn load_flat(&mut self, flat: &[f64]) -> Result<()> {
        check_dim("linear model parameter count", self.param_count(), flat.len())?;
        let mut offset = 0;
        for slice in self.param_slices_mut() {
            slice.copy_from_slice(&flat[offset..offset + slice.len()]);
            offset += slice.len();
        }
        Ok(())
    }

    pub fn encode_batch(&self, x: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        check_dim("lm_encode input", self.feature_dim(), x.ncols())?;
        Ok(x.dot(&self.encoder.t()))
    }

    pub fn decode_batch(&self, z: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        check_dim("lm_decode input", self.latent_dim(), z.ncols())?;
        let a = z.dot(&self.decoder.t());
        Ok(match self.reconstruction {
            LossKind::CrossEntropy => a.mapv(sigmoid),
            LossKind::Squared => a,
        })
    }

    pub fn to_bytes(&self, config: Option<&TrainConfig>) -> Result<Vec<u8>> {
        let header = LmHeader {
            feature_dim: self.feature_dim(),
            latent_dim: self.latent_dim(),
            num_users: self.num_users(),
            reconstruction: self.reconstruction,
            config: config.cloned(),
        };
        checkpoint::encode(LM_MAGIC, &header, &self.flatten())
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<(Self, Option<TrainConfig>)> {
        let (h, params): (LmHeader, Vec<f64>) = checkpoint::decode(LM_MAGIC, bytes)?;
        let mut m = LinearModel {
            encoder: Array2::zeros((h.latent_dim, h.feature_dim)),
            decoder: Array2::zeros((h.feature_dim, h.latent_dim)),
            users: Array2::zeros((h.num_users, h.latent_dim)),
            reconstruction: h.reconstruction,
        };
        m.load_flat(&params)?;
        Ok((m, h.config))
    }
}

impl LatentModel for LinearModel {
    fn kind(&self) -> ModelKind {
        ModelKind::Lm
    }

    fn feature_dim(&self) -> usize {
        LinearModel::feature_dim(self)
    }

    fn latent_dim(&self) -> usize {
        LinearModel::latent_dim(self)
    }

    fn user_embeddings(&self) -> ArrayView2<'_, f64> {
        self.users.view()
    }

    fn encode_batch(&self, x: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        LinearModel::encode_batch(self, x)
    }

    fn sample_latent(&self, x: ArrayView1<'_, f64>, rng: &mut StageRng) -> Result<Array1<f64>> {
        let z = lm_encode(self, x)?;
        let jitter = Normal::new(0.0, LM_SAMPLE_JITTER).expect("positive std");
        Ok(z.mapv(|v| v + jitter.sample(rng)))
    }

    fn decode_batch(&self, z: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        LinearModel::decode_batch(self, z)
    }
}

#[derive(Serialize, Deserialize)]
struct LmHeader {
    feature_dim: usize,
    latent_dim: usize,
    num_users: usize,
    reconstruction: LossKind,
    config: Option<TrainConfig>,
}

pub fn lm_encode(m: &LinearModel, x: ArrayView1<'_, f64>) -> Result<Array1<f64>> {
    check_dim("lm_encode input", m.feature_dim(), x.len())?;
    Ok(m.encoder.dot(&x))
}

pub fn lm_decode(m: &LinearModel, z: ArrayView1<'_, f64>) -> Result<Array1<f64>> {
    check_dim("lm_decode input", m.latent_dim(), z.len())?;
    let a = m.decoder.dot(&z);
    Ok(match m.reconstruction {
        LossKind::CrossEntropy => a.mapv(sigmoid),
        LossKind::Squared => a,
    })
}

pub fn lm_predict_rating(m: &LinearModel, user: usize, z_item: ArrayView1<'_, f64>) -> Result<f64> {
    if user >= m.num_users() {
        return Err(Error::invalid(format!("unknown user {user}")));
    }
    check_dim("lm_predict_rating latent", m.latent_dim(), z_item.len())?;
    Ok(predicted_rating(m.users.row(user), z_item))
}

/// Frobenius-type regularizer and its gradient.
pub(crate) fn frobenius(m: ArrayView2<'_, f64>, squared: bool) -> (f64, Array2<f64>) {
    let sq: f64 = m.iter().map(|v| v * v).sum();
    if squared {
        (sq, m.mapv(|v| 2.0 * v))
    } else {
        let norm = sq.sqrt();
        if norm == 0.0 {
            // subgradient at the origin
            (0.0, Array2::zeros(m.raw_dim()))
        } else {
            (norm, m.mapv(|v| v / norm))
        }
    }
}

/// Distinct users of a batch in order of first appearance, and each triple's
/// position in that list.
pub(crate) fn batch_users(batch: &Batch<'_>) -> (Vec<usize>, Vec<usize>) {
    let mut distinct: Vec<usize> = Vec::new();
    let mut slot = Vec::with_capacity(batch.len());
    let mut seen = std::collections::HashMap::new();
    for t in batch.triples {
        let s = *seen.entry(t.user).or_insert_with(|| {
            distinct.push(t.user);
            distinct.len() - 1
        });
        slot.push(s);
    }
    (distinct, slot)
}

/// Reconstruction loss of output pre-activations `a` against targets `x`,
/// with derivative in `a`.
pub(crate) fn recon_on_preactivation(kind: LossKind, x: f64, a: f64) -> (f64, f64) {
    match kind {
        LossKind::CrossEntropy => kind.on_logit(x, a),
        LossKind::Squared => kind.on_output(x, a),
    }
}

/// Batch objective: mean over the batch of
/// `rating_loss + lambda_recon * reconstruction_loss`, plus
/// `lambda_reg * (|M_enc|_F + |M_dec|_F + |Z_batch|_F)`, where `Z_batch` holds
/// the embeddings of the users present in the batch.
pub fn lm_loss(m: &LinearModel, batch: &Batch<'_>, cfg: &TrainConfig) -> Result<(f64, LmGradients)> {
    batch.validate(m.num_users(), m.feature_dim())?;
    let b = batch.len();
    let w = 1.0 / b as f64;
    let x = batch.item_features();
    let z = x.dot(&m.encoder.t());
    let (distinct, slot) = batch_users(batch);
    let u = m.users.select(Axis(0), &distinct);
    let a = z.dot(&m.decoder.t());

    let mut data_loss = 0.0;
    let mut g_s = Array1::zeros(b);
    let mut d_a = Array2::zeros(a.raw_dim());
    for (k, t) in batch.triples.iter().enumerate() {
        let s = u.row(slot[k]).dot(&z.row(k));
        let (lr, gs) = cfg.rating_loss.on_logit(t.rating, s);
        let mut lg = 0.0;
        for j in 0..x.ncols() {
            let (l, g) = recon_on_preactivation(cfg.reconstruction_loss, x[[k, j]], a[[k, j]]);
            lg += l;
            d_a[[k, j]] = w * cfg.lambda_recon * g;
        }
        let datum = lr + cfg.lambda_recon * lg;
        if !datum.is_finite() {
            return Err(Error::NonFinite(format!(
                "loss for triple (user {}, item {}, rating {})",
                t.user, t.item, t.rating
            )));
        }
        data_loss += datum;
        g_s[k] = w * gs;
    }

    let mut d_z = d_a.dot(&m.decoder);
    let mut user_grads: Vec<Array1<f64>> = vec![Array1::zeros(m.latent_dim()); distinct.len()];
    for k in 0..b {
        let urow = u.row(slot[k]);
        d_z.row_mut(k).scaled_add(g_s[k], &urow);
        user_grads[slot[k]].scaled_add(g_s[k], &z.row(k));
    }
    let mut decoder = standard(d_a.t().dot(&z));
    let mut encoder = standard(d_z.t().dot(&x));

    let (r_enc, g_enc) = frobenius(m.encoder.view(), cfg.squared_frobenius);
    let (r_dec, g_dec) = frobenius(m.decoder.view(), cfg.squared_frobenius);
    let (r_usr, g_usr) = frobenius(u.view(), cfg.squared_frobenius);
    encoder.scaled_add(cfg.lambda_reg, &g_enc);
    decoder.scaled_add(cfg.lambda_reg, &g_dec);
    for (row, g) in user_grads.iter_mut().zip(g_usr.rows()) {
        row.scaled_add(cfg.lambda_reg, &g);
    }
    let loss = w * data_loss + cfg.lambda_reg * (r_enc + r_dec + r_usr);
    Ok((
        loss,
        LmGradients {
            encoder,
            decoder,
            users: distinct.into_iter().zip(user_grads).collect(),
        },
    ))
}

/// Mean rating loss of the model's predictions on a batch.
pub(crate) fn rating_loss_with(users: &Array2<f64>, item_latents: &Array2<f64>, batch: &Batch<'_>, kind: LossKind) -> f64 {
    let total: f64 = batch
        .triples
        .iter()
        .enumerate()
        .map(|(k, t)| kind.on_logit(t.rating, users.row(t.user).dot(&item_latents.row(k))).0)
        .sum();
    total / batch.len().max(1) as f64
}

#[derive(Clone)]
struct LmFit<'c> {
    model: LinearModel,
    cfg: &'c TrainConfig,
}

impl Trainable for LmFit<'_> {
    type Grads = LmGradients;

    fn objective(&self, batch: &Batch<'_>, _noise: &mut StageRng) -> Result<(f64, LmGradients)> {
        lm_loss(&self.model, batch, self.cfg)
    }

    fn apply(&mut self, grads: &LmGradients, opt: &mut AdamState) -> Result<()> {
        let mut users = Array2::zeros(self.model.users.raw_dim());
        for (u, g) in &grads.users {
            users.row_mut(*u).assign(g);
        }
        let g = [
            grads.encoder.as_slice().expect("standard layout"),
            grads.decoder.as_slice().expect("standard layout"),
            users.as_slice().expect("standard layout"),
        ];
        adam_step(&mut self.model.param_slices_mut(), &g, opt)
    }

    fn rating_loss(&self, batch: &Batch<'_>, kind: LossKind) -> Result<f64> {
        let z = self.model.encode_batch(batch.item_features().view())?;
        Ok(rating_loss_with(&self.model.users, &z, batch, kind))
    }
}

/// Trains a linear model with Adam and early stopping on the validation
/// rating loss; returns the best-validation snapshot.
pub fn lm_train(ds: &RatingsDataset, split: &DatasetSplit, cfg: &TrainConfig) -> Result<(LinearModel, TrainingHistory)> {
    cfg.validate()?;
    if !ds.ratings_in_unit_interval() {
        return Err(Error::invalid("ratings must be rescaled to [0, 1] before training"));
    }
    if cfg.reconstruction_loss == LossKind::CrossEntropy && !ds.features_in_unit_interval() {
        return Err(Error::invalid("cross-entropy reconstruction needs features in [0, 1]"));
    }
    let init = LinearModel::init(ds.num_users(), ds.feature_dim(), cfg.latent_dim, cfg.reconstruction_loss, cfg.seed)?;
    let (fitted, history) = fit(LmFit { model: init, cfg }, ds, split, cfg)?;
    Ok((fitted.model, history))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::RatingTriple;
    use approx::assert_abs_diff_eq;
    use ndarray::array;

    fn model(d_x: usize, d_z: usize, users: usize, recon: LossKind, seed: u64) -> LinearModel {
        LinearModel::init(users, d_x, d_z, recon, seed).unwrap()
    }

    fn fd_check(m: &LinearModel, batch: &Batch<'_>, cfg: &TrainConfig) -> Option<String> {
        let (_, grads) = lm_loss(m, batch, cfg).unwrap();
        let analytic = grads.flatten_dense(m.num_users());
        let base = m.flatten();
        let h = 1e-5;
        for k in 0..base.len() {
            let mut flat = base.clone();
            let mut shifted = m.clone();
            flat[k] += h;
            shifted.load_flat(&flat).unwrap();
            let up = lm_loss(&shifted, batch, cfg).unwrap().0;
            flat[k] -= 2.0 * h;
            shifted.load_flat(&flat).unwrap();
            let down = lm_loss(&shifted, batch, cfg).unwrap().0;
            let fd = (up - down) / (2.0 * h);
            if fd.abs() > 1e-8 && (analytic[k] - fd).abs() / fd.abs().max(analytic[k].abs()) >= 1e-4 {
                return Some(format!("param {k}: analytic {} vs fd {fd}", analytic[k]));
            }
        }
        None
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let feats = Array2::from_shape_fn((4, 5), |(i, j)| ((i * 5 + j) as f64 * 0.37).sin().abs());
        let triples = [
            RatingTriple { user: 0, item: 1, rating: 0.8 },
            RatingTriple { user: 2, item: 3, rating: 0.1 },
            RatingTriple { user: 0, item: 2, rating: 0.5 },
        ];
        let batch = Batch::new(&triples, feats.view());
        for (recon, rating, squared) in [
            (LossKind::CrossEntropy, LossKind::CrossEntropy, false),
            (LossKind::Squared, LossKind::Squared, true),
            (LossKind::CrossEntropy, LossKind::Squared, false),
        ] {
            let m = model(5, 3, 3, recon, 21);
            let cfg = TrainConfig {
                lambda_recon: 0.7,
                lambda_reg: 0.05,
                squared_frobenius: squared,
                rating_loss: rating,
                reconstruction_loss: recon,
                ..TrainConfig::default()
            };
            assert_eq!(fd_check(&m, &batch, &cfg), None);
        }
    }

    #[test]
    fn identity_encoder_and_zero_input() {
        let m = LinearModel::new(Array2::eye(3), Array2::eye(3), Array2::zeros((1, 3)), LossKind::Squared).unwrap();
        let x = array![0.2, 0.5, 0.9];
        assert_eq!(lm_encode(&m, x.view()).unwrap(), x);
        assert_eq!(lm_encode(&m, Array1::zeros(3).view()).unwrap(), Array1::<f64>::zeros(3));
        // identity decoder in squared mode
        assert_eq!(lm_decode(&m, x.view()).unwrap(), x);
    }

    #[test]
    fn encode_matches_straight_line_product() {
        let m = model(6, 3, 2, LossKind::CrossEntropy, 4);
        let x = array![0.1, 0.9, 0.3, 0.4, 0.5, 0.0];
        let z = lm_encode(&m, x.view()).unwrap();
        for r in 0..3 {
            let mut s = 0.0;
            for c in 0..6 {
                s += m.encoder()[[r, c]] * x[c];
            }
            assert_abs_diff_eq!(z[r], s, epsilon = 1e-12);
        }
    }

    #[test]
    fn decode_zero_in_cross_entropy_mode() {
        let m = model(4, 2, 1, LossKind::CrossEntropy, 1);
        assert_eq!(lm_decode(&m, array![0.0, 0.0].view()).unwrap(), Array1::from_elem(4, 0.5));
    }

    /// Inverse of a small square matrix by Gauss-Jordan elimination.
    fn invert(a: &Array2<f64>) -> Array2<f64> {
        let n = a.nrows();
        let mut aug = Array2::zeros((n, 2 * n));
        for i in 0..n {
            for j in 0..n {
                aug[[i, j]] = a[[i, j]];
            }
            aug[[i, n + i]] = 1.0;
        }
        for c in 0..n {
            let p = (c..n).max_by(|&i, &j| aug[[i, c]].abs().total_cmp(&aug[[j, c]].abs())).unwrap();
            for j in 0..2 * n {
                aug.swap([c, j], [p, j]);
            }
            let d = aug[[c, c]];
            for j in 0..2 * n {
                aug[[c, j]] /= d;
            }
            for i in 0..n {
                if i != c {
                    let f = aug[[i, c]];
                    for j in 0..2 * n {
                        aug[[i, j]] -= f * aug[[c, j]];
                    }
                }
            }
        }
        aug.slice(ndarray::s![.., n..]).to_owned()
    }

    #[test]
    fn pseudo_inverse_decoder_recovers_input() {
        let enc = model(3, 5, 1, LossKind::Squared, 8).encoder().clone();
        let gram = enc.t().dot(&enc);
        let pinv = invert(&gram).dot(&enc.t());
        let m = LinearModel::new(enc, pinv, Array2::zeros((1, 5)), LossKind::Squared).unwrap();
        let x = array![0.25, 0.8, 0.6];
        let back = lm_decode(&m, lm_encode(&m, x.view()).unwrap().view()).unwrap();
        for j in 0..3 {
            assert_abs_diff_eq!(back[j], x[j], epsilon = 1e-9);
        }
    }

    #[test]
    fn predicted_rating_values() {
        let users = array![[1.0, 0.0], [2f64.ln() + 1f64.ln(), 0.0], [2.0, 0.0]];
        let m = LinearModel::new(Array2::zeros((2, 2)), Array2::zeros((2, 2)), users, LossKind::Squared).unwrap();
        assert_eq!(lm_predict_rating(&m, 0, array![0.0, 5.0].view()).unwrap(), 0.5);
        let r = lm_predict_rating(&m, 0, array![3f64.ln(), 0.0].view()).unwrap();
        assert_abs_diff_eq!(r, 0.75, epsilon = 1e-12);
        let r = lm_predict_rating(&m, 2, array![2.0, 0.0].view()).unwrap();
        assert_abs_diff_eq!(r, 1.0 / (1.0 + (-4f64).exp()), epsilon = 1e-12);
        assert_abs_diff_eq!(r, 0.9820, epsilon = 1e-4);
        assert!(lm_predict_rating(&m, 3, array![0.0, 0.0].view()).is_err());
    }

    #[test]
    fn loss_closed_forms() {
        let cfg = TrainConfig { lambda_recon: 0.0, lambda_reg: 0.0, ..TrainConfig::default() };
        // zero user embedding -> r~ = 0.5 -> ln 2 for r = 1
        let m = LinearModel::new(Array2::eye(2), Array2::eye(2), Array2::zeros((1, 2)), LossKind::CrossEntropy).unwrap();
        let feats = array![[0.3, 0.7]];
        let t = [RatingTriple { user: 0, item: 0, rating: 1.0 }];
        let (loss, _) = lm_loss(&m, &Batch::new(&t, feats.view()), &cfg).unwrap();
        assert_abs_diff_eq!(loss, std::f64::consts::LN_2, epsilon = 1e-12);

        // perfect 0/1 predictions with zero weights give (numerically) zero loss
        let m = LinearModel::new(Array2::eye(2), Array2::eye(2), array![[60.0, 0.0], [-60.0, 0.0]], LossKind::CrossEntropy).unwrap();
        let feats = array![[1.0, 0.0]];
        let t = [
            RatingTriple { user: 0, item: 0, rating: 1.0 },
            RatingTriple { user: 1, item: 0, rating: 0.0 },
        ];
        let (loss, _) = lm_loss(&m, &Batch::new(&t, feats.view()), &cfg).unwrap();
        assert!(loss < 1e-6, "{loss}");
    }

    #[test]
    fn regularizer_is_plain_frobenius_norm() {
        let cfg = TrainConfig { lambda_recon: 0.0, lambda_reg: 1.0, ..TrainConfig::default() };
        let enc = array![[3.0, 4.0]];
        let dec = array![[0.0], [2.0]];
        let users = array![[1.0]];
        let m = LinearModel::new(enc, dec, users, LossKind::CrossEntropy).unwrap();
        let feats = array![[0.0, 0.0]];
        let t = [RatingTriple { user: 0, item: 0, rating: 1.0 }];
        let (loss, _) = lm_loss(&m, &Batch::new(&t, feats.view()), &cfg).unwrap();
        assert_abs_diff_eq!(loss, std::f64::consts::LN_2 + 5.0 + 2.0 + 1.0, epsilon = 1e-12);
        let sq = TrainConfig { squared_frobenius: true, ..cfg };
        let (loss, _) = lm_loss(&m, &Batch::new(&t, feats.view()), &sq).unwrap();
        assert_abs_diff_eq!(loss, std::f64::consts::LN_2 + 25.0 + 4.0 + 1.0, epsilon = 1e-12);
    }

    #[test]
    fn zero_matrix_uses_zero_subgradient() {
        let (v, g) = frobenius(Array2::<f64>::zeros((2, 2)).view(), false);
        assert_eq!(v, 0.0);
        assert!(g.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn checkpoint_round_trip() {
        let m = model(5, 2, 3, LossKind::CrossEntropy, 2);
        let cfg = TrainConfig::default();
        let bytes = m.to_bytes(Some(&cfg)).unwrap();
        assert!(bytes.starts_with(b"MCNIP-LM-1\n"));
        let (back, c) = LinearModel::from_bytes(&bytes).unwrap();
        assert_eq!(back, m);
        assert_eq!(c, Some(cfg));
    }
}
