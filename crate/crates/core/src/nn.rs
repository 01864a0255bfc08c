//! Dense feed-forward networks with hand-derived backpropagation, and Adam.
//!
//! Batches are row-major: one example per row. Gradients returned by
//! [`Mlp::backward`] are sums over the rows of the upstream gradient, so any
//! averaging over a mini-batch is done by the caller when it forms `upstream`.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::rng::StageRng;

/// Probabilities are clamped to `[PROB_FLOOR, 1 - PROB_FLOOR]` before any log.
pub const PROB_FLOOR: f64 = 1e-7;

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn clamp_prob(p: f64) -> f64 {
    p.clamp(PROB_FLOOR, 1.0 - PROB_FLOOR)
}

fn in_prob_range(p: f64) -> bool {
    (PROB_FLOOR..=1.0 - PROB_FLOOR).contains(&p)
}

/// Binary cross-entropy of `target` against probability `p`.
pub fn bce(target: f64, p: f64) -> f64 {
    let q = clamp_prob(p);
    -(target * q.ln() + (1.0 - target) * (1.0 - q).ln())
}

/// Derivative of [`bce`] with respect to `p`; zero where the floor is active.
pub fn bce_dprob(target: f64, p: f64) -> f64 {
    if in_prob_range(p) {
        -target / p + (1.0 - target) / (1.0 - p)
    } else {
        0.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    #[default]
    CrossEntropy,
    Squared,
}

impl std::str::FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cross_entropy" | "ce" => Ok(LossKind::CrossEntropy),
            "squared" | "mse" => Ok(LossKind::Squared),
            _ => Err(Error::invalid(format!("unknown loss {s:?}; expected cross_entropy or squared"))),
        }
    }
}

impl LossKind {
    /// Loss of a prediction `sigmoid(s)` against `target`, and its derivative in `s`.
    pub fn on_logit(self, target: f64, s: f64) -> (f64, f64) {
        let p = sigmoid(s);
        match self {
            LossKind::CrossEntropy => {
                let grad = if in_prob_range(p) { p - target } else { 0.0 };
                (bce(target, p), grad)
            }
            LossKind::Squared => {
                let diff = p - target;
                (diff * diff, 2.0 * diff * p * (1.0 - p))
            }
        }
    }

    /// Loss of a network output `out` against `target`, and its derivative in `out`.
    ///
    /// Cross-entropy expects `out` to already be a probability (sigmoid
    /// output layer); squared error uses `out` as is.
    pub fn on_output(self, target: f64, out: f64) -> (f64, f64) {
        match self {
            LossKind::CrossEntropy => (bce(target, out), bce_dprob(target, out)),
            LossKind::Squared => {
                let diff = out - target;
                (diff * diff, 2.0 * diff)
            }
        }
    }

    /// Output activation that makes [`LossKind::on_output`] well defined.
    pub fn output_activation(self) -> Activation {
        match self {
            LossKind::CrossEntropy => Activation::Sigmoid,
            LossKind::Squared => Activation::Identity,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Sigmoid,
    Identity,
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Sigmoid => sigmoid(x),
            Activation::Identity => x,
        }
    }

    /// Derivative at pre-activation `x`.
    pub fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Sigmoid => {
                let s = sigmoid(x);
                s * (1.0 - s)
            }
            Activation::Identity => 1.0,
        }
    }
}

/// One affine map followed by an elementwise activation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    /// `out x in`
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
    pub activation: Activation,
}

impl Layer {
    pub fn input_dim(&self) -> usize {
        self.weight.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.weight.nrows()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    layers: Vec<Layer>,
}

/// Everything `backward` needs from a forward pass.
#[derive(Clone, Debug)]
pub struct ForwardCache {
    inputs: Vec<Array2<f64>>,
    pre: Vec<Array2<f64>>,
}

impl ForwardCache {
    pub fn batch_size(&self) -> usize {
        self.inputs.first().map_or(0, |a| a.nrows())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerGrad {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

/// Gradients for every layer of an [`Mlp`], and optionally for its input.
#[derive(Clone, Debug, PartialEq)]
pub struct GradientBundle {
    pub layers: Vec<LayerGrad>,
    pub input: Option<Array2<f64>>,
}

impl GradientBundle {
    pub fn zeros_like(net: &Mlp) -> Self {
        GradientBundle {
            layers: net
                .layers
                .iter()
                .map(|l| LayerGrad {
                    weight: Array2::zeros(l.weight.raw_dim()),
                    bias: Array1::zeros(l.bias.raw_dim()),
                })
                .collect(),
            input: None,
        }
    }

    /// Parameter gradients in the same order as [`Mlp::param_slices_mut`].
    pub fn slices(&self) -> Vec<&[f64]> {
        self.layers
            .iter()
            .flat_map(|g| {
                [
                    g.weight.as_slice().expect("standard layout"),
                    g.bias.as_slice().expect("standard layout"),
                ]
            })
            .collect()
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.slices().concat()
    }

    pub fn is_zero(&self) -> bool {
        self.slices().iter().all(|s| s.iter().all(|&v| v == 0.0))
    }
}

impl Mlp {
    pub fn from_layers(layers: Vec<Layer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::invalid("a network needs at least one layer"));
        }
        for pair in layers.windows(2) {
            check_dim("layer chaining", pair[0].output_dim(), pair[1].input_dim())?;
        }
        for layer in &layers {
            check_dim("bias length", layer.output_dim(), layer.bias.len())?;
            if layer.weight.iter().chain(layer.bias.iter()).any(|v| !v.is_finite()) {
                return Err(Error::NonFinite("network parameter".into()));
            }
        }
        let layers = layers
            .into_iter()
            .map(|l| Layer {
                weight: l.weight.as_standard_layout().into_owned(),
                bias: l.bias.as_standard_layout().into_owned(),
                activation: l.activation,
            })
            .collect();
        Ok(Mlp { layers })
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].output_dim()
    }

    /// Layer widths including input and output, e.g. `[20, 14, 8]`.
    pub fn dims(&self) -> Vec<usize> {
        std::iter::once(self.input_dim())
            .chain(self.layers.iter().map(Layer::output_dim))
            .collect()
    }

    pub fn activations(&self) -> Vec<Activation> {
        self.layers.iter().map(|l| l.activation).collect()
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    pub fn forward(&self, x: ArrayView1<'_, f64>) -> Result<(Array1<f64>, ForwardCache)> {
        let batch = x.to_owned().insert_axis(Axis(0));
        let (out, cache) = self.forward_batch(batch.view())?;
        Ok((out.row(0).to_owned(), cache))
    }

    pub fn forward_batch(&self, x: ArrayView2<'_, f64>) -> Result<(Array2<f64>, ForwardCache)> {
        check_dim("network input", self.input_dim(), x.ncols())?;
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut a = x.to_owned();
        for layer in &self.layers {
            let z = a.dot(&layer.weight.t()) + &layer.bias;
            let next = z.mapv(|v| layer.activation.apply(v));
            inputs.push(a);
            pre.push(z);
            a = next;
        }
        Ok((a, ForwardCache { inputs, pre }))
    }

    /// Forward pass without keeping a cache.
    pub fn predict(&self, x: ArrayView1<'_, f64>) -> Result<Array1<f64>> {
        check_dim("network input", self.input_dim(), x.len())?;
        let mut a = x.to_owned();
        for layer in &self.layers {
            a = (layer.weight.dot(&a) + &layer.bias).mapv(|v| layer.activation.apply(v));
        }
        Ok(a)
    }

    pub fn predict_batch(&self, x: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        check_dim("network input", self.input_dim(), x.ncols())?;
        let mut a = x.to_owned();
        for layer in &self.layers {
            a = (a.dot(&layer.weight.t()) + &layer.bias).mapv(|v| layer.activation.apply(v));
        }
        Ok(a)
    }

    /// Gradients of a scalar loss whose gradient at the network output is `upstream`.
    pub fn backward(&self, cache: &ForwardCache, upstream: ArrayView2<'_, f64>) -> Result<GradientBundle> {
        if cache.pre.len() != self.layers.len() {
            return Err(Error::StaleCache(format!(
                "cache has {} layers, network has {}",
                cache.pre.len(),
                self.layers.len()
            )));
        }
        for (layer, (input, pre)) in self.layers.iter().zip(cache.inputs.iter().zip(&cache.pre)) {
            if input.ncols() != layer.input_dim() || pre.ncols() != layer.output_dim() {
                return Err(Error::StaleCache("layer shapes changed since the forward pass".into()));
            }
        }
        if upstream.dim() != (cache.batch_size(), self.output_dim()) {
            return Err(Error::StaleCache(format!(
                "upstream gradient has shape {:?}, expected ({}, {})",
                upstream.dim(),
                cache.batch_size(),
                self.output_dim()
            )));
        }

        let mut grads = Vec::with_capacity(self.layers.len());
        let mut delta = upstream.to_owned();
        for (l, layer) in self.layers.iter().enumerate().rev() {
            let pre = &cache.pre[l];
            let act = layer.activation;
            if act != Activation::Identity {
                delta.zip_mut_with(pre, |d, &z| *d *= act.derivative(z));
            }
            let weight = standard(delta.t().dot(&cache.inputs[l]));
            let bias = delta.sum_axis(Axis(0));
            delta = delta.dot(&layer.weight);
            grads.push(LayerGrad { weight, bias });
        }
        grads.reverse();
        Ok(GradientBundle {
            layers: grads,
            input: Some(delta),
        })
    }

    /// Mutable parameter storage: weight then bias for each layer.
    pub fn param_slices_mut(&mut self) -> Vec<&mut [f64]> {
        self.layers
            .iter_mut()
            .flat_map(|l| {
                [
                    l.weight.as_slice_mut().expect("standard layout"),
                    l.bias.as_slice_mut().expect("standard layout"),
                ]
            })
            .collect()
    }

    pub fn param_slices(&self) -> Vec<&[f64]> {
        self.layers
            .iter()
            .flat_map(|l| {
                [
                    l.weight.as_slice().expect("standard layout"),
                    l.bias.as_slice().expect("standard layout"),
                ]
            })
            .collect()
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.param_slices().concat()
    }

    /// Overwrites all parameters from a flat slice; returns how many were read.
    pub fn load_flat(&mut self, flat: &[f64]) -> Result<usize> {
        let n = self.param_count();
        if flat.len() < n {
            return Err(Error::Checkpoint(format!(
                "parameter blob too short: need {n}, have {}",
                flat.len()
            )));
        }
        let mut offset = 0;
        for slice in self.param_slices_mut() {
            slice.copy_from_slice(&flat[offset..offset + slice.len()]);
            offset += slice.len();
        }
        Ok(n)
    }
}

pub const NN_MAGIC: &str = "MCNIP-NN-1";

/// Architecture of an [`Mlp`], as stored in checkpoint headers.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpShape {
    pub dims: Vec<usize>,
    pub activations: Vec<Activation>,
}

impl MlpShape {
    pub fn param_count(&self) -> usize {
        self.dims.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }

    /// A network of this shape with every parameter zero.
    pub fn zeros(&self) -> Result<Mlp> {
        if self.dims.len() < 2 || self.dims.contains(&0) {
            return Err(Error::Checkpoint(format!("bad layer widths {:?}", self.dims)));
        }
        check_dim("activation count", self.dims.len() - 1, self.activations.len())?;
        Mlp::from_layers(
            self.dims
                .windows(2)
                .zip(&self.activations)
                .map(|(w, &activation)| Layer {
                    weight: Array2::zeros((w[1], w[0])),
                    bias: Array1::zeros(w[1]),
                    activation,
                })
                .collect(),
        )
    }
}

impl Mlp {
    pub fn shape(&self) -> MlpShape {
        MlpShape {
            dims: self.dims(),
            activations: self.activations(),
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        crate::checkpoint::encode(NN_MAGIC, &self.shape(), &self.flatten())
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (shape, params): (MlpShape, Vec<f64>) = crate::checkpoint::decode(NN_MAGIC, bytes)?;
        check_dim("network parameter count", shape.param_count(), params.len())?;
        let mut net = shape.zeros()?;
        net.load_flat(&params)?;
        Ok(net)
    }
}

/// Random initialization: He (`N(0, 2/fan_in)`) for ReLU layers,
/// `N(0, 1/fan_in)` otherwise, zero biases.
pub fn init_mlp(dims: &[usize], activations: &[Activation], seed: u64) -> Result<Mlp> {
    let mut rng = crate::rng::substream(seed, crate::rng::INIT);
    init_mlp_with(dims, activations, &mut rng)
}

pub fn init_mlp_with<R: Rng>(dims: &[usize], activations: &[Activation], rng: &mut R) -> Result<Mlp> {
    if dims.len() < 2 {
        return Err(Error::invalid(format!(
            "network needs at least input and output widths, got {dims:?}"
        )));
    }
    check_dim("activation count", dims.len() - 1, activations.len())?;
    if dims.contains(&0) {
        return Err(Error::invalid("layer widths must be positive"));
    }
    let layers = dims
        .windows(2)
        .zip(activations)
        .map(|(w, &activation)| {
            let (fan_in, fan_out) = (w[0], w[1]);
            let var = match activation {
                Activation::Relu => 2.0 / fan_in as f64,
                _ => 1.0 / fan_in as f64,
            };
            let normal = Normal::new(0.0, var.sqrt()).expect("positive variance");
            Layer {
                weight: Array2::from_shape_simple_fn((fan_out, fan_in), || normal.sample(rng)),
                bias: Array1::zeros(fan_out),
                activation,
            }
        })
        .collect();
    Mlp::from_layers(layers)
}

/// Adam moments for a list of parameter arrays.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(learning_rate: f64) -> Self {
        AdamState {
            step: 0,
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            first: Vec::new(),
            second: Vec::new(),
        }
    }

    pub fn first_moment(&self) -> &[Vec<f64>] {
        &self.first
    }

    pub fn second_moment(&self) -> &[Vec<f64>] {
        &self.second
    }
}

/// One bias-corrected Adam update of `params` in place.
///
/// Any non-finite gradient rejects the whole update; parameters and moments
/// are left untouched.
pub fn adam_step(params: &mut [&mut [f64]], grads: &[&[f64]], state: &mut AdamState) -> Result<()> {
    check_dim("adam parameter groups", params.len(), grads.len())?;
    for (p, g) in params.iter().zip(grads) {
        check_dim("adam parameter group", p.len(), g.len())?;
    }
    if let Some(pos) = grads.iter().flat_map(|g| g.iter()).position(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("gradient component {pos}")));
    }
    if state.first.is_empty() {
        state.first = grads.iter().map(|g| vec![0.0; g.len()]).collect();
        state.second = state.first.clone();
    } else {
        check_dim("adam state groups", state.first.len(), grads.len())?;
        for (m, g) in state.first.iter().zip(grads) {
            check_dim("adam state group", m.len(), g.len())?;
        }
    }

    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (state.beta1, state.beta2);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    let lr = state.learning_rate;
    for (k, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let m = &mut state.first[k];
        let v = &mut state.second[k];
        for j in 0..g.len() {
            m[j] = b1 * m[j] + (1.0 - b1) * g[j];
            v[j] = b2 * v[j] + (1.0 - b2) * g[j] * g[j];
            let m_hat = m[j] / c1;
            let v_hat = v[j] / c2;
            p[j] -= lr * m_hat / (v_hat.sqrt() + state.epsilon);
        }
    }
    Ok(())
}

/// `a` in row-major layout, copying only when needed.
pub(crate) fn standard(a: Array2<f64>) -> Array2<f64> {
    if a.is_standard_layout() {
        a
    } else {
        a.as_standard_layout().into_owned()
    }
}

pub(crate) fn standard_normal_matrix(rows: usize, cols: usize, rng: &mut StageRng) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || rng.sample(rand_distr::StandardNormal))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;
    use proptest::prelude::*;
    use rand::Rng;

    #[test]
    fn identity_layer_passes_input_through() {
        let net = Mlp::from_layers(vec![Layer {
            weight: Array2::eye(3),
            bias: Array1::zeros(3),
            activation: Activation::Identity,
        }])
        .unwrap();
        let x = array![0.3, -1.2, 4.0];
        assert_eq!(net.forward(x.view()).unwrap().0, x);
    }

    #[test]
    fn relu_kills_negative_preactivations() {
        let net = Mlp::from_layers(vec![Layer {
            weight: -Array2::eye(2),
            bias: array![-0.5, -0.1],
            activation: Activation::Relu,
        }])
        .unwrap();
        assert_eq!(net.predict(array![1.0, 2.0].view()).unwrap(), array![0.0, 0.0]);
    }

    /// Straight-line evaluation of the same formulas, one scalar at a time.
    fn reference_forward(net: &Mlp, x: &[f64]) -> Vec<f64> {
        let mut a = x.to_vec();
        for layer in net.layers() {
            let mut next = Vec::new();
            for o in 0..layer.output_dim() {
                let mut s = layer.bias[o];
                for i in 0..layer.input_dim() {
                    s += layer.weight[[o, i]] * a[i];
                }
                next.push(match layer.activation {
                    Activation::Relu => if s > 0.0 { s } else { 0.0 },
                    Activation::Sigmoid => 1.0 / (1.0 + (-s).exp()),
                    Activation::Identity => s,
                });
            }
            a = next;
        }
        a
    }

    fn random_net(seed: u64, dims: &[usize]) -> Mlp {
        let acts: Vec<Activation> = (0..dims.len() - 1)
            .map(|k| [Activation::Relu, Activation::Sigmoid, Activation::Identity][(k + seed as usize) % 3])
            .collect();
        let mut net = init_mlp(dims, &acts, seed).unwrap();
        // non-zero biases so the bias gradients are exercised
        let mut rng = crate::rng::substream(seed, "bias");
        for layer in &mut net.layers {
            layer.bias.mapv_inplace(|_| rng.random_range(-0.5..0.5));
        }
        net
    }

    #[test]
    fn forward_matches_straight_line_evaluation() {
        let net = random_net(5, &[5, 8, 3]);
        let x = [0.1, -0.7, 2.0, 0.4, -1.1];
        let got = net.forward(ArrayView1::from(&x)).unwrap().0;
        for (a, b) in got.iter().zip(reference_forward(&net, &x)) {
            assert_abs_diff_eq!(*a, b, epsilon = 1e-12);
        }
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let net = random_net(1, &[4, 6, 2]);
        let x = array![[0.5, -0.5, 1.0, 2.0]];
        let (_, cache) = net.forward_batch(x.view()).unwrap();
        let g = net.backward(&cache, Array2::zeros((1, 2)).view()).unwrap();
        assert!(g.is_zero());
    }

    #[test]
    fn single_sigmoid_unit_closed_form() {
        let (w, b, x) = (0.7, -0.2, 1.3);
        let net = Mlp::from_layers(vec![Layer {
            weight: array![[w]],
            bias: array![b],
            activation: Activation::Sigmoid,
        }])
        .unwrap();
        let (_, cache) = net.forward(array![x].view()).unwrap();
        let g = net.backward(&cache, array![[1.0]].view()).unwrap();
        let s = 1.0 / (1.0 + (-(w * x + b)).exp());
        assert_abs_diff_eq!(g.layers[0].weight[[0, 0]], s * (1.0 - s) * x, epsilon = 1e-12);
        assert_abs_diff_eq!(g.layers[0].bias[0], s * (1.0 - s), epsilon = 1e-12);
    }

    #[test]
    fn stale_cache_is_rejected() {
        let a = random_net(1, &[3, 4, 2]);
        let b = random_net(1, &[3, 5, 2]);
        let (_, cache) = a.forward(array![1.0, 2.0, 3.0].view()).unwrap();
        assert!(matches!(b.backward(&cache, array![[1.0, 1.0]].view()), Err(Error::StaleCache(_))));
        assert!(matches!(a.backward(&cache, array![[1.0, 1.0, 1.0]].view()), Err(Error::StaleCache(_))));
    }

    #[test]
    fn dimension_mismatch_on_forward() {
        let net = random_net(1, &[3, 2]);
        assert!(matches!(
            net.forward(array![1.0].view()),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn init_shapes_and_determinism() {
        let acts = [Activation::Relu, Activation::Sigmoid];
        let net = init_mlp(&[20, 14, 20], &acts, 3).unwrap();
        assert_eq!(net.layers().len(), 2);
        assert_eq!(net.layers()[0].weight.dim(), (14, 20));
        assert_eq!(net.layers()[1].weight.dim(), (20, 14));
        assert_eq!(net, init_mlp(&[20, 14, 20], &acts, 3).unwrap());
        assert!(init_mlp(&[128], &[], 3).is_err());
        assert!(init_mlp(&[], &[], 3).is_err());
    }

    #[test]
    fn checkpoint_round_trip() {
        let net = random_net(4, &[6, 5, 2]);
        let bytes = net.to_bytes().unwrap();
        assert!(bytes.starts_with(b"MCNIP-NN-1\n"));
        assert_eq!(Mlp::from_bytes(&bytes).unwrap(), net);
        assert!(Mlp::from_bytes(&bytes[..bytes.len() - 8]).is_err());
    }

    #[test]
    fn adam_first_step_closed_form() {
        let g = [0.5, -2.0, 1e-3];
        let mut p = [1.0, 1.0, 1.0];
        let mut st = AdamState::new(0.001);
        adam_step(&mut [&mut p[..]], &[&g[..]], &mut st).unwrap();
        for j in 0..3 {
            let expected = 1.0 - 0.001 * g[j] / (g[j].abs() + 1e-8);
            assert_abs_diff_eq!(p[j], expected, epsilon = 1e-15);
        }
    }

    #[test]
    fn adam_zero_gradient_keeps_params() {
        let mut p = [0.3, -0.4];
        let mut st = AdamState::new(0.01);
        adam_step(&mut [&mut p[..]], &[&[0.0, 0.0][..]], &mut st).unwrap();
        assert_eq!(p, [0.3, -0.4]);
    }

    #[test]
    fn adam_two_steps_match_scalar_recurrence() {
        let (g, lr) = (0.37, 0.01);
        let mut p = [2.0];
        let mut st = AdamState::new(lr);
        adam_step(&mut [&mut p[..]], &[&[g][..]], &mut st).unwrap();
        adam_step(&mut [&mut p[..]], &[&[g][..]], &mut st).unwrap();

        let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8);
        let mut x = 2.0;
        let (mut m, mut v) = (0.0, 0.0);
        for t in 1..=2 {
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let mh = m / (1.0 - b1.powi(t));
            let vh = v / (1.0 - b2.powi(t));
            x -= lr * mh / (vh.sqrt() + eps);
        }
        assert_abs_diff_eq!(p[0], x, epsilon = 1e-12);
    }

    #[test]
    fn adam_rejects_non_finite_gradient() {
        let mut p = [1.0, 2.0];
        let mut st = AdamState::new(0.1);
        let err = adam_step(&mut [&mut p[..]], &[&[0.1, f64::NAN][..]], &mut st);
        assert!(matches!(err, Err(Error::NonFinite(_))));
        assert_eq!(p, [1.0, 2.0]);
        assert_eq!(st.step, 0);
    }

    #[test]
    fn loss_helpers() {
        assert_abs_diff_eq!(bce(1.0, 0.5), std::f64::consts::LN_2, epsilon = 1e-15);
        assert!(bce(1.0, 0.0).is_finite());
        let (l, g) = LossKind::CrossEntropy.on_logit(1.0, 0.0);
        assert_abs_diff_eq!(l, std::f64::consts::LN_2, epsilon = 1e-15);
        assert_abs_diff_eq!(g, -0.5, epsilon = 1e-15);
    }

    /// Squared-error loss on the output, so upstream = 2 * (out - target).
    fn loss_and_grad(net: &Mlp, x: &Array2<f64>, target: &Array2<f64>) -> (f64, GradientBundle) {
        let (out, cache) = net.forward_batch(x.view()).unwrap();
        let diff = &out - target;
        let loss = diff.iter().map(|d| d * d).sum();
        (loss, net.backward(&cache, (2.0 * diff).view()).unwrap())
    }

    fn check_fd(net: &Mlp, x: &Array2<f64>, target: &Array2<f64>) -> std::result::Result<(), String> {
        let (_, grads) = loss_and_grad(net, x, target);
        let analytic = grads.flatten();
        let base = net.flatten();
        let h = 1e-5;
        for k in 0..base.len() {
            let mut plus = net.clone();
            let mut flat = base.clone();
            flat[k] += h;
            plus.load_flat(&flat).unwrap();
            let mut minus = net.clone();
            flat[k] -= 2.0 * h;
            minus.load_flat(&flat).unwrap();
            let fd = (loss_and_grad(&plus, x, target).0 - loss_and_grad(&minus, x, target).0) / (2.0 * h);
            if fd.abs() > 1e-8 {
                let rel = (analytic[k] - fd).abs() / fd.abs().max(analytic[k].abs());
                if rel >= 1e-4 {
                    return Err(format!("param {k}: analytic {} vs fd {fd} (rel {rel})", analytic[k]));
                }
            }
        }
        // input gradient
        let gin = grads.input.unwrap();
        for idx in 0..x.len() {
            let (r, c) = (idx / x.ncols(), idx % x.ncols());
            let mut xp = x.clone();
            xp[[r, c]] += h;
            let mut xm = x.clone();
            xm[[r, c]] -= h;
            let fd = (loss_and_grad(net, &xp, target).0 - loss_and_grad(net, &xm, target).0) / (2.0 * h);
            if fd.abs() > 1e-8 {
                let rel = (gin[[r, c]] - fd).abs() / fd.abs().max(gin[[r, c]].abs());
                if rel >= 1e-4 {
                    return Err(format!("input {idx}: analytic {} vs fd {fd}", gin[[r, c]]));
                }
            }
        }
        Ok(())
    }

    #[test]
    fn random_net_gradients_match_finite_differences() {
        let net = random_net(9, &[5, 8, 3]);
        let mut rng = crate::rng::substream(9, "x");
        let x = standard_normal_matrix(4, 5, &mut rng);
        let t = standard_normal_matrix(4, 3, &mut rng);
        check_fd(&net, &x, &t).unwrap();
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn gradient_check_property(
            seed in 0u64..10_000,
            depth in 1usize..=3,
            widths in proptest::collection::vec(1usize..=16, 4),
            batch in 1usize..=4,
        ) {
            let dims = &widths[..=depth];
            let net = random_net(seed, dims);
            let mut rng = crate::rng::substream(seed, "x");
            let x = standard_normal_matrix(batch, dims[0], &mut rng);
            let t = standard_normal_matrix(batch, dims[depth], &mut rng);
            prop_assert!(check_fd(&net, &x, &t).is_ok(), "{:?}", check_fd(&net, &x, &t));
        }

        #[test]
        fn forward_is_pure(seed in 0u64..1000) {
            let net = random_net(seed, &[3, 5, 2]);
            let x = array![0.2, -0.3, 0.9];
            prop_assert_eq!(net.predict(x.view()).unwrap(), net.predict(x.view()).unwrap());
        }

        #[test]
        fn adam_with_zero_lr_is_identity(g in proptest::collection::vec(-10.0f64..10.0, 1..8)) {
            let mut p: Vec<f64> = (0..g.len()).map(|k| k as f64 * 0.1).collect();
            let before = p.clone();
            let mut st = AdamState::new(0.0);
            adam_step(&mut [&mut p[..]], &[&g[..]], &mut st).unwrap();
            prop_assert_eq!(p, before);
        }
    }
}
