//! From-scratch fully-connected networks.
//!
//! Parameters live in flat row-major `Vec<f64>`s; all passes are plain f64
//! loops, single-threaded and bitwise deterministic under a seed. The module
//! provides forward/backward for weighted cross-entropy, the input-gradient
//! (Lipschitz) penalty with exact double backpropagation (see [`penalty`]),
//! and SGD training with momentum and weight decay (see [`train`]).

mod penalty;
mod train;

pub use penalty::{
    grad_penalty_backward, grad_penalty_value, input_gradient, GradPenalty, PenaltyMode,
    PENALTY_FD_STEP,
};
pub use train::{
    sgd_step, train, train_with_stream, Checkpoint, TrainConfig, Trainer, TrainingCurve,
};

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Hidden-layer activation function.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Tanh,
    Softplus,
}

impl Activation {
    pub fn name(self) -> &'static str {
        match self {
            Activation::Relu => "relu",
            Activation::Tanh => "tanh",
            Activation::Softplus => "softplus",
        }
    }

    #[inline]
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Tanh => x.tanh(),
            // max(x,0) + ln(1 + exp(-|x|)) is the overflow-safe softplus.
            Activation::Softplus => x.max(0.0) + (-x.abs()).exp().ln_1p(),
        }
    }

    #[inline]
    pub fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => {
                let t = x.tanh();
                1.0 - t * t
            }
            Activation::Softplus => sigmoid(x),
        }
    }

    /// Second derivative; zero almost everywhere for relu, which is why the
    /// exact gradient-penalty mode rejects it.
    #[inline]
    pub fn second_derivative(self, x: f64) -> f64 {
        match self {
            Activation::Relu => 0.0,
            Activation::Tanh => {
                let t = x.tanh();
                -2.0 * t * (1.0 - t * t)
            }
            Activation::Softplus => {
                let s = sigmoid(x);
                s * (1.0 - s)
            }
        }
    }
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl std::str::FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "relu" => Ok(Activation::Relu),
            "tanh" => Ok(Activation::Tanh),
            "softplus" => Ok(Activation::Softplus),
            other => Err(Error::invalid(
                "activation",
                format!("{other:?} (expected relu, tanh, or softplus)"),
            )),
        }
    }
}

/// Architecture of a fully-connected network.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub input_dim: usize,
    /// One entry per hidden layer; empty means a single linear layer.
    pub hidden_widths: Vec<usize>,
    pub output_dim: usize,
    pub activation: Activation,
    /// Standardize inputs with statistics fixed from the training split.
    pub input_batchnorm: bool,
}

impl MlpSpec {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 {
            return Err(Error::invalid("model spec", "input_dim must be positive"));
        }
        if self.output_dim == 0 {
            return Err(Error::invalid("model spec", "output_dim must be positive"));
        }
        if let Some(i) = self.hidden_widths.iter().position(|&w| w == 0) {
            return Err(Error::invalid(
                "model spec",
                format!("hidden layer {i} has zero width"),
            ));
        }
        Ok(())
    }

    /// `(in_dim, out_dim)` of every layer, input to output.
    pub fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::with_capacity(self.hidden_widths.len() + 1);
        let mut prev = self.input_dim;
        for &w in &self.hidden_widths {
            dims.push((prev, w));
            prev = w;
        }
        dims.push((prev, self.output_dim));
        dims
    }

    /// Total number of weights and biases.
    pub fn param_count(&self) -> usize {
        self.layer_dims().iter().map(|&(i, o)| i * o + o).sum()
    }
}

/// One affine layer; `weights` is row-major `out_dim x in_dim`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub weights: Vec<f64>,
    pub biases: Vec<f64>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Layer {
    /// `z = W a + b` for one row.
    #[inline]
    fn affine(&self, input: &[f64], out: &mut [f64]) {
        for (o, out_val) in out.iter_mut().enumerate() {
            let row = &self.weights[o * self.in_dim..(o + 1) * self.in_dim];
            let mut acc = self.biases[o];
            for (w, a) in row.iter().zip(input) {
                acc += w * a;
            }
            *out_val = acc;
        }
    }

    /// `m = W^T u` for one row.
    #[inline]
    fn transpose_apply(&self, u: &[f64], out: &mut [f64]) {
        out.fill(0.0);
        for (o, &uo) in u.iter().enumerate() {
            if uo == 0.0 {
                continue;
            }
            let row = &self.weights[o * self.in_dim..(o + 1) * self.in_dim];
            for (m, w) in out.iter_mut().zip(row) {
                *m += w * uo;
            }
        }
    }
}

/// Fixed affine input transform `a_0 = (x - mean) * inv_std`, fitted once
/// from a training split. Constant features get `inv_std = 1` (they become
/// exactly zero after centering).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub inv_std: Vec<f64>,
}

impl Standardizer {
    /// Fit from a row-major `n x dim` matrix (population standard deviation).
    pub fn fit(features: &[f64], dim: usize) -> Self {
        let n = features.len() / dim;
        let mut mean = vec![0.0; dim];
        for row in features.chunks_exact(dim) {
            for (m, &x) in mean.iter_mut().zip(row) {
                *m += x;
            }
        }
        for m in mean.iter_mut() {
            *m /= n as f64;
        }
        let mut var = vec![0.0; dim];
        for row in features.chunks_exact(dim) {
            for ((v, &x), &m) in var.iter_mut().zip(row).zip(&mean) {
                let d = x - m;
                *v += d * d;
            }
        }
        let inv_std = var
            .iter()
            .map(|&v| {
                let sd = (v / n as f64).sqrt();
                if sd < 1e-12 {
                    1.0
                } else {
                    1.0 / sd
                }
            })
            .collect();
        Standardizer { mean, inv_std }
    }

    #[inline]
    fn apply(&self, row: &[f64], out: &mut [f64]) {
        for ((o, &x), (&m, &s)) in out
            .iter_mut()
            .zip(row)
            .zip(self.mean.iter().zip(&self.inv_std))
        {
            *o = (x - m) * s;
        }
    }
}

/// Checkpoint file format version; bumped on any layout change.
const CHECKPOINT_VERSION: u32 = 1;

/// A fully-connected network: spec, per-layer parameters, the init seed it
/// was drawn from, and the optional input standardizer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub spec: MlpSpec,
    pub layers: Vec<Layer>,
    /// Present once trained with `input_batchnorm = true`.
    pub standardizer: Option<Standardizer>,
    pub rng_seed: u64,
}

impl Mlp {
    pub fn param_count(&self) -> usize {
        self.spec.param_count()
    }

    fn depth(&self) -> usize {
        self.layers.len()
    }

    /// Write a versioned JSON checkpoint (round-trip exact: serde emits f64
    /// with shortest round-trip precision).
    pub fn save(&self, path: &Path) -> Result<()> {
        #[derive(Serialize)]
        struct File<'a> {
            version: u32,
            model: &'a Mlp,
        }
        let text = serde_json::to_string(&File {
            version: CHECKPOINT_VERSION,
            model: self,
        })
        .expect("checkpoint serialization cannot fail");
        if let Some(dir) = path.parent() {
            if !dir.as_os_str().is_empty() {
                fs::create_dir_all(dir).map_err(Error::io(dir))?;
            }
        }
        fs::write(path, text).map_err(Error::io(path))
    }

    pub fn load(path: &Path) -> Result<Mlp> {
        #[derive(Deserialize)]
        struct File {
            version: u32,
            model: Mlp,
        }
        let text = fs::read_to_string(path).map_err(Error::io(path))?;
        let file: File = serde_json::from_str(&text)
            .map_err(|e| Error::file_format(path, format!("bad checkpoint: {e}")))?;
        if file.version != CHECKPOINT_VERSION {
            return Err(Error::file_format(
                path,
                format!(
                    "checkpoint version {} not supported (expected {CHECKPOINT_VERSION})",
                    file.version
                ),
            ));
        }
        file.model.spec.validate()?;
        Ok(file.model)
    }
}

/// Initialize parameters uniformly in `[-1/sqrt(fan_in), +1/sqrt(fan_in)]`
/// per layer (weights first, then biases, layer by layer — the draw order is
/// part of the determinism contract).
pub fn init_mlp(spec: &MlpSpec, seed: u64) -> Result<Mlp> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut layers = Vec::new();
    for (in_dim, out_dim) in spec.layer_dims() {
        let bound = 1.0 / (in_dim as f64).sqrt();
        let weights = (0..in_dim * out_dim)
            .map(|_| rng.gen_range(-bound..bound))
            .collect();
        let biases = (0..out_dim).map(|_| rng.gen_range(-bound..bound)).collect();
        layers.push(Layer {
            weights,
            biases,
            in_dim,
            out_dim,
        });
    }
    Ok(Mlp {
        spec: spec.clone(),
        layers,
        standardizer: None,
        rng_seed: seed,
    })
}

/// Parameter-shaped accumulator: gradients, momentum buffers.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Gradients {
    pub layers: Vec<LayerGrads>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerGrads {
    pub weights: Vec<f64>,
    pub biases: Vec<f64>,
}

impl Gradients {
    pub fn zeros_like(mlp: &Mlp) -> Self {
        Gradients {
            layers: mlp
                .layers
                .iter()
                .map(|l| LayerGrads {
                    weights: vec![0.0; l.weights.len()],
                    biases: vec![0.0; l.biases.len()],
                })
                .collect(),
        }
    }

    /// `self += scale * other` (shapes must match).
    pub fn add_scaled(&mut self, other: &Gradients, scale: f64) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            for (x, y) in a.weights.iter_mut().zip(&b.weights) {
                *x += scale * y;
            }
            for (x, y) in a.biases.iter_mut().zip(&b.biases) {
                *x += scale * y;
            }
        }
    }

    /// Largest absolute entry (diagnostics).
    pub fn max_abs(&self) -> f64 {
        self.layers
            .iter()
            .flat_map(|l| l.weights.iter().chain(&l.biases))
            .fold(0.0, |m, &x| m.max(x.abs()))
    }
}

/// Per-layer forward state of one batch, kept for the backward passes.
pub(crate) struct ForwardCache {
    /// `activations[0]` is the (standardized) input batch; `activations[l]`
    /// the output of hidden layer `l`. All row-major `batch x dim`.
    pub activations: Vec<Vec<f64>>,
    /// `preacts[l]` is `z_{l+1}`, the affine output of layer `l+1`.
    pub preacts: Vec<Vec<f64>>,
    pub batch: usize,
}

impl ForwardCache {
    pub fn logits(&self) -> &[f64] {
        self.preacts.last().expect("network has at least one layer")
    }
}

fn check_input_shape(mlp: &Mlp, x: &[f64]) -> Result<usize> {
    let d = mlp.spec.input_dim;
    if x.is_empty() || x.len() % d != 0 {
        return Err(Error::shape(
            "forward",
            format!("a non-empty batch of rows with {d} features"),
            format!("{} values", x.len()),
        ));
    }
    Ok(x.len() / d)
}

pub(crate) fn forward_cached(mlp: &Mlp, x: &[f64]) -> Result<ForwardCache> {
    let batch = check_input_shape(mlp, x)?;
    let d = mlp.spec.input_dim;

    let a0 = match &mlp.standardizer {
        Some(std) => {
            let mut out = vec![0.0; x.len()];
            for (row_out, row_in) in out.chunks_exact_mut(d).zip(x.chunks_exact(d)) {
                std.apply(row_in, row_out);
            }
            out
        }
        None => x.to_vec(),
    };

    let mut activations = vec![a0];
    let mut preacts = Vec::with_capacity(mlp.depth());
    for (l, layer) in mlp.layers.iter().enumerate() {
        let input = activations.last().unwrap();
        let mut z = vec![0.0; batch * layer.out_dim];
        for (zrow, arow) in z
            .chunks_exact_mut(layer.out_dim)
            .zip(input.chunks_exact(layer.in_dim))
        {
            layer.affine(arow, zrow);
        }
        let last = l + 1 == mlp.depth();
        if !last {
            let act: Vec<f64> = z.iter().map(|&v| mlp.spec.activation.apply(v)).collect();
            activations.push(act);
        }
        preacts.push(z);
    }
    Ok(ForwardCache {
        activations,
        preacts,
        batch,
    })
}

/// Logits for a row-major batch `x` (`batch x input_dim` -> `batch x
/// output_dim`). Pure function of the model and input.
pub fn forward(mlp: &Mlp, x: &[f64]) -> Result<Vec<f64>> {
    let mut cache = forward_cached(mlp, x)?;
    Ok(cache.preacts.pop().expect("at least one layer"))
}

fn check_loss_shapes(
    logits: &[f64],
    labels: &[usize],
    weights: Option<&[f64]>,
) -> Result<usize> {
    if labels.is_empty() || logits.len() % labels.len() != 0 {
        return Err(Error::shape(
            "ce_loss",
            format!("logits for {} rows", labels.len()),
            format!("{} logit values", logits.len()),
        ));
    }
    let k = logits.len() / labels.len();
    if k < 2 {
        return Err(Error::invalid(
            "ce_loss",
            format!("classification needs at least 2 classes, got output_dim {k}"),
        ));
    }
    for &y in labels {
        if y >= k {
            return Err(Error::LabelOutOfRange {
                label: y,
                num_classes: k,
            });
        }
    }
    if let Some(w) = weights {
        if w.len() != labels.len() {
            return Err(Error::shape(
                "ce_loss",
                format!("{} sample weights", labels.len()),
                format!("{}", w.len()),
            ));
        }
        let mut total = 0.0;
        for &wi in w {
            if !wi.is_finite() || wi < 0.0 {
                return Err(Error::invalid(
                    "sample weights",
                    format!("weights must be finite and >= 0, got {wi}"),
                ));
            }
            total += wi;
        }
        if total <= 0.0 {
            return Err(Error::invalid("sample weights", "weights sum to zero"));
        }
    }
    Ok(k)
}

/// Stable log-softmax pieces for one row: returns (max, log-sum-exp).
#[inline]
fn log_sum_exp(row: &[f64]) -> (f64, f64) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = row.iter().map(|&z| (z - max).exp()).sum();
    (max, sum.ln())
}

/// Weighted mean cross-entropy: `sum_i w_i * (-log softmax(z_i)[y_i]) / sum_i
/// w_i`. `weights = None` means uniform.
pub fn ce_loss(logits: &[f64], labels: &[usize], weights: Option<&[f64]>) -> Result<f64> {
    let k = check_loss_shapes(logits, labels, weights)?;
    let mut total = 0.0;
    let mut weight_sum = 0.0;
    for (i, (row, &y)) in logits.chunks_exact(k).zip(labels).enumerate() {
        let w = weights.map_or(1.0, |w| w[i]);
        let (max, lse) = log_sum_exp(row);
        total += w * (lse - (row[y] - max));
        weight_sum += w;
    }
    Ok(total / weight_sum)
}

/// Gradients of [`ce_loss`] with respect to every parameter, plus the loss
/// itself. Runs its own forward pass on `x`.
pub(crate) fn backward_with_loss(
    mlp: &Mlp,
    x: &[f64],
    labels: &[usize],
    weights: Option<&[f64]>,
) -> Result<(f64, Gradients)> {
    let cache = forward_cached(mlp, x)?;
    let k = mlp.spec.output_dim;
    if labels.len() != cache.batch {
        return Err(Error::shape(
            "backward",
            format!("{} labels", cache.batch),
            format!("{}", labels.len()),
        ));
    }
    check_loss_shapes(cache.logits(), labels, weights)?;

    let weight_sum: f64 = weights.map_or(cache.batch as f64, |w| w.iter().sum());
    let mut loss = 0.0;
    // d(loss)/d(logits): (w_i / sum(w)) * (softmax(z_i) - onehot(y_i)).
    let mut cotangents = vec![0.0; cache.batch * k];
    for (i, (row, &y)) in cache.logits().chunks_exact(k).zip(labels).enumerate() {
        let w = weights.map_or(1.0, |w| w[i]) / weight_sum;
        let (max, lse) = log_sum_exp(row);
        loss += w * (lse - (row[y] - max));
        let out = &mut cotangents[i * k..(i + 1) * k];
        for (o, &z) in out.iter_mut().zip(row) {
            *o = w * (z - max - lse).exp();
        }
        out[y] -= w;
    }
    let grads = backward_from_cotangents(mlp, &cache, &cotangents);
    Ok((loss, grads))
}

/// Gradients of [`ce_loss`] with respect to every parameter (same shapes as
/// the parameters).
pub fn backward(
    mlp: &Mlp,
    x: &[f64],
    labels: &[usize],
    weights: Option<&[f64]>,
) -> Result<Gradients> {
    backward_with_loss(mlp, x, labels, weights).map(|(_, g)| g)
}

/// Reverse pass from output cotangents (`batch x output_dim`,
/// `d(scalar)/d(logits)`) to parameter gradients. Shared by the loss backward
/// and the finite-difference penalty path.
pub(crate) fn backward_from_cotangents(
    mlp: &Mlp,
    cache: &ForwardCache,
    cotangents: &[f64],
) -> Gradients {
    let mut grads: Vec<LayerGrads> = mlp
        .layers
        .iter()
        .map(|l| LayerGrads {
            weights: vec![0.0; l.weights.len()],
            biases: vec![0.0; l.biases.len()],
        })
        .collect();

    let depth = mlp.depth();
    // u = d(scalar)/d(z_l) for the current layer, per batch row.
    let mut u: Vec<f64> = cotangents.to_vec();
    for l in (0..depth).rev() {
        let layer = &mlp.layers[l];
        let input = &cache.activations[l];
        {
            let g = &mut grads[l];
            for (urow, arow) in u
                .chunks_exact(layer.out_dim)
                .zip(input.chunks_exact(layer.in_dim))
            {
                for (o, &uo) in urow.iter().enumerate() {
                    if uo == 0.0 {
                        continue;
                    }
                    let wrow = &mut g.weights[o * layer.in_dim..(o + 1) * layer.in_dim];
                    for (w, &a) in wrow.iter_mut().zip(arow) {
                        *w += uo * a;
                    }
                    g.biases[o] += uo;
                }
            }
        }
        if l == 0 {
            break;
        }
        // u_{l-1} = phi'(z_{l-1}) .* (W_l^T u_l)
        let prev_z = &cache.preacts[l - 1];
        let mut prev_u = vec![0.0; cache.batch * layer.in_dim];
        for ((urow, prow), zrow) in u
            .chunks_exact(layer.out_dim)
            .zip(prev_u.chunks_exact_mut(layer.in_dim))
            .zip(prev_z.chunks_exact(layer.in_dim))
        {
            layer.transpose_apply(urow, prow);
            for (p, &z) in prow.iter_mut().zip(zrow) {
                *p *= mlp.spec.activation.derivative(z);
            }
        }
        u = prev_u;
    }
    Gradients { layers: grads }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(input: usize, hidden: &[usize], output: usize, activation: Activation) -> MlpSpec {
        MlpSpec {
            input_dim: input,
            hidden_widths: hidden.to_vec(),
            output_dim: output,
            activation,
            input_batchnorm: false,
        }
    }

    #[test]
    fn init_is_deterministic_in_seed() {
        let s = spec(2, &[4], 2, Activation::Relu);
        let a = init_mlp(&s, 7).unwrap();
        let b = init_mlp(&s, 7).unwrap();
        assert_eq!(a, b);
        let c = init_mlp(&s, 8).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn init_respects_fan_in_bounds() {
        let s = spec(16, &[8], 4, Activation::Tanh);
        let mlp = init_mlp(&s, 3).unwrap();
        let bounds = [1.0 / 4.0, 1.0 / (8.0f64).sqrt()];
        for (layer, bound) in mlp.layers.iter().zip(bounds) {
            for &w in layer.weights.iter().chain(&layer.biases) {
                assert!(w.abs() <= bound, "{w} exceeds fan-in bound {bound}");
            }
        }
    }

    #[test]
    fn empty_hidden_widths_give_single_linear_layer() {
        let s = spec(3, &[], 2, Activation::Relu);
        let mlp = init_mlp(&s, 0).unwrap();
        assert_eq!(mlp.layers.len(), 1);
        assert_eq!(mlp.layers[0].in_dim, 3);
        assert_eq!(mlp.layers[0].out_dim, 2);
    }

    #[test]
    fn param_count_closed_form() {
        let s = spec(2, &[256, 256, 256], 2, Activation::Relu);
        let expected = 2 * 256 + 256 + 2 * (256 * 256 + 256) + 256 * 2 + 2;
        assert_eq!(s.param_count(), expected);
        assert_eq!(init_mlp(&s, 0).unwrap().param_count(), expected);
    }

    #[test]
    fn zero_width_layer_rejected() {
        let s = spec(2, &[4, 0, 4], 2, Activation::Relu);
        assert!(init_mlp(&s, 0).is_err());
    }

    #[test]
    fn zero_network_gives_zero_logits() {
        let s = spec(3, &[4], 2, Activation::Relu);
        let mut mlp = init_mlp(&s, 1).unwrap();
        for layer in mlp.layers.iter_mut() {
            layer.weights.fill(0.0);
            layer.biases.fill(0.0);
        }
        let out = forward(&mlp, &[1.0, -2.0, 3.0, 0.5, 0.5, 0.5]).unwrap();
        assert_eq!(out, vec![0.0; 4]);
    }

    #[test]
    fn single_linear_layer_is_affine() {
        let s = spec(2, &[], 2, Activation::Relu);
        let mut mlp = init_mlp(&s, 1).unwrap();
        mlp.layers[0].weights = vec![1.0, 2.0, -3.0, 0.5]; // rows: [1,2], [-3,0.5]
        mlp.layers[0].biases = vec![0.25, -1.0];
        let out = forward(&mlp, &[2.0, 3.0]).unwrap();
        assert_eq!(out, vec![2.0 + 6.0 + 0.25, -6.0 + 1.5 - 1.0]);
    }

    #[test]
    fn forward_matches_scalar_reference_on_tanh_net() {
        // Independent oracle: naive per-neuron evaluation with nested loops.
        let s = spec(3, &[5, 4], 2, Activation::Tanh);
        let mlp = init_mlp(&s, 42).unwrap();
        let xs: Vec<f64> = (0..9).map(|i| (i as f64) * 0.3 - 1.2).collect();
        let got = forward(&mlp, &xs).unwrap();
        for (row_idx, x) in xs.chunks_exact(3).enumerate() {
            let mut a: Vec<f64> = x.to_vec();
            for (li, layer) in mlp.layers.iter().enumerate() {
                let mut next = vec![0.0; layer.out_dim];
                for o in 0..layer.out_dim {
                    let mut acc = layer.biases[o];
                    for (i, &ai) in a.iter().enumerate() {
                        acc += layer.weights[o * layer.in_dim + i] * ai;
                    }
                    next[o] = if li + 1 < mlp.layers.len() { acc.tanh() } else { acc };
                }
                a = next;
            }
            for (k, &expect) in a.iter().enumerate() {
                let actual = got[row_idx * 2 + k];
                assert!(
                    (actual - expect).abs() < 1e-12,
                    "row {row_idx} logit {k}: {actual} vs {expect}"
                );
            }
        }
    }

    #[test]
    fn forward_rejects_wrong_width() {
        let s = spec(3, &[4], 2, Activation::Relu);
        let mlp = init_mlp(&s, 0).unwrap();
        assert!(forward(&mlp, &[1.0, 2.0]).is_err());
        assert!(forward(&mlp, &[]).is_err());
    }

    #[test]
    fn ce_loss_uniform_logits_is_ln_k() {
        let logits = vec![0.7; 8]; // 2 rows, 4 classes, all equal
        let loss = ce_loss(&logits, &[0, 3], None).unwrap();
        assert!((loss - (4.0f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn ce_loss_saturates_to_zero_on_confident_correct() {
        let logits = vec![100.0, 0.0, 0.0, 100.0];
        let loss = ce_loss(&logits, &[0, 1], None).unwrap();
        assert!(loss < 1e-12, "loss {loss}");
    }

    #[test]
    fn ce_loss_matches_brute_force_with_weights() {
        let logits = vec![0.3, -0.2, 1.5, 0.9];
        let labels = [1usize, 0];
        let weights = [1.0, 2.0];
        let loss = ce_loss(&logits, &labels, Some(&weights)).unwrap();
        let mut expect = 0.0;
        for i in 0..2 {
            let row = &logits[i * 2..(i + 1) * 2];
            let p = row[labels[i]].exp() / (row[0].exp() + row[1].exp());
            expect += weights[i] * -p.ln();
        }
        expect /= 3.0;
        assert!((loss - expect).abs() < 1e-12, "{loss} vs {expect}");
    }

    #[test]
    fn ce_loss_rejects_bad_labels_and_weights() {
        let logits = vec![0.0; 4];
        assert!(matches!(
            ce_loss(&logits, &[2, 0], None),
            Err(Error::LabelOutOfRange { .. })
        ));
        assert!(ce_loss(&logits, &[0, 0], Some(&[0.0, 0.0])).is_err());
        assert!(ce_loss(&logits, &[0, 0], Some(&[-1.0, 1.0])).is_err());
        // Four logits with one label is legitimate: a single row with K = 4.
        assert!(ce_loss(&logits, &[0], None).is_ok());
        // But a count that does not divide evenly is not.
        assert!(ce_loss(&logits[..3], &[0, 0], None).is_err());
    }

    #[test]
    fn linear_softmax_gradient_closed_form() {
        // Single linear layer, one sample: dL/dW = (softmax(z) - onehot(y)) ⊗ x.
        let s = spec(3, &[], 2, Activation::Relu);
        let mlp = init_mlp(&s, 5).unwrap();
        let x = [0.5, -1.0, 2.0];
        let y = 1usize;
        let grads = backward(&mlp, &x, &[y], None).unwrap();
        let z = forward(&mlp, &x).unwrap();
        let (max, lse) = log_sum_exp(&z);
        let p: Vec<f64> = z.iter().map(|&v| (v - max - lse).exp()).collect();
        for o in 0..2 {
            let coeff = p[o] - if o == y { 1.0 } else { 0.0 };
            for i in 0..3 {
                let expect = coeff * x[i];
                let got = grads.layers[0].weights[o * 3 + i];
                assert!((got - expect).abs() < 1e-12, "{got} vs {expect}");
            }
            assert!((grads.layers[0].biases[o] - coeff).abs() < 1e-12);
        }
    }

    #[test]
    fn weight_two_equals_duplicated_sample() {
        let s = spec(2, &[4], 3, Activation::Tanh);
        let mlp = init_mlp(&s, 9).unwrap();
        let x2 = [0.3, -0.7, 1.1, 0.2];
        let weighted = backward(&mlp, &x2, &[2, 0], Some(&[1.0, 2.0])).unwrap();
        let x3 = [0.3, -0.7, 1.1, 0.2, 1.1, 0.2];
        let duplicated = backward(&mlp, &x3, &[2, 0, 0], None).unwrap();
        for (a, b) in weighted.layers.iter().zip(&duplicated.layers) {
            for (x, y) in a.weights.iter().zip(&b.weights) {
                assert!((x - y).abs() < 1e-12, "{x} vs {y}");
            }
            for (x, y) in a.biases.iter().zip(&b.biases) {
                assert!((x - y).abs() < 1e-12, "{x} vs {y}");
            }
        }
    }

    #[test]
    fn checkpoint_round_trip_is_exact() {
        let dir = std::env::temp_dir().join(format!("mlp-ckpt-{}", std::process::id()));
        fs::create_dir_all(&dir).unwrap();
        let path = dir.join("model.json");
        let s = MlpSpec {
            input_dim: 2,
            hidden_widths: vec![5, 3],
            output_dim: 2,
            activation: Activation::Softplus,
            input_batchnorm: true,
        };
        let mut mlp = init_mlp(&s, 11).unwrap();
        mlp.standardizer = Some(Standardizer::fit(&[0.0, 1.0, 2.0, 5.0, 4.0, 9.0], 2));
        mlp.save(&path).unwrap();
        let back = Mlp::load(&path).unwrap();
        assert_eq!(back, mlp);
        fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn checkpoint_rejects_unknown_version() {
        let dir = std::env::temp_dir().join(format!("mlp-badver-{}", std::process::id()));
        fs::create_dir_all(&dir).unwrap();
        let path = dir.join("model.json");
        let s = spec(2, &[], 2, Activation::Relu);
        init_mlp(&s, 0).unwrap().save(&path).unwrap();
        let text = fs::read_to_string(&path)
            .unwrap()
            .replacen("\"version\":1", "\"version\":99", 1);
        fs::write(&path, text).unwrap();
        assert!(Mlp::load(&path).is_err());
        fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn spec_serialization_round_trips() {
        let s = MlpSpec {
            input_dim: 7,
            hidden_widths: vec![64, 64],
            output_dim: 3,
            activation: Activation::Softplus,
            input_batchnorm: true,
        };
        let json = serde_json::to_string(&s).unwrap();
        let back: MlpSpec = serde_json::from_str(&json).unwrap();
        assert_eq!(back, s);
    }
}
