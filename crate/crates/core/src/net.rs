//! Dense networks over flat parameter vectors.
//!
//! Parameters are laid out layer by layer; each layer stores its weight
//! matrix row-major as `(output, input)` followed by its bias vector. Row `i`
//! of the last layer's weight matrix is therefore contiguous, which is what
//! lets classifier rows be lifted in and out as prototypes.

use std::ops::Range;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gauss::{DiagonalGaussian, SIGMA_MIN};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Identity,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub input: usize,
    pub output: usize,
    pub activation: Activation,
}

impl LayerSpec {
    pub fn new(input: usize, output: usize, activation: Activation) -> Self {
        Self {
            input,
            output,
            activation,
        }
    }

    fn param_count(&self) -> usize {
        self.output * (self.input + 1)
    }
}

/// Shape of a dense network: a chain of layers.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetworkSpec {
    layers: Vec<LayerSpec>,
}

impl NetworkSpec {
    pub fn new(layers: Vec<LayerSpec>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Validation("network needs at least one layer".into()));
        }
        for (i, l) in layers.iter().enumerate() {
            if l.input == 0 || l.output == 0 {
                return Err(Error::Validation(format!("layer {i} has a zero width")));
            }
            if i > 0 && layers[i - 1].output != l.input {
                return Err(Error::dims("layer chaining", layers[i - 1].output, l.input));
            }
        }
        Ok(Self { layers })
    }

    /// A ReLU feature extractor `input -> hidden[0] -> ... -> hidden[n-1]`.
    pub fn mlp(input: usize, hidden: &[usize]) -> Result<Self> {
        let mut layers = Vec::with_capacity(hidden.len());
        let mut width = input;
        for &h in hidden {
            layers.push(LayerSpec::new(width, h, Activation::Relu));
            width = h;
        }
        Self::new(layers)
    }

    /// This network followed by an identity-activated linear head with
    /// `outputs` rows.
    pub fn with_head(&self, outputs: usize) -> Result<Self> {
        let mut layers = self.layers.clone();
        layers.push(LayerSpec::new(self.output_width(), outputs, Activation::Identity));
        Self::new(layers)
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn input_width(&self) -> usize {
        self.layers[0].input
    }

    pub fn output_width(&self) -> usize {
        self.layers[self.layers.len() - 1].output
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(LayerSpec::param_count).sum()
    }

    /// Flat-vector ranges of layer `index`'s weight matrix and bias.
    pub fn layer_ranges(&self, index: usize) -> (Range<usize>, Range<usize>) {
        let start: usize = self.layers[..index].iter().map(LayerSpec::param_count).sum();
        let l = &self.layers[index];
        let w_end = start + l.output * l.input;
        (start..w_end, w_end..w_end + l.output)
    }

    /// Glorot-uniform weights and zero biases.
    pub fn init_weights(&self, seed: u64) -> PointWeights {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut values = Vec::with_capacity(self.param_count());
        for l in &self.layers {
            let bound = (6.0 / (l.input + l.output) as f64).sqrt();
            values.extend((0..l.input * l.output).map(|_| rng.random_range(-bound..bound)));
            values.extend(std::iter::repeat_n(0.0, l.output));
        }
        PointWeights { values }
    }

    fn check_weights(&self, len: usize) -> Result<()> {
        if len != self.param_count() {
            return Err(Error::dims("network weights", self.param_count(), len));
        }
        Ok(())
    }

    fn check_features(&self, features: &ArrayView2<f64>) -> Result<()> {
        if features.ncols() != self.input_width() {
            return Err(Error::dims("network input", self.input_width(), features.ncols()));
        }
        Ok(())
    }
}

/// Point-valued network parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PointWeights {
    values: Vec<f64>,
}

impl PointWeights {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Validation(format!("non-finite weight at index {i}")));
        }
        Ok(Self { values })
    }

    pub fn zeros(len: usize) -> Self {
        Self {
            values: vec![0.0; len],
        }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }
}

pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

pub fn inverse_softplus(y: f64) -> f64 {
    y + (-(-y).exp_m1()).ln()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Mean-field variational parameters: `sigma = softplus(rho)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariationalParams {
    mean: Vec<f64>,
    rho: Vec<f64>,
}

impl VariationalParams {
    pub fn new(mean: Vec<f64>, rho: Vec<f64>) -> Result<Self> {
        if mean.len() != rho.len() {
            return Err(Error::dims("variational rho", mean.len(), rho.len()));
        }
        if mean.iter().chain(&rho).any(|v| !v.is_finite()) {
            return Err(Error::Validation("non-finite variational parameter".into()));
        }
        Ok(Self { mean, rho })
    }

    /// Means taken from `weights`, every stddev equal to `sigma`.
    pub fn from_point(weights: &[f64], sigma: f64) -> Self {
        Self {
            mean: weights.to_vec(),
            rho: vec![inverse_softplus(sigma); weights.len()],
        }
    }

    pub fn from_gaussian(g: &DiagonalGaussian) -> Self {
        Self {
            mean: g.mean().to_vec(),
            rho: g.stddev().iter().map(|&s| inverse_softplus(s)).collect(),
        }
    }

    pub fn to_gaussian(&self) -> DiagonalGaussian {
        let stddev = self.rho.iter().map(|&r| softplus(r).max(SIGMA_MIN)).collect();
        DiagonalGaussian::new(self.mean.clone(), stddev)
            .expect("variational parameters are finite and floored")
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn rho(&self) -> &[f64] {
        &self.rho
    }

    pub fn sigma(&self) -> Vec<f64> {
        self.rho.iter().map(|&r| softplus(r)).collect()
    }

    pub fn len(&self) -> usize {
        self.mean.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mean.is_empty()
    }

    pub fn into_parts(self) -> (Vec<f64>, Vec<f64>) {
        (self.mean, self.rho)
    }

    /// Appends `other`'s coordinates after this one's.
    pub fn concat(&self, other: &VariationalParams) -> Self {
        let mut mean = self.mean.clone();
        mean.extend_from_slice(&other.mean);
        let mut rho = self.rho.clone();
        rho.extend_from_slice(&other.rho);
        Self { mean, rho }
    }

    /// Coordinates `range` as standalone parameters.
    pub fn slice(&self, range: Range<usize>) -> Self {
        Self {
            mean: self.mean[range.clone()].to_vec(),
            rho: self.rho[range].to_vec(),
        }
    }
}

/// Shared-model parameters in either phase.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum ModelParams {
    Point(PointWeights),
    Variational(VariationalParams),
}

impl ModelParams {
    pub fn len(&self) -> usize {
        match self {
            ModelParams::Point(w) => w.len(),
            ModelParams::Variational(q) => q.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Point weights, or the posterior mean for a variational model.
    pub fn evaluation_weights(&self) -> &[f64] {
        match self {
            ModelParams::Point(w) => w.values(),
            ModelParams::Variational(q) => q.mean(),
        }
    }

    pub fn is_variational(&self) -> bool {
        matches!(self, ModelParams::Variational(_))
    }
}

/// Features with class-position labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    features: Array2<f64>,
    labels: Vec<usize>,
}

impl Batch {
    pub fn new(features: Array2<f64>, labels: Vec<usize>) -> Result<Self> {
        if features.nrows() != labels.len() {
            return Err(Error::dims("batch labels", features.nrows(), labels.len()));
        }
        Ok(Self { features, labels })
    }

    pub fn features(&self) -> &Array2<f64> {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Rows `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> Batch {
        Batch {
            features: self.features.select(Axis(0), indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
        }
    }

    /// Shuffles rows with `seed` and cuts them into chunks of at most `size`.
    pub fn minibatches(&self, size: usize, seed: u64) -> Vec<Batch> {
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        order.chunks(size.max(1)).map(|c| self.select(c)).collect()
    }
}

fn layer_view<'a>(
    spec: &NetworkSpec,
    weights: &'a [f64],
    index: usize,
) -> (ArrayView2<'a, f64>, &'a [f64]) {
    let (wr, br) = spec.layer_ranges(index);
    let l = spec.layers[index];
    let w = ArrayView2::from_shape((l.output, l.input), &weights[wr]).expect("layer shape");
    (w, &weights[br])
}

/// Post-activation outputs of every layer, input first and logits last.
fn forward_trace(spec: &NetworkSpec, weights: &[f64], features: ArrayView2<f64>) -> Vec<Array2<f64>> {
    let mut trace = Vec::with_capacity(spec.layers.len() + 1);
    trace.push(features.to_owned());
    for (i, layer) in spec.layers.iter().enumerate() {
        let (w, b) = layer_view(spec, weights, i);
        let mut z = trace[i].dot(&w.t());
        z += &ArrayView2::from_shape((1, b.len()), b).expect("bias shape");
        if layer.activation == Activation::Relu {
            z.mapv_inplace(|v| v.max(0.0));
        }
        trace.push(z);
    }
    trace
}

pub fn forward(spec: &NetworkSpec, weights: &[f64], features: ArrayView2<f64>) -> Result<Array2<f64>> {
    spec.check_weights(weights.len())?;
    spec.check_features(&features)?;
    Ok(forward_trace(spec, weights, features).pop().expect("non-empty trace"))
}

fn log_softmax_row(row: ndarray::ArrayView1<f64>) -> Array1<f64> {
    let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    row.mapv(|v| v - lse)
}

/// Mean softmax cross-entropy over `batch` and its gradient with respect
/// to every weight.
pub fn cross_entropy_grad(spec: &NetworkSpec, weights: &[f64], batch: &Batch) -> Result<(f64, Vec<f64>)> {
    spec.check_weights(weights.len())?;
    spec.check_features(&batch.features.view())?;
    let width = spec.output_width();
    if let Some(&label) = batch.labels.iter().find(|&&l| l >= width) {
        return Err(Error::LabelOutOfRange { label, width });
    }
    if batch.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let n = batch.len() as f64;
    let trace = forward_trace(spec, weights, batch.features.view());
    let logits = &trace[trace.len() - 1];

    let mut loss = 0.0;
    let mut delta = Array2::<f64>::zeros(logits.raw_dim());
    for (r, (row, &label)) in logits.outer_iter().zip(&batch.labels).enumerate() {
        let logp = log_softmax_row(row);
        loss -= logp[label];
        for (c, lp) in logp.iter().enumerate() {
            delta[(r, c)] = lp.exp() / n;
        }
        delta[(r, label)] -= 1.0 / n;
    }
    loss /= n;

    let mut grad = vec![0.0; weights.len()];
    for i in (0..spec.layers.len()).rev() {
        let (wr, br) = spec.layer_ranges(i);
        let input = &trace[i];
        let gw = delta.t().dot(input);
        grad[wr].copy_from_slice(gw.as_slice().expect("standard layout"));
        let gb = delta.sum_axis(Axis(0));
        grad[br].copy_from_slice(gb.as_slice().expect("standard layout"));
        if i > 0 {
            let (w, _) = layer_view(spec, weights, i);
            let mut back = delta.dot(&w);
            if spec.layers[i - 1].activation == Activation::Relu {
                back.zip_mut_with(input, |d, &a| {
                    if a <= 0.0 {
                        *d = 0.0
                    }
                });
            }
            delta = back;
        }
    }
    Ok((loss, grad))
}

/// Objective and reparameterization-path gradients of one Bayes-by-Backprop step.
#[derive(Debug, Clone, PartialEq)]
pub struct BbbGrad {
    pub objective: f64,
    pub grad_mean: Vec<f64>,
    pub grad_rho: Vec<f64>,
}

/// `kl_weight * KL(q || prior) + CE(w)` at the sample `w = mean + softplus(rho) * noise`.
pub fn bbb_grad(
    spec: &NetworkSpec,
    q: &VariationalParams,
    prior: &DiagonalGaussian,
    batch: &Batch,
    kl_weight: f64,
    noise: &[f64],
) -> Result<BbbGrad> {
    let n = q.len();
    spec.check_weights(n)?;
    if prior.len() != n {
        return Err(Error::dims("bbb prior", n, prior.len()));
    }
    if noise.len() != n {
        return Err(Error::dims("bbb noise", n, noise.len()));
    }
    if !(kl_weight >= 0.0 && kl_weight.is_finite()) {
        return Err(Error::Validation(format!("kl weight must be >= 0, got {kl_weight}")));
    }
    let sigma = q.sigma();
    let w: Vec<f64> = (0..n).map(|i| q.mean[i] + sigma[i] * noise[i]).collect();
    let (ce, g) = cross_entropy_grad(spec, &w, batch)?;

    let mut kl = 0.0;
    let mut grad_mean = Vec::with_capacity(n);
    let mut grad_rho = Vec::with_capacity(n);
    let (pm, ps) = (prior.mean(), prior.stddev());
    for i in 0..n {
        let (sq, sp) = (sigma[i], ps[i]);
        let d = q.mean[i] - pm[i];
        let vp = sp * sp;
        kl += (sp / sq).ln() + (sq * sq + d * d) / (2.0 * vp) - 0.5;
        let dsig = sigmoid(q.rho[i]);
        grad_mean.push(g[i] + kl_weight * d / vp);
        grad_rho.push((g[i] * noise[i] + kl_weight * (sq / vp - 1.0 / sq)) * dsig);
    }
    Ok(BbbGrad {
        objective: kl_weight * kl + ce,
        grad_mean,
        grad_rho,
    })
}

/// Plain SGD settings shared by both trainers.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SgdConfig {
    pub lr: f64,
    pub epochs: usize,
}

impl SgdConfig {
    fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Validation(format!("learning rate must be >= 0, got {}", self.lr)));
        }
        Ok(())
    }
}

fn epoch_orders(batches: usize, epochs: usize, seed: u64) -> impl Iterator<Item = Vec<usize>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..epochs).map(move |_| {
        let mut order: Vec<usize> = (0..batches).collect();
        order.shuffle(&mut rng);
        order
    })
}

/// SGD on cross-entropy over `epochs` passes through `batches`, visiting the
/// batches in a seed-determined order each epoch.
pub fn train_local_snn(
    spec: &NetworkSpec,
    init: &PointWeights,
    batches: &[Batch],
    sgd: SgdConfig,
    seed: u64,
) -> Result<PointWeights> {
    train_snn_from(spec, init, batches, sgd, seed, 0)
}

/// SGD that only updates parameters at indices `>= trainable_from`.
pub(crate) fn train_snn_from(
    spec: &NetworkSpec,
    init: &PointWeights,
    batches: &[Batch],
    sgd: SgdConfig,
    seed: u64,
    trainable_from: usize,
) -> Result<PointWeights> {
    sgd.validate()?;
    spec.check_weights(init.len())?;
    let mut w = init.values.clone();
    let mut step = 0;
    for order in epoch_orders(batches.len(), sgd.epochs, seed) {
        for b in order {
            let (loss, g) = cross_entropy_grad(spec, &w, &batches[b])?;
            if !loss.is_finite() {
                return Err(Error::TrainingDiverged { step, loss });
            }
            for (wi, gi) in w[trainable_from..].iter_mut().zip(&g[trainable_from..]) {
                *wi -= sgd.lr * gi;
            }
            step += 1;
        }
    }
    PointWeights::new(w).map_err(|_| Error::TrainingDiverged {
        step,
        loss: f64::NAN,
    })
}

/// Bayes by Backprop: SGD on the reparameterized objective averaged over
/// `mc_samples` noise draws, with the KL term weighted by one over the number
/// of minibatches per epoch.
///
/// The step on each mean coordinate is capped at `prior_var / kl_weight`, the
/// inverse curvature of its KL term, so the update stays stable however
/// concentrated the prior becomes. Every updated stddev is held strictly
/// below the prior's (precision at least `p * (1 + 1e-6) + 1e-6`), which
/// keeps the prior divisible out of the result on every coordinate.
pub fn train_local_bnn(
    spec: &NetworkSpec,
    init: &VariationalParams,
    prior: &DiagonalGaussian,
    batches: &[Batch],
    sgd: SgdConfig,
    mc_samples: usize,
    seed: u64,
) -> Result<VariationalParams> {
    train_bnn_from(spec, init, prior, batches, sgd, mc_samples, seed, 0)
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn train_bnn_from(
    spec: &NetworkSpec,
    init: &VariationalParams,
    prior: &DiagonalGaussian,
    batches: &[Batch],
    sgd: SgdConfig,
    mc_samples: usize,
    seed: u64,
    trainable_from: usize,
) -> Result<VariationalParams> {
    sgd.validate()?;
    spec.check_weights(init.len())?;
    if mc_samples == 0 {
        return Err(Error::Validation("mc_samples must be at least 1".into()));
    }
    if batches.is_empty() {
        return Ok(init.clone());
    }
    let n = init.len();
    let kl_weight = 1.0 / batches.len() as f64;
    // The KL pull on mean i has curvature kl_weight / prior_var_i; a step
    // larger than its inverse oscillates and diverges under tight priors.
    let mean_lr: Vec<f64> = prior
        .stddev()
        .iter()
        .map(|s| sgd.lr.min(s * s / kl_weight))
        .collect();
    let rho_cap: Vec<f64> = prior
        .precision()
        .iter()
        .map(|p| inverse_softplus((p * (1.0 + 1e-6) + 1e-6).powf(-0.5)))
        .collect();
    let mut q = init.clone();
    let mut noise_rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    let mut noise = vec![0.0; n];
    let mut step = 0;
    for order in epoch_orders(batches.len(), sgd.epochs, seed) {
        for b in order {
            let mut gm = vec![0.0; n];
            let mut gr = vec![0.0; n];
            let mut objective = 0.0;
            for _ in 0..mc_samples {
                noise.iter_mut().for_each(|e| *e = noise_rng.sample(StandardNormal));
                let g = bbb_grad(spec, &q, prior, &batches[b], kl_weight, &noise)?;
                objective += g.objective;
                gm.iter_mut().zip(&g.grad_mean).for_each(|(a, v)| *a += v);
                gr.iter_mut().zip(&g.grad_rho).for_each(|(a, v)| *a += v);
            }
            if !objective.is_finite() {
                return Err(Error::TrainingDiverged {
                    step,
                    loss: objective,
                });
            }
            let inv = 1.0 / mc_samples as f64;
            for i in trainable_from..n {
                q.mean[i] -= mean_lr[i] * inv * gm[i];
                let step = sgd.lr * inv * gr[i];
                if step != 0.0 {
                    q.rho[i] = (q.rho[i] - step).min(rho_cap[i]);
                }
            }
            step += 1;
        }
    }
    VariationalParams::new(q.mean, q.rho).map_err(|_| Error::TrainingDiverged {
        step,
        loss: f64::NAN,
    })
}

/// Argmax of each logit row; ties go to the lowest index.
pub fn argmax_rows(logits: &Array2<f64>) -> Vec<usize> {
    logits
        .outer_iter()
        .map(|row| {
            let mut best = 0;
            for (i, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = i;
                }
            }
            best
        })
        .collect()
}

pub fn predict(spec: &NetworkSpec, weights: &[f64], features: ArrayView2<f64>) -> Result<Vec<usize>> {
    Ok(argmax_rows(&forward(spec, weights, features)?))
}

/// Prediction from softmax probabilities averaged over `samples` posterior draws.
pub fn predict_mc(
    spec: &NetworkSpec,
    q: &VariationalParams,
    features: ArrayView2<f64>,
    samples: usize,
    seed: u64,
) -> Result<Vec<usize>> {
    spec.check_weights(q.len())?;
    spec.check_features(&features)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sigma = q.sigma();
    let mut probs = Array2::<f64>::zeros((features.nrows(), spec.output_width()));
    for _ in 0..samples.max(1) {
        let w: Vec<f64> = q
            .mean
            .iter()
            .zip(&sigma)
            .map(|(m, s)| m + s * rng.sample::<f64, _>(StandardNormal))
            .collect();
        let logits = forward_trace(spec, &w, features).pop().expect("non-empty trace");
        for (mut acc, row) in probs.outer_iter_mut().zip(logits.outer_iter()) {
            acc += &log_softmax_row(row).mapv(f64::exp);
        }
    }
    Ok(argmax_rows(&probs))
}
