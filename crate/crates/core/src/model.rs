//! Fully connected ReLU classifier over a flat [`ParamVector`], with manual
//! backpropagation, Adam, cross-entropy training and the hinge poisoning objective.
//!
//! Parameter layout: for each layer in order, the weight matrix
//! (`n_out × n_in`, row-major) followed by its `n_out` biases.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{contract, Result};
use crate::rng::{self, Stream};
use crate::vecmath::{l2_norm, ParamVector};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpArchitecture {
    layer_sizes: Vec<usize>,
}

impl MlpArchitecture {
    /// `layer_sizes` = input dim, hidden widths..., class count.
    pub fn new(layer_sizes: Vec<usize>) -> Result<Self> {
        if layer_sizes.len() < 2 {
            return contract(format!("architecture needs at least 2 layers, got {}", layer_sizes.len()));
        }
        if layer_sizes.contains(&0) {
            return contract("architecture layer sizes must be positive");
        }
        if *layer_sizes.last().unwrap() < 2 {
            return contract("architecture needs at least 2 output classes");
        }
        Ok(Self { layer_sizes })
    }

    pub fn layer_sizes(&self) -> &[usize] {
        &self.layer_sizes
    }

    pub fn input_dim(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn classes(&self) -> usize {
        *self.layer_sizes.last().unwrap()
    }

    /// Total parameter count d.
    pub fn param_count(&self) -> usize {
        self.layer_sizes.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }

    fn layers(&self) -> impl Iterator<Item = Layer> + '_ {
        let mut offset = 0;
        self.layer_sizes.windows(2).map(move |w| {
            let l = Layer { n_in: w[0], n_out: w[1], w: offset, b: offset + w[0] * w[1] };
            offset += w[0] * w[1] + w[1];
            l
        })
    }

    fn check(&self, params: &ParamVector, batch: &LabeledBatch<'_>) -> Result<()> {
        if params.dim() != self.param_count() {
            return contract(format!("params dim {} != architecture param count {}", params.dim(), self.param_count()));
        }
        if batch.features != self.input_dim() {
            return contract(format!("batch has {} features, model expects {}", batch.features, self.input_dim()));
        }
        Ok(())
    }

    /// Scaled-uniform (Glorot) weights, zero biases.
    pub fn init_params(&self, seed: u64) -> ParamVector {
        let mut rng = rng::stream(seed, Stream::Init, &[]);
        let mut p = vec![0.0; self.param_count()];
        for l in self.layers() {
            let bound = (6.0 / (l.n_in + l.n_out) as f64).sqrt();
            for x in &mut p[l.w..l.b] {
                *x = rng.random_range(-bound..bound);
            }
        }
        ParamVector::from_vec(p)
    }

    /// Forward pass keeping every layer's activations (post-ReLU for hidden
    /// layers, raw logits for the last one).
    fn forward(&self, params: &[f64], batch: &LabeledBatch<'_>) -> Vec<Vec<f64>> {
        let n = batch.len();
        let mut acts = Vec::with_capacity(self.layer_sizes.len());
        acts.push(batch.inputs.to_vec());
        let last = self.layer_sizes.len() - 2;
        for (li, l) in self.layers().enumerate() {
            let input = &acts[li];
            let w = &params[l.w..l.b];
            let b = &params[l.b..l.b + l.n_out];
            let mut out = vec![0.0; n * l.n_out];
            for s in 0..n {
                let x = &input[s * l.n_in..(s + 1) * l.n_in];
                let o = &mut out[s * l.n_out..(s + 1) * l.n_out];
                for (j, oj) in o.iter_mut().enumerate() {
                    let row = &w[j * l.n_in..(j + 1) * l.n_in];
                    let z = b[j] + row.iter().zip(x).map(|(a, c)| a * c).sum::<f64>();
                    *oj = if li < last { z.max(0.0) } else { z };
                }
            }
            acts.push(out);
        }
        acts
    }

    /// Raw logits, `batch.len() × classes`, row-major.
    pub fn logits(&self, params: &ParamVector, batch: &LabeledBatch<'_>) -> Result<Vec<f64>> {
        self.check(params, batch)?;
        Ok(self.forward(params, batch).pop().unwrap())
    }

    /// Softmax class probabilities per sample.
    pub fn predict_probs(&self, params: &ParamVector, batch: &LabeledBatch<'_>) -> Result<Vec<Vec<f64>>> {
        let l = self.classes();
        Ok(self.logits(params, batch)?.chunks(l).map(softmax).collect())
    }

    /// Mean loss and its gradient. `per_sample` receives one logit row and its
    /// label, writes dloss/dlogits into the scratch row, and returns the loss.
    fn loss_and_grad<F>(&self, params: &ParamVector, batch: &LabeledBatch<'_>, per_sample: F) -> Result<(f64, ParamVector)>
    where
        F: Fn(&[f64], usize, &mut [f64]) -> f64,
    {
        self.check(params, batch)?;
        if batch.is_empty() {
            return contract("loss over an empty batch");
        }
        let n = batch.len();
        let inv_n = 1.0 / n as f64;
        let acts = self.forward(params, batch);
        let classes = self.classes();
        let logits = acts.last().unwrap();

        let mut loss = 0.0;
        let mut delta = vec![0.0; n * classes];
        for s in 0..n {
            let row = &logits[s * classes..(s + 1) * classes];
            let d = &mut delta[s * classes..(s + 1) * classes];
            loss += per_sample(row, batch.labels[s], d);
            d.iter_mut().for_each(|x| *x *= inv_n);
        }
        loss *= inv_n;

        let layers: Vec<Layer> = self.layers().collect();
        let mut grad = vec![0.0; self.param_count()];
        for (li, l) in layers.iter().enumerate().rev() {
            let input = &acts[li];
            {
                let (gw, gb) = grad[l.w..l.b + l.n_out].split_at_mut(l.n_in * l.n_out);
                for s in 0..n {
                    let x = &input[s * l.n_in..(s + 1) * l.n_in];
                    let d = &delta[s * l.n_out..(s + 1) * l.n_out];
                    for (j, &dj) in d.iter().enumerate() {
                        if dj == 0.0 {
                            continue;
                        }
                        gb[j] += dj;
                        for (g, &xi) in gw[j * l.n_in..(j + 1) * l.n_in].iter_mut().zip(x) {
                            *g += dj * xi;
                        }
                    }
                }
            }
            if li == 0 {
                break;
            }
            let w = &params[l.w..l.b];
            let mut prev = vec![0.0; n * l.n_in];
            for s in 0..n {
                let d = &delta[s * l.n_out..(s + 1) * l.n_out];
                let p = &mut prev[s * l.n_in..(s + 1) * l.n_in];
                for (j, &dj) in d.iter().enumerate() {
                    if dj == 0.0 {
                        continue;
                    }
                    for (pi, &wji) in p.iter_mut().zip(&w[j * l.n_in..(j + 1) * l.n_in]) {
                        *pi += dj * wji;
                    }
                }
                // ReLU subgradient: 0 at and below the kink.
                let a = &input[s * l.n_in..(s + 1) * l.n_in];
                for (pi, &ai) in p.iter_mut().zip(a) {
                    if ai <= 0.0 {
                        *pi = 0.0;
                    }
                }
            }
            delta = prev;
        }
        Ok((loss, ParamVector::from_vec(grad)))
    }

    /// Mean cross-entropy and its gradient.
    pub fn ce_loss_and_grad(&self, params: &ParamVector, batch: &LabeledBatch<'_>) -> Result<(f64, ParamVector)> {
        self.check_labels(batch)?;
        self.loss_and_grad(params, batch, |logits, y, d| {
            let p = softmax(logits);
            for (di, pi) in d.iter_mut().zip(&p) {
                *di = *pi;
            }
            d[y] -= 1.0;
            // log-sum-exp form keeps the loss finite for saturated logits
            let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
            lse - logits[y]
        })
    }

    /// λ‖θ − reference‖₂ + mean hinge poisoning loss, with gradient.
    pub fn poison_objective(
        &self,
        params: &ParamVector,
        reference: &ParamVector,
        batch: &LabeledBatch<'_>,
        lambda: f64,
    ) -> Result<(f64, ParamVector)> {
        if reference.dim() != params.dim() {
            return contract(format!("reference dim {} != params dim {}", reference.dim(), params.dim()));
        }
        if !(lambda >= 0.0) {
            return contract(format!("lambda must be nonnegative, got {lambda}"));
        }
        self.check_labels(batch)?;
        let (hinge, grad) = self.loss_and_grad(params, batch, |logits, y, d| {
            let p = softmax(logits);
            let (k, pk) = runner_up(&p, y);
            let margin = p[y] - pk;
            if margin <= 0.0 {
                return 0.0;
            }
            // dP_i/dz_j = P_i (δ_ij − P_j)
            for (j, dj) in d.iter_mut().enumerate() {
                let dy = p[y] * (f64::from(u8::from(j == y)) - p[j]);
                let dk = p[k] * (f64::from(u8::from(j == k)) - p[j]);
                *dj = dy - dk;
            }
            margin
        })?;
        let diff = params.sub(reference);
        let dn = l2_norm(&diff);
        if dn == 0.0 || lambda == 0.0 {
            return Ok((hinge, grad));
        }
        let loss = lambda * dn + hinge;
        Ok((loss, grad.add_scaled(lambda / dn, &diff)))
    }

    fn check_labels(&self, batch: &LabeledBatch<'_>) -> Result<()> {
        let l = self.classes();
        if let Some(&bad) = batch.labels.iter().find(|&&y| y >= l) {
            return contract(format!("label {bad} out of range for {l} classes"));
        }
        Ok(())
    }

    /// Fraction of argmax-correct predictions (ties go to the lowest class).
    pub fn accuracy(&self, params: &ParamVector, data: &LabeledBatch<'_>) -> Result<f64> {
        if data.is_empty() {
            return contract("accuracy on empty data");
        }
        let l = self.classes();
        let logits = self.logits(params, data)?;
        let correct = logits.chunks(l).zip(data.labels).filter(|(row, &y)| argmax(row) == y).count();
        Ok(correct as f64 / data.len() as f64)
    }

    /// Mini-batch Adam on cross-entropy, `epochs` passes, shuffled per (seed, epoch).
    pub fn local_train(&self, params: &ParamVector, data: &LabeledBatch<'_>, cfg: &TrainConfig, seed: u64) -> Result<ParamVector> {
        cfg.validate()?;
        if data.is_empty() {
            return contract("local_train on an empty dataset");
        }
        let mut theta = params.clone();
        let mut opt = OptimizerState::new(theta.dim(), cfg.learning_rate);
        let mut order: Vec<usize> = (0..data.len()).collect();
        let mut scratch = BatchBuf::default();
        for epoch in 0..cfg.epochs {
            let mut rng = rng::stream(seed, Stream::LocalTrain, &[epoch as u64]);
            order.shuffle(&mut rng);
            for chunk in order.chunks(cfg.batch_size) {
                let mb = scratch.gather(data, chunk);
                let (_, g) = self.ce_loss_and_grad(&theta, &mb)?;
                opt.step(&mut theta, &g)?;
            }
        }
        Ok(theta)
    }
}

#[derive(Clone, Copy, Debug)]
struct Layer {
    n_in: usize,
    n_out: usize,
    w: usize,
    b: usize,
}

/// Local training hyperparameters (E, S and the Adam learning rate).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return contract("local training needs at least one epoch");
        }
        if self.batch_size == 0 {
            return contract("batch size must be positive");
        }
        if !(self.learning_rate > 0.0) {
            return contract(format!("learning rate must be positive, got {}", self.learning_rate));
        }
        Ok(())
    }
}

/// Borrowed view of labeled samples, features normalized to [0, 1].
#[derive(Clone, Copy, Debug)]
pub struct LabeledBatch<'a> {
    pub inputs: &'a [f64],
    pub labels: &'a [usize],
    pub features: usize,
}

impl<'a> LabeledBatch<'a> {
    pub fn new(inputs: &'a [f64], labels: &'a [usize], features: usize) -> Result<Self> {
        if features == 0 || inputs.len() != labels.len() * features {
            return contract(format!(
                "batch shape mismatch: {} inputs for {} labels × {features} features",
                inputs.len(),
                labels.len()
            ));
        }
        Ok(Self { inputs, labels, features })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn row(&self, i: usize) -> &'a [f64] {
        &self.inputs[i * self.features..(i + 1) * self.features]
    }
}

/// Reusable buffers for gathering index subsets into contiguous mini-batches.
#[derive(Default)]
pub(crate) struct BatchBuf {
    inputs: Vec<f64>,
    labels: Vec<usize>,
}

impl BatchBuf {
    pub(crate) fn gather<'s>(&'s mut self, data: &LabeledBatch<'_>, idx: &[usize]) -> LabeledBatch<'s> {
        self.inputs.clear();
        self.labels.clear();
        for &i in idx {
            self.inputs.extend_from_slice(data.row(i));
            self.labels.push(data.labels[i]);
        }
        LabeledBatch { inputs: &self.inputs, labels: &self.labels, features: data.features }
    }
}

/// Adam with bias correction (β₁ = 0.9, β₂ = 0.999, ε = 1e-8).
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    first: Vec<f64>,
    second: Vec<f64>,
    step: u64,
}

impl OptimizerState {
    pub fn new(dim: usize, learning_rate: f64) -> Self {
        Self { learning_rate, beta1: 0.9, beta2: 0.999, eps: 1e-8, first: vec![0.0; dim], second: vec![0.0; dim], step: 0 }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn first_moment(&self) -> &[f64] {
        &self.first
    }

    pub fn second_moment(&self) -> &[f64] {
        &self.second
    }

    pub fn step(&mut self, params: &mut ParamVector, grad: &ParamVector) -> Result<()> {
        if params.dim() != self.first.len() || grad.dim() != self.first.len() {
            return contract(format!(
                "adam dims: state {}, params {}, grad {}",
                self.first.len(),
                params.dim(),
                grad.dim()
            ));
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let p = params.as_mut_slice();
        for i in 0..p.len() {
            let g = grad[i];
            self.first[i] = self.beta1 * self.first[i] + (1.0 - self.beta1) * g;
            self.second[i] = self.beta2 * self.second[i] + (1.0 - self.beta2) * g * g;
            let mhat = self.first[i] / c1;
            let vhat = self.second[i] / c2;
            p[i] -= self.learning_rate * mhat / (vhat.sqrt() + self.eps);
        }
        Ok(())
    }
}

/// Numerically stable softmax (max subtraction).
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let s: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / s).collect()
}

/// Index of the maximum, lowest index on ties.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in row.iter().enumerate().skip(1) {
        if x > row[best] {
            best = i;
        }
    }
    best
}

fn runner_up(p: &[f64], y: usize) -> (usize, f64) {
    let mut best: Option<usize> = None;
    for (j, &pj) in p.iter().enumerate() {
        if j != y && best.is_none_or(|b| pj > p[b]) {
            best = Some(j);
        }
    }
    let k = best.expect("at least two classes");
    (k, p[k])
}

/// max(0, P_y − max_{j≠y} P_j): positive only while the true class strictly wins.
pub fn hinge_poison_loss(probs: &[f64], label: usize) -> Result<f64> {
    if probs.len() < 2 {
        return contract(format!("hinge loss needs at least 2 classes, got {}", probs.len()));
    }
    if label >= probs.len() {
        return contract(format!("label {label} out of range for {} classes", probs.len()));
    }
    let (_, pk) = runner_up(probs, label);
    Ok((probs[label] - pk).max(0.0))
}
