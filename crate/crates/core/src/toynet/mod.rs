//! A small trainable convolutional network in plain `f64`.
//!
//! Convolutions with bias and ReLU, flattened into a dense softmax classifier.
//! The widths come from a resolved `toynet-*` template, so the same code trains
//! baseline, clustered and searched structures. Used both to produce realistic
//! feature dumps and as a desk-scale fitness evaluator.

mod data;

pub use data::{class_pattern, synth_dataset, synth_dataset_with, SynthDataset, SynthParams, IMAGE_SIDE};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::featio::{DumpShape, FeatureDump};
use crate::structmodel::{ConcreteNetwork, LayerKind};

#[derive(Debug, Error)]
pub enum ToyError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("network `{0}` is not a conv chain followed by one dense layer")]
    Unsupported(String),
    #[error("training diverged at epoch {epoch} (loss {loss})")]
    TrainingDiverged { epoch: usize, loss: f64 },
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("invalid parameters: {0}")]
    InvalidParams(String),
}

#[derive(Debug, Clone, PartialEq)]
struct ConvLayout {
    name: String,
    c_in: usize,
    c_out: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
    in_hw: (usize, usize),
    out_hw: (usize, usize),
    w_off: usize,
    b_off: usize,
}

impl ConvLayout {
    fn in_len(&self) -> usize {
        self.c_in * self.in_hw.0 * self.in_hw.1
    }

    fn out_len(&self) -> usize {
        self.c_out * self.out_hw.0 * self.out_hw.1
    }

    fn weight_len(&self) -> usize {
        self.c_out * self.c_in * self.kernel * self.kernel
    }

    /// Output positions along one axis whose tap `k` lands inside the input.
    fn valid_range(&self, k: usize, in_len: usize, out_len: usize) -> std::ops::Range<usize> {
        // need 0 <= o * stride + k - padding < in_len
        let lo = self.padding.saturating_sub(k).div_ceil(self.stride);
        let hi = (in_len + self.padding)
            .saturating_sub(k)
            .div_ceil(self.stride)
            .min(out_len);
        lo..hi.max(lo)
    }

    /// Calls `f(out_start, weight_index, in_start, len)` for every run of `len`
    /// multiply-accumulates sharing one weight: output `out_start + t` reads input
    /// `in_start + t * stride`. Weight-major so each run walks contiguous memory.
    fn for_each_run(&self, mut f: impl FnMut(usize, usize, usize, usize)) {
        let (h, w) = self.in_hw;
        let (oh, ow) = self.out_hw;
        let k = self.kernel;
        for o in 0..self.c_out {
            for i in 0..self.c_in {
                for ky in 0..k {
                    let ys = self.valid_range(ky, h, oh);
                    for kx in 0..k {
                        let xs = self.valid_range(kx, w, ow);
                        if xs.is_empty() {
                            continue;
                        }
                        let wi = ((o * self.c_in + i) * k + ky) * k + kx;
                        for oy in ys.clone() {
                            let iy = oy * self.stride + ky - self.padding;
                            f(
                                (o * oh + oy) * ow + xs.start,
                                wi,
                                (i * h + iy) * w + xs.start * self.stride + kx - self.padding,
                                xs.len(),
                            );
                        }
                    }
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
struct DenseLayout {
    n_in: usize,
    n_out: usize,
    w_off: usize,
    b_off: usize,
}

/// Training hyper-parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainParams {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainParams {
    fn default() -> Self {
        Self {
            epochs: 3,
            lr: 0.05,
            batch_size: 16,
            seed: 0,
        }
    }
}

/// Mean training-set loss measured after each epoch.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainLog {
    pub epoch_losses: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub checked: usize,
    pub tolerance: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyNet {
    arch_id: String,
    input: (usize, usize, usize),
    convs: Vec<ConvLayout>,
    dense: DenseLayout,
    params: Vec<f64>,
}

/// Activations of one forward pass: post-ReLU conv outputs and the logits.
struct Trace {
    hidden: Vec<Vec<f64>>,
    logits: Vec<f64>,
}

impl ToyNet {
    /// Builds the network with every weight and bias set to zero.
    pub fn zeros(net: &ConcreteNetwork) -> Result<Self, ToyError> {
        let unsupported = || ToyError::Unsupported(net.arch_id.clone());
        let (last, convs) = net.layers.split_last().ok_or_else(unsupported)?;
        if last.kind != LayerKind::Dense || convs.iter().any(|l| l.kind != LayerKind::Conv) {
            return Err(unsupported());
        }
        let mut offset = 0;
        let mut layouts = Vec::with_capacity(convs.len());
        for l in convs {
            let mut c = ConvLayout {
                name: l.name.clone(),
                c_in: l.c_in,
                c_out: l.c_out,
                kernel: l.kernel,
                stride: l.stride,
                padding: l.padding,
                in_hw: l.in_spatial,
                out_hw: l.out_spatial,
                w_off: offset,
                b_off: 0,
            };
            offset += c.weight_len();
            c.b_off = offset;
            offset += c.c_out;
            layouts.push(c);
        }
        let input = match layouts.first() {
            Some(c) => (c.c_in, c.in_hw.0, c.in_hw.1),
            None => (
                last.c_in / (last.in_spatial.0 * last.in_spatial.1),
                last.in_spatial.0,
                last.in_spatial.1,
            ),
        };
        let dense = DenseLayout {
            n_in: last.c_in,
            n_out: last.c_out,
            w_off: offset,
            b_off: offset + last.c_in * last.c_out,
        };
        offset += last.c_in * last.c_out + last.c_out;
        Ok(Self {
            arch_id: net.arch_id.clone(),
            input,
            convs: layouts,
            dense,
            params: vec![0.0; offset],
        })
    }

    /// He-normal weights from a seeded generator, zero biases.
    pub fn new(net: &ConcreteNetwork, seed: u64) -> Result<Self, ToyError> {
        let mut me = Self::zeros(net)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for c in &me.convs {
            let fan_in = (c.c_in * c.kernel * c.kernel) as f64;
            let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("positive fan-in");
            for w in &mut me.params[c.w_off..c.w_off + c.weight_len()] {
                *w = normal.sample(&mut rng);
            }
        }
        let normal = Normal::new(0.0, (1.0 / me.dense.n_in as f64).sqrt()).expect("positive fan-in");
        let d = &me.dense;
        for w in &mut me.params[d.w_off..d.w_off + d.n_in * d.n_out] {
            *w = normal.sample(&mut rng);
        }
        Ok(me)
    }

    pub fn arch_id(&self) -> &str {
        &self.arch_id
    }

    pub fn input_shape(&self) -> (usize, usize, usize) {
        self.input
    }

    pub fn num_classes(&self) -> usize {
        self.dense.n_out
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    fn input_len(&self) -> usize {
        self.input.0 * self.input.1 * self.input.2
    }

    fn check_input(&self, x: &[f64]) -> Result<(), ToyError> {
        if x.len() != self.input_len() {
            return Err(ToyError::ShapeMismatch(format!(
                "input has {} values, `{}` expects {:?}",
                x.len(),
                self.arch_id,
                self.input
            )));
        }
        Ok(())
    }

    fn forward(&self, x: &[f64]) -> Trace {
        let mut hidden: Vec<Vec<f64>> = Vec::with_capacity(self.convs.len());
        for c in &self.convs {
            let src: &[f64] = hidden.last().map_or(x, Vec::as_slice);
            let (oh, ow) = c.out_hw;
            let mut out = vec![0.0; c.out_len()];
            for (o, chunk) in out.chunks_mut(oh * ow).enumerate() {
                chunk.fill(self.params[c.b_off + o]);
            }
            let w = &self.params[c.w_off..c.w_off + c.weight_len()];
            let stride = c.stride;
            c.for_each_run(|os, wi, is, len| {
                let wv = w[wi];
                let dst = &mut out[os..os + len];
                if stride == 1 {
                    dst.iter_mut().zip(&src[is..is + len]).for_each(|(o, x)| *o += wv * x);
                } else {
                    dst.iter_mut()
                        .enumerate()
                        .for_each(|(t, o)| *o += wv * src[is + t * stride]);
                }
            });
            out.iter_mut().for_each(|v| *v = v.max(0.0));
            hidden.push(out);
        }
        let feat: &[f64] = hidden.last().map_or(x, Vec::as_slice);
        let d = &self.dense;
        let logits = (0..d.n_out)
            .map(|o| {
                let row = &self.params[d.w_off + o * d.n_in..d.w_off + (o + 1) * d.n_in];
                self.params[d.b_off + o] + row.iter().zip(feat).map(|(a, b)| a * b).sum::<f64>()
            })
            .collect();
        Trace { hidden, logits }
    }

    pub fn logits(&self, x: &[f64]) -> Result<Vec<f64>, ToyError> {
        self.check_input(x)?;
        Ok(self.forward(x).logits)
    }

    /// Runs a batch and records the post-activation maps of every conv layer.
    pub fn forward_capture(&self, batch: &[Vec<f64>]) -> Result<(Vec<Vec<f64>>, Vec<FeatureDump>), ToyError> {
        if batch.is_empty() {
            return Err(ToyError::EmptyDataset);
        }
        let mut logits = Vec::with_capacity(batch.len());
        let mut maps: Vec<Vec<f32>> = self
            .convs
            .iter()
            .map(|c| Vec::with_capacity(batch.len() * c.out_len()))
            .collect();
        for x in batch {
            self.check_input(x)?;
            let trace = self.forward(x);
            for (m, h) in maps.iter_mut().zip(&trace.hidden) {
                m.extend(h.iter().map(|&v| v as f32));
            }
            logits.push(trace.logits);
        }
        let dumps = self
            .convs
            .iter()
            .zip(maps)
            .map(|(c, data)| {
                let shape = DumpShape::new(batch.len(), c.c_out, c.out_hw.0, c.out_hw.1);
                FeatureDump::new(c.name.clone(), shape, data).map_err(|e| ToyError::ShapeMismatch(e.to_string()))
            })
            .collect::<Result<_, _>>()?;
        Ok((logits, dumps))
    }

    /// Mean cross-entropy over the batch, with gradients accumulated into `grad`.
    fn loss_and_grad(&self, inputs: &[&[f64]], labels: &[usize], grad: &mut [f64]) -> f64 {
        grad.fill(0.0);
        let scale = 1.0 / inputs.len() as f64;
        let mut loss = 0.0;
        let d = &self.dense;
        for (x, &y) in inputs.iter().zip(labels) {
            let trace = self.forward(x);
            let probs = softmax(&trace.logits);
            loss -= probs[y].max(f64::MIN_POSITIVE).ln() * scale;

            let feat: &[f64] = trace.hidden.last().map_or(x, Vec::as_slice);
            let mut dfeat = vec![0.0; d.n_in];
            for (o, p) in probs.iter().enumerate() {
                let dz = (p - if o == y { 1.0 } else { 0.0 }) * scale;
                grad[d.b_off + o] += dz;
                let wrow = d.w_off + o * d.n_in;
                for j in 0..d.n_in {
                    grad[wrow + j] += dz * feat[j];
                    dfeat[j] += dz * self.params[wrow + j];
                }
            }

            let mut dout = dfeat;
            for (li, c) in self.convs.iter().enumerate().rev() {
                let out = &trace.hidden[li];
                for (g, &a) in dout.iter_mut().zip(out) {
                    if a <= 0.0 {
                        *g = 0.0;
                    }
                }
                let src: &[f64] = if li == 0 { x } else { &trace.hidden[li - 1] };
                let (oh, ow) = c.out_hw;
                for o in 0..c.c_out {
                    grad[c.b_off + o] += dout[o * oh * ow..(o + 1) * oh * ow].iter().sum::<f64>();
                }
                let w = &self.params[c.w_off..c.w_off + c.weight_len()];
                let mut din = vec![0.0; if li == 0 { 0 } else { c.in_len() }];
                let (gw, _) = grad[c.w_off..].split_at_mut(c.weight_len());
                let stride = c.stride;
                c.for_each_run(|os, wi, is, len| {
                    let gs = &dout[os..os + len];
                    let wv = w[wi];
                    let mut acc = 0.0;
                    for (t, &g) in gs.iter().enumerate() {
                        acc += g * src[is + t * stride];
                    }
                    gw[wi] += acc;
                    if li > 0 {
                        for (t, &g) in gs.iter().enumerate() {
                            din[is + t * stride] += g * wv;
                        }
                    }
                });
                dout = din;
            }
        }
        loss
    }

    /// Mean cross-entropy over a dataset.
    pub fn loss(&self, data: &SynthDataset) -> Result<f64, ToyError> {
        if data.is_empty() {
            return Err(ToyError::EmptyDataset);
        }
        let mut total = 0.0;
        for (x, &y) in data.inputs.iter().zip(&data.labels) {
            self.check_input(x)?;
            let probs = softmax(&self.forward(x).logits);
            total -= probs[y].max(f64::MIN_POSITIVE).ln();
        }
        Ok(total / data.len() as f64)
    }

    /// Plain mini-batch gradient descent with a seeded shuffle per epoch.
    pub fn train(&mut self, data: &SynthDataset, p: &TrainParams) -> Result<TrainLog, ToyError> {
        if p.epochs < 1 || p.batch_size < 1 || !(p.lr >= 0.0) {
            return Err(ToyError::InvalidParams(format!("bad training parameters {p:?}")));
        }
        if data.is_empty() {
            return Err(ToyError::EmptyDataset);
        }
        if let Some(x) = data.inputs.first() {
            self.check_input(x)?;
        }
        if let Some(&y) = data.labels.iter().find(|&&y| y >= self.num_classes()) {
            return Err(ToyError::ShapeMismatch(format!("label {y} out of range")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(p.seed);
        let mut order: Vec<usize> = (0..data.len()).collect();
        let mut grad = vec![0.0; self.params.len()];
        let mut epoch_losses = Vec::with_capacity(p.epochs);
        for epoch in 0..p.epochs {
            order.shuffle(&mut rng);
            for batch in order.chunks(p.batch_size) {
                let inputs: Vec<&[f64]> = batch.iter().map(|&i| data.inputs[i].as_slice()).collect();
                let labels: Vec<usize> = batch.iter().map(|&i| data.labels[i]).collect();
                let loss = self.loss_and_grad(&inputs, &labels, &mut grad);
                if !loss.is_finite() {
                    return Err(ToyError::TrainingDiverged { epoch, loss });
                }
                for (w, g) in self.params.iter_mut().zip(&grad) {
                    *w -= p.lr * g;
                }
            }
            let loss = self.loss(data)?;
            if !loss.is_finite() || self.params.iter().any(|w| !w.is_finite()) {
                return Err(ToyError::TrainingDiverged { epoch, loss });
            }
            epoch_losses.push(loss);
        }
        Ok(TrainLog { epoch_losses })
    }

    pub fn predict(&self, x: &[f64]) -> Result<usize, ToyError> {
        let logits = self.logits(x)?;
        Ok(argmax(&logits))
    }

    /// Fraction of samples whose arg-max logit equals the label.
    pub fn accuracy(&self, data: &SynthDataset) -> Result<f64, ToyError> {
        if data.is_empty() {
            return Err(ToyError::EmptyDataset);
        }
        let mut hits = 0usize;
        for (x, &y) in data.inputs.iter().zip(&data.labels) {
            if self.predict(x)? == y {
                hits += 1;
            }
        }
        Ok(hits as f64 / data.len() as f64)
    }

    /// Gradient of the mean batch loss with respect to every parameter.
    pub fn gradient(&self, inputs: &[Vec<f64>], labels: &[usize]) -> Result<(f64, Vec<f64>), ToyError> {
        if inputs.is_empty() || inputs.len() != labels.len() {
            return Err(ToyError::ShapeMismatch(
                "batch inputs and labels differ in length".into(),
            ));
        }
        for x in inputs {
            self.check_input(x)?;
        }
        let refs: Vec<&[f64]> = inputs.iter().map(Vec::as_slice).collect();
        let mut grad = vec![0.0; self.params.len()];
        let loss = self.loss_and_grad(&refs, labels, &mut grad);
        Ok((loss, grad))
    }

    /// Compares analytic gradients with central differences on up to `samples`
    /// randomly chosen parameters.
    pub fn grad_check(
        &self,
        inputs: &[Vec<f64>],
        labels: &[usize],
        tolerance: f64,
        step: f64,
        samples: usize,
        seed: u64,
    ) -> Result<GradCheckReport, ToyError> {
        if !(tolerance > 0.0 && step > 0.0) {
            return Err(ToyError::InvalidParams("tolerance and step must be positive".into()));
        }
        let (_, analytic) = self.gradient(inputs, labels)?;
        let refs: Vec<&[f64]> = inputs.iter().map(Vec::as_slice).collect();
        let mut idx: Vec<usize> = (0..self.params.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        idx.shuffle(&mut rng);
        idx.truncate(samples);

        let mut probe = self.clone();
        let mut scratch = vec![0.0; self.params.len()];
        let mut max_rel: f64 = 0.0;
        for &i in &idx {
            let orig = probe.params[i];
            probe.params[i] = orig + step;
            let up = probe.loss_and_grad(&refs, labels, &mut scratch);
            probe.params[i] = orig - step;
            let down = probe.loss_and_grad(&refs, labels, &mut scratch);
            probe.params[i] = orig;
            let numeric = (up - down) / (2.0 * step);
            max_rel = max_rel.max(relative_error(analytic[i], numeric));
        }
        Ok(GradCheckReport {
            max_rel_error: max_rel,
            checked: idx.len(),
            tolerance,
            passed: max_rel < tolerance,
        })
    }

    /// Parameter index range of the first conv layer's weights, if any.
    pub fn first_conv_weights(&self) -> Option<std::ops::Range<usize>> {
        self.convs.first().map(|c| c.w_off..c.w_off + c.weight_len())
    }

    /// Parameter index range of the dense layer's weights.
    pub fn dense_weights(&self) -> std::ops::Range<usize> {
        self.dense.w_off..self.dense.w_off + self.dense.n_in * self.dense.n_out
    }

    /// Randomly draws a batch of inputs shaped for this network.
    pub fn random_batch(&self, n: usize, seed: u64) -> Vec<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| (0..self.input_len()).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect()
    }
}

/// `|a - n| / max(|a| + |n|, 1e-12)`, zero when both are zero.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs() + numeric.abs();
    if denom == 0.0 {
        0.0
    } else {
        (analytic - numeric).abs() / denom.max(1e-12)
    }
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

fn argmax(v: &[f64]) -> usize {
    v.iter()
        .enumerate()
        .fold(
            (0, f64::NEG_INFINITY),
            |best, (i, &x)| if x > best.1 { (i, x) } else { best },
        )
        .0
}
