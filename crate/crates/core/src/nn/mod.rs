//! A small from-scratch CNN: stacked 3x3 valid ReLU convolutions followed by a
//! softmax dense layer, trained with plain SGD.
//!
//! Parameters live in one flat `f32` buffer; [`LayerSpec`] records where each
//! layer's weights and biases sit. Activations are channels-last. Convolution
//! kernels are stored `[ky][kx][in][out]`, so a layer's weights form the
//! `(9 * in) x out` matrix multiplied against im2col patches.

pub mod checkpoint;
mod kernels;

use std::ops::Range;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::whitebox::ProjectionMatrix;
use kernels::{add_bias_relu, col2im, column_sums, gemm, im2col, MatRef};

pub const IMAGE_SIDE: usize = 28;
pub const IMAGE_PIXELS: usize = IMAGE_SIDE * IMAGE_SIDE;
pub const CLASSES: usize = 10;

/// Images per internal forward/backward chunk; bounds im2col memory.
const CHUNK: usize = 16;
const EVAL_CHUNK: usize = 32;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub input_side: usize,
    pub conv_channels: Vec<usize>,
    pub classes: usize,
}

impl Architecture {
    /// Three convolutions with 16, 64 and 128 kernels, then a 10-way dense layer.
    pub fn small_cnn() -> Self {
        Self {
            input_side: IMAGE_SIDE,
            conv_channels: vec![16, 64, 128],
            classes: CLASSES,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.conv_channels.is_empty() {
            return Err(Error::invalid("conv_channels", "at least one convolution is required"));
        }
        if self.input_side < 2 * self.conv_channels.len() + 1 {
            return Err(Error::invalid("input_side", "too small for the convolution stack"));
        }
        if self.conv_channels.contains(&0) || self.classes < 2 {
            return Err(Error::invalid("conv_channels", "channel and class counts must be positive"));
        }
        Ok(())
    }

    pub fn layers(&self) -> Vec<LayerSpec> {
        let mut specs = Vec::with_capacity(self.conv_channels.len() + 1);
        let mut side = self.input_side;
        let mut channels = 1;
        let mut offset = 0;
        for &out in &self.conv_channels {
            let weight_len = 9 * channels * out;
            specs.push(LayerSpec {
                kind: LayerKind::Conv,
                in_side: side,
                out_side: side - 2,
                in_channels: channels,
                out_channels: out,
                weight_offset: offset,
                bias_offset: offset + weight_len,
            });
            offset += weight_len + out;
            side -= 2;
            channels = out;
        }
        let fan_in = side * side * channels;
        specs.push(LayerSpec {
            kind: LayerKind::Dense,
            in_side: side,
            out_side: 1,
            in_channels: channels,
            out_channels: self.classes,
            weight_offset: offset,
            bias_offset: offset + fan_in * self.classes,
        });
        specs
    }

    pub fn param_count(&self) -> usize {
        let last = *self.layers().last().expect("dense layer");
        last.bias_offset + last.out_channels
    }

    /// Index of the layer whose kernel weights carry the white-box fingerprint
    /// (the last convolution).
    pub fn carrier_layer(&self) -> usize {
        self.conv_channels.len() - 1
    }

    pub fn dense_inputs(&self) -> usize {
        self.layers().last().map(LayerSpec::fan_in).unwrap_or(0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum LayerKind {
    Conv,
    Dense,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LayerSpec {
    pub kind: LayerKind,
    pub in_side: usize,
    pub out_side: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub weight_offset: usize,
    pub bias_offset: usize,
}

impl LayerSpec {
    pub fn fan_in(&self) -> usize {
        match self.kind {
            LayerKind::Conv => 9 * self.in_channels,
            LayerKind::Dense => self.in_side * self.in_side * self.in_channels,
        }
    }

    pub fn weight_len(&self) -> usize {
        self.fan_in() * self.out_channels
    }

    pub fn weights(&self) -> Range<usize> {
        self.weight_offset..self.weight_offset + self.weight_len()
    }

    pub fn biases(&self) -> Range<usize> {
        self.bias_offset..self.bias_offset + self.out_channels
    }

    /// Per-image input element count.
    pub fn input_len(&self) -> usize {
        self.in_side * self.in_side * self.in_channels
    }

    /// Per-image output element count (post-ReLU feature map or logits).
    pub fn output_len(&self) -> usize {
        self.out_side * self.out_side * self.out_channels
    }
}

/// Inverted dropout applied in front of every layer during training.
pub struct Dropout<'a> {
    pub prob: f32,
    pub rng: &'a mut dyn RngCore,
}

/// The watermark regularizer attached to a training step.
pub enum WatermarkTerm<'a> {
    /// `lambda * exp(-r_j)` evaluated against the carrier layer.
    Regularizer {
        lambda: f64,
        projection: &'a ProjectionMatrix,
        owner_vector: &'a [f64],
    },
    /// Loss and carrier gradient already evaluated (and scaled by lambda) at
    /// the current carrier weights.
    Precomputed {
        loss: f64,
        carrier_grad: &'a [f64],
    },
}

pub struct TrainStepSpec<'a> {
    pub learning_rate: f32,
    pub images: &'a [f32],
    pub targets: &'a [usize],
    pub dropout: Option<Dropout<'a>>,
    pub wm_term: Option<WatermarkTerm<'a>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    arch: Architecture,
    layout: Vec<LayerSpec>,
    params: Vec<f32>,
}

impl Model {
    /// He-initialized model (Gaussian, variance `2 / fan_in`, zero biases).
    pub fn new(arch: Architecture, seed: u64) -> Result<Self> {
        let mut model = Self::zeros(arch)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for spec in model.layout.clone() {
            let std = (2.0 / spec.fan_in() as f64).sqrt();
            for w in &mut model.params[spec.weights()] {
                let z: f64 = rng.sample(StandardNormal);
                *w = (z * std) as f32;
            }
        }
        Ok(model)
    }

    pub fn small_cnn(seed: u64) -> Self {
        Self::new(Architecture::small_cnn(), seed).expect("built-in architecture is valid")
    }

    pub fn zeros(arch: Architecture) -> Result<Self> {
        arch.validate()?;
        let layout = arch.layers();
        let params = vec![0.0; arch.param_count()];
        Ok(Self { arch, layout, params })
    }

    pub fn from_params(arch: Architecture, params: Vec<f32>) -> Result<Self> {
        let mut model = Self::zeros(arch)?;
        if params.len() != model.params.len() {
            return Err(Error::ShapeMismatch(format!(
                "expected {} parameters, got {}",
                model.params.len(),
                params.len()
            )));
        }
        model.params = params;
        Ok(model)
    }

    pub fn arch(&self) -> &Architecture {
        &self.arch
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layout
    }

    pub fn params(&self) -> &[f32] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f32] {
        &mut self.params
    }

    pub fn carrier_range(&self) -> Range<usize> {
        self.layout[self.arch.carrier_layer()].weights()
    }

    /// Flattened kernel weights of the carrier convolution.
    pub fn carrier(&self) -> &[f32] {
        &self.params[self.carrier_range()]
    }

    pub fn carrier_f64(&self) -> Vec<f64> {
        self.carrier().iter().map(|&v| v as f64).collect()
    }

    pub fn same_shape(&self, other: &Model) -> bool {
        self.arch == other.arch
    }

    pub fn is_finite(&self) -> bool {
        self.params.iter().all(|v| v.is_finite())
    }

    fn check_images(&self, images: &[f32]) -> Result<usize> {
        let per = self.layout[0].input_len();
        if images.is_empty() || images.len() % per != 0 {
            return Err(Error::ShapeMismatch(format!(
                "image buffer of {} values is not a positive multiple of {per}",
                images.len()
            )));
        }
        Ok(images.len() / per)
    }

    /// Softmax probabilities (row-major `n x classes`) and argmax classes.
    /// Dropout is applied only when supplied; otherwise this is evaluation mode.
    pub fn forward_predict(&self, images: &[f32], mut dropout: Option<Dropout<'_>>) -> Result<(Vec<f32>, Vec<usize>)> {
        let n = self.check_images(images)?;
        let per = self.layout[0].input_len();
        let classes = self.arch.classes;
        let mut probs = Vec::with_capacity(n * classes);
        for chunk in images.chunks(EVAL_CHUNK * per) {
            let (logits, _) = self.forward_chunk(chunk, dropout.as_mut(), None)?;
            probs.extend(logits);
        }
        for row in probs.chunks_exact_mut(classes) {
            softmax_in_place(row);
        }
        let classes_out = probs.chunks_exact(classes).map(argmax).collect();
        Ok((probs, classes_out))
    }

    pub fn predict(&self, images: &[f32]) -> Result<Vec<usize>> {
        let n = self.check_images(images)?;
        let per = self.layout[0].input_len();
        let mut out = Vec::with_capacity(n);
        for chunk in images.chunks(EVAL_CHUNK * per) {
            let (logits, _) = self.forward_chunk(chunk, None, None)?;
            out.extend(logits.chunks_exact(self.arch.classes).map(argmax));
        }
        Ok(out)
    }

    /// Streams the post-ReLU output of convolution `layer` (channels-last,
    /// one image after another) to `sink`, chunk by chunk, in evaluation mode.
    pub fn conv_activations(&self, images: &[f32], layer: usize, mut sink: impl FnMut(&[f32])) -> Result<()> {
        if layer >= self.arch.conv_channels.len() {
            return Err(Error::invalid("layer", format!("no convolution {layer}")));
        }
        self.check_images(images)?;
        let per = self.layout[0].input_len();
        for chunk in images.chunks(EVAL_CHUNK * per) {
            let (_, tapped) = self.forward_chunk(chunk, None, Some(layer))?;
            sink(&tapped.expect("tap requested"));
        }
        Ok(())
    }

    /// Mean cross-entropy loss and its gradient with respect to every parameter.
    pub fn loss_and_grad(&self, images: &[f32], targets: &[usize], mut dropout: Option<Dropout<'_>>) -> Result<(f64, Vec<f32>)> {
        let n = self.check_images(images)?;
        if targets.len() != n {
            return Err(Error::ShapeMismatch(format!("{n} images but {} targets", targets.len())));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= self.arch.classes) {
            return Err(Error::invalid("targets", format!("class {bad} out of range")));
        }
        let per = self.layout[0].input_len();
        let mut grad = vec![0.0f32; self.params.len()];
        let scale = 1.0 / n as f32;
        let mut loss = 0.0;
        for (imgs, tgts) in images.chunks(CHUNK * per).zip(targets.chunks(CHUNK)) {
            loss += self.backprop_chunk(imgs, tgts, scale, dropout.as_mut(), &mut grad);
        }
        let loss = loss / n as f64;
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss { iteration: 0 });
        }
        Ok((loss, grad))
    }

    /// Gradient-only variant of [`Model::train_step`]: total loss (cross-entropy
    /// plus watermark term) and its gradient, leaving the model untouched.
    pub fn gradient(&self, spec: TrainStepSpec<'_>) -> Result<(f64, Vec<f32>)> {
        let (mut loss, mut grad) = self.loss_and_grad(spec.images, spec.targets, spec.dropout)?;
        if let Some(term) = spec.wm_term {
            let carrier = self.carrier_range();
            let (wm_loss, wm_grad) = match term {
                WatermarkTerm::Regularizer {
                    lambda,
                    projection,
                    owner_vector,
                } => {
                    let (l, g) = crate::whitebox::regularizer_loss_and_grad(&self.carrier_f64(), projection, owner_vector)?;
                    (lambda * l, g.into_iter().map(|v| lambda * v).collect::<Vec<_>>())
                }
                WatermarkTerm::Precomputed { loss, carrier_grad } => {
                    if carrier_grad.len() != carrier.len() {
                        return Err(Error::ShapeMismatch("carrier gradient length".into()));
                    }
                    (loss, carrier_grad.to_vec())
                }
            };
            loss += wm_loss;
            for (g, w) in grad[carrier].iter_mut().zip(wm_grad) {
                *g += w as f32;
            }
        }
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss { iteration: 0 });
        }
        Ok((loss, grad))
    }

    /// One SGD step on the total loss; returns the loss before the update.
    pub fn train_step(&mut self, spec: TrainStepSpec<'_>) -> Result<f64> {
        if !(spec.learning_rate > 0.0) {
            return Err(Error::invalid("learning_rate", "must be positive"));
        }
        let lr = spec.learning_rate;
        let (loss, grad) = self.gradient(spec)?;
        self.sgd_update(&grad, lr);
        Ok(loss)
    }

    pub fn sgd_update(&mut self, grad: &[f32], learning_rate: f32) {
        assert_eq!(grad.len(), self.params.len());
        for (p, g) in self.params.iter_mut().zip(grad) {
            *p -= learning_rate * g;
        }
    }

    /// Forward pass over one chunk. Returns raw logits and, when `tap` names a
    /// convolution, that layer's post-ReLU output.
    fn forward_chunk(&self, images: &[f32], mut dropout: Option<&mut Dropout<'_>>, tap: Option<usize>) -> Result<(Vec<f32>, Option<Vec<f32>>)> {
        let n = images.len() / self.layout[0].input_len();
        let mut x = images.to_vec();
        let convs = self.arch.conv_channels.len();
        for (l, spec) in self.layout[..convs].iter().enumerate() {
            if let Some(d) = dropout.as_deref_mut() {
                apply_dropout(&mut x, d);
            }
            x = self.conv_forward(spec, &x, n).0;
            if tap == Some(l) {
                return Ok((Vec::new(), Some(x)));
            }
        }
        let dense = self.layout[convs];
        if let Some(d) = dropout.as_deref_mut() {
            apply_dropout(&mut x, d);
        }
        let logits = self.dense_forward(&dense, &x, n);
        if logits.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteLoss { iteration: 0 });
        }
        Ok((logits, None))
    }

    fn conv_forward(&self, spec: &LayerSpec, x: &[f32], n: usize) -> (Vec<f32>, Vec<f32>) {
        let rows = n * spec.out_side * spec.out_side;
        let k = spec.fan_in();
        let mut cols = vec![0.0; rows * k];
        im2col(x, n, spec.in_side, spec.in_channels, &mut cols);
        let mut z = vec![0.0; rows * spec.out_channels];
        gemm(
            1.0,
            MatRef::new(&cols, rows, k),
            MatRef::new(&self.params[spec.weights()], k, spec.out_channels),
            0.0,
            &mut z,
        );
        add_bias_relu(&mut z, &self.params[spec.biases()]);
        (z, cols)
    }

    fn dense_forward(&self, spec: &LayerSpec, x: &[f32], n: usize) -> Vec<f32> {
        let k = spec.fan_in();
        let mut logits = vec![0.0; n * spec.out_channels];
        for row in logits.chunks_exact_mut(spec.out_channels) {
            row.copy_from_slice(&self.params[spec.biases()]);
        }
        gemm(
            1.0,
            MatRef::new(x, n, k),
            MatRef::new(&self.params[spec.weights()], k, spec.out_channels),
            1.0,
            &mut logits,
        );
        logits
    }

    /// Accumulates `scale * d(sum of losses)/d(params)` for one chunk into
    /// `grad` and returns the chunk's summed cross-entropy.
    fn backprop_chunk(&self, images: &[f32], targets: &[usize], scale: f32, mut dropout: Option<&mut Dropout<'_>>, grad: &mut [f32]) -> f64 {
        let n = targets.len();
        let convs = self.arch.conv_channels.len();
        // inputs[l] is the (dropped-out) input of layer l; for l >= 1 its zero
        // pattern doubles as the ReLU mask of layer l - 1.
        let mut inputs: Vec<Vec<f32>> = Vec::with_capacity(convs + 1);
        let mut masks: Vec<Option<Vec<f32>>> = Vec::with_capacity(convs + 1);
        let mut cols_store: Vec<Vec<f32>> = Vec::with_capacity(convs);
        let mut x = images.to_vec();
        for spec in &self.layout[..convs] {
            let mask = dropout.as_deref_mut().map(|d| apply_dropout(&mut x, d));
            masks.push(mask);
            let (z, cols) = self.conv_forward(spec, &x, n);
            inputs.push(std::mem::replace(&mut x, z));
            cols_store.push(cols);
        }
        let dense = self.layout[convs];
        masks.push(dropout.as_deref_mut().map(|d| apply_dropout(&mut x, d)));
        let mut logits = self.dense_forward(&dense, &x, n);
        inputs.push(x);

        let classes = dense.out_channels;
        let mut loss = 0.0f64;
        for (row, &t) in logits.chunks_exact_mut(classes).zip(targets) {
            softmax_in_place(row);
            loss -= (row[t].max(f32::MIN_POSITIVE) as f64).ln();
            row[t] -= 1.0;
            row.iter_mut().for_each(|v| *v *= scale);
        }
        let dlogits = logits;

        // dense layer
        let fan_in = dense.fan_in();
        let dense_in = &inputs[convs];
        gemm(
            1.0,
            MatRef::new(dense_in, n, fan_in).t(),
            MatRef::new(&dlogits, n, classes),
            1.0,
            &mut grad[dense.weights()],
        );
        let mut bias_grad = vec![0.0; classes];
        column_sums(&dlogits, classes, &mut bias_grad);
        add_into(&mut grad[dense.biases()], &bias_grad);
        let mut d_act = vec![0.0; n * fan_in];
        gemm(
            1.0,
            MatRef::new(&dlogits, n, classes),
            MatRef::new(&self.params[dense.weights()], fan_in, classes).t(),
            0.0,
            &mut d_act,
        );
        if let Some(mask) = &masks[convs] {
            mul_into(&mut d_act, mask);
        }

        for l in (0..convs).rev() {
            let spec = self.layout[l];
            let out = &inputs[l + 1];
            for (d, &a) in d_act.iter_mut().zip(out) {
                if a <= 0.0 {
                    *d = 0.0;
                }
            }
            let rows = n * spec.out_side * spec.out_side;
            let k = spec.fan_in();
            let cols = &cols_store[l];
            gemm(
                1.0,
                MatRef::new(cols, rows, k).t(),
                MatRef::new(&d_act, rows, spec.out_channels),
                1.0,
                &mut grad[spec.weights()],
            );
            let mut bias_grad = vec![0.0; spec.out_channels];
            column_sums(&d_act, spec.out_channels, &mut bias_grad);
            add_into(&mut grad[spec.biases()], &bias_grad);
            if l == 0 {
                break;
            }
            let mut d_cols = vec![0.0; rows * k];
            gemm(
                1.0,
                MatRef::new(&d_act, rows, spec.out_channels),
                MatRef::new(&self.params[spec.weights()], k, spec.out_channels).t(),
                0.0,
                &mut d_cols,
            );
            let mut d_in = vec![0.0; n * spec.input_len()];
            col2im(&d_cols, n, spec.in_side, spec.in_channels, &mut d_in);
            if let Some(mask) = &masks[l] {
                mul_into(&mut d_in, mask);
            }
            d_act = d_in;
        }
        loss
    }
}

/// Fraction of `labels` matched by the model's argmax predictions.
pub fn evaluate_accuracy(model: &Model, images: &[f32], labels: &[usize]) -> Result<f64> {
    let predicted = model.predict(images)?;
    if predicted.len() != labels.len() {
        return Err(Error::ShapeMismatch(format!("{} images but {} labels", predicted.len(), labels.len())));
    }
    let hits = predicted.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(hits as f64 / labels.len() as f64)
}

/// Zeroes each element with probability `d.prob` and rescales survivors by
/// `1 / (1 - prob)`. Returns the per-element scale that was applied.
fn apply_dropout(x: &mut [f32], d: &mut Dropout<'_>) -> Vec<f32> {
    let keep = 1.0 - d.prob;
    let scale = 1.0 / keep;
    let mut mask = Vec::with_capacity(x.len());
    for v in x.iter_mut() {
        let m = if d.rng.random::<f32>() < keep { scale } else { 0.0 };
        *v *= m;
        mask.push(m);
    }
    mask
}

fn softmax_in_place(row: &mut [f32]) {
    let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let mut sum = 0.0f32;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    row.iter_mut().for_each(|v| *v /= sum);
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

fn add_into(dst: &mut [f32], src: &[f32]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += *s);
}

fn mul_into(dst: &mut [f32], src: &[f32]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d *= *s);
}
