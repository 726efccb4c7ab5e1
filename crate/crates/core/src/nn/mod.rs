//! A small 1D convolutional classifier with exact, hand-derived gradients.
//!
//! The network is
//!
//! ```text
//! [conv -> relu -> maxpool] x n  ->  flatten  ->  dropout  ->  [linear -> relu] x m  ->  linear
//! ```
//!
//! with everything in `f64`. The reference configuration ([`ArchConfig::reference`])
//! uses 16/32/64 channels, kernel 3 / padding 1 convolutions, kernel 2 / stride 2 /
//! padding 1 pooling, dropout 0.5 and two hidden layers of width 128.

pub mod adam;
pub mod layers;
pub mod loss;

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::FeatureMatrix;
use crate::error::{Error, Result};

pub use adam::{AdamConfig, AdamState};
pub use layers::{Conv1d, Linear, MaxPool1d};
pub use loss::{argmax, softmax, softmax_cross_entropy, ScoreVector};

/// Number of fixed chunks a batch is split into for gradient accumulation.
/// Chunks are summed in order, so results do not depend on the thread count.
const GRADIENT_CHUNKS: usize = 16;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArchConfig {
    pub input_length: usize,
    pub conv_channels: Vec<usize>,
    pub conv_kernel: usize,
    pub conv_padding: usize,
    pub pool_kernel: usize,
    pub pool_stride: usize,
    pub pool_padding: usize,
    pub dropout_rate: f64,
    pub fc_widths: Vec<usize>,
    pub num_classes: usize,
    /// ReLU after each hidden fully connected layer.
    pub hidden_relu: bool,
}

impl ArchConfig {
    pub fn reference(input_length: usize, num_classes: usize) -> ArchConfig {
        ArchConfig {
            input_length,
            conv_channels: vec![16, 32, 64],
            conv_kernel: 3,
            conv_padding: 1,
            pool_kernel: 2,
            pool_stride: 2,
            pool_padding: 1,
            dropout_rate: 0.5,
            fc_widths: vec![128, 128],
            num_classes,
            hidden_relu: true,
        }
    }

    /// A single linear map from inputs to class scores.
    pub fn linear(input_length: usize, num_classes: usize) -> ArchConfig {
        ArchConfig {
            conv_channels: vec![],
            fc_widths: vec![],
            dropout_rate: 0.0,
            ..ArchConfig::reference(input_length, num_classes)
        }
    }

    fn pool(&self) -> MaxPool1d {
        MaxPool1d {
            kernel: self.pool_kernel,
            stride: self.pool_stride,
            padding: self.pool_padding,
        }
    }

    /// Per-layer output shapes and parameter counts.
    pub fn summary(&self) -> Result<Vec<LayerSummary>> {
        if self.input_length == 0 {
            return Err(Error::Dimension("input length must be positive".into()));
        }
        if self.num_classes < 2 {
            return Err(Error::Domain(format!("need at least 2 classes, got {}", self.num_classes)));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Domain(format!("dropout rate {} outside [0, 1)", self.dropout_rate)));
        }
        if self.conv_channels.contains(&0) || self.fc_widths.contains(&0) {
            return Err(Error::Dimension("layer widths must be positive".into()));
        }
        let mut rows = Vec::new();
        let (mut channels, mut len) = (1usize, self.input_length);
        for &out in &self.conv_channels {
            let conv = Conv1d::zeros(channels, out, self.conv_kernel, self.conv_padding);
            len = conv.output_len(len)?;
            rows.push(LayerSummary {
                layer: "Conv1D".into(),
                output_shape: vec![out, len],
                params: conv.param_count(),
            });
            len = self.pool().output_len(len)?;
            channels = out;
            rows.push(LayerSummary {
                layer: "MaxPool1D".into(),
                output_shape: vec![out, len],
                params: 0,
            });
        }
        let mut width = channels * len;
        rows.push(LayerSummary {
            layer: "Flatten & Dropout".into(),
            output_shape: vec![width],
            params: 0,
        });
        for &out in self.fc_widths.iter().chain(std::iter::once(&self.num_classes)) {
            rows.push(LayerSummary {
                layer: "Linear".into(),
                output_shape: vec![out],
                params: width * out + out,
            });
            width = out;
        }
        Ok(rows)
    }

    pub fn flattened_width(&self) -> Result<usize> {
        let rows = self.summary()?;
        let flat = rows.iter().find(|r| r.layer == "Flatten & Dropout").expect("always present");
        Ok(flat.output_shape[0])
    }

    pub fn param_count(&self) -> Result<usize> {
        Ok(self.summary()?.iter().map(|r| r.params).sum())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSummary {
    pub layer: String,
    /// Output shape without the batch dimension.
    pub output_shape: Vec<usize>,
    pub params: usize,
}

/// Total trainable parameters and the per-layer table.
pub fn param_count(config: &ArchConfig) -> Result<(usize, Vec<LayerSummary>)> {
    let table = config.summary()?;
    Ok((table.iter().map(|r| r.params).sum(), table))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Mode {
    Train,
    Eval,
}

/// Gradient buffers aligned with [`CnnModel::parameters`].
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    pub tensors: Vec<Vec<f64>>,
}

impl Gradients {
    pub fn zeros_like(model: &CnnModel) -> Gradients {
        Gradients {
            tensors: model.parameters().iter().map(|p| vec![0.0; p.len()]).collect(),
        }
    }

    fn add_assign(&mut self, other: &Gradients) {
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    fn pair_mut(&mut self, index: usize) -> (&mut [f64], &mut [f64]) {
        let (head, tail) = self.tensors.split_at_mut(index + 1);
        (&mut head[index], &mut tail[0])
    }

    pub fn slices(&self) -> Vec<&[f64]> {
        self.tensors.iter().map(|t| t.as_slice()).collect()
    }
}

/// Intermediate values of one forward pass, kept for the backward pass.
struct Activations {
    conv_inputs: Vec<Vec<f64>>,
    conv_input_lens: Vec<usize>,
    conv_outputs: Vec<Vec<f64>>,
    pool_argmax: Vec<Vec<usize>>,
    mask: Option<Vec<f64>>,
    linear_inputs: Vec<Vec<f64>>,
    linear_outputs: Vec<Vec<f64>>,
}

impl Activations {
    fn scores(&self) -> &[f64] {
        self.linear_outputs.last().expect("at least the head layer")
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CnnModel {
    config: ArchConfig,
    convs: Vec<Conv1d>,
    linears: Vec<Linear>,
    adam: AdamState,
    mode: Mode,
}

impl CnnModel {
    /// Fresh model with weights and biases uniform in `±1/sqrt(fan_in)`.
    pub fn new(config: ArchConfig, seed: u64) -> Result<CnnModel> {
        let mut model = CnnModel::zeros(config)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut fill = |values: &mut [f64], fan_in: usize| {
            let k = 1.0 / (fan_in as f64).sqrt();
            values.iter_mut().for_each(|v| *v = rng.random_range(-k..k));
        };
        for conv in &mut model.convs {
            let fan_in = conv.in_channels * conv.kernel;
            fill(&mut conv.weight, fan_in);
            fill(&mut conv.bias, fan_in);
        }
        for lin in &mut model.linears {
            fill(&mut lin.weight, lin.inputs);
            fill(&mut lin.bias, lin.inputs);
        }
        Ok(model)
    }

    /// All parameters zero, moments zero, eval mode.
    pub fn zeros(config: ArchConfig) -> Result<CnnModel> {
        config.summary()?;
        let mut convs = Vec::new();
        let mut channels = 1;
        for &out in &config.conv_channels {
            convs.push(Conv1d::zeros(channels, out, config.conv_kernel, config.conv_padding));
            channels = out;
        }
        let mut width = config.flattened_width()?;
        let mut linears = Vec::new();
        for &out in config.fc_widths.iter().chain(std::iter::once(&config.num_classes)) {
            linears.push(Linear::zeros(width, out));
            width = out;
        }
        let mut model = CnnModel {
            config,
            convs,
            linears,
            adam: AdamState::new([]),
            mode: Mode::Eval,
        };
        model.adam = AdamState::new(model.parameters().iter().map(|p| p.len()).collect::<Vec<_>>());
        Ok(model)
    }

    pub fn config(&self) -> &ArchConfig {
        &self.config
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn set_mode(&mut self, mode: Mode) {
        self.mode = mode;
    }

    pub fn adam_state(&self) -> &AdamState {
        &self.adam
    }

    pub fn convs(&self) -> &[Conv1d] {
        &self.convs
    }

    pub fn linears(&self) -> &[Linear] {
        &self.linears
    }

    pub fn linears_mut(&mut self) -> &mut [Linear] {
        &mut self.linears
    }

    pub fn num_classes(&self) -> usize {
        self.config.num_classes
    }

    /// Parameter tensors in declared order: each conv's weight and bias, then
    /// each linear layer's weight and bias.
    pub fn parameters(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = Vec::new();
        for c in &self.convs {
            out.push(&c.weight);
            out.push(&c.bias);
        }
        for l in &self.linears {
            out.push(&l.weight);
            out.push(&l.bias);
        }
        out
    }

    pub fn parameters_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = Vec::new();
        for c in &mut self.convs {
            out.push(&mut c.weight);
            out.push(&mut c.bias);
        }
        for l in &mut self.linears {
            out.push(&mut l.weight);
            out.push(&mut l.bias);
        }
        out
    }

    pub fn tensor_names(&self) -> Vec<String> {
        let mut out = Vec::new();
        for i in 0..self.convs.len() {
            out.push(format!("conv{i}.weight"));
            out.push(format!("conv{i}.bias"));
        }
        for i in 0..self.linears.len() {
            out.push(format!("fc{i}.weight"));
            out.push(format!("fc{i}.bias"));
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.parameters().iter().map(|p| p.len()).sum()
    }

    /// Multiplies the output layer by `alpha`, which scales every raw score.
    pub fn scale_head(&mut self, alpha: f64) {
        let head = self.linears.last_mut().expect("head layer");
        head.weight.iter_mut().for_each(|w| *w *= alpha);
        head.bias.iter_mut().for_each(|b| *b *= alpha);
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.config.input_length {
            return Err(Error::Dimension(format!(
                "input of length {}, model expects {}",
                x.len(),
                self.config.input_length
            )));
        }
        Ok(())
    }

    fn forward_trace(&self, x: &[f64], mask: Option<Vec<f64>>) -> Result<Activations> {
        self.check_input(x)?;
        let pool = self.config.pool();
        let n = self.convs.len();
        let mut acts = Activations {
            conv_inputs: Vec::with_capacity(n),
            conv_input_lens: Vec::with_capacity(n),
            conv_outputs: Vec::with_capacity(n),
            pool_argmax: Vec::with_capacity(n),
            mask: None,
            linear_inputs: Vec::with_capacity(self.linears.len()),
            linear_outputs: Vec::with_capacity(self.linears.len()),
        };
        let mut h = x.to_vec();
        let mut len = x.len();
        for conv in &self.convs {
            let out = conv.forward(&h, len)?;
            let out_len = conv.output_len(len)?;
            let (pooled, arg) = pool.forward(&layers::relu(&out), conv.out_channels, out_len)?;
            acts.conv_inputs.push(std::mem::replace(&mut h, pooled));
            acts.conv_input_lens.push(len);
            acts.conv_outputs.push(out);
            acts.pool_argmax.push(arg);
            len = pool.output_len(out_len)?;
        }
        h = layers::dropout(&h, mask.as_deref())?;
        acts.mask = mask;
        let last = self.linears.len() - 1;
        for (j, lin) in self.linears.iter().enumerate() {
            let out = lin.forward(&h)?;
            let next = if j < last && self.config.hidden_relu {
                layers::relu(&out)
            } else {
                out.clone()
            };
            acts.linear_inputs.push(std::mem::replace(&mut h, next));
            acts.linear_outputs.push(out);
        }
        Ok(acts)
    }

    /// Backpropagates `grad_scores`. Parameter gradients are accumulated into
    /// `grads` when given; the input gradient is returned when `want_input`.
    fn backward(
        &self,
        acts: &Activations,
        grad_scores: &[f64],
        mut grads: Option<&mut Gradients>,
        want_input: bool,
    ) -> Result<Option<Vec<f64>>> {
        let n_conv = self.convs.len();
        let last = self.linears.len() - 1;
        let mut g = grad_scores.to_vec();
        let mut scratch = Vec::new();
        for j in (0..self.linears.len()).rev() {
            if j < last && self.config.hidden_relu {
                g = layers::relu_backward(&acts.linear_outputs[j], &g)?;
            }
            let lin = &self.linears[j];
            scratch.resize(lin.inputs, 0.0);
            let need_input = j > 0 || n_conv > 0 || want_input;
            match grads.as_deref_mut() {
                Some(gr) => {
                    let (gw, gb) = gr.pair_mut(2 * n_conv + 2 * j);
                    lin.backward(&acts.linear_inputs[j], &g, gw, gb, need_input.then_some(&mut scratch[..]))?;
                }
                None => linear_input_grad(lin, &g, &mut scratch),
            }
            if !need_input {
                return Ok(None);
            }
            std::mem::swap(&mut g, &mut scratch);
        }
        if let Some(mask) = &acts.mask {
            g.iter_mut().zip(mask).for_each(|(a, m)| *a *= m);
        }
        for c in (0..n_conv).rev() {
            let conv = &self.convs[c];
            let out_len = conv.output_len(acts.conv_input_lens[c])?;
            g = MaxPool1d::backward(&acts.pool_argmax[c], &g, conv.out_channels * out_len)?;
            g = layers::relu_backward(&acts.conv_outputs[c], &g)?;
            let need_input = c > 0 || want_input;
            scratch.resize(acts.conv_inputs[c].len(), 0.0);
            match grads.as_deref_mut() {
                Some(gr) => {
                    let (gw, gb) = gr.pair_mut(2 * c);
                    conv.backward(
                        &acts.conv_inputs[c],
                        acts.conv_input_lens[c],
                        &g,
                        gw,
                        gb,
                        need_input.then_some(&mut scratch[..]),
                    )?;
                }
                None => {
                    let mut gw = vec![0.0; conv.weight.len()];
                    let mut gb = vec![0.0; conv.bias.len()];
                    conv.backward(&acts.conv_inputs[c], acts.conv_input_lens[c], &g, &mut gw, &mut gb, Some(&mut scratch[..]))?;
                }
            }
            if !need_input {
                return Ok(None);
            }
            std::mem::swap(&mut g, &mut scratch);
        }
        Ok(Some(g))
    }

    fn require_eval(&self, what: &str) -> Result<()> {
        if self.mode != Mode::Eval {
            return Err(Error::Domain(format!("{what} requires eval mode")));
        }
        Ok(())
    }

    /// Raw scores, probabilities and predicted class. Requires eval mode.
    pub fn forward_scores(&self, x: &[f64]) -> Result<ScoreVector> {
        self.require_eval("forward_scores")?;
        Ok(ScoreVector::from_raw(self.forward_trace(x, None)?.scores().to_vec()))
    }

    pub fn predict(&self, x: &[f64]) -> Result<usize> {
        Ok(self.forward_scores(x)?.predicted)
    }

    /// Predicted class for every row, in row order.
    pub fn predict_all(&self, data: &FeatureMatrix) -> Result<Vec<usize>> {
        data.iter_rows()
            .collect::<Vec<_>>()
            .par_iter()
            .map(|row| self.predict(row))
            .collect()
    }

    /// d S_v / d x for the raw score `S_v` (not the softmax). Requires eval mode.
    pub fn input_gradient(&self, x: &[f64], class: usize) -> Result<Vec<f64>> {
        self.require_eval("input_gradient")?;
        if class >= self.config.num_classes {
            return Err(Error::Domain(format!(
                "class {class} outside [0, {})",
                self.config.num_classes
            )));
        }
        let acts = self.forward_trace(x, None)?;
        let mut seed = vec![0.0; self.config.num_classes];
        seed[class] = 1.0;
        Ok(self.backward(&acts, &seed, None, true)?.expect("input gradient requested"))
    }

    /// Scores and input gradient of the predicted class in one pass.
    pub fn predicted_gradient(&self, x: &[f64]) -> Result<(ScoreVector, Vec<f64>)> {
        self.require_eval("predicted_gradient")?;
        let acts = self.forward_trace(x, None)?;
        let scores = ScoreVector::from_raw(acts.scores().to_vec());
        let mut seed = vec![0.0; self.config.num_classes];
        seed[scores.predicted] = 1.0;
        let grad = self.backward(&acts, &seed, None, true)?.expect("input gradient requested");
        Ok((scores, grad))
    }

    /// Cross-entropy loss of one sample and its parameter gradients, with an
    /// explicit dropout mask (`None` for no dropout). Also returns the input gradient.
    pub fn loss_gradients(&self, x: &[f64], label: usize, mask: Option<&[f64]>) -> Result<(f64, Gradients, Vec<f64>)> {
        if let Some(m) = mask {
            if m.len() != self.config.flattened_width()? {
                return Err(Error::Dimension(format!("dropout mask of length {}", m.len())));
            }
        }
        let acts = self.forward_trace(x, mask.map(|m| m.to_vec()))?;
        let (loss, grad_scores) = softmax_cross_entropy(acts.scores(), label)?;
        let mut grads = Gradients::zeros_like(self);
        let gx = self.backward(&acts, &grad_scores, Some(&mut grads), true)?.expect("requested");
        Ok((loss, grads, gx))
    }

    /// Loss of one sample with an explicit mask; used by gradient checks.
    pub fn loss(&self, x: &[f64], label: usize, mask: Option<&[f64]>) -> Result<f64> {
        let acts = self.forward_trace(x, mask.map(|m| m.to_vec()))?;
        Ok(softmax_cross_entropy(acts.scores(), label)?.0)
    }

    /// Raw scores with an explicit dropout mask, regardless of mode.
    pub fn raw_scores(&self, x: &[f64], mask: Option<&[f64]>) -> Result<Vec<f64>> {
        Ok(self.forward_trace(x, mask.map(|m| m.to_vec()))?.scores().to_vec())
    }

    /// Which ReLUs are active and which positions win each pooling window,
    /// under an optional dropout mask. Two inputs (or parameter settings) with
    /// the same pattern lie on the same smooth piece of the network.
    pub fn activation_pattern(&self, x: &[f64], mask: Option<&[f64]>) -> Result<Vec<usize>> {
        let acts = self.forward_trace(x, mask.map(|m| m.to_vec()))?;
        let mut out = Vec::new();
        for (pre, arg) in acts.conv_outputs.iter().zip(&acts.pool_argmax) {
            out.extend(pre.iter().map(|&v| (v > 0.0) as usize));
            out.extend(arg);
        }
        let last = acts.linear_outputs.len() - 1;
        for o in &acts.linear_outputs[..last] {
            out.extend(o.iter().map(|&v| (v > 0.0) as usize));
        }
        Ok(out)
    }

    /// Mean cross-entropy and mean parameter gradients over `indices`.
    ///
    /// In train mode each sample gets an inverted-dropout mask drawn from
    /// its own seed in `dropout_seeds`; in eval mode no dropout is applied.
    pub fn batch_gradients(&self, data: &FeatureMatrix, indices: &[usize], dropout_seeds: &[u64]) -> Result<(f64, Gradients)> {
        if indices.is_empty() {
            return Err(Error::Empty("empty batch".into()));
        }
        if self.mode == Mode::Train && dropout_seeds.len() != indices.len() {
            return Err(Error::Dimension(format!(
                "{} dropout seeds for a batch of {}",
                dropout_seeds.len(),
                indices.len()
            )));
        }
        let n = indices.len() as f64;
        let flat = self.config.flattened_width()?;
        let chunk = indices.len().div_ceil(GRADIENT_CHUNKS).max(1);
        let positions: Vec<usize> = (0..indices.len()).collect();
        let partials: Vec<Result<(f64, Gradients)>> = positions
            .par_chunks(chunk)
            .map(|chunk| {
                let mut grads = Gradients::zeros_like(self);
                let mut loss = 0.0;
                for &pos in chunk {
                    let i = indices[pos];
                    let mask = match self.mode {
                        Mode::Train if self.config.dropout_rate > 0.0 => {
                            let mut rng = ChaCha8Rng::seed_from_u64(dropout_seeds[pos]);
                            Some(layers::dropout_mask(flat, self.config.dropout_rate, &mut rng)?)
                        }
                        _ => None,
                    };
                    let acts = self.forward_trace(data.row(i), mask)?;
                    let (l, mut gs) = softmax_cross_entropy(acts.scores(), data.labels()[i])?;
                    gs.iter_mut().for_each(|g| *g /= n);
                    loss += l;
                    self.backward(&acts, &gs, Some(&mut grads), false)?;
                }
                Ok((loss, grads))
            })
            .collect();
        let mut total = Gradients::zeros_like(self);
        let mut loss = 0.0;
        for part in partials {
            let (l, g) = part?;
            loss += l;
            total.add_assign(&g);
        }
        Ok((loss / n, total))
    }

    pub fn apply_gradients(&mut self, config: &AdamConfig, grads: &Gradients) -> Result<()> {
        let mut adam = std::mem::replace(&mut self.adam, AdamState::new([]));
        let result = {
            let mut params = self.parameters_mut();
            adam.update(config, &mut params, &grads.slices())
        };
        self.adam = adam;
        result
    }
}

fn linear_input_grad(lin: &Linear, grad_out: &[f64], out: &mut [f64]) {
    out.fill(0.0);
    for (row, &g) in lin.weight.chunks_exact(lin.inputs).zip(grad_out) {
        if g != 0.0 {
            for (d, w) in out.iter_mut().zip(row) {
                *d += g * w;
            }
        }
    }
}

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"ECNN";
pub const CHECKPOINT_VERSION: u16 = 1;

/// Where a checkpoint sits in a training run.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub seed: u64,
    pub epoch: u32,
    pub step: u32,
}

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    config: ArchConfig,
    seed: u64,
    epoch: u32,
    step: u32,
    adam_step: u64,
    tensors: Vec<TensorInfo>,
}

#[derive(Serialize, Deserialize)]
struct TensorInfo {
    name: String,
    len: usize,
}

/// Checkpoint bytes: magic `ECNN`, version u16, header length u32, JSON
/// header, then parameters, first moments and second moments as
/// little-endian f64 in declared tensor order.
pub fn encode_checkpoint(model: &CnnModel, meta: CheckpointMeta) -> Result<Vec<u8>> {
    let header = CheckpointHeader {
        config: model.config.clone(),
        seed: meta.seed,
        epoch: meta.epoch,
        step: meta.step,
        adam_step: model.adam.step,
        tensors: model
            .tensor_names()
            .into_iter()
            .zip(model.parameters())
            .map(|(name, p)| TensorInfo { name, len: p.len() })
            .collect(),
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(10 + json.len() + model.param_count() * 24);
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    let groups = [
        model.parameters(),
        model.adam.first_moment.iter().map(|v| v.as_slice()).collect(),
        model.adam.second_moment.iter().map(|v| v.as_slice()).collect(),
    ];
    for group in groups {
        for tensor in group {
            for &x in tensor {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
    }
    Ok(out)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<(CnnModel, CheckpointMeta)> {
    if bytes.len() < 10 || &bytes[..4] != CHECKPOINT_MAGIC {
        return Err(Error::Format("not a model checkpoint (bad magic)".into()));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != CHECKPOINT_VERSION {
        return Err(Error::Version {
            found: version,
            supported: CHECKPOINT_VERSION,
        });
    }
    let header_len = u32::from_le_bytes(bytes[6..10].try_into().expect("4 bytes")) as usize;
    let body = bytes
        .get(10..10 + header_len)
        .ok_or_else(|| Error::Corrupt("checkpoint header truncated".into()))?;
    let header: CheckpointHeader = serde_json::from_slice(body)?;
    let mut model = CnnModel::zeros(header.config)?;
    let sizes: Vec<usize> = model.parameters().iter().map(|p| p.len()).collect();
    if header.tensors.len() != sizes.len() || header.tensors.iter().zip(&sizes).any(|(t, &s)| t.len != s) {
        return Err(Error::Corrupt("tensor table does not match the architecture".into()));
    }
    let total: usize = sizes.iter().sum();
    let data = &bytes[10 + header_len..];
    if data.len() != total * 3 * 8 {
        return Err(Error::Corrupt(format!(
            "expected {} bytes of tensor data, found {}",
            total * 24,
            data.len()
        )));
    }
    let mut values = data
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")));
    for tensor in model.parameters_mut() {
        tensor.iter_mut().for_each(|x| *x = values.next().expect("length checked"));
    }
    for tensor in model.adam.first_moment.iter_mut().chain(model.adam.second_moment.iter_mut()) {
        tensor.iter_mut().for_each(|x| *x = values.next().expect("length checked"));
    }
    model.adam.step = header.adam_step;
    Ok((
        model,
        CheckpointMeta {
            seed: header.seed,
            epoch: header.epoch,
            step: header.step,
        },
    ))
}

pub fn save_checkpoint(model: &CnnModel, meta: CheckpointMeta, path: &Path) -> Result<()> {
    fs::write(path, encode_checkpoint(model, meta)?)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(CnnModel, CheckpointMeta)> {
    decode_checkpoint(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_config() -> ArchConfig {
        ArchConfig {
            input_length: 12,
            conv_channels: vec![2, 3],
            fc_widths: vec![6],
            ..ArchConfig::reference(12, 5)
        }
    }

    #[test]
    fn reference_shapes() {
        let rows = ArchConfig::reference(1229, 4).summary().unwrap();
        let shapes: Vec<Vec<usize>> = rows.iter().map(|r| r.output_shape.clone()).collect();
        assert_eq!(
            shapes,
            vec![
                vec![16, 1229],
                vec![16, 615],
                vec![32, 615],
                vec![32, 308],
                vec![64, 308],
                vec![64, 155],
                vec![9920],
                vec![128],
                vec![128],
                vec![4]
            ]
        );
        let params: Vec<usize> = rows.iter().map(|r| r.params).collect();
        assert_eq!(params, vec![64, 0, 1568, 0, 6208, 0, 0, 1_269_888, 16_512, 516]);
    }

    #[test]
    fn reference_param_counts() {
        assert_eq!(param_count(&ArchConfig::reference(1229, 4)).unwrap().0, 1_294_756);
        let (total, table) = param_count(&ArchConfig::reference(1229, 5)).unwrap();
        assert_eq!(table.last().unwrap().params, 645);
        assert_eq!(total, 1_294_885);
        assert_eq!(CnnModel::zeros(ArchConfig::reference(1229, 4)).unwrap().param_count(), 1_294_756);
    }

    #[test]
    fn probabilities_and_determinism() {
        let model = CnnModel::new(small_config(), 5).unwrap();
        let x: Vec<f64> = (0..12).map(|i| ((i * 7) % 5) as f64 / 5.0 - 0.4).collect();
        let a = model.forward_scores(&x).unwrap();
        let b = model.forward_scores(&x).unwrap();
        assert_eq!(a, b);
        assert!((a.probabilities.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(matches!(model.forward_scores(&x[..11]), Err(Error::Dimension(_))));
    }

    #[test]
    fn train_mode_blocks_eval_only_calls() {
        let mut model = CnnModel::new(small_config(), 5).unwrap();
        model.set_mode(Mode::Train);
        assert!(model.forward_scores(&[0.0; 12]).is_err());
        assert!(model.input_gradient(&[0.0; 12], 0).is_err());
    }

    #[test]
    fn input_gradient_class_range() {
        let model = CnnModel::new(small_config(), 5).unwrap();
        assert!(matches!(model.input_gradient(&[0.0; 12], 5), Err(Error::Domain(_))));
        assert_eq!(model.input_gradient(&[0.0; 12], 4).unwrap().len(), 12);
    }

    #[test]
    fn linear_model_gradient_is_weight_row() {
        let model = CnnModel::new(ArchConfig::linear(7, 5), 11).unwrap();
        let x = [0.1, -0.3, 0.5, 0.0, 0.9, -1.0, 0.2];
        for v in 0..5 {
            let g = model.input_gradient(&x, v).unwrap();
            assert_eq!(g.as_slice(), &model.linears()[0].weight[v * 7..(v + 1) * 7]);
            // S_v(x) = S_v(0) + sum_p w_p x_p holds exactly up to rounding
            let s0 = model.forward_scores(&[0.0; 7]).unwrap().raw[v];
            let sx = model.forward_scores(&x).unwrap().raw[v];
            let taylor = s0 + g.iter().zip(&x).map(|(a, b)| a * b).sum::<f64>();
            assert!((sx - taylor).abs() < 1e-12);
        }
    }

    #[test]
    fn checkpoint_round_trip() {
        let mut model = CnnModel::new(small_config(), 2).unwrap();
        let grads = Gradients {
            tensors: model.parameters().iter().map(|p| vec![0.01; p.len()]).collect(),
        };
        model.apply_gradients(&AdamConfig::default(), &grads).unwrap();
        let meta = CheckpointMeta { seed: 2, epoch: 3, step: 0 };
        let bytes = encode_checkpoint(&model, meta).unwrap();
        let (back, meta2) = decode_checkpoint(&bytes).unwrap();
        assert_eq!(meta, meta2);
        assert_eq!(back, model);
        assert_eq!(encode_checkpoint(&back, meta).unwrap(), bytes);

        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode_checkpoint(&bad), Err(Error::Format(_))));
        assert!(matches!(decode_checkpoint(&bytes[..bytes.len() - 8]), Err(Error::Corrupt(_))));
    }

    #[test]
    fn scaling_the_head_scales_scores() {
        let model = CnnModel::new(small_config(), 8).unwrap();
        let mut scaled = model.clone();
        scaled.scale_head(3.0);
        let x = [0.25; 12];
        let a = model.forward_scores(&x).unwrap();
        let b = scaled.forward_scores(&x).unwrap();
        for (s, t) in a.raw.iter().zip(&b.raw) {
            assert!((3.0 * s - t).abs() < 1e-12);
        }
        assert_eq!(a.predicted, b.predicted);
    }
}
