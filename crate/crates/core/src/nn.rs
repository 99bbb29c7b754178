//! Layered models: layer kinds, seeded initialization, forward evaluation,
//! and the label-smoothed cross-entropy objective.

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::{argmax_rows, Tensor};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

/// Stable identity of one parameter tensor: (layer index, param index).
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ParamId {
    pub layer: usize,
    pub param: usize,
}

impl std::fmt::Display for ParamId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}.{}", self.layer, self.param)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum LayerKind {
    /// Affine map with optional relu.
    Linear { relu: bool },
    /// 3x3 conv (stride 1, pad 1) + relu + optional 2x2 max-pool.
    Conv2dBlock { pool: bool },
    /// Per-sample channel normalization with learnable per-channel scale and
    /// shift.
    NormAffine,
    /// Affine map to class logits.
    ClassifierHead,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub frozen: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    pub name: String,
    pub kind: LayerKind,
    pub params: Vec<Param>,
    /// Activations of this layer are exported for k-NN probes.
    pub probe_point: bool,
}

/// Whether parameter leaves entered on a tape track gradients.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LeafMode {
    /// Gradients for unfrozen parameters only.
    Trainable,
    /// Gradients for every parameter, frozen or not.
    All,
    /// Pure inference; nothing recorded.
    None,
}

/// Parameter vars for a forward pass, keyed by identity.
pub type ModelVars = BTreeMap<ParamId, Var>;

/// Output of a forward pass, with per-probe-layer activations when requested.
pub struct ModelIo {
    pub output: Var,
    pub probes: Vec<(usize, Var)>,
}

/// An ordered sequence of named parameterized layers.
#[derive(Clone, Debug, PartialEq)]
pub struct LayeredModel {
    pub layers: Vec<Layer>,
    /// Per-sample input shape: `[features]` or `[channels, height, width]`.
    pub input_shape: Vec<usize>,
}

fn init_stream(seed: u64, layer: usize, param: usize) -> rand_chacha::ChaCha8Rng {
    crate::rng::stream(seed, "init", layer as u64, param as u64)
}

/// Draw one parameter tensor from its layer's initialization distribution:
/// fan-in-scaled uniform weights, zero biases, unit scales, zero shifts.
fn draw_param(kind: LayerKind, param_idx: usize, shape: &[usize], seed: u64, layer: usize) -> Tensor {
    match (kind, param_idx) {
        (LayerKind::Linear { .. } | LayerKind::ClassifierHead, 0) => {
            let bound = 1.0 / (shape[0] as f64).sqrt();
            let mut rng = init_stream(seed, layer, param_idx);
            Tensor::uniform(shape, -bound, bound, &mut rng)
        }
        (LayerKind::Conv2dBlock { .. }, 0) => {
            let fan_in = shape[1] * shape[2] * shape[3];
            let bound = 1.0 / (fan_in as f64).sqrt();
            let mut rng = init_stream(seed, layer, param_idx);
            Tensor::uniform(shape, -bound, bound, &mut rng)
        }
        (LayerKind::NormAffine, 0) => Tensor::full(shape, 1.0),
        _ => Tensor::zeros(shape),
    }
}

impl Layer {
    fn build(name: &str, kind: LayerKind, shapes: &[(&str, Vec<usize>)], seed: u64, layer: usize, probe: bool) -> Self {
        let params = shapes
            .iter()
            .enumerate()
            .map(|(pi, (pname, shape))| Param {
                name: (*pname).to_string(),
                value: draw_param(kind, pi, shape, seed, layer),
                frozen: false,
            })
            .collect();
        Layer {
            name: name.to_string(),
            kind,
            params,
            probe_point: probe,
        }
    }

    pub fn linear(name: &str, in_dim: usize, out_dim: usize, relu: bool, seed: u64, layer: usize, probe: bool) -> Self {
        Layer::build(
            name,
            LayerKind::Linear { relu },
            &[("weight", vec![in_dim, out_dim]), ("bias", vec![out_dim])],
            seed,
            layer,
            probe,
        )
    }

    pub fn conv_block(name: &str, in_ch: usize, out_ch: usize, pool: bool, seed: u64, layer: usize, probe: bool) -> Self {
        Layer::build(
            name,
            LayerKind::Conv2dBlock { pool },
            &[("weight", vec![out_ch, in_ch, 3, 3]), ("bias", vec![out_ch])],
            seed,
            layer,
            probe,
        )
    }

    pub fn norm_affine(name: &str, channels: usize, seed: u64, layer: usize) -> Self {
        Layer::build(
            name,
            LayerKind::NormAffine,
            &[("gamma", vec![channels]), ("beta", vec![channels])],
            seed,
            layer,
            false,
        )
    }

    pub fn head(name: &str, in_dim: usize, classes: usize, seed: u64, layer: usize) -> Self {
        Layer::build(
            name,
            LayerKind::ClassifierHead,
            &[("weight", vec![in_dim, classes]), ("bias", vec![classes])],
            seed,
            layer,
            false,
        )
    }
}

impl LayeredModel {
    /// Validate layer and parameter naming and wrap the layers into a model.
    pub fn new(layers: Vec<Layer>, input_shape: Vec<usize>) -> Result<Self> {
        let mut names = std::collections::BTreeSet::new();
        for layer in &layers {
            if !names.insert(layer.name.clone()) {
                return Err(Error::Config(format!("duplicate layer name {}", layer.name)));
            }
            let mut pnames = std::collections::BTreeSet::new();
            for p in &layer.params {
                if !pnames.insert(p.name.clone()) {
                    return Err(Error::Config(format!(
                        "duplicate parameter name {} in layer {}",
                        p.name, layer.name
                    )));
                }
            }
            if layer.kind == LayerKind::NormAffine && layer.params.len() != 2 {
                return Err(Error::Config(format!(
                    "norm-affine layer {} must hold exactly gamma and beta",
                    layer.name
                )));
            }
        }
        Ok(LayeredModel { layers, input_shape })
    }

    /// Fully-connected relu network: `hidden` layer widths, then a classifier
    /// head. With `with_affine`, a norm-affine layer follows each hidden
    /// linear layer.
    pub fn mlp(input_dim: usize, hidden: &[usize], classes: usize, with_affine: bool, seed: u64) -> Self {
        let mut layers = Vec::new();
        let mut dim = input_dim;
        for (i, &h) in hidden.iter().enumerate() {
            let li = layers.len();
            layers.push(Layer::linear(&format!("fc{i}"), dim, h, true, seed, li, true));
            if with_affine {
                let li = layers.len();
                layers.push(Layer::norm_affine(&format!("affine{i}"), h, seed, li));
            }
            dim = h;
        }
        let li = layers.len();
        layers.push(Layer::head("head", dim, classes, seed, li));
        LayeredModel {
            layers,
            input_shape: vec![input_dim],
        }
    }

    /// Convolutional network: one conv block per entry of `channels` (each
    /// with 2x2 pooling), spatial averaging, then a classifier head.
    pub fn cnn(input: (usize, usize, usize), channels: &[usize], classes: usize, with_affine: bool, seed: u64) -> Self {
        let (c0, h, w) = input;
        let mut layers = Vec::new();
        let mut ch = c0;
        for (i, &c) in channels.iter().enumerate() {
            let li = layers.len();
            layers.push(Layer::conv_block(&format!("conv{i}"), ch, c, true, seed, li, true));
            if with_affine {
                let li = layers.len();
                layers.push(Layer::norm_affine(&format!("affine{i}"), c, seed, li));
            }
            ch = c;
        }
        let li = layers.len();
        layers.push(Layer::head("head", ch, classes, seed, li));
        LayeredModel {
            layers,
            input_shape: vec![c0, h, w],
        }
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = Vec::new();
        for (li, layer) in self.layers.iter().enumerate() {
            for pi in 0..layer.params.len() {
                ids.push(ParamId { layer: li, param: pi });
            }
        }
        ids
    }

    pub fn param(&self, id: ParamId) -> Result<&Param> {
        self.layers
            .get(id.layer)
            .and_then(|l| l.params.get(id.param))
            .ok_or_else(|| Error::Lookup(format!("unknown parameter identity {id}")))
    }

    pub fn param_mut(&mut self, id: ParamId) -> Result<&mut Param> {
        self.layers
            .get_mut(id.layer)
            .and_then(|l| l.params.get_mut(id.param))
            .ok_or_else(|| Error::Lookup(format!("unknown parameter identity {id}")))
    }

    /// Total scalar parameter count.
    pub fn num_params(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.params.iter().map(|p| p.value.numel()).sum::<usize>())
            .sum()
    }

    pub fn class_count(&self) -> usize {
        self.layers
            .iter()
            .rev()
            .find(|l| l.kind == LayerKind::ClassifierHead)
            .map(|l| l.params[0].value.shape()[1])
            .unwrap_or(0)
    }

    /// Feature dimension entering the classifier head.
    pub fn head_in_dim(&self) -> Result<usize> {
        self.layers
            .iter()
            .rev()
            .find(|l| l.kind == LayerKind::ClassifierHead)
            .map(|l| l.params[0].value.shape()[0])
            .ok_or_else(|| Error::Config("model has no classifier head".into()))
    }

    /// Replace the classifier head with a freshly initialized one for
    /// `classes` outputs.
    pub fn replace_head(&mut self, classes: usize, seed: u64) -> Result<()> {
        let in_dim = self.head_in_dim()?;
        let li = self
            .layers
            .iter()
            .rposition(|l| l.kind == LayerKind::ClassifierHead)
            .expect("head_in_dim checked presence");
        let name = self.layers[li].name.clone();
        let probe = self.layers[li].probe_point;
        self.layers[li] = Layer::head(&name, in_dim, classes, seed, li);
        self.layers[li].probe_point = probe;
        Ok(())
    }

    /// Redraw one parameter from its initialization distribution.
    pub fn reinit_param(&mut self, id: ParamId, seed: u64) -> Result<()> {
        let kind = self
            .layers
            .get(id.layer)
            .ok_or_else(|| Error::Lookup(format!("unknown parameter identity {id}")))?
            .kind;
        let shape = self.param(id)?.value.shape().to_vec();
        let fresh = draw_param(kind, id.param, &shape, seed, id.layer);
        self.param_mut(id)?.value = fresh;
        Ok(())
    }

    /// Enter all parameters on a tape as leaves.
    pub fn leaves(&self, tape: &mut Tape, mode: LeafMode) -> ModelVars {
        let mut vars = ModelVars::new();
        for (li, layer) in self.layers.iter().enumerate() {
            for (pi, p) in layer.params.iter().enumerate() {
                let grad = match mode {
                    LeafMode::Trainable => !p.frozen,
                    LeafMode::All => true,
                    LeafMode::None => false,
                };
                let id = ParamId { layer: li, param: pi };
                vars.insert(id, tape.leaf(p.value.clone().with_requires_grad(grad)));
            }
        }
        vars
    }

    /// Forward pass through every layer. `input` must already be a var on the
    /// same tape, shaped `[batch, features]` or `[batch, c, h, w]`.
    pub fn forward(&self, tape: &mut Tape, vars: &ModelVars, input: &Var, collect_probes: bool) -> Result<ModelIo> {
        let mut x = input.clone();
        let mut probes = Vec::new();
        for (li, layer) in self.layers.iter().enumerate() {
            let pv = |pi: usize| -> Result<&Var> {
                vars.get(&ParamId { layer: li, param: pi })
                    .ok_or_else(|| Error::Contract(format!("missing var for parameter {li}.{pi}")))
            };
            x = match layer.kind {
                LayerKind::Linear { relu } => {
                    let x2 = as_features(tape, &x)?;
                    let y = tape.matmul(&x2, pv(0)?)?;
                    let y = tape.add(&y, pv(1)?)?;
                    if relu {
                        tape.relu(&y)?
                    } else {
                        y
                    }
                }
                LayerKind::ClassifierHead => {
                    let x2 = as_features(tape, &x)?;
                    let y = tape.matmul(&x2, pv(0)?)?;
                    tape.add(&y, pv(1)?)?
                }
                LayerKind::Conv2dBlock { pool } => {
                    let y = tape.conv2d(&x, pv(0)?)?;
                    let y = tape.add(&y, pv(1)?)?;
                    let y = tape.relu(&y)?;
                    if pool {
                        tape.max_pool2(&y)?
                    } else {
                        y
                    }
                }
                LayerKind::NormAffine => tape.norm_affine(&x, pv(0)?, pv(1)?)?,
            };
            if collect_probes && layer.probe_point {
                probes.push((li, x.clone()));
            }
        }
        Ok(ModelIo { output: x, probes })
    }

    /// Single layer forward outside any model context.
    pub fn layer_forward(layer: &Layer, input: &Tensor) -> Result<Tensor> {
        let model = LayeredModel {
            layers: vec![layer.clone()],
            input_shape: input.shape()[1..].to_vec(),
        };
        let mut tape = Tape::new();
        let vars = model.leaves(&mut tape, LeafMode::None);
        let x = tape.leaf(input.clone());
        Ok(model.forward(&mut tape, &vars, &x, false)?.output.into_value())
    }

    /// Class logits for a batch, without gradient tracking.
    pub fn logits(&self, inputs: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let vars = self.leaves(&mut tape, LeafMode::None);
        let x = tape.leaf(inputs.clone());
        Ok(self.forward(&mut tape, &vars, &x, false)?.output.into_value())
    }

    /// Predicted class per sample.
    pub fn predict(&self, inputs: &Tensor) -> Result<Vec<usize>> {
        let logits = self.logits(inputs)?;
        let shape = logits.shape().to_vec();
        Ok(argmax_rows(logits.data(), shape[0], shape[1]))
    }

    /// Flatten all parameters into one vector, in ParamId order.
    pub fn flatten_params(&self) -> Tensor {
        let mut data = Vec::with_capacity(self.num_params());
        for layer in &self.layers {
            for p in &layer.params {
                data.extend_from_slice(p.value.data());
            }
        }
        let n = data.len();
        Tensor::new(vec![n], data).expect("flat shape always consistent")
    }

    /// Write a flat vector back into the parameters, in ParamId order.
    pub fn unflatten_params(&mut self, flat: &Tensor) -> Result<()> {
        if flat.numel() != self.num_params() {
            return Err(Error::Contract(format!(
                "flat vector has {} elements, model has {}",
                flat.numel(),
                self.num_params()
            )));
        }
        let mut offset = 0;
        for layer in &mut self.layers {
            for p in &mut layer.params {
                let n = p.value.numel();
                p.value
                    .data_mut()
                    .copy_from_slice(&flat.data()[offset..offset + n]);
                offset += n;
            }
        }
        Ok(())
    }
}

/// Collapse a 4-d activation into per-channel features via spatial averaging;
/// 2-d activations pass through.
fn as_features(tape: &mut Tape, x: &Var) -> Result<Var> {
    if x.value().shape().len() == 4 {
        tape.spatial_mean(x)
    } else {
        Ok(x.clone())
    }
}

/// Cross-entropy with label smoothing settings.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub smoothing: f64,
    pub classes: usize,
}

impl LossConfig {
    pub fn new(smoothing: f64, classes: usize) -> Result<Self> {
        if !(0.0..1.0).contains(&smoothing) {
            return Err(Error::Config(format!(
                "label_smoothing must lie in [0, 1), got {smoothing}"
            )));
        }
        if classes < 2 {
            return Err(Error::Config(format!("class count must be >= 2, got {classes}")));
        }
        Ok(LossConfig { smoothing, classes })
    }

    /// Entropy of the smoothed target distribution for a given true class.
    pub fn target_entropy(&self) -> f64 {
        let c = self.classes as f64;
        let on = (1.0 - self.smoothing) + self.smoothing / c;
        let off = self.smoothing / c;
        let mut h = -on * on.ln();
        if off > 0.0 {
            h -= (c - 1.0) * off * off.ln();
        }
        h
    }
}

/// Mean over the batch of -sum_c target_c * log softmax(logits)_c with
/// target = (1-alpha) * onehot + alpha / C.
pub fn smoothed_cross_entropy(tape: &mut Tape, logits: &Var, labels: &[usize], alpha: f64) -> Result<Var> {
    let shape = logits.value().shape().to_vec();
    if shape.len() != 2 || shape[0] != labels.len() {
        return Err(Error::Shape(format!(
            "smoothed_cross_entropy: logits {shape:?} vs {} labels",
            labels.len()
        )));
    }
    let (batch, classes) = (shape[0], shape[1]);
    let mut targets = vec![alpha / classes as f64; batch * classes];
    for (r, &label) in labels.iter().enumerate() {
        if label >= classes {
            return Err(Error::Lookup(format!(
                "label {label} out of range for {classes} classes"
            )));
        }
        targets[r * classes + label] += 1.0 - alpha;
    }
    let targets = tape.leaf(Tensor::new(vec![batch, classes], targets)?);
    let logsm = tape.log_softmax(logits)?;
    let weighted = tape.mul_elem(&targets, &logsm)?;
    let total = tape.sum_all(&weighted)?;
    tape.scalar_mul(&total, -1.0 / batch as f64)
}

/// Fraction of rows whose argmax equals the label.
pub fn accuracy(logits: &Tensor, labels: &[usize]) -> f64 {
    let shape = logits.shape();
    let preds = argmax_rows(logits.data(), shape[0], shape[1]);
    let hits = preds.iter().zip(labels).filter(|(p, l)| p == l).count();
    hits as f64 / labels.len().max(1) as f64
}
