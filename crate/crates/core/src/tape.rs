//! Reverse-mode automatic differentiation on a linear tape.
//!
//! Tensors enter a computation as leaves; each operation validates shapes,
//! checks its output for non-finite values, and records a node on the tape
//! only when some input requires gradients. One backward sweep over the tape
//! in reverse insertion order visits every recorded node exactly once.

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use std::collections::BTreeMap;

/// Operation vocabulary for [`Tape::apply`].
#[derive(Clone, Debug, PartialEq)]
pub enum OpKind {
    /// [m,k] x [k,n] -> [m,n]
    MatMul,
    /// 3x3 kernel, stride 1, pad 1: [B,Ci,H,W] x [Co,Ci,3,3] -> [B,Co,H,W]
    Conv2d,
    /// Elementwise; also broadcasts [B,F]+[F] and [B,C,H,W]+[C] bias forms.
    Add,
    Sub,
    ScalarMul(f64),
    Relu,
    /// [B,C,H,W] -> [B,C], mean over the spatial extent.
    SpatialMean,
    /// [B,F] -> [B], mean over features.
    FeatureMean,
    /// exp-normalize over the last dimension of a [B,C] matrix.
    Softmax,
    /// Numerically stable log(softmax) over rows of a [B,C] matrix.
    LogSoftmax,
    Log,
    MulElem,
    Reshape(Vec<usize>),
    /// 2x2 max-pool, stride 2; spatial extents must be even.
    MaxPool2,
    /// Per-sample normalization over the channel dimension with an affine
    /// scale/shift per channel: (x, gamma, beta).
    NormAffine,
    /// Sum of all entries -> scalar.
    SumAll,
}

impl OpKind {
    pub fn name(&self) -> &'static str {
        match self {
            OpKind::MatMul => "matmul",
            OpKind::Conv2d => "conv2d",
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::ScalarMul(_) => "scalar-mul",
            OpKind::Relu => "relu",
            OpKind::SpatialMean => "spatial-mean",
            OpKind::FeatureMean => "feature-mean",
            OpKind::Softmax => "exp-normalize",
            OpKind::LogSoftmax => "log-softmax",
            OpKind::Log => "log",
            OpKind::MulElem => "elementwise-mul",
            OpKind::Reshape(_) => "reshape",
            OpKind::MaxPool2 => "max-pool",
            OpKind::NormAffine => "norm-affine",
            OpKind::SumAll => "sum-all",
        }
    }
}

/// A value flowing through a computation: the tensor plus its tape node, if
/// gradients flow through it.
#[derive(Clone, Debug)]
pub struct Var {
    tensor: Tensor,
    node: Option<usize>,
}

impl Var {
    pub fn value(&self) -> &Tensor {
        &self.tensor
    }

    pub fn into_value(self) -> Tensor {
        self.tensor
    }

    pub fn is_tracked(&self) -> bool {
        self.node.is_some()
    }
}

const EPS_NORM: f64 = 1e-12;

/// Saved state for one recorded node's backward pass.
enum Back {
    Leaf,
    MatMul { a: Tensor, b: Tensor },
    Conv2d { input: Tensor, kernel: Tensor },
    AddSame,
    AddRow { rows: usize, cols: usize },
    AddChan { b: usize, c: usize, s: usize },
    Sub,
    ScalarMul(f64),
    Relu { positive: Vec<bool> },
    SpatialMean { b: usize, c: usize, s: usize },
    FeatureMean { b: usize, f: usize },
    Softmax { out: Vec<f64>, rows: usize, cols: usize },
    LogSoftmax { softmax: Vec<f64>, rows: usize, cols: usize },
    Log { input: Tensor },
    MulElem { a: Tensor, b: Tensor },
    Reshape,
    MaxPool2 { argmax: Vec<usize>, in_numel: usize },
    NormAffine { xhat: Vec<f64>, inv_std: Vec<f64>, gamma: Vec<f64>, b: usize, c: usize, s: usize },
    SumAll { in_numel: usize },
}

struct Node {
    inputs: [Option<usize>; 3],
    back: Back,
    out_shape: Vec<usize>,
}

/// Gradients of a scalar loss with respect to every gradient-requiring leaf.
pub struct GradientMap {
    grads: BTreeMap<usize, Tensor>,
}

impl GradientMap {
    /// Gradient for a leaf var, if it required gradients.
    pub fn get(&self, var: &Var) -> Option<&Tensor> {
        var.node.and_then(|id| self.grads.get(&id))
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}

/// Records operations for one forward computation; consumed by [`Tape::backward`].
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn shape_err(op: &str, detail: String) -> Error {
    Error::Shape(format!("{op}: {detail}"))
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    /// Number of recorded nodes (leaves plus operations that need gradients).
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Enter a tensor into the computation. Tensors with `requires_grad` are
    /// recorded as leaves and receive an entry in the GradientMap.
    pub fn leaf(&mut self, tensor: Tensor) -> Var {
        if tensor.requires_grad() {
            let id = self.nodes.len();
            self.nodes.push(Node {
                inputs: [None; 3],
                back: Back::Leaf,
                out_shape: tensor.shape().to_vec(),
            });
            Var { tensor, node: Some(id) }
        } else {
            Var { tensor, node: None }
        }
    }

    /// Generic dispatch over the operation vocabulary.
    pub fn apply(&mut self, kind: &OpKind, inputs: &[&Var]) -> Result<Var> {
        let want = match kind {
            OpKind::MatMul
            | OpKind::Add
            | OpKind::Sub
            | OpKind::MulElem
            | OpKind::Conv2d => 2,
            OpKind::NormAffine => 3,
            _ => 1,
        };
        if inputs.len() != want {
            return Err(Error::Contract(format!(
                "{} takes {want} input(s), got {}",
                kind.name(),
                inputs.len()
            )));
        }
        match kind {
            OpKind::MatMul => self.matmul(inputs[0], inputs[1]),
            OpKind::Conv2d => self.conv2d(inputs[0], inputs[1]),
            OpKind::Add => self.add(inputs[0], inputs[1]),
            OpKind::Sub => self.sub(inputs[0], inputs[1]),
            OpKind::ScalarMul(c) => self.scalar_mul(inputs[0], *c),
            OpKind::Relu => self.relu(inputs[0]),
            OpKind::SpatialMean => self.spatial_mean(inputs[0]),
            OpKind::FeatureMean => self.feature_mean(inputs[0]),
            OpKind::Softmax => self.softmax(inputs[0]),
            OpKind::LogSoftmax => self.log_softmax(inputs[0]),
            OpKind::Log => self.log(inputs[0]),
            OpKind::MulElem => self.mul_elem(inputs[0], inputs[1]),
            OpKind::Reshape(shape) => self.reshape(inputs[0], shape.clone()),
            OpKind::MaxPool2 => self.max_pool2(inputs[0]),
            OpKind::NormAffine => self.norm_affine(inputs[0], inputs[1], inputs[2]),
            OpKind::SumAll => self.sum_all(inputs[0]),
        }
    }

    fn record(
        &mut self,
        op: &'static str,
        out: Tensor,
        inputs: [Option<usize>; 3],
        back: impl FnOnce() -> Back,
    ) -> Result<Var> {
        if !out.all_finite() {
            return Err(Error::NonFinite(format!("{op} produced NaN or infinity")));
        }
        let needs = inputs.iter().any(Option::is_some);
        if needs {
            let id = self.nodes.len();
            self.nodes.push(Node {
                inputs,
                back: back(),
                out_shape: out.shape().to_vec(),
            });
            Ok(Var { tensor: out, node: Some(id) })
        } else {
            Ok(Var { tensor: out, node: None })
        }
    }

    pub fn matmul(&mut self, a: &Var, b: &Var) -> Result<Var> {
        let (sa, sb) = (a.tensor.shape(), b.tensor.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(shape_err("matmul", format!("{sa:?} x {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let (da, db) = (a.tensor.data(), b.tensor.data());
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for p in 0..k {
                let av = da[i * k + p];
                if av == 0.0 {
                    continue;
                }
                let brow = &db[p * n..(p + 1) * n];
                let orow = &mut out[i * n..(i + 1) * n];
                for j in 0..n {
                    orow[j] += av * brow[j];
                }
            }
        }
        let out = Tensor::new(vec![m, n], out)?;
        self.record("matmul", out, [a.node, b.node, None], || Back::MatMul {
            a: a.tensor.clone(),
            b: b.tensor.clone(),
        })
    }

    pub fn conv2d(&mut self, input: &Var, kernel: &Var) -> Result<Var> {
        let (si, sk) = (input.tensor.shape(), kernel.tensor.shape());
        if si.len() != 4 || sk.len() != 4 || sk[2] != 3 || sk[3] != 3 || si[1] != sk[1] {
            return Err(shape_err("conv2d", format!("input {si:?}, kernel {sk:?}")));
        }
        let (bs, ci, h, w) = (si[0], si[1], si[2], si[3]);
        let co = sk[0];
        let (di, dk) = (input.tensor.data(), kernel.tensor.data());
        let mut out = vec![0.0; bs * co * h * w];
        for b in 0..bs {
            for o in 0..co {
                for y in 0..h {
                    for x in 0..w {
                        let mut acc = 0.0;
                        for c in 0..ci {
                            for dy in 0..3 {
                                let iy = y as isize + dy as isize - 1;
                                if iy < 0 || iy >= h as isize {
                                    continue;
                                }
                                for dx in 0..3 {
                                    let ix = x as isize + dx as isize - 1;
                                    if ix < 0 || ix >= w as isize {
                                        continue;
                                    }
                                    acc += di[((b * ci + c) * h + iy as usize) * w + ix as usize]
                                        * dk[((o * ci + c) * 3 + dy) * 3 + dx];
                                }
                            }
                        }
                        out[((b * co + o) * h + y) * w + x] = acc;
                    }
                }
            }
        }
        let out = Tensor::new(vec![bs, co, h, w], out)?;
        self.record("conv2d", out, [input.node, kernel.node, None], || Back::Conv2d {
            input: input.tensor.clone(),
            kernel: kernel.tensor.clone(),
        })
    }

    pub fn add(&mut self, a: &Var, b: &Var) -> Result<Var> {
        let (sa, sb) = (a.tensor.shape(), b.tensor.shape());
        let (da, db) = (a.tensor.data(), b.tensor.data());
        if sa == sb {
            let data = da.iter().zip(db).map(|(x, y)| x + y).collect();
            let out = Tensor::new(sa.to_vec(), data)?;
            return self.record("add", out, [a.node, b.node, None], || Back::AddSame);
        }
        // [B,F] + [F]: per-row bias
        if sa.len() == 2 && sb.len() == 1 && sa[1] == sb[0] {
            let (rows, cols) = (sa[0], sa[1]);
            let mut data = da.to_vec();
            for r in 0..rows {
                for c in 0..cols {
                    data[r * cols + c] += db[c];
                }
            }
            let out = Tensor::new(sa.to_vec(), data)?;
            return self.record("add", out, [a.node, b.node, None], || Back::AddRow { rows, cols });
        }
        // [B,C,H,W] + [C]: per-channel bias
        if sa.len() == 4 && sb.len() == 1 && sa[1] == sb[0] {
            let (bs, c, s) = (sa[0], sa[1], sa[2] * sa[3]);
            let mut data = da.to_vec();
            for bi in 0..bs {
                for ci in 0..c {
                    let base = (bi * c + ci) * s;
                    for si in 0..s {
                        data[base + si] += db[ci];
                    }
                }
            }
            let out = Tensor::new(sa.to_vec(), data)?;
            return self.record("add", out, [a.node, b.node, None], || Back::AddChan { b: bs, c, s });
        }
        Err(shape_err("add", format!("{sa:?} + {sb:?}")))
    }

    pub fn sub(&mut self, a: &Var, b: &Var) -> Result<Var> {
        let (sa, sb) = (a.tensor.shape(), b.tensor.shape());
        if sa != sb {
            return Err(shape_err("sub", format!("{sa:?} - {sb:?}")));
        }
        let data = a
            .tensor
            .data()
            .iter()
            .zip(b.tensor.data())
            .map(|(x, y)| x - y)
            .collect();
        let out = Tensor::new(sa.to_vec(), data)?;
        self.record("sub", out, [a.node, b.node, None], || Back::Sub)
    }

    pub fn scalar_mul(&mut self, a: &Var, c: f64) -> Result<Var> {
        let data = a.tensor.data().iter().map(|x| x * c).collect();
        let out = Tensor::new(a.tensor.shape().to_vec(), data)?;
        self.record("scalar-mul", out, [a.node, None, None], || Back::ScalarMul(c))
    }

    pub fn relu(&mut self, a: &Var) -> Result<Var> {
        let data: Vec<f64> = a.tensor.data().iter().map(|&x| x.max(0.0)).collect();
        let out = Tensor::new(a.tensor.shape().to_vec(), data)?;
        self.record("relu", out, [a.node, None, None], || Back::Relu {
            positive: a.tensor.data().iter().map(|&x| x > 0.0).collect(),
        })
    }

    pub fn spatial_mean(&mut self, a: &Var) -> Result<Var> {
        let sa = a.tensor.shape();
        if sa.len() != 4 {
            return Err(shape_err("spatial-mean", format!("expected 4-d input, got {sa:?}")));
        }
        let (bs, c, s) = (sa[0], sa[1], sa[2] * sa[3]);
        let da = a.tensor.data();
        let mut data = vec![0.0; bs * c];
        for b in 0..bs {
            for ci in 0..c {
                let base = (b * c + ci) * s;
                data[b * c + ci] = da[base..base + s].iter().sum::<f64>() / s as f64;
            }
        }
        let out = Tensor::new(vec![bs, c], data)?;
        self.record("spatial-mean", out, [a.node, None, None], || Back::SpatialMean { b: bs, c, s })
    }

    pub fn feature_mean(&mut self, a: &Var) -> Result<Var> {
        let sa = a.tensor.shape();
        if sa.len() != 2 {
            return Err(shape_err("feature-mean", format!("expected 2-d input, got {sa:?}")));
        }
        let (b, f) = (sa[0], sa[1]);
        let da = a.tensor.data();
        let data = (0..b)
            .map(|r| da[r * f..(r + 1) * f].iter().sum::<f64>() / f as f64)
            .collect();
        let out = Tensor::new(vec![b], data)?;
        self.record("feature-mean", out, [a.node, None, None], || Back::FeatureMean { b, f })
    }

    fn rows_cols(op: &str, t: &Tensor) -> Result<(usize, usize)> {
        let s = t.shape();
        if s.len() != 2 {
            return Err(shape_err(op, format!("expected 2-d input, got {s:?}")));
        }
        Ok((s[0], s[1]))
    }

    pub fn softmax(&mut self, a: &Var) -> Result<Var> {
        let (rows, cols) = Self::rows_cols("exp-normalize", &a.tensor)?;
        let da = a.tensor.data();
        let mut data = vec![0.0; rows * cols];
        for r in 0..rows {
            let row = &da[r * cols..(r + 1) * cols];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for c in 0..cols {
                let e = (row[c] - m).exp();
                data[r * cols + c] = e;
                z += e;
            }
            for c in 0..cols {
                data[r * cols + c] /= z;
            }
        }
        let saved = data.clone();
        let out = Tensor::new(vec![rows, cols], data)?;
        self.record("exp-normalize", out, [a.node, None, None], || Back::Softmax {
            out: saved,
            rows,
            cols,
        })
    }

    pub fn log_softmax(&mut self, a: &Var) -> Result<Var> {
        let (rows, cols) = Self::rows_cols("log-softmax", &a.tensor)?;
        let da = a.tensor.data();
        let mut data = vec![0.0; rows * cols];
        let mut softmax = vec![0.0; rows * cols];
        for r in 0..rows {
            let row = &da[r * cols..(r + 1) * cols];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|&x| (x - m).exp()).sum();
            let lz = z.ln();
            for c in 0..cols {
                let ls = row[c] - m - lz;
                data[r * cols + c] = ls;
                softmax[r * cols + c] = ls.exp();
            }
        }
        let out = Tensor::new(vec![rows, cols], data)?;
        self.record("log-softmax", out, [a.node, None, None], || Back::LogSoftmax {
            softmax,
            rows,
            cols,
        })
    }

    pub fn log(&mut self, a: &Var) -> Result<Var> {
        let data = a.tensor.data().iter().map(|x| x.ln()).collect();
        let out = Tensor::new(a.tensor.shape().to_vec(), data)?;
        self.record("log", out, [a.node, None, None], || Back::Log {
            input: a.tensor.clone(),
        })
    }

    pub fn mul_elem(&mut self, a: &Var, b: &Var) -> Result<Var> {
        let (sa, sb) = (a.tensor.shape(), b.tensor.shape());
        if sa != sb {
            return Err(shape_err("elementwise-mul", format!("{sa:?} * {sb:?}")));
        }
        let data = a
            .tensor
            .data()
            .iter()
            .zip(b.tensor.data())
            .map(|(x, y)| x * y)
            .collect();
        let out = Tensor::new(sa.to_vec(), data)?;
        self.record("elementwise-mul", out, [a.node, b.node, None], || Back::MulElem {
            a: a.tensor.clone(),
            b: b.tensor.clone(),
        })
    }

    pub fn reshape(&mut self, a: &Var, shape: Vec<usize>) -> Result<Var> {
        let out = a.tensor.reshaped(shape)?.with_requires_grad(false);
        self.record("reshape", out, [a.node, None, None], || Back::Reshape)
    }

    pub fn max_pool2(&mut self, a: &Var) -> Result<Var> {
        let sa = a.tensor.shape();
        if sa.len() != 4 || sa[2] % 2 != 0 || sa[3] % 2 != 0 {
            return Err(shape_err("max-pool", format!("expected 4-d input with even spatial extents, got {sa:?}")));
        }
        let (bs, c, h, w) = (sa[0], sa[1], sa[2], sa[3]);
        let (oh, ow) = (h / 2, w / 2);
        let da = a.tensor.data();
        let mut data = vec![0.0; bs * c * oh * ow];
        let mut argmax = vec![0usize; bs * c * oh * ow];
        for b in 0..bs {
            for ci in 0..c {
                for y in 0..oh {
                    for x in 0..ow {
                        let mut best_idx = ((b * c + ci) * h + 2 * y) * w + 2 * x;
                        let mut best = da[best_idx];
                        for dy in 0..2 {
                            for dx in 0..2 {
                                let idx = ((b * c + ci) * h + 2 * y + dy) * w + 2 * x + dx;
                                if da[idx] > best {
                                    best = da[idx];
                                    best_idx = idx;
                                }
                            }
                        }
                        let o = ((b * c + ci) * oh + y) * ow + x;
                        data[o] = best;
                        argmax[o] = best_idx;
                    }
                }
            }
        }
        let in_numel = da.len();
        let out = Tensor::new(vec![bs, c, oh, ow], data)?;
        self.record("max-pool", out, [a.node, None, None], || Back::MaxPool2 { argmax, in_numel })
    }

    /// Normalize each sample over its channel dimension, then scale and shift
    /// per channel. Accepts [B,C] (channels = features) or [B,C,H,W].
    pub fn norm_affine(&mut self, x: &Var, gamma: &Var, beta: &Var) -> Result<Var> {
        let sx = x.tensor.shape();
        let (bs, c, s) = match sx.len() {
            2 => (sx[0], sx[1], 1),
            4 => (sx[0], sx[1], sx[2] * sx[3]),
            _ => return Err(shape_err("norm-affine", format!("expected 2-d or 4-d input, got {sx:?}"))),
        };
        if gamma.tensor.shape() != [c] || beta.tensor.shape() != [c] {
            return Err(shape_err(
                "norm-affine",
                format!(
                    "gamma {:?} / beta {:?} must both have shape [{c}]",
                    gamma.tensor.shape(),
                    beta.tensor.shape()
                ),
            ));
        }
        let dx = x.tensor.data();
        let (dg, db) = (gamma.tensor.data(), beta.tensor.data());
        let mut out = vec![0.0; dx.len()];
        let mut xhat = vec![0.0; dx.len()];
        let mut inv_std = vec![0.0; bs * s];
        for b in 0..bs {
            for si in 0..s {
                let at = |ci: usize| (b * c + ci) * s + si;
                let mean = (0..c).map(|ci| dx[at(ci)]).sum::<f64>() / c as f64;
                let var = (0..c).map(|ci| (dx[at(ci)] - mean).powi(2)).sum::<f64>() / c as f64;
                let inv = 1.0 / (var + EPS_NORM).sqrt();
                inv_std[b * s + si] = inv;
                for ci in 0..c {
                    let h = (dx[at(ci)] - mean) * inv;
                    xhat[at(ci)] = h;
                    out[at(ci)] = dg[ci] * h + db[ci];
                }
            }
        }
        let saved_xhat = xhat;
        let saved_gamma = dg.to_vec();
        let out = Tensor::new(sx.to_vec(), out)?;
        self.record(
            "norm-affine",
            out,
            [x.node, gamma.node, beta.node],
            move || Back::NormAffine {
                xhat: saved_xhat,
                inv_std,
                gamma: saved_gamma,
                b: bs,
                c,
                s,
            },
        )
    }

    pub fn sum_all(&mut self, a: &Var) -> Result<Var> {
        let total: f64 = a.tensor.data().iter().sum();
        let in_numel = a.tensor.numel();
        let out = Tensor::scalar(total);
        self.record("sum-all", out, [a.node, None, None], || Back::SumAll { in_numel })
    }

    /// Backpropagate from a scalar loss. Consumes the tape; every recorded
    /// node is visited at most once. Leaves that do not influence the loss
    /// receive zero gradients.
    pub fn backward(self, loss: &Var) -> Result<GradientMap> {
        if !loss.tensor.is_scalar() {
            return Err(Error::Contract(format!(
                "backward: loss must be scalar, got shape {:?}",
                loss.tensor.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut out: BTreeMap<usize, Tensor> = BTreeMap::new();

        if let Some(loss_id) = loss.node {
            grads[loss_id] = Some(vec![1.0]);
            for id in (0..=loss_id).rev() {
                let Some(g) = grads[id].take() else { continue };
                let node = &self.nodes[id];
                match &node.back {
                    Back::Leaf => {
                        out.insert(id, Tensor::new(node.out_shape.clone(), g)?);
                        continue;
                    }
                    _ => {}
                }
                let mut input_grads: [Option<Vec<f64>>; 3] = [None, None, None];
                backward_node(&node.back, &g, node, &mut input_grads);
                for (slot, ig) in node.inputs.iter().zip(input_grads.into_iter()) {
                    let (Some(input_id), Some(ig)) = (slot, ig) else { continue };
                    let dst = grads[*input_id]
                        .get_or_insert_with(|| vec![0.0; self.nodes[*input_id].out_shape.iter().product()]);
                    for (d, v) in dst.iter_mut().zip(ig) {
                        *d += v;
                    }
                }
            }
        }

        // Leaves untouched by the loss still get an entry, with zeros.
        for (id, node) in self.nodes.iter().enumerate() {
            if matches!(node.back, Back::Leaf) && !out.contains_key(&id) {
                out.insert(id, Tensor::zeros(&node.out_shape));
            }
        }
        Ok(GradientMap { grads: out })
    }
}

/// Gradient routing for one node: writes per-input gradients for every input
/// slot that participates (slots are filtered against recorded inputs by the
/// caller).
fn backward_node(back: &Back, g: &[f64], node: &Node, out: &mut [Option<Vec<f64>>; 3]) {
    match back {
        Back::Leaf => {}
        Back::MatMul { a, b } => {
            let (m, k) = (a.shape()[0], a.shape()[1]);
            let n = b.shape()[1];
            let (da, db) = (a.data(), b.data());
            if node.inputs[0].is_some() {
                let mut ga = vec![0.0; m * k];
                for i in 0..m {
                    for j in 0..n {
                        let gv = g[i * n + j];
                        if gv == 0.0 {
                            continue;
                        }
                        for p in 0..k {
                            ga[i * k + p] += gv * db[p * n + j];
                        }
                    }
                }
                out[0] = Some(ga);
            }
            if node.inputs[1].is_some() {
                let mut gb = vec![0.0; k * n];
                for i in 0..m {
                    for p in 0..k {
                        let av = da[i * k + p];
                        if av == 0.0 {
                            continue;
                        }
                        for j in 0..n {
                            gb[p * n + j] += av * g[i * n + j];
                        }
                    }
                }
                out[1] = Some(gb);
            }
        }
        Back::Conv2d { input, kernel } => {
            let si = input.shape();
            let (bs, ci, h, w) = (si[0], si[1], si[2], si[3]);
            let co = kernel.shape()[0];
            let (di, dk) = (input.data(), kernel.data());
            let mut gi = if node.inputs[0].is_some() {
                Some(vec![0.0; di.len()])
            } else {
                None
            };
            let mut gk = if node.inputs[1].is_some() {
                Some(vec![0.0; dk.len()])
            } else {
                None
            };
            for b in 0..bs {
                for o in 0..co {
                    for y in 0..h {
                        for x in 0..w {
                            let gv = g[((b * co + o) * h + y) * w + x];
                            if gv == 0.0 {
                                continue;
                            }
                            for c in 0..ci {
                                for dy in 0..3 {
                                    let iy = y as isize + dy as isize - 1;
                                    if iy < 0 || iy >= h as isize {
                                        continue;
                                    }
                                    for dx in 0..3 {
                                        let ix = x as isize + dx as isize - 1;
                                        if ix < 0 || ix >= w as isize {
                                            continue;
                                        }
                                        let ii = ((b * ci + c) * h + iy as usize) * w + ix as usize;
                                        let ki = ((o * ci + c) * 3 + dy) * 3 + dx;
                                        if let Some(gi) = gi.as_mut() {
                                            gi[ii] += gv * dk[ki];
                                        }
                                        if let Some(gk) = gk.as_mut() {
                                            gk[ki] += gv * di[ii];
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
            out[0] = gi;
            out[1] = gk;
        }
        Back::AddSame => {
            out[0] = Some(g.to_vec());
            out[1] = Some(g.to_vec());
        }
        Back::AddRow { rows, cols } => {
            out[0] = Some(g.to_vec());
            if node.inputs[1].is_some() {
                let mut gb = vec![0.0; *cols];
                for r in 0..*rows {
                    for c in 0..*cols {
                        gb[c] += g[r * cols + c];
                    }
                }
                out[1] = Some(gb);
            }
        }
        Back::AddChan { b, c, s } => {
            out[0] = Some(g.to_vec());
            if node.inputs[1].is_some() {
                let mut gb = vec![0.0; *c];
                for bi in 0..*b {
                    for ci in 0..*c {
                        let base = (bi * c + ci) * s;
                        gb[ci] += g[base..base + s].iter().sum::<f64>();
                    }
                }
                out[1] = Some(gb);
            }
        }
        Back::Sub => {
            out[0] = Some(g.to_vec());
            out[1] = Some(g.iter().map(|v| -v).collect());
        }
        Back::ScalarMul(cst) => {
            out[0] = Some(g.iter().map(|v| v * cst).collect());
        }
        Back::Relu { positive } => {
            out[0] = Some(
                g.iter()
                    .zip(positive)
                    .map(|(v, &p)| if p { *v } else { 0.0 })
                    .collect(),
            );
        }
        Back::SpatialMean { b, c, s } => {
            let mut gi = vec![0.0; b * c * s];
            for bi in 0..*b {
                for ci in 0..*c {
                    let gv = g[bi * c + ci] / *s as f64;
                    let base = (bi * c + ci) * s;
                    for si in 0..*s {
                        gi[base + si] = gv;
                    }
                }
            }
            out[0] = Some(gi);
        }
        Back::FeatureMean { b, f } => {
            let mut gi = vec![0.0; b * f];
            for r in 0..*b {
                let gv = g[r] / *f as f64;
                for c in 0..*f {
                    gi[r * f + c] = gv;
                }
            }
            out[0] = Some(gi);
        }
        Back::Softmax { out: y, rows, cols } => {
            let mut gi = vec![0.0; y.len()];
            for r in 0..*rows {
                let base = r * cols;
                let dot: f64 = (0..*cols).map(|c| g[base + c] * y[base + c]).sum();
                for c in 0..*cols {
                    gi[base + c] = y[base + c] * (g[base + c] - dot);
                }
            }
            out[0] = Some(gi);
        }
        Back::LogSoftmax { softmax, rows, cols } => {
            let mut gi = vec![0.0; softmax.len()];
            for r in 0..*rows {
                let base = r * cols;
                let gsum: f64 = g[base..base + cols].iter().sum();
                for c in 0..*cols {
                    gi[base + c] = g[base + c] - softmax[base + c] * gsum;
                }
            }
            out[0] = Some(gi);
        }
        Back::Log { input } => {
            out[0] = Some(g.iter().zip(input.data()).map(|(v, x)| v / x).collect());
        }
        Back::MulElem { a, b } => {
            if node.inputs[0].is_some() {
                out[0] = Some(g.iter().zip(b.data()).map(|(v, y)| v * y).collect());
            }
            if node.inputs[1].is_some() {
                out[1] = Some(g.iter().zip(a.data()).map(|(v, x)| v * x).collect());
            }
        }
        Back::Reshape => {
            out[0] = Some(g.to_vec());
        }
        Back::MaxPool2 { argmax, in_numel } => {
            let mut gi = vec![0.0; *in_numel];
            for (o, &src) in argmax.iter().enumerate() {
                gi[src] += g[o];
            }
            out[0] = Some(gi);
        }
        Back::NormAffine { xhat, inv_std, gamma, b, c, s } => {
            let cn = *c as f64;
            if node.inputs[0].is_some() {
                let mut gx = vec![0.0; xhat.len()];
                for bi in 0..*b {
                    for si in 0..*s {
                        let at = |ci: usize| (bi * c + ci) * s + si;
                        let mut m1 = 0.0;
                        let mut m2 = 0.0;
                        for ci in 0..*c {
                            let dh = g[at(ci)] * gamma[ci];
                            m1 += dh;
                            m2 += dh * xhat[at(ci)];
                        }
                        m1 /= cn;
                        m2 /= cn;
                        let inv = inv_std[bi * s + si];
                        for ci in 0..*c {
                            let dh = g[at(ci)] * gamma[ci];
                            gx[at(ci)] = inv * (dh - m1 - xhat[at(ci)] * m2);
                        }
                    }
                }
                out[0] = Some(gx);
            }
            if node.inputs[1].is_some() {
                let mut gg = vec![0.0; *c];
                for bi in 0..*b {
                    for ci in 0..*c {
                        for si in 0..*s {
                            let i = (bi * c + ci) * s + si;
                            gg[ci] += g[i] * xhat[i];
                        }
                    }
                }
                out[1] = Some(gg);
            }
            if node.inputs[2].is_some() {
                let mut gb = vec![0.0; *c];
                for bi in 0..*b {
                    for ci in 0..*c {
                        let base = (bi * c + ci) * s;
                        gb[ci] += g[base..base + s].iter().sum::<f64>();
                    }
                }
                out[2] = Some(gb);
            }
        }
        Back::SumAll { in_numel } => {
            out[0] = Some(vec![g[0]; *in_numel]);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn leaf(tape: &mut Tape, shape: &[usize], data: Vec<f64>, grad: bool) -> Var {
        tape.leaf(Tensor::new(shape.to_vec(), data).unwrap().with_requires_grad(grad))
    }

    #[test]
    fn matmul_identity() {
        let mut tape = Tape::new();
        let a = leaf(&mut tape, &[2, 2], vec![1.0, 2.0, 3.0, 4.0], false);
        let i = tape.leaf(Tensor::identity(2));
        let y = tape.matmul(&a, &i).unwrap();
        assert_eq!(y.value().data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn relu_signs() {
        let mut tape = Tape::new();
        let a = leaf(&mut tape, &[3], vec![-1.0, 0.0, 2.0], false);
        let y = tape.relu(&a).unwrap();
        assert_eq!(y.value().data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn conv2d_overlap_counts() {
        // 1x1x4x4 ones with a 3x3 kernel of ones, pad 1: corner windows cover
        // 4 inputs, edges 6, interior 9.
        let mut tape = Tape::new();
        let x = leaf(&mut tape, &[1, 1, 4, 4], vec![1.0; 16], false);
        let k = leaf(&mut tape, &[1, 1, 3, 3], vec![1.0; 9], false);
        let y = tape.conv2d(&x, &k).unwrap();
        let d = y.value().data();
        assert_eq!(d[0], 4.0);
        assert_eq!(d[1], 6.0);
        assert_eq!(d[5], 9.0);
        assert_eq!(d[15], 4.0);
        assert_eq!(d[7], 6.0);
    }

    #[test]
    fn quadratic_gradient() {
        // loss = sum(p*p)/2 with p=[3,-1] -> grad [3,-1]
        let mut tape = Tape::new();
        let p = leaf(&mut tape, &[2], vec![3.0, -1.0], true);
        let sq = tape.mul_elem(&p, &p).unwrap();
        let s = tape.sum_all(&sq).unwrap();
        let loss = tape.scalar_mul(&s, 0.5).unwrap();
        let grads = tape.backward(&loss).unwrap();
        assert_eq!(grads.get(&p).unwrap().data(), &[3.0, -1.0]);
    }

    #[test]
    fn constant_loss_gives_zero_gradients() {
        let mut tape = Tape::new();
        let p = leaf(&mut tape, &[2], vec![3.0, -1.0], true);
        let loss = tape.leaf(Tensor::scalar(5.0));
        let grads = tape.backward(&loss).unwrap();
        assert_eq!(grads.get(&p).unwrap().data(), &[0.0, 0.0]);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut tape = Tape::new();
        let p = leaf(&mut tape, &[2], vec![1.0, 2.0], true);
        let y = tape.relu(&p).unwrap();
        assert!(matches!(tape.backward(&y), Err(Error::Contract(_))));
    }

    #[test]
    fn shape_mismatch_names_op_and_shapes() {
        let mut tape = Tape::new();
        let a = leaf(&mut tape, &[2, 3], vec![0.0; 6], false);
        let b = leaf(&mut tape, &[2, 3], vec![0.0; 6], false);
        let err = tape.matmul(&a, &b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("matmul") && msg.contains("[2, 3]"), "{msg}");
    }

    #[test]
    fn non_finite_output_reported() {
        let mut tape = Tape::new();
        let a = leaf(&mut tape, &[2], vec![-1.0, 0.0], false);
        assert!(matches!(tape.log(&a), Err(Error::NonFinite(_))));
    }

    #[test]
    fn untracked_inputs_record_nothing() {
        let mut tape = Tape::new();
        let a = leaf(&mut tape, &[2], vec![1.0, 2.0], false);
        let b = leaf(&mut tape, &[2], vec![3.0, 4.0], false);
        let _ = tape.add(&a, &b).unwrap();
        assert_eq!(tape.len(), 0);
    }

    #[test]
    fn max_pool_forward_and_argmax_routing() {
        let mut tape = Tape::new();
        let x = leaf(
            &mut tape,
            &[1, 1, 2, 2],
            vec![1.0, 5.0, 2.0, 3.0],
            true,
        );
        let y = tape.max_pool2(&x).unwrap();
        assert_eq!(y.value().data(), &[5.0]);
        let s = tape.sum_all(&y).unwrap();
        let grads = tape.backward(&s).unwrap();
        assert_eq!(grads.get(&x).unwrap().data(), &[0.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn operations_are_bitwise_deterministic() {
        let run = || {
            let mut tape = Tape::new();
            let mut rng = crate::rng::stream(5, "det", 0, 0);
            let a = tape.leaf(Tensor::uniform(&[4, 4], -1.0, 1.0, &mut rng).with_requires_grad(true));
            let b = tape.leaf(Tensor::uniform(&[4, 4], -1.0, 1.0, &mut rng));
            let m = tape.matmul(&a, &b).unwrap();
            let r = tape.relu(&m).unwrap();
            let sm = tape.softmax(&r).unwrap();
            let lg = tape.log_softmax(&r).unwrap();
            let p = tape.mul_elem(&sm, &lg).unwrap();
            let s = tape.sum_all(&p).unwrap();
            let loss = tape.scalar_mul(&s, -0.25).unwrap();
            let grads = tape.backward(&loss).unwrap();
            let gbits: Vec<u64> = grads.get(&a).unwrap().data().iter().map(|v| v.to_bits()).collect();
            let lbits = loss.value().data()[0].to_bits();
            (lbits, gbits)
        };
        assert_eq!(run(), run());
    }

    mod properties {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            /// backward(a*L1 + b*L2) == a*backward(L1) + b*backward(L2)
            #[test]
            fn backward_is_linear_in_the_loss(
                p in proptest::collection::vec(-2.0f64..2.0, 3),
                q in proptest::collection::vec(-2.0f64..2.0, 3),
                a in -2.0f64..2.0,
                b in -2.0f64..2.0,
            ) {
                let grads_of = |wa: f64, wb: f64, combine: bool| -> (Vec<f64>, Vec<f64>) {
                    let mut tape = Tape::new();
                    let x = tape.leaf(Tensor::new(vec![3], p.clone()).unwrap().with_requires_grad(true));
                    let c = tape.leaf(Tensor::new(vec![3], q.clone()).unwrap());
                    // L1 = sum(x*x)/2, L2 = sum(c*x)
                    let sq = tape.mul_elem(&x, &x).unwrap();
                    let s1 = tape.sum_all(&sq).unwrap();
                    let l1 = tape.scalar_mul(&s1, 0.5).unwrap();
                    let cx = tape.mul_elem(&c, &x).unwrap();
                    let l2 = tape.sum_all(&cx).unwrap();
                    if combine {
                        let wl1 = tape.scalar_mul(&l1, wa).unwrap();
                        let wl2 = tape.scalar_mul(&l2, wb).unwrap();
                        let total = tape.add(&wl1, &wl2).unwrap();
                        let g = tape.backward(&total).unwrap();
                        (g.get(&x).unwrap().data().to_vec(), vec![])
                    } else {
                        let g = tape.backward(&l1).unwrap();
                        let g1 = g.get(&x).unwrap().data().to_vec();
                        let mut tape2 = Tape::new();
                        let x2 = tape2.leaf(Tensor::new(vec![3], p.clone()).unwrap().with_requires_grad(true));
                        let c2 = tape2.leaf(Tensor::new(vec![3], q.clone()).unwrap());
                        let cx2 = tape2.mul_elem(&c2, &x2).unwrap();
                        let l22 = tape2.sum_all(&cx2).unwrap();
                        let g2m = tape2.backward(&l22).unwrap();
                        (g1, g2m.get(&x2).unwrap().data().to_vec())
                    }
                };
                let (combined, _) = grads_of(a, b, true);
                let (g1, g2) = grads_of(a, b, false);
                for i in 0..3 {
                    let expect = a * g1[i] + b * g2[i];
                    prop_assert!((combined[i] - expect).abs() < 1e-10);
                }
            }
        }
    }

    #[test]
    fn apply_dispatch_matches_methods() {
        let mut tape = Tape::new();
        let a = leaf(&mut tape, &[2], vec![1.0, -2.0], false);
        let y = tape.apply(&OpKind::Relu, &[&a]).unwrap();
        assert_eq!(y.value().data(), &[1.0, 0.0]);
        let z = tape.apply(&OpKind::ScalarMul(2.0), &[&a]).unwrap();
        assert_eq!(z.value().data(), &[2.0, -4.0]);
        assert!(tape.apply(&OpKind::Add, &[&a]).is_err());
    }
}
