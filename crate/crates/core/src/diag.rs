//! Layer-wise k-NN probes, prediction depth, and Hessian eigenvalue
//! statistics.

use crate::check::{hessian_dense, DenseHessian, HESSIAN_CAP_DEFAULT};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::nn::{smoothed_cross_entropy, LayeredModel, LeafMode};
use crate::rng;
use crate::tape::Tape;
use crate::tensor::Tensor;
use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

/// Features of one probe layer for a batch of inputs: `[rows, dim]`.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerFeatures {
    pub layer: usize,
    pub layer_name: String,
    pub features: Tensor,
}

/// Per-probe-layer pooled activations for a set of inputs. Convolutional
/// activations are spatially averaged to one value per channel; dense
/// activations pass through unchanged.
pub fn layer_features(model: &LayeredModel, inputs: &Tensor) -> Result<Vec<LayerFeatures>> {
    if !model.layers.iter().any(|l| l.probe_point) {
        return Err(Error::Config("model has no probe points".into()));
    }
    let n = inputs.shape()[0];
    let mut per_layer: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    let mut dims: BTreeMap<usize, usize> = BTreeMap::new();
    let indices: Vec<usize> = (0..n).collect();
    let stride: usize = inputs.shape()[1..].iter().product();
    for chunk in indices.chunks(256) {
        let mut data = Vec::with_capacity(chunk.len() * stride);
        for &i in chunk {
            data.extend_from_slice(&inputs.data()[i * stride..(i + 1) * stride]);
        }
        let mut shape = vec![chunk.len()];
        shape.extend_from_slice(&inputs.shape()[1..]);
        let batch = Tensor::new(shape, data)?;

        let mut tape = Tape::new();
        let vars = model.leaves(&mut tape, LeafMode::None);
        let x = tape.leaf(batch);
        let io = model.forward(&mut tape, &vars, &x, true)?;
        for (li, act) in io.probes {
            let pooled = if act.value().shape().len() == 4 {
                tape.spatial_mean(&act)?.into_value()
            } else {
                act.into_value()
            };
            let d = pooled.numel() / chunk.len();
            dims.entry(li).or_insert(d);
            per_layer.entry(li).or_default().extend_from_slice(pooled.data());
        }
    }
    per_layer
        .into_iter()
        .map(|(li, data)| {
            let d = dims[&li];
            Ok(LayerFeatures {
                layer: li,
                layer_name: model.layers[li].name.clone(),
                features: Tensor::new(vec![n, d], data)?,
            })
        })
        .collect()
}

/// Majority vote over the K Euclidean-nearest reference rows. Ties between
/// labels break toward the label of the single nearest neighbour among the
/// tied labels; ties in distance break toward the lower row index.
pub fn knn_predict(
    train_feats: &Tensor,
    train_labels: &[usize],
    query_feats: &Tensor,
    k: usize,
) -> Result<Vec<usize>> {
    let n = train_feats.shape()[0];
    if n == 0 {
        return Err(Error::Contract("knn_predict: empty reference set".into()));
    }
    if n != train_labels.len() {
        return Err(Error::Contract(format!(
            "knn_predict: {n} reference rows vs {} labels",
            train_labels.len()
        )));
    }
    if k == 0 || k > n {
        return Err(Error::Contract(format!(
            "knn_predict: K must satisfy 1 <= K <= {n}, got {k}"
        )));
    }
    let d = train_feats.shape()[1];
    if query_feats.shape().len() != 2 || query_feats.shape()[1] != d {
        return Err(Error::Shape(format!(
            "knn_predict: query features {:?} vs reference dim {d}",
            query_feats.shape()
        )));
    }
    let q = query_feats.shape()[0];
    let td = train_feats.data();
    let qd = query_feats.data();
    let mut out = Vec::with_capacity(q);
    // (distance^2, row) max-heap of the best K so far
    let mut heap: std::collections::BinaryHeap<(OrderedF64, usize)> = std::collections::BinaryHeap::new();
    for qi in 0..q {
        heap.clear();
        let qrow = &qd[qi * d..(qi + 1) * d];
        for ti in 0..n {
            let trow = &td[ti * d..(ti + 1) * d];
            let mut dist = 0.0;
            for j in 0..d {
                let diff = qrow[j] - trow[j];
                dist += diff * diff;
            }
            let entry = (OrderedF64(dist), ti);
            if heap.len() < k {
                heap.push(entry);
            } else if let Some(&worst) = heap.peek() {
                if entry < worst {
                    heap.pop();
                    heap.push(entry);
                }
            }
        }
        let neighbours: Vec<(f64, usize)> = heap.iter().map(|&(dist, ti)| (dist.0, ti)).collect();
        out.push(vote(&neighbours, train_labels));
    }
    Ok(out)
}

// finite-distance wrapper so squared distances can live in a BinaryHeap
#[derive(Clone, Copy, PartialEq, PartialOrd)]
struct OrderedF64(f64);
impl Eq for OrderedF64 {}
impl Ord for OrderedF64 {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.0.partial_cmp(&other.0).expect("distances are finite")
    }
}

/// Majority label among neighbours; label ties break toward the label whose
/// best representative is nearest (then lowest row index).
fn vote(neighbours: &[(f64, usize)], labels: &[usize]) -> usize {
    let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
    let mut best_rep: BTreeMap<usize, (f64, usize)> = BTreeMap::new();
    for &(dist, row) in neighbours {
        let label = labels[row];
        *counts.entry(label).or_insert(0) += 1;
        let rep = best_rep.entry(label).or_insert((dist, row));
        if (dist, row) < *rep {
            *rep = (dist, row);
        }
    }
    let top = counts.values().max().copied().unwrap_or(0);
    counts
        .iter()
        .filter(|(_, &c)| c == top)
        .map(|(&label, _)| (best_rep[&label], label))
        .min_by(|a, b| a.0.partial_cmp(&b.0).expect("finite").then(a.1.cmp(&b.1)))
        .map(|(_, label)| label)
        .expect("at least one neighbour")
}

/// Earliest 1-indexed probe layer from which onward every probe prediction
/// equals the model prediction; D+1 when no suffix agrees.
pub fn prediction_depth(per_layer_preds: &[usize], model_pred: usize) -> usize {
    let d = per_layer_preds.len();
    let mut agree = 0;
    for &p in per_layer_preds.iter().rev() {
        if p == model_pred {
            agree += 1;
        } else {
            break;
        }
    }
    d + 1 - agree
}

/// Layer-wise probe accuracies and the prediction-depth distribution.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub layer_names: Vec<String>,
    /// k-NN probe accuracy on the query set, per probe layer.
    pub layer_accuracy: Vec<f64>,
    /// Histogram over depths 1..=D+1 (last bin: never agrees).
    pub depth_histogram: Vec<usize>,
    pub mean_depth: f64,
    pub k: usize,
    pub queries: usize,
}

/// Probe every designated layer with a k-NN classifier over the reference
/// set, then fold the per-sample layer predictions into prediction depths.
pub fn probe_model(
    model: &LayeredModel,
    reference: &Dataset,
    queries: &Dataset,
    k: usize,
) -> Result<ProbeReport> {
    let ref_feats = layer_features(model, &reference.samples)?;
    let query_feats = layer_features(model, &queries.samples)?;
    let model_preds = {
        let mut preds = Vec::with_capacity(queries.len());
        let indices: Vec<usize> = (0..queries.len()).collect();
        for chunk in indices.chunks(256) {
            let (x, _) = queries.gather(chunk);
            preds.extend(model.predict(&x)?);
        }
        preds
    };

    let depth_count = ref_feats.len();
    let mut layer_accuracy = Vec::with_capacity(depth_count);
    let mut layer_names = Vec::with_capacity(depth_count);
    let mut per_layer_preds: Vec<Vec<usize>> = Vec::with_capacity(depth_count);
    for (rf, qf) in ref_feats.iter().zip(&query_feats) {
        let preds = knn_predict(&rf.features, &reference.labels, &qf.features, k)?;
        let acc = preds
            .iter()
            .zip(&queries.labels)
            .filter(|(p, l)| p == l)
            .count() as f64
            / queries.len().max(1) as f64;
        layer_accuracy.push(acc);
        layer_names.push(rf.layer_name.clone());
        per_layer_preds.push(preds);
    }

    let mut depth_histogram = vec![0usize; depth_count + 1];
    let mut depth_sum = 0usize;
    let mut layer_preds_buf = vec![0usize; depth_count];
    for (qi, &model_pred) in model_preds.iter().enumerate() {
        for (li, preds) in per_layer_preds.iter().enumerate() {
            layer_preds_buf[li] = preds[qi];
        }
        let depth = prediction_depth(&layer_preds_buf, model_pred);
        depth_histogram[depth - 1] += 1;
        depth_sum += depth;
    }
    Ok(ProbeReport {
        layer_names,
        layer_accuracy,
        depth_histogram,
        mean_depth: depth_sum as f64 / model_preds.len().max(1) as f64,
        k,
        queries: queries.len(),
    })
}

/// Eigenvalue statistics of a dense symmetrized Hessian.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpectrumReport {
    /// Sorted descending.
    pub eigenvalues: Vec<f64>,
    pub max_eigenvalue: f64,
    /// Fraction of eigenvalues below -tau.
    pub fraction_negative: f64,
    /// Noise threshold: 1e-6 * max |eigenvalue|.
    pub tau: f64,
    pub param_count: usize,
    /// Pre-symmetrization defect max|H - H^T| / max|H|.
    pub asymmetry: f64,
}

/// Full eigendecomposition of a symmetrized dense Hessian.
pub fn spectrum_of(hessian: &DenseHessian) -> SpectrumReport {
    let m = DMatrix::from_row_slice(hessian.n, hessian.n, &hessian.matrix);
    let eig = SymmetricEigen::new(m);
    let mut eigenvalues: Vec<f64> = eig.eigenvalues.iter().copied().collect();
    eigenvalues.sort_by(|a, b| b.partial_cmp(a).expect("eigenvalues are finite"));
    let max_abs = eigenvalues.iter().fold(0.0f64, |m, &v| m.max(v.abs()));
    let tau = 1e-6 * max_abs;
    let negative = eigenvalues.iter().filter(|&&v| v < -tau).count();
    SpectrumReport {
        max_eigenvalue: eigenvalues.first().copied().unwrap_or(0.0),
        fraction_negative: negative as f64 / eigenvalues.len().max(1) as f64,
        tau,
        param_count: hessian.n,
        asymmetry: hessian.asymmetry,
        eigenvalues,
    }
}

/// Default finite-difference step for Hessian entries.
pub const HESSIAN_EPS_DEFAULT: f64 = 1e-4;

/// Dense Hessian spectrum of the smoothed cross-entropy over one fixed
/// seeded batch of up to `batch_cap` training samples.
pub fn hessian_spectrum(
    model: &LayeredModel,
    data: &Dataset,
    alpha: f64,
    batch_cap: usize,
    seed: u64,
    eps: f64,
    param_cap: usize,
) -> Result<SpectrumReport> {
    let p = model.num_params();
    if p > param_cap {
        return Err(Error::Capacity { count: p, cap: param_cap });
    }
    let take = batch_cap.min(data.len());
    let mut batch_rng = rng::stream(seed, "hessian-batch", 0, 0);
    let picks = rng::sample_without_replacement(&mut batch_rng, data.len(), take);
    let (x, labels) = data.gather(&picks);

    let mut work = model.clone();
    let grad_fn = |flat: &Tensor| -> Result<Tensor> {
        work.unflatten_params(flat)?;
        let mut tape = Tape::new();
        let vars = work.leaves(&mut tape, LeafMode::All);
        let input = tape.leaf(x.clone());
        let io = work.forward(&mut tape, &vars, &input, false)?;
        let loss = smoothed_cross_entropy(&mut tape, &io.output, &labels, alpha)?;
        let gm = tape.backward(&loss)?;
        let mut out = Vec::with_capacity(flat.numel());
        for (_, var) in vars.iter() {
            let g = gm
                .get(var)
                .ok_or_else(|| Error::Contract("missing gradient for parameter".into()))?;
            out.extend_from_slice(g.data());
        }
        let n = out.len();
        Tensor::new(vec![n], out)
    };
    let at = model.flatten_params();
    let hessian = hessian_dense(grad_fn, &at, eps, param_cap)?;
    Ok(spectrum_of(&hessian))
}

/// Spectrum of a quadratic-form style taped loss over a flat parameter
/// vector; used by oracle tests and the CLI for closed-form checks.
pub fn spectrum_of_loss<F>(f: F, at: &Tensor, eps: f64) -> Result<SpectrumReport>
where
    F: Fn(&mut Tape, &crate::tape::Var) -> Result<crate::tape::Var>,
{
    let hessian = crate::check::hessian_of_loss(f, at, eps, HESSIAN_CAP_DEFAULT)?;
    Ok(spectrum_of(&hessian))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_synthetic, SyntheticSpec};
    use crate::tape::Var;

    #[test]
    fn features_zero_input_zero_vectors() {
        let model = LayeredModel::mlp(4, &[6, 6], 3, false, 1);
        // relu hidden layers on zero input with zero bias give zeros
        let inputs = Tensor::zeros(&[3, 4]);
        let feats = layer_features(&model, &inputs).unwrap();
        assert_eq!(feats.len(), 2);
        for f in feats {
            assert!(f.features.data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn conv_features_are_spatial_means() {
        let model = LayeredModel::cnn((1, 4, 4), &[2], 2, false, 3);
        let inputs = Tensor::full(&[1, 1, 4, 4], 1.0);
        let feats = layer_features(&model, &inputs).unwrap();
        // one probe layer (the conv block), feature dim = channels
        assert_eq!(feats.len(), 1);
        assert_eq!(feats[0].features.shape(), &[1, 2]);
        // spatial mean of an all-ones 4x4 single-channel map through the
        // identity: compare against direct forward pooled by hand
        let mut tape = Tape::new();
        let vars = model.leaves(&mut tape, LeafMode::None);
        let x = tape.leaf(inputs.clone());
        let io = model.forward(&mut tape, &vars, &x, true).unwrap();
        let act = &io.probes[0].1;
        let s = act.value().shape().to_vec();
        let plane = s[2] * s[3];
        for c in 0..s[1] {
            let mean: f64 =
                act.value().data()[c * plane..(c + 1) * plane].iter().sum::<f64>() / plane as f64;
            assert!((feats[0].features.data()[c] - mean).abs() < 1e-12);
        }
    }

    #[test]
    fn no_probe_points_is_config_error() {
        let mut model = LayeredModel::mlp(4, &[6], 3, false, 1);
        for layer in &mut model.layers {
            layer.probe_point = false;
        }
        assert!(matches!(
            layer_features(&model, &Tensor::zeros(&[1, 4])),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn knn_exact_match_and_majority() {
        let train = Tensor::new(vec![3, 2], vec![0.0, 0.0, 1.0, 0.0, 5.0, 5.0]).unwrap();
        let labels = vec![0, 0, 1];
        // query equal to a train row with K=1 returns that row's label
        let q = Tensor::new(vec![1, 2], vec![5.0, 5.0]).unwrap();
        assert_eq!(knn_predict(&train, &labels, &q, 1).unwrap(), vec![1]);
        // K=3 majority
        let q2 = Tensor::new(vec![1, 2], vec![100.0, -3.0]).unwrap();
        assert_eq!(knn_predict(&train, &labels, &q2, 3).unwrap(), vec![0]);
    }

    #[test]
    fn knn_empty_reference_rejected() {
        let train = Tensor::new(vec![1, 2], vec![0.0, 0.0]).unwrap();
        assert!(knn_predict(&train, &[0], &Tensor::zeros(&[1, 2]), 0).is_err());
        assert!(knn_predict(&train, &[0], &Tensor::zeros(&[1, 2]), 2).is_err());
    }

    /// Exhaustive-scan reference: sort all rows by (distance, index), take
    /// the first K, majority with nearest-representative tie-breaks.
    fn knn_oracle(train: &Tensor, labels: &[usize], query: &Tensor, k: usize) -> Vec<usize> {
        let (n, d) = (train.shape()[0], train.shape()[1]);
        let q = query.shape()[0];
        let mut out = Vec::new();
        for qi in 0..q {
            let qrow = &query.data()[qi * d..(qi + 1) * d];
            let mut all: Vec<(f64, usize)> = (0..n)
                .map(|ti| {
                    let trow = &train.data()[ti * d..(ti + 1) * d];
                    let dist: f64 = qrow.iter().zip(trow).map(|(a, b)| (a - b) * (a - b)).sum();
                    (dist, ti)
                })
                .collect();
            all.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
            all.truncate(k);
            // independent majority count
            let mut counts: std::collections::HashMap<usize, usize> = Default::default();
            for &(_, ti) in &all {
                *counts.entry(labels[ti]).or_insert(0) += 1;
            }
            let top = *counts.values().max().unwrap();
            let winner = all
                .iter()
                .filter(|(_, ti)| counts[&labels[*ti]] == top)
                .map(|&(dist, ti)| (dist, ti, labels[ti]))
                .min_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)))
                .map(|(_, _, l)| l)
                .unwrap();
            out.push(winner);
        }
        out
    }

    #[test]
    fn knn_matches_exhaustive_oracle() {
        let mut rng = rng::stream(3, "knn-test", 0, 0);
        let train = Tensor::uniform(&[200, 8], -1.0, 1.0, &mut rng);
        let labels: Vec<usize> = (0..200).map(|_| rng::below(&mut rng, 4)).collect();
        let queries = Tensor::uniform(&[50, 8], -1.0, 1.0, &mut rng);
        for k in [1, 5] {
            let fast = knn_predict(&train, &labels, &queries, k).unwrap();
            let slow = knn_oracle(&train, &labels, &queries, k);
            assert_eq!(fast, slow, "K={k}");
        }
    }

    #[test]
    fn depth_examples() {
        // preds=[b,a,b,b], model=b -> depth 3
        assert_eq!(prediction_depth(&[1, 0, 1, 1], 1), 3);
        // all agree -> depth 1
        assert_eq!(prediction_depth(&[1, 1, 1, 1], 1), 1);
        // never agrees -> D+1
        assert_eq!(prediction_depth(&[0, 0, 0, 0], 1), 5);
    }

    #[test]
    fn depth_is_antitone_in_agreement() {
        let mut rng = rng::stream(8, "depth", 0, 0);
        for _ in 0..1000 {
            let d = 1 + rng::below(&mut rng, 6);
            let model_pred = rng::below(&mut rng, 3);
            let mut preds: Vec<usize> = (0..d).map(|_| rng::below(&mut rng, 3)).collect();
            let before = prediction_depth(&preds, model_pred);
            // flip one disagreeing position to agree
            if let Some(pos) = (0..d).find(|&i| preds[i] != model_pred) {
                preds[pos] = model_pred;
                let after = prediction_depth(&preds, model_pred);
                assert!(after <= before);
            }
        }
    }

    #[test]
    fn spectrum_of_diagonal_quadratic() {
        let f = |tape: &mut Tape, p: &Var| {
            let coef = tape.leaf(Tensor::new(vec![2], vec![3.0, 1.0])?);
            let sq = tape.mul_elem(p, p)?;
            let w = tape.mul_elem(&coef, &sq)?;
            let s = tape.sum_all(&w)?;
            tape.scalar_mul(&s, 0.5)
        };
        let report = spectrum_of_loss(f, &Tensor::new(vec![2], vec![0.3, -0.4]).unwrap(), 1e-4).unwrap();
        assert!((report.max_eigenvalue - 3.0).abs() < 1e-6);
        assert_eq!(report.fraction_negative, 0.0);
    }

    #[test]
    fn spectrum_of_saddle() {
        let f = |tape: &mut Tape, p: &Var| {
            let coef = tape.leaf(Tensor::new(vec![2], vec![1.0, -1.0])?);
            let sq = tape.mul_elem(p, p)?;
            let w = tape.mul_elem(&coef, &sq)?;
            tape.sum_all(&w)
        };
        let report = spectrum_of_loss(f, &Tensor::new(vec![2], vec![0.1, 0.2]).unwrap(), 1e-4).unwrap();
        assert!((report.eigenvalues[0] - 2.0).abs() < 1e-6);
        assert!((report.eigenvalues[1] + 2.0).abs() < 1e-6);
        assert!((report.fraction_negative - 0.5).abs() < 1e-12);
    }

    #[test]
    fn spectrum_trace_matches_eigen_sum() {
        let model = LayeredModel::mlp(2, &[4], 2, false, 21);
        let ds = gen_synthetic(
            &SyntheticSpec::GaussianBlobs { classes: 2, per_class: 16, dim: 2, sep: 2.0, sigma: 0.8 },
            4,
        )
        .unwrap();
        let take = 16.min(ds.len());
        let mut batch_rng = rng::stream(0, "hessian-batch", 0, 0);
        let picks = rng::sample_without_replacement(&mut batch_rng, ds.len(), take);
        let (x, labels) = ds.gather(&picks);
        let mut work = model.clone();
        let grad_fn = |flat: &Tensor| -> Result<Tensor> {
            work.unflatten_params(flat)?;
            let mut tape = Tape::new();
            let vars = work.leaves(&mut tape, LeafMode::All);
            let input = tape.leaf(x.clone());
            let io = work.forward(&mut tape, &vars, &input, false)?;
            let loss = smoothed_cross_entropy(&mut tape, &io.output, &labels, 0.1)?;
            let gm = tape.backward(&loss)?;
            let mut out = Vec::new();
            for (_, var) in vars.iter() {
                out.extend_from_slice(gm.get(var).unwrap().data());
            }
            let n = out.len();
            Tensor::new(vec![n], out)
        };
        let at = model.flatten_params();
        let h = hessian_dense(grad_fn, &at, 1e-4, HESSIAN_CAP_DEFAULT).unwrap();
        let report = spectrum_of(&h);
        let trace = h.trace();
        let sum: f64 = report.eigenvalues.iter().sum();
        let scale = trace.abs().max(1.0);
        assert!(
            (trace - sum).abs() / scale < 1e-6,
            "trace {trace} vs eigen sum {sum}"
        );
    }

    #[test]
    fn model_spectrum_is_reproducible_and_capped() {
        let model = LayeredModel::mlp(2, &[4], 2, false, 21);
        let ds = gen_synthetic(
            &SyntheticSpec::GaussianBlobs { classes: 2, per_class: 16, dim: 2, sep: 2.0, sigma: 0.8 },
            4,
        )
        .unwrap();
        let a = hessian_spectrum(&model, &ds, 0.1, 16, 0, 1e-4, HESSIAN_CAP_DEFAULT).unwrap();
        let b = hessian_spectrum(&model, &ds, 0.1, 16, 0, 1e-4, HESSIAN_CAP_DEFAULT).unwrap();
        assert_eq!(a, b);
        assert!(matches!(
            hessian_spectrum(&model, &ds, 0.1, 16, 0, 1e-4, 3),
            Err(Error::Capacity { .. })
        ));
    }
}
