//! Transfer evaluation: linear probes on frozen features and episodic
//! few-shot fine-tuning.

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::mask::set_frozen;
use crate::nn::{smoothed_cross_entropy, LayerKind, LayeredModel, LeafMode, ParamId};
use crate::optim::{sgd_step, Direction, SgdState};
use crate::rng;
use crate::tape::Tape;
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};

/// Features entering the classifier head: the forward pass through every
/// layer before the head, spatially pooled if convolutional.
pub fn body_features(model: &LayeredModel, inputs: &Tensor) -> Result<Tensor> {
    let head_at = model
        .layers
        .iter()
        .rposition(|l| l.kind == LayerKind::ClassifierHead)
        .ok_or_else(|| Error::Config("model has no classifier head".into()))?;
    let body = LayeredModel {
        layers: model.layers[..head_at].to_vec(),
        input_shape: model.input_shape.clone(),
    };
    let n = inputs.shape()[0];
    let stride: usize = inputs.shape()[1..].iter().product();
    let mut out = Vec::new();
    let indices: Vec<usize> = (0..n).collect();
    for chunk in indices.chunks(256) {
        let mut data = Vec::with_capacity(chunk.len() * stride);
        for &i in chunk {
            data.extend_from_slice(&inputs.data()[i * stride..(i + 1) * stride]);
        }
        let mut shape = vec![chunk.len()];
        shape.extend_from_slice(&inputs.shape()[1..]);
        let mut tape = Tape::new();
        let vars = body.leaves(&mut tape, LeafMode::None);
        let x = tape.leaf(Tensor::new(shape, data)?);
        let io = body.forward(&mut tape, &vars, &x, false)?;
        let feats = if io.output.value().shape().len() == 4 {
            tape.spatial_mean(&io.output)?.into_value()
        } else {
            io.output.into_value()
        };
        out.extend_from_slice(feats.data());
    }
    let dim = out.len() / n;
    Tensor::new(vec![n, dim], out)
}

/// Settings for the frozen-feature linear probe.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TransferConfig {
    pub lr_grid: Vec<f64>,
    pub epochs: usize,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TransferConfig {
    fn default() -> Self {
        TransferConfig {
            lr_grid: vec![1e-1, 1e-2, 1e-3],
            epochs: 120,
            momentum: 0.9,
            weight_decay: 1e-4,
            batch_size: 32,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransferResult {
    pub dataset: String,
    /// (learning rate, final test accuracy) per grid entry.
    pub per_lr: Vec<(f64, f64)>,
    pub best_accuracy: f64,
    pub epochs: usize,
}

/// Single-layer head over fixed features.
fn fresh_head(dim: usize, classes: usize, seed: u64) -> LayeredModel {
    LayeredModel {
        layers: vec![crate::nn::Layer::head("head", dim, classes, seed, 0)],
        input_shape: vec![dim],
    }
}

fn train_head_epochs(
    head: &mut LayeredModel,
    feats: &Tensor,
    labels: &[usize],
    lr: f64,
    epochs: usize,
    momentum: f64,
    weight_decay: f64,
    batch_size: usize,
    seed: u64,
) -> Result<()> {
    let mut sgd = SgdState::new(head, momentum, weight_decay);
    let n = feats.shape()[0];
    let dim = feats.shape()[1];
    for epoch in 0..epochs {
        let mut order: Vec<usize> = (0..n).collect();
        let mut erng = rng::stream(seed, "probe-epoch", epoch as u64, 0);
        rng::shuffle(&mut erng, &mut order);
        for batch in order.chunks(batch_size) {
            let mut data = Vec::with_capacity(batch.len() * dim);
            let mut y = Vec::with_capacity(batch.len());
            for &i in batch {
                data.extend_from_slice(&feats.data()[i * dim..(i + 1) * dim]);
                y.push(labels[i]);
            }
            let mut tape = Tape::new();
            let vars = head.leaves(&mut tape, LeafMode::Trainable);
            let x = tape.leaf(Tensor::new(vec![batch.len(), dim], data)?);
            let io = head.forward(&mut tape, &vars, &x, false)?;
            let loss = smoothed_cross_entropy(&mut tape, &io.output, &y, 0.0)?;
            let gm = tape.backward(&loss)?;
            let mut grads: BTreeMap<ParamId, Tensor> = BTreeMap::new();
            for (&id, var) in &vars {
                if let Some(g) = gm.get(var) {
                    grads.insert(id, g.clone());
                }
            }
            sgd_step(head, &grads, &mut sgd, lr, |_| Direction::Descent, 0.0)?;
        }
    }
    Ok(())
}

fn head_accuracy(head: &LayeredModel, feats: &Tensor, labels: &[usize]) -> Result<f64> {
    let preds = head.predict(feats)?;
    Ok(preds.iter().zip(labels).filter(|(p, l)| p == l).count() as f64 / labels.len().max(1) as f64)
}

/// Train a fresh classifier head on frozen body features for every learning
/// rate in the grid; report per-rate and best test accuracy. The body is
/// never touched; a head matching the target's class count is built from
/// scratch.
pub fn linear_probe(
    model: &LayeredModel,
    target_train: &Dataset,
    target_test: &Dataset,
    cfg: &TransferConfig,
) -> Result<TransferResult> {
    if cfg.lr_grid.is_empty() {
        return Err(Error::Config("transfer lr_grid must not be empty".into()));
    }
    let train_feats = body_features(model, &target_train.samples)?;
    let test_feats = body_features(model, &target_test.samples)?;
    let dim = train_feats.shape()[1];
    let classes = target_train.class_count;
    let mut per_lr = Vec::new();
    for (gi, &lr) in cfg.lr_grid.iter().enumerate() {
        let head_seed = rng::derive(cfg.seed, "probe-head", gi as u64, 0);
        let mut head = fresh_head(dim, classes, head_seed);
        train_head_epochs(
            &mut head,
            &train_feats,
            &target_train.labels,
            lr,
            cfg.epochs,
            cfg.momentum,
            cfg.weight_decay,
            cfg.batch_size,
            rng::derive(cfg.seed, "probe-order", gi as u64, 0),
        )?;
        let acc = head_accuracy(&head, &test_feats, &target_test.labels)?;
        per_lr.push((lr, acc));
    }
    let best_accuracy = per_lr.iter().map(|&(_, a)| a).fold(f64::NEG_INFINITY, f64::max);
    Ok(TransferResult {
        dataset: target_train.split.clone(),
        per_lr,
        best_accuracy,
        epochs: cfg.epochs,
    })
}

/// One few-shot task: a class-balanced support set and a disjoint
/// class-balanced query set, relabelled to [0, n_way).
#[derive(Clone, Debug, PartialEq)]
pub struct Episode {
    pub support_x: Tensor,
    pub support_y: Vec<usize>,
    pub query_x: Tensor,
    pub query_y: Vec<usize>,
    /// Original dataset class ids, indexed by episode label.
    pub classes: Vec<usize>,
}

/// Sample one episode without replacement at either level.
pub fn sample_episode(
    ds: &Dataset,
    n_way: usize,
    k_shot: usize,
    q_query: usize,
    rng: &mut rand_chacha::ChaCha8Rng,
) -> Result<Episode> {
    if n_way > ds.class_count {
        return Err(Error::Sampling(format!(
            "requested {n_way}-way episode from {} classes",
            ds.class_count
        )));
    }
    let by_class = ds.class_indices();
    let class_picks = rng::sample_without_replacement(rng, ds.class_count, n_way);
    let need = k_shot + q_query;
    let mut support_idx = Vec::with_capacity(n_way * k_shot);
    let mut query_idx = Vec::with_capacity(n_way * q_query);
    let mut support_y = Vec::with_capacity(n_way * k_shot);
    let mut query_y = Vec::with_capacity(n_way * q_query);
    for (new_label, &class) in class_picks.iter().enumerate() {
        let pool = &by_class[class];
        if pool.len() < need {
            return Err(Error::Sampling(format!(
                "class {class} has {} samples, episode needs {need}",
                pool.len()
            )));
        }
        let picks = rng::sample_without_replacement(rng, pool.len(), need);
        for (j, &p) in picks.iter().enumerate() {
            if j < k_shot {
                support_idx.push(pool[p]);
                support_y.push(new_label);
            } else {
                query_idx.push(pool[p]);
                query_y.push(new_label);
            }
        }
    }
    let (support_x, _) = ds.gather(&support_idx);
    let (query_x, _) = ds.gather(&query_idx);
    Ok(Episode {
        support_x,
        support_y,
        query_x,
        query_y,
        classes: class_picks,
    })
}

/// Which parameters fine-tune during an episode.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FewshotMode {
    /// Fresh linear head only.
    Linear,
    /// Fresh linear head plus every norm-affine scale/shift.
    LinearAffine,
}

impl FewshotMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(FewshotMode::Linear),
            "linear+affine" => Ok(FewshotMode::LinearAffine),
            other => Err(Error::Config(format!(
                "unknown few-shot mode {other:?}; expected linear or linear+affine"
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            FewshotMode::Linear => "linear",
            FewshotMode::LinearAffine => "linear+affine",
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FewshotConfig {
    pub episodes: usize,
    pub n_way: usize,
    pub k_shot: usize,
    pub q_query: usize,
    pub mode: FewshotMode,
    /// Full-support-batch fine-tuning steps per episode.
    pub steps: usize,
    /// Flat rates tried per episode; the final support loss picks the winner.
    pub lr_grid: Vec<f64>,
    pub momentum: f64,
    pub seed: u64,
}

impl Default for FewshotConfig {
    fn default() -> Self {
        FewshotConfig {
            episodes: 600,
            n_way: 5,
            k_shot: 5,
            q_query: 15,
            mode: FewshotMode::Linear,
            steps: 100,
            lr_grid: vec![1e-1, 1e-2],
            momentum: 0.9,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FewshotResult {
    pub mean_accuracy: f64,
    /// 1.96 * standard error over episodes.
    pub ci95: f64,
    pub episodes_run: usize,
    /// Diverged episodes, excluded from the mean but reported.
    pub excluded: usize,
    pub n_way: usize,
    pub k_shot: usize,
    pub q_query: usize,
    pub mode: FewshotMode,
    pub seed: u64,
}

/// Mean and 1.96 * stderr of a sample.
pub fn mean_ci(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (0.0, 0.0);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, 1.96 * (var / n as f64).sqrt())
}

/// Fine-tune one episode: a fresh n-way head (and, in linear+affine mode,
/// every norm-affine parameter) trains on the full support batch for a fixed
/// number of steps; everything else stays frozen. Returns the adapted model
/// and the final support loss.
pub fn episode_train(
    model: &LayeredModel,
    episode: &Episode,
    mode: FewshotMode,
    steps: usize,
    lr: f64,
    momentum: f64,
    head_seed: u64,
) -> Result<(LayeredModel, f64)> {
    let mut work = model.clone();
    work.replace_head(episode.classes.len(), head_seed)?;
    let all: BTreeSet<ParamId> = work.param_ids().into_iter().collect();
    set_frozen(&mut work, &all, true)?;
    let mut unfrozen: BTreeSet<ParamId> = BTreeSet::new();
    for (li, layer) in work.layers.iter().enumerate() {
        let trainable = match (mode, layer.kind) {
            (_, LayerKind::ClassifierHead) => true,
            (FewshotMode::LinearAffine, LayerKind::NormAffine) => true,
            _ => false,
        };
        if trainable {
            for pi in 0..layer.params.len() {
                unfrozen.insert(ParamId { layer: li, param: pi });
            }
        }
    }
    set_frozen(&mut work, &unfrozen, false)?;

    let mut sgd = SgdState::new(&work, momentum, 0.0);
    let mut final_loss = f64::INFINITY;
    for _ in 0..steps {
        let mut tape = Tape::new();
        let vars = work.leaves(&mut tape, LeafMode::Trainable);
        let x = tape.leaf(episode.support_x.clone());
        let io = work.forward(&mut tape, &vars, &x, false)?;
        let loss = smoothed_cross_entropy(&mut tape, &io.output, &episode.support_y, 0.0)?;
        final_loss = loss.value().item()?;
        if !final_loss.is_finite() {
            return Err(Error::NonFinite("episode fine-tuning diverged".into()));
        }
        let gm = tape.backward(&loss)?;
        let mut grads: BTreeMap<ParamId, Tensor> = BTreeMap::new();
        for (&id, var) in &vars {
            if let Some(g) = gm.get(var) {
                grads.insert(id, g.clone());
            }
        }
        sgd_step(&mut work, &grads, &mut sgd, lr, |_| Direction::Descent, 0.0)?;
    }
    // leave the adapted copy fully unfrozen for downstream use
    set_frozen(&mut work, &all, false)?;
    Ok((work, final_loss))
}

/// Episodic few-shot evaluation: mean query accuracy with a 95% confidence
/// interval over episodes. Per episode, each grid rate trains a fresh head;
/// the run with the lowest final support loss answers the queries. Episodes
/// where every rate diverges are excluded and counted.
pub fn fewshot_eval(model: &LayeredModel, ds: &Dataset, cfg: &FewshotConfig) -> Result<FewshotResult> {
    if cfg.lr_grid.is_empty() {
        return Err(Error::Config("few-shot lr_grid must not be empty".into()));
    }
    let mut accs = Vec::with_capacity(cfg.episodes);
    let mut excluded = 0usize;
    for ei in 0..cfg.episodes {
        let mut erng = rng::stream(cfg.seed, "episode", ei as u64, 0);
        let episode = sample_episode(ds, cfg.n_way, cfg.k_shot, cfg.q_query, &mut erng)?;
        let mut best: Option<(f64, LayeredModel)> = None;
        for (gi, &lr) in cfg.lr_grid.iter().enumerate() {
            let head_seed = rng::derive(cfg.seed, "episode-head", ei as u64, gi as u64);
            match episode_train(model, &episode, cfg.mode, cfg.steps, lr, cfg.momentum, head_seed) {
                Ok((adapted, support_loss)) => {
                    if best.as_ref().map_or(true, |(l, _)| support_loss < *l) {
                        best = Some((support_loss, adapted));
                    }
                }
                Err(Error::NonFinite(_)) | Err(Error::Divergence { .. }) => continue,
                Err(other) => return Err(other),
            }
        }
        match best {
            Some((_, adapted)) => {
                let preds = adapted.predict(&episode.query_x)?;
                let acc = preds
                    .iter()
                    .zip(&episode.query_y)
                    .filter(|(p, l)| p == l)
                    .count() as f64
                    / episode.query_y.len().max(1) as f64;
                accs.push(acc);
            }
            None => excluded += 1,
        }
    }
    let (mean_accuracy, ci95) = mean_ci(&accs);
    Ok(FewshotResult {
        mean_accuracy,
        ci95,
        episodes_run: accs.len(),
        excluded,
        n_way: cfg.n_way,
        k_shot: cfg.k_shot,
        q_query: cfg.q_query,
        mode: cfg.mode,
        seed: cfg.seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_synthetic, Provenance, SyntheticSpec};
    use nalgebra::DMatrix;

    fn blob_ds(classes: usize, per_class: usize, dim: usize, seed: u64) -> Dataset {
        gen_synthetic(
            &SyntheticSpec::GaussianBlobs {
                classes,
                per_class,
                dim,
                sep: 3.0,
                sigma: 1.0,
            },
            seed,
        )
        .unwrap()
    }

    #[test]
    fn episode_shapes_5way_1shot() {
        let ds = blob_ds(8, 20, 4, 2);
        let mut rng = rng::stream(0, "ep", 0, 0);
        let ep = sample_episode(&ds, 5, 1, 15, &mut rng).unwrap();
        assert_eq!(ep.support_x.shape()[0], 5);
        assert_eq!(ep.query_x.shape()[0], 75);
        assert_eq!(ep.support_y.len(), 5);
        assert_eq!(ep.query_y.len(), 75);
        // class-balanced and disjoint
        for label in 0..5 {
            assert_eq!(ep.support_y.iter().filter(|&&l| l == label).count(), 1);
            assert_eq!(ep.query_y.iter().filter(|&&l| l == label).count(), 15);
        }
    }

    #[test]
    fn episodes_are_deterministic_under_seed() {
        let ds = blob_ds(8, 20, 4, 2);
        let mut a = rng::stream(5, "ep", 0, 0);
        let mut b = rng::stream(5, "ep", 0, 0);
        let ea = sample_episode(&ds, 5, 3, 5, &mut a).unwrap();
        let eb = sample_episode(&ds, 5, 3, 5, &mut b).unwrap();
        assert_eq!(ea, eb);
    }

    #[test]
    fn episode_guards() {
        let ds = blob_ds(4, 10, 4, 2);
        let mut rng = rng::stream(0, "ep", 0, 0);
        assert!(matches!(
            sample_episode(&ds, 5, 1, 15, &mut rng),
            Err(Error::Sampling(_))
        ));
        let err = sample_episode(&ds, 4, 5, 15, &mut rng).unwrap_err();
        assert!(err.to_string().contains("class"), "{err}");
    }

    #[test]
    fn support_and_query_rows_are_disjoint() {
        let ds = blob_ds(6, 12, 3, 9);
        let dim = ds.sample_numel();
        for t in 0..16 {
            let mut rng = rng::stream(t, "ep-disjoint", 0, 0);
            let ep = sample_episode(&ds, 4, 2, 3, &mut rng).unwrap();
            for si in 0..ep.support_x.shape()[0] {
                let srow = &ep.support_x.data()[si * dim..(si + 1) * dim];
                for qi in 0..ep.query_x.shape()[0] {
                    let qrow = &ep.query_x.data()[qi * dim..(qi + 1) * dim];
                    assert_ne!(srow, qrow);
                }
            }
        }
    }

    #[test]
    fn mode_restricts_updated_parameters() {
        let ds = blob_ds(6, 10, 4, 3);
        let model = LayeredModel::mlp(4, &[6, 6], 6, true, 31);
        let mut rng = rng::stream(1, "ep", 0, 0);
        let ep = sample_episode(&ds, 3, 2, 2, &mut rng).unwrap();

        for mode in [FewshotMode::Linear, FewshotMode::LinearAffine] {
            let (adapted, _) = episode_train(&model, &ep, mode, 5, 0.05, 0.9, 77).unwrap();
            for (li, layer) in model.layers.iter().enumerate() {
                for (pi, param) in layer.params.iter().enumerate() {
                    let after = &adapted.layers[li].params[pi].value;
                    match layer.kind {
                        LayerKind::ClassifierHead => {} // replaced entirely
                        LayerKind::NormAffine => {
                            if mode == FewshotMode::Linear {
                                assert_eq!(after, &param.value, "affine changed in linear mode");
                            }
                        }
                        _ => assert_eq!(after, &param.value, "body changed at {li}.{pi}"),
                    }
                }
            }
            if mode == FewshotMode::LinearAffine {
                // at least one affine parameter actually moved
                let moved = model
                    .layers
                    .iter()
                    .enumerate()
                    .filter(|(_, l)| l.kind == LayerKind::NormAffine)
                    .any(|(li, l)| {
                        (0..l.params.len())
                            .any(|pi| adapted.layers[li].params[pi].value != l.params[pi].value)
                    });
                assert!(moved, "linear+affine mode should move affine parameters");
            }
        }
    }

    #[test]
    fn fewshot_eval_is_deterministic() {
        let ds = blob_ds(8, 12, 4, 3);
        let model = LayeredModel::mlp(4, &[6], 8, false, 31);
        let cfg = FewshotConfig {
            episodes: 4,
            n_way: 3,
            k_shot: 2,
            q_query: 3,
            steps: 10,
            lr_grid: vec![0.1],
            ..Default::default()
        };
        let a = fewshot_eval(&model, &ds, &cfg).unwrap();
        let b = fewshot_eval(&model, &ds, &cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.episodes_run, 4);
        assert_eq!(a.excluded, 0);
    }

    #[test]
    fn ci_shrinks_like_inverse_sqrt_n() {
        // per-episode accuracy of a fixed-accuracy oracle model: mean of
        // q Bernoulli(p) query outcomes
        let (p, q) = (0.7, 15);
        let mut rng = rng::stream(40, "ci-oracle", 0, 0);
        let accs: Vec<f64> = (0..600)
            .map(|_| {
                let hits = (0..q).filter(|_| rng::uniform(&mut rng) < p).count();
                hits as f64 / q as f64
            })
            .collect();
        let ns = [50usize, 200, 600];
        let points: Vec<(f64, f64)> = ns
            .iter()
            .map(|&n| {
                let (_, ci) = mean_ci(&accs[..n]);
                ((n as f64).ln(), ci.ln())
            })
            .collect();
        let xbar = points.iter().map(|p| p.0).sum::<f64>() / points.len() as f64;
        let ybar = points.iter().map(|p| p.1).sum::<f64>() / points.len() as f64;
        let slope = points.iter().map(|p| (p.0 - xbar) * (p.1 - ybar)).sum::<f64>()
            / points.iter().map(|p| (p.0 - xbar).powi(2)).sum::<f64>();
        assert!(
            (slope + 0.5).abs() < 0.15,
            "CI slope {slope} should be near -0.5"
        );
    }

    /// Least-squares one-vs-all oracle: closed-form ridge-free fit on
    /// feature rows; classifies by argmax of the fitted linear scores.
    fn least_squares_accuracy(feats: &Tensor, labels: &[usize], classes: usize) -> f64 {
        let (n, d) = (feats.shape()[0], feats.shape()[1]);
        // design matrix with a bias column
        let mut x = DMatrix::zeros(n, d + 1);
        for i in 0..n {
            for j in 0..d {
                x[(i, j)] = feats.data()[i * d + j];
            }
            x[(i, d)] = 1.0;
        }
        let mut y = DMatrix::zeros(n, classes);
        for (i, &l) in labels.iter().enumerate() {
            y[(i, l)] = 1.0;
        }
        let xt = x.transpose();
        let gram = &xt * &x + DMatrix::identity(d + 1, d + 1) * 1e-9;
        let beta = gram.lu().solve(&(&xt * &y)).expect("gram is invertible");
        let scores = &x * &beta;
        let mut hits = 0;
        for i in 0..n {
            let mut best = 0;
            for c in 1..classes {
                if scores[(i, c)] > scores[(i, best)] {
                    best = c;
                }
            }
            if best == labels[i] {
                hits += 1;
            }
        }
        hits as f64 / n as f64
    }

    #[test]
    fn linear_probe_reaches_100_on_separable_features() {
        // frozen random body; labels defined by a random linear rule on the
        // body's own features with a margin, so the features are linearly
        // separable by construction
        let model = LayeredModel::mlp(6, &[10], 3, false, 5);
        let mut xr = rng::stream(12, "sep-x", 0, 0);
        let classes = 3usize;
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        let w = Tensor::uniform(&[10, classes], -1.0, 1.0, &mut rng::stream(12, "sep-w", 0, 0));
        while labels.len() < 60 {
            let x = Tensor::uniform(&[1, 6], -1.0, 1.0, &mut xr);
            let f = body_features(&model, &x).unwrap();
            let mut scores = vec![0.0; classes];
            for c in 0..classes {
                for j in 0..10 {
                    scores[c] += f.data()[j] * w.data()[j * classes + c];
                }
            }
            let mut order: Vec<usize> = (0..classes).collect();
            order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap());
            if scores[order[0]] - scores[order[1]] < 0.1 {
                continue; // enforce a margin
            }
            rows.extend_from_slice(x.data());
            labels.push(order[0]);
        }
        let n = labels.len();
        let ds = Dataset::new(
            Tensor::new(vec![n, 6], rows).unwrap(),
            labels,
            classes,
            "separable",
            Provenance::Generated { kind: "separable".into(), params: String::new(), seed: 12 },
        )
        .unwrap();

        // oracle first: the closed-form fit must already score 100%
        let feats = body_features(&model, &ds.samples).unwrap();
        assert_eq!(least_squares_accuracy(&feats, &ds.labels, classes), 1.0);

        let cfg = TransferConfig {
            lr_grid: vec![1e-1, 1e-2],
            epochs: 200,
            batch_size: 16,
            ..Default::default()
        };
        let result = linear_probe(&model, &ds, &ds, &cfg).unwrap();
        assert_eq!(result.best_accuracy, 1.0, "{:?}", result.per_lr);
    }

    #[test]
    fn single_grid_entry_is_its_own_best() {
        let ds = blob_ds(3, 12, 4, 8);
        let model = LayeredModel::mlp(4, &[6], 3, false, 31);
        let cfg = TransferConfig {
            lr_grid: vec![1e-2],
            epochs: 5,
            ..Default::default()
        };
        let result = linear_probe(&model, &ds, &ds, &cfg).unwrap();
        assert_eq!(result.per_lr.len(), 1);
        assert_eq!(result.best_accuracy, result.per_lr[0].1);
    }

    #[test]
    fn constant_features_stay_near_chance() {
        // a body producing constant features can do no better than the
        // majority class
        let mut model = LayeredModel::mlp(4, &[6], 4, false, 31);
        // zero first-layer weights and bias: relu output constant zero
        for pi in 0..2 {
            let id = ParamId { layer: 0, param: pi };
            let n = model.param(id).unwrap().value.numel();
            let shape = model.param(id).unwrap().value.shape().to_vec();
            model.param_mut(id).unwrap().value = Tensor::new(shape, vec![0.0; n]).unwrap();
        }
        let ds = blob_ds(4, 25, 4, 8);
        let cfg = TransferConfig {
            lr_grid: vec![1e-1],
            epochs: 30,
            ..Default::default()
        };
        let result = linear_probe(&model, &ds, &ds, &cfg).unwrap();
        assert!(
            result.best_accuracy <= 0.25 + 0.05,
            "constant features scored {}",
            result.best_accuracy
        );
    }
}
