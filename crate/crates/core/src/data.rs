//! Dataset generation, file ingestion, augmentation, and deterministic
//! splitting.

use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::io::Write;
use std::path::Path;

/// Where a dataset came from; enough to regenerate or verify it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case")]
pub enum Provenance {
    Generated { kind: String, params: String, seed: u64 },
    File { path: String, sha256: String },
    Derived { base: Box<Provenance>, transform: String },
}

/// Samples plus class labels. Samples are `[n, features]` vectors or
/// `[n, c, h, w]` images with values in [0, 1] for file-loaded pixels.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub samples: Tensor,
    pub labels: Vec<usize>,
    pub class_count: usize,
    pub split: String,
    pub provenance: Provenance,
}

impl Dataset {
    pub fn new(
        samples: Tensor,
        labels: Vec<usize>,
        class_count: usize,
        split: &str,
        provenance: Provenance,
    ) -> Result<Self> {
        if samples.shape()[0] != labels.len() {
            return Err(Error::Config(format!(
                "{} samples but {} labels",
                samples.shape()[0],
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= class_count) {
            return Err(Error::Config(format!(
                "label {bad} out of range for {class_count} classes"
            )));
        }
        Ok(Dataset {
            samples,
            labels,
            class_count,
            split: split.to_string(),
            provenance,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Per-sample shape (without the leading count).
    pub fn sample_shape(&self) -> &[usize] {
        &self.samples.shape()[1..]
    }

    pub fn sample_numel(&self) -> usize {
        self.sample_shape().iter().product()
    }

    pub fn is_images(&self) -> bool {
        self.sample_shape().len() == 3
    }

    /// Gather the given sample rows into a batch tensor.
    pub fn gather(&self, indices: &[usize]) -> (Tensor, Vec<usize>) {
        let stride = self.sample_numel();
        let mut data = Vec::with_capacity(indices.len() * stride);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            data.extend_from_slice(&self.samples.data()[i * stride..(i + 1) * stride]);
            labels.push(self.labels[i]);
        }
        let mut shape = vec![indices.len()];
        shape.extend_from_slice(self.sample_shape());
        (Tensor::new(shape, data).expect("gather shape consistent"), labels)
    }

    /// Sample indices per class.
    pub fn class_indices(&self) -> Vec<Vec<usize>> {
        let mut by_class = vec![Vec::new(); self.class_count];
        for (i, &l) in self.labels.iter().enumerate() {
            by_class[l].push(i);
        }
        by_class
    }

    /// Keep only classes in [lo, hi), relabelled to 0..hi-lo.
    pub fn class_range(&self, lo: usize, hi: usize) -> Result<Dataset> {
        if lo >= hi || hi > self.class_count {
            return Err(Error::Config(format!(
                "class range {lo}..{hi} invalid for {} classes",
                self.class_count
            )));
        }
        let keep: Vec<usize> = (0..self.len())
            .filter(|&i| (lo..hi).contains(&self.labels[i]))
            .collect();
        let (samples, labels) = self.gather(&keep);
        let labels = labels.into_iter().map(|l| l - lo).collect();
        Dataset::new(
            samples,
            labels,
            hi - lo,
            &self.split,
            Provenance::Derived {
                base: Box::new(self.provenance.clone()),
                transform: format!("class_range({lo},{hi})"),
            },
        )
    }
}

/// Synthetic dataset family.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum SyntheticSpec {
    /// Gaussian clusters: centers ~ N(0, sep^2 I), points center + sigma*N(0,I).
    GaussianBlobs {
        classes: usize,
        per_class: usize,
        dim: usize,
        sep: f64,
        sigma: f64,
    },
    /// Interleaved 2-d spiral arms, one per class.
    ConcentricSpirals {
        classes: usize,
        per_class: usize,
        turns: f64,
        noise: f64,
    },
    /// Inputs ~ N(0, I) labelled by the argmax of a frozen random relu
    /// network; class-balanced by rejection.
    TeacherNetwork {
        classes: usize,
        per_class: usize,
        dim: usize,
        hidden: Vec<usize>,
    },
}

impl SyntheticSpec {
    fn describe(&self) -> (String, String, usize, usize) {
        match self {
            SyntheticSpec::GaussianBlobs { classes, per_class, dim, sep, sigma } => (
                "gaussian-blobs".into(),
                format!("classes={classes},per_class={per_class},dim={dim},sep={sep},sigma={sigma}"),
                *classes,
                *per_class,
            ),
            SyntheticSpec::ConcentricSpirals { classes, per_class, turns, noise } => (
                "concentric-spirals".into(),
                format!("classes={classes},per_class={per_class},turns={turns},noise={noise}"),
                *classes,
                *per_class,
            ),
            SyntheticSpec::TeacherNetwork { classes, per_class, dim, hidden } => (
                "teacher-network".into(),
                format!("classes={classes},per_class={per_class},dim={dim},hidden={hidden:?}"),
                *classes,
                *per_class,
            ),
        }
    }
}

/// Frozen random relu network used by the teacher generator; plain loops,
/// no tape involvement. Output biases are calibrated once so that argmax
/// label shares are roughly balanced, then frozen.
struct TeacherNet {
    weights: Vec<(Vec<f64>, usize, usize)>,
    out_bias: Vec<f64>,
}

impl TeacherNet {
    fn draw(dim: usize, hidden: &[usize], classes: usize, seed: u64) -> Self {
        let mut dims = vec![dim];
        dims.extend_from_slice(hidden);
        dims.push(classes);
        let mut weights = Vec::new();
        for (li, pair) in dims.windows(2).enumerate() {
            let (i, o) = (pair[0], pair[1]);
            let mut rng = rng::stream(seed, "teacher", li as u64, 0);
            let bound = 1.0 / (i as f64).sqrt();
            let w: Vec<f64> = (0..i * o)
                .map(|_| rng::uniform_in(&mut rng, -bound, bound))
                .collect();
            weights.push((w, i, o));
        }
        let mut net = TeacherNet {
            weights,
            out_bias: vec![0.0; classes],
        };
        net.calibrate(dim, classes, seed);
        net
    }

    /// Nudge the output biases until every class wins a fair share of the
    /// argmax over a fixed probe batch. The probe logits are computed once;
    /// bias steps are scaled by the logit spread so the search neither
    /// stalls nor oscillates.
    fn calibrate(&mut self, dim: usize, classes: usize, seed: u64) {
        let probes = 2048usize;
        let mut prng = rng::stream(seed, "teacher-calibrate", 0, 0);
        let mut logit_rows: Vec<Vec<f64>> = Vec::with_capacity(probes);
        let mut x = vec![0.0; dim];
        for _ in 0..probes {
            for v in x.iter_mut() {
                *v = rng::normal(&mut prng);
            }
            logit_rows.push(self.logits(&x));
        }
        let mean: f64 = logit_rows.iter().flatten().sum::<f64>() / (probes * classes) as f64;
        let var: f64 = logit_rows
            .iter()
            .flatten()
            .map(|v| (v - mean).powi(2))
            .sum::<f64>()
            / (probes * classes) as f64;
        let sigma = var.sqrt().max(1e-6);
        let uniform = 1.0 / classes as f64;
        let mut bias = vec![0.0; classes];
        for _ in 0..300 {
            let mut counts = vec![0usize; classes];
            for row in &logit_rows {
                let mut best = 0;
                for c in 1..classes {
                    if row[c] + bias[c] > row[best] + bias[best] {
                        best = c;
                    }
                }
                counts[best] += 1;
            }
            for (c, &n) in counts.iter().enumerate() {
                let freq = n as f64 / probes as f64;
                bias[c] -= 0.1 * sigma * (freq - uniform) / uniform;
            }
        }
        self.out_bias = bias;
    }

    fn logits(&self, x: &[f64]) -> Vec<f64> {
        let mut act = x.to_vec();
        let last = self.weights.len() - 1;
        for (li, (w, i, o)) in self.weights.iter().enumerate() {
            let mut next = vec![0.0; *o];
            for p in 0..*i {
                let a = act[p];
                if a == 0.0 {
                    continue;
                }
                for j in 0..*o {
                    next[j] += a * w[p * o + j];
                }
            }
            if li == last {
                for (j, v) in next.iter_mut().enumerate() {
                    *v += self.out_bias[j];
                }
            } else {
                next.iter_mut().for_each(|v| *v = v.max(0.0));
            }
            act = next;
        }
        act
    }

    fn label(&self, x: &[f64]) -> usize {
        let act = self.logits(x);
        let mut best = 0;
        for (i, &v) in act.iter().enumerate() {
            if v > act[best] {
                best = i;
            }
        }
        best
    }
}

/// Generate a synthetic dataset. Deterministic in (spec, seed).
pub fn gen_synthetic(spec: &SyntheticSpec, seed: u64) -> Result<Dataset> {
    let (kind, params, classes, per_class) = spec.describe();
    if classes < 2 {
        return Err(Error::Config(format!("class count must be >= 2, got {classes}")));
    }
    if per_class < 1 {
        return Err(Error::Config("per-class count must be >= 1".into()));
    }
    let provenance = Provenance::Generated { kind, params, seed };
    match spec {
        SyntheticSpec::GaussianBlobs { classes, per_class, dim, sep, sigma } => {
            if *dim == 0 {
                return Err(Error::Config("blob dimension must be positive".into()));
            }
            let mut crng = rng::stream(seed, "blob-centers", 0, 0);
            let centers: Vec<Vec<f64>> = (0..*classes)
                .map(|_| (0..*dim).map(|_| sep * rng::normal(&mut crng)).collect())
                .collect();
            let mut data = Vec::with_capacity(classes * per_class * dim);
            let mut labels = Vec::with_capacity(classes * per_class);
            for (c, center) in centers.iter().enumerate() {
                let mut prng = rng::stream(seed, "blob-points", c as u64, 0);
                for _ in 0..*per_class {
                    for &cv in center.iter() {
                        data.push(cv + sigma * rng::normal(&mut prng));
                    }
                    labels.push(c);
                }
            }
            let samples = Tensor::new(vec![classes * per_class, *dim], data)?;
            Dataset::new(samples, labels, *classes, "full", provenance)
        }
        SyntheticSpec::ConcentricSpirals { classes, per_class, turns, noise } => {
            let mut data = Vec::with_capacity(classes * per_class * 2);
            let mut labels = Vec::with_capacity(classes * per_class);
            for c in 0..*classes {
                let offset = std::f64::consts::TAU * c as f64 / *classes as f64;
                let mut prng = rng::stream(seed, "spiral", c as u64, 0);
                for _ in 0..*per_class {
                    let t = 0.15 + 0.85 * rng::uniform(&mut prng);
                    let angle = std::f64::consts::TAU * turns * t + offset;
                    let r = t;
                    data.push(r * angle.cos() + noise * rng::normal(&mut prng));
                    data.push(r * angle.sin() + noise * rng::normal(&mut prng));
                    labels.push(c);
                }
            }
            let samples = Tensor::new(vec![classes * per_class, 2], data)?;
            Dataset::new(samples, labels, *classes, "full", provenance)
        }
        SyntheticSpec::TeacherNetwork { classes, per_class, dim, hidden } => {
            if *dim == 0 {
                return Err(Error::Config("teacher input dimension must be positive".into()));
            }
            let teacher = TeacherNet::draw(*dim, hidden, *classes, rng::derive(seed, "teacher-weights", 0, 0));
            let mut fills = vec![0usize; *classes];
            let total = classes * per_class;
            let mut data = vec![0.0; total * dim];
            let mut labels = vec![0usize; total];
            let mut placed = 0;
            let mut rng_x = rng::stream(seed, "teacher-inputs", 0, 0);
            let cap = 400 * total;
            let mut attempts = 0;
            let mut x = vec![0.0; *dim];
            while placed < total {
                attempts += 1;
                if attempts > cap {
                    let short: Vec<usize> = (0..*classes).filter(|&c| fills[c] < *per_class).collect();
                    return Err(Error::Config(format!(
                        "teacher network could not balance classes {short:?} after {cap} draws; \
                         change the seed or the teacher architecture"
                    )));
                }
                for v in x.iter_mut() {
                    *v = rng::normal(&mut rng_x);
                }
                let label = teacher.label(&x);
                if fills[label] >= *per_class {
                    continue;
                }
                let row = label * per_class + fills[label];
                data[row * dim..(row + 1) * dim].copy_from_slice(&x);
                labels[row] = label;
                fills[label] += 1;
                placed += 1;
            }
            let samples = Tensor::new(vec![total, *dim], data)?;
            Dataset::new(samples, labels, *classes, "full", provenance)
        }
    }
}

fn file_sha256(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    let digest = hasher.finalize();
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

const IDX_MAGIC_LABELS: u32 = 0x0000_0801;
const IDX_MAGIC_IMAGES: u32 = 0x0000_0803;

fn read_be_u32(bytes: &[u8], offset: usize, what: &str) -> Result<u32> {
    let end = offset + 4;
    if end > bytes.len() {
        return Err(Error::Parse(format!(
            "truncated {what} at byte offset {offset}: need 4 bytes, have {}",
            bytes.len() - offset
        )));
    }
    Ok(u32::from_be_bytes([bytes[offset], bytes[offset + 1], bytes[offset + 2], bytes[offset + 3]]))
}

fn parse_idx_images(bytes: &[u8], path: &str) -> Result<(Vec<f64>, usize, usize, usize)> {
    let magic = read_be_u32(bytes, 0, "magic")?;
    if magic != IDX_MAGIC_IMAGES {
        return Err(Error::Parse(format!(
            "{path}: bad image magic {magic:#010x} at byte offset 0, expected {IDX_MAGIC_IMAGES:#010x}"
        )));
    }
    let n = read_be_u32(bytes, 4, "item count")? as usize;
    let rows = read_be_u32(bytes, 8, "row count")? as usize;
    let cols = read_be_u32(bytes, 12, "column count")? as usize;
    let need = 16 + n * rows * cols;
    if bytes.len() < need {
        return Err(Error::Parse(format!(
            "{path}: truncated payload at byte offset {}: header declares {need} bytes",
            bytes.len()
        )));
    }
    let data = bytes[16..need].iter().map(|&b| b as f64 / 255.0).collect();
    Ok((data, n, rows, cols))
}

fn parse_idx_labels(bytes: &[u8], path: &str) -> Result<Vec<usize>> {
    let magic = read_be_u32(bytes, 0, "magic")?;
    if magic != IDX_MAGIC_LABELS {
        return Err(Error::Parse(format!(
            "{path}: bad label magic {magic:#010x} at byte offset 0, expected {IDX_MAGIC_LABELS:#010x}"
        )));
    }
    let n = read_be_u32(bytes, 4, "item count")? as usize;
    let need = 8 + n;
    if bytes.len() < need {
        return Err(Error::Parse(format!(
            "{path}: truncated payload at byte offset {}: header declares {need} bytes",
            bytes.len()
        )));
    }
    Ok(bytes[8..need].iter().map(|&b| b as usize).collect())
}

/// Load an IDX image/label file pair (big-endian magics 0x00000803 and
/// 0x00000801). Pixels are scaled to [0, 1]; images come out as
/// [n, 1, rows, cols].
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    let img_bytes = std::fs::read(images_path)?;
    let lbl_bytes = std::fs::read(labels_path)?;
    let (data, n, rows, cols) = parse_idx_images(&img_bytes, &images_path.display().to_string())?;
    let labels = parse_idx_labels(&lbl_bytes, &labels_path.display().to_string())?;
    if labels.len() != n {
        return Err(Error::Parse(format!(
            "{} images but {} labels",
            n,
            labels.len()
        )));
    }
    let class_count = labels.iter().max().map_or(0, |m| m + 1).max(2);
    let samples = Tensor::new(vec![n, 1, rows, cols], data)?;
    let digest = file_sha256(&img_bytes);
    Dataset::new(
        samples,
        labels,
        class_count,
        "full",
        Provenance::File {
            path: images_path.display().to_string(),
            sha256: digest,
        },
    )
}

/// Write a dataset of single-channel images back out as an IDX pair. Pixel
/// values are quantized to bytes (exact for data loaded from IDX files).
pub fn save_idx(ds: &Dataset, images_path: &Path, labels_path: &Path) -> Result<()> {
    let shape = ds.samples.shape();
    if shape.len() != 4 || shape[1] != 1 {
        return Err(Error::Config(format!(
            "save_idx expects [n,1,h,w] images, got {shape:?}"
        )));
    }
    let (n, rows, cols) = (shape[0], shape[2], shape[3]);
    let mut img = Vec::with_capacity(16 + n * rows * cols);
    img.extend_from_slice(&IDX_MAGIC_IMAGES.to_be_bytes());
    img.extend_from_slice(&(n as u32).to_be_bytes());
    img.extend_from_slice(&(rows as u32).to_be_bytes());
    img.extend_from_slice(&(cols as u32).to_be_bytes());
    for &v in ds.samples.data() {
        img.push((v * 255.0).round().clamp(0.0, 255.0) as u8);
    }
    let mut lbl = Vec::with_capacity(8 + n);
    lbl.extend_from_slice(&IDX_MAGIC_LABELS.to_be_bytes());
    lbl.extend_from_slice(&(n as u32).to_be_bytes());
    for &l in &ds.labels {
        lbl.push(l as u8);
    }
    std::fs::File::create(images_path)?.write_all(&img)?;
    std::fs::File::create(labels_path)?.write_all(&lbl)?;
    Ok(())
}

/// CSV layout: which column holds the label; every other column is a numeric
/// feature.
#[derive(Clone, Copy, Debug)]
pub struct CsvSchema {
    pub label_column: usize,
    pub has_header: bool,
}

/// Load a CSV of numeric features plus one label column.
pub fn load_csv(path: &Path, schema: &CsvSchema) -> Result<Dataset> {
    let bytes = std::fs::read(path)?;
    let digest = file_sha256(&bytes);
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(schema.has_header)
        .trim(csv::Trim::All)
        .from_reader(bytes.as_slice());
    let mut data = Vec::new();
    let mut labels = Vec::new();
    let mut width = None;
    for (ri, record) in reader.records().enumerate() {
        let line = ri + 1 + usize::from(schema.has_header);
        let record = record.map_err(|e| Error::Parse(format!("{}: line {line}: {e}", path.display())))?;
        if schema.label_column >= record.len() {
            return Err(Error::Parse(format!(
                "{}: line {line}: label column {} out of range for {} fields",
                path.display(),
                schema.label_column,
                record.len()
            )));
        }
        match width {
            None => width = Some(record.len()),
            Some(w) if w != record.len() => {
                return Err(Error::Parse(format!(
                    "{}: line {line}: expected {w} fields, got {}",
                    path.display(),
                    record.len()
                )))
            }
            _ => {}
        }
        for (ci, field) in record.iter().enumerate() {
            if ci == schema.label_column {
                let label: usize = field.parse().map_err(|_| {
                    Error::Parse(format!(
                        "{}: line {line}: label {field:?} is not a non-negative integer",
                        path.display()
                    ))
                })?;
                labels.push(label);
            } else {
                let v: f64 = field.parse().map_err(|_| {
                    Error::Parse(format!(
                        "{}: line {line}: field {field:?} is not numeric",
                        path.display()
                    ))
                })?;
                data.push(v);
            }
        }
    }
    if labels.is_empty() {
        return Err(Error::Parse(format!("{}: no data rows", path.display())));
    }
    let dim = width.unwrap() - 1;
    let class_count = labels.iter().max().map_or(0, |m| m + 1).max(2);
    let samples = Tensor::new(vec![labels.len(), dim], data)?;
    Dataset::new(
        samples,
        labels,
        class_count,
        "full",
        Provenance::File {
            path: path.display().to_string(),
            sha256: digest,
        },
    )
}

/// Write a vector dataset as CSV with the label in column 0. Floats use the
/// shortest round-trip representation, so load_csv restores them bitwise.
pub fn save_csv(ds: &Dataset, path: &Path) -> Result<()> {
    if ds.sample_shape().len() != 1 {
        return Err(Error::Config("save_csv expects vector samples".into()));
    }
    let dim = ds.sample_numel();
    let mut out = String::new();
    for (i, &label) in ds.labels.iter().enumerate() {
        out.push_str(&label.to_string());
        for v in &ds.samples.data()[i * dim..(i + 1) * dim] {
            out.push(',');
            out.push_str(&format!("{v}"));
        }
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Per-sample horizontal flip (probability 1/2) and zero-padded random crop.
/// Labels are untouched; the caller keeps them aligned.
pub fn augment(batch: &Tensor, flip: bool, crop_pad: usize, rng: &mut rand_chacha::ChaCha8Rng) -> Result<Tensor> {
    let shape = batch.shape();
    if shape.len() != 4 {
        return Err(Error::Config(format!(
            "augmentation requires [n,c,h,w] image batches, got {shape:?}"
        )));
    }
    if !flip && crop_pad == 0 {
        return Ok(batch.clone());
    }
    let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    let src = batch.data();
    let mut out = vec![0.0; src.len()];
    let plane = c * h * w;
    for s in 0..n {
        let do_flip = flip && rng::uniform(rng) < 0.5;
        let (oy, ox) = if crop_pad > 0 {
            (rng::below(rng, 2 * crop_pad + 1), rng::below(rng, 2 * crop_pad + 1))
        } else {
            (0, 0)
        };
        flip_crop_one(
            &src[s * plane..(s + 1) * plane],
            &mut out[s * plane..(s + 1) * plane],
            c,
            h,
            w,
            do_flip,
            crop_pad,
            oy,
            ox,
        );
    }
    Tensor::new(shape.to_vec(), out)
}

/// Flip then zero-pad-and-crop a single [c,h,w] image. The crop takes the
/// window whose top-left corner sits at (oy, ox) in the padded image.
#[allow(clippy::too_many_arguments)]
fn flip_crop_one(
    src: &[f64],
    out: &mut [f64],
    c: usize,
    h: usize,
    w: usize,
    do_flip: bool,
    crop_pad: usize,
    oy: usize,
    ox: usize,
) {
    for ci in 0..c {
        for y in 0..h {
            for x in 0..w {
                // source position in the padded image for output (y, x)
                let sy = (y + oy) as isize - crop_pad as isize;
                let sx = (x + ox) as isize - crop_pad as isize;
                let mut v = 0.0;
                if sy >= 0 && (sy as usize) < h && sx >= 0 && (sx as usize) < w {
                    let sx = if do_flip { w - 1 - sx as usize } else { sx as usize };
                    v = src[(ci * h + sy as usize) * w + sx];
                }
                out[(ci * h + y) * w + x] = v;
            }
        }
    }
}

/// Stratified split into parts proportional to `fractions` (must sum to 1).
/// Per-class sample order is shuffled deterministically before partitioning.
pub fn split(ds: &Dataset, fractions: &[f64], seed: u64) -> Result<Vec<Dataset>> {
    let total: f64 = fractions.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!("fractions sum to {total}, expected 1")));
    }
    if fractions.iter().any(|&f| f < 0.0) {
        return Err(Error::Config("fractions must be non-negative".into()));
    }
    let parts = fractions.len();
    let by_class = ds.class_indices();
    for (c, idxs) in by_class.iter().enumerate() {
        if idxs.len() < parts {
            return Err(Error::Config(format!(
                "class {c} has {} samples, fewer than {parts} parts",
                idxs.len()
            )));
        }
    }
    let mut assignments: Vec<Vec<usize>> = vec![Vec::new(); parts];
    for (c, idxs) in by_class.iter().enumerate() {
        let mut order = idxs.clone();
        let mut crng = rng::stream(seed, "split", c as u64, 0);
        rng::shuffle(&mut crng, &mut order);
        // largest-remainder apportionment of this class across parts
        let n = order.len();
        let mut counts: Vec<usize> = fractions.iter().map(|f| (f * n as f64).floor() as usize).collect();
        let assigned: usize = counts.iter().sum();
        let mut remainders: Vec<(f64, usize)> = fractions
            .iter()
            .enumerate()
            .map(|(i, f)| (f * n as f64 - counts[i] as f64, i))
            .collect();
        remainders.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
        for k in 0..(n - assigned) {
            counts[remainders[k % parts].1] += 1;
        }
        let mut cursor = 0;
        for (p, &count) in counts.iter().enumerate() {
            assignments[p].extend_from_slice(&order[cursor..cursor + count]);
            cursor += count;
        }
    }
    let names = ["train", "test", "valid"];
    assignments
        .into_iter()
        .enumerate()
        .map(|(p, mut idxs)| {
            idxs.sort_unstable();
            let (samples, labels) = ds.gather(&idxs);
            Dataset::new(
                samples,
                labels,
                ds.class_count,
                names.get(p).copied().unwrap_or("part"),
                Provenance::Derived {
                    base: Box::new(ds.provenance.clone()),
                    transform: format!("split[{p}]@seed={seed}"),
                },
            )
        })
        .collect()
}

/// Synthetic domain shifts for transfer targets, ordered by increasing
/// severity.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Shift {
    /// Permute channels (images) or feature order (vectors).
    Permute,
    /// Block-average images / quantize vector values to coarse levels.
    Pixelate,
    /// Reflect values around the data range midpoint.
    Invert,
}

impl Shift {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "permute" => Ok(Shift::Permute),
            "pixelate" => Ok(Shift::Pixelate),
            "invert" => Ok(Shift::Invert),
            other => Err(Error::Config(format!("unknown shift kind {other:?}"))),
        }
    }
}

/// Apply a synthetic domain shift; deterministic in the seed.
pub fn domain_shift(ds: &Dataset, shift: Shift, seed: u64) -> Result<Dataset> {
    let shape = ds.samples.shape().to_vec();
    let mut data = ds.samples.data().to_vec();
    match shift {
        Shift::Permute => {
            let stride = ds.sample_numel();
            let (unit, count) = if ds.is_images() && shape[1] > 1 {
                (stride / shape[1], shape[1])
            } else {
                (1, stride)
            };
            let mut perm: Vec<usize> = (0..count).collect();
            let mut prng = rng::stream(seed, "shift-permute", 0, 0);
            rng::shuffle(&mut prng, &mut perm);
            let src = data.clone();
            for s in 0..ds.len() {
                for (dst_u, &src_u) in perm.iter().enumerate() {
                    let d = s * stride + dst_u * unit;
                    let o = s * stride + src_u * unit;
                    data[d..d + unit].copy_from_slice(&src[o..o + unit]);
                }
            }
        }
        Shift::Pixelate => {
            if ds.is_images() {
                let (c, h, w) = (shape[1], shape[2], shape[3]);
                let block = 2;
                let src = data.clone();
                for s in 0..ds.len() {
                    for ci in 0..c {
                        for by in (0..h).step_by(block) {
                            for bx in (0..w).step_by(block) {
                                let mut acc = 0.0;
                                let mut cnt = 0;
                                for y in by..(by + block).min(h) {
                                    for x in bx..(bx + block).min(w) {
                                        acc += src[((s * c + ci) * h + y) * w + x];
                                        cnt += 1;
                                    }
                                }
                                let avg = acc / cnt as f64;
                                for y in by..(by + block).min(h) {
                                    for x in bx..(bx + block).min(w) {
                                        data[((s * c + ci) * h + y) * w + x] = avg;
                                    }
                                }
                            }
                        }
                    }
                }
            } else {
                let levels = 4.0;
                let (lo, hi) = value_range(&data);
                let span = (hi - lo).max(1e-12);
                for v in data.iter_mut() {
                    let q = ((*v - lo) / span * levels).floor().min(levels - 1.0);
                    *v = lo + (q + 0.5) / levels * span;
                }
            }
        }
        Shift::Invert => {
            let (lo, hi) = value_range(&data);
            for v in data.iter_mut() {
                *v = hi + lo - *v;
            }
        }
    }
    Dataset::new(
        Tensor::new(shape, data)?,
        ds.labels.clone(),
        ds.class_count,
        &ds.split,
        Provenance::Derived {
            base: Box::new(ds.provenance.clone()),
            transform: format!("{shift:?}@seed={seed}").to_lowercase(),
        },
    )
}

fn value_range(data: &[f64]) -> (f64, f64) {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for &v in data {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    (lo, hi)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn blob_spec() -> SyntheticSpec {
        SyntheticSpec::GaussianBlobs {
            classes: 3,
            per_class: 10,
            dim: 4,
            sep: 100.0,
            sigma: 1.0,
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let a = gen_synthetic(&blob_spec(), 5).unwrap();
        let b = gen_synthetic(&blob_spec(), 5).unwrap();
        assert_eq!(a, b);
        let c = gen_synthetic(&blob_spec(), 6).unwrap();
        assert_ne!(a.samples, c.samples);
    }

    #[test]
    fn separated_blobs_are_nn_perfect() {
        // centers 100 sigma apart: nearest neighbour across classes never wins
        let ds = gen_synthetic(&blob_spec(), 5).unwrap();
        let dim = ds.sample_numel();
        for i in 0..ds.len() {
            let xi = &ds.samples.data()[i * dim..(i + 1) * dim];
            let mut best = (f64::INFINITY, 0);
            for j in 0..ds.len() {
                if i == j {
                    continue;
                }
                let xj = &ds.samples.data()[j * dim..(j + 1) * dim];
                let d: f64 = xi.iter().zip(xj).map(|(a, b)| (a - b).powi(2)).sum();
                if d < best.0 {
                    best = (d, j);
                }
            }
            assert_eq!(ds.labels[best.1], ds.labels[i]);
        }
    }

    #[test]
    fn teacher_network_is_balanced_and_deterministic() {
        let spec = SyntheticSpec::TeacherNetwork {
            classes: 4,
            per_class: 25,
            dim: 8,
            hidden: vec![16, 16],
        };
        let a = gen_synthetic(&spec, 7).unwrap();
        let b = gen_synthetic(&spec, 7).unwrap();
        assert_eq!(a, b);
        let counts = a.class_indices();
        assert!(counts.iter().all(|c| c.len() == 25));
    }

    #[test]
    fn augment_identity_when_disabled() {
        let batch = Tensor::new(vec![2, 1, 4, 4], (0..32).map(|v| v as f64 / 31.0).collect()).unwrap();
        let mut rng = rng::stream(0, "aug", 0, 0);
        let out = augment(&batch, false, 0, &mut rng).unwrap();
        assert_eq!(out, batch);
    }

    #[test]
    fn augment_preserves_symmetric_images_under_flip() {
        // horizontally symmetric image: flip is invisible
        let row = [0.1, 0.7, 0.7, 0.1];
        let mut data = Vec::new();
        for _ in 0..4 {
            data.extend_from_slice(&row);
        }
        let batch = Tensor::new(vec![1, 1, 4, 4], data).unwrap();
        for trial in 0..8 {
            let mut rng = rng::stream(trial, "aug-flip", 0, 0);
            let out = augment(&batch, true, 0, &mut rng).unwrap();
            assert_eq!(out, batch);
        }
    }

    #[test]
    fn augment_rejects_vector_data() {
        let batch = Tensor::zeros(&[2, 3]);
        let mut rng = rng::stream(0, "aug", 0, 0);
        assert!(matches!(
            augment(&batch, true, 2, &mut rng),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn crop_offset_zero_shifts_down_right_with_zero_border() {
        // offset (0, 0) with pad p picks the top-left corner of the padded
        // image, shifting content down-right by (p, p)
        let (h, w) = (8, 8);
        let mut src = vec![0.0; h * w];
        src[0] = 1.0; // pixel at (0,0)
        let mut out = vec![9.0; h * w];
        flip_crop_one(&src, &mut out, 1, h, w, false, 4, 0, 0);
        for (i, &v) in out.iter().enumerate() {
            if i == 4 * w + 4 {
                assert_eq!(v, 1.0, "pixel should land at (4,4)");
            } else {
                assert_eq!(v, 0.0, "zero border expected at {i}");
            }
        }
        // centered offset (pad, pad) reproduces the input exactly
        let mut same = vec![9.0; h * w];
        flip_crop_one(&src, &mut same, 1, h, w, false, 4, 4, 4);
        assert_eq!(same, src);
    }

    #[test]
    fn split_is_stratified_and_exhaustive() {
        let ds = gen_synthetic(&blob_spec(), 5).unwrap();
        let parts = split(&ds, &[0.5, 0.5], 3).unwrap();
        assert_eq!(parts.len(), 2);
        for part in &parts {
            for idxs in part.class_indices() {
                assert_eq!(idxs.len(), 5);
            }
        }
        // union of rows equals the original multiset
        let mut seen: Vec<Vec<f64>> = Vec::new();
        let dim = ds.sample_numel();
        for part in &parts {
            for i in 0..part.len() {
                seen.push(part.samples.data()[i * dim..(i + 1) * dim].to_vec());
            }
        }
        assert_eq!(seen.len(), ds.len());
        let mut orig: Vec<Vec<f64>> = (0..ds.len())
            .map(|i| ds.samples.data()[i * dim..(i + 1) * dim].to_vec())
            .collect();
        orig.sort_by(|a, b| a.partial_cmp(b).unwrap());
        seen.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert_eq!(orig, seen);
    }

    #[test]
    fn split_single_fraction_keeps_everything() {
        let ds = gen_synthetic(&blob_spec(), 5).unwrap();
        let parts = split(&ds, &[1.0], 3).unwrap();
        assert_eq!(parts[0].len(), ds.len());
    }

    #[test]
    fn split_rejects_small_classes() {
        let spec = SyntheticSpec::GaussianBlobs {
            classes: 2,
            per_class: 1,
            dim: 2,
            sep: 10.0,
            sigma: 1.0,
        };
        let ds = gen_synthetic(&spec, 0).unwrap();
        assert!(matches!(split(&ds, &[0.5, 0.5], 0), Err(Error::Config(_))));
    }

    #[test]
    fn idx_roundtrip_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let img = dir.path().join("img.idx");
        let lbl = dir.path().join("lbl.idx");
        // byte-exact source data
        let data: Vec<f64> = (0..2 * 16).map(|v| (v % 256) as f64 / 255.0).collect();
        let ds = Dataset::new(
            Tensor::new(vec![2, 1, 4, 4], data).unwrap(),
            vec![0, 1],
            2,
            "full",
            Provenance::Generated {
                kind: "test".into(),
                params: String::new(),
                seed: 0,
            },
        )
        .unwrap();
        save_idx(&ds, &img, &lbl).unwrap();
        let back = load_idx(&img, &lbl).unwrap();
        assert_eq!(back.samples, ds.samples);
        assert_eq!(back.labels, ds.labels);
    }

    #[test]
    fn idx_truncation_reports_offset() {
        let dir = tempfile::tempdir().unwrap();
        let img = dir.path().join("img.idx");
        let lbl = dir.path().join("lbl.idx");
        let mut bytes = Vec::new();
        bytes.extend_from_slice(&IDX_MAGIC_IMAGES.to_be_bytes());
        bytes.extend_from_slice(&10u32.to_be_bytes()); // declares 10 items
        bytes.extend_from_slice(&2u32.to_be_bytes());
        bytes.extend_from_slice(&2u32.to_be_bytes());
        bytes.extend_from_slice(&[7u8; 9 * 4]); // only 9 present
        std::fs::write(&img, &bytes).unwrap();
        let mut lblb = Vec::new();
        lblb.extend_from_slice(&IDX_MAGIC_LABELS.to_be_bytes());
        lblb.extend_from_slice(&10u32.to_be_bytes());
        lblb.extend_from_slice(&[0u8; 10]);
        std::fs::write(&lbl, &lblb).unwrap();
        let err = load_idx(&img, &lbl).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("truncated") && msg.contains(&format!("{}", bytes.len())), "{msg}");
    }

    #[test]
    fn csv_loads_features_and_labels() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.csv");
        std::fs::write(&path, "1,0.5,-2.0\n0,1.5,3.25\n1,0.0,0.125\n").unwrap();
        let ds = load_csv(&path, &CsvSchema { label_column: 0, has_header: false }).unwrap();
        assert_eq!(ds.samples.shape(), &[3, 2]);
        assert_eq!(ds.labels, vec![1, 0, 1]);
    }

    #[test]
    fn csv_roundtrip_bitwise() {
        let ds = gen_synthetic(&blob_spec(), 5).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("rt.csv");
        save_csv(&ds, &path).unwrap();
        let back = load_csv(&path, &CsvSchema { label_column: 0, has_header: false }).unwrap();
        assert_eq!(back.samples, ds.samples);
        assert_eq!(back.labels, ds.labels);
    }

    #[test]
    fn csv_bad_row_reports_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.csv");
        std::fs::write(&path, "0,1.0\n1,oops\n").unwrap();
        let err = load_csv(&path, &CsvSchema { label_column: 0, has_header: false }).unwrap_err();
        assert!(err.to_string().contains("line 2"), "{err}");
    }

    #[test]
    fn domain_shifts_preserve_labels_and_shape() {
        let ds = gen_synthetic(&blob_spec(), 5).unwrap();
        for shift in [Shift::Permute, Shift::Pixelate, Shift::Invert] {
            let out = domain_shift(&ds, shift, 11).unwrap();
            assert_eq!(out.labels, ds.labels);
            assert_eq!(out.samples.shape(), ds.samples.shape());
            assert_ne!(out.samples, ds.samples);
        }
    }

    #[test]
    fn class_range_relabels() {
        let ds = gen_synthetic(&blob_spec(), 5).unwrap();
        let sub = ds.class_range(1, 3).unwrap();
        assert_eq!(sub.class_count, 2);
        assert_eq!(sub.len(), 20);
        assert!(sub.labels.iter().all(|&l| l < 2));
    }
}
