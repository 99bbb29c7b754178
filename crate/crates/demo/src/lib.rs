//! Browser playground for the iterative-training laboratory.
//!
//! Wraps the core crate behind three interactive operations for a static
//! page: epoch-stepped training with a live decision boundary, a dense
//! Hessian eigenvalue spectrum, and layer-wise k-NN probes with the
//! prediction-depth histogram. The `DemoLab` core is plain Rust (tested on
//! the host); `Lab` is its wasm-bindgen face.

use forgelab::data::{gen_synthetic, split as data_split, Dataset, SyntheticSpec};
use forgelab::diag::{hessian_spectrum, probe_model, ProbeReport, SpectrumReport};
use forgelab::error::{Error, Result};
use forgelab::nn::LayeredModel;
use forgelab::trainer::{EpochRecord, Runner, ScheduleConfig, Strategy};
use serde::{Deserialize, Serialize};
use wasm_bindgen::prelude::*;

#[derive(Clone, Debug, Deserialize)]
pub struct DemoOptions {
    pub dataset: String,
    pub strategy: String,
    pub generations: u32,
    pub epochs: u32,
    pub ascent_epochs: u32,
    pub threshold: usize,
    pub lr: f64,
    pub ascent_scale: f64,
    pub seed: u64,
}

impl Default for DemoOptions {
    fn default() -> Self {
        DemoOptions {
            dataset: "spirals".into(),
            strategy: "seal".into(),
            generations: 4,
            epochs: 16,
            ascent_epochs: 4,
            threshold: 2,
            lr: 0.05,
            ascent_scale: 0.3,
            seed: 7,
        }
    }
}

fn demo_dataset(kind: &str, seed: u64) -> Result<Dataset> {
    let spec = match kind {
        "spirals" => SyntheticSpec::ConcentricSpirals {
            classes: 3,
            per_class: 220,
            turns: 1.25,
            noise: 0.02,
        },
        "blobs" => SyntheticSpec::GaussianBlobs {
            classes: 4,
            per_class: 160,
            dim: 2,
            sep: 0.55,
            sigma: 0.16,
        },
        "teacher" => SyntheticSpec::TeacherNetwork {
            classes: 4,
            per_class: 160,
            dim: 2,
            hidden: vec![16],
        },
        other => {
            return Err(Error::Config(format!(
                "unknown demo dataset {other:?}; expected spirals, blobs, or teacher"
            )))
        }
    };
    gen_synthetic(&spec, forgelab::config::rng_seed_for_data(seed))
}

#[derive(Serialize)]
struct StepOut<'a> {
    done: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    record: Option<&'a EpochRecord>,
}

#[derive(Serialize)]
struct Status {
    epoch: u32,
    total_epochs: u32,
    done: bool,
    strategy: String,
    threshold: usize,
    layers: Vec<String>,
}

#[derive(Serialize)]
struct Points<'a> {
    train: Vec<(f64, f64, usize)>,
    test: Vec<(f64, f64, usize)>,
    extent: f64,
    classes: usize,
    run_id: &'a str,
}

/// Host-side demo state: a stepping training run over a 2-d dataset.
pub struct DemoLab {
    runner: Runner,
    train: Dataset,
    test: Dataset,
    extent: f64,
}

impl DemoLab {
    pub fn create(opts: &DemoOptions) -> Result<DemoLab> {
        let full = demo_dataset(&opts.dataset, opts.seed)?;
        let parts = data_split(&full, &[0.75, 0.25], opts.seed)?;
        let mut it = parts.into_iter();
        let (train, test) = (it.next().unwrap(), it.next().unwrap());
        let extent = full
            .samples
            .data()
            .iter()
            .fold(0.0f64, |m, v| m.max(v.abs()))
            * 1.15;
        let model = LayeredModel::mlp(2, &[16, 16, 16, 16], full.class_count, false, opts.seed);
        let config = ScheduleConfig {
            run_id: format!("{}-{}", opts.strategy, opts.dataset),
            strategy: Strategy::parse(&opts.strategy)?,
            generations: opts.generations,
            epochs_per_gen: opts.epochs,
            ascent_epochs: opts.ascent_epochs,
            lr0: opts.lr,
            ascent_scale: opts.ascent_scale,
            momentum: 0.9,
            weight_decay: 5e-4,
            batch_size: 32,
            label_smoothing: 0.1,
            threshold: opts.threshold,
            seed: opts.seed,
            augment_flip: false,
            augment_crop_pad: 0,
            record_updates: false,
        };
        let runner = Runner::new(&config, model, None)?;
        Ok(DemoLab {
            runner,
            train,
            test,
            extent,
        })
    }

    pub fn done(&self) -> bool {
        self.runner.done()
    }

    /// Run one epoch; None once the schedule is exhausted.
    pub fn step(&mut self) -> Result<Option<EpochRecord>> {
        if self.runner.done() {
            return Ok(None);
        }
        self.runner.begin_epoch()?;
        let record = self.runner.complete_epoch(&self.train, &self.test)?;
        Ok(Some(record))
    }

    pub fn records(&self) -> &[EpochRecord] {
        self.runner.records()
    }

    pub fn extent(&self) -> f64 {
        self.extent
    }

    pub fn class_count(&self) -> usize {
        self.train.class_count
    }

    /// Predicted class for every cell of a resolution x resolution grid over
    /// [-extent, extent]^2, row-major from the top-left (y down).
    pub fn boundary(&self, resolution: usize) -> Result<Vec<u8>> {
        if resolution < 2 || resolution > 512 {
            return Err(Error::Config("boundary resolution must lie in 2..=512".into()));
        }
        let mut out = Vec::with_capacity(resolution * resolution);
        let step = 2.0 * self.extent / (resolution - 1) as f64;
        let mut rows = Vec::with_capacity(resolution * resolution * 2);
        for iy in 0..resolution {
            let y = self.extent - iy as f64 * step;
            for ix in 0..resolution {
                let x = -self.extent + ix as f64 * step;
                rows.push(x);
                rows.push(y);
            }
        }
        let n = resolution * resolution;
        let batch = forgelab::Tensor::new(vec![n, 2], rows)?;
        let preds = self.runner.model().predict(&batch)?;
        out.extend(preds.into_iter().map(|p| p as u8));
        Ok(out)
    }

    /// Spectrum over a fixed seeded batch of `batch` training samples.
    pub fn spectrum(&self, batch: usize) -> Result<SpectrumReport> {
        hessian_spectrum(
            self.runner.model(),
            &self.train,
            self.runner.config().label_smoothing,
            batch.max(1),
            self.runner.config().seed,
            1e-4,
            4000,
        )
    }

    pub fn probe(&self) -> Result<ProbeReport> {
        probe_model(self.runner.model(), &self.train, &self.test, 5)
    }

    fn status(&self) -> Status {
        Status {
            epoch: self.runner.next_epoch(),
            total_epochs: self.runner.config().total_epochs(),
            done: self.runner.done(),
            strategy: self.runner.config().strategy.name().to_string(),
            threshold: self.runner.config().threshold,
            layers: self
                .runner
                .model()
                .layers
                .iter()
                .map(|l| l.name.clone())
                .collect(),
        }
    }

    fn points(&self) -> Points<'_> {
        let collect = |ds: &Dataset| {
            (0..ds.len())
                .map(|i| {
                    let d = &ds.samples.data()[i * 2..(i + 1) * 2];
                    (d[0], d[1], ds.labels[i])
                })
                .collect()
        };
        Points {
            train: collect(&self.train),
            test: collect(&self.test),
            extent: self.extent,
            classes: self.train.class_count,
            run_id: &self.runner.config().run_id,
        }
    }
}

fn to_json<T: Serialize>(value: &T) -> Result<String> {
    serde_json::to_string(value).map_err(|e| Error::Io(format!("serializing demo payload: {e}")))
}

/// wasm-bindgen face of [`DemoLab`]; all payloads cross as JSON strings.
#[wasm_bindgen]
pub struct Lab {
    inner: DemoLab,
}

#[wasm_bindgen]
impl Lab {
    #[wasm_bindgen(constructor)]
    pub fn new(options_json: &str) -> std::result::Result<Lab, JsError> {
        let opts: DemoOptions = serde_json::from_str(options_json)
            .map_err(|e| JsError::new(&format!("options: {e}")))?;
        Ok(Lab {
            inner: DemoLab::create(&opts)?,
        })
    }

    /// One epoch of training; returns {"done":bool, "record":{...}}.
    pub fn step(&mut self) -> std::result::Result<String, JsError> {
        let record = self.inner.step()?;
        Ok(to_json(&StepOut {
            done: self.inner.done() && record.is_none(),
            record: record.as_ref(),
        })?)
    }

    /// Class grid over the input plane as bytes (row-major, top-left first).
    pub fn boundary(&self, resolution: usize) -> std::result::Result<Vec<u8>, JsError> {
        Ok(self.inner.boundary(resolution)?)
    }

    /// Training/test scatter points with labels.
    pub fn points(&self) -> std::result::Result<String, JsError> {
        Ok(to_json(&self.inner.points())?)
    }

    /// Dense Hessian eigenvalue statistics at the current parameters,
    /// over a fixed seeded batch of `batch` training samples.
    pub fn spectrum(&self, batch: usize) -> std::result::Result<String, JsError> {
        Ok(to_json(&self.inner.spectrum(batch)?)?)
    }

    /// Layer-wise k-NN probe accuracies and the prediction-depth histogram.
    pub fn probe(&self) -> std::result::Result<String, JsError> {
        Ok(to_json(&self.inner.probe()?)?)
    }

    pub fn status(&self) -> std::result::Result<String, JsError> {
        Ok(to_json(&self.inner.status())?)
    }

    pub fn extent(&self) -> f64 {
        self.inner.extent()
    }
}
