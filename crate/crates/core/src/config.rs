//! Key-value configuration files, dataset/model spec strings, resolution to
//! a runnable setup, and the run manifest.
//!
//! Config files are plain `key = value` lines; `#` starts a comment. Every
//! key named in [`KNOWN_KEYS`] is accepted; anything else is rejected by
//! name. CLI flags override file values. The fully resolved map is written
//! into the manifest, and feeding that map back reproduces the run bitwise.

use crate::data::{self, Dataset, SyntheticSpec};
use crate::error::{Error, Result};
use crate::mask::MaskSummary;
use crate::nn::LayeredModel;
use crate::trainer::{ScheduleConfig, Strategy};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;

pub const ARTIFACT_VERSION: &str = env!("CARGO_PKG_VERSION");

pub const KNOWN_KEYS: &[&str] = &[
    "preset",
    "run_id",
    "strategy",
    "generations",
    "epochs",
    "ascent_epochs",
    "ascent_scale",
    "lr",
    "momentum",
    "weight_decay",
    "batch_size",
    "label_smoothing",
    "threshold",
    "seed",
    "dataset",
    "model",
    "test_fraction",
    "augment_flip",
    "augment_crop_pad",
];

/// Parse `key = value` lines into a map. Later lines win.
pub fn parse_kv(text: &str) -> Result<BTreeMap<String, String>> {
    let mut map = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(Error::Config(format!(
                "line {}: expected key = value, got {raw:?}",
                i + 1
            )));
        };
        map.insert(key.trim().to_string(), value.trim().to_string());
    }
    Ok(map)
}

pub fn parse_kv_file(path: &Path) -> Result<BTreeMap<String, String>> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    parse_kv(&text)
}

/// Where the samples come from.
#[derive(Clone, Debug, PartialEq)]
pub enum DatasetSpec {
    Synthetic(SyntheticSpec),
    Idx { images: String, labels: String },
    Csv { path: String, label_column: usize, has_header: bool },
}

fn spec_fields(body: &str) -> Result<BTreeMap<String, String>> {
    let mut map = BTreeMap::new();
    if body.is_empty() {
        return Ok(map);
    }
    for part in body.split(',') {
        let Some((k, v)) = part.split_once('=') else {
            return Err(Error::Config(format!("expected k=v in spec field {part:?}")));
        };
        map.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(map)
}

fn field<T: std::str::FromStr>(map: &BTreeMap<String, String>, key: &str, default: T) -> Result<T> {
    match map.get(key) {
        None => Ok(default),
        Some(v) => v
            .parse()
            .map_err(|_| Error::Config(format!("invalid value {v:?} for {key}"))),
    }
}

impl DatasetSpec {
    /// Grammar: `teacher:...` | `blobs:...` | `spirals:...` |
    /// `idx:IMAGES,LABELS` | `csv:PATH[,label_col=N][,header=BOOL]`.
    pub fn parse(s: &str) -> Result<DatasetSpec> {
        let (kind, body) = s.split_once(':').unwrap_or((s, ""));
        match kind {
            "teacher" => {
                let f = spec_fields(body)?;
                let hidden: String = field(&f, "hidden", "24x2".to_string())?;
                let (width, count) = hidden
                    .split_once('x')
                    .ok_or_else(|| Error::Config(format!("teacher hidden {hidden:?}: expected WIDTHxCOUNT")))?;
                let width: usize = width.parse().map_err(|_| Error::Config(format!("bad hidden width in {hidden:?}")))?;
                let count: usize = count.parse().map_err(|_| Error::Config(format!("bad hidden count in {hidden:?}")))?;
                Ok(DatasetSpec::Synthetic(SyntheticSpec::TeacherNetwork {
                    classes: field(&f, "classes", 8)?,
                    per_class: field(&f, "per_class", 125)?,
                    dim: field(&f, "dim", 16)?,
                    hidden: vec![width; count],
                }))
            }
            "blobs" => {
                let f = spec_fields(body)?;
                Ok(DatasetSpec::Synthetic(SyntheticSpec::GaussianBlobs {
                    classes: field(&f, "classes", 4)?,
                    per_class: field(&f, "per_class", 100)?,
                    dim: field(&f, "dim", 8)?,
                    sep: field(&f, "sep", 3.0)?,
                    sigma: field(&f, "sigma", 1.0)?,
                }))
            }
            "spirals" => {
                let f = spec_fields(body)?;
                Ok(DatasetSpec::Synthetic(SyntheticSpec::ConcentricSpirals {
                    classes: field(&f, "classes", 2)?,
                    per_class: field(&f, "per_class", 500)?,
                    turns: field(&f, "turns", 2.5)?,
                    noise: field(&f, "noise", 0.02)?,
                }))
            }
            "idx" => {
                let (images, labels) = body
                    .split_once(',')
                    .ok_or_else(|| Error::Config("idx spec needs idx:IMAGES_PATH,LABELS_PATH".into()))?;
                Ok(DatasetSpec::Idx {
                    images: images.trim().to_string(),
                    labels: labels.trim().to_string(),
                })
            }
            "csv" => {
                let mut parts = body.split(',');
                let path = parts
                    .next()
                    .filter(|p| !p.is_empty())
                    .ok_or_else(|| Error::Config("csv spec needs csv:PATH[,label_col=N][,header=BOOL]".into()))?
                    .to_string();
                let rest: String = parts.collect::<Vec<_>>().join(",");
                let f = spec_fields(&rest)?;
                Ok(DatasetSpec::Csv {
                    path,
                    label_column: field(&f, "label_col", 0)?,
                    has_header: field(&f, "header", false)?,
                })
            }
            other => Err(Error::Config(format!(
                "unknown dataset kind {other:?}; expected teacher, blobs, spirals, idx, or csv"
            ))),
        }
    }

    pub fn canonical(&self) -> String {
        match self {
            DatasetSpec::Synthetic(SyntheticSpec::TeacherNetwork { classes, per_class, dim, hidden }) => {
                format!(
                    "teacher:classes={classes},per_class={per_class},dim={dim},hidden={}x{}",
                    hidden.first().copied().unwrap_or(0),
                    hidden.len()
                )
            }
            DatasetSpec::Synthetic(SyntheticSpec::GaussianBlobs { classes, per_class, dim, sep, sigma }) => {
                format!("blobs:classes={classes},per_class={per_class},dim={dim},sep={sep},sigma={sigma}")
            }
            DatasetSpec::Synthetic(SyntheticSpec::ConcentricSpirals { classes, per_class, turns, noise }) => {
                format!("spirals:classes={classes},per_class={per_class},turns={turns},noise={noise}")
            }
            DatasetSpec::Idx { images, labels } => format!("idx:{images},{labels}"),
            DatasetSpec::Csv { path, label_column, has_header } => {
                format!("csv:{path},label_col={label_column},header={has_header}")
            }
        }
    }

    pub fn load(&self, seed: u64) -> Result<Dataset> {
        match self {
            DatasetSpec::Synthetic(spec) => data::gen_synthetic(spec, seed),
            DatasetSpec::Idx { images, labels } => data::load_idx(Path::new(images), Path::new(labels)),
            DatasetSpec::Csv { path, label_column, has_header } => data::load_csv(
                Path::new(path),
                &data::CsvSchema {
                    label_column: *label_column,
                    has_header: *has_header,
                },
            ),
        }
    }
}

/// Network architecture over a dataset's input/class shape.
#[derive(Clone, Debug, PartialEq)]
pub enum ModelSpec {
    Mlp { hidden: Vec<usize>, affine: bool },
    Cnn { channels: Vec<usize>, affine: bool },
}

impl ModelSpec {
    /// Grammar: `mlp:24,24,24` | `mlp+affine:24,24` | `cnn:4,8` |
    /// `cnn+affine:4,8`.
    pub fn parse(s: &str) -> Result<ModelSpec> {
        let (kind, body) = s.split_once(':').unwrap_or((s, ""));
        let widths: Result<Vec<usize>> = if body.is_empty() {
            Ok(Vec::new())
        } else {
            body.split(',')
                .map(|w| {
                    w.trim()
                        .parse()
                        .map_err(|_| Error::Config(format!("bad layer width {w:?} in model spec")))
                })
                .collect()
        };
        let widths = widths?;
        match kind {
            "mlp" => Ok(ModelSpec::Mlp { hidden: widths, affine: false }),
            "mlp+affine" => Ok(ModelSpec::Mlp { hidden: widths, affine: true }),
            "cnn" => Ok(ModelSpec::Cnn { channels: widths, affine: false }),
            "cnn+affine" => Ok(ModelSpec::Cnn { channels: widths, affine: true }),
            other => Err(Error::Config(format!(
                "unknown model kind {other:?}; expected mlp, mlp+affine, cnn, or cnn+affine"
            ))),
        }
    }

    pub fn canonical(&self) -> String {
        let join = |ws: &[usize]| ws.iter().map(|w| w.to_string()).collect::<Vec<_>>().join(",");
        match self {
            ModelSpec::Mlp { hidden, affine } => {
                format!("{}:{}", if *affine { "mlp+affine" } else { "mlp" }, join(hidden))
            }
            ModelSpec::Cnn { channels, affine } => {
                format!("{}:{}", if *affine { "cnn+affine" } else { "cnn" }, join(channels))
            }
        }
    }

    pub fn build(&self, ds: &Dataset, seed: u64) -> Result<LayeredModel> {
        let shape = ds.sample_shape();
        match self {
            ModelSpec::Mlp { hidden, affine } => {
                if shape.len() != 1 {
                    return Err(Error::Config(format!(
                        "mlp model needs vector samples, dataset has shape {shape:?}"
                    )));
                }
                Ok(LayeredModel::mlp(shape[0], hidden, ds.class_count, *affine, seed))
            }
            ModelSpec::Cnn { channels, affine } => {
                if shape.len() != 3 {
                    return Err(Error::Config(format!(
                        "cnn model needs [c,h,w] samples, dataset has shape {shape:?}"
                    )));
                }
                Ok(LayeredModel::cnn(
                    (shape[0], shape[1], shape[2]),
                    channels,
                    ds.class_count,
                    *affine,
                    seed,
                ))
            }
        }
    }
}

/// A fully resolved run: schedule plus data and model construction.
#[derive(Clone, Debug, PartialEq)]
pub struct RunSettings {
    pub schedule: ScheduleConfig,
    pub dataset: DatasetSpec,
    pub model: ModelSpec,
    pub test_fraction: f64,
    /// None means "half the model depth", resolved at build time.
    pub threshold_explicit: Option<usize>,
}

impl RunSettings {
    /// Resolve a merged key-value map (defaults, then file, then flags).
    pub fn resolve(map: &BTreeMap<String, String>) -> Result<RunSettings> {
        for key in map.keys() {
            if !KNOWN_KEYS.contains(&key.as_str()) {
                return Err(Error::Config(format!("unknown configuration key {key:?}")));
            }
        }
        let preset = map.get("preset").map(String::as_str).unwrap_or("desk");
        let (gens_d, epochs_d): (u32, u32) = match preset {
            "desk" => (5, 20),
            "full" => (10, 160),
            other => {
                return Err(Error::Config(format!(
                    "unknown preset {other:?}; expected desk or full"
                )))
            }
        };
        let get = |key: &str| map.get(key).map(String::as_str);
        let parse_num = |key: &str, default: f64| -> Result<f64> {
            match get(key) {
                None => Ok(default),
                Some(v) => v
                    .parse()
                    .map_err(|_| Error::Config(format!("invalid value {v:?} for {key}"))),
            }
        };
        let parse_int = |key: &str, default: u64| -> Result<u64> {
            match get(key) {
                None => Ok(default),
                Some(v) => v
                    .parse()
                    .map_err(|_| Error::Config(format!("invalid value {v:?} for {key}"))),
            }
        };
        let parse_bool = |key: &str, default: bool| -> Result<bool> {
            match get(key) {
                None => Ok(default),
                Some("true") => Ok(true),
                Some("false") => Ok(false),
                Some(v) => Err(Error::Config(format!("invalid value {v:?} for {key}"))),
            }
        };

        let strategy = Strategy::parse(get("strategy").unwrap_or("seal"))?;
        let generations = parse_int("generations", gens_d as u64)? as u32;
        let epochs = parse_int("epochs", epochs_d as u64)? as u32;
        let ascent_epochs = parse_int("ascent_epochs", (epochs / 4) as u64)? as u32;
        let seed = parse_int("seed", 0)?;
        let dataset = DatasetSpec::parse(get("dataset").unwrap_or("teacher:"))?;
        let model = ModelSpec::parse(get("model").unwrap_or("mlp:24,24,24,24,24"))?;
        let threshold_explicit = match get("threshold") {
            None => None,
            Some(v) => Some(
                v.parse()
                    .map_err(|_| Error::Config(format!("invalid value {v:?} for threshold")))?,
            ),
        };
        let run_id = map
            .get("run_id")
            .cloned()
            .unwrap_or_else(|| format!("{}-s{seed}", strategy.name()));

        let schedule = ScheduleConfig {
            run_id,
            strategy,
            generations,
            epochs_per_gen: epochs,
            ascent_epochs,
            lr0: parse_num("lr", 0.01)?,
            ascent_scale: parse_num("ascent_scale", 0.01)?,
            momentum: parse_num("momentum", 0.9)?,
            weight_decay: parse_num("weight_decay", 5e-4)?,
            batch_size: parse_int("batch_size", 32)? as usize,
            label_smoothing: parse_num("label_smoothing", 0.1)?,
            threshold: threshold_explicit.unwrap_or(0), // fixed in resolve_threshold
            seed,
            augment_flip: parse_bool("augment_flip", false)?,
            augment_crop_pad: parse_int("augment_crop_pad", 0)? as usize,
            record_updates: false,
        };
        let settings = RunSettings {
            schedule,
            dataset,
            model,
            test_fraction: parse_num("test_fraction", 0.2)?,
            threshold_explicit,
        };
        if !(0.0..1.0).contains(&settings.test_fraction) {
            return Err(Error::Config(format!(
                "test_fraction must lie in [0, 1), got {}",
                settings.test_fraction
            )));
        }
        settings.schedule.validate()?;
        Ok(settings)
    }

    /// Build train/test splits (or the whole set when test_fraction is 0).
    pub fn build_data(&self) -> Result<(Dataset, Dataset)> {
        let full = self.dataset.load(rng_seed_for_data(self.schedule.seed))?;
        if self.test_fraction == 0.0 {
            let mut test = full.clone();
            test.split = "test".into();
            return Ok((full, test));
        }
        let parts = data::split(&full, &[1.0 - self.test_fraction, self.test_fraction], self.schedule.seed)?;
        let mut it = parts.into_iter();
        Ok((it.next().unwrap(), it.next().unwrap()))
    }

    /// Build the model and fix the layer threshold (default: half depth).
    pub fn build_model(&mut self, train: &Dataset) -> Result<LayeredModel> {
        let model = self.model.build(train, self.schedule.seed)?;
        let threshold = match self.threshold_explicit {
            Some(t) => t,
            None => crate::mask::default_threshold(&model),
        };
        if threshold == 0 || threshold >= model.layers.len() {
            return Err(Error::Config(format!(
                "threshold must satisfy 0 < L < {}, got {threshold}",
                model.layers.len()
            )));
        }
        self.schedule.threshold = threshold;
        Ok(model)
    }

    /// Canonical resolved map; resolving it again reproduces these settings.
    pub fn to_map(&self) -> BTreeMap<String, String> {
        let s = &self.schedule;
        let mut map = BTreeMap::new();
        map.insert("run_id".into(), s.run_id.clone());
        map.insert("strategy".into(), s.strategy.name().into());
        map.insert("generations".into(), s.generations.to_string());
        map.insert("epochs".into(), s.epochs_per_gen.to_string());
        map.insert("ascent_epochs".into(), s.ascent_epochs.to_string());
        map.insert("ascent_scale".into(), format!("{}", s.ascent_scale));
        map.insert("lr".into(), format!("{}", s.lr0));
        map.insert("momentum".into(), format!("{}", s.momentum));
        map.insert("weight_decay".into(), format!("{}", s.weight_decay));
        map.insert("batch_size".into(), s.batch_size.to_string());
        map.insert("label_smoothing".into(), format!("{}", s.label_smoothing));
        if s.threshold > 0 {
            map.insert("threshold".into(), s.threshold.to_string());
        }
        map.insert("seed".into(), s.seed.to_string());
        map.insert("dataset".into(), self.dataset.canonical());
        map.insert("model".into(), self.model.canonical());
        map.insert("test_fraction".into(), format!("{}", self.test_fraction));
        map.insert("augment_flip".into(), s.augment_flip.to_string());
        map.insert("augment_crop_pad".into(), s.augment_crop_pad.to_string());
        map
    }
}

/// Dataset generation seed derived from the run seed.
pub fn rng_seed_for_data(seed: u64) -> u64 {
    crate::rng::derive(seed, "dataset", 0, 0)
}

/// Everything needed to reproduce and audit a run.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunManifest {
    pub artifact_version: String,
    pub run_id: String,
    /// Fully resolved configuration; feeding it back through the resolver
    /// reproduces the run bitwise.
    pub config: BTreeMap<String, String>,
    pub dataset_provenance: data::Provenance,
    pub mask: MaskSummary,
    pub started_unix: u64,
    pub finished_unix: u64,
    pub wall_seconds: f64,
}

impl RunManifest {
    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self)
            .map_err(|e| Error::Io(format!("serializing manifest: {e}")))?;
        std::fs::write(path, json)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<RunManifest> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| Error::Parse(format!("{}: {e}", path.display())))
    }
}

pub fn unix_now() -> u64 {
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_resolves_to_defaults() {
        let map = parse_kv("").unwrap();
        let settings = RunSettings::resolve(&map).unwrap();
        assert_eq!(settings.schedule.generations, 5);
        assert_eq!(settings.schedule.epochs_per_gen, 20);
        assert_eq!(settings.schedule.ascent_epochs, 5);
        assert_eq!(settings.schedule.lr0, 0.01);
        assert_eq!(settings.schedule.ascent_scale, 0.01);
        assert_eq!(settings.schedule.momentum, 0.9);
        assert_eq!(settings.schedule.weight_decay, 5e-4);
        assert_eq!(settings.schedule.batch_size, 32);
        assert_eq!(settings.schedule.label_smoothing, 0.1);
    }

    #[test]
    fn full_preset_scales_schedule() {
        let map = parse_kv("preset = full").unwrap();
        let settings = RunSettings::resolve(&map).unwrap();
        assert_eq!(settings.schedule.generations, 10);
        assert_eq!(settings.schedule.epochs_per_gen, 160);
        assert_eq!(settings.schedule.ascent_epochs, 40);
    }

    #[test]
    fn ascent_window_must_fit_in_generation() {
        let map = parse_kv("epochs = 10\nascent_epochs = 10").unwrap();
        let err = RunSettings::resolve(&map).unwrap_err();
        assert!(err.to_string().contains("ascent_epochs"), "{err}");
    }

    #[test]
    fn unknown_key_is_named() {
        let map = parse_kv("learning_rate = 0.1").unwrap();
        let err = RunSettings::resolve(&map).unwrap_err();
        assert!(err.to_string().contains("learning_rate"), "{err}");
    }

    #[test]
    fn overrides_take_precedence() {
        let mut map = parse_kv("strategy = normal\nseed = 4").unwrap();
        // simulate a flag override
        map.insert("strategy".into(), "seal+reverse".into());
        let settings = RunSettings::resolve(&map).unwrap();
        assert_eq!(settings.schedule.strategy, Strategy::SealReverse);
        assert_eq!(settings.schedule.seed, 4);
    }

    #[test]
    fn comments_and_blank_lines_ignored() {
        let map = parse_kv("# a comment\n\nseed = 9 # trailing\n").unwrap();
        assert_eq!(map.get("seed").map(String::as_str), Some("9"));
    }

    #[test]
    fn resolved_map_roundtrips() {
        let map = parse_kv("strategy = llf\nepochs = 12\nascent_epochs = 3\nseed = 2").unwrap();
        let mut settings = RunSettings::resolve(&map).unwrap();
        let (train, _) = settings.build_data().unwrap();
        let _model = settings.build_model(&train).unwrap();
        let resolved = settings.to_map();
        let again = RunSettings::resolve(&resolved).unwrap();
        assert_eq!(again.schedule, settings.schedule);
        assert_eq!(again.dataset, settings.dataset);
        assert_eq!(again.model, settings.model);
        assert_eq!(again.to_map(), resolved);
    }

    #[test]
    fn dataset_spec_grammar() {
        assert!(matches!(
            DatasetSpec::parse("teacher:classes=8,per_class=10,dim=4,hidden=8x2").unwrap(),
            DatasetSpec::Synthetic(SyntheticSpec::TeacherNetwork { classes: 8, .. })
        ));
        assert!(matches!(
            DatasetSpec::parse("blobs:").unwrap(),
            DatasetSpec::Synthetic(SyntheticSpec::GaussianBlobs { .. })
        ));
        assert!(DatasetSpec::parse("videos:x").is_err());
        let idx = DatasetSpec::parse("idx:a.idx,b.idx").unwrap();
        assert_eq!(idx.canonical(), "idx:a.idx,b.idx");
    }

    #[test]
    fn model_spec_grammar() {
        assert_eq!(
            ModelSpec::parse("mlp:8,8").unwrap(),
            ModelSpec::Mlp { hidden: vec![8, 8], affine: false }
        );
        assert_eq!(
            ModelSpec::parse("mlp+affine:8").unwrap(),
            ModelSpec::Mlp { hidden: vec![8], affine: true }
        );
        assert!(ModelSpec::parse("transformer:8").is_err());
    }

    #[test]
    fn default_threshold_is_half_depth() {
        let map = parse_kv("model = mlp:8,8,8,8,8\ndataset = blobs:classes=3,per_class=8,dim=4").unwrap();
        let mut settings = RunSettings::resolve(&map).unwrap();
        let (train, _) = settings.build_data().unwrap();
        let model = settings.build_model(&train).unwrap();
        assert_eq!(model.layers.len(), 6);
        assert_eq!(settings.schedule.threshold, 3);
    }
}
