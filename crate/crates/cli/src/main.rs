//! Command-line surface: train | probe | hessian | transfer | fewshot |
//! compare.
//!
//! Every subcommand is deterministic in its seed and config: rerunning with
//! the same inputs produces byte-identical metrics output. Exit codes:
//! 0 success, 2 configuration/usage errors, 3 training divergence,
//! 4 dense-Hessian capacity exceeded, 1 anything else.

use clap::{Args, Parser, Subcommand};
use forgelab::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use forgelab::config::{
    parse_kv_file, unix_now, DatasetSpec, RunManifest, RunSettings, ARTIFACT_VERSION,
};
use forgelab::data::{domain_shift, Dataset, Shift};
use forgelab::diag::{hessian_spectrum, probe_model, HESSIAN_EPS_DEFAULT};
use forgelab::error::Error;
use forgelab::eval::{fewshot_eval, linear_probe, FewshotConfig, FewshotMode, TransferConfig};
use forgelab::mask::{split as mask_split, MaskSummary};
use forgelab::metrics::{
    depth_csv, read_records_from, render_table, write_record, FewshotRecord, ProbeRecord, Record,
    SpectrumRecord, TransferRecord,
};
use forgelab::nn::LayeredModel;
use forgelab::optim::SgdState;
use forgelab::trainer::{run_schedule, EpochRecord, ResumePoint, RunObserver};
use forgelab::Result;
use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "forgelab", version, about = "Iterative forget-and-relearn training laboratory")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model under a schedule; writes metrics, checkpoints, and a
    /// manifest into --out.
    Train(TrainArgs),
    /// Layer-wise k-NN probe accuracies and prediction-depth histogram of a
    /// checkpoint.
    Probe(ProbeArgs),
    /// Dense Hessian eigenvalue statistics of a checkpoint.
    Hessian(HessianArgs),
    /// Linear-probe transfer: fresh head on frozen features of a checkpoint.
    Transfer(TransferArgs),
    /// Episodic few-shot evaluation of a checkpoint.
    Fewshot(FewshotArgs),
    /// Merge metrics files into a per-generation accuracy table and a
    /// depth-evolution CSV.
    Compare(CompareArgs),
}

#[derive(Args)]
struct ConfigOverrides {
    /// Key-value config file; flags below override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Rerun from a manifest's resolved configuration.
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long)]
    preset: Option<String>,
    #[arg(long)]
    run_id: Option<String>,
    #[arg(long)]
    strategy: Option<String>,
    #[arg(long)]
    generations: Option<u32>,
    #[arg(long)]
    epochs: Option<u32>,
    #[arg(long)]
    ascent_epochs: Option<u32>,
    #[arg(long)]
    ascent_scale: Option<f64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    momentum: Option<f64>,
    #[arg(long)]
    weight_decay: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    label_smoothing: Option<f64>,
    #[arg(long)]
    threshold: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    dataset: Option<String>,
    #[arg(long)]
    model: Option<String>,
    #[arg(long)]
    test_fraction: Option<f64>,
    #[arg(long)]
    augment_flip: Option<bool>,
    #[arg(long)]
    augment_crop_pad: Option<usize>,
}

impl ConfigOverrides {
    fn resolve(&self) -> Result<RunSettings> {
        let mut map: BTreeMap<String, String> = BTreeMap::new();
        if let Some(path) = &self.manifest {
            map.extend(RunManifest::load(path)?.config);
        }
        if let Some(path) = &self.config {
            map.extend(parse_kv_file(path)?);
        }
        let mut set = |key: &str, value: Option<String>| {
            if let Some(v) = value {
                map.insert(key.to_string(), v);
            }
        };
        set("preset", self.preset.clone());
        set("run_id", self.run_id.clone());
        set("strategy", self.strategy.clone());
        set("generations", self.generations.map(|v| v.to_string()));
        set("epochs", self.epochs.map(|v| v.to_string()));
        set("ascent_epochs", self.ascent_epochs.map(|v| v.to_string()));
        set("ascent_scale", self.ascent_scale.map(|v| v.to_string()));
        set("lr", self.lr.map(|v| v.to_string()));
        set("momentum", self.momentum.map(|v| v.to_string()));
        set("weight_decay", self.weight_decay.map(|v| v.to_string()));
        set("batch_size", self.batch_size.map(|v| v.to_string()));
        set("label_smoothing", self.label_smoothing.map(|v| v.to_string()));
        set("threshold", self.threshold.map(|v| v.to_string()));
        set("seed", self.seed.map(|v| v.to_string()));
        set("dataset", self.dataset.clone());
        set("model", self.model.clone());
        set("test_fraction", self.test_fraction.map(|v| v.to_string()));
        set("augment_flip", self.augment_flip.map(|v| v.to_string()));
        set("augment_crop_pad", self.augment_crop_pad.map(|v| v.to_string()));
        RunSettings::resolve(&map)
    }
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    overrides: ConfigOverrides,
    /// Output directory for metrics.jsonl, checkpoints, and manifest.json.
    #[arg(long)]
    out: PathBuf,
    /// Continue from a generation-boundary checkpoint.
    #[arg(long)]
    resume: Option<PathBuf>,
}

/// Source of evaluation data for checkpoint-based subcommands.
#[derive(Args)]
struct EvalData {
    /// Manifest of the training run; reproduces its exact data splits.
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Dataset spec (teacher:..., blobs:..., spirals:..., idx:..., csv:...).
    #[arg(long)]
    dataset: Option<String>,
    #[arg(long, default_value_t = 0.2)]
    test_fraction: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Synthetic domain shift applied to both splits: permute | pixelate |
    /// invert.
    #[arg(long)]
    shift: Option<String>,
    /// Restrict to a class range `LO..HI` (relabelled to 0..HI-LO).
    #[arg(long)]
    class_range: Option<String>,
    /// Run id stamped into emitted records.
    #[arg(long)]
    run_id: Option<String>,
}

impl EvalData {
    fn load(&self) -> Result<(Dataset, Dataset, String, u64)> {
        let (train, test, run_id, seed) = if let Some(path) = &self.manifest {
            let manifest = RunManifest::load(path)?;
            let mut settings = RunSettings::resolve(&manifest.config)?;
            settings.schedule.run_id = manifest.run_id.clone();
            let (train, test) = settings.build_data()?;
            (train, test, manifest.run_id, settings.schedule.seed)
        } else if let Some(spec) = &self.dataset {
            let spec = DatasetSpec::parse(spec)?;
            let full = spec.load(forgelab::config::rng_seed_for_data(self.seed))?;
            let (train, test) = if self.test_fraction == 0.0 {
                (full.clone(), full)
            } else {
                let parts = forgelab::data::split(
                    &full,
                    &[1.0 - self.test_fraction, self.test_fraction],
                    self.seed,
                )?;
                let mut it = parts.into_iter();
                (it.next().unwrap(), it.next().unwrap())
            };
            (train, test, "eval".to_string(), self.seed)
        } else {
            return Err(Error::Config(
                "either --manifest or --dataset is required".into(),
            ));
        };
        let run_id = self.run_id.clone().unwrap_or(run_id);
        let (mut train, mut test) = (train, test);
        if let Some(shift) = &self.shift {
            let kind = Shift::parse(shift)?;
            train = domain_shift(&train, kind, seed)?;
            test = domain_shift(&test, kind, seed)?;
        }
        if let Some(range) = &self.class_range {
            let (lo, hi) = range
                .split_once("..")
                .ok_or_else(|| Error::Config(format!("class range {range:?}: expected LO..HI")))?;
            let lo: usize = lo.parse().map_err(|_| Error::Config(format!("bad class range {range:?}")))?;
            let hi: usize = hi.parse().map_err(|_| Error::Config(format!("bad class range {range:?}")))?;
            train = train.class_range(lo, hi)?;
            test = test.class_range(lo, hi)?;
        }
        Ok((train, test, run_id, seed))
    }
}

#[derive(Args)]
struct ProbeArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[command(flatten)]
    data: EvalData,
    /// Neighbour count for the layer probes.
    #[arg(long, default_value_t = 5)]
    knn: usize,
    /// Append the record to this file instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct HessianArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[command(flatten)]
    data: EvalData,
    /// Samples in the fixed seeded batch.
    #[arg(long, default_value_t = 512)]
    batch: usize,
    #[arg(long, default_value_t = HESSIAN_EPS_DEFAULT)]
    eps: f64,
    #[arg(long, default_value_t = 0.1)]
    alpha: f64,
    /// Dense-Hessian parameter cap.
    #[arg(long, default_value_t = 4000)]
    cap: usize,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct TransferArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[command(flatten)]
    data: EvalData,
    /// Comma-separated flat learning rates.
    #[arg(long, default_value = "0.1,0.01,0.001")]
    lr_grid: String,
    #[arg(long, default_value_t = 120)]
    epochs: usize,
    #[arg(long, default_value_t = 0.9)]
    momentum: f64,
    #[arg(long, default_value_t = 1e-4)]
    weight_decay: f64,
    #[arg(long, default_value_t = 32)]
    batch_size: usize,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct FewshotArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[command(flatten)]
    data: EvalData,
    #[arg(long, default_value_t = 600)]
    episodes: usize,
    #[arg(long, default_value_t = 5)]
    way: usize,
    #[arg(long, default_value_t = 5)]
    shot: usize,
    #[arg(long, default_value_t = 15)]
    queries: usize,
    /// linear | linear+affine
    #[arg(long, default_value = "linear")]
    mode: String,
    #[arg(long, default_value_t = 100)]
    steps: usize,
    #[arg(long, default_value = "0.1,0.01")]
    lr_grid: String,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct CompareArgs {
    /// Metrics files (one per run).
    inputs: Vec<PathBuf>,
    /// Write a depth-evolution CSV built from probe records.
    #[arg(long)]
    depth_csv: Option<PathBuf>,
}

/// Writes metrics lines and generation-boundary checkpoints.
struct FileObserver {
    metrics: std::io::BufWriter<std::fs::File>,
    out_dir: PathBuf,
    epochs_per_gen: u32,
}

impl RunObserver for FileObserver {
    fn on_epoch(&mut self, record: &EpochRecord) -> Result<()> {
        write_record(&mut self.metrics, &Record::Epoch(record.clone()))
    }

    fn on_generation_end(&mut self, gen: u32, model: &LayeredModel, sgd: &SgdState) -> Result<()> {
        self.metrics.flush()?;
        let path = self.out_dir.join(format!("ckpt_gen{gen}.ckpt"));
        save_checkpoint(model, sgd, gen + 1, (gen + 1) * self.epochs_per_gen, &path)
    }
}

fn parse_grid(s: &str) -> Result<Vec<f64>> {
    s.split(',')
        .map(|v| {
            v.trim()
                .parse()
                .map_err(|_| Error::Config(format!("bad learning rate {v:?} in grid")))
        })
        .collect()
}

fn emit(out: &Option<PathBuf>, record: &Record) -> Result<()> {
    match out {
        Some(path) => {
            let file = std::fs::OpenOptions::new()
                .create(true)
                .append(true)
                .open(path)?;
            let mut w = std::io::BufWriter::new(file);
            write_record(&mut w, record)?;
            w.flush()?;
            Ok(())
        }
        None => {
            let stdout = std::io::stdout();
            let mut w = stdout.lock();
            write_record(&mut w, record)?;
            Ok(())
        }
    }
}

fn load_ckpt(path: &Path) -> Result<Checkpoint> {
    load_checkpoint(path)
}

fn cmd_train(args: &TrainArgs) -> Result<()> {
    let mut settings = args.overrides.resolve()?;
    std::fs::create_dir_all(&args.out)?;
    let (train, test) = settings.build_data()?;
    let built = settings.build_model(&train)?;

    let (model, resume) = match &args.resume {
        Some(path) => {
            let ckpt = load_ckpt(path)?;
            let sgd = ckpt.sgd_state()?;
            let model = ckpt.model.clone();
            (
                model.clone(),
                Some(ResumePoint {
                    model: ckpt.model,
                    sgd,
                    generations_done: ckpt.generations_done,
                }),
            )
        }
        None => (built, None),
    };

    let mask = mask_split(&model, settings.schedule.threshold, settings.schedule.strategy.scheme())?;
    let mask_summary = MaskSummary::of(&model, &mask);

    let metrics_path = args.out.join("metrics.jsonl");
    let metrics_file = if resume.is_some() {
        std::fs::OpenOptions::new().create(true).append(true).open(&metrics_path)?
    } else {
        std::fs::File::create(&metrics_path)?
    };
    let mut observer = FileObserver {
        metrics: std::io::BufWriter::new(metrics_file),
        out_dir: args.out.clone(),
        epochs_per_gen: settings.schedule.epochs_per_gen,
    };

    let started = unix_now();
    let outcome = run_schedule(&settings.schedule, model, &train, &test, &mut observer, resume);
    observer.metrics.flush()?;
    let outcome = outcome?;

    let manifest = RunManifest {
        artifact_version: ARTIFACT_VERSION.to_string(),
        run_id: settings.schedule.run_id.clone(),
        config: settings.to_map(),
        dataset_provenance: train.provenance.clone(),
        mask: mask_summary,
        started_unix: started,
        finished_unix: unix_now(),
        wall_seconds: outcome.report.wall_seconds,
    };
    manifest.save(&args.out.join("manifest.json"))?;

    let last = outcome.report.records.last();
    println!(
        "run {} finished: {} epochs, final test accuracy {}",
        settings.schedule.run_id,
        outcome.report.records.len(),
        last.map(|r| format!("{:.4}", r.test_acc)).unwrap_or_else(|| "-".into())
    );
    Ok(())
}

fn cmd_probe(args: &ProbeArgs) -> Result<()> {
    let ckpt = load_ckpt(&args.checkpoint)?;
    let (train, test, run_id, _) = args.data.load()?;
    let report = probe_model(&ckpt.model, &train, &test, args.knn)?;
    let record = Record::Probe(ProbeRecord {
        run_id,
        generation: ckpt.generations_done.saturating_sub(1),
        epoch: ckpt.next_epoch.saturating_sub(1),
        report,
    });
    emit(&args.out, &record)
}

fn cmd_hessian(args: &HessianArgs) -> Result<()> {
    let ckpt = load_ckpt(&args.checkpoint)?;
    let (train, _, run_id, seed) = args.data.load()?;
    let report = hessian_spectrum(&ckpt.model, &train, args.alpha, args.batch, seed, args.eps, args.cap)?;
    let record = Record::Spectrum(SpectrumRecord {
        run_id,
        generation: ckpt.generations_done.saturating_sub(1),
        epoch: ckpt.next_epoch.saturating_sub(1),
        report,
    });
    emit(&args.out, &record)
}

fn cmd_transfer(args: &TransferArgs) -> Result<()> {
    let ckpt = load_ckpt(&args.checkpoint)?;
    let (train, test, run_id, seed) = args.data.load()?;
    let cfg = TransferConfig {
        lr_grid: parse_grid(&args.lr_grid)?,
        epochs: args.epochs,
        momentum: args.momentum,
        weight_decay: args.weight_decay,
        batch_size: args.batch_size,
        seed,
    };
    let result = linear_probe(&ckpt.model, &train, &test, &cfg)?;
    let record = Record::Transfer(TransferRecord {
        run_id,
        generation: ckpt.generations_done.saturating_sub(1),
        epoch: ckpt.next_epoch.saturating_sub(1),
        result,
    });
    emit(&args.out, &record)
}

fn cmd_fewshot(args: &FewshotArgs) -> Result<()> {
    let ckpt = load_ckpt(&args.checkpoint)?;
    let (train, _, run_id, seed) = args.data.load()?;
    let cfg = FewshotConfig {
        episodes: args.episodes,
        n_way: args.way,
        k_shot: args.shot,
        q_query: args.queries,
        mode: FewshotMode::parse(&args.mode)?,
        steps: args.steps,
        lr_grid: parse_grid(&args.lr_grid)?,
        momentum: 0.9,
        seed,
    };
    let result = fewshot_eval(&ckpt.model, &train, &cfg)?;
    let record = Record::Fewshot(FewshotRecord {
        run_id,
        generation: ckpt.generations_done.saturating_sub(1),
        epoch: ckpt.next_epoch.saturating_sub(1),
        result,
    });
    emit(&args.out, &record)
}

fn cmd_compare(args: &CompareArgs) -> Result<()> {
    if args.inputs.is_empty() {
        return Err(Error::Config("compare needs at least one metrics file".into()));
    }
    let mut runs = Vec::new();
    for path in &args.inputs {
        runs.push(read_records_from(path)?);
    }
    let table = forgelab::metrics::compare(&runs);
    print!("{}", render_table(&table));
    if let Some(path) = &args.depth_csv {
        std::fs::write(path, depth_csv(&runs))?;
    }
    Ok(())
}

fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Train(args) => cmd_train(args),
        Command::Probe(args) => cmd_probe(args),
        Command::Hessian(args) => cmd_hessian(args),
        Command::Transfer(args) => cmd_transfer(args),
        Command::Fewshot(args) => cmd_fewshot(args),
        Command::Compare(args) => cmd_compare(args),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            match err {
                Error::Config(_)
                | Error::Parse(_)
                | Error::Checkpoint(_)
                | Error::Lookup(_)
                | Error::Contract(_)
                | Error::Sampling(_) => ExitCode::from(2),
                Error::Divergence { .. } => ExitCode::from(3),
                Error::Capacity { .. } => ExitCode::from(4),
                _ => ExitCode::FAILURE,
            }
        }
    }
}
