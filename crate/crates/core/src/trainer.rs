//! The generation/epoch/phase state machine: strategy dispatch, per-epoch
//! training with per-hypothesis update rules, and deterministic scheduling.

use crate::data::{augment, Dataset};
use crate::error::{Error, Result};
use crate::mask::{self, HypothesisMask, Scheme};
use crate::nn::{self, LayeredModel, LeafMode, ParamId};
use crate::optim::{cosine_lr, sgd_step, Direction, SgdState};
use crate::rng;
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

/// Training strategies; the forgetting step distinguishes them.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Strategy {
    /// One generation of plain descent.
    Normal,
    /// G generations of plain descent, no forgetting.
    NormalLong,
    /// Later layers re-initialized at the start of each generation after the
    /// first.
    Llf,
    /// Early layers ascend the loss for the first k epochs of every
    /// generation.
    Seal,
    /// Seal, with the later layers frozen during the ascent window.
    SealFreeze,
    /// Seal, plus later layers re-initialized at the start of each
    /// generation after the first.
    SealReinit,
    /// Seal with the hypotheses swapped: the later layers ascend.
    SealReverse,
}

impl Strategy {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "normal" => Ok(Strategy::Normal),
            "normal-long" => Ok(Strategy::NormalLong),
            "llf" => Ok(Strategy::Llf),
            "seal" => Ok(Strategy::Seal),
            "seal+freeze" => Ok(Strategy::SealFreeze),
            "seal+reinit" => Ok(Strategy::SealReinit),
            "seal+reverse" => Ok(Strategy::SealReverse),
            other => Err(Error::Config(format!(
                "unknown strategy {other:?}; expected one of normal, normal-long, llf, seal, seal+freeze, seal+reinit, seal+reverse"
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Strategy::Normal => "normal",
            Strategy::NormalLong => "normal-long",
            Strategy::Llf => "llf",
            Strategy::Seal => "seal",
            Strategy::SealFreeze => "seal+freeze",
            Strategy::SealReinit => "seal+reinit",
            Strategy::SealReverse => "seal+reverse",
        }
    }

    /// Mask scheme used by this strategy.
    pub fn scheme(&self) -> Scheme {
        match self {
            Strategy::Llf => Scheme::Llf,
            Strategy::SealReverse => Scheme::Reverse,
            _ => Scheme::Seal,
        }
    }
}

impl std::fmt::Display for Strategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Fully resolved training schedule.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScheduleConfig {
    pub run_id: String,
    pub strategy: Strategy,
    pub generations: u32,
    pub epochs_per_gen: u32,
    /// Ascent window length k; the first k epochs of each generation ascend.
    pub ascent_epochs: u32,
    /// Initial learning rate of the per-generation cosine schedule.
    pub lr0: f64,
    /// Ascent scale S: the ascent rate is S times the current rate.
    pub ascent_scale: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub label_smoothing: f64,
    /// Layer threshold splitting early from later layers.
    pub threshold: usize,
    pub seed: u64,
    pub augment_flip: bool,
    pub augment_crop_pad: usize,
    /// Keep a per-(epoch, parameter) log of applied update rules.
    #[serde(default)]
    pub record_updates: bool,
}

impl ScheduleConfig {
    pub fn validate(&self) -> Result<()> {
        if self.generations < 1 {
            return Err(Error::Config("generations must be >= 1".into()));
        }
        if self.epochs_per_gen < 1 {
            return Err(Error::Config("epochs must be >= 1".into()));
        }
        if self.ascent_epochs >= self.epochs_per_gen {
            return Err(Error::Config(format!(
                "ascent_epochs must satisfy 0 <= k < epochs, got k={} epochs={}",
                self.ascent_epochs, self.epochs_per_gen
            )));
        }
        if self.ascent_scale <= 0.0 {
            return Err(Error::Config("ascent_scale must be > 0".into()));
        }
        if self.lr0 <= 0.0 {
            return Err(Error::Config("lr must be > 0".into()));
        }
        if self.batch_size < 1 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(Error::Config(format!(
                "label_smoothing must lie in [0, 1), got {}",
                self.label_smoothing
            )));
        }
        Ok(())
    }

    /// Apply strategy overrides: plain baselines never ascend, and the
    /// short baseline runs a single generation.
    pub fn effective(&self) -> ScheduleConfig {
        let mut cfg = self.clone();
        match self.strategy {
            Strategy::Normal => {
                cfg.generations = 1;
                cfg.ascent_epochs = 0;
            }
            Strategy::NormalLong | Strategy::Llf => {
                cfg.ascent_epochs = 0;
            }
            _ => {}
        }
        cfg
    }

    pub fn total_epochs(&self) -> u32 {
        self.generations * self.epochs_per_gen
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Ascent,
    Descent,
}

/// Phase of a global epoch index: ascent iff (e mod E) < k.
pub fn phase_of(epoch: u32, epochs_per_gen: u32, ascent_epochs: u32) -> Phase {
    if epoch % epochs_per_gen < ascent_epochs {
        Phase::Ascent
    } else {
        Phase::Descent
    }
}

/// One row of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub run_id: String,
    pub generation: u32,
    pub epoch: u32,
    pub epoch_in_gen: u32,
    pub phase: Phase,
    pub lr: f64,
    pub train_loss: f64,
    pub train_acc: f64,
    pub test_acc: f64,
}

/// One applied update rule: which parameter stepped which way during an
/// epoch.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct UpdateEvent {
    pub epoch: u32,
    pub param: ParamId,
    pub rule: Direction,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunReport {
    pub run_id: String,
    pub seed: u64,
    pub records: Vec<EpochRecord>,
    pub update_log: Vec<UpdateEvent>,
    pub wall_seconds: f64,
}

#[derive(Debug)]
pub struct RunOutcome {
    pub model: LayeredModel,
    pub sgd: SgdState,
    pub report: RunReport,
}

/// Callbacks fired during a run; generation-start fires after any
/// intervention for that generation has been applied.
pub trait RunObserver {
    fn on_generation_start(&mut self, _gen: u32, _model: &LayeredModel, _sgd: &SgdState) -> Result<()> {
        Ok(())
    }
    fn on_epoch(&mut self, _record: &EpochRecord) -> Result<()> {
        Ok(())
    }
    fn on_generation_end(&mut self, _gen: u32, _model: &LayeredModel, _sgd: &SgdState) -> Result<()> {
        Ok(())
    }
}

pub struct NullObserver;

impl RunObserver for NullObserver {}

/// Test accuracy over a dataset in natural order.
pub fn evaluate(model: &LayeredModel, ds: &Dataset) -> Result<f64> {
    let mut hits = 0usize;
    let indices: Vec<usize> = (0..ds.len()).collect();
    for chunk in indices.chunks(256) {
        let (x, labels) = ds.gather(chunk);
        let preds = model.predict(&x)?;
        hits += preds.iter().zip(&labels).filter(|(p, l)| p == l).count();
    }
    Ok(hits as f64 / ds.len().max(1) as f64)
}

const DIVERGENCE_LOSS_CAP: f64 = 1e6;

/// One full pass over the training set with per-batch updates. The phase
/// decides which rule the forgetting hypothesis receives; the fit hypothesis
/// always descends.
#[allow(clippy::too_many_arguments)]
pub fn train_epoch(
    model: &mut LayeredModel,
    mask: &HypothesisMask,
    sgd: &mut SgdState,
    train: &Dataset,
    cfg: &ScheduleConfig,
    epoch: u32,
    phase: Phase,
    lr: f64,
) -> Result<(f64, f64, Vec<UpdateEvent>)> {
    let generation = epoch / cfg.epochs_per_gen;
    let mut epoch_rng = rng::stream(cfg.seed, "epoch", epoch as u64, 0);
    let mut order: Vec<usize> = (0..train.len()).collect();
    rng::shuffle(&mut epoch_rng, &mut order);

    let eta_a = cfg.ascent_scale * lr;
    let direction_of = |id: ParamId| {
        if phase == Phase::Ascent && mask.is_forget(id) {
            Direction::Ascent
        } else {
            Direction::Descent
        }
    };

    let mut loss_sum = 0.0;
    let mut hit_sum = 0.0;
    let mut events: Vec<UpdateEvent> = Vec::new();
    let mut first_batch = true;

    for (bi, batch_idx) in order.chunks(cfg.batch_size).enumerate() {
        let diverged = |_e: Error| Error::Divergence {
            generation,
            epoch,
            batch: bi,
        };
        let (mut x, labels) = train.gather(batch_idx);
        if cfg.augment_flip || cfg.augment_crop_pad > 0 {
            x = augment(&x, cfg.augment_flip, cfg.augment_crop_pad, &mut epoch_rng)?;
        }
        let mut tape = crate::tape::Tape::new();
        let vars = model.leaves(&mut tape, LeafMode::Trainable);
        let input = tape.leaf(x);
        let io = model.forward(&mut tape, &vars, &input, false).map_err(|e| match e {
            Error::NonFinite(_) => diverged(e),
            other => other,
        })?;
        let loss = nn::smoothed_cross_entropy(&mut tape, &io.output, &labels, cfg.label_smoothing)
            .map_err(|e| match e {
                Error::NonFinite(_) => diverged(e),
                other => other,
            })?;
        let loss_val = loss.value().item()?;
        if !loss_val.is_finite() || loss_val > DIVERGENCE_LOSS_CAP {
            return Err(Error::Divergence {
                generation,
                epoch,
                batch: bi,
            });
        }
        loss_sum += loss_val * batch_idx.len() as f64;
        hit_sum += nn::accuracy(io.output.value(), &labels) * batch_idx.len() as f64;

        let gm = tape.backward(&loss)?;
        let mut grads: BTreeMap<ParamId, Tensor> = BTreeMap::new();
        for (&id, var) in &vars {
            if let Some(g) = gm.get(var) {
                grads.insert(id, g.clone());
            }
        }
        if cfg.record_updates && first_batch {
            for &id in grads.keys() {
                events.push(UpdateEvent {
                    epoch,
                    param: id,
                    rule: direction_of(id),
                });
            }
            first_batch = false;
        }
        sgd_step(model, &grads, sgd, lr, direction_of, eta_a)?;
    }
    let n = train.len() as f64;
    Ok((loss_sum / n, hit_sum / n, events))
}

/// State to continue a run from a generation boundary.
pub struct ResumePoint {
    pub model: LayeredModel,
    pub sgd: SgdState,
    /// Completed generations; training restarts at epoch
    /// `generations_done * epochs_per_gen`.
    pub generations_done: u32,
}

/// Epoch-at-a-time driver of a schedule. `begin_epoch` applies the boundary
/// work for the upcoming epoch (strategy interventions at generation starts,
/// momentum resets at phase flips, freeze toggles); `complete_epoch` trains
/// and evaluates it.
pub struct Runner {
    cfg: ScheduleConfig,
    model: LayeredModel,
    sgd: SgdState,
    mask: HypothesisMask,
    next_epoch: u32,
    prepared: bool,
    records: Vec<EpochRecord>,
    update_log: Vec<UpdateEvent>,
    started: std::time::Instant,
}

impl Runner {
    pub fn new(config: &ScheduleConfig, model: LayeredModel, resume: Option<ResumePoint>) -> Result<Runner> {
        config.validate()?;
        let cfg = config.effective();
        let (model, sgd, next_epoch) = match resume {
            Some(r) => {
                let start = r.generations_done * cfg.epochs_per_gen;
                (r.model, r.sgd, start)
            }
            None => {
                let sgd = SgdState::new(&model, cfg.momentum, cfg.weight_decay);
                (model, sgd, 0)
            }
        };
        let mask = mask::split(&model, cfg.threshold, cfg.strategy.scheme())?;
        Ok(Runner {
            cfg,
            model,
            sgd,
            mask,
            next_epoch,
            prepared: false,
            records: Vec::new(),
            update_log: Vec::new(),
            started: std::time::Instant::now(),
        })
    }

    pub fn done(&self) -> bool {
        self.next_epoch >= self.cfg.total_epochs()
    }

    pub fn next_epoch(&self) -> u32 {
        self.next_epoch
    }

    pub fn config(&self) -> &ScheduleConfig {
        &self.cfg
    }

    pub fn model(&self) -> &LayeredModel {
        &self.model
    }

    pub fn sgd(&self) -> &SgdState {
        &self.sgd
    }

    pub fn mask(&self) -> &HypothesisMask {
        &self.mask
    }

    pub fn records(&self) -> &[EpochRecord] {
        &self.records
    }

    /// Boundary work for the upcoming epoch. Returns Some(generation) when
    /// this epoch opens a new generation (after any intervention for it).
    pub fn begin_epoch(&mut self) -> Result<Option<u32>> {
        if self.done() {
            return Err(Error::Contract("begin_epoch after the schedule finished".into()));
        }
        if self.prepared {
            return Err(Error::Contract("begin_epoch called twice without complete_epoch".into()));
        }
        let epoch = self.next_epoch;
        let cfg = &self.cfg;
        let generation = epoch / cfg.epochs_per_gen;
        let epoch_in_gen = epoch % cfg.epochs_per_gen;
        let opened = if epoch_in_gen == 0 {
            if generation > 0 {
                let reinit_seed = rng::derive(cfg.seed, "reinit", generation as u64, 0);
                match cfg.strategy {
                    Strategy::Llf => {
                        mask::reinitialize(&mut self.model, &self.mask.forget_set, reinit_seed, Some(&mut self.sgd))?;
                    }
                    Strategy::SealReinit => {
                        mask::reinitialize(&mut self.model, &self.mask.fit_set, reinit_seed, Some(&mut self.sgd))?;
                    }
                    _ => {}
                }
            }
            Some(generation)
        } else {
            None
        };

        let phase = phase_of(epoch, cfg.epochs_per_gen, cfg.ascent_epochs);

        // Stale momentum points the wrong way across an ascent/descent
        // boundary; forgetting-hypothesis buffers restart there.
        if epoch > 0 && phase != phase_of(epoch - 1, cfg.epochs_per_gen, cfg.ascent_epochs) {
            self.sgd.zero_buffers(self.mask.forget_set.iter());
        }

        if cfg.strategy == Strategy::SealFreeze {
            mask::set_frozen(&mut self.model, &self.mask.fit_set, phase == Phase::Ascent)?;
        }
        self.prepared = true;
        Ok(opened)
    }

    /// Train one full epoch and evaluate; returns the epoch record.
    pub fn complete_epoch(&mut self, train: &Dataset, test: &Dataset) -> Result<EpochRecord> {
        if !self.prepared {
            return Err(Error::Contract("complete_epoch without begin_epoch".into()));
        }
        self.prepared = false;
        let epoch = self.next_epoch;
        let cfg = self.cfg.clone();
        let generation = epoch / cfg.epochs_per_gen;
        let epoch_in_gen = epoch % cfg.epochs_per_gen;
        let phase = phase_of(epoch, cfg.epochs_per_gen, cfg.ascent_epochs);
        let lr = cosine_lr(epoch_in_gen as usize, cfg.epochs_per_gen as usize, cfg.lr0);
        let (train_loss, train_acc, events) =
            train_epoch(&mut self.model, &self.mask, &mut self.sgd, train, &cfg, epoch, phase, lr)?;
        self.update_log.extend(events);
        let test_acc = evaluate(&self.model, test)?;
        let record = EpochRecord {
            run_id: cfg.run_id.clone(),
            generation,
            epoch,
            epoch_in_gen,
            phase,
            lr,
            train_loss,
            train_acc,
            test_acc,
        };
        self.records.push(record.clone());
        self.next_epoch += 1;
        Ok(record)
    }

    /// Some(generation) when the most recently completed epoch closed it.
    pub fn generation_just_ended(&self) -> Option<u32> {
        if self.next_epoch == 0 || self.prepared {
            return None;
        }
        let last = self.next_epoch - 1;
        if last % self.cfg.epochs_per_gen == self.cfg.epochs_per_gen - 1 {
            Some(last / self.cfg.epochs_per_gen)
        } else {
            None
        }
    }

    pub fn into_outcome(self) -> RunOutcome {
        RunOutcome {
            report: RunReport {
                run_id: self.cfg.run_id.clone(),
                seed: self.cfg.seed,
                records: self.records,
                update_log: self.update_log,
                wall_seconds: self.started.elapsed().as_secs_f64(),
            },
            model: self.model,
            sgd: self.sgd,
        }
    }
}

/// Execute a full schedule: G generations of E epochs under the configured
/// strategy, reporting one record per epoch. Interventions (re-initialization,
/// freezing) and momentum-buffer resets fire at the boundaries defined by the
/// strategy. With `resume`, the run continues from a generation boundary and
/// replays exactly what the uninterrupted run would have done.
pub fn run_schedule(
    config: &ScheduleConfig,
    model: LayeredModel,
    train: &Dataset,
    test: &Dataset,
    observer: &mut dyn RunObserver,
    resume: Option<ResumePoint>,
) -> Result<RunOutcome> {
    if train.is_empty() {
        return Err(Error::Config("training dataset is empty".into()));
    }
    let mut runner = Runner::new(config, model, resume)?;
    while !runner.done() {
        if let Some(gen) = runner.begin_epoch()? {
            observer.on_generation_start(gen, runner.model(), runner.sgd())?;
        }
        let record = runner.complete_epoch(train, test)?;
        observer.on_epoch(&record)?;
        if let Some(gen) = runner.generation_just_ended() {
            observer.on_generation_end(gen, runner.model(), runner.sgd())?;
        }
    }
    Ok(runner.into_outcome())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_synthetic, split as data_split, SyntheticSpec};

    pub(crate) fn tiny_config(strategy: Strategy) -> ScheduleConfig {
        ScheduleConfig {
            run_id: strategy.name().to_string(),
            strategy,
            generations: 2,
            epochs_per_gen: 4,
            ascent_epochs: 1,
            lr0: 0.05,
            ascent_scale: 0.01,
            momentum: 0.9,
            weight_decay: 5e-4,
            batch_size: 8,
            label_smoothing: 0.1,
            threshold: 2,
            seed: 17,
            augment_flip: false,
            augment_crop_pad: 0,
            record_updates: false,
        }
    }

    fn tiny_data() -> (Dataset, Dataset) {
        let ds = gen_synthetic(
            &SyntheticSpec::GaussianBlobs {
                classes: 3,
                per_class: 20,
                dim: 4,
                sep: 3.0,
                sigma: 1.0,
            },
            5,
        )
        .unwrap();
        let parts = data_split(&ds, &[0.8, 0.2], 9).unwrap();
        let mut it = parts.into_iter();
        (it.next().unwrap(), it.next().unwrap())
    }

    #[test]
    fn phase_of_boundaries() {
        assert_eq!(phase_of(39, 160, 40), Phase::Ascent);
        assert_eq!(phase_of(40, 160, 40), Phase::Descent);
        assert_eq!(phase_of(159, 160, 40), Phase::Descent);
        assert_eq!(phase_of(160, 160, 40), Phase::Ascent);
        assert_eq!(phase_of(199, 160, 40), Phase::Ascent);
        assert_eq!(phase_of(200, 160, 40), Phase::Descent);
        assert_eq!(phase_of(0, 20, 0), Phase::Descent);
    }

    #[test]
    fn paper_scale_phase_counts() {
        // G=10, E=160, k=40: 1600 epochs, 400 of them ascent
        let ascents = (0..1600).filter(|&e| phase_of(e, 160, 40) == Phase::Ascent).count();
        assert_eq!(ascents, 400);
    }

    #[test]
    fn normal_runs_one_generation_all_descent() {
        let (train, test) = tiny_data();
        let mut cfg = tiny_config(Strategy::Normal);
        cfg.generations = 3; // overridden to 1 by the strategy
        let model = LayeredModel::mlp(4, &[8, 8, 8], 3, false, cfg.seed);
        let out = run_schedule(&cfg, model, &train, &test, &mut NullObserver, None).unwrap();
        assert_eq!(out.report.records.len(), 4);
        assert!(out.report.records.iter().all(|r| r.phase == Phase::Descent));
    }

    #[test]
    fn record_count_and_phase_layout() {
        let (train, test) = tiny_data();
        let cfg = tiny_config(Strategy::Seal);
        let model = LayeredModel::mlp(4, &[8, 8, 8], 3, false, cfg.seed);
        let out = run_schedule(&cfg, model, &train, &test, &mut NullObserver, None).unwrap();
        assert_eq!(out.report.records.len(), 8);
        let ascents: Vec<u32> = out
            .report
            .records
            .iter()
            .filter(|r| r.phase == Phase::Ascent)
            .map(|r| r.epoch)
            .collect();
        assert_eq!(ascents, vec![0, 4]);
        for r in &out.report.records {
            assert_eq!(r.generation, r.epoch / 4);
            assert_eq!(r.epoch_in_gen, r.epoch % 4);
        }
    }

    #[test]
    fn identical_seeds_identical_runs() {
        let (train, test) = tiny_data();
        let cfg = tiny_config(Strategy::Seal);
        let model_a = LayeredModel::mlp(4, &[8, 8, 8], 3, false, cfg.seed);
        let model_b = LayeredModel::mlp(4, &[8, 8, 8], 3, false, cfg.seed);
        let a = run_schedule(&cfg, model_a, &train, &test, &mut NullObserver, None).unwrap();
        let b = run_schedule(&cfg, model_b, &train, &test, &mut NullObserver, None).unwrap();
        assert_eq!(a.report.records, b.report.records);
        assert_eq!(a.report.update_log, b.report.update_log);
        assert_eq!(a.model, b.model);
    }

    #[test]
    fn seal_without_ascent_matches_normal_long() {
        let (train, test) = tiny_data();
        let mut seal = tiny_config(Strategy::Seal);
        seal.ascent_epochs = 0;
        seal.run_id = "same".into();
        let mut long = tiny_config(Strategy::NormalLong);
        long.run_id = "same".into();
        let m1 = LayeredModel::mlp(4, &[8, 8, 8], 3, false, seal.seed);
        let m2 = LayeredModel::mlp(4, &[8, 8, 8], 3, false, long.seed);
        let a = run_schedule(&seal, m1, &train, &test, &mut NullObserver, None).unwrap();
        let b = run_schedule(&long, m2, &train, &test, &mut NullObserver, None).unwrap();
        assert_eq!(a.model, b.model);
        assert_eq!(a.report.records, b.report.records);
    }

    #[test]
    fn divergence_reports_location() {
        let (train, test) = tiny_data();
        let mut cfg = tiny_config(Strategy::NormalLong);
        cfg.lr0 = 1e14;
        let model = LayeredModel::mlp(4, &[8, 8, 8], 3, false, cfg.seed);
        let err = run_schedule(&cfg, model, &train, &test, &mut NullObserver, None).unwrap_err();
        assert!(matches!(err, Error::Divergence { .. }), "{err}");
    }

    #[test]
    fn freeze_keeps_fit_parameters_still_during_ascent() {
        let (train, test) = tiny_data();
        let mut cfg = tiny_config(Strategy::SealFreeze);
        cfg.record_updates = true;
        let model = LayeredModel::mlp(4, &[8, 8, 8], 3, false, cfg.seed);
        let out = run_schedule(&cfg, model, &train, &test, &mut NullObserver, None).unwrap();
        // during ascent epochs no fit-hypothesis parameter logs an update
        let mask_threshold = cfg.threshold;
        for ev in &out.report.update_log {
            if phase_of(ev.epoch, cfg.epochs_per_gen, cfg.ascent_epochs) == Phase::Ascent {
                assert!(
                    ev.param.layer < mask_threshold,
                    "fit parameter {} updated during ascent",
                    ev.param
                );
            }
        }
    }

    #[test]
    fn resume_matches_uninterrupted() {
        let (train, test) = tiny_data();
        let mut cfg = tiny_config(Strategy::Seal);
        cfg.generations = 3;
        let model = LayeredModel::mlp(4, &[8, 8, 8], 3, false, cfg.seed);

        struct Capture {
            at_gen_end: u32,
            model: Option<LayeredModel>,
            sgd: Option<SgdState>,
        }
        impl RunObserver for Capture {
            fn on_generation_end(&mut self, gen: u32, model: &LayeredModel, sgd: &SgdState) -> Result<()> {
                if gen == self.at_gen_end {
                    self.model = Some(model.clone());
                    self.sgd = Some(sgd.clone());
                }
                Ok(())
            }
        }

        let mut cap = Capture { at_gen_end: 0, model: None, sgd: None };
        let full = run_schedule(&cfg, model, &train, &test, &mut cap, None).unwrap();

        let resumed = run_schedule(
            &cfg,
            LayeredModel::mlp(4, &[8, 8, 8], 3, false, 999), // ignored under resume
            &train,
            &test,
            &mut NullObserver,
            Some(ResumePoint {
                model: cap.model.unwrap(),
                sgd: cap.sgd.unwrap(),
                generations_done: 1,
            }),
        )
        .unwrap();

        assert_eq!(resumed.model, full.model);
        let tail: Vec<_> = full.report.records.iter().filter(|r| r.generation >= 1).collect();
        let resumed_records: Vec<_> = resumed.report.records.iter().collect();
        assert_eq!(resumed_records, tail);
    }
}
