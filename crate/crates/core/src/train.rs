//! Training loop, ablation wiring, checkpoints, and metrics.
//!
//! Every source of randomness is a sub-seed of [`TrainConfig::seed`]:
//! model init, per-epoch batch order, and the linear probe used when the
//! cross-entropy term is off. Resuming from a checkpoint therefore replays
//! exactly the trajectory of an uninterrupted run.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::data::{make_batches, Example, Splits};
use crate::encoder::TokenSeq;
use crate::error::{Error, Result};
use crate::evalab;
use crate::model::{derive_seed, Model, ModelDims, N_CLASSES};
use crate::objectives::{ce_loss, ClassifierParams, LossConfig, SclForm, DEFAULT_ALPHA, DEFAULT_TAU};
use crate::optim::{AdamConfig, AdamState, DEFAULT_LR};
use crate::tensor::{Mat, Param};

pub const CHECKPOINT_FORMAT: &str = "paircl-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;
pub const BEST_CHECKPOINT: &str = "best.json";
pub const LAST_CHECKPOINT: &str = "last.json";

const STREAM_INIT: u64 = 1;
const STREAM_BATCHES: u64 = 2;
const STREAM_PROBE: u64 = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub tau: f64,
    pub alpha: f64,
    pub lr: f64,
    pub seed: u64,
    pub k: usize,
    pub d: usize,
    pub vocab_size: usize,
    pub max_len: usize,
    pub no_scl: bool,
    pub no_ce: bool,
    pub no_crossattn: bool,
    pub stratify: bool,
    pub scl_form: SclForm,
    /// Passes over the training reps when fitting the linear probe (`no_ce` only).
    pub probe_epochs: usize,
    pub probe_lr: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 10,
            batch_size: 64,
            tau: DEFAULT_TAU,
            alpha: DEFAULT_ALPHA,
            lr: DEFAULT_LR,
            seed: 42,
            k: 16,
            d: 16,
            vocab_size: 200,
            max_len: 24,
            no_scl: false,
            no_ce: false,
            no_crossattn: false,
            stratify: true,
            scl_form: SclForm::LogOfMean,
            probe_epochs: 30,
            probe_lr: 1e-2,
        }
    }
}

/// Reference values used at full scale, echoed next to the desk defaults.
pub const REFERENCE_SCALE: &[(&str, &str)] = &[("batch_size", "512"), ("lr", "5e-5")];

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::Config(format!("invalid value {value:?} for {key}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value.trim().to_ascii_lowercase().as_str() {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(Error::Config(format!("invalid boolean {value:?} for {key}"))),
    }
}

impl TrainConfig {
    pub const KEYS: &'static [&'static str] = &[
        "epochs",
        "batch_size",
        "tau",
        "alpha",
        "lr",
        "seed",
        "k",
        "d",
        "vocab_size",
        "max_len",
        "no_scl",
        "no_ce",
        "no_crossattn",
        "stratify",
        "scl_form",
        "probe_epochs",
        "probe_lr",
    ];

    /// Sets one field from its textual form. Unknown keys are errors.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "epochs" => self.epochs = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "tau" => self.tau = parse(key, value)?,
            "alpha" => self.alpha = parse(key, value)?,
            "lr" => self.lr = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "k" => self.k = parse(key, value)?,
            "d" => self.d = parse(key, value)?,
            "vocab_size" => self.vocab_size = parse(key, value)?,
            "max_len" => self.max_len = parse(key, value)?,
            "no_scl" => self.no_scl = parse_bool(key, value)?,
            "no_ce" => self.no_ce = parse_bool(key, value)?,
            "no_crossattn" => self.no_crossattn = parse_bool(key, value)?,
            "stratify" => self.stratify = parse_bool(key, value)?,
            "scl_form" => {
                self.scl_form = match value.trim() {
                    "log_of_mean" => SclForm::LogOfMean,
                    "mean_of_log" => SclForm::MeanOfLog,
                    other => {
                        return Err(Error::Config(format!(
                            "invalid scl_form {other:?} (expected log_of_mean or mean_of_log)"
                        )))
                    }
                }
            }
            "probe_epochs" => self.probe_epochs = parse(key, value)?,
            "probe_lr" => self.probe_lr = parse(key, value)?,
            other => return Err(Error::Config(format!("unknown config key {other:?}"))),
        }
        Ok(())
    }

    /// Every field as `(key, value)`, in [`TrainConfig::KEYS`] order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let form = match self.scl_form {
            SclForm::LogOfMean => "log_of_mean",
            SclForm::MeanOfLog => "mean_of_log",
        };
        vec![
            ("epochs", self.epochs.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("tau", self.tau.to_string()),
            ("alpha", self.alpha.to_string()),
            ("lr", self.lr.to_string()),
            ("seed", self.seed.to_string()),
            ("k", self.k.to_string()),
            ("d", self.d.to_string()),
            ("vocab_size", self.vocab_size.to_string()),
            ("max_len", self.max_len.to_string()),
            ("no_scl", self.no_scl.to_string()),
            ("no_ce", self.no_ce.to_string()),
            ("no_crossattn", self.no_crossattn.to_string()),
            ("stratify", self.stratify.to_string()),
            ("scl_form", form.to_string()),
            ("probe_epochs", self.probe_epochs.to_string()),
            ("probe_lr", self.probe_lr.to_string()),
        ]
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.no_scl && self.no_ce {
            return bad("no_scl and no_ce together leave no objective".into());
        }
        if self.batch_size < 2 {
            return bad(format!("batch_size must be >= 2, got {}", self.batch_size));
        }
        if self.stratify && self.batch_size < 2 * N_CLASSES {
            return bad(format!(
                "stratified batches need batch_size >= {}, got {}",
                2 * N_CLASSES,
                self.batch_size
            ));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return bad(format!("tau must be positive, got {}", self.tau));
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return bad(format!("alpha must be non-negative, got {}", self.alpha));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) || !(self.probe_lr > 0.0 && self.probe_lr.is_finite()) {
            return bad("learning rates must be positive".into());
        }
        if self.k == 0 || self.d == 0 || self.max_len == 0 || self.vocab_size < 2 {
            return bad("k, d, max_len must be >= 1 and vocab_size >= 2".into());
        }
        if self.no_ce && self.probe_epochs == 0 {
            return bad("no_ce needs probe_epochs >= 1 to measure accuracy".into());
        }
        Ok(())
    }

    /// Equal in everything but `epochs`: a checkpoint of one can resume the other.
    pub fn same_run(&self, other: &TrainConfig) -> bool {
        TrainConfig {
            epochs: other.epochs,
            ..self.clone()
        } == *other
    }

    pub fn dims(&self) -> ModelDims {
        ModelDims {
            vocab_size: self.vocab_size,
            k: self.k,
            d: self.d,
            max_len: self.max_len,
            n_classes: N_CLASSES,
            cross_attention: !self.no_crossattn,
        }
    }

    pub fn loss(&self) -> LossConfig {
        LossConfig {
            tau: self.tau,
            alpha: self.alpha,
            use_scl: !self.no_scl,
            use_ce: !self.no_ce,
            scl_form: self.scl_form,
        }
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            ..AdamConfig::default()
        }
    }

    /// Short label of the ablation wiring: `full`, `-scl`, `-ce`, `-crossattn`,
    /// or a combination.
    pub fn variant(&self) -> String {
        let mut parts = Vec::new();
        if self.no_ce {
            parts.push("-ce");
        }
        if self.no_scl {
            parts.push("-scl");
        }
        if self.no_crossattn {
            parts.push("-crossattn");
        }
        if parts.is_empty() {
            "full".into()
        } else {
            parts.join(" ")
        }
    }
}

/// Averages over one epoch's batches.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub l_scl: f64,
    pub l_ce: f64,
    pub l_total: f64,
    pub dev_acc: f64,
    pub skipped_anchors: usize,
    pub degenerate_reps: usize,
    pub batches: usize,
    pub wall_secs: f64,
}

impl EpochRecord {
    fn without_timing(&self) -> EpochRecord {
        EpochRecord {
            wall_secs: 0.0,
            ..self.clone()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub config: TrainConfig,
    pub variant: String,
    pub rep_width: usize,
    pub n_parameters: usize,
    pub init_dev_acc: f64,
    pub epochs: Vec<EpochRecord>,
    /// 0 when no epoch beat the initialization.
    pub best_epoch: usize,
    pub best_dev_acc: f64,
    /// Accuracy of the best-dev checkpoint on the test split.
    pub test_acc: f64,
    pub wall_secs: f64,
}

impl RunReport {
    /// `epoch,l_scl,l_ce,l_total,dev_acc` per epoch.
    pub fn csv(&self) -> String {
        let mut out = String::from("epoch,l_scl,l_ce,l_total,dev_acc\n");
        for e in &self.epochs {
            out.push_str(&format!("{},{},{},{},{}\n", e.epoch, e.l_scl, e.l_ce, e.l_total, e.dev_acc));
        }
        out
    }

    /// Copy with every wall-clock field zeroed, for reproducibility comparisons.
    pub fn without_timing(&self) -> RunReport {
        let mut r = self.clone();
        r.wall_secs = 0.0;
        r.epochs = r.epochs.iter().map(EpochRecord::without_timing).collect();
        r
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedTensor {
    pub name: String,
    pub value: Mat,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamSnapshot {
    pub config: AdamConfig,
    pub t: u64,
    pub m: Vec<Mat>,
    pub v: Vec<Mat>,
}

/// Everything needed to evaluate a model or resume its training.
///
/// Stored as JSON; floats are written in shortest round-trip form, so a
/// save/load cycle is bit-exact.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub config: TrainConfig,
    pub dims: ModelDims,
    /// Epochs completed when this snapshot was taken.
    pub epoch: usize,
    pub best_epoch: usize,
    pub best_dev_acc: f64,
    pub init_dev_acc: f64,
    pub history: Vec<EpochRecord>,
    pub tensors: Vec<NamedTensor>,
    pub adam: AdamSnapshot,
}

impl Checkpoint {
    fn capture(model: &Model, adam: &AdamState, state: &RunState, config: &TrainConfig) -> Checkpoint {
        Checkpoint {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            config: config.clone(),
            dims: model.dims,
            epoch: state.history.len(),
            best_epoch: state.best_epoch,
            best_dev_acc: state.best_dev_acc,
            init_dev_acc: state.init_dev_acc,
            history: state.history.iter().map(EpochRecord::without_timing).collect(),
            tensors: model
                .params()
                .into_iter()
                .map(|p| NamedTensor {
                    name: p.name.clone(),
                    value: p.value.clone(),
                })
                .collect(),
            adam: AdamSnapshot {
                config: adam.config,
                t: adam.t,
                m: adam.m.clone(),
                v: adam.v.clone(),
            },
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self)?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let ckpt: Checkpoint = serde_json::from_str(&text)
            .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
        if ckpt.format != CHECKPOINT_FORMAT {
            return Err(Error::Checkpoint(format!("{}: not a checkpoint", path.display())));
        }
        if ckpt.version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "{}: version {} unsupported (expected {CHECKPOINT_VERSION})",
                path.display(),
                ckpt.version
            )));
        }
        Ok(ckpt)
    }

    /// Copies the stored tensors into `model`, matching by name. Every
    /// model tensor must be present with the same shape.
    pub fn restore_into(&self, model: &mut Model) -> Result<()> {
        if self.tensors.len() != model.params().len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint holds {} tensors, model has {}",
                self.tensors.len(),
                model.params().len()
            )));
        }
        for p in model.params_mut() {
            let stored = self
                .tensors
                .iter()
                .find(|t| t.name == p.name)
                .ok_or_else(|| Error::Checkpoint(format!("tensor {} missing", p.name)))?;
            if stored.value.shape() != p.value.shape() {
                return Err(Error::Checkpoint(format!(
                    "tensor {}: checkpoint shape {:?}, model expects {:?}",
                    p.name,
                    stored.value.shape(),
                    p.value.shape()
                )));
            }
            p.value = stored.value.clone();
        }
        Ok(())
    }

    /// A model with this checkpoint's dims and parameters.
    pub fn model(&self) -> Result<Model> {
        let mut model = Model::init(self.dims, 0)?;
        self.restore_into(&mut model)?;
        Ok(model)
    }

    fn adam_state(&self, model: &Model) -> Result<AdamState> {
        let params = model.params();
        let a = &self.adam;
        if a.m.len() != params.len() || a.v.len() != params.len() {
            return Err(Error::Checkpoint("optimizer state does not match the model".into()));
        }
        for ((p, m), v) in params.iter().zip(&a.m).zip(&a.v) {
            if m.shape() != p.value.shape() || v.shape() != p.value.shape() {
                return Err(Error::Checkpoint(format!("optimizer moments for {} have the wrong shape", p.name)));
            }
        }
        Ok(AdamState {
            config: a.config,
            t: a.t,
            m: a.m.clone(),
            v: a.v.clone(),
        })
    }
}

/// Where a run writes its artifacts, and whether it continues an earlier one.
#[derive(Default)]
pub struct TrainOptions<'a> {
    /// Receives `best.json`, `last.json`, `metrics.csv`, `report.json`, `timing.json`.
    pub out_dir: Option<PathBuf>,
    /// One JSON object per line, per epoch.
    pub metrics: Option<&'a mut dyn Write>,
    pub resume: Option<Checkpoint>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub report: RunReport,
    /// Parameters at the best dev accuracy.
    pub best: Model,
    pub best_checkpoint: Checkpoint,
    pub last_checkpoint: Checkpoint,
}

struct RunState {
    history: Vec<EpochRecord>,
    best_epoch: usize,
    best_dev_acc: f64,
    init_dev_acc: f64,
}

fn labels_of(examples: &[Example]) -> Vec<usize> {
    examples.iter().map(|e| e.label.index()).collect()
}

fn check_split(name: &str, split: &[Example], dims: &ModelDims) -> Result<()> {
    if split.is_empty() {
        return Err(Error::Config(format!("{name} split is empty")));
    }
    for (i, e) in split.iter().enumerate() {
        for seq in [&e.premise, &e.hypothesis] {
            if seq.max_len() > dims.max_len {
                return Err(Error::Config(format!(
                    "{name} example {i}: padded length {} exceeds max_len {}",
                    seq.max_len(),
                    dims.max_len
                )));
            }
            if let Some(&id) = seq.tokens().iter().find(|&&id| id as usize >= dims.vocab_size) {
                return Err(Error::Vocabulary {
                    id,
                    vocab_size: dims.vocab_size,
                });
            }
        }
    }
    Ok(())
}

/// Fits a fresh linear classifier on frozen `z` of the training split by
/// minibatch Adam on cross-entropy, and installs it as `model.classifier`.
pub fn fit_probe(model: &mut Model, train: &[Example], config: &TrainConfig, stream: u64) -> Result<()> {
    let reps: Vec<Vec<f64>> = train
        .iter()
        .map(|e| model.represent(&e.premise, &e.hypothesis).map(|r| r.z))
        .collect::<Result<_>>()?;
    let labels = labels_of(train);
    let seed = derive_seed(derive_seed(config.seed, STREAM_PROBE), stream);
    let mut probe = ClassifierParams::new(model.dims.rep_width(), model.dims.n_classes, seed)?;
    let mut adam = AdamState::new(
        AdamConfig {
            lr: config.probe_lr,
            ..AdamConfig::default()
        },
        &probe.params(),
    );
    let k = config.batch_size.min(reps.len());
    for epoch in 0..config.probe_epochs {
        let batches = make_batches(&labels, k, derive_seed(seed, 1 + epoch as u64), false)?;
        for batch in batches {
            let z: Vec<Vec<f64>> = batch.iter().map(|&i| reps[i].clone()).collect();
            let y: Vec<usize> = batch.iter().map(|&i| labels[i]).collect();
            let ce = ce_loss(&z, &y, &probe)?;
            probe.params_mut().into_iter().for_each(Param::zero_grad);
            probe.accumulate(&ce, 1.0)?;
            adam.step(&mut probe.params_mut())?;
        }
    }
    model.classifier = probe;
    Ok(())
}

fn dev_accuracy(model: &mut Model, splits: &Splits, config: &TrainConfig, stream: u64) -> Result<f64> {
    if config.no_ce {
        fit_probe(model, &splits.train, config, stream)?;
    }
    evalab::accuracy(model, &splits.dev)
}

fn gradients_finite(model: &Model) -> bool {
    model.params().iter().all(|p| p.grad.is_finite())
}

/// Trains per `config` on `splits`, keeping the parameters with the best
/// dev accuracy (initialization counts as epoch 0).
pub fn train(config: &TrainConfig, splits: &Splits, options: TrainOptions<'_>) -> Result<TrainOutcome> {
    let started = Instant::now();
    config.validate()?;
    let dims = config.dims();
    check_split("train", &splits.train, &dims)?;
    check_split("dev", &splits.dev, &dims)?;
    check_split("test", &splits.test, &dims)?;
    let TrainOptions {
        out_dir,
        mut metrics,
        resume,
    } = options;
    if let Some(dir) = &out_dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }

    let loss_cfg = config.loss();
    let train_labels = labels_of(&splits.train);
    let (mut model, mut adam, mut state, mut best) = match resume {
        Some(ckpt) => {
            if !ckpt.config.same_run(config) {
                return Err(Error::Checkpoint(
                    "resume config differs from the checkpoint's (only epochs may change)".into(),
                ));
            }
            if ckpt.epoch > config.epochs {
                return Err(Error::Checkpoint(format!(
                    "checkpoint already has {} epochs, more than the requested {}",
                    ckpt.epoch, config.epochs
                )));
            }
            let mut model = Model::init(dims, derive_seed(config.seed, STREAM_INIT))?;
            ckpt.restore_into(&mut model)?;
            let adam = ckpt.adam_state(&model)?;
            let best = best_from_dir(out_dir.as_deref(), &ckpt)?;
            let state = RunState {
                history: ckpt.history,
                best_epoch: ckpt.best_epoch,
                best_dev_acc: ckpt.best_dev_acc,
                init_dev_acc: ckpt.init_dev_acc,
            };
            (model, adam, state, best)
        }
        None => {
            let mut model = Model::init(dims, derive_seed(config.seed, STREAM_INIT))?;
            let adam = AdamState::new(config.adam(), &model.params());
            let init_dev_acc = dev_accuracy(&mut model, splits, config, 0)?;
            let state = RunState {
                history: Vec::new(),
                best_epoch: 0,
                best_dev_acc: init_dev_acc,
                init_dev_acc,
            };
            let best = Checkpoint::capture(&model, &adam, &state, config);
            (model, adam, state, best)
        }
    };

    for epoch in state.history.len() + 1..=config.epochs {
        let epoch_start = Instant::now();
        let batches = make_batches(
            &train_labels,
            config.batch_size,
            derive_seed(derive_seed(config.seed, STREAM_BATCHES), epoch as u64),
            config.stratify,
        )?;
        if batches.is_empty() {
            return Err(Error::Config(format!(
                "training split of {} cannot fill one batch of {}",
                splits.train.len(),
                config.batch_size
            )));
        }
        let (mut l_scl, mut l_ce, mut l_total) = (0.0, 0.0, 0.0);
        let (mut skipped, mut degenerate) = (0, 0);
        for (b, batch) in batches.iter().enumerate() {
            let examples: Vec<&Example> = batch.iter().map(|&i| &splits.train[i]).collect();
            let pairs: Vec<(&TokenSeq, &TokenSeq)> = examples.iter().map(|e| (&e.premise, &e.hypothesis)).collect();
            let labels: Vec<usize> = examples.iter().map(|e| e.label.index()).collect();
            model.zero_grads();
            let obj = model.accumulate_batch(&pairs, &labels, &loss_cfg)?;
            if !obj.l_total.is_finite() || !gradients_finite(&model) {
                return Err(Error::NonFinite {
                    epoch,
                    batch: b,
                    examples: batch.clone(),
                    detail: format!(
                        "l_scl={} l_ce={} l_total={} degenerate_reps={}",
                        obj.l_scl, obj.l_ce, obj.l_total, obj.degenerate_reps
                    ),
                });
            }
            adam.step(&mut model.params_mut())?;
            if let Some(p) = model.params().iter().find(|p| !p.value.is_finite()) {
                return Err(Error::NonFinite {
                    epoch,
                    batch: b,
                    examples: batch.clone(),
                    detail: format!("{} diverged after the update (lr {})", p.name, config.lr),
                });
            }
            l_scl += obj.l_scl;
            l_ce += obj.l_ce;
            l_total += obj.l_total;
            skipped += obj.skipped_anchors;
            degenerate += obj.degenerate_reps;
        }
        let nb = batches.len() as f64;
        let dev_acc = dev_accuracy(&mut model, splits, config, epoch as u64)?;
        let record = EpochRecord {
            epoch,
            l_scl: l_scl / nb,
            l_ce: l_ce / nb,
            l_total: l_total / nb,
            dev_acc,
            skipped_anchors: skipped,
            degenerate_reps: degenerate,
            batches: batches.len(),
            wall_secs: epoch_start.elapsed().as_secs_f64(),
        };
        if let Some(sink) = metrics.as_deref_mut() {
            serde_json::to_writer(&mut *sink, &record)?;
            writeln!(sink).map_err(|e| Error::io("<metrics>", e))?;
        }
        state.history.push(record);
        let improved = dev_acc > state.best_dev_acc;
        if improved {
            state.best_epoch = epoch;
            state.best_dev_acc = dev_acc;
        }
        let last = Checkpoint::capture(&model, &adam, &state, config);
        if improved {
            best = last.clone();
        }
        if let Some(dir) = &out_dir {
            if improved {
                best.save(&dir.join(BEST_CHECKPOINT))?;
            }
            last.save(&dir.join(LAST_CHECKPOINT))?;
        }
    }

    let last = Checkpoint::capture(&model, &adam, &state, config);
    // keep the best checkpoint's history and config current
    best.history = last.history.clone();
    best.config = config.clone();
    let best_model = best.model()?;
    let test_acc = evalab::accuracy(&best_model, &splits.test)?;
    let report = RunReport {
        config: config.clone(),
        variant: config.variant(),
        rep_width: dims.rep_width(),
        n_parameters: best_model.n_parameters(),
        init_dev_acc: state.init_dev_acc,
        epochs: state.history,
        best_epoch: state.best_epoch,
        best_dev_acc: state.best_dev_acc,
        test_acc,
        wall_secs: started.elapsed().as_secs_f64(),
    };
    if let Some(dir) = &out_dir {
        best.save(&dir.join(BEST_CHECKPOINT))?;
        last.save(&dir.join(LAST_CHECKPOINT))?;
        let csv = dir.join("metrics.csv");
        fs::write(&csv, report.csv()).map_err(|e| Error::io(&csv, e))?;
        // wall-clock times live apart so report.json is reproducible byte for byte
        let json = dir.join("report.json");
        fs::write(&json, serde_json::to_string_pretty(&report.without_timing())?).map_err(|e| Error::io(&json, e))?;
        let timing = dir.join("timing.json");
        let times = serde_json::json!({
            "wall_secs": report.wall_secs,
            "epoch_wall_secs": report.epochs.iter().map(|e| e.wall_secs).collect::<Vec<_>>(),
        });
        fs::write(&timing, serde_json::to_string_pretty(&times)?).map_err(|e| Error::io(&timing, e))?;
    }
    Ok(TrainOutcome {
        report,
        best: best_model,
        best_checkpoint: best,
        last_checkpoint: last,
    })
}

fn best_from_dir(out_dir: Option<&Path>, resumed: &Checkpoint) -> Result<Checkpoint> {
    if resumed.best_epoch == resumed.epoch {
        return Ok(resumed.clone());
    }
    let dir = out_dir.ok_or_else(|| {
        Error::Checkpoint("resuming needs the run directory holding the best checkpoint".into())
    })?;
    let best = Checkpoint::load(&dir.join(BEST_CHECKPOINT))?;
    if best.best_epoch != resumed.best_epoch || !best.config.same_run(&resumed.config) {
        return Err(Error::Checkpoint("best checkpoint does not belong to this run".into()));
    }
    Ok(best)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate, SynthConfig};

    fn tiny() -> (TrainConfig, Splits) {
        let data = generate(&SynthConfig {
            vocab_size: 60,
            n_train: 96,
            n_dev: 30,
            n_test: 30,
            premise_len: (3, 6),
            hypothesis_len: (2, 4),
            max_len: 8,
            ..SynthConfig::default()
        })
        .unwrap();
        let cfg = TrainConfig {
            epochs: 2,
            batch_size: 12,
            k: 4,
            d: 4,
            vocab_size: 60,
            max_len: 8,
            probe_epochs: 3,
            ..TrainConfig::default()
        };
        (cfg, data)
    }

    #[test]
    fn config_round_trips_through_entries() {
        let mut cfg = TrainConfig {
            no_ce: true,
            tau: 0.1,
            scl_form: SclForm::MeanOfLog,
            ..TrainConfig::default()
        };
        cfg.seed = 7;
        let mut rebuilt = TrainConfig::default();
        for (k, v) in cfg.entries() {
            rebuilt.set(k, &v).unwrap();
        }
        assert_eq!(rebuilt, cfg);
        assert_eq!(cfg.entries().iter().map(|e| e.0).collect::<Vec<_>>(), TrainConfig::KEYS);
        assert!(rebuilt.set("learning_rate", "1").is_err());
        assert!(rebuilt.set("no_ce", "maybe").is_err());
    }

    #[test]
    fn contradictory_flags_rejected() {
        let cfg = TrainConfig {
            no_scl: true,
            no_ce: true,
            ..TrainConfig::default()
        };
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        assert!(TrainConfig { batch_size: 5, ..TrainConfig::default() }.validate().is_err());
        assert!(TrainConfig { tau: 0.0, ..TrainConfig::default() }.validate().is_err());
    }

    #[test]
    fn zero_epochs_reports_initialization() {
        let (cfg, data) = tiny();
        let out = train(&TrainConfig { epochs: 0, ..cfg }, &data, TrainOptions::default()).unwrap();
        assert!(out.report.epochs.is_empty());
        assert_eq!(out.report.best_epoch, 0);
        assert_eq!(out.report.best_dev_acc, out.report.init_dev_acc);
    }

    #[test]
    fn no_scl_reports_zero_contrastive_loss() {
        let (cfg, data) = tiny();
        let out = train(&TrainConfig { no_scl: true, ..cfg }, &data, TrainOptions::default()).unwrap();
        for e in &out.report.epochs {
            assert_eq!(e.l_scl, 0.0);
            assert_eq!(e.l_total, e.l_ce);
        }
    }

    #[test]
    fn stratified_batches_skip_no_anchors() {
        let (cfg, data) = tiny();
        let out = train(&cfg, &data, TrainOptions::default()).unwrap();
        assert!(out.report.epochs.iter().all(|e| e.skipped_anchors == 0));
        assert_eq!(out.report.epochs.len(), 2);
    }

    #[test]
    fn metrics_stream_has_one_line_per_epoch() {
        let (cfg, data) = tiny();
        let mut sink = Vec::new();
        train(
            &cfg,
            &data,
            TrainOptions {
                metrics: Some(&mut sink),
                ..TrainOptions::default()
            },
        )
        .unwrap();
        let text = String::from_utf8(sink).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 2);
        let first: EpochRecord = serde_json::from_str(lines[0]).unwrap();
        assert_eq!(first.epoch, 1);
    }

    #[test]
    fn out_of_vocab_data_rejected() {
        let (cfg, data) = tiny();
        let err = train(&TrainConfig { vocab_size: 10, ..cfg }, &data, TrainOptions::default()).unwrap_err();
        assert!(matches!(err, Error::Vocabulary { .. }));
    }
}
