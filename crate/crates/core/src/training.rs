//! Adam/AdamW, group freezing, early stopping and the epoch loop.

use std::collections::BTreeSet;
use std::io::Write;
use std::path::Path;

use rand::rngs::StdRng;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Gradients, ParamId, ParamStore, Tape, Var};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Adam,
    AdamW,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled decay; ignored by plain Adam.
    pub weight_decay: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            kind: OptimizerKind::AdamW,
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

impl OptimizerConfig {
    pub fn adam(lr: f64) -> Self {
        Self {
            kind: OptimizerKind::Adam,
            lr,
            ..Self::default()
        }
    }

    pub fn adamw(lr: f64, weight_decay: f64) -> Self {
        Self {
            kind: OptimizerKind::AdamW,
            lr,
            weight_decay,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let open_unit = |x: f64| x > 0.0 && x < 1.0;
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate {} must be positive", self.lr)));
        }
        if !open_unit(self.beta1) || !open_unit(self.beta2) {
            return Err(Error::Config(format!(
                "betas ({}, {}) must lie strictly between 0 and 1",
                self.beta1, self.beta2
            )));
        }
        if !(self.eps > 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::Config("eps must be positive and weight_decay non-negative".into()));
        }
        Ok(())
    }
}

/// Adam moments for the trainable tensors of one store.
#[derive(Clone, Debug)]
pub struct Optimizer {
    config: OptimizerConfig,
    t: i32,
    m: Vec<Option<Vec<f64>>>,
    v: Vec<Option<Vec<f64>>>,
}

impl Optimizer {
    pub fn new(config: OptimizerConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        })
    }

    pub fn config(&self) -> &OptimizerConfig {
        &self.config
    }

    pub fn steps(&self) -> i32 {
        self.t
    }

    /// Whether moment buffers exist for `id`; frozen tensors never get any.
    pub fn has_state(&self, id: ParamId) -> bool {
        self.m.get(id.index()).is_some_and(Option::is_some)
    }

    /// One update of every trainable tensor from its accumulated gradient.
    pub fn step(&mut self, store: &mut ParamStore) -> Result<()> {
        let ids: Vec<ParamId> = store.ids().filter(|&id| store.is_trainable(id)).collect();
        for &id in &ids {
            if store.get(id).grad().is_none() {
                return Err(Error::Contract(format!(
                    "trainable parameter {} has no gradient",
                    store.name(id)
                )));
            }
        }
        self.m.resize(store.len(), None);
        self.v.resize(store.len(), None);
        self.t += 1;
        let c = &self.config;
        let bc1 = 1.0 - c.beta1.powi(self.t);
        let bc2 = 1.0 - c.beta2.powi(self.t);
        let decay = match c.kind {
            OptimizerKind::Adam => 0.0,
            OptimizerKind::AdamW => c.lr * c.weight_decay,
        };
        for id in ids {
            let t = store.get_mut(id);
            let n = t.len();
            let grad = t.grad().expect("checked above").to_vec();
            let m = self.m[id.index()].get_or_insert_with(|| vec![0.0; n]);
            let v = self.v[id.index()].get_or_insert_with(|| vec![0.0; n]);
            for (((theta, g), m), v) in t.data_mut().iter_mut().zip(&grad).zip(m).zip(v) {
                *m = c.beta1 * *m + (1.0 - c.beta1) * g;
                *v = c.beta2 * *v + (1.0 - c.beta2) * g * g;
                let update = c.lr * (*m / bc1) / ((*v / bc2).sqrt() + c.eps);
                *theta -= update + decay * *theta;
            }
            if t.data().iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFinite(format!("update of {}", store.name(id))));
            }
        }
        Ok(())
    }
}

/// Parameter groups that receive no updates.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FreezeSpec {
    pub groups: BTreeSet<String>,
}

impl FreezeSpec {
    pub fn new<S: Into<String>>(groups: impl IntoIterator<Item = S>) -> Self {
        Self {
            groups: groups.into_iter().map(Into::into).collect(),
        }
    }
}

/// Makes exactly the groups in `spec` frozen and returns the trainable ids.
pub fn apply_freeze(store: &mut ParamStore, spec: &FreezeSpec) -> Result<Vec<ParamId>> {
    let known = store.groups();
    if let Some(bad) = spec.groups.iter().find(|g| !known.contains(*g)) {
        return Err(Error::Config(format!(
            "cannot freeze unknown group {bad}; known groups: {known:?}"
        )));
    }
    for g in &known {
        store.set_group_trainable(g, !spec.groups.contains(g))?;
    }
    Ok(store.ids().filter(|&id| store.is_trainable(id)).collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Monitor {
    ValLoss,
    ValF1,
    ValAccuracy,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Min,
    Max,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EarlyStopConfig {
    pub patience: usize,
    pub metric: Monitor,
    pub mode: Mode,
}

impl EarlyStopConfig {
    pub fn new(patience: usize, metric: Monitor) -> Self {
        let mode = match metric {
            Monitor::ValLoss => Mode::Min,
            _ => Mode::Max,
        };
        Self {
            patience,
            metric,
            mode,
        }
    }
}

/// Plateau detector over one validation value per epoch.
#[derive(Clone, Debug)]
pub struct EarlyStopping {
    config: EarlyStopConfig,
    best: Option<f64>,
    best_epoch: usize,
    epoch: usize,
    stale: usize,
}

impl EarlyStopping {
    pub fn new(config: EarlyStopConfig) -> Result<Self> {
        if config.patience == 0 {
            return Err(Error::Config("patience must be at least 1".into()));
        }
        Ok(Self {
            config,
            best: None,
            best_epoch: 0,
            epoch: 0,
            stale: 0,
        })
    }

    /// Records the next epoch's value; returns whether it is a new best.
    pub fn observe(&mut self, value: f64) -> bool {
        self.epoch += 1;
        let better = match (self.best, self.config.mode) {
            (None, _) => true,
            (Some(b), Mode::Min) => value < b,
            (Some(b), Mode::Max) => value > b,
        };
        if better {
            self.best = Some(value);
            self.best_epoch = self.epoch;
            self.stale = 0;
        } else {
            self.stale += 1;
        }
        better
    }

    pub fn should_stop(&self) -> bool {
        self.stale >= self.config.patience
    }

    pub fn best(&self) -> Option<f64> {
        self.best
    }

    /// 1-based epoch of the best value, 0 before any observation.
    pub fn best_epoch(&self) -> usize {
        self.best_epoch
    }
}

/// Validation summary of a model on a set of examples.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub loss: f64,
    pub accuracy: Option<f64>,
    pub f1: Option<f64>,
}

impl Evaluation {
    pub fn get(&self, metric: Monitor) -> Result<f64> {
        match metric {
            Monitor::ValLoss => Some(self.loss),
            Monitor::ValAccuracy => self.accuracy,
            Monitor::ValF1 => self.f1,
        }
        .ok_or_else(|| Error::Config(format!("model does not report {metric:?}")))
    }
}

/// What [`fit`] needs from a model: a per-example training loss and an
/// evaluation over a slice of examples.
pub trait Trainable: Sync {
    type Example: Sync;

    fn loss(&self, tape: &Tape, example: &Self::Example, rng: &mut StdRng) -> Result<Var>;

    fn evaluate(&self, store: &ParamStore, examples: &[Self::Example], threads: usize)
        -> Result<Evaluation>;
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub optimizer: OptimizerConfig,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Stops once this many optimizer steps have run.
    pub max_steps: Option<usize>,
    pub early_stop: EarlyStopConfig,
    /// Stops as soon as the monitored value reaches this level.
    pub target: Option<f64>,
    pub clip_norm: f64,
    pub freeze: FreezeSpec,
    pub seed: u64,
    pub threads: usize,
    /// Reloads the best epoch's parameters when training ends.
    pub restore_best: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            optimizer: OptimizerConfig::default(),
            batch_size: 16,
            max_epochs: 50,
            max_steps: None,
            early_stop: EarlyStopConfig::new(3, Monitor::ValLoss),
            target: None,
            clip_norm: 1.0,
            freeze: FreezeSpec::default(),
            seed: 0,
            threads: 1,
            restore_best: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogEntry {
    pub epoch: usize,
    pub step: usize,
    pub train_loss: f64,
    pub val_metric: f64,
    pub stopped: bool,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingLog {
    pub entries: Vec<LogEntry>,
}

impl TrainingLog {
    pub fn to_jsonl(&self) -> String {
        self.entries
            .iter()
            .map(|e| serde_json::to_string(e).expect("plain record") + "\n")
            .collect()
    }

    pub fn write_jsonl(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(self.to_jsonl().as_bytes())?;
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FitResult {
    pub log: TrainingLog,
    pub best_epoch: usize,
    pub best_value: f64,
    pub steps: usize,
    pub stopped_early: bool,
}

/// Applies `f` to every item on up to `threads` scoped workers and returns
/// the results in input order.
pub fn map_ordered<T, R, F>(items: &[T], threads: usize, f: F) -> Result<Vec<R>>
where
    T: Sync,
    R: Send,
    F: Fn(usize, &T) -> Result<R> + Sync,
{
    let threads = threads.max(1).min(items.len().max(1));
    if threads == 1 {
        return items.iter().enumerate().map(|(i, x)| f(i, x)).collect();
    }
    let chunk = items.len().div_ceil(threads);
    let f = &f;
    std::thread::scope(|s| {
        let handles: Vec<_> = items
            .chunks(chunk)
            .enumerate()
            .map(|(c, part)| {
                s.spawn(move || {
                    part.iter()
                        .enumerate()
                        .map(|(i, x)| f(c * chunk + i, x))
                        .collect::<Result<Vec<R>>>()
                })
            })
            .collect();
        let mut out = Vec::with_capacity(items.len());
        for h in handles {
            out.extend(h.join().expect("worker panicked")?);
        }
        Ok(out)
    })
}

/// Seed for the dropout stream of one example at one step, independent of
/// how work is spread over threads.
fn example_seed(seed: u64, step: usize, index: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ (step as u64).wrapping_mul(0xBF58_476D_1CE4_E5B9)
        ^ (index as u64).wrapping_mul(0x94D0_49BB_1331_11EB)
}

/// Mean loss and gradients of a minibatch, reduced in example order.
pub fn batch_gradients<M: Trainable>(
    model: &M,
    store: &ParamStore,
    batch: &[&M::Example],
    seed: u64,
    step: usize,
    threads: usize,
) -> Result<(f64, Vec<Gradients>)> {
    let results = map_ordered(batch, threads, |i, ex| {
        let tape = Tape::with_params(store);
        let mut rng = StdRng::seed_from_u64(example_seed(seed, step, i));
        let loss = model.loss(&tape, ex, &mut rng)?;
        Ok((tape.item(loss)?, tape.backward(loss)?))
    })?;
    let mut total = 0.0;
    let mut grads = Vec::with_capacity(results.len());
    for (l, g) in results {
        total += l;
        grads.push(g);
    }
    Ok((total / batch.len() as f64, grads))
}

/// One optimizer step on a minibatch; returns the mean loss before the step.
pub fn train_step<M: Trainable>(
    model: &M,
    store: &mut ParamStore,
    optimizer: &mut Optimizer,
    batch: &[&M::Example],
    cfg: &TrainConfig,
    step: usize,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::Config("empty minibatch".into()));
    }
    let (loss, grads) = batch_gradients(model, store, batch, cfg.seed, step, cfg.threads)?;
    store.zero_grad();
    let scale = 1.0 / batch.len() as f64;
    for g in &grads {
        store.accumulate(g, scale)?;
    }
    if cfg.clip_norm > 0.0 {
        store.clip_grad_norm(cfg.clip_norm);
    }
    optimizer.step(store)?;
    Ok(loss)
}

/// Epoch loop with per-epoch validation, early stopping and best-epoch restore.
pub fn fit<M: Trainable>(
    model: &M,
    store: &mut ParamStore,
    train: &[M::Example],
    val: &[M::Example],
    cfg: &TrainConfig,
) -> Result<FitResult> {
    if train.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    if val.is_empty() {
        return Err(Error::Config("validation set is empty".into()));
    }
    if cfg.batch_size == 0 || cfg.max_epochs == 0 {
        return Err(Error::Config("batch_size and max_epochs must be positive".into()));
    }
    apply_freeze(store, &cfg.freeze)?;
    let mut optimizer = Optimizer::new(cfg.optimizer.clone())?;
    let mut stopper = EarlyStopping::new(cfg.early_stop.clone())?;
    let mut rng = StdRng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut log = TrainingLog::default();
    let mut best_snapshot = None;
    let mut step = 0;
    let mut stopped_early = false;
    let reached = |v: f64| match (cfg.target, cfg.early_stop.mode) {
        (Some(t), Mode::Max) => v >= t,
        (Some(t), Mode::Min) => v <= t,
        (None, _) => false,
    };

    for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(cfg.batch_size) {
            if cfg.max_steps.is_some_and(|m| step >= m) {
                break;
            }
            let batch: Vec<&M::Example> = chunk.iter().map(|&i| &train[i]).collect();
            loss_sum += train_step(model, store, &mut optimizer, &batch, cfg, step).map_err(|e| match e {
                Error::NonFinite(m) => Error::NonFinite(format!("{m} (last good step {step})")),
                e => e,
            })?;
            batches += 1;
            step += 1;
        }
        let value = model.evaluate(store, val, cfg.threads)?.get(cfg.early_stop.metric)?;
        if stopper.observe(value) {
            best_snapshot = Some(store.snapshot());
        }
        let out_of_steps = cfg.max_steps.is_some_and(|m| step >= m);
        let stop = stopper.should_stop() || reached(value);
        stopped_early |= stop;
        log.entries.push(LogEntry {
            epoch,
            step,
            train_loss: if batches > 0 { loss_sum / batches as f64 } else { f64::NAN },
            val_metric: value,
            stopped: stop || out_of_steps || epoch == cfg.max_epochs,
        });
        log::info!("epoch {epoch} step {step} val {value:.5}");
        if stop || out_of_steps {
            break;
        }
    }
    if cfg.restore_best {
        if let Some(s) = &best_snapshot {
            store.restore(s)?;
        }
    }
    Ok(FitResult {
        log,
        best_epoch: stopper.best_epoch(),
        best_value: stopper.best().unwrap_or(f64::NAN),
        steps: step,
        stopped_early,
    })
}

/// Index sets of a shuffled train/validation/test partition.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

/// Deterministic shuffled partition of `n` items. Validation and test sizes
/// are rounded from their ratios; training takes the rest.
pub fn split_dataset(n: usize, ratios: (f64, f64, f64), seed: u64) -> Result<Split> {
    let (a, b, c) = ratios;
    if n < 3 {
        return Err(Error::Config(format!("cannot split {n} items three ways")));
    }
    if !(a > 0.0 && b > 0.0 && c > 0.0) || ((a + b + c) - 1.0).abs() > 1e-6 {
        return Err(Error::Config(format!(
            "split ratios {ratios:?} must be positive and sum to 1"
        )));
    }
    let n_val = ((b * n as f64).round() as usize).max(1);
    let n_test = ((c * n as f64).round() as usize).max(1);
    if n_val + n_test >= n {
        return Err(Error::Config(format!("split ratios {ratios:?} leave no training items")));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut StdRng::seed_from_u64(seed));
    let test = idx.split_off(n - n_test);
    let val = idx.split_off(idx.len() - n_val);
    Ok(Split {
        train: idx,
        val,
        test,
    })
}

/// Threads requested through `FUSEREADER_THREADS`, defaulting to 1.
pub fn threads_from_env() -> usize {
    std::env::var("FUSEREADER_THREADS")
        .ok()
        .and_then(|s| s.trim().parse().ok())
        .filter(|&t: &usize| t > 0)
        .unwrap_or(1)
}
