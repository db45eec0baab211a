//! Optimizers, regularization and the training loop.

use std::collections::HashSet;
use std::fmt;
use std::str::FromStr;

use log::{debug, info};

use crate::classifier::DEFAULT_BETA;
use crate::data::{query_ids, PairInstance};
use crate::error::{Error, Result};
use crate::eval::evaluate;
use crate::model::ModelParams;
use crate::numerics::{check_same_layout, ParamSet, Rng, Vector};

pub const ADAGRAD_EPS: f64 = 1e-8;
pub const ADADELTA_EPS: f64 = 1e-6;
pub const ADADELTA_RHO: f64 = 0.95;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum OptimizerKind {
    Sgd,
    #[default]
    Adagrad,
    Adadelta,
}

impl fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            OptimizerKind::Sgd => "sgd",
            OptimizerKind::Adagrad => "adagrad",
            OptimizerKind::Adadelta => "adadelta",
        })
    }
}

impl FromStr for OptimizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "sgd" => Ok(OptimizerKind::Sgd),
            "adagrad" => Ok(OptimizerKind::Adagrad),
            "adadelta" => Ok(OptimizerKind::Adadelta),
            other => Err(Error::InvalidArgument(format!("unknown optimizer {other:?}"))),
        }
    }
}

/// Training protocol. Architecture sizes live in [`crate::model::ModelConfig`].
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub optimizer: OptimizerKind,
    pub learning_rate: f64,
    pub dropout_rate: f64,
    pub l2: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub embeddings_trainable: bool,
    /// Head weights for multitask models (aux qq, main, aux cc).
    pub beta: [f64; 3],
    /// Share of training queries held out for model selection.
    pub dev_fraction: f64,
    /// Stop after this many epochs without a dev-MAP improvement.
    pub patience: Option<usize>,
    /// Stop as soon as dev MAP reaches this value.
    pub target_dev_map: Option<f64>,
    /// Relevant-class probability at or above which a pair counts as relevant.
    pub threshold: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            optimizer: OptimizerKind::Adagrad,
            learning_rate: 0.01,
            dropout_rate: 0.4,
            l2: 1e-4,
            epochs: 20,
            batch_size: 32,
            seed: 1,
            embeddings_trainable: true,
            beta: DEFAULT_BETA,
            dev_fraction: 0.1,
            patience: None,
            target_dev_map: None,
            threshold: 0.5,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::InvalidArgument(format!("bad value {value:?} for {key}")))
}

fn parse_optional<T: FromStr>(key: &str, value: &str) -> Result<Option<T>> {
    match value.trim() {
        "none" | "-" | "" => Ok(None),
        v => parse(key, v).map(Some),
    }
}

fn show_optional<T: ToString>(v: &Option<T>) -> String {
    v.as_ref().map_or_else(|| "none".to_string(), T::to_string)
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(m.to_string()));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return bad("dropout_rate must be in [0, 1)");
        }
        if !(self.l2 >= 0.0 && self.l2.is_finite()) {
            return bad("l2 must be nonnegative");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if self.beta.iter().any(|b| !(*b >= 0.0 && b.is_finite())) {
            return bad("beta entries must be nonnegative");
        }
        if !(0.0..1.0).contains(&self.dev_fraction) {
            return bad("dev_fraction must be in [0, 1)");
        }
        if !(0.0..=1.0).contains(&self.threshold) {
            return bad("threshold must be in [0, 1]");
        }
        Ok(())
    }

    pub fn to_pairs(&self) -> Vec<(&'static str, String)> {
        vec![
            ("optimizer", self.optimizer.to_string()),
            ("learning_rate", self.learning_rate.to_string()),
            ("dropout_rate", self.dropout_rate.to_string()),
            ("l2", self.l2.to_string()),
            ("epochs", self.epochs.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("seed", self.seed.to_string()),
            ("embeddings_trainable", self.embeddings_trainable.to_string()),
            ("beta", self.beta.iter().map(f64::to_string).collect::<Vec<_>>().join(",")),
            ("dev_fraction", self.dev_fraction.to_string()),
            ("patience", show_optional(&self.patience)),
            ("target_dev_map", show_optional(&self.target_dev_map)),
            ("threshold", self.threshold.to_string()),
        ]
    }

    /// Sets one field from its textual form. Returns `false` for keys that
    /// are not training settings.
    pub fn apply(&mut self, key: &str, value: &str) -> Result<bool> {
        match key {
            "optimizer" => self.optimizer = value.trim().parse()?,
            "learning_rate" => self.learning_rate = parse(key, value)?,
            "dropout_rate" => self.dropout_rate = parse(key, value)?,
            "l2" => self.l2 = parse(key, value)?,
            "epochs" => self.epochs = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "embeddings_trainable" => self.embeddings_trainable = parse(key, value)?,
            "beta" => {
                let parts: Vec<f64> = value.split(',').map(|v| parse(key, v)).collect::<Result<_>>()?;
                self.beta = parts
                    .try_into()
                    .map_err(|_| Error::InvalidArgument(format!("beta needs three values, got {value:?}")))?;
            }
            "dev_fraction" => self.dev_fraction = parse(key, value)?,
            "patience" => self.patience = parse_optional(key, value)?,
            "target_dev_map" => self.target_dev_map = parse_optional(key, value)?,
            "threshold" => self.threshold = parse(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }
}

fn zipped_check<P: ParamSet + ?Sized>(params: &P, grads: &P) -> Result<()> {
    check_same_layout(params, grads)
}

/// `p ← p − lr·g`.
pub fn sgd_step<P: ParamSet + ?Sized>(params: &mut P, grads: &P, lr: f64) -> Result<()> {
    if lr.is_nan() || lr <= 0.0 {
        return Err(Error::InvalidArgument(format!("learning rate must be positive, got {lr}")));
    }
    zipped_check(params, grads)?;
    for ((_, p), (_, g)) in params.tensors_mut().into_iter().zip(grads.tensors()) {
        p.iter_mut().zip(g).for_each(|(p, g)| *p -= lr * g);
    }
    Ok(())
}

/// Per-entry accumulators laid out like the parameters they track.
#[derive(Debug, Clone, PartialEq)]
pub struct Accumulator(pub Vec<Vec<f64>>);

impl Accumulator {
    pub fn zeros_like<P: ParamSet + ?Sized>(params: &P) -> Self {
        Accumulator(params.tensors().into_iter().map(|(_, t)| vec![0.0; t.len()]).collect())
    }

    fn check<P: ParamSet + ?Sized>(&self, params: &P) -> Result<()> {
        let tensors = params.tensors();
        if tensors.len() != self.0.len() {
            return Err(Error::shape("optimizer state", tensors.len(), self.0.len()));
        }
        for ((name, t), a) in tensors.iter().zip(&self.0) {
            if t.len() != a.len() {
                return Err(Error::shape(format!("optimizer state for {name}"), t.len(), a.len()));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdagradState {
    pub sum_sq: Accumulator,
}

impl AdagradState {
    pub fn new<P: ParamSet + ?Sized>(params: &P) -> Self {
        AdagradState {
            sum_sq: Accumulator::zeros_like(params),
        }
    }
}

/// `a ← a + g²; p ← p − lr·g/(√a + eps)`.
pub fn adagrad_step<P: ParamSet + ?Sized>(
    params: &mut P,
    grads: &P,
    state: &mut AdagradState,
    lr: f64,
    eps: f64,
) -> Result<()> {
    if lr.is_nan() || lr <= 0.0 {
        return Err(Error::InvalidArgument(format!("learning rate must be positive, got {lr}")));
    }
    zipped_check(params, grads)?;
    state.sum_sq.check(params)?;
    for (((_, p), (_, g)), a) in params.tensors_mut().into_iter().zip(grads.tensors()).zip(&mut state.sum_sq.0) {
        for ((p, g), a) in p.iter_mut().zip(g).zip(a.iter_mut()) {
            *a += g * g;
            *p -= lr * g / (a.sqrt() + eps);
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdadeltaState {
    pub avg_sq_grad: Accumulator,
    pub avg_sq_update: Accumulator,
}

impl AdadeltaState {
    pub fn new<P: ParamSet + ?Sized>(params: &P) -> Self {
        AdadeltaState {
            avg_sq_grad: Accumulator::zeros_like(params),
            avg_sq_update: Accumulator::zeros_like(params),
        }
    }
}

pub fn adadelta_step<P: ParamSet + ?Sized>(
    params: &mut P,
    grads: &P,
    state: &mut AdadeltaState,
    rho: f64,
    eps: f64,
) -> Result<()> {
    if !(rho > 0.0 && rho < 1.0) {
        return Err(Error::InvalidArgument(format!("rho must be in (0, 1), got {rho}")));
    }
    zipped_check(params, grads)?;
    state.avg_sq_grad.check(params)?;
    state.avg_sq_update.check(params)?;
    let tensors = params.tensors_mut().into_iter().zip(grads.tensors());
    let accs = state.avg_sq_grad.0.iter_mut().zip(state.avg_sq_update.0.iter_mut());
    for (((_, p), (_, g)), (eg, ed)) in tensors.zip(accs) {
        for (((p, g), eg), ed) in p.iter_mut().zip(g).zip(eg.iter_mut()).zip(ed.iter_mut()) {
            *eg = rho * *eg + (1.0 - rho) * g * g;
            let delta = -((*ed + eps).sqrt() / (*eg + eps).sqrt()) * g;
            *ed = rho * *ed + (1.0 - rho) * delta * delta;
            *p += delta;
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub enum OptimizerState {
    Sgd,
    Adagrad(AdagradState),
    Adadelta(AdadeltaState),
}

/// An optimizer bound to one parameter layout.
#[derive(Debug, Clone, PartialEq)]
pub struct Optimizer {
    pub learning_rate: f64,
    pub state: OptimizerState,
}

impl Optimizer {
    pub fn new<P: ParamSet + ?Sized>(kind: OptimizerKind, learning_rate: f64, params: &P) -> Self {
        let state = match kind {
            OptimizerKind::Sgd => OptimizerState::Sgd,
            OptimizerKind::Adagrad => OptimizerState::Adagrad(AdagradState::new(params)),
            OptimizerKind::Adadelta => OptimizerState::Adadelta(AdadeltaState::new(params)),
        };
        Optimizer { learning_rate, state }
    }

    /// AdaDelta has no learning rate; the setting is ignored for it.
    pub fn step<P: ParamSet + ?Sized>(&mut self, params: &mut P, grads: &P) -> Result<()> {
        match &mut self.state {
            OptimizerState::Sgd => sgd_step(params, grads, self.learning_rate),
            OptimizerState::Adagrad(s) => adagrad_step(params, grads, s, self.learning_rate, ADAGRAD_EPS),
            OptimizerState::Adadelta(s) => adadelta_step(params, grads, s, ADADELTA_RHO, ADADELTA_EPS),
        }
    }
}

/// Inverted-dropout mask: each entry is 0 with probability `rate`, else
/// `1/(1−rate)`. Rate 0 draws nothing and returns all ones.
pub fn dropout_mask(len: usize, rate: f64, rng: &mut Rng) -> Vec<f64> {
    if rate <= 0.0 {
        return vec![1.0; len];
    }
    let keep = 1.0 / (1.0 - rate);
    (0..len).map(|_| if rng.bernoulli(rate) { 0.0 } else { keep }).collect()
}

pub fn apply_dropout(v: &[f64], rate: f64, rng: &mut Rng, training: bool) -> Vector {
    if !training || rate <= 0.0 {
        return Vector::from(v);
    }
    let mask = dropout_mask(v.len(), rate, rng);
    v.iter().zip(&mask).map(|(x, m)| x * m).collect::<Vec<_>>().into()
}

fn regularized(name: &str) -> bool {
    name != "embedding"
}

/// `λ·Σp²` over every tensor except the embedding table. With `grads`,
/// adds `2λp` to the matching gradient entries.
pub fn l2_penalty<P: ParamSet + ?Sized>(params: &P, lambda: f64, grads: Option<&mut P>) -> f64 {
    if lambda == 0.0 {
        return 0.0;
    }
    let tensors = params.tensors();
    let penalty: f64 = tensors
        .iter()
        .filter(|(n, _)| regularized(n))
        .map(|(_, t)| t.iter().map(|x| x * x).sum::<f64>())
        .sum::<f64>()
        * lambda;
    if let Some(grads) = grads {
        for ((name, p), (_, g)) in tensors.iter().zip(grads.tensors_mut()) {
            if regularized(name) {
                g.iter_mut().zip(p.iter()).for_each(|(g, p)| *g += 2.0 * lambda * p);
            }
        }
    }
    penalty
}

/// Loss weights per classifier head.
pub fn head_weights(params: &ModelParams, beta: [f64; 3]) -> Vec<f64> {
    if params.head_count() == 3 {
        beta.to_vec()
    } else {
        vec![1.0; params.head_count()]
    }
}

/// Mean loss over `batch` plus the L2 penalty, with its gradient written to
/// `grads` (which is zeroed first).
pub fn batch_gradient(
    params: &ModelParams,
    batch: &[&PairInstance],
    config: &TrainConfig,
    rng: &mut Rng,
    grads: &mut ModelParams,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    grads.fill_zero();
    let weights = head_weights(params, config.beta);
    let mut loss = 0.0;
    for inst in batch {
        loss += params.loss_and_gradient(inst, &weights, Some((config.dropout_rate, &mut *rng)), grads)?;
    }
    let scale = 1.0 / batch.len() as f64;
    for (_, g) in grads.tensors_mut() {
        g.iter_mut().for_each(|x| *x *= scale);
    }
    loss = loss * scale + l2_penalty(params, config.l2, Some(grads));
    if !config.embeddings_trainable {
        grads.embedding.fill(0.0);
    }
    Ok(loss)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean batch objective (cross-entropy plus L2).
    pub train_loss: f64,
    pub dev_map: Option<f64>,
    pub dev_f1: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: ModelParams,
    pub log: Vec<EpochRecord>,
    /// Epoch whose parameters were returned; 0 means the initialization.
    pub best_epoch: usize,
}

/// Splits instances by query into (train, dev), holding out
/// `round(fraction · queries)` queries chosen by a seeded shuffle.
pub fn split_dev(instances: &[PairInstance], fraction: f64, seed: u64) -> (Vec<PairInstance>, Vec<PairInstance>) {
    let mut ids = query_ids(instances);
    let n_dev = ((ids.len() as f64) * fraction).round() as usize;
    let n_dev = n_dev.min(ids.len().saturating_sub(1));
    Rng::new(seed).shuffle(&mut ids);
    let dev: HashSet<&str> = ids[..n_dev].iter().map(String::as_str).collect();
    instances
        .iter()
        .cloned()
        .partition(|i| !dev.contains(i.query_id.as_str()))
}

/// Trains on `instances`, holding out a dev split per `config.dev_fraction`.
pub fn train(params: ModelParams, instances: &[PairInstance], config: &TrainConfig) -> Result<TrainOutcome> {
    let (train_set, dev_set) = split_dev(instances, config.dev_fraction, config.seed);
    train_with_dev(params, &train_set, &dev_set, config)
}

/// Trains on `train_set`, selecting the epoch with the best MAP on `dev_set`.
/// Without a usable dev set the last epoch is kept.
pub fn train_with_dev(
    mut params: ModelParams,
    train_set: &[PairInstance],
    dev_set: &[PairInstance],
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    config.validate()?;
    if train_set.is_empty() {
        return Err(Error::InvalidArgument("training set is empty".into()));
    }
    let mut rng = Rng::new(config.seed);
    let mut optimizer = Optimizer::new(config.optimizer, config.learning_rate, &params);
    let mut grads = params.zeros_like();
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut log = Vec::new();
    let mut best: Option<(f64, usize, ModelParams)> = None;

    for epoch in 1..=config.epochs {
        rng.shuffle(&mut order);
        let mut total = 0.0;
        let mut batches = 0;
        for (b, chunk) in order.chunks(config.batch_size).enumerate() {
            let batch: Vec<&PairInstance> = chunk.iter().map(|&i| &train_set[i]).collect();
            let loss = batch_gradient(&params, &batch, config, &mut rng, &mut grads)?;
            if !loss.is_finite() || !grads.all_finite() {
                return Err(Error::Divergence {
                    epoch,
                    batch: b + 1,
                    loss,
                });
            }
            optimizer.step(&mut params, &grads)?;
            total += loss;
            batches += 1;
        }
        let train_loss = total / batches as f64;

        let dev = if dev_set.is_empty() {
            None
        } else {
            match evaluate(&params, dev_set, config.threshold) {
                Ok(m) => Some(m),
                Err(Error::NoRelevant) => None,
                Err(e) => return Err(e),
            }
        };
        let record = EpochRecord {
            epoch,
            train_loss,
            dev_map: dev.as_ref().map(|m| m.map),
            dev_f1: dev.as_ref().map(|m| m.f1),
        };
        info!(
            "epoch {epoch}: loss {train_loss:.6} dev MAP {} dev F1 {}",
            show_optional(&record.dev_map),
            show_optional(&record.dev_f1)
        );
        log.push(record);

        let score = dev.as_ref().map_or(f64::NEG_INFINITY, |m| m.map);
        let improved = best.as_ref().is_none_or(|(s, _, _)| score > *s || dev.is_none());
        if improved {
            best = Some((score, epoch, params.clone()));
        }
        if let (Some(target), Some(m)) = (config.target_dev_map, &dev) {
            if m.map >= target {
                debug!("dev MAP {} reached target {target} at epoch {epoch}", m.map);
                break;
            }
        }
        if let (Some(patience), Some((_, best_epoch, _))) = (config.patience, &best) {
            if epoch - best_epoch >= patience {
                debug!("no dev improvement for {patience} epochs, stopping at {epoch}");
                break;
            }
        }
    }

    Ok(match best {
        Some((_, best_epoch, best_params)) => TrainOutcome {
            params: best_params,
            log,
            best_epoch,
        },
        None => TrainOutcome {
            params,
            log,
            best_epoch: 0,
        },
    })
}
