//! Nesterov SGD, early stopping on validation AUC, and random search.

use std::fmt::Write as _;

use rand::seq::{IndexedRandom, SliceRandom};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::expert::{ExpertHyperparams, ExpertModel};
use crate::moe::{MoEFeatures, MoEModel};
use crate::seqdata::{seeded_rng, LabeledDataset, OneHotSequence};
use crate::stats;

pub const DEFAULT_LEARNING_RATE: f64 = 0.01;
pub const DEFAULT_MOMENTUM: f64 = 0.98;
pub const DEFAULT_MAX_EPOCHS: usize = 500;
pub const EXPERT_PATIENCE: usize = 5;
pub const MOE_PATIENCE: usize = 10;
pub const DEFAULT_BATCH_SIZE: usize = 32;
pub const DEFAULT_SEARCH_BUDGET: usize = 20;
/// Minimum AUC gain that resets the patience counter.
pub const IMPROVEMENT_THRESHOLD: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub max_epochs: usize,
    pub patience: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl TrainConfig {
    pub fn expert_defaults(seed: u64) -> Self {
        Self {
            learning_rate: DEFAULT_LEARNING_RATE,
            momentum: DEFAULT_MOMENTUM,
            max_epochs: DEFAULT_MAX_EPOCHS,
            patience: EXPERT_PATIENCE,
            batch_size: DEFAULT_BATCH_SIZE,
            seed,
        }
    }

    pub fn moe_defaults(seed: u64) -> Self {
        Self {
            patience: MOE_PATIENCE,
            ..Self::expert_defaults(seed)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning rate {} must be positive",
                self.learning_rate
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!(
                "momentum {} outside [0, 1)",
                self.momentum
            )));
        }
        if self.patience == 0 {
            return Err(Error::Config("patience must be at least 1".into()));
        }
        if self.max_epochs == 0 {
            return Err(Error::Config("max_epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        Ok(())
    }
}

/// Anything exposing its trainable parameters as flat buffers.
pub trait Trainable: Clone {
    fn trainable(&self) -> Vec<&[f64]>;
    fn trainable_mut(&mut self) -> Vec<&mut [f64]>;
}

impl Trainable for ExpertModel {
    fn trainable(&self) -> Vec<&[f64]> {
        if self.is_frozen() {
            Vec::new()
        } else {
            self.parameters()
        }
    }

    fn trainable_mut(&mut self) -> Vec<&mut [f64]> {
        if self.is_frozen() {
            Vec::new()
        } else {
            self.parameters_mut()
        }
    }
}

impl Trainable for MoEModel {
    fn trainable(&self) -> Vec<&[f64]> {
        self.trainable_parameters()
    }

    fn trainable_mut(&mut self) -> Vec<&mut [f64]> {
        self.trainable_parameters_mut()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub velocity: Vec<Vec<f64>>,
}

impl OptimizerState {
    pub fn zeros<M: Trainable>(model: &M) -> Self {
        Self {
            velocity: model
                .trainable()
                .iter()
                .map(|p| vec![0.0; p.len()])
                .collect(),
        }
    }
}

/// One Nesterov step: the gradient is taken at `theta - mu * v`, then
/// `v <- mu * v + lr * grad` and `theta <- theta - v`. Returns the loss
/// reported by `grad_fn` at the look-ahead point.
pub fn nesterov_sgd_step<M, F>(
    model: &mut M,
    state: &mut OptimizerState,
    learning_rate: f64,
    momentum: f64,
    mut grad_fn: F,
) -> Result<f64>
where
    M: Trainable,
    F: FnMut(&M) -> Result<(f64, Vec<Vec<f64>>)>,
{
    let mut lookahead = model.clone();
    for (p, v) in lookahead.trainable_mut().into_iter().zip(&state.velocity) {
        for (pi, vi) in p.iter_mut().zip(v) {
            *pi -= momentum * vi;
        }
    }
    let (loss, grads) = grad_fn(&lookahead)?;
    if grads.len() != state.velocity.len()
        || grads
            .iter()
            .zip(&state.velocity)
            .any(|(g, v)| g.len() != v.len())
    {
        return Err(Error::Dimension(
            "gradient buffers do not match the trainable parameters".into(),
        ));
    }
    if !loss.is_finite() {
        return Err(Error::NonFinite(format!("training loss is {loss}")));
    }
    if let Some((i, _)) = grads
        .iter()
        .enumerate()
        .find(|(_, g)| g.iter().any(|v| !v.is_finite()))
    {
        return Err(Error::NonFinite(format!(
            "gradient of parameter buffer {i} is not finite"
        )));
    }
    for ((p, v), g) in model
        .trainable_mut()
        .into_iter()
        .zip(state.velocity.iter_mut())
        .zip(&grads)
    {
        for ((pi, vi), gi) in p.iter_mut().zip(v.iter_mut()).zip(g) {
            *vi = momentum * *vi + learning_rate * gi;
            *pi -= *vi;
        }
    }
    Ok(loss)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    Patience,
    MaxEpochs,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_auc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_auc: f64,
    pub stop_reason: StopReason,
}

impl TrainHistory {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,train_loss,val_auc,is_best\n");
        for r in &self.epochs {
            let _ = writeln!(
                out,
                "{},{},{},{}",
                r.epoch,
                r.train_loss,
                r.val_auc,
                u8::from(r.epoch == self.best_epoch)
            );
        }
        out
    }
}

/// Mini-batch training loop with early stopping.
///
/// `batch_grad` receives the look-ahead model and the example indices of
/// one batch; `validate` returns the validation AUC of a model.
pub fn fit<M, G, V>(
    mut model: M,
    n_train: usize,
    config: &TrainConfig,
    mut batch_grad: G,
    mut validate: V,
) -> Result<(M, TrainHistory)>
where
    M: Trainable,
    G: FnMut(&M, &[usize]) -> Result<(f64, Vec<Vec<f64>>)>,
    V: FnMut(&M) -> Result<f64>,
{
    config.validate()?;
    if n_train == 0 {
        return Err(Error::Dataset("training set is empty".into()));
    }
    let mut state = OptimizerState::zeros(&model);
    let mut rng = seeded_rng(config.seed.wrapping_add(1));
    let mut order: Vec<usize> = (0..n_train).collect();
    let mut epochs = Vec::new();
    let mut best: Option<(usize, f64, M)> = None;
    let mut stale = 0;
    let mut stop_reason = StopReason::MaxEpochs;

    for epoch in 1..=config.max_epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for batch in order.chunks(config.batch_size) {
            let loss = nesterov_sgd_step(
                &mut model,
                &mut state,
                config.learning_rate,
                config.momentum,
                |m| batch_grad(m, batch),
            )
            .map_err(|e| match e {
                Error::NonFinite(msg) => Error::NonFinite(format!("epoch {epoch}: {msg}")),
                other => other,
            })?;
            loss_sum += loss * batch.len() as f64;
        }
        let val_auc = validate(&model)?;
        epochs.push(EpochRecord {
            epoch,
            train_loss: loss_sum / n_train as f64,
            val_auc,
        });
        let improved = match &best {
            None => true,
            Some((_, b, _)) => val_auc > b + IMPROVEMENT_THRESHOLD,
        };
        if improved {
            best = Some((epoch, val_auc, model.clone()));
            stale = 0;
        } else {
            stale += 1;
            if stale >= config.patience {
                stop_reason = StopReason::Patience;
                break;
            }
        }
    }
    let (best_epoch, best_val_auc, best_model) = best.expect("at least one epoch ran");
    Ok((
        best_model,
        TrainHistory {
            epochs,
            best_epoch,
            best_val_auc,
            stop_reason,
        },
    ))
}

fn check_splits(train: &LabeledDataset, val: &LabeledDataset) -> Result<()> {
    if train.is_empty() {
        return Err(Error::Dataset("training set is empty".into()));
    }
    if !val.has_both_classes() {
        return Err(Error::Dataset(
            "validation set needs both positive and negative examples".into(),
        ));
    }
    Ok(())
}

fn expert_val_auc(model: &ExpertModel, val: &LabeledDataset) -> Result<f64> {
    let scores = val
        .sequences()
        .iter()
        .map(|s| model.logit(s.view()))
        .collect::<Result<Vec<_>>>()?;
    stats::auc(&scores, val.labels())
}

/// Trains one expert from a Glorot initialisation seeded by `config.seed`.
///
/// The learning rate and momentum come from `hp`, the remaining loop
/// settings from `config`.
pub fn train_expert(
    train: &LabeledDataset,
    val: &LabeledDataset,
    hp: &ExpertHyperparams,
    config: &TrainConfig,
    name: &str,
) -> Result<(ExpertModel, TrainHistory)> {
    hp.validate()?;
    check_splits(train, val)?;
    let config = TrainConfig {
        learning_rate: hp.learning_rate,
        momentum: hp.momentum,
        ..config.clone()
    };
    let model = ExpertModel::init(name, hp, config.seed)?;
    let seqs = train.sequences();
    let labels = train.labels();
    fit(
        model,
        train.len(),
        &config,
        |m, batch| {
            let xs: Vec<&OneHotSequence> = batch.iter().map(|&i| &seqs[i]).collect();
            let ys: Vec<u8> = batch.iter().map(|&i| labels[i]).collect();
            m.loss_and_gradient(&xs, &ys)
        },
        |m| expert_val_auc(m, val),
    )
}

/// Frozen-expert features of the training and validation splits.
pub struct MoEData<'a> {
    train: MoEFeatures,
    train_labels: &'a [u8],
    val: MoEFeatures,
    val_labels: &'a [u8],
}

impl<'a> MoEData<'a> {
    /// Runs every expert once over both splits.
    pub fn extract(
        experts: &[ExpertModel],
        train: &'a LabeledDataset,
        val: &'a LabeledDataset,
    ) -> Result<Self> {
        if experts.len() < 2 {
            return Err(Error::Model(format!(
                "a mixture needs at least 2 experts, got {}",
                experts.len()
            )));
        }
        check_splits(train, val)?;
        // any seed works here: only the frozen experts are used
        let probe = MoEModel::init("probe", experts.to_vec(), 0)?;
        Ok(Self {
            train: probe.extract_features(train.sequences())?,
            train_labels: train.labels(),
            val: probe.extract_features(val.sequences())?,
            val_labels: val.labels(),
        })
    }
}

/// Trains the gate and classifier over frozen, stripped experts using
/// precomputed features. The gate and classifier are initialised from
/// `config.seed`.
pub fn train_moe_on_features(
    experts: Vec<ExpertModel>,
    data: &MoEData<'_>,
    config: &TrainConfig,
    name: &str,
) -> Result<(MoEModel, TrainHistory)> {
    let model = MoEModel::init(name, experts, config.seed)?;
    fit(
        model,
        data.train.len(),
        config,
        |m, batch| {
            let f = data.train.select(batch);
            let ys: Vec<u8> = batch.iter().map(|&i| data.train_labels[i]).collect();
            m.head_loss_and_gradient(&f, &ys)
        },
        |m| {
            let out = m.forward_features(&data.val)?;
            stats::auc(out.logit.as_slice().expect("contiguous"), data.val_labels)
        },
    )
}

/// Trains the gate and classifier over frozen, stripped experts.
///
/// Expert features are computed once per split and reused every epoch.
pub fn train_moe(
    experts: Vec<ExpertModel>,
    train: &LabeledDataset,
    val: &LabeledDataset,
    config: &TrainConfig,
    name: &str,
) -> Result<(MoEModel, TrainHistory)> {
    let data = MoEData::extract(&experts, train, val)?;
    train_moe_on_features(experts, &data, config, name)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchSpace {
    pub num_filters: Vec<usize>,
    pub motif_width: Vec<usize>,
    pub learning_rate: Vec<f64>,
    pub momentum: Vec<f64>,
    pub budget: usize,
}

impl Default for SearchSpace {
    fn default() -> Self {
        Self {
            num_filters: vec![8, 16, 32],
            motif_width: vec![8, 12, 16, 24],
            learning_rate: vec![DEFAULT_LEARNING_RATE],
            momentum: vec![DEFAULT_MOMENTUM],
            budget: DEFAULT_SEARCH_BUDGET,
        }
    }
}

fn check_domains(budget: usize, domains: &[bool]) -> Result<()> {
    if budget == 0 {
        return Err(Error::Config("search budget must be at least 1".into()));
    }
    if domains.iter().any(|&empty| empty) {
        return Err(Error::Config("every search domain must be nonempty".into()));
    }
    Ok(())
}

impl SearchSpace {
    pub fn validate(&self) -> Result<()> {
        check_domains(
            self.budget,
            &[
                self.num_filters.is_empty(),
                self.motif_width.is_empty(),
                self.learning_rate.is_empty(),
                self.momentum.is_empty(),
            ],
        )
    }

    /// Configuration for trial `trial`, drawn from `seed + trial`.
    pub fn sample(&self, base: &ExpertHyperparams, seed: u64, trial: usize) -> ExpertHyperparams {
        let mut rng = seeded_rng(seed.wrapping_add(trial as u64));
        ExpertHyperparams {
            num_filters: *self.num_filters.choose(&mut rng).expect("nonempty"),
            motif_width: *self.motif_width.choose(&mut rng).expect("nonempty"),
            learning_rate: *self.learning_rate.choose(&mut rng).expect("nonempty"),
            momentum: *self.momentum.choose(&mut rng).expect("nonempty"),
            ..base.clone()
        }
    }
}

/// Optimizer settings explored when training a mixture. Every trial also
/// gets its own initialisation seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MoESearchSpace {
    pub learning_rate: Vec<f64>,
    pub momentum: Vec<f64>,
    pub budget: usize,
}

impl Default for MoESearchSpace {
    fn default() -> Self {
        Self {
            learning_rate: vec![0.01, 0.003, 0.001],
            momentum: vec![0.98, 0.9],
            budget: DEFAULT_SEARCH_BUDGET,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimizerSettings {
    pub learning_rate: f64,
    pub momentum: f64,
}

impl MoESearchSpace {
    pub fn validate(&self) -> Result<()> {
        check_domains(
            self.budget,
            &[self.learning_rate.is_empty(), self.momentum.is_empty()],
        )
    }

    pub fn sample(&self, seed: u64, trial: usize) -> OptimizerSettings {
        let mut rng = seeded_rng(seed.wrapping_add(trial as u64));
        OptimizerSettings {
            learning_rate: *self.learning_rate.choose(&mut rng).expect("nonempty"),
            momentum: *self.momentum.choose(&mut rng).expect("nonempty"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord<P> {
    pub trial: usize,
    pub seed: u64,
    pub hyperparams: P,
    pub val_auc: Option<f64>,
    pub best_epoch: Option<usize>,
    pub error: Option<String>,
}

#[derive(Debug, Clone)]
pub struct SearchOutcome<M, P> {
    pub best_trial: usize,
    pub model: M,
    pub history: TrainHistory,
    pub leaderboard: Vec<TrialRecord<P>>,
}

/// Runs `budget` trials (trial `t` with seed `seed + t`) and keeps the one
/// with the highest validation AUC, earliest trial on ties.
fn run_search<M, P, S, T>(
    budget: usize,
    seed: u64,
    jobs: usize,
    sample: S,
    train: T,
) -> Result<SearchOutcome<M, P>>
where
    M: Send,
    P: Clone + Send,
    S: Fn(usize) -> P + Sync,
    T: Fn(&P, u64) -> Result<(M, TrainHistory)> + Sync,
{
    let run = |t: usize| {
        let trial_seed = seed.wrapping_add(t as u64);
        let p = sample(t);
        let outcome = train(&p, trial_seed);
        (t, trial_seed, p, outcome)
    };
    let results: Vec<_> = if jobs > 1 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build()
            .map_err(|e| Error::Config(e.to_string()))?;
        pool.install(|| (0..budget).into_par_iter().map(run).collect())
    } else {
        (0..budget).map(run).collect()
    };

    let mut leaderboard = Vec::with_capacity(results.len());
    let mut best: Option<(usize, M, TrainHistory)> = None;
    for (t, trial_seed, p, outcome) in results {
        match outcome {
            Ok((model, history)) => {
                leaderboard.push(TrialRecord {
                    trial: t,
                    seed: trial_seed,
                    hyperparams: p,
                    val_auc: Some(history.best_val_auc),
                    best_epoch: Some(history.best_epoch),
                    error: None,
                });
                let better = best
                    .as_ref()
                    .is_none_or(|(_, _, h)| history.best_val_auc > h.best_val_auc);
                if better {
                    best = Some((t, model, history));
                }
            }
            Err(e) => leaderboard.push(TrialRecord {
                trial: t,
                seed: trial_seed,
                hyperparams: p,
                val_auc: None,
                best_epoch: None,
                error: Some(e.to_string()),
            }),
        }
    }
    let (best_trial, model, history) =
        best.ok_or_else(|| Error::Model(format!("all {budget} search trials aborted")))?;
    Ok(SearchOutcome {
        best_trial,
        model,
        history,
        leaderboard,
    })
}

/// Seeded random search over expert hyperparameters.
pub fn hyperparameter_search(
    space: &SearchSpace,
    base: &ExpertHyperparams,
    train: &LabeledDataset,
    val: &LabeledDataset,
    config: &TrainConfig,
    name: &str,
    jobs: usize,
) -> Result<SearchOutcome<ExpertModel, ExpertHyperparams>> {
    space.validate()?;
    run_search(
        space.budget,
        config.seed,
        jobs,
        |t| space.sample(base, config.seed, t),
        |hp, seed| {
            let cfg = TrainConfig {
                seed,
                ..config.clone()
            };
            train_expert(train, val, hp, &cfg, name)
        },
    )
}

/// Seeded random search over the mixture's optimizer settings and
/// initialisation.
pub fn moe_search(
    space: &MoESearchSpace,
    experts: &[ExpertModel],
    train: &LabeledDataset,
    val: &LabeledDataset,
    config: &TrainConfig,
    name: &str,
    jobs: usize,
) -> Result<SearchOutcome<MoEModel, OptimizerSettings>> {
    space.validate()?;
    let data = MoEData::extract(experts, train, val)?;
    run_search(
        space.budget,
        config.seed,
        jobs,
        |t| space.sample(config.seed, t),
        |s, seed| {
            let cfg = TrainConfig {
                seed,
                learning_rate: s.learning_rate,
                momentum: s.momentum,
                ..config.clone()
            };
            train_moe_on_features(experts.to_vec(), &data, &cfg, name)
        },
    )
}
