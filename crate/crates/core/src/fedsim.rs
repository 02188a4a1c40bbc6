//! Federated training with per-owner fingerprinted copies.
//!
//! Each round a random subset of owners computes a main-task gradient on its
//! own copy; the average is applied to every copy. When the strategy's
//! schedule fires, the aggregator then runs a watermark step on each copy
//! (trigger memorization toward the owner's codeword plus the white-box
//! regularizer).

use rand::seq::index::sample;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attacks::collude;
use crate::datasets::{LabeledImages, PartitionedData, TriggerSet};
use crate::error::{Error, Result};
use crate::evaluation::{mav, trigger_accuracy};
use crate::nn::{evaluate_accuracy, Architecture, Dropout, Model, TrainStepSpec, WatermarkTerm};
use crate::seeds::{derive_seed, Seeds};
use crate::tardos::CodeBook;
use crate::whitebox::{batch_regularizer, projections, OwnerBasis, ProjectionMatrix};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Strategy {
    #[serde(rename = "NoWM")]
    NoWm,
    #[serde(rename = "VanillaWM")]
    VanillaWm,
    #[serde(rename = "DropoutWM")]
    DropoutWm,
    #[serde(rename = "DropoutLimitedWM")]
    DropoutLimitedWm,
    #[serde(rename = "IndependentWM")]
    IndependentWm,
    #[serde(rename = "IndependentOwnerBaseline")]
    IndependentOwnerBaseline,
    #[serde(rename = "VanillaDifWM")]
    VanillaDifWm,
    #[serde(rename = "DropoutDifWM")]
    DropoutDifWm,
}

impl Strategy {
    pub const ALL: [Strategy; 8] = [
        Strategy::NoWm,
        Strategy::VanillaWm,
        Strategy::DropoutWm,
        Strategy::DropoutLimitedWm,
        Strategy::IndependentWm,
        Strategy::IndependentOwnerBaseline,
        Strategy::VanillaDifWm,
        Strategy::DropoutDifWm,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::NoWm => "NoWM",
            Strategy::VanillaWm => "VanillaWM",
            Strategy::DropoutWm => "DropoutWM",
            Strategy::DropoutLimitedWm => "DropoutLimitedWM",
            Strategy::IndependentWm => "IndependentWM",
            Strategy::IndependentOwnerBaseline => "IndependentOwnerBaseline",
            Strategy::VanillaDifWm => "VanillaDifWM",
            Strategy::DropoutDifWm => "DropoutDifWM",
        }
    }

    pub fn parse(name: &str) -> Result<Self> {
        Strategy::ALL
            .into_iter()
            .find(|s| s.name().eq_ignore_ascii_case(name))
            .ok_or_else(|| Error::invalid("strategy", format!("unknown strategy {name:?}")))
    }

    /// Trained by the federated loop (as opposed to independently).
    pub fn is_federated(self) -> bool {
        !matches!(self, Strategy::IndependentWm | Strategy::IndependentOwnerBaseline)
    }

    pub fn watermarks(self) -> bool {
        !matches!(self, Strategy::NoWm | Strategy::IndependentOwnerBaseline)
    }

    pub fn uses_dropout(self) -> bool {
        matches!(self, Strategy::DropoutWm | Strategy::DropoutLimitedWm | Strategy::DropoutDifWm)
    }

    /// Every owner memorizes the one shared trigger set.
    pub fn shared_triggers(self) -> bool {
        !matches!(self, Strategy::VanillaDifWm | Strategy::DropoutDifWm)
    }
}

impl std::fmt::Display for Strategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FlConfig {
    pub n_owners: usize,
    pub owners_per_round: usize,
    pub local_batch: usize,
    pub learning_rate: f32,
    /// Learning rate of the watermark step; the main-task rate when unset.
    pub wm_learning_rate: Option<f32>,
    pub epochs: usize,
    /// Overrides `epochs * epoch_length` when set.
    pub iterations: Option<usize>,
    pub strategy: Strategy,
    pub dropout_prob: f32,
    pub lambda: f64,
    pub wm_batch: usize,
    /// Watermark steps per copy each time the schedule fires.
    pub wm_steps: usize,
    /// Run the watermark step when the schedule fires.
    pub watermarking: bool,
    /// Also apply dropout to the owners' main-task gradients.
    pub dropout_in_main_task: bool,
    /// Log every `log_every` rounds (and after the last one); 0 disables.
    pub log_every: usize,
    /// Evaluation examples used for logged main accuracy; 0 means all.
    pub eval_subset: usize,
    /// Copies whose accuracies are averaged in the logs.
    pub tracked_copies: usize,
    /// Random two-owner merges measured for the logged MAV; 0 disables.
    pub mav_pairs: usize,
    /// Supplied by the experiment config, which records them once.
    #[serde(skip)]
    pub seeds: Seeds,
}

impl Default for FlConfig {
    fn default() -> Self {
        Self {
            n_owners: 100,
            owners_per_round: 10,
            local_batch: 16,
            learning_rate: 0.001,
            wm_learning_rate: None,
            epochs: 5,
            iterations: None,
            strategy: Strategy::DropoutWm,
            dropout_prob: 0.2,
            lambda: 1.0,
            wm_batch: 16,
            wm_steps: 1,
            watermarking: true,
            dropout_in_main_task: false,
            log_every: 50,
            eval_subset: 2000,
            tracked_copies: 3,
            mav_pairs: 10,
            seeds: Seeds::default(),
        }
    }
}

impl FlConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("n_owners", self.n_owners),
            ("owners_per_round", self.owners_per_round),
            ("local_batch", self.local_batch),
            ("epochs", self.epochs),
            ("wm_batch", self.wm_batch),
            ("wm_steps", self.wm_steps),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::invalid(name, "must be positive"));
            }
        }
        if self.owners_per_round > self.n_owners {
            return Err(Error::invalid("owners_per_round", "cannot exceed n_owners"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::invalid("learning_rate", "must be positive"));
        }
        if let Some(lr) = self.wm_learning_rate {
            if !(lr > 0.0 && lr.is_finite()) {
                return Err(Error::invalid("wm_learning_rate", "must be positive"));
            }
        }
        if !(0.0..1.0).contains(&self.dropout_prob) {
            return Err(Error::invalid("dropout_prob", "must lie in [0, 1)"));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::invalid("lambda", "must be non-negative"));
        }
        Ok(())
    }

    /// Rounds per epoch: one epoch consumes the pooled training data once.
    pub fn epoch_length(&self, train_size: usize) -> usize {
        (train_size / (self.owners_per_round * self.local_batch)).max(1)
    }

    pub fn wm_rate(&self) -> f32 {
        self.wm_learning_rate.unwrap_or(self.learning_rate)
    }

    pub fn total_iterations(&self, train_size: usize) -> usize {
        self.iterations.unwrap_or(self.epochs * self.epoch_length(train_size))
    }
}

/// Whether the watermark step runs at `iteration` (0-based, global).
pub fn wm_schedule(strategy: Strategy, iteration: usize, epoch_length: usize) -> bool {
    match strategy {
        Strategy::VanillaWm | Strategy::DropoutWm | Strategy::IndependentWm | Strategy::VanillaDifWm | Strategy::DropoutDifWm => true,
        Strategy::DropoutLimitedWm => {
            let len = epoch_length.max(1);
            let (epoch, k) = (iteration / len, iteration % len);
            match epoch {
                0 | 1 => true,
                2 | 3 => k % 10 == 0,
                _ => k % 100 == 0,
            }
        }
        Strategy::NoWm | Strategy::IndependentOwnerBaseline => false,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundLog {
    /// Rounds completed.
    pub iteration: usize,
    pub epoch: usize,
    pub train_loss: f64,
    pub main_accuracy: f64,
    pub trigger_accuracy: f64,
    /// Mean over owners of `r_j` measured on the owner's own copy.
    pub mean_projection: f64,
    pub mav_c2: Option<f64>,
    pub wm_step_executed: bool,
}

pub struct FlOutcome {
    /// One copy per owner (a single shared model for NoWM).
    pub copies: Vec<Model>,
    pub logs: Vec<RoundLog>,
}

/// Fingerprinting material shared by training and tracing.
#[derive(Clone, Copy)]
pub struct WmArtifacts<'a> {
    /// One shared set, or one per owner for the Dif strategies.
    pub triggers: &'a [TriggerSet],
    pub codebook: &'a CodeBook,
    pub basis: &'a OwnerBasis,
    pub projection: &'a ProjectionMatrix,
}

impl<'a> WmArtifacts<'a> {
    pub fn triggers_of(&self, owner: usize) -> &'a TriggerSet {
        if self.triggers.len() == 1 {
            &self.triggers[0]
        } else {
            &self.triggers[owner]
        }
    }

    fn check(&self, n_owners: usize, arch: &Architecture) -> Result<()> {
        if self.triggers.is_empty() || (self.triggers.len() != 1 && self.triggers.len() != n_owners) {
            return Err(Error::ShapeMismatch(format!(
                "{} trigger sets for {n_owners} owners",
                self.triggers.len()
            )));
        }
        let m = self.codebook.m();
        if self.triggers.iter().any(|t| t.len() != m) {
            return Err(Error::ShapeMismatch(format!("trigger sets must hold {m} images")));
        }
        if self.codebook.n_owners() < n_owners || self.basis.n_owners() < n_owners {
            return Err(Error::ShapeMismatch("fewer codewords or basis vectors than owners".into()));
        }
        let carrier = arch.layers()[arch.carrier_layer()].weight_len();
        if self.projection.rows() != carrier || self.projection.cols() != self.basis.dim() {
            return Err(Error::ShapeMismatch(format!(
                "projection is {}x{}, carrier has {carrier} weights and p = {}",
                self.projection.rows(),
                self.projection.cols(),
                self.basis.dim()
            )));
        }
        Ok(())
    }
}

/// One SGD step on a cyclic `wm_batch` of triggers toward `labels`, plus
/// `lambda * exp(-r_j)`. Advances `cursor`.
#[allow(clippy::too_many_arguments)]
pub fn watermark_step(
    copy: &mut Model,
    triggers: &TriggerSet,
    labels: &[usize],
    owner_vector: &[f64],
    projection: &ProjectionMatrix,
    lambda: f64,
    learning_rate: f32,
    wm_batch: usize,
    dropout: Option<(f32, &mut dyn RngCore)>,
    cursor: &mut usize,
) -> Result<f64> {
    if labels.len() != triggers.len() {
        return Err(Error::ShapeMismatch(format!("{} labels for {} triggers", labels.len(), triggers.len())));
    }
    let (images, idx) = triggers.cyclic_batch(*cursor, wm_batch);
    let targets: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
    let wm_term = (lambda > 0.0).then_some(WatermarkTerm::Regularizer {
        lambda,
        projection,
        owner_vector,
    });
    let loss = copy.train_step(TrainStepSpec {
        learning_rate,
        images: &images,
        targets: &targets,
        dropout: dropout.map(|(prob, rng)| Dropout { prob, rng }),
        wm_term,
    })?;
    *cursor = (*cursor + wm_batch) % triggers.len();
    Ok(loss)
}

fn at_iteration(e: Error, iteration: usize) -> Error {
    match e {
        Error::NonFiniteLoss { .. } => Error::NonFiniteLoss { iteration },
        other => other,
    }
}

fn rng_for(base: u64, round: usize, owner: usize, step: usize) -> ChaCha8Rng {
    let s = derive_seed(derive_seed(derive_seed(base, round as u64), owner as u64), step as u64);
    ChaCha8Rng::seed_from_u64(s)
}

fn sample_batch(shard: &LabeledImages, batch: usize, rng: &mut ChaCha8Rng) -> LabeledImages {
    let idx = sample(rng, shard.len(), batch.min(shard.len())).into_vec();
    shard.subset(&idx)
}

/// Metrics snapshot taken during training.
#[allow(clippy::too_many_arguments)]
fn snapshot(
    copies: &[Model],
    config: &FlConfig,
    wm: &WmArtifacts<'_>,
    eval: &LabeledImages,
    iteration: usize,
    epoch: usize,
    train_loss: f64,
    wm_step_executed: bool,
    mav_rng: &mut ChaCha8Rng,
) -> Result<RoundLog> {
    let copy_of = |j: usize| if copies.len() == 1 { &copies[0] } else { &copies[j] };
    let tracked = config.tracked_copies.clamp(1, config.n_owners);
    let mut main = 0.0;
    let mut trig = 0.0;
    for j in 0..tracked {
        main += evaluate_accuracy(copy_of(j), &eval.images, &eval.labels)?;
        trig += trigger_accuracy(copy_of(j), wm.triggers_of(j), &wm.codebook.targets(j))?;
    }
    let mut r_sum = 0.0;
    for j in 0..config.n_owners {
        let r = projections(&copy_of(j).carrier_f64(), wm.projection, wm.basis)?;
        r_sum += r[j];
    }
    let mav_c2 = if config.mav_pairs > 0 && config.n_owners >= 2 && wm.triggers.len() == 1 {
        let mut total = 0.0;
        for _ in 0..config.mav_pairs {
            let pair = sample(mav_rng, config.n_owners, 2).into_vec();
            let merged = collude(&[copy_of(pair[0]), copy_of(pair[1])])?;
            total += mav(&merged, &wm.triggers[0], wm.codebook, &pair)?;
        }
        Some(total / config.mav_pairs as f64)
    } else {
        None
    };
    Ok(RoundLog {
        iteration,
        epoch,
        train_loss,
        main_accuracy: main / tracked as f64,
        trigger_accuracy: trig / tracked as f64,
        mean_projection: r_sum / config.n_owners as f64,
        mav_c2,
        wm_step_executed,
    })
}

/// Federated training of all copies. `on_log` receives each log entry as it
/// is produced.
pub fn run_fl_training(
    config: &FlConfig,
    data: &PartitionedData,
    wm: &WmArtifacts<'_>,
    arch: Architecture,
    mut on_log: impl FnMut(&RoundLog),
) -> Result<FlOutcome> {
    config.validate()?;
    if !config.strategy.is_federated() {
        return Err(Error::invalid("strategy", format!("{} is trained independently", config.strategy)));
    }
    if data.n_owners() != config.n_owners {
        return Err(Error::ShapeMismatch(format!(
            "{} shards for {} owners",
            data.n_owners(),
            config.n_owners
        )));
    }
    if data.owner_shards.iter().any(LabeledImages::is_empty) {
        return Err(Error::invalid("owner_shards", "every owner needs at least one example"));
    }
    wm.check(config.n_owners, &arch)?;
    let strategy = config.strategy;
    let epoch_length = config.epoch_length(data.train_size());
    let total = config.total_iterations(data.train_size());
    let eval = if config.eval_subset == 0 { data.eval_set.clone() } else { data.eval_set.head(config.eval_subset) };

    let init = Model::new(arch, config.seeds.model_init)?;
    let mut copies = if strategy.watermarks() { vec![init; config.n_owners] } else { vec![init] };
    let owner_vectors: Vec<&[f64]> = (0..config.n_owners).map(|j| wm.basis.vector(j)).collect();
    let labels: Vec<Vec<usize>> = (0..config.n_owners).map(|j| wm.codebook.targets(j)).collect();
    let mut cursors = vec![0usize; config.n_owners];
    let mut rng = ChaCha8Rng::seed_from_u64(config.seeds.training);
    let mut mav_rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seeds.training, u64::MAX));
    let main_dropout_seed = derive_seed(config.seeds.training, 1);
    let wm_dropout_seed = derive_seed(config.seeds.training, 2);
    let mut logs = Vec::new();

    for t in 0..total {
        let owners = sample(&mut rng, config.n_owners, config.owners_per_round).into_vec();
        let batches: Vec<LabeledImages> = owners
            .iter()
            .map(|&j| sample_batch(&data.owner_shards[j], config.local_batch, &mut rng))
            .collect();
        let main_dropout = strategy.uses_dropout() && config.dropout_in_main_task;
        let grads = owners
            .par_iter()
            .zip(&batches)
            .map(|(&j, b)| {
                let model = if copies.len() == 1 { &copies[0] } else { &copies[j] };
                let mut drng = rng_for(main_dropout_seed, t, j, 0);
                let dropout = main_dropout.then(|| Dropout {
                    prob: config.dropout_prob,
                    rng: &mut drng,
                });
                model.gradient(TrainStepSpec {
                    learning_rate: config.learning_rate,
                    images: &b.images,
                    targets: &b.labels,
                    dropout,
                    wm_term: None,
                })
            })
            .collect::<Result<Vec<_>>>()
            .map_err(|e| at_iteration(e, t))?;
        let scale = 1.0 / grads.len() as f32;
        let mut avg = vec![0.0f32; grads[0].1.len()];
        for (_, g) in &grads {
            for (a, v) in avg.iter_mut().zip(g) {
                *a += v * scale;
            }
        }
        let train_loss = grads.iter().map(|(l, _)| l).sum::<f64>() / grads.len() as f64;
        copies.par_iter_mut().for_each(|m| m.sgd_update(&avg, config.learning_rate));

        let fire = config.watermarking && strategy.watermarks() && wm_schedule(strategy, t, epoch_length);
        if fire {
            for step in 0..config.wm_steps {
                let reg = if config.lambda > 0.0 {
                    let l = wm.projection.rows();
                    let mut carriers = vec![0.0f64; copies.len() * l];
                    for (row, m) in carriers.chunks_exact_mut(l).zip(&copies) {
                        for (d, &s) in row.iter_mut().zip(m.carrier()) {
                            *d = s as f64;
                        }
                    }
                    if carriers.iter().any(|v| !v.is_finite()) {
                        return Err(Error::NonFiniteLoss { iteration: t });
                    }
                    let mut reg = batch_regularizer(&carriers, copies.len(), wm.projection, &owner_vectors)?;
                    for (loss, grad) in &mut reg {
                        *loss *= config.lambda;
                        grad.iter_mut().for_each(|g| *g *= config.lambda);
                    }
                    Some(reg)
                } else {
                    None
                };
                copies
                    .par_iter_mut()
                    .zip(cursors.par_iter_mut())
                    .enumerate()
                    .try_for_each(|(j, (copy, cursor))| -> Result<()> {
                        let trig = wm.triggers_of(j);
                        let (images, idx) = trig.cyclic_batch(*cursor, config.wm_batch);
                        let targets: Vec<usize> = idx.iter().map(|&i| labels[j][i]).collect();
                        let mut drng = rng_for(wm_dropout_seed, t, j, step);
                        let dropout = strategy.uses_dropout().then(|| Dropout {
                            prob: config.dropout_prob,
                            rng: &mut drng,
                        });
                        let wm_term = reg.as_ref().map(|r| WatermarkTerm::Precomputed {
                            loss: r[j].0,
                            carrier_grad: &r[j].1,
                        });
                        copy.train_step(TrainStepSpec {
                            learning_rate: config.wm_rate(),
                            images: &images,
                            targets: &targets,
                            dropout,
                            wm_term,
                        })?;
                        *cursor = (*cursor + config.wm_batch) % trig.len();
                        Ok(())
                    })
                    .map_err(|e| at_iteration(e, t))?;
            }
        }

        let done = t + 1;
        if config.log_every > 0 && (done % config.log_every == 0 || done == total) {
            let log = snapshot(&copies, config, wm, &eval, done, t / epoch_length, train_loss, fire, &mut mav_rng)?;
            on_log(&log);
            logs.push(log);
        }
    }
    Ok(FlOutcome { copies, logs })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum IndependentMode {
    /// Centralized training on all owners' data with one owner's watermark.
    FullDataWm,
    /// Plain training on a single owner's shard.
    OwnerBaseline,
}

pub struct IndependentOutcome {
    pub model: Model,
    pub logs: Vec<RoundLog>,
    /// Accuracy on the full evaluation set.
    pub final_accuracy: f64,
}

/// Trains one model outside the federation for `owner`. Runs as many rounds as
/// the federated schedule: FullDataWM takes one step on an
/// `owners_per_round * local_batch` batch of pooled data plus a watermark step
/// per round; OwnerBaseline takes one `local_batch` step on the owner's shard.
pub fn train_independent(
    mode: IndependentMode,
    config: &FlConfig,
    data: &PartitionedData,
    wm: &WmArtifacts<'_>,
    arch: Architecture,
    owner: usize,
    mut on_log: impl FnMut(&RoundLog),
) -> Result<IndependentOutcome> {
    config.validate()?;
    if owner >= data.n_owners() {
        return Err(Error::invalid("owner", format!("no shard for owner {owner}")));
    }
    wm.check(config.n_owners.min(data.n_owners()), &arch)?;
    let epoch_length = config.epoch_length(data.train_size());
    let total = config.total_iterations(data.train_size());
    let eval = if config.eval_subset == 0 { data.eval_set.clone() } else { data.eval_set.head(config.eval_subset) };
    let (source, batch) = match mode {
        IndependentMode::FullDataWm => (data.pooled_train(), config.owners_per_round * config.local_batch),
        IndependentMode::OwnerBaseline => (data.owner_shards[owner].clone(), config.local_batch),
    };
    if source.is_empty() {
        return Err(Error::invalid("data", "no training examples"));
    }
    let mut model = Model::new(arch, config.seeds.model_init)?;
    let labels = wm.codebook.targets(owner);
    let mut cursor = 0;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seeds.training, owner as u64));
    let wm_dropout_seed = derive_seed(config.seeds.training, 2);
    let mut logs = Vec::new();
    let mut mav_rng = ChaCha8Rng::seed_from_u64(0);
    let log_config = FlConfig {
        n_owners: 1,
        tracked_copies: 1,
        mav_pairs: 0,
        ..config.clone()
    };
    for t in 0..total {
        let b = sample_batch(&source, batch, &mut rng);
        let train_loss = model
            .train_step(TrainStepSpec {
                learning_rate: config.learning_rate,
                images: &b.images,
                targets: &b.labels,
                dropout: None,
                wm_term: None,
            })
            .map_err(|e| at_iteration(e, t))?;
        let fire = config.watermarking && mode == IndependentMode::FullDataWm && wm_schedule(Strategy::IndependentWm, t, epoch_length);
        if fire {
            for step in 0..config.wm_steps {
                let mut drng = rng_for(wm_dropout_seed, t, owner, step);
                let dropout = config.strategy.uses_dropout().then_some((config.dropout_prob, &mut drng as &mut dyn RngCore));
                watermark_step(
                    &mut model,
                    wm.triggers_of(owner),
                    &labels,
                    wm.basis.vector(owner),
                    wm.projection,
                    config.lambda,
                    config.wm_rate(),
                    config.wm_batch,
                    dropout,
                    &mut cursor,
                )
                .map_err(|e| at_iteration(e, t))?;
            }
        }
        let done = t + 1;
        if config.log_every > 0 && (done % config.log_every == 0 || done == total) {
            let single = WmArtifacts {
                triggers: std::slice::from_ref(wm.triggers_of(owner)),
                ..*wm
            };
            let mut log = snapshot(std::slice::from_ref(&model), &log_config, &single, &eval, done, t / epoch_length, train_loss, fire, &mut mav_rng)?;
            // snapshot measures owner 0; re-measure for the actual owner
            log.trigger_accuracy = trigger_accuracy(&model, wm.triggers_of(owner), &labels)?;
            log.mean_projection = projections(&model.carrier_f64(), wm.projection, wm.basis)?[owner];
            on_log(&log);
            logs.push(log);
        }
    }
    let final_accuracy = evaluate_accuracy(&model, &data.eval_set.images, &data.eval_set.labels)?;
    Ok(IndependentOutcome {
        model,
        logs,
        final_accuracy,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_limited_examples() {
        let len = 328;
        assert!(wm_schedule(Strategy::DropoutLimitedWm, 10, len));
        assert!(!wm_schedule(Strategy::DropoutLimitedWm, 2 * len + 5, len));
        assert!(wm_schedule(Strategy::DropoutLimitedWm, 2 * len + 10, len));
        assert!(!wm_schedule(Strategy::DropoutLimitedWm, 4 * len + 10, len));
        assert!(wm_schedule(Strategy::DropoutLimitedWm, 4 * len + 100, len));
        for t in 0..1640 {
            assert!(!wm_schedule(Strategy::NoWm, t, len));
            assert!(!wm_schedule(Strategy::IndependentOwnerBaseline, t, len));
            assert!(wm_schedule(Strategy::VanillaWm, t, len));
            assert!(wm_schedule(Strategy::DropoutWm, t, len));
        }
    }

    #[test]
    fn limited_schedule_fires_726_times() {
        let config = FlConfig::default();
        let len = config.epoch_length(52_500);
        assert_eq!(len, 328);
        assert_eq!(config.total_iterations(52_500), 1640);
        let per_epoch: Vec<usize> = (0..5).map(|e| (e * len..(e + 1) * len).filter(|&t| wm_schedule(Strategy::DropoutLimitedWm, t, len)).count()).collect();
        assert_eq!(per_epoch, vec![328, 328, 33, 33, 4]);
    }

    #[test]
    fn strategy_names_round_trip() {
        for s in Strategy::ALL {
            assert_eq!(Strategy::parse(s.name()).unwrap(), s);
            let json = serde_json::to_string(&s).unwrap();
            assert_eq!(json, format!("\"{}\"", s.name()));
        }
        assert!(Strategy::parse("Bogus").is_err());
    }

    #[test]
    fn config_validation() {
        assert!(FlConfig::default().validate().is_ok());
        let bad = FlConfig {
            owners_per_round: 101,
            ..FlConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = FlConfig {
            dropout_prob: 1.0,
            ..FlConfig::default()
        };
        assert!(bad.validate().is_err());
    }
}
