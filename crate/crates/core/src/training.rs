//! Teacher-forced training with Adam, early stopping on dev triplet F1.

use std::fmt;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{build_vocabulary, linearize_targets, AnnotatedExample, IndexedSentence, TargetSequence, Triplet, Vocabulary};
use crate::decoder::{decode_greedy, sequence_loss, StepDistribution};
use crate::error::{Error, Result};
use crate::evaluation::{triplet_prf, Prf};
use crate::model::{Model, ModelConfig};
use crate::numerics::{gradient_check, uniform, AdamConfig, AdamState, GradCheckReport, Graph, ParameterSet, Real};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    /// Drop probability at every dropout site. Zero disables dropout.
    pub dropout: f64,
    pub max_epochs: usize,
    /// Epochs without dev improvement tolerated before stopping.
    pub patience: usize,
    pub seed: u64,
    /// Global gradient-norm ceiling.
    pub clip_norm: f64,
    /// Upper bound on triplets emitted per sentence at inference.
    pub max_aspects: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-3,
            batch_size: 32,
            dropout: 0.5,
            max_epochs: 100,
            patience: 10,
            seed: 42,
            clip_norm: 5.0,
            max_aspects: 16,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive_real = |field: &str, v: f64| {
            if v.is_finite() && v > 0.0 {
                Ok(())
            } else {
                Err(Error::config(field, "must be a positive number"))
            }
        };
        positive_real("training.learning_rate", self.learning_rate)?;
        positive_real("training.clip_norm", self.clip_norm)?;
        for (field, v) in [
            ("training.batch_size", self.batch_size),
            ("training.max_epochs", self.max_epochs),
            ("training.max_aspects", self.max_aspects),
        ] {
            if v == 0 {
                return Err(Error::config(field, "must be positive"));
            }
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::config("training.dropout", "must lie in [0, 1)"));
        }
        if self.patience > self.max_epochs {
            return Err(Error::config("training.patience", "must not exceed max_epochs"));
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            ..AdamConfig::default()
        }
    }
}

/// Mean negative log-probability of the gold arguments.
pub fn sequence_nll(distributions: &[StepDistribution], targets: &TargetSequence) -> Result<f64> {
    let gold = targets.arguments();
    if distributions.len() != gold.len() {
        return Err(Error::shape(
            "sequence_nll",
            format!("{} distributions for {} targets", distributions.len(), gold.len()),
        ));
    }
    if gold.is_empty() {
        return Err(Error::shape("sequence_nll", "empty target sequence"));
    }
    let mut total = 0.0;
    for (t, (d, &arg)) in distributions.iter().zip(gold).enumerate() {
        let p = d
            .prob(arg)
            .ok_or_else(|| Error::shape("sequence_nll", format!("{} does not fit step {}", arg, t + 1)))?;
        if p <= 0.0 {
            return Err(Error::ZeroProbability { step: t + 1 });
        }
        total -= p.ln();
    }
    Ok(total / gold.len() as f64)
}

/// A sentence with its vocabulary ids and gold decode sequence.
#[derive(Debug, Clone)]
pub struct TrainingExample {
    pub sentence: IndexedSentence,
    pub targets: TargetSequence,
    pub gold: Vec<Triplet>,
}

pub fn prepare(vocab: &Vocabulary, examples: &[AnnotatedExample]) -> Vec<TrainingExample> {
    examples
        .iter()
        .map(|ex| TrainingExample {
            sentence: vocab.index(ex.tokens()),
            targets: linearize_targets(ex),
            gold: ex.triplets().to_vec(),
        })
        .collect()
}

/// Visiting order of `n` examples in `epoch` (0-based).
pub fn epoch_order(seed: u64, epoch: usize, n: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    order.shuffle(&mut rng);
    order
}

fn dropout_seed(seed: u64, epoch: usize, position: usize) -> u64 {
    seed.wrapping_add(1)
        .wrapping_mul(0x2545_F491_4F6C_DD1D)
        .wrapping_add(((epoch as u64) << 32) | position as u64)
}

/// Greedy predictions for every sentence, in input order.
pub fn predict<T: Real>(
    model: &Model,
    params: &ParameterSet<T>,
    sentences: &[IndexedSentence],
    max_aspects: usize,
) -> Result<Vec<Vec<Triplet>>> {
    sentences
        .par_iter()
        .map(|s| {
            let mut g = Graph::new(params.table());
            Ok(decode_greedy(&mut g, model, s, max_aspects)?.triplets)
        })
        .collect()
}

/// Triplet P/R/F1 of greedy decoding against the gold sets.
pub fn evaluate_examples<T: Real>(
    model: &Model,
    params: &ParameterSet<T>,
    data: &[TrainingExample],
    max_aspects: usize,
) -> Result<Prf> {
    let sentences: Vec<IndexedSentence> = data.iter().map(|d| d.sentence.clone()).collect();
    let predicted = predict(model, params, &sentences, max_aspects)?;
    let gold: Vec<Vec<Triplet>> = data.iter().map(|d| d.gold.clone()).collect();
    triplet_prf(&predicted, &gold)
}

/// Owns the parameters and optimizer state of one run.
#[derive(Debug, Clone)]
pub struct Trainer<T: Real> {
    pub model: Model,
    pub params: ParameterSet<T>,
    pub adam: AdamState<T>,
    pub config: TrainConfig,
    epochs_done: usize,
}

impl<T: Real> Trainer<T> {
    pub fn new(model: Model, params: ParameterSet<T>, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let adam = AdamState::new(&params, config.adam());
        Ok(Trainer {
            model,
            params,
            adam,
            config,
            epochs_done: 0,
        })
    }

    pub fn epochs_done(&self) -> usize {
        self.epochs_done
    }

    /// Accumulates the gradient of the batch loss (mean over all decode steps
    /// in the batch) and returns that loss. Forward passes run in parallel;
    /// backward passes are applied in batch order.
    pub fn accumulate_batch(&mut self, data: &[TrainingExample], batch: &[usize], batch_id: usize) -> Result<f64> {
        let total_steps: usize = batch.iter().map(|&i| data[i].targets.len()).sum();
        let seed_grad = T::of(1.0 / total_steps as f64);
        let rate = self.config.dropout;
        let seed = self.config.seed;
        let epoch = self.epochs_done;
        let batch_size = self.config.batch_size;
        let model = &self.model;
        let (table, grads) = self.params.parts_mut();
        let forwards: Vec<_> = batch
            .par_iter()
            .enumerate()
            .map(|(k, &i)| {
                let mut g = Graph::with_dropout(table, rate, dropout_seed(seed, epoch, batch_id * batch_size + k));
                let out = sequence_loss(&mut g, model, &data[i].sentence, &data[i].targets);
                (g, out)
            })
            .collect();
        let mut loss_sum = 0.0;
        for ((g, out), &i) in forwards.into_iter().zip(batch) {
            let non_finite = |e: Error| match e {
                Error::NonFinite { .. } => Error::NonFiniteLoss {
                    batch: batch_id,
                    example: i,
                },
                other => other,
            };
            let (loss, _) = out.map_err(non_finite)?;
            let value = g.value(loss).data()[0].as_f64();
            if !value.is_finite() {
                return Err(Error::NonFiniteLoss {
                    batch: batch_id,
                    example: i,
                });
            }
            loss_sum += value;
            g.backward(loss, seed_grad, grads).map_err(non_finite)?;
        }
        Ok(loss_sum / total_steps as f64)
    }

    /// One optimisation step on `batch`. Returns the batch loss measured
    /// before the update.
    pub fn step(&mut self, data: &[TrainingExample], batch: &[usize], batch_id: usize) -> Result<f64> {
        self.params.zero_grads();
        let loss = self.accumulate_batch(data, batch, batch_id)?;
        self.params.clip_grad_norm(self.config.clip_norm);
        self.adam.step(&mut self.params);
        self.params.zero_grads();
        Ok(loss)
    }

    /// One pass over `data` in a seeded shuffled order. Returns the mean
    /// batch loss.
    pub fn train_epoch(&mut self, data: &[TrainingExample]) -> Result<f64> {
        if data.is_empty() {
            return Err(Error::EmptyCorpus);
        }
        let order = epoch_order(self.config.seed, self.epochs_done, data.len());
        let mut losses = Vec::new();
        for (b, batch) in order.chunks(self.config.batch_size).enumerate() {
            losses.push(self.step(data, batch, b)?);
        }
        self.epochs_done += 1;
        Ok(losses.iter().sum::<f64>() / losses.len() as f64)
    }

    /// Trains until `max_epochs` or until dev triplet F1 has not improved for
    /// `patience` epochs, then restores the best parameters. `on_epoch` sees
    /// each log entry as it is produced.
    pub fn fit(
        &mut self,
        train: &[TrainingExample],
        dev: &[TrainingExample],
        mut on_epoch: impl FnMut(&EpochLog),
    ) -> Result<FitSummary> {
        if train.is_empty() || dev.is_empty() {
            return Err(Error::EmptyCorpus);
        }
        let mut best: Option<(usize, f64, ParameterSet<T>)> = None;
        let mut stale = 0;
        let mut log = Vec::new();
        for _ in 0..self.config.max_epochs {
            let started = Instant::now();
            let loss = self.train_epoch(train)?;
            let dev_prf = evaluate_examples(&self.model, &self.params, dev, self.config.max_aspects)?;
            let entry = EpochLog {
                epoch: self.epochs_done,
                loss,
                dev: dev_prf,
                seconds: started.elapsed().as_secs_f64(),
            };
            on_epoch(&entry);
            log.push(entry);
            if best.as_ref().is_none_or(|(_, f1, _)| dev_prf.f1 > *f1) {
                best = Some((self.epochs_done, dev_prf.f1, self.params.clone()));
                stale = 0;
            } else {
                stale += 1;
            }
            if stale >= self.config.patience {
                break;
            }
        }
        let (best_epoch, best_f1, params) = best.expect("at least one epoch runs");
        self.params = params;
        Ok(FitSummary {
            best_epoch,
            best_dev_f1: best_f1,
            log,
        })
    }
}

/// Central-difference check of the per-step mean teacher-forced loss of one
/// example over every parameter. `corrupt_gradient`, when set, multiplies the
/// reverse-mode gradient by that factor so that the check must fail.
pub fn model_gradient_check(
    model: &Model,
    params: &mut ParameterSet<f64>,
    example: &TrainingExample,
    epsilon: f64,
    corrupt_gradient: Option<f64>,
) -> Result<GradCheckReport> {
    gradient_check(params, epsilon, |g| {
        let (loss, steps) = sequence_loss(g, model, &example.sentence, &example.targets)?;
        let mean = g.scale(loss, 1.0 / steps as f64)?;
        match corrupt_gradient {
            Some(factor) => g.scale_gradient(mean, factor),
            None => Ok(mean),
        }
    })
}

/// How the full-model gradient check picks its evaluation point.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GradCheckSetup {
    /// Central-difference step.
    pub epsilon: f64,
    /// Parameters are redrawn uniformly from `[-param_scale, param_scale]`.
    pub param_scale: f64,
    pub seed: u64,
}

impl Default for GradCheckSetup {
    fn default() -> Self {
        GradCheckSetup {
            epsilon: 5e-4,
            param_scale: 0.5,
            seed: 0,
        }
    }
}

/// Builds a 64-bit model over the vocabulary of `examples`, moves it to a
/// random parameter point and checks the loss gradient of `examples[0]`.
pub fn check_model_gradients(
    config: &ModelConfig,
    examples: &[AnnotatedExample],
    setup: &GradCheckSetup,
    corrupt_gradient: Option<f64>,
) -> Result<GradCheckReport> {
    let first = examples.first().ok_or(Error::EmptyCorpus)?;
    let vocab = build_vocabulary(examples, 1)?;
    let mut rng = ChaCha8Rng::seed_from_u64(setup.seed);
    let (model, mut params) = Model::init::<f64, _>(config.clone(), &vocab, &mut rng)?;
    let ids: Vec<_> = params.ids().collect();
    for id in ids {
        let shape = params.value(id).shape().to_vec();
        *params.value_mut(id) = uniform(&shape, setup.param_scale, &mut rng);
    }
    let example = &prepare(&vocab, std::slice::from_ref(first))[0];
    model_gradient_check(&model, &mut params, example, setup.epsilon, corrupt_gradient)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss: f64,
    pub dev: Prf,
    pub seconds: f64,
}

impl EpochLog {
    /// The log line without the wall-time field.
    pub fn deterministic_part(&self) -> String {
        format!(
            "epoch={} loss={:.6} dev_p={:.4} dev_r={:.4} dev_f1={:.4}",
            self.epoch, self.loss, self.dev.precision, self.dev.recall, self.dev.f1
        )
    }
}

impl fmt::Display for EpochLog {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} time={:.2}s", self.deterministic_part(), self.seconds)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitSummary {
    pub best_epoch: usize,
    pub best_dev_f1: f64,
    pub log: Vec<EpochLog>,
}
