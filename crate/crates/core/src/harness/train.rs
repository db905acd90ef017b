use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, SubjectBatch};
use crate::error::{Error, Result};
use crate::layers::{LinearShape, PlainLinear, SubjectId};
use crate::model::{argmax, ModelSet, Network};
use crate::optim::{AdamW, AdamWConfig};
use crate::rng;
use crate::tensor::{Activation, Graph, Param, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: AdamWConfig,
    /// Linear learning-rate warmup length in epochs; 0 disables it.
    pub warmup_epochs: usize,
    pub seeds: Vec<u64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 200,
            batch_size: 64,
            optimizer: AdamWConfig::default(),
            warmup_epochs: 0,
            seeds: vec![1, 2, 3],
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("seed list is empty".into()));
        }
        self.optimizer.validate()
    }

    fn lr_scale(&self, epoch: usize) -> f64 {
        if epoch < self.warmup_epochs {
            (epoch + 1) as f64 / self.warmup_epochs as f64
        } else {
            1.0
        }
    }
}

/// Something the training loop can fit with cross-entropy.
pub trait Trainable {
    fn logits_var(&self, g: &mut Graph, batch: &SubjectBatch) -> Result<Var>;
    fn trainable_params(&mut self) -> Vec<&mut Param>;
}

impl Trainable for Network {
    fn logits_var(&self, g: &mut Graph, batch: &SubjectBatch) -> Result<Var> {
        let x = g.constant(batch.features.clone())?;
        self.forward(g, x, &batch.subjects)
    }

    fn trainable_params(&mut self) -> Vec<&mut Param> {
        self.params_mut()
    }
}

/// Fits `model` on all of `data`. Returns the mean minibatch loss per epoch.
/// Minibatch order is a function of `(seed, epoch)` only.
pub fn train_model<M: Trainable>(model: &mut M, data: &Dataset, cfg: &TrainConfig, seed: u64) -> Result<Vec<f64>> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Input("training set is empty".into()));
    }
    let mut opt = AdamW::new(cfg.optimizer.clone())?;
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        order.sort_unstable();
        order.shuffle(&mut rng::stream(seed, &format!("shuffle.{epoch}")));
        let mut total = 0.0;
        let mut batches = 0;
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let context = |e: Error| Error::Training {
                epoch,
                batch: b,
                reason: e.to_string(),
            };
            let batch = data.batch(chunk)?;
            let mut g = Graph::new();
            let logits = model.logits_var(&mut g, &batch).map_err(context)?;
            let loss = g.softmax_cross_entropy(logits, &batch.labels).map_err(context)?;
            let value = g.value(loss).data()[0];
            if !value.is_finite() {
                return Err(context(Error::NonFinite("loss".into())));
            }
            let grads = g.backward(loss).map_err(context)?;
            opt.step(model.trainable_params(), &grads, cfg.lr_scale(epoch))
                .map_err(context)?;
            total += value;
            batches += 1;
        }
        history.push(total / batches as f64);
    }
    Ok(history)
}

/// Loss history per trained network, keyed by subject for per-subject sets.
#[derive(Clone, Debug, PartialEq)]
pub enum LossHistory {
    Shared(Vec<f64>),
    PerSubject(BTreeMap<SubjectId, Vec<f64>>),
}

/// Trains a model set. Per-subject networks see only their own subject's
/// trials and use a per-subject shuffle seed.
pub fn train(models: &mut ModelSet, data: &Dataset, cfg: &TrainConfig, seed: u64) -> Result<LossHistory> {
    match models {
        ModelSet::Shared(net) => Ok(LossHistory::Shared(train_model(net, data, cfg, seed)?)),
        ModelSet::PerSubject(nets) => {
            let mut out = BTreeMap::new();
            for (&s, net) in nets.iter_mut() {
                let own = data.of_subject(s);
                if own.is_empty() {
                    return Err(Error::Input(format!("no training trials for subject {s}")));
                }
                let sub_seed = rng::derive_seed(seed, &format!("subject.{s}"));
                out.insert(s, train_model(net, &own, cfg, sub_seed)?);
            }
            Ok(LossHistory::PerSubject(out))
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Score {
    pub correct: usize,
    pub total: usize,
}

impl Score {
    pub fn accuracy(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            self.correct as f64 / self.total as f64
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Evaluation {
    pub per_subject: BTreeMap<SubjectId, Score>,
}

impl Evaluation {
    pub fn accuracy(&self, subject: SubjectId) -> Option<f64> {
        self.per_subject.get(&subject).map(Score::accuracy)
    }

    /// Trial-weighted accuracy over all subjects.
    pub fn overall(&self) -> f64 {
        let (c, t) = self
            .per_subject
            .values()
            .fold((0, 0), |(c, t), s| (c + s.correct, t + s.total));
        if t == 0 {
            0.0
        } else {
            c as f64 / t as f64
        }
    }

    /// Unweighted mean of per-subject accuracies.
    pub fn subject_mean(&self) -> f64 {
        if self.per_subject.is_empty() {
            return 0.0;
        }
        self.per_subject.values().map(Score::accuracy).sum::<f64>() / self.per_subject.len() as f64
    }
}

/// Scores predictions against labels, grouped by each trial's subject.
pub fn score(data: &Dataset, predictions: &[usize]) -> Evaluation {
    let mut eval = Evaluation::default();
    for (t, &p) in data.trials.iter().zip(predictions) {
        let s = eval.per_subject.entry(t.subject).or_default();
        s.total += 1;
        s.correct += usize::from(p == t.label);
    }
    eval
}

/// Predictions for every trial of `data`. With `fallback`, subjects are
/// hidden from the model so subject-conditioned layers use only their shared
/// path.
pub fn predict_dataset(models: &ModelSet, data: &Dataset, fallback: bool) -> Result<Vec<usize>> {
    let mut out = Vec::with_capacity(data.len());
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(512) {
        let mut batch = data.batch(chunk)?;
        if fallback {
            batch = batch.anonymized();
        }
        out.extend(models.predict(&batch.features, &batch.subjects)?);
    }
    Ok(out)
}

pub fn evaluate(models: &ModelSet, data: &Dataset, fallback: bool) -> Result<Evaluation> {
    Ok(score(data, &predict_dataset(models, data, fallback)?))
}

/// Single dense softmax layer on flattened features.
#[derive(Clone, Debug)]
pub struct LinearProbe(PlainLinear);

impl LinearProbe {
    pub fn new(features: usize, classes: usize, seed: u64) -> Self {
        LinearProbe(PlainLinear::new(
            "probe",
            LinearShape {
                in_features: features,
                out_features: classes,
                bias: true,
                activation: Activation::Identity,
            },
            seed,
        ))
    }

    pub fn predict(&self, data: &Dataset) -> Result<Vec<usize>> {
        let batch = data.full_batch()?;
        let mut g = Graph::new();
        let y = self.logits_var(&mut g, &batch)?;
        let logits: &Tensor = g.value(y);
        Ok((0..logits.shape()[0]).map(|i| argmax(logits.row(i))).collect())
    }
}

impl Trainable for LinearProbe {
    fn logits_var(&self, g: &mut Graph, batch: &SubjectBatch) -> Result<Var> {
        let x = g.constant(batch.features.clone())?;
        let n = g.shape(x)[0];
        let width = g.value(x).row_len();
        let flat = g.reshape(x, &[n, width])?;
        self.0.forward(g, flat)
    }

    fn trainable_params(&mut self) -> Vec<&mut Param> {
        self.0.params_mut()
    }
}

/// Test accuracy of a subject-agnostic linear probe fitted on pooled data.
pub fn linear_probe_accuracy(train: &Dataset, test: &Dataset, cfg: &TrainConfig, seed: u64) -> Result<f64> {
    let mut probe = LinearProbe::new(train.feature_len(), train.classes, seed);
    train_model(&mut probe, train, cfg, seed)?;
    Ok(score(test, &probe.predict(test)?).overall())
}
