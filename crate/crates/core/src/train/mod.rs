//! Cross-entropy training with Adam, per-epoch evaluation and resumable
//! checkpoints.

mod adam;
mod checkpoint;

pub use adam::{adam_step, AdamConfig, OptimizerState};
pub use checkpoint::{Checkpoint, ParamRecord, RngState, FORMAT_VERSION, MAGIC};

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::arch::{Mode, Model, ModelConfig};
use crate::error::{Error, Result};
use crate::tensor::{ops, Graph, Precision, Tensor};
use crate::volume::{normalize01, read_nifti, resize_to, ClassLabel, Manifest, Volume};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub epochs: u64,
    pub batch_size: usize,
    pub seed: u64,
    pub precision: Precision,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            epochs: 20,
            batch_size: 8,
            seed: 0,
            precision: Precision::Double,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::invalid(format!(
                "learning rate must be positive, got {}",
                self.lr
            )));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::invalid(format!(
                    "{name} must lie in [0, 1), got {b}"
                )));
            }
        }
        if !(self.eps > 0.0 && self.eps.is_finite()) {
            return Err(Error::invalid(format!(
                "eps must be positive, got {}",
                self.eps
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch size must be at least 1"));
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
        }
    }
}

/// Per-sample cross-entropy of one logit row.
pub fn cross_entropy(logits: &[f64], label: ClassLabel) -> Result<f64> {
    let t = Tensor::new([logits.len()], logits.to_vec())?;
    Ok(ops::cross_entropy(&t, &[label.index()])?.0)
}

/// Mean cross-entropy of `[B, K]` logits.
pub fn batch_cross_entropy(logits: &Tensor, labels: &[ClassLabel]) -> Result<f64> {
    let idx: Vec<usize> = labels.iter().map(|l| l.index()).collect();
    Ok(ops::cross_entropy(logits, &idx)?.0)
}

/// A preprocessed volume ready for the model.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub volume: Tensor,
    pub label: ClassLabel,
}

/// Resize to `dims`, then scale intensities to `[0, 1]`.
pub fn preprocess(v: &Volume, dims: [usize; 3]) -> Result<Tensor> {
    Ok(normalize01(&resize_to(v, dims)?).into_voxels())
}

/// Reads and preprocesses every manifest entry, in manifest order.
pub fn load_samples(m: &Manifest, dims: [usize; 3]) -> Result<Vec<Sample>> {
    m.entries()
        .par_iter()
        .map(|e| {
            let bytes = std::fs::read(&e.path).map_err(|err| {
                std::io::Error::new(err.kind(), format!("{}: {err}", e.path.display()))
            })?;
            let v = read_nifti(&bytes, e.path.display().to_string())?;
            Ok(Sample {
                volume: preprocess(&v, dims)?,
                label: e.label,
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub loss: f64,
    pub accuracy: f64,
    pub predictions: Vec<ClassLabel>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct EpochRecord {
    pub epoch: u64,
    pub train_loss: f64,
    pub eval_loss: f64,
    pub eval_accuracy: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct History {
    /// Evaluation before the first update of this run.
    pub initial: Option<(f64, f64)>,
    pub epochs: Vec<EpochRecord>,
}

impl History {
    /// `epoch,train_loss,eval_loss,eval_accuracy`, one row per epoch.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["epoch", "train_loss", "eval_loss", "eval_accuracy"])
            .map_err(csv_err)?;
        for r in &self.epochs {
            out.write_record([
                r.epoch.to_string(),
                r.train_loss.to_string(),
                r.eval_loss.to_string(),
                r.eval_accuracy.to_string(),
            ])
            .map_err(csv_err)?;
        }
        out.flush()?;
        Ok(())
    }
}

fn csv_err(e: csv::Error) -> Error {
    Error::invalid(format!("csv: {e}"))
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Model, optimizer and shuffle stream of one training run.
#[derive(Clone, Debug)]
pub struct Trainer {
    model: Model,
    optimizer: OptimizerState,
    config: TrainConfig,
    epoch: u64,
    rng: ChaCha8Rng,
}

impl Trainer {
    pub fn new(model: Model, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let optimizer = OptimizerState::new(model.store());
        let rng = ChaCha8Rng::seed_from_u64(config.seed);
        Ok(Trainer {
            model,
            optimizer,
            config,
            epoch: 0,
            rng,
        })
    }

    pub fn from_checkpoint(c: &Checkpoint) -> Result<Self> {
        c.train_config.validate()?;
        let model = Model::from_store(c.model_config.clone(), c.param_store()?)?;
        let same_order = model
            .store()
            .iter()
            .zip(&c.params)
            .all(|((_, p), r)| p.name() == r.name && p.trainable() == r.trainable);
        if !same_order {
            return Err(Error::Checkpoint(
                "parameter table does not follow the model layout".into(),
            ));
        }
        c.optimizer.check_matches(model.store())?;
        let mut rng = ChaCha8Rng::from_seed(c.rng.seed);
        rng.set_stream(c.rng.stream);
        rng.set_word_pos(c.rng.word_pos);
        Ok(Trainer {
            model,
            optimizer: c.optimizer.clone(),
            config: c.train_config.clone(),
            epoch: c.epoch,
            rng,
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            model_config: self.model.config().clone(),
            train_config: self.config.clone(),
            params: checkpoint::records(self.model.store()),
            optimizer: self.optimizer.clone(),
            epoch: self.epoch,
            rng: RngState {
                seed: self.rng.get_seed(),
                stream: self.rng.get_stream(),
                word_pos: self.rng.get_word_pos(),
            },
        }
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn into_model(self) -> Model {
        self.model
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    /// Completed epochs.
    pub fn epoch(&self) -> u64 {
        self.epoch
    }

    pub fn optimizer(&self) -> &OptimizerState {
        &self.optimizer
    }

    fn diverged(&self, loss: f64) -> Error {
        Error::Divergence {
            epoch: self.epoch as usize + 1,
            step: self.optimizer.step as usize + 1,
            loss,
        }
    }

    /// Forward, backward and one Adam update on `batch`. Returns the batch
    /// loss before the update.
    pub fn step(&mut self, batch: &[&Sample]) -> Result<f64> {
        let vols: Vec<&Tensor> = batch.iter().map(|s| &s.volume).collect();
        let labels: Vec<usize> = batch.iter().map(|s| s.label.index()).collect();
        let mut g = Graph::with_precision(self.config.precision);
        let recorded = self
            .model
            .forward(&mut g, &vols, Mode::train())
            .and_then(|out| g.cross_entropy(out.logits, &labels));
        let loss_var = match recorded {
            Ok(v) => v,
            Err(Error::NonFinite(_)) => return Err(self.diverged(f64::NAN)),
            Err(e) => return Err(e),
        };
        let loss = g.value(loss_var).item()?;
        if !loss.is_finite() {
            return Err(self.diverged(loss));
        }
        let store = self.model.store_mut();
        store.zero_grad();
        g.backward_into(loss_var, store)?;
        adam_step(store, &mut self.optimizer, &self.config.adam())?;
        let finite = store.iter().all(|(_, p)| p.value().is_finite());
        if !finite {
            return Err(self.diverged(loss));
        }
        Ok(loss)
    }

    /// One pass over `train` in a freshly shuffled order. Returns the mean
    /// per-sample training loss.
    pub fn run_epoch(&mut self, train: &[Sample]) -> Result<f64> {
        if train.is_empty() {
            return Err(Error::invalid("training set is empty"));
        }
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut self.rng);
        let mut total = 0.0;
        for chunk in order.chunks(self.config.batch_size) {
            let batch: Vec<&Sample> = chunk.iter().map(|&i| &train[i]).collect();
            total += self.step(&batch)? * batch.len() as f64;
        }
        self.epoch += 1;
        Ok(total / train.len() as f64)
    }

    /// Eval-mode loss, accuracy and predicted labels.
    pub fn evaluate(&self, samples: &[Sample]) -> Result<Evaluation> {
        evaluate(
            &self.model,
            samples,
            self.config.batch_size,
            self.config.precision,
        )
    }

    /// Evaluates, then trains until `config.epochs` epochs are complete,
    /// evaluating after each one.
    pub fn fit(&mut self, train: &[Sample], eval: &[Sample]) -> Result<History> {
        self.fit_with(train, eval, |_, _| Ok(()))
    }

    /// [`Trainer::fit`] with a hook called after every epoch.
    pub fn fit_with(
        &mut self,
        train: &[Sample],
        eval: &[Sample],
        mut after_epoch: impl FnMut(&Trainer, &EpochRecord) -> Result<()>,
    ) -> Result<History> {
        let first = self.evaluate(eval)?;
        let mut history = History {
            initial: Some((first.loss, first.accuracy)),
            epochs: Vec::new(),
        };
        while self.epoch < self.config.epochs {
            let train_loss = self.run_epoch(train)?;
            let e = self.evaluate(eval)?;
            let record = EpochRecord {
                epoch: self.epoch,
                train_loss,
                eval_loss: e.loss,
                eval_accuracy: e.accuracy,
            };
            history.epochs.push(record);
            after_epoch(self, &record)?;
        }
        Ok(history)
    }
}

/// Eval-mode loss, accuracy and predictions of `model` over `samples`.
pub fn evaluate(
    model: &Model,
    samples: &[Sample],
    batch_size: usize,
    precision: Precision,
) -> Result<Evaluation> {
    if samples.is_empty() {
        return Err(Error::invalid("evaluation set is empty"));
    }
    let mut total = 0.0;
    let mut predictions = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(batch_size.max(1)) {
        let vols: Vec<&Tensor> = chunk.iter().map(|s| &s.volume).collect();
        let logits = model.eval_logits(&vols, precision)?;
        let labels: Vec<ClassLabel> = chunk.iter().map(|s| s.label).collect();
        total += batch_cross_entropy(&logits, &labels)? * chunk.len() as f64;
        for row in logits.data().chunks(logits.last_dim()) {
            predictions.push(ClassLabel::from_index(argmax(row))?);
        }
    }
    let correct = predictions
        .iter()
        .zip(samples)
        .filter(|(p, s)| **p == s.label)
        .count();
    Ok(Evaluation {
        loss: total / samples.len() as f64,
        accuracy: correct as f64 / samples.len() as f64,
        predictions,
    })
}

pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub history: History,
}

/// Loads both manifests, builds a fresh model and trains it.
pub fn train_loop(
    model_config: &ModelConfig,
    train: &Manifest,
    eval: &Manifest,
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    if train.is_empty() || eval.is_empty() {
        return Err(Error::invalid("train and eval manifests must be non-empty"));
    }
    let model = Model::new(model_config.clone())?;
    let mut trainer = Trainer::new(model, config.clone())?;
    let train = load_samples(train, model_config.input_dims)?;
    let eval = load_samples(eval, model_config.input_dims)?;
    let history = trainer.fit(&train, &eval)?;
    Ok(TrainOutcome {
        checkpoint: trainer.checkpoint(),
        history,
    })
}

/// Loads a checkpoint file and rebuilds its model.
pub fn load_model(path: &Path) -> Result<Model> {
    Ok(Trainer::from_checkpoint(&Checkpoint::load(path)?)?.into_model())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_logits_give_ln3() {
        for l in ClassLabel::ALL {
            let v = cross_entropy(&[0.0; 3], l).unwrap();
            assert!((v - 3f64.ln()).abs() < 1e-15);
        }
    }

    #[test]
    fn confident_correct_is_near_zero() {
        let v = cross_entropy(&[20.0, 0.0, 0.0], ClassLabel::AD).unwrap();
        assert!((0.0..=1e-6).contains(&v));
    }

    #[test]
    fn batch_is_mean_of_samples() {
        let rows = [
            [0.3, -1.2, 2.0],
            [5.0, 4.0, -3.0],
            [0.0, 0.1, 0.2],
            [-7.0, 1.0, 1.5],
        ];
        let labels = [
            ClassLabel::CN,
            ClassLabel::AD,
            ClassLabel::MCI,
            ClassLabel::AD,
        ];
        let per: f64 = rows
            .iter()
            .zip(labels)
            .map(|(r, l)| cross_entropy(r, l).unwrap())
            .sum::<f64>()
            / 4.0;
        let t = Tensor::new([4, 3], rows.concat()).unwrap();
        assert!((batch_cross_entropy(&t, &labels).unwrap() - per).abs() <= 1e-12);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let bad = [
            TrainConfig {
                lr: 0.0,
                ..Default::default()
            },
            TrainConfig {
                beta1: 1.0,
                ..Default::default()
            },
            TrainConfig {
                beta2: -0.1,
                ..Default::default()
            },
            TrainConfig {
                batch_size: 0,
                ..Default::default()
            },
        ];
        for c in bad {
            assert!(c.validate().is_err(), "{c:?}");
        }
    }
}
