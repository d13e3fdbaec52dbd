//! Binary CNN+MLP comparison model: the same convolutional backbone with a
//! single logit, trained with binary cross-entropy to tell single hits from
//! everything else, and thresholded on the sigmoid probability.

use std::fmt;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adam::{AdamConfig, AdamState};
use crate::autodiff::Graph;
use crate::checkpoint::{ModelCheckpoint, ModelKind, TrainingMetadata, FORMAT_VERSION};
use crate::dataset::{HitLabel, SpecklePattern};
use crate::error::{Error, Result};
use crate::network::{prepare_batch, Mode, Network, NetworkConfig};
use crate::tensor::{Real, Tensor};

pub const DEFAULT_THRESHOLD: f64 = 0.9;

/// Frames evaluated per forward pass at inference.
const EVAL_CHUNK: usize = 64;

/// Two-way label after relabeling: everything that is not a single hit is
/// lumped together.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BinaryLabel {
    SingleHit,
    NonSingleHit,
}

impl BinaryLabel {
    pub fn as_str(self) -> &'static str {
        match self {
            BinaryLabel::SingleHit => "single_hit",
            BinaryLabel::NonSingleHit => "non_single_hit",
        }
    }

    /// Training target: 1 for single hits.
    pub fn target(self) -> f64 {
        match self {
            BinaryLabel::SingleHit => 1.0,
            BinaryLabel::NonSingleHit => 0.0,
        }
    }
}

impl From<HitLabel> for BinaryLabel {
    fn from(l: HitLabel) -> Self {
        if l == HitLabel::SingleHit {
            BinaryLabel::SingleHit
        } else {
            BinaryLabel::NonSingleHit
        }
    }
}

impl fmt::Display for BinaryLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BaselineConfig {
    /// Backbone sizes; `output_dim` must be 1.
    pub network: NetworkConfig,
    pub threshold: f64,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        Self { network: NetworkConfig { output_dim: 1, ..NetworkConfig::default() }, threshold: DEFAULT_THRESHOLD }
    }
}

impl BaselineConfig {
    /// Same narrow backbone as [`NetworkConfig::desk`].
    pub fn desk() -> Self {
        Self { network: NetworkConfig { output_dim: 1, ..NetworkConfig::desk() }, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        self.network.validate()?;
        if self.network.output_dim != 1 {
            return Err(Error::config("output_dim", "the baseline emits a single logit"));
        }
        check_threshold(self.threshold)
    }
}

fn check_threshold(t: f64) -> Result<()> {
    if t > 0.0 && t < 1.0 {
        Ok(())
    } else {
        Err(Error::config("threshold", format!("{t} is outside (0, 1)")))
    }
}

/// Overflow-free logistic function.
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Single hit iff `probability ≥ threshold`.
pub fn decide(probability: f64, threshold: f64) -> BinaryLabel {
    if probability >= threshold {
        BinaryLabel::SingleHit
    } else {
        BinaryLabel::NonSingleHit
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BaselinePrediction {
    pub logit: f64,
    pub probability: f64,
    pub label: BinaryLabel,
}

#[derive(Clone, Debug)]
pub struct BaselineModel<T: Real = f32> {
    net: Network<T>,
    threshold: f64,
}

impl<T: Real> BaselineModel<T> {
    pub fn build(config: BaselineConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        Ok(Self { net: Network::build(config.network, seed)?, threshold: config.threshold })
    }

    pub fn network(&self) -> &Network<T> {
        &self.net
    }

    pub fn threshold(&self) -> f64 {
        self.threshold
    }

    pub fn config(&self) -> BaselineConfig {
        BaselineConfig { network: *self.net.config(), threshold: self.threshold }
    }

    /// Eval-mode logits of raw frames, one per frame.
    pub fn logits(&self, frames: &[&[f32]]) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(frames.len());
        for chunk in frames.chunks(EVAL_CHUNK) {
            let batch = prepare_batch::<T>(chunk, self.net.config().input_size)?;
            let mut g = Graph::new();
            let vars = self.net.register_frozen(&mut g);
            let x = g.input(batch);
            let (z, _) = self.net.forward(&mut g, &vars, x, Mode::Eval)?;
            out.extend(g.value(z).data().iter().map(|v| v.as_f64()));
        }
        Ok(out)
    }

    pub fn predict(&self, frames: &[&[f32]]) -> Result<Vec<BaselinePrediction>> {
        Ok(self
            .logits(frames)?
            .into_iter()
            .map(|logit| {
                let probability = sigmoid(logit);
                BaselinePrediction { logit, probability, label: decide(probability, self.threshold) }
            })
            .collect())
    }

    /// Fraction of `patterns` whose relabeled class is predicted correctly.
    pub fn accuracy(&self, patterns: &[SpecklePattern]) -> Result<f64> {
        if patterns.is_empty() {
            return Err(Error::Dataset("accuracy of an empty pattern list".into()));
        }
        let frames: Vec<&[f32]> = patterns.iter().map(|p| p.intensity.as_slice()).collect();
        let preds = self.predict(&frames)?;
        let hits = preds.iter().zip(patterns).filter(|(q, p)| q.label == BinaryLabel::from(p.label)).count();
        Ok(hits as f64 / patterns.len() as f64)
    }

    pub fn to_checkpoint(&self, metadata: TrainingMetadata) -> ModelCheckpoint {
        let net = self.net.cast::<f32>();
        ModelCheckpoint {
            format_version: FORMAT_VERSION,
            kind: ModelKind::Baseline,
            config: *net.config(),
            threshold: Some(self.threshold),
            params: net.params().to_vec(),
            buffers: net.buffers().to_vec(),
            metadata,
        }
    }

    pub fn from_checkpoint(ck: ModelCheckpoint) -> Result<Self> {
        if ck.kind != ModelKind::Baseline {
            return Err(Error::Checkpoint(format!("expected a baseline checkpoint, found {:?}", ck.kind)));
        }
        let threshold = ck.threshold.ok_or_else(|| Error::Checkpoint("baseline checkpoint without threshold".into()))?;
        BaselineConfig { network: ck.config, threshold }.validate()?;
        let net = Network::<f32>::from_parts(ck.config, ck.params, ck.buffers)?;
        Ok(Self { net: net.cast(), threshold })
    }

    pub fn save(&self, dir: impl AsRef<Path>, metadata: TrainingMetadata) -> Result<()> {
        self.to_checkpoint(metadata).save(dir)
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        Self::from_checkpoint(ModelCheckpoint::load(dir)?)
    }
}

/// Single-frame convenience: `(probability, label)`.
pub fn predict_single_hit<T: Real>(model: &BaselineModel<T>, image: &[f32]) -> Result<(f64, BinaryLabel)> {
    let p = model.predict(&[image])?[0];
    Ok((p.probability, p.label))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BaselineTrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub adam: AdamConfig,
}

impl Default for BaselineTrainConfig {
    fn default() -> Self {
        Self { batch_size: 64, epochs: 30, seed: 0, adam: AdamConfig::default() }
    }
}

impl BaselineTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::config("batch_size", "must be at least 2"));
        }
        let lr = self.adam.learning_rate;
        if !(lr.is_finite() && lr >= 0.0) {
            return Err(Error::config("learning_rate", "must be finite and non-negative"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BaselineEpoch {
    pub epoch: usize,
    /// Mean batch loss, weighted by batch size.
    pub train_loss: f64,
    /// Train-mode accuracy accumulated over the epoch's batches.
    pub train_accuracy: f64,
    pub validation_loss: Option<f64>,
    pub validation_accuracy: Option<f64>,
}

impl BaselineEpoch {
    pub fn to_record(&self) -> String {
        serde_json::to_string(self).expect("metrics serialize")
    }
}

pub struct BaselineFit<T: Real = f32> {
    pub model: BaselineModel<T>,
    pub best_epoch: usize,
    pub history: Vec<BaselineEpoch>,
}

fn targets<T: Real>(batch: &[&SpecklePattern]) -> Vec<T> {
    batch.iter().map(|p| T::from_f64(BinaryLabel::from(p.label).target())).collect()
}

/// Eval-mode mean BCE and accuracy.
fn evaluate<T: Real>(model: &BaselineModel<T>, data: &[SpecklePattern]) -> Result<(f64, f64)> {
    let frames: Vec<&[f32]> = data.iter().map(|p| p.intensity.as_slice()).collect();
    let logits = model.logits(&frames)?;
    let mut loss = 0.0;
    let mut correct = 0;
    for (z, p) in logits.iter().zip(data) {
        let t = BinaryLabel::from(p.label).target();
        loss += z.max(0.0) - z * t + (-z.abs()).exp().ln_1p();
        if decide(sigmoid(*z), model.threshold) == BinaryLabel::from(p.label) {
            correct += 1;
        }
    }
    let n = data.len() as f64;
    Ok((loss / n, correct as f64 / n))
}

/// Trains with BCE and Adam, keeping the parameters with the lowest
/// validation loss (the last ones when `val` is empty).
pub fn train_baseline<T: Real>(
    mut model: BaselineModel<T>,
    train: &[SpecklePattern],
    val: &[SpecklePattern],
    config: &BaselineTrainConfig,
    mut on_epoch: impl FnMut(&BaselineEpoch),
) -> Result<BaselineFit<T>> {
    config.validate()?;
    let singles = train.iter().filter(|p| p.label == HitLabel::SingleHit).count();
    if singles == 0 || singles == train.len() {
        return Err(Error::Dataset(format!(
            "baseline training needs both single and non-single hits ({singles} of {} are single)",
            train.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut adam = AdamState::new(config.adam, model.net.params().iter().map(|(_, t)| t));
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut history = Vec::new();
    let mut best: Option<(f64, usize, BaselineModel<T>)> = None;
    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        let (mut loss_sum, mut seen, mut correct) = (0.0, 0usize, 0usize);
        for chunk in order.chunks(config.batch_size) {
            if chunk.len() < 2 {
                continue;
            }
            let batch: Vec<&SpecklePattern> = chunk.iter().map(|&i| &train[i]).collect();
            let frames: Vec<&[f32]> = batch.iter().map(|p| p.intensity.as_slice()).collect();
            let t = targets::<T>(&batch);
            let input = prepare_batch::<T>(&frames, model.net.config().input_size)?;
            let mut g = Graph::new();
            let vars = model.net.register(&mut g);
            let x = g.input(input);
            let (z, stats) = model.net.forward(&mut g, &vars, x, Mode::Train)?;
            for (zi, ti) in g.value(z).data().iter().zip(&t) {
                let pred = decide(sigmoid(zi.as_f64()), model.threshold);
                if pred.target() == ti.as_f64() {
                    correct += 1;
                }
            }
            let loss = g.bce_with_logits(z, &t)?;
            loss_sum += g.value(loss).item().as_f64() * batch.len() as f64;
            seen += batch.len();
            g.backward(loss)?;
            let grads = model.net.collect_grads(&g, &vars);
            let grad_refs: Vec<&[T]> = grads.iter().map(Vec::as_slice).collect();
            let mut params: Vec<&mut Tensor<T>> = model.net.params_mut().collect();
            adam.step(&mut params, &grad_refs)?;
            model.net.update_running_stats(&stats);
        }
        let mut m = BaselineEpoch {
            epoch,
            train_loss: if seen > 0 { loss_sum / seen as f64 } else { 0.0 },
            train_accuracy: if seen > 0 { correct as f64 / seen as f64 } else { 0.0 },
            validation_loss: None,
            validation_accuracy: None,
        };
        if !val.is_empty() {
            let (vl, va) = evaluate(&model, val)?;
            m.validation_loss = Some(vl);
            m.validation_accuracy = Some(va);
            if best.as_ref().is_none_or(|(b, _, _)| vl < *b) {
                best = Some((vl, epoch, model.clone()));
            }
        }
        on_epoch(&m);
        history.push(m);
    }
    let (best_epoch, model) = match best {
        Some((_, e, m)) => (e, m),
        None => (config.epochs, model),
    };
    Ok(BaselineFit { model, best_epoch, history })
}
