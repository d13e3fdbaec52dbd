//! Triplet loss, semi-hard mining and the training loop.
//!
//! Anchor and positive always come from the same sample and share a label;
//! the negative carries a different label and may come from any sample.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adam::{AdamConfig, AdamState};
use crate::autodiff::{Graph, Var};
use crate::dataset::{HitLabel, SpecklePattern};
use crate::embedding::EmbeddingNet;
use crate::error::{Error, Result};
use crate::network::{prepare_batch, Mode};
use crate::tensor::{Real, Tensor};

/// Upper bound on the squared distance between two unit vectors.
pub const MAX_MARGIN: f64 = 4.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainerConfig {
    pub margin: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub triplets_per_batch: usize,
    pub seed: u64,
    pub adam: AdamConfig,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        Self { margin: 1.0, batch_size: 64, epochs: 30, triplets_per_batch: 64, seed: 0, adam: AdamConfig::default() }
    }
}

impl TrainerConfig {
    pub fn validate(&self) -> Result<()> {
        check_margin(self.margin)?;
        if self.batch_size < 2 {
            return Err(Error::config("batch_size", "must be at least 2"));
        }
        if self.triplets_per_batch == 0 {
            return Err(Error::config("triplets_per_batch", "must be positive"));
        }
        let lr = self.adam.learning_rate;
        if !(lr.is_finite() && lr >= 0.0) {
            return Err(Error::config("learning_rate", "must be finite and non-negative"));
        }
        Ok(())
    }
}

fn check_margin(alpha: f64) -> Result<()> {
    if alpha > 0.0 && alpha <= MAX_MARGIN {
        Ok(())
    } else {
        Err(Error::config("margin", format!("{alpha} is outside (0, 4]")))
    }
}

/// Indices into one mini-batch.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Triplet {
    pub anchor: usize,
    pub positive: usize,
    pub negative: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Difficulty {
    Easy,
    SemiHard,
    Hard,
}

/// `d2_an ≤ d2_ap` is hard, `d2_an ≥ d2_ap + α` is easy, semi-hard in between.
pub fn classify_triplet_difficulty(d2_ap: f64, d2_an: f64, alpha: f64) -> Difficulty {
    if d2_an <= d2_ap {
        Difficulty::Hard
    } else if d2_an < d2_ap + alpha {
        Difficulty::SemiHard
    } else {
        Difficulty::Easy
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DifficultyCounts {
    pub easy: usize,
    pub semi_hard: usize,
    pub hard: usize,
}

impl DifficultyCounts {
    fn add(&mut self, d: Difficulty) {
        match d {
            Difficulty::Easy => self.easy += 1,
            Difficulty::SemiHard => self.semi_hard += 1,
            Difficulty::Hard => self.hard += 1,
        }
    }

    fn merge(&mut self, o: &Self) {
        self.easy += o.easy;
        self.semi_hard += o.semi_hard;
        self.hard += o.hard;
    }

    pub fn total(&self) -> usize {
        self.easy + self.semi_hard + self.hard
    }
}

/// Why mining came back empty.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MiningDiagnostic {
    /// No two batch members share both sample and label.
    NoAnchorPositivePairs,
    /// Pairs exist but no negative falls inside the margin band.
    NoSemiHardNegatives,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MiningOutcome {
    pub triplets: Vec<Triplet>,
    /// Every provenance-valid triplet in the batch, by difficulty.
    pub counts: DifficultyCounts,
    pub diagnostic: Option<MiningDiagnostic>,
}

/// Row-major `B×B` squared Euclidean distances, accumulated in f64.
pub fn pairwise_sq_distances<T: Real>(emb: &Tensor<T>) -> Vec<f64> {
    let b = emb.shape()[0];
    let mut out = vec![0.0; b * b];
    for i in 0..b {
        for j in i + 1..b {
            let d: f64 = emb.row(i).iter().zip(emb.row(j)).map(|(&x, &y)| (x.as_f64() - y.as_f64()).powi(2)).sum();
            out[i * b + j] = d;
            out[j * b + i] = d;
        }
    }
    out
}

/// Picks up to `want` semi-hard triplets uniformly at random from all valid
/// ones; `None` returns every valid triplet. Output is in (anchor, positive,
/// negative) order.
pub fn mine_semi_hard<T: Real>(
    emb: &Tensor<T>,
    labels: &[HitLabel],
    sample_ids: &[u32],
    alpha: f64,
    rng: &mut impl rand::Rng,
    want: Option<usize>,
) -> Result<MiningOutcome> {
    check_margin(alpha)?;
    let b = match emb.shape() {
        [b, _] => *b,
        s => return Err(Error::shape("mine_semi_hard", format!("expected [B, d], got {s:?}"))),
    };
    if labels.len() != b || sample_ids.len() != b {
        return Err(Error::shape(
            "mine_semi_hard",
            format!("{b} embeddings, {} labels, {} sample ids", labels.len(), sample_ids.len()),
        ));
    }
    let d = pairwise_sq_distances(emb);
    let mut counts = DifficultyCounts::default();
    let mut candidates = Vec::new();
    let mut pairs = 0usize;
    for a in 0..b {
        for p in 0..b {
            if a == p || labels[a] != labels[p] || sample_ids[a] != sample_ids[p] {
                continue;
            }
            pairs += 1;
            let dap = d[a * b + p];
            for n in 0..b {
                if labels[n] == labels[a] {
                    continue;
                }
                let diff = classify_triplet_difficulty(dap, d[a * b + n], alpha);
                counts.add(diff);
                if diff == Difficulty::SemiHard {
                    candidates.push(Triplet { anchor: a, positive: p, negative: n });
                }
            }
        }
    }
    let diagnostic = if pairs == 0 {
        Some(MiningDiagnostic::NoAnchorPositivePairs)
    } else if candidates.is_empty() {
        Some(MiningDiagnostic::NoSemiHardNegatives)
    } else {
        None
    };
    let triplets = match want {
        Some(k) if k < candidates.len() => {
            let mut picked: Vec<usize> = rand::seq::index::sample(rng, candidates.len(), k).into_vec();
            picked.sort_unstable();
            picked.into_iter().map(|i| candidates[i]).collect()
        }
        _ => candidates,
    };
    Ok(MiningOutcome { triplets, counts, diagnostic })
}

/// `Σ [α + ‖a−p‖² − ‖a−n‖²]₊` over the triplets, recorded on `g` so it can be
/// differentiated back into `emb`.
pub fn triplet_loss_graph<T: Real>(g: &mut Graph<T>, emb: Var, triplets: &[Triplet], alpha: T) -> Result<Var> {
    let a = g.gather_rows(emb, &triplets.iter().map(|t| t.anchor).collect::<Vec<_>>())?;
    let p = g.gather_rows(emb, &triplets.iter().map(|t| t.positive).collect::<Vec<_>>())?;
    let n = g.gather_rows(emb, &triplets.iter().map(|t| t.negative).collect::<Vec<_>>())?;
    let ap = g.sub(a, p)?;
    let ap = g.square(ap);
    let d_ap = g.sum_rows(ap)?;
    let an = g.sub(a, n)?;
    let an = g.square(an);
    let d_an = g.sum_rows(an)?;
    let gap = g.sub(d_ap, d_an)?;
    let shifted = g.add_scalar(gap, alpha);
    let hinge = g.relu(shifted);
    Ok(g.sum(hinge))
}

#[derive(Clone, Debug, PartialEq)]
pub struct TripletLoss<T> {
    pub value: T,
    /// Set when there were no triplets; `value` is then 0.
    pub empty: bool,
}

/// Loss over row-aligned anchor/positive/negative matrices.
pub fn triplet_loss<T: Real>(
    anchors: &Tensor<T>,
    positives: &Tensor<T>,
    negatives: &Tensor<T>,
    alpha: f64,
) -> Result<TripletLoss<T>> {
    check_margin(alpha)?;
    let n = anchors.shape().first().copied().unwrap_or(0);
    if anchors.shape() != positives.shape() || anchors.shape() != negatives.shape() || anchors.shape().len() != 2 {
        return Err(Error::shape(
            "triplet_loss",
            format!("{:?} / {:?} / {:?}", anchors.shape(), positives.shape(), negatives.shape()),
        ));
    }
    if n == 0 {
        return Ok(TripletLoss { value: T::zero(), empty: true });
    }
    let stacked = Tensor::stack(&[anchors, positives, negatives])?.reshape([3 * n, anchors.shape()[1]])?;
    let mut g = Graph::new();
    let emb = g.input(stacked);
    let triplets: Vec<Triplet> = (0..n).map(|i| Triplet { anchor: i, positive: n + i, negative: 2 * n + i }).collect();
    let loss = triplet_loss_graph(&mut g, emb, &triplets, T::from_f64(alpha))?;
    Ok(TripletLoss { value: g.value(loss).item(), empty: false })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    /// Mean per-triplet loss over the mined triplets of the epoch.
    pub mean_loss: f64,
    pub batches: usize,
    pub steps: usize,
    pub mined_triplets: usize,
    pub counts: DifficultyCounts,
    /// No batch produced a single semi-hard triplet; the model is unchanged.
    pub no_triplets: bool,
    pub validation_loss: Option<f64>,
}

impl EpochMetrics {
    /// One JSON object per line, for logs.
    pub fn to_record(&self) -> String {
        serde_json::to_string(self).expect("metrics serialize")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValidationMetrics {
    /// Mean hinge over every provenance-valid triplet, easy ones included.
    pub mean_loss: f64,
    pub counts: DifficultyCounts,
}

/// Owns the model being trained plus its optimizer state and shuffling rng.
pub struct Trainer<T: Real = f32> {
    config: TrainerConfig,
    model: EmbeddingNet<T>,
    adam: AdamState<T>,
    rng: ChaCha8Rng,
    epoch: usize,
}

impl<T: Real> Trainer<T> {
    pub fn new(model: EmbeddingNet<T>, config: TrainerConfig) -> Result<Self> {
        config.validate()?;
        let adam = AdamState::new(config.adam, model.network().params().iter().map(|(_, t)| t));
        Ok(Self { config, model, adam, rng: ChaCha8Rng::seed_from_u64(config.seed), epoch: 0 })
    }

    pub fn model(&self) -> &EmbeddingNet<T> {
        &self.model
    }

    pub fn into_model(self) -> EmbeddingNet<T> {
        self.model
    }

    pub fn config(&self) -> &TrainerConfig {
        &self.config
    }

    pub fn epochs_done(&self) -> usize {
        self.epoch
    }

    /// One pass over `data` in shuffled mini-batches.
    pub fn train_epoch(&mut self, data: &[SpecklePattern]) -> Result<EpochMetrics> {
        if data.len() < 2 {
            return Err(Error::Dataset(format!("training needs at least 2 patterns, got {}", data.len())));
        }
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut self.rng);
        let mut metrics = EpochMetrics {
            epoch: self.epoch + 1,
            mean_loss: 0.0,
            batches: 0,
            steps: 0,
            mined_triplets: 0,
            counts: DifficultyCounts::default(),
            no_triplets: true,
            validation_loss: None,
        };
        let mut loss_sum = 0.0;
        for chunk in order.chunks(self.config.batch_size) {
            // a single-frame batch has no batch statistics to normalize with
            if chunk.len() < 2 {
                continue;
            }
            metrics.batches += 1;
            let batch: Vec<&SpecklePattern> = chunk.iter().map(|&i| &data[i]).collect();
            let (stepped, counts) = self.step(&batch)?;
            metrics.counts.merge(&counts);
            if let Some((loss, mined)) = stepped {
                loss_sum += loss;
                metrics.mined_triplets += mined;
                metrics.steps += 1;
                metrics.no_triplets = false;
            }
        }
        if metrics.mined_triplets > 0 {
            metrics.mean_loss = loss_sum / metrics.mined_triplets as f64;
        }
        self.epoch += 1;
        Ok(metrics)
    }

    /// Returns `(loss, triplets)` when an update happened, plus the batch's
    /// difficulty counts either way.
    fn step(&mut self, batch: &[&SpecklePattern]) -> Result<(Option<(f64, usize)>, DifficultyCounts)> {
        let frames: Vec<&[f32]> = batch.iter().map(|p| p.intensity.as_slice()).collect();
        let labels: Vec<HitLabel> = batch.iter().map(|p| p.label).collect();
        let samples: Vec<u32> = batch.iter().map(|p| p.sample_id).collect();
        let input = prepare_batch::<T>(&frames, self.model.input_size())?;

        let mut g = Graph::new();
        let vars = self.model.network().register(&mut g);
        let x = g.input(input);
        let (emb, stats) = self.model.forward(&mut g, &vars, x, Mode::Train)?;
        let mined = mine_semi_hard(
            g.value(emb),
            &labels,
            &samples,
            self.config.margin,
            &mut self.rng,
            Some(self.config.triplets_per_batch),
        )?;
        if mined.triplets.is_empty() {
            return Ok((None, mined.counts));
        }
        let loss = triplet_loss_graph(&mut g, emb, &mined.triplets, T::from_f64(self.config.margin))?;
        let value = g.value(loss).item().as_f64();
        g.backward(loss)?;
        let grads = self.model.network().collect_grads(&g, &vars);
        let grad_refs: Vec<&[T]> = grads.iter().map(Vec::as_slice).collect();
        let net = self.model.network_mut();
        let mut params: Vec<&mut Tensor<T>> = net.params_mut().collect();
        self.adam.step(&mut params, &grad_refs)?;
        net.update_running_stats(&stats);
        Ok((Some((value, mined.triplets.len())), mined.counts))
    }

    /// Eval-mode loss on held-out data, batched in the given order. Uses all
    /// valid triplets rather than a random semi-hard subset, so it needs no
    /// rng and is comparable across epochs.
    pub fn validate(&self, data: &[SpecklePattern]) -> Result<ValidationMetrics> {
        let mut counts = DifficultyCounts::default();
        let mut total = 0.0;
        let alpha = self.config.margin;
        for chunk in data.chunks(self.config.batch_size) {
            let frames: Vec<&[f32]> = chunk.iter().map(|p| p.intensity.as_slice()).collect();
            let emb = self.model.embed_frames(&frames)?;
            let d = pairwise_sq_distances(&emb);
            let b = chunk.len();
            for a in 0..b {
                for p in 0..b {
                    let (pa, pp) = (&chunk[a], &chunk[p]);
                    if a == p || pa.label != pp.label || pa.sample_id != pp.sample_id {
                        continue;
                    }
                    for (n, pn) in chunk.iter().enumerate() {
                        if pn.label == pa.label {
                            continue;
                        }
                        let (dap, dan) = (d[a * b + p], d[a * b + n]);
                        counts.add(classify_triplet_difficulty(dap, dan, alpha));
                        total += (alpha + dap - dan).max(0.0);
                    }
                }
            }
        }
        let n = counts.total();
        Ok(ValidationMetrics { mean_loss: if n > 0 { total / n as f64 } else { 0.0 }, counts })
    }

    /// Runs `config.epochs` epochs and returns the model with the lowest
    /// validation loss (the last model when `val` is empty). `on_epoch` sees
    /// every epoch's metrics as they are produced.
    pub fn fit(
        mut self,
        train: &[SpecklePattern],
        val: &[SpecklePattern],
        mut on_epoch: impl FnMut(&EpochMetrics),
    ) -> Result<FitOutcome<T>> {
        let mut history = Vec::new();
        let mut best: Option<(f64, usize, EmbeddingNet<T>)> = None;
        for _ in 0..self.config.epochs {
            let mut m = self.train_epoch(train)?;
            if !val.is_empty() {
                let v = self.validate(val)?.mean_loss;
                m.validation_loss = Some(v);
                if best.as_ref().is_none_or(|(b, _, _)| v < *b) {
                    best = Some((v, m.epoch, self.model.clone()));
                }
            }
            on_epoch(&m);
            history.push(m);
        }
        let last_epoch = self.epoch;
        let (best_epoch, model) = match best {
            Some((_, e, m)) => (e, m),
            None => (last_epoch, self.model),
        };
        Ok(FitOutcome { model, best_epoch, history })
    }
}

pub struct FitOutcome<T: Real = f32> {
    pub model: EmbeddingNet<T>,
    pub best_epoch: usize,
    pub history: Vec<EpochMetrics>,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn margin_outside_range_is_rejected() {
        for bad in [0.0, -1.0, 4.0001, f64::NAN] {
            let cfg = TrainerConfig { margin: bad, ..Default::default() };
            assert!(cfg.validate().is_err(), "{bad}");
        }
        assert!(TrainerConfig { margin: 4.0, ..Default::default() }.validate().is_ok());
    }

    #[test]
    fn difficulty_boundaries() {
        assert_eq!(classify_triplet_difficulty(1.0, 1.0, 1.0), Difficulty::Hard);
        assert_eq!(classify_triplet_difficulty(1.0, 2.0, 1.0), Difficulty::Easy);
        assert_eq!(classify_triplet_difficulty(1.0, 1.999, 1.0), Difficulty::SemiHard);
    }

    #[test]
    fn empty_triplet_set_is_flagged() {
        let z = Tensor::<f32>::zeros([0, 4]);
        let l = triplet_loss(&z, &z, &z, 1.0).unwrap();
        assert!(l.empty);
        assert_eq!(l.value, 0.0);
    }
}
