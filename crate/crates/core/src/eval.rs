//! Confusion matrices, few-shot episodes and the robustness protocols
//! (fluence sweep, particle-size sweep, partial-detector comparison).
//!
//! Every protocol is a pure function of its inputs: episode sampling draws
//! from counter-keyed streams indexed by `(episode, group)`, so results do not
//! depend on evaluation order or on which other conditions are run.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::baseline::{BaselineModel, BinaryLabel};
use crate::dataset::{HitLabel, SpecklePattern};
use crate::embedding::EmbeddingNet;
use crate::error::{Error, Result};
use crate::fewshot::{classify, SupportEntry, SupportSet};
use crate::simulator::{build_dataset, size_bin_edges, stream_rng, SimulationConfig, SIZE_BINS};

const TAG_EPISODE: u64 = 13;

/// Frames per embedding call when embedding a whole test pool.
const EMBED_CHUNK: usize = 32;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub classes: Vec<String>,
    /// `counts[true][predicted]`.
    pub counts: Vec<Vec<u64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub accuracy: f64,
    pub per_class_f1: Vec<f64>,
    pub macro_f1: f64,
}

impl ConfusionMatrix {
    pub fn new(classes: Vec<String>) -> Self {
        let n = classes.len();
        Self { classes, counts: vec![vec![0; n]; n] }
    }

    pub fn for_labels<L: ToString>(labels: &[L]) -> Self {
        Self::new(labels.iter().map(ToString::to_string).collect())
    }

    pub fn add(&mut self, truth: usize, predicted: usize) {
        self.counts[truth][predicted] += 1;
    }

    pub fn index_of(&self, class: &str) -> Option<usize> {
        self.classes.iter().position(|c| c == class)
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.classes != self.classes {
            return Err(Error::Invalid("confusion matrices over different class lists".into()));
        }
        for (row, o) in self.counts.iter_mut().zip(&other.counts) {
            for (c, v) in row.iter_mut().zip(o) {
                *c += v;
            }
        }
        Ok(())
    }

    /// Accuracy, per-class F-1 (0 when precision + recall = 0) and their
    /// unweighted mean.
    pub fn metrics(&self) -> Result<Metrics> {
        let total = self.total();
        if total == 0 {
            return Err(Error::Invalid("metrics of an empty confusion matrix".into()));
        }
        let n = self.classes.len();
        let trace: u64 = (0..n).map(|i| self.counts[i][i]).sum();
        let per_class_f1: Vec<f64> = (0..n)
            .map(|k| {
                let tp = self.counts[k][k] as f64;
                let predicted: u64 = (0..n).map(|t| self.counts[t][k]).sum();
                let actual: u64 = self.counts[k].iter().sum();
                let p = if predicted > 0 { tp / predicted as f64 } else { 0.0 };
                let r = if actual > 0 { tp / actual as f64 } else { 0.0 };
                if p + r > 0.0 {
                    2.0 * p * r / (p + r)
                } else {
                    0.0
                }
            })
            .collect();
        let macro_f1 = per_class_f1.iter().sum::<f64>() / n as f64;
        Ok(Metrics { accuracy: trace as f64 / total as f64, per_class_f1, macro_f1 })
    }

    /// Collapses every class other than `single_hit` into `non_single_hit`.
    pub fn to_binary(&self) -> ConfusionMatrix {
        let single = HitLabel::SingleHit.as_str();
        let bin = |c: &str| usize::from(c != single);
        let mut out = ConfusionMatrix::for_labels(&[BinaryLabel::SingleHit, BinaryLabel::NonSingleHit]);
        for (t, row) in self.counts.iter().enumerate() {
            for (p, &v) in row.iter().enumerate() {
                out.counts[bin(&self.classes[t])][bin(&self.classes[p])] += v;
            }
        }
        out
    }
}

/// Unit embeddings of `patterns`, in order. Eval-mode embedding is per
/// frame, so chunking does not change the values.
pub fn embed_patterns(model: &EmbeddingNet<f32>, patterns: &[SpecklePattern]) -> Result<Vec<Vec<f32>>> {
    let chunks: Vec<Vec<Vec<f32>>> = patterns
        .par_chunks(EMBED_CHUNK)
        .map(|chunk| {
            let frames: Vec<&[f32]> = chunk.iter().map(|p| p.intensity.as_slice()).collect();
            let emb = model.embed_frames(&frames)?;
            Ok((0..chunk.len()).map(|i| emb.row(i).to_vec()).collect())
        })
        .collect::<Result<_>>()?;
    Ok(chunks.into_iter().flatten().collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FewShotConfig {
    pub shots: usize,
    pub episodes: usize,
    pub seed: u64,
    /// Ways, in support-set order.
    pub classes: Vec<HitLabel>,
    /// Draw supports and queries within each sample separately (unseen
    /// species are classified against their own few labels); otherwise pool
    /// every sample together.
    pub per_sample: bool,
}

impl Default for FewShotConfig {
    fn default() -> Self {
        Self { shots: 5, episodes: 20, seed: 0, classes: vec![HitLabel::SingleHit, HitLabel::MultiHit], per_sample: true }
    }
}

impl FewShotConfig {
    pub fn validate(&self) -> Result<()> {
        if self.shots == 0 {
            return Err(Error::config("shots", "must be at least 1"));
        }
        if self.episodes == 0 {
            return Err(Error::config("episodes", "must be at least 1"));
        }
        if self.classes.is_empty() {
            return Err(Error::config("classes", "needs at least one class"));
        }
        let mut seen = self.classes.clone();
        seen.sort_by_key(|l| l.as_str());
        seen.dedup();
        if seen.len() != self.classes.len() {
            return Err(Error::config("classes", "lists a class twice"));
        }
        Ok(())
    }
}

/// One classified query within one episode.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QueryRecord {
    pub episode: usize,
    pub sample_id: u32,
    pub pattern_id: u64,
    pub truth: HitLabel,
    pub predicted: HitLabel,
    /// Mean squared distance per class, in `classes` order.
    pub mean_distances: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EntryMetrics {
    pub sample_id: u32,
    pub queries: u64,
    pub accuracy: f64,
    pub macro_f1: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FewShotOutcome {
    pub classes: Vec<HitLabel>,
    pub records: Vec<QueryRecord>,
    pub episode_accuracy: Vec<f64>,
    pub confusion: ConfusionMatrix,
}

impl FewShotOutcome {
    pub fn mean_accuracy(&self) -> f64 {
        mean_std(&self.episode_accuracy).0
    }

    pub fn accuracy_std(&self) -> f64 {
        mean_std(&self.episode_accuracy).1
    }

    /// Per-sample metrics recomputed from the query records.
    pub fn per_entry(&self) -> Result<Vec<EntryMetrics>> {
        let mut by: BTreeMap<u32, ConfusionMatrix> = BTreeMap::new();
        for r in &self.records {
            let cm = by.entry(r.sample_id).or_insert_with(|| ConfusionMatrix::for_labels(&self.classes));
            cm.add(class_index(&self.classes, r.truth), class_index(&self.classes, r.predicted));
        }
        by.into_iter()
            .map(|(sample_id, cm)| {
                let m = cm.metrics()?;
                Ok(EntryMetrics { sample_id, queries: cm.total(), accuracy: m.accuracy, macro_f1: m.macro_f1 })
            })
            .collect()
    }
}

fn class_index(classes: &[HitLabel], l: HitLabel) -> usize {
    classes.iter().position(|&c| c == l).expect("label among evaluated classes")
}

/// Population mean and standard deviation.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (0.0, 0.0);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Confusion matrix recounted from query records.
pub fn confusion_from_records(classes: &[HitLabel], records: &[QueryRecord]) -> ConfusionMatrix {
    let mut cm = ConfusionMatrix::for_labels(classes);
    for r in records {
        cm.add(class_index(classes, r.truth), class_index(classes, r.predicted));
    }
    cm
}

/// Groups pattern indices by sample (or into one pool), keeping only the
/// evaluated classes, and checks every class can supply `shots` supports
/// plus at least one query.
fn episode_groups(patterns: &[SpecklePattern], cfg: &FewShotConfig) -> Result<Vec<(Option<u32>, Vec<Vec<usize>>)>> {
    let mut groups: BTreeMap<Option<u32>, Vec<Vec<usize>>> = BTreeMap::new();
    for (i, p) in patterns.iter().enumerate() {
        if let Some(k) = cfg.classes.iter().position(|&c| c == p.label) {
            let key = cfg.per_sample.then_some(p.sample_id);
            groups.entry(key).or_insert_with(|| vec![Vec::new(); cfg.classes.len()])[k].push(i);
        }
    }
    if groups.is_empty() {
        return Err(Error::Dataset("no test pattern carries an evaluated label".into()));
    }
    for (key, members) in &groups {
        for (k, m) in members.iter().enumerate() {
            if m.len() < cfg.shots + 1 {
                let class = match key {
                    Some(s) => format!("{} (sample {s})", cfg.classes[k]),
                    None => cfg.classes[k].to_string(),
                };
                return Err(Error::ClassTooSmall { class, have: m.len(), need: cfg.shots + 1 });
            }
        }
    }
    Ok(groups.into_iter().collect())
}

/// Few-shot episodes over precomputed embeddings (`embeddings[i]` belongs to
/// `patterns[i]`).
pub fn fewshot_on_embeddings(
    patterns: &[SpecklePattern],
    embeddings: &[Vec<f32>],
    cfg: &FewShotConfig,
) -> Result<FewShotOutcome> {
    cfg.validate()?;
    if patterns.len() != embeddings.len() {
        return Err(Error::shape("fewshot_eval", format!("{} patterns, {} embeddings", patterns.len(), embeddings.len())));
    }
    let groups = episode_groups(patterns, cfg)?;
    let per_episode: Vec<Vec<QueryRecord>> = (0..cfg.episodes)
        .into_par_iter()
        .map(|episode| {
            let mut out = Vec::new();
            for (key, members) in &groups {
                let group = key.map_or(u64::from(u32::MAX) + 1, u64::from);
                let mut rng = stream_rng(cfg.seed, TAG_EPISODE, ((episode as u64) << 33) | group);
                let mut shuffled = members.clone();
                for m in &mut shuffled {
                    m.sort_unstable();
                    m.shuffle(&mut rng);
                }
                let support = SupportSet::from_embeddings(shuffled.iter().enumerate().flat_map(|(k, m)| {
                    m[..cfg.shots].iter().map(move |&i| {
                        (cfg.classes[k], SupportEntry { source_id: patterns[i].id, embedding: embeddings[i].clone() })
                    })
                }))?;
                let mut queries: Vec<usize> = shuffled.iter().flat_map(|m| m[cfg.shots..].iter().copied()).collect();
                queries.sort_unstable();
                for i in queries {
                    let r = classify(&embeddings[i], &support)?;
                    out.push(QueryRecord {
                        episode,
                        sample_id: patterns[i].sample_id,
                        pattern_id: patterns[i].id,
                        truth: patterns[i].label,
                        predicted: r.predicted,
                        mean_distances: r.distances.iter().map(|d| d.mean).collect(),
                    });
                }
            }
            Ok(out)
        })
        .collect::<Result<_>>()?;
    let episode_accuracy = per_episode
        .iter()
        .map(|recs| recs.iter().filter(|r| r.truth == r.predicted).count() as f64 / recs.len() as f64)
        .collect();
    let records: Vec<QueryRecord> = per_episode.into_iter().flatten().collect();
    let confusion = confusion_from_records(&cfg.classes, &records);
    Ok(FewShotOutcome { classes: cfg.classes.clone(), records, episode_accuracy, confusion })
}

/// Embeds the test pool once, then runs `cfg.episodes` few-shot episodes.
/// The pool must not share lineage with the model's training sources.
pub fn run_fewshot_eval(model: &EmbeddingNet<f32>, patterns: &[SpecklePattern], cfg: &FewShotConfig) -> Result<FewShotOutcome> {
    cfg.validate()?;
    episode_groups(patterns, cfg)?;
    let emb = embed_patterns(model, patterns)?;
    fewshot_on_embeddings(patterns, &emb, cfg)
}

/// Few-shot episodes for each support size in `shots`, as a report.
pub fn run_fewshot_report(
    model: &EmbeddingNet<f32>,
    patterns: &[SpecklePattern],
    shots: &[usize],
    cfg: &FewShotConfig,
) -> Result<ExperimentReport> {
    if shots.is_empty() {
        return Err(Error::config("shots", "needs at least one support size"));
    }
    let emb = embed_patterns(model, patterns)?;
    let mut conditions = Vec::new();
    for &s in shots {
        let out = fewshot_on_embeddings(patterns, &emb, &FewShotConfig { shots: s, ..cfg.clone() })?;
        let mut row = ConditionResult::fewshot("specklenn", &out)?;
        row.shots = Some(s);
        conditions.push(row);
    }
    Ok(ExperimentReport {
        protocol: "fewshot".into(),
        config: serde_json::json!({ "fewshot": cfg, "shots": shots }),
        conditions,
        summary: BTreeMap::new(),
    })
}

/// One row of a report: a model evaluated under one condition.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConditionResult {
    pub model: String,
    pub shots: Option<usize>,
    pub fluence_factor: Option<f64>,
    pub visible_fraction: Option<f64>,
    pub size_bin: Option<usize>,
    pub queries: u64,
    /// Mean over episodes for few-shot rows, pooled otherwise.
    pub accuracy: f64,
    pub accuracy_std: Option<f64>,
    /// Single-hit-positive F-1.
    pub f1: f64,
    pub macro_f1: f64,
    pub confusion: ConfusionMatrix,
    pub per_entry: Vec<EntryMetrics>,
}

impl ConditionResult {
    fn fewshot(model: &str, out: &FewShotOutcome) -> Result<Self> {
        let m = out.confusion.metrics()?;
        let f1 = out.confusion.to_binary().metrics()?.per_class_f1[0];
        Ok(Self {
            model: model.into(),
            shots: None,
            fluence_factor: None,
            visible_fraction: None,
            size_bin: None,
            queries: out.confusion.total(),
            accuracy: out.mean_accuracy(),
            accuracy_std: Some(out.accuracy_std()),
            f1,
            macro_f1: m.macro_f1,
            confusion: out.confusion.clone(),
            per_entry: out.per_entry()?,
        })
    }

    fn pooled(model: &str, cm: ConfusionMatrix) -> Result<Self> {
        let m = cm.metrics()?;
        let f1 = cm.to_binary().metrics()?.per_class_f1[0];
        Ok(Self {
            model: model.into(),
            shots: None,
            fluence_factor: None,
            visible_fraction: None,
            size_bin: None,
            queries: cm.total(),
            accuracy: m.accuracy,
            accuracy_std: None,
            f1,
            macro_f1: m.macro_f1,
            confusion: cm,
            per_entry: Vec::new(),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub protocol: String,
    /// Echo of the protocol configuration.
    pub config: serde_json::Value,
    pub conditions: Vec<ConditionResult>,
    /// Protocol-level scalars (e.g. rank correlations).
    pub summary: BTreeMap<String, f64>,
}

const CSV_HEADER: &str =
    "protocol,model,shots,fluence_factor,visible_fraction,size_bin,queries,accuracy,accuracy_std,f1,macro_f1";

impl ExperimentReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// One row per condition; empty cells for fields a protocol does not vary.
    pub fn to_csv(&self) -> String {
        fn opt<T: ToString>(v: Option<T>) -> String {
            v.map(|x| x.to_string()).unwrap_or_default()
        }
        let mut s = String::from(CSV_HEADER);
        s.push('\n');
        for c in &self.conditions {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{},{},{},{}",
                self.protocol,
                c.model,
                opt(c.shots),
                opt(c.fluence_factor),
                opt(c.visible_fraction),
                opt(c.size_bin),
                c.queries,
                c.accuracy,
                opt(c.accuracy_std),
                c.f1,
                c.macro_f1
            );
        }
        s
    }

    /// Writes `<protocol>.json` and `<protocol>.csv` into `dir`.
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (ext, body) in [("json", self.to_json()), ("csv", self.to_csv())] {
            let path = dir.join(format!("{}.{ext}", self.protocol));
            std::fs::write(&path, body).map_err(|e| Error::io(&path, e))?;
        }
        Ok(())
    }

    pub fn find(&self, pred: impl Fn(&ConditionResult) -> bool) -> Option<&ConditionResult> {
        self.conditions.iter().find(|c| pred(c))
    }
}

/// `10^-2, 10^-1.5, …, 10^2`.
pub fn default_fluence_grid() -> Vec<f64> {
    (0..9).map(|k| 10f64.powf(-2.0 + 0.5 * k as f64)).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FluenceSweepConfig {
    /// Test samples and categories; `fluence_scale` is overridden per factor.
    pub simulation: SimulationConfig,
    pub factors: Vec<f64>,
    pub shots: Vec<usize>,
    pub episodes: usize,
    pub seed: u64,
    pub classes: Vec<HitLabel>,
}

impl Default for FluenceSweepConfig {
    fn default() -> Self {
        Self {
            simulation: SimulationConfig { sample_ids: (10..15).collect(), ..SimulationConfig::default() },
            factors: default_fluence_grid(),
            shots: vec![1, 5, 20],
            episodes: 20,
            seed: 0,
            classes: vec![HitLabel::SingleHit, HitLabel::MultiHit],
        }
    }
}

/// Regenerates the test set at each fluence factor (same particles and
/// orientations, rescaled fluence) and runs per-sample few-shot episodes for
/// each support size.
pub fn run_fluence_sweep(model: &EmbeddingNet<f32>, cfg: &FluenceSweepConfig) -> Result<ExperimentReport> {
    if cfg.factors.is_empty() || cfg.factors.iter().any(|f| !(f.is_finite() && *f > 0.0)) {
        return Err(Error::config("factors", "must be a non-empty list of finite positive numbers"));
    }
    let fs = |shots| FewShotConfig { shots, episodes: cfg.episodes, seed: cfg.seed, classes: cfg.classes.clone(), per_sample: true };
    for &s in &cfg.shots {
        fs(s).validate()?;
    }
    let mut conditions = Vec::new();
    for &factor in &cfg.factors {
        let sim = SimulationConfig { fluence_scale: factor, ..cfg.simulation.clone() };
        let ds = build_dataset(&sim)?;
        let emb = embed_patterns(model, &ds.patterns)?;
        for &shots in &cfg.shots {
            let out = fewshot_on_embeddings(&ds.patterns, &emb, &fs(shots))?;
            let mut row = ConditionResult::fewshot("specklenn", &out)?;
            row.shots = Some(shots);
            row.fluence_factor = Some(factor);
            conditions.push(row);
        }
    }
    Ok(ExperimentReport {
        protocol: "fluence_sweep".into(),
        config: serde_json::to_value(cfg).expect("config serializes"),
        conditions,
        summary: BTreeMap::new(),
    })
}

/// Validity mask with only a corner square covering `fraction` of the frame
/// visible (the top-left quadrant for 0.25).
pub fn visible_region(side: usize, fraction: f64) -> Result<Vec<bool>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::config("visible_fraction", format!("{fraction} is outside (0, 1]")));
    }
    let k = ((fraction.sqrt() * side as f64).round() as usize).clamp(1, side);
    Ok((0..side * side).map(|i| i / side < k && i % side < k).collect())
}

/// Zeroes and invalidates everything outside `visible`.
pub fn restrict_to(p: &SpecklePattern, visible: &[bool]) -> SpecklePattern {
    let mut out = p.clone();
    for ((v, m), &keep) in out.intensity.iter_mut().zip(out.mask.iter_mut()).zip(visible) {
        if !keep {
            *v = 0.0;
            *m = false;
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskingConfig {
    pub visible_fractions: Vec<f64>,
    pub shots: usize,
    pub episodes: usize,
    pub seed: u64,
    pub classes: Vec<HitLabel>,
    pub per_sample: bool,
}

impl Default for MaskingConfig {
    fn default() -> Self {
        Self {
            visible_fractions: vec![1.0, 0.25],
            shots: 5,
            episodes: 20,
            seed: 0,
            classes: vec![HitLabel::SingleHit, HitLabel::MultiHit, HitLabel::NonSampleHit],
            per_sample: true,
        }
    }
}

/// Both models see identical frames: the same few-shot query occurrences are
/// scored by the embedding model (N-way, collapsed to single vs non-single)
/// and by the baseline (thresholded probability). At fraction 1.0 frames are
/// left untouched.
pub fn run_masking_comparison(
    embedding: &EmbeddingNet<f32>,
    baseline: &BaselineModel<f32>,
    test: &[SpecklePattern],
    cfg: &MaskingConfig,
) -> Result<ExperimentReport> {
    let fs = FewShotConfig {
        shots: cfg.shots,
        episodes: cfg.episodes,
        seed: cfg.seed,
        classes: cfg.classes.clone(),
        per_sample: cfg.per_sample,
    };
    fs.validate()?;
    let side = embedding.input_size();
    let mut conditions = Vec::new();
    for &fraction in &cfg.visible_fractions {
        let visible = visible_region(side, fraction)?;
        let frames: Vec<SpecklePattern> =
            if fraction == 1.0 { test.to_vec() } else { test.iter().map(|p| restrict_to(p, &visible)).collect() };
        let emb = embed_patterns(embedding, &frames)?;
        let out = fewshot_on_embeddings(&frames, &emb, &fs)?;

        let mut row = ConditionResult::pooled("specklenn", out.confusion.to_binary())?;
        row.macro_f1 = out.confusion.metrics()?.macro_f1;
        row.accuracy_std = Some(out.accuracy_std());
        row.per_entry = out.per_entry()?;
        row.shots = Some(cfg.shots);
        row.visible_fraction = Some(fraction);
        conditions.push(row);

        let index: BTreeMap<u64, usize> = frames.iter().enumerate().map(|(i, p)| (p.id, i)).collect();
        let raw: Vec<&[f32]> = frames.iter().map(|p| p.intensity.as_slice()).collect();
        let preds = baseline.predict(&raw)?;
        let mut cm = ConfusionMatrix::for_labels(&[BinaryLabel::SingleHit, BinaryLabel::NonSingleHit]);
        let bin = |l: BinaryLabel| usize::from(l == BinaryLabel::NonSingleHit);
        for r in &out.records {
            let i = index[&r.pattern_id];
            cm.add(bin(BinaryLabel::from(r.truth)), bin(preds[i].label));
        }
        let mut row = ConditionResult::pooled("baseline", cm)?;
        row.visible_fraction = Some(fraction);
        conditions.push(row);
    }
    Ok(ExperimentReport {
        protocol: "masking_comparison".into(),
        config: serde_json::to_value(cfg).expect("config serializes"),
        conditions,
        summary: BTreeMap::new(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SizeSweepConfig {
    /// Categories, noise, geometry and seed; sample ids and atom counts are
    /// assigned per bin.
    pub simulation: SimulationConfig,
    /// Samples (particles) per size bin.
    pub samples_per_bin: usize,
    /// First sample id; bin `b`, replicate `k` uses `first_sample_id + b·samples_per_bin + k`.
    pub first_sample_id: u32,
    pub fluences: Vec<f64>,
    pub shots: usize,
    pub episodes: usize,
    pub seed: u64,
    pub classes: Vec<HitLabel>,
}

impl Default for SizeSweepConfig {
    fn default() -> Self {
        Self {
            simulation: SimulationConfig { patterns_per_category: 25, ..SimulationConfig::default() },
            samples_per_bin: 2,
            first_sample_id: 1000,
            fluences: vec![1.0, 100.0],
            shots: 5,
            episodes: 20,
            seed: 0,
            classes: vec![HitLabel::SingleHit, HitLabel::MultiHit],
        }
    }
}

/// Spearman rank correlation with average ranks for ties; `None` when either
/// side is constant.
pub fn spearman(x: &[f64], y: &[f64]) -> Option<f64> {
    fn ranks(v: &[f64]) -> Vec<f64> {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
        let mut r = vec![0.0; v.len()];
        let mut i = 0;
        while i < idx.len() {
            let mut j = i;
            while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
                j += 1;
            }
            let avg = (i + j) as f64 / 2.0 + 1.0;
            for &k in &idx[i..=j] {
                r[k] = avg;
            }
            i = j + 1;
        }
        r
    }
    if x.len() != y.len() || x.len() < 2 {
        return None;
    }
    let (rx, ry) = (ranks(x), ranks(y));
    let (mx, _) = mean_std(&rx);
    let (my, _) = mean_std(&ry);
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my).powi(2)).sum();
    (vx > 0.0 && vy > 0.0).then(|| cov / (vx * vy).sqrt())
}

/// Per-bin few-shot accuracy over the evenly spaced atom-count bins, at each
/// fluence. Each bin's particles sit at the bin midpoint. The summary holds
/// the Spearman correlation between bin index and accuracy per fluence
/// (`spearman@<fluence>`).
pub fn run_size_sweep(model: &EmbeddingNet<f32>, cfg: &SizeSweepConfig) -> Result<ExperimentReport> {
    if cfg.samples_per_bin == 0 {
        return Err(Error::config("samples_per_bin", "must be at least 1"));
    }
    if cfg.fluences.is_empty() || cfg.fluences.iter().any(|f| !(f.is_finite() && *f > 0.0)) {
        return Err(Error::config("fluences", "must be a non-empty list of finite positive numbers"));
    }
    let edges = size_bin_edges();
    let mut sample_ids = Vec::new();
    let mut atom_counts = Vec::new();
    let mut bin_of = BTreeMap::new();
    for b in 0..SIZE_BINS {
        let mid = ((edges[b] + edges[b + 1]) / 2.0).round() as u32;
        for k in 0..cfg.samples_per_bin {
            let id = cfg.first_sample_id + (b * cfg.samples_per_bin + k) as u32;
            sample_ids.push(id);
            atom_counts.push(mid);
            bin_of.insert(id, b);
        }
    }
    let fs = FewShotConfig { shots: cfg.shots, episodes: cfg.episodes, seed: cfg.seed, classes: cfg.classes.clone(), per_sample: true };
    fs.validate()?;
    let mut conditions = Vec::new();
    let mut summary = BTreeMap::new();
    for &fluence in &cfg.fluences {
        let sim = SimulationConfig {
            sample_ids: sample_ids.clone(),
            atom_counts: Some(atom_counts.clone()),
            fluence_scale: fluence,
            ..cfg.simulation.clone()
        };
        let ds = build_dataset(&sim)?;
        let emb = embed_patterns(model, &ds.patterns)?;
        let out = fewshot_on_embeddings(&ds.patterns, &emb, &fs)?;
        let mut accs = Vec::new();
        for b in 0..SIZE_BINS {
            let records: Vec<QueryRecord> = out.records.iter().filter(|r| bin_of[&r.sample_id] == b).cloned().collect();
            let episode_accuracy: Vec<f64> = (0..cfg.episodes)
                .map(|e| {
                    let rs: Vec<&QueryRecord> = records.iter().filter(|r| r.episode == e).collect();
                    rs.iter().filter(|r| r.truth == r.predicted).count() as f64 / rs.len() as f64
                })
                .collect();
            let bin_out = FewShotOutcome {
                classes: cfg.classes.clone(),
                confusion: confusion_from_records(&cfg.classes, &records),
                records,
                episode_accuracy,
            };
            let mut row = ConditionResult::fewshot("specklenn", &bin_out)?;
            row.shots = Some(cfg.shots);
            row.fluence_factor = Some(fluence);
            row.size_bin = Some(b);
            accs.push(row.accuracy);
            conditions.push(row);
        }
        let bins: Vec<f64> = (0..SIZE_BINS).map(|b| b as f64).collect();
        if let Some(rho) = spearman(&bins, &accs) {
            summary.insert(format!("spearman@{fluence}"), rho);
        }
    }
    Ok(ExperimentReport {
        protocol: "size_sweep".into(),
        config: serde_json::to_value(cfg).expect("config serializes"),
        conditions,
        summary,
    })
}
