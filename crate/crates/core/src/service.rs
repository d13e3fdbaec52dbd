//! State machine behind the online classification service.
//!
//! Frames are ingested, classified against an immutable snapshot (model +
//! support set), and labeled by an operator. Labels update the support set
//! immediately; once every class has collected enough new labels an online
//! fine-tune runs off the request path and its result is swapped in
//! atomically. Every classification names the `(model_version,
//! support_version)` pair it was computed with, and the event log is enough
//! to replay all outputs.

use std::collections::{BTreeMap, HashMap};
use std::path::PathBuf;
use std::sync::{Arc, Mutex, MutexGuard, RwLock};
use std::time::{Duration, Instant, SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, HitLabel, SpecklePattern};
use crate::embedding::EmbeddingNet;
use crate::error::{Error, Result};
use crate::fewshot::{classify, ClassificationResult, SupportEntry, SupportSet};
use crate::network::NetworkConfig;
use crate::pipeline::{expand_split, AugmentConfig, ExpandConfig};
use crate::triplet::{FitOutcome, Trainer, TrainerConfig};

/// How the labeled spool is turned into a fine-tuned model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OnlineTrainConfig {
    pub trainer: TrainerConfig,
    pub augment: AugmentConfig,
    /// Records per class after augmentation, training side.
    pub train_budget: usize,
    /// Records per class after augmentation, validation side.
    pub val_budget: usize,
    /// Every `val_every`-th labeled frame of a class goes to validation
    /// (0 = no validation split).
    pub val_every: usize,
    /// Architecture and init seed used when training from scratch.
    pub network: NetworkConfig,
    pub init_seed: u64,
}

impl Default for OnlineTrainConfig {
    fn default() -> Self {
        Self {
            trainer: TrainerConfig { epochs: 10, ..TrainerConfig::default() },
            augment: AugmentConfig { zoom: false, shift: false, ..AugmentConfig::default() },
            train_budget: 400,
            val_budget: 200,
            val_every: 3,
            network: NetworkConfig::desk(),
            init_seed: 0,
        }
    }
}

/// Splits labeled frames per class into train/validation, expands both with
/// augmentation and runs triplet training starting from `init`.
pub fn train_online(
    labeled: &[SpecklePattern],
    classes: &[HitLabel],
    cfg: &OnlineTrainConfig,
    init: EmbeddingNet<f32>,
) -> Result<FitOutcome<f32>> {
    let present: Vec<HitLabel> = classes.iter().copied().filter(|&c| labeled.iter().any(|p| p.label == c)).collect();
    if present.len() < 2 || present.iter().all(|&c| labeled.iter().filter(|p| p.label == c).count() < 2) {
        return Err(Error::NotReady("online training needs two labeled classes and a class with two frames".into()));
    }
    let (mut train, mut val) = (Vec::new(), Vec::new());
    for &c in &present {
        for (k, p) in labeled.iter().filter(|p| p.label == c).enumerate() {
            if cfg.val_every > 0 && k % cfg.val_every == cfg.val_every - 1 {
                val.push(p.clone());
            } else {
                train.push(p.clone());
            }
        }
    }
    let grow = |pool: &[SpecklePattern], budget: usize, seed: u64, first_id: u64| -> Result<Vec<SpecklePattern>> {
        let here: Vec<HitLabel> = present.iter().copied().filter(|&c| pool.iter().any(|p| p.label == c)).collect();
        if here.is_empty() {
            return Ok(Vec::new());
        }
        let largest = here.iter().map(|&c| pool.iter().filter(|p| p.label == c).count()).max().unwrap_or(0);
        let ec = ExpandConfig { per_class_budget: budget.max(largest), augment: cfg.augment, seed, first_id };
        expand_split(pool, &here, &ec)
    };
    let seed = cfg.trainer.seed;
    let train = grow(&train, cfg.train_budget, seed, 1 << 48)?;
    let val = grow(&val, cfg.val_budget, seed ^ 0x5a5a, (1 << 48) + (1 << 44))?;
    Trainer::new(init, cfg.trainer)?.fit(&train, &val, |m| tracing::debug!(record = %m.to_record(), "online epoch"))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ServiceConfig {
    pub checkpoint: Option<PathBuf>,
    /// Supports per class.
    pub shots: usize,
    pub labels: Vec<HitLabel>,
    /// New labels every class must collect before a fine-tune starts; 0
    /// disables automatic retraining.
    pub retrain_min_labels: usize,
    /// Fine-tune from a fresh initialization instead of the serving model.
    pub from_scratch: bool,
    pub online: OnlineTrainConfig,
    pub bind: String,
    /// Labeled frames are mirrored here as a dataset directory.
    pub spool_dir: Option<PathBuf>,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            checkpoint: None,
            shots: 5,
            labels: vec![HitLabel::SingleHit, HitLabel::MultiHit, HitLabel::NonSampleHit],
            retrain_min_labels: 40,
            from_scratch: false,
            online: OnlineTrainConfig::default(),
            bind: "127.0.0.1:8080".into(),
            spool_dir: None,
        }
    }
}

impl ServiceConfig {
    pub fn validate(&self) -> Result<()> {
        if self.shots == 0 {
            return Err(Error::config("shots", "must be at least 1"));
        }
        if self.labels.is_empty() {
            return Err(Error::config("labels", "must not be empty"));
        }
        for (i, l) in self.labels.iter().enumerate() {
            if self.labels[..i].contains(l) {
                return Err(Error::config("labels", format!("{l} listed twice")));
            }
        }
        self.online.trainer.validate()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "state", rename_all = "snake_case")]
pub enum FrameState {
    Unlabeled,
    Labeled { label: HitLabel },
    Classified { predicted: HitLabel, model_version: u64, support_version: u64 },
}

impl FrameState {
    pub fn name(&self) -> &'static str {
        match self {
            FrameState::Unlabeled => "unlabeled",
            FrameState::Labeled { .. } => "labeled",
            FrameState::Classified { .. } => "classified",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelChange {
    pub label: HitLabel,
    pub previous: Option<HitLabel>,
    pub at_ms: u64,
}

#[derive(Clone, Debug)]
pub struct FrameRecord {
    pub frame_id: u64,
    pub image: Arc<[f32]>,
    pub mask: Arc<[bool]>,
    pub state: FrameState,
    pub received_ms: u64,
    pub updated_ms: u64,
    pub last_result: Option<ServiceResult>,
    /// Every label ever assigned, oldest first; the last one is current.
    pub label_history: Vec<LabelChange>,
}

/// JSON-friendly view of a frame without its pixels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameSummary {
    pub frame_id: u64,
    #[serde(flatten)]
    pub state: FrameState,
    pub received_ms: u64,
    pub updated_ms: u64,
    pub last_result: Option<ServiceResult>,
    pub label_history: Vec<LabelChange>,
}

impl From<&FrameRecord> for FrameSummary {
    fn from(r: &FrameRecord) -> Self {
        Self {
            frame_id: r.frame_id,
            state: r.state,
            received_ms: r.received_ms,
            updated_ms: r.updated_ms,
            last_result: r.last_result.clone(),
            label_history: r.label_history.clone(),
        }
    }
}

/// One classification, attributed to the snapshot that produced it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ServiceResult {
    pub frame_id: u64,
    pub model_version: u64,
    pub support_version: u64,
    #[serde(flatten)]
    pub classification: ClassificationResult,
}

/// Immutable serving state. Replaced wholesale, never mutated.
#[derive(Debug)]
pub struct Snapshot {
    pub model_version: u64,
    pub support_version: u64,
    pub model: Arc<EmbeddingNet<f32>>,
    pub support: Option<SupportSet>,
    /// Support frame ids per class, in class order.
    pub members: Vec<(HitLabel, Vec<u64>)>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum Event {
    Ingest { frame_id: u64 },
    Label { frame_id: u64, label: HitLabel, previous: Option<HitLabel> },
    Pin { label: HitLabel, frame_ids: Vec<u64> },
    SupportUpdate { support_version: u64 },
    Swap { model_version: u64, support_version: u64 },
    Classify { frame_id: u64, model_version: u64, support_version: u64, predicted: HitLabel },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelAck {
    pub frame_id: u64,
    pub label: HitLabel,
    pub previous: Option<HitLabel>,
    pub support_version: u64,
    /// This label completed the per-class quota; a fine-tune is due.
    pub retrain_triggered: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SupportClassView {
    pub label: HitLabel,
    pub frame_ids: Vec<u64>,
    pub pinned: Vec<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SupportView {
    pub shots: usize,
    pub model_version: u64,
    pub support_version: u64,
    pub classes: Vec<SupportClassView>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ServiceStatus {
    pub model_version: u64,
    pub support_version: u64,
    pub shots: usize,
    pub frames: usize,
    pub labeled: usize,
    pub classified: u64,
    pub label_counts: BTreeMap<String, usize>,
    pub support_counts: BTreeMap<String, usize>,
    /// New labels per class toward the next fine-tune.
    pub labels_toward_retrain: BTreeMap<String, usize>,
    pub retrain_min_labels: usize,
    pub retraining: bool,
    pub retrains_completed: u64,
    pub last_retrain_error: Option<String>,
    /// Classifications per second of classification compute time.
    pub throughput_fps: f64,
    pub uptime_s: f64,
}

/// Everything needed to recompute a run's outputs.
#[derive(Clone, Debug)]
pub struct ReplayLog {
    pub events: Vec<Event>,
    pub frames: BTreeMap<u64, (Arc<[f32]>, Arc<[bool]>)>,
    pub models: BTreeMap<u64, Arc<EmbeddingNet<f32>>>,
}

type Listener = Box<dyn Fn(&ServiceResult) + Send + Sync>;

struct Inner {
    frames: BTreeMap<u64, FrameRecord>,
    next_id: u64,
    /// Labeled frame ids, least recently labeled first.
    label_order: Vec<u64>,
    pins: BTreeMap<HitLabel, Vec<u64>>,
    since_trigger: BTreeMap<HitLabel, usize>,
    events: Vec<Event>,
    /// Support embeddings under the current model.
    cache: HashMap<u64, Vec<f32>>,
    models: BTreeMap<u64, Arc<EmbeddingNet<f32>>>,
    history: BTreeMap<(u64, u64), Arc<Snapshot>>,
    next_support_version: u64,
    retraining: bool,
    retrain_pending: bool,
    retrains_completed: u64,
    last_retrain_error: Option<String>,
    classified: u64,
    busy: Duration,
}

pub struct Service {
    config: ServiceConfig,
    snapshot: RwLock<Arc<Snapshot>>,
    inner: Mutex<Inner>,
    listeners: Mutex<Vec<Listener>>,
    started: Instant,
}

fn now_ms() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_millis() as u64)
}

impl Service {
    pub fn new(config: ServiceConfig, model: EmbeddingNet<f32>) -> Result<Self> {
        config.validate()?;
        let model = Arc::new(model);
        let snap = Arc::new(Snapshot {
            model_version: 0,
            support_version: 0,
            model: Arc::clone(&model),
            support: None,
            members: Vec::new(),
        });
        let inner = Inner {
            frames: BTreeMap::new(),
            next_id: 0,
            label_order: Vec::new(),
            pins: BTreeMap::new(),
            since_trigger: config.labels.iter().map(|&l| (l, 0)).collect(),
            events: Vec::new(),
            cache: HashMap::new(),
            models: BTreeMap::from([(0, model)]),
            history: BTreeMap::from([((0, 0), Arc::clone(&snap))]),
            next_support_version: 1,
            retraining: false,
            retrain_pending: false,
            retrains_completed: 0,
            last_retrain_error: None,
            classified: 0,
            busy: Duration::ZERO,
        };
        Ok(Self {
            config,
            snapshot: RwLock::new(snap),
            inner: Mutex::new(inner),
            listeners: Mutex::new(Vec::new()),
            started: Instant::now(),
        })
    }

    pub fn config(&self) -> &ServiceConfig {
        &self.config
    }

    fn lock(&self) -> MutexGuard<'_, Inner> {
        self.inner.lock().unwrap_or_else(|e| e.into_inner())
    }

    /// The snapshot new requests are served from.
    pub fn snapshot(&self) -> Arc<Snapshot> {
        Arc::clone(&self.snapshot.read().unwrap_or_else(|e| e.into_inner()))
    }

    /// Any snapshot that has ever served, by version pair.
    pub fn snapshot_at(&self, model_version: u64, support_version: u64) -> Option<Arc<Snapshot>> {
        self.lock().history.get(&(model_version, support_version)).cloned()
    }

    fn publish(&self, inner: &mut Inner, snap: Snapshot) {
        let snap = Arc::new(snap);
        inner.history.insert((snap.model_version, snap.support_version), Arc::clone(&snap));
        *self.snapshot.write().unwrap_or_else(|e| e.into_inner()) = snap;
    }

    /// Registers a callback for every classification result.
    pub fn subscribe(&self, f: impl Fn(&ServiceResult) + Send + Sync + 'static) {
        self.listeners.lock().unwrap_or_else(|e| e.into_inner()).push(Box::new(f));
    }

    pub fn ingest(&self, image: Vec<f32>, mask: Option<Vec<bool>>) -> Result<u64> {
        let mut inner = self.lock();
        let id = inner.next_id;
        self.insert_frame(&mut inner, id, image.into(), mask.map(Into::into))?;
        Ok(id)
    }

    fn insert_frame(&self, inner: &mut Inner, id: u64, image: Arc<[f32]>, mask: Option<Arc<[bool]>>) -> Result<()> {
        let side = self.snapshot().model.input_size();
        if image.len() != side * side {
            return Err(Error::shape("ingest", format!("frame of {} pixels, expected {side}x{side}", image.len())));
        }
        let mask = mask.unwrap_or_else(|| vec![true; image.len()].into());
        if mask.len() != image.len() {
            return Err(Error::shape("ingest", "mask and frame sizes differ"));
        }
        if inner.frames.contains_key(&id) {
            return Err(Error::Invalid(format!("frame {id} already exists")));
        }
        let t = now_ms();
        inner.frames.insert(
            id,
            FrameRecord {
                frame_id: id,
                image,
                mask,
                state: FrameState::Unlabeled,
                received_ms: t,
                updated_ms: t,
                last_result: None,
                label_history: Vec::new(),
            },
        );
        inner.next_id = inner.next_id.max(id + 1);
        inner.events.push(Event::Ingest { frame_id: id });
        Ok(())
    }

    pub fn frame(&self, id: u64) -> Result<FrameRecord> {
        self.lock().frames.get(&id).cloned().ok_or(Error::UnknownFrame(id))
    }

    /// Frames in id order, optionally only those in state `state`
    /// (`unlabeled`, `labeled` or `classified`).
    pub fn frames(&self, state: Option<&str>) -> Result<Vec<FrameSummary>> {
        if let Some(s) = state {
            if !["unlabeled", "labeled", "classified"].contains(&s) {
                return Err(Error::Invalid(format!("unknown frame state {s:?}")));
            }
        }
        let inner = self.lock();
        Ok(inner.frames.values().filter(|r| state.is_none_or(|s| r.state.name() == s)).map(FrameSummary::from).collect())
    }

    /// Classifies one frame against the current snapshot.
    pub fn classify(&self, frame_id: u64) -> Result<ServiceResult> {
        let snap = self.snapshot();
        let mut out = self.classify_with(&snap, &[frame_id])?;
        Ok(out.remove(0))
    }

    /// Classifies several frames against one snapshot.
    pub fn classify_many(&self, frame_ids: &[u64]) -> Result<Vec<ServiceResult>> {
        let snap = self.snapshot();
        self.classify_with(&snap, frame_ids)
    }

    fn classify_with(&self, snap: &Snapshot, frame_ids: &[u64]) -> Result<Vec<ServiceResult>> {
        let support = snap
            .support
            .as_ref()
            .ok_or_else(|| Error::NotReady("no labeled supports yet; label a frame per class first".into()))?;
        let images: Vec<Arc<[f32]>> = {
            let inner = self.lock();
            frame_ids
                .iter()
                .map(|id| inner.frames.get(id).map(|r| Arc::clone(&r.image)).ok_or(Error::UnknownFrame(*id)))
                .collect::<Result<_>>()?
        };
        let t = Instant::now();
        let refs: Vec<&[f32]> = images.iter().map(|i| &i[..]).collect();
        let emb = snap.model.embed_frames(&refs)?;
        let results: Vec<ServiceResult> = frame_ids
            .iter()
            .enumerate()
            .map(|(i, &frame_id)| {
                Ok(ServiceResult {
                    frame_id,
                    model_version: snap.model_version,
                    support_version: snap.support_version,
                    classification: classify(emb.row(i), support)?,
                })
            })
            .collect::<Result<_>>()?;
        let elapsed = t.elapsed();
        {
            let mut inner = self.lock();
            inner.busy += elapsed;
            inner.classified += results.len() as u64;
            let t = now_ms();
            for r in &results {
                let rec = inner.frames.get_mut(&r.frame_id).expect("frame checked above");
                if !matches!(rec.state, FrameState::Labeled { .. }) {
                    rec.state = FrameState::Classified {
                        predicted: r.classification.predicted,
                        model_version: r.model_version,
                        support_version: r.support_version,
                    };
                }
                rec.last_result = Some(r.clone());
                rec.updated_ms = t;
                inner.events.push(Event::Classify {
                    frame_id: r.frame_id,
                    model_version: r.model_version,
                    support_version: r.support_version,
                    predicted: r.classification.predicted,
                });
            }
        }
        let listeners = self.listeners.lock().unwrap_or_else(|e| e.into_inner());
        for r in &results {
            for f in listeners.iter() {
                f(r);
            }
        }
        Ok(results)
    }

    /// Records an operator label. Relabeling is allowed; the latest label
    /// wins and the history keeps every change.
    pub fn label(&self, frame_id: u64, label: HitLabel) -> Result<LabelAck> {
        if !self.config.labels.contains(&label) {
            return Err(Error::Invalid(format!("label {label} is not served (labels: {:?})", self.config.labels)));
        }
        let mut inner = self.lock();
        if !inner.frames.contains_key(&frame_id) {
            return Err(Error::UnknownFrame(frame_id));
        }
        // a frame that cannot be embedded must not enter the support set
        let model = Arc::clone(&self.snapshot().model);
        self.support_set(&mut inner, &model, &[(label, vec![frame_id])])?;
        let rec = inner.frames.get_mut(&frame_id).expect("checked above");
        let previous = match rec.state {
            FrameState::Labeled { label } => Some(label),
            _ => None,
        };
        let t = now_ms();
        rec.state = FrameState::Labeled { label };
        rec.updated_ms = t;
        rec.label_history.push(LabelChange { label, previous, at_ms: t });
        inner.label_order.retain(|&id| id != frame_id);
        inner.label_order.push(frame_id);
        if previous.is_some_and(|p| p != label) {
            // a pin only holds while the frame keeps its label
            for ids in inner.pins.values_mut() {
                ids.retain(|&id| id != frame_id);
            }
        }
        inner.events.push(Event::Label { frame_id, label, previous });
        *inner.since_trigger.entry(label).or_insert(0) += 1;
        let min = self.config.retrain_min_labels;
        let triggered = min > 0 && self.config.labels.iter().all(|l| inner.since_trigger.get(l).copied().unwrap_or(0) >= min);
        if triggered {
            for v in inner.since_trigger.values_mut() {
                *v = 0;
            }
        }
        self.refresh_support(&mut inner)?;
        let support_version = self.snapshot().support_version;
        if let Some(dir) = &self.config.spool_dir {
            spool(&inner).save(dir)?;
        }
        Ok(LabelAck { frame_id, label, previous, support_version, retrain_triggered: triggered })
    }

    /// Fixes the supports of `label` to `frame_ids` (at most `shots`, each
    /// currently labeled `label`); an empty list removes the pins.
    pub fn pin(&self, label: HitLabel, frame_ids: Vec<u64>) -> Result<SupportView> {
        if frame_ids.len() > self.config.shots {
            return Err(Error::Invalid(format!("{} pins exceed {} shots", frame_ids.len(), self.config.shots)));
        }
        {
            let mut inner = self.lock();
            for (i, id) in frame_ids.iter().enumerate() {
                match inner.frames.get(id).map(|r| r.state) {
                    None => return Err(Error::UnknownFrame(*id)),
                    Some(FrameState::Labeled { label: l }) if l == label => {}
                    Some(_) => return Err(Error::Invalid(format!("frame {id} is not labeled {label}"))),
                }
                if frame_ids[..i].contains(id) {
                    return Err(Error::Invalid(format!("frame {id} pinned twice")));
                }
            }
            inner.events.push(Event::Pin { label, frame_ids: frame_ids.clone() });
            inner.pins.insert(label, frame_ids);
            self.refresh_support(&mut inner)?;
        }
        Ok(self.supports())
    }

    fn members(&self, inner: &Inner) -> Vec<(HitLabel, Vec<u64>)> {
        self.config
            .labels
            .iter()
            .map(|&l| {
                let mut ids: Vec<u64> = inner.pins.get(&l).cloned().unwrap_or_default();
                for &id in inner.label_order.iter().rev() {
                    if ids.len() >= self.config.shots {
                        break;
                    }
                    let is_l = matches!(inner.frames[&id].state, FrameState::Labeled { label } if label == l);
                    if is_l && !ids.contains(&id) {
                        ids.push(id);
                    }
                }
                (l, ids)
            })
            .collect()
    }

    fn support_set(
        &self,
        inner: &mut Inner,
        model: &EmbeddingNet<f32>,
        members: &[(HitLabel, Vec<u64>)],
    ) -> Result<Option<SupportSet>> {
        let missing: Vec<u64> =
            members.iter().flat_map(|(_, ids)| ids.iter().copied()).filter(|id| !inner.cache.contains_key(id)).collect();
        if !missing.is_empty() {
            let images: Vec<Arc<[f32]>> = missing.iter().map(|id| Arc::clone(&inner.frames[id].image)).collect();
            let refs: Vec<&[f32]> = images.iter().map(|i| &i[..]).collect();
            let emb = model.embed_frames(&refs)?;
            for (i, id) in missing.into_iter().enumerate() {
                inner.cache.insert(id, emb.row(i).to_vec());
            }
        }
        if members.iter().all(|(_, ids)| ids.is_empty()) {
            return Ok(None);
        }
        let items: Vec<(HitLabel, SupportEntry)> = members
            .iter()
            .flat_map(|(l, ids)| ids.iter().map(move |&id| (*l, id)))
            .map(|(l, id)| (l, SupportEntry { source_id: id, embedding: inner.cache[&id].clone() }))
            .collect();
        SupportSet::from_embeddings(items).map(Some)
    }

    /// Publishes a new snapshot when the support membership changed.
    fn refresh_support(&self, inner: &mut Inner) -> Result<()> {
        let cur = self.snapshot();
        let members = self.members(inner);
        if members == cur.members {
            return Ok(());
        }
        let support = self.support_set(inner, &cur.model, &members)?;
        let support_version = inner.next_support_version;
        inner.next_support_version += 1;
        inner.events.push(Event::SupportUpdate { support_version });
        self.publish(
            inner,
            Snapshot { model_version: cur.model_version, support_version, model: Arc::clone(&cur.model), support, members },
        );
        Ok(())
    }

    /// Swaps in a new model; support embeddings are recomputed with it.
    /// Classifications already holding the previous snapshot finish on it.
    pub fn install_model(&self, model: EmbeddingNet<f32>) -> Result<(u64, u64)> {
        let mut inner = self.lock();
        let cur = self.snapshot();
        if model.input_size() != cur.model.input_size() {
            return Err(Error::shape("install_model", "new model expects a different frame size"));
        }
        let model = Arc::new(model);
        let model_version = cur.model_version + 1;
        let members = self.members(&inner);
        inner.cache.clear();
        let support = self.support_set(&mut inner, &model, &members)?;
        let support_version = inner.next_support_version;
        inner.next_support_version += 1;
        inner.models.insert(model_version, Arc::clone(&model));
        inner.events.push(Event::Swap { model_version, support_version });
        self.publish(&mut inner, Snapshot { model_version, support_version, model, support, members });
        Ok((model_version, support_version))
    }

    /// Current labeled frames as a dataset (one sample, ids = frame ids).
    pub fn labeled_dataset(&self) -> Dataset {
        spool(&self.lock())
    }

    /// Fine-tunes on the labeled spool in the calling thread and swaps the
    /// result in. Returns the new `(model_version, support_version)`.
    pub fn retrain_now(&self) -> Result<(u64, u64)> {
        let labeled = self.labeled_dataset().patterns;
        let init = if self.config.from_scratch {
            EmbeddingNet::build(self.config.online.network, self.config.online.init_seed)?
        } else {
            (*self.snapshot().model).clone()
        };
        let fit = train_online(&labeled, &self.config.labels, &self.config.online, init)?;
        self.install_model(fit.model)
    }

    /// Starts a background fine-tune unless one is running, in which case
    /// another run is queued. Returns whether a new thread was started.
    pub fn spawn_retrain(self: &Arc<Self>) -> bool {
        {
            let mut inner = self.lock();
            if inner.retraining {
                inner.retrain_pending = true;
                return false;
            }
            inner.retraining = true;
        }
        let svc = Arc::clone(self);
        std::thread::spawn(move || loop {
            let outcome = svc.retrain_now();
            let mut inner = svc.lock();
            match outcome {
                Ok(_) => {
                    inner.retrains_completed += 1;
                    inner.last_retrain_error = None;
                }
                Err(e) => {
                    tracing::warn!(error = %e, "online retrain failed");
                    inner.last_retrain_error = Some(e.to_string());
                }
            }
            if inner.retrain_pending {
                inner.retrain_pending = false;
            } else {
                inner.retraining = false;
                break;
            }
        });
        true
    }

    pub fn supports(&self) -> SupportView {
        let snap = self.snapshot();
        let inner = self.lock();
        SupportView {
            shots: self.config.shots,
            model_version: snap.model_version,
            support_version: snap.support_version,
            classes: self
                .config
                .labels
                .iter()
                .map(|&l| SupportClassView {
                    label: l,
                    frame_ids: snap.members.iter().find(|(m, _)| *m == l).map(|(_, ids)| ids.clone()).unwrap_or_default(),
                    pinned: inner.pins.get(&l).cloned().unwrap_or_default(),
                })
                .collect(),
        }
    }

    pub fn status(&self) -> ServiceStatus {
        let snap = self.snapshot();
        let inner = self.lock();
        let mut label_counts: BTreeMap<String, usize> = self.config.labels.iter().map(|l| (l.to_string(), 0)).collect();
        for r in inner.frames.values() {
            if let FrameState::Labeled { label } = r.state {
                *label_counts.entry(label.to_string()).or_insert(0) += 1;
            }
        }
        let secs = inner.busy.as_secs_f64();
        ServiceStatus {
            model_version: snap.model_version,
            support_version: snap.support_version,
            shots: self.config.shots,
            frames: inner.frames.len(),
            labeled: label_counts.values().sum(),
            classified: inner.classified,
            label_counts,
            support_counts: snap.members.iter().map(|(l, ids)| (l.to_string(), ids.len())).collect(),
            labels_toward_retrain: inner.since_trigger.iter().map(|(l, n)| (l.to_string(), *n)).collect(),
            retrain_min_labels: self.config.retrain_min_labels,
            retraining: inner.retraining,
            retrains_completed: inner.retrains_completed,
            last_retrain_error: inner.last_retrain_error.clone(),
            throughput_fps: if secs > 0.0 { inner.classified as f64 / secs } else { 0.0 },
            uptime_s: self.started.elapsed().as_secs_f64(),
        }
    }

    pub fn events(&self) -> Vec<Event> {
        self.lock().events.clone()
    }

    pub fn replay_log(&self) -> ReplayLog {
        let inner = self.lock();
        ReplayLog {
            events: inner.events.clone(),
            frames: inner.frames.iter().map(|(&id, r)| (id, (Arc::clone(&r.image), Arc::clone(&r.mask)))).collect(),
            models: inner.models.clone(),
        }
    }

    /// Re-applies a log to a fresh service and returns the classification
    /// results in log order. Version numbers must come out as recorded.
    pub fn replay(config: ServiceConfig, log: &ReplayLog) -> Result<Vec<ServiceResult>> {
        let initial = log.models.get(&0).ok_or_else(|| Error::Invalid("replay log lacks the initial model".into()))?;
        let config = ServiceConfig { spool_dir: None, ..config };
        let svc = Service::new(config, (**initial).clone())?;
        let mut out = Vec::new();
        let mismatch = |what: &str| Error::Invalid(format!("replay diverged at {what}"));
        for e in &log.events {
            match e {
                Event::Ingest { frame_id } => {
                    let (img, mask) = log.frames.get(frame_id).ok_or(Error::UnknownFrame(*frame_id))?;
                    let mut inner = svc.lock();
                    svc.insert_frame(&mut inner, *frame_id, Arc::clone(img), Some(Arc::clone(mask)))?;
                }
                Event::Label { frame_id, label, .. } => {
                    svc.label(*frame_id, *label)?;
                }
                Event::Pin { label, frame_ids } => {
                    svc.pin(*label, frame_ids.clone())?;
                }
                Event::SupportUpdate { support_version } => {
                    if svc.snapshot().support_version != *support_version {
                        return Err(mismatch("a support update"));
                    }
                }
                Event::Swap { model_version, support_version } => {
                    let m = log.models.get(model_version).ok_or_else(|| mismatch("a swap without its model"))?;
                    if svc.install_model((**m).clone())? != (*model_version, *support_version) {
                        return Err(mismatch("a swap"));
                    }
                }
                Event::Classify { frame_id, model_version, support_version, .. } => {
                    let snap = svc.snapshot_at(*model_version, *support_version).ok_or_else(|| mismatch("a classify"))?;
                    out.extend(svc.classify_with(&snap, &[*frame_id])?);
                }
            }
        }
        Ok(out)
    }
}

fn spool(inner: &Inner) -> Dataset {
    let mut ds = Dataset::new(0);
    ds.info.insert("source".into(), "online_labels".into());
    for &id in &inner.label_order {
        let r = &inner.frames[&id];
        if let FrameState::Labeled { label } = r.state {
            ds.side = (r.image.len() as f64).sqrt() as usize;
            ds.patterns.push(SpecklePattern {
                id,
                sample_id: 0,
                label,
                hit_multiplicity: u8::from(label == HitLabel::SingleHit),
                n_atoms: 0,
                fluence_factor: 1.0,
                rng_seed: 0,
                lineage: None,
                intensity: r.image.to_vec(),
                mask: r.mask.to_vec(),
            });
        }
    }
    ds
}
