//! Subcommand definitions and their implementations.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use specklenn::adam::AdamConfig;
use specklenn::baseline::{train_baseline, BaselineConfig, BaselineModel, BaselineTrainConfig};
use specklenn::checkpoint::TrainingMetadata;
use specklenn::dataset::{Dataset, HitLabel, SpecklePattern};
use specklenn::embedding::EmbeddingNet;
use specklenn::eval::{
    default_fluence_grid, run_fewshot_report, run_fluence_sweep, run_masking_comparison, run_size_sweep, FewShotConfig,
    FluenceSweepConfig, MaskingConfig, SizeSweepConfig,
};
use specklenn::fewshot::{classify, LabeledFrame};
use specklenn::network::NetworkConfig;
use specklenn::pipeline::{expand_split, split_dataset, AugmentConfig, ExpandConfig, SplitSpec, Splits};
use specklenn::service::{train_online, OnlineTrainConfig, Service, ServiceConfig};
use specklenn::simulator::{build_dataset, Category, SimulationConfig};
use specklenn::triplet::{Trainer, TrainerConfig};

#[derive(Parser, Debug)]
#[command(name = "specklenn", version, about = "Speckle pattern simulation, embedding training and few-shot classification")]
#[command(args_override_self = true)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic dataset directory.
    Simulate(SimulateArgs),
    /// Train an embedding network (or the binary baseline) on a dataset.
    TrainOffline(TrainOfflineArgs),
    /// Fine-tune an embedding network on a labeled spool.
    TrainOnline(TrainOnlineArgs),
    /// Run an evaluation protocol and write JSON/CSV reports.
    Evaluate(EvaluateArgs),
    /// Classify frames against a stored support set.
    Classify(ClassifyArgs),
    /// Run the online classification service.
    Serve(ServeArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum NetworkSize {
    /// Small network for CPU-only runs.
    Desk,
    /// Full-size network.
    Full,
}

impl NetworkSize {
    fn config(self) -> NetworkConfig {
        match self {
            NetworkSize::Desk => NetworkConfig::desk(),
            NetworkSize::Full => NetworkConfig::default(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ModelKind {
    Embedding,
    Baseline,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Protocol {
    Fewshot,
    Fluence,
    Masking,
    Size,
}

fn parse_label(s: &str) -> Result<HitLabel, String> {
    s.parse().map_err(|e: specklenn::error::Error| e.to_string())
}

fn parse_category(s: &str) -> Result<Category, String> {
    s.parse().map_err(|e: specklenn::error::Error| e.to_string())
}

#[derive(Args, Debug)]
pub struct SimulateArgs {
    /// Read flags from a flat `key = value` file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Number of samples (particle species).
    #[arg(long, default_value_t = 10)]
    pub samples: u32,
    #[arg(long, default_value_t = 0)]
    pub first_sample: u32,
    #[arg(long, default_value_t = 100)]
    pub per_category: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 1.0)]
    pub fluence_scale: f64,
    #[arg(long, value_delimiter = ',', value_parser = parse_category, default_value = "single,double,triple,quadruple")]
    pub categories: Vec<Category>,
    /// Generate frames on one thread.
    #[arg(long)]
    pub serial: bool,
}

#[derive(Args, Debug, Clone)]
pub struct OptimArgs {
    #[arg(long, default_value_t = 30)]
    pub epochs: usize,
    #[arg(long, default_value_t = 64)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

impl OptimArgs {
    fn adam(&self) -> AdamConfig {
        AdamConfig { learning_rate: self.lr, ..AdamConfig::default() }
    }
}

#[derive(Args, Debug, Clone)]
pub struct TripletArgs {
    #[arg(long, default_value_t = 1.0)]
    pub margin: f64,
    /// Mined triplets kept per batch.
    #[arg(long, default_value_t = 64)]
    pub triplets_per_batch: usize,
}

#[derive(Args, Debug)]
pub struct TrainOfflineArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Dataset directory written by `simulate`.
    #[arg(long)]
    pub data: PathBuf,
    /// Checkpoint directory to write.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value_t = ModelKind::Embedding)]
    pub kind: ModelKind,
    #[arg(long, value_enum, default_value_t = NetworkSize::Desk)]
    pub network: NetworkSize,
    #[command(flatten)]
    pub optim: OptimArgs,
    #[command(flatten)]
    pub triplet: TripletArgs,
    /// Fraction of sources held out for validation.
    #[arg(long, default_value_t = 0.2)]
    pub val_fraction: f64,
    /// Augment each class of the training split up to this many records (0 = no augmentation).
    #[arg(long, default_value_t = 0)]
    pub budget: usize,
    /// Baseline decision threshold on P(single hit).
    #[arg(long, default_value_t = 0.9)]
    pub threshold: f64,
    /// Append one JSON record per epoch to this file.
    #[arg(long)]
    pub metrics: Option<PathBuf>,
}

#[derive(Args, Debug, Clone)]
pub struct OnlineArgs {
    /// Fine-tune from a fresh initialization instead of the current model.
    #[arg(long)]
    pub from_scratch: bool,
    #[arg(long, value_enum, default_value_t = NetworkSize::Desk)]
    pub network: NetworkSize,
    #[arg(long, default_value_t = 10)]
    pub epochs: usize,
    #[arg(long, default_value_t = 64)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[command(flatten)]
    pub triplet: TripletArgs,
    /// Augmented training records per class.
    #[arg(long, default_value_t = 400)]
    pub train_budget: usize,
    /// Augmented validation records per class.
    #[arg(long, default_value_t = 200)]
    pub val_budget: usize,
    /// Every n-th labeled frame of a class is held out for validation (0 = none).
    #[arg(long, default_value_t = 3)]
    pub val_every: usize,
}

impl OnlineArgs {
    fn config(&self) -> OnlineTrainConfig {
        OnlineTrainConfig {
            trainer: TrainerConfig {
                margin: self.triplet.margin,
                batch_size: self.batch_size,
                epochs: self.epochs,
                triplets_per_batch: self.triplet.triplets_per_batch,
                seed: self.seed,
                adam: AdamConfig { learning_rate: self.lr, ..AdamConfig::default() },
            },
            train_budget: self.train_budget,
            val_budget: self.val_budget,
            val_every: self.val_every,
            network: self.network.config(),
            init_seed: self.seed,
            ..OnlineTrainConfig::default()
        }
    }
}

#[derive(Args, Debug)]
pub struct TrainOnlineArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Labeled spool (dataset directory).
    #[arg(long)]
    pub spool: PathBuf,
    /// Checkpoint to start from; required unless --from-scratch.
    #[arg(long)]
    pub init: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_delimiter = ',', value_parser = parse_label, default_value = "single_hit,multi_hit,non_sample_hit")]
    pub labels: Vec<HitLabel>,
    #[command(flatten)]
    pub online: OnlineArgs,
}

#[derive(Args, Debug)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub protocol: Protocol,
    /// Embedding checkpoint.
    #[arg(long)]
    pub model: PathBuf,
    /// Baseline checkpoint (masking protocol).
    #[arg(long)]
    pub baseline: Option<PathBuf>,
    /// Test dataset (fewshot and masking protocols).
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Report directory; receives `<protocol>.json` and `<protocol>.csv`.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "1,5")]
    pub shots: Vec<usize>,
    #[arg(long, default_value_t = 20)]
    pub episodes: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Classes (ways), in support order. Defaults depend on the protocol.
    #[arg(long, value_delimiter = ',', value_parser = parse_label)]
    pub classes: Vec<HitLabel>,
    /// Pool every sample into one episode instead of drawing per sample.
    #[arg(long)]
    pub pooled: bool,
    /// Fluence factors (fluence and size protocols).
    #[arg(long, value_delimiter = ',')]
    pub factors: Vec<f64>,
    /// Visible detector fractions (masking protocol).
    #[arg(long, value_delimiter = ',', default_value = "1.0,0.25")]
    pub visible: Vec<f64>,
    /// Test samples simulated by the fluence and size protocols.
    #[arg(long, default_value_t = 5)]
    pub samples: u32,
    #[arg(long, default_value_t = 10)]
    pub first_sample: u32,
    #[arg(long)]
    pub per_category: Option<usize>,
    #[arg(long, default_value_t = 1)]
    pub sim_seed: u64,
}

#[derive(Args, Debug)]
pub struct ClassifyArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub model: PathBuf,
    /// Labeled dataset directory whose frames form the support set.
    #[arg(long)]
    pub support: PathBuf,
    /// Dataset directory of frames to classify.
    #[arg(long)]
    pub input: PathBuf,
    /// JSON-lines output (stdout when absent).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct ServeArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Embedding checkpoint; a freshly initialized network when absent.
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long, default_value = "127.0.0.1:8080")]
    pub bind: String,
    #[arg(long, default_value_t = 5)]
    pub shots: usize,
    #[arg(long, value_delimiter = ',', value_parser = parse_label, default_value = "single_hit,multi_hit,non_sample_hit")]
    pub labels: Vec<HitLabel>,
    /// New labels per class that trigger a fine-tune (0 = never).
    #[arg(long, default_value_t = 40)]
    pub retrain_min_labels: usize,
    /// Mirror labeled frames into this dataset directory.
    #[arg(long)]
    pub spool: Option<PathBuf>,
    /// Preload the frames of a dataset directory.
    #[arg(long)]
    pub ingest: Option<PathBuf>,
    #[command(flatten)]
    pub online: OnlineArgs,
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Simulate(a) => simulate(&a),
        Command::TrainOffline(a) => train_offline(&a),
        Command::TrainOnline(a) => train_online_cmd(&a),
        Command::Evaluate(a) => evaluate(&a),
        Command::Classify(a) => classify_cmd(&a),
        Command::Serve(a) => serve(a),
    }
}

fn load_dataset(path: &Path) -> Result<Dataset> {
    Dataset::load(path).with_context(|| format!("loading dataset {}", path.display()))
}

fn load_model(path: &Path) -> Result<EmbeddingNet<f32>> {
    EmbeddingNet::load(path).with_context(|| format!("loading checkpoint {}", path.display()))
}

pub fn simulate(a: &SimulateArgs) -> Result<()> {
    let cfg = SimulationConfig {
        sample_ids: (a.first_sample..a.first_sample + a.samples).collect(),
        patterns_per_category: a.per_category,
        categories: a.categories.clone(),
        seed: a.seed,
        fluence_scale: a.fluence_scale,
        parallel: !a.serial,
        ..SimulationConfig::default()
    };
    let ds = build_dataset(&cfg)?;
    ds.save(&a.out)?;
    tracing::info!(frames = ds.len(), out = %a.out.display(), "dataset written");
    Ok(())
}

fn metrics_sink(path: Option<&Path>) -> Result<Option<BufWriter<File>>> {
    path.map(|p| File::create(p).map(BufWriter::new).with_context(|| format!("creating {}", p.display()))).transpose()
}

fn classes_present(ps: &[SpecklePattern]) -> Vec<HitLabel> {
    HitLabel::ALL.into_iter().filter(|l| ps.iter().any(|p| p.label == *l)).collect()
}

pub fn train_offline(a: &TrainOfflineArgs) -> Result<()> {
    let ds = load_dataset(&a.data)?;
    if !(a.val_fraction > 0.0 && a.val_fraction < 1.0) {
        bail!("invalid config: val_fraction: must lie in (0, 1)");
    }
    let spec = SplitSpec { train: 1.0 - a.val_fraction, val: a.val_fraction, test: 0.0, seed: a.optim.seed };
    let splits = split_dataset(&ds.patterns, &spec)?;
    let mut train = Splits::select(&ds.patterns, &splits.train);
    let val = Splits::select(&ds.patterns, &splits.val);
    if a.budget > 0 {
        let ec = ExpandConfig {
            per_class_budget: a.budget,
            augment: AugmentConfig::default(),
            seed: a.optim.seed,
            first_id: 1 << 48,
        };
        train = expand_split(&train, &classes_present(&train), &ec)?;
    }
    let mut sink = metrics_sink(a.metrics.as_deref())?;
    let mut log = |record: String| {
        tracing::info!("{record}");
        if let Some(w) = sink.as_mut() {
            let _ = writeln!(w, "{record}");
        }
    };
    match a.kind {
        ModelKind::Embedding => {
            let model = EmbeddingNet::<f32>::build(a.network.config(), a.optim.seed)?;
            let cfg = TrainerConfig {
                margin: a.triplet.margin,
                batch_size: a.optim.batch_size,
                epochs: a.optim.epochs,
                triplets_per_batch: a.triplet.triplets_per_batch,
                seed: a.optim.seed,
                adam: a.optim.adam(),
            };
            let fit = Trainer::new(model, cfg)?.fit(&train, &val, |m| log(m.to_record()))?;
            let best = &fit.history[fit.best_epoch - 1];
            let loss = best.validation_loss.unwrap_or(best.mean_loss);
            fit.model.save(&a.out, TrainingMetadata { seed: a.optim.seed, epoch: fit.best_epoch, loss })?;
        }
        ModelKind::Baseline => {
            let cfg = BaselineConfig {
                network: NetworkConfig { output_dim: 1, ..a.network.config() },
                threshold: a.threshold,
            };
            let model = BaselineModel::<f32>::build(cfg, a.optim.seed)?;
            let tc = BaselineTrainConfig {
                batch_size: a.optim.batch_size,
                epochs: a.optim.epochs,
                seed: a.optim.seed,
                adam: a.optim.adam(),
            };
            let fit = train_baseline(model, &train, &val, &tc, |m| log(m.to_record()))?;
            let best = &fit.history[fit.best_epoch - 1];
            let loss = best.validation_loss.unwrap_or(best.train_loss);
            fit.model.save(&a.out, TrainingMetadata { seed: a.optim.seed, epoch: fit.best_epoch, loss })?;
        }
    }
    if let Some(mut w) = sink {
        w.flush()?;
    }
    tracing::info!(out = %a.out.display(), "checkpoint written");
    Ok(())
}

pub fn train_online_cmd(a: &TrainOnlineArgs) -> Result<()> {
    let spool = load_dataset(&a.spool)?;
    let cfg = a.online.config();
    let init = match (&a.init, a.online.from_scratch) {
        (_, true) => EmbeddingNet::build(cfg.network, cfg.init_seed)?,
        (Some(p), false) => load_model(p)?,
        (None, false) => bail!("train-online needs --init <checkpoint> or --from-scratch"),
    };
    let fit = train_online(&spool.patterns, &a.labels, &cfg, init)?;
    for m in &fit.history {
        tracing::info!("{}", m.to_record());
    }
    let loss = fit.history.get(fit.best_epoch.saturating_sub(1)).map_or(0.0, |m| m.mean_loss);
    fit.model.save(&a.out, TrainingMetadata { seed: a.online.seed, epoch: fit.best_epoch, loss })?;
    Ok(())
}

pub fn evaluate(a: &EvaluateArgs) -> Result<()> {
    let model = load_model(&a.model)?;
    let classes = |default: &[HitLabel]| if a.classes.is_empty() { default.to_vec() } else { a.classes.clone() };
    let two = [HitLabel::SingleHit, HitLabel::MultiHit];
    let three = [HitLabel::SingleHit, HitLabel::MultiHit, HitLabel::NonSampleHit];
    let data = || -> Result<Dataset> {
        load_dataset(a.data.as_deref().with_context(|| format!("--data is required for the {:?} protocol", a.protocol))?)
    };
    let first_shots = || a.shots.first().copied().context("--shots needs at least one value");
    let simulation = |per_category: usize| SimulationConfig {
        sample_ids: (a.first_sample..a.first_sample + a.samples).collect(),
        patterns_per_category: a.per_category.unwrap_or(per_category),
        seed: a.sim_seed,
        ..SimulationConfig::default()
    };
    let report = match a.protocol {
        Protocol::Fewshot => {
            let ds = data()?;
            let cfg = FewShotConfig {
                shots: first_shots()?,
                episodes: a.episodes,
                seed: a.seed,
                classes: classes(&two),
                per_sample: !a.pooled,
            };
            run_fewshot_report(&model, &ds.patterns, &a.shots, &cfg)?
        }
        Protocol::Fluence => {
            let cfg = FluenceSweepConfig {
                simulation: simulation(100),
                factors: if a.factors.is_empty() { default_fluence_grid() } else { a.factors.clone() },
                shots: a.shots.clone(),
                episodes: a.episodes,
                seed: a.seed,
                classes: classes(&two),
            };
            run_fluence_sweep(&model, &cfg)?
        }
        Protocol::Masking => {
            let ds = data()?;
            let path = a.baseline.as_deref().context("--baseline is required for the masking protocol")?;
            let baseline =
                BaselineModel::<f32>::load(path).with_context(|| format!("loading baseline {}", path.display()))?;
            let cfg = MaskingConfig {
                visible_fractions: a.visible.clone(),
                shots: first_shots()?,
                episodes: a.episodes,
                seed: a.seed,
                classes: classes(&three),
                per_sample: !a.pooled,
            };
            run_masking_comparison(&model, &baseline, &ds.patterns, &cfg)?
        }
        Protocol::Size => {
            let d = SizeSweepConfig::default();
            let cfg = SizeSweepConfig {
                simulation: SimulationConfig { seed: a.sim_seed, ..simulation(d.simulation.patterns_per_category) },
                fluences: if a.factors.is_empty() { d.fluences.clone() } else { a.factors.clone() },
                shots: first_shots()?,
                episodes: a.episodes,
                seed: a.seed,
                classes: classes(&two),
                ..d
            };
            run_size_sweep(&model, &cfg)?
        }
    };
    report.write(&a.out)?;
    for c in &report.conditions {
        tracing::info!(
            model = %c.model,
            shots = ?c.shots,
            fluence = ?c.fluence_factor,
            visible = ?c.visible_fraction,
            size_bin = ?c.size_bin,
            accuracy = c.accuracy,
            f1 = c.f1,
            "condition"
        );
    }
    Ok(())
}

/// One output line of `classify`.
#[derive(serde::Serialize)]
struct ClassifiedFrame<'a> {
    id: u64,
    #[serde(flatten)]
    result: &'a specklenn::fewshot::ClassificationResult,
}

pub fn classify_cmd(a: &ClassifyArgs) -> Result<()> {
    let model = load_model(&a.model)?;
    let support_ds = load_dataset(&a.support)?;
    let input = load_dataset(&a.input)?;
    let frames: Vec<LabeledFrame<'_>> = support_ds
        .patterns
        .iter()
        .map(|p| LabeledFrame { label: p.label, source_id: p.id, image: &p.intensity })
        .collect();
    let support = specklenn::fewshot::build_support_set(&model, &frames)?;
    let mut out: Box<dyn Write> = match &a.out {
        Some(p) => Box::new(BufWriter::new(File::create(p).with_context(|| format!("creating {}", p.display()))?)),
        None => Box::new(std::io::stdout().lock()),
    };
    for chunk in input.patterns.chunks(64) {
        let imgs: Vec<&[f32]> = chunk.iter().map(|p| p.intensity.as_slice()).collect();
        let emb = model.embed_frames(&imgs)?;
        for (i, p) in chunk.iter().enumerate() {
            let result = classify(emb.row(i), &support)?;
            writeln!(out, "{}", serde_json::to_string(&ClassifiedFrame { id: p.id, result: &result })?)?;
        }
    }
    out.flush()?;
    Ok(())
}

pub fn service_config(a: &ServeArgs) -> ServiceConfig {
    ServiceConfig {
        checkpoint: a.model.clone(),
        shots: a.shots,
        labels: a.labels.clone(),
        retrain_min_labels: a.retrain_min_labels,
        from_scratch: a.online.from_scratch,
        online: a.online.config(),
        bind: a.bind.clone(),
        spool_dir: a.spool.clone(),
    }
}

pub fn build_service(a: &ServeArgs) -> Result<Arc<Service>> {
    let cfg = service_config(a);
    let model = match &cfg.checkpoint {
        Some(p) => load_model(p)?,
        None => EmbeddingNet::build(cfg.online.network, cfg.online.init_seed)?,
    };
    let svc = Arc::new(Service::new(cfg, model)?);
    if let Some(dir) = &a.ingest {
        for p in load_dataset(dir)?.patterns {
            svc.ingest(p.intensity, Some(p.mask))?;
        }
    }
    Ok(svc)
}

fn serve(a: ServeArgs) -> Result<()> {
    let svc = build_service(&a)?;
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(crate::api::serve(svc, &a.bind))
}
