//! The embedding model: backbone plus row-wise L2 normalization, so every
//! frame lands on the unit hypersphere in `R^d`.

use std::path::Path;

use crate::autodiff::{BatchStats, Graph, Var};
use crate::checkpoint::{ModelCheckpoint, ModelKind, TrainingMetadata, FORMAT_VERSION};
use crate::error::{Error, Result};
use crate::network::{prepare_batch, EmbeddingNetConfig, Mode, Network, ParamVars};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingNet<T: Real = f32> {
    net: Network<T>,
}

impl<T: Real> EmbeddingNet<T> {
    pub fn build(config: EmbeddingNetConfig, seed: u64) -> Result<Self> {
        if config.output_dim < 2 {
            return Err(Error::config("embedding_dim", "must be at least 2"));
        }
        Ok(Self { net: Network::build(config, seed)? })
    }

    pub fn from_network(net: Network<T>) -> Result<Self> {
        if net.config().output_dim < 2 {
            return Err(Error::config("embedding_dim", "must be at least 2"));
        }
        Ok(Self { net })
    }

    pub fn network(&self) -> &Network<T> {
        &self.net
    }

    pub fn network_mut(&mut self) -> &mut Network<T> {
        &mut self.net
    }

    pub fn config(&self) -> &EmbeddingNetConfig {
        self.net.config()
    }

    pub fn embedding_dim(&self) -> usize {
        self.net.config().output_dim
    }

    pub fn input_size(&self) -> usize {
        self.net.config().input_size
    }

    pub fn cast<U: Real>(&self) -> EmbeddingNet<U> {
        EmbeddingNet { net: self.net.cast() }
    }

    /// Records the full forward pass on `g` and returns unit-norm embeddings.
    pub fn forward(
        &self,
        g: &mut Graph<T>,
        vars: &ParamVars,
        input: Var,
        mode: Mode,
    ) -> Result<(Var, Vec<BatchStats<T>>)> {
        let (out, stats) = self.net.forward(g, vars, input, mode)?;
        Ok((g.l2_normalize(out)?, stats))
    }

    /// Embeds an already standardized `[B, 1, S, S]` batch.
    ///
    /// Eval mode runs each frame on its own so a frame's embedding does not
    /// depend on what else shares its batch. Train mode normalizes with
    /// batch statistics and leaves the running estimates untouched.
    pub fn embed(&self, batch: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let s = self.input_size();
        let b = match batch.shape() {
            [b, 1, h, w] if *h == s && *w == s => *b,
            other => {
                return Err(Error::shape("embed", format!("expected [B, 1, {s}, {s}], got {other:?}")));
            }
        };
        match mode {
            Mode::Train => {
                let mut g = Graph::new();
                let vars = self.net.register_frozen(&mut g);
                let x = g.input(batch.clone());
                let (y, _) = self.forward(&mut g, &vars, x, Mode::Train)?;
                Ok(g.value(y).clone())
            }
            Mode::Eval => {
                let d = self.embedding_dim();
                let mut data = Vec::with_capacity(b * d);
                for i in 0..b {
                    let mut g = Graph::new();
                    let vars = self.net.register_frozen(&mut g);
                    let x = g.input(batch.slice_rows(i, 1));
                    let (y, _) = self.forward(&mut g, &vars, x, Mode::Eval)?;
                    data.extend_from_slice(g.value(y).data());
                }
                Tensor::new([b, d], data)
            }
        }
    }

    /// Standardizes raw frames and embeds them in eval mode, one row per frame.
    pub fn embed_frames(&self, frames: &[&[f32]]) -> Result<Tensor<T>> {
        if frames.is_empty() {
            return Tensor::new([0, self.embedding_dim()], Vec::new());
        }
        let batch = prepare_batch::<T>(frames, self.input_size())?;
        self.embed(&batch, Mode::Eval)
    }

    pub fn to_checkpoint(&self, metadata: TrainingMetadata) -> ModelCheckpoint {
        let net = self.net.cast::<f32>();
        ModelCheckpoint {
            format_version: FORMAT_VERSION,
            kind: ModelKind::Embedding,
            config: *net.config(),
            threshold: None,
            params: net.params().to_vec(),
            buffers: net.buffers().to_vec(),
            metadata,
        }
    }

    pub fn from_checkpoint(ck: ModelCheckpoint) -> Result<Self> {
        if ck.kind != ModelKind::Embedding {
            return Err(Error::Checkpoint(format!("expected an embedding checkpoint, found {:?}", ck.kind)));
        }
        let net = Network::<f32>::from_parts(ck.config, ck.params, ck.buffers)?;
        Self::from_network(net.cast())
    }

    pub fn save(&self, dir: impl AsRef<Path>, metadata: TrainingMetadata) -> Result<()> {
        self.to_checkpoint(metadata).save(dir)
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        Self::from_checkpoint(ModelCheckpoint::load(dir)?)
    }
}
