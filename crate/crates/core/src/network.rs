//! The shared convolutional backbone.
//!
//! `conv → ReLU → batch norm → 2×2 max-pool`, twice, then two fully
//! connected layers (ReLU between them). The embedding net L2-normalizes the
//! final layer; the baseline classifier reads it as a single logit.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{BatchStats, Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

pub const BN_MOMENTUM: f64 = 0.1;
pub const BN_EPS: f64 = 1e-5;
/// Lower bound on the per-image standard deviation used by [`standardize`].
pub const STANDARDIZE_EPS: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Train,
    Eval,
}

/// Layer sizes of the backbone. For the embedding net `output_dim` is the
/// embedding dimension `d`; the baseline uses `output_dim = 1`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetworkConfig {
    pub input_size: usize,
    pub conv1_out_channels: usize,
    pub conv2_out_channels: usize,
    pub kernel_size: usize,
    pub fc_hidden: usize,
    pub output_dim: usize,
    pub init_std: f64,
}

pub type EmbeddingNetConfig = NetworkConfig;

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            input_size: 96,
            conv1_out_channels: 32,
            conv2_out_channels: 64,
            kernel_size: 5,
            fc_hidden: 512,
            output_dim: 128,
            init_std: 0.2,
        }
    }
}

impl NetworkConfig {
    /// Narrow variant sized for single-core CPU training runs. Same topology,
    /// input size, embedding dimension and init; fewer channels and hidden units.
    pub fn desk() -> Self {
        Self { conv1_out_channels: 8, conv2_out_channels: 16, fc_hidden: 64, ..Self::default() }
    }

    pub fn embedding_dim(&self) -> usize {
        self.output_dim
    }

    /// Spatial extents through the stack: input, conv1, pool1, conv2, pool2.
    pub fn extents(&self) -> Result<[usize; 5]> {
        let k = self.kernel_size;
        let s0 = self.input_size;
        let c1 = s0.checked_sub(k - 1).filter(|&v| v > 0);
        let p1 = c1.map(|v| v / 2).filter(|&v| v > 0);
        let c2 = p1.and_then(|v| v.checked_sub(k - 1)).filter(|&v| v > 0);
        let p2 = c2.map(|v| v / 2).filter(|&v| v > 0);
        match (c1, p1, c2, p2) {
            (Some(c1), Some(p1), Some(c2), Some(p2)) => Ok([s0, c1, p1, c2, p2]),
            _ => Err(Error::config(
                "input_size",
                format!("{s0} leaves a non-positive extent after two {k}x{k} convolutions and pools"),
            )),
        }
    }

    pub fn flat_features(&self) -> Result<usize> {
        let e = self.extents()?;
        Ok(self.conv2_out_channels * e[4] * e[4])
    }

    pub fn validate(&self) -> Result<()> {
        if self.kernel_size == 0 {
            return Err(Error::config("kernel_size", "must be positive"));
        }
        for (name, v) in [
            ("conv1_out_channels", self.conv1_out_channels),
            ("conv2_out_channels", self.conv2_out_channels),
            ("fc_hidden", self.fc_hidden),
            ("output_dim", self.output_dim),
        ] {
            if v == 0 {
                return Err(Error::config(name, "must be positive"));
            }
        }
        if !(self.init_std.is_finite() && self.init_std > 0.0) {
            return Err(Error::config("init_std", "must be finite and positive"));
        }
        self.extents().map(|_| ())
    }

    /// `(name, shape)` of every trainable tensor, in storage order.
    pub fn param_shapes(&self) -> Result<Vec<(&'static str, Vec<usize>)>> {
        let (c1, c2, k) = (self.conv1_out_channels, self.conv2_out_channels, self.kernel_size);
        Ok(vec![
            ("conv1.weight", vec![c1, 1, k, k]),
            ("conv1.bias", vec![c1]),
            ("bn1.scale", vec![c1]),
            ("bn1.shift", vec![c1]),
            ("conv2.weight", vec![c2, c1, k, k]),
            ("conv2.bias", vec![c2]),
            ("bn2.scale", vec![c2]),
            ("bn2.shift", vec![c2]),
            ("fc1.weight", vec![self.fc_hidden, self.flat_features()?]),
            ("fc1.bias", vec![self.fc_hidden]),
            ("fc2.weight", vec![self.output_dim, self.fc_hidden]),
            ("fc2.bias", vec![self.output_dim]),
        ])
    }

    pub fn param_count(&self) -> Result<usize> {
        Ok(self.param_shapes()?.iter().map(|(_, s)| s.iter().product::<usize>()).sum())
    }
}

const BUFFER_NAMES: [&str; 4] = ["bn1.running_mean", "bn1.running_var", "bn2.running_mean", "bn2.running_var"];

/// Parameters and batch-norm running statistics of one backbone instance.
#[derive(Clone, Debug, PartialEq)]
pub struct Network<T: Real = f32> {
    config: NetworkConfig,
    params: Vec<(String, Tensor<T>)>,
    buffers: Vec<(String, Tensor<T>)>,
}

/// Graph handles for a [`Network`]'s parameters, in storage order.
#[derive(Clone, Debug)]
pub struct ParamVars(pub Vec<Var>);

impl<T: Real> Network<T> {
    /// Gaussian(0, `init_std`) weights, zero biases, unit/zero batch-norm affine.
    pub fn build(config: NetworkConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, config.init_std).map_err(|e| Error::config("init_std", e.to_string()))?;
        let params = config
            .param_shapes()?
            .into_iter()
            .map(|(name, shape)| {
                let n: usize = shape.iter().product();
                let data = if name.ends_with(".weight") {
                    (0..n).map(|_| T::from_f64(normal.sample(&mut rng))).collect()
                } else if name.ends_with(".scale") {
                    vec![T::one(); n]
                } else {
                    vec![T::zero(); n]
                };
                (name.to_string(), Tensor::new(shape, data).expect("shape from config"))
            })
            .collect();
        let (c1, c2) = (config.conv1_out_channels, config.conv2_out_channels);
        let buffers = vec![
            (BUFFER_NAMES[0].to_string(), Tensor::zeros([c1])),
            (BUFFER_NAMES[1].to_string(), Tensor::ones([c1])),
            (BUFFER_NAMES[2].to_string(), Tensor::zeros([c2])),
            (BUFFER_NAMES[3].to_string(), Tensor::ones([c2])),
        ];
        Ok(Self { config, params, buffers })
    }

    /// Reassembles a network from named tensors, checking every name and shape.
    pub fn from_parts(
        config: NetworkConfig,
        params: Vec<(String, Tensor<T>)>,
        buffers: Vec<(String, Tensor<T>)>,
    ) -> Result<Self> {
        config.validate()?;
        let expected = config.param_shapes()?;
        if params.len() != expected.len() {
            return Err(Error::Checkpoint(format!("expected {} parameters, found {}", expected.len(), params.len())));
        }
        for ((name, shape), (got_name, t)) in expected.iter().zip(&params) {
            if name != got_name || t.shape() != shape.as_slice() {
                return Err(Error::Checkpoint(format!(
                    "parameter {got_name} {:?} does not match expected {name} {shape:?}",
                    t.shape()
                )));
            }
        }
        let (c1, c2) = (config.conv1_out_channels, config.conv2_out_channels);
        let buffer_shapes = [c1, c1, c2, c2];
        if buffers.len() != 4 {
            return Err(Error::Checkpoint(format!("expected 4 running-stat buffers, found {}", buffers.len())));
        }
        for ((name, c), (got, t)) in BUFFER_NAMES.iter().zip(buffer_shapes).zip(&buffers) {
            if name != got || t.shape() != [c] {
                return Err(Error::Checkpoint(format!("buffer {got} {:?} does not match {name} [{c}]", t.shape())));
            }
        }
        Ok(Self { config, params, buffers })
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    pub fn params(&self) -> &[(String, Tensor<T>)] {
        &self.params
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut Tensor<T>> {
        self.params.iter_mut().map(|(_, t)| t)
    }

    pub fn buffers(&self) -> &[(String, Tensor<T>)] {
        &self.buffers
    }

    pub fn param(&self, name: &str) -> Option<&Tensor<T>> {
        self.params.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.params.iter_mut().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn cast<U: Real>(&self) -> Network<U> {
        let conv = |v: &[(String, Tensor<T>)]| v.iter().map(|(n, t)| (n.clone(), t.cast())).collect();
        Network { config: self.config, params: conv(&self.params), buffers: conv(&self.buffers) }
    }

    /// Adds every parameter to `g` as a trainable leaf.
    pub fn register(&self, g: &mut Graph<T>) -> ParamVars {
        ParamVars(self.params.iter().map(|(_, t)| g.param(t.clone())).collect())
    }

    /// Adds every parameter to `g` as a constant.
    pub fn register_frozen(&self, g: &mut Graph<T>) -> ParamVars {
        ParamVars(self.params.iter().map(|(_, t)| g.input(t.clone())).collect())
    }

    /// Raw output of the last fully connected layer for a `[B, 1, S, S]`
    /// standardized batch. Train mode also returns the two layers' batch
    /// statistics for [`Network::update_running_stats`].
    pub fn forward(
        &self,
        g: &mut Graph<T>,
        vars: &ParamVars,
        input: Var,
        mode: Mode,
    ) -> Result<(Var, Vec<BatchStats<T>>)> {
        let s = self.config.input_size;
        match g.value(input).shape() {
            [_, 1, h, w] if *h == s && *w == s => {}
            other => {
                return Err(Error::shape("forward", format!("expected [B, 1, {s}, {s}], got {other:?}")));
            }
        }
        let v = &vars.0;
        let eps = T::from_f64(BN_EPS);
        let mut stats = Vec::new();
        let mut x = input;
        for layer in 0..2 {
            let base = layer * 4;
            let c = g.conv2d(x, v[base], Some(v[base + 1]))?;
            let r = g.relu(c);
            let n = match mode {
                Mode::Train => {
                    let (n, st) = g.batch_norm_train(r, v[base + 2], v[base + 3], eps)?;
                    stats.push(st);
                    n
                }
                Mode::Eval => {
                    let mean = self.buffers[layer * 2].1.data();
                    let var = self.buffers[layer * 2 + 1].1.data();
                    g.batch_norm_eval(r, v[base + 2], v[base + 3], mean, var, eps)?
                }
            };
            x = g.max_pool2d(n, 2)?;
        }
        let flat = g.flatten(x)?;
        let h = g.linear(flat, v[8], v[9])?;
        let h = g.relu(h);
        let out = g.linear(h, v[10], v[11])?;
        Ok((out, stats))
    }

    /// `running ← (1 − momentum)·running + momentum·batch`.
    pub fn update_running_stats(&mut self, stats: &[BatchStats<T>]) {
        let m = BN_MOMENTUM;
        for (layer, st) in stats.iter().enumerate() {
            for (slot, observed) in [(layer * 2, &st.mean), (layer * 2 + 1, &st.var_unbiased)] {
                for (r, &o) in self.buffers[slot].1.data_mut().iter_mut().zip(observed) {
                    *r = T::from_f64((1.0 - m) * r.as_f64() + m * o.as_f64());
                }
            }
        }
    }

    /// Copies graph gradients for the registered parameters into owned buffers.
    pub fn collect_grads(&self, g: &Graph<T>, vars: &ParamVars) -> Vec<Vec<T>> {
        vars.0
            .iter()
            .zip(&self.params)
            .map(|(&v, (_, t))| g.grad(v).map(<[T]>::to_vec).unwrap_or_else(|| vec![T::zero(); t.numel()]))
            .collect()
    }
}

/// Per-image standardization: subtract the mean, divide by the standard
/// deviation (floored at [`STANDARDIZE_EPS`]).
pub fn standardize<T: Real>(image: &[f32]) -> Vec<T> {
    let n = image.len().max(1) as f64;
    let mean = image.iter().map(|&v| f64::from(v)).sum::<f64>() / n;
    let var = image.iter().map(|&v| (f64::from(v) - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt().max(STANDARDIZE_EPS);
    image.iter().map(|&v| T::from_f64((f64::from(v) - mean) / std)).collect()
}

/// Standardizes and stacks square frames into a `[B, 1, S, S]` tensor.
pub fn prepare_batch<T: Real>(images: &[&[f32]], size: usize) -> Result<Tensor<T>> {
    let mut data = Vec::with_capacity(images.len() * size * size);
    for (i, img) in images.iter().enumerate() {
        if img.len() != size * size {
            return Err(Error::shape(
                "prepare_batch",
                format!("image {i} has {} pixels, expected {size}x{size}", img.len()),
            ));
        }
        data.extend(standardize::<T>(img));
    }
    Tensor::new([images.len(), 1, size, size], data)
}
