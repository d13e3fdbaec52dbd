//! Checkpoint container: a text manifest plus one little-endian f32 blob.
//!
//! ```text
//! <dir>/manifest.txt   key = value lines, then one `param`/`buffer` line per tensor
//! <dir>/tensors.bin    concatenated row-major f32 data
//! ```
//!
//! The manifest records the blob length and an FNV-1a hash so truncated or
//! corrupted blobs fail to load instead of producing a garbage model.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::NetworkConfig;
use crate::tensor::Tensor;

pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.txt";
pub const BLOB_FILE: &str = "tensors.bin";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Embedding,
    Baseline,
}

impl ModelKind {
    fn as_str(self) -> &'static str {
        match self {
            ModelKind::Embedding => "embedding",
            ModelKind::Baseline => "baseline",
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingMetadata {
    pub seed: u64,
    pub epoch: usize,
    pub loss: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelCheckpoint {
    pub format_version: u32,
    pub kind: ModelKind,
    pub config: NetworkConfig,
    /// Decision threshold; present for baseline checkpoints only.
    pub threshold: Option<f64>,
    pub params: Vec<(String, Tensor<f32>)>,
    pub buffers: Vec<(String, Tensor<f32>)>,
    pub metadata: TrainingMetadata,
}

fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

fn corrupt(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

impl ModelCheckpoint {
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut blob = Vec::new();
        let mut manifest = String::new();
        let mut tensor_lines = String::new();
        let mut offset = 0usize;
        for (section, list) in [("param", &self.params), ("buffer", &self.buffers)] {
            for (name, t) in list {
                let shape: Vec<String> = t.shape().iter().map(ToString::to_string).collect();
                let _ = writeln!(
                    tensor_lines,
                    "{section} {name} shape={} offset={offset} count={}",
                    shape.join(","),
                    t.numel()
                );
                for v in t.data() {
                    blob.extend_from_slice(&v.to_le_bytes());
                }
                offset += t.numel();
            }
        }
        let c = &self.config;
        let _ = writeln!(manifest, "# specklenn checkpoint");
        let _ = writeln!(manifest, "format_version = {}", self.format_version);
        let _ = writeln!(manifest, "model_kind = {}", self.kind.as_str());
        let _ = writeln!(manifest, "dtype = f32");
        let _ = writeln!(manifest, "byte_order = little");
        let _ = writeln!(manifest, "config.input_size = {}", c.input_size);
        let _ = writeln!(manifest, "config.conv1_out_channels = {}", c.conv1_out_channels);
        let _ = writeln!(manifest, "config.conv2_out_channels = {}", c.conv2_out_channels);
        let _ = writeln!(manifest, "config.kernel_size = {}", c.kernel_size);
        let _ = writeln!(manifest, "config.fc_hidden = {}", c.fc_hidden);
        let _ = writeln!(manifest, "config.output_dim = {}", c.output_dim);
        let _ = writeln!(manifest, "config.init_std = {:?}", c.init_std);
        if let Some(th) = self.threshold {
            let _ = writeln!(manifest, "config.threshold = {th:?}");
        }
        let _ = writeln!(manifest, "meta.seed = {}", self.metadata.seed);
        let _ = writeln!(manifest, "meta.epoch = {}", self.metadata.epoch);
        let _ = writeln!(manifest, "meta.loss = {:?}", self.metadata.loss);
        let _ = writeln!(manifest, "blob = {BLOB_FILE}");
        let _ = writeln!(manifest, "blob_bytes = {}", blob.len());
        let _ = writeln!(manifest, "blob_fnv1a64 = {:016x}", fnv1a64(&blob));
        manifest.push_str(&tensor_lines);

        // blob first, manifest last: a reader never sees a manifest that
        // points at a half-written blob from this save
        write_atomic(&dir.join(BLOB_FILE), &blob)?;
        write_atomic(&dir.join(MANIFEST_FILE), manifest.as_bytes())
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let mpath = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
        let mut keys = BTreeMap::new();
        let mut tensor_lines = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if line.starts_with("param ") || line.starts_with("buffer ") {
                tensor_lines.push(line);
            } else if let Some((k, v)) = line.split_once('=') {
                keys.insert(k.trim().to_string(), v.trim().to_string());
            } else {
                return Err(corrupt(format!("manifest line {}: cannot parse {line:?}", lineno + 1)));
            }
        }
        let get = |k: &str| keys.get(k).map(String::as_str).ok_or_else(|| corrupt(format!("manifest missing {k}")));
        fn num<V: std::str::FromStr>(k: &str, v: &str) -> Result<V> {
            v.parse().map_err(|_| corrupt(format!("{k}: invalid value {v:?}")))
        }
        let version: u32 = num("format_version", get("format_version")?)?;
        if version != FORMAT_VERSION {
            return Err(Error::CheckpointVersion { found: version, expected: FORMAT_VERSION });
        }
        let kind = match get("model_kind")? {
            "embedding" => ModelKind::Embedding,
            "baseline" => ModelKind::Baseline,
            other => return Err(corrupt(format!("unknown model_kind {other:?}"))),
        };
        if get("dtype")? != "f32" || get("byte_order")? != "little" {
            return Err(corrupt("only little-endian f32 blobs are supported"));
        }
        let cfg = |k: &str| -> Result<usize> { num(k, get(&format!("config.{k}"))?) };
        let config = NetworkConfig {
            input_size: cfg("input_size")?,
            conv1_out_channels: cfg("conv1_out_channels")?,
            conv2_out_channels: cfg("conv2_out_channels")?,
            kernel_size: cfg("kernel_size")?,
            fc_hidden: cfg("fc_hidden")?,
            output_dim: cfg("output_dim")?,
            init_std: num("init_std", get("config.init_std")?)?,
        };
        let threshold = match keys.get("config.threshold") {
            Some(v) => Some(num("threshold", v)?),
            None => None,
        };
        let metadata = TrainingMetadata {
            seed: num("meta.seed", get("meta.seed")?)?,
            epoch: num("meta.epoch", get("meta.epoch")?)?,
            loss: num("meta.loss", get("meta.loss")?)?,
        };

        let bpath = dir.join(get("blob")?);
        let blob = fs::read(&bpath).map_err(|e| Error::io(&bpath, e))?;
        let want_bytes: usize = num("blob_bytes", get("blob_bytes")?)?;
        if blob.len() != want_bytes {
            return Err(corrupt(format!("blob has {} bytes, manifest says {want_bytes}", blob.len())));
        }
        let want_hash = u64::from_str_radix(get("blob_fnv1a64")?, 16).map_err(|_| corrupt("bad blob hash"))?;
        if fnv1a64(&blob) != want_hash {
            return Err(corrupt("blob hash mismatch"));
        }
        let floats: Vec<f32> = blob.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();

        let mut params = Vec::new();
        let mut buffers = Vec::new();
        for line in tensor_lines {
            let mut parts = line.split_whitespace();
            let section = parts.next().unwrap_or_default();
            let name = parts.next().ok_or_else(|| corrupt(format!("tensor line without name: {line:?}")))?;
            let mut shape = None;
            let mut offset = None;
            let mut count = None;
            for p in parts {
                match p.split_once('=') {
                    Some(("shape", v)) => {
                        shape = Some(
                            v.split(',')
                                .filter(|s| !s.is_empty())
                                .map(|s| num::<usize>("shape", s))
                                .collect::<Result<Vec<_>>>()?,
                        )
                    }
                    Some(("offset", v)) => offset = Some(num::<usize>("offset", v)?),
                    Some(("count", v)) => count = Some(num::<usize>("count", v)?),
                    _ => return Err(corrupt(format!("unexpected field {p:?} for {name}"))),
                }
            }
            let (Some(shape), Some(offset), Some(count)) = (shape, offset, count) else {
                return Err(corrupt(format!("incomplete tensor line for {name}")));
            };
            let end = offset.checked_add(count).filter(|&e| e <= floats.len());
            let Some(end) = end else {
                return Err(corrupt(format!("{name} extends past the blob")));
            };
            let t = Tensor::new(shape, floats[offset..end].to_vec())
                .map_err(|e| corrupt(format!("{name}: {e}")))?;
            if section == "param" {
                params.push((name.to_string(), t));
            } else {
                buffers.push((name.to_string(), t));
            }
        }
        Ok(Self { format_version: version, kind, config, threshold, params, buffers, metadata })
    }
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> ModelCheckpoint {
        ModelCheckpoint {
            format_version: FORMAT_VERSION,
            kind: ModelKind::Baseline,
            config: NetworkConfig::desk(),
            threshold: Some(0.9),
            params: vec![("a".into(), Tensor::new([2, 2], vec![1.0, -0.0, f32::MIN_POSITIVE, 3.5e-12]).unwrap())],
            buffers: vec![("b".into(), Tensor::new([1], vec![7.25]).unwrap())],
            metadata: TrainingMetadata { seed: 11, epoch: 4, loss: 0.1 + 0.2 },
        }
    }

    #[test]
    fn round_trip_preserves_every_bit() {
        let dir = tempfile::tempdir().unwrap();
        let ck = sample();
        ck.save(dir.path()).unwrap();
        let back = ModelCheckpoint::load(dir.path()).unwrap();
        assert_eq!(back, ck);
        let bits = |c: &ModelCheckpoint| c.params[0].1.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&back), bits(&ck));
    }

    #[test]
    fn truncated_blob_fails_to_load() {
        let dir = tempfile::tempdir().unwrap();
        sample().save(dir.path()).unwrap();
        let blob = dir.path().join(BLOB_FILE);
        let bytes = fs::read(&blob).unwrap();
        fs::write(&blob, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(ModelCheckpoint::load(dir.path()), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn flipped_byte_fails_hash_check() {
        let dir = tempfile::tempdir().unwrap();
        sample().save(dir.path()).unwrap();
        let blob = dir.path().join(BLOB_FILE);
        let mut bytes = fs::read(&blob).unwrap();
        bytes[5] ^= 0x40;
        fs::write(&blob, &bytes).unwrap();
        assert!(ModelCheckpoint::load(dir.path()).is_err());
    }

    #[test]
    fn version_mismatch_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        sample().save(dir.path()).unwrap();
        let m = dir.path().join(MANIFEST_FILE);
        let text = fs::read_to_string(&m).unwrap().replace("format_version = 1", "format_version = 9");
        fs::write(&m, text).unwrap();
        assert!(matches!(
            ModelCheckpoint::load(dir.path()),
            Err(Error::CheckpointVersion { found: 9, expected: 1 })
        ));
    }

    #[test]
    fn truncated_manifest_fails_to_load() {
        let dir = tempfile::tempdir().unwrap();
        sample().save(dir.path()).unwrap();
        let m = dir.path().join(MANIFEST_FILE);
        let text = fs::read_to_string(&m).unwrap();
        fs::write(&m, &text[..text.len() / 2]).unwrap();
        assert!(ModelCheckpoint::load(dir.path()).is_err());
    }
}
