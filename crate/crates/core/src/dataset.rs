//! Pattern records and the on-disk dataset directory.
//!
//! ```text
//! <dir>/manifest.txt  header `key = value` lines, then one `pattern ...` line per frame
//! <dir>/frames.bin    little-endian f32, side×side per frame, manifest order
//! <dir>/masks.bin     one byte per pixel (1 = valid), same layout
//! ```

use std::collections::BTreeMap;
use std::fmt::{self, Write as _};
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DATASET_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.txt";
pub const FRAMES_FILE: &str = "frames.bin";
pub const MASKS_FILE: &str = "masks.bin";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HitLabel {
    NoHit,
    SingleHit,
    MultiHit,
    NonSampleHit,
}

impl HitLabel {
    pub const ALL: [HitLabel; 4] = [HitLabel::NoHit, HitLabel::SingleHit, HitLabel::MultiHit, HitLabel::NonSampleHit];

    pub fn as_str(self) -> &'static str {
        match self {
            HitLabel::NoHit => "no_hit",
            HitLabel::SingleHit => "single_hit",
            HitLabel::MultiHit => "multi_hit",
            HitLabel::NonSampleHit => "non_sample_hit",
        }
    }

    /// 1 → single, ≥2 → multi, 0 → no-hit.
    pub fn from_multiplicity(m: u8) -> Self {
        match m {
            0 => HitLabel::NoHit,
            1 => HitLabel::SingleHit,
            _ => HitLabel::MultiHit,
        }
    }
}

impl fmt::Display for HitLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for HitLabel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        HitLabel::ALL
            .into_iter()
            .find(|l| l.as_str() == s)
            .ok_or_else(|| Error::Invalid(format!("unknown label {s:?}")))
    }
}

/// One detector frame with its provenance.
#[derive(Clone, Debug, PartialEq)]
pub struct SpecklePattern {
    /// Unique within a dataset. Augmented copies get fresh ids and keep the
    /// source id in `lineage`.
    pub id: u64,
    pub sample_id: u32,
    pub label: HitLabel,
    /// Particles in the beam: 0 for no-hit and non-sample frames.
    pub hit_multiplicity: u8,
    /// Atom count of the sample's particle (0 when there is none).
    pub n_atoms: u32,
    pub fluence_factor: f64,
    pub rng_seed: u64,
    pub lineage: Option<u64>,
    pub intensity: Vec<f32>,
    /// `true` = valid pixel. Invalid pixels carry intensity 0.
    pub mask: Vec<bool>,
}

impl SpecklePattern {
    /// The id of the un-augmented pattern this record derives from.
    pub fn source_id(&self) -> u64 {
        self.lineage.unwrap_or(self.id)
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    pub side: usize,
    /// Free-form generation parameters echoed into the manifest.
    pub info: BTreeMap<String, String>,
    pub patterns: Vec<SpecklePattern>,
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Dataset(msg.into())
}

impl Dataset {
    pub fn new(side: usize) -> Self {
        Self { side, ..Self::default() }
    }

    pub fn len(&self) -> usize {
        self.patterns.len()
    }

    pub fn is_empty(&self) -> bool {
        self.patterns.is_empty()
    }

    pub fn count(&self, label: HitLabel) -> usize {
        self.patterns.iter().filter(|p| p.label == label).count()
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let px = self.side * self.side;
        let mut frames = Vec::with_capacity(self.patterns.len() * px * 4);
        let mut masks = Vec::with_capacity(self.patterns.len() * px);
        let mut m = String::new();
        let _ = writeln!(m, "# specklenn dataset");
        let _ = writeln!(m, "format_version = {DATASET_VERSION}");
        let _ = writeln!(m, "side = {}", self.side);
        let _ = writeln!(m, "count = {}", self.patterns.len());
        for (k, v) in &self.info {
            if k.contains(['=', '\n']) || v.contains('\n') {
                return Err(bad(format!("info entry {k:?} cannot be written to a manifest")));
            }
            let _ = writeln!(m, "info.{k} = {v}");
        }
        for p in &self.patterns {
            if p.intensity.len() != px || p.mask.len() != px {
                return Err(bad(format!("pattern {} is not {}x{}", p.id, self.side, self.side)));
            }
            let lineage = p.lineage.map_or_else(|| "-".to_string(), |l| l.to_string());
            let _ = writeln!(
                m,
                "pattern id={} sample={} label={} multiplicity={} atoms={} fluence={:?} seed={} lineage={lineage}",
                p.id, p.sample_id, p.label, p.hit_multiplicity, p.n_atoms, p.fluence_factor, p.rng_seed
            );
            for v in &p.intensity {
                frames.extend_from_slice(&v.to_le_bytes());
            }
            masks.extend(p.mask.iter().map(|&b| u8::from(b)));
        }
        fs::write(dir.join(FRAMES_FILE), frames).map_err(|e| Error::io(dir.join(FRAMES_FILE), e))?;
        fs::write(dir.join(MASKS_FILE), masks).map_err(|e| Error::io(dir.join(MASKS_FILE), e))?;
        fs::write(dir.join(MANIFEST_FILE), m).map_err(|e| Error::io(dir.join(MANIFEST_FILE), e))
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let read = |name: &str| fs::read(dir.join(name)).map_err(|e| Error::io(dir.join(name), e));
        let text = String::from_utf8(read(MANIFEST_FILE)?).map_err(|_| bad("manifest is not UTF-8"))?;
        let mut header = BTreeMap::new();
        let mut records = Vec::new();
        for line in text.lines().map(str::trim) {
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if let Some(rest) = line.strip_prefix("pattern ") {
                records.push(rest);
            } else if let Some((k, v)) = line.split_once('=') {
                header.insert(k.trim().to_string(), v.trim().to_string());
            } else {
                return Err(bad(format!("cannot parse manifest line {line:?}")));
            }
        }
        let field = |k: &str| header.get(k).ok_or_else(|| bad(format!("manifest missing {k}")));
        let version: u32 = field("format_version")?.parse().map_err(|_| bad("bad format_version"))?;
        if version != DATASET_VERSION {
            return Err(bad(format!("dataset format {version}, expected {DATASET_VERSION}")));
        }
        let side: usize = field("side")?.parse().map_err(|_| bad("bad side"))?;
        let count: usize = field("count")?.parse().map_err(|_| bad("bad count"))?;
        if records.len() != count {
            return Err(bad(format!("manifest lists {} patterns, header says {count}", records.len())));
        }
        let px = side * side;
        let frames = read(FRAMES_FILE)?;
        let masks = read(MASKS_FILE)?;
        if frames.len() != count * px * 4 || masks.len() != count * px {
            return Err(bad("frame or mask blob size does not match the manifest"));
        }
        let info = header
            .iter()
            .filter_map(|(k, v)| k.strip_prefix("info.").map(|k| (k.to_string(), v.clone())))
            .collect();
        let mut patterns = Vec::with_capacity(count);
        for (i, rec) in records.iter().enumerate() {
            let kv: BTreeMap<&str, &str> = rec.split_whitespace().filter_map(|t| t.split_once('=')).collect();
            let get = |k: &str| kv.get(k).copied().ok_or_else(|| bad(format!("pattern {i}: missing {k}")));
            fn parse<V: FromStr>(i: usize, k: &str, v: &str) -> Result<V> {
                v.parse().map_err(|_| bad(format!("pattern {i}: invalid {k} {v:?}")))
            }
            let lineage = match get("lineage")? {
                "-" => None,
                v => Some(parse(i, "lineage", v)?),
            };
            let fb = &frames[i * px * 4..(i + 1) * px * 4];
            patterns.push(SpecklePattern {
                id: parse(i, "id", get("id")?)?,
                sample_id: parse(i, "sample", get("sample")?)?,
                label: get("label")?.parse()?,
                hit_multiplicity: parse(i, "multiplicity", get("multiplicity")?)?,
                n_atoms: parse(i, "atoms", get("atoms")?)?,
                fluence_factor: parse(i, "fluence", get("fluence")?)?,
                rng_seed: parse(i, "seed", get("seed")?)?,
                lineage,
                intensity: fb.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect(),
                mask: masks[i * px..(i + 1) * px].iter().map(|&b| b != 0).collect(),
            });
        }
        Ok(Self { side, info, patterns })
    }
}
