//! Split-then-augment dataset handling.
//!
//! Splits are drawn over source patterns before any augmentation, and every
//! augmented record keeps the id of its source in `lineage`, so leakage
//! between training and held-out data can be audited by set intersection.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{HitLabel, SpecklePattern};
use crate::error::{Error, Result};
use crate::simulator::stream_rng;

const TAG_SPLIT: u64 = 11;
const TAG_AUGMENT: u64 = 12;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train: f64,
    pub val: f64,
    pub test: f64,
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self { train: 0.5, val: 0.25, test: 0.25, seed: 0 }
    }
}

impl SplitSpec {
    pub fn validate(&self) -> Result<()> {
        let f = [self.train, self.val, self.test];
        if f.iter().any(|v| !(v.is_finite() && *v >= 0.0)) || (f.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::config("split", format!("fractions {f:?} must be non-negative and sum to 1")));
        }
        Ok(())
    }
}

/// Source-pattern ids per split, each list sorted.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Splits {
    pub train: Vec<u64>,
    pub val: Vec<u64>,
    pub test: Vec<u64>,
}

const SPLIT_FILES: [&str; 3] = ["train.txt", "val.txt", "test.txt"];

impl Splits {
    /// Patterns of `all` whose source id is in `ids`, in `all`'s order.
    pub fn select(all: &[SpecklePattern], ids: &[u64]) -> Vec<SpecklePattern> {
        let set: BTreeSet<u64> = ids.iter().copied().collect();
        all.iter().filter(|p| set.contains(&p.source_id())).cloned().collect()
    }

    /// One id per line in `train.txt`, `val.txt`, `test.txt`.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (name, ids) in SPLIT_FILES.iter().zip([&self.train, &self.val, &self.test]) {
            let text: String = ids.iter().map(|i| format!("{i}\n")).collect();
            fs::write(dir.join(name), text).map_err(|e| Error::io(dir.join(name), e))?;
        }
        Ok(())
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let mut lists = Vec::new();
        for name in SPLIT_FILES {
            let path = dir.join(name);
            let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
            let ids = text
                .lines()
                .map(str::trim)
                .filter(|l| !l.is_empty())
                .map(|l| l.parse().map_err(|_| Error::Dataset(format!("{name}: bad id {l:?}"))))
                .collect::<Result<Vec<u64>>>()?;
            lists.push(ids);
        }
        let test = lists.pop().unwrap_or_default();
        let val = lists.pop().unwrap_or_default();
        let train = lists.pop().unwrap_or_default();
        Ok(Self { train, val, test })
    }
}

/// Partitions source ids, stratified by `(sample_id, label)`. Within each
/// stratum the ids are shuffled and cut by largest-remainder rounding.
pub fn split_dataset(patterns: &[SpecklePattern], spec: &SplitSpec) -> Result<Splits> {
    spec.validate()?;
    let mut strata: BTreeMap<(u32, HitLabel), Vec<u64>> = BTreeMap::new();
    let mut seen = BTreeSet::new();
    for p in patterns {
        if p.lineage.is_some() {
            return Err(Error::Dataset(format!("pattern {} is augmented; split source patterns only", p.id)));
        }
        if !seen.insert(p.id) {
            return Err(Error::Dataset(format!("duplicate pattern id {}", p.id)));
        }
        strata.entry((p.sample_id, p.label)).or_default().push(p.id);
    }
    let fractions = [spec.train, spec.val, spec.test];
    let mut out = [Vec::new(), Vec::new(), Vec::new()];
    let mut too_small = Vec::new();
    for (k, ((sample, label), mut ids)) in strata.into_iter().enumerate() {
        ids.sort_unstable();
        ids.shuffle(&mut stream_rng(spec.seed, TAG_SPLIT, k as u64));
        let counts = apportion(ids.len(), &fractions);
        if counts.iter().zip(fractions).any(|(&c, f)| f > 0.0 && c == 0) {
            too_small.push(format!("sample {sample} / {label} ({} patterns)", ids.len()));
            continue;
        }
        let mut start = 0;
        for (s, c) in counts.into_iter().enumerate() {
            out[s].extend_from_slice(&ids[start..start + c]);
            start += c;
        }
    }
    if !too_small.is_empty() {
        return Err(Error::StrataTooSmall(too_small));
    }
    let [mut train, mut val, mut test] = out;
    train.sort_unstable();
    val.sort_unstable();
    test.sort_unstable();
    Ok(Splits { train, val, test })
}

/// Integer counts summing to `n`, proportional to `fractions`.
fn apportion(n: usize, fractions: &[f64; 3]) -> [usize; 3] {
    let exact = fractions.map(|f| f * n as f64);
    let mut counts = exact.map(|e| e.floor() as usize);
    let mut rest = n - counts.iter().sum::<usize>();
    let mut order = [0, 1, 2];
    // largest remainder first, ties to the earlier split
    order.sort_by(|&a, &b| (exact[b] - exact[b].floor()).total_cmp(&(exact[a] - exact[a].floor())).then(a.cmp(&b)));
    for &i in order.iter().cycle() {
        if rest == 0 {
            break;
        }
        if fractions[i] > 0.0 {
            counts[i] += 1;
            rest -= 1;
        }
    }
    counts
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    pub rotation: bool,
    /// Degrees, drawn uniformly from `[lo, hi)`.
    pub rotation_range: (f64, f64),
    pub zoom: bool,
    pub zoom_range: (f64, f64),
    pub shift: bool,
    /// Maximum offset in pixels along each axis.
    pub max_shift: f64,
    pub masking: bool,
    /// Number of rectangles, inclusive.
    pub mask_count: (usize, usize),
    /// Area of each rectangle as a fraction of the frame.
    pub mask_area: (f64, f64),
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            rotation: true,
            rotation_range: (0.0, 360.0),
            zoom: true,
            zoom_range: (0.85, 1.15),
            shift: true,
            max_shift: 8.0,
            masking: true,
            mask_count: (1, 3),
            mask_area: (0.05, 0.25),
        }
    }
}

impl AugmentConfig {
    pub fn disabled() -> Self {
        Self { rotation: false, zoom: false, shift: false, masking: false, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let range = |name: &'static str, (lo, hi): (f64, f64), min: f64| {
            if lo.is_finite() && hi.is_finite() && lo >= min && lo < hi {
                Ok(())
            } else {
                Err(Error::config(name, format!("range ({lo}, {hi}) is empty or out of bounds")))
            }
        };
        if self.rotation {
            range("rotation_range", self.rotation_range, f64::NEG_INFINITY)?;
        }
        if self.zoom {
            range("zoom_range", self.zoom_range, f64::MIN_POSITIVE)?;
        }
        if self.shift && !(self.max_shift.is_finite() && self.max_shift > 0.0) {
            return Err(Error::config("max_shift", "must be positive"));
        }
        if self.masking {
            if self.mask_count.0 == 0 || self.mask_count.0 > self.mask_count.1 {
                return Err(Error::config("mask_count", "needs 1 ≤ lo ≤ hi"));
            }
            range("mask_area", self.mask_area, 0.0)?;
            if self.mask_area.1 > 1.0 {
                return Err(Error::config("mask_area", "fractions must not exceed 1"));
            }
        }
        Ok(())
    }
}

/// Square frame with its validity mask.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub side: usize,
    pub intensity: Vec<f32>,
    pub mask: Vec<bool>,
}

impl Image {
    pub fn from_pattern(p: &SpecklePattern) -> Result<Self> {
        let side = (p.intensity.len() as f64).sqrt() as usize;
        if side * side != p.intensity.len() || p.mask.len() != p.intensity.len() {
            return Err(Error::shape("image", format!("pattern {} is not a square frame", p.id)));
        }
        Ok(Self { side, intensity: p.intensity.clone(), mask: p.mask.clone() })
    }

    /// Exact rotation by `quarter_turns × 90°` counter-clockwise (in
    /// row-down image coordinates: `(r, c) → (side−1−c, r)`).
    pub fn rotate_quarter(&self, quarter_turns: u32) -> Self {
        let n = self.side;
        let mut out = self.clone();
        for _ in 0..quarter_turns % 4 {
            let src = out.clone();
            for r in 0..n {
                for c in 0..n {
                    out.intensity[(n - 1 - c) * n + r] = src.intensity[r * n + c];
                    out.mask[(n - 1 - c) * n + r] = src.mask[r * n + c];
                }
            }
        }
        out
    }

    /// Resamples through the inverse map `out → src` with bilinear weights.
    /// Outside the frame counts as zero and invalid; an output pixel is valid
    /// only if every source pixel it draws on is valid.
    pub fn warp(&self, inverse: impl Fn(f64, f64) -> (f64, f64)) -> Self {
        let n = self.side;
        let mut intensity = vec![0.0f32; n * n];
        let mut mask = vec![false; n * n];
        for r in 0..n {
            for c in 0..n {
                let (sx, sy) = inverse(c as f64, r as f64);
                let (x0, y0) = (sx.floor(), sy.floor());
                let (fx, fy) = (sx - x0, sy - y0);
                let mut acc = 0.0f64;
                let mut valid = true;
                for (dy, wy) in [(0.0, 1.0 - fy), (1.0, fy)] {
                    for (dx, wx) in [(0.0, 1.0 - fx), (1.0, fx)] {
                        let w = wx * wy;
                        if w == 0.0 {
                            continue;
                        }
                        let (x, y) = (x0 + dx, y0 + dy);
                        if x < 0.0 || y < 0.0 || x >= n as f64 || y >= n as f64 {
                            valid = false;
                            continue;
                        }
                        let i = y as usize * n + x as usize;
                        valid &= self.mask[i];
                        acc += w * f64::from(self.intensity[i]);
                    }
                }
                let o = r * n + c;
                mask[o] = valid;
                intensity[o] = if valid { acc as f32 } else { 0.0 };
            }
        }
        Self { side: n, intensity, mask }
    }

    /// Rotation (degrees, counter-clockwise on screen), then zoom about
    /// the center, then shift, resampled once.
    pub fn affine(&self, degrees: f64, zoom: f64, shift: (f64, f64)) -> Self {
        let c = (self.side as f64 - 1.0) / 2.0;
        let (s, co) = degrees.to_radians().sin_cos();
        self.warp(|x, y| {
            // undo shift, undo zoom, undo rotation
            let (u, v) = ((x - shift.0 - c) / zoom, (y - shift.1 - c) / zoom);
            (co * u - s * v + c, s * u + co * v + c)
        })
    }

    /// Zeroes and invalidates an axis-aligned rectangle.
    pub fn occlude(&mut self, row: usize, col: usize, h: usize, w: usize) {
        let n = self.side;
        for r in row..(row + h).min(n) {
            for c in col..(col + w).min(n) {
                self.intensity[r * n + c] = 0.0;
                self.mask[r * n + c] = false;
            }
        }
    }
}

/// Applies the enabled transforms in the order rotation → zoom → shift →
/// masking. Exact right angles are done by permutation; everything else
/// shares one bilinear resampling.
pub fn augment_image(img: &Image, cfg: &AugmentConfig, rng: &mut impl Rng) -> Image {
    let degrees = if cfg.rotation { rng.random_range(cfg.rotation_range.0..=cfg.rotation_range.1) } else { 0.0 };
    let zoom = if cfg.zoom { rng.random_range(cfg.zoom_range.0..=cfg.zoom_range.1) } else { 1.0 };
    let shift = if cfg.shift {
        (rng.random_range(-cfg.max_shift..=cfg.max_shift), rng.random_range(-cfg.max_shift..=cfg.max_shift))
    } else {
        (0.0, 0.0)
    };
    let turns = degrees.rem_euclid(360.0);
    let mut out = if turns % 90.0 == 0.0 {
        let rotated = img.rotate_quarter((turns / 90.0) as u32);
        if zoom == 1.0 && shift == (0.0, 0.0) {
            rotated
        } else {
            rotated.affine(0.0, zoom, shift)
        }
    } else {
        img.affine(degrees, zoom, shift)
    };
    if cfg.masking {
        let n = out.side;
        let count = rng.random_range(cfg.mask_count.0..=cfg.mask_count.1);
        for _ in 0..count {
            let area = rng.random_range(cfg.mask_area.0..=cfg.mask_area.1) * (n * n) as f64;
            let aspect: f64 = rng.random_range(0.5..2.0);
            let w = ((area * aspect).sqrt().round() as usize).clamp(1, n);
            let h = ((area / w as f64).round() as usize).clamp(1, n);
            let row = rng.random_range(0..=n - h);
            let col = rng.random_range(0..=n - w);
            out.occlude(row, col, h, w);
        }
    }
    out
}

/// Augmented copy of `p` under a new id; provenance fields are kept and
/// `lineage` points at the source pattern.
pub fn augment(p: &SpecklePattern, cfg: &AugmentConfig, rng: &mut impl Rng, new_id: u64) -> Result<SpecklePattern> {
    let out = augment_image(&Image::from_pattern(p)?, cfg, rng);
    Ok(SpecklePattern { id: new_id, lineage: Some(p.source_id()), intensity: out.intensity, mask: out.mask, ..p.clone() })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExpandConfig {
    pub per_class_budget: usize,
    pub augment: AugmentConfig,
    pub seed: u64,
    /// Ids of augmented records are `first_id, first_id + 1, …`.
    pub first_id: u64,
}

/// Grows each class of `sources` to exactly `per_class_budget` records: the
/// sources themselves plus augmented copies spread as evenly as possible.
/// With a budget equal to the class size the sources come back unchanged.
pub fn expand_split(sources: &[SpecklePattern], classes: &[HitLabel], cfg: &ExpandConfig) -> Result<Vec<SpecklePattern>> {
    cfg.augment.validate()?;
    let mut jobs = Vec::new();
    let mut out = Vec::new();
    for &label in classes {
        let members: Vec<&SpecklePattern> = sources.iter().filter(|p| p.label == label).collect();
        if members.is_empty() {
            return Err(Error::EmptyClass(label.to_string()));
        }
        if cfg.per_class_budget < members.len() {
            return Err(Error::config(
                "per_class_budget",
                format!("{} is below the {} sources of class {label}", cfg.per_class_budget, members.len()),
            ));
        }
        out.extend(members.iter().map(|p| (*p).clone()));
        let extra = cfg.per_class_budget - members.len();
        for k in 0..extra {
            jobs.push(members[k % members.len()]);
        }
    }
    let base = cfg.first_id;
    let augmented = jobs
        .par_iter()
        .enumerate()
        .map(|(k, p)| {
            let id = base + k as u64;
            augment(p, &cfg.augment, &mut stream_rng(cfg.seed, TAG_AUGMENT, id), id)
        })
        .collect::<Result<Vec<_>>>()?;
    out.extend(augmented);
    Ok(out)
}

/// Source ids present in `pool` that also appear in `held_out`.
pub fn leaked_sources(pool: &[SpecklePattern], held_out: &[u64]) -> Vec<u64> {
    let held: BTreeSet<u64> = held_out.iter().copied().collect();
    let leaked: BTreeSet<u64> = pool.iter().map(SpecklePattern::source_id).filter(|s| held.contains(s)).collect();
    leaked.into_iter().collect()
}
