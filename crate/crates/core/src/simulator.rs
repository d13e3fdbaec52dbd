//! Synthetic single-particle diffraction frames.
//!
//! Atoms are rotated, projected onto the detector plane and deposited
//! (cloud-in-cell) on a real-space grid whose 2-D FFT samples the flat,
//! small-angle far field on the detector's pixel grid. Multi-particle hits
//! add the particles' fields coherently, each with an exact continuous
//! translation phase. Expected photon counts then receive Poisson shot noise,
//! additive Gaussian noise, clamping, detector masks and a center crop.
//!
//! Units are grid units: one real-space grid cell is 1, so the reciprocal
//! pixel spacing is `2π / pixels`.

use std::sync::Arc;

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson, StandardNormal};
use rayon::prelude::*;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, HitLabel, SpecklePattern};
use crate::error::{Error, Result};

/// Radius (grid units) of a 10⁴-atom particle; radius grows as n^(1/3).
pub const RADIUS_AT_1E4_ATOMS: f64 = 5.7;
/// Above this many expected photons per pixel, shot noise is drawn from
/// the Gaussian approximation.
pub const POISSON_GAUSSIAN_CUTOFF: f64 = 1e4;
pub const ATOM_RANGE: (u32, u32) = (10_000, 100_000);
pub const SIZE_BINS: usize = 20;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DetectorGeometry {
    /// Square detector side.
    pub pixels: usize,
    /// Beamstop `(rows, cols)`, centered.
    pub beamstop: (usize, usize),
    /// Width of the vertical, full-height panel gap, centered.
    pub gap_width: usize,
    /// Side of the centered crop handed to the models.
    pub crop: usize,
}

impl Default for DetectorGeometry {
    fn default() -> Self {
        Self { pixels: 172, beamstop: (6, 8), gap_width: 4, crop: 96 }
    }
}

impl DetectorGeometry {
    pub fn validate(&self) -> Result<()> {
        let n = self.pixels;
        if n < 2 || n % 2 != 0 {
            return Err(Error::config("pixels", "must be even and at least 2"));
        }
        if self.crop == 0 || self.crop > n || (n - self.crop) % 2 != 0 {
            return Err(Error::config("crop", format!("{} does not center inside {n}", self.crop)));
        }
        if self.beamstop.0 > n || self.beamstop.1 > n || self.gap_width > n {
            return Err(Error::config("beamstop", "mask larger than the detector"));
        }
        Ok(())
    }

    /// Detector pixel of zero momentum transfer.
    pub fn center(&self) -> usize {
        self.pixels / 2
    }

    /// Momentum transfer at the middle of the detector edge, in inverse grid units.
    pub fn q_max(&self) -> f64 {
        std::f64::consts::PI
    }

    fn crop_offset(&self) -> usize {
        (self.pixels - self.crop) / 2
    }

    /// `true` for pixels outside the beamstop and the gap, full detector.
    pub fn valid_mask(&self) -> Vec<bool> {
        let n = self.pixels;
        let c = self.center();
        let (br, bc) = self.beamstop;
        let rows = c - br / 2..c - br / 2 + br;
        let cols = c - bc / 2..c - bc / 2 + bc;
        let gap = c - self.gap_width / 2..c - self.gap_width / 2 + self.gap_width;
        (0..n * n)
            .map(|i| {
                let (r, col) = (i / n, i % n);
                !(rows.contains(&r) && cols.contains(&col)) && !gap.contains(&col)
            })
            .collect()
    }

    /// Centered `crop×crop` window of a full-detector image.
    pub fn crop_image<T: Copy>(&self, full: &[T]) -> Vec<T> {
        let (n, o, c) = (self.pixels, self.crop_offset(), self.crop);
        (0..c).flat_map(|r| full[(r + o) * n + o..(r + o) * n + o + c].iter().copied()).collect()
    }
}

/// Zeroes masked pixels. Idempotent.
pub fn apply_mask(intensity: &mut [f32], mask: &[bool]) {
    for (v, &ok) in intensity.iter_mut().zip(mask) {
        if !ok {
            *v = 0.0;
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Particle {
    pub particle_id: u64,
    /// Centered at the centroid.
    pub atoms: Vec<[f64; 3]>,
}

impl Particle {
    pub fn n_atoms(&self) -> usize {
        self.atoms.len()
    }
}

pub fn particle_radius(n_atoms: usize) -> f64 {
    RADIUS_AT_1E4_ATOMS * (n_atoms as f64 / 1e4).cbrt()
}

/// A compact blob: a uniform-density core plus a few uniform lobes whose
/// centers are Gaussian-distributed around it. Sharp edges keep speckle
/// contrast out to the detector edge.
pub fn generate_particle(n_atoms: usize, particle_id: u64, rng: &mut impl Rng) -> Result<Particle> {
    if n_atoms == 0 {
        return Err(Error::config("n_atoms", "must be at least 1"));
    }
    let r = particle_radius(n_atoms);
    let n_lobes = rng.random_range(2..=4);
    let mut bodies = vec![([0.0; 3], r * rng.random_range(0.7..0.9), 1.0)];
    for _ in 0..n_lobes {
        let c = [0, 1, 2].map(|_| rng.sample::<f64, _>(StandardNormal) * 0.45 * r);
        bodies.push((c, r * rng.random_range(0.3..0.6), rng.random_range(0.2..0.6)));
    }
    let total_w: f64 = bodies.iter().map(|b| b.2 * b.1.powi(3)).sum();
    let mut atoms = Vec::with_capacity(n_atoms);
    for _ in 0..n_atoms {
        let mut pick = rng.random::<f64>() * total_w;
        let mut body = &bodies[0];
        for b in &bodies {
            body = b;
            pick -= b.2 * b.1.powi(3);
            if pick <= 0.0 {
                break;
            }
        }
        // uniform point in a ball by rejection
        let p = loop {
            let p = [0, 1, 2].map(|_| rng.random_range(-1.0..1.0));
            if p.iter().map(|v: &f64| v * v).sum::<f64>() <= 1.0 {
                break p;
            }
        };
        atoms.push([0, 1, 2].map(|k| body.0[k] + body.1 * p[k]));
    }
    let centroid = [0, 1, 2].map(|k| atoms.iter().map(|a| a[k]).sum::<f64>() / n_atoms as f64);
    for a in &mut atoms {
        for k in 0..3 {
            a[k] -= centroid[k];
        }
    }
    Ok(Particle { particle_id, atoms })
}

/// Orientation and in-plane position of one particle in the beam.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Placement {
    pub rotation: [[f64; 3]; 3],
    pub shift: [f64; 2],
}

impl Placement {
    pub fn centered(rotation: [[f64; 3]; 3]) -> Self {
        Self { rotation, shift: [0.0; 2] }
    }
}

/// Uniformly distributed rotation matrix (normalized Gaussian quaternion).
pub fn random_rotation(rng: &mut impl Rng) -> [[f64; 3]; 3] {
    let q = loop {
        let q = [0, 1, 2, 3].map(|_| rng.sample::<f64, _>(StandardNormal));
        let n = q.iter().map(|v| v * v).sum::<f64>().sqrt();
        if n > 1e-9 {
            break q.map(|v| v / n);
        }
    };
    let [w, x, y, z] = q;
    [
        [1.0 - 2.0 * (y * y + z * z), 2.0 * (x * y - w * z), 2.0 * (x * z + w * y)],
        [2.0 * (x * y + w * z), 1.0 - 2.0 * (x * x + z * z), 2.0 * (y * z - w * x)],
        [2.0 * (x * z - w * y), 2.0 * (y * z + w * x), 1.0 - 2.0 * (x * x + y * y)],
    ]
}

/// Log-normal with mean 1: `exp(σ·z − σ²/2)`.
pub fn sample_fluence_factor(sigma_log: f64, rng: &mut impl Rng) -> f64 {
    let z: f64 = rng.sample(StandardNormal);
    (sigma_log * z - 0.5 * sigma_log * sigma_log).exp()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseConfig {
    /// Expected photons on the full detector for a single hit of the
    /// reference particle at fluence factor 1.
    pub photons_per_hit: f64,
    /// Additive Gaussian noise std, relative to the frame's mean expected
    /// photon count.
    pub gaussian_std: f64,
    /// Uniform expected background photons per pixel at fluence factor 1.
    pub background: f64,
    /// Shape of the log-normal fluence jitter.
    pub sigma_log: f64,
    pub shot_noise: bool,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        Self { photons_per_hit: 1e5, gaussian_std: 0.15, background: 0.02, sigma_log: 0.5, shot_noise: true }
    }
}

/// A detected frame before it is wrapped in dataset provenance.
#[derive(Clone, Debug, PartialEq)]
pub struct Frame {
    pub intensity: Vec<f32>,
    pub mask: Vec<bool>,
}

pub struct Simulator {
    geometry: DetectorGeometry,
    noise: NoiseConfig,
    fft: Arc<dyn Fft<f64>>,
    /// Photons per unit |F|² at fluence 1.
    kappa: f64,
    mask_full: Vec<bool>,
    mask_crop: Vec<bool>,
}

impl std::fmt::Debug for Simulator {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Simulator").field("geometry", &self.geometry).field("noise", &self.noise).finish()
    }
}

/// Atoms of the particle used to calibrate photon counts.
const REFERENCE_ATOMS: usize = 31_623;
const REFERENCE_SEED: u64 = 0x5eed_0f_ca11b;

impl Simulator {
    pub fn new(geometry: DetectorGeometry, noise: NoiseConfig) -> Result<Self> {
        geometry.validate()?;
        for (name, v) in [
            ("photons_per_hit", noise.photons_per_hit),
            ("gaussian_std", noise.gaussian_std),
            ("background", noise.background),
            ("sigma_log", noise.sigma_log),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::config(name, "must be finite and non-negative"));
            }
        }
        let fft = FftPlanner::new().plan_fft_forward(geometry.pixels);
        let mask_full = geometry.valid_mask();
        let mask_crop = geometry.crop_image(&mask_full);
        let mut sim = Self { geometry, noise, fft, kappa: 1.0, mask_full, mask_crop };
        // Parseval: Σ|F|² over the grid = N²·Σρ², so calibration needs no FFT
        let reference = generate_particle(REFERENCE_ATOMS, 0, &mut ChaCha8Rng::seed_from_u64(REFERENCE_SEED))?;
        let rho = sim.deposit(&reference, &Placement::centered([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]));
        let n2 = (geometry.pixels * geometry.pixels) as f64;
        let power = n2 * rho.iter().map(|c| c.re * c.re).sum::<f64>();
        sim.kappa = noise.photons_per_hit / power;
        Ok(sim)
    }

    pub fn geometry(&self) -> &DetectorGeometry {
        &self.geometry
    }

    pub fn noise(&self) -> &NoiseConfig {
        &self.noise
    }

    /// Valid-pixel mask of the cropped frame.
    pub fn crop_mask(&self) -> &[bool] {
        &self.mask_crop
    }

    pub fn full_mask(&self) -> &[bool] {
        &self.mask_full
    }

    /// Cloud-in-cell projection of the rotated atoms, centered on the grid.
    fn deposit(&self, particle: &Particle, placement: &Placement) -> Vec<Complex64> {
        let n = self.geometry.pixels;
        let c = self.geometry.center() as f64;
        let r = &placement.rotation;
        let mut grid = vec![Complex64::new(0.0, 0.0); n * n];
        for a in &particle.atoms {
            let x = r[0][0] * a[0] + r[0][1] * a[1] + r[0][2] * a[2] + c;
            let y = r[1][0] * a[0] + r[1][1] * a[1] + r[1][2] * a[2] + c;
            let (ix, iy) = (x.floor(), y.floor());
            let (fx, fy) = (x - ix, y - iy);
            let (ix, iy) = (ix as isize, iy as isize);
            for (dy, wy) in [(0, 1.0 - fy), (1, fy)] {
                for (dx, wx) in [(0, 1.0 - fx), (1, fx)] {
                    let (gx, gy) = (ix + dx, iy + dy);
                    if gx >= 0 && gy >= 0 && (gx as usize) < n && (gy as usize) < n {
                        grid[gy as usize * n + gx as usize].re += wx * wy;
                    }
                }
            }
        }
        grid
    }

    fn fft2(&self, grid: &mut [Complex64]) {
        let n = self.geometry.pixels;
        self.fft.process(grid);
        transpose(grid, n);
        self.fft.process(grid);
        transpose(grid, n);
    }

    /// Far-field amplitude of all particles on the detector grid, with the
    /// zero-frequency term at [`DetectorGeometry::center`].
    pub fn field(&self, hits: &[(&Particle, Placement)]) -> Vec<Complex64> {
        let n = self.geometry.pixels;
        let half = self.geometry.center();
        let mut total = vec![Complex64::new(0.0, 0.0); n * n];
        let two_pi_n = std::f64::consts::TAU / n as f64;
        for (particle, placement) in hits {
            let mut f = self.deposit(particle, placement);
            self.fft2(&mut f);
            let [sx, sy] = placement.shift;
            for j in 0..n {
                let ky = j as f64 - half as f64;
                let mj = (j + half) % n;
                for i in 0..n {
                    let kx = i as f64 - half as f64;
                    let mi = (i + half) % n;
                    let phase = Complex64::from_polar(1.0, -two_pi_n * (kx * sx + ky * sy));
                    total[j * n + i] += f[mj * n + mi] * phase;
                }
            }
        }
        total
    }

    /// Expected photons per full-detector pixel: no noise, no masks.
    pub fn expected_photons(&self, hits: &[(&Particle, Placement)], fluence_factor: f64) -> Vec<f64> {
        let base: Vec<f64> =
            self.field(hits).iter().map(|f| self.kappa * f.norm_sqr() + self.noise.background).collect();
        base.into_iter().map(|b| fluence_factor * b).collect()
    }

    /// Shot noise, Gaussian noise, clamping, masking and cropping.
    pub fn detect(&self, expected: &[f64], rng: &mut impl Rng) -> Frame {
        let mean = expected.iter().sum::<f64>() / expected.len().max(1) as f64;
        let sigma = self.noise.gaussian_std * mean;
        let gauss = Normal::new(0.0, sigma.max(0.0)).expect("finite std");
        let cropped = self.geometry.crop_image(expected);
        let mut intensity: Vec<f32> = cropped
            .iter()
            .map(|&lam| {
                let counts = if !self.noise.shot_noise || lam <= 0.0 {
                    lam.max(0.0)
                } else if lam > POISSON_GAUSSIAN_CUTOFF {
                    lam + lam.sqrt() * rng.sample::<f64, _>(StandardNormal)
                } else {
                    Poisson::new(lam).expect("positive rate").sample(rng)
                };
                let noisy = if sigma > 0.0 { counts + gauss.sample(rng) } else { counts };
                noisy.max(0.0) as f32
            })
            .collect();
        apply_mask(&mut intensity, &self.mask_crop);
        Frame { intensity, mask: self.mask_crop.clone() }
    }

    /// Full pipeline for particle hits (an empty list gives a background-only frame).
    pub fn diffract(&self, hits: &[(&Particle, Placement)], fluence_factor: f64, rng: &mut impl Rng) -> Frame {
        let expected = self.expected_photons(hits, fluence_factor);
        self.detect(&expected, rng)
    }

    /// Parasitic-scattering surrogate: smooth streaks through the beam
    /// center plus broad blobs, with no particle speckle.
    pub fn non_sample_expected(&self, fluence_factor: f64, rng: &mut impl Rng) -> Vec<f64> {
        let n = self.geometry.pixels;
        let c = self.geometry.center() as f64;
        let mut img = vec![0.0; n * n];
        for _ in 0..rng.random_range(1..=3) {
            let theta: f64 = rng.random_range(0.0..std::f64::consts::PI);
            let width: f64 = rng.random_range(1.0..3.0);
            let falloff: f64 = rng.random_range(3.0..12.0);
            let amp: f64 = rng.random_range(0.3..1.0);
            let (s, co) = theta.sin_cos();
            for (i, v) in img.iter_mut().enumerate() {
                let (x, y) = ((i % n) as f64 - c, (i / n) as f64 - c);
                let perp = -s * x + co * y;
                let along = (co * x + s * y).abs();
                *v += amp * (-perp * perp / (2.0 * width * width)).exp() / (1.0 + along / falloff).powi(2);
            }
        }
        for _ in 0..rng.random_range(1..=2) {
            let (bx, by) = (rng.random_range(-20.0..20.0), rng.random_range(-20.0..20.0));
            let w: f64 = rng.random_range(5.0..15.0);
            let amp: f64 = rng.random_range(0.05..0.4);
            for (i, v) in img.iter_mut().enumerate() {
                let (x, y) = ((i % n) as f64 - c - bx, (i / n) as f64 - c - by);
                *v += amp * (-(x * x + y * y) / (2.0 * w * w)).exp();
            }
        }
        let total: f64 = img.iter().sum();
        let photons = self.noise.photons_per_hit * rng.random_range(0.3..3.0);
        img.into_iter().map(|v| fluence_factor * (photons * v / total + self.noise.background)).collect()
    }
}

fn transpose(m: &mut [Complex64], n: usize) {
    for r in 0..n {
        for c in r + 1..n {
            m.swap(r * n + c, c * n + r);
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Category {
    Single,
    Double,
    Triple,
    Quadruple,
    NoHit,
    NonSampleHit,
}

impl Category {
    pub const HITS: [Category; 4] = [Category::Single, Category::Double, Category::Triple, Category::Quadruple];

    pub fn multiplicity(self) -> u8 {
        match self {
            Category::Single => 1,
            Category::Double => 2,
            Category::Triple => 3,
            Category::Quadruple => 4,
            Category::NoHit | Category::NonSampleHit => 0,
        }
    }

    pub fn label(self) -> HitLabel {
        match self {
            Category::NonSampleHit => HitLabel::NonSampleHit,
            c => HitLabel::from_multiplicity(c.multiplicity()),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Category::Single => "single",
            Category::Double => "double",
            Category::Triple => "triple",
            Category::Quadruple => "quadruple",
            Category::NoHit => "no_hit",
            Category::NonSampleHit => "non_sample_hit",
        }
    }
}

impl std::str::FromStr for Category {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [
            Category::Single,
            Category::Double,
            Category::Triple,
            Category::Quadruple,
            Category::NoHit,
            Category::NonSampleHit,
        ]
        .into_iter()
        .find(|c| c.as_str() == s)
        .ok_or_else(|| Error::Invalid(format!("unknown category {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimulationConfig {
    /// Samples (particle species) to draw frames for.
    pub sample_ids: Vec<u32>,
    pub patterns_per_category: usize,
    pub categories: Vec<Category>,
    pub seed: u64,
    /// Multiplies every frame's jittered fluence.
    pub fluence_scale: f64,
    /// Pins the atom count per sample (parallel to `sample_ids`); otherwise a
    /// size bin is drawn uniformly, then a count uniformly within it.
    pub atom_counts: Option<Vec<u32>>,
    /// Radius (grid units) of the disk in which multi-hit particles are placed.
    pub placement_radius: f64,
    pub geometry: DetectorGeometry,
    pub noise: NoiseConfig,
    pub parallel: bool,
}

impl Default for SimulationConfig {
    fn default() -> Self {
        Self {
            sample_ids: (0..10).collect(),
            patterns_per_category: 100,
            categories: Category::HITS.to_vec(),
            seed: 0,
            fluence_scale: 1.0,
            atom_counts: None,
            placement_radius: 30.0,
            geometry: DetectorGeometry::default(),
            noise: NoiseConfig::default(),
            parallel: true,
        }
    }
}

/// Evenly spaced bin edges over the atom-count range.
pub fn size_bin_edges() -> Vec<f64> {
    let (lo, hi) = (f64::from(ATOM_RANGE.0), f64::from(ATOM_RANGE.1));
    (0..=SIZE_BINS).map(|i| lo + (hi - lo) * i as f64 / SIZE_BINS as f64).collect()
}

pub fn size_bin(n_atoms: u32) -> usize {
    let edges = size_bin_edges();
    let x = f64::from(n_atoms);
    (1..=SIZE_BINS).find(|&i| x < edges[i]).unwrap_or(SIZE_BINS) - 1
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Independent stream `index` of the generator family tagged `tag`.
pub fn stream_rng(seed: u64, tag: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(splitmix(seed ^ splitmix(tag)));
    rng.set_stream(index);
    rng
}

const TAG_PARTICLE: u64 = 1;
const TAG_GEOMETRY: u64 = 2;
const TAG_NOISE: u64 = 3;

/// The particle of `sample_id` under `seed`, independent of which other
/// samples are in the dataset.
pub fn sample_particle(seed: u64, sample_id: u32, n_atoms: Option<u32>) -> Result<Particle> {
    let mut rng = stream_rng(seed, TAG_PARTICLE, u64::from(sample_id));
    let n = match n_atoms {
        Some(n) => n,
        None => {
            let edges = size_bin_edges();
            let bin = rng.random_range(0..SIZE_BINS);
            rng.random_range(edges[bin]..edges[bin + 1]) as u32
        }
    };
    generate_particle(n as usize, u64::from(sample_id), &mut rng)
}

/// One frame to simulate; `local` numbers frames within a sample.
#[derive(Clone, Copy, Debug)]
struct Job {
    sample_index: usize,
    sample_id: u32,
    category: Category,
    local: u32,
}

pub fn pattern_id(sample_id: u32, local: u32) -> u64 {
    (u64::from(sample_id) << 32) | u64::from(local)
}

/// Frames for every (sample, category, repeat). Each frame's draws come from
/// streams keyed by its pattern id, so the output does not depend on
/// thread scheduling, and `fluence_scale` changes only photon counts.
pub fn build_dataset(cfg: &SimulationConfig) -> Result<Dataset> {
    if let Some(c) = &cfg.atom_counts {
        if c.len() != cfg.sample_ids.len() {
            return Err(Error::config("atom_counts", "must list one count per sample"));
        }
    }
    if !(cfg.fluence_scale.is_finite() && cfg.fluence_scale >= 0.0) {
        return Err(Error::config("fluence_scale", "must be finite and non-negative"));
    }
    let sim = Simulator::new(cfg.geometry, cfg.noise)?;
    let needs_particle = cfg.categories.iter().any(|c| c.multiplicity() > 0);
    let particles: Vec<Option<Particle>> = cfg
        .sample_ids
        .iter()
        .enumerate()
        .map(|(i, &s)| {
            needs_particle
                .then(|| sample_particle(cfg.seed, s, cfg.atom_counts.as_ref().map(|c| c[i])))
                .transpose()
        })
        .collect::<Result<_>>()?;
    let mut jobs = Vec::new();
    for (sample_index, &sample_id) in cfg.sample_ids.iter().enumerate() {
        let mut local = 0;
        for &category in &cfg.categories {
            for _ in 0..cfg.patterns_per_category {
                jobs.push(Job { sample_index, sample_id, category, local });
                local += 1;
            }
        }
    }
    let run = |job: &Job| simulate_job(&sim, cfg, particles[job.sample_index].as_ref(), job);
    let patterns = if cfg.parallel { jobs.par_iter().map(run).collect() } else { jobs.iter().map(run).collect() };
    let mut ds = Dataset::new(cfg.geometry.crop);
    ds.patterns = patterns;
    ds.info.insert("seed".into(), cfg.seed.to_string());
    ds.info.insert("fluence_scale".into(), format!("{:?}", cfg.fluence_scale));
    ds.info.insert("detector_pixels".into(), cfg.geometry.pixels.to_string());
    ds.info.insert("photons_per_hit".into(), format!("{:?}", cfg.noise.photons_per_hit));
    ds.info.insert(
        "categories".into(),
        cfg.categories.iter().map(|c| c.as_str()).collect::<Vec<_>>().join(","),
    );
    Ok(ds)
}

fn simulate_job(sim: &Simulator, cfg: &SimulationConfig, particle: Option<&Particle>, job: &Job) -> SpecklePattern {
    let id = pattern_id(job.sample_id, job.local);
    let mut geo = stream_rng(cfg.seed, TAG_GEOMETRY, id);
    let mut noise = stream_rng(cfg.seed, TAG_NOISE, id);
    let jitter = sample_fluence_factor(cfg.noise.sigma_log, &mut geo);
    let fluence = jitter * cfg.fluence_scale;
    let m = job.category.multiplicity();
    let frame = match (job.category, particle) {
        (Category::NonSampleHit, _) => {
            let expected = sim.non_sample_expected(fluence, &mut geo);
            sim.detect(&expected, &mut noise)
        }
        (_, Some(p)) if m > 0 => {
            let placements: Vec<Placement> = (0..m)
                .map(|k| {
                    let rotation = random_rotation(&mut geo);
                    let shift = if k == 0 {
                        [0.0; 2]
                    } else {
                        let r = cfg.placement_radius * geo.random::<f64>().sqrt();
                        let t = geo.random_range(0.0..std::f64::consts::TAU);
                        [r * t.cos(), r * t.sin()]
                    };
                    Placement { rotation, shift }
                })
                .collect();
            let hits: Vec<(&Particle, Placement)> = placements.into_iter().map(|pl| (p, pl)).collect();
            sim.diffract(&hits, fluence, &mut noise)
        }
        _ => sim.diffract(&[], fluence, &mut noise),
    };
    SpecklePattern {
        id,
        sample_id: job.sample_id,
        label: job.category.label(),
        hit_multiplicity: m,
        n_atoms: particle.map_or(0, |p| p.n_atoms() as u32),
        fluence_factor: fluence,
        rng_seed: cfg.seed,
        lineage: None,
        intensity: frame.intensity,
        mask: frame.mask,
    }
}
