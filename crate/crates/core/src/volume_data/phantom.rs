//! Parametric ultrasound-like phantom: smooth background, soft-edged
//! ellipsoidal inclusions, one tube, global sinusoidal drift and
//! multiplicative speckle.

use std::f64::consts::PI;

use rand::Rng as _;
use rand_distr::{Distribution, Exp1, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{admissible_range, Volume, VolumeSequence};
use crate::error::{Error, Result};
use crate::seed::{self, Rng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpeckleMode {
    /// Fresh speckle realization in every frame.
    PerFrame,
    /// One realization reused by all frames.
    Shared,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhantomConfig {
    /// (nz, ny, nx)
    pub dims: [usize; 3],
    pub n_frames: usize,
    pub n_inclusions: usize,
    /// Semi-axis range of the inclusions in voxels.
    pub inclusion_radius: [f64; 2],
    /// 0 disables speckle, 1 applies the full normalized Rayleigh factor.
    pub speckle: f64,
    pub speckle_mode: SpeckleMode,
    /// Peak drift in voxels.
    pub motion_amplitude: f64,
    /// Drift period in frames.
    pub motion_period: f64,
    /// Peak amplitude of the smooth background modulation.
    pub background_amplitude: f64,
    pub tube: bool,
    pub frame_period: f64,
    /// Patch side and shift margin the volume must accommodate.
    pub patch_side: usize,
    pub patch_margin: usize,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        PhantomConfig {
            dims: [64, 64, 64],
            n_frames: 20,
            n_inclusions: 8,
            inclusion_radius: [4.0, 11.0],
            speckle: 1.0,
            speckle_mode: SpeckleMode::PerFrame,
            motion_amplitude: 4.0,
            motion_period: 20.0,
            background_amplitude: 0.12,
            tube: true,
            frame_period: 1.0,
            patch_side: 30,
            patch_margin: 10,
        }
    }
}

impl PhantomConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dims.contains(&0) || self.n_frames == 0 {
            return Err(Error::Config(format!(
                "phantom dims and frame count must be positive, got {:?} x {}",
                self.dims, self.n_frames
            )));
        }
        let [rmin, rmax] = self.inclusion_radius;
        if !(rmin > 0.0 && rmax >= rmin) {
            return Err(Error::Config(format!("bad inclusion radius range [{rmin}, {rmax}]")));
        }
        if !(0.0..=1.0).contains(&self.speckle) {
            return Err(Error::Config(format!(
                "speckle must be in [0, 1], got {}",
                self.speckle
            )));
        }
        if !(self.motion_amplitude >= 0.0 && self.motion_period > 0.0) {
            return Err(Error::Config("motion amplitude must be >= 0 and period > 0".into()));
        }
        for (axis, &d) in self.dims.iter().enumerate() {
            if admissible_range(d, self.patch_side, self.patch_margin).is_none() {
                return Err(Error::Config(format!(
                    "axis {axis} extent {d} cannot hold a {}-voxel patch with margin {}",
                    self.patch_side, self.patch_margin
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct Ellipsoid {
    center: [f64; 3],
    /// Rows are the principal axes.
    axes: [[f64; 3]; 3],
    radii: [f64; 3],
    echo: f64,
}

#[derive(Debug, Clone)]
struct Tube {
    point: [f64; 3],
    dir: [f64; 3],
    radius: f64,
    echo: f64,
}

#[derive(Debug, Clone)]
struct Wave {
    k: [f64; 3],
    phase: f64,
    amp: f64,
}

/// Noise-free base anatomy; frames are this field shifted by the drift.
#[derive(Debug, Clone)]
pub struct Anatomy {
    level: f64,
    waves: Vec<Wave>,
    inclusions: Vec<Ellipsoid>,
    tube: Option<Tube>,
    drift_dir: [f64; 3],
    amplitude: f64,
    period: f64,
}

const EDGE_WIDTH: f64 = 0.8;

fn unit_gaussian(rng: &mut Rng) -> [f64; 3] {
    loop {
        let v: [f64; 3] = std::array::from_fn(|_| StandardNormal.sample(rng));
        let n = norm(v);
        if n > 1e-6 {
            return v.map(|c| c / n);
        }
    }
}

fn norm(v: [f64; 3]) -> f64 {
    dot(v, v).sqrt()
}

fn dot(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn random_rotation(rng: &mut Rng) -> [[f64; 3]; 3] {
    let a = unit_gaussian(rng);
    let mut b = unit_gaussian(rng);
    let d = dot(a, b);
    b = [b[0] - d * a[0], b[1] - d * a[1], b[2] - d * a[2]];
    let nb = norm(b);
    if nb < 1e-6 {
        return [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
    }
    b = b.map(|c| c / nb);
    let c = [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ];
    [a, b, c]
}

fn smoothstep_inside(signed: f64) -> f64 {
    // signed > 0 inside; logistic edge about one voxel wide
    1.0 / (1.0 + (-signed / EDGE_WIDTH * 4.0).exp())
}

impl Anatomy {
    pub fn new(cfg: &PhantomConfig, seed: u64) -> Self {
        let mut rng = seed::rng(seed);
        let dims = cfg.dims.map(|d| d as f64);
        let waves = (0..3)
            .map(|_| {
                let dir = unit_gaussian(&mut rng);
                let wavelength = rng.gen_range(24.0..48.0);
                Wave {
                    k: dir.map(|c| 2.0 * PI * c / wavelength),
                    phase: rng.gen_range(0.0..2.0 * PI),
                    amp: cfg.background_amplitude / 3.0,
                }
            })
            .collect();

        // Spread echogenicities so every inclusion contrasts with the others.
        let n = cfg.n_inclusions;
        let mut order: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            order.swap(i, rng.gen_range(0..=i));
        }
        let [rmin, rmax] = cfg.inclusion_radius;
        let inclusions = order
            .iter()
            .map(|&rank| {
                let radii = std::array::from_fn(|_| rng.gen_range(rmin..=rmax));
                let center = std::array::from_fn(|a| {
                    let (lo, hi) = (rmax.min(dims[a] / 2.0), (dims[a] - rmax).max(dims[a] / 2.0));
                    if hi > lo {
                        rng.gen_range(lo..hi)
                    } else {
                        lo
                    }
                });
                let echo = 0.08 + 0.84 * (rank as f64 + rng.gen_range(0.25..0.75)) / n as f64;
                Ellipsoid {
                    center,
                    axes: random_rotation(&mut rng),
                    radii,
                    echo,
                }
            })
            .collect();

        let tube = cfg.tube.then(|| Tube {
            point: std::array::from_fn(|a| rng.gen_range(0.3 * dims[a]..0.7 * dims[a])),
            dir: unit_gaussian(&mut rng),
            radius: rng.gen_range(2.5..4.0),
            echo: 0.04,
        });

        let drift_dir = unit_gaussian(&mut rng);
        Anatomy {
            level: 0.45,
            waves,
            inclusions,
            tube,
            drift_dir,
            amplitude: cfg.motion_amplitude,
            period: cfg.motion_period,
        }
    }

    pub fn drift_direction(&self) -> [f64; 3] {
        self.drift_dir
    }

    /// Global displacement of frame `t` in voxels, (z, y, x).
    pub fn drift(&self, t: usize) -> [f64; 3] {
        let s = self.amplitude * (2.0 * PI * t as f64 / self.period).sin();
        self.drift_dir.map(|c| c * s)
    }

    /// Noise-free intensity at continuous position `p` of the undisplaced anatomy.
    pub fn intensity(&self, p: [f64; 3]) -> f64 {
        let mut v = self.level
            + self
                .waves
                .iter()
                .map(|w| w.amp * (dot(w.k, p) + w.phase).sin())
                .sum::<f64>();
        for e in &self.inclusions {
            let q = [p[0] - e.center[0], p[1] - e.center[1], p[2] - e.center[2]];
            let r = (0..3)
                .map(|i| {
                    let c = dot(e.axes[i], q) / e.radii[i];
                    c * c
                })
                .sum::<f64>()
                .sqrt();
            let rmin = e.radii.iter().cloned().fold(f64::INFINITY, f64::min);
            let m = smoothstep_inside((1.0 - r) * rmin);
            v = v * (1.0 - m) + e.echo * m;
        }
        if let Some(t) = &self.tube {
            let q = [p[0] - t.point[0], p[1] - t.point[1], p[2] - t.point[2]];
            let along = dot(q, t.dir);
            let perp = [
                q[0] - along * t.dir[0],
                q[1] - along * t.dir[1],
                q[2] - along * t.dir[2],
            ];
            let m = smoothstep_inside(t.radius - norm(perp));
            v = v * (1.0 - m) + t.echo * m;
        }
        v
    }

    /// Noise-free frame `t`, clamped to [0, 1].
    pub fn render(&self, dims: [usize; 3], t: usize) -> Volume {
        let d = self.drift(t);
        let [nz, ny, nx] = dims;
        let mut data = vec![0f32; nz * ny * nx];
        data.par_chunks_mut(ny * nx).enumerate().for_each(|(z, plane)| {
            for y in 0..ny {
                for x in 0..nx {
                    let p = [z as f64 - d[0], y as f64 - d[1], x as f64 - d[2]];
                    plane[y * nx + x] = self.intensity(p).clamp(0.0, 1.0) as f32;
                }
            }
        });
        Volume { dims, data }
    }
}

/// Mean of `sqrt(E)` for `E ~ Exp(1)`, i.e. Gamma(3/2).
const RAYLEIGH_MEAN: f64 = 0.886_226_925_452_758;

fn apply_speckle(volume: &mut Volume, strength: f64, seed: u64) {
    if strength == 0.0 {
        return;
    }
    let plane = volume.dims[1] * volume.dims[2];
    volume.data.par_chunks_mut(plane).enumerate().for_each(|(z, chunk)| {
        let mut rng = seed::rng(seed::derive(seed, z as u64));
        for v in chunk.iter_mut() {
            let e: f64 = Exp1.sample(&mut rng);
            let s = 1.0 + strength * (e.sqrt() / RAYLEIGH_MEAN - 1.0);
            *v = (f64::from(*v) * s).clamp(0.0, 1.0) as f32;
        }
    });
}

/// Renders the full phantom sequence. Pure function of `(cfg, seed)`.
pub fn generate_phantom(cfg: &PhantomConfig, seed: u64) -> Result<VolumeSequence> {
    cfg.validate()?;
    let anatomy = Anatomy::new(cfg, seed::derive_tag(seed, "anatomy"));
    let speckle_seed = seed::derive_tag(seed, "speckle");
    let frames = (0..cfg.n_frames)
        .map(|t| {
            let mut v = anatomy.render(cfg.dims, t);
            let s = match cfg.speckle_mode {
                SpeckleMode::PerFrame => seed::derive(speckle_seed, t as u64),
                SpeckleMode::Shared => speckle_seed,
            };
            apply_speckle(&mut v, cfg.speckle, s);
            v
        })
        .collect();
    VolumeSequence::new(frames, cfg.frame_period)
}
