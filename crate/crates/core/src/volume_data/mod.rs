//! Time-resolved 3D scalar volumes, cubic patches cut from them, and the
//! synthetic phantom that stands in for real 3D ultrasound.

mod io;
mod phantom;

pub use io::{
    decode_patches, decode_sequence, encode_patches, encode_sequence, read_patches, read_sequence, read_volume,
    write_patches, write_sequence, write_volume,
};
pub use phantom::{generate_phantom, Anatomy, PhantomConfig, SpeckleMode};

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;

/// Dense scalar grid stored z-major, x fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    dims: [usize; 3],
    data: Vec<f32>,
}

impl Volume {
    pub fn zeros(dims: [usize; 3]) -> Self {
        Volume {
            dims,
            data: vec![0.0; dims.iter().product()],
        }
    }

    pub fn from_vec(dims: [usize; 3], data: Vec<f32>) -> Result<Self> {
        let n: usize = dims.iter().product();
        if dims.contains(&0) {
            return Err(Error::Config(format!("volume dims must be positive, got {dims:?}")));
        }
        if data.len() != n {
            return Err(Error::Contract(format!(
                "volume {dims:?} needs {n} voxels, got {}",
                data.len()
            )));
        }
        Ok(Volume { dims, data })
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    #[inline]
    pub fn index(&self, z: usize, y: usize, x: usize) -> usize {
        (z * self.dims[1] + y) * self.dims[2] + x
    }

    #[inline]
    pub fn get(&self, z: usize, y: usize, x: usize) -> f32 {
        self.data[self.index(z, y, x)]
    }
}

/// Frames of equal dimensions sampled at a fixed period.
#[derive(Debug, Clone, PartialEq)]
pub struct VolumeSequence {
    frames: Vec<Volume>,
    pub frame_period: f64,
}

impl VolumeSequence {
    pub fn new(frames: Vec<Volume>, frame_period: f64) -> Result<Self> {
        let first = frames
            .first()
            .ok_or_else(|| Error::Config("a sequence needs at least one frame".into()))?
            .dims;
        if let Some((t, f)) = frames.iter().enumerate().find(|(_, f)| f.dims != first) {
            return Err(Error::Contract(format!(
                "frame {t} has dims {:?}, expected {first:?}",
                f.dims
            )));
        }
        Ok(VolumeSequence { frames, frame_period })
    }

    pub fn frames(&self) -> &[Volume] {
        &self.frames
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn dims(&self) -> [usize; 3] {
        self.frames[0].dims
    }

    pub fn frame(&self, t: usize) -> Result<&Volume> {
        self.frames
            .get(t)
            .ok_or_else(|| Error::Bounds(format!("frame {t} out of range for {} frames", self.frames.len())))
    }

    /// Cuts a labeled patch out of frame `t`.
    pub fn extract(&self, t: usize, center: [i32; 3], side: usize, label: u32) -> Result<Patch> {
        let mut patch = extract_patch(self.frame(t)?, center, side)?;
        patch.frame_index = t;
        patch.label = label;
        Ok(patch)
    }
}

/// A cubic block of voxels with its provenance and ground-truth subset id.
#[derive(Debug, Clone, PartialEq)]
pub struct Patch {
    pub data: Vec<f32>,
    pub side: usize,
    pub frame_index: usize,
    pub center: [i32; 3],
    pub label: u32,
}

impl Patch {
    pub fn new(side: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != side * side * side {
            return Err(Error::Contract(format!(
                "patch of side {side} needs {} voxels, got {}",
                side * side * side,
                data.len()
            )));
        }
        Ok(Patch {
            data,
            side,
            frame_index: 0,
            center: [0; 3],
            label: 0,
        })
    }

    #[inline]
    pub fn index(&self, z: usize, y: usize, x: usize) -> usize {
        (z * self.side + y) * self.side + x
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().map(|&v| f64::from(v)).sum::<f64>() / self.data.len() as f64
    }
}

/// Lowest voxel index covered along one axis (half-open, `center - floor(side/2)`).
#[inline]
pub fn patch_low(center: i32, side: usize) -> i64 {
    i64::from(center) - (side / 2) as i64
}

fn check_cube(dims: [usize; 3], center: [i32; 3], side: usize) -> Result<[usize; 3]> {
    if side == 0 {
        return Err(Error::Config("patch side must be positive".into()));
    }
    let mut low = [0usize; 3];
    for axis in 0..3 {
        let lo = patch_low(center[axis], side);
        let hi = lo + side as i64;
        if lo < 0 || hi > dims[axis] as i64 {
            return Err(Error::Bounds(format!(
                "cube [{lo}, {hi}) on axis {axis} leaves volume extent {}",
                dims[axis]
            )));
        }
        low[axis] = lo as usize;
    }
    Ok(low)
}

/// Copies the cube `[center - side/2, center - side/2 + side)` out of `volume`.
pub fn extract_patch(volume: &Volume, center: [i32; 3], side: usize) -> Result<Patch> {
    let [z0, y0, x0] = check_cube(volume.dims, center, side)?;
    let mut data = Vec::with_capacity(side * side * side);
    for z in z0..z0 + side {
        for y in y0..y0 + side {
            let row = volume.index(z, y, x0);
            data.extend_from_slice(&volume.data[row..row + side]);
        }
    }
    Ok(Patch {
        data,
        side,
        frame_index: 0,
        center,
        label: 0,
    })
}

/// Writes `patch` back into `volume` at `patch.center`; inverse of [`extract_patch`].
pub fn embed_patch(volume: &mut Volume, patch: &Patch) -> Result<()> {
    let side = patch.side;
    let [z0, y0, x0] = check_cube(volume.dims, patch.center, side)?;
    for (i, z) in (z0..z0 + side).enumerate() {
        for (j, y) in (y0..y0 + side).enumerate() {
            let row = volume.index(z, y, x0);
            let src = (i * side + j) * side;
            volume.data[row..row + side].copy_from_slice(&patch.data[src..src + side]);
        }
    }
    Ok(())
}

/// Inclusive range of admissible centers along one axis so that the cube,
/// shifted by up to `margin` in either direction, stays inside `[0, dim)`.
pub fn admissible_range(dim: usize, side: usize, margin: usize) -> Option<(i32, i32)> {
    let half = (side / 2) as i64;
    let lo = half + margin as i64;
    let hi = dim as i64 - 1 - half - margin as i64;
    (lo <= hi).then_some((lo as i32, hi as i32))
}

/// Returns true when `center ± (side/2 + margin)` lies inside `dims`.
pub fn within_margin(dims: [usize; 3], center: [i32; 3], side: usize, margin: usize) -> bool {
    (0..3).all(|a| match admissible_range(dims[a], side, margin) {
        Some((lo, hi)) => (lo..=hi).contains(&center[a]),
        None => false,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchSampling {
    pub n: usize,
    pub side: usize,
    pub margin: usize,
}

/// Draws `n` reference patches (labels `0..n`) at uniform frames and
/// uniform admissible centers.
pub fn sample_reference_patches(
    seq: &VolumeSequence,
    n: usize,
    side: usize,
    margin: usize,
    seed: u64,
) -> Result<Vec<Patch>> {
    if n == 0 {
        return Err(Error::Config("need at least one reference patch".into()));
    }
    let dims = seq.dims();
    let mut ranges = [(0, 0); 3];
    for axis in 0..3 {
        ranges[axis] = admissible_range(dims[axis], side, margin).ok_or_else(|| {
            Error::Config(format!(
                "no admissible centers on axis {axis}: extent {} < side {side} + 2*margin {margin}",
                dims[axis]
            ))
        })?;
    }
    let mut rng = seed::rng(seed);
    (0..n)
        .map(|label| {
            let t = rng.gen_range(0..seq.len());
            let center = ranges.map(|(lo, hi)| rng.gen_range(lo..=hi));
            seq.extract(t, center, side, label as u32)
        })
        .collect()
}

/// Label carried by training-pool patches, which belong to no subset.
pub const UNLABELED: u32 = u32::MAX;

/// Draws `n` unlabeled patches at uniform frames and admissible centers,
/// rejecting candidates that share a frame with an excluded patch and lie
/// closer than `side` to its center on every axis.
pub fn sample_pool_patches(
    seq: &VolumeSequence,
    exclude: &[Patch],
    n: usize,
    side: usize,
    margin: usize,
    seed: u64,
) -> Result<Vec<Patch>> {
    let dims = seq.dims();
    let mut ranges = [(0, 0); 3];
    for axis in 0..3 {
        ranges[axis] = admissible_range(dims[axis], side, margin).ok_or_else(|| {
            Error::Config(format!(
                "no admissible pool centers on axis {axis} for side {side}, margin {margin}"
            ))
        })?;
    }
    let too_close = |t: usize, c: [i32; 3]| {
        exclude
            .iter()
            .any(|e| e.frame_index == t && (0..3).all(|a| (c[a] - e.center[a]).unsigned_abs() < side as u32))
    };
    let mut rng = seed::rng(seed);
    let max_attempts = 1000 * n.max(1);
    let mut pool = Vec::with_capacity(n);
    let mut attempts = 0;
    while pool.len() < n {
        attempts += 1;
        if attempts > max_attempts {
            return Err(Error::Config(format!(
                "only {} of {n} pool patches found in {max_attempts} draws; the exclusion zones cover the volume",
                pool.len()
            )));
        }
        let t = rng.gen_range(0..seq.len());
        let center = ranges.map(|(lo, hi)| rng.gen_range(lo..=hi));
        if !too_close(t, center) {
            pool.push(seq.extract(t, center, side, UNLABELED)?);
        }
    }
    Ok(pool)
}
