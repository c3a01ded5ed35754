//! Ground-truth-labeled augmentation of reference patches: smooth elastic
//! deformations (target shape changes, location correct) and in-volume
//! translations (target location wrong).

use std::path::Path;

use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;
use crate::volume_data::{within_margin, write_patches, Patch, VolumeSequence};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DeformConfig {
    /// Control points per axis.
    pub grid_size: usize,
    /// Std of each control-point displacement component, voxels.
    pub sigma: f64,
    /// 1 (trilinear) or 3 (interpolating cubic B-spline).
    pub spline_order: u8,
}

impl Default for DeformConfig {
    fn default() -> Self {
        DeformConfig {
            grid_size: 5,
            sigma: 1.0,
            spline_order: 3,
        }
    }
}

impl DeformConfig {
    pub fn validate(&self) -> Result<()> {
        if self.grid_size < 2 {
            return Err(Error::Config(format!("grid_size must be >= 2, got {}", self.grid_size)));
        }
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return Err(Error::Config(format!("sigma must be >= 0, got {}", self.sigma)));
        }
        if !matches!(self.spline_order, 1 | 3) {
            return Err(Error::Config(format!(
                "spline order must be 1 or 3, got {}",
                self.spline_order
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TranslateConfig {
    pub max_shift: usize,
}

impl Default for TranslateConfig {
    fn default() -> Self {
        TranslateConfig { max_shift: 10 }
    }
}

/// Control-point displacements, component-major then z, y, x.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlGrid {
    size: usize,
    values: Vec<f64>,
}

impl ControlGrid {
    pub fn from_values(size: usize, values: Vec<f64>) -> Result<Self> {
        if size < 2 || values.len() != 3 * size * size * size {
            return Err(Error::Contract(format!(
                "control grid of size {size} needs {} values, got {}",
                3 * size.pow(3),
                values.len()
            )));
        }
        Ok(ControlGrid { size, values })
    }

    /// Grid with every displacement equal to `d`.
    pub fn constant(size: usize, d: [f64; 3]) -> Result<Self> {
        let n = size * size * size;
        Self::from_values(size, d.iter().flat_map(|&c| std::iter::repeat_n(c, n)).collect())
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn component(&self, c: usize) -> &[f64] {
        let n = self.size.pow(3);
        &self.values[c * n..(c + 1) * n]
    }

    /// Field value at continuous grid coordinates `u` (each in `[0, size-1]`).
    pub fn interpolate(&self, u: [f64; 3], order: u8) -> Result<[f64; 3]> {
        let coef = Coefficients::new(self, order)?;
        let taps = u.map(|ui| coef.taps(ui));
        Ok(std::array::from_fn(|c| coef.eval(c, &taps)))
    }
}

/// Draws an isotropic Normal(0, sigma^2) displacement for each control point.
pub fn control_grid_sample(grid_size: usize, sigma: f64, seed: u64) -> Result<ControlGrid> {
    DeformConfig {
        grid_size,
        sigma,
        spline_order: 1,
    }
    .validate()?;
    let n = 3 * grid_size.pow(3);
    if sigma == 0.0 {
        return ControlGrid::from_values(grid_size, vec![0.0; n]);
    }
    let normal = Normal::new(0.0, sigma).map_err(|e| Error::Config(e.to_string()))?;
    let mut rng = seed::rng(seed);
    ControlGrid::from_values(grid_size, (0..n).map(|_| normal.sample(&mut rng)).collect())
}

/// Cubic B-spline kernel.
fn bspline3(x: f64) -> f64 {
    let a = x.abs();
    if a < 1.0 {
        2.0 / 3.0 - a * a + 0.5 * a * a * a
    } else if a < 2.0 {
        let b = 2.0 - a;
        b * b * b / 6.0
    } else {
        0.0
    }
}

/// Whole-sample mirror of an index into `[0, n)`.
fn mirror(mut i: i64, n: usize) -> usize {
    let n = n as i64;
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    i = i.rem_euclid(period);
    if i >= n {
        i = period - i;
    }
    i as usize
}

/// Solves the mirrored `(1, 4, 1) / 6` system so the cubic spline passes
/// through `f` at the integer nodes.
fn prefilter_line(f: &mut [f64]) {
    let n = f.len();
    if n < 2 {
        return;
    }
    // Dense elimination; n is the control-grid size (a handful of nodes).
    let mut a = vec![vec![0.0f64; n]; n];
    for i in 0..n {
        for (k, w) in [(-1i64, 1.0 / 6.0), (0, 4.0 / 6.0), (1, 1.0 / 6.0)] {
            a[i][mirror(i as i64 + k, n)] += w;
        }
    }
    let mut b = f.to_vec();
    for col in 0..n {
        let piv = (col..n)
            .max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))
            .unwrap();
        a.swap(col, piv);
        b.swap(col, piv);
        for row in col + 1..n {
            let m = a[row][col] / a[col][col];
            if m != 0.0 {
                for k in col..n {
                    a[row][k] -= m * a[col][k];
                }
                b[row] -= m * b[col];
            }
        }
    }
    for row in (0..n).rev() {
        let s: f64 = (row + 1..n).map(|k| a[row][k] * f[k]).sum();
        f[row] = (b[row] - s) / a[row][row];
    }
}

struct Coefficients {
    size: usize,
    order: u8,
    values: Vec<f64>,
}

impl Coefficients {
    fn new(grid: &ControlGrid, order: u8) -> Result<Self> {
        let g = grid.size;
        let mut values = grid.values.clone();
        match order {
            1 => {}
            3 => {
                let n = g * g * g;
                let mut line = vec![0.0; g];
                for comp in values.chunks_mut(n) {
                    for stride in [g * g, g, 1] {
                        for start in 0..n {
                            // visit each line once, from its first node
                            if (start / stride) % g != 0 {
                                continue;
                            }
                            for (j, v) in line.iter_mut().enumerate() {
                                *v = comp[start + j * stride];
                            }
                            prefilter_line(&mut line);
                            for (j, v) in line.iter().enumerate() {
                                comp[start + j * stride] = *v;
                            }
                        }
                    }
                }
            }
            other => {
                return Err(Error::Config(format!("unsupported spline order {other}")));
            }
        }
        Ok(Coefficients { size: g, order, values })
    }

    fn taps(&self, u: f64) -> Vec<(usize, f64)> {
        let g = self.size;
        let u = u.clamp(0.0, (g - 1) as f64);
        if self.order == 1 {
            let i = (u.floor() as usize).min(g - 2);
            let t = u - i as f64;
            vec![(i, 1.0 - t), (i + 1, t)]
        } else {
            let i = u.floor() as i64;
            let t = u - i as f64;
            (-1..=2).map(|k| (mirror(i + k, g), bspline3(t - k as f64))).collect()
        }
    }

    fn eval(&self, comp: usize, taps: &[Vec<(usize, f64)>; 3]) -> f64 {
        let g = self.size;
        let base = comp * g * g * g;
        let mut acc = 0.0;
        for &(iz, wz) in &taps[0] {
            for &(iy, wy) in &taps[1] {
                let row = base + (iz * g + iy) * g;
                let wzy = wz * wy;
                for &(ix, wx) in &taps[2] {
                    acc += wzy * wx * self.values[row + ix];
                }
            }
        }
        acc
    }
}

/// Dense displacement over a cubic patch, component-major then z, y, x.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseField {
    pub side: usize,
    pub values: Vec<f64>,
}

impl DenseField {
    #[inline]
    pub fn at(&self, z: usize, y: usize, x: usize) -> [f64; 3] {
        let n = self.side.pow(3);
        let i = (z * self.side + y) * self.side + x;
        [self.values[i], self.values[n + i], self.values[2 * n + i]]
    }

    pub fn constant(side: usize, d: [f64; 3]) -> Self {
        let n = side.pow(3);
        DenseField {
            side,
            values: d.iter().flat_map(|&c| std::iter::repeat_n(c, n)).collect(),
        }
    }
}

/// Upsamples `grid` to every voxel of a `target_side`^3 patch. Control
/// points sit at `j * (side - 1) / (size - 1)`, i.e. the grid spans the
/// patch corner to corner.
pub fn dense_displacement(grid: &ControlGrid, target_side: usize, spline_order: u8) -> Result<DenseField> {
    if target_side == 0 {
        return Err(Error::Config("target side must be positive".into()));
    }
    let coef = Coefficients::new(grid, spline_order)?;
    let scale = if target_side > 1 {
        (grid.size - 1) as f64 / (target_side - 1) as f64
    } else {
        0.0
    };
    let taps: Vec<Vec<(usize, f64)>> = (0..target_side).map(|i| coef.taps(i as f64 * scale)).collect();
    let n = target_side.pow(3);
    let mut values = vec![0.0; 3 * n];
    for comp in 0..3 {
        let out = &mut values[comp * n..(comp + 1) * n];
        for z in 0..target_side {
            for y in 0..target_side {
                for x in 0..target_side {
                    let t = [taps[z].clone(), taps[y].clone(), taps[x].clone()];
                    out[(z * target_side + y) * target_side + x] = coef.eval(comp, &t);
                }
            }
        }
    }
    Ok(DenseField {
        side: target_side,
        values,
    })
}

/// Trilinear sample with coordinates clamped to the patch.
fn sample_clamped(patch: &Patch, p: [f64; 3]) -> f64 {
    let hi = (patch.side - 1) as f64;
    let mut idx = [[0usize; 2]; 3];
    let mut frac = [0.0; 3];
    for a in 0..3 {
        let c = p[a].clamp(0.0, hi);
        let i = c.floor();
        frac[a] = c - i;
        let i = i as usize;
        idx[a] = [i, (i + 1).min(patch.side - 1)];
    }
    let mut acc = 0.0;
    for (dz, wz) in [(0, 1.0 - frac[0]), (1, frac[0])] {
        if wz == 0.0 {
            continue;
        }
        for (dy, wy) in [(0, 1.0 - frac[1]), (1, frac[1])] {
            if wy == 0.0 {
                continue;
            }
            for (dx, wx) in [(0, 1.0 - frac[2]), (1, frac[2])] {
                if wx == 0.0 {
                    continue;
                }
                let v = patch.data[patch.index(idx[0][dz], idx[1][dy], idx[2][dx])];
                acc += wz * wy * wx * f64::from(v);
            }
        }
    }
    acc
}

/// Backward warp: output voxel `x` takes the input at `x - d(x)`.
pub fn warp(patch: &Patch, field: &DenseField) -> Result<Patch> {
    if field.side != patch.side {
        return Err(Error::shape(
            0,
            format!("field side {} does not match patch side {}", field.side, patch.side),
        ));
    }
    let s = patch.side;
    let mut data = Vec::with_capacity(s * s * s);
    for z in 0..s {
        for y in 0..s {
            for x in 0..s {
                let d = field.at(z, y, x);
                let src = [z as f64 - d[0], y as f64 - d[1], x as f64 - d[2]];
                data.push(sample_clamped(patch, src).clamp(0.0, 1.0) as f32);
            }
        }
    }
    Ok(Patch { data, ..patch.clone() })
}

/// Random smooth deformation of `patch`; label and center are kept.
pub fn elastic_deform(patch: &Patch, cfg: &DeformConfig, seed: u64) -> Result<Patch> {
    cfg.validate()?;
    let grid = control_grid_sample(cfg.grid_size, cfg.sigma, seed)?;
    let field = dense_displacement(&grid, patch.side, cfg.spline_order)?;
    warp(patch, &field)
}

/// Re-extracts `parent` from its frame at a uniformly random integer shift
/// in `[-max_shift, max_shift]^3`. Returns the patch and the shift.
pub fn translate_patch(
    seq: &VolumeSequence,
    parent: &Patch,
    cfg: &TranslateConfig,
    seed: u64,
) -> Result<(Patch, [i32; 3])> {
    if !within_margin(seq.dims(), parent.center, parent.side, cfg.max_shift) {
        return Err(Error::Bounds(format!(
            "parent center {:?} leaves no room for shifts of {} voxels",
            parent.center, cfg.max_shift
        )));
    }
    let m = cfg.max_shift as i32;
    let mut rng = seed::rng(seed);
    let shift: [i32; 3] = std::array::from_fn(|_| rng.gen_range(-m..=m));
    let center = std::array::from_fn(|a| parent.center[a] + shift[a]);
    let patch = seq.extract(parent.frame_index, center, parent.side, parent.label)?;
    Ok((patch, shift))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AugmentKind {
    Deformation,
    Translation,
}

impl AugmentKind {
    pub fn name(self) -> &'static str {
        match self {
            AugmentKind::Deformation => "deformation",
            AugmentKind::Translation => "translation",
        }
    }
}

/// How one augmented patch was produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentRecord {
    pub label: u32,
    pub seed: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub shift: Option<[i32; 3]>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AugmentedSet {
    pub kind: AugmentKind,
    pub patches: Vec<Patch>,
    pub records: Vec<AugmentRecord>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AugmentManifest {
    pub kind: AugmentKind,
    pub n_references: usize,
    pub n_aug: usize,
    pub deform: DeformConfig,
    pub translate: TranslateConfig,
    pub seed: u64,
    pub records: Vec<AugmentRecord>,
}

impl AugmentedSet {
    pub fn labels(&self) -> Vec<u32> {
        self.patches.iter().map(|p| p.label).collect()
    }

    /// Writes `<stem>.rspat` and the `<stem>.json` sidecar manifest into `dir`.
    pub fn write(
        &self,
        dir: &Path,
        n_references: usize,
        n_aug: usize,
        dcfg: &DeformConfig,
        tcfg: &TranslateConfig,
        seed: u64,
    ) -> Result<()> {
        let stem = self.kind.name();
        write_patches(dir.join(format!("{stem}.rspat")), &self.patches)?;
        let manifest = AugmentManifest {
            kind: self.kind,
            n_references,
            n_aug,
            deform: *dcfg,
            translate: *tcfg,
            seed,
            records: self.records.clone(),
        };
        let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
        let path = dir.join(format!("{stem}.json"));
        std::fs::write(&path, json + "\n").map_err(|e| Error::io(path, e))
    }
}

/// Builds the deformation and translation subsets: `n_aug` of each per
/// reference, labels inherited, references themselves excluded.
pub fn build_experiment_sets(
    seq: &VolumeSequence,
    references: &[Patch],
    n_aug: usize,
    dcfg: &DeformConfig,
    tcfg: &TranslateConfig,
    seed: u64,
) -> Result<(AugmentedSet, AugmentedSet)> {
    if n_aug == 0 {
        return Err(Error::Config("n_aug must be >= 1".into()));
    }
    dcfg.validate()?;
    let deform_seed = seed::derive_tag(seed, "deformation");
    let translate_seed = seed::derive_tag(seed, "translation");
    let jobs: Vec<(usize, &Patch)> = references
        .iter()
        .flat_map(|r| std::iter::repeat_n(r, n_aug))
        .enumerate()
        .collect();

    let deformed = jobs
        .par_iter()
        .map(|&(i, parent)| {
            let s = seed::derive(deform_seed, i as u64);
            let p = elastic_deform(parent, dcfg, s)?;
            Ok((
                p,
                AugmentRecord {
                    label: parent.label,
                    seed: s,
                    shift: None,
                },
            ))
        })
        .collect::<Result<Vec<_>>>()?;
    let translated = jobs
        .par_iter()
        .map(|&(i, parent)| {
            let s = seed::derive(translate_seed, i as u64);
            let (p, shift) = translate_patch(seq, parent, tcfg, s)?;
            Ok((
                p,
                AugmentRecord {
                    label: parent.label,
                    seed: s,
                    shift: Some(shift),
                },
            ))
        })
        .collect::<Result<Vec<_>>>()?;

    let split = |kind, v: Vec<(Patch, AugmentRecord)>| {
        let (patches, records) = v.into_iter().unzip();
        AugmentedSet { kind, patches, records }
    };
    Ok((
        split(AugmentKind::Deformation, deformed),
        split(AugmentKind::Translation, translated),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume_data::{generate_phantom, sample_reference_patches, PhantomConfig};
    use proptest::prelude::*;

    fn random_patch(side: usize, seed: u64) -> Patch {
        let mut rng = seed::rng(seed);
        Patch::new(side, (0..side.pow(3)).map(|_| rng.gen::<f32>()).collect()).unwrap()
    }

    fn phantom() -> (VolumeSequence, Vec<Patch>) {
        let seq = generate_phantom(
            &PhantomConfig {
                n_frames: 4,
                ..Default::default()
            },
            2,
        )
        .unwrap();
        let refs = sample_reference_patches(&seq, 3, 30, 10, 4).unwrap();
        (seq, refs)
    }

    #[test]
    fn zero_sigma_grid_is_zero() {
        let g = control_grid_sample(5, 0.0, 1).unwrap();
        assert!(g.values().iter().all(|&v| v == 0.0));
        assert_eq!(g.values().len(), 375);
    }

    #[test]
    fn grid_components_are_standard_normal() {
        // 10^4 pooled components from repeated draws
        let mut xs = Vec::new();
        let mut s = 0;
        while xs.len() < 10_000 {
            xs.extend_from_slice(control_grid_sample(5, 1.0, s).unwrap().values());
            s += 1;
        }
        xs.truncate(10_000);
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let std = (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt();
        assert!(mean.abs() < 0.05, "mean {mean}");
        assert!((std - 1.0).abs() < 0.05, "std {std}");
        assert_eq!(
            control_grid_sample(5, 1.0, 3).unwrap(),
            control_grid_sample(5, 1.0, 3).unwrap()
        );
    }

    #[test]
    fn invalid_grid_rejected() {
        assert!(control_grid_sample(1, 1.0, 0).is_err());
        assert!(control_grid_sample(5, -1.0, 0).is_err());
        let g = ControlGrid::constant(3, [0.0; 3]).unwrap();
        assert!(matches!(dense_displacement(&g, 8, 2), Err(Error::Config(_))));
    }

    #[test]
    fn constant_grid_gives_constant_field() {
        for order in [1, 3] {
            let g = ControlGrid::constant(5, [0.5, -1.25, 2.0]).unwrap();
            let f = dense_displacement(&g, 13, order).unwrap();
            for z in 0..13 {
                for y in 0..13 {
                    for x in 0..13 {
                        let d = f.at(z, y, x);
                        assert!((d[0] - 0.5).abs() < 1e-12);
                        assert!((d[1] + 1.25).abs() < 1e-12);
                        assert!((d[2] - 2.0).abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn linear_ramp_along_one_axis() {
        // grid 2: value 0 on the low z face, 4 on the high z face
        let mut v = vec![0.0; 24];
        for y in 0..2 {
            for x in 0..2 {
                v[(2 + y) * 2 + x] = 4.0;
            }
        }
        let f = dense_displacement(&ControlGrid::from_values(2, v).unwrap(), 5, 1).unwrap();
        let along: Vec<f64> = (0..5).map(|z| f.at(z, 2, 3)[0]).collect();
        assert_eq!(along, vec![0.0, 1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn spline_reproduces_control_values() {
        let g = control_grid_sample(5, 1.0, 17).unwrap();
        for order in [1, 3] {
            // side 29 puts control points on voxels 0, 7, 14, 21, 28
            let f = dense_displacement(&g, 29, order).unwrap();
            for (iz, iy, ix) in [(0, 0, 0), (1, 2, 3), (4, 4, 4), (2, 0, 4), (3, 1, 2)] {
                let d = f.at(7 * iz, 7 * iy, 7 * ix);
                for c in 0..3 {
                    let want = g.component(c)[(iz * 5 + iy) * 5 + ix];
                    assert!((d[c] - want).abs() < 1e-5, "order {order}: {} vs {want}", d[c]);
                }
            }
            let d = g.interpolate([1.0, 3.0, 2.0], order).unwrap();
            assert!((d[1] - g.component(1)[(5 + 3) * 5 + 2]).abs() < 1e-5);
        }
    }

    #[test]
    fn cubic_spline_is_smooth_between_nodes() {
        let g = control_grid_sample(5, 1.0, 2).unwrap();
        let f = dense_displacement(&g, 30, 3).unwrap();
        let max_jump = (0..29)
            .map(|z| (f.at(z + 1, 10, 10)[0] - f.at(z, 10, 10)[0]).abs())
            .fold(0.0, f64::max);
        assert!(max_jump < 1.5, "max jump {max_jump}");
    }

    #[test]
    fn zero_sigma_deformation_is_bit_exact_identity() {
        let p = random_patch(12, 3);
        for order in [1, 3] {
            let cfg = DeformConfig {
                sigma: 0.0,
                spline_order: order,
                ..Default::default()
            };
            assert_eq!(elastic_deform(&p, &cfg, 99).unwrap(), p);
        }
    }

    #[test]
    fn backward_warp_moves_impulse_forward() {
        let mut p = Patch::new(7, vec![0.0; 343]).unwrap();
        let at = p.index(3, 3, 3);
        p.data[at] = 1.0;
        let out = warp(&p, &DenseField::constant(7, [1.0, 0.0, 0.0])).unwrap();
        assert_eq!(out.data[out.index(4, 3, 3)], 1.0);
        assert_eq!(out.data[out.index(3, 3, 3)], 0.0);
        assert_eq!(out.data.iter().filter(|&&v| v != 0.0).count(), 1);
    }

    #[test]
    fn deformation_changes_voxels_but_keeps_mean() {
        let (_, refs) = phantom();
        for (i, r) in refs.iter().enumerate() {
            let d = elastic_deform(r, &DeformConfig::default(), i as u64).unwrap();
            let mad = r
                .data
                .iter()
                .zip(&d.data)
                .map(|(a, b)| (a - b).abs() as f64)
                .sum::<f64>()
                / r.data.len() as f64;
            assert!(mad > 0.0);
            assert!((d.mean() - r.mean()).abs() / r.mean() < 0.02);
            assert_eq!((d.label, d.center), (r.label, r.center));
            assert!(d.data.iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn translation_with_zero_shift_is_identity() {
        let (seq, refs) = phantom();
        let (p, shift) = translate_patch(&seq, &refs[0], &TranslateConfig { max_shift: 0 }, 5).unwrap();
        assert_eq!(shift, [0, 0, 0]);
        assert_eq!(p, refs[0]);
    }

    #[test]
    fn recorded_shift_reproduces_patch() {
        let (seq, refs) = phantom();
        let (p, s) = translate_patch(&seq, &refs[1], &TranslateConfig::default(), 8).unwrap();
        let c = std::array::from_fn(|a| refs[1].center[a] + s[a]);
        let direct = seq.extract(refs[1].frame_index, c, 30, refs[1].label).unwrap();
        assert_eq!(p, direct);
    }

    #[test]
    fn translation_margin_violation_is_bounds_error() {
        let (seq, refs) = phantom();
        let mut parent = refs[0].clone();
        parent.center = [16, 32, 32];
        let r = translate_patch(&seq, &parent, &TranslateConfig::default(), 1);
        assert!(matches!(r, Err(Error::Bounds(_))));
    }

    #[test]
    fn shifts_are_uniform_over_21_values() {
        let (seq, refs) = phantom();
        let mut counts = [[0u32; 21]; 3];
        for s in 0..10_000u64 {
            // draw the shift exactly as translate_patch does, without extraction
            let mut rng = seed::rng(s);
            for axis in counts.iter_mut() {
                axis[(rng.gen_range(-10..=10) + 10) as usize] += 1;
            }
        }
        let (_, shift) = translate_patch(&seq, &refs[0], &TranslateConfig::default(), 123).unwrap();
        let mut rng = seed::rng(123);
        let again: [i32; 3] = std::array::from_fn(|_| rng.gen_range(-10..=10));
        assert_eq!(shift, again);
        use statrs::distribution::{ChiSquared, ContinuousCDF};
        let chi = ChiSquared::new(20.0).unwrap();
        for axis in counts {
            assert!(axis[0] > 0 && axis[20] > 0);
            let e = 10_000.0 / 21.0;
            let stat: f64 = axis.iter().map(|&o| (o as f64 - e).powi(2) / e).sum();
            assert!(1.0 - chi.cdf(stat) > 0.01, "chi-square {stat}");
        }
    }

    #[test]
    fn experiment_sets_have_expected_sizes_and_labels() {
        let (seq, refs) = phantom();
        let (d, t) =
            build_experiment_sets(&seq, &refs, 4, &DeformConfig::default(), &TranslateConfig::default(), 7).unwrap();
        assert_eq!(d.patches.len(), 12);
        assert_eq!(t.patches.len(), 12);
        let mut labels = d.labels();
        labels.sort();
        assert_eq!(labels, vec![0, 0, 0, 0, 1, 1, 1, 1, 2, 2, 2, 2]);
        assert!(t.records.iter().all(|r| r.shift.is_some()));
        let (d2, t2) =
            build_experiment_sets(&seq, &refs, 4, &DeformConfig::default(), &TranslateConfig::default(), 7).unwrap();
        assert_eq!((d, t), (d2, t2));
    }

    #[test]
    fn identity_configs_reproduce_references() {
        let (seq, refs) = phantom();
        let dcfg = DeformConfig {
            sigma: 0.0,
            ..Default::default()
        };
        let tcfg = TranslateConfig { max_shift: 0 };
        let (d, t) = build_experiment_sets(&seq, &refs, 1, &dcfg, &tcfg, 1).unwrap();
        assert_eq!(d.patches, refs);
        assert_eq!(t.patches, refs);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn translated_patches_stay_valid(
            cz in 25i32..=38, cy in 25i32..=38, cx in 25i32..=38, frame in 0usize..2, seed in any::<u64>(),
        ) {
            let seq = generate_phantom(
                &PhantomConfig { n_frames: 2, ..Default::default() }, 1).unwrap();
            let parent = seq.extract(frame, [cz, cy, cx], 30, 4).unwrap();
            let (p, s) = translate_patch(&seq, &parent, &TranslateConfig::default(), seed).unwrap();
            prop_assert_eq!(p.side, 30);
            prop_assert_eq!(p.data.len(), 27_000);
            prop_assert_eq!(p.label, 4);
            prop_assert!(s.iter().all(|c| c.abs() <= 10));
        }
    }
}
