//! 3D scalar/label volume types, geometry, resampling, cropping, connected
//! components and file I/O.
//!
//! Volumes are dense grids with anisotropic physical spacing. Data is stored
//! x-fastest: `idx = x + w * (y + h * z)`. Volumes are immutable after
//! construction as far as the pipeline is concerned; every operation here
//! returns a new volume.

mod components;
mod mvol;
mod nifti;
mod resample;

pub use components::{connected_components, Connectivity};
pub use mvol::{load_mvol, load_mvol_label, load_mvol_scalar, save_mvol, Mvol};
pub use nifti::{load_nifti_label, load_nifti_scalar};
pub use resample::{resample_label, resample_scalar};

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

/// Physical voxel edge lengths in mm. All components strictly positive.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Spacing {
    pub dx: f64,
    pub dy: f64,
    pub dz: f64,
}

impl Spacing {
    pub fn new(dx: f64, dy: f64, dz: f64) -> Result<Self> {
        let ok = dx > 0.0 && dy > 0.0 && dz > 0.0;
        let finite = dx.is_finite() && dy.is_finite() && dz.is_finite();
        if !ok || !finite {
            return Err(Error::Input(format!(
                "spacing components must be positive and finite, got ({dx}, {dy}, {dz})"
            )));
        }
        Ok(Spacing { dx, dy, dz })
    }

    pub fn isotropic(s: f64) -> Result<Self> {
        Spacing::new(s, s, s)
    }

    /// Physical volume of one voxel in mm^3.
    pub fn voxel_mm3(&self) -> f64 {
        self.dx * self.dy * self.dz
    }

    pub fn axis(&self, ax: usize) -> f64 {
        match ax {
            0 => self.dx,
            1 => self.dy,
            2 => self.dz,
            _ => panic!("axis out of range"),
        }
    }
}

/// Grid extent in voxels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Dims {
    pub w: usize,
    pub h: usize,
    pub d: usize,
}

impl Dims {
    pub fn new(w: usize, h: usize, d: usize) -> Self {
        Dims { w, h, d }
    }

    pub fn len(&self) -> usize {
        self.w * self.h * self.d
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        debug_assert!(x < self.w && y < self.h && z < self.d);
        x + self.w * (y + self.h * z)
    }

    #[inline]
    pub fn coords(&self, idx: usize) -> (usize, usize, usize) {
        let x = idx % self.w;
        let y = (idx / self.w) % self.h;
        let z = idx / (self.w * self.h);
        (x, y, z)
    }

    pub fn contains(&self, x: i64, y: i64, z: i64) -> bool {
        x >= 0
            && y >= 0
            && z >= 0
            && (x as usize) < self.w
            && (y as usize) < self.h
            && (z as usize) < self.d
    }

    pub fn axis(&self, ax: usize) -> usize {
        match ax {
            0 => self.w,
            1 => self.h,
            2 => self.d,
            _ => panic!("axis out of range"),
        }
    }
}

/// Dense 3D grid of real-valued scores.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalarVolume {
    pub dims: Dims,
    pub spacing: Spacing,
    pub data: Vec<f32>,
}

impl ScalarVolume {
    pub fn new(dims: Dims, spacing: Spacing, data: Vec<f32>) -> Result<Self> {
        if data.len() != dims.len() {
            return Err(Error::Input(format!(
                "scalar volume data length {} does not match dims {}x{}x{}",
                data.len(),
                dims.w,
                dims.h,
                dims.d
            )));
        }
        Ok(ScalarVolume { dims, spacing, data })
    }

    pub fn filled(dims: Dims, spacing: Spacing, value: f32) -> Self {
        ScalarVolume { dims, spacing, data: vec![value; dims.len()] }
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize, z: usize) -> f32 {
        self.data[self.dims.index(x, y, z)]
    }
}

/// Dense 3D grid of non-negative integer labels. 0 means background.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelVolume {
    pub dims: Dims,
    pub spacing: Spacing,
    pub data: Vec<u16>,
}

impl LabelVolume {
    pub fn new(dims: Dims, spacing: Spacing, data: Vec<u16>) -> Result<Self> {
        if data.len() != dims.len() {
            return Err(Error::Input(format!(
                "label volume data length {} does not match dims {}x{}x{}",
                data.len(),
                dims.w,
                dims.h,
                dims.d
            )));
        }
        Ok(LabelVolume { dims, spacing, data })
    }

    pub fn filled(dims: Dims, spacing: Spacing, value: u16) -> Self {
        LabelVolume { dims, spacing, data: vec![value; dims.len()] }
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize, z: usize) -> u16 {
        self.data[self.dims.index(x, y, z)]
    }

    pub fn is_binary(&self) -> bool {
        self.data.iter().all(|&v| v <= 1)
    }

    /// Distinct labels present, ascending.
    pub fn label_set(&self) -> Vec<u16> {
        let mut seen = vec![false; u16::MAX as usize + 1];
        for &v in &self.data {
            seen[v as usize] = true;
        }
        (0..=u16::MAX).filter(|&v| seen[v as usize]).collect()
    }

    pub fn count_label(&self, label: u16) -> usize {
        self.data.iter().filter(|&&v| v == label).count()
    }
}

/// A crop request: integer center voxel plus output shape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PatchSpec {
    /// Center voxel coordinate; may lie outside the source grid.
    pub center: (i64, i64, i64),
    pub shape: Dims,
}

impl PatchSpec {
    pub fn new(center: (i64, i64, i64), shape: Dims) -> Result<Self> {
        if shape.w == 0 || shape.h == 0 || shape.d == 0 {
            return Err(Error::Input("patch shape components must be > 0".into()));
        }
        Ok(PatchSpec { center, shape })
    }

    /// Lowest source coordinate covered by the patch (may be negative).
    /// The center voxel sits at offset shape/2, rounding toward the lower index.
    pub fn origin(&self) -> (i64, i64, i64) {
        (
            self.center.0 - (self.shape.w / 2) as i64,
            self.center.1 - (self.shape.h / 2) as i64,
            self.center.2 - (self.shape.d / 2) as i64,
        )
    }
}

/// Out-of-bounds fill policy for cropping.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PadMode {
    Zero,
    Clamp,
}

/// Crop a patch out of a scalar volume. Voxels outside the source are filled
/// per the pad policy. Output keeps the source spacing.
pub fn crop_patch_scalar(vol: &ScalarVolume, spec: &PatchSpec, pad: PadMode) -> ScalarVolume {
    let sh = spec.shape;
    let mut data = vec![0.0f32; sh.len()];
    crop_core(vol.dims, &mut data, sh, spec.origin(), pad, |x, y, z| vol.at(x, y, z), 0.0);
    ScalarVolume { dims: sh, spacing: vol.spacing, data }
}

/// Crop a patch out of a label volume.
pub fn crop_patch_label(vol: &LabelVolume, spec: &PatchSpec, pad: PadMode) -> LabelVolume {
    let sh = spec.shape;
    let mut data = vec![0u16; sh.len()];
    crop_core(vol.dims, &mut data, sh, spec.origin(), pad, |x, y, z| vol.at(x, y, z), 0);
    LabelVolume { dims: sh, spacing: vol.spacing, data }
}

fn crop_core<T: Copy>(
    src_dims: Dims,
    out: &mut [T],
    out_dims: Dims,
    origin: (i64, i64, i64),
    pad: PadMode,
    read: impl Fn(usize, usize, usize) -> T,
    zero: T,
) {
    let clamp = |v: i64, n: usize| -> usize { v.clamp(0, n as i64 - 1) as usize };
    for z in 0..out_dims.d {
        let sz = origin.2 + z as i64;
        for y in 0..out_dims.h {
            let sy = origin.1 + y as i64;
            for x in 0..out_dims.w {
                let sx = origin.0 + x as i64;
                let v = if src_dims.contains(sx, sy, sz) {
                    read(sx as usize, sy as usize, sz as usize)
                } else {
                    match pad {
                        PadMode::Zero => zero,
                        PadMode::Clamp => {
                            read(clamp(sx, src_dims.w), clamp(sy, src_dims.h), clamp(sz, src_dims.d))
                        }
                    }
                };
                out[out_dims.index(x, y, z)] = v;
            }
        }
    }
}

/// Physical volume of a voxel set in mm^3. Rejects empty sets.
pub fn volume_mm3(voxel_count: usize, spacing: Spacing) -> Result<f64> {
    if voxel_count == 0 {
        return Err(Error::Degenerate("volume of an empty component is undefined".into()));
    }
    Ok(voxel_count as f64 * spacing.voxel_mm3())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sp1() -> Spacing {
        Spacing::isotropic(1.0).unwrap()
    }

    #[test]
    fn spacing_rejects_non_positive() {
        assert!(Spacing::new(0.0, 1.0, 1.0).is_err());
        assert!(Spacing::new(1.0, -2.0, 1.0).is_err());
        assert!(Spacing::new(1.0, 1.0, f64::NAN).is_err());
    }

    #[test]
    fn volume_mm3_arithmetic() {
        let s = Spacing::new(0.68, 0.68, 0.80).unwrap();
        let v = volume_mm3(100, s).unwrap();
        assert!((v - 36.992).abs() < 1e-9);
        assert_eq!(volume_mm3(1, sp1()).unwrap(), 1.0);
        assert!(volume_mm3(0, sp1()).is_err());
    }

    #[test]
    fn crop_interior_is_exact_subarray() {
        let dims = Dims::new(6, 5, 4);
        let data: Vec<f32> = (0..dims.len()).map(|i| i as f32).collect();
        let vol = ScalarVolume::new(dims, sp1(), data).unwrap();
        let spec = PatchSpec::new((3, 2, 2), Dims::new(3, 3, 2)).unwrap();
        let patch = crop_patch_scalar(&vol, &spec, PadMode::Zero);
        // origin = (2, 1, 1)
        for z in 0..2 {
            for y in 0..3 {
                for x in 0..3 {
                    assert_eq!(patch.at(x, y, z), vol.at(x + 2, y + 1, z + 1));
                }
            }
        }
    }

    #[test]
    fn crop_at_corner_zero_pads() {
        let dims = Dims::new(4, 4, 4);
        let vol = ScalarVolume::filled(dims, sp1(), 7.0);
        let spec = PatchSpec::new((0, 0, 0), Dims::new(4, 4, 4)).unwrap();
        let patch = crop_patch_scalar(&vol, &spec, PadMode::Zero);
        // origin (-2,-2,-2): only a 2x2x2 corner of the patch lands inside
        assert_eq!(patch.at(0, 0, 0), 0.0);
        assert_eq!(patch.at(3, 3, 3), 7.0);
        let zeros = patch.data.iter().filter(|&&v| v == 0.0).count();
        assert_eq!(zeros, 64 - 8);
    }

    #[test]
    fn crop_clamp_replicates_edges() {
        let dims = Dims::new(2, 1, 1);
        let vol = ScalarVolume::new(dims, sp1(), vec![3.0, 9.0]).unwrap();
        let spec = PatchSpec::new((0, 0, 0), Dims::new(4, 1, 1)).unwrap();
        let patch = crop_patch_scalar(&vol, &spec, PadMode::Clamp);
        assert_eq!(patch.data, vec![3.0, 3.0, 3.0, 9.0]);
    }

    #[test]
    fn crop_zero_pad_preserves_nonneg_sum_bound() {
        let dims = Dims::new(5, 5, 5);
        let data: Vec<f32> = (0..dims.len()).map(|i| (i % 7) as f32).collect();
        let vol = ScalarVolume::new(dims, sp1(), data).unwrap();
        let total: f32 = vol.data.iter().sum();
        let spec = PatchSpec::new((1, 2, 4), Dims::new(6, 6, 6)).unwrap();
        let patch = crop_patch_scalar(&vol, &spec, PadMode::Zero);
        let ps: f32 = patch.data.iter().sum();
        assert!(ps <= total);
    }

    #[test]
    fn crop_matches_direct_indexing_oracle() {
        let dims = Dims::new(8, 7, 6);
        let data: Vec<f32> = (0..dims.len()).map(|i| (i as f32).sin()).collect();
        let vol = ScalarVolume::new(dims, sp1(), data).unwrap();
        let spec = PatchSpec::new((4, 3, 3), Dims::new(5, 4, 3)).unwrap();
        let patch = crop_patch_scalar(&vol, &spec, PadMode::Zero);
        let (ox, oy, oz) = spec.origin();
        for z in 0..3usize {
            for y in 0..4usize {
                for x in 0..5usize {
                    let (sx, sy, sz) = (ox + x as i64, oy + y as i64, oz + z as i64);
                    let expect = if dims.contains(sx, sy, sz) {
                        vol.at(sx as usize, sy as usize, sz as usize)
                    } else {
                        0.0
                    };
                    assert_eq!(patch.at(x, y, z), expect);
                }
            }
        }
    }
}
