//! Grid resampling onto a new physical spacing.
//!
//! Coordinate convention: the physical position of voxel `i` along an axis is
//! `i * spacing` (origin at the first voxel center). Output dims are
//! `round(in_dims * in_spacing / out_spacing)`, at least 1 per axis, and
//! sampling coordinates are clamped to the source grid.

use super::{Dims, LabelVolume, ScalarVolume, Spacing};
use crate::error::Result;

fn output_dims(dims: Dims, src: Spacing, dst: Spacing) -> Dims {
    let f = |n: usize, s: f64, t: f64| -> usize {
        let v = (n as f64 * s / t).round() as usize;
        v.max(1)
    };
    Dims::new(f(dims.w, src.dx, dst.dx), f(dims.h, src.dy, dst.dy), f(dims.d, src.dz, dst.dz))
}

/// Trilinear resampling of an intensity volume.
pub fn resample_scalar(vol: &ScalarVolume, target: Spacing) -> Result<ScalarVolume> {
    let od = output_dims(vol.dims, vol.spacing, target);
    let sx = target.dx / vol.spacing.dx;
    let sy = target.dy / vol.spacing.dy;
    let sz = target.dz / vol.spacing.dz;
    let mut data = vec![0.0f32; od.len()];
    for z in 0..od.d {
        let fz = (z as f64 * sz).clamp(0.0, (vol.dims.d - 1) as f64);
        for y in 0..od.h {
            let fy = (y as f64 * sy).clamp(0.0, (vol.dims.h - 1) as f64);
            for x in 0..od.w {
                let fx = (x as f64 * sx).clamp(0.0, (vol.dims.w - 1) as f64);
                data[od.index(x, y, z)] = trilinear(vol, fx, fy, fz);
            }
        }
    }
    ScalarVolume::new(od, target, data)
}

fn trilinear(vol: &ScalarVolume, fx: f64, fy: f64, fz: f64) -> f32 {
    let x0 = fx.floor() as usize;
    let y0 = fy.floor() as usize;
    let z0 = fz.floor() as usize;
    let x1 = (x0 + 1).min(vol.dims.w - 1);
    let y1 = (y0 + 1).min(vol.dims.h - 1);
    let z1 = (z0 + 1).min(vol.dims.d - 1);
    let tx = fx - x0 as f64;
    let ty = fy - y0 as f64;
    let tz = fz - z0 as f64;
    let c = |x: usize, y: usize, z: usize| vol.at(x, y, z) as f64;
    let lerp = |a: f64, b: f64, t: f64| a + (b - a) * t;
    let v00 = lerp(c(x0, y0, z0), c(x1, y0, z0), tx);
    let v10 = lerp(c(x0, y1, z0), c(x1, y1, z0), tx);
    let v01 = lerp(c(x0, y0, z1), c(x1, y0, z1), tx);
    let v11 = lerp(c(x0, y1, z1), c(x1, y1, z1), tx);
    lerp(lerp(v00, v10, ty), lerp(v01, v11, ty), tz) as f32
}

/// Nearest-neighbor resampling of a label volume. The output label set is a
/// subset of the input's.
pub fn resample_label(vol: &LabelVolume, target: Spacing) -> Result<LabelVolume> {
    let od = output_dims(vol.dims, vol.spacing, target);
    let sx = target.dx / vol.spacing.dx;
    let sy = target.dy / vol.spacing.dy;
    let sz = target.dz / vol.spacing.dz;
    let near = |f: f64, n: usize| -> usize { (f.round() as i64).clamp(0, n as i64 - 1) as usize };
    let mut data = vec![0u16; od.len()];
    for z in 0..od.d {
        let iz = near(z as f64 * sz, vol.dims.d);
        for y in 0..od.h {
            let iy = near(y as f64 * sy, vol.dims.h);
            for x in 0..od.w {
                let ix = near(x as f64 * sx, vol.dims.w);
                data[od.index(x, y, z)] = vol.at(ix, iy, iz);
            }
        }
    }
    LabelVolume::new(od, target, data)
}
