//! Minimal NIfTI-1 import.
//!
//! Parses the 348-byte header (dim, pixdim, datatype, scl_slope/scl_inter,
//! vox_offset), converts to native volumes. Only single-frame, axis-aligned
//! grids are supported; qform/sform-rotated grids are rejected. Gzip-wrapped
//! files are accepted. Both byte orders are handled.

use super::{Dims, LabelVolume, ScalarVolume, Spacing};
use crate::error::{Error, Result};
use flate2::read::MultiGzDecoder;
use std::fs::File;
use std::io::Read;
use std::path::Path;

const HDR_LEN: usize = 348;

struct Nifti1Header {
    dim: [i16; 8],
    datatype: i16,
    pixdim: [f32; 8],
    vox_offset: f32,
    scl_slope: f32,
    scl_inter: f32,
    qform_code: i16,
    sform_code: i16,
    quatern: [f32; 3],
    srow: [[f32; 4]; 3],
}

struct Raw<'a> {
    bytes: &'a [u8],
    swap: bool,
}

impl<'a> Raw<'a> {
    fn i16_at(&self, off: usize) -> i16 {
        let b: [u8; 2] = self.bytes[off..off + 2].try_into().unwrap();
        if self.swap {
            i16::from_be_bytes(b)
        } else {
            i16::from_le_bytes(b)
        }
    }
    fn i32_at(&self, off: usize) -> i32 {
        let b: [u8; 4] = self.bytes[off..off + 4].try_into().unwrap();
        if self.swap {
            i32::from_be_bytes(b)
        } else {
            i32::from_le_bytes(b)
        }
    }
    fn f32_at(&self, off: usize) -> f32 {
        let b: [u8; 4] = self.bytes[off..off + 4].try_into().unwrap();
        if self.swap {
            f32::from_be_bytes(b)
        } else {
            f32::from_le_bytes(b)
        }
    }
}

fn read_all(path: &Path) -> Result<Vec<u8>> {
    let mut f = File::open(path)?;
    let mut head = [0u8; 2];
    let n = f.read(&mut head)?;
    let mut rest = Vec::new();
    f.read_to_end(&mut rest)?;
    let mut raw = Vec::with_capacity(rest.len() + n);
    raw.extend_from_slice(&head[..n]);
    raw.extend_from_slice(&rest);
    if n == 2 && head == [0x1f, 0x8b] {
        let mut out = Vec::new();
        MultiGzDecoder::new(&raw[..])
            .read_to_end(&mut out)
            .map_err(|e| Error::Input(format!("{}: gzip decode failed: {e}", path.display())))?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

fn parse_header(bytes: &[u8], path: &Path) -> Result<Nifti1Header> {
    if bytes.len() < HDR_LEN {
        return Err(Error::Input(format!("{}: file shorter than a NIfTI-1 header", path.display())));
    }
    // byte order is inferred from sizeof_hdr
    let le = Raw { bytes, swap: false };
    let swap = match le.i32_at(0) {
        348 => false,
        _ => {
            let be = Raw { bytes, swap: true };
            if be.i32_at(0) == 348 {
                true
            } else {
                return Err(Error::Input(format!("{}: not a NIfTI-1 file (sizeof_hdr)", path.display())));
            }
        }
    };
    let r = Raw { bytes, swap };
    let magic = &bytes[344..348];
    if magic != b"n+1\0" && magic != b"ni1\0" {
        return Err(Error::Input(format!("{}: bad NIfTI-1 magic", path.display())));
    }
    if magic == b"ni1\0" {
        return Err(Error::Input(format!(
            "{}: detached .hdr/.img pairs are not supported",
            path.display()
        )));
    }
    let mut dim = [0i16; 8];
    for (i, d) in dim.iter_mut().enumerate() {
        *d = r.i16_at(40 + 2 * i);
    }
    let mut pixdim = [0f32; 8];
    for (i, p) in pixdim.iter_mut().enumerate() {
        *p = r.f32_at(76 + 4 * i);
    }
    let mut srow = [[0f32; 4]; 3];
    for (i, row) in srow.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            *v = r.f32_at(280 + 16 * i + 4 * j);
        }
    }
    Ok(Nifti1Header {
        dim,
        datatype: r.i16_at(70),
        pixdim,
        vox_offset: r.f32_at(108),
        scl_slope: r.f32_at(112),
        scl_inter: r.f32_at(116),
        qform_code: r.i16_at(252),
        sform_code: r.i16_at(254),
        quatern: [r.f32_at(256), r.f32_at(260), r.f32_at(264)],
        srow,
    })
}

fn check_geometry(h: &Nifti1Header, path: &Path) -> Result<(Dims, Spacing)> {
    let nd = h.dim[0];
    if !(1..=7).contains(&nd) {
        return Err(Error::Input(format!("{}: invalid dim[0] = {nd}", path.display())));
    }
    if nd > 3 && h.dim[4..=(nd as usize)].iter().any(|&d| d > 1) {
        return Err(Error::Input(format!("{}: multi-frame NIfTI is not supported", path.display())));
    }
    let w = h.dim[1].max(1) as usize;
    let hh = if nd >= 2 { h.dim[2].max(1) as usize } else { 1 };
    let d = if nd >= 3 { h.dim[3].max(1) as usize } else { 1 };

    // only axis-aligned grids: a rotated sform or a non-trivial quaternion is rejected
    if h.sform_code > 0 {
        for (i, row) in h.srow.iter().enumerate() {
            for (j, &v) in row.iter().take(3).enumerate() {
                if i != j && v.abs() > 1e-4 {
                    return Err(Error::Input(format!(
                        "{}: rotated/oblique sform grids are not supported",
                        path.display()
                    )));
                }
            }
        }
    } else if h.qform_code > 0 && h.quatern.iter().any(|&q| q.abs() > 1e-4) {
        return Err(Error::Input(format!(
            "{}: rotated qform grids are not supported",
            path.display()
        )));
    }

    let spacing = Spacing::new(
        f64::from(h.pixdim[1].abs()),
        f64::from(h.pixdim[2].abs()),
        f64::from(h.pixdim[3].abs()),
    )
    .map_err(|_| Error::Input(format!("{}: non-positive pixdim", path.display())))?;
    Ok((Dims::new(w, hh, d), spacing))
}

fn decode_values(h: &Nifti1Header, payload: &[u8], n: usize, swap: bool, path: &Path) -> Result<Vec<f64>> {
    let width = match h.datatype {
        2 => 1,
        4 | 512 => 2,
        8 | 16 => 4,
        64 => 8,
        dt => {
            return Err(Error::Input(format!("{}: unsupported NIfTI datatype {dt}", path.display())))
        }
    };
    if payload.len() < n * width {
        return Err(Error::Input(format!("{}: truncated NIfTI payload", path.display())));
    }
    let get = |chunk: &[u8]| -> f64 {
        match (h.datatype, swap) {
            (2, _) => f64::from(chunk[0]),
            (4, false) => f64::from(i16::from_le_bytes(chunk.try_into().unwrap())),
            (4, true) => f64::from(i16::from_be_bytes(chunk.try_into().unwrap())),
            (512, false) => f64::from(u16::from_le_bytes(chunk.try_into().unwrap())),
            (512, true) => f64::from(u16::from_be_bytes(chunk.try_into().unwrap())),
            (8, false) => f64::from(i32::from_le_bytes(chunk.try_into().unwrap())),
            (8, true) => f64::from(i32::from_be_bytes(chunk.try_into().unwrap())),
            (16, false) => f64::from(f32::from_le_bytes(chunk.try_into().unwrap())),
            (16, true) => f64::from(f32::from_be_bytes(chunk.try_into().unwrap())),
            (64, false) => f64::from_le_bytes(chunk.try_into().unwrap()),
            (64, true) => f64::from_be_bytes(chunk.try_into().unwrap()),
            _ => unreachable!(),
        }
    };
    let slope = if h.scl_slope == 0.0 { 1.0 } else { f64::from(h.scl_slope) };
    let inter = f64::from(h.scl_inter);
    Ok(payload[..n * width].chunks_exact(width).map(|c| get(c) * slope + inter).collect())
}

/// Import a NIfTI-1 file as an intensity volume.
pub fn load_nifti_scalar(path: impl AsRef<Path>) -> Result<ScalarVolume> {
    let path = path.as_ref();
    let bytes = read_all(path)?;
    let h = parse_header(&bytes, path)?;
    let swap = {
        let le = Raw { bytes: &bytes, swap: false };
        le.i32_at(0) != 348
    };
    let (dims, spacing) = check_geometry(&h, path)?;
    let off = (h.vox_offset as usize).max(HDR_LEN);
    if bytes.len() < off {
        return Err(Error::Input(format!("{}: vox_offset past end of file", path.display())));
    }
    let values = decode_values(&h, &bytes[off..], dims.len(), swap, path)?;
    ScalarVolume::new(dims, spacing, values.iter().map(|&v| v as f32).collect())
}

/// Import a NIfTI-1 file as a label volume. The stored values must be
/// non-negative integers that fit u16; intensity rescaling must be trivial.
pub fn load_nifti_label(path: impl AsRef<Path>) -> Result<LabelVolume> {
    let path = path.as_ref();
    let bytes = read_all(path)?;
    let h = parse_header(&bytes, path)?;
    if !matches!(h.datatype, 2 | 4 | 8 | 512) {
        return Err(Error::Input(format!(
            "{}: label import requires an integer datatype, got {}",
            path.display(),
            h.datatype
        )));
    }
    if (h.scl_slope != 0.0 && h.scl_slope != 1.0) || h.scl_inter != 0.0 {
        return Err(Error::Input(format!(
            "{}: label import requires trivial scl_slope/scl_inter",
            path.display()
        )));
    }
    let swap = {
        let le = Raw { bytes: &bytes, swap: false };
        le.i32_at(0) != 348
    };
    let (dims, spacing) = check_geometry(&h, path)?;
    let off = (h.vox_offset as usize).max(HDR_LEN);
    if bytes.len() < off {
        return Err(Error::Input(format!("{}: vox_offset past end of file", path.display())));
    }
    let values = decode_values(&h, &bytes[off..], dims.len(), swap, path)?;
    let mut data = Vec::with_capacity(values.len());
    for v in values {
        if v < 0.0 || v > f64::from(u16::MAX) || v.fract() != 0.0 {
            return Err(Error::Input(format!("{}: value {v} is not a valid label", path.display())));
        }
        data.push(v as u16);
    }
    LabelVolume::new(dims, spacing, data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use flate2::write::GzEncoder;
    use flate2::Compression;
    use std::io::Write;

    /// Build a minimal single-file NIfTI-1 byte blob.
    fn make_nifti(
        dims: (usize, usize, usize),
        pixdim: (f32, f32, f32),
        datatype: i16,
        payload: Vec<u8>,
        tweak: impl Fn(&mut Vec<u8>),
    ) -> Vec<u8> {
        let mut h = vec![0u8; 352]; // header + 4 extension bytes
        h[0..4].copy_from_slice(&348i32.to_le_bytes());
        let dim: [i16; 8] = [3, dims.0 as i16, dims.1 as i16, dims.2 as i16, 1, 1, 1, 1];
        for (i, d) in dim.iter().enumerate() {
            h[40 + 2 * i..42 + 2 * i].copy_from_slice(&d.to_le_bytes());
        }
        h[70..72].copy_from_slice(&datatype.to_le_bytes());
        let pd: [f32; 8] = [1.0, pixdim.0, pixdim.1, pixdim.2, 0.0, 0.0, 0.0, 0.0];
        for (i, p) in pd.iter().enumerate() {
            h[76 + 4 * i..80 + 4 * i].copy_from_slice(&p.to_le_bytes());
        }
        h[108..112].copy_from_slice(&352.0f32.to_le_bytes()); // vox_offset
        h[344..348].copy_from_slice(b"n+1\0");
        tweak(&mut h);
        h.extend_from_slice(&payload);
        h
    }

    #[test]
    fn imports_float32_volume() {
        let vals: Vec<f32> = (0..8).map(|i| i as f32 * 0.5).collect();
        let payload: Vec<u8> = vals.iter().flat_map(|v| v.to_le_bytes()).collect();
        let blob = make_nifti((2, 2, 2), (0.68, 0.68, 0.8), 16, payload, |_| {});
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.nii");
        std::fs::write(&p, blob).unwrap();
        let vol = load_nifti_scalar(&p).unwrap();
        assert_eq!(vol.dims, Dims::new(2, 2, 2));
        assert!((vol.spacing.dx - 0.68).abs() < 1e-6);
        assert_eq!(vol.data, vals);
    }

    #[test]
    fn applies_slope_and_intercept() {
        let payload: Vec<u8> = [10i16, 20, 30, 40].iter().flat_map(|v| v.to_le_bytes()).collect();
        let blob = make_nifti((4, 1, 1), (1.0, 1.0, 1.0), 4, payload, |h| {
            h[112..116].copy_from_slice(&2.0f32.to_le_bytes()); // scl_slope
            h[116..120].copy_from_slice(&(-5.0f32).to_le_bytes()); // scl_inter
        });
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.nii");
        std::fs::write(&p, blob).unwrap();
        let vol = load_nifti_scalar(&p).unwrap();
        assert_eq!(vol.data, vec![15.0, 35.0, 55.0, 75.0]);
    }

    #[test]
    fn gzip_wrapped_files_are_accepted() {
        let payload: Vec<u8> = vec![1, 2, 3, 4, 5, 6];
        let blob = make_nifti((3, 2, 1), (1.0, 1.0, 1.0), 2, payload, |_| {});
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.nii.gz");
        let mut enc = GzEncoder::new(Vec::new(), Compression::default());
        enc.write_all(&blob).unwrap();
        std::fs::write(&p, enc.finish().unwrap()).unwrap();
        let vol = load_nifti_label(&p).unwrap();
        assert_eq!(vol.data, vec![1, 2, 3, 4, 5, 6]);
    }

    #[test]
    fn rejects_rotated_sform() {
        let payload: Vec<u8> = vec![0u8; 8];
        let blob = make_nifti((2, 2, 2), (1.0, 1.0, 1.0), 2, payload, |h| {
            h[254..256].copy_from_slice(&1i16.to_le_bytes()); // sform_code
            // srow_x with an off-diagonal term
            h[280..284].copy_from_slice(&0.9f32.to_le_bytes());
            h[284..288].copy_from_slice(&0.5f32.to_le_bytes());
        });
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.nii");
        std::fs::write(&p, blob).unwrap();
        assert!(load_nifti_scalar(&p).is_err());
    }

    #[test]
    fn rejects_multi_frame() {
        let payload: Vec<u8> = vec![0u8; 16];
        let mut blob = make_nifti((2, 2, 2), (1.0, 1.0, 1.0), 2, payload, |_| {});
        blob[40..42].copy_from_slice(&4i16.to_le_bytes()); // dim[0] = 4
        blob[48..50].copy_from_slice(&2i16.to_le_bytes()); // dim[4] = 2
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.nii");
        std::fs::write(&p, blob).unwrap();
        assert!(load_nifti_scalar(&p).is_err());
    }

    #[test]
    fn big_endian_header_is_swapped() {
        let vals: [f32; 2] = [1.5, -2.5];
        let payload: Vec<u8> = vals.iter().flat_map(|v| v.to_be_bytes()).collect();
        let mut h = vec![0u8; 352];
        h[0..4].copy_from_slice(&348i32.to_be_bytes());
        let dim: [i16; 8] = [3, 2, 1, 1, 1, 1, 1, 1];
        for (i, d) in dim.iter().enumerate() {
            h[40 + 2 * i..42 + 2 * i].copy_from_slice(&d.to_be_bytes());
        }
        h[70..72].copy_from_slice(&16i16.to_be_bytes());
        let pd: [f32; 8] = [1.0, 2.0, 2.0, 2.0, 0.0, 0.0, 0.0, 0.0];
        for (i, p) in pd.iter().enumerate() {
            h[76 + 4 * i..80 + 4 * i].copy_from_slice(&p.to_be_bytes());
        }
        h[108..112].copy_from_slice(&352.0f32.to_be_bytes());
        h[344..348].copy_from_slice(b"n+1\0");
        h.extend_from_slice(&payload);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.nii");
        std::fs::write(&p, h).unwrap();
        let vol = load_nifti_scalar(&p).unwrap();
        assert_eq!(vol.data, vec![1.5, -2.5]);
        assert_eq!(vol.spacing.dx, 2.0);
    }
}
