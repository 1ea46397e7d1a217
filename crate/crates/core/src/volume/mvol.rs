//! Native volume file format ".mvol".
//!
//! 64-byte little-endian header:
//!   magic "MVOL" | u8 kind (0 scalar-f32, 1 label-u16) | u32 w,h,d |
//!   f64 dx,dy,dz | 23 reserved zero bytes
//! followed by the raw x-fastest payload. Round-trips are bit-exact.

use super::{Dims, LabelVolume, ScalarVolume, Spacing};
use crate::error::{Error, Result};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

const MAGIC: &[u8; 4] = b"MVOL";
const HEADER_LEN: usize = 64;

/// A loaded volume of either kind.
#[derive(Debug, Clone, PartialEq)]
pub enum Mvol {
    Scalar(ScalarVolume),
    Label(LabelVolume),
}

impl Mvol {
    pub fn dims(&self) -> Dims {
        match self {
            Mvol::Scalar(v) => v.dims,
            Mvol::Label(v) => v.dims,
        }
    }

    pub fn spacing(&self) -> Spacing {
        match self {
            Mvol::Scalar(v) => v.spacing,
            Mvol::Label(v) => v.spacing,
        }
    }
}

fn header_bytes(kind: u8, dims: Dims, spacing: Spacing) -> [u8; HEADER_LEN] {
    let mut h = [0u8; HEADER_LEN];
    h[0..4].copy_from_slice(MAGIC);
    h[4] = kind;
    h[5..9].copy_from_slice(&(dims.w as u32).to_le_bytes());
    h[9..13].copy_from_slice(&(dims.h as u32).to_le_bytes());
    h[13..17].copy_from_slice(&(dims.d as u32).to_le_bytes());
    h[17..25].copy_from_slice(&spacing.dx.to_le_bytes());
    h[25..33].copy_from_slice(&spacing.dy.to_le_bytes());
    h[33..41].copy_from_slice(&spacing.dz.to_le_bytes());
    // bytes 41..64 reserved, zero
    h
}

pub fn save_mvol(path: impl AsRef<Path>, vol: &Mvol) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    match vol {
        Mvol::Scalar(v) => {
            w.write_all(&header_bytes(0, v.dims, v.spacing))?;
            for &x in &v.data {
                w.write_all(&x.to_le_bytes())?;
            }
        }
        Mvol::Label(v) => {
            w.write_all(&header_bytes(1, v.dims, v.spacing))?;
            for &x in &v.data {
                w.write_all(&x.to_le_bytes())?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

pub fn load_mvol(path: impl AsRef<Path>) -> Result<Mvol> {
    let path = path.as_ref();
    let mut r = BufReader::new(File::open(path)?);
    let mut h = [0u8; HEADER_LEN];
    r.read_exact(&mut h)
        .map_err(|_| Error::Input(format!("{}: truncated mvol header", path.display())))?;
    if &h[0..4] != MAGIC {
        return Err(Error::Input(format!("{}: bad mvol magic", path.display())));
    }
    let kind = h[4];
    let w = u32::from_le_bytes(h[5..9].try_into().unwrap()) as usize;
    let hh = u32::from_le_bytes(h[9..13].try_into().unwrap()) as usize;
    let d = u32::from_le_bytes(h[13..17].try_into().unwrap()) as usize;
    let dx = f64::from_le_bytes(h[17..25].try_into().unwrap());
    let dy = f64::from_le_bytes(h[25..33].try_into().unwrap());
    let dz = f64::from_le_bytes(h[33..41].try_into().unwrap());
    let dims = Dims::new(w, hh, d);
    let spacing = Spacing::new(dx, dy, dz)?;
    let n = dims.len();
    match kind {
        0 => {
            let mut buf = vec![0u8; n * 4];
            r.read_exact(&mut buf)
                .map_err(|_| Error::Input(format!("{}: truncated scalar payload", path.display())))?;
            let data: Vec<f32> =
                buf.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
            Ok(Mvol::Scalar(ScalarVolume::new(dims, spacing, data)?))
        }
        1 => {
            let mut buf = vec![0u8; n * 2];
            r.read_exact(&mut buf)
                .map_err(|_| Error::Input(format!("{}: truncated label payload", path.display())))?;
            let data: Vec<u16> =
                buf.chunks_exact(2).map(|c| u16::from_le_bytes(c.try_into().unwrap())).collect();
            Ok(Mvol::Label(LabelVolume::new(dims, spacing, data)?))
        }
        k => Err(Error::Input(format!("{}: unknown mvol kind {k}", path.display()))),
    }
}

pub fn load_mvol_scalar(path: impl AsRef<Path>) -> Result<ScalarVolume> {
    match load_mvol(&path)? {
        Mvol::Scalar(v) => Ok(v),
        Mvol::Label(_) => {
            Err(Error::Input(format!("{}: expected a scalar volume", path.as_ref().display())))
        }
    }
}

pub fn load_mvol_label(path: impl AsRef<Path>) -> Result<LabelVolume> {
    match load_mvol(&path)? {
        Mvol::Label(v) => Ok(v),
        Mvol::Scalar(_) => {
            Err(Error::Input(format!("{}: expected a label volume", path.as_ref().display())))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_is_64_bytes() {
        let h = header_bytes(0, Dims::new(1, 2, 3), Spacing::new(0.68, 0.68, 0.8).unwrap());
        assert_eq!(h.len(), 64);
        assert_eq!(&h[41..], &[0u8; 23]);
    }

    #[test]
    fn rejects_bad_magic() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.mvol");
        std::fs::write(&p, b"NOPE").unwrap();
        assert!(load_mvol(&p).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]

        #[test]
        fn scalar_roundtrip_is_bit_exact(
            w in 1usize..6, h in 1usize..6, d in 1usize..6,
            seed in 0u64..1000,
        ) {
            use rand::{Rng, SeedableRng};
            let dims = Dims::new(w, h, d);
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let data: Vec<f32> = (0..dims.len()).map(|_| rng.gen_range(-1e6f32..1e6)).collect();
            let vol = ScalarVolume::new(dims, Spacing::new(0.68, 0.68, 0.8).unwrap(), data).unwrap();
            let dir = tempfile::tempdir().unwrap();
            let p = dir.path().join("v.mvol");
            save_mvol(&p, &Mvol::Scalar(vol.clone())).unwrap();
            let back = load_mvol_scalar(&p).unwrap();
            prop_assert_eq!(back.dims, vol.dims);
            // bit-exact: compare raw bit patterns
            let a: Vec<u32> = vol.data.iter().map(|v| v.to_bits()).collect();
            let b: Vec<u32> = back.data.iter().map(|v| v.to_bits()).collect();
            prop_assert_eq!(a, b);
        }

        #[test]
        fn label_roundtrip_is_bit_exact(
            w in 1usize..6, h in 1usize..6, d in 1usize..6,
            seed in 0u64..1000,
        ) {
            use rand::{Rng, SeedableRng};
            let dims = Dims::new(w, h, d);
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let data: Vec<u16> = (0..dims.len()).map(|_| rng.gen()).collect();
            let vol = LabelVolume::new(dims, Spacing::new(1.0, 2.0, 3.0).unwrap(), data).unwrap();
            let dir = tempfile::tempdir().unwrap();
            let p = dir.path().join("v.mvol");
            save_mvol(&p, &Mvol::Label(vol.clone())).unwrap();
            let back = load_mvol_label(&p).unwrap();
            prop_assert_eq!(back, vol);
        }
    }
}
