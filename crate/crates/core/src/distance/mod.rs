//! Signed distance transforms, trapezoidal attention mapping, mapping
//! parameter calibration and attention fusion.

mod edt;

use crate::error::{Error, Result};
use crate::volume::{Dims, LabelVolume, Spacing};
use rayon::prelude::*;
use std::io::Write;
use std::path::Path;

/// Distance sentinel used when a structure is absent from a volume.
pub const DISTANCE_CAP_MM: f64 = 1.0e6;

/// Per-voxel signed Euclidean distance in mm to a structure: positive
/// outside, strictly negative inside. The grid border is treated as
/// background, so clipped structures keep finite interior distances.
#[derive(Debug, Clone)]
pub struct DistanceMap {
    pub dims: Dims,
    pub spacing: Spacing,
    pub data: Vec<f64>,
    /// Set when the structure had no voxels; data is all +cap then.
    pub empty_structure: bool,
}

/// Per-voxel attention score in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMap {
    pub dims: Dims,
    pub spacing: Spacing,
    pub data: Vec<f32>,
}

impl AttentionMap {
    pub fn zeros(dims: Dims, spacing: Spacing) -> Self {
        AttentionMap { dims, spacing, data: vec![0.0; dims.len()] }
    }
}

/// Trapezoidal mapping parameters in mm.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TrapezoidParams {
    pub d_min: f64,
    pub d_max: f64,
    pub smooth: f64,
}

impl TrapezoidParams {
    pub const DEFAULT_SMOOTH: f64 = 3.0;

    pub fn new(d_min: f64, d_max: f64, smooth: f64) -> Result<Self> {
        if d_min > d_max {
            return Err(Error::Input(format!("trapezoid requires d_min <= d_max, got ({d_min}, {d_max})")));
        }
        if !(smooth > 0.0) {
            return Err(Error::Input(format!("trapezoid smooth border must be > 0, got {smooth}")));
        }
        Ok(TrapezoidParams { d_min, d_max, smooth })
    }

    pub fn with_default_smooth(d_min: f64, d_max: f64) -> Result<Self> {
        Self::new(d_min, d_max, Self::DEFAULT_SMOOTH)
    }

    /// The trapezoid evaluated at a single distance.
    #[inline]
    pub fn eval(&self, d: f64) -> f64 {
        if d >= self.d_min && d <= self.d_max {
            1.0
        } else if d > self.d_max && d < self.d_max + self.smooth {
            (-(d - self.d_max - self.smooth) / self.smooth).clamp(0.0, 1.0)
        } else if d > self.d_min - self.smooth && d < self.d_min {
            ((d - self.d_min + self.smooth) / self.smooth).clamp(0.0, 1.0)
        } else {
            0.0
        }
    }
}

/// One referenced structure: a display name plus its mapping parameters.
/// `params == None` marks a disabled structure contributing zero attention.
#[derive(Debug, Clone, PartialEq)]
pub struct PriorEntry {
    pub name: String,
    pub params: Option<TrapezoidParams>,
}

/// Ordered table of structure priors; entry `i` corresponds to organ label `i + 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct StructurePriors {
    pub entries: Vec<PriorEntry>,
}

impl StructurePriors {
    /// Shipped defaults for the ten referenced structures.
    pub fn default_table() -> Self {
        let rows: [(&str, f64, f64); 10] = [
            ("spleen", 0.0, 16.0),
            ("esophagus", 0.0, 25.0),
            ("stomach", -2.0, 18.0),
            ("aorta", 0.0, 28.0),
            ("pancreas", -5.0, 20.0),
            ("duodenum", -5.0, 22.0),
            ("sma", -1.0, 20.0),
            ("tc_sa", -2.0, 18.0),
            ("lga", 0.0, 21.0),
            ("cha_pha", 0.0, 20.0),
        ];
        StructurePriors {
            entries: rows
                .iter()
                .map(|&(name, lo, hi)| PriorEntry {
                    name: name.to_string(),
                    params: Some(TrapezoidParams::with_default_smooth(lo, hi).unwrap()),
                })
                .collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Flat text table: `name d_min d_max smooth`, one row per structure;
    /// disabled structures carry the word `disabled` instead of numbers.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(f, "# structure d_min_mm d_max_mm smooth_mm")?;
        for e in &self.entries {
            match e.params {
                Some(p) => writeln!(f, "{} {} {} {}", e.name, p.d_min, p.d_max, p.smooth)?,
                None => writeln!(f, "{} disabled", e.name)?,
            }
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(&path)?;
        let mut entries = Vec::new();
        for (ln, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let toks: Vec<&str> = line.split_whitespace().collect();
            let bad = || {
                Error::Input(format!(
                    "{}:{}: malformed prior row '{line}'",
                    path.as_ref().display(),
                    ln + 1
                ))
            };
            match toks.as_slice() {
                [name, "disabled"] => {
                    entries.push(PriorEntry { name: name.to_string(), params: None })
                }
                [name, a, b, c] => {
                    let d_min: f64 = a.parse().map_err(|_| bad())?;
                    let d_max: f64 = b.parse().map_err(|_| bad())?;
                    let smooth: f64 = c.parse().map_err(|_| bad())?;
                    entries.push(PriorEntry {
                        name: name.to_string(),
                        params: Some(TrapezoidParams::new(d_min, d_max, smooth)?),
                    });
                }
                _ => return Err(bad()),
            }
        }
        if entries.is_empty() {
            return Err(Error::Input(format!("{}: empty prior table", path.as_ref().display())));
        }
        Ok(StructurePriors { entries })
    }
}

/// Signed distance transform of one label of a mask. Distances are measured
/// between voxel centers; one virtual background layer beyond the grid keeps
/// clipped structures finite. Structure-free volumes yield an all-cap map
/// with `empty_structure` set.
pub fn signed_distance_transform(mask: &LabelVolume, label: u16, spacing: Spacing) -> Result<DistanceMap> {
    if label == 0 {
        return Err(Error::Input("label 0 is background, not a structure".into()));
    }
    let dims = mask.dims;
    let fg: Vec<bool> = mask.data.iter().map(|&v| v == label).collect();
    let n_fg = fg.iter().filter(|&&b| b).count();
    if n_fg == 0 {
        return Ok(DistanceMap {
            dims,
            spacing,
            data: vec![DISTANCE_CAP_MM; dims.len()],
            empty_structure: true,
        });
    }
    let sp = (spacing.dx, spacing.dy, spacing.dz);

    // outside: distance to the nearest structure voxel
    let sq_out = edt::squared_edt(&fg, dims, sp);

    // inside: distance to the nearest background voxel, padded grid so the
    // volume border counts as background
    let padded = Dims::new(dims.w + 2, dims.h + 2, dims.d + 2);
    let mut bg_sites = vec![true; padded.len()];
    for z in 0..dims.d {
        for y in 0..dims.h {
            for x in 0..dims.w {
                if fg[dims.index(x, y, z)] {
                    bg_sites[padded.index(x + 1, y + 1, z + 1)] = false;
                }
            }
        }
    }
    let sq_in = edt::squared_edt(&bg_sites, padded, sp);

    let mut data = vec![0f64; dims.len()];
    for z in 0..dims.d {
        for y in 0..dims.h {
            for x in 0..dims.w {
                let i = dims.index(x, y, z);
                data[i] = if fg[i] {
                    -sq_in[padded.index(x + 1, y + 1, z + 1)].sqrt().min(DISTANCE_CAP_MM)
                } else {
                    sq_out[i].sqrt().min(DISTANCE_CAP_MM)
                };
            }
        }
    }
    Ok(DistanceMap { dims, spacing, data, empty_structure: false })
}

/// Apply the trapezoidal mapping element-wise.
pub fn trapezoid_map(dmap: &DistanceMap, p: &TrapezoidParams) -> AttentionMap {
    let data = dmap.data.iter().map(|&d| p.eval(d) as f32).collect();
    AttentionMap { dims: dmap.dims, spacing: dmap.spacing, data }
}

/// One case worth of calibration input: the GT LN mask plus the distance
/// maps of every referenced structure on the same grid.
pub struct CalibrationCase<'a> {
    pub ln_mask: &'a LabelVolume,
    pub dmaps: &'a [DistanceMap],
}

/// Derive per-structure mapping parameters by assigning every GT LN voxel to
/// its closest structure and taking the min/max assigned distances.
/// Structures with no assigned voxels come back disabled.
pub fn calibrate_params(cases: &[CalibrationCase<'_>], names: &[String]) -> Result<StructurePriors> {
    let k = names.len();
    let mut lo = vec![f64::INFINITY; k];
    let mut hi = vec![f64::NEG_INFINITY; k];
    let mut any = false;
    for case in cases {
        if case.dmaps.len() != k {
            return Err(Error::Input(format!(
                "calibration case has {} distance maps, expected {k}",
                case.dmaps.len()
            )));
        }
        let dims = case.ln_mask.dims;
        for dm in case.dmaps {
            if dm.dims != dims {
                return Err(Error::Input("calibration distance map dims mismatch".into()));
            }
        }
        for idx in 0..dims.len() {
            if case.ln_mask.data[idx] == 0 {
                continue;
            }
            any = true;
            let mut best = 0usize;
            let mut best_d = case.dmaps[0].data[idx];
            for (i, dm) in case.dmaps.iter().enumerate().skip(1) {
                let d = dm.data[idx];
                if d < best_d {
                    best_d = d;
                    best = i;
                }
            }
            lo[best] = lo[best].min(best_d);
            hi[best] = hi[best].max(best_d);
        }
    }
    if !any {
        return Err(Error::Degenerate("calibration requires at least one GT LN voxel".into()));
    }
    let entries = names
        .iter()
        .enumerate()
        .map(|(i, name)| {
            let params = if lo[i].is_finite() {
                Some(TrapezoidParams::with_default_smooth(lo[i], hi[i]).unwrap())
            } else {
                None
            };
            PriorEntry { name: name.clone(), params }
        })
        .collect();
    Ok(StructurePriors { entries })
}

/// Fuse per-structure attention maps: element-wise maximum outside all
/// structures, the owning structure's own score inside one.
pub fn fuse_attention(maps: &[AttentionMap], organ_mask: &LabelVolume) -> Result<AttentionMap> {
    if maps.is_empty() {
        return Err(Error::Input("fusion requires at least one attention map".into()));
    }
    let dims = organ_mask.dims;
    for m in maps {
        if m.dims != dims {
            return Err(Error::Input("attention map dims do not match the organ mask".into()));
        }
    }
    let mut data = vec![0f32; dims.len()];
    for idx in 0..dims.len() {
        let m = organ_mask.data[idx] as usize;
        data[idx] = if m == 0 {
            let mut best = 0f32;
            for map in maps {
                best = best.max(map.data[idx]);
            }
            best
        } else {
            if m > maps.len() {
                return Err(Error::Input(format!(
                    "organ label {m} has no attention map (have {})",
                    maps.len()
                )));
            }
            maps[m - 1].data[idx]
        };
    }
    Ok(AttentionMap { dims, spacing: organ_mask.spacing, data })
}

/// Block-max pooling with integer factors per axis.
pub fn downsample_attention(a: &AttentionMap, factors: (usize, usize, usize)) -> Result<AttentionMap> {
    let (fx, fy, fz) = factors;
    if fx == 0 || fy == 0 || fz == 0 {
        return Err(Error::Input("downsample factors must be >= 1".into()));
    }
    let od = Dims::new(a.dims.w.div_ceil(fx), a.dims.h.div_ceil(fy), a.dims.d.div_ceil(fz));
    let spacing = Spacing::new(
        a.spacing.dx * fx as f64,
        a.spacing.dy * fy as f64,
        a.spacing.dz * fz as f64,
    )?;
    let mut data = vec![0f32; od.len()];
    for z in 0..od.d {
        for y in 0..od.h {
            for x in 0..od.w {
                let mut m = 0f32;
                for sz in z * fz..((z + 1) * fz).min(a.dims.d) {
                    for sy in y * fy..((y + 1) * fy).min(a.dims.h) {
                        for sx in x * fx..((x + 1) * fx).min(a.dims.w) {
                            m = m.max(a.data[a.dims.index(sx, sy, sz)]);
                        }
                    }
                }
                data[od.index(x, y, z)] = m;
            }
        }
    }
    Ok(AttentionMap { dims: od, spacing, data })
}

/// Full attention pipeline for one case: per-structure SDTs, trapezoid
/// mapping (zero map for disabled structures), then fusion. Per-structure
/// maps are computed in parallel; fusion applies them in label order.
pub fn build_attention(organ_mask: &LabelVolume, priors: &StructurePriors) -> Result<AttentionMap> {
    let max_label = organ_mask.data.iter().copied().max().unwrap_or(0) as usize;
    if max_label > priors.len() {
        return Err(Error::Input(format!(
            "organ mask label {max_label} exceeds the {} structures in the prior table",
            priors.len()
        )));
    }
    let maps: Vec<AttentionMap> = priors
        .entries
        .par_iter()
        .enumerate()
        .map(|(i, e)| -> Result<AttentionMap> {
            match e.params {
                Some(p) => {
                    let dm = signed_distance_transform(organ_mask, (i + 1) as u16, organ_mask.spacing)?;
                    Ok(trapezoid_map(&dm, &p))
                }
                None => Ok(AttentionMap::zeros(organ_mask.dims, organ_mask.spacing)),
            }
        })
        .collect::<Result<Vec<_>>>()?;
    fuse_attention(&maps, organ_mask)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn sp1() -> Spacing {
        Spacing::isotropic(1.0).unwrap()
    }

    fn mask_from(dims: Dims, fg: &[(usize, usize, usize)]) -> LabelVolume {
        let mut m = LabelVolume::filled(dims, sp1(), 0);
        for &(x, y, z) in fg {
            m.data[dims.index(x, y, z)] = 1;
        }
        m
    }

    /// Brute-force oracle: per voxel, scan every opposite-class voxel center,
    /// including one virtual background layer beyond the grid for inside
    /// distances.
    fn sdt_oracle(mask: &LabelVolume, label: u16, spacing: Spacing) -> Vec<f64> {
        let dims = mask.dims;
        let fg: Vec<(i64, i64, i64)> = (0..dims.len())
            .filter(|&i| mask.data[i] == label)
            .map(|i| {
                let (x, y, z) = dims.coords(i);
                (x as i64, y as i64, z as i64)
            })
            .collect();
        let mut bg: Vec<(i64, i64, i64)> = (0..dims.len())
            .filter(|&i| mask.data[i] != label)
            .map(|i| {
                let (x, y, z) = dims.coords(i);
                (x as i64, y as i64, z as i64)
            })
            .collect();
        // virtual shell
        for z in -1..=dims.d as i64 {
            for y in -1..=dims.h as i64 {
                for x in -1..=dims.w as i64 {
                    if x == -1 || y == -1 || z == -1 || x == dims.w as i64 || y == dims.h as i64 || z == dims.d as i64 {
                        bg.push((x, y, z));
                    }
                }
            }
        }
        let d2 = |a: (i64, i64, i64), b: (i64, i64, i64)| -> f64 {
            let dx = (a.0 - b.0) as f64 * spacing.dx;
            let dy = (a.1 - b.1) as f64 * spacing.dy;
            let dz = (a.2 - b.2) as f64 * spacing.dz;
            dx * dx + dy * dy + dz * dz
        };
        (0..dims.len())
            .map(|i| {
                let (x, y, z) = dims.coords(i);
                let p = (x as i64, y as i64, z as i64);
                if mask.data[i] == label {
                    -bg.iter().map(|&b| d2(p, b)).fold(f64::INFINITY, f64::min).sqrt()
                } else {
                    fg.iter().map(|&f| d2(p, f)).fold(f64::INFINITY, f64::min).sqrt()
                }
            })
            .collect()
    }

    #[test]
    fn single_voxel_distances() {
        let dims = Dims::new(3, 3, 3);
        let mask = mask_from(dims, &[(1, 1, 1)]);
        let dm = signed_distance_transform(&mask, 1, sp1()).unwrap();
        assert!((dm.data[dims.index(0, 1, 1)] - 1.0).abs() < 1e-12);
        assert!((dm.data[dims.index(0, 0, 0)] - 3f64.sqrt()).abs() < 1e-12);
        // the lone foreground voxel is adjacent to background on all sides
        assert!((dm.data[dims.index(1, 1, 1)] + 1.0).abs() < 1e-12);
    }

    #[test]
    fn clipped_structure_uses_virtual_border() {
        let dims = Dims::new(3, 3, 3);
        let mask = LabelVolume::filled(dims, sp1(), 1);
        let dm = signed_distance_transform(&mask, 1, sp1()).unwrap();
        // face-center voxels sit one step from the virtual background layer
        assert!((dm.data[dims.index(1, 1, 0)] + 1.0).abs() < 1e-12);
        // the grid center is two steps from it
        assert!((dm.data[dims.index(1, 1, 1)] + 2.0).abs() < 1e-12);
        assert!(dm.data.iter().all(|&d| d < 0.0));
    }

    #[test]
    fn empty_structure_flags_and_caps() {
        let dims = Dims::new(4, 4, 4);
        let mask = LabelVolume::filled(dims, sp1(), 0);
        let dm = signed_distance_transform(&mask, 3, sp1()).unwrap();
        assert!(dm.empty_structure);
        assert!(dm.data.iter().all(|&d| d == DISTANCE_CAP_MM));
    }

    #[test]
    fn random_masks_match_pairwise_oracle() {
        let spacing = Spacing::new(0.68, 0.68, 0.80).unwrap();
        for seed in 0..3u64 {
            let dims = Dims::new(16, 16, 16);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut mask = LabelVolume::filled(dims, spacing, 0);
            for v in mask.data.iter_mut() {
                *v = u16::from(rng.gen_bool(0.05));
            }
            if mask.count_label(1) == 0 {
                mask.data[0] = 1;
            }
            let dm = signed_distance_transform(&mask, 1, spacing).unwrap();
            let oracle = sdt_oracle(&mask, 1, spacing);
            for i in 0..dims.len() {
                assert!(
                    (dm.data[i] - oracle[i]).abs() < 1e-6,
                    "voxel {i}: got {} expected {}",
                    dm.data[i],
                    oracle[i]
                );
            }
        }
    }

    #[test]
    fn sign_flips_across_structure_boundary() {
        let dims = Dims::new(8, 8, 8);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut mask = LabelVolume::filled(dims, sp1(), 0);
        for v in mask.data.iter_mut() {
            *v = u16::from(rng.gen_bool(0.3));
        }
        mask.data[7] = 1;
        let dm = signed_distance_transform(&mask, 1, sp1()).unwrap();
        for i in 0..dims.len() {
            if mask.data[i] == 1 {
                assert!(dm.data[i] < 0.0);
            } else {
                assert!(dm.data[i] > 0.0);
            }
        }
    }

    #[test]
    fn trapezoid_anchor_values() {
        let p = TrapezoidParams::with_default_smooth(0.0, 16.0).unwrap();
        assert_eq!(p.eval(8.0), 1.0);
        assert!((p.eval(17.5) - 0.5).abs() < 1e-12);
        assert_eq!(p.eval(19.01), 0.0);
        assert_eq!(p.eval(-3.01), 0.0);
        assert_eq!(p.eval(0.0), 1.0);
        assert_eq!(p.eval(16.0), 1.0);
        // boundary of the support is zero from both sides
        assert_eq!(p.eval(19.0), 0.0);
        assert_eq!(p.eval(-3.0), 0.0);
    }

    #[test]
    fn trapezoid_is_piecewise_linear_with_bounded_slope() {
        let p = TrapezoidParams::new(-2.0, 5.0, 3.0).unwrap();
        let mut d = -7.0;
        while d < 10.0 {
            let f0 = p.eval(d);
            let f1 = p.eval(d + 1e-4);
            assert!((0.0..=1.0).contains(&f0));
            assert!(((f1 - f0) / 1e-4).abs() <= 1.0 / 3.0 + 1e-6);
            d += 1e-2;
        }
    }

    #[test]
    fn calibration_single_voxel_case() {
        let dims = Dims::new(5, 5, 5);
        let ln = mask_from(dims, &[(2, 2, 2)]);
        let da = DistanceMap { dims, spacing: sp1(), data: vec![5.0; dims.len()], empty_structure: false };
        let db = DistanceMap { dims, spacing: sp1(), data: vec![9.0; dims.len()], empty_structure: false };
        let names = vec!["a".to_string(), "b".to_string()];
        let cal = calibrate_params(&[CalibrationCase { ln_mask: &ln, dmaps: &[da, db] }], &names).unwrap();
        let pa = cal.entries[0].params.unwrap();
        assert_eq!((pa.d_min, pa.d_max), (5.0, 5.0));
        assert!(cal.entries[1].params.is_none());
    }

    #[test]
    fn calibration_rejects_no_ln_voxels() {
        let dims = Dims::new(3, 3, 3);
        let ln = LabelVolume::filled(dims, sp1(), 0);
        let da = DistanceMap { dims, spacing: sp1(), data: vec![1.0; dims.len()], empty_structure: false };
        let names = vec!["a".to_string()];
        assert!(calibrate_params(&[CalibrationCase { ln_mask: &ln, dmaps: &[da] }], &names).is_err());
    }

    #[test]
    fn fusion_max_and_interior_override() {
        let dims = Dims::new(2, 1, 1);
        let mk = |v0: f32, v1: f32| AttentionMap { dims, spacing: sp1(), data: vec![v0, v1] };
        // voxel 0 outside all structures, voxel 1 inside structure 3
        let mut organ = LabelVolume::filled(dims, sp1(), 0);
        organ.data[1] = 3;
        let maps = vec![mk(0.2, 0.9), mk(0.7, 0.6), mk(0.0, 0.4)];
        let fused = fuse_attention(&maps, &organ).unwrap();
        assert_eq!(fused.data[0], 0.7);
        assert_eq!(fused.data[1], 0.4);
    }

    #[test]
    fn fusion_of_all_zero_maps_is_zero() {
        let dims = Dims::new(3, 3, 3);
        let organ = LabelVolume::filled(dims, sp1(), 0);
        let maps = vec![AttentionMap::zeros(dims, sp1()); 4];
        let fused = fuse_attention(&maps, &organ).unwrap();
        assert!(fused.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn fusion_rejects_dim_mismatch() {
        let organ = LabelVolume::filled(Dims::new(2, 2, 2), sp1(), 0);
        let maps = vec![AttentionMap::zeros(Dims::new(3, 2, 2), sp1())];
        assert!(fuse_attention(&maps, &organ).is_err());
    }

    #[test]
    fn fusion_is_monotone_outside_structures() {
        let dims = Dims::new(4, 4, 4);
        let organ = LabelVolume::filled(dims, sp1(), 0);
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let base: Vec<f32> = (0..dims.len()).map(|_| rng.gen_range(0.0..1.0)).collect();
        let other: Vec<f32> = (0..dims.len()).map(|_| rng.gen_range(0.0..1.0)).collect();
        let m1 = AttentionMap { dims, spacing: sp1(), data: base.clone() };
        let m2 = AttentionMap { dims, spacing: sp1(), data: other };
        let fused = fuse_attention(&[m1.clone(), m2.clone()], &organ).unwrap();
        let mut raised = m1.clone();
        raised.data[10] = (raised.data[10] + 0.5).min(1.0);
        let fused2 = fuse_attention(&[raised, m2], &organ).unwrap();
        for i in 0..dims.len() {
            assert!(fused2.data[i] >= fused.data[i]);
        }
    }

    #[test]
    fn downsample_factor_one_is_identity() {
        let dims = Dims::new(4, 3, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let data: Vec<f32> = (0..dims.len()).map(|_| rng.gen_range(0.0..1.0)).collect();
        let a = AttentionMap { dims, spacing: sp1(), data };
        let out = downsample_attention(&a, (1, 1, 1)).unwrap();
        assert_eq!(out.data, a.data);
    }

    #[test]
    fn downsample_propagates_single_one() {
        let dims = Dims::new(4, 4, 4);
        let mut a = AttentionMap::zeros(dims, sp1());
        a.data[dims.index(3, 2, 1)] = 1.0;
        let out = downsample_attention(&a, (2, 2, 2)).unwrap();
        assert_eq!(out.dims, Dims::new(2, 2, 2));
        assert_eq!(out.data[out.dims.index(1, 1, 0)], 1.0);
        assert_eq!(out.data.iter().filter(|&&v| v == 1.0).count(), 1);
    }

    #[test]
    fn downsample_matches_block_scan_oracle() {
        let dims = Dims::new(7, 5, 6);
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let data: Vec<f32> = (0..dims.len()).map(|_| rng.gen_range(0.0..1.0)).collect();
        let a = AttentionMap { dims, spacing: sp1(), data };
        let f = (2usize, 3usize, 2usize);
        let out = downsample_attention(&a, f).unwrap();
        for z in 0..out.dims.d {
            for y in 0..out.dims.h {
                for x in 0..out.dims.w {
                    let mut m = 0f32;
                    for sz in z * f.2..((z + 1) * f.2).min(dims.d) {
                        for sy in y * f.1..((y + 1) * f.1).min(dims.h) {
                            for sx in x * f.0..((x + 1) * f.0).min(dims.w) {
                                m = m.max(a.data[dims.index(sx, sy, sz)]);
                            }
                        }
                    }
                    assert_eq!(out.data[out.dims.index(x, y, z)], m);
                }
            }
        }
    }

    #[test]
    fn priors_roundtrip_through_text_table() {
        let table = StructurePriors::default_table();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("priors.txt");
        table.save(&p).unwrap();
        let back = StructurePriors::load(&p).unwrap();
        assert_eq!(back, table);
        // spot-check a shipped row
        let pancreas = &back.entries[4];
        assert_eq!(pancreas.name, "pancreas");
        let pp = pancreas.params.unwrap();
        assert_eq!((pp.d_min, pp.d_max, pp.smooth), (-5.0, 20.0, 3.0));
    }

    #[test]
    fn disabled_rows_roundtrip() {
        let table = StructurePriors {
            entries: vec![
                PriorEntry { name: "a".into(), params: Some(TrapezoidParams::new(0.0, 5.0, 3.0).unwrap()) },
                PriorEntry { name: "b".into(), params: None },
            ],
        };
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("priors.txt");
        table.save(&p).unwrap();
        assert_eq!(StructurePriors::load(&p).unwrap(), table);
    }

    #[test]
    fn calibrated_voxels_reach_attention_one_after_fusion() {
        // random organ blobs + random LN voxels near them; calibrate, fuse,
        // and every LN voxel must score exactly 1
        let dims = Dims::new(20, 20, 20);
        let spacing = Spacing::new(0.68, 0.68, 0.8).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let mut organ = LabelVolume::filled(dims, spacing, 0);
        for label in 1..=3u16 {
            let cx = rng.gen_range(3..17) as i64;
            let cy = rng.gen_range(3..17) as i64;
            let cz = rng.gen_range(3..17) as i64;
            for z in 0..dims.d {
                for y in 0..dims.h {
                    for x in 0..dims.w {
                        let dd = (x as i64 - cx).pow(2) + (y as i64 - cy).pow(2) + (z as i64 - cz).pow(2);
                        if dd <= 4 {
                            organ.data[dims.index(x, y, z)] = label;
                        }
                    }
                }
            }
        }
        let mut ln = LabelVolume::filled(dims, spacing, 0);
        for _ in 0..40 {
            let i = rng.gen_range(0..dims.len());
            if organ.data[i] == 0 {
                ln.data[i] = 1;
            }
        }
        if ln.count_label(1) == 0 {
            ln.data[0] = 1;
        }
        let names: Vec<String> = (1..=3).map(|i| format!("s{i}")).collect();
        let dmaps: Vec<DistanceMap> =
            (1..=3u16).map(|l| signed_distance_transform(&organ, l, spacing).unwrap()).collect();
        let cal = calibrate_params(&[CalibrationCase { ln_mask: &ln, dmaps: &dmaps }], &names).unwrap();
        let maps: Vec<AttentionMap> = cal
            .entries
            .iter()
            .enumerate()
            .map(|(i, e)| match e.params {
                Some(p) => trapezoid_map(&dmaps[i], &p),
                None => AttentionMap::zeros(dims, spacing),
            })
            .collect();
        let fused = fuse_attention(&maps, &organ).unwrap();
        for i in 0..dims.len() {
            if ln.data[i] == 1 {
                assert_eq!(fused.data[i], 1.0);
            }
        }
    }
}
