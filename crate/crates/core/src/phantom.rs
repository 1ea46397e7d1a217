//! Deterministic synthetic cohort generator.
//!
//! Each case carries an organ/vessel label volume, two intensity channels,
//! a lymph node ground-truth instance volume with per-instance positivity,
//! a tumor mask and a patient-level metastasis label. Lymph nodes are placed
//! within configurable distance bands around structures; far-away decoy
//! blobs share the node intensity profile so that intensity alone cannot
//! separate them. Positive nodes are drawn larger and slightly brighter,
//! and tumor texture correlates with the patient label.

use crate::distance::signed_distance_transform;
use crate::error::{Error, Result};
use crate::volume::{volume_mm3, Dims, LabelVolume, ScalarVolume, Spacing};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::Path;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PhantomConfig {
    pub dims: (usize, usize, usize),
    pub spacing: (f64, f64, f64),
    pub cohort_size: usize,
    /// How many of the ten structure primitives to instantiate.
    pub structure_count: usize,
    pub ln_count_min: usize,
    pub ln_count_max: usize,
    /// Fraction of patients with at least one positive node.
    pub positive_rate: f64,
    /// Median generated volumes in mm^3, before `volume_scale`.
    pub positive_volume_median_mm3: f64,
    pub negative_volume_median_mm3: f64,
    pub volume_sigma: f64,
    /// Shrinks node/decoy volumes for small grids.
    pub volume_scale: f64,
    /// Node centers are placed with this distance band (mm) to the chosen
    /// structure boundary.
    pub placement_band_mm: (f64, f64),
    pub decoy_count_min: usize,
    pub decoy_count_max: usize,
    /// Minimum distance (mm) from any structure for decoy blobs.
    pub decoy_min_distance_mm: f64,
    pub noise_sigma: f64,
    /// Added to both channels of positive nodes.
    pub positive_brightness: f64,
    /// Tumor speckle amplitude added for metastasis-positive patients.
    pub tumor_texture_signal: f64,
    /// Tumor mean intensity shift for metastasis-positive patients.
    pub tumor_mean_signal: f64,
    pub seed: u64,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        PhantomConfig {
            dims: (96, 96, 96),
            spacing: (0.68, 0.68, 0.80),
            cohort_size: 20,
            structure_count: 10,
            ln_count_min: 3,
            ln_count_max: 6,
            positive_rate: 0.47,
            positive_volume_median_mm3: 665.0,
            negative_volume_median_mm3: 300.0,
            volume_sigma: 0.35,
            volume_scale: 1.0,
            placement_band_mm: (0.5, 8.0),
            decoy_count_min: 2,
            decoy_count_max: 4,
            decoy_min_distance_mm: 20.0,
            noise_sigma: 0.02,
            positive_brightness: 0.05,
            tumor_texture_signal: 0.08,
            tumor_mean_signal: 0.03,
            seed: 0,
        }
    }
}

impl PhantomConfig {
    pub fn validate(&self) -> Result<()> {
        Spacing::new(self.spacing.0, self.spacing.1, self.spacing.2)?;
        if self.cohort_size == 0 || self.structure_count == 0 || self.structure_count > 10 {
            return Err(Error::Config("cohort_size >= 1 and 1 <= structure_count <= 10 required".into()));
        }
        if self.ln_count_min == 0 || self.ln_count_min > self.ln_count_max {
            return Err(Error::Config("node count range must satisfy 1 <= min <= max".into()));
        }
        if !(0.0..=1.0).contains(&self.positive_rate) {
            return Err(Error::Config("positive_rate must lie in [0, 1]".into()));
        }
        if self.placement_band_mm.0 > self.placement_band_mm.1 {
            return Err(Error::Config("placement band must be ordered".into()));
        }
        Ok(())
    }

    pub fn spacing_t(&self) -> Spacing {
        Spacing::new(self.spacing.0, self.spacing.1, self.spacing.2).unwrap()
    }

    pub fn dims_t(&self) -> Dims {
        Dims::new(self.dims.0, self.dims.1, self.dims.2)
    }

    /// Hash of the full generator input, for provenance.
    pub fn digest(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        let mut h = Sha256::new();
        h.update(&bytes);
        format!("{:x}", h.finalize())
    }
}

/// One generated patient.
#[derive(Debug, Clone)]
pub struct PhantomCase {
    pub case_id: String,
    pub organs: LabelVolume,
    pub ct_a: ScalarVolume,
    pub ct_v: ScalarVolume,
    /// Node instances labeled 1..k.
    pub ln_gt: LabelVolume,
    /// Positivity per instance, index i corresponds to label i+1.
    pub ln_positive: Vec<bool>,
    pub tumor: LabelVolume,
    pub metastasis: bool,
}

impl PhantomCase {
    /// Binary node mask derived from the instance volume.
    pub fn ln_binary(&self) -> LabelVolume {
        let data = self.ln_gt.data.iter().map(|&v| u16::from(v > 0)).collect();
        LabelVolume { dims: self.ln_gt.dims, spacing: self.ln_gt.spacing, data }
    }
}

enum Shape {
    /// Radii in mm.
    Ellipsoid { center: (f64, f64, f64), radii: (f64, f64, f64) },
    /// Axis 0/1/2, the two cross coordinates, radius in mm, axis span in
    /// voxel fractions.
    Tube { axis: usize, cross: (f64, f64), radius: f64, span: (f64, f64) },
}

/// The ten structure primitives in organ-label order. Centers and spans are
/// fractions of the grid; everything stays left of the decoy zone.
fn structure_templates() -> Vec<(&'static str, Shape)> {
    vec![
        ("spleen", Shape::Ellipsoid { center: (0.14, 0.20, 0.28), radii: (7.5, 7.0, 8.5) }),
        ("esophagus", Shape::Tube { axis: 2, cross: (0.34, 0.13), radius: 2.5, span: (0.05, 0.45) }),
        ("stomach", Shape::Ellipsoid { center: (0.18, 0.52, 0.32), radii: (9.0, 8.0, 8.0) }),
        ("aorta", Shape::Tube { axis: 2, cross: (0.45, 0.34), radius: 4.0, span: (0.0, 1.0) }),
        ("pancreas", Shape::Ellipsoid { center: (0.30, 0.66, 0.56), radii: (12.0, 5.5, 5.5) }),
        ("duodenum", Shape::Tube { axis: 1, cross: (0.50, 0.62), radius: 3.5, span: (0.40, 0.90) }),
        ("sma", Shape::Tube { axis: 2, cross: (0.38, 0.54), radius: 1.8, span: (0.45, 0.95) }),
        ("tc_sa", Shape::Tube { axis: 0, cross: (0.44, 0.40), radius: 1.8, span: (0.05, 0.50) }),
        ("lga", Shape::Tube { axis: 1, cross: (0.24, 0.30), radius: 1.5, span: (0.30, 0.60) }),
        ("cha_pha", Shape::Tube { axis: 0, cross: (0.60, 0.36), radius: 1.7, span: (0.20, 0.52) }),
    ]
}

pub fn structure_names(count: usize) -> Vec<String> {
    structure_templates().iter().take(count).map(|(n, _)| n.to_string()).collect()
}

fn paint_ellipsoid(
    dims: Dims,
    spacing: Spacing,
    center: (f64, f64, f64),
    radii: (f64, f64, f64),
) -> Vec<usize> {
    let mut out = Vec::new();
    let rx = radii.0 / spacing.dx;
    let ry = radii.1 / spacing.dy;
    let rz = radii.2 / spacing.dz;
    let x0 = ((center.0 - rx).floor().max(0.0)) as usize;
    let x1 = ((center.0 + rx).ceil()).min(dims.w as f64 - 1.0) as usize;
    let y0 = ((center.1 - ry).floor().max(0.0)) as usize;
    let y1 = ((center.1 + ry).ceil()).min(dims.h as f64 - 1.0) as usize;
    let z0 = ((center.2 - rz).floor().max(0.0)) as usize;
    let z1 = ((center.2 + rz).ceil()).min(dims.d as f64 - 1.0) as usize;
    for z in z0..=z1 {
        for y in y0..=y1 {
            for x in x0..=x1 {
                let ex = (x as f64 - center.0) / rx;
                let ey = (y as f64 - center.1) / ry;
                let ez = (z as f64 - center.2) / rz;
                if ex * ex + ey * ey + ez * ez <= 1.0 {
                    out.push(dims.index(x, y, z));
                }
            }
        }
    }
    out
}

fn paint_shape(dims: Dims, spacing: Spacing, shape: &Shape, jitter: (f64, f64, f64), rscale: f64) -> Vec<usize> {
    match shape {
        Shape::Ellipsoid { center, radii } => {
            let c = (
                center.0 * dims.w as f64 + jitter.0,
                center.1 * dims.h as f64 + jitter.1,
                center.2 * dims.d as f64 + jitter.2,
            );
            paint_ellipsoid(dims, spacing, c, (radii.0 * rscale, radii.1 * rscale, radii.2 * rscale))
        }
        Shape::Tube { axis, cross, radius, span } => {
            let mut out = Vec::new();
            let (a1, a2) = match axis {
                0 => (1usize, 2usize),
                1 => (0, 2),
                _ => (0, 1),
            };
            let c1 = cross.0 * dims.axis(a1) as f64 + jitter.0;
            let c2 = cross.1 * dims.axis(a2) as f64 + jitter.1;
            let s1 = spacing.axis(a1);
            let s2 = spacing.axis(a2);
            let r = radius * rscale;
            let lo = (span.0 * dims.axis(*axis) as f64) as usize;
            let hi = ((span.1 * dims.axis(*axis) as f64) as usize).min(dims.axis(*axis));
            for t in lo..hi {
                let lo1 = ((c1 - r / s1).floor().max(0.0)) as usize;
                let hi1 = ((c1 + r / s1).ceil()).min(dims.axis(a1) as f64 - 1.0) as usize;
                let lo2 = ((c2 - r / s2).floor().max(0.0)) as usize;
                let hi2 = ((c2 + r / s2).ceil()).min(dims.axis(a2) as f64 - 1.0) as usize;
                for u in lo1..=hi1 {
                    for v in lo2..=hi2 {
                        let du = (u as f64 - c1) * s1;
                        let dv = (v as f64 - c2) * s2;
                        if du * du + dv * dv <= r * r {
                            let (x, y, z) = match axis {
                                0 => (t, u, v),
                                1 => (u, t, v),
                                _ => (u, v, t),
                            };
                            out.push(dims.index(x, y, z));
                        }
                    }
                }
            }
            out
        }
    }
}

/// Sample ellipsoid radii (mm) for a blob of target volume, mildly
/// anisotropic.
fn blob_radii(rng: &mut ChaCha8Rng, volume: f64) -> (f64, f64, f64) {
    let r = (3.0 * volume / (4.0 * std::f64::consts::PI)).cbrt();
    let u1: f64 = rng.gen_range(0.85..1.18);
    let u2: f64 = rng.gen_range(0.85..1.18);
    let u3 = 1.0 / (u1 * u2);
    (r * u1, r * u2, r * u3)
}

struct CaseDraft {
    organs: LabelVolume,
    ln_gt: LabelVolume,
    ln_positive: Vec<bool>,
    ln_brightness: Vec<f64>,
    decoys: Vec<Vec<usize>>,
    tumor: LabelVolume,
    metastasis: bool,
}

fn try_build_case(cfg: &PhantomConfig, rng: &mut ChaCha8Rng) -> Result<CaseDraft> {
    let dims = cfg.dims_t();
    let spacing = cfg.spacing_t();
    let templates = structure_templates();

    // structures, first label wins on overlap
    let mut organs = LabelVolume::filled(dims, spacing, 0);
    for (label, (_, shape)) in templates.iter().take(cfg.structure_count).enumerate() {
        let jitter = (rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0));
        let rscale = rng.gen_range(0.92..1.08);
        for idx in paint_shape(dims, spacing, shape, jitter, rscale) {
            if organs.data[idx] == 0 {
                organs.data[idx] = (label + 1) as u16;
            }
        }
    }

    // tumor sits on the pancreas template when present, first organ otherwise
    let anchor = if cfg.structure_count >= 5 { &templates[4].1 } else { &templates[0].1 };
    let tumor_center = match anchor {
        Shape::Ellipsoid { center, .. } => (
            center.0 * dims.w as f64 + rng.gen_range(-3.0..3.0),
            center.1 * dims.h as f64 + rng.gen_range(-3.0..3.0),
            center.2 * dims.d as f64 + rng.gen_range(-2.0..2.0),
        ),
        Shape::Tube { .. } => (dims.w as f64 * 0.3, dims.h as f64 * 0.5, dims.d as f64 * 0.5),
    };
    let tumor_radii = (rng.gen_range(6.0..10.0), rng.gen_range(5.0..8.0), rng.gen_range(5.0..8.0));
    let mut tumor = LabelVolume::filled(dims, spacing, 0);
    for idx in paint_ellipsoid(dims, spacing, tumor_center, tumor_radii) {
        tumor.data[idx] = 1;
    }
    if tumor.count_label(1) == 0 {
        return Err(Error::Degenerate("tumor fell outside the grid".into()));
    }

    // patient label and node counts
    let metastasis = rng.gen_bool(cfg.positive_rate);
    let ln_count = rng.gen_range(cfg.ln_count_min..=cfg.ln_count_max);
    let n_pos = if metastasis { rng.gen_range(1..=2.min(ln_count)) } else { 0 };

    // occupancy guards node/decoy/tumor overlap
    let mut occupied: Vec<bool> = tumor.data.iter().map(|&v| v > 0).collect();

    // lazy per-structure distance maps for placement
    let mut dmaps: Vec<Option<Vec<f64>>> = vec![None; cfg.structure_count];
    let mut ln_gt = LabelVolume::filled(dims, spacing, 0);
    let mut ln_positive = Vec::new();
    let mut ln_brightness = Vec::new();
    let decoy_zone_x = (0.80 * dims.w as f64) as usize;

    for inst in 0..ln_count {
        let positive = inst < n_pos;
        let median = if positive {
            cfg.positive_volume_median_mm3
        } else {
            cfg.negative_volume_median_mm3
        } * cfg.volume_scale;
        let mut placed = false;
        for _attempt in 0..200 {
            let s = rng.gen_range(0..cfg.structure_count);
            if dmaps[s].is_none() {
                let dm = signed_distance_transform(&organs, (s + 1) as u16, spacing)?;
                if dm.empty_structure {
                    dmaps[s] = Some(Vec::new());
                } else {
                    dmaps[s] = Some(dm.data);
                }
            }
            let dm = dmaps[s].as_ref().unwrap();
            if dm.is_empty() {
                continue;
            }
            let volume = median * (Normal::new(0.0, cfg.volume_sigma).unwrap().sample(rng) as f64).exp();
            let radii = blob_radii(rng, volume);
            let max_r_vox = (radii.0 / spacing.dx).max(radii.1 / spacing.dy).max(radii.2 / spacing.dz);
            let margin = max_r_vox.ceil() as usize + 1;
            if 2 * margin + 2 >= dims.w.min(dims.h).min(dims.d) {
                continue; // blob too large for this grid
            }
            // candidate centers: inside the band, outside the decoy zone,
            // blob fully inside the grid
            let mut candidates = Vec::new();
            for z in margin..dims.d - margin {
                for y in margin..dims.h - margin {
                    for x in margin..(decoy_zone_x.saturating_sub(margin)).min(dims.w - margin) {
                        let idx = dims.index(x, y, z);
                        let d = dm[idx];
                        if d >= cfg.placement_band_mm.0 && d <= cfg.placement_band_mm.1 {
                            candidates.push(idx);
                        }
                    }
                }
            }
            if candidates.is_empty() {
                continue;
            }
            let center_idx = candidates[rng.gen_range(0..candidates.len())];
            let (cx, cy, cz) = dims.coords(center_idx);
            let voxels =
                paint_ellipsoid(dims, spacing, (cx as f64, cy as f64, cz as f64), radii);
            if voxels.is_empty() || voxels.iter().any(|&i| occupied[i]) {
                continue;
            }
            let label = (ln_positive.len() + 1) as u16;
            for &i in &voxels {
                occupied[i] = true;
                ln_gt.data[i] = label;
            }
            ln_positive.push(positive);
            ln_brightness.push(if positive { cfg.positive_brightness } else { 0.0 });
            placed = true;
            break;
        }
        if !placed {
            return Err(Error::Degenerate("node placement exhausted retries".into()));
        }
    }

    // decoys: node-like blobs far from every structure
    let union_mask = {
        let data = organs.data.iter().map(|&v| u16::from(v > 0)).collect();
        LabelVolume { dims, spacing, data }
    };
    let union_dm = signed_distance_transform(&union_mask, 1, spacing)?;
    let n_decoys = rng.gen_range(cfg.decoy_count_min..=cfg.decoy_count_max);
    let mut decoys = Vec::new();
    for _ in 0..n_decoys {
        let mut placed = false;
        for _attempt in 0..200 {
            let volume = cfg.negative_volume_median_mm3
                * cfg.volume_scale
                * (Normal::new(0.0, cfg.volume_sigma).unwrap().sample(rng) as f64).exp();
            let radii = blob_radii(rng, volume);
            let max_r_vox = (radii.0 / spacing.dx).max(radii.1 / spacing.dy).max(radii.2 / spacing.dz);
            let max_r_mm = radii.0.max(radii.1).max(radii.2);
            let margin = max_r_vox.ceil() as usize + 1;
            if decoy_zone_x + margin >= dims.w - margin {
                continue;
            }
            let cx = rng.gen_range(decoy_zone_x + margin..dims.w - margin);
            let cy = rng.gen_range(margin..dims.h - margin);
            let cz = rng.gen_range(margin..dims.d - margin);
            let center_idx = dims.index(cx, cy, cz);
            if union_dm.data[center_idx] - max_r_mm < cfg.decoy_min_distance_mm {
                continue;
            }
            let voxels = paint_ellipsoid(dims, spacing, (cx as f64, cy as f64, cz as f64), radii);
            if voxels.is_empty() || voxels.iter().any(|&i| occupied[i]) {
                continue;
            }
            for &i in &voxels {
                occupied[i] = true;
            }
            decoys.push(voxels);
            placed = true;
            break;
        }
        if !placed {
            return Err(Error::Degenerate("decoy placement exhausted retries".into()));
        }
    }

    Ok(CaseDraft { organs, ln_gt, ln_positive, ln_brightness, decoys, tumor, metastasis })
}

fn render_intensities(cfg: &PhantomConfig, draft: &CaseDraft, rng: &mut ChaCha8Rng) -> (ScalarVolume, ScalarVolume) {
    let dims = draft.organs.dims;
    let spacing = draft.organs.spacing;
    let n = dims.len();
    // per-label base intensities (arterial, venous); tubes are vessel-bright
    let organ_base: [(f64, f64); 10] = [
        (0.45, 0.50), // spleen
        (0.40, 0.42), // esophagus
        (0.42, 0.46), // stomach
        (0.85, 0.75), // aorta
        (0.55, 0.60), // pancreas
        (0.44, 0.46), // duodenum
        (0.85, 0.75), // sma
        (0.85, 0.75), // tc_sa
        (0.83, 0.74), // lga
        (0.84, 0.74), // cha_pha
    ];
    let mut a = vec![0f32; n];
    let mut v = vec![0f32; n];
    for i in 0..n {
        let (mut ia, mut iv) = (0.20f64, 0.20f64);
        let o = draft.organs.data[i] as usize;
        if o > 0 {
            let (ba, bv) = organ_base[o - 1];
            ia = ba;
            iv = bv;
        }
        a[i] = ia as f32;
        v[i] = iv as f32;
    }
    // tumor: hypodense with label-dependent texture
    let speckle_amp = 0.02
        + if draft.metastasis { cfg.tumor_texture_signal } else { 0.0 };
    let tumor_mean = 0.32 - if draft.metastasis { cfg.tumor_mean_signal } else { 0.0 };
    let normal = Normal::new(0.0, 1.0).unwrap();
    for i in 0..n {
        if draft.tumor.data[i] > 0 {
            let sp = speckle_amp * normal.sample(rng);
            a[i] = (tumor_mean + sp) as f32;
            v[i] = (tumor_mean + 0.04 + sp) as f32;
        }
    }
    // nodes and decoys share a vessel-like profile
    for i in 0..n {
        let l = draft.ln_gt.data[i] as usize;
        if l > 0 {
            let boost = draft.ln_brightness[l - 1];
            a[i] = (0.80 + boost) as f32;
            v[i] = (0.72 + boost) as f32;
        }
    }
    for blob in &draft.decoys {
        for &i in blob {
            a[i] = 0.80;
            v[i] = 0.72;
        }
    }
    // additive noise, drawn per channel
    for x in a.iter_mut() {
        *x += (cfg.noise_sigma * normal.sample(rng)) as f32;
    }
    for x in v.iter_mut() {
        *x += (cfg.noise_sigma * normal.sample(rng)) as f32;
    }
    (
        ScalarVolume { dims, spacing, data: a },
        ScalarVolume { dims, spacing, data: v },
    )
}

/// Generate one case. Deterministic in (cfg, case index); placement
/// failures retry with fresh sub-seeds a bounded number of times.
pub fn generate_case(cfg: &PhantomConfig, case_index: usize) -> Result<PhantomCase> {
    cfg.validate()?;
    for regen in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(1 + case_index as u64 + regen * 0x1000_0000);
        match try_build_case(cfg, &mut rng) {
            Ok(draft) => {
                let (ct_a, ct_v) = render_intensities(cfg, &draft, &mut rng);
                let metastasis = draft.ln_positive.iter().any(|&p| p);
                debug_assert_eq!(metastasis, draft.metastasis && !draft.ln_positive.is_empty());
                return Ok(PhantomCase {
                    case_id: format!("case_{case_index:04}"),
                    organs: draft.organs,
                    ct_a,
                    ct_v,
                    ln_gt: draft.ln_gt,
                    ln_positive: draft.ln_positive,
                    tumor: draft.tumor,
                    metastasis,
                });
            }
            Err(Error::Degenerate(_)) => continue,
            Err(e) => return Err(e),
        }
    }
    Err(Error::Degenerate(format!("case {case_index} could not be placed after 20 regenerations")))
}

/// Generate the whole cohort in memory.
pub fn generate_cohort(cfg: &PhantomConfig) -> Result<Vec<PhantomCase>> {
    (0..cfg.cohort_size).map(|i| generate_case(cfg, i)).collect()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestInstance {
    pub id: u16,
    pub positive: bool,
    pub volume_mm3: f64,
    pub centroid: (f64, f64, f64),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestCase {
    pub case_id: String,
    pub metastasis: bool,
    pub instances: Vec<ManifestInstance>,
    pub files: std::collections::BTreeMap<String, String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CohortManifest {
    pub generator_digest: String,
    pub dims: (usize, usize, usize),
    pub spacing: (f64, f64, f64),
    pub cases: Vec<ManifestCase>,
}

/// Build the manifest entry for one case.
pub fn manifest_case(case: &PhantomCase, root: &str) -> ManifestCase {
    let dims = case.ln_gt.dims;
    let spacing = case.ln_gt.spacing;
    let k = case.ln_positive.len();
    let mut counts = vec![0usize; k];
    let mut sums = vec![(0f64, 0f64, 0f64); k];
    for (idx, &l) in case.ln_gt.data.iter().enumerate() {
        if l > 0 {
            let (x, y, z) = dims.coords(idx);
            let e = l as usize - 1;
            counts[e] += 1;
            sums[e].0 += x as f64;
            sums[e].1 += y as f64;
            sums[e].2 += z as f64;
        }
    }
    let instances = (0..k)
        .map(|i| ManifestInstance {
            id: (i + 1) as u16,
            positive: case.ln_positive[i],
            volume_mm3: volume_mm3(counts[i], spacing).unwrap_or(0.0),
            centroid: if counts[i] > 0 {
                (
                    sums[i].0 / counts[i] as f64,
                    sums[i].1 / counts[i] as f64,
                    sums[i].2 / counts[i] as f64,
                )
            } else {
                (0.0, 0.0, 0.0)
            },
        })
        .collect();
    let files = ["organs", "ct_a", "ct_v", "ln_gt", "tumor"]
        .iter()
        .map(|name| (name.to_string(), format!("{root}/{}/{name}.mvol", case.case_id)))
        .collect();
    ManifestCase { case_id: case.case_id.clone(), metastasis: case.metastasis, instances, files }
}

/// Assemble the cohort manifest.
pub fn cohort_manifest(cfg: &PhantomConfig, cases: &[PhantomCase], root: &str) -> CohortManifest {
    CohortManifest {
        generator_digest: cfg.digest(),
        dims: cfg.dims,
        spacing: cfg.spacing,
        cases: cases.iter().map(|c| manifest_case(c, root)).collect(),
    }
}

/// Write one case to `<dir>/<case_id>/*.mvol`.
pub fn write_case(case: &PhantomCase, dir: &Path) -> Result<()> {
    use crate::volume::{save_mvol, Mvol};
    let case_dir = dir.join(&case.case_id);
    std::fs::create_dir_all(&case_dir)?;
    save_mvol(case_dir.join("organs.mvol"), &Mvol::Label(case.organs.clone()))?;
    save_mvol(case_dir.join("ct_a.mvol"), &Mvol::Scalar(case.ct_a.clone()))?;
    save_mvol(case_dir.join("ct_v.mvol"), &Mvol::Scalar(case.ct_v.clone()))?;
    save_mvol(case_dir.join("ln_gt.mvol"), &Mvol::Label(case.ln_gt.clone()))?;
    save_mvol(case_dir.join("tumor.mvol"), &Mvol::Label(case.tumor.clone()))?;
    Ok(())
}

/// Load a case previously written by `write_case`, instance positivity
/// taken from the manifest entry.
pub fn load_case(dir: &Path, entry: &ManifestCase) -> Result<PhantomCase> {
    use crate::volume::{load_mvol_label, load_mvol_scalar};
    let case_dir = dir.join(&entry.case_id);
    let ln_gt = load_mvol_label(case_dir.join("ln_gt.mvol"))?;
    let mut ln_positive = vec![false; entry.instances.len()];
    for inst in &entry.instances {
        if inst.id as usize > ln_positive.len() {
            return Err(Error::Input(format!(
                "{}: manifest instance id {} out of range",
                entry.case_id, inst.id
            )));
        }
        ln_positive[inst.id as usize - 1] = inst.positive;
    }
    let metastasis = entry.metastasis;
    Ok(PhantomCase {
        case_id: entry.case_id.clone(),
        organs: load_mvol_label(case_dir.join("organs.mvol"))?,
        ct_a: load_mvol_scalar(case_dir.join("ct_a.mvol"))?,
        ct_v: load_mvol_scalar(case_dir.join("ct_v.mvol"))?,
        ln_gt,
        ln_positive,
        tumor: load_mvol_label(case_dir.join("tumor.mvol"))?,
        metastasis,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cfg() -> PhantomConfig {
        // a 64-voxel grid is ~43 mm wide, so bands shrink with it
        PhantomConfig {
            dims: (64, 64, 64),
            cohort_size: 4,
            volume_scale: 0.25,
            placement_band_mm: (0.5, 5.0),
            decoy_min_distance_mm: 10.0,
            seed: 7,
            ..Default::default()
        }
    }

    #[test]
    fn same_seed_gives_bitwise_identical_cases() {
        let cfg = small_cfg();
        let a = generate_case(&cfg, 2).unwrap();
        let b = generate_case(&cfg, 2).unwrap();
        assert_eq!(a.organs.data, b.organs.data);
        assert_eq!(a.ln_gt.data, b.ln_gt.data);
        let bits = |v: &ScalarVolume| -> Vec<u32> { v.data.iter().map(|x| x.to_bits()).collect() };
        assert_eq!(bits(&a.ct_a), bits(&b.ct_a));
        assert_eq!(bits(&a.ct_v), bits(&b.ct_v));
        assert_eq!(a.ln_positive, b.ln_positive);
    }

    #[test]
    fn metastasis_label_is_or_of_instances() {
        let cfg = small_cfg();
        for i in 0..4 {
            let c = generate_case(&cfg, i).unwrap();
            assert_eq!(c.metastasis, c.ln_positive.iter().any(|&p| p));
        }
    }

    #[test]
    fn nodes_do_not_touch_each_other_or_tumor() {
        let cfg = small_cfg();
        for i in 0..4 {
            let c = generate_case(&cfg, i).unwrap();
            for (idx, &l) in c.ln_gt.data.iter().enumerate() {
                if l > 0 {
                    assert_eq!(c.tumor.data[idx], 0, "node voxel inside tumor");
                }
                let _ = idx;
            }
            // instance labels are consistent with the positivity table
            let max = c.ln_gt.data.iter().copied().max().unwrap_or(0);
            assert_eq!(max as usize, c.ln_positive.len());
        }
    }

    #[test]
    fn generated_volume_medians_match_targets() {
        let cfg = PhantomConfig { cohort_size: 40, seed: 3, ..Default::default() };
        let mut pos = Vec::new();
        let mut neg = Vec::new();
        for i in 0..cfg.cohort_size {
            let c = generate_case(&cfg, i).unwrap();
            for (e, &p) in c.ln_positive.iter().enumerate() {
                let count = c.ln_gt.data.iter().filter(|&&l| l as usize == e + 1).count();
                let v = volume_mm3(count, c.ln_gt.spacing).unwrap();
                if p {
                    pos.push(v);
                } else {
                    neg.push(v);
                }
            }
        }
        assert!(pos.len() + neg.len() >= 100, "want >= 100 nodes, got {}", pos.len() + neg.len());
        let median = |v: &mut Vec<f64>| -> f64 {
            v.sort_by(|a, b| a.partial_cmp(b).unwrap());
            v[v.len() / 2]
        };
        let mp = median(&mut pos);
        let mn = median(&mut neg);
        assert!((mp - 665.0).abs() / 665.0 < 0.20, "positive median {mp}");
        assert!((mn - 300.0).abs() / 300.0 < 0.20, "negative median {mn}");
    }

    #[test]
    fn calibrated_attention_covers_every_gt_voxel() {
        use crate::distance::{
            calibrate_params, fuse_attention, signed_distance_transform, trapezoid_map,
            AttentionMap, CalibrationCase,
        };
        let cfg = small_cfg();
        let cases: Vec<PhantomCase> = (0..3).map(|i| generate_case(&cfg, i).unwrap()).collect();
        let names = structure_names(cfg.structure_count);
        let dmaps: Vec<Vec<crate::distance::DistanceMap>> = cases
            .iter()
            .map(|c| {
                (1..=cfg.structure_count as u16)
                    .map(|l| signed_distance_transform(&c.organs, l, c.organs.spacing).unwrap())
                    .collect()
            })
            .collect();
        let cal_cases: Vec<CalibrationCase> = cases
            .iter()
            .zip(&dmaps)
            .map(|(c, d)| CalibrationCase { ln_mask: &c.ln_gt, dmaps: d })
            .collect();
        let priors = calibrate_params(&cal_cases, &names).unwrap();
        for (c, dms) in cases.iter().zip(&dmaps) {
            let maps: Vec<AttentionMap> = priors
                .entries
                .iter()
                .enumerate()
                .map(|(i, e)| match e.params {
                    Some(p) => trapezoid_map(&dms[i], &p),
                    None => AttentionMap::zeros(c.organs.dims, c.organs.spacing),
                })
                .collect();
            let fused = fuse_attention(&maps, &c.organs).unwrap();
            for (idx, &l) in c.ln_gt.data.iter().enumerate() {
                if l > 0 {
                    assert_eq!(fused.data[idx], 1.0, "voxel {idx} not covered");
                }
            }
        }
    }

    #[test]
    fn manifest_counts_and_digest() {
        let cfg = small_cfg();
        let cases = generate_cohort(&cfg).unwrap();
        let manifest = cohort_manifest(&cfg, &cases, "cohort");
        assert_eq!(manifest.cases.len(), cfg.cohort_size);
        let d1 = cfg.digest();
        let mut cfg2 = cfg.clone();
        cfg2.seed += 1;
        assert_ne!(d1, cfg2.digest());
        let mut cfg3 = cfg.clone();
        cfg3.noise_sigma += 0.001;
        assert_ne!(d1, cfg3.digest());
        assert_eq!(d1, small_cfg().digest());
    }

    #[test]
    fn roundtrip_through_disk() {
        let cfg = small_cfg();
        let case = generate_case(&cfg, 0).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_case(&case, dir.path()).unwrap();
        let entry = manifest_case(&case, "cohort");
        let back = load_case(dir.path(), &entry).unwrap();
        assert_eq!(back.organs.data, case.organs.data);
        assert_eq!(back.ln_gt.data, case.ln_gt.data);
        assert_eq!(back.ln_positive, case.ln_positive);
        assert_eq!(back.metastasis, case.metastasis);
    }
}
