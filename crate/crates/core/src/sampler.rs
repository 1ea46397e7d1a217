//! Patch-based training sample selection: foreground quota plus informative
//! negative selection.
//!
//! Every draw pulls from its own counter-derived random stream, so batches
//! are reproducible for a given seed no matter how work is scheduled.

use crate::distance::AttentionMap;
use crate::error::{Error, Result};
use crate::volume::{crop_patch_label, crop_patch_scalar, Dims, LabelVolume, PadMode, PatchSpec, ScalarVolume};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    /// Patch shape in voxels. The clinical-scale default is 160x192x80;
    /// desk runs scale it down.
    pub patch_shape: (usize, usize, usize),
    pub batch_size: usize,
    pub seed: u64,
    /// When false, negative patches are accepted without the attention
    /// filter (plain baseline sampling).
    pub informative: bool,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig { patch_shape: (160, 192, 80), batch_size: 2, seed: 0, informative: true }
    }
}

impl SamplerConfig {
    pub fn patch_dims(&self) -> Dims {
        Dims::new(self.patch_shape.0, self.patch_shape.1, self.patch_shape.2)
    }
}

/// Minimum number of foreground-containing patches per batch: strictly more
/// than a third.
pub fn foreground_quota(batch_size: usize) -> usize {
    batch_size / 3 + 1
}

/// One case as the sampler sees it: aligned image channels, binary node
/// labels and the fused attention map.
pub struct SamplerCase<'a> {
    pub case_id: &'a str,
    pub images: Vec<&'a ScalarVolume>,
    pub labels: &'a LabelVolume,
    pub attention: &'a AttentionMap,
}

/// Deduplicated candidate centers for one case.
#[derive(Debug, Clone, PartialEq)]
pub struct CandidateCenters {
    /// Voxels inside GT node components.
    pub foreground: Vec<usize>,
    /// Voxels with attention > 0 outside every node.
    pub informative_negative: Vec<usize>,
}

/// Scan a case for candidate centers; a single linear pass keeps the result
/// deterministic and free of duplicates.
pub fn candidate_centers(case: &SamplerCase<'_>) -> CandidateCenters {
    let mut foreground = Vec::new();
    let mut informative_negative = Vec::new();
    for idx in 0..case.labels.dims.len() {
        if case.labels.data[idx] > 0 {
            foreground.push(idx);
        } else if case.attention.data[idx] > 0.0 {
            informative_negative.push(idx);
        }
    }
    CandidateCenters { foreground, informative_negative }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum PatchClass {
    Foreground,
    InformativeNegative,
    Negative,
}

/// One sampled patch with its provenance.
pub struct SamplePatch {
    pub images: Vec<ScalarVolume>,
    pub labels: LabelVolume,
    pub attention: Vec<f32>,
    pub case_id: String,
    pub center: (i64, i64, i64),
    pub class: PatchClass,
}

pub struct SampleBatch {
    pub patches: Vec<SamplePatch>,
}

/// Validated sampling state over a case set.
pub struct SamplerPlan<'a> {
    cases: Vec<SamplerCase<'a>>,
    candidates: Vec<CandidateCenters>,
    fg_cases: Vec<usize>,
    /// Cases dropped for having no foreground and no informative voxel.
    pub warnings: Vec<String>,
}

pub fn plan_sampler<'a>(cases: Vec<SamplerCase<'a>>, cfg: &SamplerConfig) -> Result<SamplerPlan<'a>> {
    if cases.is_empty() {
        return Err(Error::Input("sampler needs at least one case".into()));
    }
    let pd = cfg.patch_dims();
    let mut kept = Vec::new();
    let mut candidates = Vec::new();
    let mut warnings = Vec::new();
    for case in cases {
        let dims = case.labels.dims;
        if case.attention.dims != dims || case.images.iter().any(|im| im.dims != dims) {
            return Err(Error::Input(format!("{}: sampler volumes are not aligned", case.case_id)));
        }
        if pd.w > dims.w || pd.h > dims.h || pd.d > dims.d {
            return Err(Error::Input(format!(
                "{}: patch shape {:?} exceeds volume dims {:?}",
                case.case_id, cfg.patch_shape, dims
            )));
        }
        let cand = candidate_centers(&case);
        if cand.foreground.is_empty() && cand.informative_negative.is_empty() && cfg.informative {
            warnings.push(format!("{}: no informative voxels and no foreground, excluded", case.case_id));
            continue;
        }
        kept.push(case);
        candidates.push(cand);
    }
    if kept.is_empty() {
        return Err(Error::Degenerate("all cases excluded: nothing informative to sample".into()));
    }
    let fg_cases: Vec<usize> =
        (0..kept.len()).filter(|&i| !candidates[i].foreground.is_empty()).collect();
    Ok(SamplerPlan { cases: kept, candidates, fg_cases, warnings })
}

/// Whether a patch at `center` would be informative: it contains attention
/// support or a foreground voxel.
pub fn patch_is_informative(case: &SamplerCase<'_>, cfg: &SamplerConfig, center: (i64, i64, i64)) -> bool {
    let spec = PatchSpec::new(center, cfg.patch_dims()).expect("valid patch shape");
    let (ox, oy, oz) = spec.origin();
    let dims = case.labels.dims;
    for z in 0..cfg.patch_shape.2 {
        let sz = oz + z as i64;
        for y in 0..cfg.patch_shape.1 {
            let sy = oy + y as i64;
            for x in 0..cfg.patch_shape.0 {
                let sx = ox + x as i64;
                if dims.contains(sx, sy, sz) {
                    let idx = dims.index(sx as usize, sy as usize, sz as usize);
                    if case.attention.data[idx] > 0.0 || case.labels.data[idx] > 0 {
                        return true;
                    }
                }
            }
        }
    }
    false
}

fn cut_patch(case: &SamplerCase<'_>, cfg: &SamplerConfig, center: (i64, i64, i64), class: PatchClass) -> SamplePatch {
    let spec = PatchSpec::new(center, cfg.patch_dims()).expect("valid patch shape");
    let images = case.images.iter().map(|im| crop_patch_scalar(im, &spec, PadMode::Zero)).collect();
    let labels = crop_patch_label(case.labels, &spec, PadMode::Zero);
    // attention cropped through the same zero-pad path
    let att_vol = ScalarVolume {
        dims: case.attention.dims,
        spacing: case.attention.spacing,
        data: case.attention.data.clone(),
    };
    let attention = crop_patch_scalar(&att_vol, &spec, PadMode::Zero).data;
    SamplePatch { images, labels, attention, case_id: case.case_id.to_string(), center, class }
}

fn center_to_coords(dims: Dims, idx: usize) -> (i64, i64, i64) {
    let (x, y, z) = dims.coords(idx);
    (x as i64, y as i64, z as i64)
}

/// Draw one batch. Slot `s` of batch `b` consumes random stream
/// `b * batch_size + s`, which makes every draw independent of scheduling.
pub fn sample_batch(plan: &SamplerPlan<'_>, cfg: &SamplerConfig, batch_index: u64) -> Result<SampleBatch> {
    let quota = foreground_quota(cfg.batch_size);
    if quota > cfg.batch_size {
        return Err(Error::Config(format!(
            "batch size {} cannot satisfy the foreground quota {quota}",
            cfg.batch_size
        )));
    }
    if plan.fg_cases.is_empty() {
        return Err(Error::Degenerate("no case has foreground voxels, quota unsatisfiable".into()));
    }
    let mut patches = Vec::with_capacity(cfg.batch_size);
    for slot in 0..cfg.batch_size {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(batch_index * cfg.batch_size as u64 + slot as u64);
        if slot < quota {
            let ci = plan.fg_cases[rng.gen_range(0..plan.fg_cases.len())];
            let case = &plan.cases[ci];
            let fg = &plan.candidates[ci].foreground;
            let center = center_to_coords(case.labels.dims, fg[rng.gen_range(0..fg.len())]);
            patches.push(cut_patch(case, cfg, center, PatchClass::Foreground));
        } else {
            let mut chosen: Option<(usize, (i64, i64, i64))> = None;
            for _redraw in 0..100 {
                let ci = rng.gen_range(0..plan.cases.len());
                let case = &plan.cases[ci];
                let dims = case.labels.dims;
                let center = (
                    rng.gen_range(0..dims.w) as i64,
                    rng.gen_range(0..dims.h) as i64,
                    rng.gen_range(0..dims.d) as i64,
                );
                if !cfg.informative || patch_is_informative(case, cfg, center) {
                    chosen = Some((ci, center));
                    break;
                }
            }
            let (ci, center) = match chosen {
                Some(c) => c,
                None => {
                    // bounded redraws exhausted: fall back to the
                    // precomputed informative-center list
                    let with_inf: Vec<usize> = (0..plan.cases.len())
                        .filter(|&i| !plan.candidates[i].informative_negative.is_empty())
                        .collect();
                    if with_inf.is_empty() {
                        return Err(Error::Degenerate(
                            "no informative negative centers available".into(),
                        ));
                    }
                    let ci = with_inf[rng.gen_range(0..with_inf.len())];
                    let list = &plan.candidates[ci].informative_negative;
                    let idx = list[rng.gen_range(0..list.len())];
                    (ci, center_to_coords(plan.cases[ci].labels.dims, idx))
                }
            };
            let case = &plan.cases[ci];
            let class = if cfg.informative { PatchClass::InformativeNegative } else { PatchClass::Negative };
            patches.push(cut_patch(case, cfg, center, class));
        }
    }
    Ok(SampleBatch { patches })
}

impl SamplePatch {
    pub fn contains_foreground(&self) -> bool {
        self.labels.data.iter().any(|&v| v > 0)
    }

    pub fn contains_attention(&self) -> bool {
        self.attention.iter().any(|&v| v > 0.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::Spacing;

    fn sp1() -> Spacing {
        Spacing::isotropic(1.0).unwrap()
    }

    struct Owned {
        img: ScalarVolume,
        labels: LabelVolume,
        attention: AttentionMap,
    }

    fn make_case(dims: Dims, fg: &[(usize, usize, usize)], att: &[(usize, usize, usize)]) -> Owned {
        let img = ScalarVolume::filled(dims, sp1(), 0.5);
        let mut labels = LabelVolume::filled(dims, sp1(), 0);
        for &(x, y, z) in fg {
            labels.data[dims.index(x, y, z)] = 1;
        }
        let mut attention = AttentionMap::zeros(dims, sp1());
        for &(x, y, z) in att {
            attention.data[dims.index(x, y, z)] = 1.0;
        }
        Owned { img, labels, attention }
    }

    fn view<'a>(o: &'a Owned, id: &'a str) -> SamplerCase<'a> {
        SamplerCase { case_id: id, images: vec![&o.img], labels: &o.labels, attention: &o.attention }
    }

    fn cfg(patch: usize, batch: usize) -> SamplerConfig {
        SamplerConfig { patch_shape: (patch, patch, patch), batch_size: batch, seed: 11, informative: true }
    }

    #[test]
    fn quota_rule_is_strictly_more_than_a_third() {
        assert_eq!(foreground_quota(6), 3);
        assert_eq!(foreground_quota(2), 1);
        assert_eq!(foreground_quota(3), 2);
        assert_eq!(foreground_quota(12), 5);
    }

    #[test]
    fn candidate_sets_match_definitions() {
        let dims = Dims::new(8, 8, 8);
        let o = make_case(dims, &[(1, 1, 1), (1, 2, 1)], &[(1, 1, 1), (5, 5, 5), (6, 5, 5)]);
        let c = candidate_centers(&view(&o, "c0"));
        assert_eq!(c.foreground.len(), 2);
        // (1,1,1) is foreground, so informative negatives exclude it
        assert_eq!(c.informative_negative.len(), 2);
    }

    #[test]
    fn batch_satisfies_quota_and_informativeness() {
        let dims = Dims::new(20, 20, 20);
        let o = make_case(
            dims,
            &[(3, 3, 3)],
            &[(3, 3, 3), (10, 10, 10), (11, 10, 10), (15, 4, 9)],
        );
        let c = cfg(6, 6);
        let plan = plan_sampler(vec![view(&o, "c0")], &c).unwrap();
        for b in 0..50 {
            let batch = sample_batch(&plan, &c, b).unwrap();
            assert_eq!(batch.patches.len(), 6);
            let n_fg = batch.patches.iter().filter(|p| p.contains_foreground()).count();
            assert!(n_fg >= 3, "batch {b} has {n_fg} foreground patches");
            for p in &batch.patches {
                assert!(p.contains_foreground() || p.contains_attention());
            }
        }
    }

    #[test]
    fn zero_attention_zero_labels_fails() {
        let dims = Dims::new(8, 8, 8);
        let o = make_case(dims, &[], &[]);
        let c = cfg(4, 2);
        assert!(plan_sampler(vec![view(&o, "c0")], &c).is_err());
    }

    #[test]
    fn excluded_case_produces_warning() {
        let dims = Dims::new(12, 12, 12);
        let good = make_case(dims, &[(2, 2, 2)], &[(2, 2, 2), (8, 8, 8)]);
        let empty = make_case(dims, &[], &[]);
        let c = cfg(4, 3);
        let plan = plan_sampler(vec![view(&good, "good"), view(&empty, "empty")], &c).unwrap();
        assert_eq!(plan.warnings.len(), 1);
        assert!(plan.warnings[0].contains("empty"));
    }

    #[test]
    fn sampling_is_seed_deterministic() {
        let dims = Dims::new(16, 16, 16);
        let o = make_case(dims, &[(4, 4, 4), (10, 10, 10)], &[(7, 7, 7), (12, 3, 9), (2, 13, 5)]);
        let c = cfg(6, 5);
        let plan = plan_sampler(vec![view(&o, "c0")], &c).unwrap();
        for b in [0u64, 3, 17] {
            let a = sample_batch(&plan, &c, b).unwrap();
            let b2 = sample_batch(&plan, &c, b).unwrap();
            let keys =
                |s: &SampleBatch| -> Vec<_> { s.patches.iter().map(|p| (p.center, p.class)).collect() };
            assert_eq!(keys(&a), keys(&b2));
        }
    }

    #[test]
    fn accepted_negative_centers_match_exhaustive_enumeration() {
        // the acceptance predicate must equal a brute-force voxel scan of
        // "patch intersects attention support or foreground"
        let dims = Dims::new(20, 20, 20);
        let o = make_case(dims, &[(2, 17, 3)], &[(9, 9, 9), (10, 9, 9), (16, 2, 14)]);
        let c = cfg(6, 4);
        let case = view(&o, "c0");
        for z in 0..20i64 {
            for y in 0..20i64 {
                for x in 0..20i64 {
                    let spec = PatchSpec::new((x, y, z), c.patch_dims()).unwrap();
                    let (ox, oy, oz) = spec.origin();
                    let mut expect = false;
                    for dz in 0..6i64 {
                        for dy in 0..6i64 {
                            for dx in 0..6i64 {
                                let (sx, sy, sz) = (ox + dx, oy + dy, oz + dz);
                                if dims.contains(sx, sy, sz) {
                                    let idx = dims.index(sx as usize, sy as usize, sz as usize);
                                    if o.attention.data[idx] > 0.0 || o.labels.data[idx] > 0 {
                                        expect = true;
                                    }
                                }
                            }
                        }
                    }
                    assert_eq!(patch_is_informative(&case, &c, (x, y, z)), expect);
                }
            }
        }
    }

    #[test]
    fn non_informative_mode_accepts_anything() {
        let dims = Dims::new(10, 10, 10);
        let o = make_case(dims, &[(5, 5, 5)], &[]);
        let mut c = cfg(4, 4);
        c.informative = false;
        let plan = plan_sampler(vec![view(&o, "c0")], &c).unwrap();
        let batch = sample_batch(&plan, &c, 0).unwrap();
        assert_eq!(batch.patches.len(), 4);
    }

    #[test]
    fn no_non_informative_negatives_across_many_draws() {
        let dims = Dims::new(16, 16, 16);
        let o = make_case(dims, &[(4, 4, 4)], &[(11, 11, 11), (12, 11, 11)]);
        let c = cfg(4, 4);
        let plan = plan_sampler(vec![view(&o, "c0")], &c).unwrap();
        let mut drawn = 0;
        for b in 0..500 {
            let batch = sample_batch(&plan, &c, b).unwrap();
            for p in &batch.patches {
                drawn += 1;
                assert!(p.contains_foreground() || p.contains_attention());
            }
        }
        assert_eq!(drawn, 2000);
    }
}
