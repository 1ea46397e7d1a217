//! Sliding-window full-volume inference with half-overlap windows and
//! uniform blending.

use super::net::{MicroNet, Tensor};
use crate::distance::{downsample_attention, AttentionMap};
use crate::error::{Error, Result};
use crate::volume::{crop_patch_scalar, Dims, LabelVolume, PadMode, PatchSpec, ScalarVolume};
use rayon::prelude::*;

#[derive(Debug, Clone, Copy)]
pub struct InferConfig {
    pub patch_shape: (usize, usize, usize),
}

/// Window origins along one axis: stride of half the window, final window
/// clamped to the end so every voxel is covered.
fn window_origins(n: usize, w: usize) -> Vec<usize> {
    let stride = (w / 2).max(1);
    let mut out = Vec::new();
    let mut pos = 0usize;
    loop {
        if pos + w >= n {
            out.push(n - w);
            break;
        }
        out.push(pos);
        pos += stride;
    }
    out.dedup();
    out
}

/// Blended two-channel probabilities over the whole volume. Windows are
/// forwarded in parallel and blended in a fixed order.
pub fn infer_probabilities(
    net: &MicroNet,
    images: &[&ScalarVolume],
    attention: Option<&AttentionMap>,
    cfg: &InferConfig,
) -> Result<(Vec<f32>, Vec<f32>)> {
    if images.is_empty() {
        return Err(Error::Input("inference needs at least one channel".into()));
    }
    let dims = images[0].dims;
    let spacing = images[0].spacing;
    for im in images {
        if im.dims != dims {
            return Err(Error::Input("inference channels are not aligned".into()));
        }
    }
    if let Some(a) = attention {
        if a.dims != dims {
            return Err(Error::Input("attention map does not match the volume".into()));
        }
    }
    let pd = Dims::new(cfg.patch_shape.0, cfg.patch_shape.1, cfg.patch_shape.2);
    net.check_dims(pd)?;
    if pd.w > dims.w || pd.h > dims.h || pd.d > dims.d {
        return Err(Error::Input(format!(
            "window {:?} exceeds volume {}x{}x{}",
            cfg.patch_shape, dims.w, dims.h, dims.d
        )));
    }

    let mut origins = Vec::new();
    for z in window_origins(dims.d, pd.d) {
        for y in window_origins(dims.h, pd.h) {
            for x in window_origins(dims.w, pd.w) {
                origins.push((x, y, z));
            }
        }
    }

    let outputs: Vec<Result<Tensor>> = origins
        .par_iter()
        .map(|&(ox, oy, oz)| -> Result<Tensor> {
            let center = (
                ox as i64 + (pd.w / 2) as i64,
                oy as i64 + (pd.h / 2) as i64,
                oz as i64 + (pd.d / 2) as i64,
            );
            let spec = PatchSpec::new(center, pd)?;
            let channels: Vec<Vec<f32>> =
                images.iter().map(|im| crop_patch_scalar(im, &spec, PadMode::Zero).data).collect();
            let input = Tensor::from_channels(pd, channels)?;
            let fwd = match attention {
                Some(a) => {
                    let av = ScalarVolume { dims: a.dims, spacing, data: a.data.clone() };
                    let a0 = crop_patch_scalar(&av, &spec, PadMode::Zero).data;
                    let a0_map = AttentionMap { dims: pd, spacing, data: a0 };
                    let a1 = downsample_attention(&a0_map, (2, 2, 2))?;
                    net.forward(&input, Some((&a0_map.data, &a1.data)))?
                }
                None => net.forward(&input, None)?,
            };
            Ok(fwd.p0)
        })
        .collect();

    let n = dims.len();
    let mut sum0 = vec![0f32; n];
    let mut sum1 = vec![0f32; n];
    let mut count = vec![0u16; n];
    for (&(ox, oy, oz), out) in origins.iter().zip(outputs) {
        let p = out?;
        let np = pd.len();
        for z in 0..pd.d {
            for y in 0..pd.h {
                let src = pd.index(0, y, z);
                let dst = dims.index(ox, oy + y, oz + z);
                for x in 0..pd.w {
                    sum0[dst + x] += p.data[src + x];
                    sum1[dst + x] += p.data[np + src + x];
                    count[dst + x] += 1;
                }
            }
        }
    }
    for i in 0..n {
        let c = count[i] as f32;
        debug_assert!(c > 0.0);
        sum0[i] /= c;
        sum1[i] /= c;
    }
    Ok((sum0, sum1))
}

/// Binary segmentation by blended argmax; ties go to background.
pub fn infer_segmentation(
    net: &MicroNet,
    images: &[&ScalarVolume],
    attention: Option<&AttentionMap>,
    cfg: &InferConfig,
) -> Result<LabelVolume> {
    let dims = images[0].dims;
    let spacing = images[0].spacing;
    let (p0, p1) = infer_probabilities(net, images, attention, cfg)?;
    let data = p0.iter().zip(&p1).map(|(&a, &b)| u16::from(b > a)).collect();
    LabelVolume::new(dims, spacing, data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::Spacing;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn sp1() -> Spacing {
        Spacing::isotropic(1.0).unwrap()
    }

    fn zeroed_background_net(c_in: usize) -> MicroNet {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut net = MicroNet::new(c_in, 4, &mut rng);
        // constant logits: background always wins
        for conv in net.convs_mut() {
            conv.weight.fill(0.0);
            conv.bias.fill(0.0);
        }
        net.head0.bias[0] = 2.0;
        net.head1.bias[0] = 2.0;
        net
    }

    #[test]
    fn window_origins_cover_everything() {
        for (n, w) in [(20usize, 8usize), (16, 16), (30, 8), (9, 4)] {
            let origins = window_origins(n, w);
            let mut covered = vec![false; n];
            for &o in &origins {
                for i in o..o + w {
                    covered[i] = true;
                }
            }
            assert!(covered.iter().all(|&c| c), "n {n} w {w} origins {origins:?}");
            assert_eq!(*origins.last().unwrap(), n - w);
        }
    }

    #[test]
    fn constant_background_net_gives_empty_mask() {
        let net = zeroed_background_net(1);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let dims = Dims::new(20, 20, 20);
        let img = ScalarVolume::new(dims, sp1(), (0..dims.len()).map(|_| rng.gen_range(0.0..1.0)).collect())
            .unwrap();
        let seg =
            infer_segmentation(&net, &[&img], None, &InferConfig { patch_shape: (8, 8, 8) }).unwrap();
        assert!(seg.data.iter().all(|&v| v == 0));
    }

    #[test]
    fn constant_logit_net_is_shift_invariant() {
        let net = zeroed_background_net(1);
        let dims = Dims::new(18, 14, 12);
        let img = ScalarVolume::filled(dims, sp1(), 0.4);
        let (p0a, p1a) =
            infer_probabilities(&net, &[&img], None, &InferConfig { patch_shape: (8, 8, 8) }).unwrap();
        let (p0b, p1b) =
            infer_probabilities(&net, &[&img], None, &InferConfig { patch_shape: (12, 8, 6) })
                .unwrap();
        for i in 0..dims.len() {
            assert!((p0a[i] - p0b[i]).abs() < 1e-6);
            assert!((p1a[i] - p1b[i]).abs() < 1e-6);
        }
    }

    #[test]
    fn single_window_matches_direct_forward() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let net = MicroNet::new(2, 4, &mut rng);
        let dims = Dims::new(12, 12, 12);
        let a = ScalarVolume::new(dims, sp1(), (0..dims.len()).map(|_| rng.gen_range(0.0..1.0)).collect())
            .unwrap();
        let b = ScalarVolume::new(dims, sp1(), (0..dims.len()).map(|_| rng.gen_range(0.0..1.0)).collect())
            .unwrap();
        let (p0, p1) = infer_probabilities(
            &net,
            &[&a, &b],
            None,
            &InferConfig { patch_shape: (12, 12, 12) },
        )
        .unwrap();
        let input = Tensor::from_channels(dims, vec![a.data.clone(), b.data.clone()]).unwrap();
        let fwd = net.forward(&input, None).unwrap();
        let n = dims.len();
        for i in 0..n {
            assert_eq!(p0[i], fwd.p0.data[i]);
            assert_eq!(p1[i], fwd.p0.data[n + i]);
        }
    }

    #[test]
    fn attention_gating_respects_support_at_inference() {
        // with attention zero everywhere, level-0 features are zeroed, so
        // predictions collapse to the head bias decision
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut net = MicroNet::new(1, 4, &mut rng);
        net.head0.bias[0] = 1.0; // background bias
        net.head0.bias[1] = 0.0;
        let dims = Dims::new(12, 12, 12);
        let img = ScalarVolume::new(dims, sp1(), (0..dims.len()).map(|_| rng.gen_range(0.0..1.0)).collect())
            .unwrap();
        let att = AttentionMap::zeros(dims, sp1());
        let seg = infer_segmentation(
            &net,
            &[&img],
            Some(&att),
            &InferConfig { patch_shape: (8, 8, 8) },
        )
        .unwrap();
        assert!(seg.data.iter().all(|&v| v == 0));
    }
}
