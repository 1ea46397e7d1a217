//! Tumor and node combined metastasis prediction: nine-patch tumor slice
//! extraction, a small convolutional backbone with a mask side branch,
//! texture encoding, largest-positive-node volume fusion and ensemble
//! averaging. Everything here runs in f64.

mod layers2d;
mod tel;

pub use layers2d::{relu2, relu2_backward, Conv2d, Tensor2};
pub use tel::Tel;

use crate::error::{Error, Result};
use crate::learn::TrainConfig;
use crate::learn::train::Sgd;
use crate::volume::{Dims, LabelVolume, ScalarVolume};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Plane {
    Axial,
    Sagittal,
    Coronal,
}

/// One 2D tumor patch: image channels plus the mask patch, all patch*patch.
#[derive(Debug, Clone)]
pub struct TumorPatch {
    pub channels: Vec<Vec<f64>>,
    pub mask: Vec<f64>,
    pub plane: Plane,
    pub slice_index: usize,
}

#[derive(Debug, Clone)]
pub struct TumorPatchSet {
    pub patches: Vec<TumorPatch>,
    /// Set when a plane had fewer than three non-empty slices and the
    /// largest one was repeated.
    pub repeated: bool,
}

struct SliceView {
    rows: usize,
    cols: usize,
}

fn slice_geometry(dims: Dims, plane: Plane) -> SliceView {
    match plane {
        Plane::Axial => SliceView { rows: dims.h, cols: dims.w },
        Plane::Sagittal => SliceView { rows: dims.d, cols: dims.h },
        Plane::Coronal => SliceView { rows: dims.d, cols: dims.w },
    }
}

fn slice_count(dims: Dims, plane: Plane) -> usize {
    match plane {
        Plane::Axial => dims.d,
        Plane::Sagittal => dims.w,
        Plane::Coronal => dims.h,
    }
}

#[inline]
fn slice_index(dims: Dims, plane: Plane, s: usize, row: usize, col: usize) -> usize {
    match plane {
        Plane::Axial => dims.index(col, row, s),
        Plane::Sagittal => dims.index(s, col, row),
        Plane::Coronal => dims.index(col, s, row),
    }
}

fn crop_slice_patch<F: Fn(usize, usize) -> f64>(
    view: &SliceView,
    read: F,
    center: (f64, f64),
    patch: usize,
) -> Vec<f64> {
    let half = patch as i64 / 2;
    let r0 = center.0.floor() as i64 - half;
    let c0 = center.1.floor() as i64 - half;
    let mut out = vec![0.0; patch * patch];
    for r in 0..patch {
        let sr = r0 + r as i64;
        if sr < 0 || sr >= view.rows as i64 {
            continue;
        }
        for c in 0..patch {
            let sc = c0 + c as i64;
            if sc < 0 || sc >= view.cols as i64 {
                continue;
            }
            out[r * patch + c] = read(sr as usize, sc as usize);
        }
    }
    out
}

/// Per plane, the three slices with the largest tumor cross-section, each
/// cropped around the slice's tumor centroid. Planes with fewer non-empty
/// slices repeat their largest one and set the flag.
pub fn extract_tumor_patches(
    images: &[&ScalarVolume],
    tumor: &LabelVolume,
    patch: usize,
) -> Result<TumorPatchSet> {
    let dims = tumor.dims;
    for im in images {
        if im.dims != dims {
            return Err(Error::Input("tumor patch extraction needs aligned volumes".into()));
        }
    }
    if tumor.data.iter().all(|&v| v == 0) {
        return Err(Error::Degenerate("empty tumor mask".into()));
    }
    let mut patches = Vec::with_capacity(9);
    let mut repeated = false;
    for plane in [Plane::Axial, Plane::Sagittal, Plane::Coronal] {
        let view = slice_geometry(dims, plane);
        let n_slices = slice_count(dims, plane);
        // (area, slice): descending area, ascending index on ties
        let mut ranked: Vec<(usize, usize)> = (0..n_slices)
            .map(|s| {
                let mut area = 0usize;
                for r in 0..view.rows {
                    for c in 0..view.cols {
                        if tumor.data[slice_index(dims, plane, s, r, c)] > 0 {
                            area += 1;
                        }
                    }
                }
                (area, s)
            })
            .filter(|&(a, _)| a > 0)
            .collect();
        ranked.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
        if ranked.is_empty() {
            return Err(Error::Degenerate("tumor mask empty along one plane".into()));
        }
        let mut chosen: Vec<usize> = ranked.iter().take(3).map(|&(_, s)| s).collect();
        while chosen.len() < 3 {
            chosen.push(ranked[0].1);
            repeated = true;
        }
        for &s in &chosen {
            let mut cr = 0f64;
            let mut cc = 0f64;
            let mut n = 0f64;
            for r in 0..view.rows {
                for c in 0..view.cols {
                    if tumor.data[slice_index(dims, plane, s, r, c)] > 0 {
                        cr += r as f64;
                        cc += c as f64;
                        n += 1.0;
                    }
                }
            }
            let center = (cr / n, cc / n);
            let channels: Vec<Vec<f64>> = images
                .iter()
                .map(|im| {
                    crop_slice_patch(
                        &view,
                        |r, c| im.data[slice_index(dims, plane, s, r, c)] as f64,
                        center,
                        patch,
                    )
                })
                .collect();
            let mask = crop_slice_patch(
                &view,
                |r, c| f64::from(tumor.data[slice_index(dims, plane, s, r, c)] > 0),
                center,
                patch,
            );
            patches.push(TumorPatch { channels, mask, plane, slice_index: s });
        }
    }
    Ok(TumorPatchSet { patches, repeated })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FusionConfig {
    pub c_in: usize,
    pub f1: usize,
    pub f2: usize,
    pub codewords: usize,
    pub patch: usize,
    pub use_volume: bool,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for FusionConfig {
    fn default() -> Self {
        FusionConfig {
            c_in: 2,
            f1: 8,
            f2: 16,
            codewords: 8,
            patch: 32,
            use_volume: true,
            epochs: 30,
            batch_size: 16,
            lr: 5e-4,
            momentum: 0.95,
            weight_decay: 1e-4,
            seed: 0,
        }
    }
}

/// Backbone, side branch, texture encoder, volume-feature path and
/// classifier.
#[derive(Debug, Clone)]
pub struct FusionHead {
    pub c_in: usize,
    pub f1: usize,
    pub f2: usize,
    pub patch: usize,
    pub use_volume: bool,
    pub conv1: Conv2d,
    pub side: Conv2d,
    pub conv2: Conv2d,
    pub tel: Tel,
    pub bn_mean: f64,
    pub bn_std: f64,
    pub bn_gamma: f64,
    pub bn_beta: f64,
    pub fc_v_w: Vec<f64>,
    pub fc_v_b: Vec<f64>,
    pub cls_w: Vec<f64>,
    pub cls_b: f64,
}

struct PatchForward {
    input: Tensor2,
    mask_t: Tensor2,
    h1: Tensor2,
    gate: Tensor2,
    hg: Tensor2,
    h2: Tensor2,
    x_mat: Vec<f64>,
    n_pos: usize,
    tel_fwd: tel::TelForward,
    feat: Vec<f64>,
    v_hat: f64,
    bn_out: f64,
    prob: f64,
}

impl FusionHead {
    pub fn new(cfg: &FusionConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let feat_dim = cfg.f2 + cfg.codewords * cfg.f2;
        let mut head = FusionHead {
            c_in: cfg.c_in,
            f1: cfg.f1,
            f2: cfg.f2,
            patch: cfg.patch,
            use_volume: cfg.use_volume,
            conv1: Conv2d::new(cfg.c_in, cfg.f1, &mut rng),
            side: Conv2d::new_identity_gate(1, cfg.f1),
            conv2: Conv2d::new(cfg.f1, cfg.f2, &mut rng),
            tel: Tel::new(cfg.codewords, cfg.f2, &mut rng),
            bn_mean: 0.0,
            bn_std: 1.0,
            bn_gamma: 1.0,
            bn_beta: 0.0,
            fc_v_w: Vec::new(),
            fc_v_b: Vec::new(),
            cls_w: Vec::new(),
            cls_b: 0.0,
        };
        use rand::Rng;
        let scale = (1.0 / feat_dim as f64).sqrt();
        head.fc_v_w = (0..feat_dim).map(|_| rng.gen_range(-scale..scale)).collect();
        head.fc_v_b = vec![0.0; feat_dim];
        head.cls_w = (0..feat_dim).map(|_| rng.gen_range(-scale..scale)).collect();
        head
    }

    pub fn feat_dim(&self) -> usize {
        self.f2 + self.tel.k * self.f2
    }

    /// Freeze the volume normalization statistics from training data.
    pub fn set_bn_stats(&mut self, vmax: &[f64]) {
        let n = vmax.len().max(1) as f64;
        let mean = vmax.iter().sum::<f64>() / n;
        let var = vmax.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / n;
        self.bn_mean = mean;
        self.bn_std = var.sqrt().max(1e-6);
    }

    fn forward_patch(&self, patch: &TumorPatch, v_max: f64) -> Result<PatchForward> {
        let p = self.patch;
        if patch.channels.len() != self.c_in || patch.channels.iter().any(|c| c.len() != p * p) {
            return Err(Error::Input("tumor patch shape mismatch".into()));
        }
        let mut input = Tensor2::zeros(self.c_in, p, p);
        for (c, ch) in patch.channels.iter().enumerate() {
            input.plane_mut(c).copy_from_slice(ch);
        }
        let mut mask_t = Tensor2::zeros(1, p, p);
        mask_t.plane_mut(0).copy_from_slice(&patch.mask);

        let h1 = relu2(&self.conv1.forward(&input));
        let gate = relu2(&self.side.forward(&mask_t));
        let mut hg = h1.clone();
        for (v, g) in hg.data.iter_mut().zip(&gate.data) {
            *v *= g;
        }
        let h2 = relu2(&self.conv2.forward(&hg));
        let n_pos = h2.h * h2.w;
        // transpose to N x C rows for the texture encoder
        let mut x_mat = vec![0.0; n_pos * self.f2];
        for c in 0..self.f2 {
            let plane = h2.plane(c);
            for i in 0..n_pos {
                x_mat[i * self.f2 + c] = plane[i];
            }
        }
        let tel_fwd = self.tel.forward(&x_mat, n_pos);
        let mut feat = Vec::with_capacity(self.feat_dim());
        for c in 0..self.f2 {
            feat.push(h2.plane(c).iter().sum::<f64>() / n_pos as f64);
        }
        feat.extend_from_slice(&tel_fwd.out);

        let v_hat = (v_max - self.bn_mean) / self.bn_std;
        let bn_out = self.bn_gamma * v_hat + self.bn_beta;
        let mut z = self.cls_b;
        if self.use_volume {
            for d in 0..feat.len() {
                z += self.cls_w[d] * (feat[d] + self.fc_v_w[d] * bn_out + self.fc_v_b[d]);
            }
        } else {
            for d in 0..feat.len() {
                z += self.cls_w[d] * feat[d];
            }
        }
        let prob = 1.0 / (1.0 + (-z).exp());
        Ok(PatchForward { input, mask_t, h1, gate, hg, h2, x_mat, n_pos, tel_fwd, feat, v_hat, bn_out, prob })
    }

    /// Probability that one patch belongs to a metastasis-positive patient.
    pub fn patch_probability(&self, patch: &TumorPatch, v_max: f64) -> Result<f64> {
        Ok(self.forward_patch(patch, v_max)?.prob)
    }

    /// Ensemble prediction: the mean over the nine per-patch probabilities.
    pub fn fuse_and_classify(&self, set: &TumorPatchSet, v_max: f64) -> Result<f64> {
        if set.patches.len() != 9 {
            return Err(Error::Input(format!("expected 9 tumor patches, got {}", set.patches.len())));
        }
        let mut sum = 0.0;
        for patch in &set.patches {
            sum += self.forward_patch(patch, v_max)?.prob;
        }
        Ok(sum / 9.0)
    }

    pub fn flat_params(&self) -> Vec<f64> {
        let mut v = Vec::new();
        v.extend_from_slice(&self.conv1.weight);
        v.extend_from_slice(&self.conv1.bias);
        v.extend_from_slice(&self.side.weight);
        v.extend_from_slice(&self.side.bias);
        v.extend_from_slice(&self.conv2.weight);
        v.extend_from_slice(&self.conv2.bias);
        v.extend_from_slice(&self.tel.codewords);
        v.extend_from_slice(&self.tel.smoothing);
        v.push(self.bn_gamma);
        v.push(self.bn_beta);
        v.extend_from_slice(&self.fc_v_w);
        v.extend_from_slice(&self.fc_v_b);
        v.extend_from_slice(&self.cls_w);
        v.push(self.cls_b);
        v
    }

    pub fn load_flat_params(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.flat_params().len() {
            return Err(Error::Input("fusion parameter payload size mismatch".into()));
        }
        let mut off = 0;
        let mut take = |n: usize| -> &[f64] {
            let s = &flat[off..off + n];
            off += n;
            s
        };
        let nw1 = self.conv1.weight.len();
        let nb1 = self.conv1.bias.len();
        self.conv1.weight.copy_from_slice(take(nw1));
        self.conv1.bias.copy_from_slice(take(nb1));
        let nws = self.side.weight.len();
        let nbs = self.side.bias.len();
        self.side.weight.copy_from_slice(take(nws));
        self.side.bias.copy_from_slice(take(nbs));
        let nw2 = self.conv2.weight.len();
        let nb2 = self.conv2.bias.len();
        self.conv2.weight.copy_from_slice(take(nw2));
        self.conv2.bias.copy_from_slice(take(nb2));
        let nc = self.tel.codewords.len();
        let ns = self.tel.smoothing.len();
        self.tel.codewords.copy_from_slice(take(nc));
        self.tel.smoothing.copy_from_slice(take(ns));
        self.bn_gamma = take(1)[0];
        self.bn_beta = take(1)[0];
        let nfv = self.fc_v_w.len();
        self.fc_v_w.copy_from_slice(take(nfv));
        let nfb = self.fc_v_b.len();
        self.fc_v_b.copy_from_slice(take(nfb));
        let ncw = self.cls_w.len();
        self.cls_w.copy_from_slice(take(ncw));
        self.cls_b = take(1)[0];
        Ok(())
    }

    /// Zero the volume-feature affine; the head then computes exactly the
    /// tumor-only model.
    pub fn zero_volume_path(&mut self) {
        self.fc_v_w.iter_mut().for_each(|w| *w = 0.0);
        self.fc_v_b.iter_mut().for_each(|b| *b = 0.0);
        self.bn_gamma = 0.0;
        self.bn_beta = 0.0;
    }

    /// Binary cross entropy on one patch; gradient in `flat_params` order.
    fn loss_grad(&self, patch: &TumorPatch, v_max: f64, target: bool) -> Result<(f64, Vec<f64>)> {
        let fwd = self.forward_patch(patch, v_max)?;
        let y = f64::from(target);
        let pc = fwd.prob.clamp(1e-12, 1.0 - 1e-12);
        let loss = -(y * pc.ln() + (1.0 - y) * (1.0 - pc).ln());
        let dz = fwd.prob - y;

        let d = self.feat_dim();
        let mut g_cls_w = vec![0.0; d];
        let mut g_fc_v_w = vec![0.0; d];
        let mut g_fc_v_b = vec![0.0; d];
        let mut d_feat = vec![0.0; d];
        let mut g_bn_gamma = 0.0;
        let mut g_bn_beta = 0.0;
        for i in 0..d {
            let combined = if self.use_volume {
                fwd.feat[i] + self.fc_v_w[i] * fwd.bn_out + self.fc_v_b[i]
            } else {
                fwd.feat[i]
            };
            g_cls_w[i] = dz * combined;
            d_feat[i] = dz * self.cls_w[i];
        }
        if self.use_volume {
            let mut d_bn = 0.0;
            for i in 0..d {
                g_fc_v_w[i] = d_feat[i] * fwd.bn_out;
                g_fc_v_b[i] = d_feat[i];
                d_bn += d_feat[i] * self.fc_v_w[i];
            }
            g_bn_gamma = d_bn * fwd.v_hat;
            g_bn_beta = d_bn;
        }
        let g_cls_b = dz;

        // pooled + texture features back into the conv stack
        let n_pos = fwd.n_pos;
        let mut dh2 = Tensor2::zeros(self.f2, fwd.h2.h, fwd.h2.w);
        for c in 0..self.f2 {
            let g = d_feat[c] / n_pos as f64;
            dh2.plane_mut(c).iter_mut().for_each(|v| *v += g);
        }
        let mut g_code = vec![0.0; self.tel.codewords.len()];
        let mut g_smooth = vec![0.0; self.tel.smoothing.len()];
        let dx = self.tel.backward(&fwd.x_mat, &fwd.tel_fwd, &d_feat[self.f2..], &mut g_code, &mut g_smooth);
        for c in 0..self.f2 {
            let plane = dh2.plane_mut(c);
            for i in 0..n_pos {
                plane[i] += dx[i * self.f2 + c];
            }
        }
        let dc2 = relu2_backward(&fwd.h2, &dh2);
        let mut gw2 = vec![0.0; self.conv2.weight.len()];
        let mut gb2 = vec![0.0; self.conv2.bias.len()];
        let dhg = self.conv2.backward(&fwd.hg, &dc2, &mut gw2, &mut gb2);

        // gate product
        let mut dh1 = dhg.clone();
        for (v, g) in dh1.data.iter_mut().zip(&fwd.gate.data) {
            *v *= g;
        }
        let mut dgate = dhg;
        for (v, h) in dgate.data.iter_mut().zip(&fwd.h1.data) {
            *v *= h;
        }
        let dgate_pre = relu2_backward(&fwd.gate, &dgate);
        let mut gws = vec![0.0; self.side.weight.len()];
        let mut gbs = vec![0.0; self.side.bias.len()];
        let _ = self.side.backward(&fwd.mask_t, &dgate_pre, &mut gws, &mut gbs);

        let dc1 = relu2_backward(&fwd.h1, &dh1);
        let mut gw1 = vec![0.0; self.conv1.weight.len()];
        let mut gb1 = vec![0.0; self.conv1.bias.len()];
        let _ = self.conv1.backward(&fwd.input, &dc1, &mut gw1, &mut gb1);

        let mut flat = Vec::with_capacity(self.flat_params().len());
        flat.extend_from_slice(&gw1);
        flat.extend_from_slice(&gb1);
        flat.extend_from_slice(&gws);
        flat.extend_from_slice(&gbs);
        flat.extend_from_slice(&gw2);
        flat.extend_from_slice(&gb2);
        flat.extend_from_slice(&g_code);
        flat.extend_from_slice(&g_smooth);
        flat.push(g_bn_gamma);
        flat.push(g_bn_beta);
        flat.extend_from_slice(&g_fc_v_w);
        flat.extend_from_slice(&g_fc_v_b);
        flat.extend_from_slice(&g_cls_w);
        flat.push(g_cls_b);
        Ok((loss, flat))
    }
}

/// One training patient: tumor patches, largest-positive-node volume and
/// the metastasis label.
pub struct FusionSample {
    pub patches: TumorPatchSet,
    pub v_max: f64,
    pub label: bool,
}

pub struct FusionOutcome {
    pub head: FusionHead,
    /// Mean loss per epoch.
    pub trace: Vec<f64>,
}

/// Train the head on per-patch samples carrying their patient's label.
pub fn train_fusion(samples: &[FusionSample], cfg: &FusionConfig) -> Result<FusionOutcome> {
    let n_pos = samples.iter().filter(|s| s.label).count();
    if n_pos == 0 || n_pos == samples.len() {
        return Err(Error::Degenerate("fusion training needs both classes".into()));
    }
    let mut head = FusionHead::new(cfg);
    head.set_bn_stats(&samples.iter().map(|s| s.v_max).collect::<Vec<_>>());
    let mut pairs: Vec<(usize, usize)> = Vec::new();
    for (i, s) in samples.iter().enumerate() {
        for j in 0..s.patches.patches.len() {
            pairs.push((i, j));
        }
    }
    let opt_cfg = TrainConfig {
        lr: cfg.lr,
        momentum: cfg.momentum,
        nesterov: true,
        weight_decay: cfg.weight_decay,
        ..Default::default()
    };
    let n_params = head.flat_params().len();
    let mut velocity = vec![0.0f64; n_params];
    let mut trace = Vec::with_capacity(cfg.epochs);
    let _ = Sgd::new(0, &opt_cfg); // optimizer math inlined below in f64
    for epoch in 0..cfg.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(500 + epoch as u64);
        let mut order = pairs.clone();
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let mut grad = vec![0.0; n_params];
            for &(i, j) in chunk {
                let s = &samples[i];
                let (loss, g) = head.loss_grad(&s.patches.patches[j], s.v_max, s.label)?;
                epoch_loss += loss;
                for (a, b) in grad.iter_mut().zip(&g) {
                    *a += b;
                }
            }
            if !epoch_loss.is_finite() {
                return Err(Error::Numerical(format!("fusion loss diverged in epoch {epoch}")));
            }
            let b = chunk.len() as f64;
            let mut params = head.flat_params();
            for i in 0..n_params {
                let mut g = grad[i] / b + cfg.weight_decay * params[i];
                let v = cfg.momentum * velocity[i] + g;
                velocity[i] = v;
                g += cfg.momentum * v;
                params[i] -= cfg.lr * g;
            }
            head.load_flat_params(&params)?;
            // smoothing factors must stay positive
            for s in head.tel.smoothing.iter_mut() {
                *s = s.max(1e-3);
            }
        }
        trace.push(epoch_loss / pairs.len() as f64);
    }
    Ok(FusionOutcome { head, trace })
}
