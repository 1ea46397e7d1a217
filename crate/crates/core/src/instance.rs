//! Stage-2 machinery: node instance extraction, fixed-shape cropping,
//! positive/negative identification and the class-aware mask.

use crate::error::{Error, Result};
use crate::learn::net::{relu, relu_backward, Conv3d, MicroNet, Tensor};
use crate::learn::train::Sgd;
use crate::learn::TrainConfig;
use crate::volume::{
    connected_components, crop_patch_scalar, volume_mm3, Connectivity, Dims, LabelVolume, PadMode,
    PatchSpec, ScalarVolume, Spacing,
};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use std::io::{Read, Write};
use std::path::Path;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize)]
pub enum GtLabel {
    Positive,
    Negative,
    Unknown,
}

/// One connected node component with its measurements and labels.
#[derive(Debug, Clone)]
pub struct LNInstance {
    /// Component ID from connected-component labeling, 1-based.
    pub id: u16,
    /// Sorted linear voxel indices.
    pub voxels: Vec<usize>,
    pub centroid: (f64, f64, f64),
    pub volume_mm3: f64,
    pub gt_label: GtLabel,
    pub pred_score: Option<f64>,
    pub pred_label: Option<bool>,
}

fn instances_from_component_volume(cc: &LabelVolume, spacing: Spacing) -> Result<Vec<LNInstance>> {
    let k = cc.data.iter().copied().max().unwrap_or(0) as usize;
    let mut voxels: Vec<Vec<usize>> = vec![Vec::new(); k];
    for (idx, &l) in cc.data.iter().enumerate() {
        if l > 0 {
            voxels[l as usize - 1].push(idx);
        }
    }
    let dims = cc.dims;
    voxels
        .into_iter()
        .enumerate()
        .map(|(i, vs)| {
            let mut c = (0f64, 0f64, 0f64);
            for &v in &vs {
                let (x, y, z) = dims.coords(v);
                c.0 += x as f64;
                c.1 += y as f64;
                c.2 += z as f64;
            }
            let n = vs.len() as f64;
            Ok(LNInstance {
                id: (i + 1) as u16,
                volume_mm3: volume_mm3(vs.len(), spacing)?,
                centroid: (c.0 / n, c.1 / n, c.2 / n),
                voxels: vs,
                gt_label: GtLabel::Unknown,
                pred_score: None,
                pred_label: None,
            })
        })
        .collect()
}

/// Extract instances from a binary segmentation, ordered by component ID.
pub fn extract_instances(seg: &LabelVolume, spacing: Spacing) -> Result<Vec<LNInstance>> {
    if seg.data.iter().all(|&v| v == 0) {
        return Ok(Vec::new());
    }
    let cc = connected_components(seg, Connectivity::TwentySix)?;
    instances_from_component_volume(&cc, spacing)
}

/// Instances from a ground-truth volume that already carries instance IDs,
/// with positivity attached.
pub fn instances_from_gt(ln_gt: &LabelVolume, positive: &[bool]) -> Result<Vec<LNInstance>> {
    let mut out = instances_from_component_volume(ln_gt, ln_gt.spacing)?;
    if out.len() != positive.len() {
        return Err(Error::Input(format!(
            "gt volume has {} instances but {} positivity flags",
            out.len(),
            positive.len()
        )));
    }
    for (inst, &p) in out.iter_mut().zip(positive) {
        inst.gt_label = if p { GtLabel::Positive } else { GtLabel::Negative };
    }
    Ok(out)
}

/// Fixed-shape multi-channel crop centered at an instance centroid
/// (rounded toward the lower index), zero-padded at borders.
#[derive(Debug, Clone)]
pub struct InstanceCrop {
    pub channels: Vec<ScalarVolume>,
}

pub fn crop_instance(images: &[&ScalarVolume], inst: &LNInstance, shape: (usize, usize, usize)) -> Result<InstanceCrop> {
    let center = (
        inst.centroid.0.floor() as i64,
        inst.centroid.1.floor() as i64,
        inst.centroid.2.floor() as i64,
    );
    let spec = PatchSpec::new(center, Dims::new(shape.0, shape.1, shape.2))?;
    Ok(InstanceCrop {
        channels: images.iter().map(|im| crop_patch_scalar(im, &spec, PadMode::Zero)).collect(),
    })
}

/// Segmentation encoder plus a pooled classification head.
#[derive(Debug, Clone)]
pub struct InstanceClassifier {
    pub conv_e0: Conv3d,
    pub conv_down: Conv3d,
    pub conv_bott: Conv3d,
    pub fc_w: Vec<f32>,
    pub fc_b: f32,
}

struct ClsForward {
    input: Tensor,
    e0: Tensor,
    d0: Tensor,
    b: Tensor,
    pooled: Vec<f32>,
    prob: f64,
}

impl InstanceClassifier {
    /// Encoder parameters copied bitwise from a trained segmentation
    /// network; the head starts fresh.
    pub fn from_micronet(net: &MicroNet, rng: &mut ChaCha8Rng) -> Self {
        let c1 = 2 * net.c0;
        let scale = (1.0 / c1 as f32).sqrt();
        InstanceClassifier {
            conv_e0: net.conv_e0.clone(),
            conv_down: net.conv_down.clone(),
            conv_bott: net.conv_bott.clone(),
            fc_w: (0..c1).map(|_| rng.gen_range(-1.0f32..1.0) * scale).collect(),
            fc_b: 0.0,
        }
    }

    fn forward(&self, input: &Tensor) -> ClsForward {
        let e0 = relu(&self.conv_e0.forward(input));
        let d0 = relu(&self.conv_down.forward(&e0));
        let b = relu(&self.conv_bott.forward(&d0));
        let n = b.dims.len() as f64;
        let pooled: Vec<f32> =
            (0..b.channels).map(|c| (b.channel(c).iter().map(|&v| v as f64).sum::<f64>() / n) as f32).collect();
        let z: f64 = pooled.iter().zip(&self.fc_w).map(|(&g, &w)| (g * w) as f64).sum::<f64>()
            + self.fc_b as f64;
        let prob = 1.0 / (1.0 + (-z).exp());
        ClsForward { input: input.clone(), e0, d0, b, pooled, prob }
    }

    /// Probability that a crop holds a positive node.
    pub fn score(&self, crop: &InstanceCrop) -> Result<f64> {
        let input = crop_to_tensor(crop)?;
        Ok(self.forward(&input).prob)
    }

    pub fn flat_params(&self) -> Vec<f32> {
        let mut v = Vec::new();
        for c in [&self.conv_e0, &self.conv_down, &self.conv_bott] {
            v.extend(c.params());
        }
        v.extend_from_slice(&self.fc_w);
        v.push(self.fc_b);
        v
    }

    pub fn load_flat_params(&mut self, flat: &[f32]) -> Result<()> {
        let expect = self.flat_params().len();
        if flat.len() != expect {
            return Err(Error::Input("classifier parameter payload size mismatch".into()));
        }
        let mut off = 0;
        for c in [&mut self.conv_e0, &mut self.conv_down, &mut self.conv_bott] {
            let n = c.param_count();
            c.load_params(&flat[off..off + n])?;
            off += n;
        }
        let nf = self.fc_w.len();
        self.fc_w.copy_from_slice(&flat[off..off + nf]);
        self.fc_b = flat[off + nf];
        Ok(())
    }
}

fn crop_to_tensor(crop: &InstanceCrop) -> Result<Tensor> {
    let dims = crop.channels[0].dims;
    Tensor::from_channels(dims, crop.channels.iter().map(|c| c.data.clone()).collect())
}

/// Binary cross entropy on the sigmoid output; returns (loss, parameter
/// gradient in `flat_params` order).
fn classifier_loss_grad(cls: &InstanceClassifier, input: &Tensor, target: bool) -> (f64, Vec<f64>) {
    let fwd = cls.forward(input);
    let y = f64::from(target);
    let p = fwd.prob.clamp(crate::learn::LOG_CLIP, 1.0 - crate::learn::LOG_CLIP);
    let loss = -(y * p.ln() + (1.0 - y) * (1.0 - p).ln());
    let dz = fwd.prob - y;

    let mut g_e0 = cls.conv_e0.zero_grad();
    let mut g_down = cls.conv_down.zero_grad();
    let mut g_bott = cls.conv_bott.zero_grad();
    let g_fcw: Vec<f64> = fwd.pooled.iter().map(|&g| g as f64 * dz).collect();
    let g_fcb = dz;

    // gradient into the pooled features, then uniformly into the map
    let n = fwd.b.dims.len() as f64;
    let mut gb = Tensor::zeros(fwd.b.channels, fwd.b.dims);
    for c in 0..fwd.b.channels {
        let gch = (dz * cls.fc_w[c] as f64 / n) as f32;
        gb.channel_mut(c).fill(gch);
    }
    let gb = relu_backward(&fwd.b, &gb);
    let gd0 = cls.conv_bott.backward(&fwd.d0, &gb, &mut g_bott);
    let gd0 = relu_backward(&fwd.d0, &gd0);
    let ge0 = cls.conv_down.backward(&fwd.e0, &gd0, &mut g_down);
    let ge0 = relu_backward(&fwd.e0, &ge0);
    let _ = cls.conv_e0.backward(&fwd.input, &ge0, &mut g_e0);

    let mut flat = Vec::new();
    for g in [&g_e0, &g_down, &g_bott] {
        flat.extend_from_slice(&g.weight);
        flat.extend_from_slice(&g.bias);
    }
    flat.extend_from_slice(&g_fcw);
    flat.push(g_fcb);
    (loss, flat)
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct IdentifierConfig {
    pub crop_shape: (usize, usize, usize),
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for IdentifierConfig {
    fn default() -> Self {
        IdentifierConfig {
            crop_shape: (24, 24, 24),
            epochs: 8,
            batch_size: 8,
            lr: 5e-4,
            momentum: 0.95,
            weight_decay: 1e-4,
            seed: 0,
        }
    }
}

/// A labeled training crop.
pub struct LabeledCrop {
    pub crop: InstanceCrop,
    pub positive: bool,
}

pub struct IdentifierOutcome {
    pub classifier: InstanceClassifier,
    /// Mean loss per epoch.
    pub trace: Vec<f64>,
}

/// Fine-tune the segmentation encoder with a fresh pooled head on labeled
/// ground-truth crops.
pub fn train_identifier(
    crops: &[LabeledCrop],
    pretrained: &MicroNet,
    cfg: &IdentifierConfig,
) -> Result<IdentifierOutcome> {
    let n_pos = crops.iter().filter(|c| c.positive).count();
    if n_pos == 0 || n_pos == crops.len() {
        return Err(Error::Degenerate(format!(
            "identifier training needs both classes, got {n_pos} positives of {}",
            crops.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut cls = InstanceClassifier::from_micronet(pretrained, &mut rng);
    let inputs: Vec<Tensor> = crops.iter().map(|c| crop_to_tensor(&c.crop)).collect::<Result<_>>()?;
    let train_cfg = TrainConfig {
        lr: cfg.lr,
        momentum: cfg.momentum,
        nesterov: true,
        weight_decay: cfg.weight_decay,
        ..Default::default()
    };
    let n_params = cls.flat_params().len();
    let mut opt = Sgd::new(n_params, &train_cfg);
    let mut trace = Vec::with_capacity(cfg.epochs);
    let mut order: Vec<usize> = (0..crops.len()).collect();
    for epoch in 0..cfg.epochs {
        let mut epoch_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        epoch_rng.set_stream(1000 + epoch as u64);
        order.shuffle(&mut epoch_rng);
        let mut epoch_loss = 0f64;
        for chunk in order.chunks(cfg.batch_size) {
            let mut grad = vec![0f64; n_params];
            let mut batch_loss = 0f64;
            for &i in chunk {
                let (loss, g) = classifier_loss_grad(&cls, &inputs[i], crops[i].positive);
                batch_loss += loss;
                for (a, b) in grad.iter_mut().zip(&g) {
                    *a += b;
                }
            }
            let b = chunk.len() as f64;
            for g in grad.iter_mut() {
                *g /= b;
            }
            if !batch_loss.is_finite() {
                return Err(Error::Numerical(format!("identifier loss diverged in epoch {epoch}")));
            }
            epoch_loss += batch_loss;
            let mut params = cls.flat_params();
            opt.step(&mut params, &grad);
            cls.load_flat_params(&params)?;
        }
        trace.push(epoch_loss / crops.len() as f64);
    }
    Ok(IdentifierOutcome { classifier: cls, trace })
}

/// Score segmented instances and assemble the class-aware mask
/// (1 = negative node, 2 = positive node). The foreground voxel set is
/// exactly the stage-1 segmentation; only labels change.
pub fn identify_instances(
    classifier: &InstanceClassifier,
    images: &[&ScalarVolume],
    instances: &mut [LNInstance],
    crop_shape: (usize, usize, usize),
    threshold: f64,
) -> Result<LabelVolume> {
    let dims = images[0].dims;
    let spacing = images[0].spacing;
    let scores: Vec<f64> = instances
        .par_iter()
        .map(|inst| -> Result<f64> {
            let crop = crop_instance(images, inst, crop_shape)?;
            classifier.score(&crop)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut mask = LabelVolume::filled(dims, spacing, 0);
    for (inst, score) in instances.iter_mut().zip(scores) {
        inst.pred_score = Some(score);
        let positive = score >= threshold;
        inst.pred_label = Some(positive);
        let label = if positive { 2u16 } else { 1u16 };
        for &v in &inst.voxels {
            mask.data[v] = label;
        }
    }
    Ok(mask)
}

const ID_CKPT_MAGIC: &[u8; 4] = b"LNIC";

pub fn save_identifier(path: impl AsRef<Path>, cls: &InstanceClassifier) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    f.write_all(ID_CKPT_MAGIC)?;
    f.write_all(&[1u8])?;
    f.write_all(&(cls.conv_e0.c_in as u32).to_le_bytes())?;
    f.write_all(&(cls.conv_e0.c_out as u32).to_le_bytes())?;
    let params = cls.flat_params();
    f.write_all(&(params.len() as u64).to_le_bytes())?;
    for p in params {
        f.write_all(&p.to_le_bytes())?;
    }
    Ok(())
}

pub fn load_identifier(path: impl AsRef<Path>) -> Result<InstanceClassifier> {
    let path = path.as_ref();
    let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut head = [0u8; 21];
    f.read_exact(&mut head)
        .map_err(|_| Error::Input(format!("{}: truncated identifier header", path.display())))?;
    if &head[0..4] != ID_CKPT_MAGIC || head[4] != 1 {
        return Err(Error::Input(format!("{}: bad identifier checkpoint", path.display())));
    }
    let c_in = u32::from_le_bytes(head[5..9].try_into().unwrap()) as usize;
    let c0 = u32::from_le_bytes(head[9..13].try_into().unwrap()) as usize;
    let count = u64::from_le_bytes(head[13..21].try_into().unwrap()) as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let net = MicroNet::new(c_in, c0, &mut rng);
    let mut cls = InstanceClassifier::from_micronet(&net, &mut rng);
    if cls.flat_params().len() != count {
        return Err(Error::Input(format!("{}: identifier parameter count mismatch", path.display())));
    }
    let mut buf = vec![0u8; count * 4];
    f.read_exact(&mut buf)
        .map_err(|_| Error::Input(format!("{}: truncated identifier payload", path.display())))?;
    let flat: Vec<f32> = buf.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
    cls.load_flat_params(&flat)?;
    Ok(cls)
}
