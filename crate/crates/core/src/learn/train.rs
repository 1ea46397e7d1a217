//! Stochastic gradient training for the segmentation network, plus the
//! checkpoint file format.

use super::net::{MicroNet, MicroNetGrad, Tensor};
use super::{deep_supervision_loss, OneHotField, ProbField, TverskyForm, TverskyWeights};
use crate::distance::{downsample_attention, AttentionMap};
use crate::error::{Error, Result};
use crate::sampler::{plan_sampler, sample_batch, SamplePatch, SamplerCase, SamplerConfig};
use crate::volume::{Dims, LabelVolume, Spacing};
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::path::Path;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub patch_shape: (usize, usize, usize),
    pub lr: f64,
    pub momentum: f64,
    pub nesterov: bool,
    pub weight_decay: f64,
    pub base_channels: usize,
    pub seed: u64,
    pub use_attention: bool,
    pub tversky: TverskyWeights,
    pub form: TverskyForm,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 200,
            batch_size: 2,
            patch_shape: (24, 24, 24),
            lr: 0.01,
            momentum: 0.95,
            nesterov: true,
            weight_decay: 0.0,
            base_channels: 8,
            seed: 0,
            use_attention: true,
            tversky: TverskyWeights::default(),
            form: TverskyForm::Paper,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TraceStep {
    pub step: usize,
    pub l_ce: f64,
    pub l_t: f64,
    pub l_seg: f64,
}

pub struct TrainOutcome {
    pub net: MicroNet,
    pub trace: Vec<TraceStep>,
}

/// Nesterov-momentum SGD over one flat parameter vector.
pub struct Sgd {
    velocity: Vec<f64>,
    lr: f64,
    momentum: f64,
    nesterov: bool,
    weight_decay: f64,
}

impl Sgd {
    pub fn new(n: usize, cfg: &TrainConfig) -> Self {
        Sgd {
            velocity: vec![0.0; n],
            lr: cfg.lr,
            momentum: cfg.momentum,
            nesterov: cfg.nesterov,
            weight_decay: cfg.weight_decay,
        }
    }

    pub fn step(&mut self, params: &mut [f32], grads: &[f64]) {
        for i in 0..params.len() {
            let mut g = grads[i] + self.weight_decay * params[i] as f64;
            let v = self.momentum * self.velocity[i] + g;
            self.velocity[i] = v;
            if self.nesterov {
                g += self.momentum * v;
            } else {
                g = v;
            }
            params[i] = (params[i] as f64 - self.lr * g) as f32;
        }
    }
}

impl MicroNetGrad {
    /// Flatten in the same order as `MicroNet::flat_params`.
    pub fn flat(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for g in [
            &self.conv_e0,
            &self.conv_down,
            &self.conv_bott,
            &self.conv_up,
            &self.conv_dec,
            &self.head0,
            &self.head1,
        ] {
            out.extend_from_slice(&g.weight);
            out.extend_from_slice(&g.bias);
        }
        out
    }
}

pub(crate) fn patch_input_tensor(patch: &SamplePatch) -> Result<Tensor> {
    let dims = patch.labels.dims;
    Tensor::from_channels(dims, patch.images.iter().map(|im| im.data.clone()).collect())
}

/// Nearest-neighbor label downsampling by 2 per axis.
fn downsample_labels2(labels: &LabelVolume) -> LabelVolume {
    let id = labels.dims;
    let od = Dims::new(id.w / 2, id.h / 2, id.d / 2);
    let mut data = vec![0u16; od.len()];
    for z in 0..od.d {
        for y in 0..od.h {
            for x in 0..od.w {
                data[od.index(x, y, z)] = labels.at(2 * x, 2 * y, 2 * z);
            }
        }
    }
    LabelVolume { dims: od, spacing: labels.spacing, data }
}

fn attention_levels(patch: &SamplePatch) -> Result<(Vec<f32>, Vec<f32>)> {
    let dims = patch.labels.dims;
    let a0 = AttentionMap {
        dims,
        spacing: Spacing::isotropic(1.0).unwrap(),
        data: patch.attention.clone(),
    };
    let a1 = downsample_attention(&a0, (2, 2, 2))?;
    Ok((a0.data, a1.data))
}

/// One forward/backward pass over a sampled patch; returns the per-level
/// loss triple (ce, tversky, total).
pub(crate) fn accumulate_patch(
    net: &MicroNet,
    patch: &SamplePatch,
    cfg: &TrainConfig,
    grad: &mut MicroNetGrad,
) -> Result<(f64, f64, f64)> {
    let input = patch_input_tensor(patch)?;
    let atts = if cfg.use_attention { Some(attention_levels(patch)?) } else { None };
    let fwd = match &atts {
        Some((a0, a1)) => net.forward(&input, Some((a0, a1)))?,
        None => net.forward(&input, None)?,
    };
    let p0 = ProbField::from_tensor(&fwd.p0)?;
    let p1 = ProbField::from_tensor(&fwd.p1)?;
    let y0 = OneHotField::from_labels(&patch.labels);
    let y1 = OneHotField::from_labels(&downsample_labels2(&patch.labels));
    let ds = deep_supervision_loss(&[p0, p1], &[y0, y1], None, &cfg.tversky, cfg.form)?;
    let to_tensor = |g: &[f64], dims: Dims| -> Tensor {
        Tensor { channels: 2, dims, data: g.iter().map(|&v| v as f32).collect() }
    };
    let g0 = to_tensor(&ds.level_grads[0], fwd.p0.dims);
    let g1 = to_tensor(&ds.level_grads[1], fwd.p1.dims);
    net.backward(&fwd, &g0, &g1, grad);
    Ok((ds.ce, ds.tversky, ds.total))
}

/// Train the segmentation network on a case set. Deterministic for a given
/// seed: sampling uses counter-derived streams and every reduction runs in
/// a fixed order.
pub fn train_micronet(cases: Vec<SamplerCase<'_>>, cfg: &TrainConfig) -> Result<TrainOutcome> {
    let c_in = cases.first().map(|c| c.images.len()).unwrap_or(0);
    if c_in == 0 {
        return Err(Error::Input("training needs at least one image channel".into()));
    }
    let scfg = SamplerConfig {
        patch_shape: cfg.patch_shape,
        batch_size: cfg.batch_size,
        seed: cfg.seed,
        informative: cfg.use_attention,
    };
    let plan = plan_sampler(cases, &scfg)?;
    let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(cfg.seed);
    let mut net = MicroNet::new(c_in, cfg.base_channels, &mut rng);
    let mut opt = Sgd::new(net.param_count(), cfg);
    let mut trace = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let batch = sample_batch(&plan, &scfg, step as u64)?;
        let mut grad = net.zero_grad();
        let mut sums = (0f64, 0f64, 0f64);
        for patch in &batch.patches {
            let (ce, tv, total) = accumulate_patch(&net, patch, cfg, &mut grad)?;
            sums.0 += ce;
            sums.1 += tv;
            sums.2 += total;
        }
        let b = batch.patches.len() as f64;
        let row = TraceStep { step, l_ce: sums.0 / b, l_t: sums.1 / b, l_seg: sums.2 / b };
        if !row.l_seg.is_finite() {
            return Err(Error::Numerical(format!(
                "loss diverged at step {step}: ce {} tversky {}",
                row.l_ce, row.l_t
            )));
        }
        trace.push(row);
        let mut flat_grad = grad.flat();
        for g in flat_grad.iter_mut() {
            *g /= b;
        }
        let mut params = net.flat_params();
        opt.step(&mut params, &flat_grad);
        net.load_flat_params(&params)?;
    }
    Ok(TrainOutcome { net, trace })
}

/// Mean of `l_seg` over trailing windows of the trace.
pub fn smoothed_trace(trace: &[TraceStep], window: usize) -> Vec<f64> {
    trace
        .windows(window.max(1))
        .map(|w| w.iter().map(|t| t.l_seg).sum::<f64>() / w.len() as f64)
        .collect()
}

const CKPT_MAGIC: &[u8; 4] = b"LNCK";
const CKPT_VERSION: u8 = 1;

/// Versioned header plus a flat little-endian f32 parameter payload.
pub fn save_checkpoint(path: impl AsRef<Path>, net: &MicroNet) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    f.write_all(CKPT_MAGIC)?;
    f.write_all(&[CKPT_VERSION])?;
    f.write_all(&(net.c_in as u32).to_le_bytes())?;
    f.write_all(&(net.c0 as u32).to_le_bytes())?;
    let params = net.flat_params();
    f.write_all(&(params.len() as u64).to_le_bytes())?;
    for p in params {
        f.write_all(&p.to_le_bytes())?;
    }
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<MicroNet> {
    let path = path.as_ref();
    let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut head = [0u8; 21];
    f.read_exact(&mut head)
        .map_err(|_| Error::Input(format!("{}: truncated checkpoint header", path.display())))?;
    if &head[0..4] != CKPT_MAGIC {
        return Err(Error::Input(format!("{}: bad checkpoint magic", path.display())));
    }
    if head[4] != CKPT_VERSION {
        return Err(Error::Input(format!("{}: unsupported checkpoint version {}", path.display(), head[4])));
    }
    let c_in = u32::from_le_bytes(head[5..9].try_into().unwrap()) as usize;
    let c0 = u32::from_le_bytes(head[9..13].try_into().unwrap()) as usize;
    let count = u64::from_le_bytes(head[13..21].try_into().unwrap()) as usize;
    let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
    let mut net = MicroNet::new(c_in, c0, &mut rng);
    if net.param_count() != count {
        return Err(Error::Input(format!(
            "{}: checkpoint holds {count} params, architecture needs {}",
            path.display(),
            net.param_count()
        )));
    }
    let mut buf = vec![0u8; count * 4];
    f.read_exact(&mut buf)
        .map_err(|_| Error::Input(format!("{}: truncated checkpoint payload", path.display())))?;
    let flat: Vec<f32> = buf.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
    net.load_flat_params(&flat)?;
    Ok(net)
}
