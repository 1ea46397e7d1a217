//! Loss functions, attention injection, deep supervision and the miniature
//! trainable segmentation network.
//!
//! Loss values and gradients are computed with f64 accumulation so that
//! analytic gradients track central finite differences tightly.

pub mod infer;
pub mod net;
pub mod train;

pub use infer::{infer_segmentation, InferConfig};
pub use net::{MicroNet, Tensor};
pub use train::{load_checkpoint, save_checkpoint, train_micronet, TrainConfig, TrainOutcome};

use crate::error::{Error, Result};
use crate::volume::Dims;

/// Denominator guard for the overlap losses.
pub const TVERSKY_EPS: f64 = 1e-6;
/// Probability clamp applied before logarithms.
pub const LOG_CLIP: f64 = 1e-7;

/// Two-class per-voxel probabilities, channel-major (class 0 then class 1).
#[derive(Debug, Clone, PartialEq)]
pub struct ProbField {
    pub dims: Dims,
    pub data: Vec<f32>,
}

impl ProbField {
    pub fn new(dims: Dims, data: Vec<f32>) -> Result<Self> {
        if data.len() != 2 * dims.len() {
            return Err(Error::Input("probability field needs two channels".into()));
        }
        let n = dims.len();
        for i in 0..n {
            let s = data[i] + data[n + i];
            if (s - 1.0).abs() > 1e-5 {
                return Err(Error::Input(format!("probabilities at voxel {i} sum to {s}")));
            }
        }
        Ok(ProbField { dims, data })
    }

    /// Skips the normalization check; used when a caller perturbs entries
    /// deliberately (finite differences) or the softmax already guarantees it.
    pub fn new_unchecked(dims: Dims, data: Vec<f32>) -> Self {
        ProbField { dims, data }
    }

    pub fn from_tensor(t: &net::Tensor) -> Result<Self> {
        if t.channels != 2 {
            return Err(Error::Input("probability tensor needs two channels".into()));
        }
        Ok(ProbField { dims: t.dims, data: t.data.clone() })
    }

    #[inline]
    pub fn p0(&self, v: usize) -> f64 {
        self.data[v] as f64
    }

    #[inline]
    pub fn p1(&self, v: usize) -> f64 {
        self.data[self.dims.len() + v] as f64
    }
}

/// One-hot two-class targets; stores the foreground indicator.
#[derive(Debug, Clone, PartialEq)]
pub struct OneHotField {
    pub dims: Dims,
    pub fg: Vec<bool>,
}

impl OneHotField {
    pub fn from_labels(labels: &crate::volume::LabelVolume) -> Self {
        OneHotField { dims: labels.dims, fg: labels.data.iter().map(|&v| v > 0).collect() }
    }

    #[inline]
    pub fn y1(&self, v: usize) -> f64 {
        f64::from(self.fg[v])
    }

    #[inline]
    pub fn y0(&self, v: usize) -> f64 {
        f64::from(!self.fg[v])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TverskyWeights {
    pub alpha: f64,
    pub beta: f64,
}

impl Default for TverskyWeights {
    fn default() -> Self {
        // false negatives weighted harder to push recall
        TverskyWeights { alpha: 0.5, beta: 1.5 }
    }
}

impl TverskyWeights {
    pub fn new(alpha: f64, beta: f64) -> Result<Self> {
        if alpha < 0.0 || beta < 0.0 {
            return Err(Error::Input("tversky weights must be non-negative".into()));
        }
        Ok(TverskyWeights { alpha, beta })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum TverskyForm {
    /// -(2/|V|) * S / (2S + a*FP + b*FN); bounded in [-1/|V|, 0].
    Paper,
    /// 1 - S / (S + a*FP + b*FN); bounded in [0, 1].
    Standard,
}

/// A scalar loss plus its gradient with respect to both probability
/// channels, laid out like the field (class 0 then class 1).
#[derive(Debug, Clone)]
pub struct LossValue {
    pub value: f64,
    pub grad: Vec<f64>,
}

fn check_aligned(p: &ProbField, y: &OneHotField) -> Result<usize> {
    if p.dims != y.dims {
        return Err(Error::Input("probability and target fields are not aligned".into()));
    }
    Ok(p.dims.len())
}

/// Tversky overlap loss with exact analytic gradient.
pub fn tversky_loss(p: &ProbField, y: &OneHotField, w: &TverskyWeights, form: TverskyForm) -> Result<LossValue> {
    let n = check_aligned(p, y)?;
    let mut s1 = 0f64; // sum p1*y1
    let mut e_fp = 0f64; // sum p1*y0
    let mut e_fn = 0f64; // sum p0*y1
    for v in 0..n {
        if y.fg[v] {
            s1 += p.p1(v);
            e_fn += p.p0(v);
        } else {
            e_fp += p.p1(v);
        }
    }
    let nv = n as f64;
    let mut grad = vec![0f64; 2 * n];
    let value = match form {
        TverskyForm::Paper => {
            let den = 2.0 * s1 + w.alpha * e_fp + w.beta * e_fn + TVERSKY_EPS;
            let val = -(2.0 / nv) * s1 / den;
            for v in 0..n {
                let (y1, y0) = (y.y1(v), y.y0(v));
                // d/dp1: quotient rule over (s1, den)
                grad[n + v] = -(2.0 / nv) * (y1 * den - s1 * (2.0 * y1 + w.alpha * y0)) / (den * den);
                // d/dp0 enters only through the false-negative term
                grad[v] = (2.0 / nv) * s1 * w.beta * y1 / (den * den);
            }
            val
        }
        TverskyForm::Standard => {
            let den = s1 + w.alpha * e_fp + w.beta * e_fn + TVERSKY_EPS;
            let val = 1.0 - s1 / den;
            for v in 0..n {
                let (y1, y0) = (y.y1(v), y.y0(v));
                grad[n + v] = -(y1 * den - s1 * (y1 + w.alpha * y0)) / (den * den);
                grad[v] = s1 * w.beta * y1 / (den * den);
            }
            val
        }
    };
    Ok(LossValue { value, grad })
}

/// Mean two-class cross entropy; probabilities are clamped before the log.
pub fn ce_loss(p: &ProbField, y: &OneHotField) -> Result<LossValue> {
    let n = check_aligned(p, y)?;
    let nv = n as f64;
    let clip = |x: f64| x.clamp(LOG_CLIP, 1.0 - LOG_CLIP);
    let mut value = 0f64;
    let mut grad = vec![0f64; 2 * n];
    for v in 0..n {
        if y.fg[v] {
            let pv = p.p1(v);
            value -= clip(pv).ln();
            // zero gradient outside the clamp range
            if pv > LOG_CLIP && pv < 1.0 - LOG_CLIP {
                grad[n + v] = -1.0 / (nv * pv);
            }
        } else {
            let pv = p.p0(v);
            value -= clip(pv).ln();
            if pv > LOG_CLIP && pv < 1.0 - LOG_CLIP {
                grad[v] = -1.0 / (nv * pv);
            }
        }
    }
    Ok(LossValue { value: value / nv, grad })
}

/// Cross entropy plus Tversky, equal weights; gradients add.
pub fn combined_loss(p: &ProbField, y: &OneHotField, w: &TverskyWeights, form: TverskyForm) -> Result<CombinedLoss> {
    let ce = ce_loss(p, y)?;
    let tv = tversky_loss(p, y, w, form)?;
    let grad = ce.grad.iter().zip(&tv.grad).map(|(a, b)| a + b).collect();
    Ok(CombinedLoss { ce: ce.value, tversky: tv.value, total: ce.value + tv.value, grad })
}

#[derive(Debug, Clone)]
pub struct CombinedLoss {
    pub ce: f64,
    pub tversky: f64,
    pub total: f64,
    pub grad: Vec<f64>,
}

/// Element-wise feature gating by an attention map, broadcast over channels.
/// Linear in the features and exactly zero wherever the map is zero.
pub fn attention_inject(features: &net::Tensor, attention: &[f32]) -> Result<net::Tensor> {
    net::gate_mul(features, attention)
}

/// Deep-supervision weights: halve per coarser level, normalized to one.
pub fn deep_supervision_weights(levels: usize) -> Vec<f64> {
    let raw: Vec<f64> = (0..levels).map(|l| 0.5f64.powi(l as i32)).collect();
    let total: f64 = raw.iter().sum();
    raw.iter().map(|w| w / total).collect()
}

/// Weighted multi-resolution loss. Attention maps ride along per level so
/// alignment mistakes surface here rather than deep in training.
pub fn deep_supervision_loss(
    outputs: &[ProbField],
    targets: &[OneHotField],
    attention: Option<&[&[f32]]>,
    w: &TverskyWeights,
    form: TverskyForm,
) -> Result<DeepSupervisionLoss> {
    if outputs.is_empty() || outputs.len() != targets.len() {
        return Err(Error::Input("deep supervision needs matched per-level outputs and targets".into()));
    }
    if let Some(att) = attention {
        if att.len() != outputs.len() {
            return Err(Error::Input("deep supervision attention level count mismatch".into()));
        }
        for (a, o) in att.iter().zip(outputs) {
            if a.len() != o.dims.len() {
                return Err(Error::Input("deep supervision attention dims mismatch".into()));
            }
        }
    }
    let weights = deep_supervision_weights(outputs.len());
    let mut total = 0f64;
    let mut ce = 0f64;
    let mut tversky = 0f64;
    let mut grads = Vec::with_capacity(outputs.len());
    for (l, (p, y)) in outputs.iter().zip(targets).enumerate() {
        let c = combined_loss(p, y, w, form)?;
        total += weights[l] * c.total;
        ce += weights[l] * c.ce;
        tversky += weights[l] * c.tversky;
        grads.push(c.grad.iter().map(|g| weights[l] * g).collect());
    }
    Ok(DeepSupervisionLoss { total, ce, tversky, level_grads: grads })
}

#[derive(Debug, Clone)]
pub struct DeepSupervisionLoss {
    pub total: f64,
    pub ce: f64,
    pub tversky: f64,
    /// Per-level gradients w.r.t. the probability fields, already weighted.
    pub level_grads: Vec<Vec<f64>>,
}
