//! Multi-channel 3D tensors, convolution layers with explicit backward
//! passes, and the small encoder-decoder used for segmentation.
//!
//! Parallel sections split work over output channels only, so results are
//! bitwise identical across thread counts: every accumulation runs in a
//! fixed order within one thread.

use crate::error::{Error, Result};
use crate::volume::Dims;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

/// Dense (channels, w, h, d) tensor, x-fastest within a channel.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub channels: usize,
    pub dims: Dims,
    pub data: Vec<f32>,
}

impl Tensor {
    pub fn zeros(channels: usize, dims: Dims) -> Self {
        Tensor { channels, dims, data: vec![0.0; channels * dims.len()] }
    }

    pub fn from_channels(dims: Dims, channels: Vec<Vec<f32>>) -> Result<Self> {
        let n = dims.len();
        if channels.iter().any(|c| c.len() != n) {
            return Err(Error::Input("channel length does not match dims".into()));
        }
        let c = channels.len();
        let mut data = Vec::with_capacity(c * n);
        for ch in channels {
            data.extend_from_slice(&ch);
        }
        Ok(Tensor { channels: c, dims, data })
    }

    #[inline]
    pub fn channel(&self, c: usize) -> &[f32] {
        let n = self.dims.len();
        &self.data[c * n..(c + 1) * n]
    }

    #[inline]
    pub fn channel_mut(&mut self, c: usize) -> &mut [f32] {
        let n = self.dims.len();
        &mut self.data[c * n..(c + 1) * n]
    }
}

/// 3D convolution with odd kernel (1 or 3), symmetric zero padding k/2 and
/// stride 1 or 2.
#[derive(Debug, Clone)]
pub struct Conv3d {
    pub c_in: usize,
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
    /// Layout [c_out][c_in][kz][ky][kx].
    pub weight: Vec<f32>,
    pub bias: Vec<f32>,
}

#[derive(Debug, Clone)]
pub struct Conv3dGrad {
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Conv3d {
    pub fn new(c_in: usize, c_out: usize, k: usize, stride: usize, rng: &mut ChaCha8Rng) -> Self {
        assert!(k == 1 || k == 3);
        assert!(stride == 1 || stride == 2);
        let fan_in = (c_in * k * k * k) as f32;
        let scale = (2.0 / fan_in).sqrt();
        let weight = (0..c_out * c_in * k * k * k).map(|_| rng.gen_range(-1.0f32..1.0) * scale).collect();
        let bias = vec![0.0; c_out];
        Conv3d { c_in, c_out, k, stride, weight, bias }
    }

    pub fn zero_grad(&self) -> Conv3dGrad {
        Conv3dGrad { weight: vec![0.0; self.weight.len()], bias: vec![0.0; self.bias.len()] }
    }

    pub fn out_dims(&self, input: Dims) -> Dims {
        let p = self.k / 2;
        let f = |n: usize| (n + 2 * p - self.k) / self.stride + 1;
        Dims::new(f(input.w), f(input.h), f(input.d))
    }

    /// Output-coordinate bounds so that `xo*s + kк - p` stays inside the
    /// input along one axis.
    #[inline]
    fn bounds(&self, n_in: usize, n_out: usize, kk: usize) -> (usize, usize) {
        let p = self.k as i64 / 2;
        let off = kk as i64 - p;
        let s = self.stride as i64;
        let lo = if off >= 0 { 0 } else { (-off + s - 1) / s };
        let hi = ((n_in as i64 - 1 - off) / s + 1).clamp(0, n_out as i64);
        (lo.min(hi) as usize, hi as usize)
    }

    pub fn forward(&self, input: &Tensor) -> Tensor {
        assert_eq!(input.channels, self.c_in);
        let id = input.dims;
        let od = self.out_dims(id);
        let n_out = od.len();
        let n_in = id.len();
        let k = self.k;
        let p = k / 2;
        let s = self.stride;
        let mut out = Tensor::zeros(self.c_out, od);
        out.data.par_chunks_mut(n_out).enumerate().for_each(|(co, out_ch)| {
            out_ch.fill(self.bias[co]);
            for ci in 0..self.c_in {
                let in_ch = &input.data[ci * n_in..(ci + 1) * n_in];
                for kz in 0..k {
                    let (zlo, zhi) = self.bounds(id.d, od.d, kz);
                    for ky in 0..k {
                        let (ylo, yhi) = self.bounds(id.h, od.h, ky);
                        for kx in 0..k {
                            let (xlo, xhi) = self.bounds(id.w, od.w, kx);
                            if xlo >= xhi {
                                continue;
                            }
                            let w = self.weight
                                [(((co * self.c_in + ci) * k + kz) * k + ky) * k + kx];
                            for zo in zlo..zhi {
                                let zi = zo * s + kz - p;
                                for yo in ylo..yhi {
                                    let yi = yo * s + ky - p;
                                    let in_base = id.index(0, yi, zi);
                                    let out_base = od.index(0, yo, zo);
                                    let x_off = kx as i64 - p as i64;
                                    if s == 1 {
                                        let src = &in_ch[(in_base as i64 + x_off + xlo as i64) as usize
                                            ..(in_base as i64 + x_off + xhi as i64) as usize];
                                        let dst = &mut out_ch[out_base + xlo..out_base + xhi];
                                        for (d, &v) in dst.iter_mut().zip(src) {
                                            *d += w * v;
                                        }
                                    } else {
                                        for xo in xlo..xhi {
                                            let xi = (xo * s) as i64 + x_off;
                                            out_ch[out_base + xo] += w * in_ch[in_base + xi as usize];
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
        });
        out
    }

    /// Backward pass: returns the input gradient and accumulates parameter
    /// gradients into `grad`.
    pub fn backward(&self, input: &Tensor, grad_out: &Tensor, grad: &mut Conv3dGrad) -> Tensor {
        let id = input.dims;
        let od = grad_out.dims;
        let n_in = id.len();
        let n_out = od.len();
        let k = self.k;
        let p = k / 2;
        let s = self.stride;

        // bias gradient
        for co in 0..self.c_out {
            let g: f64 = grad_out.channel(co).iter().map(|&v| v as f64).sum();
            grad.bias[co] += g;
        }

        // weight gradient, parallel over output channels
        let kkk = self.c_in * k * k * k;
        grad.weight.par_chunks_mut(kkk).enumerate().for_each(|(co, gw)| {
            let go = &grad_out.data[co * n_out..(co + 1) * n_out];
            for ci in 0..self.c_in {
                let in_ch = &input.data[ci * n_in..(ci + 1) * n_in];
                for kz in 0..k {
                    let (zlo, zhi) = self.bounds(id.d, od.d, kz);
                    for ky in 0..k {
                        let (ylo, yhi) = self.bounds(id.h, od.h, ky);
                        for kx in 0..k {
                            let (xlo, xhi) = self.bounds(id.w, od.w, kx);
                            let mut acc = 0f64;
                            for zo in zlo..zhi {
                                let zi = zo * s + kz - p;
                                for yo in ylo..yhi {
                                    let yi = yo * s + ky - p;
                                    let in_base = id.index(0, yi, zi);
                                    let out_base = od.index(0, yo, zo);
                                    let x_off = kx as i64 - p as i64;
                                    let mut row = 0f32;
                                    for xo in xlo..xhi {
                                        let xi = (xo * s) as i64 + x_off;
                                        row += go[out_base + xo] * in_ch[in_base + xi as usize];
                                    }
                                    acc += row as f64;
                                }
                            }
                            gw[((ci * k + kz) * k + ky) * k + kx] += acc;
                        }
                    }
                }
            }
        });

        // input gradient, parallel over input channels
        let mut grad_in = Tensor::zeros(self.c_in, id);
        grad_in.data.par_chunks_mut(n_in).enumerate().for_each(|(ci, gi)| {
            for co in 0..self.c_out {
                let go = &grad_out.data[co * n_out..(co + 1) * n_out];
                for kz in 0..k {
                    let (zlo, zhi) = self.bounds(id.d, od.d, kz);
                    for ky in 0..k {
                        let (ylo, yhi) = self.bounds(id.h, od.h, ky);
                        for kx in 0..k {
                            let (xlo, xhi) = self.bounds(id.w, od.w, kx);
                            let w = self.weight
                                [(((co * self.c_in + ci) * k + kz) * k + ky) * k + kx];
                            for zo in zlo..zhi {
                                let zi = zo * s + kz - p;
                                for yo in ylo..yhi {
                                    let yi = yo * s + ky - p;
                                    let in_base = id.index(0, yi, zi);
                                    let out_base = od.index(0, yo, zo);
                                    let x_off = kx as i64 - p as i64;
                                    for xo in xlo..xhi {
                                        let xi = (xo * s) as i64 + x_off;
                                        gi[(in_base as i64 + xi) as usize] += w * go[out_base + xo];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        });
        grad_in
    }

    pub fn params(&self) -> Vec<f32> {
        let mut v = self.weight.clone();
        v.extend_from_slice(&self.bias);
        v
    }

    pub fn param_count(&self) -> usize {
        self.weight.len() + self.bias.len()
    }

    pub fn load_params(&mut self, flat: &[f32]) -> Result<()> {
        if flat.len() != self.param_count() {
            return Err(Error::Input("conv parameter payload size mismatch".into()));
        }
        let nw = self.weight.len();
        self.weight.copy_from_slice(&flat[..nw]);
        self.bias.copy_from_slice(&flat[nw..]);
        Ok(())
    }
}

pub fn relu(t: &Tensor) -> Tensor {
    Tensor { channels: t.channels, dims: t.dims, data: t.data.iter().map(|&v| v.max(0.0)).collect() }
}

pub fn relu_backward(out: &Tensor, grad_out: &Tensor) -> Tensor {
    let data = out
        .data
        .iter()
        .zip(&grad_out.data)
        .map(|(&o, &g)| if o > 0.0 { g } else { 0.0 })
        .collect();
    Tensor { channels: out.channels, dims: out.dims, data }
}

/// Nearest-neighbor 2x upsampling per axis.
pub fn upsample2(t: &Tensor) -> Tensor {
    let id = t.dims;
    let od = Dims::new(id.w * 2, id.h * 2, id.d * 2);
    let mut out = Tensor::zeros(t.channels, od);
    for c in 0..t.channels {
        let src = t.channel(c);
        let dst = out.channel_mut(c);
        for z in 0..od.d {
            for y in 0..od.h {
                for x in 0..od.w {
                    dst[od.index(x, y, z)] = src[id.index(x / 2, y / 2, z / 2)];
                }
            }
        }
    }
    out
}

pub fn upsample2_backward(grad_out: &Tensor) -> Tensor {
    let od = grad_out.dims;
    let id = Dims::new(od.w / 2, od.h / 2, od.d / 2);
    let mut grad_in = Tensor::zeros(grad_out.channels, id);
    for c in 0..grad_out.channels {
        let src = grad_out.channel(c);
        let dst = grad_in.channel_mut(c);
        for z in 0..od.d {
            for y in 0..od.h {
                for x in 0..od.w {
                    dst[id.index(x / 2, y / 2, z / 2)] += src[od.index(x, y, z)];
                }
            }
        }
    }
    grad_in
}

pub fn concat(a: &Tensor, b: &Tensor) -> Tensor {
    assert_eq!(a.dims, b.dims);
    let mut data = Vec::with_capacity(a.data.len() + b.data.len());
    data.extend_from_slice(&a.data);
    data.extend_from_slice(&b.data);
    Tensor { channels: a.channels + b.channels, dims: a.dims, data }
}

pub fn split(grad: &Tensor, c_first: usize) -> (Tensor, Tensor) {
    let n = grad.dims.len();
    let a = Tensor {
        channels: c_first,
        dims: grad.dims,
        data: grad.data[..c_first * n].to_vec(),
    };
    let b = Tensor {
        channels: grad.channels - c_first,
        dims: grad.dims,
        data: grad.data[c_first * n..].to_vec(),
    };
    (a, b)
}

/// Numerically stable softmax over exactly two channels.
pub fn softmax2(logits: &Tensor) -> Tensor {
    assert_eq!(logits.channels, 2);
    let n = logits.dims.len();
    let mut out = Tensor::zeros(2, logits.dims);
    for i in 0..n {
        let z0 = logits.data[i];
        let z1 = logits.data[n + i];
        let m = z0.max(z1);
        let e0 = (z0 - m).exp();
        let e1 = (z1 - m).exp();
        let sum = e0 + e1;
        out.data[i] = e0 / sum;
        out.data[n + i] = e1 / sum;
    }
    out
}

/// Chain rule through softmax: dL/dz_k = p_k (dL/dp_k - sum_j dL/dp_j p_j).
pub fn softmax2_backward(p: &Tensor, grad_p: &Tensor) -> Tensor {
    let n = p.dims.len();
    let mut grad_z = Tensor::zeros(2, p.dims);
    for i in 0..n {
        let (p0, p1) = (p.data[i], p.data[n + i]);
        let (g0, g1) = (grad_p.data[i], grad_p.data[n + i]);
        let dot = g0 * p0 + g1 * p1;
        grad_z.data[i] = p0 * (g0 - dot);
        grad_z.data[n + i] = p1 * (g1 - dot);
    }
    grad_z
}

/// Multiply every channel element-wise with a spatial gate.
pub fn gate_mul(t: &Tensor, gate: &[f32]) -> Result<Tensor> {
    let n = t.dims.len();
    if gate.len() != n {
        return Err(Error::Input("gate length does not match tensor dims".into()));
    }
    let mut out = t.clone();
    for c in 0..t.channels {
        let ch = out.channel_mut(c);
        for (v, &g) in ch.iter_mut().zip(gate) {
            *v *= g;
        }
    }
    Ok(out)
}

/// The 2-level encoder-decoder. `c0`/`2*c0` channels, 3x3x3 kernels, one
/// stride-2 downsampling, deep-supervision head on the coarse level, and a
/// gating site on the penultimate features of both output paths.
#[derive(Debug, Clone)]
pub struct MicroNet {
    pub c_in: usize,
    pub c0: usize,
    pub conv_e0: Conv3d,
    pub conv_down: Conv3d,
    pub conv_bott: Conv3d,
    pub conv_up: Conv3d,
    pub conv_dec: Conv3d,
    pub head0: Conv3d,
    pub head1: Conv3d,
}

/// Cached forward activations.
pub struct MicroNetForward {
    pub input: Tensor,
    pub e0: Tensor,
    pub d0: Tensor,
    pub b: Tensor,
    pub f1: Tensor,
    pub p1: Tensor,
    pub up: Tensor,
    pub u: Tensor,
    pub cat: Tensor,
    pub d1: Tensor,
    pub f0: Tensor,
    pub p0: Tensor,
    pub attention: Option<(Vec<f32>, Vec<f32>)>,
}

#[derive(Debug, Clone)]
pub struct MicroNetGrad {
    pub conv_e0: Conv3dGrad,
    pub conv_down: Conv3dGrad,
    pub conv_bott: Conv3dGrad,
    pub conv_up: Conv3dGrad,
    pub conv_dec: Conv3dGrad,
    pub head0: Conv3dGrad,
    pub head1: Conv3dGrad,
}

impl MicroNet {
    pub fn new(c_in: usize, c0: usize, rng: &mut ChaCha8Rng) -> Self {
        let c1 = 2 * c0;
        MicroNet {
            c_in,
            c0,
            conv_e0: Conv3d::new(c_in, c0, 3, 1, rng),
            conv_down: Conv3d::new(c0, c1, 3, 2, rng),
            conv_bott: Conv3d::new(c1, c1, 3, 1, rng),
            conv_up: Conv3d::new(c1, c0, 3, 1, rng),
            conv_dec: Conv3d::new(2 * c0, c0, 3, 1, rng),
            head0: Conv3d::new(c0, 2, 1, 1, rng),
            head1: Conv3d::new(c1, 2, 1, 1, rng),
        }
    }

    /// Input dims must be even so the down/up path round-trips.
    pub fn check_dims(&self, dims: Dims) -> Result<()> {
        if dims.w % 2 != 0 || dims.h % 2 != 0 || dims.d % 2 != 0 {
            return Err(Error::Input(format!(
                "network input dims must be even, got {}x{}x{}",
                dims.w, dims.h, dims.d
            )));
        }
        Ok(())
    }

    /// Forward pass. `attention` carries the full-resolution gate and its
    /// half-resolution counterpart; `None` runs ungated.
    pub fn forward(&self, input: &Tensor, attention: Option<(&[f32], &[f32])>) -> Result<MicroNetForward> {
        self.check_dims(input.dims)?;
        if input.channels != self.c_in {
            return Err(Error::Input("input channel count mismatch".into()));
        }
        let e0 = relu(&self.conv_e0.forward(input));
        let d0 = relu(&self.conv_down.forward(&e0));
        let b = relu(&self.conv_bott.forward(&d0));
        let f1 = match attention {
            Some((_, a1)) => gate_mul(&b, a1)?,
            None => b.clone(),
        };
        let p1 = softmax2(&self.head1.forward(&f1));
        let up = upsample2(&b);
        let u = relu(&self.conv_up.forward(&up));
        let cat = concat(&e0, &u);
        let d1 = relu(&self.conv_dec.forward(&cat));
        let f0 = match attention {
            Some((a0, _)) => gate_mul(&d1, a0)?,
            None => d1.clone(),
        };
        let p0 = softmax2(&self.head0.forward(&f0));
        Ok(MicroNetForward {
            input: input.clone(),
            e0,
            d0,
            b,
            f1,
            p1,
            up,
            u,
            cat,
            d1,
            f0,
            p0,
            attention: attention.map(|(a0, a1)| (a0.to_vec(), a1.to_vec())),
        })
    }

    pub fn zero_grad(&self) -> MicroNetGrad {
        MicroNetGrad {
            conv_e0: self.conv_e0.zero_grad(),
            conv_down: self.conv_down.zero_grad(),
            conv_bott: self.conv_bott.zero_grad(),
            conv_up: self.conv_up.zero_grad(),
            conv_dec: self.conv_dec.zero_grad(),
            head0: self.head0.zero_grad(),
            head1: self.head1.zero_grad(),
        }
    }

    /// Backward from probability-space gradients of both output levels.
    pub fn backward(
        &self,
        fwd: &MicroNetForward,
        grad_p0: &Tensor,
        grad_p1: &Tensor,
        grad: &mut MicroNetGrad,
    ) {
        // level-0 head path
        let gz0 = softmax2_backward(&fwd.p0, grad_p0);
        let gf0 = self.head0.backward(&fwd.f0, &gz0, &mut grad.head0);
        let gd1 = match &fwd.attention {
            Some((a0, _)) => gate_mul(&gf0, a0).expect("gate dims checked in forward"),
            None => gf0,
        };
        let gd1 = relu_backward(&fwd.d1, &gd1);
        let gcat = self.conv_dec.backward(&fwd.cat, &gd1, &mut grad.conv_dec);
        let (ge0_skip, gu) = split(&gcat, self.c0);
        let gu = relu_backward(&fwd.u, &gu);
        let gup = self.conv_up.backward(&fwd.up, &gu, &mut grad.conv_up);
        let gb_from_up = upsample2_backward(&gup);

        // level-1 head path
        let gz1 = softmax2_backward(&fwd.p1, grad_p1);
        let gf1 = self.head1.backward(&fwd.f1, &gz1, &mut grad.head1);
        let gb_from_head = match &fwd.attention {
            Some((_, a1)) => gate_mul(&gf1, a1).expect("gate dims checked in forward"),
            None => gf1,
        };

        let mut gb = gb_from_up;
        for (a, b) in gb.data.iter_mut().zip(&gb_from_head.data) {
            *a += b;
        }
        let gb = relu_backward(&fwd.b, &gb);
        let gd0 = self.conv_bott.backward(&fwd.d0, &gb, &mut grad.conv_bott);
        let gd0 = relu_backward(&fwd.d0, &gd0);
        let mut ge0 = self.conv_down.backward(&fwd.e0, &gd0, &mut grad.conv_down);
        for (a, b) in ge0.data.iter_mut().zip(&ge0_skip.data) {
            *a += b;
        }
        let ge0 = relu_backward(&fwd.e0, &ge0);
        let _gin = self.conv_e0.backward(&fwd.input, &ge0, &mut grad.conv_e0);
    }

    pub fn convs(&self) -> [&Conv3d; 7] {
        [
            &self.conv_e0,
            &self.conv_down,
            &self.conv_bott,
            &self.conv_up,
            &self.conv_dec,
            &self.head0,
            &self.head1,
        ]
    }

    pub fn convs_mut(&mut self) -> [&mut Conv3d; 7] {
        [
            &mut self.conv_e0,
            &mut self.conv_down,
            &mut self.conv_bott,
            &mut self.conv_up,
            &mut self.conv_dec,
            &mut self.head0,
            &mut self.head1,
        ]
    }

    pub fn param_count(&self) -> usize {
        self.convs().iter().map(|c| c.param_count()).sum()
    }

    /// All parameters as one flat little-endian-friendly vector.
    pub fn flat_params(&self) -> Vec<f32> {
        let mut out = Vec::with_capacity(self.param_count());
        for c in self.convs() {
            out.extend(c.params());
        }
        out
    }

    pub fn load_flat_params(&mut self, flat: &[f32]) -> Result<()> {
        if flat.len() != self.param_count() {
            return Err(Error::Input("checkpoint parameter count mismatch".into()));
        }
        let mut off = 0;
        for c in self.convs_mut() {
            let n = c.param_count();
            c.load_params(&flat[off..off + n])?;
            off += n;
        }
        Ok(())
    }
}
