//! Small 2D layers in f64 for the tumor classification head.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// (channels, h, w) tensor, row-major per channel.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor2 {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<f64>,
}

impl Tensor2 {
    pub fn zeros(c: usize, h: usize, w: usize) -> Self {
        Tensor2 { c, h, w, data: vec![0.0; c * h * w] }
    }

    #[inline]
    pub fn plane(&self, c: usize) -> &[f64] {
        let n = self.h * self.w;
        &self.data[c * n..(c + 1) * n]
    }

    #[inline]
    pub fn plane_mut(&mut self, c: usize) -> &mut [f64] {
        let n = self.h * self.w;
        &mut self.data[c * n..(c + 1) * n]
    }
}

/// 2D convolution, 3x3 kernel, stride 2, zero padding 1.
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub c_in: usize,
    pub c_out: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

pub const K2: usize = 3;
const PAD: i64 = 1;
const STRIDE: usize = 2;

impl Conv2d {
    pub fn new(c_in: usize, c_out: usize, rng: &mut ChaCha8Rng) -> Self {
        let fan_in = (c_in * K2 * K2) as f64;
        let scale = (2.0 / fan_in).sqrt();
        Conv2d {
            c_in,
            c_out,
            weight: (0..c_out * c_in * K2 * K2).map(|_| rng.gen_range(-1.0..1.0) * scale).collect(),
            bias: vec![0.0; c_out],
        }
    }

    /// Side-branch initialization: weights 0, biases 1, so the branch is an
    /// exact identity gate before training.
    pub fn new_identity_gate(c_in: usize, c_out: usize) -> Self {
        Conv2d { c_in, c_out, weight: vec![0.0; c_out * c_in * K2 * K2], bias: vec![1.0; c_out] }
    }

    pub fn out_hw(&self, h: usize, w: usize) -> (usize, usize) {
        ((h + 2 - K2) / STRIDE + 1, (w + 2 - K2) / STRIDE + 1)
    }

    pub fn forward(&self, input: &Tensor2) -> Tensor2 {
        let (oh, ow) = self.out_hw(input.h, input.w);
        let mut out = Tensor2::zeros(self.c_out, oh, ow);
        for co in 0..self.c_out {
            let plane = out.plane_mut(co);
            plane.fill(self.bias[co]);
            for ci in 0..self.c_in {
                let src = input.plane(ci);
                for ky in 0..K2 {
                    for kx in 0..K2 {
                        let wgt = self.weight[((co * self.c_in + ci) * K2 + ky) * K2 + kx];
                        for oy in 0..oh {
                            let iy = (oy * STRIDE) as i64 + ky as i64 - PAD;
                            if iy < 0 || iy >= input.h as i64 {
                                continue;
                            }
                            for ox in 0..ow {
                                let ix = (ox * STRIDE) as i64 + kx as i64 - PAD;
                                if ix < 0 || ix >= input.w as i64 {
                                    continue;
                                }
                                plane[oy * ow + ox] += wgt * src[iy as usize * input.w + ix as usize];
                            }
                        }
                    }
                }
            }
        }
        out
    }

    /// Returns the input gradient; parameter gradients are accumulated into
    /// `gw`/`gb` (same layout as weight/bias).
    pub fn backward(
        &self,
        input: &Tensor2,
        grad_out: &Tensor2,
        gw: &mut [f64],
        gb: &mut [f64],
    ) -> Tensor2 {
        let (oh, ow) = (grad_out.h, grad_out.w);
        let mut grad_in = Tensor2::zeros(self.c_in, input.h, input.w);
        for co in 0..self.c_out {
            let go = grad_out.plane(co);
            gb[co] += go.iter().sum::<f64>();
            for ci in 0..self.c_in {
                let src = input.plane(ci);
                let gi = grad_in.plane_mut(ci);
                for ky in 0..K2 {
                    for kx in 0..K2 {
                        let widx = ((co * self.c_in + ci) * K2 + ky) * K2 + kx;
                        let wgt = self.weight[widx];
                        let mut acc = 0.0;
                        for oy in 0..oh {
                            let iy = (oy * STRIDE) as i64 + ky as i64 - PAD;
                            if iy < 0 || iy >= input.h as i64 {
                                continue;
                            }
                            for ox in 0..ow {
                                let ix = (ox * STRIDE) as i64 + kx as i64 - PAD;
                                if ix < 0 || ix >= input.w as i64 {
                                    continue;
                                }
                                let g = go[oy * ow + ox];
                                acc += g * src[iy as usize * input.w + ix as usize];
                                gi[iy as usize * input.w + ix as usize] += g * wgt;
                            }
                        }
                        gw[widx] += acc;
                    }
                }
            }
        }
        grad_in
    }
}

pub fn relu2(t: &Tensor2) -> Tensor2 {
    Tensor2 { c: t.c, h: t.h, w: t.w, data: t.data.iter().map(|&v| v.max(0.0)).collect() }
}

pub fn relu2_backward(out: &Tensor2, grad: &Tensor2) -> Tensor2 {
    Tensor2 {
        c: out.c,
        h: out.h,
        w: out.w,
        data: out.data.iter().zip(&grad.data).map(|(&o, &g)| if o > 0.0 { g } else { 0.0 }).collect(),
    }
}
