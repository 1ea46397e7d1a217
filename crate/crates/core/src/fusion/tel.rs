//! Texture encoding layer: orderless pooling that soft-assigns feature
//! vectors to learnable codewords and aggregates residuals.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone)]
pub struct Tel {
    pub k: usize,
    pub c: usize,
    /// K x C codewords.
    pub codewords: Vec<f64>,
    /// K positive smoothing factors.
    pub smoothing: Vec<f64>,
}

pub struct TelForward {
    /// K x C encoded output (mean of soft-assigned residuals).
    pub out: Vec<f64>,
    /// N x K assignment weights.
    weights: Vec<f64>,
    /// N x K squared residual norms.
    dist2: Vec<f64>,
    n: usize,
}

impl Tel {
    pub fn new(k: usize, c: usize, rng: &mut ChaCha8Rng) -> Self {
        assert!(k >= 1);
        Tel {
            k,
            c,
            codewords: (0..k * c).map(|_| rng.gen_range(-0.5..0.5)).collect(),
            smoothing: vec![1.0; k],
        }
    }

    /// `x` is N x C row-major. Output is invariant to any permutation of
    /// the N rows.
    pub fn forward(&self, x: &[f64], n: usize) -> TelForward {
        assert_eq!(x.len(), n * self.c);
        let mut weights = vec![0.0; n * self.k];
        let mut dist2 = vec![0.0; n * self.k];
        for i in 0..n {
            let xi = &x[i * self.c..(i + 1) * self.c];
            let mut logits = vec![0.0; self.k];
            for k in 0..self.k {
                let ck = &self.codewords[k * self.c..(k + 1) * self.c];
                let d2: f64 = xi.iter().zip(ck).map(|(a, b)| (a - b) * (a - b)).sum();
                dist2[i * self.k + k] = d2;
                logits[k] = -self.smoothing[k] * d2;
            }
            let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = logits.iter().map(|&l| (l - m).exp()).collect();
            let sum: f64 = exps.iter().sum();
            for k in 0..self.k {
                weights[i * self.k + k] = exps[k] / sum;
            }
        }
        let mut out = vec![0.0; self.k * self.c];
        for i in 0..n {
            let xi = &x[i * self.c..(i + 1) * self.c];
            for k in 0..self.k {
                let w = weights[i * self.k + k];
                let ck = &self.codewords[k * self.c..(k + 1) * self.c];
                for (j, (&xv, &cv)) in xi.iter().zip(ck).enumerate() {
                    out[k * self.c + j] += w * (xv - cv);
                }
            }
        }
        for v in out.iter_mut() {
            *v /= n as f64;
        }
        TelForward { out, weights, dist2, n }
    }

    /// Backward from the K x C output gradient. Returns the gradient
    /// with respect to `x` and accumulates codeword/smoothing gradients.
    pub fn backward(
        &self,
        x: &[f64],
        fwd: &TelForward,
        grad_out: &[f64],
        grad_codewords: &mut [f64],
        grad_smoothing: &mut [f64],
    ) -> Vec<f64> {
        let n = fwd.n;
        let c = self.c;
        let kk = self.k;
        let nf = n as f64;
        let mut grad_x = vec![0.0; n * c];
        for i in 0..n {
            let xi = &x[i * c..(i + 1) * c];
            // g_ik = dL/dw_ik through the residual aggregation
            let mut g_w = vec![0.0; kk];
            for k in 0..kk {
                let ck = &self.codewords[k * c..(k + 1) * c];
                let go = &grad_out[k * c..(k + 1) * c];
                g_w[k] = xi
                    .iter()
                    .zip(ck)
                    .zip(go)
                    .map(|((&xv, &cv), &g)| g * (xv - cv))
                    .sum::<f64>()
                    / nf;
            }
            // softmax backward over k
            let wrow = &fwd.weights[i * kk..(i + 1) * kk];
            let dot: f64 = g_w.iter().zip(wrow).map(|(a, b)| a * b).sum();
            let g_logit: Vec<f64> = (0..kk).map(|k| wrow[k] * (g_w[k] - dot)).collect();
            for k in 0..kk {
                let d2 = fwd.dist2[i * kk + k];
                grad_smoothing[k] += -g_logit[k] * d2;
                let ck = &self.codewords[k * c..(k + 1) * c];
                let go = &grad_out[k * c..(k + 1) * c];
                let w = wrow[k];
                let s2 = 2.0 * self.smoothing[k] * g_logit[k];
                for j in 0..c {
                    let r = xi[j] - ck[j];
                    // direct residual path plus the logit path through d2
                    let dr = w * go[j] / nf - s2 * r;
                    grad_x[i * c + j] += dr;
                    grad_codewords[k * c + j] -= dr;
                }
            }
        }
        grad_x
    }
}
