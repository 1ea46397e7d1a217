//! Statistics harness: bootstrap confidence intervals, Wilcoxon signed-rank
//! test and the DeLong test for correlated AUCs.

use super::midranks;
use crate::error::{Error, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{ContinuousCDF, Normal};

fn std_normal_sf(z: f64) -> f64 {
    let n = Normal::new(0.0, 1.0).unwrap();
    1.0 - n.cdf(z)
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct BootstrapCi {
    pub point: f64,
    pub lo: f64,
    pub hi: f64,
    pub iters: usize,
    pub seed: u64,
    #[serde(skip)]
    pub distribution: Vec<f64>,
}

fn percentile(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let h = p * (n - 1) as f64;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Case-level bootstrap with replacement. Each iteration draws its indices
/// from an independent counter-derived stream, so results do not depend on
/// scheduling. Resamples that leave the metric undefined (single class) are
/// skipped and redrawn, capped at 10x the requested iterations.
pub fn bootstrap_ci<F>(
    metric: F,
    scores: &[f64],
    labels: &[bool],
    iters: usize,
    seed: u64,
) -> Result<BootstrapCi>
where
    F: Fn(&[f64], &[bool]) -> Result<f64>,
{
    let n = scores.len();
    if n < 2 || labels.len() != n {
        return Err(Error::Input("bootstrap needs >= 2 aligned cases".into()));
    }
    let point = metric(scores, labels)?;
    let mut dist = Vec::with_capacity(iters);
    let mut attempts = 0usize;
    let mut stream = 0u64;
    while dist.len() < iters {
        if attempts >= 10 * iters {
            return Err(Error::Degenerate(
                "bootstrap exhausted redraws on degenerate resamples".into(),
            ));
        }
        attempts += 1;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        stream += 1;
        let mut s = Vec::with_capacity(n);
        let mut l = Vec::with_capacity(n);
        for _ in 0..n {
            let idx = rng.gen_range(0..n);
            s.push(scores[idx]);
            l.push(labels[idx]);
        }
        match metric(&s, &l) {
            Ok(v) => dist.push(v),
            Err(Error::Degenerate(_)) => continue,
            Err(e) => return Err(e),
        }
    }
    let mut sorted = dist.clone();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    Ok(BootstrapCi {
        point,
        lo: percentile(&sorted, 0.025),
        hi: percentile(&sorted, 0.975),
        iters,
        seed,
        distribution: dist,
    })
}

/// Bootstrap CI for the mean of per-case values (no labels involved).
pub fn bootstrap_mean_ci(values: &[f64], iters: usize, seed: u64) -> Result<BootstrapCi> {
    if values.len() < 2 {
        return Err(Error::Input("bootstrap needs >= 2 values".into()));
    }
    let n = values.len();
    let point = values.iter().sum::<f64>() / n as f64;
    let mut dist = Vec::with_capacity(iters);
    for it in 0..iters {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(it as u64);
        let mut sum = 0.0;
        for _ in 0..n {
            sum += values[rng.gen_range(0..n)];
        }
        dist.push(sum / n as f64);
    }
    let mut sorted = dist.clone();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    Ok(BootstrapCi {
        point,
        lo: percentile(&sorted, 0.025),
        hi: percentile(&sorted, 0.975),
        iters,
        seed,
        distribution: dist,
    })
}

/// Paired bootstrap: both methods are evaluated on the same resample
/// indices each iteration, giving paired metric replicates. Degenerate
/// resamples are skipped and redrawn, capped at 10x the iteration count.
pub fn paired_bootstrap<F>(
    metric: F,
    scores_a: &[f64],
    scores_b: &[f64],
    labels: &[bool],
    iters: usize,
    seed: u64,
) -> Result<(Vec<f64>, Vec<f64>)>
where
    F: Fn(&[f64], &[bool]) -> Result<f64>,
{
    let n = labels.len();
    if scores_a.len() != n || scores_b.len() != n || n < 2 {
        return Err(Error::Input("paired bootstrap needs aligned scores on >= 2 cases".into()));
    }
    let mut out_a = Vec::with_capacity(iters);
    let mut out_b = Vec::with_capacity(iters);
    let mut attempts = 0usize;
    let mut stream = 0u64;
    while out_a.len() < iters {
        if attempts >= 10 * iters {
            return Err(Error::Degenerate("paired bootstrap exhausted redraws".into()));
        }
        attempts += 1;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        stream += 1;
        let mut sa = Vec::with_capacity(n);
        let mut sb = Vec::with_capacity(n);
        let mut l = Vec::with_capacity(n);
        for _ in 0..n {
            let idx = rng.gen_range(0..n);
            sa.push(scores_a[idx]);
            sb.push(scores_b[idx]);
            l.push(labels[idx]);
        }
        match (metric(&sa, &l), metric(&sb, &l)) {
            (Ok(a), Ok(b)) => {
                out_a.push(a);
                out_b.push(b);
            }
            (Err(Error::Degenerate(_)), _) | (_, Err(Error::Degenerate(_))) => continue,
            (Err(e), _) | (_, Err(e)) => return Err(e),
        }
    }
    Ok((out_a, out_b))
}

#[derive(Debug, Clone, Copy, serde::Serialize)]
pub struct WilcoxonResult {
    /// Sum of positive ranks W+.
    pub statistic: f64,
    pub p_value: f64,
    /// Pairs remaining after zero differences are dropped.
    pub n_effective: usize,
    pub degenerate: bool,
    /// True when the exact null distribution was enumerated.
    pub exact: bool,
}

/// Two-sided Wilcoxon signed-rank test on paired samples. Zero differences
/// are dropped. Exact null distribution (tie-aware) for n <= 25, normal
/// approximation with tie and continuity corrections beyond.
pub fn wilcoxon_signed_rank(pairs: &[(f64, f64)]) -> Result<WilcoxonResult> {
    if pairs.is_empty() {
        return Err(Error::Input("wilcoxon needs at least one pair".into()));
    }
    let diffs: Vec<f64> = pairs.iter().map(|&(a, b)| a - b).filter(|&d| d != 0.0).collect();
    let n = diffs.len();
    if n == 0 {
        return Ok(WilcoxonResult {
            statistic: 0.0,
            p_value: 1.0,
            n_effective: 0,
            degenerate: true,
            exact: true,
        });
    }
    let abs: Vec<f64> = diffs.iter().map(|d| d.abs()).collect();
    let ranks = midranks(&abs);
    let w_plus: f64 = ranks.iter().zip(&diffs).filter(|&(_, &d)| d > 0.0).map(|(r, _)| r).sum();

    if n <= 25 {
        // exact distribution over all sign assignments via a subset-sum count
        // on doubled ranks (midranks are half-integers)
        let r2: Vec<u64> = ranks.iter().map(|&r| (2.0 * r).round() as u64).collect();
        let total: u64 = r2.iter().sum();
        let mut ways = vec![0f64; total as usize + 1];
        ways[0] = 1.0;
        for &r in &r2 {
            for s in (r as usize..ways.len()).rev() {
                ways[s] += ways[s - r as usize];
            }
        }
        let count_total = 2f64.powi(n as i32);
        let w2 = (2.0 * w_plus).round() as usize;
        let p_le: f64 = ways[..=w2].iter().sum::<f64>() / count_total;
        let p_ge: f64 = ways[w2..].iter().sum::<f64>() / count_total;
        let p = (2.0 * p_le.min(p_ge)).min(1.0);
        Ok(WilcoxonResult { statistic: w_plus, p_value: p, n_effective: n, degenerate: false, exact: true })
    } else {
        let nf = n as f64;
        let mean = nf * (nf + 1.0) / 4.0;
        // tie correction over groups of equal |d|
        let mut sorted = abs.clone();
        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let mut tie_term = 0.0;
        let mut i = 0;
        while i < n {
            let mut j = i;
            while j + 1 < n && sorted[j + 1] == sorted[i] {
                j += 1;
            }
            let t = (j - i + 1) as f64;
            tie_term += t * t * t - t;
            i = j + 1;
        }
        let var = nf * (nf + 1.0) * (2.0 * nf + 1.0) / 24.0 - tie_term / 48.0;
        if var <= 0.0 {
            return Ok(WilcoxonResult {
                statistic: w_plus,
                p_value: 1.0,
                n_effective: n,
                degenerate: true,
                exact: false,
            });
        }
        let cc = if w_plus > mean {
            -0.5
        } else if w_plus < mean {
            0.5
        } else {
            0.0
        };
        let z = (w_plus - mean + cc) / var.sqrt();
        let p = (2.0 * std_normal_sf(z.abs())).min(1.0);
        Ok(WilcoxonResult { statistic: w_plus, p_value: p, n_effective: n, degenerate: false, exact: false })
    }
}

#[derive(Debug, Clone, Copy, serde::Serialize)]
pub struct DeLongResult {
    pub auc_a: f64,
    pub auc_b: f64,
    pub z: f64,
    pub p_value: f64,
    pub degenerate: bool,
}

struct Placements {
    auc: f64,
    v10: Vec<f64>,
    v01: Vec<f64>,
}

/// Structural components via midrank placements, O(n log n).
fn placements(scores: &[f64], labels: &[bool]) -> Placements {
    let pos: Vec<f64> = scores.iter().zip(labels).filter(|&(_, &l)| l).map(|(&s, _)| s).collect();
    let neg: Vec<f64> = scores.iter().zip(labels).filter(|&(_, &l)| !l).map(|(&s, _)| s).collect();
    let m = pos.len();
    let n = neg.len();
    let all: Vec<f64> = pos.iter().chain(neg.iter()).copied().collect();
    let r_all = midranks(&all);
    let r_pos = midranks(&pos);
    let r_neg = midranks(&neg);
    let v10: Vec<f64> = (0..m).map(|i| (r_all[i] - r_pos[i]) / n as f64).collect();
    let v01: Vec<f64> = (0..n).map(|j| 1.0 - (r_all[m + j] - r_neg[j]) / m as f64).collect();
    let auc = (r_all[..m].iter().sum::<f64>() - (m * (m + 1)) as f64 / 2.0) / (m as f64 * n as f64);
    Placements { auc, v10, v01 }
}

fn covariance(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len();
    if n < 2 {
        return 0.0;
    }
    let ma = a.iter().sum::<f64>() / n as f64;
    let mb = b.iter().sum::<f64>() / n as f64;
    a.iter().zip(b).map(|(&x, &y)| (x - ma) * (y - mb)).sum::<f64>() / (n - 1) as f64
}

/// DeLong test for two correlated AUCs on paired scores.
pub fn delong_test(scores_a: &[f64], scores_b: &[f64], labels: &[bool]) -> Result<DeLongResult> {
    if scores_a.len() != labels.len() || scores_b.len() != labels.len() {
        return Err(Error::Input("delong needs paired scores on identical cases".into()));
    }
    let m = labels.iter().filter(|&&l| l).count();
    let n = labels.len() - m;
    if m == 0 || n == 0 {
        return Err(Error::Degenerate("delong needs both classes".into()));
    }
    let pa = placements(scores_a, labels);
    let pb = placements(scores_b, labels);
    let s10_aa = covariance(&pa.v10, &pa.v10);
    let s10_bb = covariance(&pb.v10, &pb.v10);
    let s10_ab = covariance(&pa.v10, &pb.v10);
    let s01_aa = covariance(&pa.v01, &pa.v01);
    let s01_bb = covariance(&pb.v01, &pb.v01);
    let s01_ab = covariance(&pa.v01, &pb.v01);
    let var = (s10_aa + s10_bb - 2.0 * s10_ab) / m as f64 + (s01_aa + s01_bb - 2.0 * s01_ab) / n as f64;
    if var <= 0.0 || !var.is_finite() {
        return Ok(DeLongResult { auc_a: pa.auc, auc_b: pb.auc, z: 0.0, p_value: 1.0, degenerate: true });
    }
    let z = (pa.auc - pb.auc) / var.sqrt();
    let p = (2.0 * std_normal_sf(z.abs())).min(1.0);
    Ok(DeLongResult { auc_a: pa.auc, auc_b: pb.auc, z, p_value: p, degenerate: false })
}

/// Direct structural components by the pairwise kernel, O(m*n). Test oracle
/// for the midrank path; exported for the verification suite.
pub fn delong_components_direct(scores: &[f64], labels: &[bool]) -> (f64, Vec<f64>, Vec<f64>) {
    let pos: Vec<f64> = scores.iter().zip(labels).filter(|&(_, &l)| l).map(|(&s, _)| s).collect();
    let neg: Vec<f64> = scores.iter().zip(labels).filter(|&(_, &l)| !l).map(|(&s, _)| s).collect();
    let psi = |x: f64, y: f64| -> f64 {
        if x > y {
            1.0
        } else if x == y {
            0.5
        } else {
            0.0
        }
    };
    let v10: Vec<f64> =
        pos.iter().map(|&p| neg.iter().map(|&q| psi(p, q)).sum::<f64>() / neg.len() as f64).collect();
    let v01: Vec<f64> =
        neg.iter().map(|&q| pos.iter().map(|&p| psi(p, q)).sum::<f64>() / pos.len() as f64).collect();
    let auc = v10.iter().sum::<f64>() / v10.len() as f64;
    (auc, v10, v01)
}
