//! Exact Euclidean distance transform, separable per-axis lower-envelope
//! algorithm with anisotropic spacing. Distances are between voxel centers.

use crate::volume::Dims;

/// Stand-in for +infinity that survives arithmetic without producing NaN.
const BIG: f64 = 1e20;

/// 1D squared-distance transform along one axis with sample spacing `s`.
/// `f` holds the incoming squared distances, `out` receives the result.
fn dt_1d(f: &[f64], out: &mut [f64], s: f64) {
    let n = f.len();
    if n == 1 {
        out[0] = f[0];
        return;
    }
    let mut v = vec![0usize; n];
    let mut z = vec![0f64; n + 1];
    let mut k = 0usize;
    v[0] = 0;
    z[0] = -BIG;
    z[1] = BIG;
    let pos = |i: usize| i as f64 * s;
    for q in 1..n {
        let mut sq;
        loop {
            let p = v[k];
            sq = ((f[q] + pos(q) * pos(q)) - (f[p] + pos(p) * pos(p))) / (2.0 * pos(q) - 2.0 * pos(p));
            if sq <= z[k] {
                if k == 0 {
                    // degenerate only when f values are BIG; parabola replaces
                    break;
                }
                k -= 1;
            } else {
                break;
            }
        }
        if sq <= z[k] && k == 0 {
            v[0] = q;
            z[0] = -BIG;
            z[1] = BIG;
        } else {
            k += 1;
            v[k] = q;
            z[k] = sq;
            z[k + 1] = BIG;
        }
    }
    k = 0;
    for q in 0..n {
        while z[k + 1] < pos(q) {
            k += 1;
        }
        let p = v[k];
        out[q] = (pos(q) - pos(p)) * (pos(q) - pos(p)) + f[p];
    }
}

/// Squared distance from every voxel to the nearest site, with per-axis
/// spacing in mm. `sites[idx] == true` marks a source voxel.
pub fn squared_edt(sites: &[bool], dims: Dims, spacing: (f64, f64, f64)) -> Vec<f64> {
    let mut dist: Vec<f64> = sites.iter().map(|&s| if s { 0.0 } else { BIG }).collect();
    let (w, h, d) = (dims.w, dims.h, dims.d);

    // x pass
    {
        let mut line = vec![0f64; w];
        let mut out = vec![0f64; w];
        for z in 0..d {
            for y in 0..h {
                let base = dims.index(0, y, z);
                line.copy_from_slice(&dist[base..base + w]);
                dt_1d(&line, &mut out, spacing.0);
                dist[base..base + w].copy_from_slice(&out);
            }
        }
    }
    // y pass
    {
        let mut line = vec![0f64; h];
        let mut out = vec![0f64; h];
        for z in 0..d {
            for x in 0..w {
                for y in 0..h {
                    line[y] = dist[dims.index(x, y, z)];
                }
                dt_1d(&line, &mut out, spacing.1);
                for y in 0..h {
                    dist[dims.index(x, y, z)] = out[y];
                }
            }
        }
    }
    // z pass
    {
        let mut line = vec![0f64; d];
        let mut out = vec![0f64; d];
        for y in 0..h {
            for x in 0..w {
                for z in 0..d {
                    line[z] = dist[dims.index(x, y, z)];
                }
                dt_1d(&line, &mut out, spacing.2);
                for z in 0..d {
                    dist[dims.index(x, y, z)] = out[z];
                }
            }
        }
    }
    dist
}
