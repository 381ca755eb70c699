//! Per-pixel channel mixing kernels, tiled over pixels so each tile of every
//! channel stays in cache while the small weight matrix is applied.

const TILE: usize = 512;

/// `out[o, :] = b[o] + Σ_i w[o, i] x[i, :]` for one batch entry.
pub(super) fn forward(w: &[f64], b: &[f64], x: &[f64], out: &mut [f64], cin: usize) {
    let cout = b.len();
    let p = x.len() / cin;
    for start in (0..p).step_by(TILE) {
        let end = (start + TILE).min(p);
        for o in 0..cout {
            let row = &mut out[o * p + start..o * p + end];
            row.fill(b[o]);
            for i in 0..cin {
                let wi = w[o * cin + i];
                let xr = &x[i * p + start..i * p + end];
                row.iter_mut().zip(xr).for_each(|(r, &v)| *r += wi * v);
            }
        }
    }
}

/// `gx[i, :] += Σ_o w[o, i] g[o, :]`.
pub(super) fn backward_input(w: &[f64], g: &[f64], gx: &mut [f64], cout: usize) {
    let p = g.len() / cout;
    let cin = gx.len() / p;
    for start in (0..p).step_by(TILE) {
        let end = (start + TILE).min(p);
        for i in 0..cin {
            let row = &mut gx[i * p + start..i * p + end];
            for o in 0..cout {
                let wo = w[o * cin + i];
                let gr = &g[o * p + start..o * p + end];
                row.iter_mut().zip(gr).for_each(|(r, &v)| *r += wo * v);
            }
        }
    }
}

/// `gw[o, i] += Σ_p g[o, p] x[i, p]`.
pub(super) fn backward_weight(g: &[f64], x: &[f64], gw: &mut [f64], cin: usize) {
    let p = x.len() / cin;
    let cout = g.len() / p;
    for o in 0..cout {
        for i in 0..cin {
            gw[o * cin + i] += dot(&g[o * p..(o + 1) * p], &x[i * p..(i + 1) * p]);
        }
    }
}

/// Dot product with independent partial sums so the loop vectorizes.
pub(super) fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 8];
    let (ca, cb) = (a.chunks_exact(8), b.chunks_exact(8));
    let tail: f64 = ca
        .remainder()
        .iter()
        .zip(cb.remainder())
        .map(|(x, y)| x * y)
        .sum();
    for (x, y) in ca.zip(cb) {
        for k in 0..8 {
            acc[k] += x[k] * y[k];
        }
    }
    acc.iter().sum::<f64>() + tail
}

pub(super) fn sum(a: &[f64]) -> f64 {
    let mut acc = [0.0; 8];
    let chunks = a.chunks_exact(8);
    let tail: f64 = chunks.remainder().iter().sum();
    for x in chunks {
        for k in 0..8 {
            acc[k] += x[k];
        }
    }
    acc.iter().sum::<f64>() + tail
}
