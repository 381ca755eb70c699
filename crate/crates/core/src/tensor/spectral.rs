//! Pruned DFT kernels for truncated spectral mixing.
//!
//! Only a handful of modes survive the truncation, so instead of full FFTs the
//! row transforms are dense products against precomputed cosine/sine tables
//! (one large GEMM over every row of every channel), and the column
//! transforms run directly over the kept wavenumbers.

use std::collections::HashMap;
use std::f64::consts::PI;
use std::sync::{Arc, Mutex, OnceLock};

use num_complex::Complex64;

use super::gemm;
use crate::error::{Error, Result};

#[derive(Debug)]
pub(crate) struct SpectralPlan {
    n: usize,
    mh: usize,
    mw: usize,
    /// Largest kept `|ky|` and `|kx|`.
    cy: usize,
    cx: usize,
    /// `n × 2(cx+1)`: columns `cos(2π kx x/n)` then `-sin(2π kx x/n)`.
    row_fwd: Vec<f64>,
    /// Transpose of `row_fwd`.
    row_inv: Vec<f64>,
    /// `(2cy+1) × n` tables for `ky = a - cy`.
    col_cos: Vec<f64>,
    col_sin: Vec<f64>,
}

pub(crate) struct SpectralGrads {
    pub x: Option<Vec<f64>>,
    pub w: Option<(Vec<f64>, Vec<f64>)>,
}

type PlanCache = Mutex<HashMap<(usize, usize, usize), Arc<SpectralPlan>>>;

impl SpectralPlan {
    pub fn get(n: usize, mh: usize, mw: usize) -> Result<Arc<SpectralPlan>> {
        if mh < 2 || mw < 2 || mh % 2 != 0 || mw % 2 != 0 || mh > n / 2 || mw > n / 2 {
            return Err(Error::Shape(format!(
                "mode block {mh}x{mw} must be even, at least 2 and at most n/2 = {}",
                n / 2
            )));
        }
        static CACHE: OnceLock<PlanCache> = OnceLock::new();
        let cache = CACHE.get_or_init(Default::default);
        let mut map = cache.lock().expect("plan cache poisoned");
        Ok(map
            .entry((n, mh, mw))
            .or_insert_with(|| Arc::new(SpectralPlan::build(n, mh, mw)))
            .clone())
    }

    fn build(n: usize, mh: usize, mw: usize) -> Self {
        let (cy, cx) = (mh / 2 - 1, mw / 2 - 1);
        let kxs = cx + 1;
        let kys = 2 * cy + 1;
        let phase = |k: i64, x: usize| 2.0 * PI * ((k * x as i64).rem_euclid(n as i64)) as f64 / n as f64;
        let mut row_fwd = vec![0.0; n * 2 * kxs];
        let mut row_inv = vec![0.0; 2 * kxs * n];
        for x in 0..n {
            for k in 0..kxs {
                let t = phase(k as i64, x);
                let (c, s) = (t.cos(), -t.sin());
                row_fwd[x * 2 * kxs + k] = c;
                row_fwd[x * 2 * kxs + kxs + k] = s;
                row_inv[k * n + x] = c;
                row_inv[(kxs + k) * n + x] = s;
            }
        }
        let mut col_cos = vec![0.0; kys * n];
        let mut col_sin = vec![0.0; kys * n];
        for a in 0..kys {
            let ky = a as i64 - cy as i64;
            for y in 0..n {
                let t = phase(ky, y);
                col_cos[a * n + y] = t.cos();
                col_sin[a * n + y] = t.sin();
            }
        }
        Self {
            n,
            mh,
            mw,
            cy,
            cx,
            row_fwd,
            row_inv,
            col_cos,
            col_sin,
        }
    }

    fn kxs(&self) -> usize {
        self.cx + 1
    }

    fn kys(&self) -> usize {
        2 * self.cy + 1
    }

    fn kxf(&self) -> usize {
        2 * self.cx + 1
    }

    /// Offset of full-box mode `(a, bidx)` inside one `Mh × Mw` weight block.
    #[inline]
    fn widx(&self, a: usize, bidx: usize) -> usize {
        (a + self.mh / 2 - self.cy) * self.mw + bidx + self.mw / 2 - self.cx
    }

    /// Returns the output and the kept half-spectrum of the input
    /// (`[B, Cin, 2cy+1, cx+1]`), which the backward pass reuses.
    pub fn forward(
        &self,
        x: &[f64],
        bs: usize,
        cin: usize,
        wr: &[f64],
        wi: &[f64],
        cout: usize,
    ) -> (Vec<f64>, Vec<Complex64>) {
        let n = self.n;
        let (kxs, kys, kxf) = (self.kxs(), self.kys(), self.kxf());
        let mut a = vec![0.0; bs * cin * n * 2 * kxs];
        gemm(bs * cin * n, n, 2 * kxs, x, (n, 1), &self.row_fwd, (2 * kxs, 1), &mut a, 0.0);

        let scale = 1.0 / (n * n) as f64;
        let half = kys * kxs;
        let mut xhat = vec![Complex64::new(0.0, 0.0); bs * cin * half];
        for (blk, xh) in xhat.chunks_exact_mut(half).enumerate() {
            let ab = &a[blk * n * 2 * kxs..(blk + 1) * n * 2 * kxs];
            self.col_forward(ab, xh, scale);
        }

        let box_len = kys * kxf;
        let wblk = self.mh * self.mw;
        let mut s = vec![0.0; bs * cout * n * 2 * kxs];
        let mut full = vec![Complex64::new(0.0, 0.0); cin * box_len];
        let mut p = vec![Complex64::new(0.0, 0.0); box_len];
        for b in 0..bs {
            for ci in 0..cin {
                let xh = &xhat[(b * cin + ci) * half..(b * cin + ci + 1) * half];
                self.unfold(xh, &mut full[ci * box_len..(ci + 1) * box_len]);
            }
            for co in 0..cout {
                p.fill(Complex64::new(0.0, 0.0));
                for ci in 0..cin {
                    let wo = (co * cin + ci) * wblk;
                    let xf = &full[ci * box_len..(ci + 1) * box_len];
                    for ai in 0..kys {
                        for bi in 0..kxf {
                            let wk = self.widx(ai, bi);
                            let w = Complex64::new(wr[wo + wk], wi[wo + wk]);
                            p[ai * kxf + bi] += w * xf[ai * kxf + bi];
                        }
                    }
                }
                let sb = (b * cout + co) * n * 2 * kxs;
                self.col_inverse_fold(&p, &mut s[sb..sb + n * 2 * kxs]);
            }
        }

        let mut out = vec![0.0; bs * cout * n * n];
        gemm(bs * cout * n, 2 * kxs, n, &s, (2 * kxs, 1), &self.row_inv, (n, 1), &mut out, 0.0);
        (out, xhat)
    }

    #[allow(clippy::too_many_arguments)]
    pub fn backward(
        &self,
        g: &[f64],
        bs: usize,
        cin: usize,
        cout: usize,
        wr: &[f64],
        wi: &[f64],
        xhat: &[Complex64],
        need_x: bool,
        need_w: bool,
    ) -> SpectralGrads {
        let n = self.n;
        let (kxs, kys, kxf) = (self.kxs(), self.kys(), self.kxf());
        let half = kys * kxs;
        let box_len = kys * kxf;
        let wblk = self.mh * self.mw;

        let mut gs = vec![0.0; bs * cout * n * 2 * kxs];
        gemm(bs * cout * n, n, 2 * kxs, g, (n, 1), &self.row_fwd, (2 * kxs, 1), &mut gs, 0.0);

        let mut gwr = need_w.then(|| vec![0.0; wr.len()]);
        let mut gwi = need_w.then(|| vec![0.0; wi.len()]);
        let mut ga = need_x.then(|| vec![0.0; bs * cin * n * 2 * kxs]);

        let mut gp = vec![Complex64::new(0.0, 0.0); cout * box_len];
        let mut full = vec![Complex64::new(0.0, 0.0); box_len];
        let mut gfull = vec![Complex64::new(0.0, 0.0); box_len];
        let mut gxh = vec![Complex64::new(0.0, 0.0); half];
        let scale = 1.0 / (n * n) as f64;
        for b in 0..bs {
            for co in 0..cout {
                let sb = (b * cout + co) * n * 2 * kxs;
                self.col_inverse_fold_adjoint(
                    &gs[sb..sb + n * 2 * kxs],
                    &mut gp[co * box_len..(co + 1) * box_len],
                );
            }
            for ci in 0..cin {
                let xh = &xhat[(b * cin + ci) * half..(b * cin + ci + 1) * half];
                self.unfold(xh, &mut full);
                gfull.fill(Complex64::new(0.0, 0.0));
                for co in 0..cout {
                    let wo = (co * cin + ci) * wblk;
                    let gpc = &gp[co * box_len..(co + 1) * box_len];
                    for ai in 0..kys {
                        for bi in 0..kxf {
                            let m = ai * kxf + bi;
                            let wk = wo + self.widx(ai, bi);
                            if let (Some(gr), Some(gi)) = (gwr.as_mut(), gwi.as_mut()) {
                                // dL/dW = G · conj(X)
                                let d = gpc[m] * full[m].conj();
                                gr[wk] += d.re;
                                gi[wk] += d.im;
                            }
                            if need_x {
                                gfull[m] += gpc[m] * Complex64::new(wr[wk], -wi[wk]);
                            }
                        }
                    }
                }
                if let Some(ga) = ga.as_mut() {
                    self.unfold_adjoint(&gfull, &mut gxh);
                    let ab = (b * cin + ci) * n * 2 * kxs;
                    self.col_forward_adjoint(&gxh, &mut ga[ab..ab + n * 2 * kxs], scale);
                }
            }
        }

        let x = ga.map(|ga| {
            let mut gx = vec![0.0; bs * cin * n * n];
            gemm(bs * cin * n, 2 * kxs, n, &ga, (2 * kxs, 1), &self.row_inv, (n, 1), &mut gx, 0.0);
            gx
        });
        SpectralGrads {
            x,
            w: gwr.zip(gwi),
        }
    }

    /// Column DFT of one channel's row spectra `a` (`n × 2kxs`, real parts
    /// then imaginary parts) onto the kept `ky`.
    fn col_forward(&self, a: &[f64], xh: &mut [Complex64], scale: f64) {
        let (n, kxs, kys) = (self.n, self.kxs(), self.kys());
        xh.fill(Complex64::new(0.0, 0.0));
        for y in 0..n {
            let row = &a[y * 2 * kxs..(y + 1) * 2 * kxs];
            for ai in 0..kys {
                let c = self.col_cos[ai * n + y];
                let s = self.col_sin[ai * n + y];
                let out = &mut xh[ai * kxs..(ai + 1) * kxs];
                for k in 0..kxs {
                    let (ar, aim) = (row[k], row[kxs + k]);
                    out[k].re += ar * c + aim * s;
                    out[k].im += aim * c - ar * s;
                }
            }
        }
        xh.iter_mut().for_each(|v| *v *= scale);
    }

    fn col_forward_adjoint(&self, gxh: &[Complex64], ga: &mut [f64], scale: f64) {
        let (n, kxs, kys) = (self.n, self.kxs(), self.kys());
        for y in 0..n {
            let row = &mut ga[y * 2 * kxs..(y + 1) * 2 * kxs];
            for ai in 0..kys {
                let c = self.col_cos[ai * n + y] * scale;
                let s = self.col_sin[ai * n + y] * scale;
                let gx = &gxh[ai * kxs..(ai + 1) * kxs];
                for k in 0..kxs {
                    row[k] += gx[k].re * c - gx[k].im * s;
                    row[kxs + k] += gx[k].re * s + gx[k].im * c;
                }
            }
        }
    }

    /// Half spectrum (`kx ≥ 0`) to the full kept box via conjugate symmetry.
    fn unfold(&self, xh: &[Complex64], full: &mut [Complex64]) {
        let (kxs, kys, kxf, cx) = (self.kxs(), self.kys(), self.kxf(), self.cx);
        for ai in 0..kys {
            for bi in 0..kxf {
                full[ai * kxf + bi] = if bi >= cx {
                    xh[ai * kxs + bi - cx]
                } else {
                    xh[(kys - 1 - ai) * kxs + cx - bi].conj()
                };
            }
        }
    }

    fn unfold_adjoint(&self, gfull: &[Complex64], gxh: &mut [Complex64]) {
        let (kxs, kys, kxf, cx) = (self.kxs(), self.kys(), self.kxf(), self.cx);
        gxh.fill(Complex64::new(0.0, 0.0));
        for ai in 0..kys {
            for bi in 0..kxf {
                let g = gfull[ai * kxf + bi];
                if bi >= cx {
                    gxh[ai * kxs + bi - cx] += g;
                } else {
                    gxh[(kys - 1 - ai) * kxs + cx - bi] += g.conj();
                }
            }
        }
    }

    /// Inverse column DFT of the mixed box, folded onto `kx ≥ 0` so the row
    /// expansion `out = S · row_inv` yields the real part directly.
    fn col_inverse_fold(&self, p: &[Complex64], s: &mut [f64]) {
        let (n, kxs, kys, kxf, cx) = (self.n, self.kxs(), self.kys(), self.kxf(), self.cx);
        let mut q = vec![Complex64::new(0.0, 0.0); kxf];
        for y in 0..n {
            q.fill(Complex64::new(0.0, 0.0));
            for ai in 0..kys {
                let e = Complex64::new(self.col_cos[ai * n + y], self.col_sin[ai * n + y]);
                let pr = &p[ai * kxf..(ai + 1) * kxf];
                for (qv, &pv) in q.iter_mut().zip(pr) {
                    *qv += pv * e;
                }
            }
            let row = &mut s[y * 2 * kxs..(y + 1) * 2 * kxs];
            row[0] = q[cx].re;
            row[kxs] = 0.0;
            for k in 1..kxs {
                row[k] = q[cx + k].re + q[cx - k].re;
                row[kxs + k] = q[cx + k].im - q[cx - k].im;
            }
        }
    }

    fn col_inverse_fold_adjoint(&self, gs: &[f64], gp: &mut [Complex64]) {
        let (n, kxs, kys, kxf, cx) = (self.n, self.kxs(), self.kys(), self.kxf(), self.cx);
        gp.fill(Complex64::new(0.0, 0.0));
        let mut gq = vec![Complex64::new(0.0, 0.0); kxf];
        for y in 0..n {
            let row = &gs[y * 2 * kxs..(y + 1) * 2 * kxs];
            gq[cx] = Complex64::new(row[0], 0.0);
            for k in 1..kxs {
                gq[cx + k] = Complex64::new(row[k], row[kxs + k]);
                gq[cx - k] = Complex64::new(row[k], -row[kxs + k]);
            }
            for ai in 0..kys {
                // adjoint of multiplication by e^{iθ} is multiplication by e^{-iθ}
                let e = Complex64::new(self.col_cos[ai * n + y], -self.col_sin[ai * n + y]);
                let out = &mut gp[ai * kxf..(ai + 1) * kxf];
                for (o, &gv) in out.iter_mut().zip(&gq) {
                    *o += gv * e;
                }
            }
        }
    }
}
