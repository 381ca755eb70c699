//! Fine→coarse projection and the non-learned coarse→fine lifts.
//!
//! Coarse node `i` sits on fine node `r·i` (corner alignment) for every
//! transfer, so decimation and both lifts agree on shared nodes.

use std::fmt;
use std::str::FromStr;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{Fft2, Field2D, Spectrum2D};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransferMode {
    Decimate,
    Bicubic,
    SpectralPad,
}

impl fmt::Display for TransferMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TransferMode::Decimate => "decimate",
            TransferMode::Bicubic => "bicubic",
            TransferMode::SpectralPad => "spectral_pad",
        })
    }
}

impl FromStr for TransferMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "decimate" => Ok(TransferMode::Decimate),
            "bicubic" => Ok(TransferMode::Bicubic),
            "spectral_pad" | "spectral-pad" => Ok(TransferMode::SpectralPad),
            other => Err(Error::Parameter(format!("unknown transfer mode `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransferSpec {
    pub n_fine: usize,
    pub n_coarse: usize,
    pub mode: TransferMode,
}

impl TransferSpec {
    pub fn new(n_coarse: usize, n_fine: usize, mode: TransferMode) -> Result<Self> {
        if n_coarse == 0 || n_fine % n_coarse != 0 {
            return Err(Error::Parameter(format!(
                "fine size {n_fine} is not a multiple of coarse size {n_coarse}"
            )));
        }
        let ratio = n_fine / n_coarse;
        if ![2, 4, 8].contains(&ratio) {
            return Err(Error::Parameter(format!(
                "resolution ratio must be 2, 4 or 8, got {ratio}"
            )));
        }
        Ok(Self {
            n_fine,
            n_coarse,
            mode,
        })
    }

    pub fn ratio(&self) -> usize {
        self.n_fine / self.n_coarse
    }

    pub fn with_mode(self, mode: TransferMode) -> Self {
        Self { mode, ..self }
    }

    fn expect(&self, f: &Field2D, n: usize, what: &str) -> Result<()> {
        if f.n() != n {
            return Err(Error::Shape(format!(
                "{what} expects a {n}x{n} field, got {}x{}",
                f.n(),
                f.n()
            )));
        }
        Ok(())
    }
}

/// `u_c(i, j) = u_f(r i, r j)`; no filtering.
pub fn decimate(f: &Field2D, spec: &TransferSpec) -> Result<Field2D> {
    spec.expect(f, spec.n_fine, "decimate")?;
    let r = spec.ratio();
    let (nf, nc) = (spec.n_fine, spec.n_coarse);
    let d = f.data();
    let mut out = Vec::with_capacity(nc * nc);
    for j in 0..nc {
        for i in 0..nc {
            out.push(d[r * j * nf + r * i]);
        }
    }
    Field2D::new(nc, out)
}

/// Keys cubic convolution kernel with `a = -0.5`.
pub fn cubic_kernel(t: f64) -> f64 {
    const A: f64 = -0.5;
    let t = t.abs();
    if t <= 1.0 {
        (A + 2.0) * t.powi(3) - (A + 3.0) * t * t + 1.0
    } else if t < 2.0 {
        A * t.powi(3) - 5.0 * A * t * t + 8.0 * A * t - 4.0 * A
    } else {
        0.0
    }
}

/// Tap weights for the four coarse neighbours `base-1..=base+2` of each
/// fine phase `p / r`.
fn cubic_taps(r: usize) -> Vec<[f64; 4]> {
    (0..r)
        .map(|p| {
            let t = p as f64 / r as f64;
            [
                cubic_kernel(t + 1.0),
                cubic_kernel(t),
                cubic_kernel(1.0 - t),
                cubic_kernel(2.0 - t),
            ]
        })
        .collect()
}

/// Separable periodic bicubic interpolation.
pub fn bicubic_upsample(f: &Field2D, spec: &TransferSpec) -> Result<Field2D> {
    spec.expect(f, spec.n_coarse, "bicubic_upsample")?;
    let r = spec.ratio();
    let (nf, nc) = (spec.n_fine, spec.n_coarse);
    let taps = cubic_taps(r);
    let src = f.data();
    // along x: nc rows of nf samples
    let mut rows = vec![0.0; nc * nf];
    for j in 0..nc {
        let row = &src[j * nc..(j + 1) * nc];
        for fi in 0..nf {
            let base = (fi / r) as isize;
            let w = &taps[fi % r];
            let mut acc = 0.0;
            for (m, &wm) in w.iter().enumerate() {
                let ci = (base + m as isize - 1).rem_euclid(nc as isize) as usize;
                acc += wm * row[ci];
            }
            rows[j * nf + fi] = acc;
        }
    }
    // along y
    let mut out = vec![0.0; nf * nf];
    for fj in 0..nf {
        let base = (fj / r) as isize;
        let w = &taps[fj % r];
        let dst = &mut out[fj * nf..(fj + 1) * nf];
        for (m, &wm) in w.iter().enumerate() {
            if wm == 0.0 {
                continue;
            }
            let cj = (base + m as isize - 1).rem_euclid(nc as isize) as usize;
            let src_row = &rows[cj * nf..(cj + 1) * nf];
            for (d, &s) in dst.iter_mut().zip(src_row) {
                *d += wm * s;
            }
        }
    }
    Field2D::new(nf, out)
}

/// Embeds the coarse spectrum into the fine one with zero padding. The coarse
/// Nyquist row and column are dropped.
pub fn spectral_pad_upsample(f: &Field2D, spec: &TransferSpec) -> Result<Field2D> {
    spec.expect(f, spec.n_coarse, "spectral_pad_upsample")?;
    let (nf, nc) = (spec.n_fine, spec.n_coarse);
    let coarse = Fft2::get(nc).forward_real(f.data());
    let mut fine = vec![Complex64::new(0.0, 0.0); nf * nf];
    let half = (nc / 2) as i64;
    for iy in 0..nc {
        let ky = Spectrum2D::wavenumber(nc, iy);
        if ky == -half {
            continue;
        }
        let fy = ky.rem_euclid(nf as i64) as usize;
        for ix in 0..nc {
            let kx = Spectrum2D::wavenumber(nc, ix);
            if kx == -half {
                continue;
            }
            let fx = kx.rem_euclid(nf as i64) as usize;
            fine[fy * nf + fx] = coarse[iy * nc + ix];
        }
    }
    Field2D::new(nf, Fft2::get(nf).inverse_real(&fine))
}

/// Ideal spectral truncation onto the coarse grid (diagnostic; training and
/// the surrogate always use [`decimate`]).
pub fn spectral_restrict(f: &Field2D, spec: &TransferSpec) -> Result<Field2D> {
    spec.expect(f, spec.n_fine, "spectral_restrict")?;
    let (nf, nc) = (spec.n_fine, spec.n_coarse);
    let fine = Fft2::get(nf).forward_real(f.data());
    let mut coarse = vec![Complex64::new(0.0, 0.0); nc * nc];
    let half = (nc / 2) as i64;
    for iy in 0..nc {
        let ky = Spectrum2D::wavenumber(nc, iy);
        for ix in 0..nc {
            let kx = Spectrum2D::wavenumber(nc, ix);
            if kx == -half || ky == -half {
                continue;
            }
            let (fy, fx) = (ky.rem_euclid(nf as i64) as usize, kx.rem_euclid(nf as i64) as usize);
            coarse[iy * nc + ix] = fine[fy * nf + fx];
        }
    }
    Field2D::new(nc, Fft2::get(nc).inverse_real(&coarse))
}

/// Coarse→fine lift selected by `spec.mode`.
pub fn lift(f: &Field2D, spec: &TransferSpec) -> Result<Field2D> {
    match spec.mode {
        TransferMode::Bicubic => bicubic_upsample(f, spec),
        TransferMode::SpectralPad => spectral_pad_upsample(f, spec),
        TransferMode::Decimate => Err(Error::Parameter(
            "decimate is a projection, not a lift".into(),
        )),
    }
}

pub fn decimate_state(state: &[Field2D], spec: &TransferSpec) -> Result<Vec<Field2D>> {
    state.iter().map(|f| decimate(f, spec)).collect()
}

pub fn lift_state(state: &[Field2D], spec: &TransferSpec) -> Result<Vec<Field2D>> {
    state.iter().map(|f| lift(f, spec)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{drop_nyquist, forward_fft, inverse_fft};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    fn spec(nc: usize, nf: usize) -> TransferSpec {
        TransferSpec::new(nc, nf, TransferMode::Decimate).unwrap()
    }

    fn random_field(n: usize, seed: u64) -> Field2D {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Field2D::new(n, (0..n * n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn spec_validation() {
        assert!(TransferSpec::new(32, 128, TransferMode::Bicubic).is_ok());
        assert!(TransferSpec::new(16, 128, TransferMode::Bicubic).is_ok());
        assert!(TransferSpec::new(48, 128, TransferMode::Bicubic).is_err());
        assert!(TransferSpec::new(8, 128, TransferMode::Bicubic).is_err());
    }

    #[test]
    fn decimate_constant_and_low_mode() {
        let s = spec(32, 128);
        let c = decimate(&Field2D::constant(128, 1.5), &s).unwrap();
        assert_eq!(c, Field2D::constant(32, 1.5));
        let f = Field2D::from_fn(128, |x, _| (2.0 * PI * x).cos());
        let expect = Field2D::from_fn(32, |x, _| (2.0 * PI * x).cos());
        assert!(decimate(&f, &s).unwrap().max_abs_diff(&expect) < 1e-14);
    }

    #[test]
    fn decimate_aliases_high_mode() {
        let s = spec(32, 128);
        let f = Field2D::from_fn(128, |x, _| (2.0 * PI * 20.0 * x).cos());
        let spectrum = forward_fft(&decimate(&f, &s).unwrap()).unwrap();
        // 20 mod 32 lands on -12 (and its mirror +12)
        assert!((spectrum.get(-12, 0).re - 0.5).abs() < 1e-12);
        assert!((spectrum.get(12, 0).re - 0.5).abs() < 1e-12);
        let rest = spectrum.energy() - 0.5;
        assert!(rest.abs() < 1e-12);
    }

    #[test]
    fn decimate_shape_error() {
        assert!(matches!(
            decimate(&Field2D::zeros(64), &spec(32, 128)),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn kernel_values_at_quarter_offsets() {
        // a = -0.5: K(0)=1, K(.25)=0.8671875, K(.5)=0.5625, K(.75)=0.2265625,
        // K(1.25)=-0.0703125, K(1.5)=-0.0625, K(1.75)=-0.0234375, K(1)=K(2)=0
        let table = [
            (0.0, 1.0),
            (0.25, 0.8671875),
            (0.5, 0.5625),
            (0.75, 0.2265625),
            (1.0, 0.0),
            (1.25, -0.0703125),
            (1.5, -0.0625),
            (1.75, -0.0234375),
            (2.0, 0.0),
        ];
        for (t, k) in table {
            assert!((cubic_kernel(t) - k).abs() < 1e-15, "K({t})");
            assert!((cubic_kernel(-t) - k).abs() < 1e-15);
        }
    }

    #[test]
    fn bicubic_constant_is_exact() {
        let s = spec(16, 64).with_mode(TransferMode::Bicubic);
        let out = bicubic_upsample(&Field2D::constant(16, -2.0), &s).unwrap();
        assert!(out.max_abs_diff(&Field2D::constant(64, -2.0)) < 1e-14);
    }

    #[test]
    fn bicubic_delta_response_is_tensor_kernel() {
        let s = spec(16, 64).with_mode(TransferMode::Bicubic);
        let mut d = Field2D::zeros(16);
        d.data_mut()[5 * 16 + 7] = 1.0;
        let out = bicubic_upsample(&d, &s).unwrap();
        for fj in 0..64isize {
            for fi in 0..64isize {
                let dx = fi as f64 / 4.0 - 7.0;
                let dy = fj as f64 / 4.0 - 5.0;
                let expect = cubic_kernel(dx) * cubic_kernel(dy);
                assert!((out.at(fi, fj) - expect).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn bicubic_reproduces_nodes_and_ramps() {
        let s = spec(32, 128).with_mode(TransferMode::Bicubic);
        let f = random_field(32, 4);
        let back = decimate(&bicubic_upsample(&f, &s).unwrap(), &s).unwrap();
        assert!(back.max_abs_diff(&f) < 1e-14);
        // linear ramp away from the seam
        let ramp = Field2D::from_fn(32, |x, y| 2.0 * x - y);
        let up = bicubic_upsample(&ramp, &s).unwrap();
        for fj in 8..112isize {
            for fi in 8..112isize {
                let expect = 2.0 * fi as f64 / 128.0 - fj as f64 / 128.0;
                assert!((up.at(fi, fj) - expect).abs() < 1e-13);
            }
        }
    }

    #[test]
    fn bicubic_error_drops_when_ratio_halves() {
        let nf = 128;
        let err_at = |nc: usize| {
            let s = spec(nc, nf).with_mode(TransferMode::Bicubic);
            let c = Field2D::from_fn(nc, |x, y| (2.0 * PI * (x + y)).sin());
            let exact = Field2D::from_fn(nf, |x, y| (2.0 * PI * (x + y)).sin());
            bicubic_upsample(&c, &s).unwrap().max_abs_diff(&exact)
        };
        let ratio = err_at(32) / err_at(64);
        assert!(ratio >= 10.0, "ratio {ratio}");
    }

    #[test]
    fn spectral_pad_exact_on_band_limited() {
        let s = spec(32, 128).with_mode(TransferMode::SpectralPad);
        let c = Field2D::from_fn(32, |x, _| (2.0 * PI * x).cos());
        let exact = Field2D::from_fn(128, |x, _| (2.0 * PI * x).cos());
        assert!(spectral_pad_upsample(&c, &s).unwrap().max_abs_diff(&exact) < 1e-12);
    }

    #[test]
    fn spectral_pad_preserves_energy_and_nodes() {
        let s = spec(16, 64).with_mode(TransferMode::SpectralPad);
        let raw = forward_fft(&random_field(16, 9)).unwrap();
        let c = inverse_fft(&drop_nyquist(&raw)).unwrap();
        let up = spectral_pad_upsample(&c, &s).unwrap();
        let e_c = forward_fft(&c).unwrap().energy();
        let e_f = forward_fft(&up).unwrap().energy();
        assert!((e_c - e_f).abs() / e_c < 1e-12);
        assert!(decimate(&up, &s).unwrap().max_abs_diff(&c) < 1e-13);
    }

    #[test]
    fn spectral_restrict_of_padded_is_identity() {
        let s = spec(16, 64);
        let c = inverse_fft(&drop_nyquist(&forward_fft(&random_field(16, 2)).unwrap())).unwrap();
        let up = spectral_pad_upsample(&c, &s).unwrap();
        assert!(spectral_restrict(&up, &s).unwrap().max_abs_diff(&c) < 1e-13);
    }

    #[test]
    fn lift_rejects_decimate() {
        assert!(lift(&Field2D::zeros(16), &spec(16, 64)).is_err());
    }

    mod props {
        use super::*;
        use crate::grid::lowpass_project;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(16))]
            #[test]
            fn transfers_are_linear(seed in 0u64..1000, a in -3.0f64..3.0, b in -3.0f64..3.0) {
                let base = spec(16, 64);
                for mode in [TransferMode::Bicubic, TransferMode::SpectralPad] {
                    let s = base.with_mode(mode);
                    let f = random_field(16, seed);
                    let g = random_field(16, seed + 1);
                    let lhs = lift(&f.lincomb(a, &g, b), &s).unwrap();
                    let rhs = lift(&f, &s).unwrap().lincomb(a, &lift(&g, &s).unwrap(), b);
                    prop_assert!(lhs.max_abs_diff(&rhs) < 1e-12);
                }
                let f = random_field(64, seed);
                let g = random_field(64, seed + 7);
                let lhs = decimate(&f.lincomb(a, &g, b), &base).unwrap();
                let rhs = decimate(&f, &base).unwrap().lincomb(a, &decimate(&g, &base).unwrap(), b);
                prop_assert!(lhs.max_abs_diff(&rhs) < 1e-12);
            }

            #[test]
            fn decimate_inverts_spectral_pad(seed in 0u64..1000, p in 1u32..4) {
                let s = spec(16, 16 << p).with_mode(TransferMode::SpectralPad);
                let raw = forward_fft(&random_field(16, seed)).unwrap();
                let c = inverse_fft(&lowpass_project(&raw, 7).unwrap()).unwrap();
                let up = spectral_pad_upsample(&c, &s).unwrap();
                prop_assert!(decimate(&up, &s).unwrap().max_abs_diff(&c) < 1e-12);
            }
        }
    }
}
