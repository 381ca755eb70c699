//! Periodic grid fields, 2D discrete Fourier transforms and the orthogonal
//! Fourier projectors used by the solvers, transfers and diagnostics.
//!
//! Fields live on `[0,1)²` sampled at `x_i = i/n`, `y_j = j/n`, stored
//! row-major with `x` as the fast index (`data[j * n + i]`). Spectra use FFT
//! ordering on both axes: storage index `i` holds wavenumber `i` for
//! `i < n/2` and `i - n` otherwise, so wavenumbers run over `-n/2..n/2`.

use std::collections::HashMap;
use std::f64::consts::PI;
use std::sync::{Arc, Mutex, OnceLock};

use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Hermitian tolerance accepted by [`inverse_fft`], relative to `max(1, max |c|)`.
pub const HERMITIAN_TOL: f64 = 1e-9;

/// Real scalar field on an `n × n` periodic grid.
#[derive(Clone, Debug, PartialEq)]
pub struct Field2D {
    n: usize,
    data: Vec<f64>,
}

impl Field2D {
    pub fn new(n: usize, data: Vec<f64>) -> Result<Self> {
        check_grid_size(n)?;
        if data.len() != n * n {
            return Err(Error::Shape(format!(
                "field of size {n} needs {} samples, got {}",
                n * n,
                data.len()
            )));
        }
        Ok(Self { n, data })
    }

    pub fn zeros(n: usize) -> Self {
        Self::constant(n, 0.0)
    }

    pub fn constant(n: usize, value: f64) -> Self {
        check_grid_size(n).expect("invalid grid size");
        Self {
            n,
            data: vec![value; n * n],
        }
    }

    /// Samples `f(x, y)` at the grid nodes.
    pub fn from_fn(n: usize, f: impl Fn(f64, f64) -> f64) -> Self {
        check_grid_size(n).expect("invalid grid size");
        let h = 1.0 / n as f64;
        let mut data = Vec::with_capacity(n * n);
        for j in 0..n {
            for i in 0..n {
                data.push(f(i as f64 * h, j as f64 * h));
            }
        }
        Self { n, data }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Value at node `(i, j)` with periodic wraparound.
    #[inline]
    pub fn at(&self, i: isize, j: isize) -> f64 {
        let n = self.n as isize;
        let i = i.rem_euclid(n) as usize;
        let j = j.rem_euclid(n) as usize;
        self.data[j * self.n + i]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn ensure_finite(&self, what: &str) -> Result<()> {
        if self.is_finite() {
            Ok(())
        } else {
            Err(Error::NumericInput(format!("{what} contains NaN or Inf")))
        }
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }

    pub fn min(&self) -> f64 {
        self.data.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Euclidean norm over all grid points.
    pub fn norm2(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn max_abs_diff(&self, other: &Field2D) -> f64 {
        assert_eq!(self.n, other.n, "grid size mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .fold(0.0, |m, (a, b)| m.max((a - b).abs()))
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Field2D {
        Field2D {
            n: self.n,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn scaled(&self, s: f64) -> Field2D {
        self.map(|v| v * s)
    }

    /// `a * self + b * other`.
    pub fn lincomb(&self, a: f64, other: &Field2D, b: f64) -> Field2D {
        assert_eq!(self.n, other.n, "grid size mismatch");
        Field2D {
            n: self.n,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(x, y)| a * x + b * y)
                .collect(),
        }
    }

    /// Periodic translation by whole grid cells: `out(i, j) = self(i - di, j - dj)`.
    pub fn shifted(&self, di: isize, dj: isize) -> Field2D {
        let n = self.n;
        let mut data = vec![0.0; n * n];
        for j in 0..n {
            for i in 0..n {
                data[j * n + i] = self.at(i as isize - di, j as isize - dj);
            }
        }
        Field2D { n, data }
    }
}

fn check_grid_size(n: usize) -> Result<()> {
    if n < 4 || n % 2 != 0 {
        return Err(Error::Parameter(format!(
            "grid size must be even and at least 4, got {n}"
        )));
    }
    Ok(())
}

/// Normalization attached to a spectrum.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum NormConvention {
    /// Forward transform divides by `n²`; the DC coefficient is the field mean.
    MeanPreserving,
}

/// Complex Fourier coefficients of a field, in FFT ordering.
#[derive(Clone, Debug, PartialEq)]
pub struct Spectrum2D {
    n: usize,
    coeffs: Vec<Complex64>,
    norm: NormConvention,
}

impl Spectrum2D {
    pub fn zeros(n: usize) -> Self {
        check_grid_size(n).expect("invalid grid size");
        Self {
            n,
            coeffs: vec![Complex64::new(0.0, 0.0); n * n],
            norm: NormConvention::MeanPreserving,
        }
    }

    pub fn from_coeffs(n: usize, coeffs: Vec<Complex64>) -> Result<Self> {
        check_grid_size(n)?;
        if coeffs.len() != n * n {
            return Err(Error::Shape(format!(
                "spectrum of size {n} needs {} coefficients, got {}",
                n * n,
                coeffs.len()
            )));
        }
        Ok(Self {
            n,
            coeffs,
            norm: NormConvention::MeanPreserving,
        })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn norm_convention(&self) -> NormConvention {
        self.norm
    }

    pub fn coeffs(&self) -> &[Complex64] {
        &self.coeffs
    }

    pub fn coeffs_mut(&mut self) -> &mut [Complex64] {
        &mut self.coeffs
    }

    #[inline]
    fn index(&self, kx: i64, ky: i64) -> usize {
        let n = self.n as i64;
        (ky.rem_euclid(n) * n + kx.rem_euclid(n)) as usize
    }

    /// Coefficient of mode `(kx, ky)`; wavenumbers are taken modulo `n`.
    pub fn get(&self, kx: i64, ky: i64) -> Complex64 {
        self.coeffs[self.index(kx, ky)]
    }

    pub fn set(&mut self, kx: i64, ky: i64, value: Complex64) {
        let idx = self.index(kx, ky);
        self.coeffs[idx] = value;
    }

    /// Sum of `|c_k|²`; equals the grid mean of `f²` under the mean-preserving
    /// normalization.
    pub fn energy(&self) -> f64 {
        self.coeffs.iter().map(|c| c.norm_sqr()).sum()
    }

    /// Real inner product `Re Σ a_k conj(b_k)`.
    pub fn inner(&self, other: &Spectrum2D) -> f64 {
        assert_eq!(self.n, other.n, "spectrum size mismatch");
        self.coeffs
            .iter()
            .zip(&other.coeffs)
            .map(|(a, b)| (a * b.conj()).re)
            .sum()
    }

    pub fn max_abs_diff(&self, other: &Spectrum2D) -> f64 {
        assert_eq!(self.n, other.n, "spectrum size mismatch");
        self.coeffs
            .iter()
            .zip(&other.coeffs)
            .fold(0.0, |m, (a, b)| m.max((a - b).norm()))
    }

    pub fn max_abs(&self) -> f64 {
        self.coeffs.iter().fold(0.0, |m, c| m.max(c.norm()))
    }

    /// Largest `|c(k) - conj(c(-k))|` over all modes.
    pub fn hermitian_deviation(&self) -> f64 {
        let n = self.n as i64;
        let mut dev = 0.0f64;
        for ky in 0..n {
            for kx in 0..n {
                let a = self.get(kx, ky);
                let b = self.get(-kx, -ky).conj();
                dev = dev.max((a - b).norm());
            }
        }
        dev
    }

    /// Signed wavenumber stored at index `i` along one axis.
    #[inline]
    pub fn wavenumber(n: usize, i: usize) -> i64 {
        if i < n / 2 {
            i as i64
        } else {
            i as i64 - n as i64
        }
    }

    fn map_modes(&self, keep: impl Fn(i64, i64) -> bool) -> Spectrum2D {
        let n = self.n;
        let mut out = self.clone();
        for iy in 0..n {
            let ky = Self::wavenumber(n, iy);
            for ix in 0..n {
                let kx = Self::wavenumber(n, ix);
                if !keep(kx, ky) {
                    out.coeffs[iy * n + ix] = Complex64::new(0.0, 0.0);
                }
            }
        }
        out
    }
}

/// Signed wavenumbers and `|k|²` in angular units for the unit square.
#[derive(Clone, Debug)]
pub struct WavenumberGrid {
    n: usize,
    kx: Vec<i64>,
    ky: Vec<i64>,
    ksq: Vec<f64>,
}

impl WavenumberGrid {
    pub fn new(n: usize) -> Self {
        check_grid_size(n).expect("invalid grid size");
        let mut kx = Vec::with_capacity(n * n);
        let mut ky = Vec::with_capacity(n * n);
        let mut ksq = Vec::with_capacity(n * n);
        let two_pi = 2.0 * PI;
        for iy in 0..n {
            let wy = Spectrum2D::wavenumber(n, iy);
            for ix in 0..n {
                let wx = Spectrum2D::wavenumber(n, ix);
                kx.push(wx);
                ky.push(wy);
                ksq.push((two_pi * wx as f64).powi(2) + (two_pi * wy as f64).powi(2));
            }
        }
        Self { n, kx, ky, ksq }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn kx(&self) -> &[i64] {
        &self.kx
    }

    pub fn ky(&self) -> &[i64] {
        &self.ky
    }

    pub fn ksq(&self) -> &[f64] {
        &self.ksq
    }

    /// True for modes on the unpaired Nyquist row or column (`k = -n/2`).
    pub fn is_nyquist(&self, idx: usize) -> bool {
        let half = (self.n / 2) as i64;
        self.kx[idx] == -half || self.ky[idx] == -half
    }
}

/// Cached forward/inverse plans for `n × n` complex transforms.
pub(crate) struct Fft2 {
    n: usize,
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
}

impl Fft2 {
    pub(crate) fn get(n: usize) -> Arc<Fft2> {
        static PLANS: OnceLock<Mutex<HashMap<usize, Arc<Fft2>>>> = OnceLock::new();
        let plans = PLANS.get_or_init(|| Mutex::new(HashMap::new()));
        let mut plans = plans.lock().expect("fft plan cache poisoned");
        plans
            .entry(n)
            .or_insert_with(|| {
                let mut planner = FftPlanner::new();
                Arc::new(Fft2 {
                    n,
                    forward: planner.plan_fft_forward(n),
                    inverse: planner.plan_fft_inverse(n),
                })
            })
            .clone()
    }

    fn apply(&self, buf: &mut [Complex64], plan: &Arc<dyn Fft<f64>>) {
        let n = self.n;
        debug_assert_eq!(buf.len(), n * n);
        let mut scratch = vec![Complex64::new(0.0, 0.0); plan.get_inplace_scratch_len()];
        plan.process_with_scratch(buf, &mut scratch);
        transpose_in_place(buf, n);
        plan.process_with_scratch(buf, &mut scratch);
        transpose_in_place(buf, n);
    }

    /// Unnormalized forward transform, `Σ f e^{-ik·x}`.
    pub(crate) fn forward(&self, buf: &mut [Complex64]) {
        self.apply(buf, &self.forward);
    }

    /// Unnormalized inverse transform, `Σ c e^{+ik·x}`.
    pub(crate) fn inverse(&self, buf: &mut [Complex64]) {
        self.apply(buf, &self.inverse);
    }

    /// Mean-preserving forward transform of a real buffer.
    pub(crate) fn forward_real(&self, data: &[f64]) -> Vec<Complex64> {
        let mut buf: Vec<Complex64> = data.iter().map(|&v| Complex64::new(v, 0.0)).collect();
        self.forward(&mut buf);
        let scale = 1.0 / (self.n * self.n) as f64;
        for c in &mut buf {
            *c *= scale;
        }
        buf
    }

    /// Inverse transform keeping the real part.
    pub(crate) fn inverse_real(&self, coeffs: &[Complex64]) -> Vec<f64> {
        let mut buf = coeffs.to_vec();
        self.inverse(&mut buf);
        buf.into_iter().map(|c| c.re).collect()
    }
}

fn transpose_in_place(buf: &mut [Complex64], n: usize) {
    for j in 0..n {
        for i in (j + 1)..n {
            buf.swap(j * n + i, i * n + j);
        }
    }
}

pub fn forward_fft(f: &Field2D) -> Result<Spectrum2D> {
    f.ensure_finite("forward_fft input")?;
    let coeffs = Fft2::get(f.n).forward_real(&f.data);
    Ok(Spectrum2D {
        n: f.n,
        coeffs,
        norm: NormConvention::MeanPreserving,
    })
}

pub fn inverse_fft(s: &Spectrum2D) -> Result<Field2D> {
    let scale = s.max_abs().max(1.0);
    let deviation = s.hermitian_deviation();
    if !deviation.is_finite() || deviation > HERMITIAN_TOL * scale {
        return Err(Error::AsymmetricSpectrum {
            deviation,
            tolerance: HERMITIAN_TOL * scale,
        });
    }
    let mut buf = s.coeffs.clone();
    Fft2::get(s.n).inverse(&mut buf);
    let residue = buf.iter().fold(0.0f64, |m, c| m.max(c.im.abs()));
    if residue > HERMITIAN_TOL * scale {
        return Err(Error::AsymmetricSpectrum {
            deviation: residue,
            tolerance: HERMITIAN_TOL * scale,
        });
    }
    Ok(Field2D {
        n: s.n,
        data: buf.into_iter().map(|c| c.re).collect(),
    })
}

fn check_cutoff(s: &Spectrum2D, kc: usize) -> Result<()> {
    if kc + 1 > s.n / 2 {
        return Err(Error::Parameter(format!(
            "cutoff {kc} outside 0..={}",
            s.n / 2 - 1
        )));
    }
    Ok(())
}

/// Keeps modes with `max(|kx|, |ky|) <= kc`; the Nyquist row and column are
/// always dropped since `kc <= n/2 - 1`.
pub fn lowpass_project(s: &Spectrum2D, kc: usize) -> Result<Spectrum2D> {
    check_cutoff(s, kc)?;
    let kc = kc as i64;
    Ok(s.map_modes(|kx, ky| kx.abs() <= kc && ky.abs() <= kc))
}

/// Complement of [`lowpass_project`].
pub fn highpass_project(s: &Spectrum2D, kc: usize) -> Result<Spectrum2D> {
    check_cutoff(s, kc)?;
    let kc = kc as i64;
    Ok(s.map_modes(|kx, ky| kx.abs() > kc || ky.abs() > kc))
}

/// Zeroes the Nyquist row and column.
pub fn drop_nyquist(s: &Spectrum2D) -> Spectrum2D {
    let half = (s.n / 2) as i64;
    s.map_modes(|kx, ky| kx != -half && ky != -half)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_field(n: usize, seed: u64) -> Field2D {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Field2D::new(n, (0..n * n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    fn random_hermitian(n: usize, seed: u64) -> Spectrum2D {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut s = Spectrum2D::zeros(n);
        for c in s.coeffs_mut() {
            *c = Complex64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
        }
        // symmetrize: c(k) <- (c(k) + conj c(-k)) / 2
        let mut out = s.clone();
        let n = n as i64;
        for ky in 0..n {
            for kx in 0..n {
                out.set(kx, ky, (s.get(kx, ky) + s.get(-kx, -ky).conj()) * 0.5);
            }
        }
        out
    }

    #[test]
    fn dc_only_field() {
        let s = forward_fft(&Field2D::constant(8, 2.5)).unwrap();
        assert!((s.get(0, 0) - Complex64::new(2.5, 0.0)).norm() < 1e-14);
        let rest: f64 = s.coeffs()[1..].iter().map(|c| c.norm()).sum();
        assert!(rest < 1e-13);
    }

    #[test]
    fn single_cosine_mode() {
        let f = Field2D::from_fn(16, |x, _| (2.0 * PI * x).cos());
        let s = forward_fft(&f).unwrap();
        for ky in -8i64..8 {
            for kx in -8i64..8 {
                let expect = if ky == 0 && kx.abs() == 1 { 0.5 } else { 0.0 };
                assert!((s.get(kx, ky) - Complex64::new(expect, 0.0)).norm() < 1e-14);
            }
        }
    }

    #[test]
    fn round_trip_all_sizes() {
        for &n in &[8usize, 16, 32, 64, 128, 256] {
            let f = random_field(n, n as u64);
            let back = inverse_fft(&forward_fft(&f).unwrap()).unwrap();
            let err = f.max_abs_diff(&back) / f.max_abs();
            assert!(err < 1e-12, "n={n} err={err}");
        }
    }

    #[test]
    fn real_input_gives_hermitian_spectrum() {
        let s = forward_fft(&random_field(32, 3)).unwrap();
        assert!(s.hermitian_deviation() < 1e-12);
    }

    #[test]
    fn delta_at_dc_inverts_to_constant() {
        let mut s = Spectrum2D::zeros(8);
        s.set(0, 0, Complex64::new(1.0, 0.0));
        let f = inverse_fft(&s).unwrap();
        assert!(f.max_abs_diff(&Field2D::constant(8, 1.0)) < 1e-15);
    }

    #[test]
    fn cosine_in_y_round_trips() {
        let f = Field2D::from_fn(16, |_, y| (2.0 * PI * y).cos());
        let back = inverse_fft(&forward_fft(&f).unwrap()).unwrap();
        assert!(f.max_abs_diff(&back) < 1e-12);
    }

    #[test]
    fn hermitian_spectrum_is_a_fixed_point() {
        let s = random_hermitian(16, 11);
        let back = forward_fft(&inverse_fft(&s).unwrap()).unwrap();
        assert!(s.max_abs_diff(&back) < 1e-12);
    }

    #[test]
    fn asymmetric_spectrum_rejected() {
        let mut s = Spectrum2D::zeros(8);
        s.set(1, 0, Complex64::new(1.0, 0.0));
        assert!(matches!(
            inverse_fft(&s),
            Err(Error::AsymmetricSpectrum { .. })
        ));
    }

    #[test]
    fn non_finite_input_rejected() {
        let mut f = Field2D::zeros(8);
        f.data_mut()[3] = f64::NAN;
        assert!(matches!(forward_fft(&f), Err(Error::NumericInput(_))));
    }

    #[test]
    fn invalid_sizes_rejected() {
        assert!(Field2D::new(6, vec![0.0; 25]).is_err());
        assert!(Field2D::new(7, vec![0.0; 49]).is_err());
        assert!(Field2D::new(2, vec![0.0; 4]).is_err());
    }

    #[test]
    fn projector_identities() {
        let s = forward_fft(&random_field(32, 5)).unwrap();
        let lo = lowpass_project(&s, 4).unwrap();
        let hi = highpass_project(&s, 4).unwrap();
        assert_eq!(lowpass_project(&lo, 4).unwrap(), lo);
        assert_eq!(highpass_project(&hi, 4).unwrap(), hi);
        // P_< P_> = 0
        assert!(lowpass_project(&hi, 4).unwrap().max_abs() == 0.0);
        let mut sum = lo.clone();
        for (a, b) in sum.coeffs_mut().iter_mut().zip(hi.coeffs()) {
            *a += b;
        }
        assert_eq!(sum, s);
        assert!(lo.inner(&hi).abs() < 1e-15);
        let split = lo.energy() + hi.energy();
        assert!((split - s.energy()).abs() / s.energy() < 1e-10);
    }

    #[test]
    fn lowpass_keeps_inband_mode() {
        let mut s = Spectrum2D::zeros(16);
        s.set(3, 0, Complex64::new(0.5, 0.0));
        s.set(-3, 0, Complex64::new(0.5, 0.0));
        assert_eq!(lowpass_project(&s, 4).unwrap(), s);
    }

    #[test]
    fn highpass_of_dc_is_zero() {
        let s = forward_fft(&Field2D::constant(8, 3.0)).unwrap();
        assert_eq!(highpass_project(&s, 2).unwrap().max_abs(), 0.0);
    }

    #[test]
    fn cutoff_out_of_range() {
        let s = Spectrum2D::zeros(8);
        assert!(lowpass_project(&s, 3).is_ok());
        assert!(matches!(lowpass_project(&s, 4), Err(Error::Parameter(_))));
        assert!(highpass_project(&s, 4).is_err());
    }

    #[test]
    fn parseval() {
        for &n in &[8usize, 32, 64] {
            let f = random_field(n, 100 + n as u64);
            let grid_energy = f.data().iter().map(|v| v * v).sum::<f64>() / (n * n) as f64;
            let spec_energy = forward_fft(&f).unwrap().energy();
            assert!((grid_energy - spec_energy).abs() / grid_energy < 1e-10);
        }
    }

    #[test]
    fn wavenumber_grid() {
        let w = WavenumberGrid::new(8);
        assert_eq!(w.ksq()[0], 0.0);
        let n = 8i64;
        for idx in 0..64 {
            let (kx, ky) = (w.kx()[idx], w.ky()[idx]);
            if kx == -4 || ky == -4 {
                assert!(w.is_nyquist(idx));
                continue;
            }
            let mirror = ((-ky).rem_euclid(n) * n + (-kx).rem_euclid(n)) as usize;
            assert_eq!(w.ksq()[idx], w.ksq()[mirror]);
        }
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(32))]
            #[test]
            fn projectors_split_any_spectrum(seed in 0u64..10_000, kc in 0usize..8) {
                let s = forward_fft(&random_field(16, seed)).unwrap();
                let lo = lowpass_project(&s, kc).unwrap();
                let hi = highpass_project(&s, kc).unwrap();
                prop_assert!((lo.energy() + hi.energy() - s.energy()).abs() <= 1e-10 * s.energy());
                prop_assert!(lo.inner(&hi).abs() < 1e-14);
            }

            #[test]
            fn round_trip_and_parseval(seed in 0u64..10_000, p in 3u32..9) {
                let n = 1usize << p;
                let f = random_field(n, seed);
                let s = forward_fft(&f).unwrap();
                let back = inverse_fft(&s).unwrap();
                prop_assert!(f.max_abs_diff(&back) <= 1e-12 * f.max_abs());
                let mean_sq = f.data().iter().map(|x| x * x).sum::<f64>() / (n * n) as f64;
                prop_assert!((s.energy() - mean_sq).abs() <= 1e-10 * mean_sq);
            }
        }
    }
}
