//! One-step propagators for the periodic heat, wave and vorticity equations.
//!
//! Every solver is parameterized only by the grid size, so one routine
//! provides both the fine propagator and the coarse propagator.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{Fft2, Field2D, WavenumberGrid};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pde {
    Heat,
    Wave,
    Ns,
}

impl Pde {
    pub const ALL: [Pde; 3] = [Pde::Heat, Pde::Wave, Pde::Ns];

    /// State channels: wave carries displacement and velocity.
    pub fn channels(self) -> usize {
        match self {
            Pde::Wave => 2,
            Pde::Heat | Pde::Ns => 1,
        }
    }

    pub fn tag(self) -> u8 {
        match self {
            Pde::Heat => 0,
            Pde::Wave => 1,
            Pde::Ns => 2,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Pde> {
        match tag {
            0 => Some(Pde::Heat),
            1 => Some(Pde::Wave),
            2 => Some(Pde::Ns),
            _ => None,
        }
    }

    /// Coarse and fine grid sizes used for each equation.
    pub fn default_grids(self) -> (usize, usize) {
        match self {
            Pde::Heat => (32, 128),
            Pde::Wave => (16, 128),
            Pde::Ns => (64, 256),
        }
    }

    /// Forecast end time, starting from `t = 1`.
    pub fn forecast_end(self) -> f64 {
        match self {
            Pde::Heat => 2.0,
            Pde::Wave | Pde::Ns => 10.0,
        }
    }

    pub fn default_params(self) -> PdeParams {
        match self {
            Pde::Heat => PdeParams::Heat(HeatParams::default()),
            Pde::Wave => PdeParams::Wave(WaveParams::default()),
            Pde::Ns => PdeParams::Ns(NSParams::default()),
        }
    }
}

impl fmt::Display for Pde {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Pde::Heat => "heat",
            Pde::Wave => "wave",
            Pde::Ns => "ns",
        })
    }
}

impl FromStr for Pde {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "heat" => Ok(Pde::Heat),
            "wave" => Ok(Pde::Wave),
            "ns" => Ok(Pde::Ns),
            other => Err(Error::Parameter(format!(
                "unknown pde `{other}` (expected heat, wave or ns)"
            ))),
        }
    }
}

// ---------------------------------------------------------------------------
// Heat
// ---------------------------------------------------------------------------

/// `u_t = nu Δu + alpha sin(2πx) sin(2πy)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeatParams {
    pub nu: f64,
    pub alpha: f64,
    pub dt: f64,
}

impl Default for HeatParams {
    fn default() -> Self {
        Self {
            nu: 1e-3,
            alpha: 1e-2,
            dt: 0.01,
        }
    }
}

impl HeatParams {
    fn validate(&self) -> Result<()> {
        if !(self.nu > 0.0) || !(self.dt > 0.0) || !self.alpha.is_finite() {
            return Err(Error::Parameter(format!(
                "heat requires nu > 0 and dt > 0, got nu={} dt={}",
                self.nu, self.dt
            )));
        }
        Ok(())
    }
}

pub fn heat_forcing(n: usize) -> Field2D {
    Field2D::from_fn(n, |x, y| (2.0 * PI * x).sin() * (2.0 * PI * y).sin())
}

/// Exact integrating-factor stepper, precomputed for one grid size.
#[derive(Clone, Debug)]
pub struct HeatSolver {
    n: usize,
    params: HeatParams,
    decay: Vec<f64>,
    forced: Vec<Complex64>,
}

impl HeatSolver {
    pub fn new(n: usize, params: HeatParams) -> Result<Self> {
        params.validate()?;
        let grid = WavenumberGrid::new(n);
        let fft = Fft2::get(n);
        let f_hat = fft.forward_real(heat_forcing(n).data());
        let (nu, dt, alpha) = (params.nu, params.dt, params.alpha);
        let mut decay = Vec::with_capacity(n * n);
        let mut forced = Vec::with_capacity(n * n);
        for (idx, &ksq) in grid.ksq().iter().enumerate() {
            let e = (-nu * ksq * dt).exp();
            decay.push(e);
            // k = 0 uses the dt-linear limit of (1 - e)/(nu k²)
            let gain = if ksq == 0.0 { dt } else { (1.0 - e) / (nu * ksq) };
            forced.push(f_hat[idx] * (alpha * gain));
        }
        Ok(Self {
            n,
            params,
            decay,
            forced,
        })
    }

    pub fn params(&self) -> &HeatParams {
        &self.params
    }

    pub fn step(&self, u: &Field2D) -> Result<Field2D> {
        check_size(u, self.n)?;
        u.ensure_finite("heat state")?;
        let fft = Fft2::get(self.n);
        let mut hat = fft.forward_real(u.data());
        for ((c, &e), &g) in hat.iter_mut().zip(&self.decay).zip(&self.forced) {
            *c = *c * e + g;
        }
        Field2D::new(self.n, fft.inverse_real(&hat))
    }
}

pub fn heat_step(u: &Field2D, p: &HeatParams) -> Result<Field2D> {
    HeatSolver::new(u.n(), *p)?.step(u)
}

// ---------------------------------------------------------------------------
// Wave
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WaveParams {
    pub c: f64,
    pub dt: f64,
}

impl Default for WaveParams {
    fn default() -> Self {
        Self { c: 0.5, dt: 0.01 }
    }
}

impl WaveParams {
    /// `c dt √2 / h` with `h = 1/n`.
    pub fn cfl(&self, n: usize) -> f64 {
        self.c * self.dt * 2f64.sqrt() * n as f64
    }

    fn validate(&self, n: usize) -> Result<()> {
        if !(self.c > 0.0) || !(self.dt > 0.0) {
            return Err(Error::Parameter(format!(
                "wave requires c > 0 and dt > 0, got c={} dt={}",
                self.c, self.dt
            )));
        }
        let cfl = self.cfl(n);
        if !(cfl < 1.0) {
            return Err(Error::Stability(format!(
                "CFL number c*dt*sqrt(2)*n = {cfl:.4} must be < 1 (n={n})"
            )));
        }
        Ok(())
    }
}

/// Five-point periodic Laplacian.
pub fn laplacian_5pt(u: &Field2D) -> Field2D {
    let n = u.n();
    let inv_h2 = (n * n) as f64;
    let d = u.data();
    let mut out = vec![0.0; n * n];
    for j in 0..n {
        let jm = (j + n - 1) % n;
        let jp = (j + 1) % n;
        for i in 0..n {
            let im = (i + n - 1) % n;
            let ip = (i + 1) % n;
            out[j * n + i] = inv_h2
                * (d[j * n + im] + d[j * n + ip] + d[jm * n + i] + d[jp * n + i]
                    - 4.0 * d[j * n + i]);
        }
    }
    Field2D::new(n, out).expect("same size as input")
}

/// Two time levels of the leapfrog scheme.
#[derive(Clone, Debug, PartialEq)]
pub struct WaveState {
    pub u: Field2D,
    pub u_prev: Field2D,
    pub c: f64,
    pub dt: f64,
}

impl WaveState {
    pub fn new(u: Field2D, u_prev: Field2D, c: f64, dt: f64) -> Result<Self> {
        if u.n() != u_prev.n() {
            return Err(Error::Shape(format!(
                "wave levels have sizes {} and {}",
                u.n(),
                u_prev.n()
            )));
        }
        WaveParams { c, dt }.validate(u.n())?;
        Ok(Self { u, u_prev, c, dt })
    }

    /// Second-order start from displacement `u0` and velocity `g0`:
    /// `u(-dt) ≈ u0 - dt g0 + (c dt)²/2 Δ_h u0`.
    pub fn from_initial(u0: Field2D, g0: &Field2D, c: f64, dt: f64) -> Result<Self> {
        check_size(g0, u0.n())?;
        let lap = laplacian_5pt(&u0);
        let cdt2 = (c * dt).powi(2);
        let data = u0
            .data()
            .iter()
            .zip(g0.data())
            .zip(lap.data())
            .map(|((&u, &g), &l)| u - dt * g + 0.5 * cdt2 * l)
            .collect();
        let u_prev = Field2D::new(u0.n(), data)?;
        Self::new(u0, u_prev, c, dt)
    }

    /// Builds the two-level state from displacement and velocity channels,
    /// `u_prev = u - dt v`.
    pub fn from_velocity(u: Field2D, v: &Field2D, c: f64, dt: f64) -> Result<Self> {
        let u_prev = u.lincomb(1.0, v, -dt);
        Self::new(u, u_prev, c, dt)
    }

    /// Backward-difference velocity `(u - u_prev) / dt`.
    pub fn velocity(&self) -> Field2D {
        self.u.lincomb(1.0 / self.dt, &self.u_prev, -1.0 / self.dt)
    }

    /// Time-reversed state: swapping the levels runs the scheme backwards.
    pub fn reversed(&self) -> WaveState {
        WaveState {
            u: self.u_prev.clone(),
            u_prev: self.u.clone(),
            c: self.c,
            dt: self.dt,
        }
    }

    /// Discrete energy between the two stored levels,
    /// `½‖(u - u_prev)/dt‖² - ½c²⟨u, Δ_h u_prev⟩`, weighted by the cell area.
    /// Leapfrog conserves it to round-off.
    pub fn discrete_energy(&self) -> f64 {
        let n = self.u.n();
        let h2 = 1.0 / (n * n) as f64;
        let lap_prev = laplacian_5pt(&self.u_prev);
        let mut kinetic = 0.0;
        let mut potential = 0.0;
        for ((&u, &up), &l) in self
            .u
            .data()
            .iter()
            .zip(self.u_prev.data())
            .zip(lap_prev.data())
        {
            let v = (u - up) / self.dt;
            kinetic += v * v;
            potential -= u * l;
        }
        0.5 * h2 * (kinetic + self.c * self.c * potential)
    }
}

/// `u^{n+1} = 2u^n - u^{n-1} + (c dt)² Δ_h u^n`.
pub fn wave_step(s: &WaveState) -> Result<WaveState> {
    s.u.ensure_finite("wave state")?;
    let lap = laplacian_5pt(&s.u);
    let cdt2 = (s.c * s.dt).powi(2);
    let data = s
        .u
        .data()
        .iter()
        .zip(s.u_prev.data())
        .zip(lap.data())
        .map(|((&u, &up), &l)| 2.0 * u - up + cdt2 * l)
        .collect();
    Ok(WaveState {
        u: Field2D::new(s.u.n(), data)?,
        u_prev: s.u.clone(),
        c: s.c,
        dt: s.dt,
    })
}

// ---------------------------------------------------------------------------
// Navier-Stokes (vorticity form)
// ---------------------------------------------------------------------------

/// `ω_t + u·∇ω = nu Δω + f`, `f = amp [sin 2π(x+y) + cos 2π(x+y)]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NSParams {
    pub nu: f64,
    pub dt: f64,
    pub forcing_amp: f64,
    pub dealias: bool,
    pub substeps: usize,
}

impl Default for NSParams {
    fn default() -> Self {
        Self {
            nu: 1e-4,
            dt: 0.01,
            forcing_amp: 0.025,
            dealias: true,
            substeps: 1,
        }
    }
}

impl NSParams {
    fn validate(&self) -> Result<()> {
        if !(self.nu > 0.0) || !(self.dt > 0.0) || self.substeps == 0 {
            return Err(Error::Parameter(format!(
                "ns requires nu > 0, dt > 0, substeps >= 1; got nu={} dt={} substeps={}",
                self.nu, self.dt, self.substeps
            )));
        }
        Ok(())
    }
}

pub fn ns_forcing(n: usize, amp: f64) -> Field2D {
    Field2D::from_fn(n, |x, y| {
        let a = 2.0 * PI * (x + y);
        amp * (a.sin() + a.cos())
    })
}

/// Pseudo-spectral forward-Euler stepper.
#[derive(Clone, Debug)]
pub struct NsSolver {
    n: usize,
    params: NSParams,
    ksq: Vec<f64>,
    /// `i 2π kx`, zero on the Nyquist column.
    dx: Vec<Complex64>,
    dy: Vec<Complex64>,
    mask: Vec<bool>,
    forcing: Vec<Complex64>,
}

impl NsSolver {
    pub fn new(n: usize, params: NSParams) -> Result<Self> {
        params.validate()?;
        let grid = WavenumberGrid::new(n);
        let half = (n / 2) as i64;
        let two_pi = 2.0 * PI;
        let deriv = |k: i64| {
            if k == -half {
                Complex64::new(0.0, 0.0)
            } else {
                Complex64::new(0.0, two_pi * k as f64)
            }
        };
        let dx = grid.kx().iter().map(|&k| deriv(k)).collect();
        let dy = grid.ky().iter().map(|&k| deriv(k)).collect();
        let mask = grid
            .kx()
            .iter()
            .zip(grid.ky())
            .map(|(&kx, &ky)| {
                !params.dealias || (3 * kx.unsigned_abs() <= n as u64 && 3 * ky.unsigned_abs() <= n as u64)
            })
            .collect();
        let mut forcing = Fft2::get(n).forward_real(ns_forcing(n, params.forcing_amp).data());
        forcing[0] = Complex64::new(0.0, 0.0);
        Ok(Self {
            n,
            params,
            ksq: grid.ksq().to_vec(),
            dx,
            dy,
            mask,
            forcing,
        })
    }

    pub fn params(&self) -> &NSParams {
        &self.params
    }

    /// Solves `-Δψ = ω` spectrally (mean of ψ set to zero).
    pub fn stream_function(&self, omega: &Field2D) -> Result<Field2D> {
        check_size(omega, self.n)?;
        let fft = Fft2::get(self.n);
        let mut hat = fft.forward_real(omega.data());
        for (c, &k) in hat.iter_mut().zip(&self.ksq) {
            *c = if k == 0.0 { Complex64::new(0.0, 0.0) } else { *c / k };
        }
        Field2D::new(self.n, fft.inverse_real(&hat))
    }

    /// Advection term `u·∇ω` in spectral form (mean-preserving normalization).
    fn advection_hat(&self, omega_hat: &[Complex64], fft: &Fft2) -> Vec<Complex64> {
        let nn = self.n * self.n;
        let mut u = vec![Complex64::new(0.0, 0.0); nn];
        let mut v = vec![Complex64::new(0.0, 0.0); nn];
        let mut wx = vec![Complex64::new(0.0, 0.0); nn];
        let mut wy = vec![Complex64::new(0.0, 0.0); nn];
        for idx in 0..nn {
            let w = omega_hat[idx];
            let psi = if self.ksq[idx] == 0.0 {
                Complex64::new(0.0, 0.0)
            } else {
                w / self.ksq[idx]
            };
            // u = ∂y ψ, v = -∂x ψ
            u[idx] = self.dy[idx] * psi;
            v[idx] = -self.dx[idx] * psi;
            wx[idx] = self.dx[idx] * w;
            wy[idx] = self.dy[idx] * w;
        }
        for buf in [&mut u, &mut v, &mut wx, &mut wy] {
            fft.inverse(buf);
        }
        let mut prod: Vec<Complex64> = (0..nn)
            .map(|i| Complex64::new(u[i].re * wx[i].re + v[i].re * wy[i].re, 0.0))
            .collect();
        fft.forward(&mut prod);
        let scale = 1.0 / nn as f64;
        for (c, &keep) in prod.iter_mut().zip(&self.mask) {
            *c = if keep { *c * scale } else { Complex64::new(0.0, 0.0) };
        }
        // the continuous term has zero mean
        prod[0] = Complex64::new(0.0, 0.0);
        prod
    }

    pub fn step(&self, omega: &Field2D) -> Result<Field2D> {
        check_size(omega, self.n)?;
        omega.ensure_finite("vorticity")?;
        let fft = Fft2::get(self.n);
        let mut hat = fft.forward_real(omega.data());
        let h = self.params.dt / self.params.substeps as f64;
        let nu = self.params.nu;
        for substep in 0..self.params.substeps {
            let adv = self.advection_hat(&hat, &fft);
            for idx in 0..hat.len() {
                let rhs = -adv[idx] - hat[idx] * (nu * self.ksq[idx]) + self.forcing[idx];
                hat[idx] += rhs * h;
            }
            if hat.iter().any(|c| !c.re.is_finite() || !c.im.is_finite()) {
                return Err(Error::Divergence {
                    substep,
                    what: "non-finite vorticity".into(),
                });
            }
        }
        let out = Field2D::new(self.n, fft.inverse_real(&hat))?;
        if !out.is_finite() {
            return Err(Error::Divergence {
                substep: self.params.substeps - 1,
                what: "non-finite vorticity".into(),
            });
        }
        Ok(out)
    }
}

pub fn ns_step(omega: &Field2D, p: &NSParams) -> Result<Field2D> {
    NsSolver::new(omega.n(), *p)?.step(omega)
}

fn check_size(f: &Field2D, n: usize) -> Result<()> {
    if f.n() != n {
        return Err(Error::Shape(format!(
            "solver built for n={n} received a field with n={}",
            f.n()
        )));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Channel-level propagator shared by datagen, surrogate and forecasts
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "pde", rename_all = "lowercase")]
pub enum PdeParams {
    Heat(HeatParams),
    Wave(WaveParams),
    Ns(NSParams),
}

impl PdeParams {
    pub fn pde(&self) -> Pde {
        match self {
            PdeParams::Heat(_) => Pde::Heat,
            PdeParams::Wave(_) => Pde::Wave,
            PdeParams::Ns(_) => Pde::Ns,
        }
    }

    pub fn dt(&self) -> f64 {
        match self {
            PdeParams::Heat(p) => p.dt,
            PdeParams::Wave(p) => p.dt,
            PdeParams::Ns(p) => p.dt,
        }
    }

    pub fn with_dt(mut self, dt: f64) -> Self {
        match &mut self {
            PdeParams::Heat(p) => p.dt = dt,
            PdeParams::Wave(p) => p.dt = dt,
            PdeParams::Ns(p) => p.dt = dt,
        }
        self
    }
}

/// One-step propagator on the channel representation of a PDE state
/// (wave uses `(u, v)` with `v = (u - u_prev)/dt`).
#[derive(Clone, Debug)]
pub enum Stepper {
    Heat(HeatSolver),
    Wave { n: usize, params: WaveParams },
    Ns(NsSolver),
}

impl Stepper {
    pub fn new(n: usize, params: &PdeParams) -> Result<Self> {
        Ok(match *params {
            PdeParams::Heat(p) => Stepper::Heat(HeatSolver::new(n, p)?),
            PdeParams::Wave(p) => {
                p.validate(n)?;
                Stepper::Wave { n, params: p }
            }
            PdeParams::Ns(p) => Stepper::Ns(NsSolver::new(n, p)?),
        })
    }

    pub fn pde(&self) -> Pde {
        match self {
            Stepper::Heat(_) => Pde::Heat,
            Stepper::Wave { .. } => Pde::Wave,
            Stepper::Ns(_) => Pde::Ns,
        }
    }

    pub fn step(&self, state: &[Field2D]) -> Result<Vec<Field2D>> {
        let expected = self.pde().channels();
        if state.len() != expected {
            return Err(Error::Shape(format!(
                "{} state needs {expected} channels, got {}",
                self.pde(),
                state.len()
            )));
        }
        match self {
            Stepper::Heat(s) => Ok(vec![s.step(&state[0])?]),
            Stepper::Ns(s) => Ok(vec![s.step(&state[0])?]),
            Stepper::Wave { n, params } => {
                check_size(&state[0], *n)?;
                let ws = WaveState::from_velocity(state[0].clone(), &state[1], params.c, params.dt)?;
                let next = wave_step(&ws)?;
                let v = next.velocity();
                Ok(vec![next.u, v])
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{forward_fft, lowpass_project};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_field(n: usize, seed: u64) -> Field2D {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Field2D::new(n, (0..n * n).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn heat_zero_fixed_point() {
        let p = HeatParams {
            alpha: 0.0,
            ..Default::default()
        };
        let out = heat_step(&Field2D::zeros(16), &p).unwrap();
        assert_eq!(out.max_abs(), 0.0);
    }

    #[test]
    fn heat_single_mode_decay() {
        let p = HeatParams {
            alpha: 0.0,
            ..Default::default()
        };
        let u0 = Field2D::from_fn(32, |x, _| (2.0 * PI * x).cos());
        let factor = (-p.nu * (2.0 * PI).powi(2) * p.dt).exp();
        let out = heat_step(&u0, &p).unwrap();
        assert!(out.max_abs_diff(&u0.scaled(factor)) < 1e-12);
    }

    #[test]
    fn heat_forced_response_matches_closed_form() {
        let p = HeatParams::default();
        let solver = HeatSolver::new(16, p).unwrap();
        let mut u = Field2D::zeros(16);
        let m = 37;
        for _ in 0..m {
            u = solver.step(&u).unwrap();
        }
        let s = forward_fft(&u).unwrap();
        // sin(2πx) sin(2πy): f̂(1,1) = f̂(-1,-1) = -1/4, f̂(1,-1) = f̂(-1,1) = 1/4
        let ksq = 2.0 * (2.0 * PI).powi(2);
        let gain = p.alpha / (p.nu * ksq) * (1.0 - (-p.nu * ksq * m as f64 * p.dt).exp());
        for &(kx, ky, fk) in &[(1, 1, -0.25), (-1, -1, -0.25), (1, -1, 0.25), (-1, 1, 0.25)] {
            let c = s.get(kx, ky);
            assert!((c.re - fk * gain).abs() < 1e-14, "mode ({kx},{ky})");
            assert!(c.im.abs() < 1e-14);
        }
        let others: f64 = s.energy() - 4.0 * (0.25 * gain).powi(2);
        assert!(others.abs() < 1e-12 * s.energy());
    }

    #[test]
    fn heat_commutes_with_lowpass() {
        let p = HeatParams::default();
        let u = random_field(32, 9);
        let lhs = lowpass_project(&forward_fft(&heat_step(&u, &p).unwrap()).unwrap(), 6).unwrap();
        let lowu = crate::grid::inverse_fft(&lowpass_project(&forward_fft(&u).unwrap(), 6).unwrap())
            .unwrap();
        let rhs = forward_fft(&heat_step(&lowu, &p).unwrap()).unwrap();
        assert!(lhs.max_abs_diff(&rhs) < 1e-12);
    }

    #[test]
    fn wave_constant_is_stationary() {
        let c = Field2D::constant(16, 0.7);
        let mut s = WaveState::new(c.clone(), c.clone(), 0.5, 0.01).unwrap();
        for _ in 0..50 {
            s = wave_step(&s).unwrap();
        }
        assert!(s.u.max_abs_diff(&c) < 1e-14);
    }

    #[test]
    fn wave_cfl_violation() {
        let f = Field2D::zeros(256);
        // 0.5 * 0.01 * sqrt(2) * 256 = 1.81
        assert!(matches!(
            WaveState::new(f.clone(), f, 0.5, 0.01),
            Err(Error::Stability(_))
        ));
    }

    fn standing_wave_error(n: usize, dt: f64, steps: usize) -> f64 {
        let c = 0.5;
        let u0 = Field2D::from_fn(n, |x, _| (2.0 * PI * x).sin());
        let mut s = WaveState::from_initial(u0, &Field2D::zeros(n), c, dt).unwrap();
        for _ in 0..steps {
            s = wave_step(&s).unwrap();
        }
        let t = steps as f64 * dt;
        let exact = Field2D::from_fn(n, |x, _| (2.0 * PI * x).sin() * (2.0 * PI * c * t).cos());
        s.u.max_abs_diff(&exact)
    }

    #[test]
    fn wave_second_order_convergence() {
        let e1 = standing_wave_error(128, 0.01, 100);
        let e2 = standing_wave_error(256, 0.005, 200);
        assert!(e1 / e2 >= 3.5, "ratio {}", e1 / e2);
    }

    #[test]
    fn wave_time_reversal() {
        let n = 32;
        let dt = 0.01;
        let g = Field2D::from_fn(n, |_, y| (2.0 * PI * y).sin());
        let u_prev = Field2D::from_fn(n, |x, y| (2.0 * PI * x).cos() * (2.0 * PI * y).sin() * 0.3);
        let u = u_prev.lincomb(1.0, &g, dt);
        let start = WaveState::new(u, u_prev, 0.5, dt).unwrap();
        let mut s = start.clone();
        for _ in 0..200 {
            s = wave_step(&s).unwrap();
        }
        let mut r = s.reversed();
        for _ in 0..200 {
            r = wave_step(&r).unwrap();
        }
        let back = r.reversed();
        assert!(back.u.max_abs_diff(&start.u) < 1e-8);
        assert!(back.u_prev.max_abs_diff(&start.u_prev) < 1e-8);
    }

    #[test]
    fn wave_energy_conserved() {
        let n = 64;
        let u0 = Field2D::from_fn(n, |x, y| {
            (2.0 * PI * (x + 2.0 * y)).sin() + 0.5 * (2.0 * PI * 3.0 * x).cos()
        });
        let mut s = WaveState::from_initial(u0, &Field2D::zeros(n), 0.5, 0.01).unwrap();
        let e0 = s.discrete_energy();
        for _ in 0..1000 {
            s = wave_step(&s).unwrap();
        }
        assert!((s.discrete_energy() - e0).abs() / e0 < 1e-6);
    }

    #[test]
    fn wave_channel_conversion_is_exact() {
        let n = 16;
        let u = random_field(n, 1);
        let up = random_field(n, 2);
        let s = WaveState::new(u.clone(), up, 0.5, 0.01).unwrap();
        let v = s.velocity();
        let back = WaveState::from_velocity(u, &v, 0.5, 0.01).unwrap();
        assert!(back.u_prev.max_abs_diff(&s.u_prev) < 1e-14);
    }

    #[test]
    fn ns_zero_stays_zero() {
        let p = NSParams {
            forcing_amp: 0.0,
            ..Default::default()
        };
        let out = ns_step(&Field2D::zeros(32), &p).unwrap();
        assert_eq!(out.max_abs(), 0.0);
    }

    #[test]
    fn ns_taylor_green_decay() {
        let p = NSParams {
            forcing_amp: 0.0,
            ..Default::default()
        };
        let w0 = Field2D::from_fn(64, |x, y| 2.0 * (2.0 * PI * x).cos() * (2.0 * PI * y).cos());
        let rate = 2.0 * (2.0 * PI).powi(2) * p.nu;
        let exact = w0.scaled((-rate * p.dt).exp());
        let out = ns_step(&w0, &p).unwrap();
        let rel = out.lincomb(1.0, &exact, -1.0).norm2() / exact.norm2();
        assert!(rel <= 5.0 * p.dt * rate, "rel {rel}");
    }

    #[test]
    fn ns_poisson_single_mode() {
        let solver = NsSolver::new(32, NSParams::default()).unwrap();
        let w = Field2D::from_fn(32, |x, _| (2.0 * PI * x).cos());
        let psi = solver.stream_function(&w).unwrap();
        assert!(psi.max_abs_diff(&w.scaled(1.0 / (2.0 * PI).powi(2))) < 1e-12);
    }

    #[test]
    fn ns_conserves_mean() {
        let solver = NsSolver::new(64, NSParams::default()).unwrap();
        let mut w = random_field(64, 4).map(|v| v - 0.3);
        for _ in 0..10 {
            let next = solver.step(&w).unwrap();
            assert!((next.mean() - w.mean()).abs() <= 1e-14);
            w = next;
        }
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(16))]
            // kc >= 1 keeps the forcing mode (1, 1) in band
            #[test]
            fn heat_commutes_with_any_lowpass(seed in 0u64..1000, kc in 1usize..16) {
                let p = HeatParams::default();
                let u = random_field(32, seed);
                let lhs = lowpass_project(&forward_fft(&heat_step(&u, &p).unwrap()).unwrap(), kc).unwrap();
                let low = crate::grid::inverse_fft(&lowpass_project(&forward_fft(&u).unwrap(), kc).unwrap()).unwrap();
                let rhs = forward_fft(&heat_step(&low, &p).unwrap()).unwrap();
                prop_assert!(lhs.max_abs_diff(&rhs) < 1e-12);
            }

            #[test]
            fn ns_step_conserves_mean(seed in 0u64..1000, offset in -1.0f64..1.0) {
                let solver = NsSolver::new(32, NSParams::default()).unwrap();
                let w = random_field(32, seed).map(|v| v + offset);
                let next = solver.step(&w).unwrap();
                prop_assert!((next.mean() - w.mean()).abs() <= 1e-14);
            }
        }
    }

    #[test]
    fn ns_divergence_reported() {
        let p = NSParams {
            dt: 50.0,
            ..Default::default()
        };
        let solver = NsSolver::new(32, p).unwrap();
        let mut w = random_field(32, 8).scaled(50.0);
        let mut failed = None;
        for step in 0..200 {
            match solver.step(&w) {
                Ok(next) => w = next,
                Err(e) => {
                    failed = Some((step, e));
                    break;
                }
            }
        }
        let (_, e) = failed.expect("inflated dt should blow up");
        assert!(matches!(e, Error::Divergence { .. }), "{e}");
    }

    #[test]
    fn ns_substeps_keep_cadence() {
        let base = NSParams::default();
        let w = Field2D::from_fn(32, |x, y| (2.0 * PI * (x + y)).sin() * 0.1);
        let one = ns_step(&w, &base).unwrap();
        let four = ns_step(&w, &NSParams { substeps: 4, ..base }).unwrap();
        // same physical interval, different splitting error only
        assert!(one.max_abs_diff(&four) < 1e-4);
        assert!(one.max_abs_diff(&four) > 0.0);
    }

    #[test]
    fn steppers_accept_any_resolution() {
        for pde in Pde::ALL {
            let params = pde.default_params();
            for &n in &[16usize, 32] {
                let stepper = Stepper::new(n, &params).unwrap();
                let state: Vec<Field2D> = (0..pde.channels()).map(|c| random_field(n, c as u64)).collect();
                let next = stepper.step(&state).unwrap();
                assert_eq!(next.len(), pde.channels());
                assert!(next.iter().all(|f| f.n() == n && f.is_finite()));
            }
        }
    }
}
