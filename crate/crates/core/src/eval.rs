//! Field metrics, multi-step forecasting and the evaluation suite.
//!
//! Metrics of multi-channel states (wave) are computed on channel 0, the
//! displacement.

use std::io::Write;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{PairedDataset, Trajectory};
use crate::error::{Error, Result};
use crate::grid::{forward_fft, Field2D};
use crate::models::{surrogate_step, surrogate_step_with, Fno, ModelKind};
use crate::solvers::{Pde, Stepper};
use crate::transfer::{lift_state, TransferMode, TransferSpec};

/// Denominator guard of the relative error.
pub const REL_L2_EPS: f64 = 1e-12;
pub const SSIM_WINDOW: usize = 7;

// ---------------------------------------------------------------------------
// Metrics
// ---------------------------------------------------------------------------

fn check_pair(pred: &Field2D, truth: &Field2D) -> Result<()> {
    if pred.n() != truth.n() {
        return Err(Error::Shape(format!("prediction is {}², truth is {}²", pred.n(), truth.n())));
    }
    Ok(())
}

/// `‖pred − truth‖₂ / (‖truth‖₂ + 1e-12)` over all grid points.
pub fn rel_l2(pred: &Field2D, truth: &Field2D) -> Result<f64> {
    check_pair(pred, truth)?;
    let diff: f64 = pred.data().iter().zip(truth.data()).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(diff.sqrt() / (truth.norm2() + REL_L2_EPS))
}

/// Periodic box sums over a `w×w` window centred on each point.
fn box_sum(data: &[f64], n: usize, w: usize) -> Vec<f64> {
    let r = (w / 2) as isize;
    let wrap = |i: isize| i.rem_euclid(n as isize) as usize;
    let mut rows = vec![0.0; n * n];
    for j in 0..n {
        for i in 0..n {
            rows[j * n + i] = (-r..w as isize - r).map(|d| data[j * n + wrap(i as isize + d)]).sum();
        }
    }
    let mut out = vec![0.0; n * n];
    for j in 0..n {
        for i in 0..n {
            out[j * n + i] = (-r..w as isize - r).map(|d| rows[wrap(j as isize + d) * n + i]).sum();
        }
    }
    out
}

/// Mean single-scale SSIM with a 7×7 uniform periodic window and
/// `C1 = (0.01 L)²`, `C2 = (0.03 L)²`, `L = max(truth) − min(truth)`
/// floored at 1e-6.
pub fn ssim(pred: &Field2D, truth: &Field2D) -> Result<f64> {
    check_pair(pred, truth)?;
    let n = truth.n();
    let w = SSIM_WINDOW.min(n);
    let area = (w * w) as f64;
    let range = (truth.max() - truth.min()).max(1e-6);
    let c1 = (0.01 * range).powi(2);
    let c2 = (0.03 * range).powi(2);
    let (x, y) = (pred.data(), truth.data());
    let prod = |f: &dyn Fn(usize) -> f64| (0..n * n).map(f).collect::<Vec<f64>>();
    let sx = box_sum(x, n, w);
    let sy = box_sum(y, n, w);
    let sxx = box_sum(&prod(&|k| x[k] * x[k]), n, w);
    let syy = box_sum(&prod(&|k| y[k] * y[k]), n, w);
    let sxy = box_sum(&prod(&|k| x[k] * y[k]), n, w);
    let mut total = 0.0;
    for k in 0..n * n {
        let (mx, my) = (sx[k] / area, sy[k] / area);
        let vx = sxx[k] / area - mx * mx;
        let vy = syy[k] / area - my * my;
        let cxy = sxy[k] / area - mx * my;
        total += ((2.0 * mx * my + c1) * (2.0 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
    }
    Ok(total / (n * n) as f64)
}

/// `(1/N²) Σ_k (|ŷ_k| − |û_k|)²` with the unnormalized DFT, so a zero
/// prediction scores the grid-space energy `Σ u²`.
pub fn spec_mse(pred: &Field2D, truth: &Field2D) -> Result<f64> {
    check_pair(pred, truth)?;
    let n = truth.n() as f64;
    let (p, t) = (forward_fft(pred)?, forward_fft(truth)?);
    let scale = n * n;
    let sum: f64 = p
        .coeffs()
        .iter()
        .zip(t.coeffs())
        .map(|(a, b)| (scale * a.norm() - scale * b.norm()).powi(2))
        .sum();
    Ok(sum / (n * n))
}

/// Centered correlation; `None` when either field is constant.
pub fn pearson(pred: &Field2D, truth: &Field2D) -> Result<Option<f64>> {
    check_pair(pred, truth)?;
    if pred.min() == pred.max() || truth.min() == truth.max() {
        return Ok(None);
    }
    let (mp, mt) = (pred.mean(), truth.mean());
    let (mut cov, mut vp, mut vt) = (0.0, 0.0, 0.0);
    for (a, b) in pred.data().iter().zip(truth.data()) {
        let (da, db) = (a - mp, b - mt);
        cov += da * db;
        vp += da * da;
        vt += db * db;
    }
    if vp == 0.0 || vt == 0.0 {
        return Ok(None);
    }
    Ok(Some((cov / (vp.sqrt() * vt.sqrt())).clamp(-1.0, 1.0)))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameMetrics {
    pub rel_l2: f64,
    pub ssim: f64,
    pub spec_mse: f64,
    pub pearson: Option<f64>,
}

impl FrameMetrics {
    /// Placeholder for frames after a forecast diverged.
    pub const DIVERGED: FrameMetrics = FrameMetrics {
        rel_l2: f64::INFINITY,
        ssim: f64::NAN,
        spec_mse: f64::INFINITY,
        pearson: None,
    };
}

pub fn frame_metrics(pred: &[Field2D], truth: &[Field2D]) -> Result<FrameMetrics> {
    let (p, t) = match (pred.first(), truth.first()) {
        (Some(p), Some(t)) => (p, t),
        _ => return Err(Error::Shape("empty state".into())),
    };
    Ok(FrameMetrics {
        rel_l2: rel_l2(p, t)?,
        ssim: ssim(p, t)?,
        spec_mse: spec_mse(p, t)?,
        pearson: pearson(p, t)?,
    })
}

/// Per-frame series and their means; undefined correlations are excluded
/// from the mean and counted.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub model: String,
    pub seed: u64,
    pub frames: Vec<FrameMetrics>,
}

impl MetricsRecord {
    pub fn mean_rel_l2(&self) -> f64 {
        mean(self.frames.iter().map(|f| f.rel_l2))
    }

    pub fn mean_ssim(&self) -> f64 {
        mean(self.frames.iter().map(|f| f.ssim))
    }

    pub fn mean_spec_mse(&self) -> f64 {
        mean(self.frames.iter().map(|f| f.spec_mse))
    }

    /// Mean correlation over defined frames and the number of such frames.
    pub fn mean_pearson(&self) -> (Option<f64>, usize) {
        let defined: Vec<f64> = self.frames.iter().filter_map(|f| f.pearson).collect();
        if defined.is_empty() {
            (None, 0)
        } else {
            (Some(mean(defined.iter().copied())), defined.len())
        }
    }
}

pub fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let (s, c) = values.fold((0.0, 0usize), |(s, c), v| (s + v, c + 1));
    if c == 0 {
        f64::NAN
    } else {
        s / c as f64
    }
}

/// Sample standard deviation; zero for fewer than two values.
pub fn std_dev(values: &[f64]) -> f64 {
    if values.len() < 2 {
        return 0.0;
    }
    let m = mean(values.iter().copied());
    (values.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (values.len() - 1) as f64).sqrt()
}

// ---------------------------------------------------------------------------
// Forecasting
// ---------------------------------------------------------------------------

/// A fine-grid one-step propagator under evaluation.
pub enum Propagator<'a> {
    /// `N_θ ∘ P_c(dt) ∘ P`.
    Surrogate {
        model: &'a Fno,
        coarse: Stepper,
        transfer: TransferSpec,
    },
    /// `P_c(dt)` followed by a fixed lift (bicubic baseline, or the ideal
    /// spectral lift).
    LiftedCoarse { coarse: Stepper, transfer: TransferSpec },
    Autoregressive(&'a Fno),
    /// The fine solver itself.
    Fine(Stepper),
}

impl<'a> Propagator<'a> {
    pub fn surrogate(model: &'a Fno, ds: &PairedDataset) -> Result<Self> {
        let transfer = model
            .config
            .transfer()?
            .ok_or_else(|| Error::Parameter("surrogate needs a super-resolution model".into()))?;
        Ok(Propagator::Surrogate {
            model,
            coarse: Stepper::new(ds.config.n_coarse, &ds.config.params)?,
            transfer,
        })
    }

    pub fn lifted_coarse(ds: &PairedDataset, mode: TransferMode) -> Result<Self> {
        Ok(Propagator::LiftedCoarse {
            coarse: Stepper::new(ds.config.n_coarse, &ds.config.params)?,
            transfer: TransferSpec::new(ds.config.n_coarse, ds.config.n_fine, mode)?,
        })
    }

    pub fn autoregressive(model: &'a Fno) -> Result<Self> {
        if model.kind() != ModelKind::FnoAr {
            return Err(Error::Parameter("expected an autoregressive model".into()));
        }
        Ok(Propagator::Autoregressive(model))
    }

    pub fn step(&self, u: &[Field2D]) -> Result<Vec<Field2D>> {
        match self {
            Propagator::Surrogate { model, coarse, transfer } => surrogate_step(model, coarse, transfer, u),
            Propagator::LiftedCoarse { coarse, transfer } => {
                surrogate_step_with(|c| lift_state(c, transfer), coarse, transfer, u)
            }
            Propagator::Autoregressive(m) => m.predict_one(u),
            Propagator::Fine(s) => s.step(u),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ForecastRun {
    pub model: String,
    /// Trajectory frame index of the initial state.
    pub start_index: usize,
    pub horizon: usize,
    /// Initial state followed by one predicted state per completed step;
    /// empty when the run was made without keeping frames.
    pub frames: Vec<Vec<Field2D>>,
    /// One entry per step `0..=horizon`; steps after a divergence hold
    /// [`FrameMetrics::DIVERGED`].
    pub metrics: Vec<FrameMetrics>,
    /// First step whose prediction failed or was non-finite.
    pub diverged_at: Option<usize>,
}

fn is_numeric_failure(e: &Error) -> bool {
    e.is_divergence() || matches!(e.root(), Error::NumericInput(_))
}

struct Rollout {
    run: ForecastRun,
    state: Vec<Field2D>,
    keep_frames: bool,
}

impl Rollout {
    fn new(model: &str, start: &[Field2D], start_index: usize, horizon: usize, truth0: &[Field2D], keep_frames: bool) -> Result<Self> {
        let run = ForecastRun {
            model: model.to_string(),
            start_index,
            horizon,
            frames: if keep_frames { vec![start.to_vec()] } else { Vec::new() },
            metrics: vec![frame_metrics(start, truth0)?],
            diverged_at: None,
        };
        Ok(Rollout { run, state: start.to_vec(), keep_frames })
    }

    fn advance(&mut self, prop: &Propagator<'_>, s: usize, truth: &[Field2D]) -> Result<()> {
        if self.run.diverged_at.is_some() {
            return Ok(());
        }
        match prop.step(&self.state) {
            Ok(next) if next.iter().all(Field2D::is_finite) => {
                self.run.metrics.push(frame_metrics(&next, truth)?);
                if self.keep_frames {
                    self.run.frames.push(next.clone());
                }
                self.state = next;
            }
            Ok(_) => self.run.diverged_at = Some(s),
            Err(e) if is_numeric_failure(&e) => self.run.diverged_at = Some(s),
            Err(e) => return Err(e),
        }
        Ok(())
    }

    fn finish(mut self) -> ForecastRun {
        self.run.metrics.resize(self.run.horizon + 1, FrameMetrics::DIVERGED);
        self.run
    }
}

/// Advances `start` for `horizon` steps, scoring step `s` against
/// `truth[s]`. Numerical blow-up ends the run and is recorded, not raised.
pub fn forecast(
    prop: &Propagator<'_>,
    model: &str,
    start: &[Field2D],
    start_index: usize,
    truth: &[Vec<Field2D>],
    horizon: usize,
) -> Result<ForecastRun> {
    if truth.len() < horizon + 1 {
        return Err(Error::Shape(format!(
            "forecast of {horizon} steps needs {} truth frames, got {}",
            horizon + 1,
            truth.len()
        )));
    }
    let mut r = Rollout::new(model, start, start_index, horizon, &truth[0], true)?;
    for (s, t) in truth.iter().enumerate().take(horizon + 1).skip(1) {
        r.advance(prop, s, t)?;
    }
    Ok(r.finish())
}

/// Fine-grid truth for frames `start..`: stored frames first, then the fine
/// solver continued from the last stored frame. Yields one frame at a time.
pub struct TruthStream<'a> {
    traj: &'a Trajectory,
    next: usize,
    stepper: Option<Stepper>,
    last: Option<Vec<Field2D>>,
}

impl<'a> TruthStream<'a> {
    pub fn new(traj: &'a Trajectory, start: usize) -> Result<Self> {
        if start >= traj.len() {
            return Err(Error::Parameter(format!("start frame {start} beyond trajectory of {}", traj.len())));
        }
        Ok(TruthStream { traj, next: start, stepper: None, last: None })
    }

    /// Returns the frame at the current index and moves to the next one.
    pub fn next_frame(&mut self) -> Result<&[Field2D]> {
        let i = self.next;
        self.next += 1;
        if i < self.traj.len() {
            return Ok(&self.traj.frames[i]);
        }
        if self.stepper.is_none() {
            self.stepper = Some(Stepper::new(self.traj.n, &self.traj.params)?);
        }
        let stepper = self.stepper.as_ref().expect("set above");
        let prev = self.last.as_deref().unwrap_or(&self.traj.frames[self.traj.len() - 1]);
        let next = stepper.step(prev).map_err(|e| Error::Trajectory {
            trajectory: 0,
            seed: self.traj.seed,
            step: i,
            source: Box::new(e),
        })?;
        Ok(self.last.insert(next))
    }
}

/// Collects [`TruthStream`] frames `start..=start + horizon`.
pub fn ground_truth(traj: &Trajectory, start: usize, horizon: usize) -> Result<Vec<Vec<Field2D>>> {
    let mut stream = TruthStream::new(traj, start)?;
    (0..=horizon).map(|_| stream.next_frame().map(<[Field2D]>::to_vec)).collect()
}

/// Forecasts one trajectory with every propagator in lockstep against a
/// streamed truth, so memory stays independent of the horizon unless
/// `keep_frames` is set.
pub fn forecast_many(
    props: &[(&str, &Propagator<'_>)],
    traj: &Trajectory,
    start: usize,
    horizon: usize,
    keep_frames: bool,
) -> Result<Vec<ForecastRun>> {
    let mut truth = TruthStream::new(traj, start)?;
    let t0 = truth.next_frame()?.to_vec();
    let mut rolls = props
        .iter()
        .map(|(name, _)| Rollout::new(name, &t0, start, horizon, &t0, keep_frames))
        .collect::<Result<Vec<_>>>()?;
    drop(t0);
    for s in 1..=horizon {
        let t = truth.next_frame()?;
        for (r, (_, prop)) in rolls.iter_mut().zip(props) {
            r.advance(prop, s, t)?;
        }
    }
    Ok(rolls.into_iter().map(Rollout::finish).collect())
}

/// Forecast start index (`t = 1`) and step count to the horizon.
pub fn forecast_window(pde: Pde, dt: f64, t_start: f64, t_end: Option<f64>) -> (usize, usize) {
    let end = t_end.unwrap_or_else(|| pde.forecast_end());
    let k = (t_start / dt).round() as usize;
    let m = ((end - t_start) / dt).round().max(0.0) as usize;
    (k, m)
}

// ---------------------------------------------------------------------------
// Suite
// ---------------------------------------------------------------------------

/// A trained model with the seed of its training run.
pub struct Seeded<'a> {
    pub seed: u64,
    pub model: &'a Fno,
}

/// Models to score; bicubic baselines need no weights.
#[derive(Default)]
pub struct SuiteModels<'a> {
    /// Phase-1 lifts, scored on super-resolution.
    pub sr: Vec<Seeded<'a>>,
    /// Phase-2 lifts, used inside the surrogate forecast.
    pub surrogate: Vec<Seeded<'a>>,
    pub ar: Vec<Seeded<'a>>,
    pub bicubic: bool,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SuiteConfig {
    pub start_index: usize,
    pub horizon: usize,
    pub workers: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Phase1Row {
    pub pde: Pde,
    pub model: String,
    pub seed: u64,
    pub traj: usize,
    pub rel_l2: f64,
    pub ssim: f64,
    pub spec_mse: f64,
    pub pearson: Option<f64>,
    /// Frames with a defined correlation.
    pub pearson_defined: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Phase2Row {
    pub pde: Pde,
    pub model: String,
    pub seed: u64,
    pub traj: usize,
    pub horizon: usize,
    pub step: usize,
    pub rel_l2: f64,
    pub ssim: f64,
    pub spec_mse: f64,
    pub pearson: Option<f64>,
    pub pearson_defined: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AccumRow {
    pub pde: Pde,
    pub model: String,
    pub step: usize,
    pub rel_l2: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct SuiteReport {
    pub phase1: Vec<Phase1Row>,
    pub phase2: Vec<Phase2Row>,
    pub accum: Vec<AccumRow>,
}

pub const PHASE1_CSV: &str = "phase1_metrics.csv";
pub const PHASE2_CSV: &str = "phase2_metrics.csv";
pub const ACCUM_CSV: &str = "error_accum.csv";
const AGGREGATION_NOTE: &str = "# aggregation: metrics averaged over frames per trajectory, then across trajectories";

/// Super-resolution record of one trajectory: `lift(u_c(t))` vs `u_f(t)`
/// for every stored frame.
pub fn phase1_record(
    lift: &dyn Fn(&[Field2D]) -> Result<Vec<Field2D>>,
    model: &str,
    seed: u64,
    coarse: &Trajectory,
    fine: &Trajectory,
) -> Result<MetricsRecord> {
    let frames = coarse
        .frames
        .iter()
        .zip(&fine.frames)
        .map(|(c, f)| frame_metrics(&lift(c)?, f))
        .collect::<Result<Vec<_>>>()?;
    Ok(MetricsRecord {
        model: model.into(),
        seed,
        frames,
    })
}

fn par_map<T: Send, R: Send>(workers: usize, items: Vec<T>, f: impl Fn(T) -> Result<R> + Sync + Send) -> Result<Vec<R>> {
    if workers > 1 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(workers)
            .build()
            .map_err(|e| Error::Parameter(format!("thread pool: {e}")))?;
        pool.install(|| items.into_par_iter().map(f).collect())
    } else {
        items.into_iter().map(f).collect()
    }
}

/// Scores every model on every trajectory of `test`. Forecasts start at
/// `start_index` and run `horizon` steps; rows are ordered by model then
/// trajectory and do not depend on the worker count.
pub fn evaluate_suite(test: &PairedDataset, models: &SuiteModels<'_>, cfg: &SuiteConfig) -> Result<SuiteReport> {
    let pde = test.pde();
    let bicubic = TransferSpec::new(test.config.n_coarse, test.config.n_fine, TransferMode::Bicubic)?;
    let mut report = SuiteReport::default();

    // super-resolution
    let mut sr_jobs: Vec<(String, u64, Option<&Fno>)> = Vec::new();
    if models.bicubic {
        sr_jobs.push(("bicubic".into(), 0, None));
    }
    for s in &models.sr {
        sr_jobs.push((ModelKind::FnoSr.to_string(), s.seed, Some(s.model)));
    }
    for (name, seed, model) in &sr_jobs {
        let items: Vec<usize> = (0..test.len()).collect();
        let records = par_map(cfg.workers, items, |i| {
            let lift = |c: &[Field2D]| match model {
                Some(m) => m.predict_one(c),
                None => lift_state(c, &bicubic),
            };
            phase1_record(&lift, name, *seed, &test.coarse[i], &test.fine[i])
        })?;
        for (traj, rec) in records.iter().enumerate() {
            let (pearson, defined) = rec.mean_pearson();
            report.phase1.push(Phase1Row {
                pde,
                model: name.clone(),
                seed: *seed,
                traj,
                rel_l2: rec.mean_rel_l2(),
                ssim: rec.mean_ssim(),
                spec_mse: rec.mean_spec_mse(),
                pearson,
                pearson_defined: defined,
            });
        }
    }

    // forecasts
    let mut fc_jobs: Vec<(&str, u64, Propagator<'_>)> = Vec::new();
    for s in &models.surrogate {
        fc_jobs.push(("surrogate", s.seed, Propagator::surrogate(s.model, test)?));
    }
    for s in &models.ar {
        fc_jobs.push(("fno-ar", s.seed, Propagator::autoregressive(s.model)?));
    }
    if models.bicubic && !fc_jobs.is_empty() {
        fc_jobs.push(("bicubic-lift", 0, Propagator::lifted_coarse(test, TransferMode::Bicubic)?));
    }
    if fc_jobs.is_empty() {
        return Ok(report);
    }
    let props: Vec<(&str, &Propagator<'_>)> = fc_jobs.iter().map(|(name, _, prop)| (*name, prop)).collect();
    let per_traj = par_map(cfg.workers, (0..test.len()).collect(), |i| {
        forecast_many(&props, &test.fine[i], cfg.start_index, cfg.horizon, false)
    })?;
    let mut accum: Vec<(String, Vec<Vec<f64>>)> = Vec::new();
    for (j, (name, seed, _)) in fc_jobs.iter().enumerate() {
        for (traj, runs) in per_traj.iter().enumerate() {
            report.phase2.extend(forecast_rows(pde, *seed, traj, &runs[j]));
        }
        let slot = match accum.iter().position(|(n, _)| n == name) {
            Some(p) => p,
            None => {
                accum.push((name.to_string(), vec![Vec::new(); cfg.horizon + 1]));
                accum.len() - 1
            }
        };
        for runs in &per_traj {
            for (step, m) in runs[j].metrics.iter().enumerate() {
                accum[slot].1[step].push(m.rel_l2);
            }
        }
    }
    for (name, steps) in accum {
        for (step, values) in steps.into_iter().enumerate() {
            report.accum.push(AccumRow {
                pde,
                model: name.clone(),
                step,
                rel_l2: mean(values.into_iter()),
            });
        }
    }
    Ok(report)
}

const PHASE1_HEADER: [&str; 9] = [
    "pde",
    "model",
    "seed",
    "traj",
    "rel_l2",
    "ssim",
    "spec_mse",
    "pearson",
    "pearson_defined",
];
const PHASE2_HEADER: [&str; 11] = [
    "pde",
    "model",
    "seed",
    "traj",
    "horizon",
    "step",
    "rel_l2",
    "ssim",
    "spec_mse",
    "pearson",
    "pearson_defined",
];
const ACCUM_HEADER: [&str; 4] = ["pde", "model", "step", "rel_l2"];
const SUMMARY_HEADER: [&str; 13] = [
    "pde",
    "table",
    "model",
    "n",
    "rel_l2_mean",
    "rel_l2_std",
    "ssim_mean",
    "ssim_std",
    "spec_mse_mean",
    "spec_mse_std",
    "pearson_mean",
    "pearson_std",
    "pearson_undefined",
];

/// CSV bytes with the aggregation note as a leading comment line. The
/// header is written even when there are no rows.
pub fn csv_bytes<T: Serialize>(header: &[&str], rows: &[T]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    writeln!(out, "{AGGREGATION_NOTE}").expect("write to vec");
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(out);
    let csv_err = |e: csv::Error| Error::Format {
        path: PathBuf::from("<csv>"),
        reason: e.to_string(),
    };
    w.write_record(header).map_err(csv_err)?;
    for r in rows {
        w.serialize(r).map_err(csv_err)?;
    }
    w.into_inner().map_err(|e| Error::Format {
        path: PathBuf::from("<csv>"),
        reason: e.to_string(),
    })
}

pub fn read_csv<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let bytes = crate::artifact::read_bytes(path)?;
    let mut r = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(bytes.as_slice());
    r.deserialize()
        .map(|row| {
            row.map_err(|e| Error::Format {
                path: path.to_path_buf(),
                reason: e.to_string(),
            })
        })
        .collect()
}

pub fn phase1_csv(rows: &[Phase1Row]) -> Result<Vec<u8>> {
    csv_bytes(&PHASE1_HEADER, rows)
}

pub fn phase2_csv(rows: &[Phase2Row]) -> Result<Vec<u8>> {
    csv_bytes(&PHASE2_HEADER, rows)
}

pub fn accum_csv(rows: &[AccumRow]) -> Result<Vec<u8>> {
    csv_bytes(&ACCUM_HEADER, rows)
}

pub fn summary_csv(rows: &[SummaryRow]) -> Result<Vec<u8>> {
    csv_bytes(&SUMMARY_HEADER, rows)
}

/// Per-step rows of one forecast.
pub fn forecast_rows(pde: Pde, seed: u64, traj: usize, run: &ForecastRun) -> Vec<Phase2Row> {
    run.metrics
        .iter()
        .enumerate()
        .map(|(step, m)| Phase2Row {
            pde,
            model: run.model.clone(),
            seed,
            traj,
            horizon: run.horizon,
            step,
            rel_l2: m.rel_l2,
            ssim: m.ssim,
            spec_mse: m.spec_mse,
            pearson: m.pearson,
            pearson_defined: m.pearson.is_some(),
        })
        .collect()
}

/// Forecasts every trajectory of `ds` from frame `start` and hands each run
/// to `sink` as soon as it completes, so at most `workers` runs are held.
pub fn forecast_dataset<R, F>(
    prop: &Propagator<'_>,
    model: &str,
    ds: &PairedDataset,
    start: usize,
    horizon: usize,
    workers: usize,
    sink: F,
) -> Result<Vec<R>>
where
    R: Send,
    F: Fn(usize, ForecastRun) -> Result<R> + Sync,
{
    par_map(workers, (0..ds.len()).collect(), |i| {
        let run = forecast_many(&[(model, prop)], &ds.fine[i], start, horizon, true)?.pop().expect("one run");
        sink(i, run)
    })
}

/// Writes the three suite tables into `dir`.
pub fn write_suite(report: &SuiteReport, dir: &Path) -> Result<Vec<PathBuf>> {
    let files = [
        (PHASE1_CSV, phase1_csv(&report.phase1)?),
        (PHASE2_CSV, phase2_csv(&report.phase2)?),
        (ACCUM_CSV, accum_csv(&report.accum)?),
    ];
    let mut paths = Vec::new();
    for (name, bytes) in files {
        let p = dir.join(name);
        crate::artifact::write_bytes(&p, &bytes)?;
        paths.push(p);
    }
    Ok(paths)
}

/// Mean ± sample std of one model's aggregates across trajectories and
/// seeds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub pde: Pde,
    pub table: String,
    pub model: String,
    pub n: usize,
    pub rel_l2_mean: f64,
    pub rel_l2_std: f64,
    pub ssim_mean: f64,
    pub ssim_std: f64,
    pub spec_mse_mean: f64,
    pub spec_mse_std: f64,
    pub pearson_mean: Option<f64>,
    pub pearson_std: Option<f64>,
    pub pearson_undefined: usize,
}

struct Agg {
    rel: Vec<f64>,
    ssim: Vec<f64>,
    spec: Vec<f64>,
    pearson: Vec<f64>,
    undefined: usize,
}

fn summarize(pde: Pde, table: &str, groups: Vec<(String, Agg)>) -> Vec<SummaryRow> {
    groups
        .into_iter()
        .map(|(model, a)| SummaryRow {
            pde,
            table: table.into(),
            model,
            n: a.rel.len(),
            rel_l2_mean: mean(a.rel.iter().copied()),
            rel_l2_std: std_dev(&a.rel),
            ssim_mean: mean(a.ssim.iter().copied()),
            ssim_std: std_dev(&a.ssim),
            spec_mse_mean: mean(a.spec.iter().copied()),
            spec_mse_std: std_dev(&a.spec),
            pearson_mean: (!a.pearson.is_empty()).then(|| mean(a.pearson.iter().copied())),
            pearson_std: (!a.pearson.is_empty()).then(|| std_dev(&a.pearson)),
            pearson_undefined: a.undefined,
        })
        .collect()
}

fn group<'r, R>(rows: &'r [R], key: impl Fn(&R) -> &str) -> Vec<(String, Vec<&'r R>)> {
    let mut out: Vec<(String, Vec<&R>)> = Vec::new();
    for r in rows {
        match out.iter_mut().find(|(k, _)| k == key(r)) {
            Some((_, v)) => v.push(r),
            None => out.push((key(r).to_string(), vec![r])),
        }
    }
    out
}

/// Tables in the layout of the super-resolution and forecasting
/// comparisons: one row per model, mean ± std across trajectories.
/// Forecast rows average each trajectory's steps `1..=horizon` first.
pub fn summary(pde: Pde, phase1: &[Phase1Row], phase2: &[Phase2Row]) -> Vec<SummaryRow> {
    let p1 = group(phase1, |r| r.model.as_str())
        .into_iter()
        .map(|(m, rows)| {
            let agg = Agg {
                rel: rows.iter().map(|r| r.rel_l2).collect(),
                ssim: rows.iter().map(|r| r.ssim).collect(),
                spec: rows.iter().map(|r| r.spec_mse).collect(),
                pearson: rows.iter().filter_map(|r| r.pearson).collect(),
                undefined: rows.iter().filter(|r| r.pearson.is_none()).count(),
            };
            (m, agg)
        })
        .collect();
    let mut out = summarize(pde, "phase1", p1);
    let p2 = group(phase2, |r| r.model.as_str())
        .into_iter()
        .map(|(m, rows)| {
            let mut agg = Agg {
                rel: Vec::new(),
                ssim: Vec::new(),
                spec: Vec::new(),
                pearson: Vec::new(),
                undefined: 0,
            };
            let mut keys: Vec<(u64, usize)> = rows.iter().map(|r| (r.seed, r.traj)).collect();
            keys.dedup();
            for (seed, traj) in keys {
                let steps: Vec<&&Phase2Row> =
                    rows.iter().filter(|r| r.seed == seed && r.traj == traj && r.step > 0).collect();
                agg.rel.push(mean(steps.iter().map(|r| r.rel_l2)));
                agg.ssim.push(mean(steps.iter().map(|r| r.ssim)));
                agg.spec.push(mean(steps.iter().map(|r| r.spec_mse)));
                let defined: Vec<f64> = steps.iter().filter_map(|r| r.pearson).collect();
                if defined.is_empty() {
                    agg.undefined += 1;
                } else {
                    agg.pearson.push(mean(defined.into_iter()));
                }
            }
            (m, agg)
        })
        .collect();
    out.extend(summarize(pde, "phase2", p2));
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{generate_dataset, pair_from_ic, GenConfig};
    use crate::grid::{inverse_fft, lowpass_project};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_field(n: usize, seed: u64) -> Field2D {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Field2D::new(n, (0..n * n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    fn zero_mean(n: usize, seed: u64) -> Field2D {
        let f = random_field(n, seed);
        let m = f.mean();
        f.map(|x| x - m)
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(16))]
            #[test]
            fn metric_bundle(seed in 0u64..1000, dx in -8isize..8, dy in -8isize..8, a in 0.1f64..10.0, b in -5.0f64..5.0) {
                let f = random_field(24, seed);
                let g = random_field(24, seed + 1);
                prop_assert_eq!(rel_l2(&f, &f).unwrap(), 0.0);
                prop_assert!((ssim(&f, &f).unwrap() - 1.0).abs() <= 1e-12);
                prop_assert_eq!(spec_mse(&f, &f).unwrap(), 0.0);
                let d0 = spec_mse(&g, &f).unwrap();
                let d1 = spec_mse(&g.shifted(dx, dy), &f).unwrap();
                prop_assert!((d0 - d1).abs() <= 1e-12 * d0);
                let r = pearson(&f.map(|v| a * v + b), &f).unwrap().unwrap();
                prop_assert!((r - 1.0).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn identity_bundle() {
        let f = random_field(32, 1);
        assert_eq!(rel_l2(&f, &f).unwrap(), 0.0);
        assert!((ssim(&f, &f).unwrap() - 1.0).abs() <= 1e-12);
        assert_eq!(spec_mse(&f, &f).unwrap(), 0.0);
        assert!((pearson(&f, &f).unwrap().unwrap() - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn rel_l2_guard_and_scaling() {
        let z = Field2D::zeros(8);
        assert_eq!(rel_l2(&z, &z).unwrap(), 0.0);
        let f = random_field(16, 2);
        let nf = f.norm2();
        let r = rel_l2(&f.scaled(2.0), &f).unwrap();
        assert!((r - nf / (nf + 1e-12)).abs() <= 1e-10);
        assert!(rel_l2(&Field2D::zeros(4), &f).is_err());
    }

    #[test]
    fn ssim_edge_cases() {
        // random zero-mean field whose 7-point window means vanish (kx a
        // nonzero multiple of n/7); with local means non-zero the luminance
        // term flips sign too and the index stays positive
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let modes: Vec<(f64, f64, f64, f64)> = (0..6)
            .map(|_| {
                let kx = 4.0 * rng.random_range(1..=3) as f64;
                let ky = rng.random_range(0..=5) as f64;
                (kx, ky, rng.random_range(0.5..1.0), rng.random_range(0.0..6.28))
            })
            .collect();
        let f = Field2D::from_fn(28, |x, y| {
            modes.iter().map(|&(kx, ky, a, p)| a * (2.0 * std::f64::consts::PI * (kx * x + ky * y) + p).cos()).sum()
        });
        assert!(ssim(&f.scaled(-1.0), &f).unwrap() < 0.0);
        let f = zero_mean(32, 3);
        let c = Field2D::constant(16, 0.7);
        assert!((ssim(&c, &c).unwrap() - 1.0).abs() <= 1e-12);
        let s = ssim(&random_field(32, 4), &f).unwrap();
        assert!((-1.0..=1.0).contains(&s));
    }

    #[test]
    fn spec_mse_is_translation_invariant() {
        let f = random_field(32, 5);
        let g = f.shifted(5, -3);
        let energy: f64 = f.data().iter().map(|x| x * x).sum();
        assert!(spec_mse(&g, &f).unwrap() <= 1e-20 * energy * 1024.0);
        assert!(rel_l2(&g, &f).unwrap() > 0.1);
        assert!(ssim(&g, &f).unwrap() < 0.9);
        // zero prediction scores the grid-space energy (Parseval)
        let e = spec_mse(&Field2D::zeros(32), &f).unwrap();
        assert!((e - energy).abs() <= 1e-10 * energy);
    }

    #[test]
    fn pearson_affine_invariance_and_undefined() {
        let f = random_field(16, 6);
        for (a, b) in [(3.0, 0.0), (0.5, -2.0), (10.0, 4.0)] {
            let g = f.map(|x| a * x + b);
            assert!((pearson(&g, &f).unwrap().unwrap() - 1.0).abs() <= 1e-12);
        }
        assert!((pearson(&f.scaled(-1.0), &f).unwrap().unwrap() + 1.0).abs() <= 1e-12);
        assert_eq!(pearson(&Field2D::constant(16, 1.0), &f).unwrap(), None);
    }

    #[test]
    fn record_excludes_undefined_correlation() {
        let f = random_field(8, 7);
        let mut frames = vec![frame_metrics(&[f.clone()], &[f.clone()]).unwrap()];
        frames.push(frame_metrics(&[Field2D::constant(8, 1.0)], &[f]).unwrap());
        let r = MetricsRecord {
            model: "x".into(),
            seed: 0,
            frames,
        };
        let (p, n) = r.mean_pearson();
        assert_eq!(n, 1);
        assert!((p.unwrap() - 1.0).abs() < 1e-12);
    }

    fn heat_band_limited_ds(frames: usize) -> PairedDataset {
        let mut g = GenConfig::new(Pde::Heat);
        g.n_coarse = 16;
        g.n_fine = 64;
        g.frames = frames;
        let raw = random_field(64, 8);
        let ic = inverse_fft(&lowpass_project(&forward_fft(&raw).unwrap(), 6).unwrap()).unwrap();
        let (c, f) = pair_from_ic(&g, ic, 0, 0).unwrap();
        PairedDataset {
            config: g,
            base_seed: 0,
            coarse: vec![c],
            fine: vec![f],
            split: vec![crate::dataset::Split::Train],
        }
    }

    #[test]
    fn ideal_lift_forecast_is_exact() {
        let ds = heat_band_limited_ds(3);
        let prop = Propagator::lifted_coarse(&ds, TransferMode::SpectralPad).unwrap();
        let truth = ground_truth(&ds.fine[0], 1, 100).unwrap();
        let run = forecast(&prop, "ideal", &truth[0], 1, &truth, 100).unwrap();
        assert_eq!(run.diverged_at, None);
        assert_eq!(run.metrics.len(), 101);
        assert!(run.metrics.iter().all(|m| m.rel_l2 <= 1e-10));
    }

    #[test]
    fn streamed_forecasts_match_stored_truth() {
        let ds = heat_band_limited_ds(4);
        let bic = Propagator::lifted_coarse(&ds, TransferMode::Bicubic).unwrap();
        let pad = Propagator::lifted_coarse(&ds, TransferMode::SpectralPad).unwrap();
        let truth = ground_truth(&ds.fine[0], 1, 10).unwrap();
        let runs = forecast_many(&[("b", &bic), ("p", &pad)], &ds.fine[0], 1, 10, true).unwrap();
        for (run, prop) in runs.iter().zip([&bic, &pad]) {
            let stored = forecast(prop, &run.model, &truth[0], 1, &truth, 10).unwrap();
            assert_eq!(run.frames, stored.frames);
            assert_eq!(run.metrics, stored.metrics);
        }
        let lean = forecast_many(&[("b", &bic)], &ds.fine[0], 1, 10, false).unwrap();
        assert!(lean[0].frames.is_empty());
        assert_eq!(lean[0].metrics, runs[0].metrics);
    }

    #[test]
    fn zero_horizon_holds_start_frame() {
        let ds = heat_band_limited_ds(3);
        let prop = Propagator::lifted_coarse(&ds, TransferMode::Bicubic).unwrap();
        let truth = ground_truth(&ds.fine[0], 2, 0).unwrap();
        let run = forecast(&prop, "b", &truth[0], 2, &truth, 0).unwrap();
        assert_eq!(run.frames.len(), 1);
        assert_eq!(run.metrics.len(), 1);
        assert_eq!(run.metrics[0].rel_l2, 0.0);
    }

    #[test]
    fn ground_truth_continues_the_fine_solver() {
        let ds = heat_band_limited_ds(4);
        let t = ground_truth(&ds.fine[0], 1, 6).unwrap();
        assert_eq!(t.len(), 7);
        assert_eq!(t[..3], ds.fine[0].frames[1..]);
        let s = Stepper::new(64, &ds.config.params).unwrap();
        assert_eq!(t[3], s.step(&t[2]).unwrap());
    }

    #[test]
    fn exploding_forecast_is_recorded() {
        let ds = heat_band_limited_ds(3);
        let mut cfg = crate::models::FnoConfig::fno_ar(1, 64).with_width(2).with_modes((4, 4));
        cfg.n_blocks = 1;
        let mut m = Fno::new(cfg, 1).unwrap();
        for e in ["head.w", "block0.pw.w", "lift.w"] {
            m.params.get_mut(e).unwrap().data_mut().iter_mut().for_each(|w| *w = 1e3);
        }
        let prop = Propagator::autoregressive(&m).unwrap();
        let truth = ground_truth(&ds.fine[0], 0, 200).unwrap();
        let run = forecast(&prop, "ar", &truth[0], 0, &truth, 200).unwrap();
        let d = run.diverged_at.expect("diverges");
        assert_eq!(run.frames.len(), d);
        assert!(run.metrics[d..].iter().all(|m| m.rel_l2.is_infinite()));
    }

    #[test]
    fn suite_csvs_and_determinism() {
        let mut g = GenConfig::new(Pde::Heat);
        g.n_coarse = 8;
        g.n_fine = 16;
        g.frames = 4;
        let ds = generate_dataset(&g, 3, 5, 1).unwrap();
        let cfg = SuiteConfig {
            start_index: 2,
            horizon: 5,
            workers: 1,
        };
        let empty = evaluate_suite(&ds, &SuiteModels::default(), &cfg).unwrap();
        assert!(empty.phase1.is_empty() && empty.phase2.is_empty());
        let dir = tempfile::tempdir().unwrap();
        write_suite(&empty, dir.path()).unwrap();
        let text = std::fs::read_to_string(dir.path().join(PHASE1_CSV)).unwrap();
        assert_eq!(text.lines().nth(1).unwrap(), PHASE1_HEADER.join(","));
        assert_eq!(text.lines().count(), 2);

        let mut sr_cfg = crate::models::FnoConfig::fno_sr(1, 8, 16).with_width(3).with_modes((4, 4));
        sr_cfg.n_blocks = 1;
        let sr = Fno::new(sr_cfg, 2).unwrap();
        let mut ar_cfg = crate::models::FnoConfig::fno_ar(1, 16).with_width(3).with_modes((4, 4));
        ar_cfg.n_blocks = 1;
        let ar = Fno::new(ar_cfg, 2).unwrap();
        let models = SuiteModels {
            sr: vec![Seeded { seed: 2, model: &sr }],
            surrogate: vec![Seeded { seed: 2, model: &sr }],
            ar: vec![Seeded { seed: 2, model: &ar }],
            bicubic: true,
        };
        let a = evaluate_suite(&ds, &models, &cfg).unwrap();
        let b = evaluate_suite(&ds, &models, &SuiteConfig { workers: 2, ..cfg }).unwrap();
        assert_eq!(format!("{a:?}"), format!("{b:?}"));
        assert_eq!(a.phase1.len(), 6);
        assert_eq!(a.phase2.len(), 3 * 3 * 6);
        assert_eq!(a.accum.len(), 3 * 6);
        write_suite(&a, dir.path()).unwrap();
        let back: Vec<Phase2Row> = read_csv(&dir.path().join(PHASE2_CSV)).unwrap();
        assert_eq!(back.len(), a.phase2.len());
        assert_eq!(back[7].model, a.phase2[7].model);
        let s = summary(Pde::Heat, &a.phase1, &a.phase2);
        assert_eq!(s.len(), 2 + 3);
        assert!(s.iter().all(|r| r.n == 3));
    }
}
