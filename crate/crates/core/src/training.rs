//! Phase 1 (super-resolution), Phase 2 (fine-tuning inside the surrogate
//! composition) and the autoregressive baseline.
//!
//! The coarse solve in Phase 2 does not depend on the weights, so the
//! coarse-stepped inputs `P_c(dt)[P u_f^i]` are computed once, outside any
//! tape, and each epoch regresses the lift onto `u_f^{i+1}`.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::artifact::checksum_hex;
use crate::dataset::{PairedDataset, Split};
use crate::error::{Error, Result};
use crate::grid::Field2D;
use crate::models::{Fno, FnoConfig, ModelKind};
use crate::solvers::Stepper;
use crate::tensor::{AdamConfig, CosineSchedule, Tape, Tensor};
use crate::transfer::{decimate_state, TransferMode};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Phase1,
    Phase2,
    Ar,
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Phase::Phase1 => "phase1",
            Phase::Phase2 => "phase2",
            Phase::Ar => "ar",
        })
    }
}

impl FromStr for Phase {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "1" | "phase1" => Ok(Phase::Phase1),
            "2" | "phase2" => Ok(Phase::Phase2),
            "ar" => Ok(Phase::Ar),
            other => Err(Error::Parameter(format!("unknown phase `{other}` (expected 1, 2 or ar)"))),
        }
    }
}

/// Architecture knobs shared by the lift and the autoregressive model.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelSpec {
    pub width: usize,
    pub modes: (usize, usize),
    pub sr_blocks: usize,
    pub ar_blocks: usize,
    pub upsample: TransferMode,
}

impl Default for ModelSpec {
    fn default() -> Self {
        Self {
            width: 64,
            modes: (16, 16),
            sr_blocks: 3,
            ar_blocks: 4,
            upsample: TransferMode::SpectralPad,
        }
    }
}

impl ModelSpec {
    pub fn sr_config(&self, channels: usize, n_coarse: usize, n_fine: usize) -> FnoConfig {
        let mut c = FnoConfig::fno_sr(channels, n_coarse, n_fine)
            .with_width(self.width)
            .with_modes(self.modes);
        c.n_blocks = self.sr_blocks;
        c.upsample = self.upsample;
        c
    }

    pub fn ar_config(&self, channels: usize, n: usize) -> FnoConfig {
        let mut c = FnoConfig::fno_ar(channels, n).with_width(self.width).with_modes(self.modes);
        c.n_blocks = self.ar_blocks;
        c
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs_p1: usize,
    pub epochs_p2: usize,
    pub epochs_ar: usize,
    pub lr0: f64,
    pub lr_min: f64,
    pub batch_size: usize,
    pub seed: u64,
    /// Use every `frame_stride`-th frame of each trajectory.
    pub frame_stride: usize,
    /// Phase 2 starts from random weights instead of the Phase 1 model.
    pub ablate_no_pretrain: bool,
    pub adam: AdamConfig,
    pub model: ModelSpec,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs_p1: 300,
            epochs_p2: 150,
            epochs_ar: 300,
            lr0: 5e-4,
            lr_min: 0.0,
            batch_size: 8,
            seed: 0,
            frame_stride: 1,
            ablate_no_pretrain: false,
            adam: AdamConfig::default(),
            model: ModelSpec::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr0 > 0.0) || !self.lr0.is_finite() {
            return Err(Error::Parameter(format!("learning rate must be positive, got {}", self.lr0)));
        }
        if !(self.lr_min >= 0.0) || self.lr_min > self.lr0 {
            return Err(Error::Parameter(format!("lr_min must lie in [0, lr0], got {}", self.lr_min)));
        }
        if self.batch_size == 0 || self.frame_stride == 0 {
            return Err(Error::Parameter("batch size and frame stride must be positive".into()));
        }
        Ok(())
    }

    pub fn epochs(&self, phase: Phase) -> usize {
        match phase {
            Phase::Phase1 => self.epochs_p1,
            Phase::Phase2 => self.epochs_p2,
            Phase::Ar => self.epochs_ar,
        }
    }

    /// Hex FNV-1a of the canonical JSON encoding.
    pub fn hash(&self) -> String {
        checksum_hex(&serde_json::to_vec(self).expect("config serializes"))
    }
}

/// Hex FNV-1a of a model configuration; equal across phases of one run.
pub fn model_hash(config: &FnoConfig) -> String {
    checksum_hex(&serde_json::to_vec(config).expect("config serializes"))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub phase: Phase,
    pub epochs: usize,
    pub train_loss: Vec<f64>,
    pub val_loss: Vec<f64>,
    /// Validation loss of the starting weights.
    pub initial_val_loss: f64,
    pub best_epoch: Option<usize>,
    pub best_val_loss: f64,
    pub train_samples: usize,
    pub val_samples: usize,
    pub seed: u64,
    pub config_hash: String,
    pub model_hash: String,
    /// Kept out of the serialized report so reruns are byte-identical.
    #[serde(skip)]
    pub wall_time_s: f64,
}

impl TrainReport {
    /// `epoch,train_loss,val_loss` rows.
    pub fn loss_csv(&self) -> String {
        let mut s = String::from("epoch,train_loss,val_loss\n");
        for (i, (t, v)) in self.train_loss.iter().zip(&self.val_loss).enumerate() {
            s.push_str(&format!("{i},{t:e},{v:e}\n"));
        }
        s
    }
}

/// Input/target pairs in raw (unprepared) form.
pub struct Samples<'a> {
    pub inputs: Vec<&'a [Field2D]>,
    pub targets: Vec<&'a [Field2D]>,
}

impl<'a> Samples<'a> {
    fn empty() -> Self {
        Self {
            inputs: Vec::new(),
            targets: Vec::new(),
        }
    }

    fn push(&mut self, input: &'a [Field2D], target: &'a [Field2D]) {
        self.inputs.push(input);
        self.targets.push(target);
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }
}

fn frame_indices(frames: usize, stride: usize) -> impl Iterator<Item = usize> {
    (0..frames.saturating_sub(1)).step_by(stride)
}

/// `(u_c(t), u_f(t))` for `t` in `[0, T-1)`; the final frame only serves as
/// a shifted target.
pub fn phase1_samples<'a>(ds: &'a PairedDataset, split: Split, stride: usize) -> Samples<'a> {
    let mut s = Samples::empty();
    for i in ds.indices(split) {
        for t in frame_indices(ds.fine[i].len(), stride) {
            s.push(ds.coarse[i].frame(t), ds.fine[i].frame(t));
        }
    }
    s
}

/// `(u_f^i, u_f^{i+1})` by index shift.
pub fn shifted_samples<'a>(ds: &'a PairedDataset, split: Split, stride: usize) -> Samples<'a> {
    let mut s = Samples::empty();
    for i in ds.indices(split) {
        for t in frame_indices(ds.fine[i].len(), stride) {
            s.push(ds.fine[i].frame(t), ds.fine[i].frame(t + 1));
        }
    }
    s
}

/// Coarse-stepped decimated fine states `P_c(dt)[P u_f^i]`, paired with the
/// index of the fine target frame's source.
pub struct CoarseInputs {
    pub states: Vec<Vec<Field2D>>,
    pub targets: Vec<(usize, usize)>,
}

pub fn coarse_stepped_inputs(ds: &PairedDataset, split: Split, stride: usize) -> Result<CoarseInputs> {
    let cfg = &ds.config;
    let stepper = Stepper::new(cfg.n_coarse, &cfg.params)?;
    let spec = cfg.transfer()?;
    let mut out = CoarseInputs {
        states: Vec::new(),
        targets: Vec::new(),
    };
    for i in ds.indices(split) {
        let traj = &ds.fine[i];
        for t in frame_indices(traj.len(), stride) {
            let u_c = decimate_state(traj.frame(t), &spec)?;
            let next = stepper.step(&u_c).map_err(|e| Error::Trajectory {
                trajectory: i,
                seed: traj.seed,
                step: t,
                source: Box::new(e.in_stage("coarse step")),
            })?;
            out.states.push(next);
            out.targets.push((i, t + 1));
        }
    }
    Ok(out)
}

fn phase2_samples<'a>(ds: &'a PairedDataset, inputs: &'a CoarseInputs) -> Samples<'a> {
    let mut s = Samples::empty();
    for (state, &(i, t)) in inputs.states.iter().zip(&inputs.targets) {
        s.push(state, ds.fine[i].frame(t));
    }
    s
}

fn to_owned_batch(fields: &[&[Field2D]]) -> Vec<Vec<Field2D>> {
    fields.iter().map(|f| f.to_vec()).collect()
}

/// Mean L1 over samples and pixels, evaluation mode.
pub fn mean_l1(model: &Fno, samples: &Samples<'_>, batch_size: usize) -> Result<f64> {
    if samples.is_empty() {
        return Ok(f64::NAN);
    }
    let mut total = 0.0;
    let mut count = 0usize;
    for start in (0..samples.len()).step_by(batch_size.max(1)) {
        let end = (start + batch_size).min(samples.len());
        let pred = model.predict(&to_owned_batch(&samples.inputs[start..end]))?;
        for (p, t) in pred.iter().zip(&samples.targets[start..end]) {
            for (pf, tf) in p.iter().zip(t.iter()) {
                total += pf.data().iter().zip(tf.data()).map(|(a, b)| (a - b).abs()).sum::<f64>();
                count += pf.data().len();
            }
        }
    }
    Ok(total / count as f64)
}

/// Minibatch Adam on the mean-L1 objective with a per-epoch cosine
/// schedule; returns the weights with the lowest validation loss (training
/// loss when there is no validation data).
pub fn fit(
    mut model: Fno,
    train: &Samples<'_>,
    val: &Samples<'_>,
    cfg: &TrainConfig,
    phase: Phase,
) -> Result<(Fno, TrainReport)> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Parameter("no training samples".into()));
    }
    let start = Instant::now();
    let epochs = cfg.epochs(phase);
    let schedule = CosineSchedule {
        lr0: cfg.lr0,
        lr_min: cfg.lr_min,
        t_max: epochs,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xa1fa_5eed);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let initial_val = mean_l1(&model, if val.is_empty() { train } else { val }, cfg.batch_size)?;
    let mut best = (None, initial_val, model.params.clone());
    let mut train_loss = Vec::with_capacity(epochs);
    let mut val_loss = Vec::with_capacity(epochs);
    let mut tape = Tape::new();
    for epoch in 0..epochs {
        order.shuffle(&mut rng);
        let lr = schedule.lr(epoch);
        let mut sum = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let inputs: Vec<&[Field2D]> = batch.iter().map(|&k| train.inputs[k]).collect();
            let targets: Vec<&[Field2D]> = batch.iter().map(|&k| train.targets[k]).collect();
            let x = model.prepare_input(&to_owned_batch(&inputs))?;
            let y = Tensor::from_batch(&to_owned_batch(&targets))?;
            tape.clear();
            let xv = tape.constant(x);
            let yv = tape.constant(y);
            let pred = model.forward(&mut tape, xv, true)?;
            let loss = tape.l1_loss(pred, yv)?;
            let value = tape.value(loss).data()[0];
            if !value.is_finite() {
                return Err(Error::TrainingDivergence { epoch, loss: value });
            }
            let grads = tape.backward(loss)?;
            model.params.adam_step(grads.params(), lr, &cfg.adam)?;
            sum += value * batch.len() as f64;
        }
        let tl = sum / train.len() as f64;
        let vl = match mean_l1(&model, if val.is_empty() { train } else { val }, cfg.batch_size) {
            Err(Error::NumericInput(_)) => f64::NAN,
            other => other?,
        };
        if !vl.is_finite() {
            return Err(Error::TrainingDivergence { epoch, loss: vl });
        }
        train_loss.push(tl);
        val_loss.push(vl);
        if best.0.is_none() || vl < best.1 {
            best = (Some(epoch), vl, model.params.clone());
        }
    }
    let (best_epoch, best_val_loss, params) = best;
    model.params = params;
    let report = TrainReport {
        phase,
        epochs,
        train_loss,
        val_loss,
        initial_val_loss: initial_val,
        best_epoch,
        best_val_loss,
        train_samples: train.len(),
        val_samples: val.len(),
        seed: cfg.seed,
        config_hash: cfg.hash(),
        model_hash: model_hash(&model.config),
        wall_time_s: start.elapsed().as_secs_f64(),
    };
    Ok((model, report))
}

fn check_model(model: &Fno, kind: ModelKind, ds: &PairedDataset) -> Result<()> {
    let c = &model.config;
    let (n_in, n_out) = match kind {
        ModelKind::FnoSr => (ds.config.n_coarse, ds.config.n_fine),
        ModelKind::FnoAr => (ds.config.n_fine, ds.config.n_fine),
    };
    if c.kind != kind || c.channels != ds.pde().channels() || c.n_in != n_in || c.n_out != n_out {
        return Err(Error::Shape(format!(
            "{} model ({} ch, {}→{}) does not fit {} data ({} ch, {n_in}→{n_out})",
            c.kind,
            c.channels,
            c.n_in,
            c.n_out,
            ds.pde(),
            ds.pde().channels()
        )));
    }
    Ok(())
}

pub fn init_sr(ds: &PairedDataset, cfg: &TrainConfig) -> Result<Fno> {
    let mc = cfg.model.sr_config(ds.pde().channels(), ds.config.n_coarse, ds.config.n_fine);
    Fno::new(mc, cfg.seed)
}

pub fn init_ar(ds: &PairedDataset, cfg: &TrainConfig) -> Result<Fno> {
    Fno::new(cfg.model.ar_config(ds.pde().channels(), ds.config.n_fine), cfg.seed)
}

/// Fits the lift on `(u_c(t), u_f(t))` pairs.
pub fn train_phase1(ds: &PairedDataset, cfg: &TrainConfig) -> Result<(Fno, TrainReport)> {
    let model = init_sr(ds, cfg)?;
    let train = phase1_samples(ds, Split::Train, cfg.frame_stride);
    let val = phase1_samples(ds, Split::Val, cfg.frame_stride);
    fit(model, &train, &val, cfg, Phase::Phase1)
}

/// Fine-tunes the lift inside `N_θ ∘ P_c(dt) ∘ P` against time-shifted fine
/// targets, starting from `phase1` (or from random weights when ablating).
pub fn train_phase2(ds: &PairedDataset, phase1: &Fno, cfg: &TrainConfig) -> Result<(Fno, TrainReport)> {
    check_model(phase1, ModelKind::FnoSr, ds)?;
    let model = if cfg.ablate_no_pretrain {
        Fno::new(phase1.config.clone(), cfg.seed)?
    } else {
        let mut m = phase1.clone();
        m.params.reset_optimizer();
        m
    };
    let train_in = coarse_stepped_inputs(ds, Split::Train, cfg.frame_stride)?;
    let val_in = coarse_stepped_inputs(ds, Split::Val, cfg.frame_stride)?;
    let train = phase2_samples(ds, &train_in);
    let val = phase2_samples(ds, &val_in);
    fit(model, &train, &val, cfg, Phase::Phase2)
}

/// Validation objective of a lift used inside the surrogate composition.
pub fn phase2_val_loss(ds: &PairedDataset, model: &Fno, cfg: &TrainConfig) -> Result<f64> {
    let inputs = coarse_stepped_inputs(ds, Split::Val, cfg.frame_stride)?;
    mean_l1(model, &phase2_samples(ds, &inputs), cfg.batch_size)
}

/// Fits the fine-grid propagator on `(u_f^i, u_f^{i+1})`.
pub fn train_fno_ar(ds: &PairedDataset, cfg: &TrainConfig) -> Result<(Fno, TrainReport)> {
    let model = init_ar(ds, cfg)?;
    let train = shifted_samples(ds, Split::Train, cfg.frame_stride);
    let val = shifted_samples(ds, Split::Val, cfg.frame_stride);
    fit(model, &train, &val, cfg, Phase::Ar)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{generate_dataset, GenConfig};
    use crate::models::surrogate_step;
    use crate::solvers::Pde;

    fn heat_ds(count: usize, frames: usize) -> PairedDataset {
        let mut g = GenConfig::new(Pde::Heat);
        g.n_coarse = 8;
        g.n_fine = 16;
        g.frames = frames;
        generate_dataset(&g, count, 3, 1).unwrap()
    }

    fn tiny_cfg(epochs: usize) -> TrainConfig {
        TrainConfig {
            epochs_p1: epochs,
            epochs_p2: epochs,
            epochs_ar: epochs,
            lr0: 5e-3,
            batch_size: 4,
            model: ModelSpec {
                width: 4,
                modes: (4, 4),
                sr_blocks: 1,
                ar_blocks: 1,
                ..Default::default()
            },
            ..Default::default()
        }
    }

    #[test]
    fn zero_epochs_return_initial_model() {
        let ds = heat_ds(3, 4);
        let cfg = tiny_cfg(0);
        let (m, r) = train_phase1(&ds, &cfg).unwrap();
        assert_eq!(m, init_sr(&ds, &cfg).unwrap());
        assert!(r.train_loss.is_empty() && r.val_loss.is_empty());
        assert_eq!(r.best_epoch, None);
        let (a, _) = train_fno_ar(&ds, &cfg).unwrap();
        assert_eq!(a, init_ar(&ds, &cfg).unwrap());
    }

    #[test]
    fn overfit_probe_reduces_loss() {
        // band-limited wave data: the fine frames are recoverable from the
        // coarse ones, so the probe measures capacity, not information loss
        let mut g = GenConfig::new(Pde::Wave);
        g.n_coarse = 8;
        g.n_fine = 16;
        g.frames = 6;
        let ds = generate_dataset(&g, 1, 3, 1).unwrap();
        let mut cfg = tiny_cfg(200);
        cfg.model.modes = (8, 8);
        let (_, r) = train_phase1(&ds, &cfg).unwrap();
        assert_eq!(r.train_loss.len(), 200);
        assert!(r.train_loss.iter().all(|l| l.is_finite()));
        assert!(r.train_loss[199] < 0.2 * r.train_loss[0], "{} vs {}", r.train_loss[199], r.train_loss[0]);
        let (_, r) = train_fno_ar(&ds, &cfg).unwrap();
        assert!(r.train_loss[199] < 0.2 * r.train_loss[0]);
    }

    #[test]
    fn training_is_deterministic_and_selects_best() {
        let ds = heat_ds(5, 4);
        let cfg = tiny_cfg(6);
        let (m1, r1) = train_phase1(&ds, &cfg).unwrap();
        let (m2, r2) = train_phase1(&ds, &cfg).unwrap();
        assert_eq!(m1, m2);
        assert_eq!(r1.train_loss, r2.train_loss);
        assert_eq!(r1.val_loss, r2.val_loss);
        let best = r1.val_loss.iter().cloned().fold(f64::INFINITY, f64::min);
        assert_eq!(r1.best_val_loss, best);
        let val = phase1_samples(&ds, Split::Val, 1);
        assert_eq!(mean_l1(&m1, &val, 4).unwrap(), best);
    }

    #[test]
    fn phase2_reuses_architecture_and_does_not_regress() {
        let ds = heat_ds(5, 5);
        let cfg = tiny_cfg(8);
        let (p1, r1) = train_phase1(&ds, &cfg).unwrap();
        let (p2, r2) = train_phase2(&ds, &p1, &cfg).unwrap();
        assert_eq!(r1.model_hash, r2.model_hash);
        let before = phase2_val_loss(&ds, &p1, &cfg).unwrap();
        assert_eq!(r2.initial_val_loss, before);
        assert!(phase2_val_loss(&ds, &p2, &cfg).unwrap() <= before);
        let mut ab = cfg.clone();
        ab.ablate_no_pretrain = true;
        let (_, ra) = train_phase2(&ds, &p1, &ab).unwrap();
        assert_ne!(ra.initial_val_loss, r2.initial_val_loss);
    }

    #[test]
    fn phase2_inputs_match_surrogate_composition() {
        let ds = heat_ds(3, 4);
        let cfg = tiny_cfg(0);
        let (p1, _) = train_phase1(&ds, &cfg).unwrap();
        let inputs = coarse_stepped_inputs(&ds, Split::Train, 1).unwrap();
        let stepper = Stepper::new(ds.config.n_coarse, &ds.config.params).unwrap();
        let spec = p1.config.transfer().unwrap().unwrap();
        let (i, t) = inputs.targets[2];
        let via_samples = p1.predict_one(&inputs.states[2]).unwrap();
        let via_step = surrogate_step(&p1, &stepper, &spec, ds.fine[i].frame(t - 1)).unwrap();
        assert_eq!(via_samples, via_step);
    }

    #[test]
    fn divergent_learning_rate_is_reported() {
        let ds = heat_ds(2, 4);
        let mut cfg = tiny_cfg(50);
        cfg.lr0 = 1e300;
        match train_phase1(&ds, &cfg) {
            Err(Error::TrainingDivergence { .. }) => {}
            other => panic!("expected divergence, got {:?}", other.map(|(_, r)| r.train_loss)),
        }
    }

    #[test]
    fn invalid_configs_and_mismatched_models_are_rejected() {
        let ds = heat_ds(2, 3);
        let mut cfg = tiny_cfg(1);
        cfg.lr0 = 0.0;
        assert!(train_phase1(&ds, &cfg).is_err());
        let cfg = tiny_cfg(1);
        let ar = init_ar(&ds, &cfg).unwrap();
        assert!(matches!(train_phase2(&ds, &ar, &cfg), Err(Error::Shape(_))));
        assert_eq!("2".parse::<Phase>().unwrap(), Phase::Phase2);
        assert!("3".parse::<Phase>().is_err());
    }
}
