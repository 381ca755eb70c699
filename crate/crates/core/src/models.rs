//! Fourier neural operators: the super-resolution lift and the
//! autoregressive fine-grid propagator, plus the surrogate propagator
//! `lift ∘ coarse_step ∘ decimate`.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::Field2D;
use crate::solvers::Stepper;
use crate::tensor::{ParamStore, Tape, Tensor, Var};
use crate::transfer::{decimate_state, lift, TransferMode, TransferSpec};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    FnoSr,
    FnoAr,
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ModelKind::FnoSr => "fno-sr",
            ModelKind::FnoAr => "fno-ar",
        })
    }
}

impl FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fno-sr" => Ok(ModelKind::FnoSr),
            "fno-ar" => Ok(ModelKind::FnoAr),
            other => Err(Error::Parameter(format!("unknown model `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Gelu,
    /// Makes the network linear; used to probe the composition.
    Identity,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FnoConfig {
    pub kind: ModelKind,
    pub width: usize,
    pub n_blocks: usize,
    pub modes: (usize, usize),
    pub channels: usize,
    /// Input grid size; the coarse size for the lift.
    pub n_in: usize,
    pub n_out: usize,
    /// How the lift resamples its input before the first layer.
    pub upsample: TransferMode,
    #[serde(default)]
    pub activation: Activation,
}

impl FnoConfig {
    /// Width 64, three blocks, 16×16 modes.
    pub fn fno_sr(channels: usize, n_coarse: usize, n_fine: usize) -> Self {
        Self {
            kind: ModelKind::FnoSr,
            width: 64,
            n_blocks: 3,
            modes: (16, 16),
            channels,
            n_in: n_coarse,
            n_out: n_fine,
            upsample: TransferMode::SpectralPad,
            activation: Activation::Gelu,
        }
    }

    /// Width 64, four blocks, 16×16 modes, same grid in and out.
    pub fn fno_ar(channels: usize, n: usize) -> Self {
        Self {
            kind: ModelKind::FnoAr,
            width: 64,
            n_blocks: 4,
            modes: (16, 16),
            channels,
            n_in: n,
            n_out: n,
            upsample: TransferMode::SpectralPad,
            activation: Activation::Gelu,
        }
    }

    pub fn with_width(mut self, width: usize) -> Self {
        self.width = width;
        self
    }

    pub fn with_modes(mut self, modes: (usize, usize)) -> Self {
        self.modes = modes;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Parameter(msg));
        if self.width == 0 || self.channels == 0 {
            return bad("width and channels must be positive".into());
        }
        let (mh, mw) = self.modes;
        let nyq = self.n_out / 2;
        if mh < 2 || mw < 2 || mh % 2 != 0 || mw % 2 != 0 || mh > nyq || mw > nyq {
            return bad(format!(
                "modes {mh}x{mw} must be even, at least 2 and at most {nyq} for n={}",
                self.n_out
            ));
        }
        match self.kind {
            ModelKind::FnoSr => {
                TransferSpec::new(self.n_in, self.n_out, self.upsample)?;
                if self.upsample == TransferMode::Decimate {
                    return bad("the lift cannot upsample by decimation".into());
                }
            }
            ModelKind::FnoAr => {
                if self.n_in != self.n_out {
                    return bad(format!(
                        "autoregressive model maps n={} to itself, got n_out={}",
                        self.n_in, self.n_out
                    ));
                }
            }
        }
        Ok(())
    }

    /// Closed-form parameter count.
    pub fn param_count(&self) -> usize {
        let (w, c) = (self.width, self.channels);
        let (mh, mw) = self.modes;
        let lift = w * c + w;
        let block = 2 * w * w * mh * mw + w * w + w;
        let head = c * w + c;
        lift + self.n_blocks * block + head
    }

    pub fn transfer(&self) -> Result<Option<TransferSpec>> {
        match self.kind {
            ModelKind::FnoSr => Ok(Some(TransferSpec::new(self.n_in, self.n_out, self.upsample)?)),
            ModelKind::FnoAr => Ok(None),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Fno {
    pub config: FnoConfig,
    pub params: ParamStore,
}

fn uniform(shape: &[usize], bound: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let len: usize = shape.iter().product();
    let data = (0..len).map(|_| rng.random_range(-bound..bound)).collect();
    Tensor::new(shape.to_vec(), data).expect("length matches shape")
}

impl Fno {
    /// Pointwise maps and biases are uniform in `±1/√fan_in`; spectral
    /// weights are uniform in `[0, 1/(Cin·Mh·Mw))` for both parts.
    pub fn new(config: FnoConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (w, c) = (config.width, config.channels);
        let (mh, mw) = config.modes;
        let mut ps = ParamStore::new();
        let bc = 1.0 / (c as f64).sqrt();
        ps.insert("lift.w", uniform(&[w, c], bc, &mut rng))?;
        ps.insert("lift.b", uniform(&[w], bc, &mut rng))?;
        let bw = 1.0 / (w as f64).sqrt();
        let spec_scale = 1.0 / (w * mh * mw) as f64;
        for i in 0..config.n_blocks {
            for part in ["re", "im"] {
                let len = w * w * mh * mw;
                let data = (0..len).map(|_| rng.random::<f64>() * spec_scale).collect();
                ps.insert(
                    format!("block{i}.spec.{part}"),
                    Tensor::new(vec![w, w, mh, mw], data)?,
                )?;
            }
            ps.insert(format!("block{i}.pw.w"), uniform(&[w, w], bw, &mut rng))?;
            ps.insert(format!("block{i}.pw.b"), uniform(&[w], bw, &mut rng))?;
        }
        ps.insert("head.w", uniform(&[c, w], bw, &mut rng))?;
        ps.insert("head.b", uniform(&[c], bw, &mut rng))?;
        Ok(Self { config, params: ps })
    }

    pub fn kind(&self) -> ModelKind {
        self.config.kind
    }

    /// Resamples raw input fields to the working grid (identity for the
    /// autoregressive model) and packs them as `[B, C, n, n]`.
    pub fn prepare_input(&self, batch: &[Vec<Field2D>]) -> Result<Tensor> {
        for sample in batch {
            if sample.len() != self.config.channels {
                return Err(Error::Shape(format!(
                    "model expects {} channels, got {}",
                    self.config.channels,
                    sample.len()
                )));
            }
            for f in sample {
                if f.n() != self.config.n_in {
                    return Err(Error::Shape(format!(
                        "model expects {n}x{n} input, got {m}x{m}",
                        n = self.config.n_in,
                        m = f.n()
                    )));
                }
            }
        }
        match self.config.transfer()? {
            Some(spec) => {
                let up: Vec<Vec<Field2D>> = batch
                    .iter()
                    .map(|s| s.iter().map(|f| lift(f, &spec)).collect::<Result<_>>())
                    .collect::<Result<_>>()?;
                Tensor::from_batch(&up)
            }
            None => Tensor::from_batch(batch),
        }
    }

    /// Records the network on `tape`. `x` is a prepared `[B, C, n_out, n_out]`
    /// input. With `trainable`, parameters are differentiable leaves.
    pub fn forward(&self, tape: &mut Tape, x: Var, trainable: bool) -> Result<Var> {
        let (_, c, h, w) = tape.value(x).dims4()?;
        if c != self.config.channels || h != self.config.n_out || w != self.config.n_out {
            return Err(Error::Shape(format!(
                "prepared input {:?} does not match model ({} channels at {})",
                tape.value(x).shape(),
                self.config.channels,
                self.config.n_out
            )));
        }
        let p = |tape: &mut Tape, name: &str| -> Result<Var> {
            if trainable {
                tape.param(&self.params, name)
            } else {
                let t = self
                    .params
                    .get(name)
                    .ok_or_else(|| Error::Parameter(format!("missing parameter `{name}`")))?;
                Ok(tape.constant(t.clone()))
            }
        };
        let (lw, lb) = (p(tape, "lift.w")?, p(tape, "lift.b")?);
        let mut hvar = tape.pointwise_linear(x, lw, lb)?;
        for i in 0..self.config.n_blocks {
            let re = p(tape, &format!("block{i}.spec.re"))?;
            let im = p(tape, &format!("block{i}.spec.im"))?;
            let pw = p(tape, &format!("block{i}.pw.w"))?;
            let pb = p(tape, &format!("block{i}.pw.b"))?;
            let s = tape.spectral_mix(hvar, re, im)?;
            let q = tape.pointwise_linear(hvar, pw, pb)?;
            let sum = tape.add(s, q)?;
            hvar = match self.config.activation {
                Activation::Gelu => tape.gelu(sum),
                Activation::Identity => sum,
            };
        }
        let (hw, hb) = (p(tape, "head.w")?, p(tape, "head.b")?);
        tape.pointwise_linear(hvar, hw, hb)
    }

    /// Evaluation-mode forward on raw input fields.
    pub fn predict(&self, batch: &[Vec<Field2D>]) -> Result<Vec<Vec<Field2D>>> {
        let x = self.prepare_input(batch)?;
        self.predict_prepared(&x)
    }

    pub fn predict_prepared(&self, x: &Tensor) -> Result<Vec<Vec<Field2D>>> {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let y = self.forward(&mut tape, xv, false)?;
        let out = tape.value(y);
        if !out.is_finite() {
            return Err(Error::NumericInput("model output contains NaN or Inf".into()));
        }
        out.to_batch()
    }

    pub fn predict_one(&self, state: &[Field2D]) -> Result<Vec<Field2D>> {
        Ok(self.predict(&[state.to_vec()])?.remove(0))
    }
}

/// Surrogate propagator with an arbitrary lift: `lift(P_c(dt)[decimate(u_f)])`.
pub fn surrogate_step_with(
    lift_fn: impl FnOnce(&[Field2D]) -> Result<Vec<Field2D>>,
    coarse: &Stepper,
    transfer: &TransferSpec,
    u_f: &[Field2D],
) -> Result<Vec<Field2D>> {
    let u_c = decimate_state(u_f, transfer).map_err(|e| e.in_stage("decimate"))?;
    let next_c = coarse.step(&u_c).map_err(|e| e.in_stage("coarse step"))?;
    lift_fn(&next_c).map_err(|e| e.in_stage("lift"))
}

/// One step of `N_θ ∘ P_c(dt) ∘ P`. The coarse solve runs outside any tape.
pub fn surrogate_step(
    model: &Fno,
    coarse: &Stepper,
    transfer: &TransferSpec,
    u_f: &[Field2D],
) -> Result<Vec<Field2D>> {
    if model.kind() != ModelKind::FnoSr {
        return Err(Error::Parameter("surrogate step needs a super-resolution model".into()));
    }
    surrogate_step_with(|u_c| model.predict_one(u_c), coarse, transfer, u_f)
}
