//! Initial-condition samplers, paired coarse/fine trajectory generation and
//! the on-disk trajectory store.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::artifact::{checksum_hex, fnv1a, parse_checksum, push_f64s, read_bytes, read_f64s, read_json, write_bytes, write_json};
use crate::error::{Error, Result};
use crate::grid::{forward_fft, inverse_fft, lowpass_project, Field2D};
use crate::solvers::{Pde, PdeParams, Stepper};
use crate::transfer::{decimate, decimate_state, TransferMode, TransferSpec};

/// Spectral cutoff of the vorticity initial condition.
pub const NS_IC_CUTOFF: usize = 16;
/// Number of sinusoids in a wave initial condition.
pub const WAVE_IC_COMPONENTS: usize = 8;

const BLOB_MAGIC: &[u8; 4] = b"SRFT";
const BLOB_VERSION: u32 = 1;
const DTYPE_F64: u8 = 1;
const BLOB_HEADER_LEN: usize = 4 + 4 + 1 + 4 + 4 + 4 + 1;
const MANIFEST_FORMAT: &str = "srafte-dataset";
const MANIFEST_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";

// ---------------------------------------------------------------------------
// Samplers
// ---------------------------------------------------------------------------

/// White noise projected onto `max(|kx|, |ky|) ≤ 16`.
pub fn sample_ic_ns(n: usize, rng: &mut impl Rng) -> Result<Field2D> {
    if n < 64 {
        return Err(Error::Parameter(format!("vorticity IC needs n ≥ 64, got {n}")));
    }
    let noise: Vec<f64> = (0..n * n).map(|_| rng.sample(StandardNormal)).collect();
    let spec = forward_fft(&Field2D::new(n, noise)?)?;
    inverse_fft(&lowpass_project(&spec, NS_IC_CUTOFF)?)
}

/// I.i.d. `U[0, 1)` per grid point.
pub fn sample_ic_heat(n: usize, rng: &mut impl Rng) -> Result<Field2D> {
    let data = (0..n * n).map(|_| rng.random::<f64>()).collect();
    Field2D::new(n, data)
}

/// One sinusoidal component `A sin(2π(kx x + ky y) + φ)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WaveComponent {
    pub amplitude: f64,
    pub kx: i64,
    pub ky: i64,
    pub phase: f64,
}

pub fn sample_wave_components(rng: &mut impl Rng) -> Vec<WaveComponent> {
    (0..WAVE_IC_COMPONENTS)
        .map(|_| WaveComponent {
            amplitude: rng.random_range(0.5..=1.0),
            kx: rng.random_range(1..=3),
            ky: rng.random_range(1..=3),
            phase: rng.random_range(0.0..2.0 * PI),
        })
        .collect()
}

/// Unnormalized sum of eight random sinusoids; normalization is applied to
/// the solved trajectory.
pub fn sample_ic_wave(n: usize, rng: &mut impl Rng) -> Result<Field2D> {
    if n == 0 {
        return Err(Error::Parameter("grid size must be positive".into()));
    }
    let comps = sample_wave_components(rng);
    Ok(Field2D::from_fn(n, |x, y| {
        comps
            .iter()
            .map(|c| c.amplitude * (2.0 * PI * (c.kx as f64 * x + c.ky as f64 * y) + c.phase).sin())
            .sum()
    }))
}

pub fn sample_ic(pde: Pde, n: usize, rng: &mut impl Rng) -> Result<Field2D> {
    match pde {
        Pde::Heat => sample_ic_heat(n, rng),
        Pde::Wave => sample_ic_wave(n, rng),
        Pde::Ns => sample_ic_ns(n, rng),
    }
}

// ---------------------------------------------------------------------------
// Trajectories
// ---------------------------------------------------------------------------

/// Affine map `u ↦ scale·u + offset` applied to a whole trajectory.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub scale: f64,
    pub offset: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub pde: Pde,
    pub n: usize,
    pub dt: f64,
    pub t0: f64,
    /// `frames[t][c]`.
    pub frames: Vec<Vec<Field2D>>,
    pub seed: u64,
    pub params: PdeParams,
    pub normalization: Option<Normalization>,
}

impl Trajectory {
    pub fn channels(&self) -> usize {
        self.pde.channels()
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn frame(&self, t: usize) -> &[Field2D] {
        &self.frames[t]
    }

    pub fn last(&self) -> &[Field2D] {
        self.frames.last().expect("trajectory has frames")
    }

    pub fn time(&self, t: usize) -> f64 {
        self.t0 + t as f64 * self.dt
    }

    /// `(u^i, u^{i+1})` pairs by index shift; no re-solving.
    pub fn shifted_pairs(&self) -> impl Iterator<Item = (&[Field2D], &[Field2D])> {
        self.frames.windows(2).map(|w| (w[0].as_slice(), w[1].as_slice()))
    }

    /// Finiteness, frame count, channel count, grid size and solver
    /// stability for the stored parameters.
    pub fn validate(&self) -> Result<()> {
        if self.params.pde() != self.pde {
            return Err(Error::Parameter(format!(
                "trajectory is {} but parameters are for {}",
                self.pde,
                self.params.pde()
            )));
        }
        if self.frames.len() < 2 {
            return Err(Error::Parameter(format!(
                "trajectory needs at least 2 frames, has {}",
                self.frames.len()
            )));
        }
        Stepper::new(self.n, &self.params)?;
        for (t, frame) in self.frames.iter().enumerate() {
            if frame.len() != self.channels() {
                return Err(Error::Shape(format!(
                    "frame {t} has {} channels, {} expects {}",
                    frame.len(),
                    self.pde,
                    self.channels()
                )));
            }
            for f in frame {
                if f.n() != self.n {
                    return Err(Error::Shape(format!("frame {t} has size {}, expected {}", f.n(), self.n)));
                }
                f.ensure_finite(&format!("frame {t}"))?;
            }
        }
        Ok(())
    }
}

/// Generation settings shared by every trajectory of a dataset.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenConfig {
    pub params: PdeParams,
    pub n_coarse: usize,
    pub n_fine: usize,
    /// Frames per trajectory including the initial condition.
    pub frames: usize,
}

impl GenConfig {
    /// Default grid pair and parameters; 101 frames over `[0, 1]` plus one
    /// extra for time-shifted targets.
    pub fn new(pde: Pde) -> Self {
        let (n_coarse, n_fine) = pde.default_grids();
        Self {
            params: pde.default_params(),
            n_coarse,
            n_fine,
            frames: 102,
        }
    }

    pub fn pde(&self) -> Pde {
        self.params.pde()
    }

    pub fn transfer(&self) -> Result<TransferSpec> {
        TransferSpec::new(self.n_coarse, self.n_fine, TransferMode::Decimate)
    }

    pub fn validate(&self) -> Result<()> {
        if self.frames < 2 {
            return Err(Error::Parameter(format!("need at least 2 frames, got {}", self.frames)));
        }
        self.transfer()?;
        Stepper::new(self.n_coarse, &self.params)?;
        Stepper::new(self.n_fine, &self.params)?;
        Ok(())
    }
}

fn roll_out(
    stepper: &Stepper,
    init: Vec<Field2D>,
    frames: usize,
    index: usize,
    seed: u64,
) -> Result<Vec<Vec<Field2D>>> {
    let mut out = Vec::with_capacity(frames);
    out.push(init);
    for step in 1..frames {
        let next = stepper.step(out.last().expect("non-empty")).map_err(|e| Error::Trajectory {
            trajectory: index,
            seed,
            step,
            source: Box::new(e),
        })?;
        out.push(next);
    }
    Ok(out)
}

fn min_max_normalize(frames: &mut [Vec<Field2D>]) -> Result<Normalization> {
    let (lo, hi) = frames.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), f| {
        (lo.min(f[0].min()), hi.max(f[0].max()))
    });
    let range = hi - lo;
    if !(range > 0.0) || !range.is_finite() {
        return Err(Error::NumericInput(format!("cannot normalize displacement range [{lo}, {hi}]")));
    }
    let scale = 1.0 / range;
    for frame in frames.iter_mut() {
        frame[0] = frame[0].map(|u| (u - lo) * scale);
        for ch in &mut frame[1..] {
            *ch = ch.scaled(scale);
        }
    }
    Ok(Normalization {
        scale,
        offset: -lo * scale,
    })
}

/// Solves the fine trajectory from `ic` and builds its coarse partner:
/// heat decimates the IC and solves on the coarse grid, wave decimates the
/// normalized fine frames, NS decimates the IC and solves independently.
pub fn pair_from_ic(cfg: &GenConfig, ic: Field2D, index: usize, seed: u64) -> Result<(Trajectory, Trajectory)> {
    cfg.validate()?;
    if ic.n() != cfg.n_fine {
        return Err(Error::Shape(format!("IC has size {}, fine grid is {}", ic.n(), cfg.n_fine)));
    }
    let pde = cfg.pde();
    let spec = cfg.transfer()?;
    let fine_stepper = Stepper::new(cfg.n_fine, &cfg.params)?;
    let make = |n, frames, normalization| Trajectory {
        pde,
        n,
        dt: cfg.params.dt(),
        t0: 0.0,
        frames,
        seed,
        params: cfg.params,
        normalization,
    };
    match pde {
        Pde::Heat | Pde::Ns => {
            let coarse_stepper = Stepper::new(cfg.n_coarse, &cfg.params)?;
            let ic_c = decimate(&ic, &spec)?;
            let fine = roll_out(&fine_stepper, vec![ic], cfg.frames, index, seed)?;
            let coarse = roll_out(&coarse_stepper, vec![ic_c], cfg.frames, index, seed)?;
            Ok((make(cfg.n_coarse, coarse, None), make(cfg.n_fine, fine, None)))
        }
        Pde::Wave => {
            let PdeParams::Wave(wp) = cfg.params else { unreachable!() };
            let start = crate::solvers::WaveState::from_initial(ic, &Field2D::zeros(cfg.n_fine), wp.c, wp.dt)?;
            let v0 = start.velocity();
            let mut fine = roll_out(&fine_stepper, vec![start.u, v0], cfg.frames, index, seed)?;
            let norm = min_max_normalize(&mut fine)?;
            let coarse = fine
                .iter()
                .map(|f| decimate_state(f, &spec))
                .collect::<Result<Vec<_>>>()?;
            Ok((make(cfg.n_coarse, coarse, Some(norm)), make(cfg.n_fine, fine, Some(norm))))
        }
    }
}

/// Samples an IC from `seed` and generates the coarse/fine pair.
pub fn generate_pair(cfg: &GenConfig, index: usize, seed: u64) -> Result<(Trajectory, Trajectory)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ic = sample_ic(cfg.pde(), cfg.n_fine, &mut rng)?;
    pair_from_ic(cfg, ic, index, seed)
}

/// Seed of trajectory `index`, independent of the dataset size.
pub fn trajectory_seed(base_seed: u64, index: usize) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(base_seed);
    rng.set_stream(index as u64);
    rng.random()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
}

/// 80/20 assignment, shuffled by `base_seed`; at least one validation
/// trajectory when there are two or more.
pub fn split_assignment(count: usize, base_seed: u64) -> Vec<Split> {
    let mut n_val = (count as f64 * 0.2).round() as usize;
    if count >= 2 {
        n_val = n_val.max(1);
    }
    let mut order: Vec<usize> = (0..count).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(base_seed ^ 0x9e37_79b9_7f4a_7c15));
    let mut split = vec![Split::Train; count];
    for &i in &order[..n_val] {
        split[i] = Split::Val;
    }
    split
}

#[derive(Clone, Debug, PartialEq)]
pub struct PairedDataset {
    pub config: GenConfig,
    pub base_seed: u64,
    pub coarse: Vec<Trajectory>,
    pub fine: Vec<Trajectory>,
    pub split: Vec<Split>,
}

impl PairedDataset {
    pub fn len(&self) -> usize {
        self.fine.len()
    }

    pub fn is_empty(&self) -> bool {
        self.fine.is_empty()
    }

    pub fn pde(&self) -> Pde {
        self.config.pde()
    }

    pub fn indices(&self, which: Split) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.split[i] == which).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.coarse.len() != self.fine.len() || self.split.len() != self.fine.len() {
            return Err(Error::Shape(format!(
                "dataset has {} coarse, {} fine, {} split entries",
                self.coarse.len(),
                self.fine.len(),
                self.split.len()
            )));
        }
        for (i, (c, f)) in self.coarse.iter().zip(&self.fine).enumerate() {
            c.validate()?;
            f.validate()?;
            if c.seed != f.seed || c.dt != f.dt || c.len() != f.len() || c.pde != f.pde {
                return Err(Error::Parameter(format!("pair {i} is misaligned")));
            }
            if c.n != self.config.n_coarse || f.n != self.config.n_fine || f.len() != self.config.frames {
                return Err(Error::Shape(format!("pair {i} does not match the dataset configuration")));
            }
        }
        Ok(())
    }
}

/// Generates `count` pairs on `workers` threads; the result does not depend
/// on the worker count.
pub fn generate_dataset(cfg: &GenConfig, count: usize, base_seed: u64, workers: usize) -> Result<PairedDataset> {
    cfg.validate()?;
    let job = |i: usize| generate_pair(cfg, i, trajectory_seed(base_seed, i));
    let pairs: Vec<(Trajectory, Trajectory)> = if workers > 1 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(workers)
            .build()
            .map_err(|e| Error::Parameter(format!("thread pool: {e}")))?;
        pool.install(|| (0..count).into_par_iter().map(job).collect::<Result<_>>())?
    } else {
        (0..count).map(job).collect::<Result<_>>()?
    };
    let (coarse, fine) = pairs.into_iter().unzip();
    Ok(PairedDataset {
        config: *cfg,
        base_seed,
        coarse,
        fine,
        split: split_assignment(count, base_seed),
    })
}

// ---------------------------------------------------------------------------
// Store
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlobEntry {
    pub file: String,
    pub bytes: u64,
    pub checksum: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryEntry {
    pub index: usize,
    pub seed: u64,
    pub split: Split,
    pub normalization: Option<Normalization>,
    pub coarse: BlobEntry,
    pub fine: BlobEntry,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format: String,
    pub version: u32,
    pub pde: Pde,
    pub config: GenConfig,
    pub dt: f64,
    pub t0: f64,
    pub base_seed: u64,
    pub trajectories: Vec<TrajectoryEntry>,
}

pub fn encode_blob(traj: &Trajectory) -> Vec<u8> {
    let c = traj.channels();
    let n = traj.n;
    let mut out = Vec::with_capacity(BLOB_HEADER_LEN + 8 * traj.len() * c * n * n);
    out.extend_from_slice(BLOB_MAGIC);
    out.extend_from_slice(&BLOB_VERSION.to_le_bytes());
    out.push(traj.pde.tag());
    out.extend_from_slice(&(n as u32).to_le_bytes());
    out.extend_from_slice(&(c as u32).to_le_bytes());
    out.extend_from_slice(&(traj.len() as u32).to_le_bytes());
    out.push(DTYPE_F64);
    for frame in &traj.frames {
        for f in frame {
            push_f64s(&mut out, f.data());
        }
    }
    out
}

/// Decoded blob contents.
#[derive(Clone, Debug, PartialEq)]
pub struct Blob {
    pub pde: Pde,
    pub n: usize,
    pub frames: Vec<Vec<Field2D>>,
}

fn u32_at(bytes: &[u8], at: usize) -> u32 {
    u32::from_le_bytes(bytes[at..at + 4].try_into().expect("4 bytes"))
}

/// Decodes a blob; structural errors are reported before the checksum is
/// compared.
pub fn decode_blob(path: &Path, bytes: &[u8], expected_checksum: Option<u64>) -> Result<Blob> {
    let format_err = |reason: String| Error::Format {
        path: path.to_path_buf(),
        reason,
    };
    if bytes.len() < BLOB_MAGIC.len() || &bytes[..4] != BLOB_MAGIC {
        return Err(format_err("bad magic number".into()));
    }
    if bytes.len() < BLOB_HEADER_LEN {
        return Err(Error::Truncated {
            path: path.to_path_buf(),
            offset: bytes.len() as u64,
            expected: BLOB_HEADER_LEN as u64,
            found: bytes.len() as u64,
        });
    }
    let version = u32_at(bytes, 4);
    if version != BLOB_VERSION {
        return Err(format_err(format!("unsupported blob version {version}")));
    }
    let pde = Pde::from_tag(bytes[8]).ok_or_else(|| format_err(format!("unknown pde tag {}", bytes[8])))?;
    let n = u32_at(bytes, 9) as usize;
    let c = u32_at(bytes, 13) as usize;
    let t = u32_at(bytes, 17) as usize;
    if bytes[21] != DTYPE_F64 {
        return Err(format_err(format!("unsupported dtype tag {}", bytes[21])));
    }
    if c != pde.channels() {
        return Err(format_err(format!("{pde} blob declares {c} channels")));
    }
    let expected = (BLOB_HEADER_LEN + 8 * t * c * n * n) as u64;
    if (bytes.len() as u64) < expected {
        return Err(Error::Truncated {
            path: path.to_path_buf(),
            offset: bytes.len() as u64,
            expected,
            found: bytes.len() as u64,
        });
    }
    if bytes.len() as u64 != expected {
        return Err(format_err(format!("{} trailing bytes", bytes.len() as u64 - expected)));
    }
    if let Some(expected) = expected_checksum {
        let actual = fnv1a(bytes);
        if actual != expected {
            return Err(Error::Checksum {
                path: path.to_path_buf(),
                expected,
                actual,
            });
        }
    }
    let plane = 8 * n * n;
    let mut frames = Vec::with_capacity(t);
    let mut chunks = bytes[BLOB_HEADER_LEN..].chunks_exact(plane);
    for _ in 0..t {
        let frame = (0..c)
            .map(|_| Field2D::new(n, read_f64s(chunks.next().expect("length checked"))))
            .collect::<Result<Vec<_>>>()?;
        frames.push(frame);
    }
    Ok(Blob { pde, n, frames })
}

fn blob_name(index: usize, level: &str) -> String {
    format!("traj_{index:05}_{level}.srft")
}

/// Writes one blob per trajectory and the manifest, which is written last.
pub fn store_dataset(ds: &PairedDataset, dir: &Path) -> Result<DatasetManifest> {
    ds.validate()?;
    let mut entries = Vec::with_capacity(ds.len());
    for i in 0..ds.len() {
        let write = |traj: &Trajectory, level: &str| -> Result<BlobEntry> {
            let file = blob_name(i, level);
            let bytes = encode_blob(traj);
            write_bytes(&dir.join(&file), &bytes)?;
            Ok(BlobEntry {
                file,
                bytes: bytes.len() as u64,
                checksum: checksum_hex(&bytes),
            })
        };
        let coarse = write(&ds.coarse[i], "coarse")?;
        let fine = write(&ds.fine[i], "fine")?;
        entries.push(TrajectoryEntry {
            index: i,
            seed: ds.fine[i].seed,
            split: ds.split[i],
            normalization: ds.fine[i].normalization,
            coarse,
            fine,
        });
    }
    let manifest = DatasetManifest {
        format: MANIFEST_FORMAT.into(),
        version: MANIFEST_VERSION,
        pde: ds.pde(),
        config: ds.config,
        dt: ds.config.params.dt(),
        t0: 0.0,
        base_seed: ds.base_seed,
        trajectories: entries,
    };
    write_json(&dir.join(MANIFEST_FILE), &manifest)?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> Result<DatasetManifest> {
    let path = dir.join(MANIFEST_FILE);
    let m: DatasetManifest = read_json(&path)?;
    if m.format != MANIFEST_FORMAT || m.version != MANIFEST_VERSION {
        return Err(Error::Format {
            path,
            reason: format!("expected {MANIFEST_FORMAT} v{MANIFEST_VERSION}, found {} v{}", m.format, m.version),
        });
    }
    Ok(m)
}

/// Loads and re-validates every trajectory listed in the manifest.
pub fn load_dataset(dir: &Path) -> Result<PairedDataset> {
    let manifest = read_manifest(dir)?;
    let cfg = manifest.config;
    let mut coarse = Vec::new();
    let mut fine = Vec::new();
    let mut split = Vec::new();
    for e in &manifest.trajectories {
        let load = |blob: &BlobEntry, n: usize| -> Result<Trajectory> {
            let path: PathBuf = dir.join(&blob.file);
            let checksum = parse_checksum(&path, &blob.checksum)?;
            let b = decode_blob(&path, &read_bytes(&path)?, Some(checksum))?;
            if b.pde != manifest.pde || b.n != n || b.frames.len() != cfg.frames {
                return Err(Error::Format {
                    path,
                    reason: format!(
                        "blob holds {} n={} T={}, manifest expects {} n={n} T={}",
                        b.pde,
                        b.n,
                        b.frames.len(),
                        manifest.pde,
                        cfg.frames
                    ),
                });
            }
            let traj = Trajectory {
                pde: b.pde,
                n: b.n,
                dt: manifest.dt,
                t0: manifest.t0,
                frames: b.frames,
                seed: e.seed,
                params: cfg.params,
                normalization: e.normalization,
            };
            traj.validate().map_err(|err| Error::Trajectory {
                trajectory: e.index,
                seed: e.seed,
                step: 0,
                source: Box::new(err),
            })?;
            Ok(traj)
        };
        coarse.push(load(&e.coarse, cfg.n_coarse)?);
        fine.push(load(&e.fine, cfg.n_fine)?);
        split.push(e.split);
    }
    let ds = PairedDataset {
        config: cfg,
        base_seed: manifest.base_seed,
        coarse,
        fine,
        split,
    };
    ds.validate()?;
    Ok(ds)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::Spectrum2D;
    use crate::solvers::{HeatParams, NSParams};

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn max_mode_outside(f: &Field2D, kc: i64) -> f64 {
        let s = forward_fft(f).unwrap();
        let n = f.n();
        let mut worst = 0f64;
        for j in 0..n {
            for i in 0..n {
                let kx = Spectrum2D::wavenumber(n, i);
                let ky = Spectrum2D::wavenumber(n, j);
                if kx.abs().max(ky.abs()) > kc {
                    worst = worst.max(s.coeffs()[j * n + i].norm());
                }
            }
        }
        worst
    }

    #[test]
    fn ns_ic_is_band_limited_and_deterministic() {
        let a = sample_ic_ns(64, &mut rng(3)).unwrap();
        assert!(max_mode_outside(&a, 16) <= 1e-12);
        assert!(a.max_abs() > 0.0);
        assert_eq!(a, sample_ic_ns(64, &mut rng(3)).unwrap());
        assert!(sample_ic_ns(32, &mut rng(3)).is_err());
    }

    #[test]
    fn ns_ic_ensemble_mean_within_clt_band() {
        let n = 64;
        let m = 200;
        let mut r = rng(11);
        let samples: Vec<Field2D> = (0..m).map(|_| sample_ic_ns(n, &mut r).unwrap()).collect();
        let var: f64 = samples.iter().map(|f| f.norm2().powi(2) / (n * n) as f64).sum::<f64>() / m as f64;
        let band = 3.0 * var.sqrt() / (m as f64).sqrt();
        let mut outside = 0;
        for p in 0..n * n {
            let mean = samples.iter().map(|f| f.data()[p]).sum::<f64>() / m as f64;
            if mean.abs() > band {
                outside += 1;
            }
        }
        // a 3σ band excludes ~0.27% of points
        assert!(outside as f64 <= 0.01 * (n * n) as f64, "{outside} points outside");
    }

    #[test]
    fn heat_ic_is_unit_uniform() {
        let f = sample_ic_heat(1000, &mut rng(5)).unwrap();
        assert!(f.min() >= 0.0 && f.max() < 1.0);
        assert!((f.mean() - 0.5).abs() < 0.002);
        assert_eq!(f, sample_ic_heat(1000, &mut rng(5)).unwrap());
    }

    #[test]
    fn wave_ic_has_low_modes_only() {
        let comps = sample_wave_components(&mut rng(2));
        assert_eq!(comps.len(), 8);
        assert!(comps.iter().all(|c| (0.5..=1.0).contains(&c.amplitude)
            && (1..=3).contains(&c.kx)
            && (1..=3).contains(&c.ky)
            && (0.0..2.0 * PI).contains(&c.phase)));
        let f = sample_ic_wave(32, &mut rng(2)).unwrap();
        assert!(max_mode_outside(&f, 3) <= 1e-10);
        assert_eq!(f, sample_ic_wave(32, &mut rng(2)).unwrap());
    }

    fn small(pde: Pde, frames: usize) -> GenConfig {
        let mut cfg = GenConfig::new(pde);
        cfg.frames = frames;
        if pde == Pde::Heat {
            cfg.n_coarse = 16;
            cfg.n_fine = 64;
        }
        cfg
    }

    #[test]
    fn heat_band_limited_pair_is_exact() {
        let cfg = small(Pde::Heat, 2);
        let ic = Field2D::from_fn(64, |x, y| 0.3 + (2.0 * PI * x).sin() * (4.0 * PI * y).cos() + 0.2 * (6.0 * PI * (x + y)).cos());
        let (c, f) = pair_from_ic(&cfg, ic, 0, 0).unwrap();
        let spec = cfg.transfer().unwrap();
        for t in 0..2 {
            let d = decimate(&f.frame(t)[0], &spec).unwrap();
            assert!(d.max_abs_diff(&c.frame(t)[0]) <= 1e-12);
        }
    }

    #[test]
    fn heat_random_pair_stays_close() {
        let (c, f) = generate_pair(&small(Pde::Heat, 4), 0, 9).unwrap();
        let spec = TransferSpec::new(16, 64, TransferMode::Decimate).unwrap();
        let d = decimate(&f.frame(3)[0], &spec).unwrap();
        assert!(d.max_abs_diff(&c.frame(3)[0]) < 0.5);
        assert_eq!(c.seed, f.seed);
        assert_eq!(c.len(), 4);
    }

    #[test]
    fn wave_pair_is_decimated_and_normalized() {
        let cfg = small(Pde::Wave, 21);
        let (c, f) = generate_pair(&cfg, 0, 4).unwrap();
        let spec = cfg.transfer().unwrap();
        for t in 0..21 {
            assert_eq!(decimate_state(f.frame(t), &spec).unwrap(), c.frame(t));
        }
        let lo = f.frames.iter().map(|fr| fr[0].min()).fold(f64::INFINITY, f64::min);
        let hi = f.frames.iter().map(|fr| fr[0].max()).fold(f64::NEG_INFINITY, f64::max);
        assert!(lo.abs() <= 1e-12 && (hi - 1.0).abs() <= 1e-12);
        assert!(f.normalization.is_some());
    }

    #[test]
    fn ns_coarse_drifts_from_decimated_fine() {
        let cfg = small(Pde::Ns, 51);
        let (c, f) = generate_pair(&cfg, 0, 21).unwrap();
        let spec = cfg.transfer().unwrap();
        let err: Vec<f64> = (0..51)
            .map(|t| {
                let d = decimate(&f.frame(t)[0], &spec).unwrap();
                d.lincomb(1.0, &c.frame(t)[0], -1.0).norm2() / d.norm2()
            })
            .collect();
        assert_eq!(err[0], 0.0);
        // least-squares slope of the error curve is positive
        let tm = 25.0;
        let em = err.iter().sum::<f64>() / 51.0;
        let slope: f64 = err.iter().enumerate().map(|(t, e)| (t as f64 - tm) * (e - em)).sum();
        assert!(slope > 0.0);
        assert!(err[50] > err[10] && err[10] > err[1]);
    }

    #[test]
    fn divergence_reports_trajectory_and_step() {
        let mut cfg = small(Pde::Ns, 200);
        cfg.params = PdeParams::Ns(NSParams {
            nu: 1e-3,
            dt: 50.0,
            forcing_amp: 1e4,
            dealias: false,
            substeps: 1,
        });
        match generate_pair(&cfg, 7, 1) {
            Err(Error::Trajectory { trajectory, seed, step, source }) => {
                assert_eq!((trajectory, seed), (7, 1));
                assert!(step >= 1);
                assert!(source.is_divergence(), "{source}");
            }
            Err(e) => {
                // a stability guard may reject this configuration up front
                assert!(matches!(e, Error::Stability(_) | Error::Parameter(_)), "{e}");
            }
            Ok(_) => panic!("expected divergence"),
        }
    }

    #[test]
    fn generation_is_deterministic_across_workers() {
        let cfg = small(Pde::Heat, 3);
        let a = generate_dataset(&cfg, 5, 42, 1).unwrap();
        let b = generate_dataset(&cfg, 5, 42, 3).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.indices(Split::Val).len(), 1);
        assert_eq!(a.indices(Split::Train).len(), 4);
        let c = generate_dataset(&cfg, 5, 43, 1).unwrap();
        assert_ne!(a.fine[0], c.fine[0]);
    }

    #[test]
    fn split_is_eighty_twenty() {
        let s = split_assignment(64, 1);
        let val = s.iter().filter(|&&x| x == Split::Val).count();
        assert_eq!(val, 13);
        assert_eq!(split_assignment(64, 1), s);
        assert!(split_assignment(1, 1).iter().all(|&x| x == Split::Train));
    }

    #[test]
    fn shifted_pairs_reuse_frames() {
        let (_, f) = generate_pair(&small(Pde::Heat, 5), 0, 3).unwrap();
        let pairs: Vec<_> = f.shifted_pairs().collect();
        assert_eq!(pairs.len(), 4);
        for (i, (a, b)) in pairs.iter().enumerate() {
            assert_eq!(*a, f.frame(i));
            assert_eq!(*b, f.frame(i + 1));
        }
    }

    #[test]
    fn store_round_trip_is_byte_identical() {
        let cfg = small(Pde::Wave, 3);
        let ds = generate_dataset(&cfg, 3, 8, 1).unwrap();
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        store_dataset(&ds, d1.path()).unwrap();
        let back = load_dataset(d1.path()).unwrap();
        assert_eq!(back, ds);
        store_dataset(&back, d2.path()).unwrap();
        for name in [MANIFEST_FILE.to_string(), blob_name(0, "fine"), blob_name(2, "coarse")] {
            assert_eq!(read_bytes(&d1.path().join(&name)).unwrap(), read_bytes(&d2.path().join(&name)).unwrap());
        }
    }

    #[test]
    fn store_detects_corruption() {
        let cfg = small(Pde::Heat, 2);
        let ds = generate_dataset(&cfg, 2, 8, 1).unwrap();
        let dir = tempfile::tempdir().unwrap();
        store_dataset(&ds, dir.path()).unwrap();
        let blob = dir.path().join(blob_name(1, "fine"));
        let good = read_bytes(&blob).unwrap();

        let mut bad = good.clone();
        bad[0] = b'X';
        write_bytes(&blob, &bad).unwrap();
        assert!(matches!(load_dataset(dir.path()), Err(Error::Format { .. })));

        write_bytes(&blob, &good[..good.len() - 100]).unwrap();
        match load_dataset(dir.path()) {
            Err(Error::Truncated { offset, expected, .. }) => {
                assert_eq!(offset as usize, good.len() - 100);
                assert_eq!(expected as usize, good.len());
            }
            other => panic!("expected truncation, got {other:?}"),
        }

        let mut flipped = good.clone();
        let k = flipped.len() / 2;
        flipped[k] ^= 1;
        write_bytes(&blob, &flipped).unwrap();
        assert!(matches!(load_dataset(dir.path()), Err(Error::Checksum { .. })));

        write_bytes(&blob, &good).unwrap();
        assert!(load_dataset(dir.path()).is_ok());
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let mut cfg = small(Pde::Heat, 1);
        assert!(cfg.validate().is_err());
        cfg.frames = 2;
        cfg.n_fine = 50;
        assert!(cfg.validate().is_err());
        let mut w = GenConfig::new(Pde::Wave);
        w.params = w.params.with_dt(0.05);
        assert!(matches!(w.validate(), Err(Error::Stability(_))));
        let h = GenConfig {
            params: PdeParams::Heat(HeatParams { nu: -1.0, ..Default::default() }),
            ..GenConfig::new(Pde::Heat)
        };
        assert!(h.validate().is_err());
    }
}
