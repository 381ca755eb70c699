use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde_json::json;
use srafte_core::artifact::{read_json, write_bytes, write_json};
use srafte_core::checkpoint::{load_checkpoint, save_checkpoint, CheckpointState};
use srafte_core::dataset::{encode_blob, generate_dataset, load_dataset, store_dataset, MANIFEST_FILE};
use srafte_core::eval::{
    accum_csv, evaluate_suite, forecast_dataset, forecast_rows, forecast_window, phase2_csv, read_csv,
    summary, summary_csv, write_suite, AccumRow, ForecastRun, Phase1Row, Phase2Row, Seeded, SuiteConfig, SuiteModels,
    SummaryRow, ACCUM_CSV, PHASE1_CSV, PHASE2_CSV,
};
use srafte_core::tensor::CosineSchedule;
use srafte_core::training::{init_sr, train_fno_ar, train_phase1, train_phase2};
use srafte_core::{
    Fno, GenConfig, ModelKind, PairedDataset, Pde, PdeParams, Phase, Propagator, TrainConfig, Trajectory,
    TransferMode,
};

use crate::args::{EvalArgs, ForecastArgs, GenDataArgs, HorizonArgs, ModelArg, OnOff, PhaseArg, ReportArgs, TrainArgs};
use crate::manifest::{prepare_out, Run};
use crate::ConfigError;

pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const TRAIN_REPORT_FILE: &str = "train_report.json";
pub const LOSS_CSV: &str = "loss.csv";
pub const FORECAST_CSV: &str = "forecast_metrics.csv";
pub const SUMMARY_CSV: &str = "summary.csv";
pub const SUMMARY_MD: &str = "summary.md";

/// Forecasts start from the stored frame at `t = 1`.
const FORECAST_START: f64 = 1.0;

fn config_error(msg: impl Into<String>) -> anyhow::Error {
    ConfigError(msg.into()).into()
}

pub fn gen_data(a: GenDataArgs) -> Result<()> {
    let run = Run::start("gen-data");
    let pde: Pde = a.pde.into();
    let mut cfg = GenConfig::new(pde);
    if let Some(n) = a.n_coarse {
        cfg.n_coarse = n;
    }
    if let Some(n) = a.n_fine {
        cfg.n_fine = n;
    }
    if let Some(dt) = a.dt {
        cfg.params = cfg.params.with_dt(dt);
    }
    match &mut cfg.params {
        PdeParams::Ns(p) => {
            if let Some(d) = a.dealias {
                p.dealias = d == OnOff::On;
            }
            if let Some(s) = a.substeps {
                p.substeps = s;
            }
        }
        _ if a.dealias.is_some() || a.substeps.is_some() => {
            return Err(config_error("--dealias and --substeps apply to --pde ns only"));
        }
        _ => {}
    }
    let dt = cfg.params.dt();
    if !(a.t_end > 0.0) || !a.t_end.is_finite() || !(dt > 0.0) {
        return Err(config_error(format!("--t-end and --dt must be positive, got {} and {dt}", a.t_end)));
    }
    if a.n_traj == 0 {
        return Err(config_error("--n-traj must be positive"));
    }
    cfg.frames = (a.t_end / dt).round() as usize + 2;
    cfg.validate()?;

    let out = prepare_out(a.out.out.as_deref(), &format!("datasets/{pde}-seed{}", a.seed), a.out.force, &[])?;
    let ds = generate_dataset(&cfg, a.n_traj, a.seed, a.workers)?;
    let manifest = store_dataset(&ds, &out)?;

    let mut outputs = vec![out.join(MANIFEST_FILE)];
    for t in &manifest.trajectories {
        outputs.push(out.join(&t.coarse.file));
        outputs.push(out.join(&t.fine.file));
    }
    let config = json!({ "gen": cfg, "n_traj": a.n_traj, "seed": a.seed, "t_end": a.t_end, "workers": a.workers });
    run.finish(&out, config, &[], &outputs)?;
    println!(
        "wrote {} {pde} trajectories ({}→{}, {} frames) to {}",
        ds.len(),
        cfg.n_coarse,
        cfg.n_fine,
        cfg.frames,
        out.display()
    );
    Ok(())
}

fn phase_of(p: PhaseArg) -> Phase {
    match p {
        PhaseArg::One => Phase::Phase1,
        PhaseArg::Two => Phase::Phase2,
        PhaseArg::Ar => Phase::Ar,
    }
}

fn expect_kind(path: &Path, model: &Fno, kind: ModelKind) -> Result<()> {
    if model.kind() != kind {
        return Err(config_error(format!(
            "checkpoint {} holds a {} model, expected {kind}",
            path.display(),
            model.kind()
        )));
    }
    Ok(())
}

pub fn train(a: TrainArgs) -> Result<()> {
    let run = Run::start("train");
    let phase = phase_of(a.phase);
    let mut cfg: TrainConfig = match &a.config {
        Some(p) => read_json(p)?,
        None => TrainConfig::default(),
    };
    if let Some(e) = a.epochs {
        match phase {
            Phase::Phase1 => cfg.epochs_p1 = e,
            Phase::Phase2 => cfg.epochs_p2 = e,
            Phase::Ar => cfg.epochs_ar = e,
        }
    }
    if let Some(lr) = a.lr {
        cfg.lr0 = lr;
    }
    if let Some(b) = a.batch {
        cfg.batch_size = b;
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    cfg.ablate_no_pretrain |= a.ablate_no_pretrain;
    cfg.validate()?;
    if phase != Phase::Phase2 && (a.init_from.is_some() || a.ablate_no_pretrain) {
        return Err(config_error("--init-from and --ablate-no-pretrain apply to --phase 2 only"));
    }
    if a.init_from.is_some() && cfg.ablate_no_pretrain {
        return Err(config_error("--init-from conflicts with --ablate-no-pretrain"));
    }

    let mut inputs: Vec<&Path> = vec![&a.dataset];
    inputs.extend(a.init_from.as_deref());
    inputs.extend(a.config.as_deref());
    let ds = load_dataset(&a.dataset)?;
    let init = match (&a.init_from, phase) {
        (Some(p), Phase::Phase2) => {
            let (m, _) = load_checkpoint(p)?;
            expect_kind(p, &m, ModelKind::FnoSr)?;
            Some(m)
        }
        (None, Phase::Phase2) if !cfg.ablate_no_pretrain => {
            return Err(config_error("--phase 2 needs --init-from <phase 1 checkpoint> or --ablate-no-pretrain"));
        }
        _ => None,
    };
    let out = prepare_out(
        a.out.out.as_deref(),
        &format!("runs/{}-{phase}-seed{}", ds.pde(), cfg.seed),
        a.out.force,
        &inputs,
    )?;

    let (model, report) = match phase {
        Phase::Phase1 => train_phase1(&ds, &cfg)?,
        Phase::Phase2 => {
            let start = match init {
                Some(m) => m,
                None => init_sr(&ds, &cfg)?,
            };
            train_phase2(&ds, &start, &cfg)?
        }
        Phase::Ar => train_fno_ar(&ds, &cfg)?,
    };

    let ckpt = out.join(CHECKPOINT_FILE);
    let state = CheckpointState {
        epoch: report.epochs,
        seed: cfg.seed,
        schedule: Some(CosineSchedule { lr0: cfg.lr0, lr_min: cfg.lr_min, t_max: cfg.epochs(phase) }),
        tag: phase.to_string(),
    };
    save_checkpoint(&ckpt, &model, &state)?;
    let report_path = out.join(TRAIN_REPORT_FILE);
    write_json(&report_path, &report)?;
    let loss_path = out.join(LOSS_CSV);
    write_bytes(&loss_path, report.loss_csv().as_bytes())?;

    let input_files: Vec<PathBuf> = std::iter::once(a.dataset.join(MANIFEST_FILE))
        .chain(a.init_from.clone())
        .chain(a.config.clone())
        .collect();
    let config = json!({ "phase": phase, "train": cfg, "dataset": a.dataset, "init_from": a.init_from });
    run.finish(&out, config, &input_files, &[ckpt, report_path, loss_path])?;
    match report.best_epoch {
        Some(e) => println!(
            "{phase}: {} epochs in {:.1} s, best validation loss {:.4e} at epoch {e} → {}",
            report.epochs,
            report.wall_time_s,
            report.best_val_loss,
            out.display()
        ),
        None => println!("{phase}: 0 epochs, initial validation loss {:.4e} → {}", report.initial_val_loss, out.display()),
    }
    Ok(())
}

/// Start frame and step count; the start must be a stored frame.
fn window(ds: &PairedDataset, h: &HorizonArgs) -> Result<(usize, usize)> {
    let dt = ds.config.params.dt();
    let (k, mut m) = forecast_window(ds.pde(), dt, FORECAST_START, h.t_end);
    if let Some(steps) = h.horizon {
        m = steps;
    }
    let stored = ds.fine.first().map(Trajectory::len).unwrap_or(0);
    if k >= stored {
        return Err(config_error(format!(
            "dataset stores {stored} frames; forecasts start at frame {k} (t = {FORECAST_START})"
        )));
    }
    Ok((k, m))
}

fn load_model(path: Option<&Path>, kind: ModelKind) -> Result<(Fno, CheckpointState)> {
    let path = path.ok_or_else(|| config_error(format!("--model {kind} needs --checkpoint")))?;
    let (m, state) = load_checkpoint(path)?;
    expect_kind(path, &m, kind)?;
    Ok((m, state))
}

pub fn forecast(a: ForecastArgs) -> Result<()> {
    let run = Run::start("forecast");
    let ds = load_dataset(&a.dataset)?;
    let (k, m) = window(&ds, &a.horizon)?;
    let (name, model, seed) = match a.model {
        ModelArg::FnoSr => {
            let (m, s) = load_model(a.checkpoint.as_deref(), ModelKind::FnoSr)?;
            ("surrogate", Some(m), s.seed)
        }
        ModelArg::FnoAr => {
            let (m, s) = load_model(a.checkpoint.as_deref(), ModelKind::FnoAr)?;
            ("fno-ar", Some(m), s.seed)
        }
        ModelArg::Bicubic => {
            if a.checkpoint.is_some() {
                return Err(config_error("--model bicubic takes no --checkpoint"));
            }
            ("bicubic-lift", None, 0)
        }
    };
    let prop = match (&model, a.model) {
        (Some(m), ModelArg::FnoSr) => Propagator::surrogate(m, &ds)?,
        (Some(m), _) => Propagator::autoregressive(m)?,
        (None, _) => Propagator::lifted_coarse(&ds, TransferMode::Bicubic)?,
    };
    let mut inputs: Vec<&Path> = vec![&a.dataset];
    inputs.extend(a.checkpoint.as_deref());
    let out = prepare_out(
        a.out.out.as_deref(),
        &format!("forecasts/{}-{name}-seed{seed}", ds.pde()),
        a.out.force,
        &inputs,
    )?;

    let done = forecast_dataset(&prop, name, &ds, k, m, a.workers, |i, r| {
        let src = &ds.fine[i];
        let traj = Trajectory {
            pde: src.pde,
            n: src.n,
            dt: src.dt,
            t0: src.time(k),
            frames: r.frames,
            seed: src.seed,
            params: src.params,
            normalization: src.normalization,
        };
        let path = out.join(format!("forecast_{i:05}.srft"));
        write_bytes(&path, &encode_blob(&traj))?;
        let run = ForecastRun { frames: Vec::new(), ..r };
        Ok((path, run))
    })?;
    let mut outputs = Vec::with_capacity(done.len() + 1);
    let mut rows: Vec<Phase2Row> = Vec::new();
    let mut final_err = Vec::with_capacity(done.len());
    let mut diverged = 0;
    for (i, (path, r)) in done.into_iter().enumerate() {
        outputs.push(path);
        rows.extend(forecast_rows(ds.pde(), seed, i, &r));
        final_err.extend(r.metrics.last().map(|f| f.rel_l2));
        diverged += usize::from(r.diverged_at.is_some());
    }
    let csv_path = out.join(FORECAST_CSV);
    write_bytes(&csv_path, &phase2_csv(&rows)?)?;
    outputs.push(csv_path);

    let mut input_files = vec![a.dataset.join(MANIFEST_FILE)];
    input_files.extend(a.checkpoint.clone());
    let config = json!({ "model": name, "start_index": k, "horizon": m, "workers": a.workers, "dataset": a.dataset });
    run.finish(&out, config, &input_files, &outputs)?;
    let n_traj = final_err.len();
    println!(
        "{name}: {} trajectories, {m} steps from frame {k}, mean final rel-L2 {:.4e}, {diverged} diverged → {}",
        n_traj,
        srafte_core::eval::mean(final_err.into_iter()),
        out.display()
    );
    Ok(())
}

pub fn eval(a: EvalArgs) -> Result<()> {
    let run = Run::start("eval");
    let ds = load_dataset(&a.dataset)?;
    let (k, m) = window(&ds, &a.horizon)?;
    let loaded: Vec<(Fno, CheckpointState)> =
        a.checkpoint.iter().map(|p| load_checkpoint(p).map_err(anyhow::Error::from)).collect::<Result<_>>()?;
    let mut models = SuiteModels { bicubic: true, ..Default::default() };
    for ((model, state), path) in loaded.iter().zip(&a.checkpoint) {
        let seeded = Seeded { seed: state.seed, model };
        match (model.kind(), state.tag.as_str()) {
            (ModelKind::FnoAr, _) => models.ar.push(seeded),
            (ModelKind::FnoSr, "phase1") => models.sr.push(seeded),
            (ModelKind::FnoSr, "phase2") => models.surrogate.push(seeded),
            (ModelKind::FnoSr, tag) => {
                return Err(config_error(format!(
                    "checkpoint {} has tag {tag:?}; lifts must come from phase 1 or phase 2 training",
                    path.display()
                )))
            }
        }
    }
    let mut inputs: Vec<&Path> = vec![&a.dataset];
    inputs.extend(a.checkpoint.iter().map(PathBuf::as_path));
    let out = prepare_out(a.out.out.as_deref(), &format!("eval/{}", ds.pde()), a.out.force, &inputs)?;

    let suite = SuiteConfig { start_index: k, horizon: m, workers: a.workers };
    let report = evaluate_suite(&ds, &models, &suite)?;
    let outputs = write_suite(&report, &out)?;

    let mut input_files = vec![a.dataset.join(MANIFEST_FILE)];
    input_files.extend(a.checkpoint.iter().cloned());
    let config = json!({ "start_index": k, "horizon": m, "workers": a.workers, "dataset": a.dataset, "checkpoints": a.checkpoint });
    run.finish(&out, config, &input_files, &outputs)?;
    for row in summary(ds.pde(), &report.phase1, &report.phase2) {
        println!("{:<7} {:<13} rel-L2 {:.4e} ± {:.2e}", row.table, row.model, row.rel_l2_mean, row.rel_l2_std);
    }
    Ok(())
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.3e}")).unwrap_or_else(|| "n/a".into())
}

fn markdown(rows: &[SummaryRow]) -> String {
    let mut s = String::new();
    for (table, title) in [("phase1", "Super-resolution"), ("phase2", "Forecast")] {
        let sel: Vec<&SummaryRow> = rows.iter().filter(|r| r.table == table).collect();
        if sel.is_empty() {
            continue;
        }
        s.push_str(&format!("## {title}\n\n"));
        s.push_str("| PDE | Model | n | rel. L2 | SSIM | SpecMSE | Pearson |\n");
        s.push_str("|---|---|---|---|---|---|---|\n");
        for r in sel {
            s.push_str(&format!(
                "| {} | {} | {} | {:.3e} ± {:.1e} | {:.4} ± {:.1e} | {:.3e} ± {:.1e} | {} ± {} |\n",
                r.pde,
                r.model,
                r.n,
                r.rel_l2_mean,
                r.rel_l2_std,
                r.ssim_mean,
                r.ssim_std,
                r.spec_mse_mean,
                r.spec_mse_std,
                fmt_opt(r.pearson_mean),
                fmt_opt(r.pearson_std),
            ));
        }
        s.push('\n');
    }
    s
}

pub fn report(a: ReportArgs) -> Result<()> {
    let run = Run::start("report");
    let mut phase1: Vec<Phase1Row> = Vec::new();
    let mut phase2: Vec<Phase2Row> = Vec::new();
    let mut accum: Vec<AccumRow> = Vec::new();
    let mut input_files = Vec::new();
    for dir in &a.input {
        if !dir.is_dir() {
            return Err(config_error(format!("input {} is not a directory", dir.display())));
        }
        let p1 = dir.join(PHASE1_CSV);
        let p2 = dir.join(PHASE2_CSV);
        let acc = dir.join(ACCUM_CSV);
        let fc = dir.join(FORECAST_CSV);
        let mut found = false;
        if p1.exists() {
            phase1.extend(read_csv::<Phase1Row>(&p1)?);
            input_files.push(p1);
            found = true;
        }
        for p in [p2, fc] {
            if p.exists() {
                phase2.extend(read_csv::<Phase2Row>(&p)?);
                input_files.push(p);
                found = true;
            }
        }
        if acc.exists() {
            accum.extend(read_csv::<AccumRow>(&acc)?);
            input_files.push(acc);
        }
        if !found {
            return Err(config_error(format!("no metric tables in {}", dir.display())));
        }
    }
    let inputs: Vec<&Path> = a.input.iter().map(PathBuf::as_path).collect();
    let out = prepare_out(a.out.out.as_deref(), "report", a.out.force, &inputs)?;

    let mut pdes: Vec<Pde> = phase1.iter().map(|r| r.pde).chain(phase2.iter().map(|r| r.pde)).collect();
    pdes.sort_by_key(|p| p.to_string());
    pdes.dedup();
    let mut rows = Vec::new();
    for pde in pdes {
        let p1: Vec<Phase1Row> = phase1.iter().filter(|r| r.pde == pde).cloned().collect();
        let p2: Vec<Phase2Row> = phase2.iter().filter(|r| r.pde == pde).cloned().collect();
        rows.extend(summary(pde, &p1, &p2));
    }
    // Forecast-only inputs carry no accumulation table; derive it per step.
    if accum.is_empty() && !phase2.is_empty() {
        accum = accumulate(&phase2);
    }

    let csv_path = out.join(SUMMARY_CSV);
    write_bytes(&csv_path, &summary_csv(&rows)?)?;
    let md_path = out.join(SUMMARY_MD);
    write_bytes(&md_path, markdown(&rows).as_bytes())?;
    let acc_path = out.join(ACCUM_CSV);
    write_bytes(&acc_path, &accum_csv(&accum)?)?;

    let config = json!({ "inputs": a.input });
    run.finish(&out, config, &input_files, &[csv_path, md_path, acc_path])
        .context("writing the run manifest")?;
    print!("{}", markdown(&rows));
    Ok(())
}

/// Mean rel-L2 per (pde, model, step) across trajectories and seeds.
fn accumulate(rows: &[Phase2Row]) -> Vec<AccumRow> {
    let mut keys: Vec<(Pde, String, usize)> = rows.iter().map(|r| (r.pde, r.model.clone(), r.step)).collect();
    keys.sort_by(|a, b| (a.0.to_string(), &a.1, a.2).cmp(&(b.0.to_string(), &b.1, b.2)));
    keys.dedup();
    keys.into_iter()
        .map(|(pde, model, step)| {
            let vals = rows.iter().filter(|r| r.pde == pde && r.model == model && r.step == step);
            let rel_l2 = srafte_core::eval::mean(vals.map(|r| r.rel_l2));
            AccumRow { pde, model, step, rel_l2 }
        })
        .collect()
}
