//! Stage-by-stage execution with checkpoints in the artifact directory.
//!
//! Layout:
//!
//! ```text
//! out/config.json            resolved configuration
//! out/stage_00/u0.bin, .json field dumps
//! out/stage_00/interfaces_0.csv
//! out/stage_00/metrics.json
//! out/stage_00/stage.json    written last; marks the stage complete
//! out/obstacle/...           obstacle sweep, when configured
//! out/report.json, report.txt
//! ```

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use segregate_core::analysis::{detect_singular_points, extract_interface, support_threshold, InterfaceSet};
use segregate_core::dump::{read_field, write_field, DumpHeader};
use segregate_core::grid::{build_boundary_data, GridDomain};
use segregate_core::nonlocal::build_ball_stencil;
use segregate_core::obstacle::{check_obstacle_gradient, sweep_obstacle_gap};
use segregate_core::solver::{
    initial_state, majorants, solve_system_from, stage_metrics, transfer_state, PopulationState, StageMetrics, StageSetup,
};

use crate::analyze::{self, ObstacleSummary};
use crate::config::ExperimentConfig;
use crate::report::Report;

/// One solved stage with everything the analysis reads.
pub struct Stage {
    pub setup: StageSetup,
    pub state: PopulationState,
    pub metrics: StageMetrics,
    pub interfaces: Vec<Option<InterfaceSet>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct StageRecord {
    key: String,
    epsilon: f64,
    iterations: usize,
    residual: f64,
    converged: bool,
    history: Vec<f64>,
    k: usize,
}

pub fn stage_dir(out: &Path, idx: usize) -> PathBuf {
    out.join(format!("stage_{idx:02}"))
}

/// Identifies the inputs a stage depends on; a checkpoint is reused only
/// when its key matches.
fn stage_key(cfg: &ExperimentConfig, idx: usize) -> String {
    let schedule = &cfg.solver.eps_schedule[..=idx];
    serde_json::to_string(&(&cfg.domain, &cfg.norm, &cfg.interaction, &cfg.boundary, &cfg.solver, schedule)).expect("key serializes")
}

pub fn stage_setup(cfg: &ExperimentConfig, epsilon: f64) -> Result<StageSetup> {
    let spec = cfg.domain.spec(epsilon);
    let gd = GridDomain::build(&spec, &cfg.norm).with_context(|| format!("building the lattice for eps = {epsilon}"))?;
    let bd = build_boundary_data(&gd, &cfg.boundary).context("building boundary data")?;
    let stencil = build_ball_stencil(&cfg.norm, spec.h, cfg.interaction).context("building the ball stencil")?;
    Ok(StageSetup { gd, bd, stencil })
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)? + "\n";
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn save_stage(dir: &Path, setup: &StageSetup, state: &PopulationState, key: &str) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let _ = std::fs::remove_file(dir.join("stage.json"));
    for (i, u) in state.u.iter().enumerate() {
        let mut header = DumpHeader::for_grid(&setup.gd, &format!("u{i}"));
        header.epsilon = Some(state.epsilon);
        header.population = Some(i);
        header.iteration = Some(state.iterations);
        write_field(&dir.join(format!("u{i}.bin")), u, &header)?;
    }
    let record = StageRecord {
        key: key.to_string(),
        epsilon: state.epsilon,
        iterations: state.iterations,
        residual: state.residual,
        converged: state.converged,
        history: state.history.clone(),
        k: state.k(),
    };
    write_json(&dir.join("stage.json"), &record)
}

/// The checkpointed state of a stage, or `None` when absent or stale.
fn load_stage(dir: &Path, setup: &StageSetup, cfg: &ExperimentConfig, key: &str) -> Result<Option<PopulationState>> {
    let Ok(text) = std::fs::read_to_string(dir.join("stage.json")) else {
        return Ok(None);
    };
    let record: StageRecord = match serde_json::from_str(&text) {
        Ok(r) => r,
        Err(_) => return Ok(None),
    };
    if record.key != key || record.k != setup.bd.k() {
        return Ok(None);
    }
    let mut u = Vec::with_capacity(record.k);
    for i in 0..record.k {
        match read_field(&dir.join(format!("u{i}.bin"))) {
            Ok((f, h)) if h.nx == setup.gd.nx && h.ny == setup.gd.ny => u.push(f),
            _ => return Ok(None),
        }
    }
    let phi = majorants(&setup.gd, &setup.bd, &cfg.solver.lin)?;
    Ok(Some(PopulationState {
        epsilon: record.epsilon,
        u,
        phi,
        psi: None,
        residual: record.residual,
        iterations: record.iterations,
        converged: record.converged,
        history: record.history,
    }))
}

pub fn stage_interfaces(cfg: &ExperimentConfig, setup: &StageSetup, state: &PopulationState) -> Vec<Option<InterfaceSet>> {
    let mc = &cfg.analysis.metrics;
    state
        .u
        .iter()
        .enumerate()
        .map(|(i, u)| {
            let thr = support_threshold(u, &setup.gd, mc.delta_abs, mc.delta_rel);
            match extract_interface(u, &setup.gd, thr, i, &cfg.analysis.interfaces) {
                Ok(s) => Some(s),
                Err(e) => {
                    log::warn!("eps = {}: no interface for population {i}: {e}", state.epsilon);
                    None
                }
            }
        })
        .collect()
}

fn finish_stage(cfg: &ExperimentConfig, dir: &Path, setup: StageSetup, state: PopulationState) -> Result<Stage> {
    let metrics = stage_metrics(&setup, &state, &cfg.norm, &cfg.analysis.metrics)?;
    let interfaces = stage_interfaces(cfg, &setup, &state);
    write_json(&dir.join("metrics.json"), &metrics)?;
    for (i, s) in interfaces.iter().enumerate() {
        let path = dir.join(format!("interfaces_{i}.csv"));
        match s {
            Some(s) => s.write_csv(&path)?,
            None => std::fs::write(&path, "curve_id,x,y,nx,ny,kappa,u_nu\n")?,
        }
    }
    Ok(Stage { setup, state, metrics, interfaces })
}

/// Solves every stage of the schedule, reusing matching checkpoints.
pub fn solve_stages(cfg: &ExperimentConfig, out: &Path) -> Result<Vec<Stage>> {
    let mut stages: Vec<Stage> = Vec::new();
    for (idx, &eps) in cfg.epsilons().iter().enumerate() {
        let setup = stage_setup(cfg, eps)?;
        let dir = stage_dir(out, idx);
        let key = stage_key(cfg, idx);
        let state = match load_stage(&dir, &setup, cfg, &key)? {
            Some(state) => {
                log::info!("eps = {eps}: resumed from {}", dir.display());
                state
            }
            None => {
                let init = match stages.last() {
                    Some(prev) => transfer_state(&prev.state, &prev.setup.gd, &setup, &cfg.solver, eps)?,
                    None => initial_state(&setup.gd, &setup.bd, &cfg.solver, eps)?,
                };
                let state = solve_system_from(&setup.gd, &setup.bd, &setup.stencil, &cfg.solver, init)
                    .with_context(|| format!("solving the stage eps = {eps}"))?;
                log::info!("eps = {eps}: {} iterations, residual {:.2e}", state.iterations, state.residual);
                save_stage(&dir, &setup, &state, &key)?;
                state
            }
        };
        stages.push(finish_stage(cfg, &dir, setup, state)?);
    }
    Ok(stages)
}

/// Reads the completed stages of an artifact directory; fails on a missing
/// or stale stage.
pub fn load_stages(cfg: &ExperimentConfig, out: &Path) -> Result<Vec<Stage>> {
    let mut stages = Vec::new();
    for (idx, &eps) in cfg.epsilons().iter().enumerate() {
        let setup = stage_setup(cfg, eps)?;
        let dir = stage_dir(out, idx);
        let Some(state) = load_stage(&dir, &setup, cfg, &stage_key(cfg, idx))? else {
            bail!("{}: stage eps = {eps} is missing or was produced by a different configuration", dir.display());
        };
        stages.push(finish_stage(cfg, &dir, setup, state)?);
    }
    Ok(stages)
}

fn obstacle_key(cfg: &ExperimentConfig) -> String {
    serde_json::to_string(&(&cfg.domain, &cfg.norm, &cfg.interaction, &cfg.boundary, &cfg.solver, &cfg.analysis.obstacle))
        .expect("key serializes")
}

/// Sweeps the obstacle gap and records the outcome in `out/obstacle`.
pub fn run_obstacle(cfg: &ExperimentConfig, out: &Path) -> Result<Option<ObstacleSummary>> {
    let Some(oc) = &cfg.analysis.obstacle else {
        return Ok(None);
    };
    let dir = out.join("obstacle");
    let key = obstacle_key(cfg);
    if let Ok(text) = std::fs::read_to_string(dir.join("summary.json")) {
        if let Ok(s) = serde_json::from_str::<ObstacleSummary>(&text) {
            if s.key == key {
                log::info!("obstacle sweep resumed from {}", dir.display());
                return Ok(Some(s));
            }
        }
    }
    std::fs::create_dir_all(&dir)?;
    let _ = std::fs::remove_file(dir.join("summary.json"));
    let eps = oc.epsilon.unwrap_or(*cfg.epsilons().last().expect("nonempty schedule"));
    let setup = stage_setup(cfg, eps)?;
    let gd = &setup.gd;
    let sweep = sweep_obstacle_gap(gd, &setup.bd, &setup.stencil, &cfg.solver, &cfg.norm, eps, oc.lambda, &oc.gaps)
        .context("obstacle gap sweep")?;
    let mut summary = ObstacleSummary {
        key,
        epsilon: eps,
        h: gd.h,
        lambda: oc.lambda,
        attempts: sweep.attempts.clone(),
        accepted: None,
        margin: None,
        cone_angles_deg: Vec::new(),
        corner_angles_deg: Vec::new(),
        min_slope: Vec::new(),
    };
    if let Some((spec, state)) = &sweep.accepted {
        summary.accepted = Some(spec.a);
        summary.margin = sweep.attempts.last().map(|a| a.margin);
        summary.corner_angles_deg = spec.corner_angles.iter().map(|v| v.iter().map(|a| a.to_degrees()).collect()).collect();
        summary.min_slope = check_obstacle_gradient(spec, gd)?.iter().map(|s| s.min_slope).collect();
        for i in 0..spec.k() {
            let mut header = DumpHeader::for_grid(gd, &format!("psi{i}"));
            header.epsilon = Some(eps);
            header.population = Some(i);
            write_field(&dir.join(format!("psi{i}.bin")), &spec.psi[i], &header)?;
            header.name = format!("mask{i}");
            let mask = spec.masks[i].mapv(|b| if b { 1.0 } else { 0.0 });
            write_field(&dir.join(format!("mask{i}.bin")), &mask, &header)?;
            header.name = format!("u{i}");
            header.iteration = Some(state.iterations);
            write_field(&dir.join(format!("u{i}.bin")), &state.u[i], &header)?;
        }
        let ifs = stage_interfaces(cfg, &setup, state);
        for i in 0..ifs.len() {
            for j in 0..ifs.len() {
                if let (true, Some(a), Some(b)) = (i != j, &ifs[i], &ifs[j]) {
                    for p in detect_singular_points(a, b, &cfg.norm, gd.h, &cfg.analysis.singular) {
                        summary.cone_angles_deg.push(p.theta.to_degrees());
                    }
                }
            }
        }
    }
    write_json(&dir.join("summary.json"), &summary)?;
    Ok(Some(summary))
}

fn write_report(report: &Report, out: &Path) -> Result<()> {
    std::fs::write(out.join("report.json"), report.to_json())?;
    std::fs::write(out.join("report.txt"), report.to_text())?;
    Ok(())
}

/// Full run: stages, obstacle sweep, analysis, report.
pub fn run(cfg: &ExperimentConfig, out: &Path, strict: bool) -> Result<Report> {
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    write_json(&out.join("config.json"), cfg)?;
    let stages = solve_stages(cfg, out)?;
    let obstacle = run_obstacle(cfg, out)?;
    let report = analyze::evaluate(cfg, &stages, obstacle.as_ref(), strict)?;
    write_report(&report, out)?;
    Ok(report)
}

/// Re-analyses a finished artifact directory without solving.
pub fn analyze_dir(dir: &Path, out: &Path, strict: bool) -> Result<Report> {
    let path = dir.join("config.json");
    let text = std::fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
    let cfg: ExperimentConfig = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    let stages = load_stages(&cfg, dir)?;
    let obstacle = if cfg.analysis.obstacle.is_some() {
        let p = dir.join("obstacle").join("summary.json");
        let text = std::fs::read_to_string(&p).with_context(|| format!("reading {}", p.display()))?;
        Some(serde_json::from_str(&text)?)
    } else {
        None
    };
    let report = analyze::evaluate(&cfg, &stages, obstacle.as_ref(), strict)?;
    std::fs::create_dir_all(out)?;
    write_report(&report, out)?;
    Ok(report)
}
