//! Turns solved stages into the checks of the report.

use anyhow::Result;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use segregate_core::analysis::{
    check_ball_regularization, check_fb_condition, check_gradient_bound, check_mass_balance, detect_singular_points,
    extract_support, fit_decay, transported_patches, DecaySample, InterfaceSet,
};
use segregate_core::grid::{validate_boundary_data, Mask};
use segregate_core::norm::{rho_distance_field, DistanceMode};
use segregate_core::obstacle::GapAttempt;

use crate::config::{DecayConfig, ExperimentConfig};
use crate::report::{Basis, Check, Comparison, Report, StageSummary};
use crate::run::Stage;

/// Outcome of the obstacle gap sweep, stored as `obstacle/summary.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObstacleSummary {
    pub key: String,
    pub epsilon: f64,
    pub h: f64,
    pub lambda: f64,
    pub attempts: Vec<GapAttempt>,
    pub accepted: Option<f64>,
    pub margin: Option<f64>,
    pub cone_angles_deg: Vec<f64>,
    pub corner_angles_deg: Vec<Vec<f64>>,
    pub min_slope: Vec<f64>,
}

fn summary(s: &Stage) -> StageSummary {
    let m = &s.metrics;
    StageSummary {
        epsilon: m.epsilon,
        h: m.h,
        iterations: m.iterations,
        residual: m.residual,
        converged: m.converged,
        under_resolved: m.under_resolved,
        separation: m.separation,
        overlap_mass: m.overlap_mass,
        mass: m.mass.clone(),
        interface_length: s.interfaces.iter().map(|i| i.as_ref().map_or(0.0, |i| i.total_length())).collect(),
    }
}

/// A probe inside the support of another population, at depth 0.2 to 0.4
/// from its edge, where population `p` stays positive on every stage.
fn random_probe(cfg: &ExperimentConfig, stages: &[Stage], p: usize) -> Result<Option<[f64; 2]>> {
    let last = stages.last().expect("nonempty");
    let gd = &last.setup.gd;
    let mc = &cfg.analysis.metrics;
    let mut others = Mask::from_elem(gd.shape(), false);
    for (j, u) in last.state.u.iter().enumerate() {
        if j != p {
            let s = extract_support(u, gd, mc.delta_abs, mc.delta_rel);
            others.zip_mut_with(&s, |a, &b| *a |= b);
        }
    }
    let outside = Mask::from_shape_fn(gd.shape(), |ij| gd.omega[ij] && !others[ij]);
    if !outside.iter().any(|&b| b) || !others.iter().any(|&b| b) {
        return Ok(None);
    }
    let depth = rho_distance_field(&outside, &cfg.norm, gd, DistanceMode::Sweep)?;
    let mut candidates = Vec::new();
    for ((iy, ix), &d) in depth.indexed_iter() {
        if !others[[iy, ix]] || !(0.2..=0.4).contains(&d) || last.setup.bd.f[p][[iy, ix]] > 0.0 {
            continue;
        }
        let [x, y] = gd.center(ix, iy);
        let positive = stages.iter().all(|s| {
            s.setup.gd.cell_of_folded(x, y).is_some_and(|(jx, jy)| s.setup.gd.omega[[jy, jx]] && s.setup.bd.f[p][[jy, jx]] == 0.0)
                && s.setup.gd.interpolate(&s.state.u[p], x, y) > 0.0
        });
        if positive {
            candidates.push([x, y]);
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
    Ok(candidates.choose(&mut rng).copied())
}

fn decay_checks(cfg: &ExperimentConfig, stages: &[Stage], dc: &DecayConfig) -> Result<Vec<Check>> {
    if dc.population >= stages[0].state.k() {
        return Ok(vec![Check::failed("decay_slope", Basis::Theory, format!("no population {}", dc.population))]);
    }
    let probe = match dc.probe {
        Some(p) => p,
        None => match random_probe(cfg, stages, dc.population)? {
            Some(p) => p,
            None => return Ok(vec![Check::failed("decay_slope", Basis::Theory, "no admissible probe point")]),
        },
    };
    let samples: Vec<DecaySample<'_>> = stages
        .iter()
        .map(|s| DecaySample {
            epsilon: s.state.epsilon,
            gd: &s.setup.gd,
            u: &s.state.u[dc.population],
            f: &s.setup.bd.f[dc.population],
        })
        .collect();
    let note = format!("u{} at ({:.4}, {:.4})", dc.population, probe[0], probe[1]);
    Ok(match fit_decay(&samples, probe) {
        Ok(d) => vec![
            Check::new("decay_slope", d.slope, 0.0, 0.0, Comparison::Below, Basis::Theory).with_note(note.clone()),
            Check::new("decay_r2", d.r2, dc.min_r2, 0.0, Comparison::AtLeast, Basis::Derived).with_note(note),
        ],
        Err(e) => vec![Check::failed("decay_slope", Basis::Theory, format!("{note}: {e}"))],
    })
}

fn obstacle_checks(cfg: &ExperimentConfig, o: &ObstacleSummary) -> Vec<Check> {
    let min_angle = cfg.analysis.obstacle.as_ref().map_or(20.0, |c| c.min_cone_angle_deg);
    let tried: Vec<String> = o.attempts.iter().map(|a| format!("a={} margin {:.2e}", a.a, a.margin)).collect();
    let Some(a) = o.accepted else {
        return vec![Check::failed("obstacle_margin", Basis::Theory, format!("no gap passed: {}", tried.join(", ")))];
    };
    let mut out = vec![
        Check::new("obstacle_margin", o.margin.unwrap_or(f64::NAN), 0.0, 0.0, Comparison::Above, Basis::Theory)
            .with_note(format!("a={a}; {}", tried.join(", "))),
    ];
    let angle = o.cone_angles_deg.iter().copied().fold(180.0, f64::min);
    out.push(
        Check::new("obstacle_cone_angle_deg", angle, min_angle, 0.0, Comparison::AtLeast, Basis::Theory)
            .with_note(format!("{} singular points", o.cone_angles_deg.len())),
    );
    let slope = o.min_slope.iter().copied().fold(f64::INFINITY, f64::min);
    out.push(Check::new("obstacle_min_slope", slope, 0.0, 0.0, Comparison::Above, Basis::Derived).informational());
    out
}

fn pair(ifs: &[Option<InterfaceSet>]) -> Option<(&InterfaceSet, &InterfaceSet)> {
    match ifs {
        [Some(a), Some(b), ..] => Some((a, b)),
        _ => None,
    }
}

pub fn evaluate(cfg: &ExperimentConfig, stages: &[Stage], obstacle: Option<&ObstacleSummary>, strict: bool) -> Result<Report> {
    let a = &cfg.analysis;
    let mut checks = Vec::new();
    let mut warnings = Vec::new();
    let Some(last) = stages.last() else {
        return Ok(Report::new(&cfg.name, strict, vec![], vec![], warnings));
    };
    let first = &stages[0];
    let gd = &last.setup.gd;
    let k = last.state.k();

    match validate_boundary_data(&first.setup.bd, &first.setup.gd, &cfg.norm, &a.density) {
        Ok(v) => {
            let failed: Vec<&str> = v.checks.iter().filter(|c| !c.pass).map(|c| c.name.as_str()).collect();
            let mut c = Check::new("boundary_data", failed.len() as f64, 0.0, 0.0, Comparison::AtMost, Basis::Derived);
            if !failed.is_empty() {
                c = c.with_note(failed.join(", "));
            }
            checks.push(c);
        }
        Err(e) => checks.push(Check::failed("boundary_data", Basis::Derived, e.to_string())),
    }
    for s in stages {
        let eps = s.state.epsilon;
        checks.push(Check::new(format!("converged eps={eps}"), s.state.residual, cfg.solver.fp_tol, 0.0, Comparison::AtMost, Basis::Derived));
        if s.metrics.under_resolved {
            warnings.push(format!("eps = {eps}: h = {} exceeds eps/8, interface layer under-resolved", s.metrics.h));
        }
    }
    let sandwich = stages.iter().map(|s| s.state.sandwich_violation()).fold(0.0, f64::max);
    checks.push(Check::new("sandwich", sandwich, 0.0, 1e-12, Comparison::AtMost, Basis::Derived));

    if a.separation && k >= 2 {
        checks.push(match last.metrics.separation {
            Some(d) => Check::band("separation", d, 1.0, 2.0 * gd.h + a.separation_slack, a.separation_slack, Basis::Theory),
            None => Check::failed("separation", Basis::Theory, "a support is empty"),
        });
    }

    let ifs = &last.interfaces;
    if a.fb_condition && k >= 2 {
        let mut fb = match pair(ifs) {
            Some((i1, i2)) => match check_fb_condition(i1, i2, &cfg.norm, gd.h, a.fb_tolerance) {
                Ok(r) => vec![
                    Check::new("fb_condition", r.measured, r.predicted, a.fb_tolerance, Comparison::WithinRelative, Basis::Theory)
                        .with_note(format!("{} pairs", r.pairs.len())),
                    Check::new("fb_pairing", r.paired_fraction, 0.5, 0.0, Comparison::AtLeast, Basis::Derived),
                ],
                Err(e) => vec![Check::failed("fb_condition", Basis::Theory, e.to_string())],
            },
            None => vec![Check::failed("fb_condition", Basis::Theory, "interface missing")],
        };
        if (cfg.interaction.p() - 1.0).abs() > 1e-12 {
            warnings.push("analysis assumes p=1".to_string());
            fb = fb.into_iter().map(Check::informational).collect();
        }
        checks.extend(fb);
    }

    if a.mass_balance && k >= 2 {
        checks.push(match ifs.first() {
            Some(Some(i1)) => match transported_patches(i1, gd, a.mass_half_width, |_| true)
                .and_then(|(d, e)| check_mass_balance(&last.state.u[0], &last.state.u[1], &d, &e, gd, a.mass_tolerance))
            {
                Ok(m) => Check::new("mass_balance", m.relative_difference, 0.0, a.mass_tolerance, Comparison::AtMost, Basis::Derived)
                    .with_note(format!("masses {:.6} and {:.6}", m.mass1, m.mass2)),
                Err(e) => Check::failed("mass_balance", Basis::Derived, e.to_string()),
            },
            _ => Check::failed("mass_balance", Basis::Derived, "interface missing"),
        });
    }

    if let Some(dc) = &a.decay {
        checks.extend(decay_checks(cfg, stages, dc)?);
    }

    if a.gradient_bound && stages.len() >= 2 {
        let profiles: Vec<Vec<(f64, f64)>> = stages.iter().map(|s| s.metrics.gradient_profile.clone()).collect();
        let g = check_gradient_bound(&profiles, a.gradient_headroom)?;
        checks.push(
            Check::new("gradient_bound", g.held_out, g.c0, a.gradient_headroom * g.c0, Comparison::AtMost, Basis::Theory)
                .with_note("C0 fitted on all but the last stage"),
        );
    }

    if a.ball_regularization {
        let mut worst = 0usize;
        let mut checked = 0;
        for s in stages.iter().filter(|s| s.state.converged) {
            for u in &s.state.u {
                let mask = extract_support(u, &s.setup.gd, a.metrics.delta_abs, a.metrics.delta_rel);
                if !mask.iter().any(|&b| b) {
                    continue;
                }
                let r = check_ball_regularization(&mask, &cfg.norm, &s.setup.gd, 2.0, DistanceMode::Sweep)?;
                worst = worst.max(r.outside_collar);
                checked += 1;
            }
        }
        checks.push(if checked > 0 {
            Check::new("ball_regularization", worst as f64, 0.0, 0.0, Comparison::AtMost, Basis::Theory)
                .with_note(format!("{checked} supports, cells outside the 2-cell collar"))
        } else {
            Check::failed("ball_regularization", Basis::Theory, "no converged support")
        });
    }

    if a.singular_points && k >= 2 {
        let mut angles = Vec::new();
        for i in 0..k {
            for j in (0..k).filter(|&j| j != i) {
                if let (Some(x), Some(y)) = (&ifs[i], &ifs[j]) {
                    angles.extend(detect_singular_points(x, y, &cfg.norm, gd.h, &a.singular).iter().map(|p| p.theta.to_degrees()));
                }
            }
        }
        let min_angle = a.obstacle.as_ref().map_or(20.0, |o| o.min_cone_angle_deg);
        let m = angles.iter().copied().fold(180.0, f64::min);
        checks.push(
            Check::new("cone_angle_deg", m, min_angle, 0.0, Comparison::AtLeast, Basis::Theory)
                .with_note(format!("{} singular points", angles.len()))
                .informational(),
        );
    }

    if let Some(o) = obstacle {
        checks.extend(obstacle_checks(cfg, o));
    }

    let summaries = stages.iter().map(summary).collect();
    Ok(Report::new(&cfg.name, strict, summaries, checks, warnings))
}
