//! Radial reduction of the annulus problem: limit radius and, optionally,
//! the finite-`eps` profiles.

use std::path::Path;

use anyhow::Result;
use serde::Serialize;

use segregate_core::radial::{solve_radial_epsilon_from, solve_radial_limit, RadialProblem, RadialSolverOptions};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LimitSummary {
    pub radius: f64,
    pub outer_radius: f64,
    pub slope1: f64,
    pub slope2: f64,
    pub flux_mismatch: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpsilonSummary {
    pub epsilon: f64,
    pub n_r: usize,
    pub iterations: usize,
    pub residual: f64,
    pub threshold: f64,
    pub edge1: Option<f64>,
    pub edge2: Option<f64>,
    pub gap: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RadialSummary {
    pub a: f64,
    pub b: f64,
    pub f_a: f64,
    pub f_b: f64,
    pub limit: LimitSummary,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub epsilon: Option<EpsilonSummary>,
}

pub const EDGE_THRESHOLD: f64 = 1e-3;

pub fn radial(a: f64, b: f64, f_a: f64, f_b: f64, epsilon: Option<f64>, n_r: usize, csv: Option<&Path>) -> Result<RadialSummary> {
    let lim = solve_radial_limit(a, b, f_a, f_b)?;
    let limit = LimitSummary {
        radius: lim.radius,
        outer_radius: lim.radius + 1.0,
        slope1: lim.slope1(),
        slope2: lim.slope2(),
        flux_mismatch: lim.flux_mismatch(),
    };
    let epsilon = match epsilon {
        Some(eps) => {
            let opts = RadialSolverOptions { damping: 1.0, anderson_depth: 3, tol: 1e-9, ..Default::default() };
            // warm start through eps = 0.2, 0.1, ... above the target
            let mut schedule: Vec<f64> = std::iter::successors(Some(0.2), |e| Some(e / 2.0)).take_while(|&e| e > eps).collect();
            schedule.push(eps);
            let mut prof = None;
            for e in schedule {
                let rp = RadialProblem { a, b, f_a, f_b, epsilon: e, n_r };
                prof = Some(solve_radial_epsilon_from(&rp, &opts, prof.as_ref())?);
            }
            let prof = prof.expect("nonempty schedule");
            if let Some(p) = csv {
                prof.write_csv(p)?;
            }
            Some(EpsilonSummary {
                epsilon: eps,
                n_r,
                iterations: prof.iterations,
                residual: prof.residual,
                threshold: EDGE_THRESHOLD,
                edge1: prof.u1_support_edge(EDGE_THRESHOLD),
                edge2: prof.u2_support_edge(EDGE_THRESHOLD),
                gap: prof.gap(EDGE_THRESHOLD),
            })
        }
        None => None,
    };
    Ok(RadialSummary { a, b, f_a, f_b, limit, epsilon })
}
