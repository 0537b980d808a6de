//! Experiment configuration: TOML, versioned, unknown keys rejected.

use std::path::{Path, PathBuf};

use schemars::JsonSchema;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use segregate_core::analysis::{InterfaceOptions, SingularOptions};
use segregate_core::grid::{BoundaryPreset, DensityCondition, DomainShape, DomainSpec};
use segregate_core::nonlocal::HForm;
use segregate_core::norm::Norm;
use segregate_core::solver::{MetricsConfig, SolverConfig};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error, Clone, PartialEq)]
#[error("{path}:{line}:{column}: {message}")]
pub struct ConfigError {
    pub path: String,
    pub line: usize,
    pub column: usize,
    /// Dotted key the error refers to, when known.
    pub key: Option<String>,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    #[serde(default)]
    pub name: String,
    pub domain: DomainConfig,
    #[serde(default)]
    pub norm: Norm,
    #[serde(default)]
    pub interaction: HForm,
    pub boundary: BoundaryPreset,
    #[serde(default)]
    pub solver: SolverConfig,
    #[serde(default)]
    pub analysis: AnalysisConfig,
    /// Artifact directory; `--output` overrides it.
    #[serde(default)]
    pub output: Option<PathBuf>,
    /// Seeds the placement of random probes, nothing else.
    #[serde(default)]
    pub rng_seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct DomainConfig {
    pub shape: DomainShape,
    #[serde(default)]
    pub symmetric: bool,
    pub resolution: Resolution,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Resolution {
    /// `h = eps / cells`.
    PerEpsilon { cells: f64 },
    Fixed { h: f64 },
}

impl DomainConfig {
    pub fn spacing(&self, epsilon: f64) -> f64 {
        match self.resolution {
            Resolution::PerEpsilon { cells } => epsilon / cells,
            Resolution::Fixed { h } => h,
        }
    }

    pub fn spec(&self, epsilon: f64) -> DomainSpec {
        DomainSpec { shape: self.shape, h: self.spacing(epsilon), symmetric: self.symmetric }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields, default)]
pub struct AnalysisConfig {
    pub metrics: MetricsConfig,
    pub interfaces: InterfaceOptions,
    pub singular: SingularOptions,
    pub density: DensityCondition,
    pub separation: bool,
    /// Slack added to `2h` around the unit separation.
    pub separation_slack: f64,
    pub fb_condition: bool,
    pub fb_tolerance: f64,
    pub mass_balance: bool,
    pub mass_half_width: f64,
    pub mass_tolerance: f64,
    pub decay: Option<DecayConfig>,
    pub gradient_bound: bool,
    pub gradient_headroom: f64,
    pub ball_regularization: bool,
    pub singular_points: bool,
    pub obstacle: Option<ObstacleConfig>,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        AnalysisConfig {
            metrics: MetricsConfig::default(),
            interfaces: InterfaceOptions::default(),
            singular: SingularOptions::default(),
            density: DensityCondition::default(),
            separation: true,
            separation_slack: 0.05,
            fb_condition: true,
            fb_tolerance: 0.1,
            mass_balance: true,
            mass_half_width: 1.0,
            mass_tolerance: 0.05,
            decay: None,
            gradient_bound: true,
            gradient_headroom: 0.1,
            ball_regularization: true,
            singular_points: true,
            obstacle: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct DecayConfig {
    pub population: usize,
    /// Probe point; drawn from `rng_seed` when absent.
    #[serde(default)]
    pub probe: Option<[f64; 2]>,
    #[serde(default = "default_min_r2")]
    pub min_r2: f64,
}

fn default_min_r2() -> f64 {
    0.99
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct ObstacleConfig {
    pub lambda: f64,
    /// Gaps `a = lambda - mu`, tried from the largest down.
    pub gaps: Vec<f64>,
    /// Defaults to the last epsilon of the schedule.
    #[serde(default)]
    pub epsilon: Option<f64>,
    #[serde(default = "default_min_angle")]
    pub min_cone_angle_deg: f64,
}

fn default_min_angle() -> f64 {
    20.0
}

/// Line and column (1-based) of a byte offset.
fn line_col(text: &str, offset: usize) -> (usize, usize) {
    let before = &text[..offset.min(text.len())];
    let line = before.matches('\n').count() + 1;
    let column = before.rfind('\n').map_or(before.len(), |p| before.len() - p - 1) + 1;
    (line, column)
}

/// Line of the first assignment to the last segment of a dotted key, inside
/// the table named by the preceding segments when there is one.
fn locate(text: &str, key: &str) -> (usize, usize) {
    let mut parts: Vec<&str> = key.split('.').collect();
    let leaf = parts.pop().unwrap_or(key);
    let table = parts.join(".");
    let mut current = String::new();
    let mut fallback = None;
    for (n, raw) in text.lines().enumerate() {
        let line = raw.trim_start();
        if line.starts_with('[') {
            current = line.trim_matches(|c| c == '[' || c == ']').trim().to_string();
            if current == key {
                return (n + 1, 1);
            }
            continue;
        }
        let is_key = line.starts_with(leaf) && line[leaf.len()..].trim_start().starts_with('=');
        let inline = line.contains(&format!("{leaf} =")) || line.contains(&format!("{leaf}="));
        if is_key || inline {
            let col = raw.find(leaf).unwrap_or(0) + 1;
            if table.is_empty() || current == table || current.starts_with(&format!("{table}.")) {
                return (n + 1, col);
            }
            fallback.get_or_insert((n + 1, col));
        }
    }
    fallback.unwrap_or((1, 1))
}

fn unknown_field(message: &str) -> Option<String> {
    let rest = message.strip_prefix("unknown field `")?;
    Some(rest[..rest.find('`')?].to_string())
}

/// First assignment to `key` at or after byte `start`.
fn find_key_after(text: &str, start: usize, key: &str) -> Option<(usize, usize)> {
    let from = text[..start.min(text.len())].rfind('\n').map_or(0, |p| p + 1);
    let mut offset = from;
    for raw in text[from..].split_inclusive('\n') {
        let line = raw.trim_start();
        if line.starts_with(key) && line[key.len()..].trim_start().starts_with('=') {
            return Some(line_col(text, offset + raw.len() - line.len()));
        }
        if let Some(p) = raw.find(&format!("{key} =")).or_else(|| raw.find(&format!("{key}="))) {
            return Some(line_col(text, offset + p));
        }
        offset += raw.len();
    }
    None
}

impl ExperimentConfig {
    pub fn from_str(text: &str, path: &str) -> Result<ExperimentConfig, ConfigError> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| {
            let start = e.span().map_or(0, |s| s.start);
            let (mut line, mut column) = line_col(text, start);
            let key = unknown_field(e.message());
            // tagged tables report the span of the whole table
            if let Some(k) = &key {
                if let Some((l, c)) = find_key_after(text, start, k) {
                    (line, column) = (l, c);
                }
            }
            ConfigError { path: path.to_string(), line, column, key, message: e.message().to_string() }
        })?;
        cfg.validate().map_err(|(key, message)| {
            let (line, column) = locate(text, &key);
            ConfigError { path: path.to_string(), line, column, key: Some(key), message }
        })?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<ExperimentConfig, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError {
            path: path.display().to_string(),
            line: 0,
            column: 0,
            key: None,
            message: e.to_string(),
        })?;
        Self::from_str(&text, &path.display().to_string())
    }

    /// Semantic checks the schema cannot express, as `(dotted key, message)`.
    pub fn validate(&self) -> Result<(), (String, String)> {
        let err = |k: &str, m: String| Err((k.to_string(), m));
        if self.schema_version != SCHEMA_VERSION {
            return err("schema_version", format!("unsupported schema_version {}, expected {SCHEMA_VERSION}", self.schema_version));
        }
        match self.domain.resolution {
            Resolution::PerEpsilon { cells } if !(cells > 0.0) => return err("domain.resolution", "cells must be positive".into()),
            Resolution::Fixed { h } if !(h > 0.0) => return err("domain.resolution", "h must be positive".into()),
            _ => {}
        }
        if let Err(e) = self.norm.validate() {
            return err("norm", e.to_string());
        }
        if let Err(e) = self.solver.validate() {
            let msg = e.to_string();
            let field = [("damping", "damping"), ("fp_tol", "fp_tol"), ("lin tol", "lin"), ("epsilon", "eps_schedule"), ("Anderson", "acceleration")]
                .iter()
                .find(|(needle, _)| msg.contains(needle))
                .map_or("solver".to_string(), |(_, f)| format!("solver.{f}"));
            return err(&field, msg);
        }
        if self.solver.eps_schedule.is_empty() {
            return err("solver.eps_schedule", "empty epsilon schedule".into());
        }
        let a = &self.analysis;
        if let Some(d) = &a.decay {
            if self.solver.eps_schedule.len() < 3 {
                return err("analysis.decay", "the decay fit needs at least three epsilon values".into());
            }
            if !(0.0..=1.0).contains(&d.min_r2) {
                return err("analysis.decay", "min_r2 outside [0, 1]".into());
            }
        }
        if let Some(o) = &a.obstacle {
            if !(o.lambda > 0.0 && o.lambda < 1.0) {
                return err("analysis.obstacle", format!("lambda {} outside (0, 1)", o.lambda));
            }
            if o.gaps.is_empty() || o.gaps.iter().any(|&g| !(g > 0.0 && g < o.lambda)) {
                return err("analysis.obstacle", "gaps must lie in (0, lambda)".into());
            }
            if !matches!(self.boundary, BoundaryPreset::DiskArcs { .. }) {
                return err("analysis.obstacle", "obstacles need boundary data equal to 1 on its support (disk_arcs)".into());
            }
        }
        for (k, v) in [("analysis.mass_half_width", a.mass_half_width), ("analysis.fb_tolerance", a.fb_tolerance)] {
            if !(v > 0.0) {
                return err(k, "must be positive".into());
            }
        }
        Ok(())
    }

    pub fn epsilons(&self) -> &[f64] {
        &self.solver.eps_schedule
    }
}

pub fn schema() -> schemars::schema::RootSchema {
    schemars::schema_for!(ExperimentConfig)
}

pub fn schema_json() -> String {
    serde_json::to_string_pretty(&schema()).expect("schema serializes") + "\n"
}
