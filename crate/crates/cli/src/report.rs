//! Pass/fail checks and the JSON and text reports built from them.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Comparison {
    /// `|measured - target| <= tol`
    Within,
    /// `|measured - target| <= tol |target|`
    WithinRelative,
    /// `measured <= target + tol`
    AtMost,
    /// `measured >= target - tol`
    AtLeast,
    /// `measured < target`
    Below,
    /// `measured > target`
    Above,
}

impl Comparison {
    pub fn holds(self, measured: f64, target: f64, tol: f64) -> bool {
        match self {
            Comparison::Within => (measured - target).abs() <= tol,
            Comparison::WithinRelative => (measured - target).abs() <= tol * target.abs(),
            Comparison::AtMost => measured <= target + tol,
            Comparison::AtLeast => measured >= target - tol,
            Comparison::Below => measured < target,
            Comparison::Above => measured > target,
        }
    }

    fn symbol(self) -> &'static str {
        match self {
            Comparison::Within => "vs",
            Comparison::WithinRelative => "vs rel",
            Comparison::AtMost => "<=",
            Comparison::AtLeast => ">=",
            Comparison::Below => "<",
            Comparison::Above => ">",
        }
    }
}

/// Where a target comes from: a limit law of the theory, or an independent
/// computation (analytic solution, oracle, consistency argument).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Basis {
    Theory,
    Derived,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub measured: Option<f64>,
    pub target: f64,
    pub tol: f64,
    pub comparison: Comparison,
    pub pass: bool,
    pub basis: Basis,
    pub informational: bool,
    /// Upper tolerance of an asymmetric band; `tol` is then the lower one.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub upper_tol: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub note: Option<String>,
}

impl Check {
    pub fn new(name: impl Into<String>, measured: f64, target: f64, tol: f64, comparison: Comparison, basis: Basis) -> Check {
        let pass = measured.is_finite() && comparison.holds(measured, target, tol);
        Check {
            name: name.into(),
            measured: measured.is_finite().then_some(measured),
            target,
            tol,
            comparison,
            pass,
            basis,
            informational: false,
            upper_tol: None,
            note: None,
        }
    }

    /// `target - below <= measured <= target + above`.
    pub fn band(name: impl Into<String>, measured: f64, target: f64, below: f64, above: f64, basis: Basis) -> Check {
        let mut c = Check::new(name, measured, target, below, Comparison::Within, basis);
        c.upper_tol = Some(above);
        c.pass = measured.is_finite() && measured >= target - below && measured <= target + above;
        c
    }

    /// A check that could not be evaluated.
    pub fn failed(name: impl Into<String>, basis: Basis, note: impl Into<String>) -> Check {
        Check {
            name: name.into(),
            measured: None,
            target: 0.0,
            tol: 0.0,
            comparison: Comparison::Within,
            pass: false,
            basis,
            informational: false,
            upper_tol: None,
            note: Some(note.into()),
        }
    }

    pub fn informational(mut self) -> Check {
        self.informational = true;
        self
    }

    pub fn with_note(mut self, note: impl Into<String>) -> Check {
        self.note = Some(note.into());
        self
    }

    /// Counts toward the exit status.
    pub fn gating(&self, strict: bool) -> bool {
        strict || !self.informational
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageSummary {
    pub epsilon: f64,
    pub h: f64,
    pub iterations: usize,
    pub residual: f64,
    pub converged: bool,
    pub under_resolved: bool,
    pub separation: Option<f64>,
    pub overlap_mass: f64,
    pub mass: Vec<f64>,
    pub interface_length: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub name: String,
    pub strict: bool,
    pub stages: Vec<StageSummary>,
    pub checks: Vec<Check>,
    pub warnings: Vec<String>,
    pub pass: bool,
}

/// Fixed notation for moderate magnitudes, scientific otherwise.
fn num(v: f64) -> String {
    if v != 0.0 && (v.abs() < 1e-3 || v.abs() >= 1e6) {
        format!("{v:.4e}")
    } else {
        format!("{v:.6}")
    }
}

impl Report {
    pub fn new(name: &str, strict: bool, stages: Vec<StageSummary>, checks: Vec<Check>, warnings: Vec<String>) -> Report {
        let pass = !checks.is_empty() && checks.iter().filter(|c| c.gating(strict)).all(|c| c.pass);
        Report { name: name.to_string(), strict, stages, checks, warnings, pass }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes") + "\n"
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "experiment: {}", if self.name.is_empty() { "(unnamed)" } else { &self.name });
        for st in &self.stages {
            let _ = writeln!(
                s,
                "  eps {:<8} h {:<10.6} iterations {:>5} residual {:.2e}{}{}",
                st.epsilon,
                st.h,
                st.iterations,
                st.residual,
                if st.converged { "" } else { " NOT CONVERGED" },
                st.separation.map_or(String::new(), |d| format!(" separation {d:.4}"))
            );
        }
        for c in &self.checks {
            let status = match (c.pass, c.informational && !self.strict) {
                (true, _) => "PASS",
                (false, true) => "info",
                (false, false) => "FAIL",
            };
            let measured = c.measured.map_or("n/a".to_string(), num);
            let _ = write!(s, "{status} {:<28} {measured} {} {}", c.name, c.comparison.symbol(), num(c.target));
            if let Some(up) = c.upper_tol {
                let _ = write!(s, " (tol -{} +{})", num(c.tol), num(up));
            } else if matches!(c.comparison, Comparison::Within | Comparison::WithinRelative | Comparison::AtMost | Comparison::AtLeast) {
                let _ = write!(s, " (tol {})", num(c.tol));
            }
            let _ = write!(s, " [{}]", match c.basis {
                Basis::Theory => "theory",
                Basis::Derived => "derived",
            });
            if let Some(n) = &c.note {
                let _ = write!(s, " {n}");
            }
            s.push('\n');
        }
        for w in &self.warnings {
            let _ = writeln!(s, "warning: {w}");
        }
        let _ = writeln!(s, "{}", if self.pass { "RESULT: PASS" } else { "RESULT: FAIL" });
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn comparisons() {
        assert!(Comparison::Within.holds(0.98, 1.0, 0.07));
        assert!(!Comparison::Within.holds(0.92, 1.0, 0.07));
        assert!(Comparison::WithinRelative.holds(1.6, 1.5, 0.1));
        assert!(Comparison::Below.holds(-0.1, 0.0, 0.0));
        assert!(!Comparison::Below.holds(0.0, 0.0, 0.0));
    }

    #[test]
    fn separation_example_serializes() {
        let c = Check::new("separation", 0.98, 1.0, 0.07, Comparison::Within, Basis::Theory);
        let v: serde_json::Value = serde_json::to_value(&c).unwrap();
        assert_eq!(v["measured"], 0.98);
        assert_eq!(v["target"], 1.0);
        assert_eq!(v["tol"], 0.07);
        assert_eq!(v["pass"], true);
    }

    #[test]
    fn asymmetric_band() {
        assert!(Check::band("separation", 0.93, 1.0, 0.08, 0.05, Basis::Theory).pass);
        assert!(!Check::band("separation", 1.07, 1.0, 0.08, 0.05, Basis::Theory).pass);
    }

    #[test]
    fn empty_report_fails() {
        let r = Report::new("x", false, vec![], vec![], vec![]);
        assert!(!r.pass);
        assert!(r.to_text().contains("RESULT: FAIL"));
    }

    #[test]
    fn informational_checks_gate_only_when_strict() {
        let bad = Check::new("singular_points", 3.0, 0.0, 0.0, Comparison::AtMost, Basis::Theory).informational();
        let good = Check::new("separation", 1.0, 1.0, 0.1, Comparison::Within, Basis::Theory);
        assert!(Report::new("x", false, vec![], vec![bad.clone(), good.clone()], vec![]).pass);
        assert!(!Report::new("x", true, vec![], vec![bad, good], vec![]).pass);
    }

    #[test]
    fn nan_measurement_fails_and_serializes_as_null() {
        let c = Check::new("decay_slope", f64::NAN, 0.0, 0.0, Comparison::Below, Basis::Theory);
        assert!(!c.pass);
        assert!(serde_json::to_string(&c).unwrap().contains("\"measured\":null"));
    }
}
