//! Config-driven experiments: solve an `eps` schedule, analyse the
//! free boundaries and report pass/fail per check.

pub mod analyze;
pub mod config;
pub mod oracle;
pub mod report;
pub mod run;
