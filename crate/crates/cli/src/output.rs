//! Fixed-column CSV writers. Floats carry 17 significant digits so every
//! value parses back to the identical double.

use std::fmt::Write as _;
use std::fs::OpenOptions;
use std::io::Write;
use std::path::Path;

use fade_core::metrics::MetricsReport;
use fade_core::trainer::IterationRecord;

use crate::checkpoint::write_atomic;
use crate::error::{CliError, Result};

pub fn float(v: f64) -> String {
    if v.is_finite() {
        format!("{v:.16e}")
    } else {
        format!("{v}")
    }
}

pub const ITERATION_COLUMNS: [&str; 6] = ["iter", "L_rem", "L_pres", "L_total", "L_adv_D", "val_acc"];

pub fn iteration_csv(history: &[IterationRecord]) -> String {
    let mut s = ITERATION_COLUMNS.join(",");
    s.push('\n');
    for r in history {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{}",
            r.iteration,
            float(r.removal),
            float(r.preservation),
            float(r.total),
            float(r.discriminator),
            float(r.validation_accuracy)
        );
    }
    s
}

pub fn loss_csv(curve: &[f64]) -> String {
    let mut s = String::from("step,loss\n");
    for (i, v) in curve.iter().enumerate() {
        let _ = writeln!(s, "{i},{}", float(*v));
    }
    s
}

pub const METRIC_COLUMNS: [&str; 12] = [
    "concept_accuracy",
    "fidelity_proxy",
    "adherence",
    "adherence_vacuous",
    "erasure_efficacy",
    "fidelity",
    "harmonic_mean",
    "reference_concept_accuracy",
    "reference_fidelity_proxy",
    "reference_adherence",
    "concept_mi_nats",
    "reference_concept_mi_nats",
];

pub fn metrics_row(r: &MetricsReport) -> String {
    [
        float(r.concept_accuracy),
        float(r.fidelity_proxy),
        float(r.adherence),
        r.adherence_vacuous.to_string(),
        float(r.erasure_efficacy),
        float(r.fidelity),
        float(r.harmonic_mean),
        float(r.reference_concept_accuracy),
        float(r.reference_fidelity_proxy),
        float(r.reference_adherence),
        float(r.concept_mi_nats),
        float(r.reference_concept_mi_nats),
    ]
    .join(",")
}

/// Appends one report row, writing the header first when the file is new.
pub fn append_metrics_csv(path: &Path, report: &MetricsReport) -> Result<()> {
    let fresh = !path.exists();
    let mut f = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| CliError::io(path, e))?;
    let mut s = String::new();
    if fresh {
        s.push_str(&METRIC_COLUMNS.join(","));
        s.push('\n');
    }
    s.push_str(&metrics_row(report));
    s.push('\n');
    f.write_all(s.as_bytes()).map_err(|e| CliError::io(path, e))
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    write_atomic(path, text.as_bytes())
}
