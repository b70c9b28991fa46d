//! Structured run documents and human-readable tables.
//!
//! Every command that produces results can write one JSON document with a
//! fixed schema: version, kind, environment stamp, payload. Struct fields
//! serialize in declaration order and no map types are involved, so equal
//! runs emit byte-identical documents. Wall-clock timing never enters a
//! document; it goes to stderr.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::adapt::AdaptReport;
use crate::error::{Error, Result};
use crate::eval::{AblationGrid, MetricsReport};
use crate::gradcheck::GradCheckReport;
use crate::model::CHECKPOINT_VERSION;

/// Version of the document layout itself.
pub const REPORT_SCHEMA_VERSION: u32 = 1;

/// Build facts stamped into every document. Stable for a given binary and
/// machine, so it never breaks byte-level reproducibility of reruns.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Environment {
    pub package: String,
    pub version: String,
    pub os: String,
    pub arch: String,
    pub checkpoint_format: u32,
}

pub fn environment() -> Environment {
    Environment {
        package: env!("CARGO_PKG_NAME").to_string(),
        version: env!("CARGO_PKG_VERSION").to_string(),
        os: std::env::consts::OS.to_string(),
        arch: std::env::consts::ARCH.to_string(),
        checkpoint_format: CHECKPOINT_VERSION,
    }
}

/// A run document: schema header plus one payload.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Document<T> {
    pub schema_version: u32,
    /// Which command produced the payload.
    pub kind: String,
    pub environment: Environment,
    pub payload: T,
}

impl<T: serde::Serialize> Document<T> {
    pub fn new(kind: &str, payload: T) -> Self {
        Document {
            schema_version: REPORT_SCHEMA_VERSION,
            kind: kind.to_string(),
            environment: environment(),
            payload,
        }
    }

    /// Pretty JSON with a trailing newline; the byte form of the document.
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("document serializes");
        s.push('\n');
        s
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json())
            .map_err(|source| Error::Io { path: path.to_path_buf(), source })
    }
}

fn pct(x: f64) -> String {
    format!("{:.2}", 100.0 * x)
}

/// Aligned metrics summary plus the confusion matrix.
pub fn metrics_table(m: &MetricsReport) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "{:<10} {:>8} {:>8} {:>9}", "n_eval", "top1%", "top3%", "macroF1%");
    let _ = writeln!(
        out,
        "{:<10} {:>8} {:>8} {:>9}",
        m.n_eval,
        pct(m.top1),
        pct(m.top3),
        pct(m.macro_f1)
    );
    let c = m.confusion.len();
    let width = m
        .confusion
        .iter()
        .flatten()
        .map(|v| v.to_string().len())
        .max()
        .unwrap_or(1)
        .max(4);
    let _ = writeln!(out, "confusion (rows = actual, cols = predicted):");
    let mut header = format!("{:>6}", "");
    for j in 0..c {
        let _ = write!(header, " {:>width$}", format!("p{j}"));
    }
    let _ = writeln!(out, "{header}");
    for (i, row) in m.confusion.iter().enumerate() {
        let mut line = format!("{:>6}", format!("a{i}"));
        for v in row {
            let _ = write!(line, " {v:>width$}");
        }
        let _ = writeln!(out, "{line}");
    }
    out
}

/// Per-epoch trace table of a training run.
pub fn trace_table(r: &AdaptReport) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:>5} {:>10} {:>10} {:>7} {:>8} {:>8} {:>9}",
        "epoch", "ce", "mcrl", "active", "top1%", "top3%", "macroF1%"
    );
    for t in &r.trace {
        let (e1, e3, ef) = match &t.target_eval {
            Some(e) => (pct(e.top1), pct(e.top3), pct(e.macro_f1)),
            None => ("-".to_string(), "-".to_string(), "-".to_string()),
        };
        let _ = writeln!(
            out,
            "{:>5} {:>10.5} {:>10.5} {:>7.3} {:>8} {:>8} {:>9}",
            t.epoch, t.ce_loss, t.mcrl_loss, t.active_class_rate, e1, e3, ef
        );
    }
    if r.degenerate_steps > 0 {
        let _ = writeln!(out, "degenerate steps (CE-only fallback): {}", r.degenerate_steps);
    }
    out
}

/// Grid table: one row per policy plus the source-only baseline.
pub fn grid_table(g: &AblationGrid) -> String {
    let mut out = String::new();
    let label_w = g
        .rows
        .iter()
        .map(|r| r.label.len())
        .chain([g.baseline.label.len()])
        .max()
        .unwrap_or(10);
    let _ = writeln!(out, "{:<label_w$} {:>8}  per-seed top1%", "policy", "mean%");
    for row in [&g.baseline].into_iter().chain(&g.rows) {
        match (&row.mean_top1, &row.error) {
            (Some(mean), _) => {
                let seeds: Vec<String> = row.top1_per_seed.iter().map(|&v| pct(v)).collect();
                let _ = writeln!(
                    out,
                    "{:<label_w$} {:>8}  {}",
                    row.label,
                    pct(*mean),
                    seeds.join(" ")
                );
            }
            (None, Some(err)) => {
                let _ = writeln!(out, "{:<label_w$} {:>8}  error: {err}", row.label, "-");
            }
            (None, None) => {
                let _ = writeln!(out, "{:<label_w$} {:>8}", row.label, "-");
            }
        }
    }
    out
}

/// Pass/fail table of the gradient-check families.
pub fn gradcheck_table(reports: &[GradCheckReport]) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:<22} {:>9} {:>8} {:>12} {:>10} {:>6}",
        "family", "instances", "coords", "max_rel_err", "tolerance", "pass"
    );
    for r in reports {
        let _ = writeln!(
            out,
            "{:<22} {:>9} {:>8} {:>12.3e} {:>10.0e} {:>6}",
            r.name,
            r.instances,
            r.coords,
            r.max_rel_err,
            r.tolerance,
            if r.passed { "yes" } else { "NO" }
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_metrics() -> MetricsReport {
        MetricsReport {
            top1: 0.75,
            top3: 0.9,
            macro_f1: 0.74937,
            confusion: vec![vec![8, 2], vec![3, 7]],
            n_eval: 20,
        }
    }

    #[test]
    fn documents_serialize_with_stable_key_order() {
        let doc = Document::new("evaluate", sample_metrics());
        let json = doc.to_json();
        let ks = |k: &str| json.find(&format!("\"{k}\"")).unwrap();
        assert!(ks("schema_version") < ks("kind"));
        assert!(ks("kind") < ks("environment"));
        assert!(ks("environment") < ks("payload"));
        assert!(json.ends_with('\n'));
        // equal content, equal bytes
        assert_eq!(json, Document::new("evaluate", sample_metrics()).to_json());
    }

    #[test]
    fn document_round_trips_through_disk() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("report.json");
        let doc = Document::new("evaluate", sample_metrics());
        doc.write(&path).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        let back: Document<MetricsReport> = serde_json::from_str(&text).unwrap();
        assert_eq!(back, doc);
    }

    #[test]
    fn metrics_table_shows_percentages_and_counts() {
        let table = metrics_table(&sample_metrics());
        assert!(table.contains("75.00"));
        assert!(table.contains("90.00"));
        assert!(table.contains("74.94"));
        assert!(table.contains("a0"));
        assert!(table.contains("p1"));
    }

    #[test]
    fn grid_table_includes_every_row() {
        use crate::eval::GridRow;
        let grid = AblationGrid {
            seeds: vec![1],
            baseline: GridRow {
                label: "source_only".into(),
                policy: None,
                top1_per_seed: vec![0.5],
                mean_top1: Some(0.5),
                error: None,
            },
            rows: vec![GridRow {
                label: "soft(k=3)".into(),
                policy: Some(crate::selection::SelectionPolicy::Soft { k: 3 }),
                top1_per_seed: vec![],
                mean_top1: None,
                error: Some("boom".into()),
            }],
        };
        let table = grid_table(&grid);
        assert!(table.contains("source_only"));
        assert!(table.contains("50.00"));
        assert!(table.contains("error: boom"));
    }

    #[test]
    fn environment_is_stable_within_a_process() {
        assert_eq!(environment(), environment());
        assert_eq!(environment().checkpoint_format, CHECKPOINT_VERSION);
    }
}
