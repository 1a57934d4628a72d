//! Result files. Every file is written to a temporary sibling and renamed
//! into place.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use fedfm_core::protocol::{CommLedger, RoundRecord};
use serde::{Deserialize, Serialize};
use tempfile::NamedTempFile;

use crate::error::{CliError, CliResult};

pub const ROUNDS_FILE: &str = "rounds.csv";
pub const LEDGER_FILE: &str = "ledger.csv";
pub const SUMMARY_FILE: &str = "summary.json";
pub const FEATURES_FILE: &str = "features.csv";
pub const SCHEMA_FILE: &str = "schema.json";
pub const COMPARISON_CSV: &str = "comparison.csv";
pub const COMPARISON_TXT: &str = "comparison.txt";

/// Headline numbers of one run, written to `summary.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub algorithm: String,
    pub seed: u64,
    pub data_seed: u64,
    pub rounds: usize,
    pub best_round: Option<usize>,
    pub best_test_acc: f64,
    pub final_test_acc: f64,
    pub nmi: f64,
    pub silhouette: f64,
    pub total_floats: usize,
    pub up_floats: usize,
    pub down_floats: usize,
    pub model_floats: usize,
    pub anchor_floats: usize,
    pub handshakes: usize,
    pub model_rounds: usize,
    pub config_hash: String,
}

impl RunSummary {
    pub fn line(&self) -> String {
        format!(
            "{}: best test acc {:.4}, final {:.4}, NMI {:.4}, SS {:.4}, {} floats, {} handshakes",
            self.algorithm,
            self.best_test_acc,
            self.final_test_acc,
            self.nmi,
            self.silhouette,
            self.total_floats,
            self.handshakes
        )
    }
}

/// Writes `path` through a temporary file in the same directory.
pub fn write_atomic(path: &Path, body: impl FnOnce(&mut dyn Write) -> CliResult<()>) -> CliResult<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    let tmp = NamedTempFile::new_in(dir).map_err(|e| CliError::io(dir, e))?;
    {
        let mut w = BufWriter::new(tmp.as_file());
        body(&mut w)?;
        w.flush().map_err(|e| CliError::io(path, e))?;
    }
    tmp.persist(path).map_err(|e| CliError::io(path, e.error))?;
    Ok(())
}

pub fn write_csv_rows<S: Serialize>(path: &Path, rows: &[S]) -> CliResult<()> {
    write_atomic(path, |w| {
        let mut out = csv::Writer::from_writer(w);
        for row in rows {
            out.serialize(row)?;
        }
        out.flush().map_err(|e| CliError::io(path, e))?;
        Ok(())
    })
}

pub fn write_rounds(path: &Path, records: &[RoundRecord]) -> CliResult<()> {
    write_csv_rows(path, records)
}

pub fn write_ledger(path: &Path, ledger: &CommLedger) -> CliResult<()> {
    write_csv_rows(path, ledger.entries())
}

pub fn write_json<S: Serialize>(path: &Path, value: &S) -> CliResult<()> {
    write_atomic(path, |w| {
        serde_json::to_writer_pretty(&mut *w, value)?;
        writeln!(w).map_err(|e| CliError::io(path, e))
    })
}

const ROUND_COLUMNS: [(&str, &str); 15] = [
    ("round", "0-based communication round"),
    ("task_loss", "client-weighted mean cross-entropy over local batches"),
    ("match_loss", "client-weighted mean matching loss (0 when matching is off)"),
    ("total_loss", "task_loss + lambda * match_loss"),
    ("lambda", "matching weight in effect this round"),
    ("val_acc", "mean client validation accuracy of the new global model; empty without validation"),
    ("test_acc", "test accuracy of the new global model"),
    ("lemma2_before", "l2 global objective under the anchors used; empty unless fedfm_l2"),
    ("lemma2_after", "l2 global objective under the recomputed anchors; empty unless fedfm_l2"),
    ("anchor_displacement", "mean distance between consecutive global anchors"),
    ("anchor_tag", "round whose model produced the anchors used in local training"),
    ("update_norm", "Euclidean norm of the global model update"),
    ("grad_norm_estimate", "update_norm / (lr * mean local steps)"),
    ("model_round", "true when models were exchanged this round"),
    ("best_test_acc", "test accuracy of the best model so far by validation accuracy"),
];

const LEDGER_COLUMNS: [(&str, &str); 8] = [
    ("round", "0-based communication round"),
    ("handshakes", "synchronized client-server exchanges"),
    ("model_up", "model parameters uploaded, summed over clients"),
    ("model_down", "model parameters downloaded, summed over clients"),
    ("anchor_up", "anchor scalars uploaded, summed over clients"),
    ("anchor_down", "anchor scalars downloaded, summed over clients"),
    ("counts_up", "per-category sample counts uploaded for weighted anchor aggregation"),
    ("model_round", "true when models were exchanged this round"),
];

/// Column documentation for every output file.
pub fn schema() -> serde_json::Value {
    let cols = |c: &[(&str, &str)]| -> serde_json::Value {
        c.iter()
            .map(|(n, d)| serde_json::json!({ "name": n, "description": d }))
            .collect()
    };
    serde_json::json!({
        ROUNDS_FILE: { "description": "one row per round", "columns": cols(&ROUND_COLUMNS) },
        LEDGER_FILE: { "description": "communication per round in scalar units", "columns": cols(&LEDGER_COLUMNS) },
        FEATURES_FILE: {
            "description": "normalized penultimate features of final-model test samples (at most 2000 rows)",
            "columns": [
                { "name": "label", "description": "true category" },
                { "name": "pred", "description": "predicted category" },
                { "name": "f_1..f_d", "description": "feature coordinates" }
            ]
        },
        SUMMARY_FILE: {
            "description": "run totals; nmi and silhouette are computed on final-model test features",
            "fields": [
                "algorithm", "seed", "data_seed", "rounds", "best_round", "best_test_acc",
                "final_test_acc", "nmi", "silhouette", "total_floats", "up_floats", "down_floats",
                "model_floats", "anchor_floats", "handshakes", "model_rounds", "config_hash"
            ]
        }
    })
}

/// One row of a comparison table.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ComparisonRow {
    pub config: String,
    pub algorithm: String,
    pub best_test_acc: f64,
    pub nmi: f64,
    pub silhouette: f64,
    pub total_floats: usize,
    pub handshakes: usize,
}

impl ComparisonRow {
    pub fn new(config: String, s: &RunSummary) -> Self {
        Self {
            config,
            algorithm: s.algorithm.clone(),
            best_test_acc: s.best_test_acc,
            nmi: s.nmi,
            silhouette: s.silhouette,
            total_floats: s.total_floats,
            handshakes: s.handshakes,
        }
    }
}

/// Column-aligned text rendering of a comparison.
pub fn pretty_table(rows: &[ComparisonRow]) -> String {
    let header = ["config", "algorithm", "accuracy", "NMI", "SS", "total floats", "handshakes"];
    let body: Vec<[String; 7]> = rows
        .iter()
        .map(|r| {
            [
                r.config.clone(),
                r.algorithm.clone(),
                format!("{:.4}", r.best_test_acc),
                format!("{:.4}", r.nmi),
                format!("{:.4}", r.silhouette),
                r.total_floats.to_string(),
                r.handshakes.to_string(),
            ]
        })
        .collect();
    let mut widths = header.map(str::len);
    for row in &body {
        for (w, cell) in widths.iter_mut().zip(row) {
            *w = (*w).max(cell.len());
        }
    }
    let render = |cells: Vec<&str>| {
        let parts: Vec<String> = cells
            .iter()
            .zip(widths)
            .enumerate()
            .map(|(i, (c, w))| if i < 2 { format!("{c:<w$}") } else { format!("{c:>w$}") })
            .collect();
        parts.join("  ").trim_end().to_string()
    };
    let mut out = vec![render(header.to_vec())];
    out.push(widths.map(|w| "-".repeat(w)).join("  "));
    out.extend(body.iter().map(|r| render(r.iter().map(String::as_str).collect())));
    out.join("\n") + "\n"
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn atomic_write_replaces_whole_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.txt");
        write_atomic(&path, |w| w.write_all(b"first, longer").map_err(|e| CliError::io("x", e))).unwrap();
        write_atomic(&path, |w| w.write_all(b"second").map_err(|e| CliError::io("x", e))).unwrap();
        assert_eq!(fs::read_to_string(&path).unwrap(), "second");
        assert_eq!(fs::read_dir(dir.path()).unwrap().count(), 1);
    }

    #[test]
    fn failed_body_leaves_no_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.txt");
        let err = write_atomic(&path, |_| Err(CliError::ChecksFailed(vec!["x".into()])));
        assert!(err.is_err());
        assert_eq!(fs::read_dir(dir.path()).unwrap().count(), 0);
    }

    #[test]
    fn schema_lists_every_round_field() {
        let s = schema();
        let cols = s[ROUNDS_FILE]["columns"].as_array().unwrap();
        assert_eq!(cols.len(), 15);
        assert_eq!(s[LEDGER_FILE]["columns"].as_array().unwrap().len(), 8);
    }

    #[test]
    fn pretty_table_aligns_columns() {
        let row = |c: &str, acc| ComparisonRow {
            config: c.into(),
            algorithm: "fedavg".into(),
            best_test_acc: acc,
            nmi: 0.5,
            silhouette: 0.25,
            total_floats: 1234,
            handshakes: 40,
        };
        let t = pretty_table(&[row("a", 0.9), row("long_name", 0.95)]);
        let lines: Vec<&str> = t.lines().collect();
        assert_eq!(lines.len(), 4);
        assert!(lines[2].starts_with("a          fedavg"));
        assert!(lines[3].ends_with("1234          40"));
    }
}
