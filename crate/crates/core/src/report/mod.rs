//! Report tables: per-head score heatmap data, the privacy-utility
//! tradeoff table and the flat leakage summary.

use std::fmt::Write as _;

use crate::attack::LeakageReport;
use crate::discovery::Circuit;
use crate::model::NodeId;

#[derive(Debug, thiserror::Error)]
pub enum ReportError {
    #[error("no circuits")]
    NoCircuits,
    #[error("no reports")]
    NoReports,
    #[error("circuits come from different models ({0} vs {1})")]
    MixedModels(String, String),
    #[error("line {line}: {reason}")]
    Parse { line: usize, reason: String },
}

pub type Result<T> = std::result::Result<T, ReportError>;

#[derive(Clone, Debug, PartialEq)]
pub struct HeatCell {
    pub layer: usize,
    pub head: usize,
    pub score: f64,
}

/// Mean |score| over each head's incident edges, averaged over circuits.
pub fn head_heatmap(circuits: &[Circuit], n_layers: usize, n_heads: usize) -> Result<Vec<HeatCell>> {
    let first = circuits.first().ok_or(ReportError::NoCircuits)?;
    if let Some(c) = circuits.iter().find(|c| c.model_fingerprint != first.model_fingerprint) {
        return Err(ReportError::MixedModels(first.model_fingerprint.clone(), c.model_fingerprint.clone()));
    }
    let mut cells = Vec::with_capacity(n_layers * n_heads);
    for layer in 0..n_layers {
        for head in 0..n_heads {
            let node = NodeId::Head { layer, head };
            let mut per_circuit: Vec<f64> = circuits
                .iter()
                .map(|c| {
                    let incident: Vec<f64> =
                        c.scores.iter().filter(|(e, _)| e.src == node || e.dst == node).map(|(_, s)| s.abs()).collect();
                    if incident.is_empty() {
                        0.0
                    } else {
                        incident.iter().sum::<f64>() / incident.len() as f64
                    }
                })
                .collect();
            // Summed in sorted order so the result ignores circuit order.
            per_circuit.sort_by(f64::total_cmp);
            let score = per_circuit.iter().sum::<f64>() / per_circuit.len() as f64;
            cells.push(HeatCell { layer, head, score });
        }
    }
    Ok(cells)
}

pub fn heatmap_csv(cells: &[HeatCell]) -> String {
    let mut out = String::from("layer,head,score\n");
    for c in cells {
        let _ = writeln!(out, "{},{},{}", c.layer, c.head, c.score);
    }
    out
}

/// One row of the tradeoff table, at printed precision.
#[derive(Clone, Debug, PartialEq)]
pub struct TradeoffRow {
    pub defense: String,
    pub variant: String,
    pub perplexity: Option<f64>,
    pub precision: Option<(f64, f64)>,
    pub recall: Option<(f64, f64)>,
}

const UNDEFINED_NOTE: &str = "[1] precision undefined: no PII was extracted in any repetition.";

fn pm(mean: Option<f64>, std: Option<f64>) -> String {
    match mean {
        Some(m) => format!("{m:.2} ± {:.2}", std.unwrap_or(0.0)),
        None => "n/a [1]".into(),
    }
}

/// Pipe table with one row per (defense, variant), sorted by defense then
/// variant, two decimals and explicit ± for the spread over repetitions.
pub fn tradeoff_table(reports: &[LeakageReport]) -> Result<String> {
    if reports.is_empty() {
        return Err(ReportError::NoReports);
    }
    let mut sorted: Vec<&LeakageReport> = reports.iter().collect();
    sorted.sort_by(|a, b| (&a.defense, &a.variant).cmp(&(&b.defense, &b.variant)));
    let mut out = String::from("| defense | variant | perplexity | precision | recall |\n|---|---|---|---|---|\n");
    let mut undefined = false;
    for r in sorted {
        undefined |= r.precision.mean.is_none();
        let ppl = r.perplexity.map_or_else(|| "n/a".to_string(), |p| format!("{p:.2}"));
        let _ = writeln!(
            out,
            "| {} | {} | {} | {} | {} |",
            r.defense,
            r.variant,
            ppl,
            pm(r.precision.mean, r.precision.std),
            pm(r.recall.mean, r.recall.std)
        );
    }
    if undefined {
        let _ = writeln!(out, "\n{UNDEFINED_NOTE}");
    }
    Ok(out)
}

fn parse_pm(cell: &str, line: usize) -> Result<Option<(f64, f64)>> {
    let bad = |reason: String| ReportError::Parse { line, reason };
    if cell.starts_with("n/a") {
        return Ok(None);
    }
    let (m, s) = cell.split_once('±').ok_or_else(|| bad(format!("expected mean ± std, got {cell:?}")))?;
    let m: f64 = m.trim().parse().map_err(|_| bad(format!("bad mean {m:?}")))?;
    let s: f64 = s.trim().parse().map_err(|_| bad(format!("bad std {s:?}")))?;
    Ok(Some((m, s)))
}

/// Reads back a table produced by [`tradeoff_table`].
pub fn parse_tradeoff_table(text: &str) -> Result<Vec<TradeoffRow>> {
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate().skip(2) {
        let line_no = i + 1;
        if !line.starts_with('|') {
            continue;
        }
        let cells: Vec<&str> = line.trim_matches('|').split('|').map(str::trim).collect();
        if cells.len() != 5 {
            return Err(ReportError::Parse { line: line_no, reason: format!("expected 5 cells, got {}", cells.len()) });
        }
        let perplexity = if cells[2] == "n/a" {
            None
        } else {
            Some(cells[2].parse().map_err(|_| ReportError::Parse { line: line_no, reason: format!("bad perplexity {:?}", cells[2]) })?)
        };
        rows.push(TradeoffRow {
            defense: cells[0].into(),
            variant: cells[1].into(),
            perplexity,
            precision: parse_pm(cells[3], line_no)?,
            recall: parse_pm(cells[4], line_no)?,
        });
    }
    Ok(rows)
}

/// Flat CSV of every report's summary row, in the given order.
pub fn summary_csv(reports: &[LeakageReport]) -> String {
    let mut out = format!("{}\n", LeakageReport::CSV_HEADER);
    for r in reports {
        out.push_str(&r.csv_row());
        out.push('\n');
    }
    out
}
