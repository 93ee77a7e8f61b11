//! Run outputs: per-evaluation metrics, the event trace, and the summary.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::simulator::EventRecord;

pub const METRICS_COLUMNS: [&str; 11] = [
    "round",
    "clock",
    "test_accuracy",
    "test_loss",
    "train_grad_norm",
    "tau_max_so_far",
    "round_tau",
    "alpha_mean",
    "entropy_mean",
    "buffer_events",
    "checkpoints",
];

pub const EVENT_COLUMNS: [&str; 10] = [
    "event",
    "clock",
    "client",
    "dispatch_round",
    "tau",
    "buffer_fill",
    "round",
    "global_update",
    "active",
    "checkpoints",
];

pub const SUMMARY_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRecord {
    pub round: u64,
    pub clock: f64,
    pub test_accuracy: f64,
    pub test_loss: f64,
    /// Norm of the full-batch training cross-entropy gradient.
    pub train_grad_norm: f64,
    pub tau_max_so_far: u64,
    /// Largest delay among the updates aggregated in this round.
    pub round_tau: u64,
    pub alpha_mean: Option<f64>,
    pub entropy_mean: Option<f64>,
    /// Arrivals processed so far.
    pub buffer_events: u64,
    pub checkpoints: usize,
}

/// 17 significant digits: enough to round-trip any `f64`.
pub fn format_float(v: f64) -> String {
    if v.is_finite() {
        format!("{v:.16e}")
    } else {
        v.to_string()
    }
}

fn format_opt(v: Option<f64>) -> String {
    v.map(format_float).unwrap_or_default()
}

pub fn write_metrics_csv<W: Write>(out: W, records: &[MetricsRecord]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(METRICS_COLUMNS)?;
    for r in records {
        w.write_record([
            r.round.to_string(),
            format_float(r.clock),
            format_float(r.test_accuracy),
            format_float(r.test_loss),
            format_float(r.train_grad_norm),
            r.tau_max_so_far.to_string(),
            r.round_tau.to_string(),
            format_opt(r.alpha_mean),
            format_opt(r.entropy_mean),
            r.buffer_events.to_string(),
            r.checkpoints.to_string(),
        ])?;
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}

pub fn write_events_csv<W: Write>(out: W, events: &[EventRecord]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(EVENT_COLUMNS)?;
    for e in events {
        w.write_record([
            e.event.to_string(),
            format_float(e.clock),
            e.client.to_string(),
            e.dispatch_round.to_string(),
            e.tau.to_string(),
            e.buffer_fill.to_string(),
            e.round.to_string(),
            e.global_update.to_string(),
            e.active.to_string(),
            e.checkpoints.to_string(),
        ])?;
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}

/// Reads back the accuracy column of a metrics file.
pub fn read_accuracies<R: std::io::Read>(input: R) -> Result<Vec<(u64, f64)>> {
    let mut r = csv::Reader::from_reader(input);
    let headers = r.headers()?.clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| crate::error::Error::Format(format!("metrics file lacks column '{name}'")))
    };
    let (round_col, acc_col) = (col("round")?, col("test_accuracy")?);
    let mut out = Vec::new();
    for row in r.records() {
        let row = row?;
        let parse_err = |f: &str| crate::error::Error::Format(format!("bad metrics field '{f}'"));
        let round = row[round_col].parse().map_err(|_| parse_err(&row[round_col]))?;
        let acc = row[acc_col].parse().map_err(|_| parse_err(&row[acc_col]))?;
        out.push((round, acc));
    }
    Ok(out)
}

/// Mean and sample standard deviation (zero for a single value).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedSummary {
    pub seed: u64,
    pub final_accuracy: f64,
    pub final_loss: f64,
    pub tau_max: u64,
    pub tau_avg: f64,
    pub max_checkpoints: usize,
    pub reconstruction_mismatches: u64,
    pub events: u64,
    pub clock: f64,
    /// Relative path of this seed's metrics file.
    pub metrics_file: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub schema_version: u32,
    pub code_version: String,
    pub algorithm: String,
    pub rounds: u64,
    pub accuracy_mean: f64,
    /// Sample standard deviation across seeds; 0 for a single seed.
    pub accuracy_std: f64,
    pub tau_max: u64,
    pub tau_avg_mean: f64,
    /// How delay tiers were assigned from sample counts.
    pub category_rule: String,
    pub seeds: Vec<SeedSummary>,
    /// The effective configuration as TOML (JSON cannot hold `inf`).
    pub config: String,
}

impl RunSummary {
    pub fn to_json(&self) -> Result<String> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        Ok(text)
    }

    /// Parses a summary and rejects files written under another schema.
    pub fn from_json(text: &str) -> Result<Self> {
        let s: RunSummary = serde_json::from_str(text)?;
        if s.schema_version != SUMMARY_SCHEMA_VERSION {
            return Err(crate::error::Error::Format(format!(
                "summary schema {} (expected {SUMMARY_SCHEMA_VERSION})",
                s.schema_version
            )));
        }
        Ok(s)
    }
}
