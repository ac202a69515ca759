//! CSV tables produced by the experiment drivers.

use std::fmt::Write as _;

use crate::calinet::TrainHistory;
use crate::error::{CalibError, Result};
use crate::numerics::fmt_f64;

pub const MSE_HEADER: &str = "scenario,method,snr_db,mse,trials,seed";
pub const CONVERGENCE_HEADER: &str = "snr_db,epoch,train_mse,val_mse";
pub const TRACE_HEADER: &str = "sample,actual_sq_modulus,predicted_sq_modulus";

#[derive(Debug, Clone, PartialEq)]
pub struct MseRow {
    pub scenario: String,
    pub method: String,
    pub snr_db: f64,
    pub mse: f64,
    pub trials: usize,
    pub seed: u64,
}

/// Trial-averaged prediction MSE per (scenario, method, SNR) cell.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct MseReport {
    pub rows: Vec<MseRow>,
}

impl MseReport {
    pub fn push(&mut self, row: MseRow) -> Result<()> {
        if !(row.mse >= 0.0 && row.mse.is_finite()) {
            return Err(CalibError::Degenerate(format!(
                "{} on {} at {} dB produced MSE {}",
                row.method, row.scenario, row.snr_db, row.mse
            )));
        }
        if self.rows.iter().any(|r| {
            r.scenario == row.scenario && r.method == row.method && r.snr_db == row.snr_db
        }) {
            return Err(CalibError::InvalidState(format!(
                "duplicate report cell {} / {} / {} dB",
                row.scenario, row.method, row.snr_db
            )));
        }
        self.rows.push(row);
        Ok(())
    }

    pub fn extend(&mut self, other: MseReport) -> Result<()> {
        for row in other.rows {
            self.push(row)?;
        }
        Ok(())
    }

    /// MSE of one cell.
    pub fn get(&self, scenario: &str, method: &str, snr_db: f64) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.scenario == scenario && r.method == method && r.snr_db == snr_db)
            .map(|r| r.mse)
    }

    /// `(snr_db, mse)` in row order for one curve.
    pub fn curve(&self, scenario: &str, method: &str) -> Vec<(f64, f64)> {
        self.rows
            .iter()
            .filter(|r| r.scenario == scenario && r.method == method)
            .map(|r| (r.snr_db, r.mse))
            .collect()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from(MSE_HEADER);
        s.push('\n');
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{}",
                csv_field(&r.scenario),
                csv_field(&r.method),
                fmt_f64(r.snr_db),
                fmt_f64(r.mse),
                r.trials,
                r.seed
            );
        }
        s
    }
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// Per-epoch curves, one block per SNR.
pub fn convergence_csv(histories: &[(f64, TrainHistory)]) -> String {
    let mut s = String::from(CONVERGENCE_HEADER);
    s.push('\n');
    for (snr, h) in histories {
        for r in &h.records {
            let _ = writeln!(
                s,
                "{},{},{},{}",
                fmt_f64(*snr),
                r.epoch,
                fmt_f64(r.train_mse),
                fmt_f64(r.val_mse)
            );
        }
    }
    s
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceRow {
    pub sample: usize,
    pub actual_sq_modulus: f64,
    pub predicted_sq_modulus: f64,
}

pub fn trace_csv(rows: &[TraceRow]) -> String {
    let mut s = String::from(TRACE_HEADER);
    s.push('\n');
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{}",
            r.sample,
            fmt_f64(r.actual_sq_modulus),
            fmt_f64(r.predicted_sq_modulus)
        );
    }
    s
}

/// Pearson correlation of two equally long samples.
pub fn correlation(x: &[f64], y: &[f64]) -> Option<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return None;
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    (sxx > 0.0 && syy > 0.0).then(|| sxy / (sxx * syy).sqrt())
}
