//! Output files and their readers.

use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

pub const THETA_FILE: &str = "theta_star.json";
pub const RECONSTRUCTION_FILE: &str = "reconstruction.csv";
pub const ITERATES_FILE: &str = "iterates.csv";
pub const ERROR_FILE: &str = "error_vs_k.csv";
pub const TIMING_FILE: &str = "timing.csv";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatvecSummary {
    pub forward: u64,
    pub adjoint: u64,
}

/// Estimated hyperparameters with a summary of the optimizer run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThetaStar {
    pub problem: String,
    pub theta: Vec<f64>,
    pub objective: f64,
    pub converged: bool,
    pub stop_reason: String,
    pub iterations: usize,
    pub func_count: usize,
    pub k: usize,
    pub evaluator: String,
    pub relative_error: f64,
    /// Forward-operator applications during the whole run.
    pub matvecs: MatvecSummary,
    /// Applications after the precompute of the two-parameter path.
    pub matvecs_after_precompute: Option<MatvecSummary>,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReconstructionRow {
    pub index: usize,
    pub s_hat: f64,
    pub s_true: f64,
    /// Same value on every row: `||s_hat - s_true|| / ||s_true||`.
    pub relative_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterateRow {
    pub iteration: usize,
    pub objective: f64,
    pub grad_norm: f64,
    pub func_count: usize,
    pub theta_1: f64,
    pub theta_2: f64,
    pub theta_3: Option<f64>,
}

/// One bidiagonalization depth of a monitoring run. Columns that need the
/// dense reference are empty above the dense cap.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorRow {
    pub k: usize,
    pub exact_re: Option<f64>,
    pub re_logdet: Option<f64>,
    pub re_quad: Option<f64>,
    /// `|F - F~_k|`.
    pub abs_error: Option<f64>,
    pub xi_hat: f64,
    pub err_mc: f64,
    pub xi: Option<f64>,
    pub bound: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingRow {
    pub n: usize,
    pub exact_seconds: Option<f64>,
    pub gengk_seconds: f64,
    pub speedup: Option<f64>,
    /// Forward and adjoint applications of one bidiagonal evaluation.
    pub forward_matvecs: u64,
    pub adjoint_matvecs: u64,
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> CliResult<T> {
    Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
}

pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> CliResult<()> {
    let mut w = csv::Writer::from_path(path)?;
    for row in rows {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_csv<T: DeserializeOwned>(path: &Path) -> CliResult<Vec<T>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|row| row.map_err(CliError::from)).collect()
}

pub fn read_theta_star(dir: &Path) -> CliResult<ThetaStar> {
    read_json(&dir.join(THETA_FILE))
}

pub fn read_reconstruction(dir: &Path) -> CliResult<Vec<ReconstructionRow>> {
    let rows: Vec<ReconstructionRow> = read_csv(&dir.join(RECONSTRUCTION_FILE))?;
    if rows.iter().enumerate().any(|(i, r)| r.index != i) {
        return Err(CliError::Format("reconstruction rows out of order".into()));
    }
    Ok(rows)
}

pub fn read_iterates(dir: &Path) -> CliResult<Vec<IterateRow>> {
    read_csv(&dir.join(ITERATES_FILE))
}

pub fn read_error_vs_k(dir: &Path) -> CliResult<Vec<ErrorRow>> {
    read_csv(&dir.join(ERROR_FILE))
}

pub fn read_timing(dir: &Path) -> CliResult<Vec<TimingRow>> {
    read_csv(&dir.join(TIMING_FILE))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_round_trip_keeps_bits_and_empty_cells() {
        let dir = tempfile::tempdir().unwrap();
        let rows = vec![
            ErrorRow {
                k: 1,
                exact_re: Some(0.1 + 0.2),
                re_logdet: None,
                re_quad: Some(1e-300),
                abs_error: Some(f64::MIN_POSITIVE),
                xi_hat: -3.0e-17,
                err_mc: 0.0,
                xi: None,
                bound: Some(12345.678901234567),
            },
            ErrorRow {
                k: 2,
                exact_re: None,
                re_logdet: None,
                re_quad: None,
                abs_error: None,
                xi_hat: std::f64::consts::PI,
                err_mc: 1.0 / 3.0,
                xi: Some(2.0),
                bound: None,
            },
        ];
        let path = dir.path().join(ERROR_FILE);
        write_csv(&path, &rows).unwrap();
        assert_eq!(read_error_vs_k(dir.path()).unwrap(), rows);
    }

    #[test]
    fn json_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let t = ThetaStar {
            problem: "heat".into(),
            theta: vec![8.7e-7, 0.25, 0.0566],
            objective: -1234.5,
            converged: true,
            stop_reason: "FunctionTolerance".into(),
            iterations: 12,
            func_count: 40,
            k: 22,
            evaluator: "gengk".into(),
            relative_error: 0.155,
            matvecs: MatvecSummary { forward: 920, adjoint: 920 },
            matvecs_after_precompute: None,
            seed: 0,
        };
        write_json(&dir.path().join(THETA_FILE), &t).unwrap();
        assert_eq!(read_theta_star(dir.path()).unwrap(), t);
    }

    #[test]
    fn reconstruction_reader_checks_order() {
        let dir = tempfile::tempdir().unwrap();
        let rows = vec![
            ReconstructionRow { index: 1, s_hat: 0.0, s_true: 0.0, relative_error: 0.0 },
        ];
        write_csv(&dir.path().join(RECONSTRUCTION_FILE), &rows).unwrap();
        assert!(matches!(read_reconstruction(dir.path()), Err(CliError::Format(_))));
    }
}
