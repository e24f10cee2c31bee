//! Per-step metrics CSV and the end-of-run summary.
//!
//! Floats are written as `{:.16e}`, so every value survives a round trip and
//! identical runs produce identical bytes.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use pama_core::trainers::{TheoryRecord, TrainStepReport};
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{CliError, Result};

pub fn fmt_f64(x: f64) -> String {
    format!("{x:.16e}")
}

pub fn rl_header(n_objectives: usize, stationarity: bool) -> Vec<String> {
    let mut h = vec!["step".to_string()];
    let per = |name: &'static str| (0..n_objectives).map(move |i| format!("{name}_{i}"));
    h.extend(per("reward_mean"));
    h.extend(per("reward_std"));
    h.extend(per("noon_adv_mean"));
    h.push("agg_adv_mean".into());
    h.extend(per("weight"));
    h.push("kl".into());
    h.push("policy_loss".into());
    h.extend(per("value_loss"));
    h.push("epochs_run".into());
    if stationarity {
        h.push("stationarity_residual".into());
    }
    h
}

pub fn rl_row(r: &TrainStepReport, stationarity: bool) -> Vec<String> {
    let mut row = vec![r.step.to_string()];
    row.extend(r.reward_mean.iter().map(|&x| fmt_f64(x)));
    row.extend(r.reward_std.iter().map(|&x| fmt_f64(x)));
    row.extend(r.noon_adv_mean.iter().map(|&x| fmt_f64(x)));
    row.push(fmt_f64(r.agg_adv_mean));
    row.extend(r.weight_mean.iter().map(|&x| fmt_f64(x)));
    row.push(fmt_f64(r.kl));
    row.push(fmt_f64(r.policy_loss));
    row.extend(r.value_loss.iter().map(|&x| fmt_f64(x)));
    row.push(r.epochs_run.to_string());
    if stationarity {
        row.push(r.stationarity_residual.map(fmt_f64).unwrap_or_default());
    }
    row
}

pub fn theory_header(dim: usize, n_losses: usize) -> Vec<String> {
    let mut h = vec!["step".to_string()];
    h.extend((0..dim).map(|j| format!("theta_{j}")));
    h.extend((0..n_losses).map(|i| format!("loss_{i}")));
    h.push("residual".into());
    h.extend((0..n_losses).map(|i| format!("weight_{i}")));
    h
}

pub fn theory_row(r: &TheoryRecord) -> Vec<String> {
    let mut row = vec![r.step.to_string()];
    row.extend(r.theta.iter().map(|&x| fmt_f64(x)));
    row.extend(r.losses.iter().map(|&x| fmt_f64(x)));
    row.push(fmt_f64(r.residual));
    row.extend(r.weights.iter().map(|&x| fmt_f64(x)));
    row
}

/// CSV sink that flushes every `flush_every` rows.
pub struct MetricsWriter<W: Write> {
    inner: csv::Writer<W>,
    flush_every: usize,
    rows: usize,
}

impl MetricsWriter<BufWriter<File>> {
    pub fn create(path: &Path, header: &[String], flush_every: usize) -> Result<Self> {
        let file = File::create(path).map_err(|e| CliError::io(path, e))?;
        Self::new(BufWriter::new(file), header, flush_every)
    }
}

impl<W: Write> MetricsWriter<W> {
    pub fn new(sink: W, header: &[String], flush_every: usize) -> Result<Self> {
        let mut inner = csv::Writer::from_writer(sink);
        inner.write_record(header)?;
        Ok(Self {
            inner,
            flush_every: flush_every.max(1),
            rows: 0,
        })
    }

    pub fn write_row(&mut self, row: &[String]) -> Result<()> {
        self.inner.write_record(row)?;
        self.rows += 1;
        if self.rows.is_multiple_of(self.flush_every) {
            self.flush()?;
        }
        Ok(())
    }

    pub fn flush(&mut self) -> Result<()> {
        self.inner
            .flush()
            .map_err(|e| CliError::io(PathBuf::from("metrics.csv"), e))
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn into_inner(self) -> Result<W> {
        self.inner
            .into_inner()
            .map_err(|e| CliError::io(PathBuf::from("metrics.csv"), e.into_error()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Completed,
    Aborted,
}

/// Contents of `summary.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub status: RunStatus,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    pub steps_completed: usize,
    pub wall_time_s: f64,
    /// RL: per-objective mean reward of the last step. Theory: the losses at
    /// the final iterate.
    pub final_values: Vec<f64>,
    /// RL only: per-objective mean reward over the trailing window.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub trailing_reward_mean: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub trailing_window: Option<usize>,
    /// Theory only.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub final_theta: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub final_residual: Option<f64>,
    pub config: RunConfig,
}

impl Summary {
    pub fn write(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text + "\n").map_err(|e| CliError::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// Mean of each objective's reward over the last `window` reports.
pub fn trailing_mean(reports: &[Vec<f64>], window: usize) -> Vec<f64> {
    let Some(first) = reports.first() else {
        return Vec::new();
    };
    let tail = &reports[reports.len().saturating_sub(window.max(1))..];
    (0..first.len())
        .map(|i| tail.iter().map(|r| r[i]).sum::<f64>() / tail.len() as f64)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn report(step: usize) -> TrainStepReport {
        TrainStepReport {
            step,
            reward_mean: vec![0.1, 0.2],
            reward_std: vec![0.0, 1.0],
            noon_adv_mean: vec![0.5, 0.25],
            agg_adv_mean: 0.125,
            weight_mean: vec![0.5, 0.5],
            kl: 1e-3,
            policy_loss: -0.3,
            value_loss: vec![0.01, 0.02],
            epochs_run: 4,
            stationarity_residual: Some(0.7),
        }
    }

    #[test]
    fn header_and_rows_agree() {
        let mut w = MetricsWriter::new(Vec::new(), &rl_header(2, true), 1).unwrap();
        w.write_row(&rl_row(&report(0), true)).unwrap();
        w.write_row(&rl_row(&report(1), true)).unwrap();
        let text = String::from_utf8(w.into_inner().unwrap()).unwrap();
        let mut rdr = csv::Reader::from_reader(text.as_bytes());
        let header = rdr.headers().unwrap().clone();
        assert_eq!(header.len(), rl_header(2, true).len());
        let rows: Vec<_> = rdr.records().map(|r| r.unwrap()).collect();
        assert_eq!(rows.len(), 2);
        assert_eq!(rows[1].len(), header.len());
        let kl: f64 = rows[0][header.iter().position(|h| h == "kl").unwrap()].parse().unwrap();
        assert_eq!(kl, 1e-3);
    }

    #[test]
    fn floats_round_trip() {
        for x in [0.1 + 0.2, 1.0 / 3.0, -2.5e-300, 6.02e23, f64::MAX] {
            assert_eq!(fmt_f64(x).parse::<f64>().unwrap().to_bits(), x.to_bits());
        }
    }

    #[test]
    fn trailing_mean_uses_the_tail() {
        let rs: Vec<Vec<f64>> = (0..10).map(|k| vec![k as f64, 1.0]).collect();
        assert_eq!(trailing_mean(&rs, 4), vec![7.5, 1.0]);
        assert_eq!(trailing_mean(&rs, 100), vec![4.5, 1.0]);
    }
}
