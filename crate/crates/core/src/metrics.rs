//! Metrics CSV: one row per training step, fixed header, byte-stable
//! formatting (shortest round-trip float representation; negative zero is
//! canonicalized).

use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("metrics io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("metrics parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },
}

pub const HEADER: &str =
    "step,mean_reward,mean_resp_len,caption_kl,entropy,mean_abs_adv,w_min,w_mean,w_max,surrogate,total_loss";

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricsRow {
    pub step: usize,
    pub mean_reward: f64,
    pub mean_resp_len: f64,
    pub caption_kl: f64,
    pub entropy: f64,
    pub mean_abs_adv: f64,
    pub w_min: f64,
    pub w_mean: f64,
    pub w_max: f64,
    pub surrogate: f64,
    pub total_loss: f64,
}

impl MetricsRow {
    pub fn metric(&self, name: &str) -> Option<f64> {
        Some(match name {
            "mean_reward" => self.mean_reward,
            "mean_resp_len" => self.mean_resp_len,
            "caption_kl" => self.caption_kl,
            "entropy" => self.entropy,
            "mean_abs_adv" => self.mean_abs_adv,
            "w_min" => self.w_min,
            "w_mean" => self.w_mean,
            "w_max" => self.w_max,
            "surrogate" => self.surrogate,
            "total_loss" => self.total_loss,
            _ => return None,
        })
    }
}

fn fmt(v: f64) -> String {
    // +0.0 collapses -0 into 0 so the two objective routes cannot differ
    // in a sign-of-zero byte
    format!("{}", v + 0.0)
}

pub struct MetricsWriter {
    file: std::io::BufWriter<std::fs::File>,
    path: String,
}

impl MetricsWriter {
    pub fn create(path: &Path) -> Result<Self, MetricsError> {
        let file = std::fs::File::create(path)
            .map_err(|source| MetricsError::Io { path: path.display().to_string(), source })?;
        let mut w = MetricsWriter {
            file: std::io::BufWriter::new(file),
            path: path.display().to_string(),
        };
        w.raw_line(HEADER)?;
        Ok(w)
    }

    fn raw_line(&mut self, line: &str) -> Result<(), MetricsError> {
        writeln!(self.file, "{line}")
            .and_then(|_| self.file.flush())
            .map_err(|source| MetricsError::Io { path: self.path.clone(), source })
    }

    pub fn write_row(&mut self, r: &MetricsRow) -> Result<(), MetricsError> {
        let line = format!(
            "{},{},{},{},{},{},{},{},{},{},{}",
            r.step,
            fmt(r.mean_reward),
            fmt(r.mean_resp_len),
            fmt(r.caption_kl),
            fmt(r.entropy),
            fmt(r.mean_abs_adv),
            fmt(r.w_min),
            fmt(r.w_mean),
            fmt(r.w_max),
            fmt(r.surrogate),
            fmt(r.total_loss),
        );
        self.raw_line(&line)
    }
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRow>, MetricsError> {
    let file = std::fs::File::open(path)
        .map_err(|source| MetricsError::Io { path: path.display().to_string(), source })?;
    let reader = BufReader::new(file);
    let mut rows = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line.map_err(|source| MetricsError::Io { path: path.display().to_string(), source })?;
        if idx == 0 {
            if line != HEADER {
                return Err(MetricsError::Parse { line: 1, msg: format!("bad header `{line}`") });
            }
            continue;
        }
        if line.is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split(',').collect();
        if parts.len() != 11 {
            return Err(MetricsError::Parse {
                line: idx + 1,
                msg: format!("expected 11 columns, got {}", parts.len()),
            });
        }
        let pf = |i: usize| -> Result<f64, MetricsError> {
            parts[i].parse().map_err(|_| MetricsError::Parse {
                line: idx + 1,
                msg: format!("bad float `{}`", parts[i]),
            })
        };
        rows.push(MetricsRow {
            step: parts[0].parse().map_err(|_| MetricsError::Parse {
                line: idx + 1,
                msg: format!("bad step `{}`", parts[0]),
            })?,
            mean_reward: pf(1)?,
            mean_resp_len: pf(2)?,
            caption_kl: pf(3)?,
            entropy: pf(4)?,
            mean_abs_adv: pf(5)?,
            w_min: pf(6)?,
            w_mean: pf(7)?,
            w_max: pf(8)?,
            surrogate: pf(9)?,
            total_loss: pf(10)?,
        });
    }
    Ok(rows)
}
