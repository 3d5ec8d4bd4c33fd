use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::LossBreakdown;
use crate::{CoreError, Result};

/// One line of the training log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub epoch: u64,
    #[serde(flatten)]
    pub breakdown: LossBreakdown,
}

impl StepRecord {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("plain numeric record serializes")
    }
}

/// Append-only JSON-lines log, flushed per record.
pub struct JsonlLog {
    path: PathBuf,
    out: BufWriter<File>,
}

impl JsonlLog {
    pub fn create(path: &Path) -> Result<Self> {
        let f = File::create(path).map_err(|e| CoreError::io(path, e))?;
        Ok(Self {
            path: path.to_path_buf(),
            out: BufWriter::new(f),
        })
    }

    /// Opens for appending, as when resuming.
    pub fn append(path: &Path) -> Result<Self> {
        let f = std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| CoreError::io(path, e))?;
        Ok(Self {
            path: path.to_path_buf(),
            out: BufWriter::new(f),
        })
    }

    pub fn write(&mut self, rec: &StepRecord) -> Result<()> {
        writeln!(self.out, "{}", rec.to_json())
            .and_then(|_| self.out.flush())
            .map_err(|e| CoreError::io(&self.path, e))
    }
}

pub fn read_jsonl(path: &Path) -> Result<Vec<StepRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| CoreError::io(path, e))?;
    let mut offset = 0u64;
    let mut out = Vec::new();
    for line in text.lines() {
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(line).map_err(|e| CoreError::Format {
                path: path.display().to_string(),
                offset,
                detail: e.to_string(),
            })?);
        }
        offset += line.len() as u64 + 1;
    }
    Ok(out)
}

/// Per-epoch means of the tracked scalars.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct EpochSummary {
    rows: Vec<(u64, usize, [f64; 12])>,
}

impl EpochSummary {
    pub fn push(&mut self, rec: &StepRecord) {
        let v = rec.breakdown.values();
        match self.rows.last_mut() {
            Some((e, n, sum)) if *e == rec.epoch => {
                *n += 1;
                sum.iter_mut().zip(v).for_each(|(s, x)| *s += x);
            }
            _ => self.rows.push((rec.epoch, 1, v)),
        }
    }

    /// `(epoch, steps, means)` per epoch seen.
    pub fn means(&self) -> Vec<(u64, usize, [f64; 12])> {
        self.rows
            .iter()
            .map(|&(e, n, s)| (e, n, s.map(|x| x / n as f64)))
            .collect()
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let io = |e: csv::Error| CoreError::Format {
            path: path.display().to_string(),
            offset: 0,
            detail: e.to_string(),
        };
        let mut w = csv::Writer::from_path(path).map_err(io)?;
        let mut header = vec!["epoch", "steps"];
        header.extend(LossBreakdown::FIELDS);
        w.write_record(&header).map_err(io)?;
        for (e, n, m) in self.means() {
            let mut rec = vec![e.to_string(), n.to_string()];
            rec.extend(m.iter().map(|x| x.to_string()));
            w.write_record(&rec).map_err(io)?;
        }
        w.flush().map_err(|e| CoreError::io(path, e))
    }
}
