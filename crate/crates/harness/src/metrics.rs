//! Per-step metrics log, one JSON object per line.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::Result;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub step: u64,
    pub epoch: u64,
    pub l_face_mse: f64,
    pub l_eye_mse: f64,
    pub l_angle: f64,
    pub l_scale: f64,
    pub l_uda: f64,
    pub l_total: f64,
    /// Mean angular error of the face predictions on this step's batch.
    pub train_mae_deg: f64,
    /// Set on the last step of each epoch.
    pub eval_mae_target_deg: Option<f64>,
    pub eval_mae_shifted_deg: Option<f64>,
    pub wall_ms: u64,
}

impl MetricsRecord {
    pub fn is_finite(&self) -> bool {
        [self.l_face_mse, self.l_eye_mse, self.l_angle, self.l_scale, self.l_uda, self.l_total, self.train_mae_deg]
            .iter()
            .chain(self.eval_mae_target_deg.iter())
            .chain(self.eval_mae_shifted_deg.iter())
            .all(|v| v.is_finite())
    }
}

pub struct MetricsWriter {
    out: BufWriter<File>,
}

impl MetricsWriter {
    pub fn create(path: &Path) -> Result<Self> {
        Ok(Self { out: BufWriter::new(File::create(path)?) })
    }

    pub fn append(&mut self, r: &MetricsRecord) -> Result<()> {
        serde_json::to_writer(&mut self.out, r)?;
        self.out.write_all(b"\n")?;
        Ok(())
    }

    pub fn flush(&mut self) -> Result<()> {
        self.out.flush()?;
        Ok(())
    }
}

pub fn read_metrics(text: &str) -> Result<Vec<MetricsRecord>> {
    text.lines().filter(|l| !l.trim().is_empty()).map(|l| Ok(serde_json::from_str(l)?)).collect()
}

/// The log with every wall-clock field zeroed, for reproducibility checks.
pub fn without_wall_clock(text: &str) -> Result<String> {
    let mut out = String::new();
    for mut r in read_metrics(text)? {
        r.wall_ms = 0;
        out.push_str(&serde_json::to_string(&r)?);
        out.push('\n');
    }
    Ok(out)
}
