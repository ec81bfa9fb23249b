//! Per-step metrics CSV.

use std::io::Write;

use crate::error::{BimError, Result};

pub const METRICS_HEADER: &str = "step,epoch,block_id,loss,lr,live_bytes,peak_bytes";

/// Block id of the row that aggregates a whole step.
pub const AGGREGATE_BLOCK: i64 = -1;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricsRow {
    pub step: u64,
    pub epoch: u64,
    pub block_id: i64,
    pub loss: f64,
    pub lr: f64,
    pub live_bytes: usize,
    pub peak_bytes: usize,
}

pub struct MetricsWriter<W: Write> {
    out: W,
    rows: usize,
}

impl<W: Write> MetricsWriter<W> {
    /// Writes the header immediately.
    pub fn new(mut out: W) -> Result<Self> {
        writeln!(out, "{METRICS_HEADER}")?;
        Ok(Self { out, rows: 0 })
    }

    /// Refuses non-finite values so no NaN or Inf ever reaches the file.
    pub fn write(&mut self, r: &MetricsRow) -> Result<()> {
        if !r.loss.is_finite() || !r.lr.is_finite() {
            return Err(BimError::Numeric(format!(
                "step {} block {}: loss {} lr {}",
                r.step, r.block_id, r.loss, r.lr
            )));
        }
        writeln!(
            self.out,
            "{},{},{},{},{},{},{}",
            r.step, r.epoch, r.block_id, r.loss, r.lr, r.live_bytes, r.peak_bytes
        )?;
        self.rows += 1;
        Ok(())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn flush(&mut self) -> Result<()> {
        self.out.flush()?;
        Ok(())
    }

    pub fn into_inner(self) -> W {
        self.out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_and_rows() {
        let mut w = MetricsWriter::new(Vec::new()).unwrap();
        let row = MetricsRow {
            step: 3,
            epoch: 0,
            block_id: AGGREGATE_BLOCK,
            loss: 0.25,
            lr: 1e-3,
            live_bytes: 0,
            peak_bytes: 4096,
        };
        w.write(&row).unwrap();
        let nan = MetricsRow { loss: f64::NAN, ..row };
        assert!(matches!(w.write(&nan), Err(BimError::Numeric(_))));
        let text = String::from_utf8(w.into_inner()).unwrap();
        assert_eq!(
            text,
            "step,epoch,block_id,loss,lr,live_bytes,peak_bytes\n3,0,-1,0.25,0.001,0,4096\n"
        );
    }
}
