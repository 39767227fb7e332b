//! Line-delimited metrics records: one self-contained JSON object per line,
//! append-only, monotone in (run id, epoch).

use std::io::Write;
use std::path::PathBuf;

use serde_json::{json, Value};

use crate::error::Result;
use crate::eval::EvalEpochRecord;
use crate::search::EpochRecord;

pub struct MetricsWriter {
    file: std::fs::File,
    run_id: String,
    /// Zero out wall-clock fields so reruns are byte-identical.
    deterministic: bool,
}

impl MetricsWriter {
    pub fn create(path: &PathBuf, run_id: &str, deterministic: bool) -> Result<Self> {
        Ok(MetricsWriter {
            file: std::fs::File::create(path)?,
            run_id: run_id.to_string(),
            deterministic,
        })
    }

    fn clock(&self, seconds: f64) -> f64 {
        if self.deterministic {
            0.0
        } else {
            seconds
        }
    }

    fn write_value(&mut self, value: Value) -> Result<()> {
        let line = serde_json::to_string(&value).expect("metrics record serializes");
        writeln!(self.file, "{line}")?;
        Ok(())
    }

    pub fn search_epoch(&mut self, rec: &EpochRecord) -> Result<()> {
        let v = json!({
            "run_id": self.run_id,
            "phase": "search",
            "epoch": rec.epoch,
            "train_loss": rec.train_loss,
            "val_loss": if rec.val_loss.is_finite() { Some(rec.val_loss) } else { None },
            "k_s": rec.ks,
            "lambda": rec.lambda,
            "violation": rec.violation,
            "lr": rec.lr,
            "wall_clock_s": self.clock(rec.wall_clock_s),
            "val_accuracy": rec.val_accuracy,
        });
        self.write_value(v)
    }

    pub fn eval_epoch(&mut self, rec: &EvalEpochRecord) -> Result<()> {
        let v = json!({
            "run_id": self.run_id,
            "phase": "eval",
            "epoch": rec.epoch,
            "train_loss": rec.train_loss,
            "test_accuracy": rec.test_accuracy,
            "lr": rec.lr,
            "wall_clock_s": self.clock(rec.wall_clock_s),
        });
        self.write_value(v)
    }

    pub fn summary(&mut self, phase: &str, fields: Value) -> Result<()> {
        let mut v = json!({
            "run_id": self.run_id,
            "phase": phase,
            "epoch": Value::Null,
        });
        if let (Value::Object(base), Value::Object(extra)) = (&mut v, fields) {
            for (k, val) in extra {
                base.insert(k, val);
            }
        }
        self.write_value(v)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn records_are_one_json_object_per_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("metrics.jsonl");
        let mut w = MetricsWriter::create(&path, "abc-s1", true).unwrap();
        w.search_epoch(&EpochRecord {
            epoch: 0,
            train_loss: 1.0,
            val_loss: 1.5,
            ks: 1234.0,
            lambda: 0.1,
            violation: 0.2,
            lr: 0.15,
            wall_clock_s: 3.2,
            val_accuracy: Some(0.8),
        })
        .unwrap();
        w.eval_epoch(&EvalEpochRecord {
            epoch: 1,
            train_loss: 0.4,
            test_accuracy: 0.9,
            lr: 0.02,
            wall_clock_s: 1.0,
        })
        .unwrap();
        drop(w);
        let text = std::fs::read_to_string(&path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 2);
        for line in lines {
            let v: Value = serde_json::from_str(line).unwrap();
            assert_eq!(v["run_id"], "abc-s1");
            // deterministic mode zeroes the clock
            assert_eq!(v["wall_clock_s"], 0.0);
        }
    }
}
