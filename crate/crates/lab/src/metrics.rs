//! JSON-lines metric logs and a wall-clock training observer.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use textalign_core::trainer::{MetricRecord, Model, TrainHooks};

use crate::error::{IoContext, Result};

pub fn to_jsonl(records: &[MetricRecord]) -> Result<String> {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    Ok(out)
}

pub fn write_metrics(path: impl AsRef<Path>, records: &[MetricRecord]) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, to_jsonl(records)?).at(path)
}

pub fn read_metrics(path: impl AsRef<Path>) -> Result<Vec<MetricRecord>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).at(path)?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| Ok(serde_json::from_str(l)?))
        .collect()
}

/// Records with the wall-clock field zeroed, for determinism comparisons.
pub fn without_wall_time(records: &[MetricRecord]) -> Vec<MetricRecord> {
    records
        .iter()
        .map(|r| MetricRecord {
            wall_time: 0.0,
            ..r.clone()
        })
        .collect()
}

/// Times a run, optionally streams each epoch's record to a JSON-lines
/// file and reports progress on stderr.
pub struct RunHooks {
    start: Instant,
    sink: Option<(PathBuf, BufWriter<File>)>,
    label: Option<String>,
}

impl RunHooks {
    pub fn new() -> Self {
        RunHooks {
            start: Instant::now(),
            sink: None,
            label: None,
        }
    }

    pub fn with_log(mut self, path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref().to_path_buf();
        let file = File::create(&path).at(&path)?;
        self.sink = Some((path, BufWriter::new(file)));
        Ok(self)
    }

    /// Prints one progress line per epoch, prefixed by `label`.
    pub fn with_progress(mut self, label: impl Into<String>) -> Self {
        self.label = Some(label.into());
        self
    }
}

impl Default for RunHooks {
    fn default() -> Self {
        Self::new()
    }
}

impl TrainHooks for RunHooks {
    fn elapsed_seconds(&mut self) -> f64 {
        self.start.elapsed().as_secs_f64()
    }

    fn on_epoch(&mut self, record: &MetricRecord, _model: &Model<f32>) -> textalign_core::Result<()> {
        if let Some((path, w)) = &mut self.sink {
            let line = serde_json::to_string(record).expect("metric records serialize");
            if let Err(e) = writeln!(w, "{line}").and_then(|_| w.flush()) {
                return Err(textalign_core::Error::Config(format!("{}: {e}", path.display())));
            }
        }
        if let Some(label) = &self.label {
            eprintln!(
                "[{label}] epoch {:>3}  l_cls {:.4}  l_txt {:.4}  alpha {:.4}  lambda {:.3}  train {:.3}  eval {}  {:.1}s",
                record.epoch,
                record.l_cls,
                record.l_txt,
                record.alpha_adapt,
                record.lambda_t,
                record.train_accuracy,
                record.eval_accuracy.map_or("-".to_string(), |a| format!("{a:.3}")),
                record.wall_time
            );
        }
        Ok(())
    }
}
