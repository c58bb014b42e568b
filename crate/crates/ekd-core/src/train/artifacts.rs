//! Run outputs: the epoch metrics CSV and the per-step loss log.
//!
//! `metrics.csv` has a frozen column order and deliberately excludes wall
//! clock time so that two runs with the same seed produce byte-identical
//! files; timing lives on the in-memory `EpochMetrics` rows.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::error::{EkdError, Result};
use crate::loss::LossReport;

/// Per-epoch summary of one run.
#[derive(Debug, Clone, Serialize)]
pub struct EpochMetrics {
    pub epoch: u32,
    pub lr: f64,
    pub teacher_train_acc: Option<f64>,
    pub teacher_test_acc: Option<f64>,
    pub student_train_acc: Option<f64>,
    pub student_test_acc: Option<f64>,
    /// teacher_test_acc - student_test_acc when both streams exist.
    pub capability_gap: Option<f64>,
    /// Mean per-step loss components over the epoch.
    pub teacher_loss: Option<LossReport>,
    pub student_loss: Option<LossReport>,
    pub wall_clock_seconds: f64,
}

pub const METRICS_CSV_HEADER: &str = "epoch,lr,teacher_train_acc,teacher_test_acc,student_train_acc,student_test_acc,capability_gap,teacher_l_d,teacher_l_f,teacher_l_g1,teacher_l_g2,teacher_l_g,teacher_l_l,teacher_total,student_l_d,student_l_f,student_l_g1,student_l_g2,student_l_g,student_l_l,student_total";

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn loss_cols(r: Option<&LossReport>) -> String {
    match r {
        Some(r) => format!(
            "{},{},{},{},{},{},{}",
            r.l_d, r.l_f, r.l_g1, r.l_g2, r.l_g, r.l_l, r.total
        ),
        None => ",,,,,,".into(),
    }
}

pub fn metrics_csv_row(m: &EpochMetrics) -> String {
    format!(
        "{},{},{},{},{},{},{},{},{}",
        m.epoch,
        m.lr,
        opt(m.teacher_train_acc),
        opt(m.teacher_test_acc),
        opt(m.student_train_acc),
        opt(m.student_test_acc),
        opt(m.capability_gap),
        loss_cols(m.teacher_loss.as_ref()),
        loss_cols(m.student_loss.as_ref()),
    )
}

pub struct MetricsWriter {
    path: PathBuf,
    out: BufWriter<File>,
}

impl MetricsWriter {
    pub fn create(path: &Path) -> Result<Self> {
        let file = File::create(path).map_err(EkdError::io(path))?;
        let mut out = BufWriter::new(file);
        writeln!(out, "{METRICS_CSV_HEADER}").map_err(EkdError::io(path))?;
        Ok(MetricsWriter {
            path: path.to_path_buf(),
            out,
        })
    }

    pub fn append(&mut self, m: &EpochMetrics) -> Result<()> {
        writeln!(self.out, "{}", metrics_csv_row(m)).map_err(EkdError::io(&self.path))?;
        self.out.flush().map_err(EkdError::io(&self.path))
    }
}

/// One line per training step in the JSONL loss log.
#[derive(Debug, Serialize)]
pub struct StepRecord<'a> {
    pub step: u64,
    pub epoch: u32,
    pub lr: f64,
    pub teacher: Option<&'a LossReport>,
    pub student: &'a LossReport,
}

pub struct StepLogger {
    path: PathBuf,
    out: BufWriter<File>,
}

impl StepLogger {
    pub fn create(path: &Path) -> Result<Self> {
        let file = File::create(path).map_err(EkdError::io(path))?;
        Ok(StepLogger {
            path: path.to_path_buf(),
            out: BufWriter::new(file),
        })
    }

    pub fn append(&mut self, record: &StepRecord) -> Result<()> {
        let line = serde_json::to_string(record)
            .map_err(|e| EkdError::Data(format!("step log encode: {e}")))?;
        writeln!(self.out, "{line}").map_err(EkdError::io(&self.path))
    }

    pub fn flush(&mut self) -> Result<()> {
        self.out.flush().map_err(EkdError::io(&self.path))
    }
}

/// Paths and summary numbers produced by one training run.
#[derive(Debug, Clone)]
pub struct RunArtifacts {
    pub run_dir: PathBuf,
    pub metrics: Vec<EpochMetrics>,
    pub metrics_csv: PathBuf,
    pub steps_log: PathBuf,
    pub last_checkpoint: PathBuf,
    pub best_checkpoint: PathBuf,
    /// Exported student backbone (dual-stream runs only).
    pub student_export: Option<PathBuf>,
    pub best_student_test_acc: Option<f64>,
    pub final_student_test_acc: Option<f64>,
    pub final_teacher_test_acc: Option<f64>,
}
