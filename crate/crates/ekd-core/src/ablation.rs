//! The six-configuration ablation grid (fixed vs evolutionary teacher,
//! guided modules per stream) plus the optional guided-pair-count sweep.
//!
//! Rows share one seed, so data order and student initialization are
//! identical across rows and differences isolate the toggles.

use std::io::Write;
use std::path::Path;

use crate::config::ExperimentConfig;
use crate::error::{EkdError, Result};
use crate::runner;
use crate::train::TeacherMode;

#[derive(Debug, Clone)]
pub struct AblationRow {
    pub name: &'static str,
    pub dir_name: &'static str,
    pub teacher_mode: TeacherMode,
    pub guided_teacher: bool,
    pub guided_student: bool,
}

/// The six rows of the standard grid. "ET" is the evolutionary teacher,
/// "T_G"/"S_G" guided modules on the teacher/student stream.
pub fn grid() -> Vec<AblationRow> {
    vec![
        AblationRow {
            name: "KD",
            dir_name: "kd",
            teacher_mode: TeacherMode::Fixed,
            guided_teacher: false,
            guided_student: false,
        },
        AblationRow {
            name: "KD+ET",
            dir_name: "kd_et",
            teacher_mode: TeacherMode::Evolutionary,
            guided_teacher: false,
            guided_student: false,
        },
        AblationRow {
            name: "KD+S_G",
            dir_name: "kd_sg",
            teacher_mode: TeacherMode::Fixed,
            guided_teacher: false,
            guided_student: true,
        },
        AblationRow {
            name: "KD+S_G+ET",
            dir_name: "kd_sg_et",
            teacher_mode: TeacherMode::Evolutionary,
            guided_teacher: false,
            guided_student: true,
        },
        AblationRow {
            name: "KD+T_G+S_G",
            dir_name: "kd_tg_sg",
            teacher_mode: TeacherMode::Fixed,
            guided_teacher: true,
            guided_student: true,
        },
        AblationRow {
            name: "KD+T_G+S_G+ET (EKD)",
            dir_name: "ekd",
            teacher_mode: TeacherMode::Evolutionary,
            guided_teacher: true,
            guided_student: true,
        },
    ]
}

#[derive(Debug, Clone, Default)]
pub struct AblationOptions {
    /// Additionally run the full EKD configuration at every guided-pair
    /// count 0..C-1.
    pub sweep_pairs: bool,
    /// Epoch budget for the pretraining runs that produce fixed teachers
    /// (defaults to the experiment's own budget).
    pub pretrain_epochs: Option<u32>,
}

#[derive(Debug, Clone)]
pub struct AblationOutcome {
    pub name: String,
    pub final_student_test_acc: Option<f64>,
    pub best_student_test_acc: Option<f64>,
    pub error: Option<String>,
}

/// Runs every grid row (and the optional sweep) under `out_dir`, one
/// subdirectory per row. A failing row is recorded and the remaining rows
/// continue. Returns the outcomes, which are also written to
/// `out_dir/ablation.csv`.
pub fn run_grid(
    base: &ExperimentConfig,
    out_dir: &Path,
    options: &AblationOptions,
) -> Result<Vec<AblationOutcome>> {
    base.validate()?;
    std::fs::create_dir_all(out_dir).map_err(EkdError::io(out_dir))?;

    // Fixed-teacher rows need pretrained checkpoints: a plain backbone for
    // rows without teacher guidance, a guided stream for rows with it.
    let needs_plain = grid()
        .iter()
        .any(|r| r.teacher_mode == TeacherMode::Fixed && !r.guided_teacher);
    let needs_guided = grid()
        .iter()
        .any(|r| r.teacher_mode == TeacherMode::Fixed && r.guided_teacher);

    let pretrain = |pairs: usize, dir: &str| -> Result<std::path::PathBuf> {
        let run_dir = out_dir.join(dir);
        let artifacts = runner::run_pretraining(base, &run_dir, pairs, options.pretrain_epochs)?;
        Ok(artifacts.last_checkpoint)
    };
    let plain_ckpt = if needs_plain {
        Some(pretrain(0, "pretrain_plain")?)
    } else {
        None
    };
    let guided_ckpt = if needs_guided {
        let pipeline = runner::build_pipeline(base)?;
        let teacher_spec = runner::resolve_teacher_spec(base, &pipeline)?;
        let pairs = base
            .train
            .guided_pairs
            .unwrap_or(teacher_spec.num_blocks() - 1);
        Some(pretrain(pairs, "pretrain_guided")?)
    } else {
        None
    };

    let mut outcomes = Vec::new();
    let mut run_row = |name: String, dir_name: String, exp: ExperimentConfig| {
        let run_dir = out_dir.join(&dir_name);
        match runner::run_training(&exp, &run_dir) {
            Ok(artifacts) => outcomes.push(AblationOutcome {
                name,
                final_student_test_acc: artifacts.final_student_test_acc,
                best_student_test_acc: artifacts.best_student_test_acc,
                error: None,
            }),
            Err(e) => {
                log::warn!("ablation row {name} failed: {e}");
                outcomes.push(AblationOutcome {
                    name,
                    final_student_test_acc: None,
                    best_student_test_acc: None,
                    error: Some(e.to_string()),
                });
            }
        }
    };

    for row in grid() {
        let mut exp = base.clone();
        exp.train.teacher_mode = row.teacher_mode;
        exp.train.guided_teacher = row.guided_teacher;
        exp.train.guided_student = row.guided_student;
        exp.train.teacher_checkpoint = match row.teacher_mode {
            TeacherMode::Fixed => {
                let ckpt = if row.guided_teacher {
                    guided_ckpt.clone()
                } else {
                    plain_ckpt.clone()
                };
                Some(ckpt.expect("pretraining ran for fixed rows"))
            }
            _ => None,
        };
        run_row(row.name.to_string(), row.dir_name.to_string(), exp);
    }

    if options.sweep_pairs {
        let pipeline = runner::build_pipeline(base)?;
        let student_spec = runner::resolve_student_spec(base, &pipeline)?;
        for pairs in 0..student_spec.num_blocks() {
            let mut exp = base.clone();
            exp.train.teacher_mode = TeacherMode::Evolutionary;
            exp.train.guided_teacher = true;
            exp.train.guided_student = true;
            exp.train.guided_pairs = Some(pairs);
            exp.train.teacher_checkpoint = None;
            run_row(format!("pairs_{pairs}"), format!("pairs_{pairs}"), exp);
        }
    }

    write_summary(&out_dir.join("ablation.csv"), &outcomes)?;
    Ok(outcomes)
}

fn write_summary(path: &Path, outcomes: &[AblationOutcome]) -> Result<()> {
    let mut out = std::fs::File::create(path).map_err(EkdError::io(path))?;
    writeln!(out, "name,final_student_test_acc,best_student_test_acc,error")
        .map_err(EkdError::io(path))?;
    for o in outcomes {
        writeln!(
            out,
            "{},{},{},{}",
            o.name,
            o.final_student_test_acc.map(|v| v.to_string()).unwrap_or_default(),
            o.best_student_test_acc.map(|v| v.to_string()).unwrap_or_default(),
            o.error.as_deref().unwrap_or(""),
        )
        .map_err(EkdError::io(path))?;
    }
    Ok(())
}
