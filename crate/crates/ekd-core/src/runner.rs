//! Assembles pipelines, streams and trainers from an experiment config and
//! drives complete runs (the layer the CLI calls into).

use std::path::Path;

use crate::checkpoint;
use crate::config::ExperimentConfig;
use crate::data::DataPipeline;
use crate::error::{EkdError, Result};
use crate::loss::StreamRole;
use crate::nn::{BackboneSpec, Stream};
use crate::seeding::seed_for;
use crate::train::{
    train_single_stream, RunArtifacts, TeacherMode, TeacherSource, TrainConfig, Trainer,
};

pub fn build_pipeline(exp: &ExperimentConfig) -> Result<DataPipeline> {
    DataPipeline::from_spec(
        &exp.dataset,
        exp.train.seed,
        exp.train.batch_size,
        exp.train.data_workers,
    )
}

pub fn resolve_teacher_spec(exp: &ExperimentConfig, pipeline: &DataPipeline) -> Result<BackboneSpec> {
    exp.teacher.resolve(
        pipeline.channels(),
        pipeline.resolution(),
        pipeline.num_classes(),
    )
}

pub fn resolve_student_spec(exp: &ExperimentConfig, pipeline: &DataPipeline) -> Result<BackboneSpec> {
    exp.student.resolve(
        pipeline.channels(),
        pipeline.resolution(),
        pipeline.num_classes(),
    )
}

fn load_fixed_teacher(config: &TrainConfig, expected: &BackboneSpec) -> Result<Stream<f32>> {
    let path = config
        .teacher_checkpoint
        .as_ref()
        .expect("validated by TrainConfig::validate");
    let (stream, meta) = checkpoint::load_stream(path)?;
    if meta.backbone != *expected {
        return Err(EkdError::Checkpoint(format!(
            "{}: checkpoint architecture does not match the configured teacher backbone",
            path.display()
        )));
    }
    Ok(stream)
}

/// Runs one full training experiment into `run_dir`: snapshot, metrics,
/// step log, checkpoints, exported student.
pub fn run_training(exp: &ExperimentConfig, run_dir: &Path) -> Result<RunArtifacts> {
    exp.validate()?;
    std::fs::create_dir_all(run_dir).map_err(EkdError::io(run_dir))?;
    exp.write_snapshot(&run_dir.join("config.snapshot.toml"))?;
    let pipeline = build_pipeline(exp)?;
    let student_spec = resolve_student_spec(exp, &pipeline)?;
    let mut trainer = match exp.train.teacher_mode {
        TeacherMode::Evolutionary => {
            let teacher_spec = resolve_teacher_spec(exp, &pipeline)?;
            Trainer::new(
                exp.train.clone(),
                TeacherSource::Evolutionary(&teacher_spec),
                &student_spec,
                pipeline,
            )?
        }
        TeacherMode::Fixed => {
            exp.train.validate()?;
            let teacher_spec = resolve_teacher_spec(exp, &pipeline)?;
            let stream = load_fixed_teacher(&exp.train, &teacher_spec)?;
            Trainer::new(
                exp.train.clone(),
                TeacherSource::Fixed(stream),
                &student_spec,
                pipeline,
            )?
        }
        TeacherMode::None => Trainer::new(
            exp.train.clone(),
            TeacherSource::None,
            &student_spec,
            pipeline,
        )?,
    };
    trainer.train(run_dir)
}

/// Trains a single stream (the teacher role by default) on its own losses,
/// producing the checkpoint consumed by fixed-teacher runs. `guided_pairs`
/// = 0 degenerates to plain cross-entropy training of the backbone head.
pub fn run_pretraining(
    exp: &ExperimentConfig,
    run_dir: &Path,
    guided_pairs: usize,
    epochs_override: Option<u32>,
) -> Result<RunArtifacts> {
    exp.validate()?;
    std::fs::create_dir_all(run_dir).map_err(EkdError::io(run_dir))?;
    let mut config = exp.train.clone();
    if let Some(epochs) = epochs_override {
        config.total_epochs = epochs;
    }
    // Pretraining is teacher-mode-agnostic; silence the fixed-mode
    // checkpoint requirement.
    config.teacher_mode = TeacherMode::None;
    config.teacher_checkpoint = None;
    let snapshot = ExperimentConfig {
        train: config.clone(),
        ..exp.clone()
    };
    snapshot.write_snapshot(&run_dir.join("config.snapshot.toml"))?;
    let pipeline = build_pipeline(&snapshot)?;
    let teacher_spec = resolve_teacher_spec(&snapshot, &pipeline)?;
    let mut stream = Stream::build(
        &teacher_spec,
        guided_pairs.min(teacher_spec.num_blocks() - 1),
        seed_for(config.seed, "init/teacher"),
    )?;
    train_single_stream(&mut stream, StreamRole::Teacher, &config, &pipeline, run_dir)
}
