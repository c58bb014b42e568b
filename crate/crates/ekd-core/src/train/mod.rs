//! The training loop: per batch, the evolutionary teacher updates first from
//! its own within-stream and classification losses, then the student updates
//! against the freshly updated teacher's detached outputs on the same batch.

mod artifacts;
mod sgd;

pub use artifacts::{
    metrics_csv_row, EpochMetrics, MetricsWriter, RunArtifacts, StepLogger, StepRecord,
    METRICS_CSV_HEADER,
};
pub use sgd::{lr_at, SgdState};

use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::checkpoint;
use crate::data::{DataPipeline, Split};
use crate::error::{EkdError, Result};
use crate::loss::{
    classification_loss, cross_stream_loss, total_stream_loss, within_stream_loss, LossReport,
    LossWeights, StreamRole, WithinStreamMode,
};
use crate::nn::{Backbone, BackboneSpec, BlockOutputs, Mode, Stream};
use crate::seeding::seed_for;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TeacherMode {
    /// Teacher trains online, one step ahead of the student each batch.
    Evolutionary,
    /// Teacher weights are loaded from a pretraining checkpoint and frozen.
    Fixed,
    /// No teacher; the student trains from its own losses only.
    None,
}

/// Every hyperparameter of one training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub data_workers: usize,
    pub lr_initial: f64,
    pub lr_decay_epochs: Vec<u32>,
    pub lr_decay_factor: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub temperature: f64,
    /// Scale the KL distillation terms by T^2.
    pub t_squared: bool,
    pub seed: u64,
    pub total_epochs: u32,
    pub teacher_mode: TeacherMode,
    pub guided_teacher: bool,
    pub guided_student: bool,
    /// Guided pairs per stream; `None` means C-1 (all attachment points).
    pub guided_pairs: Option<usize>,
    pub within_stream_mode: WithinStreamMode,
    pub loss_weights: LossWeights,
    /// Augmentation-stream offset for the student view; 0 keeps both streams
    /// on identical pixels, nonzero desynchronizes their crops/flips.
    pub desync: u64,
    /// Pretrained teacher checkpoint (required in fixed mode).
    pub teacher_checkpoint: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 64,
            data_workers: 8,
            lr_initial: 0.1,
            lr_decay_epochs: vec![75, 130, 180],
            lr_decay_factor: 0.1,
            momentum: 0.9,
            weight_decay: 5e-4,
            temperature: 4.0,
            t_squared: true,
            seed: 5,
            total_epochs: 200,
            teacher_mode: TeacherMode::Evolutionary,
            guided_teacher: true,
            guided_student: true,
            guided_pairs: None,
            within_stream_mode: WithinStreamMode::Simplified,
            loss_weights: LossWeights::default(),
            desync: 1,
            teacher_checkpoint: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(EkdError::Config("batch_size must be at least 1".into()));
        }
        if !(self.temperature > 0.0) {
            return Err(EkdError::Config("temperature must be positive".into()));
        }
        if self.total_epochs == 0 {
            return Err(EkdError::Config("total_epochs must be at least 1".into()));
        }
        if !self.lr_decay_epochs.windows(2).all(|w| w[0] < w[1]) {
            return Err(EkdError::Config(
                "lr_decay_epochs must be strictly increasing".into(),
            ));
        }
        if self.teacher_mode == TeacherMode::Fixed && self.teacher_checkpoint.is_none() {
            return Err(EkdError::Config(
                "fixed teacher mode requires teacher_checkpoint".into(),
            ));
        }
        Ok(())
    }

    fn pairs_for(&self, spec: &BackboneSpec, enabled: bool) -> usize {
        if !enabled {
            return 0;
        }
        self.guided_pairs
            .unwrap_or(spec.num_blocks() - 1)
            .min(spec.num_blocks() - 1)
    }
}

/// How the trainer obtains its teacher stream.
pub enum TeacherSource<'a> {
    /// Build a fresh teacher from this architecture and train it online.
    Evolutionary(&'a BackboneSpec),
    /// Use this pretrained stream with frozen weights.
    Fixed(Stream<f32>),
    None,
}

/// Loss reports and training-accuracy counts from one step.
#[derive(Debug, Clone)]
pub struct StepOutcome {
    pub teacher: Option<LossReport>,
    pub student: LossReport,
    pub teacher_correct: Option<usize>,
    pub student_correct: usize,
    pub batch_len: usize,
}

pub struct Trainer {
    pub config: TrainConfig,
    pub teacher: Option<Stream<f32>>,
    pub student: Stream<f32>,
    pub pipeline: DataPipeline,
    teacher_sgd: SgdState,
    student_sgd: SgdState,
    step: u64,
}

/// Index of the highest logit per row, lowest class winning ties, compared
/// against labels.
pub fn top1_correct(logits: &Tensor<f32>, labels: &[u32]) -> usize {
    let classes = logits.shape()[1];
    logits
        .data()
        .chunks_exact(classes)
        .zip(labels)
        .filter(|(row, &label)| {
            let mut best = 0usize;
            for (j, v) in row.iter().enumerate() {
                if *v > row[best] {
                    best = j;
                }
            }
            best == label as usize
        })
        .count()
}

/// Top-1 accuracy of a backbone over normalize-only batches.
pub fn evaluate_backbone(backbone: &mut Backbone<f32>, batches: &[crate::data::LabeledBatch]) -> Result<f64> {
    if batches.is_empty() {
        return Err(EkdError::Data("evaluation on an empty dataset".into()));
    }
    let mut correct = 0usize;
    let mut seen = 0usize;
    for batch in batches {
        let mut tape = Tape::new();
        let x = tape.leaf(batch.images.clone(), false)?;
        let (outs, _) = backbone.forward(&mut tape, x, Mode::Eval)?;
        correct += top1_correct(tape.value(outs.logits), &batch.labels);
        seen += batch.len();
    }
    Ok(correct as f64 / seen as f64)
}

/// Tags numeric-instability errors with the loss component being computed.
fn in_component<T>(r: Result<T>, component: &str) -> Result<T> {
    r.map_err(|e| match e {
        EkdError::NumericInstability { context } => EkdError::NumericInstability {
            context: format!("{component}: {context}"),
        },
        other => other,
    })
}

/// Restriction of two streams' outputs to the guided heads they share (by
/// attachment block). Heads without a partner contribute no cross-stream
/// term; the backbone pair always remains.
fn paired_heads(teacher: &BlockOutputs, student: &BlockOutputs) -> (BlockOutputs, BlockOutputs) {
    let common: Vec<usize> = teacher
        .guided
        .iter()
        .map(|g| g.block_index)
        .filter(|b| student.guided.iter().any(|s| s.block_index == *b))
        .collect();
    let filter = |outs: &BlockOutputs| BlockOutputs {
        block_features: Vec::new(),
        backbone_feature: outs.backbone_feature,
        backbone_logits: outs.backbone_logits,
        guided: outs
            .guided
            .iter()
            .filter(|g| common.contains(&g.block_index))
            .cloned()
            .collect(),
    };
    (filter(teacher), filter(student))
}

impl Trainer {
    pub fn new(
        config: TrainConfig,
        teacher: TeacherSource,
        student_spec: &BackboneSpec,
        pipeline: DataPipeline,
    ) -> Result<Trainer> {
        config.validate()?;
        let check_spec = |spec: &BackboneSpec, who: &str| -> Result<()> {
            if spec.input_channels != pipeline.channels()
                || spec.input_resolution != pipeline.resolution()
                || spec.num_classes != pipeline.num_classes()
            {
                return Err(EkdError::Config(format!(
                    "{who} backbone expects {}ch {}x{} / {} classes but the dataset provides {}ch {}x{} / {}",
                    spec.input_channels,
                    spec.input_resolution,
                    spec.input_resolution,
                    spec.num_classes,
                    pipeline.channels(),
                    pipeline.resolution(),
                    pipeline.resolution(),
                    pipeline.num_classes(),
                )));
            }
            Ok(())
        };
        check_spec(student_spec, "student")?;
        // Cross-stream guided pairs compare pooled features between streams,
        // so when both streams carry guided heads their backbones must agree
        // on the feature width.
        let check_feature_dims = |teacher_spec: &BackboneSpec, teacher_pairs: usize| -> Result<()> {
            let student_pairs = config.pairs_for(student_spec, config.guided_student);
            if teacher_pairs > 0
                && student_pairs > 0
                && teacher_spec.final_feature_dim != student_spec.final_feature_dim
            {
                return Err(EkdError::Config(format!(
                    "cross-stream guided feature loss requires equal final feature dims \
                     (teacher {}, student {})",
                    teacher_spec.final_feature_dim, student_spec.final_feature_dim
                )));
            }
            Ok(())
        };
        let teacher = match (config.teacher_mode, teacher) {
            (TeacherMode::Evolutionary, TeacherSource::Evolutionary(spec)) => {
                check_spec(spec, "teacher")?;
                let pairs = config.pairs_for(spec, config.guided_teacher);
                check_feature_dims(spec, pairs)?;
                Some(Stream::build(spec, pairs, seed_for(config.seed, "init/teacher"))?)
            }
            (TeacherMode::Fixed, TeacherSource::Fixed(stream)) => {
                check_spec(&stream.backbone.spec, "teacher")?;
                check_feature_dims(&stream.backbone.spec, stream.guided.len())?;
                Some(stream)
            }
            (TeacherMode::None, TeacherSource::None) => None,
            (mode, _) => {
                return Err(EkdError::Config(format!(
                    "teacher source does not match teacher_mode {mode:?}"
                )));
            }
        };
        let student = Stream::build(
            student_spec,
            config.pairs_for(student_spec, config.guided_student),
            seed_for(config.seed, "init/student"),
        )?;
        log::info!(
            "trainer: student {} params{}",
            student.param_count(),
            teacher
                .as_ref()
                .map(|t| format!(", teacher {} params", t.param_count()))
                .unwrap_or_default()
        );
        let momentum = config.momentum;
        let weight_decay = config.weight_decay;
        Ok(Trainer {
            config,
            teacher,
            student,
            pipeline,
            teacher_sgd: SgdState::new(momentum, weight_decay),
            student_sgd: SgdState::new(momentum, weight_decay),
            step: 0,
        })
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One iteration of the learning loop on the given sample indices:
    /// teacher forward/update first (evolutionary mode), then the student
    /// against the teacher's fresh detached outputs.
    pub fn train_step(&mut self, indices: &[u32], epoch: u32) -> Result<StepOutcome> {
        let cfg = &self.config;
        let lr = lr_at(epoch, cfg);
        let teacher_view = self.pipeline.train_batch(indices, epoch, 0)?;
        let student_view = if cfg.desync == 0 {
            teacher_view.clone()
        } else {
            self.pipeline.train_batch(indices, epoch, cfg.desync)?
        };

        let mut teacher_report = None;
        let mut teacher_correct = None;

        // Teacher phase: only the evolutionary teacher computes losses and
        // updates; a fixed teacher stays bitwise constant.
        if cfg.teacher_mode == TeacherMode::Evolutionary {
            let teacher = self.teacher.as_mut().expect("evolutionary mode has a teacher");
            let mut tape = Tape::new();
            let x = tape.leaf(teacher_view.images.clone(), false)?;
            let (outs, binding) = teacher.forward_collect(&mut tape, x, Mode::Train)?;
            let within = in_component(
                within_stream_loss(
                    &mut tape,
                    &outs,
                    cfg.temperature,
                    cfg.t_squared,
                    cfg.within_stream_mode,
                ),
                "teacher within-stream (l_d/l_f)",
            )?;
            let l_l = in_component(
                classification_loss(&mut tape, &outs, &teacher_view.labels),
                "teacher classification (l_l)",
            )?;
            let (total, report) = total_stream_loss(
                &mut tape,
                StreamRole::Teacher,
                within,
                None,
                l_l,
                &cfg.loss_weights,
            )?;
            tape.backward(total)?;
            let grads = binding.grads(&tape);
            teacher_correct = Some(top1_correct(tape.value(outs.backbone_logits), &teacher_view.labels));
            drop(tape);
            self.teacher_sgd
                .step(&mut teacher.params_flat_mut(), &grads, lr)?;
            teacher_report = Some(report);
        }

        // Student phase, on one tape: the (just updated) teacher's fresh
        // supervision forward plus the student's own recorded forward.
        let mut tape = Tape::new();
        let teacher_outs = match self.teacher.as_mut() {
            Some(teacher) => {
                let mode = match cfg.teacher_mode {
                    TeacherMode::Evolutionary => Mode::Supervise,
                    _ => Mode::Eval,
                };
                let x_t = tape.leaf(teacher_view.images.clone(), false)?;
                let (outs, _sup_binding) = teacher.forward_collect(&mut tape, x_t, mode)?;
                if cfg.teacher_mode == TeacherMode::Fixed {
                    teacher_correct =
                        Some(top1_correct(tape.value(outs.backbone_logits), &teacher_view.labels));
                }
                Some(outs)
            }
            None => None,
        };
        let x_s = tape.leaf(student_view.images.clone(), false)?;
        let (s_outs, s_binding) = self.student.forward_collect(&mut tape, x_s, Mode::Train)?;
        let within = in_component(
            within_stream_loss(
                &mut tape,
                &s_outs,
                cfg.temperature,
                cfg.t_squared,
                cfg.within_stream_mode,
            ),
            "student within-stream (l_d/l_f)",
        )?;
        let cross = match &teacher_outs {
            Some(t_outs) => {
                let (t_paired, s_paired) = paired_heads(t_outs, &s_outs);
                Some(in_component(
                    cross_stream_loss(&mut tape, &t_paired, &s_paired, cfg.temperature, cfg.t_squared),
                    "student cross-stream (l_g)",
                )?)
            }
            None => None,
        };
        let l_l = in_component(
            classification_loss(&mut tape, &s_outs, &student_view.labels),
            "student classification (l_l)",
        )?;
        let (total, student_report) = total_stream_loss(
            &mut tape,
            StreamRole::Student,
            within,
            cross,
            l_l,
            &cfg.loss_weights,
        )?;
        tape.backward(total)?;
        let grads = s_binding.grads(&tape);
        let student_correct = top1_correct(tape.value(s_outs.backbone_logits), &student_view.labels);
        drop(tape);
        self.student_sgd
            .step(&mut self.student.params_flat_mut(), &grads, lr)?;

        self.step += 1;
        Ok(StepOutcome {
            teacher: teacher_report,
            student: student_report,
            teacher_correct,
            student_correct,
            batch_len: indices.len(),
        })
    }

    /// Runs the full epoch budget, evaluating both streams after each epoch,
    /// appending metrics, checkpointing (last + best student accuracy), and
    /// finally exporting the student backbone.
    pub fn train(&mut self, run_dir: &Path) -> Result<RunArtifacts> {
        std::fs::create_dir_all(run_dir).map_err(EkdError::io(run_dir))?;
        let ckpt_dir = run_dir.join("checkpoints");
        std::fs::create_dir_all(&ckpt_dir).map_err(EkdError::io(&ckpt_dir))?;
        let metrics_csv = run_dir.join("metrics.csv");
        let steps_log = run_dir.join("steps.jsonl");
        let last_path = ckpt_dir.join("last.ekd1");
        let best_path = ckpt_dir.join("best.ekd1");
        let export_path = run_dir.join("student_export.ekd1");

        let mut metrics_writer = MetricsWriter::create(&metrics_csv)?;
        let mut step_logger = StepLogger::create(&steps_log)?;
        let mut metrics = Vec::with_capacity(self.config.total_epochs as usize);
        let mut best_acc = f64::NEG_INFINITY;

        for epoch in 0..self.config.total_epochs {
            let t0 = Instant::now();
            let lr = lr_at(epoch, &self.config);
            let mut seen = 0usize;
            let mut teacher_correct = 0usize;
            let mut student_correct = 0usize;
            let mut teacher_sums: Option<LossReport> = None;
            let mut student_sums: Option<LossReport> = None;
            let mut steps_in_epoch = 0u64;

            for indices in self.pipeline.epoch_index_batches(epoch) {
                let out = self.train_step(&indices, epoch)?;
                step_logger.append(&StepRecord {
                    step: self.step,
                    epoch,
                    lr,
                    teacher: out.teacher.as_ref(),
                    student: &out.student,
                })?;
                seen += out.batch_len;
                student_correct += out.student_correct;
                if let Some(c) = out.teacher_correct {
                    teacher_correct += c;
                }
                accumulate_report(&mut student_sums, &out.student);
                if let Some(t) = &out.teacher {
                    accumulate_report(&mut teacher_sums, t);
                }
                steps_in_epoch += 1;
            }
            step_logger.flush()?;

            let test_batches = self.pipeline.eval_batches(Split::Test)?;
            let student_test = evaluate_backbone(&mut self.student.backbone, &test_batches)?;
            let teacher_test = match self.teacher.as_mut() {
                Some(t) => Some(evaluate_backbone(&mut t.backbone, &test_batches)?),
                None => None,
            };

            let row = EpochMetrics {
                epoch,
                lr,
                teacher_train_acc: self
                    .teacher
                    .as_ref()
                    .map(|_| teacher_correct as f64 / seen as f64),
                teacher_test_acc: teacher_test,
                student_train_acc: Some(student_correct as f64 / seen as f64),
                student_test_acc: Some(student_test),
                capability_gap: teacher_test.map(|t| t - student_test),
                teacher_loss: teacher_sums.map(|s| mean_report(s, steps_in_epoch)),
                student_loss: student_sums.map(|s| mean_report(s, steps_in_epoch)),
                wall_clock_seconds: t0.elapsed().as_secs_f64(),
            };
            metrics_writer.append(&row)?;
            metrics.push(row);

            checkpoint::save_stream(&last_path, &self.student, epoch)?;
            if student_test > best_acc {
                best_acc = student_test;
                checkpoint::save_stream(&best_path, &self.student, epoch)?;
            }
            log::info!(
                "epoch {epoch}: student test {:.4}{}",
                student_test,
                teacher_test
                    .map(|t| format!(", teacher test {t:.4}"))
                    .unwrap_or_default()
            );
        }

        let exported = self.student.export_backbone();
        checkpoint::save_backbone(&export_path, &exported, self.config.total_epochs - 1)?;

        let final_student = metrics.last().and_then(|m| m.student_test_acc);
        let final_teacher = metrics.last().and_then(|m| m.teacher_test_acc);
        Ok(RunArtifacts {
            run_dir: run_dir.to_path_buf(),
            metrics,
            metrics_csv,
            steps_log,
            last_checkpoint: last_path,
            best_checkpoint: best_path,
            student_export: Some(export_path),
            best_student_test_acc: Some(best_acc),
            final_student_test_acc: final_student,
            final_teacher_test_acc: final_teacher,
        })
    }
}

fn accumulate_report(acc: &mut Option<LossReport>, r: &LossReport) {
    match acc {
        None => *acc = Some(r.clone()),
        Some(a) => {
            a.l_d += r.l_d;
            a.l_f += r.l_f;
            a.l_g1 += r.l_g1;
            a.l_g2 += r.l_g2;
            a.l_g += r.l_g;
            a.l_l += r.l_l;
            a.total += r.total;
        }
    }
}

fn mean_report(mut sums: LossReport, steps: u64) -> LossReport {
    let n = steps as f64;
    sums.l_d /= n;
    sums.l_f /= n;
    sums.l_g1 /= n;
    sums.l_g2 /= n;
    sums.l_g /= n;
    sums.l_l /= n;
    sums.total /= n;
    sums
}

/// Trains one stream alone on its within-stream and classification losses
/// (the pretraining path for fixed teachers; with zero guided pairs this is
/// plain cross-entropy training). `role` selects the stream's augmentation
/// view and which metrics columns it fills.
pub fn train_single_stream(
    stream: &mut Stream<f32>,
    role: StreamRole,
    config: &TrainConfig,
    pipeline: &DataPipeline,
    run_dir: &Path,
) -> Result<RunArtifacts> {
    config.validate()?;
    std::fs::create_dir_all(run_dir).map_err(EkdError::io(run_dir))?;
    let ckpt_dir = run_dir.join("checkpoints");
    std::fs::create_dir_all(&ckpt_dir).map_err(EkdError::io(&ckpt_dir))?;
    let metrics_csv = run_dir.join("metrics.csv");
    let steps_log = run_dir.join("steps.jsonl");
    let last_path = ckpt_dir.join("last.ekd1");
    let best_path = ckpt_dir.join("best.ekd1");

    let mut metrics_writer = MetricsWriter::create(&metrics_csv)?;
    let mut step_logger = StepLogger::create(&steps_log)?;
    let mut metrics = Vec::new();
    let mut sgd = SgdState::new(config.momentum, config.weight_decay);
    let mut best_acc = f64::NEG_INFINITY;
    let view = match role {
        StreamRole::Teacher => 0,
        StreamRole::Student => config.desync,
    };
    let mut step = 0u64;

    for epoch in 0..config.total_epochs {
        let t0 = Instant::now();
        let lr = lr_at(epoch, config);
        let mut seen = 0usize;
        let mut correct = 0usize;
        let mut sums: Option<LossReport> = None;
        let mut steps_in_epoch = 0u64;
        for indices in pipeline.epoch_index_batches(epoch) {
            let batch = pipeline.train_batch(&indices, epoch, view)?;
            let mut tape = Tape::new();
            let x = tape.leaf(batch.images.clone(), false)?;
            let (outs, binding) = stream.forward_collect(&mut tape, x, Mode::Train)?;
            let within = in_component(
                within_stream_loss(
                    &mut tape,
                    &outs,
                    config.temperature,
                    config.t_squared,
                    config.within_stream_mode,
                ),
                "within-stream (l_d/l_f)",
            )?;
            let l_l = in_component(
                classification_loss(&mut tape, &outs, &batch.labels),
                "classification (l_l)",
            )?;
            let (total, report) =
                total_stream_loss(&mut tape, role, within, None, l_l, &config.loss_weights)?;
            tape.backward(total)?;
            let grads = binding.grads(&tape);
            correct += top1_correct(tape.value(outs.backbone_logits), &batch.labels);
            seen += batch.len();
            drop(tape);
            sgd.step(&mut stream.params_flat_mut(), &grads, lr)?;
            step += 1;
            steps_in_epoch += 1;
            let (teacher_ref, student_ref) = match role {
                StreamRole::Teacher => (Some(&report), None),
                StreamRole::Student => (None, Some(&report)),
            };
            // The JSONL schema requires a student column; single-stream runs
            // log the stream under its own role and mirror it as `student`
            // when the stream is the student.
            step_logger.append(&StepRecord {
                step,
                epoch,
                lr,
                teacher: teacher_ref,
                student: student_ref.unwrap_or(&report),
            })?;
            accumulate_report(&mut sums, &report);
        }
        step_logger.flush()?;

        let test_batches = pipeline.eval_batches(Split::Test)?;
        let test_acc = evaluate_backbone(&mut stream.backbone, &test_batches)?;
        let train_acc = correct as f64 / seen as f64;
        let mean = sums.map(|s| mean_report(s, steps_in_epoch));
        let row = match role {
            StreamRole::Teacher => EpochMetrics {
                epoch,
                lr,
                teacher_train_acc: Some(train_acc),
                teacher_test_acc: Some(test_acc),
                student_train_acc: None,
                student_test_acc: None,
                capability_gap: None,
                teacher_loss: mean,
                student_loss: None,
                wall_clock_seconds: t0.elapsed().as_secs_f64(),
            },
            StreamRole::Student => EpochMetrics {
                epoch,
                lr,
                teacher_train_acc: None,
                teacher_test_acc: None,
                student_train_acc: Some(train_acc),
                student_test_acc: Some(test_acc),
                capability_gap: None,
                teacher_loss: None,
                student_loss: mean,
                wall_clock_seconds: t0.elapsed().as_secs_f64(),
            },
        };
        metrics_writer.append(&row)?;
        metrics.push(row);

        checkpoint::save_stream(&last_path, stream, epoch)?;
        if test_acc > best_acc {
            best_acc = test_acc;
            checkpoint::save_stream(&best_path, stream, epoch)?;
        }
    }

    let (final_student, best_student) = match role {
        StreamRole::Student => (
            metrics.last().and_then(|m| m.student_test_acc),
            Some(best_acc),
        ),
        StreamRole::Teacher => (None, None),
    };
    let final_teacher = metrics.last().and_then(|m| m.teacher_test_acc);
    Ok(RunArtifacts {
        run_dir: run_dir.to_path_buf(),
        metrics,
        metrics_csv,
        steps_log,
        last_checkpoint: last_path,
        best_checkpoint: best_path,
        student_export: None,
        best_student_test_acc: best_student,
        final_student_test_acc: final_student,
        final_teacher_test_acc: final_teacher,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lr_schedule_matches_published_values() {
        let cfg = TrainConfig::default();
        assert_eq!(lr_at(0, &cfg), 0.1);
        assert_eq!(lr_at(74, &cfg), 0.1);
        assert!((lr_at(75, &cfg) - 0.01).abs() < 1e-12);
        assert!((lr_at(130, &cfg) - 0.001).abs() < 1e-12);
        assert!((lr_at(180, &cfg) - 0.0001).abs() < 1e-12);
        assert!((lr_at(199, &cfg) - 0.0001).abs() < 1e-12);
    }

    #[test]
    fn lr_schedule_non_increasing() {
        let cfg = TrainConfig::default();
        let mut prev = f64::INFINITY;
        for epoch in 0..200 {
            let lr = lr_at(epoch, &cfg);
            assert!(lr <= prev);
            prev = lr;
        }
    }

    #[test]
    fn config_validation() {
        let mut cfg = TrainConfig::default();
        assert!(cfg.validate().is_ok());
        cfg.lr_decay_epochs = vec![75, 75];
        assert!(cfg.validate().is_err());
        cfg.lr_decay_epochs = vec![75, 130];
        cfg.teacher_mode = TeacherMode::Fixed;
        assert!(cfg.validate().is_err(), "fixed mode needs a checkpoint path");
    }

    #[test]
    fn top1_ties_break_to_lowest_class() {
        let logits = Tensor::from_vec(vec![2, 3], vec![1.0, 1.0, 0.0, 0.5, 0.7, 0.7]).unwrap();
        assert_eq!(top1_correct(&logits, &[0, 1]), 2);
        assert_eq!(top1_correct(&logits, &[1, 2]), 0);
    }

    #[test]
    fn constant_prediction_hits_one_over_m_on_random_labels() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let n = 4000;
        let m = 8;
        let logits = Tensor::from_vec(vec![n, m], vec![0.0f32; n * m]).unwrap(); // argmax = 0
        let labels: Vec<u32> = (0..n).map(|_| rng.random_range(0..m as u32)).collect();
        let acc = top1_correct(&logits, &labels) as f64 / n as f64;
        // binomial 3 sigma around 1/8 with n=4000 is ~0.016
        assert!((acc - 1.0 / m as f64).abs() < 0.016, "{acc}");
    }
}
