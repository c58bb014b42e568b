//! Distillation and classification losses.
//!
//! Supervising operands are always detached inside these functions: the
//! backbone within its own stream, and the entire teacher stream during
//! cross-stream distillation. Gradients therefore never flow to the
//! supervising side.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{EkdError, Result};
use crate::nn::BlockOutputs;
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StreamRole {
    Teacher,
    Student,
}

/// Which classifiers supervise each guided head within a stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WithinStreamMode {
    /// Backbone supervises every guided head (the default form).
    Simplified,
    /// Every deeper guided head additionally supervises each shallower one.
    FullPairwise,
}

/// Per-component weights on the stream total. The unweighted sum is the
/// published objective; weights default to 1 and exist because KL, squared
/// distances and cross entropy mix scales.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub distill: f64,
    pub feature: f64,
    pub guided: f64,
    pub classification: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            distill: 1.0,
            feature: 1.0,
            guided: 1.0,
            classification: 1.0,
        }
    }
}

/// Decomposed loss values for one stream at one step. Components are the
/// unweighted loss values; `total` applies the configured weights (at the
/// default weights it is exactly `l_d + l_f + l_l` plus `l_g` for the
/// student).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub stream_role: StreamRole,
    pub l_d: f64,
    pub l_f: f64,
    pub l_g1: f64,
    pub l_g2: f64,
    pub l_g: f64,
    pub l_l: f64,
    pub total: f64,
}

fn check_temperature(t: f64) -> Result<()> {
    if !(t > 0.0) || !t.is_finite() {
        return Err(EkdError::Contract(format!(
            "temperature must be positive and finite, got {t}"
        )));
    }
    Ok(())
}

fn check_logit_pair<E: Scalar>(tape: &Tape<E>, a: Var, b: Var, op: &'static str) -> Result<()> {
    let sa = tape.value(a).shape();
    let sb = tape.value(b).shape();
    if sa.len() != 2 || sa != sb {
        return Err(EkdError::shape(op, format!("{sa:?} vs {sb:?}")));
    }
    Ok(())
}

/// Temperature-softened KL divergence from the (detached) teacher
/// distribution to the student distribution, mean over the batch:
/// `T^2 * mean_i KL(softmax(teacher_i/T) || softmax(student_i/T))`.
///
/// The `T^2` factor keeps gradient magnitudes comparable across
/// temperatures; disable with `t_squared = false`. It is 1 at `T = 1`.
pub fn kl_distill<E: Scalar>(
    tape: &mut Tape<E>,
    student_logits: Var,
    teacher_logits: Var,
    temperature: f64,
    t_squared: bool,
) -> Result<Var> {
    check_temperature(temperature)?;
    check_logit_pair(tape, student_logits, teacher_logits, "kl_distill")?;
    let teacher = tape.detach(teacher_logits);
    let inv_t = E::from_f64c(1.0 / temperature);
    let s_scaled = tape.scalar_mul(student_logits, inv_t)?;
    let t_scaled = tape.scalar_mul(teacher, inv_t)?;
    let log_ps = tape.log_softmax(s_scaled, 1)?;
    let log_pt = tape.log_softmax(t_scaled, 1)?;
    let p_t = tape.softmax(t_scaled, 1)?;
    let diff = tape.sub(log_pt, log_ps)?;
    let weighted = tape.mul(p_t, diff)?;
    let per_row = tape.sum_axis(weighted, 1)?;
    let mean = tape.mean_all(per_row)?;
    if t_squared {
        tape.scalar_mul(mean, E::from_f64c(temperature * temperature))
    } else {
        Ok(mean)
    }
}

/// Mean over the batch of the squared L2 distance between feature rows;
/// the supervising `target` is detached.
pub fn l2_feature<E: Scalar>(tape: &mut Tape<E>, learner: Var, target: Var) -> Result<Var> {
    check_logit_pair(tape, learner, target, "l2_feature")?;
    let target = tape.detach(target);
    let diff = tape.sub(learner, target)?;
    let sq = tape.mul(diff, diff)?;
    let per_row = tape.sum_axis(sq, 1)?;
    tape.mean_all(per_row)
}

/// Sums `terms` weighted by the paired factors, skipping exact-zero weights
/// entirely so a disabled component leaves no trace on the tape.
fn weighted_sum<E: Scalar>(tape: &mut Tape<E>, terms: &[(f64, Var)]) -> Result<Var> {
    let mut acc: Option<Var> = None;
    for &(w, v) in terms {
        if w == 0.0 {
            continue;
        }
        let term = if w == 1.0 {
            v
        } else {
            tape.scalar_mul(v, E::from_f64c(w))?
        };
        acc = Some(match acc {
            Some(a) => tape.add(a, term)?,
            None => term,
        });
    }
    match acc {
        Some(v) => Ok(v),
        None => tape.scalar(E::zero()),
    }
}

fn sum_vars<E: Scalar>(tape: &mut Tape<E>, terms: &[Var]) -> Result<Var> {
    let mut acc: Option<Var> = None;
    for &v in terms {
        acc = Some(match acc {
            Some(a) => tape.add(a, v)?,
            None => v,
        });
    }
    match acc {
        Some(v) => Ok(v),
        None => tape.scalar(E::zero()),
    }
}

/// Within-stream distillation: guided heads learn from the same stream's
/// deeper classifiers. Returns `(l_d, l_f)`, each a sum over guided heads;
/// both are zero scalars when the stream has no guided heads.
pub fn within_stream_loss<E: Scalar>(
    tape: &mut Tape<E>,
    outs: &BlockOutputs,
    temperature: f64,
    t_squared: bool,
    mode: WithinStreamMode,
) -> Result<(Var, Var)> {
    let mut kl_terms = Vec::new();
    let mut l2_terms = Vec::new();
    for (i, head) in outs.guided.iter().enumerate() {
        kl_terms.push(kl_distill(
            tape,
            head.logits,
            outs.backbone_logits,
            temperature,
            t_squared,
        )?);
        l2_terms.push(l2_feature(tape, head.feature, outs.backbone_feature)?);
        if mode == WithinStreamMode::FullPairwise {
            for deeper in outs.guided.iter().skip(i + 1) {
                kl_terms.push(kl_distill(
                    tape,
                    head.logits,
                    deeper.logits,
                    temperature,
                    t_squared,
                )?);
                l2_terms.push(l2_feature(tape, head.feature, deeper.feature)?);
            }
        }
    }
    let l_d = sum_vars(tape, &kl_terms)?;
    let l_f = sum_vars(tape, &l2_terms)?;
    Ok((l_d, l_f))
}

/// Cross-stream distillation: the student backbone and each guided head
/// learn from the corresponding (detached) teacher outputs. Returns
/// `(l_g1, l_g2, l_g)` where `l_g = l_g1 + l_g2`.
pub fn cross_stream_loss<E: Scalar>(
    tape: &mut Tape<E>,
    teacher_outs: &BlockOutputs,
    student_outs: &BlockOutputs,
    temperature: f64,
    t_squared: bool,
) -> Result<(Var, Var, Var)> {
    if teacher_outs.guided.len() != student_outs.guided.len() {
        return Err(EkdError::Contract(format!(
            "cross-stream pair-count mismatch: teacher has {} guided heads, student {}",
            teacher_outs.guided.len(),
            student_outs.guided.len()
        )));
    }
    for (t, s) in teacher_outs.guided.iter().zip(&student_outs.guided) {
        if t.block_index != s.block_index {
            return Err(EkdError::Contract(format!(
                "cross-stream pairs must attach to the same blocks: {} vs {}",
                t.block_index, s.block_index
            )));
        }
    }
    let mut kl_terms = vec![kl_distill(
        tape,
        student_outs.backbone_logits,
        teacher_outs.backbone_logits,
        temperature,
        t_squared,
    )?];
    let mut l2_terms = Vec::new();
    for (t, s) in teacher_outs.guided.iter().zip(&student_outs.guided) {
        kl_terms.push(kl_distill(tape, s.logits, t.logits, temperature, t_squared)?);
        l2_terms.push(l2_feature(tape, s.feature, t.feature)?);
    }
    let l_g1 = sum_vars(tape, &kl_terms)?;
    let l_g2 = sum_vars(tape, &l2_terms)?;
    let l_g = tape.add(l_g1, l_g2)?;
    Ok((l_g1, l_g2, l_g))
}

/// Sum over all C classifiers (guided heads plus backbone) of the
/// mean-batch cross entropy against hard labels.
pub fn classification_loss<E: Scalar>(
    tape: &mut Tape<E>,
    outs: &BlockOutputs,
    labels: &[u32],
) -> Result<Var> {
    let classes = {
        let shape = tape.value(outs.backbone_logits).shape();
        if shape.len() != 2 {
            return Err(EkdError::shape(
                "classification_loss",
                format!("logits {shape:?}"),
            ));
        }
        if shape[0] != labels.len() {
            return Err(EkdError::shape(
                "classification_loss",
                format!("{} labels for batch {}", labels.len(), shape[0]),
            ));
        }
        shape[1]
    };
    if let Some(bad) = labels.iter().find(|&&l| l as usize >= classes) {
        return Err(EkdError::Contract(format!(
            "label {bad} out of range for {classes} classes"
        )));
    }
    let mut one_hot = Tensor::zeros(vec![labels.len(), classes]);
    for (i, &l) in labels.iter().enumerate() {
        one_hot.data_mut()[i * classes + l as usize] = E::one();
    }
    let one_hot = tape.constant(one_hot)?;
    let mut terms = Vec::new();
    for logits in outs.classifier_logits() {
        let log_p = tape.log_softmax(logits, 1)?;
        let picked = tape.mul(log_p, one_hot)?;
        let per_row = tape.sum_axis(picked, 1)?;
        let mean = tape.mean_all(per_row)?;
        terms.push(tape.scalar_mul(mean, -E::one())?);
    }
    sum_vars(tape, &terms)
}

/// Combines per-stream components into the optimized total. Only the
/// student receives the cross-stream term; supplying one for the teacher is
/// a contract error. Returns the tape scalar to backpropagate and the
/// decomposed report.
pub fn total_stream_loss<E: Scalar>(
    tape: &mut Tape<E>,
    role: StreamRole,
    within: (Var, Var),
    cross: Option<(Var, Var, Var)>,
    classification: Var,
    weights: &LossWeights,
) -> Result<(Var, LossReport)> {
    if role == StreamRole::Teacher && cross.is_some() {
        return Err(EkdError::Contract(
            "teacher stream must not receive the cross-stream loss".into(),
        ));
    }
    let (l_d, l_f) = within;
    let mut terms = vec![
        (weights.distill, l_d),
        (weights.feature, l_f),
        (weights.classification, classification),
    ];
    if let Some((_, _, l_g)) = cross {
        terms.push((weights.guided, l_g));
    }
    let total_var = weighted_sum(tape, &terms)?;

    let val = |v: Var| tape.value(v).item().to_f64c();
    let l_d_v = val(l_d);
    let l_f_v = val(l_f);
    let l_l_v = val(classification);
    let (l_g1_v, l_g2_v) = match cross {
        Some((g1, g2, _)) => (val(g1), val(g2)),
        None => (0.0, 0.0),
    };
    let l_g_v = l_g1_v + l_g2_v;
    let mut total = weights.distill * l_d_v + weights.feature * l_f_v + weights.classification * l_l_v;
    if cross.is_some() {
        total += weights.guided * l_g_v;
    }
    Ok((
        total_var,
        LossReport {
            stream_role: role,
            l_d: l_d_v,
            l_f: l_f_v,
            l_g1: l_g1_v,
            l_g2: l_g2_v,
            l_g: l_g_v,
            l_l: l_l_v,
            total,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::GuidedHeadOutput;

    fn leaf(tape: &mut Tape<f64>, shape: Vec<usize>, data: Vec<f64>, rg: bool) -> Var {
        tape.leaf(Tensor::from_vec(shape, data).unwrap(), rg).unwrap()
    }

    #[test]
    fn kl_zero_for_identical_logits() {
        let mut tape = Tape::new();
        let s = leaf(&mut tape, vec![2, 3], vec![1.0, -0.5, 2.0, 0.0, 0.0, 0.0], false);
        let v = kl_distill(&mut tape, s, s, 4.0, true).unwrap();
        assert_eq!(tape.value(v).item(), 0.0);
    }

    #[test]
    fn kl_closed_form_two_tanh_one() {
        let mut tape = Tape::new();
        let teacher = leaf(&mut tape, vec![1, 2], vec![2.0, 0.0], false);
        let student = leaf(&mut tape, vec![1, 2], vec![0.0, 2.0], false);
        let v = kl_distill(&mut tape, student, teacher, 1.0, true).unwrap();
        let expect = 2.0 * 1.0f64.tanh(); // 1.5231883119...
        assert!((tape.value(v).item() - expect).abs() < 1e-9);
    }

    #[test]
    fn kl_rejects_nonpositive_temperature() {
        let mut tape = Tape::new();
        let s = leaf(&mut tape, vec![1, 2], vec![0.0, 1.0], false);
        assert!(kl_distill(&mut tape, s, s, 0.0, true).is_err());
        assert!(kl_distill(&mut tape, s, s, -1.0, true).is_err());
    }

    #[test]
    fn kl_shift_invariance() {
        let mut tape = Tape::new();
        let t = leaf(&mut tape, vec![2, 3], vec![0.2, -1.0, 0.7, 1.5, 0.0, -0.4], false);
        let s = leaf(&mut tape, vec![2, 3], vec![-0.3, 0.9, 0.1, 0.0, 2.0, -1.0], false);
        let base = {
            let v = kl_distill(&mut tape, s, t, 4.0, true).unwrap();
            tape.value(v).item()
        };
        // Add a per-row constant to both arguments.
        let shift = leaf(&mut tape, vec![2, 3], vec![3.0, 3.0, 3.0, -2.0, -2.0, -2.0], false);
        let t2 = tape.add(t, shift).unwrap();
        let s2 = tape.add(s, shift).unwrap();
        let v2 = kl_distill(&mut tape, s2, t2, 4.0, true).unwrap();
        assert!((tape.value(v2).item() - base).abs() < 1e-12);
    }

    #[test]
    fn l2_hand_value() {
        let mut tape = Tape::new();
        let a = leaf(&mut tape, vec![1, 2], vec![1.0, 2.0], false);
        let b = leaf(&mut tape, vec![1, 2], vec![0.0, 0.0], false);
        let v = l2_feature(&mut tape, a, b).unwrap();
        assert_eq!(tape.value(v).item(), 5.0);
    }

    #[test]
    fn supervising_side_gets_no_gradient() {
        let mut tape = Tape::new();
        let student = leaf(&mut tape, vec![2, 3], vec![0.1, 0.4, -0.2, 0.9, 0.0, 0.3], true);
        let teacher = leaf(&mut tape, vec![2, 3], vec![1.0, -1.0, 0.5, 0.2, 0.8, -0.3], true);
        let kl = kl_distill(&mut tape, student, teacher, 4.0, true).unwrap();
        let l2 = l2_feature(&mut tape, student, teacher).unwrap();
        let root = tape.add(kl, l2).unwrap();
        tape.backward(root).unwrap();
        assert!(tape.grad(teacher).is_none());
        let sg = tape.grad(student).unwrap();
        assert!(sg.data().iter().any(|v| *v != 0.0));
    }

    fn fake_outputs(
        tape: &mut Tape<f64>,
        heads: usize,
        batch: usize,
        classes: usize,
        dim: usize,
        seed: u64,
    ) -> BlockOutputs {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut rand_leaf = |tape: &mut Tape<f64>, shape: Vec<usize>| {
            let numel: usize = shape.iter().product();
            let data: Vec<f64> = (0..numel).map(|_| rng.random_range(-2.0..2.0)).collect();
            tape.leaf(Tensor::from_vec(shape, data).unwrap(), false).unwrap()
        };
        let backbone_logits = rand_leaf(tape, vec![batch, classes]);
        let backbone_feature = rand_leaf(tape, vec![batch, dim]);
        let guided = (0..heads)
            .map(|i| GuidedHeadOutput {
                block_index: i + 1,
                feature: rand_leaf(tape, vec![batch, dim]),
                logits: rand_leaf(tape, vec![batch, classes]),
            })
            .collect();
        BlockOutputs {
            block_features: Vec::new(),
            backbone_feature,
            backbone_logits,
            guided,
        }
    }

    #[test]
    fn within_stream_zero_when_head_matches_backbone() {
        let mut tape = Tape::new();
        let logits = leaf(&mut tape, vec![2, 3], vec![0.5, 0.1, -0.2, 1.0, 0.0, 0.0], false);
        let feat = leaf(&mut tape, vec![2, 4], vec![0.0; 8], false);
        let outs = BlockOutputs {
            block_features: Vec::new(),
            backbone_feature: feat,
            backbone_logits: logits,
            guided: vec![GuidedHeadOutput {
                block_index: 1,
                feature: feat,
                logits,
            }],
        };
        let (l_d, l_f) =
            within_stream_loss(&mut tape, &outs, 4.0, true, WithinStreamMode::Simplified).unwrap();
        assert_eq!(tape.value(l_d).item(), 0.0);
        assert_eq!(tape.value(l_f).item(), 0.0);
    }

    #[test]
    fn cross_stream_term_structure() {
        let mut tape = Tape::new();
        let teacher = fake_outputs(&mut tape, 2, 3, 4, 5, 1);
        let student = fake_outputs(&mut tape, 2, 3, 4, 5, 2);
        let (g1, g2, g) = cross_stream_loss(&mut tape, &teacher, &student, 4.0, true).unwrap();
        // identical streams vanish
        let (z1, z2, _) = cross_stream_loss(&mut tape, &teacher, &teacher, 4.0, true).unwrap();
        assert_eq!(tape.value(z1).item(), 0.0);
        assert_eq!(tape.value(z2).item(), 0.0);
        assert!(tape.value(g1).item() > 0.0);
        assert!(tape.value(g2).item() > 0.0);
        let sum = tape.value(g1).item() + tape.value(g2).item();
        assert!((tape.value(g).item() - sum).abs() < 1e-12);
    }

    #[test]
    fn cross_stream_pair_mismatch_is_contract_error() {
        let mut tape = Tape::new();
        let teacher = fake_outputs(&mut tape, 1, 2, 3, 4, 1);
        let student = fake_outputs(&mut tape, 2, 2, 3, 4, 2);
        assert!(matches!(
            cross_stream_loss(&mut tape, &teacher, &student, 4.0, true),
            Err(EkdError::Contract(_))
        ));
    }

    #[test]
    fn classification_uniform_logits() {
        let mut tape = Tape::new();
        let outs = {
            let logits = leaf(&mut tape, vec![2, 4], vec![0.0; 8], false);
            let feat = leaf(&mut tape, vec![2, 3], vec![0.0; 6], false);
            BlockOutputs {
                block_features: Vec::new(),
                backbone_feature: feat,
                backbone_logits: logits,
                guided: vec![
                    GuidedHeadOutput {
                        block_index: 1,
                        feature: feat,
                        logits,
                    },
                    GuidedHeadOutput {
                        block_index: 2,
                        feature: feat,
                        logits,
                    },
                ],
            }
        };
        let v = classification_loss(&mut tape, &outs, &[0, 3]).unwrap();
        // 3 classifiers, uniform over 4 classes -> 3 ln 4
        assert!((tape.value(v).item() - 3.0 * 4.0f64.ln()).abs() < 1e-9);
    }

    #[test]
    fn classification_label_out_of_range() {
        let mut tape = Tape::new();
        let outs = fake_outputs(&mut tape, 0, 2, 3, 4, 7);
        assert!(classification_loss(&mut tape, &outs, &[0, 3]).is_err());
    }

    #[test]
    fn teacher_total_rejects_cross_term() {
        let mut tape = Tape::new();
        let z = tape.scalar(0.0).unwrap();
        let err = total_stream_loss(
            &mut tape,
            StreamRole::Teacher,
            (z, z),
            Some((z, z, z)),
            z,
            &LossWeights::default(),
        );
        assert!(matches!(err, Err(EkdError::Contract(_))));
    }

    #[test]
    fn totals_follow_role() {
        let mut tape = Tape::new();
        let mk = |tape: &mut Tape<f64>, v: f64| tape.scalar(v).unwrap();
        let (l_d, l_f, l_l) = (mk(&mut tape, 0.5), mk(&mut tape, 0.25), mk(&mut tape, 2.0));
        let (_, teacher) = total_stream_loss(
            &mut tape,
            StreamRole::Teacher,
            (l_d, l_f),
            None,
            l_l,
            &LossWeights::default(),
        )
        .unwrap();
        assert_eq!(teacher.total, teacher.l_d + teacher.l_f + teacher.l_l);
        assert_eq!(teacher.l_g, 0.0);

        let (g1, g2) = (mk(&mut tape, 0.125), mk(&mut tape, 0.0625));
        let g = tape.add(g1, g2).unwrap();
        let (_, student) = total_stream_loss(
            &mut tape,
            StreamRole::Student,
            (l_d, l_f),
            Some((g1, g2, g)),
            l_l,
            &LossWeights::default(),
        )
        .unwrap();
        assert_eq!(student.l_g, student.l_g1 + student.l_g2);
        assert_eq!(
            student.total,
            student.l_d + student.l_f + student.l_l + student.l_g
        );
        assert!(student.total > teacher.total);
    }
}
