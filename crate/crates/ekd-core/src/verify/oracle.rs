//! Independent reference implementations of every loss.
//!
//! These are deliberately written as plain f64 loops over raw slices and
//! share no code with the tape-based implementations they check. The
//! built-in verification command and the acceptance suite both compare
//! against them.

/// Softmax of one row, plain exp/sum (no shift trick).
fn softmax_row_ref(row: &[f64]) -> Vec<f64> {
    let mut exps = Vec::with_capacity(row.len());
    let mut sum = 0.0;
    for &v in row {
        let e = v.exp();
        exps.push(e);
        sum += e;
    }
    for e in &mut exps {
        *e /= sum;
    }
    exps
}

/// Temperature-softened KL distillation loss, mean over the batch:
/// `T^2 * mean_i KL(softmax(teacher_i/T) || softmax(student_i/T))`.
pub fn kl_distill_ref(
    student_logits: &[f64],
    teacher_logits: &[f64],
    batch: usize,
    classes: usize,
    temperature: f64,
    t_squared: bool,
) -> f64 {
    let mut total = 0.0;
    for i in 0..batch {
        let s_row: Vec<f64> = student_logits[i * classes..(i + 1) * classes]
            .iter()
            .map(|v| v / temperature)
            .collect();
        let t_row: Vec<f64> = teacher_logits[i * classes..(i + 1) * classes]
            .iter()
            .map(|v| v / temperature)
            .collect();
        let p_t = softmax_row_ref(&t_row);
        let p_s = softmax_row_ref(&s_row);
        let mut kl = 0.0;
        for c in 0..classes {
            kl += p_t[c] * (p_t[c].ln() - p_s[c].ln());
        }
        total += kl;
    }
    let mean = total / batch as f64;
    if t_squared {
        mean * temperature * temperature
    } else {
        mean
    }
}

/// Mean over the batch of squared Euclidean distance between feature rows.
pub fn l2_feature_ref(a: &[f64], b: &[f64], batch: usize, dim: usize) -> f64 {
    let mut total = 0.0;
    for i in 0..batch {
        let mut d2 = 0.0;
        for j in 0..dim {
            let d = a[i * dim + j] - b[i * dim + j];
            d2 += d * d;
        }
        total += d2;
    }
    total / batch as f64
}

/// Mean-batch cross entropy of one classifier at temperature 1.
pub fn cross_entropy_ref(logits: &[f64], labels: &[u32], batch: usize, classes: usize) -> f64 {
    let mut total = 0.0;
    for i in 0..batch {
        let p = softmax_row_ref(&logits[i * classes..(i + 1) * classes]);
        total += -p[labels[i] as usize].ln();
    }
    total / batch as f64
}

/// Within-stream losses in the simplified backbone-as-teacher form:
/// the sum over guided heads of (KL to backbone logits, L2 to backbone feature).
#[allow(clippy::too_many_arguments)]
pub fn within_stream_ref(
    guided_logits: &[Vec<f64>],
    guided_features: &[Vec<f64>],
    backbone_logits: &[f64],
    backbone_feature: &[f64],
    batch: usize,
    classes: usize,
    feature_dim: usize,
    temperature: f64,
    t_squared: bool,
) -> (f64, f64) {
    let mut l_d = 0.0;
    let mut l_f = 0.0;
    for logits in guided_logits {
        l_d += kl_distill_ref(logits, backbone_logits, batch, classes, temperature, t_squared);
    }
    for feature in guided_features {
        l_f += l2_feature_ref(feature, backbone_feature, batch, feature_dim);
    }
    (l_d, l_f)
}

/// Cross-stream losses: backbone KL plus per-pair guided KL (l_g1) and
/// per-pair guided feature L2 (l_g2).
#[allow(clippy::too_many_arguments)]
pub fn cross_stream_ref(
    teacher_backbone_logits: &[f64],
    teacher_guided_logits: &[Vec<f64>],
    teacher_guided_features: &[Vec<f64>],
    student_backbone_logits: &[f64],
    student_guided_logits: &[Vec<f64>],
    student_guided_features: &[Vec<f64>],
    batch: usize,
    classes: usize,
    feature_dim: usize,
    temperature: f64,
    t_squared: bool,
) -> (f64, f64) {
    let mut l_g1 = kl_distill_ref(
        student_backbone_logits,
        teacher_backbone_logits,
        batch,
        classes,
        temperature,
        t_squared,
    );
    for (s, t) in student_guided_logits.iter().zip(teacher_guided_logits) {
        l_g1 += kl_distill_ref(s, t, batch, classes, temperature, t_squared);
    }
    let mut l_g2 = 0.0;
    for (s, t) in student_guided_features.iter().zip(teacher_guided_features) {
        l_g2 += l2_feature_ref(s, t, batch, feature_dim);
    }
    (l_g1, l_g2)
}

/// Classification loss: sum over classifiers of mean-batch cross entropy.
pub fn classification_ref(
    classifier_logits: &[Vec<f64>],
    labels: &[u32],
    batch: usize,
    classes: usize,
) -> f64 {
    classifier_logits
        .iter()
        .map(|logits| cross_entropy_ref(logits, labels, batch, classes))
        .sum()
}
