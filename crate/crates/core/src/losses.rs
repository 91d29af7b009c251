//! Classification and distillation losses, recorded on a [`Tape`] so that
//! every one of them is differentiable with respect to the student side.
//!
//! All losses average over the batch (leading) axis. Rank-1 inputs are
//! treated as a batch of one.

use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{argmax_rows, Tensor};

/// Floor applied inside every logarithm.
pub const LOG_FLOOR: f32 = 1e-12;

/// Pre-softmax network outputs, `batch x C`.
#[derive(Clone, Copy, Debug)]
pub struct Logits(pub Var);

/// Temperature-softened class probabilities, `batch x C`.
#[derive(Clone, Copy, Debug)]
pub struct SoftTargets {
    pub probs: Var,
    pub temperature: f32,
}

impl SoftTargets {
    pub fn from_logits(tape: &mut Tape, logits: Logits, temperature: f32) -> Result<Self> {
        Ok(SoftTargets {
            probs: tape.softmax(logits.0, temperature)?,
            temperature,
        })
    }
}

/// Where the hard-label term of the distillation loss takes its targets.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HardLabelSource {
    /// One-hot of the teacher's argmax.
    #[default]
    Teacher,
    /// The dataset's own labels.
    GroundTruth,
}

/// Resolved hard targets for one batch.
#[derive(Clone, Copy, Debug)]
pub enum HardLabels<'a> {
    TeacherArgmax,
    GroundTruth(&'a [usize]),
}

fn batch_of(t: &Tensor) -> usize {
    if t.rank() >= 2 {
        t.shape()[0]
    } else {
        1
    }
}

fn classes_of(t: &Tensor) -> usize {
    *t.shape().last().unwrap_or(&1)
}

fn check_same_shape(tape: &Tape, op: &'static str, a: Var, b: Var) -> Result<()> {
    if tape.shape(a) != tape.shape(b) {
        return Err(Error::ShapeMismatch {
            op,
            left: tape.shape(a).to_vec(),
            right: tape.shape(b).to_vec(),
        });
    }
    Ok(())
}

fn check_unit(name: &'static str, value: f32) -> Result<()> {
    if !(0.0..=1.0).contains(&value) {
        return Err(Error::WeightOutOfRange { name, value });
    }
    Ok(())
}

/// One-hot matrix of `labels` with `classes` columns.
pub fn one_hot(labels: &[usize], classes: usize) -> Tensor {
    let mut data = vec![0.0; labels.len() * classes];
    for (r, &l) in labels.iter().enumerate() {
        data[r * classes + l] = 1.0;
    }
    Tensor::new(vec![labels.len(), classes], data).expect("non-empty label batch")
}

/// Mean over the batch of `-Σ_l y_l · ln ŷ_l`.
pub fn cross_entropy(tape: &mut Tape, y_true: Var, y_pred: Var) -> Result<Var> {
    check_same_shape(tape, "cross_entropy", y_true, y_pred)?;
    let targets = tape.value(y_true);
    let classes = classes_of(targets);
    for (row, chunk) in targets.data().chunks(classes).enumerate() {
        let ones = chunk.iter().filter(|&&v| v == 1.0).count();
        let zeros = chunk.iter().filter(|&&v| v == 0.0).count();
        if ones != 1 || ones + zeros != classes {
            return Err(Error::NotOneHot { row });
        }
    }
    let batch = batch_of(targets);
    let log_p = tape.log_clamped(y_pred, LOG_FLOOR);
    let picked = tape.mul(y_true, log_p)?;
    let total = tape.sum(picked);
    Ok(tape.scale(total, -1.0 / batch as f32))
}

/// Mean over the batch of the squared L2 distance between soft targets.
pub fn hallucination_loss(tape: &mut Tape, teacher: &SoftTargets, hall: &SoftTargets) -> Result<Var> {
    if teacher.temperature != hall.temperature {
        return Err(Error::TemperatureMismatch(teacher.temperature, hall.temperature));
    }
    check_same_shape(tape, "hallucination_loss", teacher.probs, hall.probs)?;
    let batch = batch_of(tape.value(teacher.probs));
    let diff = tape.sub(teacher.probs, hall.probs)?;
    let sq = tape.square(diff);
    let total = tape.sum(sq);
    Ok(tape.scale(total, 1.0 / batch as f32))
}

/// Mean over the batch of `D_KL(teacher ‖ hall)`. The teacher side is
/// detached.
pub fn kl_loss(tape: &mut Tape, teacher: &SoftTargets, hall: &SoftTargets) -> Result<Var> {
    if teacher.temperature != hall.temperature {
        return Err(Error::TemperatureMismatch(teacher.temperature, hall.temperature));
    }
    check_same_shape(tape, "kl_loss", teacher.probs, hall.probs)?;
    let p = tape.value(teacher.probs).clone();
    let batch = batch_of(&p) as f32;
    // 0 · ln 0 is taken as 0.
    let log_p = p.map(|v| if v > 0.0 { v.max(LOG_FLOOR).ln() } else { 0.0 });
    let p = tape.constant(p);
    let log_p = tape.constant(log_p);
    let log_q = tape.log_clamped(hall.probs, LOG_FLOOR);
    let ratio = tape.sub(log_p, log_q)?;
    let terms = tape.mul(p, ratio)?;
    let total = tape.sum(terms);
    Ok(tape.scale(total, 1.0 / batch))
}

/// `λ·T²·KL(soft teacher ‖ soft student) + (1−λ)·CE(onehot(argmax teacher), softmax₁(student))`.
pub fn kd_loss(
    tape: &mut Tape,
    teacher: Logits,
    student: Logits,
    lambda: f32,
    temperature: f32,
) -> Result<Var> {
    kd_loss_with(
        tape,
        teacher,
        student,
        lambda,
        temperature,
        HardLabels::TeacherArgmax,
    )
}

/// [`kd_loss`] with an explicit choice of hard targets.
pub fn kd_loss_with(
    tape: &mut Tape,
    teacher: Logits,
    student: Logits,
    lambda: f32,
    temperature: f32,
    hard: HardLabels<'_>,
) -> Result<Var> {
    check_unit("lambda", lambda)?;
    check_same_shape(tape, "kd_loss", teacher.0, student.0)?;
    let t_soft = detached_soft(tape, teacher, temperature)?;
    let s_soft = SoftTargets::from_logits(tape, student, temperature)?;
    let kl = kl_loss(tape, &t_soft, &s_soft)?;
    let kl = tape.scale(kl, lambda * temperature * temperature);

    let teacher_values = tape.value(teacher.0);
    let classes = classes_of(teacher_values);
    let targets = match hard {
        HardLabels::TeacherArgmax => one_hot(&argmax_rows(teacher_values), classes),
        HardLabels::GroundTruth(labels) => {
            if labels.len() != batch_of(teacher_values) {
                return Err(Error::ShapeMismatch {
                    op: "kd_loss",
                    left: teacher_values.shape().to_vec(),
                    right: vec![labels.len()],
                });
            }
            one_hot(labels, classes)
        }
    };
    let targets = targets.reshape(teacher_values.shape().to_vec())?;
    let targets = tape.constant(targets);
    let s_hard = tape.softmax(student.0, 1.0)?;
    let ce = cross_entropy(tape, targets, s_hard)?;
    let ce = tape.scale(ce, 1.0 - lambda);
    tape.add(kl, ce)
}

/// `α·kd_loss + (1−α)·hallucination_loss` at a shared temperature.
pub fn gd_loss(
    tape: &mut Tape,
    teacher: Logits,
    student: Logits,
    alpha: f32,
    lambda: f32,
    temperature: f32,
) -> Result<Var> {
    gd_loss_with(
        tape,
        teacher,
        student,
        alpha,
        lambda,
        temperature,
        HardLabels::TeacherArgmax,
    )
}

pub fn gd_loss_with(
    tape: &mut Tape,
    teacher: Logits,
    student: Logits,
    alpha: f32,
    lambda: f32,
    temperature: f32,
    hard: HardLabels<'_>,
) -> Result<Var> {
    check_unit("alpha", alpha)?;
    let kd = kd_loss_with(tape, teacher, student, lambda, temperature, hard)?;
    let kd = tape.scale(kd, alpha);
    let t_soft = detached_soft(tape, teacher, temperature)?;
    let s_soft = SoftTargets::from_logits(tape, student, temperature)?;
    let h = hallucination_loss(tape, &t_soft, &s_soft)?;
    let h = tape.scale(h, 1.0 - alpha);
    tape.add(kd, h)
}

fn detached_soft(tape: &mut Tape, logits: Logits, temperature: f32) -> Result<SoftTargets> {
    let probs = crate::tensor::tempered_softmax(tape.value(logits.0), temperature)?;
    Ok(SoftTargets {
        probs: tape.constant(probs),
        temperature,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(tape: &mut Tape, v: &[f32]) -> Var {
        tape.leaf(Tensor::new(vec![1, v.len()], v.to_vec()).unwrap())
    }

    fn soft(tape: &mut Tape, v: &[f32], t: f32) -> SoftTargets {
        SoftTargets {
            probs: row(tape, v),
            temperature: t,
        }
    }

    fn ce(y: &[f32], p: &[f32]) -> f32 {
        let mut tape = Tape::new();
        let (y, p) = (row(&mut tape, y), row(&mut tape, p));
        let l = cross_entropy(&mut tape, y, p).unwrap();
        tape.value(l).item()
    }

    #[test]
    fn cross_entropy_examples() {
        assert_eq!(ce(&[1.0, 0.0], &[1.0, 0.0]), 0.0);
        assert!((ce(&[1.0, 0.0], &[0.5, 0.5]) - std::f32::consts::LN_2).abs() < 1e-5);
        assert!((ce(&[0.0, 1.0], &[0.26894, 0.73106]) - 0.31326).abs() < 1e-5);
    }

    #[test]
    fn cross_entropy_rejects_soft_targets() {
        let mut tape = Tape::new();
        let y = row(&mut tape, &[0.5, 0.5]);
        let p = row(&mut tape, &[0.5, 0.5]);
        assert!(matches!(
            cross_entropy(&mut tape, y, p),
            Err(Error::NotOneHot { row: 0 })
        ));
        let q = row(&mut tape, &[0.2, 0.3, 0.5]);
        assert!(matches!(
            cross_entropy(&mut tape, y, q),
            Err(Error::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn cross_entropy_clamps_zero_probability() {
        let v = ce(&[1.0, 0.0], &[0.0, 1.0]);
        assert!(v.is_finite());
        assert!((v - 27.631021).abs() < 1e-3);
    }

    #[test]
    fn hallucination_examples() {
        let h = |a: &[f32], b: &[f32]| {
            let mut tape = Tape::new();
            let (a, b) = (soft(&mut tape, a, 2.0), soft(&mut tape, b, 2.0));
            let l = hallucination_loss(&mut tape, &a, &b).unwrap();
            tape.value(l).item()
        };
        assert_eq!(h(&[0.3, 0.7], &[0.3, 0.7]), 0.0);
        assert!((h(&[1.0, 0.0], &[0.0, 1.0]) - 2.0).abs() < 1e-6);
        assert!((h(&[0.6, 0.4], &[0.5, 0.5]) - 0.02).abs() < 1e-6);
    }

    #[test]
    fn temperature_mismatch_is_rejected() {
        let mut tape = Tape::new();
        let a = soft(&mut tape, &[0.5, 0.5], 2.0);
        let b = soft(&mut tape, &[0.5, 0.5], 3.0);
        assert!(matches!(
            hallucination_loss(&mut tape, &a, &b),
            Err(Error::TemperatureMismatch(..))
        ));
        assert!(matches!(
            kl_loss(&mut tape, &a, &b),
            Err(Error::TemperatureMismatch(..))
        ));
    }

    #[test]
    fn kl_examples() {
        let kl = |a: &[f32], b: &[f32]| {
            let mut tape = Tape::new();
            let (a, b) = (soft(&mut tape, a, 1.0), soft(&mut tape, b, 1.0));
            let l = kl_loss(&mut tape, &a, &b).unwrap();
            tape.value(l).item()
        };
        assert!(kl(&[0.25, 0.75], &[0.25, 0.75]).abs() < 1e-7);
        let expected = 0.5 * 2f32.ln() + 0.5 * (2.0f32 / 3.0).ln();
        assert!((kl(&[0.5, 0.5], &[0.25, 0.75]) - expected).abs() < 1e-6);
        assert!((expected - 0.14384).abs() < 1e-5);
        assert!(kl(&[1.0, 0.0], &[0.1, 0.9]) > 0.0);
    }

    #[test]
    fn kl_gradient_does_not_reach_teacher() {
        let mut tape = Tape::new();
        let t = soft(&mut tape, &[0.2, 0.8], 1.0);
        let s = soft(&mut tape, &[0.6, 0.4], 1.0);
        let l = kl_loss(&mut tape, &t, &s).unwrap();
        let g = tape.backward(l).unwrap();
        assert!(g.wrt(t.probs).is_none());
        assert!(g.wrt(s.probs).is_some());
    }

    fn kd(t: &[f32], s: &[f32], lambda: f32, temp: f32) -> f32 {
        let mut tape = Tape::new();
        let (t, s) = (row(&mut tape, t), row(&mut tape, s));
        let l = kd_loss(&mut tape, Logits(t), Logits(s), lambda, temp).unwrap();
        tape.value(l).item()
    }

    #[test]
    fn kd_saturated_student_hard_term_vanishes() {
        let v = kd(&[2.0, 0.0], &[20.0, 0.0], 0.0, 4.0);
        assert!(v.abs() < 1e-6, "{v}");
    }

    #[test]
    fn kd_lambda_range() {
        let mut tape = Tape::new();
        let (t, s) = (row(&mut tape, &[1.0, 0.0]), row(&mut tape, &[0.0, 1.0]));
        assert!(matches!(
            kd_loss(&mut tape, Logits(t), Logits(s), 1.5, 2.0),
            Err(Error::WeightOutOfRange { name: "lambda", .. })
        ));
        assert!(matches!(
            gd_loss(&mut tape, Logits(t), Logits(s), -0.1, 0.5, 2.0),
            Err(Error::WeightOutOfRange { name: "alpha", .. })
        ));
    }

    #[test]
    fn kd_ground_truth_labels() {
        let mut tape = Tape::new();
        let (t, s) = (row(&mut tape, &[3.0, 0.0]), row(&mut tape, &[0.0, 3.0]));
        let labels = [1usize];
        let with_gt = kd_loss_with(
            &mut tape,
            Logits(t),
            Logits(s),
            0.0,
            1.0,
            HardLabels::GroundTruth(&labels),
        )
        .unwrap();
        let with_teacher = kd_loss(&mut tape, Logits(t), Logits(s), 0.0, 1.0).unwrap();
        // Ground truth agrees with the student, the teacher does not.
        assert!(tape.value(with_gt).item() < tape.value(with_teacher).item());
    }
}
