//! Similarity-preserving knowledge distillation between the
//! full-context (teacher) and streaming (student) branches.
//!
//! Instead of forcing student states to copy teacher states, the
//! similarity-preserving loss matches the *pairwise similarity
//! structure* across the batch: each sequence's states are flattened
//! to one row, the batch forms a B x B Gram matrix, rows are
//! L2-normalized, and the loss is the squared Frobenius distance
//! between the teacher and student matrices, scaled by 1/B^2.  This
//! tolerates different state widths and frame rates on the two sides.
//! Teacher states are always detached, so distillation only ever moves
//! the student.

use crate::losses::Loss;
use crate::numerics::{GradTape, Var};
use crate::{Error, Result};
use serde::{Deserialize, Serialize};

/// What gets distilled, if anything.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DistillMode {
    /// No distillation term.
    #[serde(rename = "none")]
    None,
    /// Mean-squared error between encoder state pairs.
    #[serde(rename = "mse-ED")]
    MseEd,
    /// Similarity-preserving loss between encoder states.
    #[serde(rename = "sp-ED")]
    SpEd,
    /// Similarity-preserving loss between decoder states (attention
    /// decoder hidden states vs. prediction network states).
    #[serde(rename = "sp-DD")]
    SpDd,
}

impl DistillMode {
    /// Gram-based modes need at least two sequences per batch.
    pub fn needs_pairs(&self) -> bool {
        matches!(self, DistillMode::SpEd | DistillMode::SpDd)
    }
}

/// Which teacher/student layer indices get distilled together.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerPairSet {
    /// Final teacher layer with final student layer.
    Final,
    /// Every k-th layer counting back from the final pair, while both
    /// stacks last.
    EveryK(usize),
}

impl LayerPairSet {
    pub fn pairs(&self, teacher_depth: usize, student_depth: usize) -> Result<Vec<(usize, usize)>> {
        if teacher_depth == 0 || student_depth == 0 {
            return Err(Error::Domain("layer pairing needs non-empty stacks".into()));
        }
        match *self {
            LayerPairSet::Final => Ok(vec![(teacher_depth - 1, student_depth - 1)]),
            LayerPairSet::EveryK(k) => {
                if k == 0 {
                    return Err(Error::Config("layer stride must be at least 1".into()));
                }
                let mut out = Vec::new();
                let (mut t, mut s) = (teacher_depth - 1, student_depth - 1);
                loop {
                    out.push((t, s));
                    if t < k || s < k {
                        break;
                    }
                    t -= k;
                    s -= k;
                }
                Ok(out)
            }
        }
    }
}

/// Flatten each sequence's state matrix to one row and stack the
/// batch, zero-padding shorter rows to the widest.
fn stack_flat(tape: &mut GradTape, seqs: &[Var]) -> Result<Var> {
    let width = seqs.iter().map(|s| s.numel()).max().expect("non-empty batch");
    let rows = seqs
        .iter()
        .map(|&s| {
            let flat = tape.reshape(s, 1, s.numel())?;
            if flat.cols() < width {
                tape.pad_cols(flat, width)
            } else {
                Ok(flat)
            }
        })
        .collect::<Result<Vec<_>>>()?;
    tape.concat_rows(&rows)
}

/// Row-normalized Gram matrix of the batch: normalize_rows(Q Q^T).
pub fn gram_rownorm(tape: &mut GradTape, q: Var) -> Result<Var> {
    let qt = tape.transpose(q)?;
    let g = tape.matmul(q, qt)?;
    tape.normalize_rows(g)
}

fn check_batch(teacher: &[Var], student: &[Var], min: usize) -> Result<()> {
    if teacher.len() != student.len() {
        return Err(Error::Shape(format!(
            "teacher batch {} does not match student batch {}",
            teacher.len(),
            student.len()
        )));
    }
    if teacher.len() < min {
        return Err(Error::Domain(format!(
            "distillation batch needs at least {min} sequences, got {}",
            teacher.len()
        )));
    }
    Ok(())
}

/// Similarity-preserving loss over one batch of state pairs:
/// ||G_teacher - G_student||_F^2 / B^2 on row-normalized Grams.
pub fn sp_kd_loss(tape: &mut GradTape, teacher: &[Var], student: &[Var]) -> Result<Loss> {
    check_batch(teacher, student, 2)?;
    let te: Vec<Var> = teacher.iter().map(|&v| tape.detach(v)).collect::<Result<_>>()?;
    let q_te = stack_flat(tape, &te)?;
    let q_st = stack_flat(tape, student)?;
    let g_te = gram_rownorm(tape, q_te)?;
    let g_st = gram_rownorm(tape, q_st)?;
    let diff = tape.sub(g_te, g_st)?;
    let sq = tape.mul(diff, diff)?;
    let total = tape.sum(sq)?;
    let b = teacher.len() as f64;
    let node = tape.scale(total, 1.0 / (b * b))?;
    Ok(Loss { node: Some(node), value: tape.scalar_value(node) })
}

/// Element-mean squared error between teacher and student states,
/// averaged over the batch.  Shapes must match pairwise.
pub fn mse_ed_loss(tape: &mut GradTape, teacher: &[Var], student: &[Var]) -> Result<Loss> {
    check_batch(teacher, student, 1)?;
    let mut acc: Option<Var> = None;
    for (&t, &s) in teacher.iter().zip(student) {
        let td = tape.detach(t)?;
        let diff = tape.sub(td, s)?;
        let sq = tape.mul(diff, diff)?;
        let total = tape.sum(sq)?;
        let per_seq = tape.scale(total, 1.0 / t.numel() as f64)?;
        acc = Some(match acc {
            None => per_seq,
            Some(a) => tape.add(a, per_seq)?,
        });
    }
    let node = tape.scale(acc.expect("non-empty batch"), 1.0 / teacher.len() as f64)?;
    Ok(Loss { node: Some(node), value: tape.scalar_value(node) })
}

/// Sum of similarity-preserving losses over a set of layer pairs.
/// `teacher_layers[l]` / `student_layers[l]` hold layer l's states for
/// every sequence in the batch.
pub fn sp_kd_pairs(
    tape: &mut GradTape,
    teacher_layers: &[Vec<Var>],
    student_layers: &[Vec<Var>],
    pairs: &[(usize, usize)],
) -> Result<Loss> {
    if pairs.is_empty() {
        return Err(Error::Domain("no layer pairs to distill".into()));
    }
    let mut acc: Option<Var> = None;
    for &(lt, ls) in pairs {
        let te = teacher_layers.get(lt).ok_or_else(|| {
            Error::Domain(format!("teacher layer {lt} out of range {}", teacher_layers.len()))
        })?;
        let st = student_layers.get(ls).ok_or_else(|| {
            Error::Domain(format!("student layer {ls} out of range {}", student_layers.len()))
        })?;
        let part = sp_kd_loss(tape, te, st)?;
        let node = part.node.expect("similarity loss is always finite");
        acc = Some(match acc {
            None => node,
            Some(a) => tape.add(a, node)?,
        });
    }
    let node = acc.expect("pairs checked non-empty");
    Ok(Loss { node: Some(node), value: tape.scalar_value(node) })
}
