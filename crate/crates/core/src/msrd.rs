//! Foreground-masked response distillation: student logits against the
//! sigmoid probabilities of frozen references, on GT foreground cells only.

use crate::diffcore::{sigmoid, Grid4, Tape, Var};
use crate::error::{Error, Result};

/// Boolean mask with the shape of the logits.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ForegroundMask {
    pub shape: [usize; 4],
    pub cells: Vec<bool>,
}

impl ForegroundMask {
    pub fn count(&self) -> usize {
        self.cells.iter().filter(|&&c| c).count()
    }

    pub fn is_empty(&self) -> bool {
        self.count() == 0
    }
}

/// Cell is on iff that class's GT is 1 there.
pub fn build_mask(gt_sem: &Grid4) -> Result<ForegroundMask> {
    build_mask_dilated(gt_sem, 0)
}

/// Foreground mask grown by a square window of the given radius within
/// each class plane. Radius 0 is the plain GT mask.
pub fn build_mask_dilated(gt_sem: &Grid4, radius: usize) -> Result<ForegroundMask> {
    if let Some(v) = gt_sem.values().iter().find(|&&v| v != 0.0 && v != 1.0) {
        return Err(Error::InvalidArgument(format!(
            "ground truth must be binary, found {v}"
        )));
    }
    let shape = gt_sem.shape();
    let mut cells: Vec<bool> = gt_sem.values().iter().map(|&v| v == 1.0).collect();
    if radius > 0 {
        let (h, w) = (shape[2], shape[3]);
        let r = radius as isize;
        let src = cells.clone();
        for (plane, out) in src.chunks(h * w).zip(cells.chunks_mut(h * w)) {
            for y in 0..h as isize {
                for x in 0..w as isize {
                    let hit = (-r..=r).any(|dy| {
                        (-r..=r).any(|dx| {
                            let (yy, xx) = (y + dy, x + dx);
                            yy >= 0
                                && xx >= 0
                                && yy < h as isize
                                && xx < w as isize
                                && plane[(yy * w as isize + xx) as usize]
                        })
                    });
                    out[(y * w as isize + x) as usize] = hit;
                }
            }
        }
    }
    Ok(ForegroundMask { shape, cells })
}

/// Masked BCE of the student logits against one reference's probabilities.
fn masked_bce(tape: &mut Tape, s_masked: Var, probs: &Grid4, mask: &ForegroundMask) -> Result<Var> {
    if probs.shape() != mask.shape {
        return Err(Error::shape("msrd reference", &probs.shape(), &mask.shape));
    }
    let target: Vec<f64> = probs
        .values()
        .iter()
        .zip(&mask.cells)
        .filter(|(_, &m)| m)
        .map(|(&p, _)| p)
        .collect();
    let n = target.len();
    let t = tape.constant(Grid4::new([1, 1, 1, n], target)?);
    tape.bce_with_logits(s_masked, t)
}

/// γ₁·BCE(S̃, P_T) + γ₂·BCE(S̃, P_C) with the reference probabilities
/// supplied as constants. A reference that is `None` or has zero weight
/// adds nothing. An empty mask gives 0 with no gradient.
pub fn msrd_on_tape(
    tape: &mut Tape,
    student_logits: Var,
    teacher_probs: Option<&Grid4>,
    coach_probs: Option<&Grid4>,
    mask: &ForegroundMask,
    gamma1: f64,
    gamma2: f64,
) -> Result<Var> {
    let s = tape.shape(student_logits);
    if s != mask.shape {
        return Err(Error::shape("msrd student", &s, &mask.shape));
    }
    let picked = tape.masked_select(student_logits, &mask.cells)?;
    let mut terms = Vec::new();
    for (probs, g) in [(teacher_probs, gamma1), (coach_probs, gamma2)] {
        if let Some(p) = probs.filter(|_| g != 0.0) {
            let l = masked_bce(tape, picked, p, mask)?;
            terms.push(tape.scale(l, g));
        }
    }
    let mut acc = match terms.first() {
        Some(&t) => t,
        None => tape.constant(Grid4::scalar(0.0)),
    };
    for &t in &terms[1.min(terms.len())..] {
        acc = tape.add(acc, t)?;
    }
    Ok(acc)
}

pub fn probabilities(logits: &Grid4) -> Grid4 {
    let mut p = logits.clone().with_requires_grad(false);
    p.values_mut().iter_mut().for_each(|v| *v = sigmoid(*v));
    p
}

/// Value form over logits. The reference probabilities are σ of the
/// reference logits.
pub fn msrd_loss(
    s_s: &Grid4,
    s_t: &Grid4,
    s_c: &Grid4,
    mask: &ForegroundMask,
    gamma1: f64,
    gamma2: f64,
) -> Result<f64> {
    if s_t.shape() != s_s.shape() || s_c.shape() != s_s.shape() {
        return Err(Error::shape("msrd logits", &s_t.shape(), &s_s.shape()));
    }
    let mut tape = Tape::inference();
    let s = tape.constant(s_s.clone());
    let (pt, pc) = (probabilities(s_t), probabilities(s_c));
    let l = msrd_on_tape(&mut tape, s, Some(&pt), Some(&pc), mask, gamma1, gamma2)?;
    Ok(tape.scalar_value(l))
}
