//! Decoding and error metrics: transducer greedy and beam search, CTC
//! greedy, edit distance, character error rate, and relative error
//! reduction.
//!
//! The beam search is frame-synchronous with a merged agenda: at every
//! expansion round within a frame, finished and still-emitting
//! hypotheses compete in one pool that is pruned to the beam width.
//! With a beam of one the pool holds a single hypothesis and every
//! round keeps exactly the argmax continuation, so beam-1 reproduces
//! greedy decoding bit for bit, including the per-frame emission cap.
//! Hypotheses that collapse to the same prefix are merged by adding
//! their probabilities.

use crate::model::{Branch, LiftedModel};
use crate::numerics::{logaddexp, GradTape, Var};
use crate::{Error, Result};

/// Hard ceiling on non-blank emissions within one frame; once reached
/// the decoder is forced through blank to the next frame.
pub const MAX_SYMBOLS_PER_FRAME: usize = 10;

/// A decoded transcript with its log-probability score.
#[derive(Debug, Clone, PartialEq)]
pub struct Hypothesis {
    pub ids: Vec<usize>,
    pub score: f64,
}

/// First index holding the maximum value, so ties prefer blank and
/// then lower token ids.
fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in xs.iter().enumerate().skip(1) {
        if v > xs[best] {
            best = i;
        }
    }
    best
}

/// Greedy transducer decoding over encoded frames `h`.
pub fn rnnt_greedy(
    tape: &mut GradTape,
    model: &LiftedModel,
    branch: Branch,
    h: Var,
) -> Result<Hypothesis> {
    let enc_p = model.project_enc(tape, branch, h)?;
    let mut g = model.pred_step(tape, branch, 0, None)?;
    let mut ids = Vec::new();
    let mut score = 0.0;
    for t in 0..h.rows() {
        let enc_row = tape.slice_rows(enc_p, t, t + 1)?;
        let mut emitted = 0;
        loop {
            let pred_row = model.project_pred(tape, branch, g)?;
            let lp_var = model.joint_log_probs(tape, branch, enc_row, pred_row)?;
            let lp = tape.data(lp_var);
            if emitted >= MAX_SYMBOLS_PER_FRAME {
                score += lp[0];
                break;
            }
            let k = argmax(lp);
            score += lp[k];
            if k == 0 {
                break;
            }
            ids.push(k);
            g = model.pred_step(tape, branch, k, Some(g))?;
            emitted += 1;
        }
    }
    Ok(Hypothesis { ids, score })
}

struct Hyp {
    ids: Vec<usize>,
    score: f64,
    g: Var,
    done: bool,
    emitted: usize,
}

/// Frame-synchronous transducer beam search.
pub fn rnnt_beam_search(
    tape: &mut GradTape,
    model: &LiftedModel,
    branch: Branch,
    h: Var,
    beam: usize,
) -> Result<Hypothesis> {
    if beam == 0 {
        return Err(Error::Domain("beam width must be at least 1".into()));
    }
    let vocab = model.vocab();
    let enc_p = model.project_enc(tape, branch, h)?;
    let g0 = model.pred_step(tape, branch, 0, None)?;
    let mut live = vec![Hyp { ids: Vec::new(), score: 0.0, g: g0, done: false, emitted: 0 }];

    for t in 0..h.rows() {
        let enc_row = tape.slice_rows(enc_p, t, t + 1)?;
        for hyp in &mut live {
            hyp.done = false;
            hyp.emitted = 0;
        }
        while live.iter().any(|h| !h.done) {
            let mut candidates: Vec<Hyp> = Vec::new();
            for hyp in live {
                if hyp.done {
                    candidates.push(hyp);
                    continue;
                }
                let pred_row = model.project_pred(tape, branch, hyp.g)?;
                let lp_var = model.joint_log_probs(tape, branch, enc_row, pred_row)?;
                let lp = tape.data(lp_var).to_vec();
                candidates.push(Hyp {
                    ids: hyp.ids.clone(),
                    score: hyp.score + lp[0],
                    g: hyp.g,
                    done: true,
                    emitted: 0,
                });
                if hyp.emitted < MAX_SYMBOLS_PER_FRAME {
                    for k in 1..=vocab {
                        let g = model.pred_step(tape, branch, k, Some(hyp.g))?;
                        let mut ids = hyp.ids.clone();
                        ids.push(k);
                        candidates.push(Hyp {
                            ids,
                            score: hyp.score + lp[k],
                            g,
                            done: false,
                            emitted: hyp.emitted + 1,
                        });
                    }
                }
            }
            // Merge identical prefixes in the same phase by summing
            // their probabilities.
            let mut merged: Vec<Hyp> = Vec::new();
            for cand in candidates {
                let key = (cand.done, if cand.done { 0 } else { cand.emitted });
                match merged
                    .iter_mut()
                    .find(|m| m.ids == cand.ids && (m.done, if m.done { 0 } else { m.emitted }) == key)
                {
                    Some(m) => m.score = logaddexp(m.score, cand.score),
                    None => merged.push(cand),
                }
            }
            merged.sort_by(|a, b| b.score.partial_cmp(&a.score).expect("finite scores"));
            merged.truncate(beam);
            live = merged;
        }
    }
    let best = live
        .into_iter()
        .max_by(|a, b| a.score.partial_cmp(&b.score).expect("finite scores"))
        .expect("beam is never empty");
    Ok(Hypothesis { ids: best.ids, score: best.score })
}

/// Collapse a frame-wise CTC path: merge adjacent repeats, drop
/// blanks.
pub(crate) fn ctc_collapse(path: &[usize]) -> Vec<usize> {
    let mut out = Vec::new();
    let mut prev = usize::MAX;
    for &p in path {
        if p != prev && p != 0 {
            out.push(p);
        }
        prev = p;
    }
    out
}

/// Best-path CTC decoding over encoded frames `h`.
pub fn ctc_greedy(tape: &mut GradTape, model: &LiftedModel, h: Var) -> Result<Hypothesis> {
    let lp_var = model.ctc_log_probs(tape, h)?;
    let lp = tape.data(lp_var);
    let classes = lp_var.cols();
    let mut path = Vec::with_capacity(h.rows());
    let mut score = 0.0;
    for t in 0..lp_var.rows() {
        let row = &lp[t * classes..(t + 1) * classes];
        let k = argmax(row);
        score += row[k];
        path.push(k);
    }
    Ok(Hypothesis { ids: ctc_collapse(&path), score })
}

/// Edit distance between two token sequences.
pub fn levenshtein(a: &[usize], b: &[usize]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0usize; b.len() + 1];
    for (i, &x) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, &y) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(x != y);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Character error rate of one hypothesis against a non-empty
/// reference: edits divided by reference length.
pub fn cer(reference: &[usize], hypothesis: &[usize]) -> Result<f64> {
    if reference.is_empty() {
        return Err(Error::Domain("character error rate needs a non-empty reference".into()));
    }
    Ok(levenshtein(reference, hypothesis) as f64 / reference.len() as f64)
}

/// Relative error-rate reduction, in percent: how much of the
/// baseline error the improved system removed.
pub fn cerr(baseline: f64, improved: f64) -> Result<f64> {
    if !(baseline > 0.0) || !improved.is_finite() || improved < 0.0 {
        return Err(Error::Domain(format!(
            "error-rate reduction needs baseline > 0 and improved >= 0, got {baseline} and {improved}"
        )));
    }
    Ok(100.0 * (baseline - improved) / baseline)
}
