//! Sequence losses: CTC, transducer, attention cross-entropy, and
//! masked-LM cross-entropy, plus the weighted offline combination.
//!
//! Every loss is the negative log-likelihood of the full target
//! sequence (a sum over symbols, not a per-symbol mean); batches are
//! averaged over sequences by the caller.  The dynamic programs run as
//! tape operations, so gradients come from the same reverse pass as
//! everything else.  An infeasible alignment (CTC target longer than
//! the frame count allows, or a zero-probability target) produces an
//! infinite loss with no tape node: the value is reported, nothing is
//! backpropagated, and non-finite values never reach the tape.

use crate::model::{validate_targets, Lattice};
use crate::numerics::{GradTape, Var};
use crate::{Error, Result};

/// A scalar loss.  `node` is absent exactly when the value is not
/// finite, so gradient work can only ever see finite losses.
#[derive(Clone, Copy)]
pub struct Loss {
    pub node: Option<Var>,
    pub value: f64,
}

impl Loss {
    pub fn infinite() -> Loss {
        Loss { node: None, value: f64::INFINITY }
    }

    fn from_node(tape: &GradTape, node: Var) -> Loss {
        Loss { node: Some(node), value: tape.scalar_value(node) }
    }

    pub fn is_finite(&self) -> bool {
        self.value.is_finite()
    }
}

/// Negate a log-likelihood node, or report an infinite loss when the
/// likelihood is zero.
fn negate_ll(tape: &mut GradTape, ll: Var) -> Result<Loss> {
    if tape.scalar_value(ll) == f64::NEG_INFINITY {
        return Ok(Loss::infinite());
    }
    let node = tape.neg(ll)?;
    Ok(Loss::from_node(tape, node))
}

/// CTC loss over per-frame log-probabilities (T' rows, V+1 columns
/// with blank in column 0).  Uses the blank-interleaved extended
/// target; adjacent repeats in `y` require a separating blank.
pub fn ctc_loss(tape: &mut GradTape, log_probs: Var, y: &[usize]) -> Result<Loss> {
    let t_len = log_probs.rows();
    if log_probs.cols() < 2 {
        return Err(Error::Shape("CTC table needs blank plus at least one token".into()));
    }
    if t_len == 0 {
        return Err(Error::Shape("CTC table has no frames".into()));
    }
    let vocab = log_probs.cols() - 1;
    validate_targets(y, vocab)?;

    let u = y.len();
    let repeats = y.windows(2).filter(|w| w[0] == w[1]).count();
    if t_len < u + repeats {
        return Ok(Loss::infinite());
    }

    let s_len = 2 * u + 1;
    let z = |s: usize| if s % 2 == 0 { 0 } else { y[s / 2] };
    let neg_inf = tape.constant_scalar(f64::NEG_INFINITY)?;

    let mut alpha: Vec<Var> = vec![neg_inf; s_len];
    alpha[0] = tape.index(log_probs, 0, z(0))?;
    if s_len > 1 {
        alpha[1] = tape.index(log_probs, 0, z(1))?;
    }
    for t in 1..t_len {
        let mut next = Vec::with_capacity(s_len);
        for s in 0..s_len {
            let mut acc = alpha[s];
            if s >= 1 {
                acc = tape.logaddexp(acc, alpha[s - 1])?;
            }
            if s >= 2 && z(s) != 0 && z(s) != z(s - 2) {
                acc = tape.logaddexp(acc, alpha[s - 2])?;
            }
            let emit = tape.index(log_probs, t, z(s))?;
            next.push(tape.add(acc, emit)?);
        }
        alpha = next;
    }
    let ll = if s_len > 1 {
        tape.logaddexp(alpha[s_len - 1], alpha[s_len - 2])?
    } else {
        alpha[0]
    };
    negate_ll(tape, ll)
}

/// Transducer loss over a joint lattice.  The forward recursion walks
/// the (frame, emitted-prefix) grid; any target is feasible as long as
/// there is at least one frame.
pub fn rnnt_loss(tape: &mut GradTape, lattice: &Lattice, y: &[usize]) -> Result<Loss> {
    let u = y.len();
    if lattice.u_len != u + 1 {
        return Err(Error::Shape(format!(
            "lattice has {} prediction rows but target needs {}",
            lattice.u_len,
            u + 1
        )));
    }
    if lattice.t_len == 0 {
        return Err(Error::Shape("lattice has no frames".into()));
    }
    validate_targets(y, lattice.vocab)?;

    let lp = |tape: &mut GradTape, t: usize, uu: usize, k: usize| {
        tape.index(lattice.log_probs, lattice.row(t, uu), k)
    };

    let mut alpha: Vec<Var> = Vec::with_capacity(u + 1);
    alpha.push(tape.constant_scalar(0.0)?);
    for i in 1..=u {
        let emit = lp(tape, 0, i - 1, y[i - 1])?;
        alpha.push(tape.add(alpha[i - 1], emit)?);
    }
    for t in 1..lattice.t_len {
        let mut next = Vec::with_capacity(u + 1);
        let blank = lp(tape, t - 1, 0, 0)?;
        next.push(tape.add(alpha[0], blank)?);
        for i in 1..=u {
            let blank = lp(tape, t - 1, i, 0)?;
            let stay = tape.add(alpha[i], blank)?;
            let emit = lp(tape, t, i - 1, y[i - 1])?;
            let advance = tape.add(next[i - 1], emit)?;
            next.push(tape.logaddexp(stay, advance)?);
        }
        alpha = next;
    }
    let final_blank = lp(tape, lattice.t_len - 1, u, 0)?;
    let ll = tape.add(alpha[u], final_blank)?;
    negate_ll(tape, ll)
}

/// Sum of -log p(target) over rows; one target per row.
fn selection_ce(tape: &mut GradTape, log_probs: Var, targets: &[usize]) -> Result<Loss> {
    if targets.len() != log_probs.rows() {
        return Err(Error::Shape(format!(
            "{} targets for {} rows",
            targets.len(),
            log_probs.rows()
        )));
    }
    let mut total: Option<Var> = None;
    for (r, &t) in targets.iter().enumerate() {
        if t >= log_probs.cols() {
            return Err(Error::Domain(format!(
                "target {t} outside {} classes",
                log_probs.cols()
            )));
        }
        let picked = tape.index(log_probs, r, t)?;
        total = Some(match total {
            None => picked,
            Some(acc) => tape.add(acc, picked)?,
        });
    }
    let ll = total.expect("at least one row");
    negate_ll(tape, ll)
}

/// Attention-decoder cross-entropy: log-probs have U+1 rows over V+1
/// classes; row u is scored against y[u], the last row against
/// end-of-sequence (id 0).
pub fn attention_ce_loss(tape: &mut GradTape, log_probs: Var, y: &[usize]) -> Result<Loss> {
    if log_probs.rows() != y.len() + 1 {
        return Err(Error::Shape(format!(
            "attention scores have {} rows for {} targets",
            log_probs.rows(),
            y.len()
        )));
    }
    validate_targets(y, log_probs.cols() - 1)?;
    let mut targets = y.to_vec();
    targets.push(0);
    selection_ce(tape, log_probs, &targets)
}

/// Masked-LM cross-entropy: only masked positions are scored, each
/// against the original content token.
pub fn mlm_loss(
    tape: &mut GradTape,
    log_probs: Var,
    y: &[usize],
    positions: &[usize],
) -> Result<Loss> {
    if log_probs.rows() != y.len() {
        return Err(Error::Shape(format!(
            "masked-LM scores have {} rows for {} targets",
            log_probs.rows(),
            y.len()
        )));
    }
    if positions.is_empty() {
        return Err(Error::Domain("no masked positions to score".into()));
    }
    let mut total: Option<Var> = None;
    for &p in positions {
        if p >= y.len() {
            return Err(Error::Domain(format!("masked position {p} outside target", )));
        }
        if y[p] >= log_probs.cols() {
            return Err(Error::Domain(format!(
                "target {} outside {} classes",
                y[p],
                log_probs.cols()
            )));
        }
        let picked = tape.index(log_probs, p, y[p])?;
        total = Some(match total {
            None => picked,
            Some(acc) => tape.add(acc, picked)?,
        });
    }
    negate_ll(tape, total.expect("positions checked non-empty"))
}

/// Mixing weights for the offline (full-context) branch losses.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub ctc: f64,
    pub rnnt: f64,
    pub att: f64,
    pub mlm: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { ctc: 0.15, rnnt: 0.10, att: 0.30, mlm: 0.45 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in
            [("ctc", self.ctc), ("rnnt", self.rnnt), ("att", self.att), ("mlm", self.mlm)]
        {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Config(format!(
                    "loss weight {name} must be finite and non-negative, got {v}"
                )));
            }
        }
        Ok(())
    }
}

/// Weighted sum of losses.  Zero-weight terms are dropped entirely, so
/// a disabled component can be infinite without poisoning the total;
/// any weighted infinite term makes the whole sum infinite.
pub fn weighted_sum(tape: &mut GradTape, terms: &[(f64, Loss)]) -> Result<Loss> {
    let mut node: Option<Var> = None;
    for &(w, loss) in terms {
        if !w.is_finite() || w < 0.0 {
            return Err(Error::Domain(format!("loss weight {w} must be finite and non-negative")));
        }
        if w == 0.0 {
            continue;
        }
        match loss.node {
            None => return Ok(Loss::infinite()),
            Some(n) => {
                let scaled = if w == 1.0 { n } else { tape.scale(n, w)? };
                node = Some(match node {
                    None => scaled,
                    Some(acc) => tape.add(acc, scaled)?,
                });
            }
        }
    }
    match node {
        Some(n) => Ok(Loss::from_node(tape, n)),
        None => {
            let zero = tape.constant_scalar(0.0)?;
            Ok(Loss::from_node(tape, zero))
        }
    }
}

/// The offline branch objective: weighted CTC + transducer +
/// attention + masked-LM.
pub fn offline_loss(
    tape: &mut GradTape,
    weights: &LossWeights,
    ctc: Loss,
    rnnt: Loss,
    att: Loss,
    mlm: Loss,
) -> Result<Loss> {
    weights.validate()?;
    weighted_sum(
        tape,
        &[(weights.ctc, ctc), (weights.rnnt, rnnt), (weights.att, att), (weights.mlm, mlm)],
    )
}
