//! Decoder heads: transducer (prediction network + joint), CTC
//! projection, attention decoder, and the masked-LM decoder.
//!
//! Token id conventions: 0 is blank for the transducer and CTC heads
//! and doubles as start/end-of-sequence for the attention decoder;
//! content tokens are 1..=V; V+1 is the mask symbol, which only the
//! masked-LM head ever sees on its input side.

use super::layers::{causal_mask, LayerNorm, Linear, MultiHeadAttention};
use super::params::{ParamId, ParamStore};
use crate::numerics::{GradTape, Var};
use crate::{Error, Result};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Reject target sequences that carry reserved symbols.
pub(crate) fn validate_targets(y: &[usize], vocab: usize) -> Result<()> {
    for &t in y {
        if t == 0 || t > vocab {
            return Err(Error::Domain(format!(
                "target token {t} outside content range 1..={vocab}"
            )));
        }
    }
    Ok(())
}

pub(crate) struct TransducerDecoder {
    emb: ParamId,
    rnn_in: Linear,
    rnn_rec: ParamId,
    joint_enc: Linear,
    joint_pred: Linear,
    joint_out: Linear,
    vocab: usize,
}

impl TransducerDecoder {
    pub fn alloc(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        enc_dim: usize,
        pred_dim: usize,
        joint_dim: usize,
        vocab: usize,
    ) -> Self {
        TransducerDecoder {
            emb: store.alloc_matrix(&format!("{name}.emb"), vocab + 1, vocab + 1, pred_dim, rng),
            rnn_in: Linear::alloc(store, rng, &format!("{name}.rnn_in"), pred_dim, pred_dim),
            rnn_rec: store.alloc_matrix(&format!("{name}.rnn_rec"), pred_dim, pred_dim, pred_dim, rng),
            joint_enc: Linear::alloc(store, rng, &format!("{name}.joint_enc"), enc_dim, joint_dim),
            joint_pred: Linear::alloc(store, rng, &format!("{name}.joint_pred"), pred_dim, joint_dim),
            joint_out: Linear::alloc(store, rng, &format!("{name}.joint_out"), joint_dim, vocab + 1),
            vocab,
        }
    }

    /// One step of the prediction network: consume `token` given the
    /// previous hidden state (None at the start of a sequence).
    pub fn pred_step(
        &self,
        tape: &mut GradTape,
        vars: &[Var],
        token: usize,
        prev: Option<Var>,
    ) -> Result<Var> {
        if token > self.vocab {
            return Err(Error::Domain(format!(
                "prediction network token {token} above vocab {}",
                self.vocab
            )));
        }
        let e = tape.gather_rows(vars[self.emb.0], &[token])?;
        let mut pre = self.rnn_in.apply(tape, vars, e)?;
        if let Some(g) = prev {
            let rec = tape.matmul(g, vars[self.rnn_rec.0])?;
            pre = tape.add(pre, rec)?;
        }
        tape.tanh(pre)
    }

    /// Hidden states for the blank-prefixed target: U+1 rows, where
    /// row u conditions on y[..u].
    pub fn pred_states(&self, tape: &mut GradTape, vars: &[Var], y: &[usize]) -> Result<Var> {
        validate_targets(y, self.vocab)?;
        let mut state = self.pred_step(tape, vars, 0, None)?;
        let mut rows = vec![state];
        for &tok in y {
            state = self.pred_step(tape, vars, tok, Some(state))?;
            rows.push(state);
        }
        tape.concat_rows(&rows)
    }

    /// Encoder-side projection into joint space, one row per frame.
    pub fn project_enc(&self, tape: &mut GradTape, vars: &[Var], h: Var) -> Result<Var> {
        self.joint_enc.apply(tape, vars, h)
    }

    /// Prediction-side projection into joint space.
    pub fn project_pred(&self, tape: &mut GradTape, vars: &[Var], states: Var) -> Result<Var> {
        self.joint_pred.apply(tape, vars, states)
    }

    /// Log-probabilities over blank + content tokens from already
    /// projected joint inputs (any equal number of rows).
    pub fn joint_log_probs(
        &self,
        tape: &mut GradTape,
        vars: &[Var],
        enc_rows: Var,
        pred_rows: Var,
    ) -> Result<Var> {
        let summed = tape.add(enc_rows, pred_rows)?;
        let a = tape.tanh(summed)?;
        let logits = self.joint_out.apply(tape, vars, a)?;
        tape.log_softmax_rows(logits)
    }

    /// The full T' x (U+1) joint lattice as one matrix of
    /// log-probabilities with rows ordered (t, u) = t * (U+1) + u.
    pub fn lattice(
        &self,
        tape: &mut GradTape,
        vars: &[Var],
        h: Var,
        pred_states: Var,
    ) -> Result<Lattice> {
        let enc_p = self.project_enc(tape, vars, h)?;
        let pred_p = self.project_pred(tape, vars, pred_states)?;
        let joint_in = tape.outer_add_rows(enc_p, pred_p)?;
        let a = tape.tanh(joint_in)?;
        let logits = self.joint_out.apply(tape, vars, a)?;
        let log_probs = tape.log_softmax_rows(logits)?;
        Ok(Lattice {
            log_probs,
            t_len: h.rows(),
            u_len: pred_states.rows(),
            vocab: self.vocab,
        })
    }

}

/// Joint-network output for one sequence: log-probabilities over
/// V+1 symbols at every (frame, prefix-length) node.
#[derive(Clone, Copy)]
pub struct Lattice {
    pub log_probs: Var,
    pub t_len: usize,
    /// U + 1 prediction positions (blank-prefixed).
    pub u_len: usize,
    pub vocab: usize,
}

impl Lattice {
    /// Row index of node (t, u) in the log-prob matrix.
    pub fn row(&self, t: usize, u: usize) -> usize {
        t * self.u_len + u
    }
}

pub(crate) struct CtcHead {
    out: Linear,
}

impl CtcHead {
    pub fn alloc(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        dim: usize,
        vocab: usize,
    ) -> Self {
        CtcHead { out: Linear::alloc(store, rng, name, dim, vocab + 1) }
    }

    pub fn log_probs(&self, tape: &mut GradTape, vars: &[Var], h: Var) -> Result<Var> {
        let logits = self.out.apply(tape, vars, h)?;
        tape.log_softmax_rows(logits)
    }
}

/// One pre-norm block of self-attention, cross-attention over the
/// encoder states, and a feed-forward, shared by the attention and
/// masked-LM decoders.
pub(crate) struct CrossAttnLayer {
    ln1: LayerNorm,
    self_attn: MultiHeadAttention,
    ln_cross: LayerNorm,
    cross_attn: MultiHeadAttention,
    ln2: LayerNorm,
    ff1: Linear,
    ff2: Linear,
}

impl CrossAttnLayer {
    fn alloc(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        dim: usize,
        heads: usize,
    ) -> Self {
        CrossAttnLayer {
            ln1: LayerNorm::alloc(store, &format!("{name}.ln1"), dim),
            self_attn: MultiHeadAttention::alloc(store, rng, &format!("{name}.self"), dim, heads),
            ln_cross: LayerNorm::alloc(store, &format!("{name}.lnc"), dim),
            cross_attn: MultiHeadAttention::alloc(store, rng, &format!("{name}.cross"), dim, heads),
            ln2: LayerNorm::alloc(store, &format!("{name}.ln2"), dim),
            ff1: Linear::alloc(store, rng, &format!("{name}.ff1"), dim, dim * 2),
            ff2: Linear::alloc(store, rng, &format!("{name}.ff2"), dim * 2, dim),
        }
    }

    fn apply(
        &self,
        tape: &mut GradTape,
        vars: &[Var],
        x: Var,
        memory: Var,
        self_mask: Option<Var>,
    ) -> Result<Var> {
        let n1 = self.ln1.apply(tape, vars, x)?;
        let sa = self.self_attn.apply(tape, vars, n1, n1, self_mask)?;
        let x = tape.add(x, sa)?;
        let nc = self.ln_cross.apply(tape, vars, x)?;
        let ca = self.cross_attn.apply(tape, vars, nc, memory, None)?;
        let x = tape.add(x, ca)?;
        let n2 = self.ln2.apply(tape, vars, x)?;
        let h = self.ff1.apply(tape, vars, n2)?;
        let a = tape.tanh(h)?;
        let f = self.ff2.apply(tape, vars, a)?;
        tape.add(x, f)
    }
}

pub(crate) struct AttentionDecoder {
    emb: ParamId,
    layer: CrossAttnLayer,
    out: Linear,
    vocab: usize,
}

impl AttentionDecoder {
    pub fn alloc(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        dim: usize,
        heads: usize,
        vocab: usize,
    ) -> Self {
        AttentionDecoder {
            emb: store.alloc_matrix(&format!("{name}.emb"), vocab + 1, vocab + 1, dim, rng),
            layer: CrossAttnLayer::alloc(store, rng, name, dim, heads),
            out: Linear::alloc(store, rng, &format!("{name}.out"), dim, vocab + 1),
            vocab,
        }
    }

    /// Teacher-forced pass over the start-prefixed target.  Returns
    /// (log-probs (U+1) x (V+1), final hidden states (U+1) x D); row u
    /// predicts y[u], with the last row predicting end-of-sequence.
    pub fn forward(
        &self,
        tape: &mut GradTape,
        vars: &[Var],
        memory: Var,
        y: &[usize],
    ) -> Result<(Var, Var)> {
        validate_targets(y, self.vocab)?;
        let mut inputs = Vec::with_capacity(y.len() + 1);
        inputs.push(0); // start symbol shares the blank id
        inputs.extend_from_slice(y);
        let x = tape.gather_rows(vars[self.emb.0], &inputs)?;
        let mask = causal_mask(tape, inputs.len())?;
        let hidden = self.layer.apply(tape, vars, x, memory, Some(mask))?;
        let logits = self.out.apply(tape, vars, hidden)?;
        let log_probs = tape.log_softmax_rows(logits)?;
        Ok((log_probs, hidden))
    }
}

pub(crate) struct MlmDecoder {
    emb: ParamId,
    layer: CrossAttnLayer,
    out: Linear,
    vocab: usize,
}

impl MlmDecoder {
    pub fn alloc(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        dim: usize,
        heads: usize,
        vocab: usize,
    ) -> Self {
        MlmDecoder {
            // Embeddings cover content tokens plus the mask symbol.
            emb: store.alloc_matrix(&format!("{name}.emb"), vocab + 2, vocab + 2, dim, rng),
            layer: CrossAttnLayer::alloc(store, rng, name, dim, heads),
            out: Linear::alloc(store, rng, &format!("{name}.out"), dim, vocab + 2),
            vocab,
        }
    }

    /// Bidirectional pass over a masked target sequence.  Returns
    /// U x (V+2) log-probabilities.
    pub fn forward(
        &self,
        tape: &mut GradTape,
        vars: &[Var],
        memory: Var,
        masked: &[usize],
    ) -> Result<Var> {
        if masked.is_empty() {
            return Err(Error::Domain("masked-LM input is empty".into()));
        }
        for &t in masked {
            if t == 0 || t > self.vocab + 1 {
                return Err(Error::Domain(format!(
                    "masked-LM input token {t} outside 1..={}",
                    self.vocab + 1
                )));
            }
        }
        let x = tape.gather_rows(vars[self.emb.0], masked)?;
        let hidden = self.layer.apply(tape, vars, x, memory, None)?;
        let logits = self.out.apply(tape, vars, hidden)?;
        tape.log_softmax_rows(logits)
    }
}

/// Replace ceil(ratio * U) target positions (at least one) with the
/// mask symbol V+1.  Positions are drawn without replacement from a
/// seeded generator, so a (y, ratio, seed) triple always masks the
/// same places.
pub fn mlm_mask(
    y: &[usize],
    vocab: usize,
    ratio: f64,
    seed: u64,
) -> Result<(Vec<usize>, Vec<usize>)> {
    if y.is_empty() {
        return Err(Error::Domain("cannot mask an empty target".into()));
    }
    if !(ratio > 0.0 && ratio <= 1.0) {
        return Err(Error::Domain(format!("mask ratio {ratio} outside (0, 1]")));
    }
    validate_targets(y, vocab)?;
    let u = y.len();
    let k = ((ratio * u as f64).ceil() as usize).clamp(1, u);
    let mut order: Vec<usize> = (0..u).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in 0..k {
        let j = rng.gen_range(i..u);
        order.swap(i, j);
    }
    let mut positions = order[..k].to_vec();
    positions.sort_unstable();
    let mut masked = y.to_vec();
    for &p in &positions {
        masked[p] = vocab + 1;
    }
    Ok((masked, positions))
}

use rand::SeedableRng;
