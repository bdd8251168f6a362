//! The joint streaming/non-streaming model: a streaming block encoder
//! cascaded into a full-context encoder, with a transducer head per
//! branch and CTC, attention, and masked-LM heads on the full-context
//! branch.

mod checkpoint;
mod decoder;
mod encoder;
pub(crate) mod layers;
pub mod params;

pub use decoder::{mlm_mask, Lattice};
pub(crate) use decoder::validate_targets;
pub use encoder::{FullContextStates, StreamStates};

use crate::blocking::BlockSpec;
use crate::numerics::{GradTape, Tensor, Var};
use crate::{Error, Result};
use decoder::{AttentionDecoder, CtcHead, MlmDecoder, TransducerDecoder};
use encoder::{FullContextEncoder, StreamingEncoder};
use params::ParamStore;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Width of the input feature vectors.
    pub input_dim: usize,
    /// Model width; all encoder and decoder states use this size.
    pub dim: usize,
    pub heads: usize,
    pub streaming_layers: usize,
    pub full_context_layers: usize,
    /// Number of content tokens; ids run 1..=vocab.
    pub vocab: usize,
    /// Frame-rate reduction applied to the streaming encoder output.
    pub subsample: usize,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("input_dim", self.input_dim),
            ("dim", self.dim),
            ("heads", self.heads),
            ("streaming_layers", self.streaming_layers),
            ("full_context_layers", self.full_context_layers),
            ("vocab", self.vocab),
            ("subsample", self.subsample),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("model.{name} must be at least 1")));
            }
        }
        if self.dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "model.dim {} is not divisible by model.heads {}",
                self.dim, self.heads
            )));
        }
        Ok(())
    }

    /// Frames the transducer sees for an input of `frames` frames.
    pub fn encoded_len(&self, frames: usize) -> usize {
        frames.div_ceil(self.subsample)
    }
}

/// Which transducer head to use.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Branch {
    Streaming,
    Offline,
}

pub struct Model {
    cfg: ModelConfig,
    store: ParamStore,
    st_enc: StreamingEncoder,
    fc_enc: FullContextEncoder,
    st_td: TransducerDecoder,
    off_td: TransducerDecoder,
    ctc: CtcHead,
    att: AttentionDecoder,
    mlm: MlmDecoder,
}

impl Model {
    /// Allocate all parameters from one seeded generator.  Allocation
    /// order is fixed, so a (config, seed) pair fully determines every
    /// initial value.
    pub fn new(cfg: &ModelConfig, seed: u64) -> Result<Model> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = cfg.dim;
        let st_enc = StreamingEncoder::alloc(
            &mut store,
            &mut rng,
            cfg.input_dim,
            d,
            cfg.heads,
            cfg.streaming_layers,
        );
        let fc_enc =
            FullContextEncoder::alloc(&mut store, &mut rng, d, cfg.heads, cfg.full_context_layers);
        let st_td = TransducerDecoder::alloc(&mut store, &mut rng, "st_rnnt", d, d, d, cfg.vocab);
        let off_td = TransducerDecoder::alloc(&mut store, &mut rng, "off_rnnt", d, d, d, cfg.vocab);
        let ctc = CtcHead::alloc(&mut store, &mut rng, "ctc.out", d, cfg.vocab);
        let att = AttentionDecoder::alloc(&mut store, &mut rng, "att", d, cfg.heads, cfg.vocab);
        let mlm = MlmDecoder::alloc(&mut store, &mut rng, "mlm", d, cfg.heads, cfg.vocab);
        Ok(Model { cfg: cfg.clone(), store, st_enc, fc_enc, st_td, off_td, ctc, att, mlm })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn param_count(&self) -> usize {
        self.store.iter().map(|(_, t)| t.numel()).sum()
    }

    /// Put every parameter on the tape; `trainable` decides whether
    /// they are gradient leaves or constants.
    pub fn lift<'m>(&'m self, tape: &mut GradTape, trainable: bool) -> Result<LiftedModel<'m>> {
        let vars = self.store.lift(tape, trainable)?;
        Ok(LiftedModel { model: self, vars })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        checkpoint::save(self, path)
    }

    pub fn load(path: &Path) -> Result<Model> {
        checkpoint::load(path)
    }
}

/// A model whose parameters live on a tape, ready to run forward
/// passes.
pub struct LiftedModel<'m> {
    model: &'m Model,
    vars: Vec<Var>,
}

impl LiftedModel<'_> {
    pub fn config(&self) -> &ModelConfig {
        &self.model.cfg
    }

    pub fn vocab(&self) -> usize {
        self.model.cfg.vocab
    }

    /// Parameter tape nodes, in allocation order.
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    pub fn streaming_encode(
        &self,
        tape: &mut GradTape,
        feats: &Tensor,
        spec: &BlockSpec,
    ) -> Result<StreamStates> {
        self.model.st_enc.forward(tape, &self.vars, feats, spec, self.model.cfg.subsample)
    }

    pub fn full_context_encode(&self, tape: &mut GradTape, h: Var) -> Result<FullContextStates> {
        self.model.fc_enc.forward(tape, &self.vars, h)
    }

    fn transducer(&self, branch: Branch) -> &TransducerDecoder {
        match branch {
            Branch::Streaming => &self.model.st_td,
            Branch::Offline => &self.model.off_td,
        }
    }

    pub fn pred_states(&self, tape: &mut GradTape, branch: Branch, y: &[usize]) -> Result<Var> {
        self.transducer(branch).pred_states(tape, &self.vars, y)
    }

    pub fn pred_step(
        &self,
        tape: &mut GradTape,
        branch: Branch,
        token: usize,
        prev: Option<Var>,
    ) -> Result<Var> {
        self.transducer(branch).pred_step(tape, &self.vars, token, prev)
    }

    pub fn lattice(
        &self,
        tape: &mut GradTape,
        branch: Branch,
        h: Var,
        pred_states: Var,
    ) -> Result<Lattice> {
        self.transducer(branch).lattice(tape, &self.vars, h, pred_states)
    }

    pub fn project_enc(&self, tape: &mut GradTape, branch: Branch, h: Var) -> Result<Var> {
        self.transducer(branch).project_enc(tape, &self.vars, h)
    }

    pub fn project_pred(&self, tape: &mut GradTape, branch: Branch, states: Var) -> Result<Var> {
        self.transducer(branch).project_pred(tape, &self.vars, states)
    }

    pub fn joint_log_probs(
        &self,
        tape: &mut GradTape,
        branch: Branch,
        enc_rows: Var,
        pred_rows: Var,
    ) -> Result<Var> {
        self.transducer(branch).joint_log_probs(tape, &self.vars, enc_rows, pred_rows)
    }

    pub fn ctc_log_probs(&self, tape: &mut GradTape, h: Var) -> Result<Var> {
        self.model.ctc.log_probs(tape, &self.vars, h)
    }

    pub fn attention_forward(
        &self,
        tape: &mut GradTape,
        memory: Var,
        y: &[usize],
    ) -> Result<(Var, Var)> {
        self.model.att.forward(tape, &self.vars, memory, y)
    }

    pub fn mlm_log_probs(&self, tape: &mut GradTape, memory: Var, masked: &[usize]) -> Result<Var> {
        self.model.mlm.forward(tape, &self.vars, memory, masked)
    }
}
