//! The cascaded encoder pair.
//!
//! Streaming branch: frames are processed block by block through the
//! whole layer stack.  Each block's pass sees (a) a learned context
//! embedding carried from the previous block, (b) the frames already
//! owned by earlier blocks, and (c) its own frames plus the
//! look-ahead allowance.  Nothing later than the block's look-ahead
//! horizon ever enters the computation, at any depth, so outputs for
//! a block are bit-identical under perturbation of frames beyond the
//! horizon.  Zero-padding of the final short block never reaches
//! attention: keys and values are assembled from real frames only.
//!
//! Full-context branch: ordinary pre-norm self-attention layers over
//! the whole (already encoded) sequence; it consumes the streaming
//! branch's output, making the two branches a cascade.

use super::layers::{mean_rows, Linear, MultiHeadAttention};
use super::layers::LayerNorm;
use super::params::{ParamId, ParamStore};
use crate::blocking::{segment_blocks, visibility_end, BlockSpec};
use crate::numerics::{GradTape, Tensor, Var};
use crate::{Error, Result};
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy)]
pub(crate) struct EncoderLayer {
    ln1: LayerNorm,
    attn: MultiHeadAttention,
    ln2: LayerNorm,
    ff1: Linear,
    ff2: Linear,
}

impl EncoderLayer {
    pub fn alloc(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        dim: usize,
        heads: usize,
        ff_dim: usize,
    ) -> Self {
        EncoderLayer {
            ln1: LayerNorm::alloc(store, &format!("{name}.ln1"), dim),
            attn: MultiHeadAttention::alloc(store, rng, &format!("{name}.attn"), dim, heads),
            ln2: LayerNorm::alloc(store, &format!("{name}.ln2"), dim),
            ff1: Linear::alloc(store, rng, &format!("{name}.ff1"), dim, ff_dim),
            ff2: Linear::alloc(store, rng, &format!("{name}.ff2"), ff_dim, dim),
        }
    }

    fn feed_forward(&self, tape: &mut GradTape, vars: &[Var], x: Var) -> Result<Var> {
        let n = self.ln2.apply(tape, vars, x)?;
        let h = self.ff1.apply(tape, vars, n)?;
        let a = tape.tanh(h)?;
        let f = self.ff2.apply(tape, vars, a)?;
        tape.add(x, f)
    }
}

pub(crate) struct StreamingLayer {
    base: EncoderLayer,
    /// Initial context embedding for the first block.
    ctx0: ParamId,
    /// Maps a block summary to the context given to the next block.
    ctx_update: Linear,
}

pub(crate) struct StreamingEncoder {
    proj: Linear,
    layers: Vec<StreamingLayer>,
    input_dim: usize,
}

/// Per-layer streaming states for one sequence.  `layers[l]` holds the
/// full-rate T x D output of layer l; `output` is the final layer
/// after subsampling, which is what the full-context branch and the
/// transducer consume.
pub struct StreamStates {
    pub layers: Vec<Var>,
    pub output: Var,
}

impl StreamingEncoder {
    pub fn alloc(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        input_dim: usize,
        dim: usize,
        heads: usize,
        n_layers: usize,
    ) -> Self {
        let proj = Linear::alloc(store, rng, "st.proj", input_dim, dim);
        let layers = (0..n_layers)
            .map(|l| StreamingLayer {
                base: EncoderLayer::alloc(
                    store,
                    rng,
                    &format!("st.layer{l}"),
                    dim,
                    heads,
                    dim * 2,
                ),
                ctx0: store.alloc_matrix(&format!("st.layer{l}.ctx0"), dim, 1, dim, rng),
                ctx_update: Linear::alloc(store, rng, &format!("st.layer{l}.ctx"), dim, dim),
            })
            .collect();
        StreamingEncoder { proj, layers, input_dim }
    }

    pub fn forward(
        &self,
        tape: &mut GradTape,
        vars: &[Var],
        feats: &Tensor,
        spec: &BlockSpec,
        subsample: usize,
    ) -> Result<StreamStates> {
        if feats.cols() != self.input_dim {
            return Err(Error::Shape(format!(
                "feature width {} does not match encoder input {}",
                feats.cols(),
                self.input_dim
            )));
        }
        let frames = feats.rows();
        let blocks = segment_blocks(frames, spec)?;
        let x = tape.constant(feats)?;
        let proj = self.proj.apply(tape, vars, x)?;

        let n_layers = self.layers.len();
        let mut ctx: Vec<Var> = self.layers.iter().map(|l| vars[l.ctx0.0]).collect();
        // Per layer: owned rows of that layer's *input*, one entry per
        // completed block, attended as history by later blocks.
        let mut history: Vec<Vec<Var>> = vec![Vec::new(); n_layers];
        // Per layer: owned rows of that layer's *output*, concatenated
        // at the end into the layer's full state.
        let mut owned_out: Vec<Vec<Var>> = vec![Vec::new(); n_layers];

        let mut own_start = 0usize;
        for block in &blocks {
            let vis = visibility_end(block.index, spec, frames);
            let own_end = block.end;
            let rel0 = own_start - block.start;
            let rel1 = own_end - block.start;
            let mut cur = tape.slice_rows(proj, block.start, vis)?;
            for (l, layer) in self.layers.iter().enumerate() {
                let owned_in = tape.slice_rows(cur, rel0, rel1)?;
                // Keys/values: context embedding, owned history, and
                // the local window, all in this layer's input space.
                let mut kv_parts = vec![ctx[l]];
                kv_parts.extend(history[l].iter().copied());
                kv_parts.push(cur);
                let kv_raw = tape.concat_rows(&kv_parts)?;
                let kvn = layer.base.ln1.apply(tape, vars, kv_raw)?;
                let local0 = kvn.rows() - cur.rows();
                let qn = tape.slice_rows(kvn, local0, kvn.rows())?;
                let attn = layer.base.attn.apply(tape, vars, qn, kvn, None)?;
                cur = tape.add(cur, attn)?;
                cur = layer.base.feed_forward(tape, vars, cur)?;

                let owned = tape.slice_rows(cur, rel0, rel1)?;
                let summary = mean_rows(tape, owned)?;
                let upd = layer.ctx_update.apply(tape, vars, summary)?;
                ctx[l] = tape.tanh(upd)?;
                history[l].push(owned_in);
                owned_out[l].push(owned);
            }
            own_start = own_end;
        }

        let mut layer_states = Vec::with_capacity(n_layers);
        for parts in &owned_out {
            layer_states.push(tape.concat_rows(parts)?);
        }
        let last = *layer_states.last().expect("at least one layer");
        let output = if subsample > 1 {
            let idx: Vec<usize> = (0..frames).step_by(subsample).collect();
            tape.gather_rows(last, &idx)?
        } else {
            last
        };
        Ok(StreamStates { layers: layer_states, output })
    }
}

pub(crate) struct FullContextEncoder {
    layers: Vec<EncoderLayer>,
    dim: usize,
}

/// Per-layer full-context states for one sequence; the last entry is
/// the branch output.
pub struct FullContextStates {
    pub layers: Vec<Var>,
}

impl FullContextStates {
    pub fn output(&self) -> Var {
        *self.layers.last().expect("at least one layer")
    }
}

impl FullContextEncoder {
    pub fn alloc(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        dim: usize,
        heads: usize,
        n_layers: usize,
    ) -> Self {
        let layers = (0..n_layers)
            .map(|l| EncoderLayer::alloc(store, rng, &format!("fc.layer{l}"), dim, heads, dim * 2))
            .collect();
        FullContextEncoder { layers, dim }
    }

    pub fn forward(&self, tape: &mut GradTape, vars: &[Var], h: Var) -> Result<FullContextStates> {
        if h.cols() != self.dim {
            return Err(Error::Shape(format!(
                "full-context input width {} does not match {}",
                h.cols(),
                self.dim
            )));
        }
        let mut x = h;
        let mut states = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let xn = layer.ln1.apply(tape, vars, x)?;
            let attn = layer.attn.apply(tape, vars, xn, xn, None)?;
            x = tape.add(x, attn)?;
            x = layer.feed_forward(tape, vars, x)?;
            states.push(x);
        }
        Ok(FullContextStates { layers: states })
    }
}
