//! Shared building blocks: linear maps, layer norm with learned
//! scale/shift, and multi-head attention.

use super::params::{ParamId, ParamStore};
use crate::numerics::{GradTape, Tensor, Var};
use crate::Result;
use rand_chacha::ChaCha8Rng;

pub(crate) const LN_EPS: f64 = 1e-6;

/// Additive mask value for forbidden attention edges.  Large enough
/// to underflow to exactly zero after softmax, small enough to stay
/// finite under the tape's value checks.
pub(crate) const MASK_NEG: f64 = -1e30;

#[derive(Debug, Clone, Copy)]
pub(crate) struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn alloc(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        d_in: usize,
        d_out: usize,
    ) -> Self {
        Linear {
            w: store.alloc_matrix(&format!("{name}.w"), d_in, d_in, d_out, rng),
            b: store.alloc_filled(&format!("{name}.b"), d_out, 0.0),
        }
    }

    pub fn apply(&self, tape: &mut GradTape, vars: &[Var], x: Var) -> Result<Var> {
        let h = tape.matmul(x, vars[self.w.0])?;
        tape.add_bias(h, vars[self.b.0])
    }
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn alloc(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        LayerNorm {
            gamma: store.alloc_filled(&format!("{name}.gamma"), dim, 1.0),
            beta: store.alloc_filled(&format!("{name}.beta"), dim, 0.0),
        }
    }

    pub fn apply(&self, tape: &mut GradTape, vars: &[Var], x: Var) -> Result<Var> {
        let n = tape.layer_norm_rows(x, LN_EPS)?;
        let scaled = tape.mul_bias(n, vars[self.gamma.0])?;
        tape.add_bias(scaled, vars[self.beta.0])
    }
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct MultiHeadAttention {
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    /// Output projection, applied per head as a row block.
    pub wo: ParamId,
    pub bo: ParamId,
    pub heads: usize,
    pub head_dim: usize,
}

impl MultiHeadAttention {
    pub fn alloc(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        dim: usize,
        heads: usize,
    ) -> Self {
        debug_assert_eq!(dim % heads, 0, "heads must divide width");
        MultiHeadAttention {
            wq: Linear::alloc(store, rng, &format!("{name}.wq"), dim, dim),
            wk: Linear::alloc(store, rng, &format!("{name}.wk"), dim, dim),
            wv: Linear::alloc(store, rng, &format!("{name}.wv"), dim, dim),
            wo: store.alloc_matrix(&format!("{name}.wo"), dim, dim, dim, rng),
            bo: store.alloc_filled(&format!("{name}.bo"), dim, 0.0),
            heads,
            head_dim: dim / heads,
        }
    }

    /// Scaled dot-product attention of `q_in` rows over `kv_in` rows.
    /// `mask`, when given, is an additive Q x K constant (0 for
    /// allowed edges, [`MASK_NEG`] for forbidden ones).
    pub fn apply(
        &self,
        tape: &mut GradTape,
        vars: &[Var],
        q_in: Var,
        kv_in: Var,
        mask: Option<Var>,
    ) -> Result<Var> {
        let q = self.wq.apply(tape, vars, q_in)?;
        let k = self.wk.apply(tape, vars, kv_in)?;
        let v = self.wv.apply(tape, vars, kv_in)?;
        let scale = 1.0 / (self.head_dim as f64).sqrt();
        let mut acc: Option<Var> = None;
        for h in 0..self.heads {
            let c0 = h * self.head_dim;
            let c1 = c0 + self.head_dim;
            let qh = tape.slice_cols(q, c0, c1)?;
            let kh = tape.slice_cols(k, c0, c1)?;
            let vh = tape.slice_cols(v, c0, c1)?;
            let kt = tape.transpose(kh)?;
            let raw = tape.matmul(qh, kt)?;
            let mut scores = tape.scale(raw, scale)?;
            if let Some(m) = mask {
                scores = tape.add(scores, m)?;
            }
            let attn = tape.softmax_rows(scores)?;
            let ctx = tape.matmul(attn, vh)?;
            let wo_h = tape.slice_rows(vars[self.wo.0], c0, c1)?;
            let out_h = tape.matmul(ctx, wo_h)?;
            acc = Some(match acc {
                Some(a) => tape.add(a, out_h)?,
                None => out_h,
            });
        }
        let summed = acc.expect("at least one head");
        tape.add_bias(summed, vars[self.bo.0])
    }
}

/// Additive causal mask: row i may attend to columns 0..=i.
pub(crate) fn causal_mask(tape: &mut GradTape, n: usize) -> Result<Var> {
    let mut data = vec![0.0; n * n];
    for i in 0..n {
        for j in (i + 1)..n {
            data[i * n + j] = MASK_NEG;
        }
    }
    tape.constant(&Tensor::new(n, n, data)?)
}

/// Mean over rows as a 1 x C node (constant averaging weights).
pub(crate) fn mean_rows(tape: &mut GradTape, x: Var) -> Result<Var> {
    let r = x.rows();
    let weights = Tensor::new(1, r, vec![1.0 / r as f64; r])?;
    let w = tape.constant(&weights)?;
    tape.matmul(w, x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn setup() -> (ParamStore, ChaCha8Rng) {
        (ParamStore::new(), ChaCha8Rng::seed_from_u64(5))
    }

    #[test]
    fn linear_shapes() {
        let (mut store, mut rng) = setup();
        let lin = Linear::alloc(&mut store, &mut rng, "lin", 3, 4);
        let mut tape = GradTape::new();
        let vars = store.lift(&mut tape, false).unwrap();
        let x = tape.constant(&Tensor::zeros(2, 3)).unwrap();
        let y = lin.apply(&mut tape, &vars, x).unwrap();
        assert_eq!((y.rows(), y.cols()), (2, 4));
    }

    #[test]
    fn layer_norm_standardizes_rows_at_identity_scale() {
        let (mut store, _) = setup();
        let ln = LayerNorm::alloc(&mut store, "ln", 4);
        let mut tape = GradTape::new();
        let vars = store.lift(&mut tape, false).unwrap();
        let x = tape
            .constant(&Tensor::new(1, 4, vec![1.0, 2.0, 3.0, 4.0]).unwrap())
            .unwrap();
        let y = ln.apply(&mut tape, &vars, x).unwrap();
        let d = tape.data(y);
        let mean: f64 = d.iter().sum::<f64>() / 4.0;
        let var: f64 = d.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 4.0;
        assert!(mean.abs() < 1e-12);
        assert!((var - 1.0).abs() < 1e-4);
    }

    #[test]
    fn causal_mask_zeroes_future_attention() {
        let (mut store, mut rng) = setup();
        let mha = MultiHeadAttention::alloc(&mut store, &mut rng, "attn", 4, 2);
        let mut tape = GradTape::new();
        let vars = store.lift(&mut tape, false).unwrap();
        let x = tape
            .constant(&Tensor::new(3, 4, (0..12).map(|i| i as f64 * 0.1).collect()).unwrap())
            .unwrap();
        let mask = causal_mask(&mut tape, 3).unwrap();
        let y = mha.apply(&mut tape, &vars, x, x, Some(mask)).unwrap();
        // Row 0 attends only to itself, so it must equal the output of
        // running the first row alone.
        let x0 = tape.slice_rows(x, 0, 1).unwrap();
        let y0 = mha.apply(&mut tape, &vars, x0, x0, None).unwrap();
        let full = tape.data(y)[..4].to_vec();
        let alone = tape.data(y0).to_vec();
        for (a, b) in full.iter().zip(&alone) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn mean_rows_averages() {
        let mut tape = GradTape::new();
        let x = tape
            .constant(&Tensor::new(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap())
            .unwrap();
        let m = mean_rows(&mut tape, x).unwrap();
        assert_eq!(tape.data(m), &[2.0, 3.0]);
    }
}
