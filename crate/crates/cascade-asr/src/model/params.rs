//! Named parameter storage shared by training, checkpointing, and
//! the optimizer.
//!
//! Parameters are allocated once at model construction in a fixed
//! order; that order is the contract for checkpoint layout, optimizer
//! state alignment, and run-to-run determinism.

use crate::numerics::{GradTape, Tensor, Var};
use crate::{Error, Result};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Handle to one parameter tensor inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(pub(crate) usize);

pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore { names: Vec::new(), values: Vec::new() }
    }

    fn register(&mut self, name: &str, value: Tensor) -> ParamId {
        debug_assert!(
            !self.names.iter().any(|n| n == name),
            "duplicate parameter name {name}"
        );
        let id = ParamId(self.values.len());
        self.names.push(name.to_string());
        self.values.push(value);
        id
    }

    /// Weight matrix drawn uniformly from +-1/sqrt(fan_in), where
    /// fan_in is the input width of the x*W product.
    pub fn alloc_matrix(
        &mut self,
        name: &str,
        fan_in: usize,
        rows: usize,
        cols: usize,
        rng: &mut ChaCha8Rng,
    ) -> ParamId {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let data: Vec<f64> = (0..rows * cols).map(|_| rng.gen_range(-bound..bound)).collect();
        self.register(name, Tensor::new(rows, cols, data).expect("alloc shape"))
    }

    /// Row vector filled with a constant (biases, norm offsets).
    pub fn alloc_filled(&mut self, name: &str, cols: usize, fill: f64) -> ParamId {
        self.register(name, Tensor::new(1, cols, vec![fill; cols]).expect("alloc shape"))
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    /// Iterate (name, tensor) in allocation order.
    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(|n| n.as_str()).zip(self.values.iter())
    }

    /// Apply an in-place update to every parameter, in order.  The
    /// callback receives the flat index and a mutable buffer.
    pub fn update_all<F>(&mut self, mut f: F) -> Result<()>
    where
        F: FnMut(usize, &mut [f64]) -> Result<()>,
    {
        for (i, t) in self.values.iter_mut().enumerate() {
            let rows = t.rows();
            let cols = t.cols();
            let mut data = std::mem::replace(t, Tensor::zeros(0, 0)).into_data();
            f(i, &mut data)?;
            *t = Tensor::new(rows, cols, data)?;
        }
        Ok(())
    }

    /// Replace all values from a named list (checkpoint restore).
    /// Names and shapes must match the allocation order exactly.
    pub fn restore(&mut self, entries: Vec<(String, Tensor)>) -> Result<()> {
        if entries.len() != self.values.len() {
            return Err(Error::Checkpoint(format!(
                "parameter count mismatch: checkpoint has {}, model has {}",
                entries.len(),
                self.values.len()
            )));
        }
        for (i, (name, value)) in entries.into_iter().enumerate() {
            if name != self.names[i] {
                return Err(Error::Checkpoint(format!(
                    "parameter {i} name mismatch: checkpoint '{name}', model '{}'",
                    self.names[i]
                )));
            }
            if value.shape() != self.values[i].shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter '{name}' shape mismatch: checkpoint {:?}, model {:?}",
                    value.shape(),
                    self.values[i].shape()
                )));
            }
            self.values[i] = value;
        }
        Ok(())
    }

    /// Put every parameter on a tape, as differentiable leaves when
    /// training and as constants when decoding.
    pub fn lift(&self, tape: &mut GradTape, trainable: bool) -> Result<Vec<Var>> {
        let mut vars = Vec::with_capacity(self.values.len());
        for v in &self.values {
            vars.push(if trainable { tape.leaf(v)? } else { tape.constant(v)? });
        }
        Ok(vars)
    }
}

impl Default for ParamStore {
    fn default() -> Self {
        Self::new()
    }
}
