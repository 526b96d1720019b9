//! Small building blocks shared by the model heads.

use rand::Rng;

use crate::autodiff::{ParamId, ParamStore, Tape, Tensor, Var};
use crate::error::Result;

/// Glorot-normal initialisation for a `fan_in × fan_out` weight.
pub fn glorot<R: Rng + ?Sized>(fan_in: usize, fan_out: usize, rng: &mut R) -> Tensor {
    let std = (2.0 / (fan_in + fan_out) as f64).sqrt();
    Tensor::randn(&[fan_in, fan_out], std, rng)
}

/// Affine map `x·W + b` on row-major batches.
#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            w: store.add(format!("{name}.w"), glorot(fan_in, fan_out, rng))?,
            b: store.add(format!("{name}.b"), Tensor::zeros(&[fan_out]))?,
            fan_in,
            fan_out,
        })
    }

    pub fn forward(&self, tape: &Tape, x: Var) -> Result<Var> {
        affine(tape, x, self.w, self.b)
    }
}

pub fn affine(tape: &Tape, x: Var, w: ParamId, b: ParamId) -> Result<Var> {
    let y = tape.matmul(x, tape.param(w))?;
    tape.add_row(y, tape.param(b))
}
