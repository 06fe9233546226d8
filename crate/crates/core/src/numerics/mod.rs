//! Tensor algebra and reverse-mode differentiation.

pub mod gradcheck;
pub mod kernels;
mod tape;
mod tensor;

pub use kernels::{cross_entropy, matmul, rmsnorm, softmax, swiglu_ffn, DEFAULT_RMS_EPS};
pub use tape::{Gradients, RotaryTable, Tape, Var};
pub(crate) use tape::kl_rows;
pub use tensor::Tensor;

use crate::error::Result;

/// Differentiable SwiGLU feed-forward block over `x [m,d]`.
pub fn swiglu_ffn_var(tape: &Tape, x: Var, w_gate: Var, w_up: Var, w_down: Var) -> Result<Var> {
    let gate = tape.matmul(x, w_gate)?;
    let gate = tape.silu(gate)?;
    let up = tape.matmul(x, w_up)?;
    let hidden = tape.mul(gate, up)?;
    tape.matmul(hidden, w_down)
}
