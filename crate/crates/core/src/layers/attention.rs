//! Cross-product attention over points.
//!
//! For channel `c`, query point `p` attends to every point `q` with weight
//! `softmax_q |Q[p,c] x K[q,c]|`, so keys orthogonal to the query dominate.
//! The attended value is the unit-normalised cross product `Q[p,c] x V[q,c]`,
//! a direction orthogonal to the query that completes a local frame.

use crate::autodiff::{attention_weights, Tape, Tensor, Var};
use crate::error::Result;

/// Added to `|Q x V|` before normalising.
pub const ATTENTION_EPS: f64 = 1e-8;

/// Returns the attended features `[N, C, 3]` and the weights `[C, N, N]`.
pub fn cross_attention(t: &mut Tape, q: Var, k: Var, v: Var) -> Result<(Var, Tensor)> {
    let out = t.cross_attention(q, k, v, ATTENTION_EPS)?;
    let weights = attention_weights(t.value(q), t.value(k))?;
    Ok((out, weights))
}
