//! Vector-neuron layers. Every feature channel is a 3-vector and weights only
//! mix channels, so each layer commutes with `X -> X * R` for any `R` in O(3).

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{shape_err, Result};

/// Norms below this leave VN-ReLU inputs untouched.
pub const RELU_NORM_EPS: f64 = 1e-12;

/// `out[.., j, :] = sum_k W[j, k] X[.., k, :]` for `X [.., C, 3]`, `W [C', C]`.
pub fn vn_linear(t: &mut Tape, x: Var, w: Var) -> Result<Var> {
    t.channel_contract(w, x)
}

/// Vector-neuron ReLU: `q = W X`, `k = U X`; where `<q, k> < 0` the component
/// of `q` along `k` is removed, otherwise `q` passes through.
pub fn vn_relu(t: &mut Tape, x: Var, w: Var, u: Var) -> Result<Var> {
    let q = vn_linear(t, x, w)?;
    let k = vn_linear(t, x, u)?;
    let qk = t.dot(q, k)?;
    let kk = t.dot(k, k)?;

    let qk_v = t.value(qk).data().to_vec();
    let kk_v = t.value(kk).data().to_vec();
    let tiny = RELU_NORM_EPS * RELU_NORM_EPS;
    // Pass-through where <q, k> >= 0 (including the kink) or k vanishes.
    let pass: Vec<bool> = qk_v
        .iter()
        .zip(&kk_v)
        .map(|(&d, &n)| d >= 0.0 || n < tiny)
        .collect();
    if pass.iter().all(|&p| p) {
        return Ok(q);
    }

    let shape = t.shape(kk).to_vec();
    let ones = t.constant(Tensor::full(&shape, 1.0));
    let safe_mask: Vec<bool> = kk_v.iter().map(|&n| n >= tiny).collect();
    let kk_safe = t.select_where(safe_mask, kk, ones)?;
    let inv = t.reciprocal(kk_safe)?;
    let coef = t.mul(qk, inv)?;
    let mut cshape = shape.clone();
    cshape.push(1);
    let coef = t.reshape(coef, &cshape)?;
    let proj = t.mul(coef, k)?;
    let cut = t.sub(q, proj)?;

    let mask3: Vec<bool> = pass.iter().flat_map(|&p| [p, p, p]).collect();
    t.select_where(mask3, q, cut)
}

/// Mean over `axis` (the neighbour axis of patch features).
pub fn vn_mean_pool(t: &mut Tape, x: Var, axis: usize) -> Result<Var> {
    t.mean(x, axis)
}

/// Mean over points: `[N, C, 3] -> [1, C, 3]`.
pub fn vn_global_mean(t: &mut Tape, x: Var) -> Result<Var> {
    let s = t.shape(x).to_vec();
    if s.len() != 3 {
        return shape_err("vn_global_mean", format!("expected [N, C, 3], got {:?}", s));
    }
    let m = t.mean(x, 0)?;
    t.reshape(m, &[1, s[1], s[2]])
}

/// Repeats a `[1, C, 3]` feature over `n` points.
pub fn broadcast_points(t: &mut Tape, g: Var, n: usize) -> Result<Var> {
    t.gather_rows(g, vec![0; n])
}

/// Invariant features `[N, 3C]`: inner products of every channel of `X` with
/// three directions `D = T [X, mean(X)]`.
pub fn vn_invariant(t: &mut Tape, x: Var, tw: Var) -> Result<Var> {
    let s = t.shape(x).to_vec();
    if s.len() != 3 || s[2] != 3 {
        return shape_err("vn_invariant", format!("expected [N, C, 3], got {:?}", s));
    }
    let (n, c) = (s[0], s[1]);
    if t.shape(tw) != [3, 2 * c] {
        return shape_err(
            "vn_invariant",
            format!("weights {:?} for {} channels", t.shape(tw), c),
        );
    }
    let g = vn_global_mean(t, x)?;
    let gb = broadcast_points(t, g, n)?;
    let cat = t.concat(&[x, gb], 1)?;
    let d = vn_linear(t, cat, tw)?;
    let xe = t.reshape(x, &[n, c, 1, 3])?;
    let de = t.reshape(d, &[n, 1, 3, 3])?;
    let gram = t.dot(xe, de)?;
    t.reshape(gram, &[n, 3 * c])
}
