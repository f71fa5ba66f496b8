//! Orientation-aware complex linear layer.
//!
//! Each input vector `v` is rotated and dilated about its own unit direction
//! `j` by a weight triple `(A, B, C)`: `A` scales the part orthogonal to `j`,
//! `B` turns that part a quarter turn about `j` (`j x v`), and `C` scales the
//! part along `j`. In a right-handed orthonormal basis `(U1, U2, j)` this is
//! the block matrix
//!
//! ```text
//! | A  -B  0 |
//! | B   A  0 |
//! | 0   0  C |
//! ```
//!
//! conjugated by the basis, summed over input channels. The closed form is
//! independent of how `U1, U2` complete the basis; [`complex_linear_basis`]
//! evaluates the basis route and serves as the cross-check.
//!
//! The `B` term is a pseudovector: it commutes with rotations but flips sign
//! relative to `X * R` under reflections, which is the layer's source of
//! handedness.

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{shape_err, Result};
use crate::geometry::{cross, dot, norm, scale, sub, Vec3};

/// Directions shorter than this are degenerate.
pub const DIRECTION_EPS: f64 = 1e-12;

/// Per point and channel orthonormal, positively oriented bases.
#[derive(Clone, Debug, PartialEq)]
pub struct BasisField {
    /// `[N, C, 3, 3]`, rows `U1, U2, j`.
    pub bases: Tensor,
    /// Channels whose direction was degenerate (identity basis).
    pub degenerate: Vec<bool>,
}

/// Completes `j` to a right-handed orthonormal basis with rows `(U1, U2, j)`.
/// The reference axis is global x unless `j` is within ~25 degrees of it,
/// then global y.
pub fn basis_for(j: Vec3) -> Option<[Vec3; 3]> {
    let n = norm(j);
    if n < DIRECTION_EPS {
        return None;
    }
    let jh = scale(j, 1.0 / n);
    let r = if jh[0].abs() > 0.9 {
        [0.0, 1.0, 0.0]
    } else {
        [1.0, 0.0, 0.0]
    };
    let u1 = sub(r, scale(jh, dot(r, jh)));
    let u1 = scale(u1, 1.0 / norm(u1));
    let u2 = cross(jh, u1);
    Some([u1, u2, jh])
}

pub fn orient_basis(j: &Tensor) -> Result<BasisField> {
    let s = j.shape();
    if s.len() != 3 || s[2] != 3 {
        return shape_err("orient_basis", format!("expected [N, C, 3], got {:?}", s));
    }
    let mut data = Vec::with_capacity(j.len() * 3);
    let mut degenerate = Vec::with_capacity(j.len() / 3);
    for v in j.data().chunks(3) {
        match basis_for([v[0], v[1], v[2]]) {
            Some(rows) => {
                rows.iter().for_each(|r| data.extend_from_slice(r));
                degenerate.push(false);
            }
            None => {
                data.extend_from_slice(&[1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]);
                degenerate.push(true);
            }
        }
    }
    Ok(BasisField {
        bases: Tensor::new(vec![s[0], s[1], 3, 3], data)?,
        degenerate,
    })
}

/// Trainable `(A, B, C)`, each `[C', C]`.
#[derive(Clone, Copy, Debug)]
pub struct ComplexWeights {
    pub a: Var,
    pub b: Var,
    pub c: Var,
}

fn check(t: &Tape, v: Var, j: Var, w: &ComplexWeights) -> Result<()> {
    let (sv, sj) = (t.shape(v), t.shape(j));
    if sv.len() != 3 || sv[2] != 3 || sv != sj {
        return shape_err("complex_linear", format!("V {:?} vs J {:?}", sv, sj));
    }
    let sa = t.shape(w.a);
    if sa.len() != 2 || sa[1] != sv[1] || t.shape(w.b) != sa || t.shape(w.c) != sa {
        return shape_err(
            "complex_linear",
            format!(
                "weights {:?}/{:?}/{:?} for {} channels",
                sa,
                t.shape(w.b),
                t.shape(w.c),
                sv[1]
            ),
        );
    }
    Ok(())
}

/// Closed form:
/// `out[i, j] = sum_k A[j,k] (v - (v.u)u) + B[j,k] (u x v) + C[j,k] (v.u)u`
/// with `v = V[i, k]`, `u = J[i, k] / |J[i, k]|`. Degenerate directions keep
/// only the `A v` term.
pub fn complex_linear(t: &mut Tape, v: Var, j: Var, w: &ComplexWeights) -> Result<Var> {
    check(t, v, j, w)?;
    let s = t.shape(v).to_vec();
    let jn = t.norm(j)?;
    let live: Vec<bool> = t.value(jn).data().iter().map(|&n| n >= DIRECTION_EPS).collect();
    let ones = t.constant(Tensor::full(t.shape(jn), 1.0));
    let zeros = t.constant(Tensor::zeros(t.shape(jn)));
    let jn_safe = t.select_where(live.clone(), jn, ones)?;
    let inv = t.reciprocal(jn_safe)?;
    let inv = t.select_where(live, inv, zeros)?;
    let inv = t.reshape(inv, &[s[0], s[1], 1])?;
    let u = t.mul(j, inv)?;

    let along = t.dot(v, u)?;
    let along = t.reshape(along, &[s[0], s[1], 1])?;
    let par = t.mul(along, u)?;
    let perp = t.sub(v, par)?;
    let turn = t.cross(u, v)?;

    let ta = t.channel_contract(w.a, perp)?;
    let tb = t.channel_contract(w.b, turn)?;
    let tc = t.channel_contract(w.c, par)?;
    let ab = t.add(ta, tb)?;
    t.add(ab, tc)
}

/// Basis route: `sum_k R Z(A, B, C)[j, k] R^T v` with `R` the basis whose
/// columns are `U1, U2, j`, given as row-stacked `bases [N, C, 3, 3]`.
pub fn complex_linear_basis(t: &mut Tape, v: Var, bases: Var, w: &ComplexWeights) -> Result<Var> {
    let s = t.shape(v).to_vec();
    if t.shape(bases) != [s[0], s[1], 3, 3] {
        return shape_err(
            "complex_linear_basis",
            format!("bases {:?} for V {:?}", t.shape(bases), s),
        );
    }
    let (n, c) = (s[0], s[1]);
    // Coordinates (v.U1, v.U2, v.j).
    let coords = t.mat3_apply(bases, v)?;
    let cols = t.transpose_last2(bases)?;
    let tile = |m: [f64; 9]| {
        Tensor::from_fn(&[n, c, 3, 3], |i| m[i % 9])
    };
    let planar = t.constant(tile([1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0]));
    let quarter = t.constant(tile([0.0, -1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0]));
    let axial = t.constant(tile([0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0]));

    let mut terms = Vec::with_capacity(3);
    for (m, wt) in [(planar, w.a), (quarter, w.b), (axial, w.c)] {
        let local = t.mat3_apply(m, coords)?;
        let world = t.mat3_apply(cols, local)?;
        terms.push(t.channel_contract(wt, world)?);
    }
    let ab = t.add(terms[0], terms[1])?;
    t.add(ab, terms[2])
}
