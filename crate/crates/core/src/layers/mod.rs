//! Learnable layers over vector features `[N, C, 3]`.

mod attention;
mod complex;
mod gradcheck;
mod vn;

pub use attention::{cross_attention, ATTENTION_EPS};
pub use complex::{
    basis_for, complex_linear, complex_linear_basis, orient_basis, BasisField, ComplexWeights,
    DIRECTION_EPS,
};
pub use gradcheck::{layer_gradient_check, GRADIENT_LAYERS, GRADIENT_STEP};
pub use vn::{
    broadcast_points, vn_global_mean, vn_invariant, vn_linear, vn_mean_pool, vn_relu,
    RELU_NORM_EPS,
};
