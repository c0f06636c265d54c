//! Dense-tensor numerics with reverse-mode automatic differentiation.
//!
//! Tensors are immutable value types storing flat `f64` data; an optional
//! precision flag rounds every primitive result through `f32`, which keeps
//! float32 training bitwise reproducible while gradients always accumulate
//! in `f64`. A dynamic tape records primitive applications during the
//! forward pass and replays their adjoints in reverse order.

mod gradcheck;
mod ops;
mod signal;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, GradCheckOptions, GradCheckReport};
pub use ops::{
    add, add_bias, concat_cols, div_by_scalar, gather, gelu, layer_norm, logsumexp_rows, matmul,
    mean_all, mean_axis0, mul, scale, select, slice_cols, softmax, sub, sum_all, transpose,
};
pub use signal::{gaussian_blur3d, resample_nearest3d, resample_trilinear};
pub use tape::{backward, Tape};
pub use tensor::{Grid, Precision, Tensor};
