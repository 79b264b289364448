//! Dense `f64` tensors with reverse-mode automatic differentiation.
//!
//! Every op records a closure computing its vector-Jacobian product when any
//! input is tracked. Broadcasting is never implicit: use
//! [`Tensor::broadcast_to`] or the scalar ops.

mod autodiff;
mod conv;
mod elementwise;
pub mod gradcheck;
pub(crate) mod linalg;
mod optim;
mod reduce;
mod shape_ops;
mod tensor;

use rand::Rng;
use rand_distr::StandardNormal;

pub use autodiff::{gradients, gradients_wrt, Gradients};
pub use gradcheck::{check_gradients, finite_diff_check, GradCheckReport};
pub use optim::AdamW;
pub use tensor::{BackwardCtx, BackwardFn, Tensor};

#[derive(Debug, thiserror::Error)]
pub enum NumericsError {
    #[error("{op}: shape mismatch {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: {reason}")]
    Invalid { op: &'static str, reason: String },
    #[error("backward needs a one-element root, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),
    #[error("non-finite value: {0}")]
    NonFinite(String),
}

/// Named parameter traversal shared by optimizers and checkpoints.
pub trait Parameterized {
    fn visit_params(&self, f: &mut dyn FnMut(&str, &Tensor));
    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor));

    fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit_params(&mut |_, t| n += t.numel());
        n
    }

    /// Rounds every parameter to the nearest `f32`, the checkpoint precision.
    fn snap_to_f32(&mut self) {
        self.visit_params_mut(&mut |_, t| {
            let data = t.data().iter().map(|&v| v as f32 as f64).collect();
            *t = Tensor::param(data, t.shape()).expect("same shape");
        });
    }
}

/// Gaussian-initialized trainable tensor, values snapped to `f32`.
pub fn randn_param(rng: &mut impl Rng, shape: &[usize], std: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| (rng.sample::<f64, _>(StandardNormal) * std) as f32 as f64)
        .collect();
    Tensor::param(data, shape).expect("shape matches data")
}

pub fn const_param(shape: &[usize], value: f64) -> Tensor {
    Tensor::param(vec![value; shape.iter().product()], shape).expect("shape matches data")
}

pub fn randn(rng: &mut impl Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new((0..n).map(|_| rng.sample(StandardNormal)).collect(), shape).expect("shape matches data")
}
