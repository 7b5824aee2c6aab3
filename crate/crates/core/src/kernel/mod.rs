//! Dense tensor math, the layer vocabulary with exact backprop, Gaussian
//! sampling and a central-difference gradient oracle.

mod layers;
mod tensor;

pub use layers::{softmax, softmax_cross_entropy, softmax_cross_entropy_grad, LayerCache, LayerDescriptor};
pub use tensor::{argmax, Tensor};

use thiserror::Error;

use crate::rng::RngStream;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum KernelError {
    #[error("layer {layer} ({kind}): expected input shape {expected:?}, found {found:?}")]
    ShapeMismatch {
        layer: usize,
        kind: &'static str,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("layer {layer} ({kind}): expected parameter shapes {expected:?}, found {found:?}")]
    ParamMismatch {
        layer: usize,
        kind: &'static str,
        expected: Vec<Vec<usize>>,
        found: Vec<Vec<usize>>,
    },
    #[error("layer {layer} ({kind}): cache does not belong to this layer")]
    CacheMismatch { layer: usize, kind: &'static str },
    #[error("shape {shape:?} does not hold {len} values")]
    LengthMismatch { shape: Vec<usize>, len: usize },
    #[error("invalid shape {0:?}")]
    InvalidShape(Vec<usize>),
    #[error("non-finite value at flat index {index}")]
    NonFinite { index: usize },
    #[error("finite-difference step must be positive, got {0}")]
    InvalidStep(f64),
    #[error("objective returned non-finite value at coordinate {coordinate}")]
    NonFiniteObjective { coordinate: usize },
}

impl KernelError {
    /// Rewrites the layer index carried by shape/param/cache errors.
    pub fn at_layer(self, index: usize) -> Self {
        match self {
            KernelError::ShapeMismatch {
                kind, expected, found, ..
            } => KernelError::ShapeMismatch {
                layer: index,
                kind,
                expected,
                found,
            },
            KernelError::ParamMismatch {
                kind, expected, found, ..
            } => KernelError::ParamMismatch {
                layer: index,
                kind,
                expected,
                found,
            },
            KernelError::CacheMismatch { kind, .. } => KernelError::CacheMismatch { layer: index, kind },
            other => other,
        }
    }
}

/// I.i.d. `N(0, sigma^2)` tensor. `sigma == 0` gives exact zeros without
/// consuming randomness.
pub fn gaussian_sample(shape: &[usize], sigma: f64, rng: &mut RngStream) -> Tensor {
    let mut t = Tensor::zeros(shape);
    if sigma > 0.0 {
        rng.fill_normal(t.data_mut(), sigma);
    }
    t
}

/// Central differences `(f(x + h e_i) - f(x - h e_i)) / 2h` for every coordinate.
pub fn finite_diff_grad<F>(mut f: F, x: &Tensor, h: f64) -> Result<Tensor, KernelError>
where
    F: FnMut(&Tensor) -> f64,
{
    if !(h > 0.0 && h.is_finite()) {
        return Err(KernelError::InvalidStep(h));
    }
    let mut probe = x.clone();
    let mut grad = Tensor::zeros(x.shape());
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let fp = f(&probe);
        probe.data_mut()[i] = orig - h;
        let fm = f(&probe);
        probe.data_mut()[i] = orig;
        if !fp.is_finite() || !fm.is_finite() {
            return Err(KernelError::NonFiniteObjective { coordinate: i });
        }
        grad.data_mut()[i] = (fp - fm) / (2.0 * h);
    }
    Ok(grad)
}
