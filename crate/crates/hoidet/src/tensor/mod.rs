//! Dense row-major tensors and a tape-based reverse-mode autodiff engine.
//!
//! Everything downstream (attention, the detection model, losses) runs on
//! [`Tensor`] values threaded through a [`Graph`]. Computation is `f64`
//! throughout; the on-disk format ([`hctf`]) additionally supports `f32`
//! payloads.

mod graph;
mod gradcheck;
pub mod hctf;

pub use gradcheck::{finite_diff_check, GradCheck};
pub(crate) use graph::{log_sigmoid, sigmoid as sigmoid_scalar};
pub use graph::{Gradients, Graph, TensorId};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

/// Scalar type used for all in-memory computation.
pub type Real = f64;

/// Norm threshold below which L2 normalization reports a degenerate slice.
pub const ZERO_NORM_EPS: Real = 1e-12;

#[derive(Error, Debug)]
pub enum TensorError {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("{op}: slice {index} has norm {norm:.3e} below {eps:.3e}")]
    ZeroNorm {
        op: &'static str,
        index: usize,
        norm: Real,
        eps: Real,
    },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("tensor id {0} is not a node of this tape")]
    Detached(usize),
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },
    #[error("invalid {what}: {detail}")]
    Invalid { what: &'static str, detail: String },
}

pub type Result<T> = std::result::Result<T, TensorError>;

/// Dense multi-dimensional array, row-major, immutable from the caller's
/// view once handed to a [`Graph`].
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<Real>,
}

impl Tensor {
    pub fn from_vec(shape: Vec<usize>, data: Vec<Real>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if shape.iter().any(|&d| d == 0) {
            return Err(TensorError::Invalid {
                what: "shape",
                detail: format!("zero extent in {shape:?}"),
            });
        }
        if numel != data.len() {
            return Err(TensorError::Invalid {
                what: "shape",
                detail: format!("shape {shape:?} needs {numel} values, got {}", data.len()),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; numel],
        }
    }

    pub fn filled(shape: &[usize], value: Real) -> Self {
        let numel = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; numel],
        }
    }

    pub fn scalar(value: Real) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    /// Row-major matrix from nested slices; rows must be equally long.
    pub fn from_rows(rows: &[Vec<Real>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, |row| row.len());
        if rows.iter().any(|row| row.len() != c) {
            return Err(TensorError::Invalid {
                what: "rows",
                detail: "ragged row lengths".into(),
            });
        }
        Self::from_vec(vec![r, c], rows.concat())
    }

    /// Samples i.i.d. normal entries with the given std.
    pub fn randn(shape: &[usize], std: Real, rng: &mut ChaCha8Rng) -> Self {
        let numel: usize = shape.iter().product();
        let data = (0..numel).map(|_| std * sample_standard_normal(rng)).collect();
        Self {
            shape: shape.to_vec(),
            data,
        }
    }

    /// Normal samples truncated to two standard deviations (resampled).
    pub fn trunc_randn(shape: &[usize], std: Real, rng: &mut ChaCha8Rng) -> Self {
        let numel: usize = shape.iter().product();
        let data = (0..numel)
            .map(|_| {
                loop {
                    let z = sample_standard_normal(rng);
                    if z.abs() <= 2.0 {
                        return std * z;
                    }
                }
            })
            .collect();
        Self {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[Real] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [Real] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<Real> {
        self.data
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> Real {
        debug_assert_eq!(self.data.len(), 1, "item() on non-scalar");
        self.data[0]
    }

    /// 2D element access.
    pub fn at(&self, row: usize, col: usize) -> Real {
        debug_assert_eq!(self.rank(), 2);
        self.data[row * self.shape[1] + col]
    }

    /// Borrow one row of a 2D tensor.
    pub fn row(&self, row: usize) -> &[Real] {
        debug_assert_eq!(self.rank(), 2);
        let c = self.shape[1];
        &self.data[row * c..(row + 1) * c]
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[Real]> {
        debug_assert_eq!(self.rank(), 2);
        self.data.chunks(self.shape[1])
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Stacks equal-shape tensors along a new leading axis.
    pub fn stack(parts: &[Tensor]) -> Result<Self> {
        let first = parts.first().ok_or(TensorError::Invalid {
            what: "stack",
            detail: "empty input".into(),
        })?;
        let mut data = Vec::with_capacity(parts.len() * first.numel());
        for p in parts {
            if p.shape != first.shape {
                return Err(TensorError::ShapeMismatch {
                    op: "stack",
                    detail: format!("{:?} vs {:?}", first.shape, p.shape),
                });
            }
            data.extend_from_slice(&p.data);
        }
        let mut shape = vec![parts.len()];
        shape.extend_from_slice(&first.shape);
        Self::from_vec(shape, data)
    }
}

/// Box-Muller standard normal draw.
fn sample_standard_normal(rng: &mut ChaCha8Rng) -> Real {
    let u1: Real = loop {
        let u: Real = rng.gen();
        if u > 0.0 {
            break u;
        }
    };
    let u2: Real = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Decomposes `shape` around `axis` into (outer, len, inner) extents so the
/// element at (o, i, j) lives at offset `(o * len + i) * inner + j`.
pub(crate) fn axis_dims(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let len = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, len, inner)
}
