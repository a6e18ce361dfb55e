use serde::{Deserialize, Serialize};

use crate::nn::NnError;
use crate::scalar::Scalar;

/// Volume dimensions: width, height and depth (channels).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Shape {
    pub width: usize,
    pub height: usize,
    pub depth: usize,
}

impl Shape {
    pub const fn new(width: usize, height: usize, depth: usize) -> Self {
        Self {
            width,
            height,
            depth,
        }
    }

    /// A `1 × 1 × n` shape, the layout of fully connected activations.
    pub const fn flat(n: usize) -> Self {
        Self::new(1, 1, n)
    }

    pub const fn len(&self) -> usize {
        self.width * self.height * self.depth
    }

    pub const fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Flat offset of `(x, y, d)`; storage is row-major by `(y, x, d)`.
    #[inline]
    pub const fn index(&self, x: usize, y: usize, d: usize) -> usize {
        (y * self.width + x) * self.depth + d
    }
}

impl std::fmt::Display for Shape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}x{}", self.width, self.height, self.depth)
    }
}

/// A dense `width × height × depth` volume.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "S: Scalar", try_from = "RawTensor<S>")]
pub struct Tensor<S> {
    shape: Shape,
    data: Vec<S>,
}

impl<S: Scalar> Tensor<S> {
    pub fn zeros(shape: Shape) -> Self {
        Self {
            shape,
            data: vec![S::zero(); shape.len()],
        }
    }

    pub fn from_vec(shape: Shape, data: Vec<S>) -> Result<Self, NnError> {
        if data.len() != shape.len() {
            return Err(NnError::TensorLength {
                shape,
                len: data.len(),
            });
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(NnError::NonFiniteInput { index: pos });
        }
        Ok(Self { shape, data })
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<S> {
        self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, d: usize) -> S {
        self.data[self.shape.index(x, y, d)]
    }

    /// Converts element type, e.g. decoded `f32` pixels into `f64` inputs.
    pub fn cast<T: Scalar>(&self) -> Tensor<T> {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|v| T::of(v.to_f64_lossy())).collect(),
        }
    }
}

#[derive(Deserialize)]
#[serde(bound = "S: Scalar", deny_unknown_fields)]
struct RawTensor<S> {
    shape: Shape,
    data: Vec<S>,
}

impl<S: Scalar> TryFrom<RawTensor<S>> for Tensor<S> {
    type Error = NnError;

    fn try_from(raw: RawTensor<S>) -> Result<Self, Self::Error> {
        Tensor::from_vec(raw.shape, raw.data)
    }
}
