//! Dense row-major f64 tensors.

use crate::error::{Error, Result};
use crate::rng::Rng;

/// Dense tensor with row-major f64 storage. Immutable by convention once
/// built; the tape never mutates recorded values.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::ShapeMismatch {
                op: "tensor-new",
                detail: format!("shape {:?} implies {} elements, got {}", shape, n, data.len()),
            });
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor { shape, data: vec![0.0; n] }
    }

    pub fn scalar(x: f64) -> Self {
        Tensor { shape: vec![], data: vec![x] }
    }

    pub fn from_vec(data: Vec<f64>) -> Self {
        Tensor { shape: vec![data.len()], data }
    }

    /// rows x cols matrix from a flat row-major vec.
    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Tensor::new(vec![rows, cols], data)
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Tensor::zeros(vec![n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Scalar value; panics if not a single element.
    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on non-scalar tensor");
        self.data[0]
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1 && self.shape.len() <= 1 || self.shape.is_empty()
    }

    /// Matrix entry accessor, rank-2 only.
    pub fn at(&self, i: usize, j: usize) -> f64 {
        debug_assert_eq!(self.rank(), 2);
        self.data[i * self.shape[1] + j]
    }

    pub fn rows(&self) -> usize {
        debug_assert_eq!(self.rank(), 2);
        self.shape[0]
    }

    pub fn cols(&self) -> usize {
        debug_assert_eq!(self.rank(), 2);
        self.shape[1]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    /// Reinterprets the data under a new shape with the same element count.
    pub fn reshape(&self, shape: Vec<usize>) -> Result<Tensor> {
        Tensor::new(shape, self.data.clone())
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn transpose2(&self) -> Tensor {
        assert_eq!(self.rank(), 2);
        let (r, c) = (self.shape[0], self.shape[1]);
        let mut out = Tensor::zeros(vec![c, r]);
        for i in 0..r {
            for j in 0..c {
                out.data[j * r + i] = self.data[i * c + j];
            }
        }
        out
    }
}

/// Uniform fan-in-scaled initialization: each weight drawn from [-beta, beta]
/// with beta = gain * sqrt(6 / fan_in). `Gain::LeakyRelu` uses
/// sqrt(2 / (1 + 0.01^2)) for layers followed by Leaky ReLU; `Gain::Linear`
/// is 1. Biases are initialized separately to zero.
#[derive(Debug, Clone, Copy)]
pub enum Gain {
    Linear,
    LeakyRelu,
}

impl Gain {
    fn value(self) -> f64 {
        match self {
            Gain::Linear => 1.0,
            Gain::LeakyRelu => (2.0 / (1.0 + 0.01f64 * 0.01)).sqrt(),
        }
    }
}

pub fn seeded_init(shape: Vec<usize>, fan_in: usize, gain: Gain, rng: &mut Rng) -> Result<Tensor> {
    if fan_in == 0 {
        return Err(Error::InvalidArgument("seeded_init: fan_in must be >= 1".into()));
    }
    let beta = gain.value() * (6.0 / fan_in as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.uniform(-beta, beta)).collect();
    Tensor::new(shape, data)
}
