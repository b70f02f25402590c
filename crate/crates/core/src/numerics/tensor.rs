use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

/// Dense row-major `f64` array. A rank-0 tensor (empty shape) is a scalar.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::dim("tensor", format!("zero-sized dimension in {shape:?}")));
        }
        if numel(&shape) != data.len() {
            return Err(Error::dim(
                "tensor",
                format!("shape {shape:?} needs {} elements, got {}", numel(&shape), data.len()),
            ));
        }
        Ok(Tensor { shape, data })
    }

    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(numel(&shape), data.len());
        Tensor { shape, data }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor::from_parts(shape.to_vec(), vec![0.0; numel(shape)])
    }

    pub fn ones(shape: &[usize]) -> Self {
        Tensor::from_parts(shape.to_vec(), vec![1.0; numel(shape)])
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        Tensor::from_parts(shape.to_vec(), vec![value; numel(shape)])
    }

    pub fn scalar(value: f64) -> Self {
        Tensor::from_parts(Vec::new(), vec![value])
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Tensor::from_parts(vec![data.len()], data)
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Tensor::new(vec![rows, cols], data)
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::dim("from_rows", "ragged rows"));
        }
        Tensor::new(vec![rows.len(), cols], rows.concat())
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Tensor::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    /// Uniform samples in `[lo, hi)`.
    pub fn uniform<R: Rng + ?Sized>(shape: &[usize], lo: f64, hi: f64, rng: &mut R) -> Self {
        let data = (0..numel(shape)).map(|_| rng.gen_range(lo..hi)).collect();
        Tensor::from_parts(shape.to_vec(), data)
    }

    /// Normal(0, std) samples truncated to two standard deviations by resampling.
    pub fn trunc_normal<R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Self {
        let normal = Normal::new(0.0, 1.0).expect("unit normal");
        let data = (0..numel(shape))
            .map(|_| loop {
                let x: f64 = normal.sample(rng);
                if x.abs() <= 2.0 {
                    break x * std;
                }
            })
            .collect();
        Tensor::from_parts(shape.to_vec(), data)
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

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        if numel(shape) != self.len() {
            return Err(Error::dim(
                "reshape",
                format!("{:?} -> {:?} changes element count", self.shape, shape),
            ));
        }
        Ok(Tensor::from_parts(shape.to_vec(), self.data.clone()))
    }

    /// Row `i` of a rank-2 tensor.
    pub fn row(&self, i: usize) -> &[f64] {
        let cols = *self.shape.last().expect("row() on scalar");
        &self.data[i * cols..(i + 1) * cols]
    }

    pub fn rows(&self) -> usize {
        if self.shape.is_empty() {
            1
        } else {
            self.len() / self.shape[self.shape.len() - 1]
        }
    }

    pub fn cols(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}
