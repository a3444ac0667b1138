use crate::error::{Error, Result};

/// Dense real-valued array in row-major order.
///
/// Rank-3 tensors are read as `channels x height x width`; anything else is a
/// single channel.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentTensor {
    shape: Vec<usize>,
    values: Vec<f64>,
}

impl LatentTensor {
    pub fn new(shape: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != values.len() {
            return Err(Error::invalid(format!(
                "shape {shape:?} holds {n} elements but {} values were given",
                values.len()
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::invalid(format!("value at index {i} is not finite")));
        }
        Ok(Self { shape, values })
    }

    pub fn from_flat(values: Vec<f64>) -> Result<Self> {
        Self::new(vec![values.len()], values)
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            values: vec![0.0; n],
        }
    }

    /// Builds a tensor without the finiteness scan; callers guarantee it.
    pub(crate) fn from_parts(shape: Vec<usize>, values: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), values.len());
        Self { shape, values }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn channels(&self) -> usize {
        channels_of(&self.shape)
    }

    pub fn ensure_shape(&self, other: &[usize]) -> Result<()> {
        if self.shape != other {
            return Err(Error::ShapeMismatch {
                expected: other.to_vec(),
                actual: self.shape.clone(),
            });
        }
        Ok(())
    }

    pub fn mean_square(&self) -> f64 {
        if self.values.is_empty() {
            return 0.0;
        }
        pairwise_sum(&self.values, |v| v * v) / self.len() as f64
    }

    pub fn mse(&self, other: &LatentTensor) -> Result<f64> {
        other.ensure_shape(&self.shape)?;
        if self.is_empty() {
            return Ok(0.0);
        }
        let diff: Vec<f64> = self
            .values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| a - b)
            .collect();
        Ok(pairwise_sum(&diff, |d| d * d) / self.len() as f64)
    }
}

pub(crate) fn channels_of(shape: &[usize]) -> usize {
    if shape.len() == 3 {
        shape[0]
    } else {
        1
    }
}

/// Pairwise summation of `f(x)`; the result depends only on the input order.
pub fn pairwise_sum(xs: &[f64], f: impl Fn(f64) -> f64 + Copy) -> f64 {
    const LEAF: usize = 128;
    if xs.len() <= LEAF {
        return xs.iter().map(|&x| f(x)).sum();
    }
    let (a, b) = xs.split_at(xs.len() / 2);
    pairwise_sum(a, f) + pairwise_sum(b, f)
}
