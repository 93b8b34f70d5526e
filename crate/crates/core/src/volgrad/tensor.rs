use crate::error::{Error, Result};

use super::element::Element;

/// Dense row-major array of rank 1 to 5. Volumetric tensors use the layout
/// `(batch, channel, depth, height, width)` with width varying fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T = f32> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Element> Tensor<T> {
    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Result<Self> {
        check_shape(shape)?;
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::shape("tensor", shape, &[data.len()]));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        check_shape(shape).expect("valid tensor shape");
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, T::one())
    }

    pub fn scalar(value: T) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        check_shape(shape).expect("valid tensor shape");
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: (0..n).map(&mut f).collect(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Shape as `[N, C, D, H, W]`; errors for tensors of any other rank.
    pub fn dims5(&self) -> Result<[usize; 5]> {
        <[usize; 5]>::try_from(self.shape.as_slice())
            .map_err(|_| Error::contract(format!("expected a rank-5 tensor, got {:?}", self.shape)))
    }

    /// Spatial voxel count `D·H·W` of a rank-5 tensor.
    pub fn spatial_len(&self) -> usize {
        self.shape[2..].iter().product()
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        check_shape(shape)?;
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(Error::shape("reshape", &self.shape, shape));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Result<Self> {
        if self.shape != other.shape {
            return Err(Error::shape("zip_map", &self.shape, &other.shape));
        }
        Ok(Self {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    /// `self += other` elementwise; shapes must agree.
    pub fn add_assign(&mut self, other: &Self) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a = *a + b;
        }
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn dot(&self, other: &Self) -> T {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| a * b)
            .sum()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Converts element type through `f64`.
    pub fn cast<U: Element>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .map(|v| U::from_f64_lossy(v.to_f64_lossy()))
                .collect(),
        }
    }

    /// Channel slab `[n, c]` of a rank-5 tensor as a contiguous slice.
    pub fn channel(&self, n: usize, c: usize) -> &[T] {
        let vol = self.spatial_len();
        let start = (n * self.shape[1] + c) * vol;
        &self.data[start..start + vol]
    }

    pub fn channel_mut(&mut self, n: usize, c: usize) -> &mut [T] {
        let vol = self.spatial_len();
        let start = (n * self.shape[1] + c) * vol;
        &mut self.data[start..start + vol]
    }

    /// Per-voxel argmax over channels of a rank-5 tensor, as `[N, D, H, W]`
    /// flattened channel indices.
    pub fn argmax_channels(&self) -> Vec<usize> {
        let [n, c, ..] = self.dims5().expect("argmax over a rank-5 tensor");
        let vol = self.spatial_len();
        let mut out = vec![0usize; n * vol];
        for b in 0..n {
            for i in 0..vol {
                let mut best = 0;
                let mut best_v = self.data[b * c * vol + i];
                for ch in 1..c {
                    let v = self.data[(b * c + ch) * vol + i];
                    if v > best_v {
                        best = ch;
                        best_v = v;
                    }
                }
                out[b * vol + i] = best;
            }
        }
        out
    }
}

fn check_shape(shape: &[usize]) -> Result<()> {
    if shape.is_empty() || shape.len() > 5 {
        return Err(Error::contract(format!(
            "tensor rank must be 1..=5, got {}",
            shape.len()
        )));
    }
    if shape.contains(&0) {
        return Err(Error::contract(format!(
            "tensor extents must be positive, got {shape:?}"
        )));
    }
    Ok(())
}
