use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::memory::Buffer;
use crate::{Error, Result, Scalar};

/// Seedable generator used for every initialization and dropout mask.
///
/// ChaCha with 8 rounds: the stream for a given seed is fixed across
/// platforms and crate versions, so runs are reproducible.
pub type InitRng = ChaCha8Rng;

pub fn rng_from_seed(seed: u64) -> InitRng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Dense row-major array with at least one dimension.
#[derive(Clone, PartialEq)]
pub struct Tensor<T: Scalar = f32> {
    shape: Vec<usize>,
    data: Buffer<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: &[usize], data: Vec<T>) -> Result<Self> {
        if shape.is_empty() {
            return Err(Error::Contract(
                "tensor needs at least one dimension".into(),
            ));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::dim("tensor", shape, &[data.len()]));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data: Buffer::from_vec(data),
        })
    }

    pub(crate) fn from_buffer(shape: &[usize], data: Buffer<T>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        assert!(!shape.is_empty(), "tensor needs at least one dimension");
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: Buffer::zeros(n),
        }
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let mut t = Self::zeros(shape);
        t.data.fill(value);
        t
    }

    pub fn scalar(value: T) -> Self {
        Self::full(&[1], value)
    }

    pub fn from_f64(shape: &[usize], data: &[f64]) -> Result<Self> {
        Self::new(shape, data.iter().map(|&x| T::lit(x)).collect())
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

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data.into_vec()
    }

    pub fn bytes(&self) -> usize {
        self.data.bytes()
    }

    /// Same elements under a new shape.
    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if shape.is_empty() || n != self.numel() {
            return Err(Error::dim("reshape", &self.shape, shape));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        let data = self.data.iter().map(|x| U::lit(x.as_f64())).collect();
        Tensor {
            shape: self.shape.clone(),
            data: Buffer::from_vec(data),
        }
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|x| x.as_f64()).collect()
    }

    /// Single element of a one-element tensor.
    pub fn item(&self) -> T {
        assert_eq!(
            self.numel(),
            1,
            "item() on tensor of shape {:?}",
            self.shape
        );
        self.data[0]
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn max_abs_diff(&self, other: &Tensor<T>) -> f64 {
        self.data
            .iter()
            .zip(other.data.iter())
            .map(|(a, b)| (a.as_f64() - b.as_f64()).abs())
            .fold(0.0, f64::max)
    }

    /// i.i.d. normal entries, sampled in single precision for speed.
    pub fn randn(shape: &[usize], mean: f64, std: f64, rng: &mut InitRng) -> Self {
        let dist = Normal::new(mean as f32, std as f32).expect("finite std");
        let n = shape.iter().product();
        let data = (0..n).map(|_| T::lit(dist.sample(rng) as f64)).collect();
        Self::new(shape, data).expect("length matches shape")
    }

    /// i.i.d. uniform entries in `[lo, hi)`.
    pub fn rand_uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut InitRng) -> Self {
        let n = shape.iter().product();
        let data = (0..n)
            .map(|_| T::lit(lo + (hi - lo) * rng.random::<f64>()))
            .collect();
        Self::new(shape, data).expect("length matches shape")
    }
}

impl<T: Scalar> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        const PREVIEW: usize = 8;
        let head: Vec<_> = self.data.iter().take(PREVIEW).collect();
        write!(f, "Tensor<{}>{:?} {:?}", T::NAME, self.shape, head)?;
        if self.numel() > PREVIEW {
            write!(f, "..")?;
        }
        Ok(())
    }
}

/// Glorot/Xavier bound `sqrt(6 / (fan_in + fan_out))`.
pub fn xavier_bound(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

/// Xavier-uniform initialization of a 2-D tensor; deterministic per seed.
pub fn init_xavier_uniform<T: Scalar>(shape: &[usize], seed: u64) -> Result<Tensor<T>> {
    xavier_uniform_with(shape, &mut rng_from_seed(seed))
}

pub(crate) fn xavier_uniform_with<T: Scalar>(
    shape: &[usize],
    rng: &mut InitRng,
) -> Result<Tensor<T>> {
    if shape.len() != 2 {
        return Err(Error::Contract(format!(
            "xavier init needs a 2-D shape, got {shape:?}"
        )));
    }
    // For a (rows, cols) matrix the bound is symmetric in the two fans.
    let b = xavier_bound(shape[0], shape[1]);
    Ok(Tensor::rand_uniform(shape, -b, b, rng))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_product_must_match() {
        assert!(Tensor::<f32>::new(&[2, 3], vec![0.0; 6]).is_ok());
        assert!(matches!(
            Tensor::<f32>::new(&[2, 3], vec![0.0; 5]),
            Err(Error::Dimension { .. })
        ));
        assert!(Tensor::<f32>::new(&[], vec![]).is_err());
    }

    #[test]
    fn xavier_bound_at_reference_width() {
        let b = xavier_bound(512, 512);
        assert!((b - 0.076_54).abs() < 1e-5, "{b}");
    }

    #[test]
    fn xavier_is_deterministic_per_seed() {
        let a = init_xavier_uniform::<f32>(&[16, 8], 7).unwrap();
        let b = init_xavier_uniform::<f32>(&[16, 8], 7).unwrap();
        let c = init_xavier_uniform::<f32>(&[16, 8], 8).unwrap();
        assert_eq!(a.data(), b.data());
        assert_ne!(a.data(), c.data());
    }

    #[test]
    fn xavier_rejects_non_matrix() {
        assert!(matches!(
            init_xavier_uniform::<f32>(&[4], 0),
            Err(Error::Contract(_))
        ));
        assert!(init_xavier_uniform::<f32>(&[2, 2, 2], 0).is_err());
    }

    #[test]
    fn xavier_statistics_over_a_million_draws() {
        let t = init_xavier_uniform::<f64>(&[1000, 1000], 3).unwrap();
        let b = xavier_bound(1000, 1000);
        let max = t.data().iter().fold(0.0f64, |m, x| m.max(x.abs()));
        let mean = t.sum() / t.numel() as f64;
        assert!(max <= b);
        assert!(max > 0.99 * b);
        // std of the sample mean is b / sqrt(3e6)
        assert!(mean.abs() < 5.0 * b / (3.0e6f64).sqrt(), "{mean}");
    }

    #[test]
    fn reshape_keeps_data() {
        let t = Tensor::<f32>::from_f64(&[2, 3], &[1., 2., 3., 4., 5., 6.]).unwrap();
        let r = t.reshape(&[3, 2]).unwrap();
        assert_eq!(r.shape(), &[3, 2]);
        assert_eq!(r.data()[5], 6.0);
        assert!(r.reshape(&[4]).is_err());
    }
}
