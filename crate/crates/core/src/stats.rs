//! Sample moments with standard errors.

use serde::{Deserialize, Serialize};

use crate::linalg::{Matrix, Vector};

/// Mean and standard error of independent samples.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub mean: f64,
    pub std_error: f64,
    pub count: usize,
}

impl Estimate {
    pub fn from_samples(xs: &[f64]) -> Self {
        let n = xs.len();
        if n == 0 {
            return Self::default();
        }
        let mean = xs.iter().sum::<f64>() / n as f64;
        let var = if n > 1 {
            xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64
        } else {
            0.0
        };
        Self {
            mean,
            std_error: (var / n as f64).sqrt(),
            count: n,
        }
    }

    /// Standard error of a serially correlated series from `batches`
    /// contiguous batch means.
    pub fn batch_means(xs: &[f64], batches: usize) -> Self {
        let size = xs.len() / batches.max(1);
        if size == 0 {
            return Self::from_samples(xs);
        }
        let means: Vec<f64> = xs.chunks_exact(size).map(|c| c.iter().sum::<f64>() / size as f64).collect();
        let e = Self::from_samples(&means);
        Self { count: xs.len(), ..e }
    }

    /// `|mean − target|` in units of the standard error.
    pub fn z_score(&self, target: f64) -> f64 {
        let d = self.mean - target;
        if self.std_error > 0.0 {
            d.abs() / self.std_error
        } else if d == 0.0 {
            0.0
        } else {
            f64::INFINITY
        }
    }

    pub fn within(&self, target: f64, sigmas: f64) -> bool {
        self.z_score(target) <= sigmas
    }

    /// Two-sample z statistic for equal means.
    pub fn difference_z(&self, other: &Estimate) -> f64 {
        let se = (self.std_error.powi(2) + other.std_error.powi(2)).sqrt();
        let d = (self.mean - other.mean).abs();
        if se > 0.0 {
            d / se
        } else if d == 0.0 {
            0.0
        } else {
            f64::INFINITY
        }
    }
}

/// Entrywise second moments `E[z zᵀ]` of independent vectors, with
/// standard errors.
#[derive(Debug, Clone)]
pub struct SecondMoments {
    sum: Matrix,
    sum_sq: Matrix,
    count: usize,
}

impl SecondMoments {
    pub fn new(dim: usize) -> Self {
        Self {
            sum: Matrix::zeros(dim, dim),
            sum_sq: Matrix::zeros(dim, dim),
            count: 0,
        }
    }

    pub fn push(&mut self, z: &Vector) {
        let outer = z * z.transpose();
        self.sum_sq += outer.component_mul(&outer);
        self.sum += outer;
        self.count += 1;
    }

    pub fn merge(&mut self, other: &SecondMoments) {
        self.sum += &other.sum;
        self.sum_sq += &other.sum_sq;
        self.count += other.count;
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn mean(&self) -> Matrix {
        &self.sum / self.count.max(1) as f64
    }

    pub fn std_error(&self) -> Matrix {
        let n = self.count.max(2) as f64;
        let mean = self.mean();
        let var = (&self.sum_sq / n - mean.component_mul(&mean)) * (n / (n - 1.0));
        var.map(|v| (v.max(0.0) / n).sqrt())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn estimate_of_known_samples() {
        let e = Estimate::from_samples(&[1.0, 2.0, 3.0, 4.0]);
        assert_relative_eq!(e.mean, 2.5);
        assert_relative_eq!(e.std_error, (1.666_666_666_666_666_7f64 / 4.0).sqrt(), epsilon = 1e-12);
        assert!(e.within(2.5, 0.0));
        assert_eq!(Estimate::from_samples(&[]).count, 0);
    }

    #[test]
    fn batch_means_of_constant_series() {
        let e = Estimate::batch_means(&[2.0; 100], 10);
        assert_eq!((e.mean, e.std_error, e.count), (2.0, 0.0, 100));
    }

    #[test]
    fn second_moments_accumulate() {
        let mut m = SecondMoments::new(2);
        m.push(&Vector::from_vec(vec![1.0, 2.0]));
        m.push(&Vector::from_vec(vec![-1.0, 0.0]));
        assert_eq!(m.mean(), Matrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 2.0]));
        assert_eq!(m.std_error()[(0, 0)], 0.0);
        assert_relative_eq!(m.std_error()[(0, 1)], 1.0, epsilon = 1e-12);
    }
}
