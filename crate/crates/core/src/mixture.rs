//! Isotropic Gaussian mixtures in three and two dimensions.

use std::f64::consts::PI;

use nalgebra::{Matrix2xX, Vector2, Vector3};

use crate::error::{Error, Result};
use crate::geometry::{project, Ensemble3, Rotation3};

/// `ρ(x) = Σ q_k φ_σ(x − μ_k)` with φ the isotropic Gaussian density on R³.
#[derive(Debug, Clone, PartialEq)]
pub struct RadialMixture3 {
    means: Ensemble3,
    weights: Vec<f64>,
    kernel_sigma: f64,
}

/// Projected counterpart of [`RadialMixture3`]; the 2D marginal of an
/// isotropic Gaussian keeps the same σ.
#[derive(Debug, Clone, PartialEq)]
pub struct RadialMixture2 {
    means: Matrix2xX<f64>,
    weights: Vec<f64>,
    kernel_sigma: f64,
}

fn validate(k: usize, weights: &[f64], sigma: f64) -> Result<()> {
    if k == 0 {
        return Err(Error::InvalidArgument("mixture needs at least one component".into()));
    }
    if weights.len() != k {
        return Err(Error::DimensionMismatch { expected: k, found: weights.len() });
    }
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::InvalidArgument(format!("kernel sigma must be positive, got {sigma}")));
    }
    if let Some(q) = weights.iter().find(|q| !(**q > 0.0 && q.is_finite())) {
        return Err(Error::InvalidArgument(format!("mixing weights must be positive, got {q}")));
    }
    Ok(())
}

/// Isotropic Gaussian density in d dimensions at squared distance `d2`.
#[inline]
pub fn gaussian_density(d2: f64, sigma2: f64, dim: i32) -> f64 {
    (2.0 * PI * sigma2).powf(-0.5 * dim as f64) * (-0.5 * d2 / sigma2).exp()
}

impl RadialMixture3 {
    pub fn new(means: Ensemble3, weights: Vec<f64>, kernel_sigma: f64) -> Result<Self> {
        validate(means.k(), &weights, kernel_sigma)?;
        Ok(RadialMixture3 { means, weights, kernel_sigma })
    }

    pub fn k(&self) -> usize {
        self.weights.len()
    }

    pub fn means(&self) -> &Ensemble3 {
        &self.means
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn kernel_sigma(&self) -> f64 {
        self.kernel_sigma
    }

    pub fn total_mass(&self) -> f64 {
        self.weights.iter().sum()
    }

    pub fn eval3(&self, x: &Vector3<f64>) -> f64 {
        let s2 = self.kernel_sigma * self.kernel_sigma;
        self.weights
            .iter()
            .zip(self.means.columns().column_iter())
            .map(|(q, mu)| q * gaussian_density((x - mu).norm_squared(), s2, 3))
            .sum()
    }

    /// Same weights and σ, means moved to `U μ_k`.
    pub fn rotate(&self, rotation: &Rotation3) -> RadialMixture3 {
        RadialMixture3 {
            means: self.means.transformed(rotation.matrix()),
            weights: self.weights.clone(),
            kernel_sigma: self.kernel_sigma,
        }
    }

    /// The density integrated along the third axis after rotating by `rotation`.
    pub fn project(&self, rotation: &Rotation3) -> RadialMixture2 {
        RadialMixture2 {
            means: project(rotation, &self.means),
            weights: self.weights.clone(),
            kernel_sigma: self.kernel_sigma,
        }
    }

    /// Concatenates components; both mixtures must share σ.
    pub fn merged(&self, other: &RadialMixture3) -> Result<RadialMixture3> {
        if (self.kernel_sigma - other.kernel_sigma).abs() > 0.0 {
            return Err(Error::InvalidArgument("cannot merge mixtures with different kernels".into()));
        }
        let mut pts: Vec<Vector3<f64>> = (0..self.k()).map(|i| self.means.point(i)).collect();
        pts.extend((0..other.k()).map(|i| other.means.point(i)));
        let mut w = self.weights.clone();
        w.extend_from_slice(&other.weights);
        RadialMixture3::new(Ensemble3::from_points(&pts), w, self.kernel_sigma)
    }
}

impl RadialMixture2 {
    pub fn new(means: Matrix2xX<f64>, weights: Vec<f64>, kernel_sigma: f64) -> Result<Self> {
        validate(means.ncols(), &weights, kernel_sigma)?;
        Ok(RadialMixture2 { means, weights, kernel_sigma })
    }

    pub fn k(&self) -> usize {
        self.weights.len()
    }

    pub fn means(&self) -> &Matrix2xX<f64> {
        &self.means
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn kernel_sigma(&self) -> f64 {
        self.kernel_sigma
    }

    pub fn eval2(&self, x: &Vector2<f64>) -> f64 {
        let s2 = self.kernel_sigma * self.kernel_sigma;
        self.weights
            .iter()
            .zip(self.means.column_iter())
            .map(|(q, mu)| q * gaussian_density((x - mu).norm_squared(), s2, 2))
            .sum()
    }
}

/// Four-component pyramid: σ = 0.46, q = (0.18, 0.26, 0.21, 0.35), apex μ₄ = (0, 0, 0.8).
pub fn pyramid_fixture() -> RadialMixture3 {
    let means = Ensemble3::from_points(&[
        Vector3::new(0.0, 0.8, -0.3),
        Vector3::new(0.7, -0.4, -0.3),
        Vector3::new(-0.7, -0.4, -0.3),
        Vector3::new(0.0, 0.0, 0.8),
    ]);
    RadialMixture3::new(means, vec![0.18, 0.26, 0.21, 0.35], 0.46).expect("fixture is valid")
}
