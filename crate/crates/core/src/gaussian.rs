//! Gaussian distributions on SE(3): `x = Exp(δ)·μ` with `δ ~ N(0, Σ)`.

use nalgebra::{Vector6, linalg::SymmetricEigen};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::se3::{exp_map, Mat6, SE3Pose, Twist};

const SYMMETRY_TOL: f64 = 1e-12;
const EIGEN_TOL: f64 = 1e-12;
const JITTER: f64 = 1e-12;

#[derive(Clone, Debug)]
pub struct SE3Gaussian {
    mean: SE3Pose,
    covariance: Mat6,
    factor: Mat6,
}

impl SE3Gaussian {
    /// Factorizes `covariance` once; sampling reuses the factor.
    ///
    /// Cholesky is tried first, then Cholesky with a 1e-12 diagonal jitter.
    /// Singular PSD matrices (including `Σ = 0`) fall through to a clamped
    /// eigendecomposition so their null directions stay exactly zero.
    pub fn new(mean: SE3Pose, covariance: Mat6) -> Result<Self> {
        if !covariance.iter().all(|x| x.is_finite()) {
            return Err(Error::CovarianceNotPsd { min_eigenvalue: f64::NAN });
        }
        let asym = (covariance - covariance.transpose()).amax();
        if asym > SYMMETRY_TOL {
            return Err(Error::BadParameter(format!("covariance asymmetric by {asym:e}")));
        }
        let eig = SymmetricEigen::new(covariance);
        let min_eigenvalue = eig.eigenvalues.min();
        if min_eigenvalue < -EIGEN_TOL {
            return Err(Error::CovarianceNotPsd { min_eigenvalue });
        }
        let factor = if min_eigenvalue > 0.0 {
            match covariance.cholesky() {
                Some(c) => c.l(),
                None => match (covariance + Mat6::identity() * JITTER).cholesky() {
                    Some(c) => c.l(),
                    None => clamped_root(&eig),
                },
            }
        } else {
            clamped_root(&eig)
        };
        Ok(Self {
            mean,
            covariance,
            factor,
        })
    }

    pub fn isotropic(mean: SE3Pose, variance: f64) -> Result<Self> {
        Self::new(mean, Mat6::identity() * variance)
    }

    pub fn diagonal(mean: SE3Pose, variances: [f64; 6]) -> Result<Self> {
        Self::new(mean, Mat6::from_diagonal(&Vector6::from_column_slice(&variances)))
    }

    pub fn mean(&self) -> &SE3Pose {
        &self.mean
    }

    pub fn covariance(&self) -> &Mat6 {
        &self.covariance
    }

    /// Draws the tangent perturbation: six standard normals in index order, mapped through the factor.
    pub fn sample_twist<R: Rng + ?Sized>(&self, rng: &mut R) -> Twist {
        let z = standard_normal_twist(rng);
        Twist::from_vector(&(self.factor * z.to_vector()))
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> SE3Pose {
        exp_map(&self.sample_twist(rng)).compose(&self.mean)
    }
}

fn clamped_root(eig: &SymmetricEigen<f64, nalgebra::U6>) -> Mat6 {
    let sqrt_vals = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    eig.eigenvectors * Mat6::from_diagonal(&sqrt_vals)
}

/// Six independent N(0, 1) draws, consumed in component order.
pub fn standard_normal_twist<R: Rng + ?Sized>(rng: &mut R) -> Twist {
    let mut a = [0.0; 6];
    for v in a.iter_mut() {
        *v = rng.sample(StandardNormal);
    }
    Twist::from_array(a)
}
