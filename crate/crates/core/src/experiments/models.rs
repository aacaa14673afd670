//! Synthetic regression models with manifold-valued responses.

use std::f64::consts::TAU;

use nalgebra::{Matrix3, SymmetricEigen, Vector3};
use rand::distr::Distribution;
use rand::Rng;
use rand_distr::{Gamma, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::conformal::Observation;
use crate::error::{Error, Result};
use crate::geometry::{
    cylinder_point, normalized, orthonormalize_pair, wrap_angle, ManifoldPoint, VonMisesFisher,
};

/// `Y | X = x ~ vMF((η + βx)/‖η + βx‖, κ)` with `X ~ U(−1, 1)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SphereRegressionModel {
    pub eta: [f64; 3],
    pub beta: [f64; 3],
    pub kappa: f64,
}

impl Default for SphereRegressionModel {
    fn default() -> Self {
        Self {
            eta: [1.0, 0.0, 0.0],
            beta: [0.0, 0.0, 1.0],
            kappa: 200.0,
        }
    }
}

impl SphereRegressionModel {
    pub fn mean_direction(&self, x: f64) -> [f64; 3] {
        let v: Vec<f64> = (0..3).map(|i| self.eta[i] + self.beta[i] * x).collect();
        let u = normalized(&v);
        [u[0], u[1], u[2]]
    }

    pub fn conditional(&self, x: f64) -> Result<VonMisesFisher> {
        VonMisesFisher::new(self.mean_direction(x), self.kappa)
    }

    pub fn generate<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Result<Vec<Observation>> {
        (0..n)
            .map(|_| {
                let x = rng.random_range(-1.0..1.0);
                Ok(Observation::new(vec![x], self.conditional(x)?.sample(rng)))
            })
            .collect()
    }

    pub fn generate_at<R: Rng + ?Sized>(
        &self,
        x: f64,
        n: usize,
        rng: &mut R,
    ) -> Result<Vec<ManifoldPoint>> {
        Ok(self.conditional(x)?.sample_n(n, rng))
    }
}

/// Responses are the top-two principal directions of a Gaussian cloud
/// whose covariance rotates with `x ~ U(0, 1)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StiefelRegressionModel {
    pub cloud_size: usize,
    pub eigenvalues: [f64; 3],
}

impl Default for StiefelRegressionModel {
    fn default() -> Self {
        Self {
            cloud_size: 400,
            eigenvalues: [2.0, 1.0, 0.5],
        }
    }
}

impl StiefelRegressionModel {
    /// Raw (non-orthogonal) eigenvector directions at `x`.
    pub fn raw_directions(x: f64) -> [[f64; 3]; 3] {
        [
            [2.0 + x, 2.0 + 2.0 * x, 2.0 - x],
            [-2.0 + x, 2.0 - 3.0 * x, -2.0 + x],
            [1.0, 0.0, 0.0],
        ]
    }

    /// Orthonormal eigenbasis: Gram–Schmidt of the raw directions in order.
    pub fn eigenbasis(x: f64) -> Matrix3<f64> {
        let raw = Self::raw_directions(x);
        let mut cols: Vec<Vector3<f64>> = Vec::with_capacity(3);
        for r in raw {
            let mut v = Vector3::new(r[0], r[1], r[2]);
            for _ in 0..2 {
                for c in &cols {
                    v -= *c * c.dot(&v);
                }
            }
            cols.push(v.normalize());
        }
        Matrix3::from_columns(&cols)
    }

    pub fn covariance(&self, x: f64) -> Matrix3<f64> {
        let q = Self::eigenbasis(x);
        let l = Matrix3::from_diagonal(&Vector3::from(self.eigenvalues));
        q * l * q.transpose()
    }

    /// Population frame: the first two eigenvectors with the sign convention.
    pub fn population_frame(&self, x: f64) -> ManifoldPoint {
        let q = Self::eigenbasis(x);
        frame_from_columns(
            sign_fixed(q.column(0).into()),
            sign_fixed(q.column(1).into()),
        )
    }

    pub fn response<R: Rng + ?Sized>(&self, x: f64, rng: &mut R) -> Result<ManifoldPoint> {
        let q = Self::eigenbasis(x);
        let scale = Matrix3::from_diagonal(&Vector3::from(self.eigenvalues.map(f64::sqrt)));
        let a = q * scale;
        let m = self.cloud_size;
        if m < 3 {
            return Err(Error::InvalidParameter("cloud size must be ≥ 3".into()));
        }
        let pts: Vec<Vector3<f64>> = (0..m)
            .map(|_| {
                let z = Vector3::new(
                    StandardNormal.sample(rng),
                    StandardNormal.sample(rng),
                    StandardNormal.sample(rng),
                );
                a * z
            })
            .collect();
        let mean = pts.iter().sum::<Vector3<f64>>() / m as f64;
        let mut cov = Matrix3::zeros();
        for p in &pts {
            let d = p - mean;
            cov += d * d.transpose();
        }
        cov /= (m - 1) as f64;
        let eig = SymmetricEigen::new(cov);
        let mut order = [0usize, 1, 2];
        order.sort_by(|&i, &j| eig.eigenvalues[j].total_cmp(&eig.eigenvalues[i]));
        if (eig.eigenvalues[order[1]] - eig.eigenvalues[order[2]]).abs() < 1e-12 {
            return Err(Error::InvalidParameter(
                "degenerate sample covariance".into(),
            ));
        }
        let v1 = sign_fixed(eig.eigenvectors.column(order[0]).into());
        let v2 = sign_fixed(eig.eigenvectors.column(order[1]).into());
        Ok(frame_from_columns(v1, v2))
    }

    pub fn generate<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Result<Vec<Observation>> {
        (0..n)
            .map(|_| {
                let x: f64 = rng.random();
                Ok(Observation::new(vec![x], self.response(x, rng)?))
            })
            .collect()
    }
}

/// Flips `v` so its first nonzero entry is positive.
fn sign_fixed(v: Vector3<f64>) -> Vector3<f64> {
    match v.iter().find(|c| c.abs() > 1e-12) {
        Some(c) if *c < 0.0 => -v,
        _ => v,
    }
}

fn frame_from_columns(a: Vector3<f64>, b: Vector3<f64>) -> ManifoldPoint {
    let frame = orthonormalize_pair(a.as_slice(), b.as_slice())
        .expect("principal directions are linearly independent");
    ManifoldPoint::new(frame.to_vec())
}

/// Wind-like regression between cylinders: covariate `(θ₁, r₁)`, response
/// `(θ₂, r₂)` embedded as `(cos θ₂, sin θ₂, r₂)`. Speeds are reflected into
/// `[0, r_max]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CylinderRegressionModel {
    pub r_max: f64,
    pub speed_mean: f64,
    pub speed_sd: f64,
    pub angle_shift: f64,
    pub angle_sd: f64,
    pub slope: f64,
    pub intercept: f64,
    pub noise_sd: f64,
}

impl Default for CylinderRegressionModel {
    fn default() -> Self {
        Self {
            r_max: 20.0,
            speed_mean: 7.0,
            speed_sd: 3.5,
            angle_shift: 0.3,
            angle_sd: 0.4,
            slope: 0.8,
            intercept: 1.5,
            noise_sd: 1.5,
        }
    }
}

impl CylinderRegressionModel {
    fn reflect(&self, mut v: f64) -> f64 {
        loop {
            v = v.abs();
            if v <= self.r_max {
                return v;
            }
            v = 2.0 * self.r_max - v;
        }
    }

    pub fn covariate<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<Vec<f64>> {
        let speed = Normal::new(self.speed_mean, self.speed_sd)
            .map_err(|e| Error::InvalidParameter(e.to_string()))?;
        Ok(vec![
            rng.random::<f64>() * TAU,
            self.reflect(speed.sample(rng)),
        ])
    }

    pub fn response<R: Rng + ?Sized>(&self, x: &[f64], rng: &mut R) -> Result<ManifoldPoint> {
        let angle = Normal::new(self.angle_shift, self.angle_sd)
            .map_err(|e| Error::InvalidParameter(e.to_string()))?;
        let noise =
            Normal::new(0.0, self.noise_sd).map_err(|e| Error::InvalidParameter(e.to_string()))?;
        let theta = wrap_angle(x[0] + angle.sample(rng));
        let r = self.reflect(self.intercept + self.slope * x[1] + noise.sample(rng));
        Ok(cylinder_point(theta, r))
    }

    pub fn generate<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Result<Vec<Observation>> {
        (0..n)
            .map(|_| {
                let x = self.covariate(rng)?;
                let y = self.response(&x, rng)?;
                Ok(Observation::new(x, y))
            })
            .collect()
    }
}

/// Labelled class-probability vectors on Δ² with Gaussian features, used to
/// exercise the simplex pipeline without the vehicle data. Class `k` puts
/// Gamma(1 + concentrations[k]) weight on its own vertex and Gamma(1) on the
/// others, so classes differ in how sharply their probabilities peak.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimplexClassModel {
    pub n_features: usize,
    pub separation: f64,
    pub concentrations: [f64; 3],
}

impl Default for SimplexClassModel {
    fn default() -> Self {
        Self {
            n_features: 5,
            separation: 3.0,
            concentrations: [24.0, 3.0, 8.0],
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabelledProbability {
    pub label: usize,
    pub probabilities: [f64; 3],
    pub features: Vec<f64>,
}

impl SimplexClassModel {
    pub fn generate<R: Rng + ?Sized>(
        &self,
        n: usize,
        rng: &mut R,
    ) -> Result<Vec<LabelledProbability>> {
        let map = |e: rand_distr::GammaError| Error::InvalidParameter(e.to_string());
        let strong = self
            .concentrations
            .iter()
            .map(|&c| Gamma::new(1.0 + c, 1.0).map_err(map))
            .collect::<Result<Vec<_>>>()?;
        let weak = Gamma::new(1.0, 1.0).map_err(map)?;
        (0..n)
            .map(|_| {
                let label = rng.random_range(0..3);
                let g: [f64; 3] = std::array::from_fn(|k| {
                    if k == label {
                        strong[label].sample(rng)
                    } else {
                        weak.sample(rng)
                    }
                });
                let total: f64 = g.iter().sum();
                let probabilities = g.map(|v| v / total);
                let features = (0..self.n_features)
                    .map(|f| {
                        let centre = if f % 3 == label { self.separation } else { 0.0 };
                        let z: f64 = StandardNormal.sample(rng);
                        centre + z
                    })
                    .collect();
                Ok(LabelledProbability {
                    label,
                    probabilities,
                    features,
                })
            })
            .collect()
    }
}
