//! Embedded manifolds, ambient distances and samplers.
//!
//! Points are always stored by their ambient coordinates. A 3×2 Stiefel
//! frame is stored column-major as `(c1x, c1y, c1z, c2x, c2y, c2z)`; a point
//! on the truncated cylinder as `(cos θ, sin θ, r)`.

use std::f64::consts::{PI, TAU};

use rand::distr::Distribution;
use rand::Rng;
use rand_distr::{Exp1, StandardNormal, UnitSphere};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Absolute tolerance used by every manifold membership test.
pub const MEMBERSHIP_TOL: f64 = 1e-9;

/// Default truncation radius of the cylinder (wind speeds up to 20 m/s).
pub const DEFAULT_CYLINDER_RMAX: f64 = 20.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ManifoldPoint {
    coords: Vec<f64>,
}

impl ManifoldPoint {
    pub fn new(coords: Vec<f64>) -> Self {
        Self { coords }
    }

    pub fn coords(&self) -> &[f64] {
        &self.coords
    }

    pub fn dim(&self) -> usize {
        self.coords.len()
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.coords
    }
}

impl From<Vec<f64>> for ManifoldPoint {
    fn from(coords: Vec<f64>) -> Self {
        Self::new(coords)
    }
}

impl From<[f64; 3]> for ManifoldPoint {
    fn from(coords: [f64; 3]) -> Self {
        Self::new(coords.to_vec())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ManifoldKind {
    /// Unit sphere S² in R³.
    Sphere2,
    /// 3×2 matrices with orthonormal columns, embedded in R⁶.
    Stiefel32,
    /// S¹ × [0, r_max] embedded as (cos θ, sin θ, r).
    CylinderTruncated { r_max: f64 },
    /// Probability simplex Δ² in R³.
    Simplex2,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmbeddedManifold {
    kind: ManifoldKind,
}

impl EmbeddedManifold {
    pub fn sphere() -> Self {
        Self {
            kind: ManifoldKind::Sphere2,
        }
    }

    pub fn stiefel() -> Self {
        Self {
            kind: ManifoldKind::Stiefel32,
        }
    }

    pub fn cylinder(r_max: f64) -> Result<Self> {
        if !(r_max > 0.0 && r_max.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "cylinder r_max must be positive, got {r_max}"
            )));
        }
        Ok(Self {
            kind: ManifoldKind::CylinderTruncated { r_max },
        })
    }

    pub fn simplex() -> Self {
        Self {
            kind: ManifoldKind::Simplex2,
        }
    }

    pub fn kind(&self) -> ManifoldKind {
        self.kind
    }

    pub fn ambient_dim(&self) -> usize {
        match self.kind {
            ManifoldKind::Stiefel32 => 6,
            _ => 3,
        }
    }

    pub fn intrinsic_dim(&self) -> usize {
        match self.kind {
            ManifoldKind::Stiefel32 => 3,
            _ => 2,
        }
    }

    /// Volume ν(M) for the metric induced by the ambient Euclidean space.
    ///
    /// For the Stiefel manifold the rotation mixing the two columns has
    /// Frobenius length √2 per radian, hence 4π · 2π · √2.
    pub fn total_volume(&self) -> f64 {
        match self.kind {
            ManifoldKind::Sphere2 => 4.0 * PI,
            ManifoldKind::Stiefel32 => 8.0 * std::f64::consts::SQRT_2 * PI * PI,
            ManifoldKind::CylinderTruncated { r_max } => TAU * r_max,
            ManifoldKind::Simplex2 => 3f64.sqrt() / 2.0,
        }
    }

    pub fn contains(&self, p: &[f64]) -> bool {
        if p.len() != self.ambient_dim() || p.iter().any(|v| !v.is_finite()) {
            return false;
        }
        let tol = MEMBERSHIP_TOL;
        match self.kind {
            ManifoldKind::Sphere2 => (norm(p) - 1.0).abs() <= tol,
            ManifoldKind::Stiefel32 => {
                let (a, b) = p.split_at(3);
                (norm(a) - 1.0).abs() <= tol
                    && (norm(b) - 1.0).abs() <= tol
                    && dot(a, b).abs() <= tol
            }
            ManifoldKind::CylinderTruncated { r_max } => {
                (p[0].hypot(p[1]) - 1.0).abs() <= tol && p[2] >= -tol && p[2] <= r_max + tol
            }
            ManifoldKind::Simplex2 => {
                p.iter().all(|&v| v >= -tol) && (p.iter().sum::<f64>() - 1.0).abs() <= tol
            }
        }
    }

    /// Draws `n` i.i.d. points from the normalized volume measure.
    pub fn uniform_sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Vec<ManifoldPoint> {
        (0..n).map(|_| self.uniform_point(rng)).collect()
    }

    pub fn uniform_point<R: Rng + ?Sized>(&self, rng: &mut R) -> ManifoldPoint {
        match self.kind {
            ManifoldKind::Sphere2 => {
                let v: [f64; 3] = UnitSphere.sample(rng);
                ManifoldPoint::new(normalized(&v))
            }
            ManifoldKind::Stiefel32 => HaarStiefel.sample(rng),
            ManifoldKind::CylinderTruncated { r_max } => {
                let theta = rng.random::<f64>() * TAU;
                let r = rng.random::<f64>() * r_max;
                cylinder_point(theta, r)
            }
            ManifoldKind::Simplex2 => {
                let e: [f64; 3] = [Exp1.sample(rng), Exp1.sample(rng), Exp1.sample(rng)];
                let total: f64 = e.iter().sum();
                ManifoldPoint::new(e.iter().map(|v| v / total).collect())
            }
        }
    }
}

/// Euclidean distance between ambient coordinates.
pub fn ambient_distance(a: &ManifoldPoint, b: &ManifoldPoint) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::DimensionMismatch {
            expected: a.dim(),
            got: b.dim(),
        });
    }
    Ok(squared_distance(a.coords(), b.coords()).sqrt())
}

#[inline]
pub(crate) fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

pub(crate) fn normalized(a: &[f64]) -> Vec<f64> {
    let n = norm(a);
    a.iter().map(|v| v / n).collect()
}

pub(crate) fn cross(a: &[f64], b: &[f64]) -> [f64; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

/// Two unit vectors completing `mu` to an orthonormal basis.
fn tangent_frame(mu: &[f64; 3]) -> ([f64; 3], [f64; 3]) {
    // pick the axis least aligned with mu
    let axis = (0..3)
        .min_by(|&i, &j| mu[i].abs().total_cmp(&mu[j].abs()))
        .unwrap_or(0);
    let mut e = [0.0; 3];
    e[axis] = 1.0;
    let u = cross(mu, &e);
    let un = norm(&u);
    let e1 = [u[0] / un, u[1] / un, u[2] / un];
    let e2 = cross(mu, &e1);
    (e1, e2)
}

pub fn cylinder_point(theta: f64, r: f64) -> ManifoldPoint {
    ManifoldPoint::new(vec![theta.cos(), theta.sin(), r])
}

/// Inverse of [`cylinder_point`]; the angle is returned in `[0, 2π)`.
pub fn cylinder_coords(p: &ManifoldPoint) -> (f64, f64) {
    let c = p.coords();
    (wrap_angle(c[1].atan2(c[0])), c[2])
}

pub fn wrap_angle(theta: f64) -> f64 {
    let t = theta.rem_euclid(TAU);
    // rem_euclid can return TAU itself for tiny negative inputs
    if t >= TAU {
        0.0
    } else {
        t
    }
}

/// Haar-distributed 3×2 orthonormal frames: Gram–Schmidt on a Gaussian
/// matrix, which is QR with a positive diagonal for R.
#[derive(Clone, Copy, Debug, Default)]
pub struct HaarStiefel;

impl Distribution<ManifoldPoint> for HaarStiefel {
    fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> ManifoldPoint {
        loop {
            let g: [f64; 6] = std::array::from_fn(|_| StandardNormal.sample(rng));
            if let Some(frame) = orthonormalize_pair(&g[..3], &g[3..]) {
                return ManifoldPoint::new(frame.to_vec());
            }
        }
    }
}

/// Gram–Schmidt of two vectors in R³, returned column-major. `None` when
/// the pair is numerically dependent.
pub(crate) fn orthonormalize_pair(a: &[f64], b: &[f64]) -> Option<[f64; 6]> {
    let na = norm(a);
    if na < 1e-12 {
        return None;
    }
    let q1 = [a[0] / na, a[1] / na, a[2] / na];
    let p = dot(&q1, b);
    let r = [b[0] - p * q1[0], b[1] - p * q1[1], b[2] - p * q1[2]];
    // second pass for orthogonality at double precision
    let p2 = dot(&q1, &r);
    let r = [r[0] - p2 * q1[0], r[1] - p2 * q1[1], r[2] - p2 * q1[2]];
    let nr = norm(&r);
    if nr < 1e-12 {
        return None;
    }
    Some([q1[0], q1[1], q1[2], r[0] / nr, r[1] / nr, r[2] / nr])
}

/// von Mises–Fisher distribution on S².
#[derive(Clone, Debug, PartialEq)]
pub struct VonMisesFisher {
    mu: [f64; 3],
    kappa: f64,
    e1: [f64; 3],
    e2: [f64; 3],
}

impl VonMisesFisher {
    pub fn new(mu: [f64; 3], kappa: f64) -> Result<Self> {
        if !(kappa > 0.0 && kappa.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "vMF concentration must be positive, got {kappa}"
            )));
        }
        if (norm(&mu) - 1.0).abs() > MEMBERSHIP_TOL {
            return Err(Error::InvalidParameter(format!(
                "vMF mean direction must be a unit vector, got {mu:?}"
            )));
        }
        let (e1, e2) = tangent_frame(&mu);
        Ok(Self { mu, kappa, e1, e2 })
    }

    pub fn mean_direction(&self) -> [f64; 3] {
        self.mu
    }

    pub fn kappa(&self) -> f64 {
        self.kappa
    }

    /// Normalizing constant C₃(κ) = κ / (4π sinh κ), as a log.
    fn log_norm_at_mode(&self) -> f64 {
        // C₃(κ)·e^κ = κ / (2π (1 − e^{−2κ}))
        let k = self.kappa;
        k.ln() - TAU.ln() - (-(-2.0 * k).exp_m1()).ln()
    }

    /// Density with respect to surface measure on S².
    pub fn density(&self, y: &[f64]) -> f64 {
        self.density_at_cosine(dot(&self.mu, y))
    }

    /// Density at any point with `μᵀy = t`.
    pub fn density_at_cosine(&self, t: f64) -> f64 {
        (self.log_norm_at_mode() + self.kappa * (t - 1.0)).exp()
    }

    /// Mean resultant length A₃(κ) = coth κ − 1/κ.
    pub fn mean_resultant_length(&self) -> f64 {
        let k = self.kappa;
        1.0 / k.tanh() - 1.0 / k
    }

    /// Value `c` with P(μᵀY ≥ c) = mass.
    pub fn cap_threshold(&self, mass: f64) -> f64 {
        let k = self.kappa;
        // e^{κc} = e^κ − mass (e^κ − e^{−κ})
        1.0 + ((1.0 - mass) + mass * (-2.0 * k).exp()).ln() / k
    }

    pub fn sample_n<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Vec<ManifoldPoint> {
        (0..n).map(|_| self.sample(rng)).collect()
    }
}

impl Distribution<ManifoldPoint> for VonMisesFisher {
    fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> ManifoldPoint {
        let k = self.kappa;
        let u: f64 = rng.random();
        // inverse CDF of t = μᵀy, density κ e^{κt} / (2 sinh κ) on [−1, 1]
        let t = (1.0 + ((1.0 - u) * (-2.0 * k).exp_m1()).ln_1p() / k).clamp(-1.0, 1.0);
        let s = (1.0 - t * t).max(0.0).sqrt();
        let phi = rng.random::<f64>() * TAU;
        let (sp, cp) = phi.sin_cos();
        let v: Vec<f64> = (0..3)
            .map(|i| t * self.mu[i] + s * (cp * self.e1[i] + sp * self.e2[i]))
            .collect();
        ManifoldPoint::new(normalized(&v))
    }
}

/// Draws `n` vMF points.
pub fn vmf_sample<R: Rng + ?Sized>(
    mu: [f64; 3],
    kappa: f64,
    n: usize,
    rng: &mut R,
) -> Result<Vec<ManifoldPoint>> {
    Ok(VonMisesFisher::new(mu, kappa)?.sample_n(n, rng))
}

pub fn vmf_density(mu: [f64; 3], kappa: f64, y: &ManifoldPoint) -> Result<f64> {
    Ok(VonMisesFisher::new(mu, kappa)?.density(y.coords()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::substream;
    use approx::assert_relative_eq;

    #[test]
    fn distance_examples() {
        let a = ManifoldPoint::from([1.0, 0.0, 0.0]);
        let b = ManifoldPoint::from([-1.0, 0.0, 0.0]);
        assert_eq!(ambient_distance(&a, &a).unwrap(), 0.0);
        assert_eq!(ambient_distance(&a, &b).unwrap(), 2.0);

        // difference (1,−1,0,−1,1,0) has squared norm 4
        let id = ManifoldPoint::new(vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0]);
        let swapped = ManifoldPoint::new(vec![0.0, 1.0, 0.0, 1.0, 0.0, 0.0]);
        assert_eq!(ambient_distance(&id, &swapped).unwrap(), 2.0);

        let short = ManifoldPoint::new(vec![1.0, 0.0]);
        assert!(matches!(
            ambient_distance(&a, &short),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn membership_examples() {
        let s = EmbeddedManifold::sphere();
        assert!(s.contains(&[0.0, 0.0, 1.0]));
        assert!(!s.contains(&[0.0, 0.0, 1.1]));
        assert!(!s.contains(&[0.0, 1.0]));
        assert!(EmbeddedManifold::simplex().contains(&[0.845, 0.01, 0.145]));
        assert!(!EmbeddedManifold::simplex().contains(&[0.9, 0.2, -0.1]));
        let c = EmbeddedManifold::cylinder(20.0).unwrap();
        assert!(c.contains(cylinder_point(2.3, 5.1).coords()));
        assert!(!c.contains(cylinder_point(2.3, 20.5).coords()));
        assert!(EmbeddedManifold::cylinder(0.0).is_err());
    }

    #[test]
    fn volumes() {
        assert_relative_eq!(EmbeddedManifold::sphere().total_volume(), 4.0 * PI);
        assert_relative_eq!(
            EmbeddedManifold::cylinder(20.0).unwrap().total_volume(),
            40.0 * PI
        );
        assert_relative_eq!(
            EmbeddedManifold::simplex().total_volume(),
            0.866_025_403_784_438_6
        );
        assert_eq!(EmbeddedManifold::stiefel().intrinsic_dim(), 3);
        assert_eq!(EmbeddedManifold::stiefel().ambient_dim(), 6);
    }

    #[test]
    fn uniform_sphere_is_centred() {
        let mut rng = substream(11, "sphere");
        let pts = EmbeddedManifold::sphere().uniform_sample(100_000, &mut rng);
        let mut mean = [0.0; 3];
        for p in &pts {
            for (acc, c) in mean.iter_mut().zip(p.coords()) {
                *acc += c / pts.len() as f64;
            }
        }
        assert!(norm(&mean) < 0.02, "{mean:?}");
    }

    #[test]
    fn uniform_cylinder_radius_mean() {
        let m = EmbeddedManifold::cylinder(20.0).unwrap();
        let mut rng = substream(12, "cyl");
        let pts = m.uniform_sample(100_000, &mut rng);
        let mean_r = pts.iter().map(|p| p.coords()[2]).sum::<f64>() / pts.len() as f64;
        assert!((mean_r - 10.0).abs() < 0.2, "{mean_r}");
    }

    #[test]
    fn every_sample_is_on_its_manifold() {
        let mut rng = substream(13, "all");
        for m in [
            EmbeddedManifold::sphere(),
            EmbeddedManifold::stiefel(),
            EmbeddedManifold::cylinder(20.0).unwrap(),
            EmbeddedManifold::simplex(),
        ] {
            for p in m.uniform_sample(10_000, &mut rng) {
                assert!(m.contains(p.coords()), "{m:?} {p:?}");
            }
        }
    }

    #[test]
    fn vmf_resultant_length_and_direction() {
        let vmf = VonMisesFisher::new([1.0, 0.0, 0.0], 200.0).unwrap();
        let expected = vmf.mean_resultant_length();
        assert_relative_eq!(expected, 0.995, epsilon = 1e-12);
        let mut rng = substream(3, "vmf");
        let pts = vmf.sample_n(10_000, &mut rng);
        let mut s = [0.0; 3];
        for p in &pts {
            for (acc, c) in s.iter_mut().zip(p.coords()) {
                *acc += c / pts.len() as f64;
            }
        }
        let rbar = norm(&s);
        assert!((rbar - 0.995).abs() < 0.003, "{rbar}");
        let angle = (s[0] / rbar).acos();
        assert!(angle < 0.02, "{angle}");
        assert!(pts
            .iter()
            .all(|p| EmbeddedManifold::sphere().contains(p.coords())));
    }

    #[test]
    fn vmf_rejects_bad_parameters() {
        assert!(VonMisesFisher::new([1.0, 0.0, 0.0], 0.0).is_err());
        assert!(VonMisesFisher::new([1.0, 0.0, 0.0], -1.0).is_err());
        assert!(VonMisesFisher::new([1.0, 1.0, 0.0], 1.0).is_err());
    }

    #[test]
    fn vmf_single_draw_is_seeded() {
        let a = vmf_sample([0.0, 0.0, 1.0], 3.0, 1, &mut substream(5, "x")).unwrap();
        let b = vmf_sample([0.0, 0.0, 1.0], 3.0, 1, &mut substream(5, "x")).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn vmf_density_limits() {
        let y = ManifoldPoint::from([0.0, 0.6, 0.8]);
        let near_uniform = vmf_density([1.0, 0.0, 0.0], 1e-6, &y).unwrap();
        assert_relative_eq!(near_uniform, 1.0 / (4.0 * PI), max_relative = 1e-5);

        let mode = ManifoldPoint::from([1.0, 0.0, 0.0]);
        let peak = vmf_density([1.0, 0.0, 0.0], 200.0, &mode).unwrap();
        // 200 e^200 / (4π sinh 200) = 200 / (2π (1 − e^{−400}))
        assert_relative_eq!(peak, 200.0 / TAU, max_relative = 1e-12);
    }

    #[test]
    fn vmf_density_integrates_to_one() {
        let vmf = VonMisesFisher::new([0.0, 0.0, 1.0], 5.0).unwrap();
        let s = EmbeddedManifold::sphere();
        let mut rng = substream(21, "mc");
        let n = 1_000_000;
        let total: f64 = (0..n)
            .map(|_| vmf.density(s.uniform_point(&mut rng).coords()))
            .sum::<f64>()
            * s.total_volume()
            / n as f64;
        assert!((total - 1.0).abs() < 0.01, "{total}");
    }

    #[test]
    fn vmf_cap_threshold_examples() {
        let vmf = VonMisesFisher::new([1.0, 0.0, 0.0], 200.0).unwrap();
        assert_relative_eq!(vmf.cap_threshold(0.9), 0.988_487_074_8, epsilon = 1e-9);
        assert_relative_eq!(
            vmf.cap_threshold(0.5),
            1.0 + 0.5f64.ln() / 200.0,
            epsilon = 1e-12
        );
    }

    #[test]
    fn cylinder_round_trip() {
        let p = cylinder_point(5.9, 3.3);
        let (t, r) = cylinder_coords(&p);
        assert_relative_eq!(t, 5.9, epsilon = 1e-12);
        assert_eq!(r, 3.3);
        assert_eq!(wrap_angle(-1e-20), 0.0);
    }
}
