//! Rank and circular correlation statistics.

use crate::error::{Error, Result};

fn check_pair(x: &[f64], y: &[f64]) -> Result<()> {
    if x.len() != y.len() {
        return Err(Error::LengthMismatch {
            left: x.len(),
            right: y.len(),
        });
    }
    if x.len() < 2 {
        return Err(Error::InvalidParameter("need at least two pairs".into()));
    }
    if x.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(Error::InvalidParameter(
            "non-finite value in correlation input".into(),
        ));
    }
    Ok(())
}

fn gcd(mut a: u128, mut b: u128) -> u128 {
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a
}

/// Chatterjee's ξ_n of `y` on `x`. Ties in `x` keep input order; ties in
/// `y` use the general form with `l_i = #{j : y_j ≥ y_(i)}`.
///
/// The statistic is `1 − n Σ|r_{i+1} − r_i| / (2 Σ l_i (n − l_i))`, evaluated
/// as an exact integer ratio before the single final division.
pub fn xi_correlation(x: &[f64], y: &[f64]) -> Result<f64> {
    check_pair(x, y)?;
    let n = x.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| x[i].total_cmp(&x[j]));
    let mut ys: Vec<f64> = y.to_vec();
    ys.sort_by(f64::total_cmp);
    // r = #{y_j ≤ v}, l = #{y_j ≥ v}
    let r = |v: f64| ys.partition_point(|&w| w <= v) as u128;
    let l = |v: f64| (n - ys.partition_point(|&w| w < v)) as u128;

    let ranks: Vec<u128> = order.iter().map(|&i| r(y[i])).collect();
    let jumps: u128 = ranks.windows(2).map(|w| w[0].abs_diff(w[1])).sum();
    let nn = n as u128;
    let spread: u128 = y.iter().map(|&v| l(v) * (nn - l(v))).sum();
    if spread == 0 {
        return Err(Error::ZeroVariance);
    }
    let (num, den) = (nn * jumps, 2 * spread);
    let g = gcd(num, den).max(1);
    Ok(1.0 - (num / g) as f64 / (den / g) as f64)
}

/// atan2 of the summed unit vectors.
pub fn circular_mean(theta: &[f64]) -> f64 {
    let (s, c) = theta
        .iter()
        .fold((0.0, 0.0), |(s, c), t| (s + t.sin(), c + t.cos()));
    s.atan2(c)
}

/// Pearson correlation of `sin(θ₁ − θ̄₁)` and `sin(θ₂ − θ̄₂)`, with θ̄ the
/// circular means.
pub fn angular_correlation(theta1: &[f64], theta2: &[f64]) -> Result<f64> {
    check_pair(theta1, theta2)?;
    let deviations = |theta: &[f64]| {
        let m = circular_mean(theta);
        theta.iter().map(|t| (t - m).sin()).collect::<Vec<f64>>()
    };
    pearson(&deviations(theta1), &deviations(theta2))
}

pub fn pearson(a: &[f64], b: &[f64]) -> Result<f64> {
    check_pair(a, b)?;
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (da, db) = (x - ma, y - mb);
        sab += da * db;
        saa += da * da;
        sbb += db * db;
    }
    if saa == 0.0 || sbb == 0.0 {
        return Err(Error::ZeroVariance);
    }
    let prod = saa * sbb;
    let denom = if prod.is_finite() && prod > 0.0 {
        prod.sqrt()
    } else {
        saa.sqrt() * sbb.sqrt()
    };
    Ok((sab / denom).clamp(-1.0, 1.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::substream;
    use rand::Rng;

    #[test]
    fn xi_of_monotone_data() {
        for n in [2usize, 3, 10, 97, 1000] {
            let x: Vec<f64> = (0..n).map(|i| i as f64).collect();
            assert_eq!(
                xi_correlation(&x, &x).unwrap(),
                1.0 - 3.0 / (n as f64 + 1.0)
            );
        }
        let x: Vec<f64> = (0..10).map(|i| i as f64).collect();
        assert!((xi_correlation(&x, &x).unwrap() - 8.0 / 11.0).abs() < 1e-15);
    }

    #[test]
    fn xi_against_textbook_formula() {
        // no ties: 1 − 3 Σ|Δr| / (n² − 1)
        let mut rng = substream(3, "xi");
        let n = 50;
        let x: Vec<f64> = (0..n).map(|_| rng.random()).collect();
        let y: Vec<f64> = x
            .iter()
            .map(|v| (6.0 * v).sin() + 0.3 * rng.random::<f64>())
            .collect();
        let mut idx: Vec<usize> = (0..n).collect();
        idx.sort_by(|&i, &j| x[i].total_cmp(&x[j]));
        let rank = |v: f64| y.iter().filter(|&&w| w <= v).count() as f64;
        let s: f64 = idx
            .windows(2)
            .map(|w| (rank(y[w[1]]) - rank(y[w[0]])).abs())
            .sum();
        let nf = n as f64;
        let expected = 1.0 - 3.0 * s / (nf * nf - 1.0);
        assert!((xi_correlation(&x, &y).unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn xi_near_zero_under_independence() {
        let mut rng = substream(4, "xi");
        let x: Vec<f64> = (0..10_000).map(|_| rng.random()).collect();
        let y: Vec<f64> = (0..10_000).map(|_| rng.random()).collect();
        assert!(xi_correlation(&x, &y).unwrap().abs() < 0.03);
    }

    #[test]
    fn xi_errors() {
        assert!(matches!(
            xi_correlation(&[1.0, 2.0], &[1.0]),
            Err(Error::LengthMismatch { .. })
        ));
        assert!(matches!(
            xi_correlation(&[1.0, 2.0], &[3.0, 3.0]),
            Err(Error::ZeroVariance)
        ));
        assert!(xi_correlation(&[1.0], &[1.0]).is_err());
    }

    #[test]
    fn angular_identity_and_reflection() {
        let mut rng = substream(5, "ang");
        let t: Vec<f64> = (0..200).map(|_| rng.random_range(0.0..6.2)).collect();
        assert_eq!(angular_correlation(&t, &t).unwrap(), 1.0);
        let neg: Vec<f64> = t.iter().map(|v| -v).collect();
        assert!((angular_correlation(&t, &neg).unwrap() + 1.0).abs() < 1e-12);
        assert!(matches!(
            angular_correlation(&[1.0, 1.0], &[0.0, 2.0]),
            Err(Error::ZeroVariance)
        ));
    }

    #[test]
    fn circular_mean_wraps() {
        let m = circular_mean(&[0.1, std::f64::consts::TAU - 0.1]);
        assert!(m.abs() < 1e-12);
    }
}
