use std::f64::consts::{FRAC_1_SQRT_2, PI};

use super::Scalar;

/// Gauss error function.
pub fn erf<T: Scalar>(x: T) -> T {
    T::from_f64(libm::erf(x.as_f64()))
}

/// `d/dx erf(x) = 2/√π · exp(−x²)`
pub fn erf_grad<T: Scalar>(x: T) -> T {
    let x = x.as_f64();
    T::from_f64(2.0 / PI.sqrt() * (-x * x).exp())
}

/// Standard normal CDF, `Φ(t) = ½(1 + erf(t/√2))`.
pub fn normal_cdf(t: f64) -> f64 {
    0.5 * (1.0 + libm::erf(t * FRAC_1_SQRT_2))
}

pub fn normal_pdf(t: f64) -> f64 {
    (-0.5 * t * t).exp() / (2.0 * PI).sqrt()
}

/// Exact GELU, `x·Φ(x)`.
pub fn gelu<T: Scalar>(x: T) -> T {
    let v = x.as_f64();
    T::from_f64(v * normal_cdf(v))
}

pub fn gelu_grad<T: Scalar>(x: T) -> T {
    let v = x.as_f64();
    T::from_f64(normal_cdf(v) + v * normal_pdf(v))
}

#[inline]
pub fn relu<T: Scalar>(x: T) -> T {
    if x > T::zero() {
        x
    } else {
        T::zero()
    }
}

/// Subgradient at 0 is 0.
#[inline]
pub fn relu_grad<T: Scalar>(x: T) -> T {
    if x > T::zero() {
        T::one()
    } else {
        T::zero()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Maclaurin series for |x| ≤ 3, Laplace continued fraction beyond.
    fn erf_oracle(x: f64) -> f64 {
        if x < 0.0 {
            return -erf_oracle(-x);
        }
        if x <= 3.0 {
            let mut term = x;
            let mut sum = x;
            for n in 1..200 {
                term *= -x * x / n as f64;
                sum += term / (2 * n + 1) as f64;
            }
            2.0 / PI.sqrt() * sum
        } else {
            let mut cf = 0.0;
            for n in (1..=120).rev() {
                cf = (n as f64 / 2.0) / (x + cf);
            }
            1.0 - (-x * x).exp() / PI.sqrt() / (x + cf)
        }
    }

    #[test]
    fn erf_zero() {
        assert_eq!(erf(0.0f64), 0.0);
    }

    #[test]
    fn erf_matches_series_oracle() {
        let v = erf(FRAC_1_SQRT_2);
        assert!((v - erf_oracle(FRAC_1_SQRT_2)).abs() < 1e-12);
        assert!((v - 0.682_689_492_137_086).abs() < 1e-12);
        assert!((erf(6.0f64) - 1.0).abs() < 1e-12);
        for i in -60..=60 {
            let x = i as f64 * 0.1;
            assert!((erf(x) - erf_oracle(x)).abs() < 1e-7, "x = {x}");
        }
    }

    #[test]
    fn erf_odd_monotone_bounded() {
        let mut prev = -1.0;
        for i in -500..=500 {
            let x = i as f64 * 0.01;
            let v = erf(x);
            assert_eq!(v, -erf(-x));
            assert!(v >= prev);
            assert!(v.abs() < 1.0 || x.abs() > 5.0);
            prev = v;
        }
    }

    #[test]
    fn gelu_at_zero() {
        assert_eq!(gelu(0.0f64), 0.0);
    }
}
