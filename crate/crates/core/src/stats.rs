//! Normal and Student-t helpers shared by the inference and baseline modules.

use statrs::distribution::{ContinuousCDF, Normal, StudentsT};

fn standard_normal() -> Normal {
    Normal::new(0.0, 1.0).expect("unit normal")
}

/// Two-tailed standard-normal P-value, `2 (1 - Phi(|z|))`.
///
/// Evaluated through `erfc` so that large `|z|` keeps full relative precision.
pub fn p_two_tailed(z: f64) -> f64 {
    if z.is_nan() {
        return f64::NAN;
    }
    libm::erfc(z.abs() / std::f64::consts::SQRT_2).min(1.0)
}

/// Inverse of [`p_two_tailed`]: the non-negative `z` with the given two-tailed P.
pub fn z_from_p_two_tailed(p: f64) -> f64 {
    if p >= 1.0 {
        return 0.0;
    }
    if p <= 0.0 {
        return f64::INFINITY;
    }
    -standard_normal().inverse_cdf(p / 2.0)
}

pub fn normal_cdf(x: f64) -> f64 {
    standard_normal().cdf(x)
}

/// Two-tailed P for a Student-t statistic with (possibly fractional) `dof`.
pub fn student_t_p_two_tailed(t: f64, dof: f64) -> f64 {
    if t == 0.0 {
        return 1.0;
    }
    let dist = StudentsT::new(0.0, 1.0, dof).expect("positive dof");
    (2.0 * dist.sf(t.abs())).min(1.0)
}

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Unbiased sample variance.
pub fn sample_variance(xs: &[f64]) -> f64 {
    let m = mean(xs);
    xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (xs.len() as f64 - 1.0)
}
