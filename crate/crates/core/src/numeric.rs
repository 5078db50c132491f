//! Scalar abstraction for the solver core and compensated summation helpers.

use std::fmt::{Debug, Display};

use num_traits::{Float, FromPrimitive, NumAssign, ToPrimitive};

/// Floating-point scalar accepted by the LP / MILP core.
///
/// Tolerance defaults are per type: the simplex is usable in `f32` but
/// needs looser pivot and feasibility thresholds than in `f64`.
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + NumAssign + Debug + Display + Send + Sync + 'static
{
    /// Smallest pivot magnitude the simplex accepts.
    fn default_lp_tol() -> Self;
    /// Distance from {0, 1} under which a binary counts as integral.
    fn default_integrality_tol() -> Self;

    fn lit(v: f64) -> Self {
        Self::from_f64(v).expect("literal representable in scalar type")
    }
}

impl Scalar for f64 {
    fn default_lp_tol() -> Self {
        1e-9
    }
    fn default_integrality_tol() -> Self {
        1e-6
    }
}

impl Scalar for f32 {
    fn default_lp_tol() -> Self {
        1e-5
    }
    fn default_integrality_tol() -> Self {
        1e-4
    }
}

/// Neumaier-compensated sum.
pub fn ksum<T: Scalar, I: IntoIterator<Item = T>>(values: I) -> T {
    let mut sum = T::zero();
    let mut comp = T::zero();
    for v in values {
        let t = sum + v;
        if sum.abs() >= v.abs() {
            comp += (sum - t) + v;
        } else {
            comp += (v - t) + sum;
        }
        sum = t;
    }
    sum + comp
}

pub fn kmean<I: IntoIterator<Item = f64>>(values: I) -> f64 {
    let mut n = 0usize;
    let s = ksum(values.into_iter().inspect(|_| n += 1));
    if n == 0 {
        f64::NAN
    } else {
        s / n as f64
    }
}

/// Mean and standard deviation with an `n` (population) denominator.
pub fn mean_sd_population(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = ksum(values.iter().copied()) / n;
    let var = ksum(values.iter().map(|v| (v - mean) * (v - mean))) / n;
    (mean, var.sqrt())
}

/// Sample standard deviation (`n - 1` denominator) and the delta-method
/// standard error of that estimate.
pub fn sample_sd_with_se(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = ksum(values.iter().copied()) / n;
    let m2 = ksum(values.iter().map(|v| (v - mean).powi(2))) / n;
    let m4 = ksum(values.iter().map(|v| (v - mean).powi(4))) / n;
    let var = m2 * n / (n - 1.0);
    let sd = var.sqrt();
    if sd == 0.0 {
        return (0.0, 0.0);
    }
    // Var(s^2) ~ (m4 - m2^2) / n, then SE(s) = SE(s^2) / (2 s)
    let var_s2 = ((m4 - m2 * m2) / n).max(0.0);
    (sd, var_s2.sqrt() / (2.0 * sd))
}

/// Binomial coefficient as f64 (exact for the sizes enumerated here).
pub fn binomial(n: usize, k: usize) -> f64 {
    if k > n {
        return 0.0;
    }
    let k = k.min(n - k);
    let mut acc = 1.0f64;
    for i in 0..k {
        acc = acc * (n - i) as f64 / (i + 1) as f64;
    }
    acc.round()
}
