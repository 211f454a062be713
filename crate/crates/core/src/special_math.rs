//! Scalar special functions used by the truncated-normal machinery.
//!
//! Everything here works on the half line `[0, inf)`: truncated-normal
//! moments are always for truncation at zero.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const FRAC_1_SQRT_PI: f64 = 0.564_189_583_547_756_3;
const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const FRAC_2_SQRT_PI: f64 = std::f64::consts::FRAC_2_SQRT_PI;

// Cody's rational approximations (Math. Comp. 23, 1969), in the layout of
// SPECFUN CALERF. `A`/`B` cover |x| <= 0.46875, `C`/`D` cover (0.46875, 4]
// and `P`/`Q` cover x > 4 in the variable 1/x^2.
const A: [f64; 5] = [
    3.161_123_743_870_565_6,
    113.864_154_151_050_16,
    377.485_237_685_302,
    3_209.377_589_138_469_5,
    0.185_777_706_184_603_15,
];
const B: [f64; 4] = [
    23.601_290_952_344_122,
    244.024_637_934_444_17,
    1_282.616_526_077_372_3,
    2_844.236_833_439_171,
];
const C: [f64; 9] = [
    0.564_188_496_988_670_1,
    8.883_149_794_388_376,
    66.119_190_637_141_63,
    298.635_138_197_400_1,
    881.952_221_241_769,
    1_712.047_612_634_070_6,
    2_051.078_377_826_071_6,
    1_230.339_354_797_997_2,
    2.153_115_354_744_038_5e-8,
];
const D: [f64; 8] = [
    15.744_926_110_709_835,
    117.693_950_891_312_5,
    537.181_101_862_009_9,
    1_621.389_574_566_690_2,
    3_290.799_235_733_46,
    4_362.619_090_143_247,
    3_439.367_674_143_721_6,
    1_230.339_354_803_749_4,
];
const P: [f64; 6] = [
    0.305_326_634_961_232_36,
    0.360_344_899_949_804_45,
    0.125_781_726_111_229_26,
    0.016_083_785_148_742_275,
    6.587_491_615_298_378e-4,
    0.016_315_387_137_302_097,
];
const Q: [f64; 5] = [
    2.568_520_192_289_822,
    1.872_952_849_923_460_4,
    0.527_905_102_951_428_4,
    0.060_518_341_312_441_32,
    0.002_335_204_976_268_691_8,
];

const SMALL: f64 = 0.468_75;
/// Below this argument `exp(x^2)` overflows and erfcx is reported as +inf.
pub const ERFCX_NEG_LIMIT: f64 = -26.628_735_713_751_4;

fn erf_small(z: f64) -> f64 {
    let num = (((A[4] * z + A[0]) * z + A[1]) * z + A[2]) * z + A[3];
    let den = (((z + B[0]) * z + B[1]) * z + B[2]) * z + B[3];
    num / den
}

fn erfcx_mid(y: f64) -> f64 {
    let mut num = C[8] * y;
    for &c in &C[..7] {
        num = (num + c) * y;
    }
    num += C[7];
    let den = D.iter().fold(1.0, |acc, &d| acc * y + d);
    num / den
}

fn erfcx_large(y: f64) -> f64 {
    let z = 1.0 / (y * y);
    let mut num = P[5] * z;
    for &p in &P[..4] {
        num = (num + p) * z;
    }
    num += P[4];
    let den = Q.iter().fold(1.0, |acc, &q| acc * z + q);
    (FRAC_1_SQRT_PI - z * num / den) / y
}

/// `exp(x^2)` with the argument split so the rounding error of `x*x` is not
/// amplified for large `|x|`.
fn exp_square(x: f64) -> f64 {
    let xt = (x * 16.0).trunc() / 16.0;
    (xt * xt).exp() * ((x - xt) * (x + xt)).exp()
}

/// `erfcx` without input validation. Returns `+inf` below [`ERFCX_NEG_LIMIT`].
pub(crate) fn erfcx_raw(x: f64) -> f64 {
    let y = x.abs();
    if y <= SMALL {
        let z = y * y;
        return z.exp() * (1.0 - x * erf_small(z));
    }
    if x < ERFCX_NEG_LIMIT {
        return f64::INFINITY;
    }
    let tail = if y <= 4.0 { erfcx_mid(y) } else { erfcx_large(y) };
    if x < 0.0 {
        2.0 * exp_square(x) - tail
    } else {
        tail
    }
}

/// Scaled complementary error function `exp(x^2) * erfc(x)`.
///
/// Relative error is at the level of a few ulp across the representable
/// range; for `x < -26.6287` the true value exceeds `f64::MAX` and `+inf` is
/// returned.
pub fn erfcx(x: f64) -> Result<f64> {
    if !x.is_finite() {
        return Err(Error::Domain(format!("erfcx argument must be finite, got {x}")));
    }
    Ok(erfcx_raw(x))
}

/// Complementary error function, via [`erfcx`] to keep tail accuracy.
pub(crate) fn erfc_raw(x: f64) -> f64 {
    if x.abs() <= SMALL {
        return 1.0 - x * erf_small(x * x);
    }
    if x > 0.0 {
        erfcx_raw(x) / exp_square(x)
    } else {
        2.0 - erfcx_raw(-x) / exp_square(x)
    }
}

/// Upper tail probability `1 - Phi(a)` of the standard normal.
pub fn normal_sf(a: f64) -> f64 {
    0.5 * erfc_raw(a / std::f64::consts::SQRT_2)
}

/// Hazard-type ratios of the standard normal at `alpha`:
/// `(psi(a) / (1 - Phi(a)), a * psi(a) / (1 - Phi(a)))`.
///
/// Both are evaluated as `sqrt(2/pi) / erfcx(a/sqrt 2)` and
/// `(2/sqrt pi) * (a/sqrt 2) / erfcx(a/sqrt 2)`, which stay finite for any
/// finite `alpha`.
pub fn gaussian_tail_fractions(alpha: f64) -> Result<(f64, f64)> {
    if !alpha.is_finite() {
        return Err(Error::Domain(format!("alpha must be finite, got {alpha}")));
    }
    Ok(tail_fractions_raw(alpha))
}

pub(crate) fn tail_fractions_raw(alpha: f64) -> (f64, f64) {
    let t = alpha / std::f64::consts::SQRT_2;
    let e = erfcx_raw(t);
    (SQRT_2_OVER_PI / e, FRAC_2_SQRT_PI * t / e)
}

/// Above this standardised truncation point the mean shift and variance
/// factor are taken from the Laplace continued fraction, which avoids the
/// cancellation in `1 + a*m - m^2`.
const CF_SWITCH: f64 = 8.0;
const CF_TERMS: usize = 400;

/// Stable `(mills, mills - alpha, variance factor)` for a unit normal
/// truncated to `[alpha, inf)`.
pub(crate) fn tail_moments(alpha: f64) -> (f64, f64, f64) {
    if alpha <= CF_SWITCH {
        let (mills, alpha_mills) = tail_fractions_raw(alpha);
        let shift = mills - alpha;
        let var = 1.0 + alpha_mills - mills * mills;
        return (mills, shift, var);
    }
    // t_k = k / (alpha + t_{k+1}); mills = alpha + t_1.
    let mut t = [0.0f64; 4];
    let mut next = 0.0;
    for k in (1..=CF_TERMS).rev() {
        next = k as f64 / (alpha + next);
        if k <= 3 {
            t[k] = next;
        }
    }
    let (t1, t2, t3) = (t[1], t[2], t[3]);
    let var = t1 * t1 * ((alpha - t3) / (alpha + t3) + t2 * t2);
    (alpha + t1, t1, var)
}

/// Moments of `N(mu, sigma^2)` truncated to `[0, inf)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TruncNormMomentRecord {
    pub mu: f64,
    pub sigma: f64,
    /// Standardised truncation point `-mu / sigma`.
    pub alpha: f64,
    pub mills: f64,
    pub alpha_mills: f64,
    pub mu_bar: f64,
    pub sigma2_bar: f64,
}

/// Mean and variance of a normal truncated to the nonnegative half line.
pub fn trunc_normal_moments(mu: f64, sigma: f64) -> Result<TruncNormMomentRecord> {
    if !(sigma > 0.0) || !sigma.is_finite() || !mu.is_finite() {
        return Err(Error::Domain(format!(
            "truncated normal needs finite mu and sigma > 0, got ({mu}, {sigma})"
        )));
    }
    let alpha = -mu / sigma;
    let (mills, alpha_mills) = tail_fractions_raw(alpha);
    let (_, shift, var) = tail_moments(alpha);
    Ok(TruncNormMomentRecord {
        mu,
        sigma,
        alpha,
        mills,
        alpha_mills,
        // mu + sigma * mills keeps mu_bar >= mu exactly when the mean is well
        // inside the support; sigma * shift avoids cancellation in the tail
        mu_bar: if alpha < 0.0 { mu + sigma * mills } else { sigma * shift },
        sigma2_bar: var * sigma * sigma,
    })
}

/// `log(sum(exp(v)))` without overflow.
pub fn log_sum_exp(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::Domain("log_sum_exp of an empty sequence".into()));
    }
    Ok(log_sum_exp_raw(values))
}

pub(crate) fn log_sum_exp_raw(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max.is_infinite() {
        return max;
    }
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// `log(1 + exp(x))`.
#[inline]
pub(crate) fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Logistic sigmoid `1 / (1 + exp(-x))`.
#[inline]
pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) const LN_2PI: f64 = 1.837_877_066_409_345_5;
